#pragma once

// Binary checkpoint, little-endian:
//
//   magic      8 bytes  "DOSCKPT\0"
//   version    u32      (currently 1)
//   config     10 x i64 n_layers, n_heads, d_model, max_len, vocab_size,
//                       batch_size, train_steps, seed,
//                       bit pattern of learning_rate, bit pattern of t_min
//   count      u64      number of tensors
//   tensors    count x { u32 ndim, ndim x u64 dims, prod(dims) x f64 }
//
// Tensors appear in the fixed order documented on nn::Params.

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>

#include "dos/nn.hpp"

namespace dos::nn {

inline constexpr std::array<char, 8> kCheckpointMagic = {'D', 'O', 'S', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

template <class UInt>
void put_le(std::ostream& out, UInt v) {
    std::array<char, sizeof(UInt)> buf{};
    for (std::size_t i = 0; i < sizeof(UInt); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(buf.data(), buf.size());
}

template <class UInt>
UInt get_le(std::istream& in, const char* what) {
    std::array<unsigned char, sizeof(UInt)> buf{};
    in.read(reinterpret_cast<char*>(buf.data()), buf.size());
    if (in.gcount() != static_cast<std::streamsize>(buf.size())) {
        throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
    }
    UInt v = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) v |= static_cast<UInt>(buf[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline void write_checkpoint(const Params& params, std::ostream& out) {
    using detail::put_le;
    const auto& c = params.config();
    out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    put_le<std::uint32_t>(out, kCheckpointVersion);
    for (std::int64_t v : {std::int64_t{c.n_layers}, std::int64_t{c.n_heads}, std::int64_t{c.d_model},
                           std::int64_t{c.max_len}, std::int64_t{c.vocab_size}, std::int64_t{c.batch_size},
                           std::int64_t{c.train_steps}}) {
        put_le<std::uint64_t>(out, static_cast<std::uint64_t>(v));
    }
    put_le<std::uint64_t>(out, c.seed);
    put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(c.learning_rate));
    put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(c.t_min));
    put_le<std::uint64_t>(out, params.tensors().size());
    for (const auto& t : params.tensors()) {
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
        for (auto s : t.shape) put_le<std::uint64_t>(out, s);
        for (double x : t.data) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(x));
    }
}

/// Reads a checkpoint. When `expected` is given, every architectural field
/// must match it; the first mismatch is reported by name.
inline Params read_checkpoint(std::istream& in, const std::optional<TransformerConfig>& expected = std::nullopt) {
    using detail::get_le;
    std::array<char, 8> magic{};
    in.read(magic.data(), magic.size());
    if (in.gcount() != static_cast<std::streamsize>(magic.size())) throw CheckpointError("checkpoint truncated in magic header");
    if (magic != kCheckpointMagic) throw CheckpointError("not a checkpoint file (bad magic header)");
    const auto version = get_le<std::uint32_t>(in, "version");
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    }
    TransformerConfig c;
    auto geti = [&](const char* what) { return static_cast<int>(static_cast<std::int64_t>(get_le<std::uint64_t>(in, what))); };
    c.n_layers = geti("n_layers");
    c.n_heads = geti("n_heads");
    c.d_model = geti("d_model");
    c.max_len = geti("max_len");
    c.vocab_size = geti("vocab_size");
    c.batch_size = geti("batch_size");
    c.train_steps = geti("train_steps");
    c.seed = get_le<std::uint64_t>(in, "seed");
    c.learning_rate = std::bit_cast<double>(get_le<std::uint64_t>(in, "learning_rate"));
    c.t_min = std::bit_cast<double>(get_le<std::uint64_t>(in, "t_min"));

    if (expected) {
        const std::pair<const char*, std::pair<int, int>> fields[] = {
            {"n_layers", {c.n_layers, expected->n_layers}}, {"n_heads", {c.n_heads, expected->n_heads}},
            {"d_model", {c.d_model, expected->d_model}},    {"max_len", {c.max_len, expected->max_len}},
            {"vocab_size", {c.vocab_size, expected->vocab_size}},
        };
        for (const auto& [name, vals] : fields) {
            if (vals.first != vals.second) {
                throw CheckpointError(std::string("checkpoint config mismatch in field ") + name + ": file has " +
                                      std::to_string(vals.first) + ", expected " + std::to_string(vals.second));
            }
        }
    }
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
    }

    Params p = Params::zeros(c);
    const auto count = get_le<std::uint64_t>(in, "tensor count");
    if (count != p.tensors().size()) {
        throw CheckpointError("checkpoint has " + std::to_string(count) + " tensors, config implies " +
                              std::to_string(p.tensors().size()));
    }
    for (auto& t : p.tensors()) {
        const auto ndim = get_le<std::uint32_t>(in, "tensor rank");
        std::vector<std::size_t> shape(ndim);
        for (auto& s : shape) s = static_cast<std::size_t>(get_le<std::uint64_t>(in, "tensor shape"));
        if (shape != t.shape) throw CheckpointError("checkpoint tensor " + t.name + " has mismatched shape");
        for (double& x : t.data) x = std::bit_cast<double>(get_le<std::uint64_t>(in, t.name.c_str()));
    }
    return p;
}

inline void save_checkpoint(const Params& params, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path);
    write_checkpoint(params, out);
    if (!out) throw CheckpointError("failed writing checkpoint " + path);
}

inline Params load_checkpoint(const std::string& path, const std::optional<TransformerConfig>& expected = std::nullopt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint: " + path);
    return read_checkpoint(in, expected);
}

}  // namespace dos::nn
