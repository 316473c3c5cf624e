#pragma once

// Tiny bidirectional transformer denoiser trained with the masked diffusion
// objective. Pre-norm encoder blocks, learned positional embeddings, GELU
// feed-forward, softmax output over the V content tokens only (MASK has an
// input embedding but no output logit). Gradients are computed by explicit
// backpropagation through the forward definition; everything is float64.

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dos/core.hpp"
#include "dos/oracle.hpp"
#include "dos/scoring.hpp"

namespace dos::nn {

struct TransformerConfig {
    int n_layers = 2;
    int n_heads = 2;
    int d_model = 32;
    int max_len = 16;
    int vocab_size = 2;
    std::uint64_t seed = 0;
    double learning_rate = 0.05;
    int batch_size = 32;
    int train_steps = 3000;
    double t_min = 0.01;

    int head_dim() const { return d_model / n_heads; }
    int ff_dim() const { return 4 * d_model; }

    void validate() const {
        if (n_layers < 1) throw std::invalid_argument("n_layers must be >= 1");
        if (n_heads < 1) throw std::invalid_argument("n_heads must be >= 1");
        if (d_model < 1 || d_model % n_heads != 0) throw std::invalid_argument("d_model must be divisible by n_heads");
        if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
        if (vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
        if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
        if (train_steps < 0) throw std::invalid_argument("train_steps must be >= 0");
        if (!(t_min > 0.0 && t_min <= 0.5)) throw std::invalid_argument("t_min must lie in (0, 0.5]");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw std::invalid_argument("learning_rate must be > 0");
    }
};

struct Tensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> data;

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Parameter tensors in a fixed order:
///   tok_emb [V+1, d], pos_emb [max_len, d],
///   per block: ln1.g, ln1.b [d], wq [d,d], bq, wk, bk, wv, bv, wo, bo [d],
///              ln2.g, ln2.b [d], ff.w1 [d, 4d], ff.b1 [4d], ff.w2 [4d, d], ff.b2 [d],
///   lnf.g, lnf.b [d], out.w [d, V], out.b [V].
/// Linear maps are y = x W + b with W stored [in, out] row-major.
class Params {
public:
    static constexpr std::size_t kPerLayer = 16;
    enum LayerSlot : std::size_t {
        ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2
    };

    Params() = default;

    /// Shapes for `config` with all entries zero.
    static Params zeros(const TransformerConfig& config) {
        config.validate();
        Params p;
        p.config_ = config;
        const auto d = static_cast<std::size_t>(config.d_model);
        const auto f = static_cast<std::size_t>(config.ff_dim());
        const auto V = static_cast<std::size_t>(config.vocab_size);
        auto add = [&](std::string name, std::vector<std::size_t> shape) {
            std::size_t n = 1;
            for (auto s : shape) n *= s;
            p.tensors_.push_back(Tensor{std::move(name), std::move(shape), std::vector<double>(n, 0.0)});
        };
        add("tok_emb", {V + 1, d});
        add("pos_emb", {static_cast<std::size_t>(config.max_len), d});
        for (int l = 0; l < config.n_layers; ++l) {
            const std::string pre = "block" + std::to_string(l) + ".";
            add(pre + "ln1.g", {d});
            add(pre + "ln1.b", {d});
            add(pre + "attn.wq", {d, d});
            add(pre + "attn.bq", {d});
            add(pre + "attn.wk", {d, d});
            add(pre + "attn.bk", {d});
            add(pre + "attn.wv", {d, d});
            add(pre + "attn.bv", {d});
            add(pre + "attn.wo", {d, d});
            add(pre + "attn.bo", {d});
            add(pre + "ln2.g", {d});
            add(pre + "ln2.b", {d});
            add(pre + "ff.w1", {d, f});
            add(pre + "ff.b1", {f});
            add(pre + "ff.w2", {f, d});
            add(pre + "ff.b2", {d});
        }
        add("lnf.g", {d});
        add("lnf.b", {d});
        add("out.w", {d, V});
        add("out.b", {V});
        return p;
    }

    /// Random initialization from config.seed.
    static Params init(const TransformerConfig& config) {
        Params p = zeros(config);
        Rng rng(config.seed);
        auto fill = [&](Tensor& t, double stddev) {
            std::normal_distribution<double> nd(0.0, stddev);
            for (double& x : t.data) x = nd(rng);
        };
        const double d = config.d_model;
        fill(p.tensors_[0], 0.5);
        fill(p.tensors_[1], 0.5);
        for (int l = 0; l < config.n_layers; ++l) {
            const std::size_t base = 2 + kPerLayer * static_cast<std::size_t>(l);
            for (std::size_t g : {ln1_g, ln2_g}) std::fill(p.tensors_[base + g].data.begin(), p.tensors_[base + g].data.end(), 1.0);
            for (std::size_t w : {wq, wk, wv, wo, w1}) fill(p.tensors_[base + w], 1.0 / std::sqrt(d));
            fill(p.tensors_[base + w2], 1.0 / std::sqrt(static_cast<double>(config.ff_dim())));
        }
        const std::size_t fin = 2 + kPerLayer * static_cast<std::size_t>(config.n_layers);
        std::fill(p.tensors_[fin].data.begin(), p.tensors_[fin].data.end(), 1.0);
        fill(p.tensors_[fin + 2], 1.0 / std::sqrt(d));
        return p;
    }

    const TransformerConfig& config() const noexcept { return config_; }
    std::vector<Tensor>& tensors() noexcept { return tensors_; }
    const std::vector<Tensor>& tensors() const noexcept { return tensors_; }

    const std::vector<double>& tok_emb() const { return tensors_[0].data; }
    const std::vector<double>& pos_emb() const { return tensors_[1].data; }
    const std::vector<double>& layer(std::size_t l, LayerSlot s) const { return tensors_[2 + kPerLayer * l + s].data; }
    std::size_t layer_index(std::size_t l, LayerSlot s) const { return 2 + kPerLayer * l + s; }
    std::size_t final_index() const { return 2 + kPerLayer * static_cast<std::size_t>(config_.n_layers); }
    const std::vector<double>& lnf_g() const { return tensors_[final_index()].data; }
    const std::vector<double>& lnf_b() const { return tensors_[final_index() + 1].data; }
    const std::vector<double>& out_w() const { return tensors_[final_index() + 2].data; }
    const std::vector<double>& out_b() const { return tensors_[final_index() + 3].data; }

    std::size_t num_parameters() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += t.data.size();
        return n;
    }

    bool all_finite() const {
        for (const auto& t : tensors_) {
            for (double x : t.data) {
                if (!std::isfinite(x)) return false;
            }
        }
        return true;
    }

    /// this += scale * other, tensor by tensor.
    void axpy(double scale, const Params& other) {
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            auto& a = tensors_[i].data;
            const auto& b = other.tensors_[i].data;
            for (std::size_t j = 0; j < a.size(); ++j) a[j] += scale * b[j];
        }
    }

    friend bool operator==(const Params& a, const Params& b) { return a.tensors_ == b.tensors_; }

private:
    TransformerConfig config_;
    std::vector<Tensor> tensors_;
};

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

// y[n x out] = x[n x in] * W[in x out] + b
inline void linear(std::span<const double> x, std::span<const double> w, std::span<const double> b, std::size_t n,
                   std::size_t in, std::size_t out, std::vector<double>& y) {
    y.assign(n * out, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        double* yr = y.data() + r * out;
        for (std::size_t o = 0; o < out; ++o) yr[o] = b[o];
        for (std::size_t i = 0; i < in; ++i) {
            const double xv = x[r * in + i];
            const double* wr = w.data() + i * out;
            for (std::size_t o = 0; o < out; ++o) yr[o] += xv * wr[o];
        }
    }
}

// Accumulates dW += x^T dy, db += colsum(dy), and writes dx = dy W^T.
inline void linear_backward(std::span<const double> x, std::span<const double> w, std::span<const double> dy,
                            std::size_t n, std::size_t in, std::size_t out, std::vector<double>& dw,
                            std::vector<double>& db, std::vector<double>& dx) {
    dx.assign(n * in, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        const double* dyr = dy.data() + r * out;
        for (std::size_t o = 0; o < out; ++o) db[o] += dyr[o];
        for (std::size_t i = 0; i < in; ++i) {
            const double xv = x[r * in + i];
            double* dwr = dw.data() + i * out;
            const double* wr = w.data() + i * out;
            double acc = 0.0;
            for (std::size_t o = 0; o < out; ++o) {
                dwr[o] += xv * dyr[o];
                acc += wr[o] * dyr[o];
            }
            dx[r * in + i] = acc;
        }
    }
}

struct LayerNormCache {
    std::vector<double> xhat;
    std::vector<double> rstd;
};

inline void layer_norm(std::span<const double> x, std::span<const double> g, std::span<const double> b, std::size_t n,
                       std::size_t d, std::vector<double>& y, LayerNormCache& cache) {
    y.resize(n * d);
    cache.xhat.resize(n * d);
    cache.rstd.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += x[r * d + i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double c = x[r * d + i] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        cache.rstd[r] = rstd;
        for (std::size_t i = 0; i < d; ++i) {
            const double xh = (x[r * d + i] - mean) * rstd;
            cache.xhat[r * d + i] = xh;
            y[r * d + i] = g[i] * xh + b[i];
        }
    }
}

inline void layer_norm_backward(const LayerNormCache& cache, std::span<const double> g, std::span<const double> dy,
                                std::size_t n, std::size_t d, std::vector<double>& dg, std::vector<double>& db,
                                std::vector<double>& dx) {
    dx.assign(n * d, 0.0);
    std::vector<double> dxhat(d);
    for (std::size_t r = 0; r < n; ++r) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double xh = cache.xhat[r * d + i];
            const double dyi = dy[r * d + i];
            dg[i] += dyi * xh;
            db[i] += dyi;
            dxhat[i] = dyi * g[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh;
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        for (std::size_t i = 0; i < d; ++i) {
            dx[r * d + i] = cache.rstd[r] * (dxhat[i] - mean_dxhat - cache.xhat[r * d + i] * mean_dxhat_xhat);
        }
    }
}

inline double gelu(double u) { return 0.5 * u * (1.0 + std::erf(u / std::numbers::sqrt2)); }

inline double gelu_grad(double u) {
    const double cdf = 0.5 * (1.0 + std::erf(u / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * u * u) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + u * pdf;
}

struct BlockCache {
    std::vector<double> x_in;
    LayerNormCache ln1;
    std::vector<double> h1, q, k, v;
    std::vector<double> attn;  // heads x L x L
    std::vector<double> o;
    std::vector<double> x_mid;
    LayerNormCache ln2;
    std::vector<double> h2, u, act;
};

struct ForwardCache {
    Tokens tokens;
    std::vector<BlockCache> blocks;
    std::vector<double> x_final;
    LayerNormCache lnf;
    std::vector<double> hf;
    std::vector<double> probs;  // L x V
};

inline void check_input(const Params& params, std::span<const Token> tokens) {
    const auto& cfg = params.config();
    if (tokens.empty()) throw std::invalid_argument("transformer input is empty");
    if (tokens.size() > static_cast<std::size_t>(cfg.max_len)) {
        throw std::invalid_argument("sequence length " + std::to_string(tokens.size()) + " exceeds max_len " +
                                    std::to_string(cfg.max_len));
    }
    for (Token t : tokens) {
        if (t < 1 || t > cfg.vocab_size + 1) throw std::invalid_argument("invalid token id " + std::to_string(t));
    }
}

inline void forward_cached(const Params& params, std::span<const Token> tokens, ForwardCache& c) {
    check_input(params, tokens);
    const auto& cfg = params.config();
    const std::size_t L = tokens.size();
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto H = static_cast<std::size_t>(cfg.n_heads);
    const auto hd = static_cast<std::size_t>(cfg.head_dim());
    const auto F = static_cast<std::size_t>(cfg.ff_dim());
    const auto V = static_cast<std::size_t>(cfg.vocab_size);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    c.tokens.assign(tokens.begin(), tokens.end());
    std::vector<double> x(L * d);
    for (std::size_t i = 0; i < L; ++i) {
        const auto tok = static_cast<std::size_t>(tokens[i] - 1);
        for (std::size_t j = 0; j < d; ++j) x[i * d + j] = params.tok_emb()[tok * d + j] + params.pos_emb()[i * d + j];
    }

    c.blocks.resize(static_cast<std::size_t>(cfg.n_layers));
    for (std::size_t l = 0; l < c.blocks.size(); ++l) {
        auto& b = c.blocks[l];
        b.x_in = x;
        layer_norm(x, params.layer(l, Params::ln1_g), params.layer(l, Params::ln1_b), L, d, b.h1, b.ln1);
        linear(b.h1, params.layer(l, Params::wq), params.layer(l, Params::bq), L, d, d, b.q);
        linear(b.h1, params.layer(l, Params::wk), params.layer(l, Params::bk), L, d, d, b.k);
        linear(b.h1, params.layer(l, Params::wv), params.layer(l, Params::bv), L, d, d, b.v);
        b.attn.assign(H * L * L, 0.0);
        b.o.assign(L * d, 0.0);
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < L; ++i) {
                double* row = b.attn.data() + (h * L + i) * L;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < L; ++j) {
                    double s = 0.0;
                    for (std::size_t e = 0; e < hd; ++e) s += b.q[i * d + h * hd + e] * b.k[j * d + h * hd + e];
                    row[j] = s * scale;
                    mx = std::max(mx, row[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < L; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    z += row[j];
                }
                for (std::size_t j = 0; j < L; ++j) row[j] /= z;
                for (std::size_t j = 0; j < L; ++j) {
                    const double a = row[j];
                    for (std::size_t e = 0; e < hd; ++e) b.o[i * d + h * hd + e] += a * b.v[j * d + h * hd + e];
                }
            }
        }
        std::vector<double> proj;
        linear(b.o, params.layer(l, Params::wo), params.layer(l, Params::bo), L, d, d, proj);
        b.x_mid.resize(L * d);
        for (std::size_t i = 0; i < L * d; ++i) b.x_mid[i] = x[i] + proj[i];

        layer_norm(b.x_mid, params.layer(l, Params::ln2_g), params.layer(l, Params::ln2_b), L, d, b.h2, b.ln2);
        linear(b.h2, params.layer(l, Params::w1), params.layer(l, Params::b1), L, d, F, b.u);
        b.act.resize(L * F);
        for (std::size_t i = 0; i < L * F; ++i) b.act[i] = gelu(b.u[i]);
        std::vector<double> ff;
        linear(b.act, params.layer(l, Params::w2), params.layer(l, Params::b2), L, F, d, ff);
        for (std::size_t i = 0; i < L * d; ++i) x[i] = b.x_mid[i] + ff[i];
    }
    c.x_final = x;
    layer_norm(x, params.lnf_g(), params.lnf_b(), L, d, c.hf, c.lnf);
    std::vector<double> logits;
    linear(c.hf, params.out_w(), params.out_b(), L, d, V, logits);
    c.probs.resize(L * V);
    for (std::size_t i = 0; i < L; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, logits[i * V + v]);
        double z = 0.0;
        for (std::size_t v = 0; v < V; ++v) {
            c.probs[i * V + v] = std::exp(logits[i * V + v] - mx);
            z += c.probs[i * V + v];
        }
        for (std::size_t v = 0; v < V; ++v) c.probs[i * V + v] /= z;
    }
}

/// Backpropagates dlogits (L x V) through the cached forward pass into grad.
inline void backward(const Params& params, const ForwardCache& c, std::span<const double> dlogits, Params& grad) {
    const auto& cfg = params.config();
    const std::size_t L = c.tokens.size();
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto H = static_cast<std::size_t>(cfg.n_heads);
    const auto hd = static_cast<std::size_t>(cfg.head_dim());
    const auto F = static_cast<std::size_t>(cfg.ff_dim());
    const auto V = static_cast<std::size_t>(cfg.vocab_size);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    auto& gt = grad.tensors();
    const std::size_t fin = params.final_index();

    std::vector<double> dhf, dx;
    linear_backward(c.hf, params.out_w(), dlogits, L, d, V, gt[fin + 2].data, gt[fin + 3].data, dhf);
    layer_norm_backward(c.lnf, params.lnf_g(), dhf, L, d, gt[fin].data, gt[fin + 1].data, dx);

    std::vector<double> dact, du, dh2, dxmid, dproj_in, dh1, dq, dk, dv, tmp;
    for (std::size_t l = c.blocks.size(); l-- > 0;) {
        const auto& b = c.blocks[l];
        auto gi = [&](Params::LayerSlot s) -> std::vector<double>& { return gt[params.layer_index(l, s)].data; };

        // x_out = x_mid + W2 gelu(W1 LN2(x_mid))
        linear_backward(b.act, params.layer(l, Params::w2), dx, L, F, d, gi(Params::w2), gi(Params::b2), dact);
        du.resize(L * F);
        for (std::size_t i = 0; i < L * F; ++i) du[i] = dact[i] * gelu_grad(b.u[i]);
        linear_backward(b.h2, params.layer(l, Params::w1), du, L, d, F, gi(Params::w1), gi(Params::b1), dh2);
        layer_norm_backward(b.ln2, params.layer(l, Params::ln2_g), dh2, L, d, gi(Params::ln2_g), gi(Params::ln2_b), tmp);
        dxmid = dx;
        for (std::size_t i = 0; i < L * d; ++i) dxmid[i] += tmp[i];

        // x_mid = x_in + Wo attn(LN1(x_in))
        std::vector<double> dout;
        linear_backward(b.o, params.layer(l, Params::wo), dxmid, L, d, d, gi(Params::wo), gi(Params::bo), dout);
        dq.assign(L * d, 0.0);
        dk.assign(L * d, 0.0);
        dv.assign(L * d, 0.0);
        std::vector<double> dattn(L);
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < L; ++i) {
                const double* row = b.attn.data() + (h * L + i) * L;
                double dot = 0.0;
                for (std::size_t j = 0; j < L; ++j) {
                    double s = 0.0;
                    for (std::size_t e = 0; e < hd; ++e) {
                        s += dout[i * d + h * hd + e] * b.v[j * d + h * hd + e];
                        dv[j * d + h * hd + e] += row[j] * dout[i * d + h * hd + e];
                    }
                    dattn[j] = s;
                    dot += row[j] * s;
                }
                for (std::size_t j = 0; j < L; ++j) {
                    const double ds = row[j] * (dattn[j] - dot) * scale;
                    for (std::size_t e = 0; e < hd; ++e) {
                        dq[i * d + h * hd + e] += ds * b.k[j * d + h * hd + e];
                        dk[j * d + h * hd + e] += ds * b.q[i * d + h * hd + e];
                    }
                }
            }
        }
        dh1.assign(L * d, 0.0);
        linear_backward(b.h1, params.layer(l, Params::wq), dq, L, d, d, gi(Params::wq), gi(Params::bq), tmp);
        for (std::size_t i = 0; i < L * d; ++i) dh1[i] += tmp[i];
        linear_backward(b.h1, params.layer(l, Params::wk), dk, L, d, d, gi(Params::wk), gi(Params::bk), tmp);
        for (std::size_t i = 0; i < L * d; ++i) dh1[i] += tmp[i];
        linear_backward(b.h1, params.layer(l, Params::wv), dv, L, d, d, gi(Params::wv), gi(Params::bv), tmp);
        for (std::size_t i = 0; i < L * d; ++i) dh1[i] += tmp[i];
        layer_norm_backward(b.ln1, params.layer(l, Params::ln1_g), dh1, L, d, gi(Params::ln1_g), gi(Params::ln1_b), tmp);
        dx = dxmid;
        for (std::size_t i = 0; i < L * d; ++i) dx[i] += tmp[i];
    }

    for (std::size_t i = 0; i < L; ++i) {
        const auto tok = static_cast<std::size_t>(c.tokens[i] - 1);
        for (std::size_t j = 0; j < d; ++j) {
            gt[0].data[tok * d + j] += dx[i * d + j];
            gt[1].data[i * d + j] += dx[i * d + j];
        }
    }
}

}  // namespace detail

/// Per-position output distributions and every block's attention weights.
/// Deterministic in (params, tokens).
inline DenoiserOutput forward(const Params& params, const SequenceState& state) {
    if (state.vocab().size() != params.config().vocab_size) {
        throw std::invalid_argument("state vocabulary does not match the model");
    }
    detail::ForwardCache c;
    detail::forward_cached(params, state.tokens(), c);
    const std::size_t L = state.length();
    const auto V = static_cast<std::size_t>(params.config().vocab_size);
    DenoiserOutput out;
    out.probs.reserve(L);
    for (std::size_t i = 0; i < L; ++i) {
        out.probs.emplace_back(std::vector<double>(c.probs.begin() + static_cast<std::ptrdiff_t>(i * V),
                                                   c.probs.begin() + static_cast<std::ptrdiff_t>((i + 1) * V)));
    }
    for (auto& b : c.blocks) {
        out.attentions.push_back(
            AttentionTensor{static_cast<std::size_t>(params.config().n_heads), L, std::move(b.attn)});
    }
    return out;
}

/// One training example after corruption: clean x0, corrupted x_t and its time.
struct CorruptedExample {
    Tokens x0;
    Tokens xt;
    double t = 1.0;
};

struct LossAndGrad {
    double loss = 0.0;
    Params grad;
    std::size_t skipped = 0;        // examples with no masked position after one resample
    std::size_t masked_tokens = 0;
};

/// Loss and gradient over an already-corrupted batch:
///   (1/B) sum_b (1/t_b) sum_{i masked} -log p_theta(x0_i | x_t)
/// Examples with no masked position contribute 0 but count in B.
inline LossAndGrad loss_and_grad_fixed(const Params& params, std::span<const CorruptedExample> batch,
                                       std::size_t batch_size, Token mask_id) {
    if (batch_size == 0) throw std::invalid_argument("batch must be nonempty");
    LossAndGrad r;
    r.grad = Params::zeros(params.config());
    const auto V = static_cast<std::size_t>(params.config().vocab_size);
    const double inv_b = 1.0 / static_cast<double>(batch_size);
    detail::ForwardCache cache;
    std::vector<double> dlogits;
    for (const auto& ex : batch) {
        detail::forward_cached(params, ex.xt, cache);
        const std::size_t L = ex.xt.size();
        dlogits.assign(L * V, 0.0);
        const double w = inv_b / ex.t;
        bool any = false;
        for (std::size_t i = 0; i < L; ++i) {
            if (ex.xt[i] != mask_id) continue;
            any = true;
            ++r.masked_tokens;
            const auto target = static_cast<std::size_t>(ex.x0[i] - 1);
            r.loss -= w * std::log(std::max(cache.probs[i * V + target], 1e-300));
            for (std::size_t v = 0; v < V; ++v) dlogits[i * V + v] = w * cache.probs[i * V + v];
            dlogits[i * V + target] -= w;
        }
        if (any) detail::backward(params, cache, dlogits, r.grad);
    }
    return r;
}

/// Corrupts each x0 at t ~ Uniform[t_min, 1] (prompt positions untouched).
/// An example left with no masked position is resampled once, then skipped.
inline std::vector<CorruptedExample> corrupt_batch(std::span<const Tokens> batch, std::size_t prompt_len, int vocab_size,
                                                   double t_min, Rng& rng, std::size_t* skipped = nullptr) {
    const Vocabulary vocab(vocab_size);
    std::uniform_real_distribution<double> tdist(t_min, 1.0);
    std::vector<CorruptedExample> out;
    for (const auto& x0 : batch) {
        const SequenceState clean(vocab, x0, prompt_len);
        bool kept = false;
        for (int attempt = 0; attempt < 2 && !kept; ++attempt) {
            const double t = tdist(rng);
            auto xt = forward_mask(clean, t, rng);
            if (xt.count_masked() > 0) {
                out.push_back(CorruptedExample{x0, xt.tokens(), t});
                kept = true;
            }
        }
        if (!kept && skipped) ++*skipped;
    }
    return out;
}

/// Monte Carlo estimate of the masked diffusion loss and its exact gradient
/// for one batch of clean sequences.
inline LossAndGrad mdlm_loss_and_grad(const Params& params, std::span<const Tokens> batch, std::size_t prompt_len,
                                      Rng& rng) {
    if (batch.empty()) throw std::invalid_argument("batch must be nonempty");
    std::size_t skipped = 0;
    const auto corrupted =
        corrupt_batch(batch, prompt_len, params.config().vocab_size, params.config().t_min, rng, &skipped);
    auto r = loss_and_grad_fixed(params, corrupted, batch.size(), params.config().vocab_size + 1);
    r.skipped = skipped;
    return r;
}

struct TrainResult {
    Params params;
    std::vector<double> loss_curve;
    std::size_t skipped_examples = 0;
};

/// Plain SGD with a fixed step size on batches drawn from the joint.
/// `on_step(step, loss)` is called after every update when provided.
inline TrainResult train(const TransformerConfig& config, const JointModel& model, std::size_t prompt_len,
                         const std::function<void(int, double)>& on_step = {}) {
    config.validate();
    if (config.vocab_size != model.vocab_size()) throw std::invalid_argument("config vocab_size does not match joint");
    if (model.length() > static_cast<std::size_t>(config.max_len)) throw std::invalid_argument("joint longer than max_len");
    if (prompt_len >= model.length()) throw std::invalid_argument("prompt_len must be < joint length");

    TrainResult r{Params::init(config), {}, 0};
    Rng data_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<Tokens> batch(static_cast<std::size_t>(config.batch_size));
    for (int step = 0; step < config.train_steps; ++step) {
        for (auto& x : batch) x = sample_joint(model, data_rng);
        auto lg = mdlm_loss_and_grad(r.params, batch, prompt_len, data_rng);
        if (!std::isfinite(lg.loss)) {
            throw std::runtime_error("training diverged at step " + std::to_string(step) +
                                     ": non-finite loss; lower learning_rate (currently " +
                                     std::to_string(config.learning_rate) + ")");
        }
        r.params.axpy(-config.learning_rate, lg.grad);
        if (!r.params.all_finite()) {
            throw std::runtime_error("training diverged at step " + std::to_string(step) + ": non-finite parameters");
        }
        r.loss_curve.push_back(lg.loss);
        r.skipped_examples += lg.skipped;
        if (on_step) on_step(step, lg.loss);
    }
    return r;
}

struct GradCheckResult {
    std::string tensor;
    std::size_t checked = 0;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
};

/// Compares the analytic gradient of loss_and_grad_fixed with a numerical
/// one. Central differences use `order` 2 (f(x+h) - f(x-h)) / 2h or 4
/// (the five-point stencil). Relative error is |a - n| / max(|a|, |n|, floor).
/// Tensors with more than `max_entries` elements are checked on a seeded
/// random subset of that size.
inline std::vector<GradCheckResult> gradient_check(Params params, std::span<const CorruptedExample> batch, double h,
                                                   int order = 4, double floor = 1e-6,
                                                   std::size_t max_entries = std::numeric_limits<std::size_t>::max(),
                                                   std::uint64_t seed = 0) {
    if (order != 2 && order != 4) throw std::invalid_argument("gradient_check order must be 2 or 4");
    const Token mask = params.config().vocab_size + 1;
    const auto analytic = loss_and_grad_fixed(params, batch, batch.size(), mask).grad;
    Rng rng(seed);
    std::vector<GradCheckResult> out;
    for (std::size_t ti = 0; ti < params.tensors().size(); ++ti) {
        auto& t = params.tensors()[ti];
        std::vector<std::size_t> idx(t.data.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        if (idx.size() > max_entries) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(max_entries);
        }
        GradCheckResult r{t.name, idx.size(), 0.0, 0.0};
        for (std::size_t k : idx) {
            const double old = t.data[k];
            auto f = [&](double d) {
                t.data[k] = old + d;
                return loss_and_grad_fixed(params, batch, batch.size(), mask).loss;
            };
            const double num = order == 2 ? (f(h) - f(-h)) / (2 * h)
                                          : (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
            t.data[k] = old;
            const double a = analytic.tensors()[ti].data[k];
            const double abs_err = std::abs(a - num);
            r.max_abs_error = std::max(r.max_abs_error, abs_err);
            r.max_rel_error = std::max(r.max_rel_error, abs_err / std::max({std::abs(a), std::abs(num), floor}));
        }
        out.push_back(r);
    }
    return out;
}

}  // namespace dos::nn
