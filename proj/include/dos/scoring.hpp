#pragma once

// Per-position scores used to rank masked tokens. Higher always means
// "decode earlier"; entropy is negated when it is used as a ranking.

#include <cmath>
#include <limits>
#include <vector>

#include "dos/core.hpp"

namespace dos {

/// Per-position scores. Unmasked positions hold NaN ("not scored").
class ScoreVector {
public:
    ScoreVector() = default;
    explicit ScoreVector(std::size_t length) : scores_(length, kUnscored) {}
    explicit ScoreVector(std::vector<double> scores) : scores_(std::move(scores)) {}

    static constexpr double kUnscored = std::numeric_limits<double>::quiet_NaN();

    std::size_t size() const noexcept { return scores_.size(); }
    bool is_scored(std::size_t i) const { return !std::isnan(scores_.at(i)); }
    double operator[](std::size_t i) const { return scores_.at(i); }
    void set(std::size_t i, double v) { scores_.at(i) = v; }
    const std::vector<double>& values() const noexcept { return scores_; }

private:
    std::vector<double> scores_;
};

inline double confidence(const Categorical& p) {
    return *std::max_element(p.probs().begin(), p.probs().end());
}

/// Shannon entropy in nats with 0 log 0 = 0.
inline double entropy(const Categorical& p) {
    double h = 0.0;
    for (double v : p.probs()) {
        if (v > 0.0) h -= v * std::log(v);
    }
    return h;
}

/// Top probability minus the runner-up.
inline double margin(const Categorical& p) {
    if (p.size() < 2) throw std::invalid_argument("margin needs a vocabulary of at least 2 tokens");
    double first = -1.0, second = -1.0;
    for (double v : p.probs()) {
        if (v > first) {
            second = first;
            first = v;
        } else if (v > second) {
            second = v;
        }
    }
    return first - second;
}

/// KL(p || q) in nats; q entries are floored at 1e-12.
inline double kl_divergence(const Categorical& p, const Categorical& q) {
    if (p.size() != q.size()) throw std::invalid_argument("kl_divergence needs equal support sizes");
    constexpr double kFloor = 1e-12;
    double kl = 0.0;
    for (std::size_t v = 0; v < p.probs().size(); ++v) {
        const double pv = p.probs()[v];
        if (pv > 0.0) kl += pv * std::log(pv / std::max(q.probs()[v], kFloor));
    }
    return kl;
}

/// Stack of attention matrices for one transformer block: heads x L x L,
/// row-major. Rows are query positions, columns key positions.
struct AttentionTensor {
    std::size_t heads = 0;
    std::size_t length = 0;
    std::vector<double> weights;

    double at(std::size_t h, std::size_t row, std::size_t col) const {
        return weights[(h * length + row) * length + col];
    }
};

/// What a denoiser returns for one sequence state.
struct DenoiserOutput {
    std::vector<Categorical> probs;           // one per position
    std::vector<AttentionTensor> attentions;  // one per block; empty for attention-free denoisers
};

/// Attention-based dependency scores: the chosen block's heads are averaged
/// into one L x L matrix, and each masked position m receives the mass its
/// row places on the unmasked columns. No renormalization over content columns.
inline ScoreVector dos_dependency(const std::vector<AttentionTensor>& attentions, std::size_t layer,
                                  const std::vector<std::size_t>& masked, const std::vector<std::size_t>& unmasked) {
    if (layer >= attentions.size()) {
        throw std::out_of_range("attention layer " + std::to_string(layer) + " out of range (model has " +
                                std::to_string(attentions.size()) + ")");
    }
    const auto& attn = attentions[layer];
    const std::size_t L = attn.length;
    std::vector<int> seen(L, 0);
    for (std::size_t m : masked) {
        if (m >= L) throw std::invalid_argument("masked position out of range");
        ++seen[m];
    }
    for (std::size_t u : unmasked) {
        if (u >= L) throw std::invalid_argument("unmasked position out of range");
        ++seen[u];
    }
    for (int s : seen) {
        if (s != 1) throw std::invalid_argument("masked and unmasked sets must partition the positions");
    }

    ScoreVector dep(L);
    const double inv_heads = 1.0 / static_cast<double>(attn.heads);
    for (std::size_t m : masked) {
        double sum = 0.0;
        for (std::size_t u : unmasked) {
            double avg = 0.0;
            for (std::size_t h = 0; h < attn.heads; ++h) avg += attn.at(h, m, u);
            sum += avg * inv_heads;
        }
        dep.set(m, sum);
    }
    return dep;
}

}  // namespace dos
