#pragma once

// Vocabulary, sequence states, noise schedules and the forward/reverse
// masking primitives of a masked diffusion language model.
//
// Token ids are 1..V for content tokens; the MASK symbol is V+1.
// Positions are 0-based everywhere in this library.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dos {

using Token = int;
using Tokens = std::vector<Token>;
using Rng = std::mt19937_64;

/// Thrown when a conditioning event has zero probability under a model.
class ZeroSupportError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Thrown when brute-force enumeration would exceed the configured state limit.
class EnumerationLimitError : public std::length_error {
public:
    using std::length_error::length_error;
};

inline constexpr std::size_t kDefaultEnumerationLimit = 1'000'000;

class Vocabulary {
public:
    explicit Vocabulary(int size) : size_(size) {
        if (size < 2) {
            throw std::invalid_argument("vocabulary size must be >= 2, got " + std::to_string(size));
        }
    }

    int size() const noexcept { return size_; }
    Token mask_id() const noexcept { return size_ + 1; }
    bool is_content(Token t) const noexcept { return t >= 1 && t <= size_; }
    bool is_valid(Token t) const noexcept { return t >= 1 && t <= size_ + 1; }

    friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

private:
    int size_;
};

/// A length-L token vector over content tokens and MASK. The first
/// `prompt_len` positions are conditioning context and are never masked.
class SequenceState {
public:
    SequenceState(Vocabulary vocab, Tokens tokens, std::size_t prompt_len)
        : vocab_(vocab), tokens_(std::move(tokens)), prompt_len_(prompt_len) {
        if (tokens_.empty()) {
            throw std::invalid_argument("sequence length must be >= 1");
        }
        if (prompt_len_ >= tokens_.size()) {
            throw std::invalid_argument("prompt_len must be < sequence length");
        }
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (!vocab_.is_valid(tokens_[i])) {
                throw std::invalid_argument("invalid token id " + std::to_string(tokens_[i]) + " at position " +
                                            std::to_string(i));
            }
            if (i < prompt_len_ && tokens_[i] == vocab_.mask_id()) {
                throw std::invalid_argument("prompt position " + std::to_string(i) + " is masked");
            }
        }
    }

    const Vocabulary& vocab() const noexcept { return vocab_; }
    const Tokens& tokens() const noexcept { return tokens_; }
    std::size_t length() const noexcept { return tokens_.size(); }
    std::size_t prompt_len() const noexcept { return prompt_len_; }
    std::size_t gen_len() const noexcept { return tokens_.size() - prompt_len_; }
    Token operator[](std::size_t i) const { return tokens_.at(i); }

    bool is_masked(std::size_t i) const { return tokens_.at(i) == vocab_.mask_id(); }
    bool fully_unmasked() const { return count_masked() == 0; }

    std::size_t count_masked() const {
        return static_cast<std::size_t>(std::count(tokens_.begin(), tokens_.end(), vocab_.mask_id()));
    }

    std::vector<std::size_t> masked_positions() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (tokens_[i] == vocab_.mask_id()) out.push_back(i);
        }
        return out;
    }

    std::vector<std::size_t> unmasked_positions() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (tokens_[i] != vocab_.mask_id()) out.push_back(i);
        }
        return out;
    }

    /// Returns a copy with position `i` set to `t`. Prompt positions cannot be
    /// changed and cannot receive MASK.
    SequenceState with_token(std::size_t i, Token t) const {
        if (i < prompt_len_) throw std::invalid_argument("cannot modify prompt position");
        Tokens next = tokens_;
        next.at(i) = t;
        return SequenceState(vocab_, std::move(next), prompt_len_);
    }

    void set_token(std::size_t i, Token t) {
        if (i < prompt_len_) throw std::invalid_argument("cannot modify prompt position");
        if (!vocab_.is_valid(t)) throw std::invalid_argument("invalid token id");
        tokens_.at(i) = t;
    }

    friend bool operator==(const SequenceState&, const SequenceState&) = default;

private:
    Vocabulary vocab_;
    Tokens tokens_;
    std::size_t prompt_len_;
};

/// Probability vector over the V content tokens. Index v holds the
/// probability of token v+1; MASK has probability 0 by construction.
class Categorical {
public:
    static constexpr double kSumTolerance = 1e-9;

    explicit Categorical(std::vector<double> probs) : probs_(std::move(probs)) {
        if (probs_.empty()) throw std::invalid_argument("categorical must have at least one entry");
        double sum = 0.0;
        for (double p : probs_) {
            if (!(p >= 0.0) || !std::isfinite(p)) throw std::invalid_argument("categorical entry is negative or non-finite");
            sum += p;
        }
        if (std::abs(sum - 1.0) > kSumTolerance) {
            throw std::invalid_argument("categorical does not sum to 1 (sum=" + std::to_string(sum) + ")");
        }
    }

    static Categorical point_mass(int vocab_size, Token t) {
        std::vector<double> p(static_cast<std::size_t>(vocab_size), 0.0);
        p.at(static_cast<std::size_t>(t - 1)) = 1.0;
        return Categorical(std::move(p));
    }

    static Categorical uniform(int vocab_size) {
        return Categorical(std::vector<double>(static_cast<std::size_t>(vocab_size), 1.0 / vocab_size));
    }

    /// Normalizes nonnegative weights; throws ZeroSupportError on zero mass.
    static Categorical from_weights(std::vector<double> w) {
        const double z = std::accumulate(w.begin(), w.end(), 0.0);
        if (!(z > 0.0)) throw ZeroSupportError("categorical weights have zero total mass");
        for (double& x : w) x /= z;
        return Categorical(std::move(w));
    }

    int size() const noexcept { return static_cast<int>(probs_.size()); }
    const std::vector<double>& probs() const noexcept { return probs_; }
    double prob(Token t) const { return probs_.at(static_cast<std::size_t>(t - 1)); }

    /// Most probable token; ties go to the lowest id.
    Token argmax() const {
        return static_cast<Token>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin()) + 1;
    }

    friend bool operator==(const Categorical&, const Categorical&) = default;

private:
    std::vector<double> probs_;
};

/// A noise schedule: alpha(t) is the survival probability of a token at
/// time t, nonincreasing with alpha(0) = 1 and alpha(1) = 0.
template <class S>
concept NoiseSchedule = requires(const S& s, double t) {
    { s.alpha(t) } -> std::convertible_to<double>;
};

struct LinearSchedule {
    double alpha(double t) const noexcept { return 1.0 - t; }
};

namespace detail {
inline void check_time(double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("time must lie in [0,1], got " + std::to_string(t));
}
}  // namespace detail

/// Initial generation state: prompt followed by `gen_len` MASK tokens.
/// An empty prompt is only accepted when `unconditional` is set.
inline SequenceState make_masked_state(Vocabulary vocab, const Tokens& prompt, std::size_t gen_len,
                                       bool unconditional = false) {
    if (gen_len == 0) throw std::invalid_argument("gen_len must be >= 1");
    if (prompt.empty() && !unconditional) {
        throw std::invalid_argument("empty prompt requires an unconditional configuration");
    }
    Tokens tokens = prompt;
    tokens.resize(prompt.size() + gen_len, vocab.mask_id());
    return SequenceState(vocab, std::move(tokens), prompt.size());
}

/// Samples x_t ~ q(x_t | x_0): every non-prompt token is independently
/// replaced by MASK with probability 1 - alpha(t).
template <NoiseSchedule Schedule = LinearSchedule>
SequenceState forward_mask(const SequenceState& x0, double t, Rng& rng, const Schedule& schedule = {}) {
    detail::check_time(t);
    const double mask_prob = 1.0 - schedule.alpha(t);
    std::bernoulli_distribution coin(std::clamp(mask_prob, 0.0, 1.0));
    Tokens tokens = x0.tokens();
    for (std::size_t i = x0.prompt_len(); i < tokens.size(); ++i) {
        if (tokens[i] == x0.vocab().mask_id()) {
            throw std::invalid_argument("forward_mask requires x0 unmasked on non-prompt positions");
        }
        if (coin(rng)) tokens[i] = x0.vocab().mask_id();
    }
    return SequenceState(x0.vocab(), std::move(tokens), x0.prompt_len());
}

/// Probability that a masked token at time t is decoded by time s < t:
/// (alpha(s) - alpha(t)) / (1 - alpha(t)).
template <NoiseSchedule Schedule = LinearSchedule>
double reverse_unmask_prob(const Schedule& schedule, double t, double s) {
    detail::check_time(t);
    detail::check_time(s);
    if (!(s < t)) throw std::domain_error("reverse step requires s < t");
    const double at = schedule.alpha(t);
    if (!(at < 1.0)) throw std::domain_error("reverse step undefined where alpha(t) = 1");
    return (schedule.alpha(s) - at) / (1.0 - at);
}

/// Samples x_s ~ q(x_s | x_t, x_0): unmasked tokens are kept, masked tokens
/// reveal their x_0 value with probability reverse_unmask_prob(t, s).
template <NoiseSchedule Schedule = LinearSchedule>
SequenceState posterior_step(const SequenceState& xt, const SequenceState& x0, double t, double s, Rng& rng,
                             const Schedule& schedule = {}) {
    if (xt.length() != x0.length()) throw std::invalid_argument("x_t and x_0 lengths differ");
    std::bernoulli_distribution reveal(reverse_unmask_prob(schedule, t, s));
    Tokens tokens = xt.tokens();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == xt.vocab().mask_id() && reveal(rng)) tokens[i] = x0[i];
    }
    return SequenceState(xt.vocab(), std::move(tokens), xt.prompt_len());
}

}  // namespace dos
