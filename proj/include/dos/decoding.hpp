#pragma once

// The generation loop: scoring, subset selection (top-K, confidence
// threshold, KL-stability, entropy budget), block partitioning and
// NFE-accounted traces. A DecodeSession holds the mutable state of one run;
// `decode` samples through it and `enumerate_policy` branches it over every
// commit outcome to get the induced distribution exactly.

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dos/core.hpp"
#include "dos/distribution.hpp"
#include "dos/nn.hpp"
#include "dos/oracle.hpp"
#include "dos/scoring.hpp"

namespace dos {

enum class ScorerKind { confidence, entropy, margin, dos, oracle_dep };
enum class SelectorKind { topk, threshold, klass, eb };
enum class Temperature { greedy, sample };

/// How DOS combines with the entropy budget: rank by the scorer and budget
/// by entropy, or keep only positions whose dependency clears a threshold
/// and rank those by entropy.
enum class EbMode { rank, dependency_filter };

inline const char* to_string(ScorerKind s) {
    switch (s) {
        case ScorerKind::confidence: return "confidence";
        case ScorerKind::entropy: return "entropy";
        case ScorerKind::margin: return "margin";
        case ScorerKind::dos: return "dos";
        case ScorerKind::oracle_dep: return "oracle_dep";
    }
    return "?";
}

inline const char* to_string(SelectorKind s) {
    switch (s) {
        case SelectorKind::topk: return "topk";
        case SelectorKind::threshold: return "threshold";
        case SelectorKind::klass: return "klass";
        case SelectorKind::eb: return "eb";
    }
    return "?";
}

struct PolicyConfig {
    ScorerKind scorer = ScorerKind::confidence;
    SelectorKind selector = SelectorKind::topk;
    std::size_t steps = 0;        // T; 0 means one step per generated token
    std::size_t k = 0;            // fixed top-K per step; 0 derives K from T
    double eps = 0.95;            // confidence threshold
    double tau = 0.9;             // KLASS confidence threshold
    double eps_kl = 0.01;         // KLASS KL threshold
    std::size_t history = 2;      // KLASS n
    double gamma = 0.01;          // entropy budget, nats
    EbMode eb_mode = EbMode::rank;
    double dep_threshold = 0.5;   // used by EbMode::dependency_filter
    std::size_t block_size = 0;   // 0 = single block
    Temperature temperature = Temperature::greedy;
    std::size_t layer = 0;        // attention block used by the dos scorer
    bool remask = false;          // stochastic reverse-step remasking (top-K only)

    void validate() const {
        if (!(eps > 0.0 && eps < 1.0)) throw std::invalid_argument("eps must lie in (0,1)");
        if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("tau must lie in (0,1)");
        if (!(eps_kl > 0.0)) throw std::invalid_argument("eps_kl must be > 0");
        if (history < 1) throw std::invalid_argument("history length n must be >= 1");
        if (!(gamma >= 0.0)) throw std::invalid_argument("gamma must be >= 0");
        if (remask && selector != SelectorKind::topk) throw std::invalid_argument("remasking requires the topk selector");
    }
};

// ---------------------------------------------------------------------------
// Token commit and selectors
// ---------------------------------------------------------------------------

/// Greedy: argmax with lowest-id tie-break. Sample: exact categorical draw.
inline Token commit_token(const Categorical& p, Temperature temperature, Rng& rng) {
    if (temperature == Temperature::greedy) return p.argmax();
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double u = unif(rng);
    double c = 0.0;
    const auto& probs = p.probs();
    for (std::size_t v = 0; v < probs.size(); ++v) {
        c += probs[v];
        if (u < c) return static_cast<Token>(v) + 1;
    }
    for (std::size_t v = probs.size(); v-- > 0;) {
        if (probs[v] > 0.0) return static_cast<Token>(v) + 1;
    }
    return 1;
}

/// Scored positions by descending score, ties broken by lowest position.
inline std::vector<std::size_t> ranked_positions(const ScoreVector& scores) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (scores.is_scored(i)) idx.push_back(i);
    }
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return idx;
}

inline std::vector<std::size_t> sorted(std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end());
    return v;
}

/// The min(k, #scored) highest-scoring positions.
inline std::vector<std::size_t> select_topk(const ScoreVector& scores, std::size_t k) {
    if (k < 1) throw std::invalid_argument("top-k needs k >= 1");
    auto ranked = ranked_positions(scores);
    if (ranked.empty()) throw std::invalid_argument("no masked positions to select");
    ranked.resize(std::min(k, ranked.size()));
    return sorted(std::move(ranked));
}

/// Positions with confidence above eps, else the single most confident one.
inline std::vector<std::size_t> select_threshold(const ScoreVector& conf, double eps) {
    auto ranked = ranked_positions(conf);
    if (ranked.empty()) throw std::invalid_argument("no masked positions to select");
    std::vector<std::size_t> out;
    for (std::size_t i : ranked) {
        if (conf[i] > eps) out.push_back(i);
    }
    if (out.empty()) out.push_back(ranked.front());
    return sorted(std::move(out));
}

/// Per-position record of the last n+1 predictive distributions.
class History {
public:
    History(std::size_t length, std::size_t n) : n_(n), dists_(length) {
        if (n < 1) throw std::invalid_argument("history length n must be >= 1");
    }

    void record(std::size_t position, const Categorical& p) {
        auto& h = dists_.at(position);
        h.push_back(p);
        if (h.size() > n_ + 1) h.erase(h.begin());
    }

    void clear(std::size_t position) { dists_.at(position).clear(); }
    std::size_t size(std::size_t position) const { return dists_.at(position).size(); }
    std::size_t n() const noexcept { return n_; }

    /// True when n+1 distributions are recorded and every consecutive
    /// KL(older || newer) is below eps_kl.
    bool stable(std::size_t position, double eps_kl) const {
        const auto& h = dists_.at(position);
        if (h.size() < n_ + 1) return false;
        for (std::size_t k = 1; k < h.size(); ++k) {
            if (!(kl_divergence(h[k - 1], h[k]) < eps_kl)) return false;
        }
        return true;
    }

private:
    std::size_t n_;
    std::vector<std::vector<Categorical>> dists_;
};

/// Positions that are KL-stable over the history and more confident than
/// tau; falls back to the single most confident position.
inline std::vector<std::size_t> select_klass(const History& history, const ScoreVector& conf, double tau, double eps_kl) {
    auto ranked = ranked_positions(conf);
    if (ranked.empty()) throw std::invalid_argument("no masked positions to select");
    std::vector<std::size_t> out;
    for (std::size_t i : ranked) {
        if (conf[i] > tau && history.stable(i, eps_kl)) out.push_back(i);
    }
    if (out.empty()) out.push_back(ranked.front());
    return sorted(std::move(out));
}

/// Longest prefix of the ranking whose entropy sum minus prefix-max entropy
/// stays within gamma. A singleton always qualifies.
inline std::vector<std::size_t> select_eb(const ScoreVector& ranking, const ScoreVector& entropies, double gamma) {
    if (!(gamma >= 0.0)) throw std::invalid_argument("gamma must be >= 0");
    const auto ranked = ranked_positions(ranking);
    if (ranked.empty()) throw std::invalid_argument("no masked positions to select");
    std::vector<std::size_t> out;
    double sum = 0.0, mx = 0.0;
    for (std::size_t i : ranked) {
        const double e = entropies[i];
        const double nsum = sum + e;
        const double nmx = out.empty() ? e : std::max(mx, e);
        if (!out.empty() && nsum - nmx > gamma) break;
        sum = nsum;
        mx = nmx;
        out.push_back(i);
    }
    return sorted(std::move(out));
}

// ---------------------------------------------------------------------------
// Denoisers
// ---------------------------------------------------------------------------

class Denoiser {
public:
    virtual ~Denoiser() = default;
    virtual DenoiserOutput forward(const SequenceState& state) const = 0;
    /// Attention-free dependency scores, available only from oracle denoisers.
    virtual std::optional<ScoreVector> oracle_dependency(const SequenceState&) const { return std::nullopt; }
    virtual std::size_t num_layers() const { return 0; }
    virtual std::size_t max_length() const = 0;
    virtual int vocab_size() const = 0;
};

/// The ideal denoiser: exact conditionals of a known joint.
class OracleDenoiser final : public Denoiser {
public:
    explicit OracleDenoiser(JointModel model, std::size_t limit = kDefaultEnumerationLimit)
        : model_(std::move(model)), limit_(limit), table_(model_.dense_table(limit)) {}

    DenoiserOutput forward(const SequenceState& state) const override {
        return DenoiserOutput{conditional_marginal(model_, state, limit_), {}};
    }

    std::optional<ScoreVector> oracle_dependency(const SequenceState& state) const override {
        return ScoreVector(oracle_dependency_scores(model_, table_, state, limit_));
    }

    std::size_t max_length() const override { return model_.length(); }
    int vocab_size() const override { return model_.vocab_size(); }
    const JointModel& model() const noexcept { return model_; }

private:
    JointModel model_;
    std::size_t limit_;
    std::vector<double> table_;
};

class TransformerDenoiser final : public Denoiser {
public:
    explicit TransformerDenoiser(nn::Params params) : params_(std::move(params)) {}

    DenoiserOutput forward(const SequenceState& state) const override { return nn::forward(params_, state); }
    std::size_t num_layers() const override { return static_cast<std::size_t>(params_.config().n_layers); }
    std::size_t max_length() const override { return static_cast<std::size_t>(params_.config().max_len); }
    int vocab_size() const override { return params_.config().vocab_size; }
    const nn::Params& params() const noexcept { return params_; }

private:
    nn::Params params_;
};

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

struct TraceStep {
    std::vector<std::size_t> positions;  // committed this step
    Tokens tokens;
    std::vector<double> scores;          // score that drove each selection
    std::size_t nfe = 0;                 // cumulative forward calls
};

struct DecodeTrace {
    std::vector<TraceStep> steps;
    std::size_t nfe() const { return steps.empty() ? 0 : steps.back().nfe; }
};

// ---------------------------------------------------------------------------
// Session
// ---------------------------------------------------------------------------

/// Selection made for one step, with everything needed to commit it.
struct StepPlan {
    std::vector<std::size_t> positions;
    std::vector<double> scores;
    std::vector<Categorical> dists;  // predictive distribution per selected position
    double keep_masked_prob = 0.0;   // remask mode only
};

class DecodeSession {
public:
    /// `block_size` 0 means a single block over all generation positions.
    DecodeSession(PolicyConfig policy, SequenceState start)
        : policy_(std::move(policy)), state_(std::move(start)), history_(state_.length(), policy_.history) {
        policy_.validate();
        if (state_.count_masked() == 0) throw std::invalid_argument("decode needs at least one masked position");
        const std::size_t gen = state_.gen_len();
        block_ = policy_.block_size == 0 ? gen : std::min(policy_.block_size, gen);
        total_steps_ = policy_.steps == 0 ? gen : policy_.steps;
        advance_block();
    }

    bool done() const { return state_.count_masked() == 0; }
    const SequenceState& state() const noexcept { return state_; }
    const DecodeTrace& trace() const noexcept { return trace_; }
    std::size_t nfe() const noexcept { return nfe_; }
    const PolicyConfig& policy() const noexcept { return policy_; }

    /// Runs one forward pass and selects the positions to commit.
    StepPlan plan(const Denoiser& denoiser) {
        if (done()) throw std::logic_error("plan called on a finished decode");
        DenoiserOutput out = denoiser.forward(state_);
        ++nfe_;
        if (out.probs.size() != state_.length()) throw std::runtime_error("denoiser returned wrong number of positions");

        const auto masked = state_.masked_positions();
        for (std::size_t m : masked) history_.record(m, out.probs[m]);

        // Everything is scored over the whole sequence; selection sees only the active block.
        const ScoreVector conf = restrict(score(ScorerKind::confidence, denoiser, out));
        ScoreVector rank = policy_.scorer == ScorerKind::confidence ? conf : restrict(score(policy_.scorer, denoiser, out));

        std::vector<std::size_t> pick;
        const ScoreVector* driver = &rank;
        switch (policy_.selector) {
            case SelectorKind::topk:
                pick = select_topk(rank, topk_budget());
                break;
            case SelectorKind::threshold:
                pick = select_threshold(conf, policy_.eps);
                driver = &conf;
                break;
            case SelectorKind::klass:
                pick = select_klass(history_, conf, policy_.tau, policy_.eps_kl);
                driver = &conf;
                break;
            case SelectorKind::eb: {
                const ScoreVector neg_ent = restrict(score(ScorerKind::entropy, denoiser, out));
                ScoreVector ent(neg_ent.size());
                for (std::size_t i = 0; i < neg_ent.size(); ++i) {
                    if (neg_ent.is_scored(i)) ent.set(i, -neg_ent[i]);
                }
                if (policy_.eb_mode == EbMode::dependency_filter) {
                    // keep positions whose score clears the threshold, lowest entropy first
                    ScoreVector filtered(neg_ent.size());
                    const auto by_dep = ranked_positions(rank);
                    for (std::size_t i : by_dep) {
                        if (rank[i] >= policy_.dep_threshold) filtered.set(i, neg_ent[i]);
                    }
                    if (ranked_positions(filtered).empty()) filtered.set(by_dep.front(), neg_ent[by_dep.front()]);
                    pick = select_eb(filtered, ent, policy_.gamma);
                } else {
                    pick = select_eb(rank, ent, policy_.gamma);
                }
                break;
            }
        }

        StepPlan plan;
        plan.positions = std::move(pick);
        for (std::size_t p : plan.positions) {
            plan.scores.push_back((*driver)[p]);
            plan.dists.push_back(out.probs[p]);
        }
        if (policy_.remask) {
            const double steps = static_cast<double>(block_steps_);
            const double t = 1.0 - static_cast<double>(steps_in_block_) / steps;
            const double s = std::max(0.0, 1.0 - static_cast<double>(steps_in_block_ + 1) / steps);
            plan.keep_masked_prob = t > 0.0 ? (1.0 - LinearSchedule{}.alpha(s)) / (1.0 - LinearSchedule{}.alpha(t)) : 0.0;
        }
        return plan;
    }

    /// Commits `tokens[i]` at `plan.positions[i]`; entries equal to the MASK
    /// id stay masked (remask mode). Records one trace step.
    void commit(const StepPlan& plan, const Tokens& tokens) {
        if (tokens.size() != plan.positions.size()) throw std::invalid_argument("commit token count mismatch");
        TraceStep step;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const std::size_t p = plan.positions[i];
            if (!state_.is_masked(p)) throw std::logic_error("attempt to overwrite an unmasked position");
            if (tokens[i] == state_.vocab().mask_id()) continue;
            if (!state_.vocab().is_content(tokens[i])) throw std::invalid_argument("commit of invalid token");
            state_.set_token(p, tokens[i]);
            history_.clear(p);
            step.positions.push_back(p);
            step.tokens.push_back(tokens[i]);
            step.scores.push_back(plan.scores[i]);
        }
        step.nfe = nfe_;
        trace_.steps.push_back(std::move(step));
        ++steps_in_block_;
        advance_block();
    }

private:
    ScoreVector score(ScorerKind kind, const Denoiser& denoiser, const DenoiserOutput& out) const {
        const std::size_t L = state_.length();
        ScoreVector s(L);
        switch (kind) {
            case ScorerKind::confidence:
            case ScorerKind::entropy:
            case ScorerKind::margin:
                for (std::size_t i = 0; i < L; ++i) {
                    if (!state_.is_masked(i)) continue;
                    const auto& p = out.probs[i];
                    s.set(i, kind == ScorerKind::confidence ? confidence(p)
                             : kind == ScorerKind::entropy  ? -entropy(p)
                                                            : margin(p));
                }
                return s;
            case ScorerKind::dos:
                if (out.attentions.empty()) throw std::invalid_argument("dos scorer needs a denoiser with attentions");
                return dos_dependency(out.attentions, policy_.layer, state_.masked_positions(), state_.unmasked_positions());
            case ScorerKind::oracle_dep: {
                auto dep = denoiser.oracle_dependency(state_);
                if (!dep) throw std::invalid_argument("oracle_dep scorer needs an oracle denoiser");
                return *dep;
            }
        }
        return s;
    }

    /// Scores outside the active block become "not scored".
    ScoreVector restrict(ScoreVector s) const {
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i < block_begin_ || i >= block_end_ || !state_.is_masked(i)) s.set(i, ScoreVector::kUnscored);
        }
        return s;
    }

    std::size_t masked_in_block() const {
        std::size_t n = 0;
        for (std::size_t i = block_begin_; i < block_end_; ++i) n += state_.is_masked(i) ? 1 : 0;
        return n;
    }

    std::size_t topk_budget() const {
        if (policy_.k > 0) return policy_.k;
        const std::size_t remaining_steps = block_steps_ > steps_in_block_ ? block_steps_ - steps_in_block_ : 1;
        const std::size_t remaining = masked_in_block();
        return (remaining + remaining_steps - 1) / remaining_steps;
    }

    /// Moves to the first block that still has masked positions. Each block
    /// receives ceil(T * |block| / gen_len) steps, at least one.
    void advance_block() {
        if (block_end_ > block_begin_ && masked_in_block() > 0) return;
        const std::size_t gen = state_.gen_len();
        for (std::size_t b = state_.prompt_len(); b < state_.length(); b += block_) {
            block_begin_ = b;
            block_end_ = std::min(b + block_, state_.length());
            if (masked_in_block() > 0) {
                const std::size_t len = block_end_ - block_begin_;
                block_steps_ = std::max<std::size_t>(1, (total_steps_ * len + gen - 1) / gen);
                steps_in_block_ = 0;
                return;
            }
        }
    }

    PolicyConfig policy_;
    SequenceState state_;
    History history_;
    DecodeTrace trace_;
    std::size_t nfe_ = 0;
    std::size_t block_ = 1;
    std::size_t total_steps_ = 1;
    std::size_t block_begin_ = 0;
    std::size_t block_end_ = 0;
    std::size_t block_steps_ = 1;
    std::size_t steps_in_block_ = 0;
};

struct DecodeResult {
    SequenceState final_state;
    DecodeTrace trace;
};

namespace detail {

inline void check_denoiser(const Denoiser& denoiser, const SequenceState& start) {
    if (start.length() > denoiser.max_length()) {
        throw std::invalid_argument("denoiser covers " + std::to_string(denoiser.max_length()) +
                                    " positions, sequence needs " + std::to_string(start.length()));
    }
    if (denoiser.vocab_size() != start.vocab().size()) throw std::invalid_argument("denoiser vocabulary mismatch");
}

inline DecodeResult run_session(const Denoiser& denoiser, DecodeSession session, Rng& rng) {
    std::bernoulli_distribution keep(0.0);
    while (!session.done()) {
        const StepPlan plan = session.plan(denoiser);
        Tokens tokens;
        tokens.reserve(plan.positions.size());
        for (const auto& d : plan.dists) tokens.push_back(commit_token(d, session.policy().temperature, rng));
        if (session.policy().remask && plan.keep_masked_prob > 0.0) {
            keep = std::bernoulli_distribution(std::min(1.0, plan.keep_masked_prob));
            for (Token& t : tokens) {
                if (keep(rng)) t = session.state().vocab().mask_id();
            }
        }
        session.commit(plan, tokens);
    }
    return DecodeResult{session.state(), session.trace()};
}

}  // namespace detail

/// Single-block decode from `start` (prompt followed by MASK positions).
inline DecodeResult decode(const Denoiser& denoiser, PolicyConfig policy, const SequenceState& start, Rng& rng) {
    detail::check_denoiser(denoiser, start);
    policy.block_size = 0;
    return detail::run_session(denoiser, DecodeSession(std::move(policy), start), rng);
}

/// Semi-autoregressive decode: left-to-right blocks of policy.block_size
/// positions, each fully unmasked before the next one starts.
inline DecodeResult decode_blockwise(const Denoiser& denoiser, const PolicyConfig& policy, const SequenceState& start,
                                     Rng& rng) {
    detail::check_denoiser(denoiser, start);
    if (policy.block_size < 1) throw std::invalid_argument("block_size must be >= 1 for blockwise decoding");
    return detail::run_session(denoiser, DecodeSession(policy, start), rng);
}

/// Dispatches on policy.block_size (0 = single block).
inline DecodeResult run_policy(const Denoiser& denoiser, const PolicyConfig& policy, const SequenceState& start, Rng& rng) {
    return policy.block_size == 0 ? decode(denoiser, policy, start, rng) : decode_blockwise(denoiser, policy, start, rng);
}

struct ExactPolicyResult {
    SequenceDistribution distribution;
    double expected_nfe = 0.0;
    std::size_t paths = 0;
    /// Probability-weighted traces, one per outcome path.
    std::vector<std::pair<double, DecodeTrace>> traces;
};

/// Exact distribution induced by a policy whose selections are a
/// deterministic function of the decode state: branches the session over
/// every token assignment of each selected group. Remasking is not supported.
inline ExactPolicyResult enumerate_policy(const Denoiser& denoiser, const PolicyConfig& policy,
                                          const SequenceState& start, bool keep_traces = false,
                                          std::size_t limit = kDefaultEnumerationLimit) {
    detail::check_denoiser(denoiser, start);
    if (policy.remask) throw std::invalid_argument("remasking policies cannot be enumerated exactly");
    ExactPolicyResult r;
    const int V = start.vocab().size();
    double total_mass = 0.0;
    auto recurse = [&](auto&& self, DecodeSession session, double mass) -> void {
        if (session.done()) {
            r.distribution[session.state().tokens()] += mass;
            r.expected_nfe += mass * static_cast<double>(session.nfe());
            total_mass += mass;
            if (++r.paths > limit) throw EnumerationLimitError("policy enumeration exceeds path limit");
            if (keep_traces) r.traces.emplace_back(mass, session.trace());
            return;
        }
        const StepPlan plan = session.plan(denoiser);
        const std::size_t n = plan.positions.size();
        if (policy.temperature == Temperature::greedy) {
            Tokens tokens;
            for (const auto& d : plan.dists) tokens.push_back(d.argmax());
            session.commit(plan, tokens);
            self(self, std::move(session), mass);
            return;
        }
        const std::size_t combos = detail::checked_pow(static_cast<std::size_t>(V), n, limit);
        Tokens tokens(n);
        for (std::size_t idx = 0; idx < combos; ++idx) {
            std::size_t rest = idx;
            double p = mass;
            for (std::size_t k = n; k-- > 0;) {
                tokens[k] = static_cast<Token>(rest % static_cast<std::size_t>(V)) + 1;
                rest /= static_cast<std::size_t>(V);
                p *= plan.dists[k].prob(tokens[k]);
            }
            if (p == 0.0) continue;
            DecodeSession branch = session;
            branch.commit(plan, tokens);
            self(self, std::move(branch), p);
        }
    };
    recurse(recurse, DecodeSession(policy, start), 1.0);
    // path masses sum to 1 only up to rounding
    if (total_mass > 0.0) r.expected_nfe /= total_mass;
    return r;
}

}  // namespace dos
