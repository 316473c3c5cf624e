#pragma once

// Ground-truth joint distributions over short sequences, the exact denoiser
// they induce, and brute-force enumeration of what a parallel decoding
// schedule does to the joint.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "dos/core.hpp"
#include "dos/distribution.hpp"

namespace dos {

/// One node of a factorized joint: the node's position, its parents, and a
/// conditional table with V^|parents| rows of V entries. Rows are indexed
/// by the parent tokens in listed order, first parent most significant.
struct CptNode {
    std::size_t position = 0;
    std::vector<std::size_t> parents;
    std::vector<double> table;
};

namespace detail {

inline std::size_t checked_pow(std::size_t base, std::size_t exp, std::size_t limit) {
    std::size_t r = 1;
    for (std::size_t i = 0; i < exp; ++i) {
        if (r > limit / base) {
            throw EnumerationLimitError("enumeration of " + std::to_string(base) + "^" + std::to_string(exp) +
                                        " states exceeds limit " + std::to_string(limit));
        }
        r *= base;
    }
    return r;
}

/// Decodes `index` into tokens (1-based) at `positions`, first position most significant.
inline void decode_index(std::size_t index, int vocab, std::span<const std::size_t> positions, Tokens& out) {
    for (std::size_t k = positions.size(); k-- > 0;) {
        out[positions[k]] = static_cast<Token>(index % static_cast<std::size_t>(vocab)) + 1;
        index /= static_cast<std::size_t>(vocab);
    }
}

inline std::size_t encode_index(const Tokens& tokens, int vocab, std::span<const std::size_t> positions) {
    std::size_t idx = 0;
    for (std::size_t p : positions) idx = idx * static_cast<std::size_t>(vocab) + static_cast<std::size_t>(tokens[p] - 1);
    return idx;
}

inline std::vector<std::size_t> iota_positions(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
}

}  // namespace detail

/// Explicit joint distribution p(x_1..x_L) over V content tokens, either
/// as a full table or as a Bayesian network with conditional tables.
class JointModel {
public:
    enum class Kind { tabular, dag };

    static constexpr double kTolerance = 1e-12;

    /// `table` has V^L entries indexed with position 0 most significant.
    static JointModel tabular(int vocab_size, std::size_t length, std::vector<double> table,
                              double tolerance = kTolerance) {
        JointModel m(vocab_size, length);
        m.kind_ = Kind::tabular;
        const std::size_t n = detail::checked_pow(static_cast<std::size_t>(vocab_size), length,
                                                  std::numeric_limits<std::size_t>::max() / 2);
        if (table.size() != n) {
            throw std::invalid_argument("tabular joint needs " + std::to_string(n) + " entries, got " +
                                        std::to_string(table.size()));
        }
        double sum = 0.0;
        for (double p : table) {
            if (!(p >= 0.0) || !std::isfinite(p)) throw std::invalid_argument("tabular joint has a negative entry");
            sum += p;
        }
        if (std::abs(sum - 1.0) > tolerance) {
            throw std::invalid_argument("tabular joint sums to " + std::to_string(sum));
        }
        m.table_ = std::move(table);
        return m;
    }

    static JointModel dag(int vocab_size, std::size_t length, std::vector<CptNode> nodes,
                          double tolerance = kTolerance) {
        JointModel m(vocab_size, length);
        m.kind_ = Kind::dag;
        if (nodes.size() != length) throw std::invalid_argument("DAG must have exactly one node per position");
        std::vector<CptNode> by_pos(length);
        std::vector<bool> seen(length, false);
        const auto V = static_cast<std::size_t>(vocab_size);
        for (auto& node : nodes) {
            if (node.position >= length || seen[node.position]) {
                throw std::invalid_argument("DAG node position out of range or duplicated");
            }
            seen[node.position] = true;
            for (std::size_t p : node.parents) {
                if (p >= length) throw std::invalid_argument("DAG parent out of range");
                if (p == node.position) throw std::invalid_argument("DAG node lists itself as a parent");
            }
            const std::size_t rows = detail::checked_pow(V, node.parents.size(), std::size_t{1} << 40);
            if (node.table.size() != rows * V) {
                throw std::invalid_argument("CPT for node " + std::to_string(node.position) + " needs " +
                                            std::to_string(rows * V) + " entries");
            }
            for (std::size_t r = 0; r < rows; ++r) {
                double sum = 0.0;
                for (std::size_t v = 0; v < V; ++v) {
                    const double p = node.table[r * V + v];
                    if (!(p >= 0.0) || !std::isfinite(p)) throw std::invalid_argument("CPT has a negative entry");
                    sum += p;
                }
                if (std::abs(sum - 1.0) > tolerance) {
                    throw std::invalid_argument("CPT row " + std::to_string(r) + " of node " +
                                                std::to_string(node.position) + " sums to " + std::to_string(sum));
                }
            }
            by_pos[node.position] = std::move(node);
        }
        m.nodes_ = std::move(by_pos);
        m.order_ = m.topological_order();
        return m;
    }

    Kind kind() const noexcept { return kind_; }
    int vocab_size() const noexcept { return vocab_; }
    Vocabulary vocab() const { return Vocabulary(vocab_); }
    std::size_t length() const noexcept { return length_; }
    const std::vector<double>& table() const noexcept { return table_; }
    const std::vector<CptNode>& nodes() const noexcept { return nodes_; }
    const std::vector<std::size_t>& ancestral_order() const noexcept { return order_; }

    /// Joint probability of a fully unmasked assignment.
    double prob(std::span<const Token> x) const {
        if (x.size() != length_) throw std::invalid_argument("assignment length does not match joint length");
        for (Token t : x) {
            if (t < 1 || t > vocab_) throw std::invalid_argument("assignment contains a non-content token");
        }
        return prob_unchecked(x);
    }

    /// Dense table of all V^L joint probabilities.
    std::vector<double> dense_table(std::size_t limit = kDefaultEnumerationLimit) const {
        const std::size_t n = detail::checked_pow(static_cast<std::size_t>(vocab_), length_, limit);
        if (kind_ == Kind::tabular) return table_;
        std::vector<double> out(n);
        Tokens x(length_);
        const auto all = detail::iota_positions(length_);
        for (std::size_t i = 0; i < n; ++i) {
            detail::decode_index(i, vocab_, all, x);
            out[i] = prob_unchecked(x);
        }
        return out;
    }

    double cpt_entry(const CptNode& node, std::span<const Token> x) const {
        std::size_t row = 0;
        for (std::size_t p : node.parents) row = row * static_cast<std::size_t>(vocab_) + static_cast<std::size_t>(x[p] - 1);
        return node.table[row * static_cast<std::size_t>(vocab_) + static_cast<std::size_t>(x[node.position] - 1)];
    }

private:
    JointModel(int vocab_size, std::size_t length) : vocab_(vocab_size), length_(length) {
        if (vocab_size < 2) throw std::invalid_argument("joint vocabulary size must be >= 2");
        if (length == 0) throw std::invalid_argument("joint length must be >= 1");
    }

    double prob_unchecked(std::span<const Token> x) const {
        if (kind_ == Kind::tabular) {
            std::size_t idx = 0;
            for (Token t : x) idx = idx * static_cast<std::size_t>(vocab_) + static_cast<std::size_t>(t - 1);
            return table_[idx];
        }
        double p = 1.0;
        for (const auto& node : nodes_) {
            p *= cpt_entry(node, x);
            if (p == 0.0) break;
        }
        return p;
    }

    std::vector<std::size_t> topological_order() const {
        // Kahn's algorithm; lowest position first among ready nodes.
        std::vector<std::size_t> indeg(length_, 0);
        std::vector<std::vector<std::size_t>> children(length_);
        for (const auto& n : nodes_) {
            indeg[n.position] = n.parents.size();
            for (std::size_t p : n.parents) children[p].push_back(n.position);
        }
        std::vector<std::size_t> order;
        std::vector<bool> done(length_, false);
        while (order.size() < length_) {
            bool progressed = false;
            for (std::size_t i = 0; i < length_; ++i) {
                if (!done[i] && indeg[i] == 0) {
                    done[i] = true;
                    order.push_back(i);
                    for (std::size_t c : children[i]) --indeg[c];
                    progressed = true;
                    break;
                }
            }
            if (!progressed) throw std::invalid_argument("DAG parent relation contains a cycle");
        }
        return order;
    }

    Kind kind_ = Kind::tabular;
    int vocab_;
    std::size_t length_;
    std::vector<double> table_;
    std::vector<CptNode> nodes_;
    std::vector<std::size_t> order_;
};

/// Ordered list of disjoint, nonempty position groups covering every
/// generation position exactly once.
class GroupSchedule {
public:
    GroupSchedule(std::vector<std::vector<std::size_t>> groups) : groups_(std::move(groups)) {}

    const std::vector<std::vector<std::size_t>>& groups() const noexcept { return groups_; }

    /// Throws unless the groups partition the non-prompt positions of `state`.
    void validate(const SequenceState& state) const {
        std::vector<int> count(state.length(), 0);
        for (const auto& g : groups_) {
            if (g.empty()) throw std::invalid_argument("group schedule contains an empty group");
            for (std::size_t p : g) {
                if (p >= state.length()) throw std::invalid_argument("group schedule position out of range");
                if (p < state.prompt_len()) throw std::invalid_argument("group schedule includes a prompt position");
                ++count[p];
            }
        }
        for (std::size_t i = state.prompt_len(); i < state.length(); ++i) {
            if (count[i] != 1) {
                throw std::invalid_argument("position " + std::to_string(i) +
                                            " is not covered exactly once by the group schedule");
            }
        }
    }

    static GroupSchedule sequential(std::size_t prompt_len, std::size_t length) {
        std::vector<std::vector<std::size_t>> g;
        for (std::size_t i = prompt_len; i < length; ++i) g.push_back({i});
        return GroupSchedule(std::move(g));
    }

    static GroupSchedule single_group(std::size_t prompt_len, std::size_t length) {
        std::vector<std::size_t> all;
        for (std::size_t i = prompt_len; i < length; ++i) all.push_back(i);
        return GroupSchedule({all});
    }

private:
    std::vector<std::vector<std::size_t>> groups_;
};

inline double joint_prob(const JointModel& model, std::span<const Token> assignment) {
    return model.prob(assignment);
}

inline void check_compatible(const JointModel& model, const SequenceState& state) {
    if (state.length() != model.length()) {
        throw std::invalid_argument("state length " + std::to_string(state.length()) + " does not match joint length " +
                                    std::to_string(model.length()));
    }
    if (state.vocab().size() != model.vocab_size()) throw std::invalid_argument("state vocabulary does not match joint");
}

/// Exact p(x_i = v | unmasked tokens) for every position, obtained by
/// summing the joint over all completions of the masked positions.
/// Unmasked positions receive a point mass on their token.
inline std::vector<Categorical> conditional_marginal(const JointModel& model, const SequenceState& state,
                                                     std::size_t limit = kDefaultEnumerationLimit) {
    check_compatible(model, state);
    const auto masked = state.masked_positions();
    if (masked.empty()) throw std::invalid_argument("conditional_marginal needs at least one masked position");
    const int V = model.vocab_size();
    const std::size_t n = detail::checked_pow(static_cast<std::size_t>(V), masked.size(), limit);

    std::vector<std::vector<double>> acc(masked.size(), std::vector<double>(static_cast<std::size_t>(V), 0.0));
    Tokens x = state.tokens();
    double z = 0.0;
    for (std::size_t idx = 0; idx < n; ++idx) {
        detail::decode_index(idx, V, masked, x);
        const double p = model.prob(x);
        if (p == 0.0) continue;
        z += p;
        for (std::size_t k = 0; k < masked.size(); ++k) acc[k][static_cast<std::size_t>(x[masked[k]] - 1)] += p;
    }
    if (!(z > 0.0)) throw ZeroSupportError("conditioning event has zero probability under the joint");

    std::vector<Categorical> out;
    out.reserve(state.length());
    std::size_t k = 0;
    for (std::size_t i = 0; i < state.length(); ++i) {
        if (k < masked.size() && masked[k] == i) {
            for (double& a : acc[k]) a /= z;
            out.push_back(Categorical::from_weights(std::move(acc[k])));
            ++k;
        } else {
            out.push_back(Categorical::point_mass(V, state[i]));
        }
    }
    return out;
}

/// Target distribution: the joint conditioned on the unmasked tokens of
/// `state`, as a table over full sequences.
inline SequenceDistribution conditional_joint(const JointModel& model, const SequenceState& state,
                                              std::size_t limit = kDefaultEnumerationLimit) {
    check_compatible(model, state);
    const auto masked = state.masked_positions();
    const int V = model.vocab_size();
    const std::size_t n = detail::checked_pow(static_cast<std::size_t>(V), masked.size(), limit);
    SequenceDistribution d;
    Tokens x = state.tokens();
    double z = 0.0;
    for (std::size_t idx = 0; idx < n; ++idx) {
        detail::decode_index(idx, V, masked, x);
        const double p = model.prob(x);
        if (p == 0.0) continue;
        d[x] = p;
        z += p;
    }
    if (!(z > 0.0)) throw ZeroSupportError("conditioning event has zero probability under the joint");
    for (auto& [_, p] : d) p /= z;
    return d;
}

/// Exact distribution over full sequences produced by unmasking each group
/// of `schedule` in parallel from independent per-position conditionals,
/// conditioning every later group on the realized tokens.
inline SequenceDistribution exact_policy_distribution(const JointModel& model, const SequenceState& start,
                                                      const GroupSchedule& schedule,
                                                      std::size_t limit = kDefaultEnumerationLimit) {
    check_compatible(model, start);
    schedule.validate(start);
    detail::checked_pow(static_cast<std::size_t>(model.vocab_size()), model.length(), limit);
    for (std::size_t i = start.prompt_len(); i < start.length(); ++i) {
        if (!start.is_masked(i)) throw std::invalid_argument("exact_policy_distribution expects generation positions masked");
    }

    SequenceDistribution out;
    const int V = model.vocab_size();
    const auto& groups = schedule.groups();

    auto recurse = [&](auto&& self, const SequenceState& state, std::size_t g, double mass) -> void {
        if (g == groups.size()) {
            out[state.tokens()] += mass;
            return;
        }
        const auto marg = conditional_marginal(model, state, limit);
        const auto& group = groups[g];
        const std::size_t n = detail::checked_pow(static_cast<std::size_t>(V), group.size(), limit);
        Tokens x = state.tokens();
        for (std::size_t idx = 0; idx < n; ++idx) {
            detail::decode_index(idx, V, group, x);
            double p = mass;
            for (std::size_t pos : group) p *= marg[pos].prob(x[pos]);
            if (p == 0.0) continue;
            self(self, SequenceState(state.vocab(), x, state.prompt_len()), g + 1, p);
        }
    };
    recurse(recurse, start, 0, 1.0);
    return out;
}

/// Exact ancestral (DAG) or inverse-CDF (tabular) sampling.
inline Tokens sample_joint(const JointModel& model, Rng& rng) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const auto V = static_cast<std::size_t>(model.vocab_size());
    Tokens x(model.length(), 1);
    if (model.kind() == JointModel::Kind::tabular) {
        const auto& table = model.table();
        const double u = unif(rng);
        double c = 0.0;
        std::size_t pick = table.size() - 1;
        for (std::size_t i = 0; i < table.size(); ++i) {
            c += table[i];
            if (u < c) {
                pick = i;
                break;
            }
        }
        while (table[pick] == 0.0 && pick > 0) --pick;  // rounding at the top of the CDF
        detail::decode_index(pick, model.vocab_size(), detail::iota_positions(model.length()), x);
        return x;
    }
    for (std::size_t pos : model.ancestral_order()) {
        const auto& node = model.nodes()[pos];
        std::size_t row = 0;
        for (std::size_t p : node.parents) row = row * V + static_cast<std::size_t>(x[p] - 1);
        const double u = unif(rng);
        double c = 0.0;
        std::size_t pick = V - 1;
        for (std::size_t v = 0; v < V; ++v) {
            c += node.table[row * V + v];
            if (u < c) {
                pick = v;
                break;
            }
        }
        while (node.table[row * V + pick] == 0.0 && pick > 0) --pick;
        x[pos] = static_cast<Token>(pick) + 1;
    }
    return x;
}

/// Mutual information I(X_m ; X_U) under the joint for every masked m, where
/// U is the unmasked set of `state` and the remaining masked positions are
/// marginalized. An attention-free stand-in for the attention dependency score.
/// Entries at unmasked positions are NaN ("not scored").
/// `table` is model.dense_table(), passed in so callers can reuse it.
inline std::vector<double> oracle_dependency_scores(const JointModel& model, std::span<const double> table,
                                                    const SequenceState& state,
                                                    std::size_t limit = kDefaultEnumerationLimit) {
    check_compatible(model, state);
    const auto V = static_cast<std::size_t>(model.vocab_size());
    const auto masked = state.masked_positions();
    const auto unmasked = state.unmasked_positions();
    if (table.size() != detail::checked_pow(V, model.length(), limit)) {
        throw std::invalid_argument("dense table does not match the joint");
    }
    const std::size_t nu = detail::checked_pow(V, unmasked.size(), limit);

    std::vector<double> pu(nu, 0.0);
    std::vector<std::vector<double>> pm(masked.size(), std::vector<double>(V, 0.0));
    std::vector<std::vector<double>> pmu(masked.size(), std::vector<double>(V * nu, 0.0));
    Tokens x(model.length());
    const auto all = detail::iota_positions(model.length());
    for (std::size_t i = 0; i < table.size(); ++i) {
        const double p = table[i];
        if (p == 0.0) continue;
        detail::decode_index(i, model.vocab_size(), all, x);
        const std::size_t u = detail::encode_index(x, model.vocab_size(), unmasked);
        pu[u] += p;
        for (std::size_t k = 0; k < masked.size(); ++k) {
            const auto v = static_cast<std::size_t>(x[masked[k]] - 1);
            pm[k][v] += p;
            pmu[k][v * nu + u] += p;
        }
    }
    std::vector<double> scores(state.length(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t k = 0; k < masked.size(); ++k) {
        double mi = 0.0;
        for (std::size_t v = 0; v < V; ++v) {
            for (std::size_t u = 0; u < nu; ++u) {
                const double j = pmu[k][v * nu + u];
                if (j > 0.0) mi += j * std::log(j / (pm[k][v] * pu[u]));
            }
        }
        scores[masked[k]] = std::max(0.0, mi);
    }
    return scores;
}

inline std::vector<double> oracle_dependency_scores(const JointModel& model, const SequenceState& state,
                                                    std::size_t limit = kDefaultEnumerationLimit) {
    return oracle_dependency_scores(model, model.dense_table(limit), state, limit);
}

inline double oracle_dependency(const JointModel& model, const SequenceState& state, std::size_t position,
                                std::size_t limit = kDefaultEnumerationLimit) {
    if (!state.is_masked(position)) throw std::invalid_argument("oracle_dependency requires a masked position");
    return oracle_dependency_scores(model, state, limit)[position];
}

}  // namespace dos
