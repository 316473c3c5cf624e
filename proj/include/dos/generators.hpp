#pragma once

// Seeded families of small ground-truth joints.

#include <random>
#include <string>

#include "dos/oracle.hpp"

namespace dos::gen {

/// Row of V probabilities: the first token gets `p1`, the rest share 1 - p1.
inline std::vector<double> binary_row(double p1) { return {p1, 1.0 - p1}; }

/// Symmetric-Dirichlet(alpha) row via normalized gamma draws.
inline std::vector<double> dirichlet_row(int V, double alpha, Rng& rng) {
    std::gamma_distribution<double> g(alpha, 1.0);
    std::vector<double> w(static_cast<std::size_t>(V));
    double z = 0.0;
    for (auto& x : w) {
        x = g(rng) + 1e-12;
        z += x;
    }
    for (auto& x : w) x /= z;
    // absorb rounding so the row sums to 1 within the joint tolerance
    double s = 0.0;
    for (std::size_t i = 0; i + 1 < w.size(); ++i) s += w[i];
    w.back() = std::max(0.0, 1.0 - s);
    return w;
}

inline JointModel uniform_joint(int V, std::size_t L) {
    std::vector<CptNode> nodes;
    for (std::size_t i = 0; i < L; ++i) {
        nodes.push_back(CptNode{i, {}, std::vector<double>(static_cast<std::size_t>(V), 1.0 / V)});
    }
    return JointModel::dag(V, L, std::move(nodes));
}

/// Independent positions with random marginals.
inline JointModel independent_joint(int V, std::size_t L, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<CptNode> nodes;
    for (std::size_t i = 0; i < L; ++i) nodes.push_back(CptNode{i, {}, dirichlet_row(V, 1.0, rng)});
    return JointModel::dag(V, L, std::move(nodes));
}

/// Random full table from a symmetric Dirichlet(1).
inline JointModel random_tabular(int V, std::size_t L, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t n = detail::checked_pow(static_cast<std::size_t>(V), L, kDefaultEnumerationLimit);
    std::exponential_distribution<double> e(1.0);
    std::vector<double> t(n);
    double z = 0.0;
    for (auto& x : t) {
        x = e(rng);
        z += x;
    }
    for (auto& x : t) x /= z;
    return JointModel::tabular(V, L, std::move(t), 1e-9);
}

/// Markov chain x_0 -> x_1 -> ... -> x_{L-1} with Dirichlet(alpha) rows.
inline JointModel chain_joint(int V, std::size_t L, std::uint64_t seed, double alpha = 0.5) {
    Rng rng(seed);
    std::vector<CptNode> nodes;
    nodes.push_back(CptNode{0, {}, dirichlet_row(V, 1.0, rng)});
    for (std::size_t i = 1; i < L; ++i) {
        CptNode n{i, {i - 1}, {}};
        for (int r = 0; r < V; ++r) {
            auto row = dirichlet_row(V, alpha, rng);
            n.table.insert(n.table.end(), row.begin(), row.end());
        }
        nodes.push_back(std::move(n));
    }
    return JointModel::dag(V, L, std::move(nodes));
}

/// Random tree rooted at position 0 (the prompt). Each other position picks
/// a parent among positions that precede it in a random visiting order, so
/// the dependency structure is unrelated to position order. Rows are
/// Dirichlet(alpha); small alpha gives strongly coupled edges.
inline JointModel random_tree(int V, std::size_t L, std::uint64_t seed, double alpha = 0.5) {
    Rng rng(seed);
    std::vector<std::size_t> order(L - 1);
    std::iota(order.begin(), order.end(), std::size_t{1});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> placed{0};
    std::vector<CptNode> nodes;
    nodes.push_back(CptNode{0, {}, std::vector<double>(static_cast<std::size_t>(V), 1.0 / V)});
    for (std::size_t pos : order) {
        std::uniform_int_distribution<std::size_t> pick(0, placed.size() - 1);
        CptNode n{pos, {placed[pick(rng)]}, {}};
        for (int r = 0; r < V; ++r) {
            auto row = dirichlet_row(V, alpha, rng);
            n.table.insert(n.table.end(), row.begin(), row.end());
        }
        nodes.push_back(std::move(n));
        placed.push_back(pos);
    }
    return JointModel::dag(V, L, std::move(nodes));
}

// ---------------------------------------------------------------------------
// Four-token toy: prompt C, C -> X1, C -> X2, X1 -> X3, X1 -> X4, X2 -> X4.
// Positions: C = 0, X1 = 1, X2 = 2, X3 = 3, X4 = 4; binary vocabulary.
// ---------------------------------------------------------------------------

namespace fig2 {

inline constexpr std::size_t C = 0, X1 = 1, X2 = 2, X3 = 3, X4 = 4;

/// The four parallel orders: all at once; {X1,X3} then {X2,X4};
/// {X2,X3} then {X1,X4}; {X1,X2} then {X3,X4}.
inline GroupSchedule schedule(char which) {
    switch (which) {
        case 'a': return GroupSchedule({{X1, X2, X3, X4}});
        case 'b': return GroupSchedule({{X1, X3}, {X2, X4}});
        case 'c': return GroupSchedule({{X2, X3}, {X1, X4}});
        case 'd': return GroupSchedule({{X1, X2}, {X3, X4}});
        default: throw std::invalid_argument(std::string("unknown schedule ") + which);
    }
}

/// One draw of conditional tables with every "1" probability uniform in
/// [0.05, 0.95].
inline JointModel draw(Rng& rng) {
    std::uniform_real_distribution<double> u(0.05, 0.95);
    auto rows = [&](std::size_t n) {
        std::vector<double> t;
        for (std::size_t r = 0; r < n; ++r) {
            auto row = binary_row(u(rng));
            t.insert(t.end(), row.begin(), row.end());
        }
        return t;
    };
    std::vector<CptNode> nodes{
        CptNode{C, {}, rows(1)},          CptNode{X1, {C}, rows(2)},      CptNode{X2, {C}, rows(2)},
        CptNode{X3, {X1}, rows(2)},       CptNode{X4, {X1, X2}, rows(4)},
    };
    return JointModel::dag(2, 5, std::move(nodes));
}

inline SequenceState start_state(Token prompt = 1) {
    return make_masked_state(Vocabulary(2), {prompt}, 4);
}

/// TV distance between the target p(X | C = prompt) and what `schedule` induces.
inline double schedule_tv(const JointModel& m, char which, Token prompt = 1) {
    const auto start = start_state(prompt);
    return tv_distance(conditional_joint(m, start), exact_policy_distribution(m, start, schedule(which)));
}

/// First draw from `seed` whose orders (a), (b), (c) all sit more than
/// `min_tv` away from the target for prompt C = 1.
inline JointModel seeded(std::uint64_t seed, double min_tv = 0.01) {
    Rng rng(seed);
    for (int attempt = 0; attempt < 10000; ++attempt) {
        auto m = draw(rng);
        if (schedule_tv(m, 'a') > min_tv && schedule_tv(m, 'b') > min_tv && schedule_tv(m, 'c') > min_tv) return m;
    }
    throw std::runtime_error("no admissible four-token joint found for seed " + std::to_string(seed));
}

}  // namespace fig2

/// Two copies of the four-token structure sharing the prompt, laid out as
/// [C | H1 H2 A B | H1' H2' A' B'] where H are hubs (children of C) and
/// A, B are leaves (A <- H1, B <- H1, H2). Hubs are nearly fixed when
/// C = 2, so each hub carries more information about C than any leaf; given
/// C = 1 the leaves are more confident than the hubs. Every edge crosses a
/// block boundary at block size 2. Total length 9, binary vocabulary.
inline JointModel cross_block_joint(std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> hub(0.62, 0.75);
    std::uniform_real_distribution<double> leaf_hi(0.97, 0.995);
    std::uniform_real_distribution<double> leaf_lo(0.15, 0.35);
    std::uniform_real_distribution<double> mix(0.55, 0.8);
    std::vector<CptNode> nodes{CptNode{0, {}, binary_row(0.5)}};
    for (std::size_t unit = 0; unit < 2; ++unit) {
        const std::size_t base = 1 + 4 * unit;
        const std::size_t h1 = base, h2 = base + 1, a = base + 2, b = base + 3;
        const double p1 = hub(rng), p2 = hub(rng);
        nodes.push_back(CptNode{h1, {0}, {p1, 1 - p1, 0.01, 0.99}});
        nodes.push_back(CptNode{h2, {0}, {p2, 1 - p2, 0.01, 0.99}});
        const double ahi = leaf_hi(rng), alo = leaf_lo(rng);
        nodes.push_back(CptNode{a, {h1}, {ahi, 1 - ahi, alo, 1 - alo}});
        const double bhh = leaf_hi(rng), bmix = mix(rng), blo = leaf_lo(rng);
        nodes.push_back(CptNode{b, {h1, h2}, {bhh, 1 - bhh, bmix, 1 - bmix, bmix, 1 - bmix, blo, 1 - blo}});
    }
    return JointModel::dag(2, 9, std::move(nodes));
}

/// Named generator used by config files: fig2, tree, chain, cross_block,
/// independent, tabular, uniform.
inline JointModel by_name(const std::string& name, std::uint64_t seed, int V = 2, std::size_t L = 6) {
    if (name == "fig2") return fig2::seeded(seed);
    if (name == "tree") return random_tree(V, L, seed);
    if (name == "chain") return chain_joint(V, L, seed);
    if (name == "cross_block") return cross_block_joint(seed);
    if (name == "independent") return independent_joint(V, L, seed);
    if (name == "tabular") return random_tabular(V, L, seed);
    if (name == "uniform") return uniform_joint(V, L);
    throw std::invalid_argument("unknown joint generator '" + name + "'");
}

}  // namespace dos::gen
