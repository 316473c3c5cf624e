#include <gtest/gtest.h>

#include <cmath>

#include "dos/generators.hpp"
#include "dos/oracle.hpp"

using namespace dos;

namespace {

// Hand-fixed tables for the five-node DAG (probability of token 1 per row):
// C 0.5; X1|C 0.8/0.3; X2|C 0.2/0.7; X3|X1 0.9/0.2; X4|X1,X2 0.95/0.1/0.15/0.85.
JointModel fixed_fig2() {
    using gen::binary_row;
    auto rows = [](std::initializer_list<double> ones) {
        std::vector<double> t;
        for (double p : ones) {
            t.push_back(p);
            t.push_back(1 - p);
        }
        return t;
    };
    return JointModel::dag(2, 5,
                           {CptNode{0, {}, rows({0.5})}, CptNode{1, {0}, rows({0.8, 0.3})},
                            CptNode{2, {0}, rows({0.2, 0.7})}, CptNode{3, {1}, rows({0.9, 0.2})},
                            CptNode{4, {1, 2}, rows({0.95, 0.1, 0.15, 0.85})}});
}

// Independent reference: brute force over every full assignment.
std::vector<std::vector<double>> brute_marginals(const JointModel& m, const SequenceState& s) {
    const int V = m.vocab_size();
    const std::size_t L = m.length();
    std::size_t n = 1;
    for (std::size_t i = 0; i < L; ++i) n *= static_cast<std::size_t>(V);
    std::vector<std::vector<double>> acc(L, std::vector<double>(static_cast<std::size_t>(V), 0.0));
    double z = 0.0;
    for (std::size_t idx = 0; idx < n; ++idx) {
        Tokens x(L);
        std::size_t r = idx;
        for (std::size_t i = L; i-- > 0;) {
            x[i] = static_cast<Token>(r % static_cast<std::size_t>(V)) + 1;
            r /= static_cast<std::size_t>(V);
        }
        bool ok = true;
        for (std::size_t i = 0; i < L; ++i) ok = ok && (s.is_masked(i) || s[i] == x[i]);
        if (!ok) continue;
        const double p = m.prob(x);
        z += p;
        for (std::size_t i = 0; i < L; ++i) acc[i][static_cast<std::size_t>(x[i] - 1)] += p;
    }
    for (auto& row : acc) {
        for (double& v : row) v /= z;
    }
    return acc;
}

}  // namespace

TEST(JointProb, UniformTabular) {
    const auto m = JointModel::tabular(2, 2, {0.25, 0.25, 0.25, 0.25});
    for (Token a : {1, 2}) {
        for (Token b : {1, 2}) EXPECT_DOUBLE_EQ(joint_prob(m, Tokens{a, b}), 0.25);
    }
}

TEST(JointProb, IndependentIsProduct) {
    const auto m = JointModel::dag(3, 2, {CptNode{0, {}, {0.2, 0.3, 0.5}}, CptNode{1, {}, {0.6, 0.3, 0.1}}});
    EXPECT_DOUBLE_EQ(joint_prob(m, Tokens{3, 2}), 0.5 * 0.3);
    EXPECT_DOUBLE_EQ(joint_prob(m, Tokens{1, 1}), 0.2 * 0.6);
}

TEST(JointProb, Fig2MatchesFrozenValue) {
    const auto m = fixed_fig2();
    // p(C=1, X=1111) = 0.5 * 0.8 * 0.2 * 0.9 * 0.95
    EXPECT_NEAR(joint_prob(m, Tokens{1, 1, 1, 1, 1}), 0.0684, 1e-15);
    double sum = 0.0;
    for (double p : m.dense_table()) sum += p;
    EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(JointProb, Errors) {
    const auto m = fixed_fig2();
    EXPECT_THROW(joint_prob(m, Tokens{1, 1}), std::invalid_argument);
    EXPECT_THROW(joint_prob(m, Tokens{1, 1, 1, 1, 3}), std::invalid_argument);
}

TEST(JointModel, Validation) {
    EXPECT_THROW(JointModel::tabular(2, 2, {0.25, 0.25, 0.25}), std::invalid_argument);
    EXPECT_THROW(JointModel::tabular(2, 1, {0.5, 0.6}), std::invalid_argument);
    EXPECT_THROW(JointModel::dag(2, 2, {CptNode{0, {1}, {0.5, 0.5, 0.5, 0.5}}, CptNode{1, {0}, {0.5, 0.5, 0.5, 0.5}}}),
                 std::invalid_argument);
    EXPECT_THROW(JointModel::dag(2, 1, {CptNode{0, {}, {0.5, 0.5 + 1e-9}}}), std::invalid_argument);
    EXPECT_THROW(JointModel::dag(2, 2, {CptNode{0, {}, {0.5, 0.5}}, CptNode{1, {0}, {1.0, 0.0}}}),
                 std::invalid_argument);
}

TEST(ConditionalMarginal, DeterministicGivesPointMass) {
    // x1 is a copy of x0
    const auto m = JointModel::dag(3, 2, {CptNode{0, {}, {0.2, 0.3, 0.5}}, CptNode{1, {0}, {1, 0, 0, 0, 1, 0, 0, 0, 1}}});
    const SequenceState s(Vocabulary(3), {2, 4}, 1);
    const auto c = conditional_marginal(m, s);
    EXPECT_EQ(c[1].probs(), (std::vector<double>{0.0, 1.0, 0.0}));
}

TEST(ConditionalMarginal, IndependentIgnoresContext) {
    const auto m = gen::independent_joint(3, 4, 11);
    const SequenceState a(Vocabulary(3), {1, 4, 2, 4}, 1), b(Vocabulary(3), {3, 4, 1, 4}, 1);
    const auto ca = conditional_marginal(m, a), cb = conditional_marginal(m, b);
    for (std::size_t v = 0; v < 3; ++v) {
        EXPECT_NEAR(ca[1].probs()[v], m.nodes()[1].table[v], 1e-12);
        EXPECT_NEAR(ca[3].probs()[v], cb[3].probs()[v], 1e-12);
    }
}

TEST(ConditionalMarginal, Fig2X3GivenX1IsCptRow) {
    const auto m = fixed_fig2();
    for (Token x1 : {1, 2}) {
        const SequenceState s(Vocabulary(2), {1, x1, 3, 3, 3}, 1);
        const auto c = conditional_marginal(m, s);
        EXPECT_NEAR(c[3].prob(1), x1 == 1 ? 0.9 : 0.2, 1e-12);
    }
}

TEST(ConditionalMarginal, MatchesBruteForceOnRandomJoints) {
    Rng rng(5);
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        std::uniform_int_distribution<int> vd(2, 4);
        const int V = vd(rng);
        const std::size_t L = V == 4 ? 4 : 5;
        const auto m = seed % 2 ? gen::random_tabular(V, L, seed) : gen::random_tree(V, L, seed);
        Tokens x = sample_joint(m, rng);
        std::bernoulli_distribution coin(0.5);
        for (std::size_t i = 1; i < L; ++i) {
            if (coin(rng)) x[i] = V + 1;
        }
        x[L - 1] = V + 1;
        const SequenceState s(Vocabulary(V), x, 1);
        const auto got = conditional_marginal(m, s);
        const auto want = brute_marginals(m, s);
        for (std::size_t i = 0; i < L; ++i) {
            for (std::size_t v = 0; v < static_cast<std::size_t>(V); ++v) EXPECT_NEAR(got[i].probs()[v], want[i][v], 1e-12);
        }
    }
}

TEST(ConditionalMarginal, ZeroSupport) {
    const auto m = JointModel::tabular(2, 2, {0.5, 0.0, 0.0, 0.5});
    EXPECT_EQ(conditional_marginal(m, SequenceState(Vocabulary(2), {1, 3}, 0))[1].probs(), (std::vector<double>{1.0, 0.0}));
    const auto copy = JointModel::dag(2, 3, {CptNode{0, {}, {0.5, 0.5}}, CptNode{1, {0}, {1, 0, 0, 1}}, CptNode{2, {}, {0.5, 0.5}}});
    EXPECT_THROW(conditional_marginal(copy, SequenceState(Vocabulary(2), {1, 2, 3}, 1)), ZeroSupportError);
}

TEST(ExactPolicyDistribution, SequentialChainIsExact) {
    const auto m = gen::chain_joint(3, 5, 2);
    const auto start = make_masked_state(Vocabulary(3), {2}, 4);
    const auto target = conditional_joint(m, start);
    EXPECT_LE(tv_distance(target, exact_policy_distribution(m, start, GroupSchedule::sequential(1, 5))), 1e-12);
    // reversed one-at-a-time order is exact too
    EXPECT_LE(tv_distance(target, exact_policy_distribution(m, start, GroupSchedule({{4}, {3}, {2}, {1}}))), 1e-12);
}

TEST(ExactPolicyDistribution, Fig2FrozenTv) {
    const auto m = fixed_fig2();
    // values from an independent brute-force enumeration
    EXPECT_NEAR(gen::fig2::schedule_tv(m, 'a'), 0.418304, 1e-12);
    EXPECT_NEAR(gen::fig2::schedule_tv(m, 'b'), 0.386144, 1e-12);
    EXPECT_NEAR(gen::fig2::schedule_tv(m, 'c'), 0.13866666666666666, 1e-12);
    EXPECT_LE(gen::fig2::schedule_tv(m, 'd'), 1e-12);
    const auto target = conditional_joint(m, gen::fig2::start_state());
    EXPECT_NEAR(target.at({1, 1, 1, 1, 1}), 0.1368, 1e-12);
}

TEST(ExactPolicyDistribution, SeededFig2) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto m = gen::fig2::seeded(seed);
        EXPECT_LE(gen::fig2::schedule_tv(m, 'd'), 1e-12);
        for (char s : {'a', 'b', 'c'}) EXPECT_GT(gen::fig2::schedule_tv(m, s), 0.01);
    }
}

TEST(ExactPolicyDistribution, Errors) {
    const auto m = fixed_fig2();
    const auto start = gen::fig2::start_state();
    EXPECT_THROW(exact_policy_distribution(m, start, GroupSchedule({{1, 2}, {3}})), std::invalid_argument);
    EXPECT_THROW(exact_policy_distribution(m, start, gen::fig2::schedule('d'), 16), EnumerationLimitError);
}

TEST(SampleJoint, DeterministicJoint) {
    const auto m = JointModel::tabular(2, 2, {0.0, 0.0, 1.0, 0.0});
    Rng rng(1);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_joint(m, rng), (Tokens{2, 1}));
}

TEST(SampleJoint, UniformCells) {
    const auto m = JointModel::tabular(2, 2, {0.25, 0.25, 0.25, 0.25});
    Rng rng(2);
    std::vector<Tokens> s;
    for (int i = 0; i < 100000; ++i) s.push_back(sample_joint(m, rng));
    for (const auto& [x, p] : empirical_distribution(s)) EXPECT_NEAR(p, 0.25, 0.01);
}

TEST(SampleJoint, Fig2EmpiricalTv) {
    const auto m = fixed_fig2();
    Rng rng(3);
    std::vector<Tokens> s;
    for (int i = 0; i < 100000; ++i) s.push_back(sample_joint(m, rng));
    EXPECT_LT(tv_distance(empirical_distribution(s), conditional_joint(m, SequenceState(Vocabulary(2), {3, 3, 3, 3, 3}, 0))),
              0.02);
}

TEST(OracleDependency, IndependentIsZero) {
    const auto m = gen::independent_joint(3, 4, 1);
    const SequenceState s(Vocabulary(3), {2, 4, 1, 4}, 1);
    for (std::size_t i : {1u, 3u}) EXPECT_NEAR(oracle_dependency(m, s, i), 0.0, 1e-12);
}

TEST(OracleDependency, CopyEqualsEntropy) {
    const auto m = JointModel::dag(3, 2, {CptNode{0, {}, {0.2, 0.3, 0.5}}, CptNode{1, {0}, {1, 0, 0, 0, 1, 0, 0, 0, 1}}});
    const SequenceState s(Vocabulary(3), {1, 4}, 1);
    const double h = -(0.2 * std::log(0.2) + 0.3 * std::log(0.3) + 0.5 * std::log(0.5));
    EXPECT_NEAR(oracle_dependency(m, s, 1), h, 1e-12);
    EXPECT_THROW(oracle_dependency(m, s, 0), std::invalid_argument);
}

TEST(OracleDependency, Fig2DataProcessing) {
    const auto m = fixed_fig2();
    const auto s = gen::fig2::start_state();
    const auto d = oracle_dependency_scores(m, s);
    EXPECT_TRUE(std::isnan(d[0]));
    // mutual information with C, from an independent enumeration
    EXPECT_NEAR(d[1], 0.132505450917048, 1e-12);
    EXPECT_NEAR(d[2], 0.1325054509170478, 1e-12);
    EXPECT_NEAR(d[3], 0.06465752504479934, 1e-12);
    EXPECT_NEAR(d[4], 0.00544330707898422, 1e-12);
    EXPECT_GE(d[1], d[3]);
    EXPECT_GE(d[2], d[3]);
}
