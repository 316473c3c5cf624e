#include <gtest/gtest.h>

#include <cmath>

#include "dos/core.hpp"
#include "dos/distribution.hpp"

using namespace dos;

namespace {
const Vocabulary V2(2), V5(5);
}

TEST(MakeMaskedState, PromptThenMasks) {
    const auto s = make_masked_state(V5, {3, 1}, 2);
    EXPECT_EQ(s.tokens(), (Tokens{3, 1, 6, 6}));
    EXPECT_EQ(s.prompt_len(), 2u);
    EXPECT_EQ(s.masked_positions(), (std::vector<std::size_t>{2, 3}));
}

TEST(MakeMaskedState, UnconditionalEmptyPrompt) {
    const auto s = make_masked_state(V5, {}, 1, true);
    EXPECT_EQ(s.tokens(), (Tokens{6}));
    EXPECT_EQ(s.prompt_len(), 0u);
    EXPECT_THROW(make_masked_state(V5, {}, 1), std::invalid_argument);
}

TEST(MakeMaskedState, ZeroGenLenRejected) { EXPECT_THROW(make_masked_state(V5, {5}, 0), std::invalid_argument); }

TEST(SequenceState, Validation) {
    EXPECT_THROW(SequenceState(V2, {}, 0), std::invalid_argument);
    EXPECT_THROW(SequenceState(V2, {1, 2}, 2), std::invalid_argument);
    EXPECT_THROW(SequenceState(V2, {1, 4}, 1), std::invalid_argument);
    EXPECT_THROW(SequenceState(V2, {3, 1}, 1), std::invalid_argument);
    EXPECT_THROW(SequenceState(V2, {0, 1}, 1), std::invalid_argument);
    SequenceState s(V2, {1, 3, 3}, 1);
    EXPECT_THROW(s.set_token(0, 2), std::invalid_argument);
    s.set_token(2, 2);
    EXPECT_EQ(s.count_masked(), 1u);
    EXPECT_EQ(s.unmasked_positions(), (std::vector<std::size_t>{0, 2}));
}

TEST(Vocabulary, MaskIsVPlusOne) {
    EXPECT_EQ(V5.mask_id(), 6);
    EXPECT_TRUE(V5.is_content(5));
    EXPECT_FALSE(V5.is_content(6));
    EXPECT_THROW(Vocabulary(1), std::invalid_argument);
}

TEST(Categorical, ValidationAndArgmax) {
    EXPECT_THROW(Categorical({0.5, 0.6}), std::invalid_argument);
    EXPECT_THROW(Categorical({-0.1, 1.1}), std::invalid_argument);
    EXPECT_EQ(Categorical({0.5, 0.5}).argmax(), 1);
    EXPECT_EQ(Categorical({0.1, 0.8, 0.1}).argmax(), 2);
    EXPECT_THROW(Categorical::from_weights({0.0, 0.0}), ZeroSupportError);
    const auto w = Categorical::from_weights({1.0, 3.0});
    EXPECT_DOUBLE_EQ(w.prob(2), 0.75);
}

TEST(ForwardMask, EndpointsAndPrompt) {
    Rng rng(1);
    const SequenceState x0(V2, {2, 1, 2, 1, 1}, 2);
    EXPECT_EQ(forward_mask(x0, 0.0, rng), x0);
    const auto all = forward_mask(x0, 1.0, rng);
    EXPECT_EQ(all.tokens(), (Tokens{2, 1, 3, 3, 3}));
    EXPECT_THROW(forward_mask(x0, 1.5, rng), std::domain_error);
    EXPECT_THROW(forward_mask(x0, -0.1, rng), std::domain_error);
}

TEST(ForwardMask, MaskedFractionMatchesT) {
    Rng rng(7);
    Tokens toks(10001, 1);
    const SequenceState x0(V2, toks, 1);
    const auto xt = forward_mask(x0, 0.3, rng);
    const double frac = static_cast<double>(xt.count_masked()) / 10000.0;
    EXPECT_NEAR(frac, 0.3, 0.02);
}

TEST(ReverseUnmaskProb, LinearValues) {
    const LinearSchedule lin;
    EXPECT_DOUBLE_EQ(reverse_unmask_prob(lin, 1.0, 0.0), 1.0);
    EXPECT_DOUBLE_EQ(reverse_unmask_prob(lin, 1.0, 0.5), 0.5);
    EXPECT_DOUBLE_EQ(reverse_unmask_prob(lin, 0.5, 0.25), 0.5);
    EXPECT_THROW(reverse_unmask_prob(lin, 0.5, 0.5), std::domain_error);
    EXPECT_THROW(reverse_unmask_prob(lin, 0.0, 0.0), std::domain_error);
}

TEST(PosteriorStep, RevealsOnlyX0Values) {
    Rng rng(3);
    const SequenceState x0(V2, {1, 2, 1, 2, 2, 1}, 1);
    const auto xt = forward_mask(x0, 1.0, rng);
    const auto xs = posterior_step(xt, x0, 1.0, 0.0, rng);
    EXPECT_EQ(xs, x0);
    const auto half = posterior_step(xt, x0, 1.0, 0.5, rng);
    for (std::size_t i = 0; i < 6; ++i) {
        if (!half.is_masked(i)) {
            EXPECT_EQ(half[i], x0[i]);
        }
    }
}

TEST(Distribution, TvExamples) {
    const SequenceDistribution p{{{1}, 0.9}, {{2}, 0.1}};
    const SequenceDistribution q{{{1}, 0.5}, {{2}, 0.5}};
    EXPECT_NEAR(tv_distance(p, q), 0.4, 1e-15);
    EXPECT_EQ(tv_distance(p, p), 0.0);
    const SequenceDistribution a{{{1, 1}, 1.0}}, b{{{2, 2}, 1.0}};
    EXPECT_DOUBLE_EQ(tv_distance(a, b), 1.0);
}

TEST(Distribution, Empirical) {
    const auto point = empirical_distribution({{1, 2}, {1, 2}, {1, 2}});
    ASSERT_EQ(point.size(), 1u);
    EXPECT_DOUBLE_EQ(point.at({1, 2}), 1.0);
    const auto half = empirical_distribution({{1}, {2}, {2}, {1}});
    EXPECT_DOUBLE_EQ(half.at({1}), 0.5);
    EXPECT_DOUBLE_EQ(half.at({2}), 0.5);
    EXPECT_THROW(empirical_distribution({}), std::invalid_argument);
}

TEST(Distribution, KlSequences) {
    const SequenceDistribution p{{{1}, 0.9}, {{2}, 0.1}};
    const SequenceDistribution q{{{1}, 0.5}, {{2}, 0.5}};
    // 0.9 ln 1.8 + 0.1 ln 0.2, evaluated independently
    EXPECT_NEAR(kl_sequences(p, q), 0.3680642071684971, 1e-15);
    EXPECT_EQ(kl_sequences(p, p), 0.0);
}
