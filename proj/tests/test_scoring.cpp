#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dos/scoring.hpp"

using namespace dos;

namespace {

Categorical random_categorical(Rng& rng, int V) {
    std::exponential_distribution<double> e(1.0);
    std::vector<double> w(static_cast<std::size_t>(V));
    for (auto& x : w) x = e(rng);
    return Categorical::from_weights(w);
}

// Random row-stochastic attention stack.
std::vector<AttentionTensor> random_attention(Rng& rng, std::size_t layers, std::size_t heads, std::size_t L) {
    std::vector<AttentionTensor> out;
    std::exponential_distribution<double> e(1.0);
    for (std::size_t l = 0; l < layers; ++l) {
        AttentionTensor a{heads, L, std::vector<double>(heads * L * L)};
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t r = 0; r < L; ++r) {
                double z = 0.0;
                for (std::size_t c = 0; c < L; ++c) z += a.weights[(h * L + r) * L + c] = e(rng);
                for (std::size_t c = 0; c < L; ++c) a.weights[(h * L + r) * L + c] /= z;
            }
        }
        out.push_back(std::move(a));
    }
    return out;
}

}  // namespace

TEST(Confidence, Examples) {
    EXPECT_EQ(confidence(Categorical::point_mass(4, 3)), 1.0);
    EXPECT_EQ(confidence(Categorical::uniform(4)), 0.25);
    EXPECT_EQ(confidence(Categorical({0.7, 0.2, 0.1})), 0.7);
}

TEST(Entropy, Examples) {
    EXPECT_EQ(entropy(Categorical::point_mass(4, 1)), 0.0);
    EXPECT_NEAR(entropy(Categorical::uniform(4)), std::log(4.0), 1e-12);
    EXPECT_NEAR(entropy(Categorical::uniform(4)), 1.3862943611198906, 1e-12);
    EXPECT_NEAR(entropy(Categorical({0.5, 0.5, 0.0, 0.0})), std::numbers::ln2, 1e-12);
}

TEST(Margin, Examples) {
    EXPECT_EQ(margin(Categorical::point_mass(3, 2)), 1.0);
    EXPECT_EQ(margin(Categorical::uniform(5)), 0.0);
    EXPECT_NEAR(margin(Categorical({0.7, 0.2, 0.1})), 0.5, 1e-15);
    EXPECT_THROW(margin(Categorical({1.0})), std::invalid_argument);
}

TEST(Margin, NeverExceedsConfidence) {
    Rng rng(1);
    std::uniform_int_distribution<int> vd(2, 8);
    for (int i = 0; i < 10000; ++i) {
        const auto p = random_categorical(rng, vd(rng));
        EXPECT_LE(margin(p), confidence(p));
    }
}

TEST(KlDivergence, Examples) {
    const Categorical p({0.9, 0.1}), q({0.5, 0.5});
    EXPECT_EQ(kl_divergence(p, p), 0.0);
    EXPECT_NEAR(kl_divergence(p, q), 0.3680642071684971, 1e-12);
    // flooring keeps the value finite when q has a zero
    EXPECT_TRUE(std::isfinite(kl_divergence(q, Categorical({1.0, 0.0}))));
    EXPECT_NEAR(kl_divergence(q, Categorical({1.0, 0.0})), 0.5 * std::log(0.5) + 0.5 * std::log(0.5 / 1e-12), 1e-9);
    EXPECT_THROW(kl_divergence(p, Categorical::uniform(3)), std::invalid_argument);
}

TEST(KlDivergence, NonNegative) {
    Rng rng(2);
    for (int i = 0; i < 10000; ++i) {
        const auto p = random_categorical(rng, 4), q = random_categorical(rng, 4);
        EXPECT_GE(kl_divergence(p, q), 0.0);
    }
}

TEST(DosDependency, AllColumnsUnmaskedSumsToOne) {
    Rng rng(3);
    const auto attn = random_attention(rng, 1, 2, 4);
    // every column counted: pass all positions as unmasked for masked row 0
    const auto d = dos_dependency(attn, 0, {0}, {1, 2, 3});
    double self = 0.0;
    for (std::size_t h = 0; h < 2; ++h) self += attn[0].at(h, 0, 0) / 2;
    EXPECT_NEAR(d[0] + self, 1.0, 1e-12);
}

TEST(DosDependency, NoUnmaskedIsZero) {
    Rng rng(4);
    const auto attn = random_attention(rng, 2, 2, 3);
    const auto d = dos_dependency(attn, 1, {0, 1, 2}, {});
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(d[i], 0.0);
}

TEST(DosDependency, HandExample) {
    // Masked position 2 attends with rows (0.6, 0.2, 0.2) and (0.2, 0.2, 0.6);
    // only position 0 is unmasked, so dep = (0.6 + 0.2) / 2.
    AttentionTensor a{2, 3, std::vector<double>(18, 1.0 / 3)};
    const double h1[3] = {0.6, 0.2, 0.2}, h2[3] = {0.2, 0.2, 0.6};
    for (std::size_t c = 0; c < 3; ++c) {
        a.weights[(0 * 3 + 2) * 3 + c] = h1[c];
        a.weights[(1 * 3 + 2) * 3 + c] = h2[c];
    }
    const auto d = dos_dependency({a}, 0, {1, 2}, {0});
    EXPECT_NEAR(d[2], 0.4, 1e-15);
    EXPECT_FALSE(d.is_scored(0));
}

TEST(DosDependency, DepPlusMaskedMassIsOne) {
    Rng rng(5);
    std::bernoulli_distribution coin(0.5);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t L = 6;
        const auto attn = random_attention(rng, 2, 3, L);
        std::vector<std::size_t> masked, unmasked;
        for (std::size_t i = 0; i < L; ++i) (coin(rng) ? masked : unmasked).push_back(i);
        if (masked.empty()) continue;
        const auto d = dos_dependency(attn, 1, masked, unmasked);
        for (std::size_t m : masked) {
            double mass = 0.0;
            for (std::size_t c : masked) {
                for (std::size_t h = 0; h < 3; ++h) mass += attn[1].at(h, m, c) / 3;
            }
            EXPECT_NEAR(d[m] + mass, 1.0, 1e-6);
        }
    }
}

TEST(DosDependency, Errors) {
    Rng rng(6);
    const auto attn = random_attention(rng, 2, 1, 3);
    EXPECT_THROW(dos_dependency(attn, 2, {0}, {1, 2}), std::out_of_range);
    EXPECT_THROW(dos_dependency(attn, 0, {0}, {1}), std::invalid_argument);
    EXPECT_THROW(dos_dependency(attn, 0, {0, 1}, {1, 2}), std::invalid_argument);
}
