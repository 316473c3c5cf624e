#include <gtest/gtest.h>

#include <sstream>

#include "dos/checkpoint.hpp"
#include "dos/generators.hpp"
#include "dos/nn.hpp"

using namespace dos;

namespace {

nn::TransformerConfig small_config(int d = 16) {
    nn::TransformerConfig c;
    c.d_model = d;
    c.seed = 3;
    return c;
}

// X0 prompt (uniform), X1 uniform, X2 copies X1.
JointModel copy_joint() {
    return JointModel::dag(2, 3, {CptNode{0, {}, {0.5, 0.5}}, CptNode{1, {}, {0.5, 0.5}}, CptNode{2, {1}, {1, 0, 0, 1}}});
}

std::vector<nn::CorruptedExample> fixed_batch(const JointModel& m) {
    Rng rng(9);
    std::vector<nn::CorruptedExample> batch;
    for (int i = 0; i < 3; ++i) {
        Tokens x0 = sample_joint(m, rng);
        Tokens xt = x0;
        xt[1] = 3;
        xt[3] = 3;
        if (i == 1) xt[4] = 3;
        batch.push_back({x0, xt, 0.3 + 0.2 * i});
    }
    return batch;
}

}  // namespace

TEST(Forward, SinglePositionAttendsToItself) {
    const auto p = nn::Params::init(small_config());
    const auto out = nn::forward(p, SequenceState(Vocabulary(2), {3}, 0));
    ASSERT_EQ(out.attentions.size(), 2u);
    for (const auto& a : out.attentions) {
        for (std::size_t h = 0; h < a.heads; ++h) EXPECT_EQ(a.at(h, 0, 0), 1.0);
    }
}

TEST(Forward, RepeatableAndRowStochastic) {
    const auto p = nn::Params::init(nn::TransformerConfig{});
    const SequenceState s(Vocabulary(2), {1, 3, 2, 3, 3}, 1);
    const auto a = nn::forward(p, s), b = nn::forward(p, s);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(a.probs[i].probs(), b.probs[i].probs());
    for (std::size_t l = 0; l < 2; ++l) {
        EXPECT_EQ(a.attentions[l].weights, b.attentions[l].weights);
        for (std::size_t h = 0; h < 2; ++h) {
            for (std::size_t r = 0; r < 5; ++r) {
                double sum = 0.0;
                for (std::size_t c = 0; c < 5; ++c) sum += a.attentions[l].at(h, r, c);
                EXPECT_NEAR(sum, 1.0, 1e-12);
            }
        }
    }
}

TEST(Forward, Errors) {
    const auto p = nn::Params::init(small_config());
    EXPECT_THROW(nn::forward(p, make_masked_state(Vocabulary(2), {1}, 16)), std::invalid_argument);
    EXPECT_THROW(nn::forward(p, make_masked_state(Vocabulary(3), {1}, 2)), std::invalid_argument);
}

TEST(Loss, FullyObservedExampleContributesNothing) {
    const auto p = nn::Params::init(small_config());
    const std::vector<nn::CorruptedExample> batch{{{1, 2, 1}, {1, 2, 1}, 0.001}};
    const auto r = nn::loss_and_grad_fixed(p, batch, 1, 3);
    EXPECT_EQ(r.loss, 0.0);
    EXPECT_EQ(r.masked_tokens, 0u);
    for (const auto& t : r.grad.tensors()) {
        for (double g : t.data) EXPECT_EQ(g, 0.0);
    }
}

TEST(Loss, WeightIsInverseTime) {
    const auto p = nn::Params::init(small_config());
    const std::vector<nn::CorruptedExample> a{{{1, 2, 1}, {1, 3, 1}, 0.5}}, b{{{1, 2, 1}, {1, 3, 1}, 0.25}};
    EXPECT_NEAR(nn::loss_and_grad_fixed(p, b, 1, 3).loss, 2 * nn::loss_and_grad_fixed(p, a, 1, 3).loss, 1e-12);
}

TEST(Gradient, CentralDifferenceD16) {
    const auto p = nn::Params::init(small_config(16));
    const auto batch = fixed_batch(gen::fig2::seeded(0));
    for (const auto& r : nn::gradient_check(p, batch, 1e-4, 2)) {
        EXPECT_LT(r.max_rel_error, 1e-4) << r.tensor;
    }
}

TEST(Train, ZeroStepsReturnsInit) {
    auto c = small_config();
    c.train_steps = 0;
    const auto r = nn::train(c, gen::fig2::seeded(0), 1);
    const auto init = nn::Params::init(c);
    for (std::size_t i = 0; i < init.tensors().size(); ++i) EXPECT_EQ(r.params.tensors()[i].data, init.tensors()[i].data);
    EXPECT_TRUE(r.loss_curve.empty());
}

TEST(Train, LearnsDeterministicCopy) {
    auto c = small_config();
    c.train_steps = 600;
    const auto r = nn::train(c, copy_joint(), 1);
    for (Token x1 : {1, 2}) {
        const auto out = nn::forward(r.params, SequenceState(Vocabulary(2), {1, x1, 3}, 1));
        EXPECT_GT(out.probs[2].prob(x1), 0.9);
    }
    // smoothed loss goes down
    const auto& lc = r.loss_curve;
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < 100; ++i) {
        first += lc[i];
        last += lc[lc.size() - 1 - i];
    }
    EXPECT_LT(last, first);
}

TEST(Train, IndependentUniformStaysUniform) {
    auto c = small_config();
    c.train_steps = 400;
    const auto m = gen::uniform_joint(2, 4);
    const auto r = nn::train(c, m, 1);
    Rng rng(4);
    for (int i = 0; i < 20; ++i) {
        Tokens x = sample_joint(m, rng);
        x[1 + static_cast<std::size_t>(i % 3)] = 3;
        x[3] = 3;
        const auto out = nn::forward(r.params, SequenceState(Vocabulary(2), x, 1));
        for (std::size_t pos = 1; pos < 4; ++pos) {
            if (x[pos] == 3) {
                EXPECT_LT(std::abs(out.probs[pos].prob(1) - 0.5), 0.05);
            }
        }
    }
}

TEST(Train, RejectsBadInputs) {
    auto c = small_config();
    c.train_steps = 1;
    c.vocab_size = 3;
    EXPECT_THROW(nn::train(c, gen::fig2::seeded(0), 1), std::invalid_argument);
    c.vocab_size = 2;
    EXPECT_THROW(nn::train(c, gen::fig2::seeded(0), 5), std::invalid_argument);
    c.learning_rate = 1e6;
    c.train_steps = 50;
    EXPECT_THROW(nn::train(c, gen::fig2::seeded(0), 1), std::runtime_error);
}

TEST(Checkpoint, RoundTrip) {
    auto c = small_config();
    c.learning_rate = 0.0123;
    const auto p = nn::Params::init(c);
    std::stringstream buf;
    nn::write_checkpoint(p, buf);
    const auto q = nn::read_checkpoint(buf, c);
    EXPECT_EQ(q.config().learning_rate, 0.0123);
    EXPECT_EQ(q.config().d_model, 16);
    ASSERT_EQ(q.tensors().size(), p.tensors().size());
    for (std::size_t i = 0; i < p.tensors().size(); ++i) {
        EXPECT_EQ(q.tensors()[i].name, p.tensors()[i].name);
        EXPECT_EQ(q.tensors()[i].data, p.tensors()[i].data);
    }
}

TEST(Checkpoint, BadMagic) {
    std::stringstream buf("NOTACKPT\x01\x00\x00\x00");
    EXPECT_THROW(nn::read_checkpoint(buf), nn::CheckpointError);
}

TEST(Checkpoint, MismatchNamesField) {
    const auto p = nn::Params::init(small_config());
    std::stringstream buf;
    nn::write_checkpoint(p, buf);
    try {
        nn::read_checkpoint(buf, small_config(32));
        FAIL();
    } catch (const nn::CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("d_model"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, TruncatedAndVersion) {
    const auto p = nn::Params::init(small_config());
    std::stringstream buf;
    nn::write_checkpoint(p, buf);
    const std::string bytes = buf.str();
    std::stringstream cut(bytes.substr(0, bytes.size() - 5));
    EXPECT_THROW(nn::read_checkpoint(cut), nn::CheckpointError);
    std::string bumped = bytes;
    bumped[8] = 2;
    std::stringstream v(bumped);
    try {
        nn::read_checkpoint(v);
        FAIL();
    } catch (const nn::CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }
}
