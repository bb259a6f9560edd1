#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "ternq/model.hpp"

using namespace ternq;

namespace {

ModelConfig small(std::size_t layers = 2, std::size_t hidden = 8, std::size_t heads = 2) {
    ModelConfig c;
    c.layers = layers;
    c.hidden = hidden;
    c.heads = heads;
    c.ffn = 2 * hidden;
    c.vocab = 11;
    c.max_positions = 6;
    c.classes = 3;
    c.dropout = 0.0f;
    return c;
}

Batch random_batch(const ModelConfig& c, std::size_t b, std::size_t s, std::mt19937_64& rng) {
    Batch out{b, s, {}, {}, std::vector<int>(b, 0)};
    std::uniform_int_distribution<int> tok(0, static_cast<int>(c.vocab) - 1);
    for (std::size_t i = 0; i < b * s; ++i) {
        out.tokens.push_back(tok(rng));
        out.segments.push_back(i % s < s / 2 ? 0 : 1);
    }
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(static_cast<double>(a[i]) - b[i]));
    return m;
}

}  // namespace

TEST(Forward, ZeroLayersIsEmbeddingPlusHead) {
    std::mt19937_64 rng(61);
    const ModelConfig c = small(0);
    const ModelWeights w = init_weights(c, 1, 0.3f);
    const Batch b = random_batch(c, 2, 4, rng);
    const ForwardTrace t = forward(w, b);
    ASSERT_EQ(t.hidden.size(), 1u);
    EXPECT_TRUE(t.scores.empty());
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t j = 0; j < c.classes; ++j) {
            double z = w[head_bias_index(c)][j];
            for (std::size_t i = 0; i < c.hidden; ++i) z += static_cast<double>(w[head_weight_index(c)].at(j, i)) * t.hidden[0].at(r * 4, i);
            EXPECT_NEAR(t.logits.at(r, j), z, 1e-5);
        }
}

TEST(Forward, AllZeroWeightsGiveUniformAttention) {
    std::mt19937_64 rng(62);
    const ModelConfig c = small();
    ModelWeights w = init_weights(c, 2);
    for (Tensor& p : w.params) p = Tensor(p.shape());
    const Batch b = random_batch(c, 3, 5, rng);
    const ForwardTrace t = forward(w, b);
    for (const Tensor& p : t.probs)
        for (float v : p.data()) EXPECT_FLOAT_EQ(v, 1.0f / 5.0f);
    for (float v : t.logits.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Forward, FullPrecisionPlanIsBitIdentical) {
    std::mt19937_64 rng(63);
    const ModelConfig c = small();
    const ModelWeights w = init_weights(c, 3, 0.2f);
    const QuantizedModel q = quantize_model(w, QuantPlan::full_precision());
    EXPECT_EQ(q.effective, w);
    const Batch b = random_batch(c, 2, 6, rng);
    EXPECT_EQ(forward(q.effective, b, q.plan.activations()).logits, forward(w, b).logits);
}

TEST(Forward, TernaryPlanEqualsDequantizedFloatModel) {
    std::mt19937_64 rng(64);
    const ModelConfig c = small();
    const ModelWeights w = init_weights(c, 4, 0.2f);
    const QuantPlan plan = QuantPlan::parse("2-2-32");
    const QuantizedModel q = quantize_model(w, plan);
    ModelWeights manual = w;
    const auto layout = param_layout(c);
    std::size_t quantized = 0;
    for (std::size_t i = 0; i < layout.size(); ++i) {
        if (layout[i].role == ParamRole::transformer_weight || layout[i].role == ParamRole::word_embedding) {
            manual[i] = dequantize(twn_approx(w[i], layout[i].role == ParamRole::word_embedding ? Granularity::row : Granularity::layer));
            ++quantized;
        }
    }
    EXPECT_EQ(quantized, 1 + 6 * c.layers);
    const Batch b = random_batch(c, 2, 6, rng);
    EXPECT_EQ(forward(q.effective, b).logits, forward(manual, b).logits);
}

TEST(Attention, ScoresMatchExplicitProjection) {
    std::mt19937_64 rng(65);
    const ModelConfig c = small(2, 8, 2);
    const ModelWeights w = init_weights(c, 5, 0.3f);
    const std::size_t B = 2, S = 5, dh = c.head_dim();
    const Batch b = random_batch(c, B, S, rng);
    const ForwardTrace t = forward(w, b);
    for (std::size_t l = 0; l < c.layers; ++l) {
        const Tensor& H = t.hidden[l];
        const Tensor& Wq = w[layer_param_index(l, LayerSlot::query_w)];
        const Tensor& bq = w[layer_param_index(l, LayerSlot::query_b)];
        const Tensor& Wk = w[layer_param_index(l, LayerSlot::key_w)];
        const Tensor& bk = w[layer_param_index(l, LayerSlot::key_b)];
        auto proj = [&](const Tensor& W, const Tensor& bias, std::size_t row, std::size_t o) {
            double acc = bias[o];
            for (std::size_t i = 0; i < c.hidden; ++i) acc += static_cast<double>(W.at(o, i)) * H.at(row, i);
            return acc;
        };
        const Tensor via_fn = attention_scores(H, w, l, B);
        for (std::size_t bb = 0; bb < B; ++bb)
            for (std::size_t h = 0; h < c.heads; ++h)
                for (std::size_t i = 0; i < S; ++i)
                    for (std::size_t j = 0; j < S; ++j) {
                        double s = 0.0;
                        for (std::size_t e = 0; e < dh; ++e) s += proj(Wq, bq, bb * S + i, h * dh + e) * proj(Wk, bk, bb * S + j, h * dh + e);
                        const std::size_t idx = ((bb * c.heads + h) * S + i) * S + j;
                        EXPECT_NEAR(t.scores[l][idx], s, 1e-4 * (1.0 + std::fabs(s)));
                        EXPECT_EQ(via_fn[idx], t.scores[l][idx]);
                    }
    }
}

TEST(Attention, SharedQueryKeyGivesSymmetricGram) {
    std::mt19937_64 rng(66);
    const ModelConfig c = small(1);
    ModelWeights w = init_weights(c, 6, 0.3f);
    w[layer_param_index(0, LayerSlot::key_w)] = w[layer_param_index(0, LayerSlot::query_w)];
    w[layer_param_index(0, LayerSlot::key_b)] = w[layer_param_index(0, LayerSlot::query_b)];
    const std::size_t S = 4;
    const Batch b = random_batch(c, 1, S, rng);
    const Tensor sc = forward(w, b).scores[0];
    for (std::size_t h = 0; h < c.heads; ++h)
        for (std::size_t i = 0; i < S; ++i) {
            EXPECT_GE(sc[(h * S + i) * S + i], 0.0f);
            for (std::size_t j = 0; j < S; ++j) EXPECT_NEAR(sc[(h * S + i) * S + j], sc[(h * S + j) * S + i], 1e-5);
        }
}

TEST(Attention, HeadPermutationLeavesLogitsUnchanged) {
    std::mt19937_64 rng(67);
    const ModelConfig c = small(2, 12, 3);
    const ModelWeights w = init_weights(c, 7, 0.3f);
    const std::size_t dh = c.head_dim();
    const std::vector<std::size_t> perm{2, 0, 1};
    ModelWeights p = w;
    for (std::size_t l = 0; l < c.layers; ++l) {
        for (LayerSlot s : {LayerSlot::query_w, LayerSlot::key_w, LayerSlot::value_w}) {
            const Tensor& src = w[layer_param_index(l, s)];
            Tensor& dst = p[layer_param_index(l, s)];
            for (std::size_t h = 0; h < c.heads; ++h)
                for (std::size_t e = 0; e < dh; ++e)
                    for (std::size_t i = 0; i < c.hidden; ++i) dst.at(h * dh + e, i) = src.at(perm[h] * dh + e, i);
        }
        for (LayerSlot s : {LayerSlot::query_b, LayerSlot::key_b, LayerSlot::value_b}) {
            const Tensor& src = w[layer_param_index(l, s)];
            Tensor& dst = p[layer_param_index(l, s)];
            for (std::size_t h = 0; h < c.heads; ++h)
                for (std::size_t e = 0; e < dh; ++e) dst[h * dh + e] = src[perm[h] * dh + e];
        }
        const Tensor& so = w[layer_param_index(l, LayerSlot::attn_out_w)];
        Tensor& dO = p[layer_param_index(l, LayerSlot::attn_out_w)];
        for (std::size_t o = 0; o < c.hidden; ++o)
            for (std::size_t h = 0; h < c.heads; ++h)
                for (std::size_t e = 0; e < dh; ++e) dO.at(o, h * dh + e) = so.at(o, perm[h] * dh + e);
    }
    const Batch b = random_batch(c, 2, 5, rng);
    EXPECT_LE(max_abs_diff(forward(w, b).logits, forward(p, b).logits), 1e-5);
}

TEST(Attention, HeadScaleOption) {
    std::mt19937_64 rng(68);
    ModelConfig c = small(1, 8, 2);
    const Batch b = random_batch(c, 1, 4, rng);
    const ForwardTrace a = forward(init_weights(c, 8, 0.5f), b);
    c.attention_scale = AttentionScale::head;
    ModelWeights w2 = init_weights(c, 8, 0.5f);
    const ForwardTrace h = forward(w2, b);
    EXPECT_EQ(a.scores[0], h.scores[0]);
    // row 0 of head 0: softmax(s / sqrt(4))
    const std::size_t S = 4;
    double z = 0.0;
    for (std::size_t j = 0; j < S; ++j) z += std::exp(h.scores[0][j] / 2.0);
    for (std::size_t j = 0; j < S; ++j) EXPECT_NEAR(h.probs[0][j], std::exp(h.scores[0][j] / 2.0) / z, 1e-6);
}

TEST(Trace, ShapesAcrossConfigs) {
    std::mt19937_64 rng(69);
    for (std::size_t L : {0u, 1u, 3u})
        for (std::size_t heads : {1u, 2u, 4u}) {
            const ModelConfig c = small(L, 8, heads);
            const Batch b = random_batch(c, 3, 6, rng);
            const ForwardTrace t = forward(init_weights(c, L * 10 + heads), b);
            ASSERT_EQ(t.hidden.size(), L + 1);
            ASSERT_EQ(t.scores.size(), L);
            for (const Tensor& h : t.hidden) EXPECT_EQ(h.shape(), (Shape{18, 8}));
            for (const Tensor& s : t.scores) EXPECT_EQ(s.shape(), (Shape{3, heads, 6, 6}));
            EXPECT_EQ(t.logits.shape(), (Shape{3, c.classes}));
        }
}

TEST(Input, RejectsBadIds) {
    std::mt19937_64 rng(70);
    const ModelConfig c = small();
    const ModelWeights w = init_weights(c, 9);
    Batch b = random_batch(c, 1, 4, rng);
    b.tokens[2] = static_cast<int>(c.vocab);
    EXPECT_THROW(forward(w, b), InputError);
    b = random_batch(c, 1, 4, rng);
    b.segments[1] = 2;
    EXPECT_THROW(forward(w, b), InputError);
    b = random_batch(c, 1, 4, rng);
    b.tokens[0] = -1;
    EXPECT_THROW(forward(w, b), InputError);
}

TEST(Input, RejectsOverlongSequence) {
    std::mt19937_64 rng(71);
    const ModelConfig c = small();
    EXPECT_THROW(forward(init_weights(c, 10), random_batch(c, 1, c.max_positions + 1, rng)), InputError);
    EXPECT_NO_THROW(forward(init_weights(c, 10), random_batch(c, 1, c.max_positions, rng)));
}

TEST(IntegerPath, MatchesFakeQuantForward) {
    std::mt19937_64 rng(72);
    const ModelConfig c = small(2, 16, 2);
    const ModelWeights w = init_weights(c, 11, 0.3f);
    for (const char* notation : {"2-2-8", "8-8-8"}) {
        const QuantizedModel q = quantize_model(w, QuantPlan::parse(notation));
        const Batch b = random_batch(c, 4, 6, rng);
        const Tensor fake = forward(q.effective, b, q.plan.activations()).logits;
        const Tensor integer = forward(q.effective, b, q.plan.activations(), &q.quant).logits;
        double scale = 0.0;
        for (float v : fake.data()) scale = std::max(scale, std::fabs(static_cast<double>(v)));
        EXPECT_LE(max_abs_diff(fake, integer), 1e-3 * (1.0 + scale)) << notation;
    }
}

TEST(Predictions, Argmax) {
    const Tensor logits({2, 3}, std::vector<float>{0.1f, 2.0f, -1.0f, 3.0f, 3.0f, 0.0f});
    EXPECT_EQ(predictions(logits), (std::vector<int>{1, 0}));
}
