#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "ternq/act_quant.hpp"

using namespace ternq;

namespace {

Tensor vec(std::vector<float> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
}

double mse(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
    return acc / static_cast<double>(a.size());
}

}  // namespace

TEST(RoundHalfAway, Ties) {
    EXPECT_EQ(round_half_away(2.5), 3.0);
    EXPECT_EQ(round_half_away(-2.5), -3.0);
    EXPECT_EQ(round_half_away(0.49), 0.0);
}

TEST(MinMax, IntegerGridIsExact) {
    const float k = 0.5f;
    std::vector<float> v;
    for (int c = 0; c <= 255; c += 5) v.push_back(static_cast<float>(c) * k);
    v.push_back(255 * k);
    const Tensor x = vec(v);
    const QuantizedActivation q = quantize_minmax(x);
    EXPECT_FLOAT_EQ(q.params.scale, k);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(q.codes[i], static_cast<int>(std::lround(x[i] / k)));
    EXPECT_EQ(dequantize(q), x);
}

TEST(MinMax, ConstantTensor) {
    const Tensor x = vec({5, 5, 5});
    const QuantizedActivation q = quantize_minmax(x);
    for (auto c : q.codes) EXPECT_EQ(c, 0);
    EXPECT_EQ(dequantize(q), x);
}

TEST(MinMax, ReconstructionWithinHalfStep) {
    std::mt19937_64 rng(31);
    const Tensor x = oracle::random_tensor({8, 9}, rng, 2.5f);
    const QuantizedActivation q = quantize_minmax(x);
    const double s = (static_cast<double>(q.params.x_max) - q.params.x_min) / 255.0;
    const Tensor d = dequantize(q);
    for (std::size_t i = 0; i < x.size(); ++i) {
        EXPECT_GE(q.codes[i], 0);
        EXPECT_LE(q.codes[i], 255);
        EXPECT_LE(std::fabs(static_cast<double>(d[i]) - x[i]), s / 2 + 1e-6);
    }
    EXPECT_EQ(d[std::min_element(x.data().begin(), x.data().end()) - x.data().begin()], q.params.x_min);
    EXPECT_EQ(d[std::max_element(x.data().begin(), x.data().end()) - x.data().begin()], q.params.x_max);
}

TEST(Symmetric, Extremes) {
    const Tensor x = vec({-1, 1});
    const QuantizedActivation q = quantize_symmetric(x);
    EXPECT_FLOAT_EQ(q.params.scale, 1.0f / 127.0f);
    EXPECT_EQ(q.codes, (std::vector<std::int16_t>{-127, 127}));
    EXPECT_EQ(dequantize(q), x);
}

TEST(Symmetric, AllZero) {
    const QuantizedActivation q = quantize_symmetric(vec({0, 0}));
    EXPECT_EQ(q.params.scale, 1.0f);
    EXPECT_EQ(dequantize(q), vec({0, 0}));
}

TEST(Symmetric, SkewedTensorLosesToMinMax) {
    std::vector<float> v;
    for (int i = 0; i <= 300; ++i) v.push_back(-3.0f + 3.1f * static_cast<float>(i) / 300.0f);
    const Tensor x = vec(v);
    EXPECT_GT(mse(x, dequantize(quantize_symmetric(x))), mse(x, dequantize(quantize_minmax(x))));
}

TEST(QuantizeWithParams, Idempotent) {
    std::mt19937_64 rng(32);
    for (ActScheme s : {ActScheme::minmax8, ActScheme::symmetric8}) {
        const QuantizedActivation q = quantize_activation(oracle::random_tensor({5, 7}, rng), s);
        EXPECT_EQ(quantize_with_params(dequantize(q), q.params).codes, q.codes);
    }
}

TEST(Ste, InRangePassesUnchanged) {
    const Tensor x = vec({0.1f, 0.5f, 0.9f});
    const Tensor g = vec({1.5f, -2.0f, 3.25f});
    EXPECT_EQ(ste_backward(g, x, quantize_minmax(x).params), g);
}

TEST(Ste, OutOfRangeIsZeroed) {
    ActQuantParams p;
    p.scheme = ActScheme::symmetric8;
    p.x_min = -1.0f;
    p.x_max = 1.0f;
    p.scale = 1.0f / 127.0f;
    const Tensor x = vec({-2.0f, 0.0f, 1.0f, 1.5f});
    EXPECT_EQ(ste_backward(vec({1, 1, 1, 1}), x, p), vec({0, 1, 1, 0}));
}

TEST(Ste, MixedMatchesScalarReference) {
    std::mt19937_64 rng(33);
    const Tensor x = oracle::random_tensor({40}, rng, 2.0f);
    const Tensor g = oracle::random_tensor({40}, rng);
    ActQuantParams p;
    p.scheme = ActScheme::minmax8;
    p.x_min = -1.0f;
    p.x_max = 0.5f;
    p.scale = 1.5f / 255.0f;
    const Tensor out = ste_backward(g, x, p);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(out[i], (x[i] >= -1.0f && x[i] <= 0.5f) ? g[i] : 0.0f);
}

TEST(Histogram, TwoBins) {
    EXPECT_EQ(histogram_export(vec({0, 1, 2, 3}), 2).counts, (std::vector<std::size_t>{2, 2}));
}

TEST(Histogram, ConstantTensorSingleBin) {
    const Histogram h = histogram_export(vec({4, 4, 4}), 5);
    EXPECT_EQ(std::count_if(h.counts.begin(), h.counts.end(), [](std::size_t c) { return c != 0; }), 1);
}

TEST(Histogram, CountsSumToElementCount) {
    std::mt19937_64 rng(34);
    const Histogram h = histogram_export(oracle::random_tensor({17, 13}, rng), 9);
    std::size_t total = 0;
    for (auto c : h.counts) total += c;
    EXPECT_EQ(total, 17u * 13u);
    EXPECT_THROW(histogram_export(vec({1}), 1), ContractError);
}

TEST(Scheme, ParseAndName) {
    EXPECT_EQ(parse_act_scheme("minmax"), ActScheme::minmax8);
    EXPECT_EQ(parse_act_scheme("sym"), ActScheme::symmetric8);
    EXPECT_EQ(to_string(ActScheme::symmetric8), "sym");
    EXPECT_THROW(parse_act_scheme("int4"), std::invalid_argument);
}
