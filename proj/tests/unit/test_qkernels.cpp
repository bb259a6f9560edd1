#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "ternq/qkernels.hpp"

using namespace ternq;

namespace {

QuantTensor identity_weight(std::size_t n) {
    QuantTensor q;
    q.rows = n;
    q.cols = n;
    q.codes.assign(n * n, 0);
    for (std::size_t i = 0; i < n; ++i) q.codes[i * n + i] = 1;
    q.scales = {1.0f};
    return q;
}

double max_rel(const Tensor& out, const std::vector<double>& ref) {
    double err = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        err = std::max(err, std::fabs(out[i] - ref[i]));
        scale = std::max(scale, std::fabs(ref[i]));
    }
    return scale == 0.0 ? err : err / scale;
}

}  // namespace

TEST(GemmPlan, OverflowBound) {
    EXPECT_NO_THROW(GemmPlan(1, 1, 3072, Granularity::layer, ActScheme::minmax8));
    const std::size_t max_minmax = 2147483647ull / 255;
    EXPECT_NO_THROW(GemmPlan(1, 1, max_minmax, Granularity::layer, ActScheme::minmax8));
    EXPECT_THROW(GemmPlan(1, 1, max_minmax + 1, Granularity::layer, ActScheme::minmax8), GemmPlanError);
    const std::size_t max_sym = 2147483647ull / 127;
    EXPECT_NO_THROW(GemmPlan(1, 1, max_sym, Granularity::layer, ActScheme::symmetric8));
    EXPECT_THROW(GemmPlan(1, 1, max_sym + 1, Granularity::layer, ActScheme::symmetric8), GemmPlanError);
}

TEST(TernaryGemm, IdentityWeightReturnsDequantizedActivation) {
    std::mt19937_64 rng(51);
    for (ActScheme s : {ActScheme::minmax8, ActScheme::symmetric8}) {
        const QuantizedActivation a = quantize_activation(oracle::random_tensor({3, 6}, rng), s);
        EXPECT_EQ(ternary_gemm(a, pack(identity_weight(6))), dequantize(a));
    }
}

TEST(TernaryGemm, ZeroWeightGivesZero) {
    std::mt19937_64 rng(52);
    const QuantizedActivation a = quantize_minmax(oracle::random_tensor({4, 5}, rng));
    QuantTensor w;
    w.rows = 3;
    w.cols = 5;
    w.codes.assign(15, 0);
    w.scales = {0.0f};
    EXPECT_EQ(ternary_gemm(a, pack(w)), Tensor({4, 3}));
}

TEST(TernaryGemm, MatchesIntegerAndFloatReferences) {
    std::mt19937_64 rng(53);
    for (ActScheme s : {ActScheme::minmax8, ActScheme::symmetric8}) {
        for (Granularity g : {Granularity::layer, Granularity::row}) {
            const Tensor x = oracle::random_tensor({8, 16}, rng);
            const QuantTensor w = twn_approx(oracle::random_tensor({4, 16}, rng), g);
            const QuantizedActivation a = quantize_activation(x, s);
            const Tensor out = ternary_gemm(a, pack(w));
            EXPECT_EQ(out, oracle::integer_gemm(a, w));
            EXPECT_LE(max_rel(out, oracle::float_gemm(dequantize(a), dequantize(w))), 1e-4);
        }
    }
}

TEST(TernaryGemm, WiderCodes) {
    std::mt19937_64 rng(54);
    const Tensor x = oracle::random_tensor({5, 12}, rng);
    const Tensor w = oracle::random_tensor({6, 12}, rng);
    const QuantizedActivation a = quantize_minmax(x);
    for (const QuantTensor& q : {laq3(w, Tensor(w.shape(), 1.0f), Granularity::row), quantize_int8(w)}) {
        const Tensor out = ternary_gemm(a, q);
        EXPECT_EQ(out, oracle::integer_gemm(a, q));
        EXPECT_LE(max_rel(out, oracle::float_gemm(dequantize(a), dequantize(q))), 1e-4);
    }
}

TEST(TernaryGemm, ZeroPointAlgebraMatchesNaiveExpansion) {
    std::mt19937_64 rng(55);
    const QuantizedActivation a = quantize_minmax(oracle::random_tensor({3, 10}, rng));
    const QuantTensor w = twn_exact(oracle::random_tensor({4, 10}, rng), Granularity::row);
    const Tensor out = ternary_gemm(a, w);
    const double s = activation_step(a.params);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            // sum_c alpha_j b_jc (code_ic s + x_min), expanded term by term
            double naive = 0.0;
            for (std::size_t c = 0; c < 10; ++c)
                naive += static_cast<double>(w.scales[j]) * w.codes[j * 10 + c] * (a.codes[i * 10 + c] * s + a.params.x_min);
            EXPECT_NEAR(out.at(i, j), naive, 1e-5 * (1.0 + std::fabs(naive)));
        }
}

TEST(TernaryGemm, ShapeMismatch) {
    const QuantizedActivation a = quantize_minmax(Tensor({2, 3}, 1.0f));
    EXPECT_THROW(ternary_gemm(a, pack(identity_weight(4))), DimensionError);
}

TEST(TernaryGemm, Deterministic) {
    std::mt19937_64 rng(56);
    const QuantizedActivation a = quantize_minmax(oracle::random_tensor({6, 9}, rng));
    const PackedBlob w = pack(twn_approx(oracle::random_tensor({7, 9}, rng), Granularity::layer));
    EXPECT_EQ(ternary_gemm(a, w), ternary_gemm(a, w));
}

TEST(Bench, ZeroRepetitionsIsEmpty) {
    EXPECT_TRUE(bench_gemm(GemmPlan(2, 2, 2, Granularity::layer, ActScheme::minmax8), 0).empty());
}

TEST(Bench, TinyHasPositiveTimings) {
    const BenchRecord r = bench_gemm(GemmPlan(2, 2, 2, Granularity::layer, ActScheme::minmax8), 3);
    EXPECT_GT(r.ternary_ns_per_op, 0.0);
    EXPECT_GT(r.float_ns_per_op, 0.0);
}

TEST(Bench, BytesTouchedFormula) {
    EXPECT_EQ(gemm_bytes_touched(256, 256, 256), 256u * 256 / 4 + 256u * 256 + 4u * 256 * 256);
    const BenchRecord r = bench_gemm(GemmPlan(256, 256, 256, Granularity::layer, ActScheme::minmax8), 1);
    EXPECT_EQ(r.bytes_touched, 16384u + 65536u + 262144u);
}
