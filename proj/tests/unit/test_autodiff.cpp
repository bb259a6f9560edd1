#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "ternq/act_quant.hpp"
#include "ternq/autodiff.hpp"

using namespace ternq;
using TensorD = BasicTensor<double>;

namespace {

Tensor mat(Shape s, std::vector<float> v) { return Tensor(std::move(s), std::move(v)); }

// Runs `build` on a double tape with the given leaves and compares backward against finite differences.
double gradient_error(const std::vector<TensorD>& inputs,
                      const std::function<Var(Tape<double>&, const std::vector<Var>&)>& build) {
    Tape<double> tape;
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    tape.backward(build(tape, leaves));
    auto f = [&](const std::vector<TensorD>& ps) {
        Tape<double> t2;
        std::vector<Var> l2;
        for (const auto& p : ps) l2.push_back(t2.leaf(p));
        return t2.value(build(t2, l2))[0];
    };
    const auto fd = oracle::finite_differences(inputs, f);
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) worst = std::max(worst, oracle::relative_error(tape.grad(leaves[i]), fd[i]));
    return worst;
}

TensorD rand_d(Shape s, std::mt19937_64& rng) { return oracle::random_tensor(s, rng).cast<double>(); }

}  // namespace

TEST(Tensor, DataLengthMustMatchShape) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), DimensionError);
    EXPECT_EQ(Tensor({2, 3}).size(), 6u);
    EXPECT_EQ(Tensor({2, 3}).rows(), 2u);
}

TEST(Matmul, IdentityTimesMatrix) {
    Tape<float> t;
    const Var a = t.constant(mat({2, 2}, {1, 0, 0, 1}));
    const Var b = t.constant(mat({2, 2}, {3, 4, 5, 6}));
    EXPECT_EQ(t.value(ops::matmul(t, a, b)), mat({2, 2}, {3, 4, 5, 6}));
}

TEST(Matmul, Scalar) {
    Tape<float> t;
    EXPECT_EQ(t.value(ops::matmul(t, t.constant(mat({1, 1}, {2})), t.constant(mat({1, 1}, {3}))))[0], 6.0f);
}

TEST(Matmul, MatchesTripleLoop) {
    std::mt19937_64 rng(1);
    const Tensor a = oracle::random_tensor({4, 5}, rng), b = oracle::random_tensor({5, 3}, rng);
    Tape<float> t;
    const Tensor& c = t.value(ops::matmul(t, t.constant(a), t.constant(b)));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double ref = 0.0;
            for (std::size_t k = 0; k < 5; ++k) ref += static_cast<double>(a.at(i, k)) * b.at(k, j);
            EXPECT_NEAR(c.at(i, j), ref, 1e-6);
        }
}

TEST(Matmul, ShapeMismatchThrows) {
    Tape<float> t;
    EXPECT_THROW(ops::matmul(t, t.constant(Tensor({2, 3})), t.constant(Tensor({2, 3}))), DimensionError);
}

TEST(Softmax, SymmetricRow) {
    Tape<float> t;
    const Tensor& s = t.value(ops::softmax_rows(t, t.constant(mat({1, 2}, {0, 0}))));
    EXPECT_FLOAT_EQ(s[0], 0.5f);
    EXPECT_FLOAT_EQ(s[1], 0.5f);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
    Tape<float> t;
    const Tensor& s = t.value(ops::softmax_rows(t, t.constant(mat({1, 2}, {1000, 0}))));
    EXPECT_FLOAT_EQ(s[0], 1.0f);
    EXPECT_GE(s[1], 0.0f);
    EXPECT_LT(s[1], 1e-30f);
}

TEST(Softmax, MatchesDirectFormulaAndSumsToOne) {
    std::mt19937_64 rng(2);
    const Tensor x = oracle::random_tensor({6, 7}, rng, 3.0f);
    Tape<float> t;
    const Tensor& s = t.value(ops::softmax_rows(t, t.constant(x)));
    for (std::size_t r = 0; r < 6; ++r) {
        long double z = 0.0L, total = 0.0L;
        for (std::size_t c = 0; c < 7; ++c) z += std::exp(static_cast<long double>(x.at(r, c)));
        for (std::size_t c = 0; c < 7; ++c) {
            EXPECT_NEAR(s.at(r, c), static_cast<double>(std::exp(static_cast<long double>(x.at(r, c))) / z), 1e-6);
            total += s.at(r, c);
        }
        EXPECT_NEAR(static_cast<double>(total), 1.0, 1e-6);
    }
}

TEST(Gelu, ZeroAndAsymptote) {
    EXPECT_EQ(gelu_value(0.0), 0.0);
    EXPECT_NEAR(gelu_value(20.0), 20.0, 1e-12);
    EXPECT_NEAR(gelu_value(-20.0), 0.0, 1e-12);
}

TEST(Gelu, MatchesQuadratureAtOne) {
    EXPECT_NEAR(gelu_value(1.0), 1.0 * oracle::normal_cdf_quadrature(1.0), 1e-5);
    for (double x : {-2.5, -0.3, 0.7, 1.9}) EXPECT_NEAR(gelu_value(x), x * oracle::normal_cdf_quadrature(x), 1e-5);
}

TEST(LayerNorm, ConstantRowGivesZeros) {
    Tape<float> t;
    const Tensor& y = t.value(ops::layer_norm(t, t.constant(mat({1, 3}, {4, 4, 4})), t.constant(mat({3}, {1, 1, 1})),
                                              t.constant(Tensor({3}))));
    for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(LayerNorm, AlreadyNormalized) {
    Tape<float> t;
    const Tensor& y = t.value(
        ops::layer_norm(t, t.constant(mat({1, 2}, {1, -1})), t.constant(mat({2}, {1, 1})), t.constant(Tensor({2}))));
    EXPECT_NEAR(y[0], 1.0f, 1e-6);
    EXPECT_NEAR(y[1], -1.0f, 1e-6);
}

TEST(LayerNorm, RandomRowStatistics) {
    std::mt19937_64 rng(3);
    const Tensor x = oracle::random_tensor({5, 16}, rng, 4.0f);
    Tape<float> t;
    const Tensor& y = t.value(ops::layer_norm(t, t.constant(x), t.constant(Tensor({16}, 1.0f)), t.constant(Tensor({16}))));
    for (std::size_t r = 0; r < 5; ++r) {
        double mean = 0.0, var = 0.0;
        for (float v : y.row(r)) mean += v;
        mean /= 16.0;
        for (float v : y.row(r)) var += (v - mean) * (v - mean);
        var /= 16.0;
        EXPECT_NEAR(mean, 0.0, 1e-6);
        EXPECT_NEAR(var, 1.0, 1e-4);
    }
}

TEST(Backward, SumGivesOnes) {
    Tape<float> t;
    const Var x = t.leaf(mat({2, 2}, {1, -2, 3, 4}));
    t.backward(ops::sum(t, x));
    EXPECT_EQ(t.grad(x), Tensor({2, 2}, 1.0f));
}

TEST(Backward, SumOfSquaresGivesTwoX) {
    Tape<float> t;
    const Tensor xv = mat({3}, {1, -2, 0.5f});
    const Var x = t.leaf(xv);
    t.backward(ops::sum(t, ops::mul(t, x, x)));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_FLOAT_EQ(t.grad(x)[i], 2 * xv[i]);
}

TEST(Backward, NonScalarLossIsContractError) {
    Tape<float> t;
    const Var x = t.leaf(Tensor({2}, 1.0f));
    EXPECT_THROW(t.backward(x), ContractError);
}

TEST(Backward, UntouchedTensorHasZeroGradient) {
    Tape<float> t;
    const Var x = t.leaf(Tensor({2}, 1.0f));
    const Var unused = t.leaf(Tensor({3}, 5.0f));
    t.backward(ops::sum(t, x));
    EXPECT_EQ(t.grad(unused), Tensor({3}));
}

TEST(Backward, VisitsOpsInReverseCreationOrder) {
    Tape<float> t;
    const Var x = t.leaf(Tensor({2}, 1.0f));
    const Var a = ops::scale(t, x, 2.0f);
    const Var b = ops::mul(t, a, x);
    const Var c = ops::sum(t, b);
    t.backward(c);
    EXPECT_EQ(t.last_backward_order(), (std::vector<std::size_t>{c.id, b.id, a.id}));
}

TEST(Backward, TwoLayerMlpMatchesFiniteDifferences) {
    std::mt19937_64 rng(4);
    const std::vector<TensorD> in = {rand_d({5, 4}, rng), rand_d({6, 4}, rng), rand_d({6}, rng), rand_d({3, 6}, rng),
                                     rand_d({3}, rng)};
    const std::vector<int> labels = {0, 2, 1, 1, 0};
    auto build = [&](Tape<double>& t, const std::vector<Var>& p) {
        const Var h = ops::gelu(t, ops::linear(t, p[0], p[1], p[2]));
        return ops::cross_entropy(t, ops::linear(t, h, p[3], p[4]), std::span<const int>(labels));
    };
    EXPECT_LT(gradient_error(in, build), 1e-3);
}

TEST(Backward, PrimitivesMatchFiniteDifferences) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t m = 1 + trial % 3, k = 2 + trial % 4, n = 1 + (trial / 3) % 3;
        const TensorD a = rand_d({m, k}, rng), b = rand_d({k, n}, rng), w = rand_d({n, k}, rng), bias = rand_d({n}, rng);
        const TensorD r = rand_d({m, k}, rng);
        // Weighted sums make every output element matter.
        auto weighted = [](Tape<double>& t, Var v, std::uint64_t seed) {
            std::mt19937_64 wr(seed);
            const Var c = t.constant(oracle::random_tensor(t.value(v).shape(), wr).cast<double>());
            return ops::sum(t, ops::mul(t, v, c));
        };
        EXPECT_LT(gradient_error({a, b}, [&](auto& t, const auto& p) { return weighted(t, ops::matmul(t, p[0], p[1]), trial); }), 1e-3);
        EXPECT_LT(gradient_error({a, w, bias}, [&](auto& t, const auto& p) { return weighted(t, ops::linear(t, p[0], p[1], p[2]), trial); }), 1e-3);
        EXPECT_LT(gradient_error({a}, [&](auto& t, const auto& p) { return weighted(t, ops::gelu(t, p[0]), trial); }), 1e-3);
        EXPECT_LT(gradient_error({a}, [&](auto& t, const auto& p) { return weighted(t, ops::softmax_rows(t, p[0]), trial); }), 1e-3);
        // Two-element rows normalize to exactly +-1, whose input gradient vanishes; use wider rows.
        const TensorD wide = rand_d({m, k + 1}, rng), g1 = rand_d({k + 1}, rng), b1 = rand_d({k + 1}, rng);
        EXPECT_LT(gradient_error({wide, g1, b1}, [&](auto& t, const auto& p) { return weighted(t, ops::layer_norm(t, p[0], p[1], p[2]), trial); }), 1e-3);
        EXPECT_LT(gradient_error({a, r}, [&](auto& t, const auto& p) { return ops::mse(t, p[0], p[1]); }), 1e-3);
        EXPECT_LT(gradient_error({a, r}, [&](auto& t, const auto& p) { return weighted(t, ops::sub(t, p[0], p[1]), trial); }), 1e-3);
        // The teacher side carries no gradient, so only the student logits are leaves.
        EXPECT_LT(gradient_error({a}, [&](auto& t, const auto& p) { return ops::soft_cross_entropy(t, p[0], t.constant(r), 1.0 + trial % 2); }), 1e-3);
    }
}

TEST(Backward, AttentionOpsMatchFiniteDifferences) {
    std::mt19937_64 rng(6);
    const std::size_t batch = 2, n = 3, heads = 2, d = 4;
    const TensorD q = rand_d({batch * n, d}, rng), k = rand_d({batch * n, d}, rng), v = rand_d({batch * n, d}, rng);
    auto build = [&](Tape<double>& t, const std::vector<Var>& p) {
        const Var s = ops::head_scores(t, p[0], p[1], batch, heads);
        const Var pr = ops::softmax_rows(t, ops::scale(t, s, 0.5));
        const Var ctx = ops::head_context(t, pr, p[2], batch, heads);
        std::mt19937_64 wr(9);
        return ops::sum(t, ops::mul(t, ctx, t.constant(oracle::random_tensor(t.value(ctx).shape(), wr).cast<double>())));
    };
    EXPECT_LT(gradient_error({q, k, v}, build), 1e-3);
}

TEST(Backward, EmbeddingScatterAddsRepeatedIds) {
    Tape<float> t;
    const Var table = t.leaf(Tensor({4, 2}, 1.0f));
    const std::vector<int> ids = {1, 3, 1};
    t.backward(ops::sum(t, ops::embedding(t, table, std::span<const int>(ids))));
    EXPECT_EQ(t.grad(table), mat({4, 2}, {0, 0, 2, 2, 0, 0, 1, 1}));
}

TEST(FakeQuant, SteMaskMatchesScalarReference) {
    std::mt19937_64 rng(7);
    for (ActScheme scheme : {ActScheme::minmax8, ActScheme::symmetric8}) {
        const Tensor x = oracle::random_tensor({4, 5}, rng, 2.0f);
        Tape<float> t;
        const Var xv = t.leaf(x);
        const Var y = ops::fake_quant(t, xv, scheme);
        const Tensor up = oracle::random_tensor({4, 5}, rng);
        t.backward(ops::sum(t, ops::mul(t, y, t.constant(up))));
        const ActQuantParams p = quantize_activation(x, scheme).params;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const bool inside = x[i] >= p.range_lo() && x[i] <= p.range_hi();
            EXPECT_EQ(t.grad(xv)[i], inside ? up[i] : 0.0f);
        }
        EXPECT_EQ(t.value(y), dequantize(quantize_activation(x, scheme)));
    }
}

TEST(Forward, Deterministic) {
    std::mt19937_64 rng(8);
    const Tensor a = oracle::random_tensor({7, 9}, rng), b = oracle::random_tensor({9, 5}, rng);
    Tape<float> t1, t2;
    EXPECT_EQ(t1.value(ops::matmul(t1, t1.constant(a), t1.constant(b))), t2.value(ops::matmul(t2, t2.constant(a), t2.constant(b))));
}
