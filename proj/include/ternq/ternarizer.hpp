#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "ternq/tensor.hpp"

namespace ternq {

enum class Granularity { layer, row };

enum class QuantMethod { twn_exact, twn_approx, lat_exact, lat_approx, laq3, int8 };

enum class LatMode { exact, approx };

/// Low-bit weight matrix: integer codes times one positive scale per group.
///
/// A group is the whole matrix (layer granularity) or one row (row granularity).
/// `bits` selects the code range: 2 -> {-1, 0, 1}, 3 -> {-3..3}, 8 -> {-127..127}.
/// A group whose codes are all zero carries scale 0.
struct QuantTensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    int bits = 2;
    Granularity granularity = Granularity::layer;
    std::vector<std::int8_t> codes;
    std::vector<float> scales;
    /// Threshold used per group; diagnostic only.
    std::vector<float> thresholds;

    std::size_t group_count() const { return granularity == Granularity::layer ? 1 : rows; }
    std::size_t group_of(std::size_t index) const { return granularity == Granularity::layer ? 0 : index / cols; }
    int max_level() const;

    bool operator==(const QuantTensor&) const = default;
};

using TernaryTensor = QuantTensor;

struct QuantConfig {
    QuantMethod method = QuantMethod::twn_approx;
    Granularity granularity = Granularity::layer;
    int lat_iters = 3;
    float v_floor = 1e-12f;
};

/// Thresholding function: +1 above delta, -1 below -delta, 0 otherwise (strict inequalities).
std::int8_t threshold_sign(double x, double delta);

QuantTensor twn_approx(const Tensor& w, Granularity granularity);
QuantTensor twn_exact(const Tensor& w, Granularity granularity);

/// Minimizes sum_i sqrt(v_i) (w_i - alpha b_i)^2 per group. `objective_trace`, when given,
/// receives the weighted objective after every half-step of the approximate solver.
QuantTensor lat_subproblem(const Tensor& w, const Tensor& v, Granularity granularity, LatMode mode,
                           int iters = 3, float v_floor = 1e-12f,
                           std::vector<double>* objective_trace = nullptr);

/// 3-bit loss-aware quantization onto symmetric levels {-3..3} * alpha.
QuantTensor laq3(const Tensor& w, const Tensor& v, Granularity granularity, LatMode mode = LatMode::exact,
                 int iters = 3, float v_floor = 1e-12f, std::vector<double>* objective_trace = nullptr);

/// Symmetric 8-bit weight quantization, one scale per matrix.
QuantTensor quantize_int8(const Tensor& w);

/// Dispatch on config. `v` may be null for methods that ignore the second moment
/// (LAT modes then fall back to a uniform metric).
QuantTensor quantize_weight(const Tensor& w, const Tensor* v, const QuantConfig& config);

Tensor dequantize(const QuantTensor& q);

/// Fractions of zero, positive and negative codes.
struct SignStats {
    double zero = 0.0;
    double positive = 0.0;
    double negative = 0.0;
};
SignStats sign_stats(const QuantTensor& q);

/// ||w - dequantize(q)||^2 in double.
double residual(const Tensor& w, const QuantTensor& q);
/// sum_i sqrt(max(v_i, v_floor)) (w_i - q_i)^2 in double.
double weighted_residual(const Tensor& w, const Tensor& v, const QuantTensor& q, float v_floor = 1e-12f);

std::string_view to_string(QuantMethod method);
std::string_view to_string(Granularity granularity);
Granularity parse_granularity(std::string_view name);

}  // namespace ternq
