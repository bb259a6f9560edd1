#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>

#include "ternq/act_quant.hpp"
#include "ternq/packed.hpp"

namespace ternq {

class GemmPlanError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Shape and encoding of an integer-domain product out[m x n] = act[m x k] * W[n x k]^T.
///
/// Weights keep the [out, in] layout of the model, so a row-wise scale multiplies one
/// output column. Accumulation is in 32-bit integers; construction rejects shapes where
/// k * max|act code| * max|weight code| could exceed 2^31 - 1.
struct GemmPlan {
    std::size_t m = 0;
    std::size_t n = 0;
    std::size_t k = 0;
    Granularity weight_granularity = Granularity::layer;
    ActScheme act_scheme = ActScheme::minmax8;
    int weight_bits = 2;

    GemmPlan() = default;
    GemmPlan(std::size_t m, std::size_t n, std::size_t k, Granularity granularity, ActScheme scheme,
             int weight_bits = 2);

    static constexpr int accumulator_bits = 32;
    static std::int64_t max_act_code(ActScheme scheme);
};

/// out[i, j] = alpha_j * (s * sum_c code[i, c] * b[j, c] + x_min * sum_c b[j, c]), evaluated in
/// double from an int32 accumulator and rounded to float once. Ternary weights accumulate by
/// adding and subtracting selected activation codes; wider codes multiply.
Tensor ternary_gemm(const QuantizedActivation& act, const PackedBlob& weight);
Tensor ternary_gemm(const QuantizedActivation& act, const QuantTensor& weight);

struct BenchRecord {
    std::size_t m = 0;
    std::size_t n = 0;
    std::size_t k = 0;
    std::size_t repetitions = 0;
    double ternary_ns_per_op = 0.0;
    double float_ns_per_op = 0.0;
    std::size_t bytes_touched = 0;

    bool empty() const { return repetitions == 0; }
};

/// Packed ternary codes + 8-bit activation codes + fp32 output.
std::size_t gemm_bytes_touched(std::size_t m, std::size_t n, std::size_t k);

/// Times the integer kernel and a float matmul on random operands of the plan's shape.
BenchRecord bench_gemm(const GemmPlan& plan, std::size_t repetitions, std::uint64_t seed = 0);

}  // namespace ternq
