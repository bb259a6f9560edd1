#include "ternq/qkernels.hpp"

#include <chrono>
#include <limits>
#include <random>
#include <string>

namespace ternq {

namespace {

constexpr std::int64_t kAccumulatorMax = std::numeric_limits<std::int32_t>::max();

std::int64_t max_weight_code(int bits) {
    switch (bits) {
        case 2: return 1;
        case 3: return 3;
        case 8: return 127;
        default: throw GemmPlanError("gemm: unsupported weight bit width " + std::to_string(bits));
    }
}

void check_bound(std::size_t k, ActScheme scheme, int bits) {
    const std::int64_t bound = static_cast<std::int64_t>(k) * GemmPlan::max_act_code(scheme) * max_weight_code(bits);
    if (bound > kAccumulatorMax) {
        throw GemmPlanError("gemm: k = " + std::to_string(k) + " can overflow the 32-bit accumulator");
    }
}

}  // namespace

std::int64_t GemmPlan::max_act_code(ActScheme scheme) {
    switch (scheme) {
        case ActScheme::minmax8: return 255;
        case ActScheme::symmetric8: return 127;
        case ActScheme::none: break;
    }
    throw GemmPlanError("gemm: activations must be 8-bit quantized");
}

GemmPlan::GemmPlan(std::size_t m_, std::size_t n_, std::size_t k_, Granularity granularity, ActScheme scheme,
                   int bits)
    : m(m_), n(n_), k(k_), weight_granularity(granularity), act_scheme(scheme), weight_bits(bits) {
    check_bound(k, scheme, bits);
}

Tensor ternary_gemm(const QuantizedActivation& act, const QuantTensor& w) {
    if (act.shape.size() != 2) throw DimensionError("ternary_gemm: activation must be a matrix");
    const std::size_t m = act.shape[0], k = act.shape[1], n = w.rows;
    if (w.cols != k) {
        throw DimensionError("ternary_gemm: activation is " + shape_str(act.shape) + " but weight has " +
                             std::to_string(w.cols) + " input columns");
    }
    const GemmPlan plan(m, n, k, w.granularity, act.params.scheme, w.bits);
    const double step = activation_step(act.params);
    const double offset = activation_offset(act.params);

    // Per output column: indices selected with +1 / -1 and the code sum for the zero point.
    std::vector<std::vector<std::uint32_t>> plus(n), minus(n);
    std::vector<std::int64_t> colsum(n, 0);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t c = 0; c < k; ++c) {
            const std::int8_t b = w.codes[j * k + c];
            colsum[j] += b;
            if (plan.weight_bits == 2) {
                if (b > 0) plus[j].push_back(static_cast<std::uint32_t>(c));
                else if (b < 0) minus[j].push_back(static_cast<std::uint32_t>(c));
            }
        }
    }

    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const std::int16_t* a = act.codes.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            std::int32_t acc = 0;
            if (plan.weight_bits == 2) {
                for (std::uint32_t c : plus[j]) acc += a[c];
                for (std::uint32_t c : minus[j]) acc -= a[c];
            } else {
                const std::int8_t* b = w.codes.data() + j * k;
                for (std::size_t c = 0; c < k; ++c) acc += static_cast<std::int32_t>(a[c]) * b[c];
            }
            const double alpha = w.scales[w.granularity == Granularity::layer ? 0 : j];
            out[i * n + j] =
                static_cast<float>(alpha * (step * static_cast<double>(acc) + offset * static_cast<double>(colsum[j])));
        }
    }
    return out;
}

Tensor ternary_gemm(const QuantizedActivation& act, const PackedBlob& weight) {
    return ternary_gemm(act, unpack(weight));
}

std::size_t gemm_bytes_touched(std::size_t m, std::size_t n, std::size_t k) {
    return packed_byte_length(n * k, 2) + m * k + 4 * m * n;
}

BenchRecord bench_gemm(const GemmPlan& plan, std::size_t repetitions, std::uint64_t seed) {
    BenchRecord rec;
    if (repetitions == 0) return rec;
    check_bound(plan.k, plan.act_scheme, plan.weight_bits);
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);

    Tensor x({plan.m, plan.k});
    for (float& v : x.storage()) v = normal(rng);
    Tensor w({plan.n, plan.k});
    for (float& v : w.storage()) v = normal(rng);
    QuantConfig qc;
    qc.granularity = plan.weight_granularity;
    qc.method = plan.weight_bits == 2 ? QuantMethod::twn_approx : plan.weight_bits == 3 ? QuantMethod::laq3 : QuantMethod::int8;
    const PackedBlob blob = pack(quantize_weight(w, nullptr, qc));
    const QuantizedActivation act = quantize_activation(x, plan.act_scheme);
    const Tensor xd = dequantize(act);
    const Tensor wd = dequantize(unpack(blob));

    using clock = std::chrono::steady_clock;
    volatile float sink = 0.0f;
    const auto t0 = clock::now();
    for (std::size_t r = 0; r < repetitions; ++r) sink = sink + ternary_gemm(act, blob)[0];
    const auto t1 = clock::now();
    for (std::size_t r = 0; r < repetitions; ++r) {
        Tensor out({plan.m, plan.n});
        for (std::size_t i = 0; i < plan.m; ++i)
            for (std::size_t j = 0; j < plan.n; ++j) {
                float acc = 0.0f;
                for (std::size_t c = 0; c < plan.k; ++c) acc += xd.at(i, c) * wd.at(j, c);
                out.at(i, j) = acc;
            }
        sink = sink + (out.empty() ? 0.0f : out[0]);
    }
    const auto t2 = clock::now();

    rec.m = plan.m;
    rec.n = plan.n;
    rec.k = plan.k;
    rec.repetitions = repetitions;
    const auto reps = static_cast<double>(repetitions);
    rec.ternary_ns_per_op = std::chrono::duration<double, std::nano>(t1 - t0).count() / reps;
    rec.float_ns_per_op = std::chrono::duration<double, std::nano>(t2 - t1).count() / reps;
    rec.bytes_touched = gemm_bytes_touched(plan.m, plan.n, plan.k);
    return rec;
}

}  // namespace ternq
