#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "ternq/autodiff.hpp"
#include "ternq/tensor.hpp"

namespace ternq {

struct ActQuantParams {
    ActScheme scheme = ActScheme::minmax8;
    float x_min = 0.0f;
    float x_max = 0.0f;
    float scale = 0.0f;

    /// Inclusive interval that the codes can represent; the STE passes gradients inside it.
    float range_lo() const;
    float range_hi() const;
};

/// 8-bit codes: [0, 255] for minmax8, [-127, 127] for symmetric8.
struct QuantizedActivation {
    Shape shape;
    std::vector<std::int16_t> codes;
    ActQuantParams params;
};

/// Round half away from zero.
double round_half_away(double x);

QuantizedActivation quantize_minmax(const Tensor& x);
QuantizedActivation quantize_symmetric(const Tensor& x);
QuantizedActivation quantize_activation(const Tensor& x, ActScheme scheme);
/// Encodes `x` against fixed parameters (codes are clamped to the scheme's range).
QuantizedActivation quantize_with_params(const Tensor& x, const ActQuantParams& params);
Tensor dequantize(const QuantizedActivation& q);
float dequantize_code(std::int32_t code, const ActQuantParams& params);

/// Affine decoding value = code * step + offset, both in double.
double activation_step(const ActQuantParams& params);
double activation_offset(const ActQuantParams& params);

/// Clipped straight-through estimator: grad_out where x lies in the representable range, else 0.
Tensor ste_backward(const Tensor& grad_out, const Tensor& x, const ActQuantParams& params);

struct Histogram {
    float lo = 0.0f;
    float hi = 0.0f;
    std::vector<std::size_t> counts;
};

/// Uniform bins over [min(x), max(x)]; the last bin is closed on the right.
Histogram histogram_export(const Tensor& x, std::size_t bins);

std::string_view to_string(ActScheme scheme);
ActScheme parse_act_scheme(std::string_view name);

}  // namespace ternq
