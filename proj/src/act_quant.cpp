#include "ternq/act_quant.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ternq {

namespace {

constexpr double kMinMaxLevels = 255.0;
constexpr double kSymmetricLevels = 127.0;

double abs_max(const ActQuantParams& p) {
    return std::max(std::fabs(static_cast<double>(p.x_min)), std::fabs(static_cast<double>(p.x_max)));
}

}  // namespace

double round_half_away(double x) { return std::round(x); }

// For symmetric8 the representable interval is [-127 s, 127 s] = [-max|x|, max|x|].
float ActQuantParams::range_lo() const {
    if (scheme == ActScheme::symmetric8) {
        const double m = abs_max(*this);
        return m == 0.0 ? -127.0f * scale : static_cast<float>(-m);
    }
    return x_min;
}

float ActQuantParams::range_hi() const {
    if (scheme == ActScheme::symmetric8) {
        const double m = abs_max(*this);
        return m == 0.0 ? 127.0f * scale : static_cast<float>(m);
    }
    return x_max;
}

double activation_step(const ActQuantParams& p) {
    switch (p.scheme) {
        case ActScheme::minmax8: return (static_cast<double>(p.x_max) - p.x_min) / kMinMaxLevels;
        case ActScheme::symmetric8: {
            const double m = abs_max(p);
            return m == 0.0 ? static_cast<double>(p.scale) : m / kSymmetricLevels;
        }
        case ActScheme::none: break;
    }
    throw ContractError("activation_step: scheme 'none' has no codes");
}

double activation_offset(const ActQuantParams& p) {
    return p.scheme == ActScheme::minmax8 ? static_cast<double>(p.x_min) : 0.0;
}

float dequantize_code(std::int32_t code, const ActQuantParams& p) {
    switch (p.scheme) {
        case ActScheme::minmax8: {
            const double step = (static_cast<double>(p.x_max) - p.x_min) / kMinMaxLevels;
            return static_cast<float>(static_cast<double>(code) * step + p.x_min);
        }
        case ActScheme::symmetric8: {
            const double m = abs_max(p);
            if (m == 0.0) return static_cast<float>(static_cast<double>(code) * p.scale);
            return static_cast<float>(static_cast<double>(code) * (m / kSymmetricLevels));
        }
        case ActScheme::none:
            break;
    }
    throw ContractError("dequantize_code: activation scheme 'none' has no codes");
}

QuantizedActivation quantize_with_params(const Tensor& x, const ActQuantParams& p) {
    QuantizedActivation q{x.shape(), std::vector<std::int16_t>(x.size(), 0), p};
    if (p.scheme == ActScheme::minmax8) {
        const double range = static_cast<double>(p.x_max) - p.x_min;
        if (range == 0.0) return q;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double c = round_half_away((static_cast<double>(x[i]) - p.x_min) * kMinMaxLevels / range);
            q.codes[i] = static_cast<std::int16_t>(std::clamp(c, 0.0, kMinMaxLevels));
        }
    } else if (p.scheme == ActScheme::symmetric8) {
        const double m = abs_max(p);
        const double step = m == 0.0 ? static_cast<double>(p.scale) : m / kSymmetricLevels;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double c = round_half_away(static_cast<double>(x[i]) / step);
            q.codes[i] = static_cast<std::int16_t>(std::clamp(c, -kSymmetricLevels, kSymmetricLevels));
        }
    } else {
        throw ContractError("quantize_with_params: activation scheme 'none' has no codes");
    }
    return q;
}

QuantizedActivation quantize_minmax(const Tensor& x) {
    ActQuantParams p;
    p.scheme = ActScheme::minmax8;
    if (!x.empty()) {
        const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
        p.x_min = *lo;
        p.x_max = *hi;
    }
    p.scale = static_cast<float>((static_cast<double>(p.x_max) - p.x_min) / kMinMaxLevels);
    return quantize_with_params(x, p);
}

QuantizedActivation quantize_symmetric(const Tensor& x) {
    ActQuantParams p;
    p.scheme = ActScheme::symmetric8;
    if (!x.empty()) {
        const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
        p.x_min = *lo;
        p.x_max = *hi;
    }
    const double m = abs_max(p);
    p.scale = m == 0.0 ? 1.0f : static_cast<float>(m / kSymmetricLevels);
    return quantize_with_params(x, p);
}

QuantizedActivation quantize_activation(const Tensor& x, ActScheme scheme) {
    switch (scheme) {
        case ActScheme::minmax8: return quantize_minmax(x);
        case ActScheme::symmetric8: return quantize_symmetric(x);
        case ActScheme::none: break;
    }
    throw ContractError("quantize_activation: scheme 'none' does not quantize");
}

Tensor dequantize(const QuantizedActivation& q) {
    Tensor out(q.shape);
    for (std::size_t i = 0; i < q.codes.size(); ++i) out[i] = dequantize_code(q.codes[i], q.params);
    return out;
}

Tensor ste_backward(const Tensor& grad_out, const Tensor& x, const ActQuantParams& params) {
    if (grad_out.shape() != x.shape()) throw DimensionError("ste_backward: shape mismatch");
    const float lo = params.range_lo(), hi = params.range_hi();
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = (x[i] >= lo && x[i] <= hi) ? grad_out[i] : 0.0f;
    return g;
}

Histogram histogram_export(const Tensor& x, std::size_t bins) {
    if (bins < 2) throw ContractError("histogram_export: at least two bins required");
    Histogram h;
    h.counts.assign(bins, 0);
    if (x.empty()) return h;
    const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
    h.lo = *lo;
    h.hi = *hi;
    const double range = static_cast<double>(h.hi) - h.lo;
    for (float v : x.data()) {
        std::size_t b = 0;
        if (range > 0.0) {
            const double pos = (static_cast<double>(v) - h.lo) / range * static_cast<double>(bins);
            b = std::min(static_cast<std::size_t>(pos), bins - 1);
        }
        ++h.counts[b];
    }
    return h;
}

std::string_view to_string(ActScheme scheme) {
    switch (scheme) {
        case ActScheme::none: return "none";
        case ActScheme::minmax8: return "minmax";
        case ActScheme::symmetric8: return "sym";
    }
    return "?";
}

ActScheme parse_act_scheme(std::string_view name) {
    if (name == "minmax" || name == "minmax8") return ActScheme::minmax8;
    if (name == "sym" || name == "symmetric" || name == "symmetric8") return ActScheme::symmetric8;
    if (name == "none") return ActScheme::none;
    throw std::invalid_argument("unknown activation scheme '" + std::string(name) + "'");
}

}  // namespace ternq
