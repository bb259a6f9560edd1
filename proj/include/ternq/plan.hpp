#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "ternq/autodiff.hpp"
#include "ternq/config.hpp"
#include "ternq/ternarizer.hpp"

namespace ternq {

class PlanError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Bit-width plan in "W-E-A" notation: transformer weights, word embedding, activations.
///
/// Bit widths map to quantizers: 2 -> `method` (a ternary method), 3 -> 3-bit loss-aware,
/// 8 -> symmetric int8 with one scale per matrix, 32 -> full precision.
struct QuantPlan {
    int weight_bits = 32;
    int embedding_bits = 32;
    int act_bits = 32;
    QuantMethod method = QuantMethod::twn_approx;
    Granularity weight_granularity = Granularity::layer;
    Granularity embedding_granularity = Granularity::row;
    ActScheme act_scheme = ActScheme::minmax8;
    int lat_iters = 3;
    float v_floor = 1e-12f;

    /// Parses "2-2-8" style strings and picks default granularities: layer-wise for
    /// transformer weights, row-wise for a low-bit word embedding, layer-wise at 8 bits.
    static QuantPlan parse(std::string_view notation);
    static QuantPlan full_precision() { return QuantPlan{}; }

    std::string notation() const;
    void validate() const;

    /// Quantizer for a parameter role, or nothing when the role stays full precision.
    std::optional<QuantConfig> config_for(ParamRole role) const;
    ActScheme activations() const { return act_bits == 8 ? act_scheme : ActScheme::none; }
    bool uses_second_moment() const;
    bool is_full_precision() const { return weight_bits == 32 && embedding_bits == 32 && act_bits == 32; }
};

QuantMethod parse_method(std::string_view name);

}  // namespace ternq
