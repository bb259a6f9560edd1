#include "ternq/plan.hpp"

#include <charconv>
#include <vector>

namespace ternq {

namespace {

int parse_bits(std::string_view field, std::string_view whole) {
    int value = 0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (ec != std::errc{} || ptr != field.data() + field.size()) {
        throw PlanError("plan '" + std::string(whole) + "': '" + std::string(field) + "' is not a bit width");
    }
    return value;
}

bool is_ternary_method(QuantMethod m) {
    return m == QuantMethod::twn_approx || m == QuantMethod::twn_exact || m == QuantMethod::lat_approx ||
           m == QuantMethod::lat_exact;
}

}  // namespace

QuantPlan QuantPlan::parse(std::string_view notation) {
    std::vector<std::string_view> parts;
    std::size_t start = 0;
    while (true) {
        const std::size_t dash = notation.find('-', start);
        parts.push_back(notation.substr(start, dash == std::string_view::npos ? std::string_view::npos : dash - start));
        if (dash == std::string_view::npos) break;
        start = dash + 1;
    }
    if (parts.size() != 3) throw PlanError("plan '" + std::string(notation) + "' must have the form W-E-A");
    QuantPlan plan;
    plan.weight_bits = parse_bits(parts[0], notation);
    plan.embedding_bits = parse_bits(parts[1], notation);
    plan.act_bits = parse_bits(parts[2], notation);
    plan.weight_granularity = Granularity::layer;
    plan.embedding_granularity = plan.embedding_bits <= 3 ? Granularity::row : Granularity::layer;
    plan.validate();
    return plan;
}

std::string QuantPlan::notation() const {
    return std::to_string(weight_bits) + "-" + std::to_string(embedding_bits) + "-" + std::to_string(act_bits);
}

void QuantPlan::validate() const {
    auto check_weight = [](int bits, const char* what) {
        if (bits != 2 && bits != 3 && bits != 8 && bits != 32) {
            throw PlanError(std::string(what) + " bit width " + std::to_string(bits) + " not in {2,3,8,32}");
        }
    };
    check_weight(weight_bits, "weight");
    check_weight(embedding_bits, "embedding");
    if (act_bits != 8 && act_bits != 32) {
        throw PlanError("activation bit width " + std::to_string(act_bits) + " not supported (use 8 or 32)");
    }
    if (act_bits == 8 && act_scheme == ActScheme::none) throw PlanError("8-bit activations need a scheme");
    if (weight_bits == 8 && weight_granularity == Granularity::row) {
        throw PlanError("8-bit transformer weights use layer-wise scaling; row granularity rejected");
    }
    if (embedding_bits == 8 && embedding_granularity == Granularity::row) {
        throw PlanError("8-bit word embedding uses layer-wise scaling; row granularity rejected");
    }
    const bool any_two_bit = weight_bits == 2 || embedding_bits == 2;
    if (any_two_bit && !is_ternary_method(method)) {
        throw PlanError("method '" + std::string(to_string(method)) + "' cannot produce 2-bit weights");
    }
    if (method == QuantMethod::laq3 && weight_bits != 3 && embedding_bits != 3) {
        throw PlanError("method 'laq3' requires a 3-bit weight or embedding width");
    }
    if (lat_iters < 1) throw PlanError("lat_iters must be >= 1");
    if (!(v_floor > 0.0f)) throw PlanError("v_floor must be positive");
}

std::optional<QuantConfig> QuantPlan::config_for(ParamRole role) const {
    int bits = 32;
    Granularity gran = Granularity::layer;
    if (role == ParamRole::transformer_weight) {
        bits = weight_bits;
        gran = weight_granularity;
    } else if (role == ParamRole::word_embedding) {
        bits = embedding_bits;
        gran = embedding_granularity;
    }
    QuantConfig cfg;
    cfg.granularity = gran;
    cfg.lat_iters = lat_iters;
    cfg.v_floor = v_floor;
    switch (bits) {
        case 2: cfg.method = method; return cfg;
        case 3: cfg.method = QuantMethod::laq3; return cfg;
        case 8: cfg.method = QuantMethod::int8; return cfg;
        default: return std::nullopt;
    }
}

bool QuantPlan::uses_second_moment() const {
    const bool lat = method == QuantMethod::lat_approx || method == QuantMethod::lat_exact;
    return (lat && (weight_bits == 2 || embedding_bits == 2)) || weight_bits == 3 || embedding_bits == 3;
}

QuantMethod parse_method(std::string_view name) {
    if (name == "twn") return QuantMethod::twn_approx;
    if (name == "twn-exact") return QuantMethod::twn_exact;
    if (name == "lat") return QuantMethod::lat_approx;
    if (name == "lat-exact") return QuantMethod::lat_exact;
    if (name == "laq3") return QuantMethod::laq3;
    throw PlanError("unknown method '" + std::string(name) + "'");
}

}  // namespace ternq
