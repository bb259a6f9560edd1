#include "ternq/ternarizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace ternq {

namespace {

struct Matrix {
    std::size_t rows, cols;
};

Matrix as_matrix(const Tensor& w) {
    if (w.empty()) throw DimensionError("ternarize: empty weight matrix");
    if (w.rank() == 1) return {1, w.dim(0)};
    if (w.rank() == 2) return {w.dim(0), w.dim(1)};
    throw DimensionError("ternarize: expected a matrix, got " + shape_str(w.shape()));
}

QuantTensor make_result(Matrix m, int bits, Granularity g) {
    QuantTensor q;
    q.rows = m.rows;
    q.cols = m.cols;
    q.bits = bits;
    q.granularity = g;
    q.codes.assign(m.rows * m.cols, 0);
    const std::size_t groups = g == Granularity::layer ? 1 : m.rows;
    q.scales.assign(groups, 0.0f);
    q.thresholds.assign(groups, 0.0f);
    return q;
}

// Index range [begin, end) of each group in row-major order.
std::pair<std::size_t, std::size_t> group_span(const QuantTensor& q, std::size_t g) {
    if (q.granularity == Granularity::layer) return {0, q.rows * q.cols};
    return {g * q.cols, (g + 1) * q.cols};
}

std::vector<double> metric_weights(const Tensor& w, const Tensor* v, float v_floor) {
    std::vector<double> d(w.size(), 1.0);
    if (v == nullptr) return d;
    if (v->size() != w.size()) {
        throw DimensionError("second moment shape " + shape_str(v->shape()) + " does not match weight " +
                             shape_str(w.shape()));
    }
    const double floor = v_floor > 0.0f ? v_floor : 1e-12;
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::sqrt(std::max(static_cast<double>((*v)[i]), floor));
    return d;
}

// Sorted-prefix scan for min sum_i d_i (w_i - alpha b_i)^2 with b ternary. Retained sets are
// tie-grouped prefixes of |w| in descending order so that the support is I_delta(w) for the
// midpoint delta.
void exact_ternary_group(const Tensor& w, const std::vector<double>& d, QuantTensor& q, std::size_t g) {
    const auto [begin, end] = group_span(q, g);
    std::vector<std::size_t> order(end - begin);
    std::iota(order.begin(), order.end(), begin);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::fabs(w[a]) > std::fabs(w[b]); });

    double num = 0.0, den = 0.0;
    double best_score = 0.0, best_alpha = 0.0;
    std::size_t best_k = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        const double a = std::fabs(static_cast<double>(w[order[k]]));
        if (a == 0.0) break;
        num += d[order[k]] * a;
        den += d[order[k]];
        const bool boundary = k + 1 == order.size() || std::fabs(w[order[k + 1]]) != std::fabs(w[order[k]]);
        if (!boundary) continue;
        const double score = num * num / den;
        if (score > best_score) {
            best_score = score;
            best_alpha = num / den;
            best_k = k + 1;
        }
    }
    if (best_k == 0) return;
    const double upper = std::fabs(static_cast<double>(w[order[best_k - 1]]));
    const double lower = best_k < order.size() ? std::fabs(static_cast<double>(w[order[best_k]])) : 0.0;
    const double delta = 0.5 * (upper + lower);
    for (std::size_t i = begin; i < end; ++i) q.codes[i] = threshold_sign(w[i], delta);
    q.scales[g] = static_cast<float>(best_alpha);
    q.thresholds[g] = static_cast<float>(delta);
}

// alpha = sum_S d_i |w_i| / sum_S d_i over the current support.
double weighted_alpha(const Tensor& w, const std::vector<double>& d, const QuantTensor& q, std::size_t g) {
    const auto [begin, end] = group_span(q, g);
    double num = 0.0, den = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
        const double level = std::abs(q.codes[i]);
        num += d[i] * level * std::fabs(static_cast<double>(w[i]));
        den += d[i] * level * level;
    }
    return den > 0.0 ? num / den : 0.0;
}

double group_objective(const Tensor& w, const std::vector<double>& d, const QuantTensor& q, double alpha,
                       std::size_t g) {
    const auto [begin, end] = group_span(q, g);
    double acc = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
        const double r = static_cast<double>(w[i]) - alpha * q.codes[i];
        acc += d[i] * r * r;
    }
    return acc;
}

void twn_approx_group(const Tensor& w, QuantTensor& q, std::size_t g) {
    const auto [begin, end] = group_span(q, g);
    double l1 = 0.0;
    for (std::size_t i = begin; i < end; ++i) l1 += std::fabs(static_cast<double>(w[i]));
    const double delta = 0.7 * l1 / static_cast<double>(end - begin);
    double kept = 0.0, count = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
        q.codes[i] = threshold_sign(w[i], delta);
        if (q.codes[i] != 0) {
            kept += std::fabs(static_cast<double>(w[i]));
            count += 1.0;
        }
    }
    q.scales[g] = count > 0.0 ? static_cast<float>(kept / count) : 0.0f;
    q.thresholds[g] = static_cast<float>(delta);
}

std::int8_t round_level(double x, double alpha, int max_level) {
    if (alpha <= 0.0) return 0;
    const double r = std::round(x / alpha);
    return static_cast<std::int8_t>(std::clamp(r, -static_cast<double>(max_level), static_cast<double>(max_level)));
}

// Exact 3-bit solve: sweep alpha downward through every breakpoint |w_i| / (k + 1/2) where the
// per-element optimal level changes, scoring each level assignment with its least-squares alpha.
void laq3_exact_group(const Tensor& w, const std::vector<double>& d, QuantTensor& q, std::size_t g) {
    constexpr int kLevels = 3;
    const auto [begin, end] = group_span(q, g);
    struct Event {
        double alpha;
        std::size_t index;
    };
    std::vector<Event> events;
    events.reserve((end - begin) * kLevels);
    for (std::size_t i = begin; i < end; ++i) {
        const double a = std::fabs(static_cast<double>(w[i]));
        if (a == 0.0) continue;
        for (int k = 0; k < kLevels; ++k) events.push_back({a / (k + 0.5), i});
    }
    std::stable_sort(events.begin(), events.end(), [](const Event& x, const Event& y) { return x.alpha > y.alpha; });

    double s1 = 0.0, s2 = 0.0, best_score = 0.0, best_alpha = 0.0;
    std::size_t best_prefix = 0;
    std::vector<int> level(end - begin, 0);
    for (std::size_t e = 0; e < events.size(); ++e) {
        const std::size_t i = events[e].index;
        const int l = level[i - begin]++;
        s1 += d[i] * std::fabs(static_cast<double>(w[i]));
        s2 += d[i] * (2.0 * l + 1.0);
        if (e + 1 < events.size() && events[e + 1].alpha == events[e].alpha) continue;
        const double score = s1 * s1 / s2;
        if (score > best_score) {
            best_score = score;
            best_alpha = s1 / s2;
            best_prefix = e + 1;
        }
    }
    if (best_prefix == 0) return;
    std::fill(level.begin(), level.end(), 0);
    for (std::size_t e = 0; e < best_prefix; ++e) ++level[events[e].index - begin];
    for (std::size_t i = begin; i < end; ++i) {
        const int sign = w[i] > 0 ? 1 : -1;
        q.codes[i] = static_cast<std::int8_t>(sign * level[i - begin]);
    }
    q.scales[g] = static_cast<float>(best_alpha);
    q.thresholds[g] = static_cast<float>(0.5 * best_alpha);
}

// Alternating solver shared by the ternary and 3-bit loss-aware modes: alpha-step is the
// weighted least-squares scale on fixed codes, code-step rounds w / alpha onto the level set.
void alternating_group(const Tensor& w, const std::vector<double>& d, QuantTensor& q, std::size_t g, int iters,
                       std::vector<double>* trace) {
    const int max_level = q.max_level();
    double alpha = q.scales[g];
    if (trace) trace->push_back(group_objective(w, d, q, alpha, g));
    const auto [begin, end] = group_span(q, g);
    for (int it = 0; it < iters; ++it) {
        alpha = weighted_alpha(w, d, q, g);
        if (trace) trace->push_back(group_objective(w, d, q, alpha, g));
        // An empty support stays empty: every code-step would map to zero.
        for (std::size_t i = begin; i < end && alpha > 0.0; ++i) {
            q.codes[i] = max_level == 1 ? threshold_sign(w[i], 0.5 * alpha) : round_level(w[i], alpha, max_level);
        }
        if (trace) trace->push_back(group_objective(w, d, q, alpha, g));
    }
    alpha = weighted_alpha(w, d, q, g);
    if (trace) trace->push_back(group_objective(w, d, q, alpha, g));
    if (alpha <= 0.0) std::fill(q.codes.begin() + static_cast<std::ptrdiff_t>(begin), q.codes.begin() + static_cast<std::ptrdiff_t>(end), 0);
    q.scales[g] = static_cast<float>(alpha);
    q.thresholds[g] = static_cast<float>(0.5 * alpha);
}

// Objective traces are summed over groups so that monotonicity is asserted on the full matrix.
void merge_trace(std::vector<double>* total, const std::vector<double>& group_trace) {
    if (!total) return;
    if (total->size() < group_trace.size()) total->resize(group_trace.size(), 0.0);
    for (std::size_t i = 0; i < group_trace.size(); ++i) (*total)[i] += group_trace[i];
}

}  // namespace

int QuantTensor::max_level() const {
    switch (bits) {
        case 2: return 1;
        case 3: return 3;
        case 8: return 127;
        default: throw ContractError("QuantTensor: unsupported bit width " + std::to_string(bits));
    }
}

std::int8_t threshold_sign(double x, double delta) {
    if (x > delta) return 1;
    if (x < -delta) return -1;
    return 0;
}

QuantTensor twn_approx(const Tensor& w, Granularity granularity) {
    QuantTensor q = make_result(as_matrix(w), 2, granularity);
    for (std::size_t g = 0; g < q.group_count(); ++g) twn_approx_group(w, q, g);
    return q;
}

QuantTensor twn_exact(const Tensor& w, Granularity granularity) {
    QuantTensor q = make_result(as_matrix(w), 2, granularity);
    const std::vector<double> unit(w.size(), 1.0);
    for (std::size_t g = 0; g < q.group_count(); ++g) exact_ternary_group(w, unit, q, g);
    return q;
}

QuantTensor lat_subproblem(const Tensor& w, const Tensor& v, Granularity granularity, LatMode mode, int iters,
                           float v_floor, std::vector<double>* objective_trace) {
    if (iters < 1) throw ContractError("lat_subproblem: iters must be >= 1");
    const Matrix m = as_matrix(w);
    const std::vector<double> d = metric_weights(w, &v, v_floor);
    if (objective_trace) objective_trace->clear();
    if (mode == LatMode::exact) {
        QuantTensor q = make_result(m, 2, granularity);
        for (std::size_t g = 0; g < q.group_count(); ++g) exact_ternary_group(w, d, q, g);
        return q;
    }
    QuantTensor q = twn_approx(w, granularity);
    for (std::size_t g = 0; g < q.group_count(); ++g) {
        std::vector<double> trace;
        alternating_group(w, d, q, g, iters, objective_trace ? &trace : nullptr);
        merge_trace(objective_trace, trace);
    }
    return q;
}

QuantTensor laq3(const Tensor& w, const Tensor& v, Granularity granularity, LatMode mode, int iters, float v_floor,
                 std::vector<double>* objective_trace) {
    if (iters < 1) throw ContractError("laq3: iters must be >= 1");
    const Matrix m = as_matrix(w);
    const std::vector<double> d = metric_weights(w, &v, v_floor);
    QuantTensor q = make_result(m, 3, granularity);
    if (objective_trace) objective_trace->clear();
    for (std::size_t g = 0; g < q.group_count(); ++g) {
        if (mode == LatMode::exact) {
            laq3_exact_group(w, d, q, g);
            continue;
        }
        // Start from the grid that spans the group's range.
        const auto [begin, end] = group_span(q, g);
        double amax = 0.0;
        for (std::size_t i = begin; i < end; ++i) amax = std::max(amax, std::fabs(static_cast<double>(w[i])));
        const double alpha0 = amax / 3.0;
        for (std::size_t i = begin; i < end; ++i) q.codes[i] = round_level(w[i], alpha0, 3);
        q.scales[g] = static_cast<float>(alpha0);
        std::vector<double> trace;
        alternating_group(w, d, q, g, iters, objective_trace ? &trace : nullptr);
        merge_trace(objective_trace, trace);
    }
    return q;
}

QuantTensor quantize_int8(const Tensor& w) {
    QuantTensor q = make_result(as_matrix(w), 8, Granularity::layer);
    double amax = 0.0;
    for (float x : w.data()) amax = std::max(amax, std::fabs(static_cast<double>(x)));
    if (amax == 0.0) return q;
    const float step = static_cast<float>(amax / 127.0);
    for (std::size_t i = 0; i < w.size(); ++i) q.codes[i] = round_level(w[i], step, 127);
    q.scales[0] = step;
    q.thresholds[0] = 0.5f * step;
    return q;
}

QuantTensor quantize_weight(const Tensor& w, const Tensor* v, const QuantConfig& config) {
    const Tensor uniform = v ? Tensor{} : Tensor(w.shape(), 1.0f);
    const Tensor& moment = v ? *v : uniform;
    switch (config.method) {
        case QuantMethod::twn_exact: return twn_exact(w, config.granularity);
        case QuantMethod::twn_approx: return twn_approx(w, config.granularity);
        case QuantMethod::lat_exact:
            return lat_subproblem(w, moment, config.granularity, LatMode::exact, config.lat_iters, config.v_floor);
        case QuantMethod::lat_approx:
            return lat_subproblem(w, moment, config.granularity, LatMode::approx, config.lat_iters, config.v_floor);
        case QuantMethod::laq3:
            return laq3(w, moment, config.granularity, LatMode::exact, config.lat_iters, config.v_floor);
        case QuantMethod::int8:
            if (config.granularity != Granularity::layer) {
                throw ContractError("8-bit weights use layer-wise scaling only");
            }
            return quantize_int8(w);
    }
    throw ContractError("quantize_weight: unknown method");
}

Tensor dequantize(const QuantTensor& q) {
    Tensor out(Shape{q.rows, q.cols});
    for (std::size_t i = 0; i < q.codes.size(); ++i) {
        out[i] = q.scales[q.group_of(i)] * static_cast<float>(q.codes[i]);
    }
    return out;
}

double residual(const Tensor& w, const QuantTensor& q) {
    if (w.size() != q.codes.size()) throw DimensionError("residual: size mismatch");
    const Tensor hat = dequantize(q);
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double r = static_cast<double>(w[i]) - hat[i];
        acc += r * r;
    }
    return acc;
}

double weighted_residual(const Tensor& w, const Tensor& v, const QuantTensor& q, float v_floor) {
    if (w.size() != q.codes.size()) throw DimensionError("weighted_residual: size mismatch");
    const std::vector<double> d = metric_weights(w, &v, v_floor);
    const Tensor hat = dequantize(q);
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double r = static_cast<double>(w[i]) - hat[i];
        acc += d[i] * r * r;
    }
    return acc;
}

std::string_view to_string(QuantMethod method) {
    switch (method) {
        case QuantMethod::twn_exact: return "twn-exact";
        case QuantMethod::twn_approx: return "twn";
        case QuantMethod::lat_exact: return "lat-exact";
        case QuantMethod::lat_approx: return "lat";
        case QuantMethod::laq3: return "laq3";
        case QuantMethod::int8: return "int8";
    }
    return "?";
}

std::string_view to_string(Granularity granularity) {
    return granularity == Granularity::layer ? "layer" : "row";
}

Granularity parse_granularity(std::string_view name) {
    if (name == "layer") return Granularity::layer;
    if (name == "row") return Granularity::row;
    throw std::invalid_argument("unknown granularity '" + std::string(name) + "'");
}

SignStats sign_stats(const QuantTensor& q) {
    SignStats s;
    if (q.codes.empty()) return s;
    for (std::int8_t c : q.codes) {
        if (c == 0) s.zero += 1.0;
        else if (c > 0) s.positive += 1.0;
        else s.negative += 1.0;
    }
    const double n = static_cast<double>(q.codes.size());
    s.zero /= n;
    s.positive /= n;
    s.negative /= n;
    return s;
}

}  // namespace ternq
