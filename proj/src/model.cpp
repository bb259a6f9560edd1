#include "ternq/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ternq/qkernels.hpp"

namespace ternq {

namespace {

void check_batch(const ModelConfig& c, const Batch& b) {
    if (b.seq > c.max_positions) {
        throw InputError("sequence length " + std::to_string(b.seq) + " exceeds max positions " +
                         std::to_string(c.max_positions));
    }
    if (b.batch == 0 || b.seq == 0) throw InputError("empty batch");
    if (b.tokens.size() != b.batch * b.seq || b.segments.size() != b.batch * b.seq) {
        throw InputError("batch ids do not match " + std::to_string(b.batch) + " x " + std::to_string(b.seq));
    }
    for (int t : b.tokens)
        if (t < 0 || static_cast<std::size_t>(t) >= c.vocab) throw InputError("token id " + std::to_string(t) + " out of range");
    for (int s : b.segments)
        if (s < 0 || static_cast<std::size_t>(s) >= c.segments) throw InputError("segment id " + std::to_string(s) + " out of range");
}

template <class T>
Var maybe_dropout(Tape<T>& tape, Var x, const ModelConfig& c, const ForwardOptions& o) {
    if (!o.train || o.rng == nullptr || c.dropout <= 0.0f) return x;
    const std::size_t n = tape.value(x).size();
    std::bernoulli_distribution keep(1.0 - static_cast<double>(c.dropout));
    const T kept = static_cast<T>(1.0 / (1.0 - static_cast<double>(c.dropout)));
    std::vector<T> mask(n);
    for (auto& m : mask) m = keep(*o.rng) ? kept : T{0};
    return ops::dropout(tape, x, std::move(mask));
}

template <class T>
Var quantized_linear(Tape<T>& tape, Var x, const std::vector<Var>& p, std::size_t w, std::size_t b,
                     const ForwardOptions& o) {
    const Var xq = ops::fake_quant(tape, x, o.act);
    if constexpr (std::is_same_v<T, float>) {
        if (o.integer_weights != nullptr && o.act != ActScheme::none && (*o.integer_weights).at(w).has_value()) {
            const QuantizedActivation qa = quantize_activation(tape.value(x), o.act);
            Tensor out = ternary_gemm(qa, *(*o.integer_weights)[w]);
            const Tensor& bias = tape.value(p[b]);
            for (std::size_t r = 0; r < out.rows(); ++r)
                for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) += bias[c];
            return tape.constant(std::move(out));
        }
    }
    return ops::linear(tape, xq, p[w], p[b]);
}

}  // namespace

ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed, float init_std) {
    config.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, init_std);
    ModelWeights w{config, {}};
    for (const ParamSpec& spec : param_layout(config)) {
        Tensor t(spec.shape);
        const bool gain = spec.role == ParamRole::norm && spec.name.ends_with(".gain");
        if (gain) {
            std::fill(t.storage().begin(), t.storage().end(), 1.0f);
        } else if (spec.role != ParamRole::norm && spec.role != ParamRole::bias && spec.role != ParamRole::head_bias) {
            for (float& v : t.storage()) v = normal(rng);
        }
        w.params.push_back(std::move(t));
    }
    return w;
}

template <class T>
TapeTrace forward_on_tape(Tape<T>& tape, const std::vector<Var>& p, const ModelConfig& c, const Batch& batch,
                          const ForwardOptions& o) {
    check_batch(c, batch);
    if (p.size() != param_layout(c).size()) throw DimensionError("forward: parameter count does not match config");
    const std::size_t rows = batch.batch * batch.seq;
    std::vector<int> positions(rows);
    for (std::size_t r = 0; r < rows; ++r) positions[r] = static_cast<int>(r % batch.seq);

    TapeTrace trace;
    Var e = ops::embedding(tape, p[0], std::span<const int>(batch.tokens));
    e = ops::add(tape, e, ops::embedding(tape, p[1], std::span<const int>(batch.segments)));
    e = ops::add(tape, e, ops::embedding(tape, p[2], std::span<const int>(positions)));
    Var h = ops::layer_norm(tape, e, p[3], p[4]);
    h = maybe_dropout(tape, h, c, o);
    trace.hidden.push_back(h);

    const double d_scale = c.attention_scale == AttentionScale::hidden ? static_cast<double>(c.hidden)
                                                                        : static_cast<double>(c.head_dim());
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(d_scale));
    for (std::size_t l = 0; l < c.layers; ++l) {
        auto idx = [&](LayerSlot s) { return layer_param_index(l, s); };
        const Var q = quantized_linear(tape, h, p, idx(LayerSlot::query_w), idx(LayerSlot::query_b), o);
        const Var k = quantized_linear(tape, h, p, idx(LayerSlot::key_w), idx(LayerSlot::key_b), o);
        const Var v = quantized_linear(tape, h, p, idx(LayerSlot::value_w), idx(LayerSlot::value_b), o);

        const Var scores = ops::head_scores(tape, ops::fake_quant(tape, q, o.act), ops::fake_quant(tape, k, o.act),
                                            batch.batch, c.heads);
        trace.scores.push_back(scores);
        Var probs = ops::softmax_rows(tape, ops::scale(tape, scores, inv_sqrt));
        trace.probs.push_back(probs);
        probs = maybe_dropout(tape, probs, c, o);
        const Var ctx = ops::head_context(tape, ops::fake_quant(tape, probs, o.act), ops::fake_quant(tape, v, o.act),
                                          batch.batch, c.heads);
        Var attn = quantized_linear(tape, ctx, p, idx(LayerSlot::attn_out_w), idx(LayerSlot::attn_out_b), o);
        attn = maybe_dropout(tape, attn, c, o);
        const Var x = ops::layer_norm(tape, ops::add(tape, h, attn), p[idx(LayerSlot::attn_norm_gain)],
                                      p[idx(LayerSlot::attn_norm_bias)]);

        const Var inter = ops::gelu(tape, quantized_linear(tape, x, p, idx(LayerSlot::ffn_in_w), idx(LayerSlot::ffn_in_b), o));
        Var ffn = quantized_linear(tape, inter, p, idx(LayerSlot::ffn_out_w), idx(LayerSlot::ffn_out_b), o);
        ffn = maybe_dropout(tape, ffn, c, o);
        h = ops::layer_norm(tape, ops::add(tape, x, ffn), p[idx(LayerSlot::ffn_norm_gain)], p[idx(LayerSlot::ffn_norm_bias)]);
        trace.hidden.push_back(h);
    }

    std::vector<std::size_t> first(batch.batch);
    for (std::size_t b = 0; b < batch.batch; ++b) first[b] = b * batch.seq;
    const Var pooled = ops::select_rows(tape, h, std::span<const std::size_t>(first));
    trace.logits = ops::linear(tape, pooled, p[head_weight_index(c)], p[head_bias_index(c)]);
    return trace;
}

template TapeTrace forward_on_tape(Tape<float>&, const std::vector<Var>&, const ModelConfig&, const Batch&,
                                   const ForwardOptions&);
template TapeTrace forward_on_tape(Tape<double>&, const std::vector<Var>&, const ModelConfig&, const Batch&,
                                   const ForwardOptions&);

ForwardTrace forward(const ModelWeights& weights, const Batch& batch, ActScheme act,
                     const std::vector<std::optional<QuantTensor>>* integer_weights) {
    Tape<float> tape;
    std::vector<Var> p;
    p.reserve(weights.params.size());
    for (const Tensor& t : weights.params) p.push_back(tape.constant(t));
    ForwardOptions o;
    o.act = act;
    o.integer_weights = integer_weights;
    const TapeTrace tt = forward_on_tape(tape, p, weights.config, batch, o);
    ForwardTrace out;
    for (Var v : tt.hidden) out.hidden.push_back(tape.value(v));
    for (Var v : tt.scores) out.scores.push_back(tape.value(v));
    for (Var v : tt.probs) out.probs.push_back(tape.value(v));
    out.logits = tape.value(tt.logits);
    return out;
}

Tensor attention_scores(const Tensor& hidden, const ModelWeights& weights, std::size_t layer, std::size_t batch) {
    Tape<float> tape;
    const Var h = tape.constant(hidden);
    auto param = [&](LayerSlot s) { return tape.constant(weights[layer_param_index(layer, s)]); };
    const Var q = ops::linear(tape, h, param(LayerSlot::query_w), param(LayerSlot::query_b));
    const Var k = ops::linear(tape, h, param(LayerSlot::key_w), param(LayerSlot::key_b));
    return tape.value(ops::head_scores(tape, q, k, batch, weights.config.heads));
}

QuantizedModel quantize_model(const ModelWeights& weights, const QuantPlan& plan,
                              const std::vector<Tensor>* second_moments) {
    plan.validate();
    const auto layout = param_layout(weights.config);
    QuantizedModel out{plan, std::vector<std::optional<QuantTensor>>(layout.size()), weights};
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const auto qc = plan.config_for(layout[i].role);
        if (!qc) continue;
        const Tensor* v = second_moments != nullptr ? &(*second_moments).at(i) : nullptr;
        out.quant[i] = quantize_weight(weights[i], v, *qc);
        out.effective[i] = dequantize(*out.quant[i]);
    }
    return out;
}

ModelFile to_model_file(const QuantizedModel& model) {
    const auto layout = param_layout(model.effective.config);
    ModelFile f;
    f.config = model.effective.config;
    f.meta = {{"plan", model.plan.notation()},
              {"method", std::string(to_string(model.plan.method))},
              {"act", std::string(to_string(model.plan.activations()))}};
    for (std::size_t i = 0; i < layout.size(); ++i) {
        StoredTensor t;
        t.name = layout[i].name;
        t.role = layout[i].role;
        if (model.quant[i]) {
            const QuantTensor& q = *model.quant[i];
            t.method = q.bits == 8 ? "int8" : q.bits == 3 ? "laq3" : std::string(to_string(model.plan.method));
            t.value = q;
        } else {
            t.value = model.effective[i];
        }
        f.tensors.push_back(std::move(t));
    }
    return f;
}

ModelFile to_model_file(const ModelWeights& weights) {
    return to_model_file(QuantizedModel{QuantPlan::full_precision(),
                                        std::vector<std::optional<QuantTensor>>(weights.params.size()), weights});
}

ModelWeights weights_from_file(const ModelFile& file) {
    ModelWeights w{file.config, {}};
    for (const ParamSpec& spec : param_layout(file.config)) w.params.push_back(file.find(spec.name).dense());
    return w;
}

std::vector<std::optional<QuantTensor>> quant_from_file(const ModelFile& file) {
    std::vector<std::optional<QuantTensor>> out;
    for (const ParamSpec& spec : param_layout(file.config)) {
        const StoredTensor& t = file.find(spec.name);
        if (t.is_quantized()) out.emplace_back(std::get<QuantTensor>(t.value));
        else out.emplace_back(std::nullopt);
    }
    return out;
}

ActScheme act_scheme_of(const ModelFile& file) { return parse_act_scheme(file.meta_value("act", "none")); }

std::vector<int> predictions(const Tensor& logits) {
    std::vector<int> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto row = logits.row(r);
        out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

}  // namespace ternq
