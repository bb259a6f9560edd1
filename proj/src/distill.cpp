#include "ternq/distill.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

namespace ternq {

namespace {

void require_same(const Shape& a, const Shape& b, const char* what) {
    if (a != b) throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

double mse_value(const Tensor& a, const Tensor& b) {
    require_same(a.shape(), b.shape(), "loss_trm");
    if (a.empty()) throw DimensionError("loss_trm: empty tensor");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

bool same_plan(const QuantPlan& a, const QuantPlan& b) {
    return a.weight_bits == b.weight_bits && a.embedding_bits == b.embedding_bits && a.act_bits == b.act_bits &&
           a.method == b.method && a.weight_granularity == b.weight_granularity &&
           a.embedding_granularity == b.embedding_granularity && a.act_scheme == b.act_scheme &&
           a.lat_iters == b.lat_iters && a.v_floor == b.v_floor;
}

const std::vector<Tensor>* moments_for(const TrainState& st) {
    return st.plan.uses_second_moment() ? &st.optimizer.second_moments() : nullptr;
}

}  // namespace

Ablation parse_ablation(std::string_view name) {
    if (name == "none" || name.empty()) return Ablation::none;
    if (name == "no-trm") return Ablation::no_trm;
    if (name == "no-trm-no-logits") return Ablation::no_trm_no_logits;
    throw std::invalid_argument("unknown ablation '" + std::string(name) + "'");
}

std::string_view to_string(Ablation a) {
    switch (a) {
        case Ablation::none: return "none";
        case Ablation::no_trm: return "no-trm";
        case Ablation::no_trm_no_logits: return "no-trm-no-logits";
    }
    return "?";
}

double loss_trm(const ForwardTrace& s, const ForwardTrace& t, bool attention_probs) {
    const auto& sa = attention_probs ? s.probs : s.scores;
    const auto& ta = attention_probs ? t.probs : t.scores;
    if (s.hidden.size() != t.hidden.size() || sa.size() != ta.size()) {
        throw DimensionError("loss_trm: traces come from models of different depth");
    }
    double total = 0.0;
    for (std::size_t l = 0; l < s.hidden.size(); ++l) total += mse_value(s.hidden[l], t.hidden[l]);
    for (std::size_t l = 0; l < sa.size(); ++l) total += mse_value(sa[l], ta[l]);
    return total;
}

double loss_pred(const Tensor& s, const Tensor& t, double temperature) {
    require_same(s.shape(), t.shape(), "loss_pred");
    if (s.empty()) throw DimensionError("loss_pred: empty logits");
    double total = 0.0;
    for (std::size_t r = 0; r < s.rows(); ++r) {
        const auto sr = s.row(r), tr = t.row(r);
        double smax = -INFINITY, tmax = -INFINITY;
        for (std::size_t c = 0; c < sr.size(); ++c) {
            smax = std::max(smax, sr[c] / temperature);
            tmax = std::max(tmax, tr[c] / temperature);
        }
        double sz = 0.0, tz = 0.0;
        for (std::size_t c = 0; c < sr.size(); ++c) {
            sz += std::exp(sr[c] / temperature - smax);
            tz += std::exp(tr[c] / temperature - tmax);
        }
        const double slog = smax + std::log(sz);
        for (std::size_t c = 0; c < sr.size(); ++c) {
            const double p = std::exp(tr[c] / temperature - tmax) / tz;
            total -= p * (sr[c] / temperature - slog);
        }
    }
    return total / static_cast<double>(s.rows());
}

// ---------------------------------------------------------------------------

BertAdam::BertAdam(const AdamConfig& config, const std::vector<Shape>& shapes, std::vector<bool> decay)
    : config_(config), decay_(std::move(decay)) {
    if (decay_.size() != shapes.size()) throw DimensionError("BertAdam: one decay flag per tensor required");
    for (const Shape& s : shapes) {
        m_.emplace_back(s);
        v_.emplace_back(s);
    }
}

double BertAdam::step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr) {
    if (params.size() != m_.size() || grads.size() != m_.size()) throw DimensionError("BertAdam: tensor count mismatch");
    const double b1 = config_.beta1, b2 = config_.beta2;
    double sq = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        require_same(params[p].shape(), m_[p].shape(), "BertAdam");
        require_same(grads[p].shape(), m_[p].shape(), "BertAdam");
        const double wd = decay_[p] ? config_.weight_decay : 0.0;
        Tensor& w = params[p];
        Tensor& m = m_[p];
        Tensor& v = v_[p];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double g = grads[p][i];
            const double mi = b1 * m[i] + (1.0 - b1) * g;
            const double vi = b2 * v[i] + (1.0 - b2) * g * g;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double update = lr * (mi / (std::sqrt(vi) + config_.eps) + wd * w[i]);
            w[i] = static_cast<float>(w[i] - update);
            sq += update * update;
        }
    }
    ++t_;
    return std::sqrt(sq);
}

BertAdam make_optimizer(const ModelConfig& config, const AdamConfig& adam) {
    std::vector<Shape> shapes;
    std::vector<bool> decay;
    for (const ParamSpec& s : param_layout(config)) {
        shapes.push_back(s.shape);
        decay.push_back(!is_decay_exempt(s.role));
    }
    return BertAdam(adam, shapes, std::move(decay));
}

double TrainState::current_lr() const {
    if (total_steps == 0) return base_lr;
    const double frac = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
    return base_lr * (1.0 - frac);
}

TrainState make_train_state(const ModelWeights& teacher, const ModelWeights& student_init, const QuantPlan& plan,
                            const AdamConfig& adam, double lr, std::size_t total_steps, std::uint64_t seed) {
    if (!(teacher.config == student_init.config)) throw ContractError("teacher and student configs differ");
    plan.validate();
    TrainState st{teacher, student_init, plan, make_optimizer(student_init.config, adam), 0, total_steps, lr,
                  std::mt19937_64(seed)};
    return st;
}

StepRecord train_step(TrainState& st, const Batch& batch, const DistillLossConfig& lc, const QuantPlan& plan) {
    if (!same_plan(plan, st.plan)) {
        throw ContractError("train_step: plan " + plan.notation() + "/" + std::string(to_string(plan.method)) +
                            " differs from the run's plan " + st.plan.notation() + "/" +
                            std::string(to_string(st.plan.method)));
    }
    const ModelConfig& cfg = st.shadow.config;
    const auto layout = param_layout(cfg);
    const QuantizedModel qm = quantize_model(st.shadow, st.plan, moments_for(st));

    Tape<float> tape;
    std::vector<Var> leaves;
    leaves.reserve(layout.size());
    for (const Tensor& t : qm.effective.params) leaves.push_back(tape.leaf(t));
    ForwardOptions o;
    o.act = st.plan.activations();
    o.train = true;
    o.rng = &st.rng;
    const TapeTrace s = forward_on_tape(tape, leaves, cfg, batch, o);

    StepRecord rec;
    std::optional<Var> total;
    auto add_term = [&](Var v) { total = total ? ops::add(tape, *total, v) : v; };
    if (lc.ground_truth_only()) {
        add_term(ops::cross_entropy(tape, s.logits, std::span<const int>(batch.labels)));
    } else {
        const ForwardTrace t = forward(st.teacher, batch);
        std::optional<Var> trm;
        const auto& s_att = lc.attention_probs ? s.probs : s.scores;
        const auto& t_att = lc.attention_probs ? t.probs : t.scores;
        for (std::size_t l = 0; l < s.hidden.size(); ++l) {
            const Var term = ops::mse(tape, s.hidden[l], tape.constant(t.hidden[l]));
            trm = trm ? ops::add(tape, *trm, term) : term;
        }
        for (std::size_t l = 0; l < s_att.size(); ++l) {
            trm = ops::add(tape, *trm, ops::mse(tape, s_att[l], tape.constant(t_att[l])));
        }
        const Var pred = ops::soft_cross_entropy(tape, s.logits, tape.constant(t.logits), lc.temperature);
        rec.loss_trm = tape.value(*trm)[0];
        rec.loss_pred = tape.value(pred)[0];
        if (lc.use_trm_loss) add_term(*trm);
        if (lc.use_logits_loss) add_term(pred);
    }
    rec.loss_total = tape.value(*total)[0];

    if (!std::isfinite(rec.loss_total)) {
        std::string culprit = "loss";
        for (std::size_t i = 0; i < layout.size() && culprit == "loss"; ++i)
            if (!all_finite(qm.effective[i])) culprit = layout[i].name;
        for (std::size_t l = 0; l < s.hidden.size() && culprit == "loss"; ++l)
            if (!all_finite(tape.value(s.hidden[l]))) culprit = "hidden." + std::to_string(l);
        for (std::size_t l = 0; l < s.scores.size() && culprit == "loss"; ++l)
            if (!all_finite(tape.value(s.scores[l]))) culprit = "scores." + std::to_string(l);
        if (culprit == "loss" && !all_finite(tape.value(s.logits))) culprit = "logits";
        throw NumericalError(culprit, "non-finite loss at step " + std::to_string(st.step) + "; first non-finite tensor: " + culprit);
    }

    tape.backward(*total);
    std::vector<Tensor> grads;
    grads.reserve(layout.size());
    for (std::size_t i = 0; i < layout.size(); ++i) {
        grads.push_back(tape.grad(leaves[i]));
        if (!all_finite(grads.back())) {
            throw NumericalError(layout[i].name, "non-finite gradient for '" + layout[i].name + "' at step " +
                                                     std::to_string(st.step));
        }
    }
    rec.lr = st.current_lr();
    rec.update_norm = st.optimizer.step(st.shadow.params, grads, rec.lr);
    ++st.step;
    return rec;
}

std::string to_jsonl(const MetricRecord& r, std::uint64_t seed) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    const nlohmann::json j{{"step", r.step},         {"stage", r.stage},          {"loss_trm", opt(r.loss_trm)},
                           {"loss_pred", opt(r.loss_pred)}, {"loss_total", r.loss_total}, {"eval_acc", opt(r.eval_acc)},
                           {"lr", r.lr},             {"update_norm", r.update_norm}, {"seed", seed}};
    return j.dump();
}

TrainResult run_training(const ModelWeights& teacher, const ModelWeights& student_init, const Dataset& train,
                         const Dataset* eval, const TrainConfig& config, const MetricSink& sink) {
    if (train.empty()) throw std::invalid_argument("run_training: training dataset is empty");
    if (config.batch_size == 0) throw std::invalid_argument("run_training: batch size must be positive");
    if (config.stages != 1 && config.stages != 2) throw std::invalid_argument("run_training: stages must be 1 or 2");
    const std::size_t per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total = per_epoch * config.epochs;
    TrainState st = make_train_state(teacher, student_init, config.plan, config.adam, config.lr, total, config.seed);
    std::mt19937_64 shuffle(config.seed ^ 0x9e3779b97f4a7c15ull);

    DistillLossConfig base = config.loss;
    if (config.ablation == Ablation::no_trm) {
        base.use_trm_loss = false;
        base.use_logits_loss = true;
    } else if (config.ablation == Ablation::no_trm_no_logits) {
        base.use_trm_loss = false;
        base.use_logits_loss = false;
    }
    const int stages = config.ablation == Ablation::none ? config.stages : 1;
    const std::size_t log_every = std::max<std::size_t>(config.log_every, 1);

    TrainResult result;
    for (std::size_t e = 0; e < config.epochs; ++e) {
        for (const Batch& b : batches(train, config.batch_size, &shuffle)) {
            const bool first_stage = stages == 2 && st.step < total / 2;
            DistillLossConfig lc = base;
            if (first_stage) lc.use_logits_loss = false;
            const StepRecord rec = train_step(st, b, lc, config.plan);
            if (config.checkpoint_every != 0 && config.on_checkpoint && st.step % config.checkpoint_every == 0) {
                config.on_checkpoint(st.step, quantize_model(st.shadow, st.plan, moments_for(st)));
            }
            if (st.step % log_every == 0 || st.step == total) {
                MetricRecord m;
                m.step = st.step;
                m.stage = stages == 2 && !first_stage ? 2 : 1;
                m.loss_trm = rec.loss_trm;
                m.loss_pred = rec.loss_pred;
                m.loss_total = rec.loss_total;
                m.lr = rec.lr;
                m.update_norm = rec.update_norm;
                if (eval != nullptr && !eval->empty()) {
                    const QuantizedModel q = quantize_model(st.shadow, st.plan, moments_for(st));
                    m.eval_acc = evaluate(q.effective, *eval, st.plan.activations());
                }
                result.history.push_back(m);
                if (sink) sink(m);
            }
        }
    }
    result.student = quantize_model(st.shadow, st.plan, moments_for(st));
    result.shadow = st.shadow;
    return result;
}

TrainResult run_training(const ModelWeights& teacher, const Dataset& train, const Dataset* eval,
                         const TrainConfig& config, const MetricSink& sink) {
    return run_training(teacher, teacher, train, eval, config, sink);
}

ModelWeights train_teacher(const ModelConfig& config, const Dataset& train, const TeacherConfig& tc,
                           const MetricSink& sink) {
    if (train.empty()) throw std::invalid_argument("train_teacher: training dataset is empty");
    const ModelWeights init = init_weights(config, tc.seed, tc.init_std);
    const std::size_t per_epoch = (train.size() + tc.batch_size - 1) / tc.batch_size;
    const QuantPlan fp = QuantPlan::full_precision();
    TrainState st = make_train_state(init, init, fp, tc.adam, tc.lr, per_epoch * tc.epochs, tc.seed + 1);
    std::mt19937_64 shuffle(tc.seed ^ 0x9e3779b97f4a7c15ull);
    DistillLossConfig ce;
    ce.use_trm_loss = false;
    ce.use_logits_loss = false;
    for (std::size_t e = 0; e < tc.epochs; ++e) {
        double sum = 0.0;
        std::size_t n = 0;
        StepRecord last;
        for (const Batch& b : batches(train, tc.batch_size, &shuffle)) {
            last = train_step(st, b, ce, fp);
            sum += last.loss_total;
            ++n;
        }
        if (sink) {
            MetricRecord m;
            m.step = st.step;
            m.loss_total = sum / static_cast<double>(n);
            m.lr = last.lr;
            m.update_norm = last.update_norm;
            sink(m);
        }
    }
    return st.shadow;
}

double evaluate(const ModelWeights& weights, const Dataset& data, ActScheme act,
                const std::vector<std::optional<QuantTensor>>* integer_weights, std::size_t batch_size) {
    if (data.empty()) throw std::invalid_argument("evaluate: dataset is empty");
    std::size_t correct = 0;
    for (const Batch& b : batches(data, batch_size)) {
        const auto pred = predictions(forward(weights, b, act, integer_weights).logits);
        for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

double evaluate_trm(const ModelWeights& student, ActScheme student_act, const ModelWeights& teacher,
                    const Dataset& data, std::size_t batch_size) {
    if (data.empty()) throw std::invalid_argument("evaluate_trm: dataset is empty");
    double total = 0.0;
    std::size_t n = 0;
    for (const Batch& b : batches(data, batch_size)) {
        total += loss_trm(forward(student, b, student_act), forward(teacher, b)) * static_cast<double>(b.batch);
        n += b.batch;
    }
    return total / static_cast<double>(n);
}

}  // namespace ternq
