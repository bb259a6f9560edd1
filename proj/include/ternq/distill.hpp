#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ternq/data.hpp"
#include "ternq/model.hpp"
#include "ternq/plan.hpp"

namespace ternq {

/// A loss or intermediate tensor became NaN/Inf; `tensor()` names the first offender.
class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& tensor, const std::string& what) : std::runtime_error(what), tensor_(tensor) {}
    const std::string& tensor() const noexcept { return tensor_; }

private:
    std::string tensor_;
};

struct DistillLossConfig {
    bool use_trm_loss = true;
    bool use_logits_loss = true;
    double temperature = 1.0;
    /// Distill post-softmax probabilities instead of raw scores.
    bool attention_probs = false;

    /// With both losses off the objective is cross-entropy against the labels.
    bool ground_truth_only() const { return !use_trm_loss && !use_logits_loss; }
};

enum class Ablation { none, no_trm, no_trm_no_logits };
Ablation parse_ablation(std::string_view name);
std::string_view to_string(Ablation a);

/// sum_l MSE(H_l^S, H_l^T) over every hidden state plus sum_l MSE(A_l^S, A_l^T) over layers.
double loss_trm(const ForwardTrace& student, const ForwardTrace& teacher, bool attention_probs = false);
/// -sum softmax(t) * log softmax(s), averaged over rows.
double loss_pred(const Tensor& student_logits, const Tensor& teacher_logits, double temperature = 1.0);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-6;
    double weight_decay = 0.01;
};

/// m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2; w <- w - lr (m / (sqrt(v) + eps) + wd w).
/// No bias correction; decay is skipped for exempt tensors.
class BertAdam {
public:
    BertAdam() = default;
    BertAdam(const AdamConfig& config, const std::vector<Shape>& shapes, std::vector<bool> decay);

    /// Returns the L2 norm of the applied update.
    double step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr);

    const std::vector<Tensor>& first_moments() const { return m_; }
    const std::vector<Tensor>& second_moments() const { return v_; }
    std::size_t steps() const { return t_; }
    const AdamConfig& config() const { return config_; }

private:
    AdamConfig config_;
    std::vector<bool> decay_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::size_t t_ = 0;
};

BertAdam make_optimizer(const ModelConfig& config, const AdamConfig& adam);

struct TrainConfig {
    QuantPlan plan = QuantPlan::parse("2-2-8");
    int stages = 2;
    std::size_t epochs = 1;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    Ablation ablation = Ablation::none;
    DistillLossConfig loss;
    AdamConfig adam;
    /// A metrics record is produced every `log_every` steps and after the last step.
    std::size_t log_every = 10;
    /// Receives the quantized student every `checkpoint_every` steps (0 disables).
    std::size_t checkpoint_every = 0;
    std::function<void(std::size_t step, const QuantizedModel&)> on_checkpoint;
};

struct TrainState {
    ModelWeights teacher;
    ModelWeights shadow;
    QuantPlan plan;
    BertAdam optimizer;
    std::size_t step = 0;
    std::size_t total_steps = 0;
    double base_lr = 0.0;
    std::mt19937_64 rng;

    /// lr at the current step: base_lr * (1 - step / total_steps).
    double current_lr() const;
};

TrainState make_train_state(const ModelWeights& teacher, const ModelWeights& student_init, const QuantPlan& plan,
                            const AdamConfig& adam, double lr, std::size_t total_steps, std::uint64_t seed);

struct StepRecord {
    std::optional<double> loss_trm;
    std::optional<double> loss_pred;
    double loss_total = 0.0;
    double lr = 0.0;
    double update_norm = 0.0;
};

/// One step: quantize the shadow weights (loss-aware methods read the optimizer's second
/// moment from the previous step), forward student and frozen teacher, backprop the loss to
/// the quantized weights and apply the update to the shadow copies. `plan` must equal the
/// state's plan; switching methods mid-run is rejected.
StepRecord train_step(TrainState& state, const Batch& batch, const DistillLossConfig& loss, const QuantPlan& plan);

struct MetricRecord {
    std::size_t step = 0;
    int stage = 1;
    std::optional<double> loss_trm;
    std::optional<double> loss_pred;
    double loss_total = 0.0;
    std::optional<double> eval_acc;
    double lr = 0.0;
    double update_norm = 0.0;
};

/// One JSON object per line; `seed` is echoed into every record.
std::string to_jsonl(const MetricRecord& r, std::uint64_t seed);

struct TrainResult {
    QuantizedModel student;
    ModelWeights shadow;
    std::vector<MetricRecord> history;
};

using MetricSink = std::function<void(const MetricRecord&)>;

/// Two-stage mode optimizes L_trm for the first half of the steps and L_trm + L_pred after;
/// single-stage uses L_trm + L_pred throughout. Ablations replace the loss and run one stage.
/// The learning rate decays linearly to 0 over all steps.
TrainResult run_training(const ModelWeights& teacher, const ModelWeights& student_init, const Dataset& train,
                         const Dataset* eval, const TrainConfig& config, const MetricSink& sink = {});
TrainResult run_training(const ModelWeights& teacher, const Dataset& train, const Dataset* eval,
                         const TrainConfig& config, const MetricSink& sink = {});

struct TeacherConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    float init_std = 0.02f;
    AdamConfig adam;
};

/// Full-precision training with cross-entropy.
ModelWeights train_teacher(const ModelConfig& config, const Dataset& train, const TeacherConfig& tc,
                           const MetricSink& sink = {});

/// Accuracy over the dataset in batches of `batch_size`; dropout off. Throws on an empty dataset.
double evaluate(const ModelWeights& weights, const Dataset& data, ActScheme act = ActScheme::none,
                const std::vector<std::optional<QuantTensor>>* integer_weights = nullptr,
                std::size_t batch_size = 64);

/// Mean L_trm between student and teacher over the dataset (eval mode).
double evaluate_trm(const ModelWeights& student, ActScheme student_act, const ModelWeights& teacher,
                    const Dataset& data, std::size_t batch_size = 64);

}  // namespace ternq
