#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "ternq/autodiff.hpp"
#include "ternq/config.hpp"
#include "ternq/packed.hpp"
#include "ternq/plan.hpp"

namespace ternq {

/// Bad token/segment ids or an over-long sequence.
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Parameters in param_layout() order.
template <class T>
struct BasicModelWeights {
    ModelConfig config;
    std::vector<BasicTensor<T>> params;

    BasicTensor<T>& operator[](std::size_t i) { return params.at(i); }
    const BasicTensor<T>& operator[](std::size_t i) const { return params.at(i); }

    template <class U>
    BasicModelWeights<U> cast() const {
        BasicModelWeights<U> out{config, {}};
        for (const auto& p : params) out.params.push_back(p.template cast<U>());
        return out;
    }
    bool operator==(const BasicModelWeights&) const = default;
};

using ModelWeights = BasicModelWeights<float>;

/// Normal(0, init_std) matrices and embeddings, unit gains, zero biases.
ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed, float init_std = 0.02f);

/// Fixed-length batch, row-major [batch, seq].
struct Batch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<int> tokens;
    std::vector<int> segments;
    std::vector<int> labels;
};

struct ForwardOptions {
    ActScheme act = ActScheme::none;
    /// Dropout is active only when true and `rng` is set.
    bool train = false;
    std::mt19937_64* rng = nullptr;
    /// Optional integer kernels: quantized weights indexed like the parameters. When set and
    /// activations are quantized, linear layers with a quantized weight run through ternary_gemm.
    const std::vector<std::optional<QuantTensor>>* integer_weights = nullptr;
};

/// Values recorded on the tape. hidden[0] is the embedding output, hidden[l] the output of
/// layer l; scores[l] holds raw per-head Q K^T as [batch, heads, seq, seq].
struct TapeTrace {
    std::vector<Var> hidden;
    std::vector<Var> scores;
    std::vector<Var> probs;
    Var logits;
};

template <class T>
TapeTrace forward_on_tape(Tape<T>& tape, const std::vector<Var>& params, const ModelConfig& config,
                          const Batch& batch, const ForwardOptions& options);

extern template TapeTrace forward_on_tape(Tape<float>&, const std::vector<Var>&, const ModelConfig&, const Batch&,
                                          const ForwardOptions&);
extern template TapeTrace forward_on_tape(Tape<double>&, const std::vector<Var>&, const ModelConfig&, const Batch&,
                                          const ForwardOptions&);

struct ForwardTrace {
    std::vector<Tensor> hidden;
    std::vector<Tensor> scores;
    std::vector<Tensor> probs;
    Tensor logits;
};

/// Evaluation-mode forward (no dropout).
ForwardTrace forward(const ModelWeights& weights, const Batch& batch, ActScheme act = ActScheme::none,
                     const std::vector<std::optional<QuantTensor>>* integer_weights = nullptr);

/// Raw per-head scores (H W_Q^T + b_Q)(H W_K^T + b_K)^T of one layer, [batch, heads, seq, seq].
Tensor attention_scores(const Tensor& hidden, const ModelWeights& weights, std::size_t layer, std::size_t batch);

/// Quantized view of a model: codes for every tensor the plan targets, and the weights the
/// forward pass actually uses (dequantized codes or the full-precision tensor).
struct QuantizedModel {
    QuantPlan plan;
    std::vector<std::optional<QuantTensor>> quant;
    ModelWeights effective;
};

/// `second_moments`, when given, is indexed like the parameters and feeds the loss-aware methods.
QuantizedModel quantize_model(const ModelWeights& weights, const QuantPlan& plan,
                              const std::vector<Tensor>* second_moments = nullptr);

/// Stores quantized tensors as codes and everything else in fp32.
ModelFile to_model_file(const QuantizedModel& model);
ModelFile to_model_file(const ModelWeights& weights);
/// Dense weights as used by the forward pass.
ModelWeights weights_from_file(const ModelFile& file);
/// Quantized tensors of a file, indexed like the parameters.
std::vector<std::optional<QuantTensor>> quant_from_file(const ModelFile& file);
/// Activation scheme recorded in the file metadata ("none" when absent).
ActScheme act_scheme_of(const ModelFile& file);

std::vector<int> predictions(const Tensor& logits);

}  // namespace ternq
