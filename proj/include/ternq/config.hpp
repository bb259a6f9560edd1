#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "ternq/tensor.hpp"

namespace ternq {

/// Scaling applied to raw attention scores before the softmax.
enum class AttentionScale {
    hidden,  ///< 1/sqrt(d)
    head,    ///< 1/sqrt(d / heads)
};

struct ModelConfig {
    std::size_t layers = 2;
    std::size_t hidden = 32;
    std::size_t heads = 2;
    std::size_t ffn = 128;
    std::size_t vocab = 32;
    std::size_t segments = 2;
    std::size_t max_positions = 64;
    std::size_t classes = 4;
    AttentionScale attention_scale = AttentionScale::hidden;
    float dropout = 0.1f;

    std::size_t head_dim() const { return hidden / heads; }
    void validate() const;

    /// 12 layers, d = 768, 12 heads, d_ff = 3072, 30522 tokens, 2 segments, 512 positions.
    static ModelConfig bert_base();

    bool operator==(const ModelConfig&) const = default;
};

enum class ParamRole {
    word_embedding,
    segment_embedding,
    position_embedding,
    norm,
    transformer_weight,
    bias,
    head_weight,
    head_bias,
};

std::string_view to_string(ParamRole role);
ParamRole parse_param_role(std::string_view name);

struct ParamSpec {
    std::string name;
    ParamRole role;
    Shape shape;
};

/// Per-layer parameter slots, in storage order.
enum class LayerSlot : std::size_t {
    query_w, query_b, key_w, key_b, value_w, value_b, attn_out_w, attn_out_b,
    attn_norm_gain, attn_norm_bias, ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b, ffn_norm_gain, ffn_norm_bias,
};

inline constexpr std::size_t kEmbeddingParamCount = 5;
inline constexpr std::size_t kLayerParamCount = 16;

inline std::size_t layer_param_index(std::size_t layer, LayerSlot slot) {
    return kEmbeddingParamCount + layer * kLayerParamCount + static_cast<std::size_t>(slot);
}
inline std::size_t head_weight_index(const ModelConfig& c) { return kEmbeddingParamCount + c.layers * kLayerParamCount; }
inline std::size_t head_bias_index(const ModelConfig& c) { return head_weight_index(c) + 1; }

/// Canonical parameter list. Linear weights use the [out, in] layout, so a "row" of a
/// weight matrix belongs to one output unit.
std::vector<ParamSpec> param_layout(const ModelConfig& config);

/// Weight decay is skipped for these roles.
bool is_decay_exempt(ParamRole role);

}  // namespace ternq
