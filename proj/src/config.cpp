#include "ternq/config.hpp"

#include <stdexcept>

namespace ternq {

void ModelConfig::validate() const {
    if (hidden == 0 || heads == 0 || ffn == 0 || vocab == 0 || segments == 0 || max_positions == 0 || classes == 0) {
        throw ContractError("model config: all sizes must be positive");
    }
    if (hidden % heads != 0) throw ContractError("model config: hidden size must be divisible by head count");
    if (dropout < 0.0f || dropout >= 1.0f) throw ContractError("model config: dropout must lie in [0, 1)");
}

ModelConfig ModelConfig::bert_base() {
    ModelConfig c;
    c.layers = 12;
    c.hidden = 768;
    c.heads = 12;
    c.ffn = 3072;
    c.vocab = 30522;
    c.segments = 2;
    c.max_positions = 512;
    c.classes = 2;
    return c;
}

std::string_view to_string(ParamRole role) {
    switch (role) {
        case ParamRole::word_embedding: return "word_embedding";
        case ParamRole::segment_embedding: return "segment_embedding";
        case ParamRole::position_embedding: return "position_embedding";
        case ParamRole::norm: return "norm";
        case ParamRole::transformer_weight: return "transformer_weight";
        case ParamRole::bias: return "bias";
        case ParamRole::head_weight: return "head_weight";
        case ParamRole::head_bias: return "head_bias";
    }
    return "?";
}

ParamRole parse_param_role(std::string_view name) {
    for (ParamRole r : {ParamRole::word_embedding, ParamRole::segment_embedding, ParamRole::position_embedding,
                        ParamRole::norm, ParamRole::transformer_weight, ParamRole::bias, ParamRole::head_weight,
                        ParamRole::head_bias}) {
        if (to_string(r) == name) return r;
    }
    throw std::invalid_argument("unknown parameter role '" + std::string(name) + "'");
}

std::vector<ParamSpec> param_layout(const ModelConfig& c) {
    const std::size_t d = c.hidden;
    std::vector<ParamSpec> out;
    out.reserve(kEmbeddingParamCount + c.layers * kLayerParamCount + 2);
    out.push_back({"embeddings.word", ParamRole::word_embedding, {c.vocab, d}});
    out.push_back({"embeddings.segment", ParamRole::segment_embedding, {c.segments, d}});
    out.push_back({"embeddings.position", ParamRole::position_embedding, {c.max_positions, d}});
    out.push_back({"embeddings.norm.gain", ParamRole::norm, {d}});
    out.push_back({"embeddings.norm.bias", ParamRole::norm, {d}});
    for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string p = "layer." + std::to_string(l) + ".";
        out.push_back({p + "attention.query.weight", ParamRole::transformer_weight, {d, d}});
        out.push_back({p + "attention.query.bias", ParamRole::bias, {d}});
        out.push_back({p + "attention.key.weight", ParamRole::transformer_weight, {d, d}});
        out.push_back({p + "attention.key.bias", ParamRole::bias, {d}});
        out.push_back({p + "attention.value.weight", ParamRole::transformer_weight, {d, d}});
        out.push_back({p + "attention.value.bias", ParamRole::bias, {d}});
        out.push_back({p + "attention.output.weight", ParamRole::transformer_weight, {d, d}});
        out.push_back({p + "attention.output.bias", ParamRole::bias, {d}});
        out.push_back({p + "attention.norm.gain", ParamRole::norm, {d}});
        out.push_back({p + "attention.norm.bias", ParamRole::norm, {d}});
        out.push_back({p + "ffn.intermediate.weight", ParamRole::transformer_weight, {c.ffn, d}});
        out.push_back({p + "ffn.intermediate.bias", ParamRole::bias, {c.ffn}});
        out.push_back({p + "ffn.output.weight", ParamRole::transformer_weight, {d, c.ffn}});
        out.push_back({p + "ffn.output.bias", ParamRole::bias, {d}});
        out.push_back({p + "ffn.norm.gain", ParamRole::norm, {d}});
        out.push_back({p + "ffn.norm.bias", ParamRole::norm, {d}});
    }
    out.push_back({"head.weight", ParamRole::head_weight, {c.classes, d}});
    out.push_back({"head.bias", ParamRole::head_bias, {c.classes}});
    return out;
}

bool is_decay_exempt(ParamRole role) {
    return role == ParamRole::bias || role == ParamRole::norm || role == ParamRole::head_bias;
}

}  // namespace ternq
