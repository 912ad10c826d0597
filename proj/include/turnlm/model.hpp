#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "turnlm/assembly.hpp"

namespace turnlm {

class KeyValueConfig;

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t embed_dim = 64;
    std::size_t num_layers = 2;
    std::size_t num_heads = 4;
    std::size_t ffn_dim = 256;
    std::size_t max_positions = 256;
    double dropout = 0.1;
    bool lora_enabled = false;
    std::size_t lora_rank = 32;
    double lora_alpha = 0.7;
    // false removes the W_t term: the type table stays zero and frozen.
    bool token_types = true;

    /// d=64, 2 layers, 4 heads, ffn 256, 256 positions, LoRA rank 4.
    static ModelConfig desk_preset(std::size_t vocab_size);

    std::size_t head_dim() const { return embed_dim / num_heads; }
    /// LoRA output multiplier; alpha is applied directly, not alpha / rank.
    double lora_scaling() const { return lora_alpha; }
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

/// Desk preset overridden by embed_dim, num_layers, num_heads, ffn_dim,
/// max_positions, dropout, token_types, lora.enabled, lora.rank, lora.alpha.
ModelConfig model_config_from(const KeyValueConfig& kv, std::size_t vocab_size);

struct EmbeddingTables {
    Matrix word;      // K x d, also the tied output projection
    Matrix type;      // 2 x d
    Matrix position;  // max_positions x d
};

/// Low-rank update: y += scaling * B (A x).
struct LoraAdapter {
    Matrix a;  // r x d_in
    Matrix b;  // d_out x r
    double scaling = 0.7;
};

struct LayerNormParams {
    Matrix gain;  // 1 x d
    Matrix bias;  // 1 x d
};

/// Pre-norm block. Projection weights are stored d_out x d_in.
struct DecoderLayer {
    LayerNormParams norm1;
    Matrix query, key, value, output;
    std::optional<LoraAdapter> query_lora;
    std::optional<LoraAdapter> value_lora;
    LayerNormParams norm2;
    Matrix ffn_in;        // ffn x d
    Matrix ffn_in_bias;   // 1 x ffn
    Matrix ffn_out;       // d x ffn
    Matrix ffn_out_bias;  // 1 x d
};

struct ModelParameters {
    ModelConfig config;
    EmbeddingTables embeddings;
    std::vector<DecoderLayer> layers;
    LayerNormParams final_norm;
};

/// Same layout as ModelParameters. Tensors that are frozen under the
/// config's training policy are left empty (0 x 0) and never written.
using Gradients = ModelParameters;

enum class TensorKind { WordEmbedding, TypeEmbedding, PositionEmbedding, NormGain, NormBias, Weight, Bias, LoraA, LoraB };

bool is_trainable(TensorKind kind, const ModelConfig& config);
/// AdamW decoupled decay applies to weights, word embeddings and adapters.
bool is_decayed(TensorKind kind);

/// Visits every tensor in a fixed order with a stable dotted name.
template <class Params, class Fn>
void for_each_tensor(Params& p, Fn&& fn) {
    fn(std::string("embed.word"), p.embeddings.word, TensorKind::WordEmbedding);
    fn(std::string("embed.type"), p.embeddings.type, TensorKind::TypeEmbedding);
    fn(std::string("embed.position"), p.embeddings.position, TensorKind::PositionEmbedding);
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        auto& l = p.layers[i];
        const std::string prefix = "layers." + std::to_string(i) + ".";
        fn(prefix + "norm1.gain", l.norm1.gain, TensorKind::NormGain);
        fn(prefix + "norm1.bias", l.norm1.bias, TensorKind::NormBias);
        fn(prefix + "attn.query", l.query, TensorKind::Weight);
        fn(prefix + "attn.key", l.key, TensorKind::Weight);
        fn(prefix + "attn.value", l.value, TensorKind::Weight);
        fn(prefix + "attn.output", l.output, TensorKind::Weight);
        if (l.query_lora) {
            fn(prefix + "attn.query.lora_a", l.query_lora->a, TensorKind::LoraA);
            fn(prefix + "attn.query.lora_b", l.query_lora->b, TensorKind::LoraB);
        }
        if (l.value_lora) {
            fn(prefix + "attn.value.lora_a", l.value_lora->a, TensorKind::LoraA);
            fn(prefix + "attn.value.lora_b", l.value_lora->b, TensorKind::LoraB);
        }
        fn(prefix + "norm2.gain", l.norm2.gain, TensorKind::NormGain);
        fn(prefix + "norm2.bias", l.norm2.bias, TensorKind::NormBias);
        fn(prefix + "ffn.in", l.ffn_in, TensorKind::Weight);
        fn(prefix + "ffn.in_bias", l.ffn_in_bias, TensorKind::Bias);
        fn(prefix + "ffn.out", l.ffn_out, TensorKind::Weight);
        fn(prefix + "ffn.out_bias", l.ffn_out_bias, TensorKind::Bias);
    }
    fn(std::string("final_norm.gain"), p.final_norm.gain, TensorKind::NormGain);
    fn(std::string("final_norm.bias"), p.final_norm.bias, TensorKind::NormBias);
}

struct InitOptions {
    double std = 0.02;
    /// Start W_t at zero instead of normal noise (ablation arms).
    bool zero_type_embeddings = false;
};

/// Normal(0, std) weights, unit gains, zero biases, LoRA A ~ N(0, 1/d_in)
/// and B = 0. Each tensor draws from its own stream keyed by (seed, name).
ModelParameters init_parameters(const ModelConfig& config, std::uint64_t seed, const InitOptions& opts = {});

/// Adds zero-initialized query/value adapters to every layer and switches
/// the config to fine-tuning mode (base projections frozen).
void attach_lora(ModelParameters& params, std::size_t rank, double alpha, std::uint64_t seed);

/// Folds every adapter into its base weight. ContractError when no adapter exists.
ModelParameters merge_lora(const ModelParameters& params);

Gradients zero_gradients(const ModelParameters& params);
std::size_t parameter_count(const ModelParameters& params);

/// base * x + scaling * B (A x)
Vector lora_project(const Matrix& base, const LoraAdapter& adapter, const Vector& x);

/// Row i = W_x[ids_i] + W_t[types_i] + W_p[positions_i].
Matrix embed(const EmbeddingTables& tables, std::span<const TokenId> ids, std::span<const std::uint8_t> types,
             std::span<const std::int32_t> positions);

struct ForwardOptions {
    bool train = false;
    std::uint64_t dropout_seed = 0;
    /// Rows at or beyond valid_length are padding: never attended to. 0 = all rows valid.
    std::size_t valid_length = 0;
};

struct NormCache {
    Matrix xhat;
    Vector rstd;
};

struct LayerCache {
    Matrix input;
    NormCache norm1;
    Matrix h1;
    Matrix query_low, value_low;  // h1 A^T for adapted projections
    Matrix q, k, v;
    std::vector<Matrix> probs;       // per head, L x L, zero where masked
    std::vector<Matrix> attn_drop;   // per head dropout scale (empty in eval)
    Matrix context;
    Matrix mid;
    NormCache norm2;
    Matrix h2;
    Matrix pre_act;
    Matrix act;
    Matrix ffn_drop;
};

struct ForwardCache {
    bool ready = false;
    bool has_tokens = false;
    std::vector<TokenId> ids;
    std::vector<std::uint8_t> types;
    std::vector<std::int32_t> positions;
    std::size_t valid_length = 0;
    Matrix embed_drop;
    std::vector<LayerCache> layers;
    NormCache final_norm;
    Matrix final_out;
};

/// Causal decoder over an embedded sequence, logits L x K. Throws
/// NumericError naming the layer when a non-finite value appears.
Matrix forward(const ModelParameters& params, const Matrix& embedded, const ForwardOptions& opts = {},
               ForwardCache* cache = nullptr);

/// Embeds token/type/position vectors and runs forward.
Matrix forward(const ModelParameters& params, std::span<const TokenId> ids, std::span<const std::uint8_t> types,
               std::span<const std::int32_t> positions, const ForwardOptions& opts = {}, ForwardCache* cache = nullptr);

Matrix forward(const ModelParameters& params, const AssembledSequence& seq, const ForwardOptions& opts = {},
               ForwardCache* cache = nullptr);

/// Accumulates dLoss/dparams into grads and returns dLoss/dE. Embedding
/// tables receive gradient only when the cache came from a token forward.
Matrix backward(const ModelParameters& params, const ForwardCache& cache, const Matrix& dlogits, Gradients& grads);

}  // namespace turnlm
