#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "turnlm/assembly.hpp"
#include "turnlm/model.hpp"

namespace turnlm {

class KeyValueConfig;

// ---------------------------------------------------------------------------
// Loss

struct LossResult {
    double loss = 0.0;       // mean negative log-likelihood over masked positions
    std::size_t count = 0;   // number of masked positions
};

/// Row-wise softmax with max subtraction.
Matrix row_softmax(const Matrix& logits);

/// Cross-entropy averaged over positions with mask == 1. When dlogits is
/// given it receives grad_scale * dLoss/dlogits (rows with mask 0 are zero).
/// ContractError if the mask selects nothing.
LossResult masked_cross_entropy(const Matrix& logits, std::span<const TokenId> targets,
                                std::span<const std::uint8_t> mask, Matrix* dlogits = nullptr,
                                double grad_scale = 1.0);

/// Arithmetic mean of per-instance losses. ContractError when empty.
double batch_loss(std::span<const double> losses);

// ---------------------------------------------------------------------------
// Schedule and optimizer

/// Linear warmup from 0 to base_lr over round(warmup_fraction * total_steps)
/// steps, then cosine decay to 0 at total_steps.
struct Schedule {
    double base_lr = 2e-5;
    double warmup_fraction = 0.1;
    std::size_t total_steps = 1;

    std::size_t warmup_steps() const;
    /// Steps past total_steps are clamped to the final value.
    double lr_at(std::size_t step) const;
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
};

/// One bias-corrected AdamW update of a single tensor; `step` is the
/// 1-based update count after incrementing.
void adamw_update(Matrix& param, const Matrix& grad, Matrix& first_moment, Matrix& second_moment, std::size_t step,
                  double lr, const AdamWConfig& config, bool decay);

class AdamW {
public:
    AdamW(const ModelParameters& params, AdamWConfig config);

    /// Updates every tensor whose gradient is non-empty. NumericError names
    /// the first tensor carrying a non-finite gradient; nothing is modified then.
    void step(ModelParameters& params, const Gradients& grads, double lr);

    std::size_t step_count() const noexcept { return steps_; }
    const AdamWConfig& config() const noexcept { return config_; }

private:
    AdamWConfig config_;
    std::vector<Matrix> first_;
    std::vector<Matrix> second_;
    std::size_t steps_ = 0;
};

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_global_norm(Gradients& grads, double max_norm);

// ---------------------------------------------------------------------------
// Batching

/// Instances right-padded to the longest row. Padding carries PAD ids,
/// type 0, position 0, mask 0 and validity 0.
struct Batch {
    std::vector<std::vector<TokenId>> ids;
    std::vector<std::vector<std::uint8_t>> types;
    std::vector<std::vector<std::int32_t>> positions;
    std::vector<std::vector<std::uint8_t>> loss_mask;
    std::vector<std::vector<std::uint8_t>> validity;
    std::vector<std::size_t> lengths;
    std::size_t max_len = 0;

    std::size_t size() const noexcept { return ids.size(); }
};

Batch make_batch(std::span<const TrainingInstance> instances, std::size_t pad_to = 0);

/// Teacher-forced loss of row r of a batch. With grads, accumulates
/// grad_scale * gradient of the row loss.
LossResult row_loss(const ModelParameters& params, const Batch& batch, std::size_t row, const ForwardOptions& opts,
                    Gradients* grads = nullptr, double grad_scale = 1.0);

/// Mean of per-row losses (the batch loss L), optionally accumulating its gradient.
double batch_loss_and_gradients(const ModelParameters& params, const Batch& batch, bool train,
                                std::uint64_t dropout_seed, Gradients* grads);

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    double base_lr = 2e-5;
    double warmup_fraction = 0.1;
    std::size_t max_len = 0;      // 0: model max_positions
    std::size_t max_steps = 0;    // 0: epochs * batches per epoch
    double clip_norm = 1.0;       // <= 0 disables clipping
    AdamWConfig adamw;
};

/// Reads epochs, batch_size, seed, base_lr, warmup_fraction, max_len,
/// max_steps, clip_norm, weight_decay, beta1, beta2, adam_epsilon.
TrainConfig train_config_from(const KeyValueConfig& kv);

struct StepRecord {
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;

    std::string to_json() const;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;  // mean of the epoch's step losses
    std::optional<double> validation_loss;        // instance mean, as the batch loss
    std::optional<double> validation_perplexity;  // token weighted

    std::string to_json() const;
};

struct TrainReport {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    double wall_seconds = 0.0;
    std::uint64_t seed = 0;
};

struct TrainCallbacks {
    std::function<void(const StepRecord&)> on_step;
    std::function<void(const EpochRecord&)> on_epoch;
};

/// Trains params in place. Deterministic given config.seed. NumericError on
/// a non-finite loss, naming the step and a fingerprint of the batch.
TrainReport train(ModelParameters& params, std::span<const Conversation> train_convs,
                  std::span<const Conversation> validation_convs, const Vocabulary& vocab, const TrainConfig& config,
                  const TrainCallbacks& callbacks = {});

struct EvalLoss {
    double instance_mean = 0.0;  // mean of per-instance L_n
    double token_mean = 0.0;     // sum T_n L_n / sum T_n
    std::size_t instances = 0;
    std::size_t tokens = 0;

    double perplexity() const;
};

EvalLoss evaluate_loss(const ModelParameters& params, std::span<const TrainingInstance> instances);

/// exp(token-weighted masked cross-entropy) over every instance of convs.
/// ContractError when no instance can be derived.
double evaluate_perplexity(const ModelParameters& params, std::span<const Conversation> convs, const Vocabulary& vocab,
                           std::size_t max_len = 0);

std::vector<TrainingInstance> instances_for(std::span<const Conversation> convs, const Vocabulary& vocab,
                                            std::size_t max_len);

}  // namespace turnlm
