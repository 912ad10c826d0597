#include "turnlm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

#include "turnlm/errors.hpp"
#include "turnlm/keyvalue.hpp"

namespace turnlm {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

// ---------------------------------------------------------------------------
// Loss

Matrix row_softmax(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double peak = logits.row(i).maxCoeff();
        out.row(i) = (logits.row(i).array() - peak).exp();
        out.row(i) /= out.row(i).sum();
    }
    return out;
}

LossResult masked_cross_entropy(const Matrix& logits, std::span<const TokenId> targets,
                                std::span<const std::uint8_t> mask, Matrix* dlogits, double grad_scale) {
    const auto L = static_cast<std::size_t>(logits.rows());
    if (targets.size() != L || mask.size() != L)
        throw ContractError("masked_cross_entropy: targets and mask must have one entry per logit row");
    const std::size_t count = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
    if (count == 0) throw ContractError("masked_cross_entropy: mask selects no target token");
    if (dlogits) dlogits->setZero(logits.rows(), logits.cols());

    double total = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
        if (!mask[i]) continue;
        const auto row = static_cast<Eigen::Index>(i);
        const auto target = targets[i];
        if (target < 0 || target >= logits.cols()) throw std::out_of_range("masked_cross_entropy: target id out of range");
        const double peak = logits.row(row).maxCoeff();
        const double log_z = peak + std::log((logits.row(row).array() - peak).exp().sum());
        total += log_z - logits(row, target);
        if (dlogits) {
            auto g = dlogits->row(row);
            g = (logits.row(row).array() - log_z).exp();
            g(target) -= 1.0;
            g *= grad_scale / static_cast<double>(count);
        }
    }
    return {total / static_cast<double>(count), count};
}

double batch_loss(std::span<const double> losses) {
    if (losses.empty()) throw ContractError("batch_loss: empty batch");
    return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

std::size_t Schedule::warmup_steps() const {
    return static_cast<std::size_t>(std::llround(warmup_fraction * static_cast<double>(total_steps)));
}

double Schedule::lr_at(std::size_t step) const {
    step = std::min(step, total_steps);
    const std::size_t warmup = std::min(warmup_steps(), total_steps);
    if (step <= warmup && warmup > 0) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
    if (total_steps == warmup) return base_lr;
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_update(Matrix& param, const Matrix& grad, Matrix& m, Matrix& v, std::size_t step, double lr,
                  const AdamWConfig& c, bool decay) {
    if (decay && c.weight_decay != 0.0) param *= 1.0 - lr * c.weight_decay;
    m = c.beta1 * m + (1.0 - c.beta1) * grad;
    v = c.beta2 * v + (1.0 - c.beta2) * grad.cwiseAbs2();
    const double t = static_cast<double>(step);
    const double correct1 = 1.0 - std::pow(c.beta1, t);
    const double correct2 = 1.0 - std::pow(c.beta2, t);
    param.array() -= lr * (m.array() / correct1) / ((v.array() / correct2).sqrt() + c.epsilon);
}

AdamW::AdamW(const ModelParameters& params, AdamWConfig config) : config_(config) {
    for_each_tensor(params, [&](const std::string&, const Matrix& p, TensorKind) {
        first_.push_back(Matrix::Zero(p.rows(), p.cols()));
        second_.push_back(Matrix::Zero(p.rows(), p.cols()));
    });
}

void AdamW::step(ModelParameters& params, const Gradients& grads, double lr) {
    std::vector<const Matrix*> g;
    for_each_tensor(grads, [&](const std::string& name, const Matrix& m, TensorKind) {
        if (m.size() != 0 && !m.allFinite()) throw NumericError("non-finite gradient for " + name);
        g.push_back(&m);
    });
    if (g.size() != first_.size()) throw ContractError("AdamW: gradient layout differs from parameters");

    ++steps_;
    std::size_t k = 0;
    for_each_tensor(params, [&](const std::string&, Matrix& p, TensorKind kind) {
        const Matrix& grad = *g[k];
        if (grad.size() != 0) adamw_update(p, grad, first_[k], second_[k], steps_, lr, config_, is_decayed(kind));
        ++k;
    });
}

double clip_global_norm(Gradients& grads, double max_norm) {
    double sq = 0.0;
    for_each_tensor(grads, [&](const std::string&, const Matrix& m, TensorKind) { sq += m.squaredNorm(); });
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for_each_tensor(grads, [&](const std::string&, Matrix& m, TensorKind) { m *= s; });
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Batching

Batch make_batch(std::span<const TrainingInstance> instances, std::size_t pad_to) {
    Batch b;
    for (const auto& inst : instances) b.max_len = std::max(b.max_len, inst.input.size());
    b.max_len = std::max(b.max_len, pad_to);
    for (const auto& inst : instances) {
        const std::size_t n = inst.input.size();
        const std::size_t pad = b.max_len - n;
        auto& ids = b.ids.emplace_back(inst.input.token_ids);
        ids.insert(ids.end(), pad, Vocabulary::kPad);
        auto& types = b.types.emplace_back(inst.input.token_types);
        types.insert(types.end(), pad, 0);
        auto& pos = b.positions.emplace_back(inst.input.positions);
        pos.insert(pos.end(), pad, 0);
        auto& mask = b.loss_mask.emplace_back(inst.loss_mask);
        mask.insert(mask.end(), pad, 0);
        auto& valid = b.validity.emplace_back(n, 1);
        valid.insert(valid.end(), pad, 0);
        b.lengths.push_back(n);
    }
    return b;
}

LossResult row_loss(const ModelParameters& params, const Batch& batch, std::size_t row, const ForwardOptions& opts,
                    Gradients* grads, double grad_scale) {
    ForwardOptions row_opts = opts;
    row_opts.valid_length = batch.lengths[row];
    const auto& ids = batch.ids[row];
    std::vector<TokenId> targets(ids.size(), Vocabulary::kPad);
    for (std::size_t i = 0; i + 1 < batch.lengths[row]; ++i) targets[i] = ids[i + 1];

    ForwardCache cache;
    const Matrix logits = forward(params, ids, batch.types[row], batch.positions[row], row_opts, grads ? &cache : nullptr);
    if (!grads) return masked_cross_entropy(logits, targets, batch.loss_mask[row]);
    Matrix dlogits;
    const auto result = masked_cross_entropy(logits, targets, batch.loss_mask[row], &dlogits, grad_scale);
    backward(params, cache, dlogits, *grads);
    return result;
}

double batch_loss_and_gradients(const ModelParameters& params, const Batch& batch, bool train,
                                std::uint64_t dropout_seed, Gradients* grads) {
    if (batch.size() == 0) throw ContractError("empty batch");
    std::vector<double> losses;
    losses.reserve(batch.size());
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (std::size_t r = 0; r < batch.size(); ++r) {
        ForwardOptions opts;
        opts.train = train;
        opts.dropout_seed = mix(dropout_seed, r);
        losses.push_back(row_loss(params, batch, r, opts, grads, scale).loss);
    }
    return batch_loss(losses);
}

// ---------------------------------------------------------------------------
// Training loop

TrainConfig train_config_from(const KeyValueConfig& kv) {
    TrainConfig c;
    c.epochs = static_cast<std::size_t>(kv.get_int("epochs", static_cast<long long>(c.epochs)));
    c.batch_size = static_cast<std::size_t>(kv.get_int("batch_size", static_cast<long long>(c.batch_size)));
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));
    c.base_lr = kv.get_double("base_lr", c.base_lr);
    c.warmup_fraction = kv.get_double("warmup_fraction", c.warmup_fraction);
    c.max_len = static_cast<std::size_t>(kv.get_int("max_len", 0));
    c.max_steps = static_cast<std::size_t>(kv.get_int("max_steps", 0));
    c.clip_norm = kv.get_double("clip_norm", c.clip_norm);
    c.adamw.weight_decay = kv.get_double("weight_decay", c.adamw.weight_decay);
    c.adamw.beta1 = kv.get_double("beta1", c.adamw.beta1);
    c.adamw.beta2 = kv.get_double("beta2", c.adamw.beta2);
    c.adamw.epsilon = kv.get_double("adam_epsilon", c.adamw.epsilon);
    if (c.batch_size == 0) throw ContractError("batch_size must be positive");
    if (!(c.warmup_fraction > 0.0 && c.warmup_fraction < 1.0))
        throw ContractError("warmup_fraction must lie in (0, 1)");
    return c;
}

std::string StepRecord::to_json() const { return nlohmann::json{{"step", step}, {"lr", lr}, {"loss", loss}}.dump(); }

std::string EpochRecord::to_json() const {
    return nlohmann::json{{"epoch", epoch},
                          {"train_loss", train_loss},
                          {"validation_loss", optional_json(validation_loss)},
                          {"validation_perplexity", optional_json(validation_perplexity)}}
        .dump();
}

std::vector<TrainingInstance> instances_for(std::span<const Conversation> convs, const Vocabulary& vocab,
                                            std::size_t max_len) {
    std::vector<TrainingInstance> out;
    for (const auto& conv : convs)
        for (auto& inst : make_training_instances(conv, vocab, max_len)) out.push_back(std::move(inst));
    return out;
}

double EvalLoss::perplexity() const { return std::exp(token_mean); }

EvalLoss evaluate_loss(const ModelParameters& params, std::span<const TrainingInstance> instances) {
    EvalLoss r;
    double weighted = 0.0;
    double plain = 0.0;
    for (const auto& inst : instances) {
        const Matrix logits = forward(params, inst.input);
        const auto res = masked_cross_entropy(logits, inst.next_token_targets(), inst.loss_mask);
        weighted += res.loss * static_cast<double>(res.count);
        plain += res.loss;
        r.tokens += res.count;
        ++r.instances;
    }
    if (r.instances == 0) throw ContractError("evaluate_loss: no instances");
    r.instance_mean = plain / static_cast<double>(r.instances);
    r.token_mean = weighted / static_cast<double>(r.tokens);
    return r;
}

double evaluate_perplexity(const ModelParameters& params, std::span<const Conversation> convs, const Vocabulary& vocab,
                           std::size_t max_len) {
    const auto instances = instances_for(convs, vocab, max_len == 0 ? params.config.max_positions : max_len);
    if (instances.empty()) throw ContractError("evaluate_perplexity: no training instance derivable");
    return evaluate_loss(params, instances).perplexity();
}

TrainReport train(ModelParameters& params, std::span<const Conversation> train_convs,
                  std::span<const Conversation> validation_convs, const Vocabulary& vocab, const TrainConfig& config,
                  const TrainCallbacks& callbacks) {
    const auto started = std::chrono::steady_clock::now();
    const std::size_t max_len = config.max_len == 0 ? params.config.max_positions
                                                    : std::min(config.max_len, params.config.max_positions);
    const auto instances = instances_for(train_convs, vocab, max_len);
    if (instances.empty()) throw ContractError("train: training split yields no instances");
    const auto validation = instances_for(validation_convs, vocab, max_len);
    if (config.batch_size == 0) throw ContractError("train: batch_size must be positive");

    const std::size_t batches_per_epoch = (instances.size() + config.batch_size - 1) / config.batch_size;
    std::size_t total_steps = config.epochs * batches_per_epoch;
    if (config.max_steps > 0) total_steps = std::min(total_steps, config.max_steps);
    const Schedule schedule{config.base_lr, config.warmup_fraction, std::max<std::size_t>(total_steps, 1)};

    TrainReport report;
    report.seed = config.seed;
    AdamW optimizer(params, config.adamw);
    std::mt19937_64 shuffle_rng(mix(config.seed, 0x5348554646ULL));
    std::vector<std::size_t> order(instances.size());
    std::iota(order.begin(), order.end(), 0);

    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= config.epochs && step < total_steps; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_loss = 0.0;
        std::size_t epoch_steps = 0;
        for (std::size_t begin = 0; begin < order.size() && step < total_steps; begin += config.batch_size) {
            const std::size_t end = std::min(order.size(), begin + config.batch_size);
            std::vector<TrainingInstance> chunk;
            std::uint64_t fingerprint = 1469598103934665603ULL;
            for (std::size_t k = begin; k < end; ++k) {
                chunk.push_back(instances[order[k]]);
                fingerprint = mix(fingerprint, order[k]);
            }
            const Batch batch = make_batch(chunk);

            ++step;
            Gradients grads = zero_gradients(params);
            double loss = 0.0;
            try {
                loss = batch_loss_and_gradients(params, batch, true, mix(config.seed, step), &grads);
            } catch (const NumericError& e) {
                throw NumericError("step " + std::to_string(step) + " batch " + std::to_string(fingerprint) + ": " + e.what());
            }
            if (!std::isfinite(loss))
                throw NumericError("non-finite loss at step " + std::to_string(step) + " batch " + std::to_string(fingerprint));
            clip_global_norm(grads, config.clip_norm);
            const double lr = schedule.lr_at(step);
            optimizer.step(params, grads, lr);

            StepRecord rec{step, lr, loss};
            if (callbacks.on_step) callbacks.on_step(rec);
            report.steps.push_back(rec);
            epoch_loss += loss;
            ++epoch_steps;
        }

        EpochRecord er;
        er.epoch = epoch;
        er.train_loss = epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0;
        if (!validation.empty()) {
            const auto ev = evaluate_loss(params, validation);
            er.validation_loss = ev.instance_mean;
            er.validation_perplexity = ev.perplexity();
        }
        if (callbacks.on_epoch) callbacks.on_epoch(er);
        report.epochs.push_back(er);
    }
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return report;
}

}  // namespace turnlm
