#include "turnlm/model.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "turnlm/errors.hpp"
#include "turnlm/keyvalue.hpp"

namespace turnlm {

namespace {

constexpr double kNormEps = 1e-5;

std::uint32_t fnv1a(std::string_view s) {
    std::uint32_t h = 2166136261u;
    for (unsigned char c : s) {
        h ^= c;
        h *= 16777619u;
    }
    return h;
}

Matrix normal_matrix(std::size_t rows, std::size_t cols, double std, std::uint64_t seed, std::string_view name) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), fnv1a(name)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> dist(0.0, std);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = dist(rng);
    return m;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Inverted-dropout multipliers: 0 with probability rate, else 1/(1-rate).
// Each entry hashes its own (row, col) coordinate, so a mask does not
// depend on the matrix extent and trailing padding leaves real rows alone.
Matrix dropout_scale(Eigen::Index rows, Eigen::Index cols, double rate, std::uint64_t seed, std::uint32_t site,
                     std::uint32_t layer, std::uint32_t head) {
    const std::uint64_t stream =
        splitmix64(splitmix64(seed) ^ (std::uint64_t{site} << 48 | std::uint64_t{layer} << 24 | head));
    const double keep = 1.0 / (1.0 - rate);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) {
            const auto cell = static_cast<std::uint64_t>(i) << 32 | static_cast<std::uint64_t>(j);
            const double u = static_cast<double>(splitmix64(stream ^ splitmix64(cell)) >> 11) * 0x1.0p-53;
            m(i, j) = u < rate ? 0.0 : keep;
        }
    return m;
}

enum DropoutSite : std::uint32_t { kEmbedSite = 1, kAttnSite = 2, kFfnSite = 3 };

Matrix layer_norm(const Matrix& x, const LayerNormParams& p, NormCache& c) {
    const auto n = static_cast<double>(x.cols());
    c.xhat.resize(x.rows(), x.cols());
    c.rstd.resize(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double mean = x.row(i).sum() / n;
        const double var = (x.row(i).array() - mean).square().sum() / n;
        c.rstd(i) = 1.0 / std::sqrt(var + kNormEps);
        c.xhat.row(i) = (x.row(i).array() - mean) * c.rstd(i);
    }
    Matrix y = c.xhat.array().rowwise() * p.gain.row(0).array();
    y.rowwise() += p.bias.row(0);
    return y;
}

Matrix layer_norm_backward(const Matrix& dy, const NormCache& c, const LayerNormParams& p, LayerNormParams& g) {
    if (g.gain.size() != 0) g.gain.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    if (g.bias.size() != 0) g.bias.row(0) += dy.colwise().sum();
    const Matrix dxhat = dy.array().rowwise() * p.gain.row(0).array();
    const auto n = static_cast<double>(dy.cols());
    Matrix dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const double mean_d = dxhat.row(i).sum() / n;
        const double mean_dx = dxhat.row(i).dot(c.xhat.row(i)) / n;
        dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - mean_d - c.xhat.row(i).array() * mean_dx);
    }
    return dx;
}

double gelu(double u) { return 0.5 * u * (1.0 + std::erf(u * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double u) {
    const double cdf = 0.5 * (1.0 + std::erf(u * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * u * u) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
    return cdf + u * pdf;
}

// x W^T (+ scaling (x A^T) B^T), stashing x A^T for backward.
Matrix project(const Matrix& x, const Matrix& w, const std::optional<LoraAdapter>& lora, Matrix* low) {
    Matrix y = x * w.transpose();
    if (lora) {
        Matrix z = x * lora->a.transpose();
        y.noalias() += lora->scaling * (z * lora->b.transpose());
        if (low) *low = std::move(z);
    }
    return y;
}

// Backward of project(); returns dx.
Matrix project_backward(const Matrix& dy, const Matrix& x, const Matrix& w, const std::optional<LoraAdapter>& lora,
                        const Matrix& low, Matrix& dw, std::optional<LoraAdapter>& dlora) {
    if (dw.size() != 0) dw.noalias() += dy.transpose() * x;
    Matrix dx = dy * w;
    if (lora) {
        const Matrix dz = lora->scaling * (dy * lora->b);
        if (dlora && dlora->b.size() != 0) dlora->b.noalias() += lora->scaling * (dy.transpose() * low);
        if (dlora && dlora->a.size() != 0) dlora->a.noalias() += dz.transpose() * x;
        dx.noalias() += dz * lora->a;
    }
    return dx;
}

void check_finite(const Matrix& m, const std::string& where) {
    if (!m.allFinite()) throw NumericError("non-finite value in " + where);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration and parameters

ModelConfig ModelConfig::desk_preset(std::size_t vocab_size) {
    ModelConfig c;
    c.vocab_size = vocab_size;
    c.lora_rank = 4;
    return c;
}

void ModelConfig::validate() const {
    if (vocab_size < Vocabulary::kNumSpecials) throw ContractError("vocab_size must be at least 3");
    if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0)
        throw ContractError("embed_dim must be a positive multiple of num_heads");
    if (ffn_dim == 0 || max_positions == 0) throw ContractError("ffn_dim and max_positions must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("dropout must lie in [0, 1)");
    if (lora_enabled && lora_rank == 0) throw ContractError("lora_rank must be positive");
}

ModelConfig model_config_from(const KeyValueConfig& kv, std::size_t vocab_size) {
    ModelConfig c = ModelConfig::desk_preset(vocab_size);
    auto size = [&](const char* key, std::size_t fallback) {
        const auto v = kv.get_int(key, static_cast<long long>(fallback));
        if (v < 0) throw ContractError(std::string(key) + " must not be negative");
        return static_cast<std::size_t>(v);
    };
    c.embed_dim = size("embed_dim", c.embed_dim);
    c.num_layers = size("num_layers", c.num_layers);
    c.num_heads = size("num_heads", c.num_heads);
    c.ffn_dim = size("ffn_dim", c.ffn_dim);
    c.max_positions = size("max_positions", c.max_positions);
    c.dropout = kv.get_double("dropout", c.dropout);
    c.token_types = kv.get_bool("token_types", c.token_types);
    c.lora_enabled = kv.get_bool("lora.enabled", c.lora_enabled);
    c.lora_rank = size("lora.rank", c.lora_rank);
    c.lora_alpha = kv.get_double("lora.alpha", c.lora_alpha);
    c.validate();
    return c;
}

bool is_trainable(TensorKind kind, const ModelConfig& config) {
    switch (kind) {
        case TensorKind::TypeEmbedding:
            return config.token_types;
        case TensorKind::Weight:
        case TensorKind::Bias:
            return !config.lora_enabled;
        default:
            return true;
    }
}

bool is_decayed(TensorKind kind) {
    return kind == TensorKind::Weight || kind == TensorKind::WordEmbedding || kind == TensorKind::LoraA ||
           kind == TensorKind::LoraB;
}

ModelParameters init_parameters(const ModelConfig& config, std::uint64_t seed, const InitOptions& opts) {
    config.validate();
    const auto d = config.embed_dim;
    const auto f = config.ffn_dim;

    ModelParameters p;
    p.config = config;
    p.config.lora_enabled = false;
    p.embeddings.word = Matrix::Zero(config.vocab_size, d);
    p.embeddings.type = Matrix::Zero(2, d);
    p.embeddings.position = Matrix::Zero(config.max_positions, d);
    p.layers.resize(config.num_layers);
    for (auto& l : p.layers) {
        l.norm1 = {Matrix::Ones(1, d), Matrix::Zero(1, d)};
        l.norm2 = {Matrix::Ones(1, d), Matrix::Zero(1, d)};
        l.query = l.key = l.value = l.output = Matrix::Zero(d, d);
        l.ffn_in = Matrix::Zero(f, d);
        l.ffn_in_bias = Matrix::Zero(1, f);
        l.ffn_out = Matrix::Zero(d, f);
        l.ffn_out_bias = Matrix::Zero(1, d);
    }
    p.final_norm = {Matrix::Ones(1, d), Matrix::Zero(1, d)};

    for_each_tensor(p, [&](const std::string& name, Matrix& m, TensorKind kind) {
        const bool random = kind == TensorKind::WordEmbedding || kind == TensorKind::PositionEmbedding ||
                            kind == TensorKind::Weight ||
                            (kind == TensorKind::TypeEmbedding && config.token_types && !opts.zero_type_embeddings);
        if (random) m = normal_matrix(m.rows(), m.cols(), opts.std, seed, name);
    });

    if (config.lora_enabled) attach_lora(p, config.lora_rank, config.lora_alpha, seed);
    return p;
}

void attach_lora(ModelParameters& params, std::size_t rank, double alpha, std::uint64_t seed) {
    if (rank == 0) throw ContractError("attach_lora: rank must be positive");
    const auto d = params.config.embed_dim;
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        auto& l = params.layers[i];
        const std::string prefix = "layers." + std::to_string(i) + ".attn.";
        const double std = 1.0 / std::sqrt(static_cast<double>(d));
        l.query_lora = LoraAdapter{normal_matrix(rank, d, std, seed, prefix + "query.lora_a"), Matrix::Zero(d, rank), alpha};
        l.value_lora = LoraAdapter{normal_matrix(rank, d, std, seed, prefix + "value.lora_a"), Matrix::Zero(d, rank), alpha};
    }
    params.config.lora_enabled = true;
    params.config.lora_rank = rank;
    params.config.lora_alpha = alpha;
}

ModelParameters merge_lora(const ModelParameters& params) {
    bool any = false;
    ModelParameters merged = params;
    for (auto& l : merged.layers) {
        if (l.query_lora) {
            l.query.noalias() += l.query_lora->scaling * (l.query_lora->b * l.query_lora->a);
            l.query_lora.reset();
            any = true;
        }
        if (l.value_lora) {
            l.value.noalias() += l.value_lora->scaling * (l.value_lora->b * l.value_lora->a);
            l.value_lora.reset();
            any = true;
        }
    }
    if (!any) throw ContractError("merge_lora: model has no adapters");
    merged.config.lora_enabled = false;
    return merged;
}

Gradients zero_gradients(const ModelParameters& params) {
    Gradients g = params;
    for_each_tensor(g, [&](const std::string&, Matrix& m, TensorKind kind) {
        if (is_trainable(kind, params.config))
            m.setZero();
        else
            m.resize(0, 0);
    });
    return g;
}

std::size_t parameter_count(const ModelParameters& params) {
    std::size_t n = 0;
    for_each_tensor(params, [&](const std::string&, const Matrix& m, TensorKind) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

Vector lora_project(const Matrix& base, const LoraAdapter& adapter, const Vector& x) {
    if (base.cols() != x.size() || adapter.a.cols() != x.size() || adapter.b.rows() != base.rows() ||
        adapter.a.rows() != adapter.b.cols())
        throw ContractError("lora_project: inconsistent shapes");
    Vector y = base * x;
    if (adapter.scaling != 0.0) y.noalias() += adapter.scaling * (adapter.b * (adapter.a * x));
    return y;
}

// ---------------------------------------------------------------------------
// Forward

Matrix embed(const EmbeddingTables& tables, std::span<const TokenId> ids, std::span<const std::uint8_t> types,
             std::span<const std::int32_t> positions) {
    if (ids.size() != types.size() || ids.size() != positions.size())
        throw ContractError("embed: ids, types and positions differ in length");
    const auto n = static_cast<Eigen::Index>(ids.size());
    Matrix e(n, tables.word.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto id = ids[static_cast<std::size_t>(i)];
        const auto type = types[static_cast<std::size_t>(i)];
        const auto pos = positions[static_cast<std::size_t>(i)];
        if (id < 0 || id >= tables.word.rows())
            throw std::out_of_range("word embedding: id " + std::to_string(id) + " out of range");
        if (type >= tables.type.rows())
            throw std::out_of_range("type embedding: type " + std::to_string(type) + " out of range");
        if (pos < 0 || pos >= tables.position.rows())
            throw std::out_of_range("position embedding: position " + std::to_string(pos) + " out of range");
        e.row(i) = tables.word.row(id) + tables.type.row(type) + tables.position.row(pos);
    }
    return e;
}

Matrix forward(const ModelParameters& params, const Matrix& embedded, const ForwardOptions& opts, ForwardCache* cache) {
    const auto& cfg = params.config;
    const Eigen::Index L = embedded.rows();
    const Eigen::Index d = static_cast<Eigen::Index>(cfg.embed_dim);
    const Eigen::Index dh = static_cast<Eigen::Index>(cfg.head_dim());
    if (embedded.cols() != d) throw ContractError("forward: embedding width differs from embed_dim");
    if (static_cast<std::size_t>(L) > cfg.max_positions)
        throw CapacityError("forward: sequence of " + std::to_string(L) + " exceeds max_positions " +
                            std::to_string(cfg.max_positions));
    const Eigen::Index valid = opts.valid_length == 0 ? L : std::min<Eigen::Index>(L, static_cast<Eigen::Index>(opts.valid_length));
    const bool drop = opts.train && cfg.dropout > 0.0;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    c.ready = false;
    c.valid_length = static_cast<std::size_t>(valid);
    c.layers.assign(params.layers.size(), LayerCache{});

    Matrix x = embedded;
    check_finite(x, "embedding");
    if (drop) {
        c.embed_drop = dropout_scale(L, d, cfg.dropout, opts.dropout_seed, kEmbedSite, 0, 0);
        x.array() *= c.embed_drop.array();
    } else {
        c.embed_drop.resize(0, 0);
    }

    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        const auto& layer = params.layers[li];
        auto& lc = c.layers[li];
        lc.input = x;

        lc.h1 = layer_norm(x, layer.norm1, lc.norm1);
        lc.q = project(lc.h1, layer.query, layer.query_lora, &lc.query_low);
        lc.k = lc.h1 * layer.key.transpose();
        lc.v = project(lc.h1, layer.value, layer.value_lora, &lc.value_low);

        lc.context = Matrix::Zero(L, d);
        lc.probs.assign(cfg.num_heads, Matrix());
        lc.attn_drop.assign(cfg.num_heads, Matrix());
        for (std::size_t h = 0; h < cfg.num_heads; ++h) {
            const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
            const Matrix scores = (lc.q.middleCols(off, dh) * lc.k.middleCols(off, dh).transpose()) * scale;
            Matrix probs = Matrix::Zero(L, L);
            for (Eigen::Index i = 0; i < L; ++i) {
                const Eigen::Index last = std::min(i, valid - 1);
                const double peak = scores.row(i).head(last + 1).maxCoeff();
                double total = 0.0;
                for (Eigen::Index j = 0; j <= last; ++j) {
                    probs(i, j) = std::exp(scores(i, j) - peak);
                    total += probs(i, j);
                }
                probs.row(i).head(last + 1) /= total;
            }
            Matrix used = probs;
            if (drop) {
                lc.attn_drop[h] = dropout_scale(L, L, cfg.dropout, opts.dropout_seed, kAttnSite,
                                                static_cast<std::uint32_t>(li), static_cast<std::uint32_t>(h));
                used.array() *= lc.attn_drop[h].array();
            }
            lc.context.middleCols(off, dh) = used * lc.v.middleCols(off, dh);
            lc.probs[h] = std::move(probs);
        }
        lc.mid = x + lc.context * layer.output.transpose();

        lc.h2 = layer_norm(lc.mid, layer.norm2, lc.norm2);
        lc.pre_act = lc.h2 * layer.ffn_in.transpose();
        lc.pre_act.rowwise() += layer.ffn_in_bias.row(0);
        lc.act = lc.pre_act.unaryExpr([](double u) { return gelu(u); });
        Matrix ffn = lc.act * layer.ffn_out.transpose();
        ffn.rowwise() += layer.ffn_out_bias.row(0);
        if (drop) {
            lc.ffn_drop = dropout_scale(L, d, cfg.dropout, opts.dropout_seed, kFfnSite, static_cast<std::uint32_t>(li), 0);
            ffn.array() *= lc.ffn_drop.array();
        } else {
            lc.ffn_drop.resize(0, 0);
        }
        x = lc.mid + ffn;
        check_finite(x, "layer " + std::to_string(li));
    }

    c.final_out = layer_norm(x, params.final_norm, c.final_norm);
    Matrix logits = c.final_out * params.embeddings.word.transpose();
    check_finite(logits, "output projection");
    c.ready = true;
    return logits;
}

Matrix forward(const ModelParameters& params, std::span<const TokenId> ids, std::span<const std::uint8_t> types,
               std::span<const std::int32_t> positions, const ForwardOptions& opts, ForwardCache* cache) {
    const Matrix e = embed(params.embeddings, ids, types, positions);
    Matrix logits = forward(params, e, opts, cache);
    if (cache) {
        cache->has_tokens = true;
        cache->ids.assign(ids.begin(), ids.end());
        cache->types.assign(types.begin(), types.end());
        cache->positions.assign(positions.begin(), positions.end());
    }
    return logits;
}

Matrix forward(const ModelParameters& params, const AssembledSequence& seq, const ForwardOptions& opts,
               ForwardCache* cache) {
    return forward(params, seq.token_ids, seq.token_types, seq.positions, opts, cache);
}

// ---------------------------------------------------------------------------
// Backward

Matrix backward(const ModelParameters& params, const ForwardCache& c, const Matrix& dlogits, Gradients& g) {
    if (!c.ready) throw ContractError("backward: forward cache missing");
    const auto& cfg = params.config;
    const Eigen::Index L = dlogits.rows();
    const Eigen::Index dh = static_cast<Eigen::Index>(cfg.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    if (dlogits.cols() != params.embeddings.word.rows() || L != c.final_out.rows())
        throw ContractError("backward: dlogits shape mismatch");

    if (g.embeddings.word.size() != 0) g.embeddings.word.noalias() += dlogits.transpose() * c.final_out;
    Matrix dx = layer_norm_backward(dlogits * params.embeddings.word, c.final_norm, params.final_norm, g.final_norm);

    for (std::size_t li = params.layers.size(); li-- > 0;) {
        const auto& layer = params.layers[li];
        const auto& lc = c.layers[li];
        auto& gl = g.layers[li];

        // Feed-forward residual branch.
        Matrix dffn = dx;
        if (lc.ffn_drop.size() != 0) dffn.array() *= lc.ffn_drop.array();
        if (gl.ffn_out.size() != 0) gl.ffn_out.noalias() += dffn.transpose() * lc.act;
        if (gl.ffn_out_bias.size() != 0) gl.ffn_out_bias.row(0) += dffn.colwise().sum();
        Matrix dpre = (dffn * layer.ffn_out).array() * lc.pre_act.unaryExpr([](double u) { return gelu_grad(u); }).array();
        if (gl.ffn_in.size() != 0) gl.ffn_in.noalias() += dpre.transpose() * lc.h2;
        if (gl.ffn_in_bias.size() != 0) gl.ffn_in_bias.row(0) += dpre.colwise().sum();
        Matrix dmid = dx + layer_norm_backward(dpre * layer.ffn_in, lc.norm2, layer.norm2, gl.norm2);

        // Attention residual branch.
        if (gl.output.size() != 0) gl.output.noalias() += dmid.transpose() * lc.context;
        const Matrix dcontext = dmid * layer.output;
        Matrix dq = Matrix::Zero(L, static_cast<Eigen::Index>(cfg.embed_dim));
        Matrix dk = dq;
        Matrix dv = dq;
        for (std::size_t h = 0; h < cfg.num_heads; ++h) {
            const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
            const Matrix& probs = lc.probs[h];
            const bool dropped = lc.attn_drop[h].size() != 0;
            const auto dctx = dcontext.middleCols(off, dh);
            Matrix dprobs = dctx * lc.v.middleCols(off, dh).transpose();
            if (dropped) {
                const Matrix used = probs.array() * lc.attn_drop[h].array();
                dv.middleCols(off, dh) = used.transpose() * dctx;
                dprobs.array() *= lc.attn_drop[h].array();
            } else {
                dv.middleCols(off, dh) = probs.transpose() * dctx;
            }
            const Vector row_dot = (dprobs.array() * probs.array()).rowwise().sum();
            const Matrix dscores = (probs.array() * (dprobs.colwise() - row_dot).array()) * scale;
            dq.middleCols(off, dh) = dscores * lc.k.middleCols(off, dh);
            dk.middleCols(off, dh) = dscores.transpose() * lc.q.middleCols(off, dh);
        }
        Matrix dh1 = project_backward(dq, lc.h1, layer.query, layer.query_lora, lc.query_low, gl.query, gl.query_lora);
        std::optional<LoraAdapter> no_lora;
        dh1 += project_backward(dk, lc.h1, layer.key, no_lora, Matrix(), gl.key, no_lora);
        dh1 += project_backward(dv, lc.h1, layer.value, layer.value_lora, lc.value_low, gl.value, gl.value_lora);
        dx = dmid + layer_norm_backward(dh1, lc.norm1, layer.norm1, gl.norm1);
    }

    if (c.embed_drop.size() != 0) dx.array() *= c.embed_drop.array();

    if (c.has_tokens) {
        for (Eigen::Index i = 0; i < L; ++i) {
            const auto k = static_cast<std::size_t>(i);
            if (g.embeddings.word.size() != 0) g.embeddings.word.row(c.ids[k]) += dx.row(i);
            if (g.embeddings.type.size() != 0) g.embeddings.type.row(c.types[k]) += dx.row(i);
            if (g.embeddings.position.size() != 0) g.embeddings.position.row(c.positions[k]) += dx.row(i);
        }
    }
    return dx;
}

}  // namespace turnlm
