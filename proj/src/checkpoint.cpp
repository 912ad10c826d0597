#include "turnlm/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "turnlm/errors.hpp"
#include "turnlm/keyvalue.hpp"

namespace turnlm {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void put(std::string& out, T value) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(value);
        std::reverse(bytes.begin(), bytes.end());
        out.append(bytes.data(), bytes.size());
    } else {
        char bytes[sizeof(T)];
        std::memcpy(bytes, &value, sizeof(T));
        out.append(bytes, sizeof(T));
    }
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T value;
        if constexpr (std::endian::native == std::endian::big) {
            std::array<char, sizeof(T)> raw;
            std::memcpy(raw.data(), bytes_.data() + pos_, sizeof(T));
            std::reverse(raw.begin(), raw.end());
            value = std::bit_cast<T>(raw);
        } else {
            std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        }
        pos_ += sizeof(T);
        return value;
    }

    std::string_view take(std::size_t n) {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw ParseError("checkpoint truncated at byte " + std::to_string(pos_));
    }

    std::string_view bytes_;
    std::size_t pos_ = 0;
};

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string config_to_text(const ModelConfig& c) {
    std::ostringstream out;
    out << "vocab_size=" << c.vocab_size << '\n'
        << "embed_dim=" << c.embed_dim << '\n'
        << "num_layers=" << c.num_layers << '\n'
        << "num_heads=" << c.num_heads << '\n'
        << "ffn_dim=" << c.ffn_dim << '\n'
        << "max_positions=" << c.max_positions << '\n'
        << "dropout=" << format_double(c.dropout) << '\n'
        << "lora_enabled=" << (c.lora_enabled ? "true" : "false") << '\n'
        << "lora_rank=" << c.lora_rank << '\n'
        << "lora_alpha=" << format_double(c.lora_alpha) << '\n'
        << "token_types=" << (c.token_types ? "true" : "false") << '\n';
    return out.str();
}

ModelConfig config_from_text(std::string_view text) {
    const auto kv = KeyValueConfig::parse(text);
    for (const char* key : {"vocab_size", "embed_dim", "num_layers", "num_heads", "ffn_dim", "max_positions"})
        if (!kv.has(key)) throw ParseError(std::string("checkpoint config lacks '") + key + "'");
    ModelConfig c;
    c.vocab_size = static_cast<std::size_t>(kv.get_int("vocab_size", 0));
    c.embed_dim = static_cast<std::size_t>(kv.get_int("embed_dim", 0));
    c.num_layers = static_cast<std::size_t>(kv.get_int("num_layers", 0));
    c.num_heads = static_cast<std::size_t>(kv.get_int("num_heads", 0));
    c.ffn_dim = static_cast<std::size_t>(kv.get_int("ffn_dim", 0));
    c.max_positions = static_cast<std::size_t>(kv.get_int("max_positions", 0));
    c.dropout = kv.get_double("dropout", c.dropout);
    c.lora_enabled = kv.get_bool("lora_enabled", false);
    c.lora_rank = static_cast<std::size_t>(kv.get_int("lora_rank", static_cast<long long>(c.lora_rank)));
    c.lora_alpha = kv.get_double("lora_alpha", c.lora_alpha);
    c.token_types = kv.get_bool("token_types", true);
    c.validate();
    return c;
}

std::string serialize_checkpoint(const ModelParameters& params) {
    std::string out(kCheckpointMagic);
    put<std::uint32_t>(out, kCheckpointVersion);
    const std::string config = config_to_text(params.config);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(config.size()));
    out += config;

    std::uint32_t count = 0;
    for_each_tensor(params, [&](const std::string&, const Matrix&, TensorKind) { ++count; });
    put<std::uint32_t>(out, count);
    for_each_tensor(params, [&](const std::string& name, const Matrix& m, TensorKind) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put<std::uint32_t>(out, 2);
        put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
        put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) put<double>(out, m(i, j));
    });
    return out;
}

ModelParameters deserialize_checkpoint(std::string_view bytes) {
    Reader r(bytes);
    if (r.take(kCheckpointMagic.size()) != kCheckpointMagic) throw ParseError("not a checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version));
    const auto config_len = r.get<std::uint32_t>();
    const ModelConfig config = config_from_text(r.take(config_len));

    std::map<std::string, Matrix> tensors;
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t t = 0; t < count; ++t) {
        const auto name_len = r.get<std::uint32_t>();
        std::string name(r.take(name_len));
        const auto rank = r.get<std::uint32_t>();
        if (rank > 2) throw ParseError("tensor '" + name + "' has rank " + std::to_string(rank));
        std::uint64_t dims[2] = {1, 1};
        for (std::uint32_t k = 0; k < rank; ++k) dims[2 - rank + k] = r.get<std::uint64_t>();
        Matrix m(static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1]));
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.get<double>();
        tensors.emplace(std::move(name), std::move(m));
    }
    if (!r.done()) throw ParseError("trailing bytes after last tensor");

    ModelConfig skeleton_config = config;
    skeleton_config.lora_enabled = false;
    ModelParameters params = init_parameters(skeleton_config, 0);
    if (config.lora_enabled) attach_lora(params, config.lora_rank, config.lora_alpha, 0);
    params.config = config;

    std::size_t used = 0;
    for_each_tensor(params, [&](const std::string& name, Matrix& m, TensorKind) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ParseError("checkpoint lacks tensor '" + name + "'");
        if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
            throw ParseError("tensor '" + name + "' has wrong shape");
        m = std::move(it->second);
        ++used;
    });
    if (used != tensors.size()) throw ParseError("checkpoint has unexpected tensors");
    return params;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParameters& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    const std::string bytes = serialize_checkpoint(params);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

ModelParameters load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return deserialize_checkpoint(buf.str());
}

}  // namespace turnlm
