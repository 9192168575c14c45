#include "refreshkv/weights_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>

#include "refreshkv/errors.hpp"

namespace refreshkv {

namespace {

constexpr const char* kFormat = "refreshkv-f64-le";

std::uint64_t to_little_endian(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        std::uint64_t out = 0;
        for (int i = 0; i < 8; ++i) {
            out = (out << 8) | ((v >> (8 * i)) & 0xffu);
        }
        return out;
    }
    return v;
}

struct TensorRef {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double>* data;
};

// Fixed tensor order; the same list drives save and load.
std::vector<TensorRef> tensor_table(ModelWeights& w) {
    const ModelConfig& c = w.config;
    const std::size_t d = c.model_dim();
    const std::size_t f = c.ffn_dim();
    std::vector<TensorRef> out;
    out.push_back({"embedding", {c.vocab_size, d}, &w.embedding});
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        LayerWeights& layer = w.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        out.push_back({p + "attn_norm", {d}, &layer.attn_norm});
        out.push_back({p + "wq", {c.q_dim(), d}, &layer.wq});
        out.push_back({p + "wk", {c.kv_dim(), d}, &layer.wk});
        out.push_back({p + "wv", {c.kv_dim(), d}, &layer.wv});
        out.push_back({p + "wo", {d, c.q_dim()}, &layer.wo});
        out.push_back({p + "ffn_norm", {d}, &layer.ffn_norm});
        out.push_back({p + "w_gate", {f, d}, &layer.w_gate});
        out.push_back({p + "w_up", {f, d}, &layer.w_up});
        out.push_back({p + "w_down", {d, f}, &layer.w_down});
    }
    out.push_back({"final_norm", {d}, &w.final_norm});
    out.push_back({"lm_head", {c.vocab_size, d}, &w.lm_head});
    return out;
}

std::size_t element_count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t s : shape) {
        n *= s;
    }
    return n;
}

}  // namespace

nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},   {"n_query_heads", c.n_query_heads}, {"n_kv_heads", c.n_kv_heads},
            {"head_dim", c.head_dim},   {"ffn_mult", c.ffn_mult},           {"vocab_size", c.vocab_size},
            {"max_position", c.max_position}, {"seed", c.seed},             {"rope_base", c.rope_base}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw ConfigError("model config must be a JSON object");
    }
    ModelConfig c;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "n_layers") c.n_layers = value.get<std::size_t>();
            else if (key == "n_query_heads") c.n_query_heads = value.get<std::size_t>();
            else if (key == "n_kv_heads") c.n_kv_heads = value.get<std::size_t>();
            else if (key == "head_dim") c.head_dim = value.get<std::size_t>();
            else if (key == "ffn_mult") c.ffn_mult = value.get<double>();
            else if (key == "vocab_size") c.vocab_size = value.get<std::size_t>();
            else if (key == "max_position") c.max_position = value.get<std::size_t>();
            else if (key == "seed") c.seed = value.get<std::uint64_t>();
            else if (key == "rope_base") c.rope_base = value.get<double>();
            else throw ConfigError("unknown model config key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("model." + key + ": " + e.what());
        }
    }
    return c;
}

void save_weights(const ModelWeights& weights, const std::filesystem::path& path) {
    ModelWeights copy = weights;
    auto table = tensor_table(copy);
    nlohmann::json header = {{"format", kFormat}, {"config", model_config_to_json(weights.config)}};
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : table) {
        if (t.data->size() != element_count(t.shape)) {
            throw ContractViolation("save_weights: tensor " + t.name + " has " + std::to_string(t.data->size()) +
                                    " elements, shape implies " + std::to_string(element_count(t.shape)));
        }
        header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
        offset += t.data->size() * sizeof(double);
    }
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    const std::uint64_t length = to_little_endian(text.size());
    out.write(reinterpret_cast<const char*>(&length), sizeof(length));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : table) {
        for (double v : *t.data) {
            const std::uint64_t bits = to_little_endian(std::bit_cast<std::uint64_t>(v));
            out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
        }
    }
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

ModelWeights load_weights(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::uint64_t length = 0;
    in.read(reinterpret_cast<char*>(&length), sizeof(length));
    length = to_little_endian(length);
    if (!in || length > (std::uint64_t{1} << 32)) {
        throw IoError(path.string() + ": truncated or corrupt header length");
    }
    std::string text(length, '\0');
    in.read(text.data(), static_cast<std::streamsize>(length));
    if (!in) {
        throw IoError(path.string() + ": truncated header");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + ": bad header JSON: " + e.what());
    }
    if (header.value("format", "") != kFormat) {
        throw IoError(path.string() + ": unsupported format");
    }
    ModelWeights w;
    w.config = model_config_from_json(header.at("config"));
    w.config.validate();
    w.layers.resize(w.config.n_layers);
    auto table = tensor_table(w);
    const auto& entries = header.at("tensors");
    if (entries.size() != table.size()) {
        throw IoError(path.string() + ": expected " + std::to_string(table.size()) + " tensors, found " +
                      std::to_string(entries.size()));
    }
    const std::streamoff payload_start = static_cast<std::streamoff>(sizeof(length) + length);
    for (std::size_t i = 0; i < table.size(); ++i) {
        const auto& entry = entries[i];
        auto& t = table[i];
        if (entry.at("name").get<std::string>() != t.name ||
            entry.at("shape").get<std::vector<std::size_t>>() != t.shape) {
            throw IoError(path.string() + ": tensor " + std::to_string(i) + " does not match config (expected " +
                          t.name + ")");
        }
        const auto offset = entry.at("offset").get<std::uint64_t>();
        in.seekg(payload_start + static_cast<std::streamoff>(offset));
        t.data->resize(element_count(t.shape));
        for (double& v : *t.data) {
            std::uint64_t bits = 0;
            in.read(reinterpret_cast<char*>(&bits), sizeof(bits));
            v = std::bit_cast<double>(to_little_endian(bits));
        }
        if (!in) {
            throw IoError(path.string() + ": truncated payload in tensor " + t.name);
        }
    }
    return w;
}

}  // namespace refreshkv
