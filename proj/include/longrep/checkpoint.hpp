#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include <json.hpp>

#include "longrep/model.hpp"

namespace longrep {

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    nlohmann::json j;
    j["d_model"] = c.d_model;
    j["decoder_layers"] = c.decoder_layers;
    j["heads"] = c.heads;
    j["ffn_width"] = c.ffn_width;
    j["vocab_size"] = c.vocab_size;
    j["max_positions"] = c.max_positions;
    j["num_sections"] = c.num_sections;
    j["image_side"] = c.image_side;
    j["patch_size"] = c.patch_size;
    j["max_images"] = c.max_images;
    j["dropout"] = c.dropout;
    j["seed"] = c.seed;
    j["lora"] = {{"rank", c.lora.rank},
                 {"alpha", c.lora.alpha},
                 {"dropout", c.lora.dropout},
                 {"target_query", c.lora.target_query},
                 {"target_key", c.lora.target_key}};
    return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d_model = j.at("d_model").get<int>();
    c.decoder_layers = j.at("decoder_layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.ffn_width = j.at("ffn_width").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_positions = j.at("max_positions").get<int>();
    c.num_sections = j.at("num_sections").get<int>();
    c.image_side = j.at("image_side").get<int>();
    c.patch_size = j.at("patch_size").get<int>();
    c.max_images = j.at("max_images").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    const nlohmann::json& l = j.at("lora");
    c.lora.rank = l.at("rank").get<int>();
    c.lora.alpha = l.at("alpha").get<double>();
    c.lora.dropout = l.at("dropout").get<double>();
    c.lora.target_query = l.at("target_query").get<bool>();
    c.lora.target_key = l.at("target_key").get<bool>();
    c.validate();
    return c;
}

namespace detail {

constexpr char kCheckpointMagic[8] = {'L', 'R', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("checkpoint: truncated while reading " + what);
    return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_pod<uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const std::string& what) {
    uint64_t n = read_pod<uint64_t>(is, what + " length");
    if (n > (1ULL << 32)) throw IoError("checkpoint: implausible " + what + " length");
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw IoError("checkpoint: truncated while reading " + what);
    return s;
}

}  // namespace detail

// Binary container: magic, model config as JSON, then named tensors with
// trainability metadata. All tensor data is 64-bit, row-major.
inline void save_checkpoint(const std::string& path, const ModelState& state) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
    os.write(detail::kCheckpointMagic, 8);
    detail::write_string(os, model_config_to_json(state.config).dump());
    detail::write_pod<uint64_t>(os, state.params.all().size());
    for (const ParamStore::Param& p : state.params.all()) {
        detail::write_string(os, p.name);
        detail::write_string(os, p.group);
        detail::write_pod<uint8_t>(os, p.trainable ? 1 : 0);
        detail::write_pod<uint8_t>(os, 64);  // bits per value
        detail::write_pod<uint64_t>(os, static_cast<uint64_t>(p.value.rows()));
        detail::write_pod<uint64_t>(os, static_cast<uint64_t>(p.value.cols()));
        for (int r = 0; r < p.value.rows(); ++r)
            os.write(reinterpret_cast<const char*>(p.value.row(r).eval().data()),
                     static_cast<std::streamsize>(sizeof(double) * p.value.cols()));
    }
    if (!os) throw IoError("checkpoint: write failed for " + path);
}

inline ModelState load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != std::string(detail::kCheckpointMagic, 8))
        throw IoError("checkpoint: bad magic in " + path);
    nlohmann::json cfg_json;
    try {
        cfg_json = nlohmann::json::parse(detail::read_string(is, "config"));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint: invalid config JSON: ") + e.what());
    }
    ModelState state;
    state.config = model_config_from_json(cfg_json);
    uint64_t n = detail::read_pod<uint64_t>(is, "tensor count");
    for (uint64_t i = 0; i < n; ++i) {
        std::string name = detail::read_string(is, "tensor name");
        std::string group = detail::read_string(is, "tensor group");
        uint8_t trainable = detail::read_pod<uint8_t>(is, "trainable flag");
        uint8_t bits = detail::read_pod<uint8_t>(is, "value width");
        if (bits != 64) throw IoError("checkpoint: unsupported value width");
        uint64_t rows = detail::read_pod<uint64_t>(is, "rows");
        uint64_t cols = detail::read_pod<uint64_t>(is, "cols");
        if (rows > (1ULL << 24) || cols > (1ULL << 24))
            throw IoError("checkpoint: implausible tensor shape");
        ad::Mat m(rows, cols);
        std::vector<double> row(cols);
        for (uint64_t r = 0; r < rows; ++r) {
            is.read(reinterpret_cast<char*>(row.data()),
                    static_cast<std::streamsize>(sizeof(double) * cols));
            if (!is) throw IoError("checkpoint: truncated tensor " + name);
            for (uint64_t c = 0; c < cols; ++c) m(r, c) = row[c];
        }
        state.params.add(name, group, std::move(m));
        state.params.at(name).trainable = trainable != 0;
    }
    return state;
}

}  // namespace longrep
