#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "longrep/corpus.hpp"

namespace longrep {

namespace detail {

inline nlohmann::json config_to_json(const GeneratorConfig& c) {
    return {
        {"num_train_patients", c.num_train_patients},
        {"num_val_patients", c.num_val_patients},
        {"num_test_patients", c.num_test_patients},
        {"num_conditions", c.num_conditions},
        {"persistence", c.persistence},
        {"initial_positive_rate", c.initial_positive_rate},
        {"weak_visibility", c.weak_visibility},
        {"study_count_geometric_p", c.study_count_geometric_p},
        {"max_study_count", c.max_study_count},
        {"images_per_study_weights", c.images_per_study_weights},
        {"image_side", c.image_side},
        {"noise_level", c.noise_level},
        {"glyph_contrast", c.glyph_contrast},
        {"weak_glyph_contrast", c.weak_glyph_contrast},
        {"uncertain_rate", c.uncertain_rate},
        {"duplicate_timestamp_rate", c.duplicate_timestamp_rate},
        {"template_bank_id", c.template_bank_id},
        {"seed", c.seed},
    };
}

inline GeneratorConfig config_from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    c.num_train_patients = j.at("num_train_patients").get<int>();
    c.num_val_patients = j.at("num_val_patients").get<int>();
    c.num_test_patients = j.at("num_test_patients").get<int>();
    c.num_conditions = j.at("num_conditions").get<int>();
    c.persistence = j.at("persistence").get<double>();
    c.initial_positive_rate = j.at("initial_positive_rate").get<double>();
    c.weak_visibility = j.at("weak_visibility").get<std::vector<int>>();
    c.study_count_geometric_p = j.at("study_count_geometric_p").get<double>();
    c.max_study_count = j.at("max_study_count").get<int>();
    c.images_per_study_weights = j.at("images_per_study_weights").get<std::vector<double>>();
    c.image_side = j.at("image_side").get<int>();
    c.noise_level = j.at("noise_level").get<double>();
    c.glyph_contrast = j.at("glyph_contrast").get<double>();
    c.weak_glyph_contrast = j.at("weak_glyph_contrast").get<double>();
    c.uncertain_rate = j.at("uncertain_rate").get<double>();
    c.duplicate_timestamp_rate = j.at("duplicate_timestamp_rate").get<double>();
    c.template_bank_id = j.at("template_bank_id").get<std::string>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

inline std::string encode_pixels(const ImageGrid& img) {
    std::vector<unsigned char> bytes(img.pixels.size() * sizeof(float));
    std::memcpy(bytes.data(), img.pixels.data(), bytes.size());
    return base64_encode(bytes);
}

inline std::vector<float> decode_pixels(const std::string& b64, int side, int line) {
    std::vector<unsigned char> bytes = base64_decode(b64);
    if (bytes.size() != static_cast<size_t>(side) * side * sizeof(float))
        throw IoError("corpus line " + std::to_string(line) +
                      ": pixels_b64 length does not match side");
    std::vector<float> px(static_cast<size_t>(side) * side);
    std::memcpy(px.data(), bytes.data(), bytes.size());
    return px;
}

inline void write_split_jsonl(const std::filesystem::path& path,
                              const std::vector<PatientRecord>& patients) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    for (const PatientRecord& p : patients) {
        for (const StudyRecord& s : p.studies) {
            nlohmann::json images = nlohmann::json::array();
            for (const ImageGrid& img : s.images)
                images.push_back({{"view", to_string(img.view)},
                                  {"pixels_b64", encode_pixels(img)},
                                  {"side", img.side}});
            nlohmann::json row = {
                {"patient_id", s.patient_id}, {"study_index", s.study_index},
                {"timestamp", s.timestamp},   {"images", images},
                {"findings", s.findings_text}, {"impression", s.impression_text},
                {"labels", s.latent_labels},
            };
            out << row.dump() << "\n";
        }
    }
}

inline std::vector<PatientRecord> read_split_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("missing corpus file: " + path.string());
    std::map<std::string, PatientRecord> by_patient;
    std::vector<std::string> order;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json row;
        try {
            row = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("corpus line " + std::to_string(line_no) + ": " + e.what());
        }
        StudyRecord s;
        try {
            s.patient_id = row.at("patient_id").get<std::string>();
            s.study_index = row.at("study_index").get<int>();
            s.timestamp = row.at("timestamp").get<int64_t>();
            s.findings_text = row.at("findings").get<std::string>();
            s.impression_text = row.at("impression").get<std::string>();
            s.latent_labels = row.at("labels").get<std::vector<int>>();
            for (const nlohmann::json& jimg : row.at("images")) {
                ImageGrid img;
                img.side = jimg.at("side").get<int>();
                img.view = view_from_string(jimg.at("view").get<std::string>());
                img.pixels = decode_pixels(jimg.at("pixels_b64").get<std::string>(),
                                           img.side, line_no);
                img.validate();
                s.images.push_back(std::move(img));
            }
        } catch (const nlohmann::json::exception& e) {
            throw IoError("corpus line " + std::to_string(line_no) + ": missing or bad field (" +
                          std::string(e.what()) + ")");
        }
        if (s.images.empty() || s.images.size() > kMaxImagesPerStudy)
            throw IoError("corpus line " + std::to_string(line_no) +
                          ": images count outside 1..5");
        if (s.findings_text.empty() || s.impression_text.empty())
            throw IoError("corpus line " + std::to_string(line_no) + ": empty report section");
        if (!by_patient.count(s.patient_id)) order.push_back(s.patient_id);
        by_patient[s.patient_id].patient_id = s.patient_id;
        by_patient[s.patient_id].studies.push_back(std::move(s));
    }
    std::vector<PatientRecord> out;
    for (const std::string& id : order) {
        PatientRecord& p = by_patient[id];
        std::sort(p.studies.begin(), p.studies.end(),
                  [](const StudyRecord& a, const StudyRecord& b) {
                      return a.study_index < b.study_index;
                  });
        int64_t prev_ts = INT64_MIN;
        for (size_t i = 0; i < p.studies.size(); ++i) {
            if (p.studies[i].study_index != static_cast<int>(i) + 1)
                throw IoError("patient " + id + ": study_index sequence broken");
            if (p.studies[i].timestamp <= prev_ts)
                throw IoError("patient " + id + ": timestamps not strictly increasing");
            prev_ts = p.studies[i].timestamp;
        }
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace detail

// Writes train/validation/test JSONL files next to a manifest JSON at `path`.
inline void write_corpus(const std::filesystem::path& manifest_path, const CorpusSplit& corpus) {
    std::filesystem::path dir = manifest_path.parent_path();
    if (!dir.empty()) std::filesystem::create_directories(dir);
    detail::write_split_jsonl(dir / "train.jsonl", corpus.train);
    detail::write_split_jsonl(dir / "validation.jsonl", corpus.validation);
    detail::write_split_jsonl(dir / "test.jsonl", corpus.test);
    nlohmann::json manifest = {
        {"version", 1},
        {"splits",
         {{"train", "train.jsonl"},
          {"validation", "validation.jsonl"},
          {"test", "test.jsonl"}}},
        {"generator_config", detail::config_to_json(corpus.config)},
    };
    std::ofstream out(manifest_path);
    if (!out) throw IoError("cannot open for writing: " + manifest_path.string());
    out << manifest.dump(2) << "\n";
}

inline CorpusSplit read_corpus(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("missing corpus manifest: " + manifest_path.string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corpus manifest: " + std::string(e.what()));
    }
    std::filesystem::path dir = manifest_path.parent_path();
    CorpusSplit corpus;
    corpus.config = detail::config_from_json(manifest.at("generator_config"));
    const nlohmann::json& splits = manifest.at("splits");
    corpus.train = detail::read_split_jsonl(dir / splits.at("train").get<std::string>());
    corpus.validation =
        detail::read_split_jsonl(dir / splits.at("validation").get<std::string>());
    corpus.test = detail::read_split_jsonl(dir / splits.at("test").get<std::string>());
    return corpus;
}

inline uint64_t corpus_hash(const CorpusSplit& corpus) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const std::vector<PatientRecord>& ps) {
        for (const PatientRecord& p : ps)
            for (const StudyRecord& s : p.studies) {
                h = fnv1a(s.patient_id.data(), s.patient_id.size(), h);
                h = fnv1a(&s.timestamp, sizeof(s.timestamp), h);
                h = fnv1a(s.findings_text.data(), s.findings_text.size(), h);
                h = fnv1a(s.impression_text.data(), s.impression_text.size(), h);
                for (const ImageGrid& img : s.images)
                    h = fnv1a(img.pixels.data(), img.pixels.size() * sizeof(float), h);
            }
    };
    mix(corpus.train);
    mix(corpus.validation);
    mix(corpus.test);
    return h;
}

}  // namespace longrep
