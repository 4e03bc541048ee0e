#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "longrep/common.hpp"
#include "longrep/template_bank.hpp"

namespace longrep {

enum class ViewTag { frontal, lateral };

inline std::string to_string(ViewTag v) {
    return v == ViewTag::frontal ? "frontal" : "lateral";
}
inline ViewTag view_from_string(const std::string& s) {
    if (s == "frontal") return ViewTag::frontal;
    if (s == "lateral") return ViewTag::lateral;
    throw ValidationError("unknown view tag: " + s);
}

// Square grayscale image, intensities in [0,1], row-major.
struct ImageGrid {
    int side = 0;
    ViewTag view = ViewTag::frontal;
    std::vector<float> pixels;  // side*side

    float at(int r, int c) const { return pixels[static_cast<size_t>(r) * side + c]; }
    float& at(int r, int c) { return pixels[static_cast<size_t>(r) * side + c]; }

    void validate() const {
        if (side <= 0 || pixels.size() != static_cast<size_t>(side) * side)
            throw ValidationError("ImageGrid: pixel count does not match side");
        for (float p : pixels)
            if (!(p >= 0.0f && p <= 1.0f))
                throw ValidationError("ImageGrid: intensity outside [0,1]");
    }

    bool operator==(const ImageGrid&) const = default;
};

constexpr int kMaxImagesPerStudy = 5;

struct StudyRecord {
    std::string patient_id;
    int study_index = 1;  // ordinal within patient, 1-based
    int64_t timestamp = 0;
    std::vector<ImageGrid> images;
    std::string findings_text;
    std::string impression_text;
    std::vector<int> latent_labels;  // K entries in {0,1}

    bool operator==(const StudyRecord&) const = default;
};

struct PatientRecord {
    std::string patient_id;
    std::vector<StudyRecord> studies;  // ordered by timestamp

    bool operator==(const PatientRecord&) const = default;
};

struct GeneratorConfig {
    int num_train_patients = 1000;
    int num_val_patients = 60;
    int num_test_patients = 100;
    int num_conditions = TemplateBank::kNumConditions;
    double persistence = 0.9;           // probability a condition state carries over
    double initial_positive_rate = 0.3;
    std::vector<int> weak_visibility = {1, 4, 7, 10};  // low-contrast conditions
    double study_count_geometric_p = 0.5;  // truncated geometric on 1..8
    int max_study_count = 8;
    std::vector<double> images_per_study_weights = {0.45, 0.35, 0.12, 0.05, 0.03};
    int image_side = 64;
    double noise_level = 0.05;
    double glyph_contrast = 0.6;
    double weak_glyph_contrast = 0.3;  // near the noise level: hard but not impossible
    double uncertain_rate = 0.05;         // negative rendered with uncertain phrasing
    double duplicate_timestamp_rate = 0.01;
    std::string template_bank_id = "v1";
    uint64_t seed = 0;

    void validate() const {
        if (persistence < 0.0 || persistence > 1.0)
            throw ValidationError("GeneratorConfig: persistence outside [0,1]");
        if (num_train_patients < 0 || num_val_patients < 0 || num_test_patients < 0)
            throw ValidationError("GeneratorConfig: negative patient count");
        if (num_conditions < 1) throw ValidationError("GeneratorConfig: num_conditions < 1");
        for (int c : weak_visibility)
            if (c < 0 || c >= num_conditions)
                throw ValidationError("GeneratorConfig: weak_visibility condition out of range");
        if (images_per_study_weights.empty() ||
            images_per_study_weights.size() > kMaxImagesPerStudy)
            throw ValidationError("GeneratorConfig: images_per_study_weights must cover 1..5");
        if (template_bank_id != "v1")
            throw ValidationError("GeneratorConfig: unknown template bank " + template_bank_id);
    }
};

struct CorpusSplit {
    std::vector<PatientRecord> train;
    std::vector<PatientRecord> validation;
    std::vector<PatientRecord> test;
    GeneratorConfig config;
};

// Report formatting: newlines/tabs removed, runs of whitespace collapsed to a
// single space, ends trimmed. Idempotent.
inline std::string format_report(const std::string& raw) {
    std::string out;
    out.reserve(raw.size());
    bool pending_space = false;
    for (char c : raw) {
        bool ws = c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\v' || c == '\f';
        if (ws) {
            if (!out.empty()) pending_space = true;
        } else {
            if (pending_space) out.push_back(' ');
            pending_space = false;
            out.push_back(c);
        }
    }
    return out;
}

// Removes studies missing a section or with >5 images. If two studies of a
// patient share a timestamp, their order is undetermined, so they and every
// later study of that patient are dropped. Patients left empty are dropped and
// surviving studies are re-indexed.
inline std::vector<PatientRecord> apply_exclusions(const std::vector<PatientRecord>& patients) {
    std::vector<PatientRecord> out;
    for (const PatientRecord& p : patients) {
        // Ambiguous ordering: both tied studies and everything after them go.
        size_t cutoff = p.studies.size();
        for (size_t i = 1; i < p.studies.size(); ++i)
            if (p.studies[i].timestamp == p.studies[i - 1].timestamp) {
                cutoff = i - 1;
                break;
            }
        PatientRecord kept;
        kept.patient_id = p.patient_id;
        for (size_t i = 0; i < cutoff; ++i) {
            const StudyRecord& s = p.studies[i];
            if (s.findings_text.empty() || s.impression_text.empty()) continue;
            if (s.images.empty() || s.images.size() > kMaxImagesPerStudy) continue;
            kept.studies.push_back(s);
            kept.studies.back().study_index = static_cast<int>(kept.studies.size());
        }
        if (!kept.studies.empty()) out.push_back(std::move(kept));
    }
    return out;
}

namespace detail {

// Glyph cell for a condition on a 4x4 patch grid; the glyph fills the centre
// of its cell so a +-5 degree rotation keeps it inside the cell.
inline void render_glyph(ImageGrid& img, int condition, double contrast) {
    int cells = 4;
    int cell = img.side / cells;
    int cr = condition / cells;
    int cc = condition % cells;
    int r0 = cr * cell + cell / 4;
    int c0 = cc * cell + cell / 4;
    int len = cell / 2;
    for (int r = r0; r < r0 + len; ++r)
        for (int c = c0; c < c0 + len; ++c)
            img.at(r, c) = std::min(1.0f, img.at(r, c) + static_cast<float>(contrast));
}

inline std::vector<PatientRecord> generate_split(const GeneratorConfig& cfg,
                                                 const std::string& prefix, int count,
                                                 uint64_t split_key) {
    const TemplateBank& bank = TemplateBank::v1();
    std::vector<PatientRecord> patients(count);
    parallel_for(count, [&](size_t i) {
        Rng rng = Rng::seeded_child(cfg.seed, split_key * 1000003ULL + i);
        PatientRecord patient;
        patient.patient_id = prefix + std::to_string(i);

        // Truncated geometric study count on 1..max_study_count.
        int n_studies = 1;
        while (n_studies < cfg.max_study_count && !rng.bernoulli(cfg.study_count_geometric_p))
            ++n_studies;

        std::vector<int> labels(cfg.num_conditions);
        for (int c = 0; c < cfg.num_conditions; ++c)
            labels[c] = rng.bernoulli(cfg.initial_positive_rate) ? 1 : 0;

        int64_t ts = static_cast<int64_t>(rng.uniform_int(1000));
        for (int s = 0; s < n_studies; ++s) {
            if (s > 0) {
                for (int c = 0; c < cfg.num_conditions; ++c)
                    if (!rng.bernoulli(cfg.persistence)) labels[c] = 1 - labels[c];
                if (rng.bernoulli(cfg.duplicate_timestamp_rate))
                    ;  // keep ts unchanged: injected ordering tie
                else
                    ts += 1 + static_cast<int64_t>(rng.uniform_int(100));
            }

            StudyRecord study;
            study.patient_id = patient.patient_id;
            study.study_index = s + 1;
            study.timestamp = ts;
            study.latent_labels = labels;

            // Images: noisy background, each positive condition's glyph in
            // exactly one image.
            double acc = 0.0;
            double roll = rng.uniform();
            size_t n_images = cfg.images_per_study_weights.size();
            double total = 0.0;
            for (double w : cfg.images_per_study_weights) total += w;
            for (size_t k = 0; k < cfg.images_per_study_weights.size(); ++k) {
                acc += cfg.images_per_study_weights[k] / total;
                if (roll < acc) {
                    n_images = k + 1;
                    break;
                }
            }
            study.images.resize(n_images);
            for (size_t k = 0; k < n_images; ++k) {
                ImageGrid& img = study.images[k];
                img.side = cfg.image_side;
                img.view = k % 2 == 0 ? ViewTag::frontal : ViewTag::lateral;
                img.pixels.resize(static_cast<size_t>(img.side) * img.side);
                for (float& p : img.pixels)
                    p = static_cast<float>(0.1 + cfg.noise_level * rng.uniform());
            }
            for (int c = 0; c < cfg.num_conditions; ++c) {
                if (!labels[c]) continue;
                size_t target = rng.uniform_int(n_images);
                bool weak = std::find(cfg.weak_visibility.begin(), cfg.weak_visibility.end(),
                                      c) != cfg.weak_visibility.end();
                render_glyph(study.images[target], c,
                             weak ? cfg.weak_glyph_contrast : cfg.glyph_contrast);
            }

            // Findings: one sentence per condition in fixed order; impression
            // summarises the positives. Texts are a pure function of the
            // labels and the template bank.
            std::string findings;
            std::vector<int> positives;
            for (int c = 0; c < cfg.num_conditions; ++c) {
                if (!findings.empty()) findings += " ";
                int variant = static_cast<int>(rng.uniform_int(2));
                if (labels[c]) {
                    findings += bank.positive_sentence(c, variant);
                    positives.push_back(c);
                } else if (rng.bernoulli(cfg.uncertain_rate)) {
                    findings += bank.uncertain_sentence(c);
                } else {
                    findings += bank.negative_sentence(c, variant);
                }
            }
            study.findings_text = format_report(findings);
            study.impression_text = format_report(bank.impression_text(positives));
            patient.studies.push_back(std::move(study));
        }
        patients[i] = std::move(patient);
    });
    return apply_exclusions(patients);
}

}  // namespace detail

// Deterministic synthetic longitudinal corpus. Condition states persist across
// a patient's studies with probability `persistence`; weak-visibility
// conditions render at low contrast so the previous report carries signal the
// images barely do.
inline CorpusSplit generate_corpus(const GeneratorConfig& cfg) {
    cfg.validate();
    CorpusSplit out;
    out.config = cfg;
    out.train = detail::generate_split(cfg, "train-p", cfg.num_train_patients, 1);
    out.validation = detail::generate_split(cfg, "val-p", cfg.num_val_patients, 2);
    out.test = detail::generate_split(cfg, "test-p", cfg.num_test_patients, 3);
    return out;
}

// Empirical per-condition persistence rate over consecutive studies.
inline double measured_persistence(const std::vector<PatientRecord>& patients) {
    int64_t same = 0, total = 0;
    for (const PatientRecord& p : patients)
        for (size_t s = 1; s < p.studies.size(); ++s)
            for (size_t c = 0; c < p.studies[s].latent_labels.size(); ++c) {
                ++total;
                if (p.studies[s].latent_labels[c] == p.studies[s - 1].latent_labels[c]) ++same;
            }
    return total == 0 ? 0.0 : static_cast<double>(same) / static_cast<double>(total);
}

}  // namespace longrep
