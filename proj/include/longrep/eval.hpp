#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "longrep/corpus.hpp"
#include "longrep/decoding.hpp"
#include "longrep/metrics.hpp"
#include "longrep/reward.hpp"

namespace longrep {

enum class Conditioning { single_image, multi_image, longitudinal };
enum class PromptMode { none, sentinel, radiologist_prev, generated_prev };

inline std::string conditioning_name(Conditioning c) {
    switch (c) {
        case Conditioning::single_image: return "single_image";
        case Conditioning::multi_image: return "multi_image";
        case Conditioning::longitudinal: return "longitudinal";
    }
    throw ValidationError("bad conditioning");
}

inline std::string prompt_mode_name(PromptMode m) {
    switch (m) {
        case PromptMode::none: return "none";
        case PromptMode::sentinel: return "sentinel";
        case PromptMode::radiologist_prev: return "radiologist_prev";
        case PromptMode::generated_prev: return "generated_prev";
    }
    throw ValidationError("bad prompt mode");
}

struct PromptText {
    std::string findings;
    std::string impression;
};

// use_prompt=false: no prompt tokens at all. use_prompt=true with empty prev:
// the no-previous-study sentinel placeholders.
struct PromptSpec {
    bool use_prompt = false;
    std::optional<PromptText> prev;
};

using GenerateFn =
    std::function<SplitSections(const std::vector<ImageGrid>&, const PromptSpec&)>;

// Real-model generator over a trained state.
inline GenerateFn make_model_generator(ModelState& state, const Vocabulary& vocab,
                                       DecodeConfig decode_cfg, int max_prompt = 256) {
    return [&state, &vocab, decode_cfg, max_prompt](const std::vector<ImageGrid>& images,
                                                    const PromptSpec& spec) {
        TokenStream stream;
        if (spec.use_prompt) {
            StreamFragment prompt =
                spec.prev.has_value()
                    ? assemble_prompt(spec.prev->findings, spec.prev->impression, vocab,
                                      max_prompt)
                    : assemble_prompt(std::nullopt, std::nullopt, vocab, max_prompt);
            stream.token_ids = prompt.token_ids;
            stream.section_ids = prompt.section_ids;
            stream.prompt_len = static_cast<int>(prompt.token_ids.size());
            for (int i = 0; i < stream.prompt_len; ++i) stream.position_ids.push_back(i);
        }
        std::vector<ImageGrid> cropped;
        for (const ImageGrid& img : images)
            cropped.push_back(
                augment_image(img, AugmentMode::eval, 0, state.config.image_side));
        DecodeResult out = generate_report(state, cropped, stream, vocab, decode_cfg);
        return split_sections(out.token_ids, vocab);
    };
}

struct StudyScore {
    std::string patient_id;
    int study_index = 1;
    bool has_previous = false;
    double bleu4 = 0.0;
    double rouge_l = 0.0;
    double cider = 0.0;
    double reward = 0.0;
    bool missing_sep = false;
    std::string generated_findings;
    std::string generated_impression;
};

struct Aggregates {
    int num_studies = 0;
    double bleu4 = 0.0;
    double rouge_l = 0.0;
    double cider = 0.0;
    double reward = 0.0;
    double macro_f1 = 0.0;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double missing_sep_rate = 0.0;
};

struct ScoreReport {
    std::string conditioning;
    std::string prompt_mode;
    std::vector<StudyScore> rows;
    Aggregates all;
    Aggregates has_previous;  // Table-5-style subset

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["conditioning"] = conditioning;
        j["prompt_mode"] = prompt_mode;
        auto agg = [](const Aggregates& a) {
            return nlohmann::json{{"num_studies", a.num_studies},
                                  {"bleu4", a.bleu4},
                                  {"rouge_l", a.rouge_l},
                                  {"cider", a.cider},
                                  {"reward", a.reward},
                                  {"macro_f1", a.macro_f1},
                                  {"macro_precision", a.macro_precision},
                                  {"macro_recall", a.macro_recall},
                                  {"missing_sep_rate", a.missing_sep_rate},
                                  {"bertscore", nullptr},
                                  {"radgraph_er", nullptr},
                                  {"chexbert_f1", nullptr}};
        };
        j["aggregates"] = agg(all);
        j["aggregates_has_previous"] = agg(has_previous);
        nlohmann::json rows = nlohmann::json::array();
        for (const StudyScore& r : this->rows)
            rows.push_back({{"patient_id", r.patient_id},
                            {"study_index", r.study_index},
                            {"has_previous", r.has_previous},
                            {"bleu4", r.bleu4},
                            {"rouge_l", r.rouge_l},
                            {"cider", r.cider},
                            {"reward", r.reward},
                            {"missing_sep", r.missing_sep}});
        j["rows"] = std::move(rows);
        return j;
    }
};

inline ObservationStates states_from_labels(const std::vector<int>& labels) {
    ObservationStates s;
    s.fill(ObservationState::negative);
    for (int c = 0; c < kNumConditions && c < static_cast<int>(labels.size()); ++c)
        if (labels[c] == 1) s[c] = ObservationState::positive;
    return s;
}

// Generates a report for every study of the split (per image in single-image
// mode, averaged per study) and scores it against the untruncated reference.
inline ScoreReport evaluate_split(const std::vector<PatientRecord>& patients,
                                  const GenerateFn& generate_fn, Conditioning conditioning,
                                  PromptMode prompt_mode, ReportEncoder* encoder = nullptr,
                                  bool only_has_previous = false, int max_studies = 0) {
    if (conditioning == Conditioning::longitudinal && prompt_mode == PromptMode::none)
        throw ValidationError("evaluate_split: longitudinal needs a prompt mode");
    TFCosineEncoder default_encoder;
    ReportEncoder& enc = encoder ? *encoder : default_encoder;

    ScoreReport report;
    report.conditioning = conditioning_name(conditioning);
    report.prompt_mode = prompt_mode_name(prompt_mode);

    struct Row {
        StudyScore score;
        std::vector<std::vector<std::string>> cand_tokens;  // per report of the study
        std::vector<std::string> ref_tokens;
        std::string ref_text;
        std::vector<std::string> gen_texts;
        ConfusionAccumulator confusion;  // this study only
    };
    std::vector<Row> rows;

    int emitted = 0;
    for (const PatientRecord& patient : patients) {
        std::optional<PromptText> generated_prev;
        for (size_t k = 0; k < patient.studies.size(); ++k) {
            if (max_studies > 0 && emitted >= max_studies) break;
            const StudyRecord& study = patient.studies[k];
            bool has_prev = k > 0;

            PromptSpec spec;
            if (prompt_mode != PromptMode::none) {
                spec.use_prompt = true;
                if (prompt_mode == PromptMode::radiologist_prev && has_prev)
                    spec.prev = PromptText{patient.studies[k - 1].findings_text,
                                           patient.studies[k - 1].impression_text};
                else if (prompt_mode == PromptMode::generated_prev && has_prev)
                    spec.prev = generated_prev;
            }

            std::vector<SplitSections> outputs;
            if (conditioning == Conditioning::single_image) {
                for (const ImageGrid& img : study.images)
                    outputs.push_back(generate_fn({img}, spec));
            } else {
                outputs.push_back(generate_fn(study.images, spec));
            }
            if (prompt_mode == PromptMode::generated_prev)
                generated_prev =
                    PromptText{outputs.back().findings, outputs.back().impression};

            if (only_has_previous && !has_prev) continue;

            Row row;
            row.score.patient_id = study.patient_id;
            row.score.study_index = study.study_index;
            row.score.has_previous = has_prev;
            row.ref_text =
                format_report(study.findings_text + " " + study.impression_text);
            row.ref_tokens = word_tokens(row.ref_text);
            ObservationStates truth = states_from_labels(study.latent_labels);
            double w = 1.0 / outputs.size();
            for (const SplitSections& out : outputs) {
                std::string gen_text =
                    format_report(out.findings + " " + out.impression);
                row.gen_texts.push_back(gen_text);
                row.cand_tokens.push_back(word_tokens(gen_text));
                row.confusion.add(label_extract(gen_text), truth, w);
                row.score.missing_sep = row.score.missing_sep || out.missing_sep;
            }
            row.score.generated_findings = outputs.back().findings;
            row.score.generated_impression = outputs.back().impression;
            rows.push_back(std::move(row));
            ++emitted;
        }
        if (max_studies > 0 && emitted >= max_studies) break;
    }

    // IDF over the evaluated references (one reference set per study).
    std::vector<std::vector<std::vector<std::string>>> ref_sets;
    for (const Row& r : rows) ref_sets.push_back({r.ref_tokens});
    CiderIdf idf = CiderIdf::build(ref_sets);

    ConfusionAccumulator conf_all, conf_prev;
    auto finish = [&](Aggregates& agg, bool prev_only) {
        for (Row& r : rows) {
            if (prev_only && !r.score.has_previous) continue;
            agg.bleu4 += r.score.bleu4;
            agg.rouge_l += r.score.rouge_l;
            agg.cider += r.score.cider;
            agg.reward += r.score.reward;
            agg.missing_sep_rate += r.score.missing_sep ? 1.0 : 0.0;
            ++agg.num_studies;
        }
        if (agg.num_studies == 0) return;
        agg.bleu4 /= agg.num_studies;
        agg.rouge_l /= agg.num_studies;
        agg.cider /= agg.num_studies;
        agg.reward /= agg.num_studies;
        agg.missing_sep_rate /= agg.num_studies;
        PrfResult prf = (prev_only ? conf_prev : conf_all).macro();
        agg.macro_f1 = prf.f1;
        agg.macro_precision = prf.precision;
        agg.macro_recall = prf.recall;
    };

    for (Row& r : rows) {
        double n = static_cast<double>(r.cand_tokens.size());
        for (size_t i = 0; i < r.cand_tokens.size(); ++i) {
            r.score.bleu4 += bleu4(r.cand_tokens[i], {r.ref_tokens}) / n;
            r.score.rouge_l += rouge_l(r.cand_tokens[i], r.ref_tokens) / n;
            r.score.cider += cider(r.cand_tokens[i], {r.ref_tokens}, idf) / n;
            r.score.reward += cosine_reward(r.gen_texts[i], r.ref_text, enc).value / n;
        }
        for (int c = 0; c < kNumConditions; ++c) {
            conf_all.tp[c] += r.confusion.tp[c];
            conf_all.fp[c] += r.confusion.fp[c];
            conf_all.fn[c] += r.confusion.fn[c];
            if (r.score.has_previous) {
                conf_prev.tp[c] += r.confusion.tp[c];
                conf_prev.fp[c] += r.confusion.fp[c];
                conf_prev.fn[c] += r.confusion.fn[c];
            }
        }
        report.rows.push_back(r.score);
    }
    finish(report.all, false);
    finish(report.has_previous, true);
    return report;
}

}  // namespace longrep
