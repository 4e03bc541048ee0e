#pragma once

#include <cmath>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "longrep/checkpoint.hpp"
#include "longrep/eval.hpp"
#include "longrep/scheduler.hpp"

namespace longrep {

enum class Stage { teacher_forcing, scst };
enum class PromptSource { none, radiologist_prev, generated_prev };

inline std::string stage_name(Stage s) {
    return s == Stage::teacher_forcing ? "teacher_forcing" : "scst";
}

inline std::string prompt_source_name(PromptSource s) {
    switch (s) {
        case PromptSource::none: return "none";
        case PromptSource::radiologist_prev: return "radiologist_prev";
        case PromptSource::generated_prev: return "generated_prev";
    }
    throw ValidationError("bad prompt source");
}

struct TrainConfig {
    Stage stage = Stage::teacher_forcing;
    double learning_rate = 5e-5;   // scst default 5e-6
    double weight_decay = 0.0;
    double grad_clip = 0.0;        // 0 disables clipping
    int batch_size = 8;            // reference value 32
    int epochs = 1;                // reference: tf 32, scst 1
    int validations_per_epoch = 1;  // reference scst cadence: 10
    PromptSource prompt_source = PromptSource::none;
    Conditioning conditioning = Conditioning::multi_image;
    std::string reward_id;         // "tf_cosine" for scst
    uint64_t seed = 0;
    int max_prompt_tokens = 256;
    int max_target_tokens = 256;
    int max_val_studies = 40;      // 0 = no cap
    int threads = 0;               // 0 = hardware concurrency
    int sample_k = 50;             // scst top-k
    int decode_max_new_tokens = 160;
    bool augment = true;           // tf image rotation

    void validate() const {
        if (learning_rate < 0.0) throw ValidationError("TrainConfig: negative learning rate");
        if (batch_size < 1) throw ValidationError("TrainConfig: batch_size < 1");
        if (epochs < 0) throw ValidationError("TrainConfig: negative epochs");
        if (stage == Stage::scst && reward_id.empty())
            throw ValidationError("TrainConfig: scst requires a reward id");
        if (conditioning == Conditioning::longitudinal &&
            prompt_source == PromptSource::none)
            throw ValidationError("TrainConfig: longitudinal requires a prompt source");
        if (validations_per_epoch < 1)
            throw ValidationError("TrainConfig: validations_per_epoch < 1");
    }
};

struct RunManifest {
    nlohmann::json j;

    RunManifest() {
        j["loss_series"] = nlohmann::json::array();
        j["reward_series"] = nlohmann::json::array();
        j["validations"] = nlohmann::json::array();
        j["skipped_steps"] = 0;
    }
};

// --- optimizer -----------------------------------------------------------------

struct AdamState {
    std::map<std::string, std::pair<ad::Mat, ad::Mat>> moments;  // (m, v)
    int64_t step = 0;
};

// Bias-corrected AdamW with decoupled weight decay. A non-finite gradient
// skips the whole step and reports it; frozen parameters are never touched.
inline bool optimizer_update(ParamStore& params, const std::map<std::string, ad::Mat>& grads,
                             AdamState& opt, double lr, double weight_decay = 0.0,
                             double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    for (const auto& [name, g] : grads)
        if (!g.allFinite()) {
            std::cerr << "optimizer_update: non-finite gradient for " << name
                      << ", step skipped\n";
            return false;
        }
    ++opt.step;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(opt.step));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(opt.step));
    for (const auto& [name, g] : grads) {
        ParamStore::Param& p = params.at(name);
        if (!p.trainable) continue;
        if (g.rows() != p.value.rows() || g.cols() != p.value.cols())
            throw ValidationError("optimizer_update: gradient shape mismatch for " + name);
        auto it = opt.moments.find(name);
        if (it == opt.moments.end())
            it = opt.moments
                     .emplace(name, std::make_pair(ad::Mat::Zero(g.rows(), g.cols()),
                                                   ad::Mat::Zero(g.rows(), g.cols())))
                     .first;
        ad::Mat& m = it->second.first;
        ad::Mat& v = it->second.second;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
        ad::Mat mhat = m / bc1;
        ad::Mat vhat = v / bc2;
        if (weight_decay > 0.0) p.value -= lr * weight_decay * p.value;
        p.value -= lr * (mhat.array() / (vhat.array().sqrt() + eps)).matrix();
    }
    return true;
}

// --- training examples -----------------------------------------------------------

struct TrainExample {
    int patient = -1;
    int study = -1;       // 0-based within patient
    int image = -1;       // single-image mode: which image; -1 = all
};

inline std::vector<TrainExample> build_examples(const std::vector<PatientRecord>& patients,
                                                Conditioning conditioning) {
    std::vector<TrainExample> out;
    for (size_t p = 0; p < patients.size(); ++p)
        for (size_t s = 0; s < patients[p].studies.size(); ++s) {
            if (conditioning == Conditioning::single_image) {
                for (size_t i = 0; i < patients[p].studies[s].images.size(); ++i)
                    out.push_back({static_cast<int>(p), static_cast<int>(s),
                                   static_cast<int>(i)});
            } else {
                out.push_back({static_cast<int>(p), static_cast<int>(s), -1});
            }
        }
    return out;
}

namespace detail {

inline std::vector<ImageGrid> example_images(const std::vector<PatientRecord>& patients,
                                             const TrainExample& ex, const ModelConfig& mc,
                                             bool augment, uint64_t aug_seed) {
    const StudyRecord& study = patients[ex.patient].studies[ex.study];
    std::vector<ImageGrid> out;
    for (size_t i = 0; i < study.images.size(); ++i) {
        if (ex.image >= 0 && static_cast<int>(i) != ex.image) continue;
        out.push_back(augment
                          ? augment_image(study.images[i], AugmentMode::train,
                                          Rng::seeded_child(aug_seed, i).uniform_int(1ULL << 62),
                                          mc.image_side)
                          : augment_image(study.images[i], AugmentMode::eval, 0, mc.image_side));
    }
    return out;
}

// Prompt + target stream for a teacher-forcing example. The previous report
// text comes from prompt_text; sentinel placeholders cover first studies.
inline TokenStream example_stream(const std::vector<PatientRecord>& patients,
                                  const TrainExample& ex, const Vocabulary& vocab,
                                  const TrainConfig& cfg,
                                  const std::optional<PromptText>& prompt_text) {
    const StudyRecord& study = patients[ex.patient].studies[ex.study];
    std::optional<StreamFragment> prompt;
    if (cfg.prompt_source != PromptSource::none) {
        prompt = prompt_text.has_value()
                     ? assemble_prompt(prompt_text->findings, prompt_text->impression,
                                       vocab, cfg.max_prompt_tokens)
                     : assemble_prompt(std::nullopt, std::nullopt, vocab,
                                       cfg.max_prompt_tokens);
    }
    StreamFragment target = assemble_target(study.findings_text, study.impression_text,
                                            vocab, true, cfg.max_target_tokens);
    return make_stream(prompt, target);
}

inline std::optional<PromptText> radiologist_prompt(const std::vector<PatientRecord>& patients,
                                                    const TrainExample& ex) {
    if (ex.study == 0) return std::nullopt;
    const StudyRecord& prev = patients[ex.patient].studies[ex.study - 1];
    return PromptText{prev.findings_text, prev.impression_text};
}

}  // namespace detail

// Mean validation metrics via greedy decoding; checkpoint selection uses the
// observation macro F1.
inline ScoreReport validate_model(ModelState& state, const Vocabulary& vocab,
                                  const std::vector<PatientRecord>& validation,
                                  const TrainConfig& cfg) {
    DecodeConfig dc;
    dc.strategy = DecodeStrategy::greedy;
    dc.max_new_tokens = cfg.decode_max_new_tokens;
    GenerateFn gen = make_model_generator(state, vocab, dc, cfg.max_prompt_tokens);
    PromptMode pm = PromptMode::none;
    if (cfg.prompt_source == PromptSource::radiologist_prev) pm = PromptMode::radiologist_prev;
    if (cfg.prompt_source == PromptSource::generated_prev) pm = PromptMode::generated_prev;
    return evaluate_split(validation, gen, cfg.conditioning, pm, nullptr, false,
                          cfg.max_val_studies);
}

// --- teacher forcing --------------------------------------------------------------

inline std::pair<ModelState, RunManifest> train_teacher_forcing(
    const std::vector<PatientRecord>& train, const std::vector<PatientRecord>& validation,
    const Vocabulary& vocab, ModelState state, const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.stage != Stage::teacher_forcing)
        throw ValidationError("train_teacher_forcing: wrong stage");
    RunManifest manifest;
    manifest.j["config"] = {{"stage", stage_name(cfg.stage)},
                            {"learning_rate", cfg.learning_rate},
                            {"batch_size", cfg.batch_size},
                            {"epochs", cfg.epochs},
                            {"conditioning", conditioning_name(cfg.conditioning)},
                            {"prompt_source", prompt_source_name(cfg.prompt_source)},
                            {"seed", cfg.seed}};
    manifest.j["vocab_hash"] = vocab.hash();

    std::vector<TrainExample> examples = build_examples(train, cfg.conditioning);
    AdamState opt;
    double best_f1 = -1.0;
    ModelState best = state;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order(examples.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        Rng epoch_rng = Rng::seeded_child(cfg.seed, 1000 + epoch);
        epoch_rng.shuffle(order);

        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            size_t n = std::min<size_t>(cfg.batch_size, order.size() - start);
            std::vector<LossGrads> parts(n);
            parallel_for(
                n,
                [&](size_t i) {
                    const TrainExample& ex = examples[order[start + i]];
                    uint64_t aug_seed = Rng::seeded_child(cfg.seed, 7919ULL * epoch + start + i)
                                            .uniform_int(1ULL << 62);
                    std::vector<ImageGrid> imgs = detail::example_images(
                        train, ex, state.config, cfg.augment, aug_seed);
                    std::optional<PromptText> prompt;
                    if (cfg.prompt_source != PromptSource::none)
                        prompt = detail::radiologist_prompt(train, ex);
                    TokenStream stream =
                        detail::example_stream(train, ex, vocab, cfg, prompt);
                    parts[i] = teacher_forcing_backward(state, imgs, stream);
                },
                cfg.threads > 0 ? cfg.threads : std::thread::hardware_concurrency());
            // Deterministic fixed-order reduction.
            std::map<std::string, ad::Mat> grads;
            double loss = 0.0;
            for (size_t i = 0; i < n; ++i) {
                loss += parts[i].loss / n;
                for (auto& [name, g] : parts[i].grads) {
                    auto it = grads.find(name);
                    if (it == grads.end())
                        grads.emplace(name, g / static_cast<double>(n));
                    else
                        it->second += g / static_cast<double>(n);
                }
            }
            if (cfg.grad_clip > 0.0) {
                double norm2 = 0.0;
                for (const auto& [name, g] : grads) norm2 += g.squaredNorm();
                double norm = std::sqrt(norm2);
                if (norm > cfg.grad_clip)
                    for (auto& [name, g] : grads) g *= cfg.grad_clip / norm;
            }
            manifest.j["loss_series"].push_back(loss);
            if (!optimizer_update(state.params, grads, opt, cfg.learning_rate,
                                  cfg.weight_decay))
                manifest.j["skipped_steps"] = manifest.j["skipped_steps"].get<int>() + 1;
        }

        ScoreReport val = validate_model(state, vocab, validation, cfg);
        manifest.j["validations"].push_back({{"epoch", epoch},
                                             {"macro_f1", val.all.macro_f1},
                                             {"reward", val.all.reward},
                                             {"missing_sep_rate", val.all.missing_sep_rate}});
        if (val.all.macro_f1 > best_f1) {
            best_f1 = val.all.macro_f1;
            best = state;
            manifest.j["selected_checkpoint"] = {{"epoch", epoch}, {"macro_f1", best_f1}};
        }
    }
    if (cfg.epochs == 0) best = state;
    return {std::move(best), std::move(manifest)};
}

// --- SCST ------------------------------------------------------------------------

using RewardFn = std::function<double(const std::string&, const std::string&)>;

inline RewardFn make_reward(const std::string& reward_id, ReportEncoder* external = nullptr) {
    if (reward_id == "tf_cosine") {
        auto enc = std::make_shared<TFCosineEncoder>();
        return [enc](const std::string& gen, const std::string& ref) {
            return cosine_reward(gen, ref, *enc).value;
        };
    }
    if (reward_id == "external_cosine") {
        if (!external) throw ValidationError("external_cosine reward needs an encoder");
        return [external](const std::string& gen, const std::string& ref) {
            return cosine_reward(gen, ref, *external).value;
        };
    }
    throw ValidationError("unknown reward id: " + reward_id);
}

struct ScstBatchItem {
    TrainExample example;
    std::optional<PromptText> prompt;  // resolved previous report, if any
};

struct ScstStepResult {
    double loss = 0.0;
    double mean_sample_reward = 0.0;
    double mean_baseline_reward = 0.0;
    std::vector<PromptText> baseline_reports;  // aligned with the batch
};

// One SCST update: greedy baseline, top-k sample, advantage-weighted
// sequence log-probability. Gradients flow only through the sample.
inline ScstStepResult scst_step(const std::vector<PatientRecord>& patients,
                                const std::vector<ScstBatchItem>& batch, ModelState& state,
                                const Vocabulary& vocab, const RewardFn& reward_fn,
                                const TrainConfig& cfg, AdamState& opt, uint64_t step_seed,
                                RunManifest& manifest) {
    if (batch.empty()) throw ValidationError("scst_step: empty batch");
    ScstStepResult result;
    result.baseline_reports.resize(batch.size());
    struct Part {
        double loss = 0.0;
        double sample_reward = 0.0;
        double baseline_reward = 0.0;
        std::map<std::string, ad::Mat> grads;
    };
    std::vector<Part> parts(batch.size());

    DecodeSpecials sp;
    sp.bos = vocab.special_id(Special::BOS);
    sp.sep = vocab.special_id(Special::SEP);
    sp.eos = vocab.special_id(Special::EOS);

    parallel_for(
        batch.size(),
        [&](size_t i) {
            const ScstBatchItem& item = batch[i];
            const StudyRecord& study =
                patients[item.example.patient].studies[item.example.study];
            std::vector<ImageGrid> imgs = detail::example_images(
                patients, item.example, state.config, false, 0);

            TokenStream prompt_stream;
            if (cfg.prompt_source != PromptSource::none) {
                StreamFragment p =
                    item.prompt.has_value()
                        ? assemble_prompt(item.prompt->findings, item.prompt->impression,
                                          vocab, cfg.max_prompt_tokens)
                        : assemble_prompt(std::nullopt, std::nullopt, vocab,
                                          cfg.max_prompt_tokens);
                prompt_stream.token_ids = p.token_ids;
                prompt_stream.section_ids = p.section_ids;
                prompt_stream.prompt_len = static_cast<int>(p.token_ids.size());
                for (int j = 0; j < prompt_stream.prompt_len; ++j)
                    prompt_stream.position_ids.push_back(j);
            }

            EncodedStudy enc = encode_images(imgs, state);
            InferenceSession session(state, enc.features);
            feed_prompt(session, prompt_stream);

            DecodeConfig base_cfg;
            base_cfg.strategy = DecodeStrategy::greedy;
            base_cfg.max_new_tokens = cfg.decode_max_new_tokens;
            DecodeResult baseline =
                generate(session, sp, prompt_stream.prompt_len, base_cfg);

            DecodeConfig samp_cfg;
            samp_cfg.strategy = DecodeStrategy::top_k;
            samp_cfg.k = cfg.sample_k;
            samp_cfg.max_new_tokens = cfg.decode_max_new_tokens;
            samp_cfg.seed = Rng::seeded_child(step_seed, i).uniform_int(1ULL << 62);
            DecodeResult sample = generate(session, sp, prompt_stream.prompt_len, samp_cfg);

            std::string ref =
                format_report(study.findings_text + " " + study.impression_text);
            auto to_text = [&vocab](const DecodeResult& r) {
                SplitSections s = split_sections(r.token_ids, vocab);
                return format_report(s.findings + " " + s.impression);
            };
            SplitSections base_sections = split_sections(baseline.token_ids, vocab);
            result.baseline_reports[i] =
                PromptText{base_sections.findings, base_sections.impression};
            double r_base = reward_fn(
                format_report(base_sections.findings + " " + base_sections.impression), ref);
            double r_samp = reward_fn(to_text(sample), ref);
            if (!std::isfinite(r_base) || !std::isfinite(r_samp))
                throw ValidationError("scst_step: reward not finite");
            double advantage = r_samp - r_base;
            parts[i].sample_reward = r_samp;
            parts[i].baseline_reward = r_base;

            // Tape forward over prompt + sampled sequence; loss contribution
            // is -advantage times the sample's joint log-probability.
            TokenStream full = prompt_stream;
            for (size_t t = 0; t < sample.token_ids.size(); ++t) {
                full.token_ids.push_back(sample.token_ids[t]);
                full.section_ids.push_back(sample.section_ids[t]);
                full.position_ids.push_back(sample.position_ids[t]);
            }
            // Score generated tokens only: the forced begin token is not a
            // model decision.
            int first_scored = full.prompt_len + 1;
            if (first_scored >= static_cast<int>(full.size())) return;  // empty sample
            ModelForward fwd(state, /*training=*/false);
            int enc_node = fwd.tape().constant(enc.features);
            int logp = fwd.sequence_log_prob(full, enc_node, first_scored);
            parts[i].loss = -advantage * fwd.tape().value(logp)(0, 0);
            if (advantage != 0.0) {
                fwd.tape().backward(logp);
                for (const ParamStore::Param& p : state.params.all()) {
                    if (!p.trainable) continue;
                    parts[i].grads[p.name] =
                        -advantage * fwd.tape().grad_or_zero(fwd.param(p.name));
                }
            }
        },
        cfg.threads > 0 ? cfg.threads : std::thread::hardware_concurrency());

    std::map<std::string, ad::Mat> grads;
    double n = static_cast<double>(batch.size());
    for (Part& part : parts) {
        result.loss += part.loss / n;
        result.mean_sample_reward += part.sample_reward / n;
        result.mean_baseline_reward += part.baseline_reward / n;
        for (auto& [name, g] : part.grads) {
            auto it = grads.find(name);
            if (it == grads.end())
                grads.emplace(name, g / n);
            else
                it->second += g / n;
        }
    }
    if (!grads.empty() &&
        !optimizer_update(state.params, grads, opt, cfg.learning_rate, cfg.weight_decay))
        manifest.j["skipped_steps"] = manifest.j["skipped_steps"].get<int>() + 1;
    return result;
}

inline std::pair<ModelState, RunManifest> train_scst(
    const std::vector<PatientRecord>& train, const std::vector<PatientRecord>& validation,
    const Vocabulary& vocab, ModelState state, const TrainConfig& cfg,
    ReportEncoder* external_encoder = nullptr) {
    cfg.validate();
    if (cfg.stage != Stage::scst) throw ValidationError("train_scst: wrong stage");
    RunManifest manifest;
    manifest.j["config"] = {{"stage", stage_name(cfg.stage)},
                            {"learning_rate", cfg.learning_rate},
                            {"batch_size", cfg.batch_size},
                            {"epochs", cfg.epochs},
                            {"conditioning", conditioning_name(cfg.conditioning)},
                            {"prompt_source", prompt_source_name(cfg.prompt_source)},
                            {"reward", cfg.reward_id},
                            {"seed", cfg.seed}};
    manifest.j["vocab_hash"] = vocab.hash();
    RewardFn reward_fn = make_reward(cfg.reward_id, external_encoder);

    // Encoder frozen during SCST; the whole decoder (LoRA and base) trains.
    state.params.set_group_trainable("encoder", false);

    AdamState opt;
    double best_f1 = -1.0;
    ModelState best = state;
    auto validate_and_select = [&](int epoch, int step) {
        ScoreReport val = validate_model(state, vocab, validation, cfg);
        manifest.j["validations"].push_back({{"epoch", epoch},
                                             {"step", step},
                                             {"macro_f1", val.all.macro_f1},
                                             {"reward", val.all.reward}});
        if (val.all.macro_f1 > best_f1) {
            best_f1 = val.all.macro_f1;
            best = state;
            manifest.j["selected_checkpoint"] = {{"epoch", epoch},
                                                 {"step", step},
                                                 {"macro_f1", best_f1}};
        }
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        uint64_t epoch_seed = Rng::seeded_child(cfg.seed, 5000 + epoch).uniform_int(1ULL << 62);
        std::vector<std::vector<ScstBatchItem>> batches;

        if (cfg.prompt_source == PromptSource::generated_prev) {
            // Generated prompts need the cross-minibatch schedule and cache.
            std::vector<int> counts;
            for (const PatientRecord& p : train)
                counts.push_back(static_cast<int>(p.studies.size()));
            BatchPlan plan = plan_epoch(counts, cfg.batch_size, epoch_seed);
            manifest.j["plan"] = plan_to_json(plan);
            PromptCache cache(cfg.batch_size);
            int total_batches = static_cast<int>(plan.batches.size());
            int val_every =
                std::max(1, total_batches / std::max(1, cfg.validations_per_epoch));
            for (int b = 0; b < total_batches; ++b) {
                std::vector<ScstBatchItem> batch;
                for (const ScheduledStudy& s : plan.batches[b]) {
                    ScstBatchItem item;
                    item.example = {s.patient, s.study_index, -1};
                    auto entry = cache.take(s.patient, s.study_index);
                    if (entry)
                        item.prompt = PromptText{entry->findings, entry->impression};
                    batch.push_back(std::move(item));
                }
                ScstStepResult r = scst_step(train, batch, state, vocab, reward_fn, cfg, opt,
                                             Rng::seeded_child(epoch_seed, b).uniform_int(1ULL << 62),
                                             manifest);
                for (size_t i = 0; i < batch.size(); ++i) {
                    const ScheduledStudy& s = plan.batches[b][i];
                    if (s.study_index + 1 < counts[s.patient])
                        cache.put(s.patient, {r.baseline_reports[i].findings,
                                              r.baseline_reports[i].impression});
                }
                manifest.j["loss_series"].push_back(r.loss);
                manifest.j["reward_series"].push_back(r.mean_sample_reward);
                if ((b + 1) % val_every == 0 || b + 1 == total_batches)
                    validate_and_select(epoch, b);
            }
            if (!cache.empty())
                throw ContractError("train_scst: prompt cache not empty at epoch end");
        } else {
            std::vector<TrainExample> examples = build_examples(train, cfg.conditioning);
            std::vector<int> order(examples.size());
            for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
            Rng rng(epoch_seed);
            rng.shuffle(order);
            for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
                size_t nb = std::min<size_t>(cfg.batch_size, order.size() - start);
                std::vector<ScstBatchItem> batch;
                for (size_t i = 0; i < nb; ++i) {
                    ScstBatchItem item;
                    item.example = examples[order[start + i]];
                    if (cfg.prompt_source == PromptSource::radiologist_prev)
                        item.prompt = detail::radiologist_prompt(train, item.example);
                    batch.push_back(std::move(item));
                }
                ScstStepResult r = scst_step(
                    train, batch, state, vocab, reward_fn, cfg, opt,
                    Rng::seeded_child(epoch_seed, start / cfg.batch_size).uniform_int(1ULL << 62),
                    manifest);
                manifest.j["loss_series"].push_back(r.loss);
                manifest.j["reward_series"].push_back(r.mean_sample_reward);
            }
            validate_and_select(epoch, -1);
        }
    }
    if (cfg.epochs == 0) best = state;
    return {std::move(best), std::move(manifest)};
}

}  // namespace longrep
