// Command-line surface for the longitudinal report generation pipeline:
// corpus generation, tokenizer training, two-stage training, generation,
// evaluation, and the conditioning comparison.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>

#include <CLI11.hpp>

#include "longrep/checkpoint.hpp"
#include "longrep/corpus_io.hpp"
#include "longrep/eval.hpp"
#include "longrep/reward_http.hpp"
#include "longrep/training.hpp"

using namespace longrep;

namespace {

// key=value configuration file; '#' starts a comment. Unknown keys are usage
// errors so typos cannot silently revert to defaults.
std::map<std::string, std::string> load_config(const std::string& path,
                                               const std::set<std::string>& allowed) {
    std::map<std::string, std::string> kv;
    if (path.empty()) return kv;
    std::ifstream is(path);
    if (!is) throw IoError("config file not found: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError("config line " + std::to_string(lineno) +
                                  ": expected key=value");
        auto trim = [](std::string s) {
            auto a = s.find_first_not_of(" \t\r");
            auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (!allowed.count(key))
            throw ValidationError("config line " + std::to_string(lineno) +
                                  ": unknown key '" + key + "'");
        kv[key] = value;
    }
    return kv;
}

template <typename T>
void apply(const std::map<std::string, std::string>& kv, const std::string& key, T& out) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    if constexpr (std::is_same_v<T, std::string>) {
        out = it->second;
    } else if constexpr (std::is_same_v<T, bool>) {
        out = it->second == "1" || it->second == "true";
    } else if constexpr (std::is_floating_point_v<T>) {
        out = std::stod(it->second);
    } else {
        out = static_cast<T>(std::stoll(it->second));
    }
}

Conditioning parse_conditioning(const std::string& s) {
    if (s == "single") return Conditioning::single_image;
    if (s == "multi") return Conditioning::multi_image;
    if (s == "longitudinal") return Conditioning::longitudinal;
    throw ValidationError("conditioning must be single|multi|longitudinal, got " + s);
}

PromptSource parse_prompt_source(const std::string& s) {
    if (s == "none") return PromptSource::none;
    if (s == "radiologist") return PromptSource::radiologist_prev;
    if (s == "generated") return PromptSource::generated_prev;
    throw ValidationError("prompt must be none|radiologist|generated, got " + s);
}

PromptMode eval_prompt_mode(const std::string& s) {
    if (s == "none") return PromptMode::none;
    if (s == "sentinel") return PromptMode::sentinel;
    if (s == "radiologist") return PromptMode::radiologist_prev;
    if (s == "generated") return PromptMode::generated_prev;
    throw ValidationError("prompt must be none|sentinel|radiologist|generated, got " + s);
}

DecodeStrategy parse_strategy(const std::string& s) {
    if (s == "greedy") return DecodeStrategy::greedy;
    if (s == "beam") return DecodeStrategy::beam;
    if (s == "top_k") return DecodeStrategy::top_k;
    throw ValidationError("strategy must be greedy|beam|top_k, got " + s);
}

const std::vector<PatientRecord>& pick_split(const CorpusSplit& c, const std::string& name) {
    if (name == "train") return c.train;
    if (name == "validation") return c.validation;
    if (name == "test") return c.test;
    throw ValidationError("split must be train|validation|test, got " + name);
}

std::vector<std::string> split_texts(const std::vector<PatientRecord>& patients) {
    std::vector<std::string> texts;
    for (const PatientRecord& p : patients)
        for (const StudyRecord& s : p.studies) {
            texts.push_back(s.findings_text);
            texts.push_back(s.impression_text);
        }
    return texts;
}

ModelConfig desk_model_config(int vocab_size, const std::map<std::string, std::string>& kv) {
    ModelConfig mc;
    mc.d_model = 64;        // reference: 768
    mc.decoder_layers = 2;  // reference: 6
    mc.heads = 4;           // reference: 12
    mc.ffn_width = 256;
    mc.vocab_size = vocab_size;
    mc.max_positions = 512;
    mc.image_side = 64;
    mc.patch_size = 16;
    mc.lora.rank = 8;     // reference value
    mc.lora.alpha = 32.0; // reference value
    apply(kv, "d_model", mc.d_model);
    apply(kv, "decoder_layers", mc.decoder_layers);
    apply(kv, "heads", mc.heads);
    apply(kv, "ffn_width", mc.ffn_width);
    apply(kv, "image_side", mc.image_side);
    apply(kv, "patch_size", mc.patch_size);
    apply(kv, "lora_rank", mc.lora.rank);
    apply(kv, "lora_alpha", mc.lora.alpha);
    apply(kv, "model_seed", mc.seed);
    return mc;
}

// Model text can contain arbitrary bytes early in training; replace invalid
// UTF-8 rather than fail serialization.
std::string dump_json(const nlohmann::json& j) {
    return j.dump(2, ' ', false, nlohmann::json::error_handler_t::replace);
}

void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << dump_json(j) << "\n";
}

int cmd_corpus(const std::string& config_path, const std::string& out) {
    std::set<std::string> keys = {"seed",          "train_patients", "val_patients",
                                  "test_patients", "persistence",    "image_side",
                                  "uncertain_rate"};
    auto kv = load_config(config_path, keys);
    GeneratorConfig gc;
    apply(kv, "seed", gc.seed);
    apply(kv, "train_patients", gc.num_train_patients);
    apply(kv, "val_patients", gc.num_val_patients);
    apply(kv, "test_patients", gc.num_test_patients);
    apply(kv, "persistence", gc.persistence);
    apply(kv, "image_side", gc.image_side);
    apply(kv, "uncertain_rate", gc.uncertain_rate);
    gc.validate();
    CorpusSplit corpus = generate_corpus(gc);
    write_corpus(out, corpus);
    auto count = [](const std::vector<PatientRecord>& ps) {
        int n = 0;
        for (const auto& p : ps) n += static_cast<int>(p.studies.size());
        return n;
    };
    std::cout << "train: " << corpus.train.size() << " patients, " << count(corpus.train)
              << " studies\n"
              << "validation: " << corpus.validation.size() << " patients, "
              << count(corpus.validation) << " studies\n"
              << "test: " << corpus.test.size() << " patients, " << count(corpus.test)
              << " studies\n"
              << "measured persistence: " << measured_persistence(corpus.train) << "\n"
              << "corpus hash: " << corpus_hash(corpus) << "\n";
    return 0;
}

int cmd_vocab(const std::string& corpus_path, int budget, const std::string& out) {
    CorpusSplit corpus = read_corpus(corpus_path);
    Vocabulary vocab = train_bpe(split_texts(corpus.train), budget);
    vocab.save(out);
    std::cout << "text vocab: " << vocab.text_vocab_size()
              << ", total: " << vocab.total_vocab_size() << ", hash: " << vocab.hash()
              << "\n";
    return 0;
}

struct TrainArgs {
    std::string config_path, corpus_path, vocab_path, init_checkpoint;
    std::string out_checkpoint, out_manifest;
    std::string stage = "tf", conditioning = "multi", prompt = "none";
    std::string reward_endpoint;
};

int cmd_train(const TrainArgs& args) {
    std::set<std::string> keys = {
        "learning_rate", "batch_size",     "epochs",      "seed",        "weight_decay",
        "grad_clip",     "threads",        "max_val_studies", "sample_k",
        "decode_max_new_tokens",           "validations_per_epoch",      "reward",
        "d_model",       "decoder_layers", "heads",       "ffn_width",   "image_side",
        "patch_size",    "lora_rank",      "lora_alpha",  "model_seed",  "augment",
        "max_prompt_tokens", "max_target_tokens"};
    auto kv = load_config(args.config_path, keys);

    CorpusSplit corpus = read_corpus(args.corpus_path);
    Vocabulary vocab = Vocabulary::load(args.vocab_path);

    TrainConfig cfg;
    cfg.conditioning = parse_conditioning(args.conditioning);
    cfg.prompt_source = parse_prompt_source(args.prompt);
    if (args.stage == "tf") {
        cfg.stage = Stage::teacher_forcing;
        cfg.learning_rate = 5e-5;  // reference value
    } else if (args.stage == "scst") {
        cfg.stage = Stage::scst;
        cfg.learning_rate = 5e-6;  // reference value
        cfg.reward_id = "tf_cosine";
        cfg.validations_per_epoch = 10;  // reference cadence
    } else {
        throw ValidationError("stage must be tf|scst, got " + args.stage);
    }
    apply(kv, "learning_rate", cfg.learning_rate);
    apply(kv, "batch_size", cfg.batch_size);
    apply(kv, "epochs", cfg.epochs);
    apply(kv, "seed", cfg.seed);
    apply(kv, "weight_decay", cfg.weight_decay);
    apply(kv, "grad_clip", cfg.grad_clip);
    apply(kv, "threads", cfg.threads);
    apply(kv, "max_val_studies", cfg.max_val_studies);
    apply(kv, "sample_k", cfg.sample_k);
    apply(kv, "decode_max_new_tokens", cfg.decode_max_new_tokens);
    apply(kv, "validations_per_epoch", cfg.validations_per_epoch);
    apply(kv, "reward", cfg.reward_id);
    apply(kv, "augment", cfg.augment);
    apply(kv, "max_prompt_tokens", cfg.max_prompt_tokens);
    apply(kv, "max_target_tokens", cfg.max_target_tokens);
    cfg.validate();

    ModelState state;
    if (!args.init_checkpoint.empty()) {
        state = load_checkpoint(args.init_checkpoint);
        if (state.config.vocab_size != vocab.total_vocab_size())
            throw ValidationError("checkpoint vocabulary size does not match the vocab file");
    } else if (cfg.stage == Stage::scst) {
        throw ValidationError(
            "scst requires --init-checkpoint with a teacher-forced model");
    } else {
        state = init_model(desk_model_config(vocab.total_vocab_size(), kv));
    }

    std::unique_ptr<HttpReportEncoder> external;
    if (!args.reward_endpoint.empty()) {
        auto colon = args.reward_endpoint.rfind(':');
        if (colon == std::string::npos)
            throw ValidationError("--reward-endpoint must be host:port");
        external = std::make_unique<HttpReportEncoder>(
            args.reward_endpoint.substr(0, colon),
            std::stoi(args.reward_endpoint.substr(colon + 1)));
        cfg.reward_id = "external_cosine";
    }

    std::pair<ModelState, RunManifest> result =
        cfg.stage == Stage::teacher_forcing
            ? train_teacher_forcing(corpus.train, corpus.validation, vocab, std::move(state),
                                    cfg)
            : train_scst(corpus.train, corpus.validation, vocab, std::move(state), cfg,
                         external.get());
    result.second.j["corpus_hash"] = corpus_hash(corpus);
    save_checkpoint(args.out_checkpoint, result.first);
    write_json(args.out_manifest, result.second.j);
    if (cfg.prompt_source == PromptSource::generated_prev &&
        result.second.j.contains("plan")) {
        std::filesystem::path plan_path =
            std::filesystem::path(args.out_manifest).replace_extension(".plan.json");
        write_json(plan_path.string(), result.second.j["plan"]);
        std::cout << "plan: " << plan_path.string() << "\n";
    }
    std::cout << "checkpoint: " << args.out_checkpoint << "\nmanifest: " << args.out_manifest
              << "\n";
    return 0;
}

struct GenerateArgs {
    std::string checkpoint, corpus_path, vocab_path, split = "test", study_id;
    std::string strategy = "beam", prompt = "sentinel", out;
    int beams = 4, k = 50, max_new_tokens = 160;
    uint64_t seed = 0;
};

int cmd_generate(const GenerateArgs& args) {
    CorpusSplit corpus = read_corpus(args.corpus_path);
    Vocabulary vocab = Vocabulary::load(args.vocab_path);
    ModelState state = load_checkpoint(args.checkpoint);
    DecodeConfig dc;
    dc.strategy = parse_strategy(args.strategy);
    dc.beams = args.beams;
    dc.k = args.k;
    dc.max_new_tokens = args.max_new_tokens;
    dc.seed = args.seed;
    PromptMode pm = eval_prompt_mode(args.prompt);
    GenerateFn gen = make_model_generator(state, vocab, dc);

    const std::vector<PatientRecord>& split = pick_split(corpus, args.split);
    nlohmann::json out = nlohmann::json::array();
    bool found = args.study_id.empty();
    for (const PatientRecord& patient : split) {
        std::optional<PromptText> prev;
        for (size_t k2 = 0; k2 < patient.studies.size(); ++k2) {
            const StudyRecord& study = patient.studies[k2];
            std::string sid = study.patient_id + "/" + std::to_string(study.study_index);
            PromptSpec spec;
            if (pm != PromptMode::none) {
                spec.use_prompt = true;
                if (pm == PromptMode::radiologist_prev && k2 > 0)
                    spec.prev = PromptText{patient.studies[k2 - 1].findings_text,
                                           patient.studies[k2 - 1].impression_text};
                else if (pm == PromptMode::generated_prev && k2 > 0)
                    spec.prev = prev;
            }
            if (args.study_id.empty() || args.study_id == sid) {
                SplitSections s = gen(study.images, spec);
                if (pm == PromptMode::generated_prev)
                    prev = PromptText{s.findings, s.impression};
                out.push_back({{"study", sid},
                               {"findings", s.findings},
                               {"impression", s.impression},
                               {"missing_sep", s.missing_sep}});
                found = true;
            } else if (pm == PromptMode::generated_prev) {
                SplitSections s = gen(study.images, spec);
                prev = PromptText{s.findings, s.impression};
            }
        }
    }
    if (!found) throw ValidationError("unknown study id: " + args.study_id);
    if (args.out.empty())
        std::cout << dump_json(out) << "\n";
    else
        write_json(args.out, out);
    return 0;
}

struct EvaluateArgs {
    std::string checkpoint, corpus_path, vocab_path, split = "test";
    std::string conditioning = "multi", prompt = "none", subset = "all", out;
    int max_new_tokens = 160;
};

int cmd_evaluate(const EvaluateArgs& args) {
    CorpusSplit corpus = read_corpus(args.corpus_path);
    Vocabulary vocab = Vocabulary::load(args.vocab_path);
    ModelState state = load_checkpoint(args.checkpoint);
    DecodeConfig dc;
    dc.strategy = DecodeStrategy::greedy;
    dc.max_new_tokens = args.max_new_tokens;
    GenerateFn gen = make_model_generator(state, vocab, dc);
    ScoreReport rep =
        evaluate_split(pick_split(corpus, args.split), gen,
                       parse_conditioning(args.conditioning), eval_prompt_mode(args.prompt),
                       nullptr, args.subset == "has-previous");
    if (args.subset != "all" && args.subset != "has-previous")
        throw ValidationError("subset must be all|has-previous");
    if (args.out.empty())
        std::cout << dump_json(rep.to_json()) << "\n";
    else
        write_json(args.out, rep.to_json());
    return 0;
}

struct CompareArgs {
    std::string config_path, corpus_path, vocab_path, out;
    int seeds = 3;
};

int cmd_compare(const CompareArgs& args) {
    std::set<std::string> keys = {"learning_rate", "batch_size", "epochs",
                                  "threads",       "max_val_studies",
                                  "d_model",       "decoder_layers", "heads",
                                  "ffn_width",     "image_side",     "patch_size",
                                  "lora_rank",     "lora_alpha",     "model_seed",
                                  "decode_max_new_tokens"};
    auto kv = load_config(args.config_path, keys);
    CorpusSplit corpus = read_corpus(args.corpus_path);
    Vocabulary vocab = Vocabulary::load(args.vocab_path);

    struct ModeSpec {
        Conditioning conditioning;
        PromptSource prompt_source;
        PromptMode eval_prompt;
    };
    std::vector<ModeSpec> modes = {
        {Conditioning::single_image, PromptSource::none, PromptMode::none},
        {Conditioning::multi_image, PromptSource::none, PromptMode::none},
        {Conditioning::longitudinal, PromptSource::radiologist_prev,
         PromptMode::radiologist_prev}};

    nlohmann::json table = nlohmann::json::array();
    ModelState last_longitudinal;
    for (const ModeSpec& mode : modes) {
        std::vector<double> f1s;
        for (int s = 0; s < args.seeds; ++s) {
            TrainConfig cfg;
            cfg.stage = Stage::teacher_forcing;
            cfg.conditioning = mode.conditioning;
            cfg.prompt_source = mode.prompt_source;
            cfg.seed = 100 + s;
            cfg.epochs = 2;
            apply(kv, "learning_rate", cfg.learning_rate);
            apply(kv, "batch_size", cfg.batch_size);
            apply(kv, "epochs", cfg.epochs);
            apply(kv, "threads", cfg.threads);
            apply(kv, "max_val_studies", cfg.max_val_studies);
            apply(kv, "decode_max_new_tokens", cfg.decode_max_new_tokens);
            ModelConfig mc = desk_model_config(vocab.total_vocab_size(), kv);
            mc.seed = 100 + s;
            auto [state, manifest] = train_teacher_forcing(
                corpus.train, corpus.validation, vocab, init_model(mc), cfg);

            DecodeConfig dc;
            dc.strategy = DecodeStrategy::greedy;
            dc.max_new_tokens = cfg.decode_max_new_tokens;
            GenerateFn gen = make_model_generator(state, vocab, dc);
            ScoreReport rep = evaluate_split(corpus.test, gen, mode.conditioning,
                                             mode.eval_prompt);
            f1s.push_back(rep.all.macro_f1);
            if (mode.conditioning == Conditioning::longitudinal && s == args.seeds - 1)
                last_longitudinal = std::move(state);
        }
        double mean = 0.0;
        for (double f : f1s) mean += f / f1s.size();
        double var = 0.0;
        for (double f : f1s) var += (f - mean) * (f - mean) / f1s.size();
        table.push_back({{"conditioning", conditioning_name(mode.conditioning)},
                         {"macro_f1_mean", mean},
                         {"macro_f1_std", std::sqrt(var)},
                         {"seeds", f1s}});
        std::cout << conditioning_name(mode.conditioning) << ": macro F1 " << mean << " +/- "
                  << std::sqrt(var) << "\n";
    }

    // With/without the previous report on predecessor-having test studies.
    nlohmann::json with_prev, without_prev;
    {
        TrainConfig cfg;
        cfg.decode_max_new_tokens = 160;
        apply(kv, "decode_max_new_tokens", cfg.decode_max_new_tokens);
        DecodeConfig dc;
        dc.strategy = DecodeStrategy::greedy;
        dc.max_new_tokens = cfg.decode_max_new_tokens;
        GenerateFn gen = make_model_generator(last_longitudinal, vocab, dc);
        ScoreReport w = evaluate_split(corpus.test, gen, Conditioning::longitudinal,
                                       PromptMode::radiologist_prev, nullptr, true);
        ScoreReport wo = evaluate_split(corpus.test, gen, Conditioning::longitudinal,
                                        PromptMode::sentinel, nullptr, true);
        with_prev = w.to_json()["aggregates_has_previous"];
        without_prev = wo.to_json()["aggregates_has_previous"];
        std::cout << "has-previous subset: with prompt F1 "
                  << w.has_previous.macro_f1 << ", without " << wo.has_previous.macro_f1
                  << "\n";
    }
    nlohmann::json out;
    out["conditioning_table"] = table;
    out["previous_report_ablation"] = {{"with_previous", with_prev},
                                       {"without_previous", without_prev}};
    if (!args.out.empty()) write_json(args.out, out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Longitudinal multi-image report generation pipeline"};
    app.require_subcommand(1);

    std::string config_path, out_path;

    auto* corpus_cmd = app.add_subcommand("corpus", "generate and write a synthetic corpus");
    corpus_cmd->add_option("--config", config_path, "key=value config file");
    corpus_cmd->add_option("--out", out_path, "corpus manifest path")->required();

    std::string vocab_corpus, vocab_out;
    int vocab_budget = 512;
    auto* vocab_cmd = app.add_subcommand("vocab", "train the byte-pair tokenizer");
    vocab_cmd->add_option("--corpus", vocab_corpus, "corpus manifest")->required();
    vocab_cmd->add_option("--budget", vocab_budget, "text vocabulary budget (>= 256)");
    vocab_cmd->add_option("--out", vocab_out, "vocabulary file")->required();

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "teacher forcing or SCST training");
    train_cmd->add_option("--config", train_args.config_path, "key=value config file");
    train_cmd->add_option("--corpus", train_args.corpus_path)->required();
    train_cmd->add_option("--vocab", train_args.vocab_path)->required();
    train_cmd->add_option("--stage", train_args.stage, "tf|scst");
    train_cmd->add_option("--conditioning", train_args.conditioning,
                          "single|multi|longitudinal");
    train_cmd->add_option("--prompt", train_args.prompt, "none|radiologist|generated");
    train_cmd->add_option("--init-checkpoint", train_args.init_checkpoint);
    train_cmd->add_option("--out-checkpoint", train_args.out_checkpoint)->required();
    train_cmd->add_option("--out-manifest", train_args.out_manifest)->required();
    train_cmd->add_option("--reward-endpoint", train_args.reward_endpoint,
                          "host:port of an external embedding service");

    GenerateArgs gen_args;
    auto* gen_cmd = app.add_subcommand("generate", "decode reports for a split or study");
    gen_cmd->add_option("--checkpoint", gen_args.checkpoint)->required();
    gen_cmd->add_option("--corpus", gen_args.corpus_path)->required();
    gen_cmd->add_option("--vocab", gen_args.vocab_path)->required();
    gen_cmd->add_option("--split", gen_args.split, "train|validation|test");
    gen_cmd->add_option("--study", gen_args.study_id, "patient_id/study_index");
    gen_cmd->add_option("--strategy", gen_args.strategy, "greedy|beam|top_k");
    gen_cmd->add_option("--beams", gen_args.beams);
    gen_cmd->add_option("--k", gen_args.k);
    gen_cmd->add_option("--max-new-tokens", gen_args.max_new_tokens);
    gen_cmd->add_option("--seed", gen_args.seed);
    gen_cmd->add_option("--prompt", gen_args.prompt, "none|sentinel|radiologist|generated");
    gen_cmd->add_option("--out", gen_args.out, "output JSON (default stdout)");

    EvaluateArgs eval_args;
    auto* eval_cmd = app.add_subcommand("evaluate", "score a checkpoint on a split");
    eval_cmd->add_option("--checkpoint", eval_args.checkpoint)->required();
    eval_cmd->add_option("--corpus", eval_args.corpus_path)->required();
    eval_cmd->add_option("--vocab", eval_args.vocab_path)->required();
    eval_cmd->add_option("--split", eval_args.split);
    eval_cmd->add_option("--conditioning", eval_args.conditioning);
    eval_cmd->add_option("--prompt", eval_args.prompt);
    eval_cmd->add_option("--subset", eval_args.subset, "all|has-previous");
    eval_cmd->add_option("--max-new-tokens", eval_args.max_new_tokens);
    eval_cmd->add_option("--out", eval_args.out, "ScoreReport JSON (default stdout)");

    CompareArgs cmp_args;
    auto* cmp_cmd = app.add_subcommand(
        "compare", "train and evaluate the three conditioning modes over several seeds");
    cmp_cmd->add_option("--config", cmp_args.config_path);
    cmp_cmd->add_option("--corpus", cmp_args.corpus_path)->required();
    cmp_cmd->add_option("--vocab", cmp_args.vocab_path)->required();
    cmp_cmd->add_option("--seeds", cmp_args.seeds);
    cmp_cmd->add_option("--out", cmp_args.out, "comparison JSON");

    try {
        app.parse(argc, argv);
        if (corpus_cmd->parsed()) return cmd_corpus(config_path, out_path);
        if (vocab_cmd->parsed()) return cmd_vocab(vocab_corpus, vocab_budget, vocab_out);
        if (train_cmd->parsed()) return cmd_train(train_args);
        if (gen_cmd->parsed()) return cmd_generate(gen_args);
        if (eval_cmd->parsed()) return cmd_evaluate(eval_args);
        if (cmp_cmd->parsed()) return cmd_compare(cmp_args);
        return 1;
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const ValidationError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
