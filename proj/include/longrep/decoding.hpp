#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "longrep/inference.hpp"
#include "longrep/tokenizer.hpp"

namespace longrep {

enum class DecodeStrategy { greedy, beam, top_k };

struct DecodeConfig {
    DecodeStrategy strategy = DecodeStrategy::greedy;
    int beams = 4;
    int k = 50;
    int max_new_tokens = 256;
    uint64_t seed = 0;

    void validate() const {
        if (max_new_tokens < 1) throw ValidationError("DecodeConfig: max_new_tokens < 1");
        if (strategy == DecodeStrategy::beam && beams < 1)
            throw ValidationError("DecodeConfig: beams < 1");
        if (strategy == DecodeStrategy::top_k && k < 1)
            throw ValidationError("DecodeConfig: k < 1");
    }
};

// Token ids controlling generation; independent of any particular vocabulary
// so toy models can use their own.
struct DecodeSpecials {
    int bos = -1;
    int sep = -1;
    int eos = -1;
};

struct DecodeResult {
    std::vector<int> token_ids;     // starts with the forced begin token
    std::vector<int> section_ids;   // findings section until [SEP], then impression
    std::vector<int> position_ids;
    double log_prob = 0.0;          // joint log-prob of the emitted tokens
    bool finished = false;          // true when [EOS] was produced
};

namespace detail {

inline Eigen::RowVectorXd log_softmax(const Eigen::RowVectorXd& z) {
    double m = z.maxCoeff();
    double lse = m + std::log((z.array() - m).exp().sum());
    return (z.array() - lse).matrix();
}

// Indices of the k largest logits; ties resolved toward lower token ids.
inline std::vector<int> top_k_indices(const Eigen::RowVectorXd& z, int k) {
    std::vector<int> idx(z.size());
    for (int i = 0; i < z.size(); ++i) idx[i] = i;
    int kk = std::min<int>(k, static_cast<int>(z.size()));
    std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(), [&z](int a, int b) {
        if (z(a) != z(b)) return z(a) > z(b);
        return a < b;
    });
    idx.resize(kk);
    return idx;
}

}  // namespace detail

// Autoregressive generation from a stepper whose prompt has already been fed.
// The begin token is forced at start_position; up to max_new_tokens tokens are
// generated after it. Exactly one end token can appear and it is always last.
inline DecodeResult generate(const Stepper& prompt_fed, const DecodeSpecials& sp,
                             int start_position, const DecodeConfig& cfg) {
    cfg.validate();
    if (sp.bos < 0 || sp.sep < 0 || sp.eos < 0)
        throw ValidationError("generate: special token ids unset");

    struct Hyp {
        std::unique_ptr<Stepper> stepper;
        DecodeResult res;
        Eigen::RowVectorXd logits;  // after the last fed token
        bool seen_sep = false;
    };
    auto start_hyp = [&]() {
        Hyp h;
        h.stepper = prompt_fed.clone();
        h.res.token_ids.push_back(sp.bos);
        h.res.section_ids.push_back(CUR_FINDINGS);
        h.res.position_ids.push_back(start_position);
        h.logits = h.stepper->step(sp.bos, CUR_FINDINGS, start_position);
        return h;
    };
    auto push = [&sp](Hyp& h, int token, double lp) {
        bool impression = h.seen_sep || token == sp.sep;
        h.res.token_ids.push_back(token);
        h.res.section_ids.push_back(impression ? CUR_IMPRESSION : CUR_FINDINGS);
        h.res.position_ids.push_back(h.res.position_ids.back() + 1);
        h.res.log_prob += lp;
        if (token == sp.sep) h.seen_sep = true;
        if (token == sp.eos) {
            h.res.finished = true;
            return;
        }
        h.logits = h.stepper->step(token, h.res.section_ids.back(),
                                   h.res.position_ids.back());
    };

    if (cfg.strategy == DecodeStrategy::greedy ||
        (cfg.strategy == DecodeStrategy::beam && cfg.beams == 1)) {
        Hyp h = start_hyp();
        for (int t = 0; t < cfg.max_new_tokens && !h.res.finished; ++t) {
            Eigen::RowVectorXd lp = detail::log_softmax(h.logits);
            int best = 0;
            for (int i = 1; i < lp.size(); ++i)
                if (lp(i) > lp(best)) best = i;  // ties keep the lower id
            push(h, best, lp(best));
        }
        return h.res;
    }

    if (cfg.strategy == DecodeStrategy::top_k) {
        Rng rng(cfg.seed);
        Hyp h = start_hyp();
        for (int t = 0; t < cfg.max_new_tokens && !h.res.finished; ++t) {
            Eigen::RowVectorXd lp = detail::log_softmax(h.logits);
            std::vector<int> cand = detail::top_k_indices(h.logits, cfg.k);
            // Renormalize over the k candidates and sample by inverse CDF.
            double z = 0.0;
            std::vector<double> w(cand.size());
            for (size_t i = 0; i < cand.size(); ++i) {
                w[i] = std::exp(lp(cand[i]));
                z += w[i];
            }
            double u = rng.uniform() * z;
            size_t pick = 0;
            double acc = 0.0;
            for (size_t i = 0; i < cand.size(); ++i) {
                acc += w[i];
                if (u < acc) {
                    pick = i;
                    break;
                }
                pick = i;  // numerical slack lands on the last candidate
            }
            // Log-prob under the renormalized truncated distribution.
            push(h, cand[pick], lp(cand[pick]) - std::log(z));
        }
        return h.res;
    }

    // Beam search over joint log-prob, no length normalization. The best
    // finished hypothesis wins; if none finished, the best partial is
    // returned with finished == false.
    std::vector<Hyp> beams;
    beams.push_back(start_hyp());
    std::vector<DecodeResult> finished;
    for (int t = 0; t < cfg.max_new_tokens && !beams.empty(); ++t) {
        struct Cand {
            int beam;
            int token;
            double lp;      // token log-prob
            double total;   // hypothesis joint log-prob
        };
        std::vector<Cand> cands;
        for (size_t b = 0; b < beams.size(); ++b) {
            Eigen::RowVectorXd lp = detail::log_softmax(beams[b].logits);
            for (int tok : detail::top_k_indices(beams[b].logits, cfg.beams))
                cands.push_back({static_cast<int>(b), tok, lp(tok),
                                 beams[b].res.log_prob + lp(tok)});
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.total != b.total) return a.total > b.total;
            if (a.beam != b.beam) return a.beam < b.beam;
            return a.token < b.token;
        });
        std::vector<Hyp> next;
        for (const Cand& c : cands) {
            if (static_cast<int>(next.size() + finished.size()) >= cfg.beams) break;
            Hyp h;
            h.stepper = beams[c.beam].stepper->clone();
            h.res = beams[c.beam].res;
            h.logits = beams[c.beam].logits;
            h.seen_sep = beams[c.beam].seen_sep;
            push(h, c.token, c.lp);
            if (h.res.finished)
                finished.push_back(h.res);
            else
                next.push_back(std::move(h));
        }
        beams = std::move(next);
    }
    const DecodeResult* best = nullptr;
    for (const DecodeResult& r : finished)
        if (!best || r.log_prob > best->log_prob) best = &r;
    if (best) return *best;
    for (const Hyp& h : beams)
        if (!best || h.res.log_prob > best->log_prob) best = &h.res;
    if (!best) throw ContractError("generate: beam search lost every hypothesis");
    return *best;
}

// End-to-end generation for a real model: encodes the study images, feeds the
// assembled prompt, and decodes the report continuation.
inline DecodeResult generate_report(ModelState& state, const std::vector<ImageGrid>& images,
                                    const TokenStream& prompt_stream, const Vocabulary& vocab,
                                    const DecodeConfig& cfg) {
    EncodedStudy enc = encode_images(images, state);
    InferenceSession session(state, enc.features);
    feed_prompt(session, prompt_stream);
    DecodeSpecials sp;
    sp.bos = vocab.special_id(Special::BOS);
    sp.sep = vocab.special_id(Special::SEP);
    sp.eos = vocab.special_id(Special::EOS);
    return generate(session, sp, prompt_stream.prompt_len, cfg);
}

}  // namespace longrep
