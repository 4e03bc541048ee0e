#pragma once

#include <memory>
#include <vector>

#include "longrep/model.hpp"

namespace longrep {

// Single-step logits source for decoding. Implementations must be cloneable
// so beam search can fork hypotheses mid-sequence.
class Stepper {
  public:
    virtual ~Stepper() = default;
    // Consumes one token and returns the logits row predicting the next one.
    virtual Eigen::RowVectorXd step(int token, int section, int position) = 0;
    virtual std::unique_ptr<Stepper> clone() const = 0;
};

// Incremental decoder evaluation with cached self-attention keys/values and
// precomputed cross-attention projections. Eval mode: LoRA factors are merged
// into the base projections, no dropout. Produces exactly the same logits as
// the full-stream forward pass.
class InferenceSession final : public Stepper {
  public:
    InferenceSession(const ModelState& state, const ad::Mat& enc_features)
        : cfg_(state.config) {
        cfg_.validate();
        const ParamStore& ps = state.params;
        auto get = [&ps](const std::string& n) -> const ad::Mat& { return ps.at(n).value; };
        tok_emb_ = get("dec.tok_emb");
        pos_emb_ = get("dec.pos_emb");
        sec_emb_ = get("dec.sec_emb");
        lnf_g_ = get("dec.lnf_g");
        lnf_b_ = get("dec.lnf_b");
        lm_w_ = get("dec.lm_w");
        lm_b_ = get("dec.lm_b");
        layers_.resize(cfg_.decoder_layers);
        for (int l = 0; l < cfg_.decoder_layers; ++l) {
            std::string p = "dec.L" + std::to_string(l) + ".";
            std::string lp = "lora.L" + std::to_string(l) + ".self.";
            Layer& L = layers_[l];
            L.ln1_g = get(p + "ln1_g"); L.ln1_b = get(p + "ln1_b");
            L.ln2_g = get(p + "ln2_g"); L.ln2_b = get(p + "ln2_b");
            L.ln3_g = get(p + "ln3_g"); L.ln3_b = get(p + "ln3_b");
            L.wq = get(p + "self.wq");
            L.wk = get(p + "self.wk");
            if (cfg_.lora.target_query)
                L.wq = apply_lora_delta(L.wq, get(lp + "q.A"), get(lp + "q.B"),
                                        cfg_.lora.alpha, cfg_.lora.rank);
            if (cfg_.lora.target_key)
                L.wk = apply_lora_delta(L.wk, get(lp + "k.A"), get(lp + "k.B"),
                                        cfg_.lora.alpha, cfg_.lora.rank);
            L.wv = get(p + "self.wv");
            L.wo = get(p + "self.wo");
            L.cross_wq = get(p + "cross.wq");
            L.cross_wo = get(p + "cross.wo");
            L.cross_k = enc_features * get(p + "cross.wk");
            L.cross_v = enc_features * get(p + "cross.wv");
            L.ffn_w1 = get(p + "ffn.w1"); L.ffn_b1 = get(p + "ffn.b1");
            L.ffn_w2 = get(p + "ffn.w2"); L.ffn_b2 = get(p + "ffn.b2");
        }
    }

    Eigen::RowVectorXd step(int token, int section, int position) override {
        if (token < 0 || token >= cfg_.vocab_size)
            throw ValidationError("InferenceSession: token id outside vocabulary");
        if (section < 0 || section >= cfg_.num_sections)
            throw ValidationError("InferenceSession: bad section id");
        if (position < 0 || position >= cfg_.max_positions)
            throw ValidationError("InferenceSession: position outside range");
        Eigen::RowVectorXd h =
            tok_emb_.row(token) + pos_emb_.row(position) + sec_emb_.row(section);
        int dh = cfg_.d_model / cfg_.heads;
        for (Layer& L : layers_) {
            Eigen::RowVectorXd x = layer_norm(h, L.ln1_g, L.ln1_b);
            Eigen::RowVectorXd q = x * L.wq;
            L.k_cache.conservativeResize(L.k_cache.rows() + 1, cfg_.d_model);
            L.k_cache.row(L.k_cache.rows() - 1) = x * L.wk;
            L.v_cache.conservativeResize(L.v_cache.rows() + 1, cfg_.d_model);
            L.v_cache.row(L.v_cache.rows() - 1) = x * L.wv;
            h += attend(q, L.k_cache, L.v_cache, dh) * L.wo;

            x = layer_norm(h, L.ln2_g, L.ln2_b);
            h += attend(x * L.cross_wq, L.cross_k, L.cross_v, dh) * L.cross_wo;

            x = layer_norm(h, L.ln3_g, L.ln3_b);
            Eigen::RowVectorXd f = x * L.ffn_w1 + L.ffn_b1;
            for (int i = 0; i < f.size(); ++i) f(i) = gelu(f(i));
            h += (f * L.ffn_w2 + L.ffn_b2).eval();
        }
        return layer_norm(h, lnf_g_, lnf_b_) * lm_w_ + lm_b_;
    }

    std::unique_ptr<Stepper> clone() const override {
        return std::make_unique<InferenceSession>(*this);
    }

  private:
    struct Layer {
        ad::Mat ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
        ad::Mat wq, wk, wv, wo;
        ad::Mat cross_wq, cross_wo, cross_k, cross_v;
        ad::Mat ffn_w1, ffn_b1, ffn_w2, ffn_b2;
        ad::Mat k_cache, v_cache;  // grown one row per step
    };

    static Eigen::RowVectorXd layer_norm(const Eigen::RowVectorXd& x, const ad::Mat& g,
                                         const ad::Mat& b) {
        double mu = x.mean();
        double var = (x.array() - mu).square().mean();
        double inv = 1.0 / std::sqrt(var + 1e-5);
        return (((x.array() - mu) * inv) * g.row(0).array() + b.row(0).array()).matrix();
    }

    static double gelu(double v) {
        const double c = 0.7978845608028654, k = 0.044715;
        return 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v)));
    }

    Eigen::RowVectorXd attend(const Eigen::RowVectorXd& q, const ad::Mat& keys,
                              const ad::Mat& values, int dh) const {
        Eigen::RowVectorXd out(q.size());
        double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        int heads = static_cast<int>(q.size()) / dh;
        for (int hd = 0; hd < heads; ++hd) {
            Eigen::RowVectorXd qh = q.segment(hd * dh, dh);
            Eigen::VectorXd scores =
                (keys.middleCols(hd * dh, dh) * qh.transpose()) * inv_sqrt;
            double m = scores.maxCoeff();
            Eigen::VectorXd p = (scores.array() - m).exp();
            p /= p.sum();
            out.segment(hd * dh, dh) =
                (p.transpose() * values.middleCols(hd * dh, dh)).row(0);
        }
        return out;
    }

    ModelConfig cfg_;
    ad::Mat tok_emb_, pos_emb_, sec_emb_, lnf_g_, lnf_b_, lm_w_, lm_b_;
    std::vector<Layer> layers_;
};

// Feeds an assembled prompt through a stepper so generation can start at the
// forced beginning-of-report token. Returns the logits after the last prompt
// token (unused when the first generated token is forced).
inline void feed_prompt(Stepper& stepper, const TokenStream& stream) {
    for (int i = 0; i < stream.prompt_len; ++i)
        stepper.step(stream.token_ids[i], stream.section_ids[i], stream.position_ids[i]);
}

}  // namespace longrep
