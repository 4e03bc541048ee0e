#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "longrep/autodiff.hpp"
#include "longrep/corpus.hpp"
#include "longrep/tokenizer.hpp"

namespace longrep {

struct LoraConfig {
    int rank = 8;
    double alpha = 32.0;
    double dropout = 0.1;
    bool target_query = true;
    bool target_key = true;

    int num_targets() const { return (target_query ? 1 : 0) + (target_key ? 1 : 0); }
};

struct ModelConfig {
    int d_model = 64;
    int decoder_layers = 2;
    int heads = 4;
    int ffn_width = 256;
    int vocab_size = 0;  // total, incl. specials
    int max_positions = 512;
    int num_sections = kNumSections;
    int image_side = 64;   // side after augmentation crop
    int patch_size = 16;
    int max_images = kMaxImagesPerStudy;
    LoraConfig lora;
    double dropout = 0.0;
    uint64_t seed = 0;

    int patches_per_image() const {
        int g = image_side / patch_size;
        return g * g;
    }

    void validate() const {
        if (d_model <= 0 || heads <= 0 || d_model % heads != 0)
            throw ValidationError("ModelConfig: d_model must be divisible by heads");
        if (vocab_size <= 0) throw ValidationError("ModelConfig: vocab_size unset");
        if (decoder_layers < 1) throw ValidationError("ModelConfig: decoder_layers < 1");
        if (image_side % patch_size != 0)
            throw ValidationError("ModelConfig: image_side not a multiple of patch_size");
        if (lora.rank < 1) throw ValidationError("ModelConfig: lora.rank must be >= 1");
        if (max_positions < 2) throw ValidationError("ModelConfig: max_positions too small");
    }
};

// LoRA parameters added by rank-r adapters on the targeted projections:
// layers x targets x (d*r + r*d).
inline int64_t lora_param_count(int layers, int d_model, int rank, int num_targets) {
    return static_cast<int64_t>(layers) * num_targets *
           (static_cast<int64_t>(d_model) * rank + static_cast<int64_t>(rank) * d_model);
}

// W_eff = W + (alpha/rank) * B * A. Base weight untouched.
inline ad::Mat apply_lora_delta(const ad::Mat& w, const ad::Mat& a, const ad::Mat& b,
                                double alpha, int rank) {
    if (b.rows() != w.rows() || a.cols() != w.cols() || b.cols() != a.rows() ||
        a.rows() != rank)
        throw ValidationError("apply_lora_delta: factor shapes incompatible");
    return w + (alpha / rank) * (b * a);
}

// Named parameter tensors with trainability flags, grouped for freezing.
class ParamStore {
  public:
    struct Param {
        std::string name;
        std::string group;  // "encoder", "decoder", "lora"
        ad::Mat value;
        bool trainable = true;
    };

    void add(const std::string& name, const std::string& group, ad::Mat value) {
        if (index_.count(name)) throw ValidationError("duplicate parameter " + name);
        index_[name] = params_.size();
        params_.push_back({name, group, std::move(value), true});
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    Param& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("unknown parameter " + name);
        return params_[it->second];
    }
    const Param& at(const std::string& name) const {
        return const_cast<ParamStore*>(this)->at(name);
    }

    std::vector<Param>& all() { return params_; }
    const std::vector<Param>& all() const { return params_; }

    void set_group_trainable(const std::string& group, bool trainable) {
        for (Param& p : params_)
            if (p.group == group) p.trainable = trainable;
    }

    int64_t count_values() const {
        int64_t n = 0;
        for (const Param& p : params_) n += p.value.size();
        return n;
    }

    uint64_t hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const Param& p : params_) {
            h = fnv1a(p.name.data(), p.name.size(), h);
            h = fnv1a(p.value.data(), sizeof(double) * p.value.size(), h);
        }
        return h;
    }

  private:
    std::vector<Param> params_;
    std::map<std::string, size_t> index_;
};

struct ModelState {
    ModelConfig config;
    ParamStore params;
};

inline ModelState init_model(const ModelConfig& config) {
    config.validate();
    ModelState state;
    state.config = config;
    Rng rng(config.seed);
    const int d = config.d_model;
    auto gauss = [&rng](int r, int c, double scale) {
        ad::Mat m(r, c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) m(i, j) = scale * rng.gaussian();
        return m;
    };
    auto zeros = [](int r, int c) { return ad::Mat::Zero(r, c); };
    auto ones = [](int r, int c) { return ad::Mat::Ones(r, c); };

    const double w_scale = 0.02;
    int patch_dim = config.patch_size * config.patch_size;
    state.params.add("enc.patch_w", "encoder", gauss(patch_dim, d, w_scale));
    state.params.add("enc.patch_b", "encoder", zeros(1, d));
    state.params.add("enc.pos", "encoder", gauss(config.patches_per_image(), d, w_scale));
    state.params.add("enc.ln_g", "encoder", ones(1, d));
    state.params.add("enc.ln_b", "encoder", zeros(1, d));
    state.params.add("enc.proj_w", "encoder", gauss(d, d, w_scale));
    state.params.add("enc.proj_b", "encoder", zeros(1, d));

    state.params.add("dec.tok_emb", "decoder", gauss(config.vocab_size, d, w_scale));
    state.params.add("dec.pos_emb", "decoder", gauss(config.max_positions, d, w_scale));
    state.params.add("dec.sec_emb", "decoder", gauss(config.num_sections, d, w_scale));
    for (int l = 0; l < config.decoder_layers; ++l) {
        std::string p = "dec.L" + std::to_string(l) + ".";
        for (const char* ln : {"ln1", "ln2", "ln3"}) {
            state.params.add(p + ln + "_g", "decoder", ones(1, d));
            state.params.add(p + ln + "_b", "decoder", zeros(1, d));
        }
        for (const char* blk : {"self", "cross"})
            for (const char* w : {"wq", "wk", "wv", "wo"})
                state.params.add(p + blk + "." + w, "decoder", gauss(d, d, w_scale));
        state.params.add(p + "ffn.w1", "decoder", gauss(d, config.ffn_width, w_scale));
        state.params.add(p + "ffn.b1", "decoder", zeros(1, config.ffn_width));
        state.params.add(p + "ffn.w2", "decoder", gauss(config.ffn_width, d, w_scale));
        state.params.add(p + "ffn.b2", "decoder", zeros(1, d));
    }
    state.params.add("dec.lnf_g", "decoder", ones(1, d));
    state.params.add("dec.lnf_b", "decoder", zeros(1, d));
    state.params.add("dec.lm_w", "decoder", gauss(d, config.vocab_size, w_scale));
    state.params.add("dec.lm_b", "decoder", zeros(1, config.vocab_size));

    // LoRA: B zero so the adapted model equals the base model at init.
    const int r = config.lora.rank;
    for (int l = 0; l < config.decoder_layers; ++l) {
        std::string p = "lora.L" + std::to_string(l) + ".self.";
        if (config.lora.target_query) {
            state.params.add(p + "q.B", "lora", zeros(d, r));
            state.params.add(p + "q.A", "lora", gauss(r, d, w_scale));
        }
        if (config.lora.target_key) {
            state.params.add(p + "k.B", "lora", zeros(d, r));
            state.params.add(p + "k.A", "lora", gauss(r, d, w_scale));
        }
    }
    return state;
}

// --- image augmentation ------------------------------------------------------

// Rotation about the image centre (bilinear, clamp-to-edge) followed by a crop
// at (row0, col0) of size crop_side.
inline ImageGrid rotate_crop(const ImageGrid& img, double angle_deg, int row0, int col0,
                             int crop_side) {
    if (row0 < 0 || col0 < 0 || row0 + crop_side > img.side || col0 + crop_side > img.side)
        throw ValidationError("rotate_crop: crop window outside image");
    ImageGrid rotated = img;
    if (angle_deg != 0.0) {
        double a = angle_deg * M_PI / 180.0;
        double ca = std::cos(a), sa = std::sin(a);
        double cx = (img.side - 1) / 2.0, cy = (img.side - 1) / 2.0;
        for (int r = 0; r < img.side; ++r)
            for (int c = 0; c < img.side; ++c) {
                // Inverse mapping into the source image.
                double y = ca * (r - cy) + sa * (c - cx) + cy;
                double x = -sa * (r - cy) + ca * (c - cx) + cx;
                y = std::clamp(y, 0.0, static_cast<double>(img.side - 1));
                x = std::clamp(x, 0.0, static_cast<double>(img.side - 1));
                int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
                int y1 = std::min(y0 + 1, img.side - 1), x1 = std::min(x0 + 1, img.side - 1);
                double fy = y - y0, fx = x - x0;
                double v = (1 - fy) * ((1 - fx) * img.at(y0, x0) + fx * img.at(y0, x1)) +
                           fy * ((1 - fx) * img.at(y1, x0) + fx * img.at(y1, x1));
                rotated.at(r, c) = static_cast<float>(v);
            }
    }
    if (crop_side == img.side && row0 == 0 && col0 == 0) return rotated;
    ImageGrid out;
    out.side = crop_side;
    out.view = img.view;
    out.pixels.resize(static_cast<size_t>(crop_side) * crop_side);
    for (int r = 0; r < crop_side; ++r)
        for (int c = 0; c < crop_side; ++c) out.at(r, c) = rotated.at(row0 + r, col0 + c);
    return out;
}

enum class AugmentMode { train, eval };

// Train: rotation sampled from U[-5deg, 5deg] plus a random crop. Eval: centre
// crop only, deterministic.
inline ImageGrid augment_image(const ImageGrid& img, AugmentMode mode, uint64_t seed,
                               int crop_side) {
    if (crop_side > img.side)
        throw ValidationError("augment_image: crop larger than image");
    int slack = img.side - crop_side;
    if (mode == AugmentMode::eval) return rotate_crop(img, 0.0, slack / 2, slack / 2, crop_side);
    Rng rng(seed);
    double angle = rng.uniform(-5.0, 5.0);
    int r0 = slack > 0 ? static_cast<int>(rng.uniform_int(slack + 1)) : 0;
    int c0 = slack > 0 ? static_cast<int>(rng.uniform_int(slack + 1)) : 0;
    return rotate_crop(img, angle, r0, c0, crop_side);
}

// --- forward passes ----------------------------------------------------------

// One tape-bound forward pass over a model. Parameters are referenced in
// place; gradients are harvested from the tape after backward().
class ModelForward {
  public:
    ModelForward(ModelState& state, bool training, Rng* dropout_rng = nullptr)
        : state_(state), training_(training), rng_(dropout_rng) {
        state.config.validate();
    }

    ad::Tape& tape() { return tape_; }

    int param(const std::string& name) {
        auto it = param_nodes_.find(name);
        if (it != param_nodes_.end()) return it->second;
        ParamStore::Param& p = state_.params.at(name);
        int id = tape_.leaf_ref(&p.value, p.trainable);
        param_nodes_[name] = id;
        return id;
    }

    // Per-image patch features, layer-normalised, projected, concatenated in
    // input order. Returns the (sum patches) x d feature node.
    int encode_images(const std::vector<ImageGrid>& images) {
        const ModelConfig& cfg = state_.config;
        if (images.empty() || static_cast<int>(images.size()) > cfg.max_images)
            throw ValidationError("encode_images: image count outside 1..max_images");
        std::vector<int> blocks;
        for (const ImageGrid& img : images) {
            if (img.side != cfg.image_side)
                throw ValidationError("encode_images: image side does not match config");
            int x = tape_.constant(patch_matrix(img, cfg.patch_size));
            int h = tape_.add_row_broadcast(tape_.matmul(x, param("enc.patch_w")),
                                            param("enc.patch_b"));
            h = tape_.add(h, param("enc.pos"));
            h = tape_.layer_norm(h, param("enc.ln_g"), param("enc.ln_b"));
            h = tape_.add_row_broadcast(tape_.matmul(h, param("enc.proj_w")),
                                        param("enc.proj_b"));
            blocks.push_back(h);
        }
        return blocks.size() == 1 ? blocks[0] : tape_.vcat(blocks);
    }

    // Full-stream decoder forward: token+position+section embeddings, causal
    // self-attention (LoRA on q/k), cross-attention over enc, GELU FFN,
    // pre-norm residuals. Returns the (len x vocab) logits node.
    int decode(const TokenStream& stream, int enc_node) {
        const ModelConfig& cfg = state_.config;
        int len = static_cast<int>(stream.size());
        if (len == 0) throw ValidationError("decode: empty stream");
        if (len > cfg.max_positions) throw ValidationError("decode: stream exceeds max positions");
        for (int id : stream.token_ids)
            if (id < 0 || id >= cfg.vocab_size)
                throw ValidationError("decode: token id outside model vocabulary");

        int h = tape_.add(tape_.gather_rows(param("dec.tok_emb"), stream.token_ids),
                          tape_.gather_rows(param("dec.pos_emb"), stream.position_ids));
        h = tape_.add(h, tape_.gather_rows(param("dec.sec_emb"), stream.section_ids));

        ad::Mat causal = ad::Mat::Zero(len, len);
        for (int i = 0; i < len; ++i)
            for (int j = i + 1; j < len; ++j) causal(i, j) = -1e30;

        for (int l = 0; l < cfg.decoder_layers; ++l) {
            std::string p = "dec.L" + std::to_string(l) + ".";
            std::string lp = "lora.L" + std::to_string(l) + ".self.";
            int x = tape_.layer_norm(h, param(p + "ln1_g"), param(p + "ln1_b"));
            int q = projected(x, p + "self.wq",
                              cfg.lora.target_query ? lp + "q" : std::string());
            int k = projected(x, p + "self.wk",
                              cfg.lora.target_key ? lp + "k" : std::string());
            int v = tape_.matmul(x, param(p + "self.wv"));
            int attn = attention(q, k, v, &causal);
            h = tape_.add(h, tape_.matmul(attn, param(p + "self.wo")));

            x = tape_.layer_norm(h, param(p + "ln2_g"), param(p + "ln2_b"));
            int cq = tape_.matmul(x, param(p + "cross.wq"));
            int ck = tape_.matmul(enc_node, param(p + "cross.wk"));
            int cv = tape_.matmul(enc_node, param(p + "cross.wv"));
            int cross = attention(cq, ck, cv, nullptr);
            h = tape_.add(h, tape_.matmul(cross, param(p + "cross.wo")));

            x = tape_.layer_norm(h, param(p + "ln3_g"), param(p + "ln3_b"));
            int f = tape_.gelu(tape_.add_row_broadcast(tape_.matmul(x, param(p + "ffn.w1")),
                                                       param(p + "ffn.b1")));
            f = tape_.add_row_broadcast(tape_.matmul(f, param(p + "ffn.w2")),
                                        param(p + "ffn.b2"));
            h = tape_.add(h, f);
        }
        h = tape_.layer_norm(h, param("dec.lnf_g"), param("dec.lnf_b"));
        return tape_.add_row_broadcast(tape_.matmul(h, param("dec.lm_w")),
                                       param("dec.lm_b"));
    }

    // Mean NLL over the target tokens (positions >= prompt_len, excluding the
    // un-predictable position 0).
    int teacher_forcing_loss(const TokenStream& stream, int enc_node) {
        int len = static_cast<int>(stream.size());
        int first_label = std::max(stream.prompt_len, 1);
        if (first_label >= len)
            throw ValidationError("teacher_forcing_loss: empty target");
        int logits = decode(stream, enc_node);
        std::vector<int> labels(len, 0);
        std::vector<char> active(len, 0);
        for (int j = 0; j + 1 < len; ++j) {
            labels[j] = stream.token_ids[j + 1];
            active[j] = j + 1 >= first_label;
        }
        return tape_.cross_entropy_mean(logits, labels, active);
    }

    // Sum of log-probabilities of the given token at each listed position,
    // evaluated at the logits row that predicts it (position - 1).
    int sequence_log_prob(const TokenStream& stream, int enc_node, int first_scored) {
        int len = static_cast<int>(stream.size());
        if (first_scored < 1 || first_scored >= len)
            throw ValidationError("sequence_log_prob: bad scoring range");
        int logits = decode(stream, enc_node);
        std::vector<int> labels(len, 0);
        std::vector<char> active(len, 0);
        int n = 0;
        for (int j = 0; j + 1 < len; ++j) {
            labels[j] = stream.token_ids[j + 1];
            if (j + 1 >= first_scored) {
                active[j] = 1;
                ++n;
            }
        }
        int mean_nll = tape_.cross_entropy_mean(logits, labels, active);
        return tape_.scale(mean_nll, -static_cast<double>(n));
    }

    static ad::Mat patch_matrix(const ImageGrid& img, int patch) {
        int grid = img.side / patch;
        ad::Mat x(grid * grid, patch * patch);
        for (int pr = 0; pr < grid; ++pr)
            for (int pc = 0; pc < grid; ++pc)
                for (int r = 0; r < patch; ++r)
                    for (int c = 0; c < patch; ++c)
                        x(pr * grid + pc, r * patch + c) =
                            img.at(pr * patch + r, pc * patch + c);
        return x;
    }

  private:
    int projected(int x, const std::string& base_w, const std::string& lora_prefix) {
        int out = tape_.matmul(x, param(base_w));
        if (lora_prefix.empty()) return out;
        const LoraConfig& lc = state_.config.lora;
        int inp = x;
        if (training_ && lc.dropout > 0.0 && rng_) inp = tape_.dropout(x, lc.dropout, *rng_);
        int delta = tape_.matmul(tape_.matmul(inp, param(lora_prefix + ".B")),
                                 param(lora_prefix + ".A"));
        return tape_.add(out, tape_.scale(delta, lc.alpha / lc.rank));
    }

    int attention(int q, int k, int v, const ad::Mat* additive_mask) {
        const ModelConfig& cfg = state_.config;
        int dh = cfg.d_model / cfg.heads;
        double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<int> heads_out;
        for (int hd = 0; hd < cfg.heads; ++hd) {
            int qh = tape_.cols(q, hd * dh, dh);
            int kh = tape_.cols(k, hd * dh, dh);
            int vh = tape_.cols(v, hd * dh, dh);
            int scores = tape_.scale(tape_.matmul(qh, tape_.transpose(kh)), inv_sqrt);
            int probs = additive_mask ? tape_.softmax_rows(scores, *additive_mask)
                                      : tape_.softmax_rows(scores);
            heads_out.push_back(tape_.matmul(probs, vh));
        }
        return heads_out.size() == 1 ? heads_out[0] : tape_.hcat(heads_out);
    }

    ModelState& state_;
    bool training_;
    Rng* rng_;
    ad::Tape tape_;
    std::map<std::string, int> param_nodes_;
};

// Convenience wrappers used by tests and evaluation.

struct EncodedStudy {
    ad::Mat features;                 // (sum patches) x d_model
    std::vector<int> image_offsets;   // start row of each image block
};

inline EncodedStudy encode_images(const std::vector<ImageGrid>& images, ModelState& state) {
    ModelForward fwd(state, /*training=*/false);
    int node = fwd.encode_images(images);
    EncodedStudy enc;
    enc.features = fwd.tape().value(node);
    int per = state.config.patches_per_image();
    for (size_t i = 0; i < images.size(); ++i)
        enc.image_offsets.push_back(static_cast<int>(i) * per);
    return enc;
}

inline ad::Mat decode_forward(const TokenStream& stream, const EncodedStudy& enc,
                              ModelState& state) {
    ModelForward fwd(state, /*training=*/false);
    int enc_node = fwd.tape().constant(enc.features);
    int logits = fwd.decode(stream, enc_node);
    return fwd.tape().value(logits);
}

// Gradients of a teacher-forcing loss for every trainable parameter, plus the
// loss value. Used by training and the finite-difference checks.
struct LossGrads {
    double loss = 0.0;
    std::map<std::string, ad::Mat> grads;  // trainable params only
};

inline LossGrads teacher_forcing_backward(ModelState& state,
                                          const std::vector<ImageGrid>& images,
                                          const TokenStream& stream,
                                          Rng* dropout_rng = nullptr) {
    ModelForward fwd(state, /*training=*/true, dropout_rng);
    int enc = fwd.encode_images(images);
    int loss = fwd.teacher_forcing_loss(stream, enc);
    fwd.tape().backward(loss);
    LossGrads out;
    out.loss = fwd.tape().value(loss)(0, 0);
    for (const ParamStore::Param& p : state.params.all()) {
        if (!p.trainable) continue;
        out.grads[p.name] = fwd.tape().grad_or_zero(fwd.param(p.name));
    }
    return out;
}

}  // namespace longrep
