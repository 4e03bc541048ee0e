#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "longrep/corpus.hpp"
#include "longrep/metrics.hpp"

namespace longrep {

// Embeds two texts into a shared space. Pairwise because TF-style encoders
// define the space from the texts themselves; fixed-dimension encoders just
// embed each side independently.
class ReportEncoder {
  public:
    virtual ~ReportEncoder() = default;
    virtual std::pair<Eigen::VectorXd, Eigen::VectorXd> embed_pair(const std::string& a,
                                                                   const std::string& b) = 0;
};

// Deterministic term-frequency encoder over n-grams of the configured orders.
// Tokenization: punctuation splits, then whitespace; optional lowercasing.
class TFCosineEncoder final : public ReportEncoder {
  public:
    explicit TFCosineEncoder(std::vector<int> orders = {1, 2}, bool lowercase = true)
        : orders_(std::move(orders)), lowercase_(lowercase) {
        if (orders_.empty()) throw ValidationError("TFCosineEncoder: no n-gram orders");
        for (int n : orders_)
            if (n < 1) throw ValidationError("TFCosineEncoder: order < 1");
    }

    std::pair<Eigen::VectorXd, Eigen::VectorXd> embed_pair(const std::string& a,
                                                           const std::string& b) override {
        std::map<std::string, double> ca = counts(a), cb = counts(b);
        std::vector<std::string> keys;
        for (const auto& [k, v] : ca) keys.push_back(k);
        for (const auto& [k, v] : cb)
            if (!ca.count(k)) keys.push_back(k);
        Eigen::VectorXd va = Eigen::VectorXd::Zero(keys.size());
        Eigen::VectorXd vb = Eigen::VectorXd::Zero(keys.size());
        for (size_t i = 0; i < keys.size(); ++i) {
            auto ia = ca.find(keys[i]);
            if (ia != ca.end()) va(i) = ia->second;
            auto ib = cb.find(keys[i]);
            if (ib != cb.end()) vb(i) = ib->second;
        }
        return {va, vb};
    }

  private:
    std::map<std::string, double> counts(const std::string& text) const {
        std::vector<std::string> toks;
        if (lowercase_) {
            toks = word_tokens(text);
        } else {
            std::string cur;
            for (char ch : text) {
                unsigned char u = static_cast<unsigned char>(ch);
                if (std::isalnum(u)) {
                    cur.push_back(ch);
                } else {
                    if (!cur.empty()) {
                        toks.push_back(cur);
                        cur.clear();
                    }
                    if (!std::isspace(u)) toks.push_back(std::string(1, ch));
                }
            }
            if (!cur.empty()) toks.push_back(cur);
        }
        std::map<std::string, double> c;
        for (int n : orders_) {
            for (int i = 0; i + n <= static_cast<int>(toks.size()); ++i) {
                std::string key = std::to_string(n);
                for (int j = 0; j < n; ++j) {
                    key.push_back('\x1f');
                    key += toks[i + j];
                }
                c[key] += 1.0;
            }
        }
        return c;
    }

    std::vector<int> orders_;
    bool lowercase_;
};

struct RewardValue {
    double value = 0.0;
    bool flagged = false;  // empty text or zero-norm embedding
};

// Cosine of the two report embeddings after formatting. Degenerate inputs
// yield 0 with the flag set instead of NaN.
inline RewardValue cosine_reward(const std::string& generated, const std::string& reference,
                                 ReportEncoder& encoder) {
    std::string g = format_report(generated), r = format_report(reference);
    if (g.empty() || r.empty()) return {0.0, true};
    auto [vg, vr] = encoder.embed_pair(g, r);
    if (vg.size() != vr.size())
        throw ValidationError("cosine_reward: embeddings of mismatched dimension");
    for (int i = 0; i < vg.size(); ++i)
        if (!std::isfinite(vg(i)) || !std::isfinite(vr(i)))
            throw ValidationError("cosine_reward: non-finite embedding entry");
    double ng = vg.norm(), nr = vr.norm();
    if (ng == 0.0 || nr == 0.0) return {0.0, true};
    return {vg.dot(vr) / (ng * nr), false};
}

}  // namespace longrep
