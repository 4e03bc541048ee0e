#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "longrep/common.hpp"
#include "longrep/template_bank.hpp"

namespace longrep {

constexpr int kNumConditions = TemplateBank::kNumConditions;

// Lowercased word tokens; punctuation splits and is kept as its own token.
inline std::vector<std::string> word_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        unsigned char u = static_cast<unsigned char>(ch);
        if (std::isalnum(u)) {
            cur.push_back(static_cast<char>(std::tolower(u)));
        } else {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
            if (!std::isspace(u)) out.push_back(std::string(1, ch));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

namespace detail {

using NGramCounts = std::map<std::vector<std::string>, int>;

inline NGramCounts ngram_counts(const std::vector<std::string>& toks, int n) {
    NGramCounts c;
    for (int i = 0; i + n <= static_cast<int>(toks.size()); ++i)
        ++c[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)];
    return c;
}

}  // namespace detail

// BLEU-4 with multiplicative brevity penalty and no smoothing: any order with
// zero clipped matches zeroes the whole score.
inline double bleu4(const std::vector<std::string>& candidate,
                    const std::vector<std::vector<std::string>>& references) {
    if (references.empty()) throw ValidationError("bleu4: no references");
    int c = static_cast<int>(candidate.size());
    if (c == 0) return 0.0;
    // Closest reference length, ties toward the shorter.
    int r = static_cast<int>(references[0].size());
    for (const auto& ref : references) {
        int len = static_cast<int>(ref.size());
        if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r))
            r = len;
    }
    double log_sum = 0.0;
    for (int n = 1; n <= 4; ++n) {
        detail::NGramCounts cand = detail::ngram_counts(candidate, n);
        int total = std::max(0, c - n + 1);
        if (total == 0) return 0.0;
        int clipped = 0;
        for (const auto& [gram, count] : cand) {
            int max_ref = 0;
            for (const auto& ref : references) {
                detail::NGramCounts rc = detail::ngram_counts(ref, n);
                auto it = rc.find(gram);
                if (it != rc.end()) max_ref = std::max(max_ref, it->second);
            }
            clipped += std::min(count, max_ref);
        }
        if (clipped == 0) return 0.0;
        log_sum += 0.25 * std::log(static_cast<double>(clipped) / total);
    }
    double bp = c >= r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / c);
    return bp * std::exp(log_sum);
}

// ROUGE-L F-measure with recall weighted by beta = 1.2.
inline double rouge_l(const std::vector<std::string>& candidate,
                      const std::vector<std::string>& reference, double beta = 1.2) {
    int m = static_cast<int>(candidate.size()), n = static_cast<int>(reference.size());
    if (m == 0 || n == 0) return 0.0;
    std::vector<std::vector<int>> dp(m + 1, std::vector<int>(n + 1, 0));
    for (int i = 1; i <= m; ++i)
        for (int j = 1; j <= n; ++j)
            dp[i][j] = candidate[i - 1] == reference[j - 1]
                           ? dp[i - 1][j - 1] + 1
                           : std::max(dp[i - 1][j], dp[i][j - 1]);
    double lcs = dp[m][n];
    if (lcs == 0.0) return 0.0;
    double p = lcs / m, r = lcs / n;
    double b2 = beta * beta;
    return (1 + b2) * p * r / (r + b2 * p);
}

// Document frequencies for CIDEr, computed over the reference corpus (one
// reference set per example).
struct CiderIdf {
    std::vector<std::map<std::vector<std::string>, int>> df;  // per order 1..4
    int num_docs = 0;

    static CiderIdf build(const std::vector<std::vector<std::vector<std::string>>>& ref_sets) {
        CiderIdf idf;
        idf.df.resize(4);
        idf.num_docs = static_cast<int>(ref_sets.size());
        for (const auto& refs : ref_sets) {
            for (int n = 1; n <= 4; ++n) {
                std::map<std::vector<std::string>, int> seen;
                for (const auto& ref : refs)
                    for (const auto& [gram, cnt] : detail::ngram_counts(ref, n))
                        seen[gram] = 1;
                for (const auto& [gram, one] : seen) idf.df[n - 1][gram] += one;
            }
        }
        return idf;
    }

    // Grams never seen in the reference corpus get zero weight.
    double weight(const std::vector<std::string>& gram, int n) const {
        auto it = df[n - 1].find(gram);
        if (it == df[n - 1].end() || it->second == 0) return 0.0;
        return std::log(static_cast<double>(num_docs) / it->second);
    }
};

// Original CIDEr: per order, average over references of the cosine between
// TF-IDF vectors, scaled by 10, then averaged across orders 1..4.
inline double cider(const std::vector<std::string>& candidate,
                    const std::vector<std::vector<std::string>>& references,
                    const CiderIdf& idf) {
    if (references.empty()) throw ValidationError("cider: no references");
    double total = 0.0;
    for (int n = 1; n <= 4; ++n) {
        std::map<std::vector<std::string>, double> cv;
        for (const auto& [gram, cnt] : detail::ngram_counts(candidate, n))
            cv[gram] = cnt * idf.weight(gram, n);
        double cnorm = 0.0;
        for (const auto& [g, v] : cv) cnorm += v * v;
        cnorm = std::sqrt(cnorm);
        double order_score = 0.0;
        for (const auto& ref : references) {
            std::map<std::vector<std::string>, double> rv;
            for (const auto& [gram, cnt] : detail::ngram_counts(ref, n))
                rv[gram] = cnt * idf.weight(gram, n);
            double rnorm = 0.0, dot = 0.0;
            for (const auto& [g, v] : rv) {
                rnorm += v * v;
                auto it = cv.find(g);
                if (it != cv.end()) dot += v * it->second;
            }
            rnorm = std::sqrt(rnorm);
            if (cnorm > 0.0 && rnorm > 0.0) order_score += dot / (cnorm * rnorm);
        }
        total += 10.0 * order_score / references.size();
    }
    return total / 4.0;
}

// --- observation labels -------------------------------------------------------

enum class ObservationState { no_mention, negative, uncertain, positive };

using ObservationStates = std::array<ObservationState, kNumConditions>;

// Reads condition states back out of template-generated text: a sentence
// containing the condition name is negative when it starts with "No",
// uncertain when it starts with "Possible", otherwise positive.
inline ObservationStates label_extract(const std::string& text) {
    ObservationStates states;
    states.fill(ObservationState::no_mention);
    const TemplateBank& bank = TemplateBank::v1();
    std::string lower;
    lower.reserve(text.size());
    for (char c : text) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));

    // Split on sentence ends.
    std::vector<std::string> sentences;
    std::string cur;
    for (char c : lower) {
        cur.push_back(c);
        if (c == '.') {
            sentences.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) sentences.push_back(cur);

    for (const std::string& sent : sentences) {
        std::string trimmed = sent;
        while (!trimmed.empty() && std::isspace(static_cast<unsigned char>(trimmed.front())))
            trimmed.erase(trimmed.begin());
        for (int c = 0; c < kNumConditions; ++c) {
            if (sent.find(bank.condition_names()[c]) == std::string::npos) continue;
            ObservationState s = ObservationState::positive;
            if (trimmed.rfind("no ", 0) == 0) s = ObservationState::negative;
            else if (trimmed.rfind("possible ", 0) == 0) s = ObservationState::uncertain;
            // A later mention overrides an earlier one; templates emit each
            // condition at most once per section.
            states[c] = s;
        }
    }
    return states;
}

// --- macro precision/recall/F1 -------------------------------------------------

struct PrfResult {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::array<double, kNumConditions> per_class_f1{};
};

// {no_mention, negative, uncertain} collapse to negative; positive stays.
inline bool is_positive(ObservationState s) { return s == ObservationState::positive; }

// Fractional confusion counts per class. Multi-report studies contribute the
// average of their per-report counts.
struct ConfusionAccumulator {
    std::array<double, kNumConditions> tp{}, fp{}, fn{};

    void add(const ObservationStates& predicted, const ObservationStates& truth,
             double weight = 1.0) {
        for (int c = 0; c < kNumConditions; ++c) {
            bool p = is_positive(predicted[c]), t = is_positive(truth[c]);
            if (p && t) tp[c] += weight;
            else if (p && !t) fp[c] += weight;
            else if (!p && t) fn[c] += weight;
        }
    }

    PrfResult macro() const {
        PrfResult r;
        for (int c = 0; c < kNumConditions; ++c) {
            double p = tp[c] + fp[c] > 0 ? tp[c] / (tp[c] + fp[c]) : 0.0;
            double rec = tp[c] + fn[c] > 0 ? tp[c] / (tp[c] + fn[c]) : 0.0;
            double f = p + rec > 0 ? 2 * p * rec / (p + rec) : 0.0;
            r.precision += p;
            r.recall += rec;
            r.per_class_f1[c] = f;
            r.f1 += f;
        }
        r.precision /= kNumConditions;
        r.recall /= kNumConditions;
        r.f1 /= kNumConditions;
        return r;
    }
};

inline PrfResult macro_prf(const std::vector<ObservationStates>& predicted,
                           const std::vector<ObservationStates>& truth) {
    if (predicted.size() != truth.size())
        throw ValidationError("macro_prf: prediction/truth size mismatch");
    ConfusionAccumulator acc;
    for (size_t i = 0; i < predicted.size(); ++i) acc.add(predicted[i], truth[i]);
    return acc.macro();
}

}  // namespace longrep
