#pragma once

#include <array>
#include <string>
#include <vector>

#include "longrep/common.hpp"

namespace longrep {

// Condition vocabulary shared by the corpus generator and the rule-based
// labeler. The labeler's keyword rules are derived from these sentence
// templates, so generated findings text is exactly recoverable. Names are
// chosen so none is a substring of another.
class TemplateBank {
  public:
    static constexpr int kNumConditions = 14;

    static const TemplateBank& v1() {
        static const TemplateBank bank;
        return bank;
    }

    const std::string& version() const { return version_; }

    const std::array<std::string, kNumConditions>& condition_names() const {
        return names_;
    }

    // Positive findings sentence, one of two phrasings.
    std::string positive_sentence(int condition, int variant) const {
        const std::string& n = names_.at(condition);
        return variant % 2 == 0 ? "There is " + n + "."
                                : "Findings consistent with " + n + ".";
    }

    std::string negative_sentence(int condition, int variant) const {
        const std::string& n = names_.at(condition);
        return variant % 2 == 0 ? "No " + n + "." : "No evidence of " + n + ".";
    }

    std::string uncertain_sentence(int condition) const {
        return "Possible " + names_.at(condition) + ".";
    }

    // Impression summary: positives joined, or a fixed clear sentence.
    std::string impression_text(const std::vector<int>& positive_conditions) const {
        if (positive_conditions.empty()) return "No acute abnormality.";
        std::string out = "Impression includes";
        for (size_t i = 0; i < positive_conditions.size(); ++i) {
            out += i == 0 ? " " : (i + 1 == positive_conditions.size() ? " and " : ", ");
            out += names_.at(positive_conditions[i]);
        }
        out += ".";
        return out;
    }

  private:
    TemplateBank() = default;

    std::string version_ = "v1";
    std::array<std::string, kNumConditions> names_ = {
        "atelectasis",  "cardiomegaly", "consolidation", "edema",
        "emphysema",    "fibrosis",     "fracture",      "hernia",
        "infiltration", "lesion",       "effusion",      "pneumonia",
        "pneumothorax", "device",
    };
};

}  // namespace longrep
