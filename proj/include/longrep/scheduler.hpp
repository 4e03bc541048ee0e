#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "longrep/common.hpp"
#include <json.hpp>

namespace longrep {

// One scheduled example: a patient's study at a given index within the
// patient's longitudinal sequence.
struct ScheduledStudy {
    int patient = -1;      // index into the split's patient list
    int study_index = 0;   // 0-based position within the patient
};

struct BatchPlan {
    int batch_size = 0;
    std::vector<std::vector<ScheduledStudy>> batches;  // last batch may be short

    // (a) every study of every patient appears exactly once;
    // (b) a batch never holds two studies of the same patient;
    // (c) study k+1 lands in the batch immediately after study k's batch.
    void validate(const std::vector<int>& study_counts) const {
        std::map<std::pair<int, int>, int> batch_of;  // (patient, study) -> batch
        for (size_t b = 0; b < batches.size(); ++b) {
            if (static_cast<int>(batches[b].size()) > batch_size)
                throw ContractError("plan: batch exceeds batch_size");
            std::vector<char> seen(study_counts.size(), 0);
            for (const ScheduledStudy& s : batches[b]) {
                if (s.patient < 0 || s.patient >= static_cast<int>(study_counts.size()) ||
                    s.study_index < 0 || s.study_index >= study_counts[s.patient])
                    throw ContractError("plan: study reference out of range");
                if (seen[s.patient])
                    throw ContractError("plan: two studies of one patient in a batch");
                seen[s.patient] = 1;
                if (!batch_of.emplace(std::make_pair(s.patient, s.study_index),
                                      static_cast<int>(b))
                         .second)
                    throw ContractError("plan: study scheduled twice");
            }
        }
        for (size_t p = 0; p < study_counts.size(); ++p) {
            for (int k = 0; k < study_counts[p]; ++k) {
                auto it = batch_of.find({static_cast<int>(p), k});
                if (it == batch_of.end()) throw ContractError("plan: study missing");
                if (k > 0) {
                    int prev = batch_of.at({static_cast<int>(p), k - 1});
                    if (it->second != prev + 1)
                        throw ContractError("plan: follow-up not in the next batch");
                }
            }
        }
    }
};

// Chain packing: shuffle patients by seed, stable-sort descending by study
// count, then place each patient's chain of studies at the first batch row
// where every needed consecutive batch has room and no same-patient clash.
inline BatchPlan plan_epoch(const std::vector<int>& study_counts, int batch_size,
                            uint64_t seed) {
    if (batch_size < 1) throw ValidationError("plan_epoch: batch_size < 1");
    for (int c : study_counts)
        if (c < 1) throw ValidationError("plan_epoch: patient with no studies");
    std::vector<int> order(study_counts.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng rng(seed);
    rng.shuffle(order);
    std::stable_sort(order.begin(), order.end(), [&study_counts](int a, int b) {
        return study_counts[a] > study_counts[b];
    });

    BatchPlan plan;
    plan.batch_size = batch_size;
    std::vector<int> load;  // occupancy per batch
    for (int p : order) {
        int n = study_counts[p];
        int start = 0;
        for (;; ++start) {
            bool fits = true;
            for (int k = 0; k < n; ++k) {
                if (start + k < static_cast<int>(load.size()) &&
                    load[start + k] >= batch_size) {
                    fits = false;
                    break;
                }
            }
            if (fits) break;
        }
        if (start + n > static_cast<int>(load.size())) load.resize(start + n, 0);
        if (static_cast<int>(plan.batches.size()) < static_cast<int>(load.size()))
            plan.batches.resize(load.size());
        for (int k = 0; k < n; ++k) {
            plan.batches[start + k].push_back({p, k});
            ++load[start + k];
        }
    }
    plan.validate(study_counts);
    return plan;
}

// Batches between producing a study's report and consuming it as the next
// study's prompt. The packing above makes this identically 1.
inline std::map<int, int> staleness_histogram(const BatchPlan& plan) {
    std::map<std::pair<int, int>, int> batch_of;
    for (size_t b = 0; b < plan.batches.size(); ++b)
        for (const ScheduledStudy& s : plan.batches[b])
            batch_of[{s.patient, s.study_index}] = static_cast<int>(b);
    std::map<int, int> hist;
    for (const auto& [key, b] : batch_of) {
        auto prev = batch_of.find({key.first, key.second - 1});
        if (prev != batch_of.end()) ++hist[b - prev->second];
    }
    return hist;
}

inline nlohmann::json plan_to_json(const BatchPlan& plan) {
    nlohmann::json j;
    j["batch_size"] = plan.batch_size;
    j["num_batches"] = plan.batches.size();
    nlohmann::json batches = nlohmann::json::array();
    for (const auto& batch : plan.batches) {
        nlohmann::json b = nlohmann::json::array();
        for (const ScheduledStudy& s : batch)
            b.push_back({{"patient", s.patient}, {"study_index", s.study_index}});
        batches.push_back(std::move(b));
    }
    j["batches"] = std::move(batches);
    nlohmann::json hist = nlohmann::json::object();
    for (const auto& [k, v] : staleness_histogram(plan)) hist[std::to_string(k)] = v;
    j["staleness_histogram"] = std::move(hist);
    return j;
}

// Holds each patient's most recent generated report between consecutive
// batches. An entry is written once and consumed exactly once.
class PromptCache {
  public:
    struct Entry {
        std::string findings;
        std::string impression;
    };

    explicit PromptCache(int batch_size) : capacity_(2 * batch_size) {
        if (batch_size < 1) throw ValidationError("PromptCache: batch_size < 1");
    }

    void put(int patient, Entry entry) {
        if (entries_.count(patient))
            throw ContractError("PromptCache: patient already has a cached report");
        if (static_cast<int>(entries_.size()) >= capacity_)
            throw ContractError("PromptCache: capacity exceeded");
        entries_.emplace(patient, std::move(entry));
    }

    // First study of a chain carries no previous report. For any later study
    // a missing entry is a scheduling bug, not a soft miss.
    std::optional<Entry> take(int patient, int study_index) {
        if (study_index == 0) return std::nullopt;
        auto it = entries_.find(patient);
        if (it == entries_.end())
            throw ContractError("PromptCache: missing previous report for patient " +
                                std::to_string(patient));
        Entry e = std::move(it->second);
        entries_.erase(it);
        return e;
    }

    int size() const { return static_cast<int>(entries_.size()); }
    int capacity() const { return capacity_; }
    bool empty() const { return entries_.empty(); }

  private:
    int capacity_;
    std::map<int, Entry> entries_;
};

}  // namespace longrep
