#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "longrep/common.hpp"

namespace longrep {

// Section ids attached to every decoder input token.
enum Section : int {
    PROMPT_FINDINGS = 0,
    PROMPT_IMPRESSION = 1,
    CUR_FINDINGS = 2,
    CUR_IMPRESSION = 3,
};
constexpr int kNumSections = 4;

enum class Special : int { PMT = 0, PMT_SEP, BOS, SEP, EOS, NPF, NPI, PAD };
constexpr int kNumSpecials = 8;

inline const char* special_name(Special s) {
    static const char* names[] = {"[PMT]", "[PMT-SEP]", "[BOS]", "[SEP]",
                                  "[EOS]", "[NPF]",     "[NPI]", "[PAD]"};
    return names[static_cast<int>(s)];
}

// Byte-level BPE vocabulary. Text token ids are 0..budget-1 (bytes 0..255,
// merges 256..budget-1); the 8 special ids sit directly above the text range,
// so plain-text encoding can never produce them.
class Vocabulary {
  public:
    Vocabulary() = default;

    // merges[i] joins token(left) and token(right) into id 256+i.
    struct Merge {
        int left = 0;
        int right = 0;
    };

    static Vocabulary from_merges(std::vector<Merge> merges) {
        Vocabulary v;
        v.merges_ = std::move(merges);
        v.build_tables();
        return v;
    }

    int text_vocab_size() const { return 256 + static_cast<int>(merges_.size()); }
    int total_vocab_size() const { return text_vocab_size() + kNumSpecials; }

    int special_id(Special s) const { return text_vocab_size() + static_cast<int>(s); }
    bool is_special(int id) const {
        return id >= text_vocab_size() && id < total_vocab_size();
    }

    const std::vector<Merge>& merges() const { return merges_; }

    const std::string& token_bytes(int id) const {
        if (id < 0 || id >= text_vocab_size())
            throw ValidationError("token_bytes: id outside text vocabulary");
        return table_[id];
    }

    // Applies merges in rank order, lowest rank first.
    std::vector<int> encode(const std::string& text) const {
        std::vector<int> ids;
        ids.reserve(text.size());
        for (unsigned char c : text) ids.push_back(c);
        while (ids.size() >= 2) {
            int best_rank = INT32_MAX;
            for (size_t i = 0; i + 1 < ids.size(); ++i) {
                auto it = rank_.find(pair_key(ids[i], ids[i + 1]));
                if (it != rank_.end() && it->second < best_rank) best_rank = it->second;
            }
            if (best_rank == INT32_MAX) break;
            const Merge& m = merges_[best_rank];
            std::vector<int> next;
            next.reserve(ids.size());
            for (size_t i = 0; i < ids.size();) {
                if (i + 1 < ids.size() && ids[i] == m.left && ids[i + 1] == m.right) {
                    next.push_back(256 + best_rank);
                    i += 2;
                } else {
                    next.push_back(ids[i]);
                    ++i;
                }
            }
            ids.swap(next);
        }
        return ids;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            if (id < 0 || id >= text_vocab_size())
                throw ValidationError("decode: unknown or special id " + std::to_string(id));
            out += table_[id];
        }
        return out;
    }

    void save(const std::filesystem::path& path) const {
        nlohmann::json jmerges = nlohmann::json::array();
        for (const Merge& m : merges_) jmerges.push_back({m.left, m.right});
        nlohmann::json specials;
        for (int s = 0; s < kNumSpecials; ++s)
            specials[special_name(static_cast<Special>(s))] =
                special_id(static_cast<Special>(s));
        nlohmann::json j = {{"version", 1}, {"merges", jmerges}, {"specials", specials}};
        std::ofstream out(path);
        if (!out) throw IoError("cannot open for writing: " + path.string());
        out << j.dump(2) << "\n";
    }

    static Vocabulary load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw IoError("missing vocabulary file: " + path.string());
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw IoError("vocabulary file: " + std::string(e.what()));
        }
        std::vector<Merge> merges;
        for (const nlohmann::json& jm : j.at("merges"))
            merges.push_back({jm.at(0).get<int>(), jm.at(1).get<int>()});
        Vocabulary v = from_merges(std::move(merges));
        // Sanity-check the recorded special ids against the derived layout.
        for (int s = 0; s < kNumSpecials; ++s) {
            const char* name = special_name(static_cast<Special>(s));
            if (j.at("specials").at(name).get<int>() != v.special_id(static_cast<Special>(s)))
                throw IoError("vocabulary file: special id mismatch for " + std::string(name));
        }
        return v;
    }

    uint64_t hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const Merge& m : merges_) {
            h = fnv1a(&m.left, sizeof(m.left), h);
            h = fnv1a(&m.right, sizeof(m.right), h);
        }
        return h;
    }

  private:
    static uint64_t pair_key(int a, int b) {
        return (static_cast<uint64_t>(static_cast<uint32_t>(a)) << 32) |
               static_cast<uint32_t>(b);
    }

    void build_tables() {
        table_.resize(256 + merges_.size());
        for (int i = 0; i < 256; ++i) table_[i] = std::string(1, static_cast<char>(i));
        rank_.clear();
        for (size_t i = 0; i < merges_.size(); ++i) {
            const Merge& m = merges_[i];
            if (m.left < 0 || m.right < 0 || m.left >= 256 + static_cast<int>(i) ||
                m.right >= 256 + static_cast<int>(i))
                throw ValidationError("merge rule references an undefined token");
            table_[256 + i] = table_[m.left] + table_[m.right];
            rank_[pair_key(m.left, m.right)] = static_cast<int>(i);
        }
    }

    std::vector<Merge> merges_;
    std::vector<std::string> table_;
    std::map<uint64_t, int> rank_;
};

// Greedy BPE training: repeatedly merge the most frequent adjacent pair, ties
// broken by lexicographic byte order of (left bytes, right bytes). Stops early
// when no pair occurs at least twice.
inline Vocabulary train_bpe(const std::vector<std::string>& texts, int budget) {
    if (budget < 256) throw ValidationError("train_bpe: budget must be >= 256");
    std::vector<std::vector<int>> seqs;
    seqs.reserve(texts.size());
    for (const std::string& t : texts) {
        std::vector<int> s;
        s.reserve(t.size());
        for (unsigned char c : t) s.push_back(c);
        seqs.push_back(std::move(s));
    }

    std::vector<Vocabulary::Merge> merges;
    std::vector<std::string> table(256);
    for (int i = 0; i < 256; ++i) table[i] = std::string(1, static_cast<char>(i));

    int n_merges = budget - 256;
    for (int step = 0; step < n_merges; ++step) {
        std::map<std::pair<int, int>, int64_t> counts;
        for (const std::vector<int>& s : seqs)
            for (size_t i = 0; i + 1 < s.size(); ++i) ++counts[{s[i], s[i + 1]}];

        int64_t best_count = 1;  // require at least 2 occurrences
        std::pair<int, int> best{-1, -1};
        for (const auto& [pair, count] : counts) {
            if (count < best_count) continue;
            if (count > best_count) {
                best_count = count;
                best = pair;
                continue;
            }
            if (best.first < 0) {
                best = pair;
                continue;
            }
            auto key = [&](const std::pair<int, int>& p) {
                return std::make_pair(table[p.first], table[p.second]);
            };
            if (key(pair) < key(best)) best = pair;
        }
        if (best.first < 0) break;

        int new_id = 256 + static_cast<int>(merges.size());
        merges.push_back({best.first, best.second});
        table.push_back(table[best.first] + table[best.second]);
        for (std::vector<int>& s : seqs) {
            size_t w = 0;
            for (size_t i = 0; i < s.size();) {
                if (i + 1 < s.size() && s[i] == best.first && s[i + 1] == best.second) {
                    s[w++] = new_id;
                    i += 2;
                } else {
                    s[w++] = s[i++];
                }
            }
            s.resize(w);
        }
    }
    return Vocabulary::from_merges(std::move(merges));
}

// Decoder input stream: prompt tokens (sections 0/1) followed by the target
// (sections 2/3), one running position index across both.
struct TokenStream {
    std::vector<int> token_ids;
    std::vector<int> section_ids;
    std::vector<int> position_ids;
    int prompt_len = 0;

    size_t size() const { return token_ids.size(); }

    void validate(const Vocabulary& vocab) const {
        if (token_ids.size() != section_ids.size() ||
            token_ids.size() != position_ids.size())
            throw ValidationError("TokenStream: sequence lengths differ");
        for (size_t i = 1; i < section_ids.size(); ++i)
            if (section_ids[i] < section_ids[i - 1])
                throw ValidationError("TokenStream: section ids decrease");
        if (prompt_len < 0 || static_cast<size_t>(prompt_len) > token_ids.size())
            throw ValidationError("TokenStream: bad prompt_len");
        if (static_cast<size_t>(prompt_len) < token_ids.size() &&
            token_ids[prompt_len] != vocab.special_id(Special::BOS))
            throw ValidationError("TokenStream: token at prompt_len is not [BOS]");
    }
};

struct StreamFragment {
    std::vector<int> token_ids;
    std::vector<int> section_ids;
};

// [PMT] findings [PMT-SEP] impression, or the [NPF]/[NPI] placeholders when no
// previous study exists. Over-length prompts lose impression tokens first,
// then findings tokens, from the right.
inline StreamFragment assemble_prompt(const std::optional<std::string>& prev_findings,
                                      const std::optional<std::string>& prev_impression,
                                      const Vocabulary& vocab, int max_prompt = 256) {
    if (prev_findings.has_value() != prev_impression.has_value())
        throw ValidationError("assemble_prompt: both prompt sections or neither");
    StreamFragment f;
    f.token_ids.push_back(vocab.special_id(Special::PMT));
    f.section_ids.push_back(PROMPT_FINDINGS);
    std::vector<int> fids, iids;
    if (prev_findings) {
        fids = vocab.encode(*prev_findings);
        iids = vocab.encode(*prev_impression);
    } else {
        fids = {vocab.special_id(Special::NPF)};
        iids = {vocab.special_id(Special::NPI)};
    }
    // Truncate: impression from the right first, then findings.
    int fixed = 2;  // [PMT] and [PMT-SEP]
    int room = std::max(0, max_prompt - fixed);
    if (static_cast<int>(fids.size() + iids.size()) > room) {
        int keep_i = std::max(0, room - static_cast<int>(fids.size()));
        iids.resize(keep_i);
        if (static_cast<int>(fids.size()) > room) fids.resize(room);
    }
    for (int id : fids) {
        f.token_ids.push_back(id);
        f.section_ids.push_back(PROMPT_FINDINGS);
    }
    f.token_ids.push_back(vocab.special_id(Special::PMT_SEP));
    f.section_ids.push_back(PROMPT_IMPRESSION);
    for (int id : iids) {
        f.token_ids.push_back(id);
        f.section_ids.push_back(PROMPT_IMPRESSION);
    }
    return f;
}

// [BOS] findings [SEP] impression [EOS]. Training mode caps the stream at
// max_len (plain right truncation); evaluation references are never truncated.
inline StreamFragment assemble_target(const std::string& findings,
                                      const std::string& impression,
                                      const Vocabulary& vocab, bool training_mode,
                                      int max_len = 256) {
    if (findings.empty() || impression.empty())
        throw ValidationError("assemble_target: empty report section");
    StreamFragment f;
    f.token_ids.push_back(vocab.special_id(Special::BOS));
    f.section_ids.push_back(CUR_FINDINGS);
    for (int id : vocab.encode(findings)) {
        f.token_ids.push_back(id);
        f.section_ids.push_back(CUR_FINDINGS);
    }
    f.token_ids.push_back(vocab.special_id(Special::SEP));
    f.section_ids.push_back(CUR_IMPRESSION);
    for (int id : vocab.encode(impression)) {
        f.token_ids.push_back(id);
        f.section_ids.push_back(CUR_IMPRESSION);
    }
    f.token_ids.push_back(vocab.special_id(Special::EOS));
    f.section_ids.push_back(CUR_IMPRESSION);
    if (training_mode && static_cast<int>(f.token_ids.size()) > max_len) {
        f.token_ids.resize(max_len);
        f.section_ids.resize(max_len);
    }
    return f;
}

inline TokenStream make_stream(const std::optional<StreamFragment>& prompt,
                               const StreamFragment& target) {
    TokenStream s;
    if (prompt) {
        s.token_ids = prompt->token_ids;
        s.section_ids = prompt->section_ids;
    }
    s.prompt_len = static_cast<int>(s.token_ids.size());
    s.token_ids.insert(s.token_ids.end(), target.token_ids.begin(), target.token_ids.end());
    s.section_ids.insert(s.section_ids.end(), target.section_ids.begin(),
                         target.section_ids.end());
    s.position_ids.resize(s.token_ids.size());
    for (size_t i = 0; i < s.position_ids.size(); ++i)
        s.position_ids[i] = static_cast<int>(i);
    return s;
}

struct SplitSections {
    std::string findings;
    std::string impression;
    bool missing_sep = false;
    bool empty_findings = false;
    bool empty_impression = false;
};

// Recovers (findings, impression) from a generated sequence. Degenerate
// outputs are flagged, never fatal.
inline SplitSections split_sections(const std::vector<int>& generated,
                                    const Vocabulary& vocab) {
    if (generated.empty() || generated.front() != vocab.special_id(Special::BOS))
        throw ValidationError("split_sections: sequence must begin with [BOS]");
    const int sep = vocab.special_id(Special::SEP);
    const int eos = vocab.special_id(Special::EOS);
    SplitSections out;
    std::vector<int> fids, iids;
    size_t i = 1;
    for (; i < generated.size() && generated[i] != sep && generated[i] != eos; ++i)
        if (!vocab.is_special(generated[i])) fids.push_back(generated[i]);
    out.missing_sep = i >= generated.size() || generated[i] != sep;
    if (!out.missing_sep) {
        for (++i; i < generated.size() && generated[i] != eos; ++i)
            if (!vocab.is_special(generated[i])) iids.push_back(generated[i]);
    }
    out.findings = vocab.decode(fids);
    out.impression = vocab.decode(iids);
    out.empty_findings = out.findings.empty();
    out.empty_impression = out.impression.empty();
    return out;
}

}  // namespace longrep
