#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace longrep {

// Error hierarchy. ValidationError for bad inputs/config, IoError for file
// problems, ContractError for violated internal contracts (plan/cache misuse).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValidationError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};

// Deterministic RNG: std::mt19937_64 engine (bit-exact per the standard) with
// hand-rolled value mappings, since std distributions are implementation
// defined.
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection-free modulo bias is negligible for
    // the ranges used here, but do it properly anyway.
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) throw ValidationError("uniform_int: n must be positive");
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    double gaussian() {
        // Box-Muller; consumes two uniforms per pair, caches the second.
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        double u2 = uniform();
        double mag = std::sqrt(-2.0 * std::log(u1));
        spare_ = mag * std::sin(2.0 * M_PI * u2);
        have_spare_ = true;
        return mag * std::cos(2.0 * M_PI * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        // Fisher-Yates with our own index mapping for cross-platform
        // determinism.
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derive an independent child stream (per patient, per step, ...).
    Rng child(uint64_t key) const {
        uint64_t mixed = seed_mix_ ^ (key * 0x9e3779b97f4a7c15ULL);
        mixed ^= mixed >> 30;
        mixed *= 0xbf58476d1ce4e5b9ULL;
        mixed ^= mixed >> 27;
        return Rng(mixed);
    }

    static Rng seeded_child(uint64_t seed, uint64_t key) {
        Rng r(seed);
        r.seed_mix_ = seed;
        return r.child(key);
    }

  private:
    std::mt19937_64 engine_;
    uint64_t seed_mix_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

// --- base64 ---------------------------------------------------------------

namespace detail {
inline const char* b64_alphabet() {
    return "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}
}  // namespace detail

inline std::string base64_encode(const std::vector<unsigned char>& in) {
    const char* tbl = detail::b64_alphabet();
    std::string out;
    out.reserve((in.size() + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 3 <= in.size(); i += 3) {
        uint32_t v = (in[i] << 16) | (in[i + 1] << 8) | in[i + 2];
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out.push_back(tbl[(v >> 6) & 63]);
        out.push_back(tbl[v & 63]);
    }
    size_t rem = in.size() - i;
    if (rem == 1) {
        uint32_t v = in[i] << 16;
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out += "==";
    } else if (rem == 2) {
        uint32_t v = (in[i] << 16) | (in[i + 1] << 8);
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out.push_back(tbl[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline std::vector<unsigned char> base64_decode(const std::string& in) {
    static const auto make_rev = [] {
        std::vector<int> rev(256, -1);
        const char* tbl = detail::b64_alphabet();
        for (int i = 0; i < 64; ++i) rev[static_cast<unsigned char>(tbl[i])] = i;
        return rev;
    };
    static const std::vector<int> rev = make_rev();
    std::vector<unsigned char> out;
    uint32_t buf = 0;
    int bits = 0;
    for (char c : in) {
        if (c == '=' || c == '\n' || c == '\r') continue;
        int v = rev[static_cast<unsigned char>(c)];
        if (v < 0) throw IoError("base64_decode: invalid character");
        buf = (buf << 6) | static_cast<uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<unsigned char>((buf >> bits) & 0xff));
        }
    }
    return out;
}

// --- parallel helper --------------------------------------------------------

// Runs fn(i) for i in [0, n) across up to `threads` workers. Results must be
// written to pre-sized per-index slots so reductions stay deterministic.
inline void parallel_for(size_t n, const std::function<void(size_t)>& fn,
                         unsigned threads = std::thread::hardware_concurrency()) {
    if (threads <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    threads = std::min<unsigned>(threads, static_cast<unsigned>(n));
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr err;
    std::mutex err_mu;
    for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lk(err_mu);
                    if (!err) err = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace longrep
