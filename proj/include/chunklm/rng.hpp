#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace chunklm {

// Counter-based generator (splitmix64 over a keyed counter). Streams are
// cheap to fork and fully described by two 64-bit words, so sessions and
// checkpoints can serialize generator state exactly. The same (key, counter)
// pair always yields the same draw regardless of call history elsewhere.
class Rng {
public:
    Rng() : key_(0x9e3779b97f4a7c15ull), counter_(0) {}

    explicit Rng(uint64_t seed, std::initializer_list<uint64_t> stream = {}) {
        key_ = mix(seed ^ 0x8f1bbcdcbfa53e0bull);
        for (uint64_t s : stream) key_ = mix(key_ ^ mix(s + 0x2545f4914f6cdd1dull));
        counter_ = 0;
    }

    static Rng from_state(uint64_t key, uint64_t counter) {
        Rng r;
        r.key_ = key;
        r.counter_ = counter;
        return r;
    }

    // Independent child stream; does not disturb this stream's counter.
    Rng fork(uint64_t stream_id) const {
        Rng r;
        r.key_ = mix(key_ ^ mix(stream_id + 0x9e3779b97f4a7c15ull));
        r.counter_ = 0;
        return r;
    }

    uint64_t key() const { return key_; }
    uint64_t counter() const { return counter_; }

    uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

    // Uniform in [0, 1) with 53 random bits.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Unbiased draw in [0, n) by rejection.
    uint64_t next_below(uint64_t n) {
        if (n == 0) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    // Standard normal via Box-Muller; consumes exactly two draws per call.
    double next_normal() {
        double u1 = next_unit();
        double u2 = next_unit();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    static uint64_t mix(uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    uint64_t key_;
    uint64_t counter_;
};

} // namespace chunklm
