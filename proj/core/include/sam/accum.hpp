#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

#include "sam/error.hpp"

namespace sam {

/// Exact, order-independent accumulation of doubles.
///
/// Every double is split into 32-bit chunks by binary exponent and added into
/// a wide fixed-point register of signed 64-bit limbs. Integer addition is
/// associative and commutative, so any grouping of add()/merge() calls -- per
/// image, per thread, per worker -- produces bit-identical results. This is
/// what makes training reductions independent of thread count and of how a
/// dataset is sharded across workers.
///
/// Capacity: ~2^31 additions between normalisations (value() normalises a
/// copy, the register itself is never renormalised).
class ExactSum {
public:
    ExactSum() { limb_.fill(0); }

    void add(double x) {
        const std::uint64_t bits = std::bit_cast<std::uint64_t>(x);
        const int ebits = static_cast<int>((bits >> 52) & 0x7ff);
        std::uint64_t m = bits & 0xfffffffffffffULL;
        if (ebits == 0x7ff) throw Error("ExactSum: cannot accumulate NaN or infinity");
        int e2;
        if (ebits == 0) {
            if (m == 0) return; // +-0
            e2 = -1074;
        } else {
            m |= 1ULL << 52;
            e2 = ebits - 1075;
        }
        const int off = e2 - kBase;
        const int q = off >> 5, r = off & 31;
        const unsigned __int128 wide = static_cast<unsigned __int128>(m) << r;
        const bool neg = (bits >> 63) != 0;
        add_chunk(q + 0, static_cast<std::int64_t>(static_cast<std::uint64_t>(wide) & 0xffffffffULL), neg);
        add_chunk(q + 1, static_cast<std::int64_t>(static_cast<std::uint64_t>(wide >> 32) & 0xffffffffULL), neg);
        add_chunk(q + 2, static_cast<std::int64_t>(static_cast<std::uint64_t>(wide >> 64)), neg);
    }

    void merge(const ExactSum& o) {
        for (int i = 0; i < kLimbs; ++i) limb_[i] += o.limb_[i];
    }

    /// Deterministic conversion to double (error well below 1 ulp).
    double value() const {
        std::array<std::int64_t, kLimbs> t = limb_;
        for (int i = 0; i + 1 < kLimbs; ++i) {
            const std::int64_t lo = t[i] & 0xffffffffLL;
            t[i + 1] += (t[i] - lo) >> 32;
            t[i] = lo;
        }
        double sign = 1.0;
        if (t[kLimbs - 1] < 0) {
            sign = -1.0;
            // two's-complement negate: lower limbs are in [0, 2^32)
            std::int64_t borrow = 0;
            for (int i = 0; i + 1 < kLimbs; ++i) {
                const std::int64_t need = t[i] + borrow;
                if (need > 0) {
                    t[i] = (1LL << 32) - need;
                    borrow = 1;
                } else {
                    t[i] = 0;
                    // borrow unchanged (need == 0 implies borrow was 0 here)
                }
            }
            t[kLimbs - 1] = -(t[kLimbs - 1] + borrow);
        }
        int h = kLimbs - 1;
        while (h > 0 && t[h] == 0) --h;
        const int low = h >= 4 ? h - 4 : 0;
        double s = 0.0;
        for (int i = h; i >= low; --i) s = s * 4294967296.0 + static_cast<double>(t[i]);
        if (s == 0.0) return 0.0;
        return sign * std::ldexp(s, 32 * low + kBase);
    }

    /// Split into a hi/lo double pair; hi + lo reproduces the exact sum to
    /// roughly 2^-106 relative. Used for aggregate wire payloads.
    void to_hilo(double& hi, double& lo) const {
        hi = value();
        ExactSum rem = *this;
        rem.add(-hi);
        lo = rem.value();
    }

private:
    // Limb i covers binary exponents [kBase + 32 i, kBase + 32 i + 32).
    static constexpr int kBase = -1088; // below the smallest denormal bit (2^-1074)
    static constexpr int kLimbs = 68;   // covers up to 2^1024 with headroom

    void add_chunk(int q, std::int64_t chunk, bool neg) {
        if (chunk == 0) return;
        limb_[q] += neg ? -chunk : chunk;
    }

    std::array<std::int64_t, kLimbs> limb_;
};

/// A flat array of exact accumulators, for field-sized reductions.
class ExactArray {
public:
    ExactArray() = default;
    explicit ExactArray(std::size_t n) : acc_(n) {}

    std::size_t size() const { return acc_.size(); }
    void add(std::size_t i, double x) { acc_[i].add(x); }
    ExactSum& at(std::size_t i) { return acc_[i]; }
    const ExactSum& at(std::size_t i) const { return acc_[i]; }

    void merge(const ExactArray& o) {
        if (o.acc_.size() != acc_.size())
            throw Error("ExactArray::merge: size mismatch");
        for (std::size_t i = 0; i < acc_.size(); ++i) acc_[i].merge(o.acc_[i]);
    }

    std::vector<double> values() const {
        std::vector<double> out(acc_.size());
        for (std::size_t i = 0; i < acc_.size(); ++i) out[i] = acc_[i].value();
        return out;
    }

    /// hi/lo planes concatenated: [all hi..., all lo...].
    std::vector<double> hilo() const {
        std::vector<double> out(2 * acc_.size());
        for (std::size_t i = 0; i < acc_.size(); ++i)
            acc_[i].to_hilo(out[i], out[acc_.size() + i]);
        return out;
    }

private:
    std::vector<ExactSum> acc_;
};

} // namespace sam
