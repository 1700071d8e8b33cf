#pragma once

// Counter-based random number streams built on Philox4x32-10.
//
// Every random draw in the library is addressed, not sequenced: a draw is a
// pure function of (master seed, stream purpose, c1, c2, c3, index). This is
// what makes the Sznitman coupling exact (particle system and McKean--Vlasov
// particles consume the same increments by construction) and what makes runs
// reproducible independently of worker count or call order.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>

namespace gridmf::rng {

// Stream purposes. Fixed constants so the key derivation never depends on
// string hashing or enumeration order.
enum class Stream : std::uint64_t {
    noise = 0x6e6f697365ull,        // Brownian increments
    init_field = 0x696e6974ull,     // initial-data spectral modes
    init_law = 0x696c6177ull,       // Monte Carlo estimate of the t=0 law
    subsample = 0x73756273ull,      // atom subsampling for transport estimates
    regularity = 0x72656775ull,     // Lipschitz/Hoelder sampling
    scratch = 0x73637261ull,        // tests and one-off draws
};

inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Derived seed for replica r of a run; keeps replicas on disjoint streams.
inline std::uint64_t sub_seed(std::uint64_t master_seed, std::uint64_t r) {
    return mix64(master_seed ^ mix64(r + 0x51ed270b0ull));
}

struct Block {
    std::uint32_t v[4];
};

// Philox4x32-10 (Salmon et al. counter-based generator). Verified against the
// reference known-answer vectors in the tests.
inline Block philox4x32(const std::array<std::uint32_t, 4>& ctr, std::uint32_t k0,
                        std::uint32_t k1) {
    std::uint32_t c0 = ctr[0], c1 = ctr[1], c2 = ctr[2], c3 = ctr[3];
    for (int r = 0; r < 10; ++r) {
        if (r > 0) {
            k0 += 0x9e3779b9u;
            k1 += 0xbb67ae85u;
        }
        const std::uint64_t p0 = 0xd2511f53ull * c0;
        const std::uint64_t p1 = 0xcd9e8d57ull * c2;
        const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
        const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
        const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
        const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
        const std::uint32_t n0 = hi1 ^ c1 ^ k0;
        const std::uint32_t n1 = lo1;
        const std::uint32_t n2 = hi0 ^ c3 ^ k1;
        const std::uint32_t n3 = lo0;
        c0 = n0;
        c1 = n1;
        c2 = n2;
        c3 = n3;
    }
    return Block{{c0, c1, c2, c3}};
}

// A keyed stream: the Philox key encodes (master seed, purpose); the counter
// encodes (c1, c2, c3, block index). Each block yields two normals or two
// uniforms, addressed by index.
class CounterStream {
  public:
    CounterStream(std::uint64_t master_seed, Stream purpose, std::uint32_t c1 = 0,
                  std::uint32_t c2 = 0, std::uint32_t c3 = 0)
        : c1_(c1), c2_(c2), c3_(c3) {
        const std::uint64_t h = mix64(master_seed ^ mix64(static_cast<std::uint64_t>(purpose)));
        k0_ = static_cast<std::uint32_t>(h);
        k1_ = static_cast<std::uint32_t>(h >> 32);
    }

    // Uniform double in the open interval (0,1), index-addressed.
    double uniform(std::uint64_t index) const {
        const Block b = block(static_cast<std::uint32_t>(index / 2));
        const int half = static_cast<int>(index % 2);
        return to_unit(b.v[2 * half], b.v[2 * half + 1]);
    }

    // Standard normal, index-addressed (Box-Muller on a Philox block).
    double normal(std::uint64_t index) const {
        const Block b = block(static_cast<std::uint32_t>(index / 2));
        const double u1 = to_unit(b.v[0], b.v[1]);
        const double u2 = to_unit(b.v[2], b.v[3]);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        return (index % 2 == 0) ? r * std::cos(a) : r * std::sin(a);
    }

    // Fills out[0..n) with normals at indices base..base+n. One Philox call
    // per pair; the hot path for increment sampling.
    void fill_normals(double* out, std::size_t n, std::uint64_t base = 0) const {
        std::size_t i = 0;
        while (i < n) {
            const std::uint64_t idx = base + i;
            const Block b = block(static_cast<std::uint32_t>(idx / 2));
            const double u1 = to_unit(b.v[0], b.v[1]);
            const double u2 = to_unit(b.v[2], b.v[3]);
            const double r = std::sqrt(-2.0 * std::log(u1));
            const double a = 2.0 * std::numbers::pi * u2;
            if (idx % 2 == 0) {
                out[i++] = r * std::cos(a);
                if (i < n) out[i++] = r * std::sin(a);
            } else {
                out[i++] = r * std::sin(a);
            }
        }
    }

  private:
    Block block(std::uint32_t blk) const { return philox4x32({blk, c1_, c2_, c3_}, k0_, k1_); }

    // 64 bits -> (0,1): top 53 bits plus a half-ulp offset, never 0 or 1.
    static double to_unit(std::uint32_t hi, std::uint32_t lo) {
        const std::uint64_t x = (static_cast<std::uint64_t>(hi) << 32) | lo;
        return (static_cast<double>(x >> 11) + 0.5) * 0x1.0p-53;
    }

    std::uint32_t k0_, k1_;
    std::uint32_t c1_, c2_, c3_;
};

}  // namespace gridmf::rng
