#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

namespace rbg {

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL)
{
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed for one named stage of a run, so stages can be re-run independently.
inline std::uint64_t derive_seed(std::uint64_t run_seed, std::string_view stage)
{
    return splitmix64(run_seed ^ fnv1a64(stage));
}

/// mt19937_64 plus distribution helpers whose output does not depend on the
/// standard library's (implementation-defined) distribution classes.
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) : m_engine(seed) {}

    std::uint64_t next() { return m_engine(); }

    /// Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n)
    {
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x = 0;
        do {
            x = m_engine();
        } while (x >= limit);
        return x % n;
    }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(m_engine() >> 11) * 0x1.0p-53; }

    double normal()
    {
        double u1 = 0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    [[nodiscard]] std::string state() const
    {
        std::ostringstream os;
        os << m_engine;
        return os.str();
    }

    void restore(const std::string& s)
    {
        std::istringstream is(s);
        is >> m_engine;
    }

    friend bool operator==(const Rng& a, const Rng& b) { return a.m_engine == b.m_engine; }

  private:
    std::mt19937_64 m_engine;
};

}  // namespace rbg
