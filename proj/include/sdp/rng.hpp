#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>

namespace sdp {

/// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) noexcept
{
    return mix64(mix64(base) ^ (salt + 0x632be59bd9b4e019ULL));
}

/// Hash of the exact bit patterns of a real vector.
inline std::uint64_t hash_reals(std::span<const double> values) noexcept
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (double v : values)
        h = mix64(h ^ std::bit_cast<std::uint64_t>(v));
    return h;
}

/// Seeded random stream. The engine is mt19937_64 (fully specified by the
/// standard); the conversions below are written out so that draws are
/// identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : _engine(seed) {}

    std::uint64_t next_u64() { return _engine(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(_engine() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
    std::size_t index(std::size_t n)
    {
        const std::uint64_t bound = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t r = _engine();
        while (r >= limit)
            r = _engine();
        return static_cast<std::size_t>(r % bound);
    }

    /// Standard normal via Box-Muller; consumes exactly two uniforms.
    double normal()
    {
        const double u1 = 1.0 - uniform(); // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    double cauchy(double location, double scale)
    {
        return location + scale * std::tan(std::numbers::pi * (uniform() - 0.5));
    }

    template <typename T>
    void shuffle(std::span<T> items)
    {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = index(i);
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::mt19937_64 _engine;
};

} // namespace sdp
