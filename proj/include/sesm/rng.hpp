#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace sesm {

// One master seed fans out into independent named sub-streams (init, shuffle,
// gumbel, data, ...). Toggling a consumer of one stream never shifts the draws
// seen by the others.
class Rng {
public:
    class Stream {
    public:
        explicit Stream(std::uint64_t seed) : gen_(seed) {}

        std::uint64_t next_u64() { return gen_(); }

        // Uniform in (0, 1): never returns an exact endpoint, so logs are safe.
        double uniform() {
            return (static_cast<double>(gen_() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
        }

        double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

        // Box-Muller, two uniforms per draw; stateless across calls.
        double normal() {
            const double u1 = uniform();
            const double u2 = uniform();
            return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
        }

        double normal(double mean, double stddev) { return mean + stddev * normal(); }

        // Standard Gumbel(0, 1).
        double gumbel() { return -std::log(-std::log(uniform())); }

        // Uniform integer in [0, n). Rejection-free modulo is fine here: n is
        // tiny relative to 2^64 so the bias is far below observable.
        std::size_t index(std::size_t n) { return static_cast<std::size_t>(gen_() % n); }

        template <typename Vec>
        void shuffle(Vec& v) {
            for (std::size_t i = v.size(); i > 1; --i) {
                std::swap(v[i - 1], v[index(i)]);
            }
        }

        std::string state() const {
            std::ostringstream os;
            os << gen_;
            return os.str();
        }

        void set_state(const std::string& s) {
            std::istringstream is(s);
            is >> gen_;
        }

    private:
        std::mt19937_64 gen_;
    };

    explicit Rng(std::uint64_t master_seed) : master_(master_seed) {}

    Stream stream(std::string_view name) const {
        return Stream(splitmix(master_ ^ fnv1a(name)));
    }

    std::uint64_t master_seed() const { return master_; }

private:
    static std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 1469598103934665603ULL;
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ULL;
        }
        return h;
    }

    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        return x ^ (x >> 31);
    }

    std::uint64_t master_;
};

} // namespace sesm
