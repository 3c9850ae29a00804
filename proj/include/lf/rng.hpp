#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace lf {

// Deterministic RNG. Normal draws use an explicit Box-Muller transform so
// the stream does not depend on the standard library's unspecified
// normal_distribution algorithm. Every normal() consumes exactly two
// engine draws, which keeps replay and checkpoint-resume bit-stable.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    // uniform in [0, 1) with 53 random bits
    double uniform() {
        return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
    }

    // standard normal, Box-Muller (trig form)
    float normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 2.220446049250313e-16;
        double r = std::sqrt(-2.0 * std::log(u1));
        return static_cast<float>(r * std::cos(6.283185307179586 * u2));
    }

    float normal(float mean, float stddev) { return mean + stddev * normal(); }

    // unbiased enough for desk scale; deterministic is what matters
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) throw std::invalid_argument("uniform_int: n must be positive");
        return static_cast<uint64_t>((static_cast<unsigned __int128>(engine_()) * n) >> 64);
    }

    bool bernoulli(double p) { return uniform() < p; }

    std::string state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (is.fail()) throw std::runtime_error("Rng::set_state: malformed state string");
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace lf
