#pragma once

#include <cstdint>
#include <random>

#include "tada/tensor.hpp"

namespace tada {

/// Seeded generator used everywhere a reproducible stream is needed.
using Rng = std::mt19937_64;

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> dist(mean, stddev);
    for (auto& v : t.data) v = static_cast<T>(dist(rng));
}

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.data) v = static_cast<T>(dist(rng));
}

}  // namespace tada
