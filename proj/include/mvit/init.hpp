#pragma once

#include <cstdint>
#include <random>

#include "mvit/tensor.hpp"

namespace mvit {

// Seeded RNG; one instance fully determines all synthetic inputs and
// parameter draws of a run.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  double uniform(double a = 0.0, double b = 1.0) {
    return std::uniform_real_distribution<double>(a, b)(eng_);
  }
  double normal(double mean = 0.0, double sigma = 1.0) {
    return std::normal_distribution<double>(mean, sigma)(eng_);
  }
  // Truncated at +-2 sigma (resampled).
  double trunc_normal(double sigma) {
    for (;;) {
      const double v = normal(0.0, sigma);
      if (std::abs(v) <= 2.0 * sigma) return v;
    }
  }
  uint64_t next_u64() { return eng_(); }
  int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive
    return std::uniform_int_distribution<int64_t>(lo, hi)(eng_);
  }

  Tensor normal_tensor(Shape shape, double sigma = 1.0) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t.at(i) = normal(0.0, sigma);
    return t;
  }
  Tensor trunc_normal_tensor(Shape shape, double sigma = 0.02) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t.at(i) = trunc_normal(sigma);
    return t;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace mvit
