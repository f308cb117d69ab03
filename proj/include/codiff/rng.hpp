#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "codiff/tensor.hpp"

namespace codiff {

// Deterministic RNG. Distribution code is written out by hand
// (std::normal_distribution & friends are implementation-defined),
// so identical seeds give identical streams everywhere.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0,1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive [lo, hi], rejection-sampled to stay unbiased.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return lo + static_cast<int64_t>(x % span);
  }

  // Box-Muller with a cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0,1]
    double u2 = uniform();
    double m = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = m * std::sin(a);
    has_spare_ = true;
    return m * std::cos(a);
  }

  template <typename T>
  void fill_normal(Tensor<T>& t, double mean = 0.0, double stddev = 1.0) {
    for (int64_t i = 0; i < t.numel(); ++i)
      t[i] = static_cast<T>(mean + stddev * normal());
  }

  template <typename T>
  Tensor<T> normal_tensor(std::vector<int> shape, double mean = 0.0, double stddev = 1.0) {
    Tensor<T> t(std::move(shape));
    fill_normal(t, mean, stddev);
    return t;
  }

  std::string save_state() const {
    std::ostringstream ss;
    ss << eng_ << " " << (has_spare_ ? 1 : 0) << " " << spare_;
    return ss.str();
  }

  void load_state(const std::string& s) {
    std::istringstream ss(s);
    int hs = 0;
    ss >> eng_ >> hs >> spare_;
    has_spare_ = hs != 0;
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace codiff
