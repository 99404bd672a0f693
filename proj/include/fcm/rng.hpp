#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace fcm {

// Seeded random stream. Independent sub-streams are derived with Fork so that
// consumers (data synthesis, partitioning, training, tie breaking) never share
// state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(Mix(seed)) {}

  Rng Fork(std::string_view tag, std::uint64_t index = 0) const;

  std::uint64_t seed() const { return seed_; }
  std::mt19937_64& engine() { return engine_; }

  double Uniform(double lo = 0.0, double hi = 1.0);
  double Normal(double mean = 0.0, double stddev = 1.0);
  // Uniform integer in [0, n).
  std::size_t Index(std::size_t n);
  bool Bernoulli(double p);

  template <typename T>
  void Shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::swap(values[i - 1], values[Index(i)]);
    }
  }

  std::vector<std::size_t> Permutation(std::size_t n);

  static std::uint64_t Mix(std::uint64_t x);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace fcm
