#pragma once

#include <cstdint>
#include <random>

#include "xmodal/common.hpp"

namespace xmodal {

/// SplitMix64 finalizer; used to derive independent child seeds.
std::uint64_t mix_seed(std::uint64_t x);

/// Child seed for stream `tag`, element `index` under `base`.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag, std::uint64_t index = 0);

/// Seeded standard-normal source. Output is a function of the seed only:
/// 53-bit uniforms from mt19937_64 and a hand-rolled Box-Muller transform,
/// so streams are identical across standard library implementations.
class NoiseSource {
 public:
  explicit NoiseSource(std::uint64_t seed) : engine_(seed) {}

  double uniform();  // [0, 1)
  double normal();
  std::uint64_t next_u64() { return engine_(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  template <typename Scalar>
  Mat<Scalar> normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Mat<Scalar> m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<Scalar>(normal());
    }
    return m;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace xmodal
