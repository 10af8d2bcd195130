#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>

namespace attnlens {

// All parameters are stored as row-major dense matrices; vectors are 1 x n.
template <class T>
using matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using row_vector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using matrixf = matrix<float>;
using matrixd = matrix<double>;

// splitmix64 finalizer; used to derive independent seeds from (seed, index).
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Gaussian fill. std::normal_distribution is implementation defined, so draw
// Box-Muller from raw 64-bit words to keep files reproducible across libraries.
template <class T>
void fill_normal(matrix<T>& m, double stddev, std::mt19937_64& rng) {
  constexpr double two_pi = 6.283185307179586476925286766559;
  constexpr double inv = 1.0 / 9007199254740992.0;  // 2^-53
  auto uniform = [&] { return (static_cast<double>(rng() >> 11) + 0.5) * inv; };
  for (Eigen::Index i = 0; i < m.size(); i += 2) {
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    m.data()[i] = static_cast<T>(stddev * r * std::cos(two_pi * u2));
    if (i + 1 < m.size()) m.data()[i + 1] = static_cast<T>(stddev * r * std::sin(two_pi * u2));
  }
}

}  // namespace attnlens
