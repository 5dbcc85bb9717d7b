#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spct {

// Error categories map onto CLI exit codes (2 config, 3 I/O, 4 numerical).
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

class NumericalError : public Error {
public:
  using Error::Error;
};

/// Dense three-axis array of doubles. The tag makes material images,
/// sinogram stacks and binned counts distinct types with the same storage.
template <class Tag>
struct Stack3 {
  std::array<std::size_t, 3> shape{0, 0, 0};
  std::vector<double> data;

  Stack3() = default;
  Stack3(std::size_t n0, std::size_t n1, std::size_t n2, double fill = 0.0)
      : shape{n0, n1, n2}, data(n0 * n1 * n2, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return shape[1] * shape[2]; }

  double& operator()(std::size_t k, std::size_t i, std::size_t j) {
    return data[(k * shape[1] + i) * shape[2] + j];
  }
  double operator()(std::size_t k, std::size_t i, std::size_t j) const {
    return data[(k * shape[1] + i) * shape[2] + j];
  }

  std::span<double> slice(std::size_t k) { return {data.data() + k * plane(), plane()}; }
  std::span<const double> slice(std::size_t k) const {
    return {data.data() + k * plane(), plane()};
  }

  bool same_shape(const Stack3& o) const { return shape == o.shape; }
};

struct MaterialImageTag {};
struct SinogramTag {};
struct CountsTag {};

/// Volume fractions q, indexed (material, pixel row, pixel column).
using MaterialImage = Stack3<MaterialImageTag>;
/// Material line integrals beta, indexed (material, angle, detector).
using SinogramStack = Stack3<SinogramTag>;
/// Photon counts per energy bin, indexed (bin, angle, detector).
using BinnedCounts = Stack3<CountsTag>;

inline std::string shape_string(const std::array<std::size_t, 3>& s) {
  return "(" + std::to_string(s[0]) + ", " + std::to_string(s[1]) + ", " + std::to_string(s[2]) +
         ")";
}

template <class Tag>
void require_shape(const Stack3<Tag>& a, const std::array<std::size_t, 3>& expected,
                   const char* what) {
  if (a.shape != expected || a.data.size() != expected[0] * expected[1] * expected[2])
    throw std::invalid_argument(std::string(what) + ": shape " + shape_string(a.shape) +
                                " does not match expected " + shape_string(expected));
}

// splitmix64 finaliser
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream seed for (seed, index, stream). Used so per-sample
/// randomness never depends on evaluation order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index, std::uint64_t stream = 0) {
  return mix64(mix64(seed) ^ mix64(index * 0x632be59bd9b4e019ULL + stream));
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

} // namespace spct
