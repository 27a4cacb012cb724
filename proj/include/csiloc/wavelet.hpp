#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include <Eigen/Core>

#include "csiloc/common.hpp"

namespace csiloc::wavelet {

// Daubechies-4 (8-tap) scaling filter, reconstruction low-pass.
inline constexpr std::array<double, 8> kDb4 = {
    0.2303778133088965,  0.7148465705529157,  0.6308807679298589,  -0.027983769416859854,
    -0.18703481171909309, 0.030841381835560764, 0.0328830116668852, -0.010597401785069032};

template <typename T>
struct Decomposition {
  Eigen::Matrix<T, Eigen::Dynamic, 1> approx;
  // details[0] is the finest level.
  std::vector<Eigen::Matrix<T, Eigen::Dynamic, 1>> details;
};

// One level of the periodised orthogonal DWT. x.size() must be even.
template <typename T>
void analysis_step(const Eigen::Matrix<T, Eigen::Dynamic, 1>& x, Eigen::Matrix<T, Eigen::Dynamic, 1>& a,
                   Eigen::Matrix<T, Eigen::Dynamic, 1>& d) {
  const Index n = x.size();
  const Index half = n / 2;
  constexpr int taps = static_cast<int>(kDb4.size());
  a.setZero(half);
  d.setZero(half);
  for (Index i = 0; i < half; ++i)
    for (int k = 0; k < taps; ++k) {
      const T v = x[(2 * i + k) % n];
      const T g = (k % 2 == 0 ? T(1) : T(-1)) * T(kDb4[taps - 1 - k]);
      a[i] += T(kDb4[k]) * v;
      d[i] += g * v;
    }
}

template <typename T>
Eigen::Matrix<T, Eigen::Dynamic, 1> synthesis_step(const Eigen::Matrix<T, Eigen::Dynamic, 1>& a,
                                                   const Eigen::Matrix<T, Eigen::Dynamic, 1>& d) {
  const Index half = a.size();
  const Index n = 2 * half;
  constexpr int taps = static_cast<int>(kDb4.size());
  Eigen::Matrix<T, Eigen::Dynamic, 1> x = Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(n);
  for (Index i = 0; i < half; ++i)
    for (int k = 0; k < taps; ++k) {
      const T g = (k % 2 == 0 ? T(1) : T(-1)) * T(kDb4[taps - 1 - k]);
      x[(2 * i + k) % n] += T(kDb4[k]) * a[i] + g * d[i];
    }
  return x;
}

// x.size() must be divisible by 2^levels.
template <typename T>
Decomposition<T> decompose(const Eigen::Matrix<T, Eigen::Dynamic, 1>& x, int levels) {
  Decomposition<T> out;
  out.approx = x;
  for (int l = 0; l < levels; ++l) {
    Eigen::Matrix<T, Eigen::Dynamic, 1> a, d;
    analysis_step<T>(out.approx, a, d);
    out.approx = std::move(a);
    out.details.push_back(std::move(d));
  }
  return out;
}

template <typename T>
Eigen::Matrix<T, Eigen::Dynamic, 1> reconstruct(const Decomposition<T>& dec) {
  Eigen::Matrix<T, Eigen::Dynamic, 1> x = dec.approx;
  for (auto it = dec.details.rbegin(); it != dec.details.rend(); ++it) x = synthesis_step<T>(x, *it);
  return x;
}

template <typename T>
T median_abs(const Eigen::Matrix<T, Eigen::Dynamic, 1>& v) {
  std::vector<T> a(v.size());
  for (Index i = 0; i < v.size(); ++i) a[i] = std::abs(v[i]);
  if (a.empty()) return T(0);
  const std::size_t mid = a.size() / 2;
  std::nth_element(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(mid), a.end());
  T m = a[mid];
  if (a.size() % 2 == 0) {
    const T lower = *std::max_element(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(mid));
    m = (m + lower) / T(2);
  }
  return m;
}

}  // namespace csiloc::wavelet
