#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "csiloc/common.hpp"

namespace csiloc {

struct PathComponent {
  Scalar attenuation = 0.0;  // alpha, dimensionless
  Scalar length = 1.0;       // meters
  Scalar aod = 0.0;          // radians, [-pi, pi)
  Scalar aoa = 0.0;          // radians, [-pi, pi)
};

struct ApConfig {
  Vec2 position = Vec2::Zero();
  int n_tx = 1;
  int bandwidth_mhz = 20;
  Scalar antenna_spacing = 0.028;
};

struct PhaseError {
  Scalar cfo_slope = 0.0;   // radians per subcarrier index
  Scalar sto_offset = 0.0;  // radians
};

// Passersby / obstacle emulation: on a seeded subset of RPs the LoS path is
// removed and the scattered paths get extra log-normal jitter.
struct ObstacleConfig {
  Scalar rp_fraction = 0.0;
  Scalar extra_jitter = 0.0;
};

struct ScenarioConfig {
  std::string name = "scenario";
  Vec2 room_extent{8.0, 9.0};
  std::vector<ApConfig> aps;
  Scalar rp_spacing = 0.5;
  int n_rx = 2;
  Scalar rx_antenna_spacing = 0.06;
  Scalar center_freq_hz = 5.25e9;
  Scalar height_offset = 0.25;  // AP height minus UE antenna height
  int paths_per_link = 4;
  bool los_present = true;
  Scalar noise_std = 0.01;
  PhaseError phase_error;
  Scalar reflection_gain = 0.6;
  Scalar attenuation_jitter = 0.05;
  ObstacleConfig obstacle;
  std::uint64_t seed = 1;
  // Selects an independent realisation of the per-sample randomness (noise,
  // jitter) while keeping the environment (scatterers, obstacles) fixed.
  std::uint64_t realization = 0;

  int rp_columns() const;
  int rp_rows() const;
  int rp_count() const { return rp_columns() * rp_rows(); }
  Vec2 rp_position(int rp) const;
  Scalar diagonal() const { return room_extent.norm(); }

  // Throws ConfigError on any violated invariant.
  void validate() const;
};

struct CsiSample {
  int ap_index = 0;
  int rp_index = 0;
  int sample_index = 0;
  Vec2 true_location = Vec2::Zero();
  int n_rx = 1;
  int n_tx = 1;
  int subcarriers = 0;
  int bandwidth_mhz = 20;
  // Row-major [n_rx, n_tx, K].
  ComplexVector csi;

  Complex& at(int rx, int tx, int k) { return csi[(static_cast<Index>(rx) * n_tx + tx) * subcarriers + k]; }
  const Complex& at(int rx, int tx, int k) const {
    return csi[(static_cast<Index>(rx) * n_tx + tx) * subcarriers + k];
  }
};

int subcarrier_count(int bandwidth_mhz);

// Centered subcarrier indices -K/2 .. K/2-1; shared by the frequency grid and
// the injected phase error.
std::vector<int> subcarrier_indices(int subcarriers);

Scalar subcarrier_wavelength(const ScenarioConfig& cfg, int bandwidth_mhz, int index);

// Uniform linear array response, element m = exp(-j 2 pi m spacing sin(angle) / wavelength).
template <typename T>
Eigen::Matrix<std::complex<T>, Eigen::Dynamic, 1> steering_vector(T angle, int n_ant, T spacing, T wavelength) {
  if (n_ant < 1) throw UsageError("steering_vector: n_ant must be >= 1");
  if (!(wavelength > T(0))) throw UsageError("steering_vector: wavelength must be positive");
  Eigen::Matrix<std::complex<T>, Eigen::Dynamic, 1> v(n_ant);
  const T step = T(2) * T(kPi) * spacing * std::sin(angle) / wavelength;
  for (int m = 0; m < n_ant; ++m) v[m] = std::polar(T(1), -step * T(m));
  return v;
}

Scalar wrap_angle(Scalar a);

struct Scatterer {
  Vec2 position;
};

// Fixed scatterer layout of the environment, a pure function of cfg.seed.
std::vector<Scatterer> scenario_scatterers(const ScenarioConfig& cfg);

// RPs whose LoS is blocked in the obstacle variant.
std::vector<bool> obstructed_rps(const ScenarioConfig& cfg);

std::vector<PathComponent> sample_paths(const ScenarioConfig& cfg, int ap, int rp, std::mt19937_64& rng);

CsiSample generate_csi(const ScenarioConfig& cfg, int ap, int rp, const std::vector<PathComponent>& paths,
                       std::mt19937_64& rng);

// RNG substream for one (AP, RP, sample) triple.
std::mt19937_64 sample_stream(const ScenarioConfig& cfg, int ap, int rp, int sample);

struct Dataset {
  ScenarioConfig config;
  int samples_per_rp = 0;
  // Sample offset of the first record per RP; lets train/fine-tune/test
  // splits draw disjoint sample counters from the same scenario.
  int sample_offset = 0;
  // Ordered by (rp, sample, ap).
  std::vector<CsiSample> records;

  const CsiSample& record(int rp, int sample, int ap) const;
};

Dataset generate_dataset(const ScenarioConfig& cfg, int samples_per_rp, int sample_offset = 0, int jobs = 1);

}  // namespace csiloc
