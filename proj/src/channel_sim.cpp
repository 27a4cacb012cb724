#include "csiloc/channel_sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <future>
#include <numeric>
#include <thread>

namespace csiloc {

std::string hex_digest(std::uint64_t d) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(d));
  return buf;
}

int ScenarioConfig::rp_columns() const {
  return static_cast<int>(std::floor(room_extent.x() / rp_spacing + 1e-9)) + 1;
}

int ScenarioConfig::rp_rows() const {
  return static_cast<int>(std::floor(room_extent.y() / rp_spacing + 1e-9)) + 1;
}

Vec2 ScenarioConfig::rp_position(int rp) const {
  const int cols = rp_columns();
  return {rp_spacing * (rp % cols), rp_spacing * (rp / cols)};
}

void ScenarioConfig::validate() const {
  auto fail = [this](const std::string& what) { throw ConfigError("scenario '" + name + "': " + what); };
  if (!(room_extent.x() > 0.0 && room_extent.y() > 0.0)) fail("room_extent must be positive");
  if (aps.empty()) fail("at least one AP required");
  if (!(rp_spacing > 0.0)) fail("rp_spacing must be > 0");
  if (n_rx < 1) fail("n_rx must be >= 1");
  if (!(center_freq_hz > 0.0)) fail("center_freq_hz must be > 0");
  if (paths_per_link < 1) fail("paths_per_link must be >= 1");
  if ((!los_present || obstacle.rp_fraction > 0.0) && paths_per_link < 2)
    fail("paths_per_link must be >= 2 when the LoS path can be absent");
  if (!(noise_std >= 0.0)) fail("noise_std must be >= 0");
  if (!(attenuation_jitter >= 0.0) || !(obstacle.extra_jitter >= 0.0)) fail("jitter must be >= 0");
  if (!(obstacle.rp_fraction >= 0.0 && obstacle.rp_fraction <= 1.0)) fail("obstacle.rp_fraction must be in [0,1]");
  if (!(reflection_gain >= 0.0)) fail("reflection_gain must be >= 0");
  for (std::size_t i = 0; i < aps.size(); ++i) {
    const auto& ap = aps[i];
    const auto tag = "ap " + std::to_string(i) + ": ";
    if (ap.position.x() < 0.0 || ap.position.y() < 0.0 || ap.position.x() > room_extent.x() ||
        ap.position.y() > room_extent.y())
      fail(tag + "position outside room_extent");
    if (ap.n_tx < 1) fail(tag + "n_tx must be >= 1");
    subcarrier_count(ap.bandwidth_mhz);
  }
  if (rp_count() < 1) fail("empty RP grid");
}

int subcarrier_count(int bandwidth_mhz) {
  switch (bandwidth_mhz) {
    case 20:
    case 40:
    case 80:
      return 64 * (bandwidth_mhz / 20);
    default:
      throw ConfigError("unsupported bandwidth " + std::to_string(bandwidth_mhz) + " MHz (expected 20, 40 or 80)");
  }
}

std::vector<int> subcarrier_indices(int subcarriers) {
  std::vector<int> idx(subcarriers);
  std::iota(idx.begin(), idx.end(), -subcarriers / 2);
  return idx;
}

Scalar subcarrier_wavelength(const ScenarioConfig& cfg, int bandwidth_mhz, int index) {
  const int k = subcarrier_count(bandwidth_mhz);
  const Scalar spacing_hz = bandwidth_mhz * 1e6 / k;
  return kSpeedOfLight / (cfg.center_freq_hz + spacing_hz * index);
}

Scalar wrap_angle(Scalar a) {
  Scalar w = std::fmod(a + kPi, 2.0 * kPi);
  if (w < 0.0) w += 2.0 * kPi;
  w -= kPi;
  return w >= kPi ? -kPi : w;
}

namespace {

// Broadside is the +y axis; both arrays lie along x.
Scalar bearing(const Vec2& from, const Vec2& to) {
  const Vec2 d = to - from;
  return wrap_angle(std::atan2(d.x(), d.y()));
}

Scalar lognormal_factor(std::mt19937_64& rng, Scalar sigma) {
  if (sigma <= 0.0) return 1.0;
  std::normal_distribution<Scalar> n(0.0, sigma);
  return std::exp(n(rng));
}

}  // namespace

std::vector<Scatterer> scenario_scatterers(const ScenarioConfig& cfg) {
  auto rng = substream(cfg.seed, 0x5ca7ULL);
  std::uniform_real_distribution<Scalar> ux(0.0, cfg.room_extent.x());
  std::uniform_real_distribution<Scalar> uy(0.0, cfg.room_extent.y());
  std::vector<Scatterer> out(std::max(cfg.paths_per_link - 1, 0));
  for (auto& s : out) {
    const Scalar x = ux(rng);
    const Scalar y = uy(rng);
    s.position = {x, y};
  }
  return out;
}

std::vector<bool> obstructed_rps(const ScenarioConfig& cfg) {
  std::vector<bool> out(cfg.rp_count(), false);
  if (cfg.obstacle.rp_fraction <= 0.0) return out;
  auto rng = substream(cfg.seed, 0x0b57ULL);
  std::uniform_real_distribution<Scalar> u(0.0, 1.0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = u(rng) < cfg.obstacle.rp_fraction;
  return out;
}

std::vector<PathComponent> sample_paths(const ScenarioConfig& cfg, int ap, int rp, std::mt19937_64& rng) {
  if (cfg.paths_per_link < 1) throw ConfigError("paths_per_link must be >= 1");
  const Vec2 ap_pos = cfg.aps.at(ap).position;
  const Vec2 rp_pos = cfg.rp_position(rp);
  const Scalar h2 = cfg.height_offset * cfg.height_offset;

  bool blocked = false;
  Scalar jitter = cfg.attenuation_jitter;
  if (cfg.obstacle.rp_fraction > 0.0 && obstructed_rps(cfg)[rp]) {
    blocked = true;
    jitter = std::hypot(jitter, cfg.obstacle.extra_jitter);
  }

  std::vector<PathComponent> paths;
  paths.reserve(cfg.paths_per_link);
  if (cfg.los_present && !blocked) {
    PathComponent los;
    los.length = std::sqrt((rp_pos - ap_pos).squaredNorm() + h2);
    los.attenuation = 1.0 / los.length;
    los.aod = bearing(ap_pos, rp_pos);
    los.aoa = bearing(rp_pos, ap_pos);
    paths.push_back(los);
  }
  for (const auto& s : scenario_scatterers(cfg)) {
    PathComponent p;
    const Scalar planar = (s.position - ap_pos).norm() + (rp_pos - s.position).norm();
    p.length = std::sqrt(planar * planar + h2);
    p.attenuation = cfg.reflection_gain / p.length * lognormal_factor(rng, jitter);
    p.aod = bearing(ap_pos, s.position);
    p.aoa = bearing(rp_pos, s.position);
    paths.push_back(p);
  }
  return paths;
}

std::mt19937_64 sample_stream(const ScenarioConfig& cfg, int ap, int rp, int sample) {
  return substream(cfg.seed, 0xc51ULL, cfg.realization, ap, rp, sample);
}

CsiSample generate_csi(const ScenarioConfig& cfg, int ap, int rp, const std::vector<PathComponent>& paths,
                       std::mt19937_64& rng) {
  if (paths.empty()) throw DataError("generate_csi: empty path list");
  if (ap < 0 || ap >= static_cast<int>(cfg.aps.size()) || rp < 0 || rp >= cfg.rp_count())
    throw DataError("generate_csi: AP/RP index out of range");
  const ApConfig& apc = cfg.aps[ap];
  CsiSample s;
  s.ap_index = ap;
  s.rp_index = rp;
  s.true_location = cfg.rp_position(rp);
  s.n_rx = cfg.n_rx;
  s.n_tx = apc.n_tx;
  s.bandwidth_mhz = apc.bandwidth_mhz;
  s.subcarriers = subcarrier_count(apc.bandwidth_mhz);
  s.csi = ComplexVector::Zero(static_cast<Index>(s.n_rx) * s.n_tx * s.subcarriers);

  const auto indices = subcarrier_indices(s.subcarriers);
  for (int k = 0; k < s.subcarriers; ++k) {
    const Scalar lambda = subcarrier_wavelength(cfg, apc.bandwidth_mhz, indices[k]);
    Eigen::MatrixXcd h = Eigen::MatrixXcd::Zero(s.n_rx, s.n_tx);
    for (const auto& p : paths) {
      const auto rx = steering_vector(p.aoa, s.n_rx, cfg.rx_antenna_spacing, lambda);
      const auto tx = steering_vector(p.aod, s.n_tx, apc.antenna_spacing, lambda);
      const Complex gain = p.attenuation * std::polar(1.0, -2.0 * kPi * p.length / lambda);
      h.noalias() += gain * rx * tx.adjoint();
    }
    for (int r = 0; r < s.n_rx; ++r)
      for (int t = 0; t < s.n_tx; ++t) s.at(r, t, k) = h(r, t);
  }

  if (cfg.noise_std > 0.0) {
    std::normal_distribution<Scalar> n(0.0, cfg.noise_std / std::sqrt(2.0));
    for (Index i = 0; i < s.csi.size(); ++i) s.csi[i] += Complex(n(rng), n(rng));
  }
  const auto& pe = cfg.phase_error;
  if (pe.cfo_slope != 0.0 || pe.sto_offset != 0.0) {
    for (int k = 0; k < s.subcarriers; ++k) {
      const Complex rot = std::polar(1.0, -(pe.cfo_slope * indices[k] + pe.sto_offset));
      for (int r = 0; r < s.n_rx; ++r)
        for (int t = 0; t < s.n_tx; ++t) s.at(r, t, k) *= rot;
    }
  }
  for (Index i = 0; i < s.csi.size(); ++i)
    if (!std::isfinite(s.csi[i].real()) || !std::isfinite(s.csi[i].imag()))
      throw DataError("generate_csi: non-finite CSI entry");
  return s;
}

const CsiSample& Dataset::record(int rp, int sample, int ap) const {
  const int n_ap = static_cast<int>(config.aps.size());
  return records.at((static_cast<std::size_t>(rp) * samples_per_rp + sample) * n_ap + ap);
}

Dataset generate_dataset(const ScenarioConfig& cfg, int samples_per_rp, int sample_offset, int jobs) {
  cfg.validate();
  if (samples_per_rp < 1) throw UsageError("samples_per_rp must be >= 1");
  Dataset ds;
  ds.config = cfg;
  ds.samples_per_rp = samples_per_rp;
  ds.sample_offset = sample_offset;
  const int n_rp = cfg.rp_count();
  const int n_ap = static_cast<int>(cfg.aps.size());
  ds.records.resize(static_cast<std::size_t>(n_rp) * samples_per_rp * n_ap);

  auto fill = [&](int rp_begin, int rp_end) {
    for (int rp = rp_begin; rp < rp_end; ++rp)
      for (int s = 0; s < samples_per_rp; ++s)
        for (int ap = 0; ap < n_ap; ++ap) {
          auto rng = sample_stream(cfg, ap, rp, sample_offset + s);
          const auto paths = sample_paths(cfg, ap, rp, rng);
          auto rec = generate_csi(cfg, ap, rp, paths, rng);
          rec.sample_index = sample_offset + s;
          ds.records[(static_cast<std::size_t>(rp) * samples_per_rp + s) * n_ap + ap] = std::move(rec);
        }
  };

  jobs = std::clamp(jobs, 1, n_rp);
  if (jobs == 1) {
    fill(0, n_rp);
  } else {
    std::vector<std::future<void>> parts;
    const int chunk = (n_rp + jobs - 1) / jobs;
    for (int b = 0; b < n_rp; b += chunk) parts.push_back(std::async(std::launch::async, fill, b, std::min(n_rp, b + chunk)));
    for (auto& f : parts) f.get();
  }
  return ds;
}

}  // namespace csiloc
