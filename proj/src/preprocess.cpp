#include "csiloc/preprocess.hpp"

#include <cmath>
#include <fstream>

#include "csiloc/wavelet.hpp"

namespace csiloc {

Vector denoise_amplitude(const Vector& amp, const DenoiseConfig& cfg) {
  const Index n = amp.size();
  if (n < 4) throw DataError("denoise_amplitude: need at least 4 samples");
  if (!amp.allFinite()) throw DataError("denoise_amplitude: non-finite input");
  if (cfg.levels <= 0) return amp;
  int levels = cfg.levels;
  while (levels > 1 && (n >> levels) < 2) --levels;

  // Symmetric extension to a length divisible by 2^levels.
  const Index block = Index{1} << levels;
  const Index padded = (n + block - 1) / block * block;
  Vector x(padded);
  x.head(n) = amp;
  for (Index i = n; i < padded; ++i) x[i] = amp[std::max<Index>(0, 2 * n - 1 - i)];

  auto dec = wavelet::decompose<Scalar>(x, levels);
  const Scalar sigma = wavelet::median_abs<Scalar>(dec.details.front()) / 0.6745;
  const Scalar thr = sigma * std::sqrt(2.0 * std::log(static_cast<Scalar>(n)));
  for (auto& d : dec.details)
    for (Index i = 0; i < d.size(); ++i) {
      const Scalar m = std::abs(d[i]) - thr;
      d[i] = m > 0.0 ? std::copysign(m, d[i]) : 0.0;
    }
  Vector y = wavelet::reconstruct<Scalar>(dec).head(n);
  return y.cwiseMax(0.0);
}

Vector unwrap_phase(const Vector& phase) {
  Vector out = phase;
  Scalar offset = 0.0;
  for (Index i = 1; i < phase.size(); ++i) {
    const Scalar jump = phase[i] - phase[i - 1];
    if (std::abs(jump) >= kPi) {
      Scalar wrapped = std::fmod(jump + kPi, 2.0 * kPi);
      if (wrapped < 0.0) wrapped += 2.0 * kPi;
      offset += (wrapped - kPi) - jump;
    }
    out[i] = phase[i] + offset;
  }
  return out;
}

Vector sanitize_phase(const Vector& phase, const std::vector<int>& subcarrier_indices) {
  const Index n = phase.size();
  if (n < 2) throw DataError("sanitize_phase: need at least 2 subcarriers");
  if (static_cast<Index>(subcarrier_indices.size()) != n)
    throw DataError("sanitize_phase: index vector length mismatch");
  Vector k(n);
  for (Index i = 0; i < n; ++i) k[i] = subcarrier_indices[i];
  const Scalar k_mean = k.mean();
  const Scalar p_mean = phase.mean();
  const Vector kc = k.array() - k_mean;
  const Scalar denom = kc.squaredNorm();
  if (denom == 0.0) throw DataError("sanitize_phase: degenerate subcarrier indices");
  const Scalar slope = kc.dot(phase.array().matrix() - Vector::Constant(n, p_mean)) / denom;
  Vector out = (phase.array() - p_mean).matrix() - slope * kc;
  return out;
}

CleanedCsi clean_sample(const CsiSample& s, const DenoiseConfig& cfg) {
  if (s.csi.size() == 0) throw DataError("clean_sample: empty CSI tensor");
  CleanedCsi c;
  c.ap_index = s.ap_index;
  c.rp_index = s.rp_index;
  c.n_tx = s.n_tx;
  c.n_rx = s.n_rx;
  c.subcarriers = s.subcarriers;
  const Index k = s.subcarriers;
  c.amplitude.resize(s.csi.size());
  c.phase.resize(s.csi.size());
  const auto idx = subcarrier_indices(s.subcarriers);
  Vector amp(k), ph(k);
  for (int t = 0; t < s.n_tx; ++t)
    for (int r = 0; r < s.n_rx; ++r) {
      for (int i = 0; i < k; ++i) {
        amp[i] = std::abs(s.at(r, t, i));
        ph[i] = std::arg(s.at(r, t, i));
      }
      const Index off = (static_cast<Index>(t) * s.n_rx + r) * k;
      c.amplitude.segment(off, k) = denoise_amplitude(amp, cfg);
      c.phase.segment(off, k) = sanitize_phase(unwrap_phase(ph), idx);
    }
  return c;
}

int image_side(int n_tx, int n_rx, int subcarriers) {
  const Index total = static_cast<Index>(n_tx) * n_rx * subcarriers;
  int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(total))));
  while (static_cast<Index>(side) * side < total) ++side;
  while (side > 1 && static_cast<Index>(side - 1) * (side - 1) >= total) --side;
  return side;
}

namespace {

// Min-max to [0,1]; a constant plane maps to 0.5. Padding stays 0.
RowMatrix plane(const Vector& v, int side) {
  RowMatrix m = RowMatrix::Zero(side, side);
  const Scalar lo = v.minCoeff();
  const Scalar hi = v.maxCoeff();
  for (Index i = 0; i < v.size(); ++i) m(i / side, i % side) = hi > lo ? (v[i] - lo) / (hi - lo) : 0.5;
  return m;
}

}  // namespace

CsiImage build_image(const CleanedCsi& c) {
  if (c.amplitude.size() == 0) throw DataError("build_image: empty tensor");
  CsiImage img;
  img.n_img = image_side(c.n_tx, c.n_rx, c.subcarriers);
  img.ap_index = c.ap_index;
  img.rp_index = c.rp_index;
  img.channels[0] = plane(c.amplitude, img.n_img);
  img.channels[2] = plane(c.phase, img.n_img);
  img.channels[1] = img.channels[0].colwise().reverse();
  return img;
}

CsiImage sample_to_image(const CsiSample& sample, const DenoiseConfig& cfg) {
  return build_image(clean_sample(sample, cfg));
}

void write_ppm(const CsiImage& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P6\n" << image.n_img << ' ' << image.n_img << "\n255\n";
  for (int i = 0; i < image.n_img; ++i)
    for (int j = 0; j < image.n_img; ++j)
      for (int ch : {0, 1, 2}) {
        const auto v = static_cast<unsigned char>(std::lround(255.0 * std::clamp(image.channels[ch](i, j), 0.0, 1.0)));
        out.put(static_cast<char>(v));
      }
}

}  // namespace csiloc
