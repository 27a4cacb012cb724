#include <cmath>
#include <random>

#include "doctest.h"

#include "csiloc/preprocess.hpp"
#include "csiloc/scenario_io.hpp"
#include "csiloc/wavelet.hpp"

using namespace csiloc;

namespace {

// Line fit residual computed with the normal equations, independent of the
// library implementation.
Vector detrend(const Vector& y, const std::vector<int>& k) {
  const Scalar n = static_cast<Scalar>(y.size());
  Scalar sk = 0, sy = 0, skk = 0, sky = 0;
  for (Index i = 0; i < y.size(); ++i) {
    sk += k[i];
    sy += y[i];
    skk += static_cast<Scalar>(k[i]) * k[i];
    sky += k[i] * y[i];
  }
  const Scalar a = (n * sky - sk * sy) / (n * skk - sk * sk);
  const Scalar b = (sy - a * sk) / n;
  Vector r(y.size());
  for (Index i = 0; i < y.size(); ++i) r[i] = y[i] - (a * k[i] + b);
  return r;
}

std::pair<Scalar, Scalar> line_fit(const Vector& y, const std::vector<int>& k) {
  const Vector r = detrend(y, k);
  const Vector d = y - r;
  const Scalar a = (d[1] - d[0]) / (k[1] - k[0]);
  return {a, d[0] - a * k[0]};
}

CsiSample noiseless_sample(PhaseError pe, int n_tx, int n_rx, int bw) {
  ScenarioConfig c = preset_scenario("tiny");
  c.noise_std = 0.0;
  c.phase_error = pe;
  c.n_rx = n_rx;
  for (auto& ap : c.aps) {
    ap.n_tx = n_tx;
    ap.bandwidth_mhz = bw;
  }
  auto rng = sample_stream(c, 1, 2, 0);
  return generate_csi(c, 1, 2, sample_paths(c, 1, 2, rng), rng);
}

}  // namespace

TEST_CASE("db4 transform is perfectly reconstructing") {
  std::mt19937_64 rng(4);
  std::normal_distribution<Scalar> n(0.0, 1.0);
  Vector x(64);
  for (Index i = 0; i < x.size(); ++i) x[i] = n(rng);
  const auto dec = wavelet::decompose<Scalar>(x, 3);
  CHECK(dec.details.size() == 3);
  CHECK(dec.approx.size() == 8);
  CHECK((wavelet::reconstruct<Scalar>(dec) - x).cwiseAbs().maxCoeff() < 1e-12);
  Scalar energy = dec.approx.squaredNorm();
  for (const auto& d : dec.details) energy += d.squaredNorm();
  CHECK(energy == doctest::Approx(x.squaredNorm()).epsilon(1e-12));
}

TEST_CASE("denoise_amplitude examples") {
  const Vector c = Vector::Constant(64, 0.37);
  CHECK((denoise_amplitude(c) - c).cwiseAbs().maxCoeff() < 1e-12);
  const Vector z = Vector::Zero(64);
  CHECK(denoise_amplitude(z).cwiseAbs().maxCoeff() == 0.0);
  const Vector odd = Vector::Constant(37, 2.0);
  CHECK(denoise_amplitude(odd).size() == 37);
  Vector bad = c;
  bad[3] = std::nan("");
  CHECK_THROWS_AS(denoise_amplitude(bad), DataError);
  CHECK_THROWS_AS(denoise_amplitude(Vector::Constant(3, 1.0)), DataError);
}

TEST_CASE("denoising lowers MSE against the clean signal in every trial") {
  const Index n = 256;
  Vector clean(n);
  for (Index i = 0; i < n; ++i) clean[i] = 1.0 + 0.5 * std::sin(2.0 * kPi * i / 64.0) + 0.2 * std::cos(2.0 * kPi * i / 23.0);
  int better = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::mt19937_64 rng(1000 + trial);
    std::normal_distribution<Scalar> noise(0.0, 0.1);
    Vector noisy(n);
    for (Index i = 0; i < n; ++i) noisy[i] = std::max(0.0, clean[i] + noise(rng));
    const Vector out = denoise_amplitude(noisy);
    CHECK(out.size() == n);
    CHECK(out.minCoeff() >= 0.0);
    better += (out - clean).squaredNorm() < (noisy - clean).squaredNorm();
  }
  CHECK(better == 100);
}

TEST_CASE("unwrap_phase removes 2pi jumps") {
  Vector truth(50), wrapped(50);
  for (Index i = 0; i < 50; ++i) {
    truth[i] = 0.4 * i - 3.0;
    wrapped[i] = std::arg(std::polar(1.0, truth[i]));
  }
  const Vector u = unwrap_phase(wrapped);
  const Scalar shift = u[0] - truth[0];
  CHECK(std::abs(std::remainder(shift, 2.0 * kPi)) < 1e-12);
  CHECK((u.array() - truth.array() - shift).abs().maxCoeff() < 1e-12);
}

TEST_CASE("sanitize_phase examples") {
  const auto k = subcarrier_indices(64);
  Vector lin(64), cst = Vector::Constant(64, 1.7);
  for (int i = 0; i < 64; ++i) lin[i] = 0.3 * k[i] - 2.0;
  CHECK(sanitize_phase(lin, k).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(sanitize_phase(cst, k).cwiseAbs().maxCoeff() < 1e-9);
  CHECK_THROWS_AS(sanitize_phase(Vector::Zero(1), {0}), DataError);
  CHECK_THROWS_AS(sanitize_phase(Vector::Zero(4), {0, 1, 2}), DataError);
}

TEST_CASE("sanitize_phase output has zero mean and zero trend, and is idempotent") {
  const auto k = subcarrier_indices(128);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<Scalar> u(-3.0, 3.0);
  Vector y(128);
  for (Index i = 0; i < 128; ++i) y[i] = u(rng) + 0.05 * k[i];
  const Vector once = sanitize_phase(y, k);
  const auto [a, b] = line_fit(once, k);
  CHECK(std::abs(a) < 1e-9);
  CHECK(std::abs(b) < 1e-9);
  CHECK((sanitize_phase(once, k) - once).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((once - detrend(y, k)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("injected linear phase error is removed exactly in the noiseless case") {
  for (PhaseError pe : {PhaseError{0.05, 0.7}, PhaseError{-0.21, 2.9}, PhaseError{0.6, -1.4}}) {
    const CsiSample with = noiseless_sample(pe, 2, 2, 40);
    const CsiSample without = noiseless_sample({}, 2, 2, 40);
    const CleanedCsi a = clean_sample(with), b = clean_sample(without);
    CHECK((a.phase - b.phase).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("clean_sample flattens tx-major, then rx, then subcarrier") {
  const CsiSample s = noiseless_sample({}, 2, 2, 20);
  const CleanedCsi c = clean_sample(s, DenoiseConfig{0});
  REQUIRE(c.amplitude.size() == 256);
  for (int t = 0; t < 2; ++t)
    for (int r = 0; r < 2; ++r)
      for (int k = 0; k < 64; k += 9) CHECK(c.amplitude[(t * 2 + r) * 64 + k] == doctest::Approx(std::abs(s.at(r, t, k))));
}

TEST_CASE("image sizes") {
  CHECK(image_side(2, 2, 64) == 16);
  CHECK(image_side(1, 2, 64) == 12);
  CHECK(image_side(1, 1, 64) == 8);
  CHECK(image_side(2, 2, 256) == 32);
  CHECK(image_side(1, 2, 256) == 23);
}

TEST_CASE("image construction: padding, range and flip") {
  const CsiSample s = noiseless_sample({0.05, 0.7}, 1, 2, 20);
  const CleanedCsi c = clean_sample(s);
  const CsiImage img = build_image(c);
  REQUIRE(img.n_img == 12);
  // Tail padding: the last 16 pixels of R and B stay zero.
  for (int p = 128; p < 144; ++p) {
    CHECK(img.at(p / 12, p % 12, Channel::R) == 0.0);
    CHECK(img.at(p / 12, p % 12, Channel::B) == 0.0);
  }
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 12; ++j) {
      CHECK(img.at(i, j, Channel::G) == img.at(11 - i, j, Channel::R));
      for (Channel ch : {Channel::R, Channel::G, Channel::B}) {
        CHECK(img.at(i, j, ch) >= 0.0);
        CHECK(img.at(i, j, ch) <= 1.0);
      }
    }
  // The unpadded prefix is the min-max scaled cleaned amplitude, in order.
  const Scalar lo = c.amplitude.minCoeff(), hi = c.amplitude.maxCoeff();
  for (int p = 0; p < 128; ++p) CHECK(img.at(p / 12, p % 12, Channel::R) == doctest::Approx((c.amplitude[p] - lo) / (hi - lo)));
}

TEST_CASE("constant plane maps to one half") {
  CleanedCsi c;
  c.n_tx = 1;
  c.n_rx = 1;
  c.subcarriers = 16;
  c.amplitude = Vector::Constant(16, 3.0);
  c.phase = Vector::LinSpaced(16, -1.0, 1.0);
  const CsiImage img = build_image(c);
  CHECK(img.n_img == 4);
  CHECK(img.at(2, 1, Channel::R) == 0.5);
  CHECK(img.at(0, 0, Channel::B) == 0.0);
  CHECK(img.at(3, 3, Channel::B) == 1.0);
  CleanedCsi empty;
  CHECK_THROWS_AS(build_image(empty), DataError);
}

TEST_CASE("image of every preset has the expected side") {
  for (const char* name : {"scen1", "scen1_obstacle", "scen2", "scen3", "tiny"}) {
    ScenarioConfig c = preset_scenario(name);
    auto rng = sample_stream(c, 0, 0, 0);
    const CsiSample s = generate_csi(c, 0, 0, sample_paths(c, 0, 0, rng), rng);
    const CsiImage img = sample_to_image(s);
    CHECK(img.n_img == static_cast<int>(std::ceil(std::sqrt(static_cast<double>(s.n_tx * s.n_rx * s.subcarriers)))));
  }
}
