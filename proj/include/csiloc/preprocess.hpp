#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "csiloc/channel_sim.hpp"

namespace csiloc {

struct DenoiseConfig {
  int levels = 3;
};

// Wavelet soft-threshold denoising (db4, universal threshold from the finest
// detail band). Output has the input's length and is clamped at zero.
Vector denoise_amplitude(const Vector& amp, const DenoiseConfig& cfg = {});

// Standard 2*pi jump unwrapping.
Vector unwrap_phase(const Vector& phase);

// Removes the least-squares line a*k + b over the given subcarrier indices.
// Expects phase that is already unwrapped.
Vector sanitize_phase(const Vector& phase, const std::vector<int>& subcarrier_indices);

// Per-(tx, rx) stream amplitude / phase after cleaning, flattened tx-major,
// then rx, then subcarrier.
struct CleanedCsi {
  int ap_index = 0;
  int rp_index = 0;
  int n_tx = 1;
  int n_rx = 1;
  int subcarriers = 0;
  Vector amplitude;
  Vector phase;
};

CleanedCsi clean_sample(const CsiSample& sample, const DenoiseConfig& cfg = {});

enum class Channel { R = 0, G = 1, B = 2 };

struct CsiImage {
  int n_img = 0;
  int ap_index = 0;
  int rp_index = 0;
  // R = amplitude, G = R flipped upside-down, B = phase.
  std::array<RowMatrix, 3> channels;

  Scalar at(int i, int j, Channel c) const { return channels[static_cast<int>(c)](i, j); }
};

int image_side(int n_tx, int n_rx, int subcarriers);

CsiImage build_image(const CleanedCsi& cleaned);

// clean_sample followed by build_image.
CsiImage sample_to_image(const CsiSample& sample, const DenoiseConfig& cfg = {});

// Inspection dump: binary PPM with R/G/B channels scaled to 0..255.
void write_ppm(const CsiImage& image, const std::filesystem::path& path);

}  // namespace csiloc
