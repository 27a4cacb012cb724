#pragma once

#include <random>
#include <string>
#include <vector>

#include "csiloc/layers.hpp"
#include "csiloc/preprocess.hpp"

namespace csiloc {

enum class PoolKind { Max, Mean };

struct SppConfig {
  std::vector<int> levels{1, 2, 4};
  int channels = 8;
  PoolKind pool = PoolKind::Max;

  int cells() const;
  Index output_length() const { return static_cast<Index>(channels) * cells(); }
  void validate() const;
};

// Cells of one pyramid level along an axis of length z: window ceil(z/c),
// starts spread evenly over [0, z - window]. The spacing equals floor(z/c)
// when c divides z; otherwise it varies by one so the cells still cover the
// axis.
std::vector<ad::Window> spp_windows(Index z, int cells);

// map [N, C, z, z] -> [N, C * sum(c^2)], levels concatenated in order, each
// level flattened channel-major.
ad::Var spp(ad::Var map, const SppConfig& cfg);

struct ExtractorConfig {
  SppConfig spp;
  // Width of the trailing fully connected layer (node feature length).
  int feature_dim = 64;
};

// conv(3x3) -> BN -> ReLU -> 2x2 max pool -> conv(3x3) -> BN -> ReLU -> SPP -> FC.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(ExtractorConfig cfg = {}, std::string prefix = "extractor");

  void init(ParamSet& ps, std::mt19937_64& rng) const;

  // images [N, 3, n, n] (all the same size) -> [N, C, z, z], z = floor(n / 2).
  ad::Var conv_stack(Binding& b, ad::Var images, const ForwardOptions& opt) const;
  ad::Var extract(Binding& b, ad::Var images, const ForwardOptions& opt) const;

  const ExtractorConfig& config() const { return cfg_; }
  Index output_dim() const { return cfg_.feature_dim; }
  static Index map_side(Index n_img) { return n_img / 2; }

 private:
  ExtractorConfig cfg_;
  std::string prefix_;
};

// Stacks same-size images into [N, 3, n, n] with channel order R, G, B.
ad::Tensor stack_images(const std::vector<const CsiImage*>& images);

// Single-image eval-mode feature.
Vector extract_feature(const FeatureExtractor& fx, ParamSet& ps, const CsiImage& image);

}  // namespace csiloc
