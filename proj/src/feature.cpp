#include "csiloc/feature.hpp"

#include <algorithm>

namespace csiloc {

int SppConfig::cells() const {
  int n = 0;
  for (int c : levels) n += c * c;
  return n;
}

void SppConfig::validate() const {
  if (levels.empty()) throw ConfigError("spp: at least one level required");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (levels[i] < 1) throw ConfigError("spp: levels must be positive");
    if (i > 0 && levels[i] <= levels[i - 1]) throw ConfigError("spp: levels must be strictly ascending");
  }
  if (channels < 1) throw ConfigError("spp: channels must be >= 1");
}

std::vector<ad::Window> spp_windows(Index z, int cells) {
  if (cells < 1 || z < cells)
    throw ConfigError("spp: feature map side " + std::to_string(z) + " smaller than pyramid level " + std::to_string(cells));
  const Index window = (z + cells - 1) / cells;
  std::vector<ad::Window> out;
  for (int i = 0; i < cells; ++i) {
    const Index begin = cells == 1 ? 0 : i * (z - window) / (cells - 1);
    out.push_back({begin, begin + window});
  }
  return out;
}

ad::Var spp(ad::Var map, const SppConfig& cfg) {
  const auto& s = map.shape();
  if (s.size() != 4 || s[2] != s[3]) throw ShapeError("spp: expected square [N, C, z, z] map, got " + ad::shape_str(s));
  const Index n = s[0];
  const Index z = s[2];
  std::vector<ad::Var> parts;
  for (int c : cfg.levels) {
    const auto w = spp_windows(z, c);
    ad::Var pooled = cfg.pool == PoolKind::Max ? ad::window_max_pool(map, w, w) : ad::window_mean_pool(map, w, w);
    parts.push_back(ad::reshape(pooled, {n, s[1] * c * c}));
  }
  return parts.size() == 1 ? parts.front() : ad::concat(parts, 1);
}

FeatureExtractor::FeatureExtractor(ExtractorConfig cfg, std::string prefix) : cfg_(std::move(cfg)), prefix_(std::move(prefix)) {
  cfg_.spp.validate();
  if (cfg_.feature_dim < 1) throw ConfigError("extractor: feature_dim must be >= 1");
}

void FeatureExtractor::init(ParamSet& ps, std::mt19937_64& rng) const {
  const Index c = cfg_.spp.channels;
  add_conv(ps, prefix_ + ".conv1", 3, c, 3, rng);
  add_batchnorm(ps, prefix_ + ".bn1", c);
  add_conv(ps, prefix_ + ".conv2", c, c, 3, rng);
  add_batchnorm(ps, prefix_ + ".bn2", c);
  add_linear(ps, prefix_ + ".fc", cfg_.spp.output_length(), cfg_.feature_dim, rng);
}

ad::Var FeatureExtractor::conv_stack(Binding& b, ad::Var images, const ForwardOptions& opt) const {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != s[3]) throw ShapeError("extractor: expected [N, 3, n, n] images, got " + ad::shape_str(s));
  if (s[2] < 4) throw ConfigError("extractor: image side " + std::to_string(s[2]) + " < 4");
  ad::Var h = conv(b, prefix_ + ".conv1", images, 1, 1);
  h = ad::relu(batchnorm(b, prefix_ + ".bn1", h, opt));
  const auto pool = ad::sliding_windows(s[2], 2, 2);
  h = ad::window_max_pool(h, pool, pool);
  h = conv(b, prefix_ + ".conv2", h, 1, 1);
  return ad::relu(batchnorm(b, prefix_ + ".bn2", h, opt));
}

ad::Var FeatureExtractor::extract(Binding& b, ad::Var images, const ForwardOptions& opt) const {
  ad::Var map = conv_stack(b, images, opt);
  return linear(b, prefix_ + ".fc", spp(map, cfg_.spp));
}

ad::Tensor stack_images(const std::vector<const CsiImage*>& images) {
  if (images.empty()) throw ShapeError("stack_images: no images");
  const Index n = images.front()->n_img;
  ad::Tensor t({static_cast<Index>(images.size()), 3, n, n});
  Scalar* p = t.ptr();
  for (const CsiImage* img : images) {
    if (img->n_img != n) throw ShapeError("stack_images: mixed image sizes");
    for (int c = 0; c < 3; ++c) {
      Eigen::Map<RowMatrix>(p, n, n) = img->channels[c];
      p += n * n;
    }
  }
  return t;
}

Vector extract_feature(const FeatureExtractor& fx, ParamSet& ps, const CsiImage& image) {
  ad::Tape tape;
  Binding b(tape, ps, false);
  ad::Var x = tape.constant(stack_images({&image}));
  return fx.extract(b, x, ForwardOptions::eval()).value().data();
}

}  // namespace csiloc
