#pragma once

#include <random>
#include <string>

#include "csiloc/params.hpp"

namespace csiloc {

struct ForwardOptions {
  ad::Mode mode = ad::Mode::Train;
  // Train mode only: fold batch statistics into running buffers.
  bool update_running_stats = true;
  Scalar bn_momentum = 0.1;
  Scalar bn_eps = 1e-5;
  Scalar dropout = 0.0;
  std::mt19937_64* rng = nullptr;

  static ForwardOptions eval() {
    ForwardOptions o;
    o.mode = ad::Mode::Eval;
    return o;
  }
  ad::BatchNormOptions batchnorm() const { return {mode, bn_momentum, bn_eps, update_running_stats}; }
};

// Parameter naming: "<prefix>.weight", "<prefix>.bias", batch norm adds
// "<prefix>.gamma", "<prefix>.beta" and buffers "<prefix>.running_mean/var".
void add_linear(ParamSet& ps, const std::string& prefix, Index in, Index out, std::mt19937_64& rng);
ad::Var linear(Binding& b, const std::string& prefix, ad::Var x);

void add_conv(ParamSet& ps, const std::string& prefix, Index in, Index out, Index kernel, std::mt19937_64& rng);
ad::Var conv(Binding& b, const std::string& prefix, ad::Var x, int stride, int pad);

void add_batchnorm(ParamSet& ps, const std::string& prefix, Index features);
ad::Var batchnorm(Binding& b, const std::string& prefix, ad::Var x, const ForwardOptions& opt);

// Inverted dropout; identity in eval mode or when p == 0.
ad::Var dropout(ad::Var x, const ForwardOptions& opt);

}  // namespace csiloc
