#include "csiloc/layers.hpp"

namespace csiloc {

void add_linear(ParamSet& ps, const std::string& prefix, Index in, Index out, std::mt19937_64& rng) {
  ps.add(prefix + ".weight", glorot_uniform({in, out}, in, out, rng));
  ps.add(prefix + ".bias", ad::Tensor({out}, 0.0));
}

ad::Var linear(Binding& b, const std::string& prefix, ad::Var x) {
  return ad::add_row_bias(ad::matmul(x, b[prefix + ".weight"]), b[prefix + ".bias"]);
}

void add_conv(ParamSet& ps, const std::string& prefix, Index in, Index out, Index kernel, std::mt19937_64& rng) {
  ps.add(prefix + ".weight", he_normal({out, in, kernel, kernel}, in * kernel * kernel, rng));
  ps.add(prefix + ".bias", ad::Tensor({out}, 0.0));
}

ad::Var conv(Binding& b, const std::string& prefix, ad::Var x, int stride, int pad) {
  return ad::conv2d(x, b[prefix + ".weight"], b[prefix + ".bias"], stride, pad);
}

void add_batchnorm(ParamSet& ps, const std::string& prefix, Index features) {
  ps.add(prefix + ".gamma", ad::Tensor({features}, 1.0));
  ps.add(prefix + ".beta", ad::Tensor({features}, 0.0));
  ps.add(prefix + ".running_mean", ad::Tensor({features}, 0.0), false);
  ps.add(prefix + ".running_var", ad::Tensor({features}, 1.0), false);
}

ad::Var batchnorm(Binding& b, const std::string& prefix, ad::Var x, const ForwardOptions& opt) {
  return ad::batchnorm(x, b[prefix + ".gamma"], b[prefix + ".beta"], b.buffer(prefix + ".running_mean"),
                       b.buffer(prefix + ".running_var"), opt.batchnorm());
}

ad::Var dropout(ad::Var x, const ForwardOptions& opt) {
  if (opt.mode == ad::Mode::Eval || opt.dropout <= 0.0) return x;
  if (!opt.rng) throw UsageError("dropout: train mode requires an RNG");
  if (opt.dropout >= 1.0) throw UsageError("dropout: probability must be < 1");
  ad::Tensor mask(x.shape());
  std::bernoulli_distribution keep(1.0 - opt.dropout);
  const Scalar s = 1.0 / (1.0 - opt.dropout);
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*opt.rng) ? s : 0.0;
  return ad::mul(x, x.tape()->constant(std::move(mask)));
}

}  // namespace csiloc
