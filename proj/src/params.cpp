#include "csiloc/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace csiloc {

using ad::Tensor;

void ParamSet::add(const std::string& name, Tensor value, bool trainable) {
  if (entries_.count(name)) throw UsageError("ParamSet: duplicate parameter '" + name + "'");
  entries_.emplace(name, Entry{std::move(value), {}, trainable});
}

ParamSet::Entry& ParamSet::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw UsageError("ParamSet: no parameter '" + name + "'");
  return it->second;
}

const ParamSet::Entry& ParamSet::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw UsageError("ParamSet: no parameter '" + name + "'");
  return it->second;
}

Tensor& ParamSet::value(const std::string& name) { return entry(name).value; }
const Tensor& ParamSet::value(const std::string& name) const { return entry(name).value; }

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

Index ParamSet::parameter_count() const {
  Index n = 0;
  for (const auto& [k, e] : entries_)
    if (e.trainable) n += e.value.size();
  return n;
}

void ParamSet::clear_grads() {
  for (auto& [k, e] : entries_) e.grad = Tensor();
}

void ParamSet::accumulate_grad(const std::string& name, const Vector& g) {
  auto& e = entry(name);
  if (!e.trainable) throw UsageError("ParamSet: '" + name + "' is a buffer, not trainable");
  if (g.size() != e.value.size()) throw ShapeError("ParamSet: gradient size mismatch for '" + name + "'");
  if (e.grad.empty())
    e.grad = Tensor(e.value.shape(), g);
  else
    e.grad.data() += g;
}

void ParamSet::copy_buffers_from(const ParamSet& other) {
  for (auto& [k, e] : entries_) {
    if (e.trainable) continue;
    const auto& src = other.entry(k);
    if (src.value.shape() != e.value.shape()) throw ShapeError("ParamSet: buffer shape mismatch for '" + k + "'");
    e.value = src.value;
  }
}

std::uint64_t ParamSet::checksum() const {
  Fnv1a h;
  for (const auto& [k, e] : entries_) {
    h.update(k);
    for (Index d : e.value.shape()) h.update(&d, sizeof d);
    h.update(e.value.ptr(), static_cast<std::size_t>(e.value.size()) * sizeof(Scalar));
  }
  return h.digest();
}

bool ParamSet::same_values(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (const auto& [k, e] : entries_) {
    auto it = other.entries_.find(k);
    if (it == other.entries_.end() || it->second.value.shape() != e.value.shape()) return false;
    if (std::memcmp(e.value.ptr(), it->second.value.ptr(), static_cast<std::size_t>(e.value.size()) * sizeof(Scalar)) != 0)
      return false;
  }
  return true;
}

namespace {

constexpr char kMagic[8] = {'C', 'S', 'I', 'L', 'P', 'R', 'M', '1'};
constexpr std::uint32_t kVersion = 1;
static_assert(std::endian::native == std::endian::little, "parameter I/O assumes a little-endian host");

template <typename T>
void put(std::string& buf, T v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof v);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  template <typename T>
  T get() {
    if (pos + sizeof(T) > buf.size()) throw DataError("parameter file truncated");
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof v);
    pos += sizeof v;
    return v;
  }
  std::string bytes(std::size_t n) {
    if (pos + n > buf.size()) throw DataError("parameter file truncated");
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void ParamSet::save(const std::filesystem::path& path) const {
  std::string buf(kMagic, sizeof kMagic);
  put<std::uint32_t>(buf, kVersion);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [k, e] : entries_) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(k.size()));
    buf += k;
    put<std::uint8_t>(buf, e.trainable ? 1 : 0);
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(e.value.rank()));
    for (Index d : e.value.shape()) put<std::uint64_t>(buf, static_cast<std::uint64_t>(d));
  }
  for (const auto& [k, e] : entries_)
    buf.append(reinterpret_cast<const char*>(e.value.ptr()), static_cast<std::size_t>(e.value.size()) * sizeof(double));
  put<std::uint64_t>(buf, fnv1a(buf));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write parameter file " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

ParamSet ParamSet::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open parameter file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();
  if (buf.size() < sizeof kMagic + 16 || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
    throw DataError(path.string() + ": not a parameter file");
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - sizeof stored, sizeof stored);
  if (fnv1a(std::string_view(buf.data(), buf.size() - sizeof stored)) != stored)
    throw DigestMismatch(path.string() + ": checksum mismatch");
  Reader r{buf, sizeof kMagic};
  if (r.get<std::uint32_t>() != kVersion) throw DataError(path.string() + ": unsupported version");
  const auto count = r.get<std::uint32_t>();
  struct Header {
    std::string name;
    bool trainable;
    ad::Shape shape;
  };
  std::vector<Header> headers(count);
  for (auto& h : headers) {
    h.name = r.bytes(r.get<std::uint32_t>());
    h.trainable = r.get<std::uint8_t>() != 0;
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < rank; ++i) h.shape.push_back(static_cast<Index>(r.get<std::uint64_t>()));
  }
  ParamSet ps;
  for (auto& h : headers) {
    Tensor t(h.shape);
    const std::size_t bytes = static_cast<std::size_t>(t.size()) * sizeof(double);
    if (r.pos + bytes > buf.size() - sizeof stored) throw DataError(path.string() + ": truncated payload");
    std::memcpy(t.ptr(), buf.data() + r.pos, bytes);
    r.pos += bytes;
    ps.add(h.name, std::move(t), h.trainable);
  }
  return ps;
}

void sgd_step(ParamSet& params, Scalar lr) {
  for (const auto& [k, e] : params)
    if (e.trainable && e.grad.empty()) throw UsageError("sgd_step: no gradient for '" + k + "'");
  for (auto& [k, e] : params) {
    if (!e.trainable) continue;
    e.value.data() -= lr * e.grad.data();
  }
  params.clear_grads();
}

ad::Var Binding::operator[](const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const auto& e = params_.entry(name);
  ad::Var v = (track_ && e.trainable) ? tape_.variable(e.value) : tape_.constant(e.value);
  bound_.emplace(name, v);
  return v;
}

void Binding::collect_grads(ParamSet& dst, bool accumulate) const {
  for (const auto& [name, v] : bound_) {
    if (!tape_.requires_grad(v.id())) continue;
    const Tensor& g = tape_.grad(v);
    auto& e = dst.entry(name);
    if (!accumulate) e.grad = Tensor();
    if (g.empty())
      dst.accumulate_grad(name, Vector::Zero(e.value.size()));
    else
      dst.accumulate_grad(name, g.data());
  }
}

Tensor he_normal(ad::Shape shape, Index fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<Scalar> n(0.0, std::sqrt(2.0 / static_cast<Scalar>(fan_in)));
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = n(rng);
  return t;
}

Tensor glorot_uniform(ad::Shape shape, Index fan_in, Index fan_out, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  const Scalar a = std::sqrt(6.0 / static_cast<Scalar>(fan_in + fan_out));
  std::uniform_real_distribution<Scalar> u(-a, a);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  return t;
}

}  // namespace csiloc
