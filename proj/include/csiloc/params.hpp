#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "csiloc/autodiff.hpp"

namespace csiloc {

// Named trainable arrays plus non-trainable buffers (batch-norm running
// statistics). Names and shapes are fixed once added.
class ParamSet {
 public:
  struct Entry {
    ad::Tensor value;
    ad::Tensor grad;  // empty until populated
    bool trainable = true;
  };

  void add(const std::string& name, ad::Tensor value, bool trainable = true);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  ad::Tensor& value(const std::string& name);
  const ad::Tensor& value(const std::string& name) const;
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;

  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }
  Index parameter_count() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void clear_grads();
  // Adds (or sets) a gradient for one trainable entry.
  void accumulate_grad(const std::string& name, const Vector& g);

  // Copies every non-trainable buffer from `other` (same name set required).
  void copy_buffers_from(const ParamSet& other);

  // Digest over names, shapes and values (not gradients).
  std::uint64_t checksum() const;

  bool same_values(const ParamSet& other) const;

  // Versioned binary: magic, version, entry count, per entry (name, flag,
  // rank, dims), then f64 payloads, then FNV-1a checksum of all prior bytes.
  void save(const std::filesystem::path& path) const;
  static ParamSet load(const std::filesystem::path& path);

 private:
  std::map<std::string, Entry> entries_;
};

// p <- p - lr * g for every trainable entry, then clears gradients. Throws
// UsageError when any trainable entry has no gradient.
void sgd_step(ParamSet& params, Scalar lr);

// Parameters made visible to one tape.
class Binding {
 public:
  Binding(ad::Tape& tape, ParamSet& params, bool track_grads = true) : tape_(tape), params_(params), track_(track_grads) {}

  ad::Tape& tape() { return tape_; }
  ad::Var operator[](const std::string& name);
  // Direct, mutable access to a buffer (running statistics).
  ad::Tensor& buffer(const std::string& name) { return params_.value(name); }
  ParamSet& params() { return params_; }

  // Writes tape gradients of every bound trainable parameter into `dst`
  // (which must share the name set), adding to existing gradients if asked.
  void collect_grads(ParamSet& dst, bool accumulate = false) const;
  void collect_grads() { collect_grads(params_, false); }

 private:
  ad::Tape& tape_;
  ParamSet& params_;
  bool track_;
  std::map<std::string, ad::Var> bound_;
};

// Initialisers.
ad::Tensor he_normal(ad::Shape shape, Index fan_in, std::mt19937_64& rng);
ad::Tensor glorot_uniform(ad::Shape shape, Index fan_in, Index fan_out, std::mt19937_64& rng);

}  // namespace csiloc
