#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "tsfed/tensor.hpp"

namespace tsfed {

// Named collection of learnable tensors. Paths are unique and iteration order is
// lexicographic, so flattening and serialization are deterministic.
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor>;

  void insert(std::string path, Tensor tensor);
  bool contains(const std::string& path) const { return params_.count(path) != 0; }
  const Tensor& at(const std::string& path) const;
  Tensor& at(const std::string& path);

  std::size_t size() const { return params_.size(); }
  bool empty() const { return params_.empty(); }
  std::size_t total_count() const;

  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }
  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }

  // Same path set and per-path shapes.
  bool congruent(const ParamSet& other) const;

  // Independent copy: fresh leaf nodes, gradients dropped.
  ParamSet clone() const;
  void zero_grad();

  std::vector<double> flatten() const;
  void assign_flat(std::span<const double> values);

  // Subset whose paths start with `prefix`.
  ParamSet with_prefix(std::string_view prefix) const;
  // Overwrites the values of every path present in `src` (shapes must match).
  void copy_values_from(const ParamSet& src);

 private:
  Map params_;
};

void require_congruent(const ParamSet& a, const ParamSet& b, const char* op);

// Element-wise arithmetic on congruent sets; results are fresh leaves.
ParamSet add(const ParamSet& a, const ParamSet& b);
ParamSet subtract(const ParamSet& a, const ParamSet& b);
ParamSet scale(const ParamSet& a, double factor);
ParamSet zeros_like(const ParamSet& a);
double l2_norm(const ParamSet& a);

// value <- value - lr * grad for every requires_grad tensor, then zero grads.
// Throws ContractError when a requires_grad tensor holds no gradient.
void sgd_step(ParamSet& params, double lr);

// Byte-stable binary checkpoint of (path, shape, values) triples.
std::string serialize(const ParamSet& params);
ParamSet deserialize(std::string_view bytes);
void save_checkpoint(const ParamSet& params, const std::filesystem::path& path);
ParamSet load_checkpoint(const std::filesystem::path& path);

}  // namespace tsfed
