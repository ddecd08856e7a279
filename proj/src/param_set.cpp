#include "tsfed/param_set.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tsfed/errors.hpp"

namespace tsfed {

namespace {

constexpr char kMagic[8] = {'T', 'S', 'F', 'E', 'D', 'C', 'K', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian hosts");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw std::runtime_error("checkpoint: truncated data");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void ParamSet::insert(std::string path, Tensor tensor) {
  if (!tensor.defined()) throw ContractError("ParamSet: undefined tensor for '" + path + "'");
  auto [it, inserted] = params_.emplace(std::move(path), std::move(tensor));
  if (!inserted) throw ContractError("ParamSet: duplicate path '" + it->first + "'");
}

const Tensor& ParamSet::at(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw ContractError("ParamSet: unknown path '" + path + "'");
  return it->second;
}

Tensor& ParamSet::at(const std::string& path) {
  auto it = params_.find(path);
  if (it == params_.end()) throw ContractError("ParamSet: unknown path '" + path + "'");
  return it->second;
}

std::size_t ParamSet::total_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

bool ParamSet::congruent(const ParamSet& other) const {
  if (params_.size() != other.params_.size()) return false;
  auto it = other.params_.begin();
  for (const auto& [path, t] : params_) {
    if (it->first != path || it->second.shape() != t.shape()) return false;
    ++it;
  }
  return true;
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  for (const auto& [path, t] : params_) out.params_.emplace(path, t.detach(t.requires_grad()));
  return out;
}

void ParamSet::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

std::vector<double> ParamSet::flatten() const {
  std::vector<double> out;
  out.reserve(total_count());
  for (const auto& [_, t] : params_) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

void ParamSet::assign_flat(std::span<const double> values) {
  if (values.size() != total_count()) {
    throw DimensionError("ParamSet::assign_flat: " + std::to_string(values.size()) +
                         " values for " + std::to_string(total_count()) + " parameters");
  }
  std::size_t off = 0;
  for (auto& [_, t] : params_) {
    auto dst = t.mutable_values();
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(off), dst.size(), dst.begin());
    off += dst.size();
  }
}

ParamSet ParamSet::with_prefix(std::string_view prefix) const {
  ParamSet out;
  for (const auto& [path, t] : params_)
    if (std::string_view(path).starts_with(prefix)) out.params_.emplace(path, t);
  return out;
}

void ParamSet::copy_values_from(const ParamSet& src) {
  for (const auto& [path, t] : src) {
    auto& dst = at(path);
    if (dst.shape() != t.shape()) {
      throw DimensionError("ParamSet::copy_values_from: '" + path + "' has shape " +
                           shape_str(dst.shape()) + ", source " + shape_str(t.shape()));
    }
    std::copy(t.values().begin(), t.values().end(), dst.mutable_values().begin());
  }
}

void require_congruent(const ParamSet& a, const ParamSet& b, const char* op) {
  if (!a.congruent(b)) {
    throw ContractError(std::string(op) + ": parameter sets are not congruent (" +
                        std::to_string(a.size()) + " vs " + std::to_string(b.size()) + " paths)");
  }
}

namespace {

template <typename F>
ParamSet zip(const ParamSet& a, const ParamSet& b, const char* op, F f) {
  require_congruent(a, b, op);
  ParamSet out;
  auto it = b.begin();
  for (const auto& [path, ta] : a) {
    const auto av = ta.values();
    const auto bv = it->second.values();
    std::vector<double> v(av.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(av[i], bv[i]);
    out.insert(path, Tensor::leaf(ta.shape(), std::move(v), ta.requires_grad()));
    ++it;
  }
  return out;
}

}  // namespace

ParamSet add(const ParamSet& a, const ParamSet& b) {
  return zip(a, b, "ParamSet add", [](double x, double y) { return x + y; });
}

ParamSet subtract(const ParamSet& a, const ParamSet& b) {
  return zip(a, b, "ParamSet subtract", [](double x, double y) { return x - y; });
}

ParamSet scale(const ParamSet& a, double factor) {
  ParamSet out;
  for (const auto& [path, t] : a) {
    std::vector<double> v(t.values().begin(), t.values().end());
    for (auto& x : v) x *= factor;
    out.insert(path, Tensor::leaf(t.shape(), std::move(v), t.requires_grad()));
  }
  return out;
}

ParamSet zeros_like(const ParamSet& a) {
  ParamSet out;
  for (const auto& [path, t] : a) out.insert(path, Tensor::zeros(t.shape(), t.requires_grad()));
  return out;
}

double l2_norm(const ParamSet& a) {
  double acc = 0.0;
  for (const auto& [_, t] : a)
    for (double v : t.values()) acc += v * v;
  return std::sqrt(acc);
}

void sgd_step(ParamSet& params, double lr) {
  for (const auto& [path, t] : params) {
    if (t.requires_grad() && !t.has_grad()) {
      throw ContractError("sgd_step: parameter '" + path + "' has no gradient");
    }
  }
  for (auto& [_, t] : params) {
    if (!t.requires_grad()) continue;
    auto v = t.mutable_values();
    const auto g = t.grad();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    t.zero_grad();
  }
}

std::string serialize(const ParamSet& params) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [path, t] : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(path.size()));
    out.append(path);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.values()) put<double>(out, v);
  }
  return out;
}

ParamSet deserialize(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic))) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  ParamSet out;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string path(r.take(r.get<std::uint32_t>()));
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    std::vector<double> values(numel(shape));
    for (auto& v : values) v = r.get<double>();
    out.insert(std::move(path), Tensor::leaf(std::move(shape), std::move(values), true));
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return out;
}

void save_checkpoint(const ParamSet& params, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
  const auto bytes = serialize(params);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing checkpoint " + path.string());
}

ParamSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return deserialize(ss.str());
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(std::string(e.what()) + " in " + path.string());
  }
}

}  // namespace tsfed
