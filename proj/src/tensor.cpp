#include "tsfed/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "tsfed/errors.hpp"

namespace tsfed {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (tsfed::numel(shape) != values.size()) {
    throw DimensionError("leaf: shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  return leaf(std::move(shape), std::move(values), false);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = tsfed::numel(shape);
  return leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double v) { return constant({}, {v}); }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
  return node_->value[0];
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach(bool requires_grad) const { return leaf(shape(), node_->value, requires_grad); }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order of the reachable tape.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

namespace {

Tensor make_result(Shape shape, std::vector<double> values, const char* op,
                   std::vector<std::shared_ptr<Node>> parents,
                   std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->op = op;
  const bool any = std::any_of(parents.begin(), parents.end(),
                               [](const auto& p) { return p->requires_grad; });
  if (any) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

[[noreturn]] void dim_error(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Per-output-element source offsets for broadcasting `in` to `out`.
std::vector<std::size_t> broadcast_offsets(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  const std::size_t pad = r - in.size();
  const auto in_strides = strides_of(in);
  std::vector<std::size_t> eff(r, 0);
  for (std::size_t i = 0; i < in.size(); ++i) eff[pad + i] = in[i] == 1 ? 0 : in_strides[i];

  const std::size_t total = numel(out);
  std::vector<std::size_t> offs(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t k = 0; k < total; ++k) {
    offs[k] = off;
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      off += eff[ax];
      if (idx[ax] < out[ax]) break;
      off -= eff[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return offs;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) dim_error(op, a, b);
    out[i] = std::max(da, db);
  }
  return out;
}

enum class Binary { kAdd, kSub, kMul };

Tensor binary(Binary kind, const Tensor& a, const Tensor& b) {
  const char* name = kind == Binary::kAdd ? "add" : kind == Binary::kSub ? "sub" : "mul";
  auto apply = [kind](double x, double y) {
    switch (kind) {
      case Binary::kAdd: return x + y;
      case Binary::kSub: return x - y;
      default: return x * y;
    }
  };

  if (a.shape() == b.shape()) {
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(av[i], bv[i]);
    return make_result(a.shape(), std::move(out), name, {a.ptr(), b.ptr()}, [kind](Node& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      const auto& g = self.grad;
      if (pa.requires_grad) {
        auto& ga = pa.grad_buffer();
        if (kind == Binary::kMul) {
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb.value[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
      }
      if (pb.requires_grad) {
        auto& gb = pb.grad_buffer();
        if (kind == Binary::kMul) {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa.value[i];
        } else if (kind == Binary::kSub) {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
      }
    });
  }

  Shape out_shape = broadcast_shape(name, a.shape(), b.shape());
  auto oa = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(a.shape(), out_shape));
  auto ob = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(b.shape(), out_shape));
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(oa->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(av[(*oa)[i]], bv[(*ob)[i]]);
  return make_result(std::move(out_shape), std::move(out), name, {a.ptr(), b.ptr()},
                     [kind, oa, ob](Node& self) {
                       auto& pa = *self.parents[0];
                       auto& pb = *self.parents[1];
                       const auto& g = self.grad;
                       if (pa.requires_grad) {
                         auto& ga = pa.grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           ga[(*oa)[i]] += kind == Binary::kMul ? g[i] * pb.value[(*ob)[i]] : g[i];
                         }
                       }
                       if (pb.requires_grad) {
                         auto& gb = pb.grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           const double d = kind == Binary::kMul   ? g[i] * pa.value[(*oa)[i]]
                                            : kind == Binary::kSub ? -g[i]
                                                                   : g[i];
                           gb[(*ob)[i]] += d;
                         }
                       }
                     });
}

// c[m,n] += a[m,k] * b[k,n] with optional transposes of the stored operands.
// C[m,n] += op(A) op(B), row-major; op transposes when the flag is set.
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n, bool trans_a, bool trans_b) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  const auto im = static_cast<Eigen::Index>(m);
  const auto ik = static_cast<Eigen::Index>(k);
  const auto in = static_cast<Eigen::Index>(n);
  Eigen::Map<Mat> cm(c, im, in);
  if (!trans_a && !trans_b) cm.noalias() += CMap(a, im, ik) * CMap(b, ik, in);
  else if (!trans_a) cm.noalias() += CMap(a, im, ik) * CMap(b, in, ik).transpose();
  else if (!trans_b) cm.noalias() += CMap(a, ik, im).transpose() * CMap(b, ik, in);
  else cm.noalias() += CMap(a, ik, im).transpose() * CMap(b, in, ik).transpose();
}

}  // namespace

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  bool shared_b = false;
  if (sa.size() == 2 && sb.size() == 2) {
    m = sa[0], k = sa[1], n = sb[1];
    if (sb[0] != k) dim_error("matmul", sa, sb);
    shared_b = true;
  } else if (sa.size() == 3 && sb.size() == 3) {
    batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
    if (sb[0] != batch || sb[1] != k) dim_error("matmul", sa, sb);
  } else if (sa.size() == 3 && sb.size() == 2) {
    batch = sa[0], m = sa[1], k = sa[2], n = sb[1];
    if (sb[0] != k) dim_error("matmul", sa, sb);
    shared_b = true;
  } else {
    dim_error("matmul", sa, sb);
  }

  std::vector<double> out(batch * m * n, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t t = 0; t < batch; ++t) {
    gemm_acc(av + t * m * k, bv + (shared_b ? 0 : t * k * n), out.data() + t * m * n, m, k, n,
             false, false);
  }
  Shape out_shape = sa.size() == 2 ? Shape{m, n} : Shape{batch, m, n};
  return make_result(std::move(out_shape), std::move(out), "matmul", {a.ptr(), b.ptr()},
                     [batch, m, k, n, shared_b](Node& self) {
                       auto& pa = *self.parents[0];
                       auto& pb = *self.parents[1];
                       const double* g = self.grad.data();
                       for (std::size_t t = 0; t < batch; ++t) {
                         const double* gt = g + t * m * n;
                         const std::size_t boff = shared_b ? 0 : t * k * n;
                         if (pa.requires_grad) {
                           // dA = dC * B^T
                           gemm_acc(gt, pb.value.data() + boff, pa.grad_buffer().data() + t * m * k,
                                    m, n, k, false, true);
                         }
                         if (pb.requires_grad) {
                           // dB = A^T * dC
                           gemm_acc(pa.value.data() + t * m * k, gt, pb.grad_buffer().data() + boff,
                                    k, m, n, true, false);
                         }
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(Binary::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Binary::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Binary::kMul, a, b); }

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), "scale", {a.ptr()}, [factor](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor softmax(const Tensor& a) {
  if (a.rank() == 0) throw DimensionError("softmax: needs at least one axis");
  const std::size_t d = a.shape().back();
  const std::size_t rows = d == 0 ? 0 : a.numel() / d;
  const auto in = a.values();
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * d;
    double* y = out.data() + r * d;
    const double mx = *std::max_element(x, x + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < d; ++j) y[j] /= z;
  }
  return make_result(a.shape(), std::move(out), "softmax", {a.ptr()}, [rows, d](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * d;
      const double* dy = self.grad.data() + r * d;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layernorm: needs at least one axis");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d}) dim_error("layernorm", x.shape(), gamma.shape());
  if (beta.shape() != Shape{d}) dim_error("layernorm", x.shape(), beta.shape());
  const std::size_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  const auto in = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), "layernorm", {x.ptr(), gamma.ptr(), beta.ptr()},
                     [rows, d, xhat, rstd](Node& self) {
                       auto& px = *self.parents[0];
                       auto& pg = *self.parents[1];
                       auto& pb = *self.parents[2];
                       const auto& dy = self.grad;
                       if (pg.requires_grad) {
                         auto& gg = pg.grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) gg[j] += dy[r * d + j] * (*xhat)[r * d + j];
                       }
                       if (pb.requires_grad) {
                         auto& gb = pb.grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) gb[j] += dy[r * d + j];
                       }
                       if (px.requires_grad) {
                         auto& gx = px.grad_buffer();
                         const double inv_d = 1.0 / static_cast<double>(d);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dh = dy[r * d + j] * pg.value[j];
                             m1 += dh;
                             m2 += dh * (*xhat)[r * d + j];
                           }
                           m1 *= inv_d;
                           m2 *= inv_d;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dh = dy[r * d + j] * pg.value[j];
                             gx[r * d + j] += (*rstd)[r] * (dh - m1 - (*xhat)[r * d + j] * m2);
                           }
                         }
                       }
                     });
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const auto in = a.values();
  std::vector<double> out(in.size());
  std::vector<double> th(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double x = in[i];
    th[i] = std::tanh(kC * (x + kA * x * x * x));
    out[i] = 0.5 * x * (1.0 + th[i]);
  }
  return make_result(a.shape(), std::move(out), "gelu", {a.ptr()}, [th = std::move(th)](Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = p.value[i];
      const double t = th[i];
      const double dt = (1.0 - t * t) * kC * (1.0 + 3.0 * kA * x * x);
      g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
    }
  });
}

Tensor mean(const Tensor& a, std::size_t axis) {
  const auto& s = a.shape();
  if (axis >= s.size()) {
    throw DimensionError("mean: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  if (len == 0) throw DimensionError("mean: empty axis in " + shape_str(s));
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(outer * inner, 0.0);
  const auto in = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += in[(o * len + l) * inner + i];
  const double inv = 1.0 / static_cast<double>(len);
  for (auto& v : out) v *= inv;
  return make_result(std::move(out_shape), std::move(out), "mean", {a.ptr()},
                     [outer, inner, len, inv](Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t l = 0; l < len; ++l)
                           for (std::size_t i = 0; i < inner; ++i)
                             g[(o * len + l) * inner + i] += self.grad[o * inner + i] * inv;
                     });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return make_result({}, {acc}, "sum", {a.ptr()}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t end) {
  const auto& s = a.shape();
  if (axis >= s.size() || start > end || end > s[axis]) {
    throw DimensionError("slice: range [" + std::to_string(start) + "," + std::to_string(end) +
                         ") on axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const std::size_t w = end - start;
  Shape out_shape = s;
  out_shape[axis] = w;
  std::vector<double> out(outer * w * inner);
  const auto in = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(in.data() + (o * len + start) * inner, w * inner, out.data() + o * w * inner);
  return make_result(std::move(out_shape), std::move(out), "slice", {a.ptr()},
                     [outer, inner, len, w, start](Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t i = 0; i < w * inner; ++i)
                           g[(o * len + start) * inner + i] += self.grad[o * w * inner + i];
                     });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw DimensionError("concat: axis out of range for " + shape_str(s0));
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != s0.size()) dim_error("concat", s0, s);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) dim_error("concat", s0, s);
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Shape out_shape = s0;
  out_shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::vector<std::size_t> widths;
  std::vector<std::shared_ptr<Node>> parents;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis];
    const auto in = p.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(in.data() + o * w * inner, w * inner, out.data() + (o * total + off) * inner);
    off += w;
    widths.push_back(w);
    parents.push_back(p.ptr());
  }
  return make_result(std::move(out_shape), std::move(out), "concat", std::move(parents),
                     [outer, inner, total, widths](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         auto& p = *self.parents[k];
                         const std::size_t w = widths[k];
                         if (p.requires_grad) {
                           auto& g = p.grad_buffer();
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i = 0; i < w * inner; ++i)
                               g[o * w * inner + i] += self.grad[(o * total + off) * inner + i];
                         }
                         off += w;
                       }
                     });
}

Tensor mse(const Tensor& a, const Tensor& b, std::span<const double> row_weights) {
  if (a.shape() != b.shape()) dim_error("mse", a.shape(), b.shape());
  const std::size_t n = a.numel();
  const std::size_t width = a.rank() == 0 ? 1 : a.shape().back();
  const std::size_t rows = width == 0 ? 0 : n / width;
  auto sel = std::make_shared<std::vector<double>>();
  std::size_t selected_rows = rows;
  if (!row_weights.empty()) {
    if (row_weights.size() != rows) {
      throw DimensionError("mse: " + std::to_string(row_weights.size()) + " row weights for " +
                           std::to_string(rows) + " rows of " + shape_str(a.shape()));
    }
    sel->assign(row_weights.begin(), row_weights.end());
    selected_rows = static_cast<std::size_t>(
        std::count_if(row_weights.begin(), row_weights.end(), [](double w) { return w != 0.0; }));
  }
  if (selected_rows == 0 || width == 0) return Tensor::scalar(0.0);
  const double denom = static_cast<double>(selected_rows * width);
  const auto av = a.values();
  const auto bv = b.values();
  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!sel->empty() && (*sel)[r] == 0.0) continue;
    for (std::size_t j = 0; j < width; ++j) {
      const double d = av[r * width + j] - bv[r * width + j];
      acc += d * d;
    }
  }
  return make_result({}, {acc / denom}, "mse", {a.ptr(), b.ptr()},
                     [rows, width, denom, sel](Node& self) {
                       auto& pa = *self.parents[0];
                       auto& pb = *self.parents[1];
                       const double g = self.grad[0] * 2.0 / denom;
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (!sel->empty() && (*sel)[r] == 0.0) continue;
                         for (std::size_t j = 0; j < width; ++j) {
                           const std::size_t i = r * width + j;
                           const double d = g * (pa.value[i] - pb.value[i]);
                           if (pa.requires_grad) pa.grad_buffer()[i] += d;
                           if (pb.requires_grad) pb.grad_buffer()[i] -= d;
                         }
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  const auto& s = a.shape();
  if (s.size() < 2) throw DimensionError("transpose: needs rank >= 2, got " + shape_str(s));
  const std::size_t m = s[s.size() - 2];
  const std::size_t n = s[s.size() - 1];
  const std::size_t batch = a.numel() / (m * n == 0 ? 1 : m * n);
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  std::vector<double> out(a.numel());
  const auto in = a.values();
  for (std::size_t t = 0; t < batch; ++t)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[t * m * n + j * m + i] = in[t * m * n + i * n + j];
  return make_result(std::move(out_shape), std::move(out), "transpose", {a.ptr()},
                     [batch, m, n](Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t t = 0; t < batch; ++t)
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j)
                             g[t * m * n + i * n + j] += self.grad[t * m * n + j * m + i];
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) dim_error("reshape", a.shape(), shape);
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_result(std::move(shape), std::move(out), "reshape", {a.ptr()}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> indices) {
  if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be 2-D, got " + shape_str(table.shape()));
  const std::size_t v = table.dim(0);
  const std::size_t d = table.dim(1);
  auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  std::vector<double> out(idx->size() * d);
  const auto tv = table.values();
  for (std::size_t r = 0; r < idx->size(); ++r) {
    if ((*idx)[r] >= v) {
      throw DimensionError("embedding_lookup: index " + std::to_string((*idx)[r]) +
                           " out of range for table " + shape_str(table.shape()));
    }
    std::copy_n(tv.data() + (*idx)[r] * d, d, out.data() + r * d);
  }
  return make_result({idx->size(), d}, std::move(out), "embedding_lookup", {table.ptr()},
                     [idx, d](Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t r = 0; r < idx->size(); ++r)
                         for (std::size_t j = 0; j < d; ++j) g[(*idx)[r] * d + j] += self.grad[r * d + j];
                     });
}

Tensor causal_mask(const Tensor& scores) {
  const auto& s = scores.shape();
  if (s.size() < 2 || s[s.size() - 1] != s[s.size() - 2]) {
    throw DimensionError("causal_mask: trailing block must be square, got " + shape_str(s));
  }
  const std::size_t t = s.back();
  const std::size_t batch = t == 0 ? 0 : scores.numel() / (t * t);
  std::vector<double> out(scores.values().begin(), scores.values().end());
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = i + 1; j < t; ++j) out[b * t * t + i * t + j] = kNegInf;
  return make_result(s, std::move(out), "causal_mask", {scores.ptr()}, [batch, t](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j <= i; ++j) g[b * t * t + i * t + j] += self.grad[b * t * t + i * t + j];
  });
}

Tensor sum_squares(const Tensor& a) { return sum(mul(a, a)); }

}  // namespace ops

Tensor forward_op(OpKind kind, std::span<const Tensor> in, const OpAttrs& at) {
  auto need = [&](std::size_t n, const char* name) {
    if (in.size() != n) {
      throw ContractError(std::string(name) + ": expected " + std::to_string(n) + " inputs, got " +
                          std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::kMatmul: need(2, "matmul"); return ops::matmul(in[0], in[1]);
    case OpKind::kAdd: need(2, "add"); return ops::add(in[0], in[1]);
    case OpKind::kSub: need(2, "sub"); return ops::sub(in[0], in[1]);
    case OpKind::kMul: need(2, "mul"); return ops::mul(in[0], in[1]);
    case OpKind::kScale: need(1, "scale"); return ops::scale(in[0], at.scalar);
    case OpKind::kSoftmax: need(1, "softmax"); return ops::softmax(in[0]);
    case OpKind::kLayerNorm: need(3, "layernorm"); return ops::layernorm(in[0], in[1], in[2], at.eps);
    case OpKind::kGelu: need(1, "gelu"); return ops::gelu(in[0]);
    case OpKind::kMeanOverAxis: need(1, "mean"); return ops::mean(in[0], at.axis);
    case OpKind::kSum: need(1, "sum"); return ops::sum(in[0]);
    case OpKind::kSlice: need(1, "slice"); return ops::slice(in[0], at.axis, at.start, at.end);
    case OpKind::kConcat: return ops::concat(in, at.axis);
    case OpKind::kMse: need(2, "mse"); return ops::mse(in[0], in[1], at.row_weights);
    case OpKind::kTranspose: need(1, "transpose"); return ops::transpose(in[0]);
    case OpKind::kReshape: need(1, "reshape"); return ops::reshape(in[0], at.shape);
    case OpKind::kEmbeddingLookup: need(1, "embedding_lookup"); return ops::embedding_lookup(in[0], at.indices);
    case OpKind::kCausalMask: need(1, "causal_mask"); return ops::causal_mask(in[0]);
  }
  throw ContractError("forward_op: unknown op kind");
}

}  // namespace tsfed
