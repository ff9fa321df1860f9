#pragma once

// Reverse-mode differentiable tensor primitives in 64-bit arithmetic.
//
// A Tensor is a shared handle to a node of a computation record. Every
// primitive below creates a new node whose inputs are the nodes it read, so
// the record is built implicitly while the forward pass runs. backward()
// walks the nodes reachable from a scalar loss in reverse topological order
// and accumulates dLoss/dLeaf into every leaf that requires a gradient.
//
// Copying a Tensor copies the handle, not the values. Use clone() for a deep
// copy of a leaf.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fhrformer/errors.hpp"

namespace fhrformer::diff {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(const Node&)> backward_fn;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values) {
    return leaf(std::move(shape), std::move(values), false);
  }
  static Tensor parameter(Shape shape, std::vector<double> values) {
    return leaf(std::move(shape), std::move(values), true);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(shape_size(shape), 0.0);
    return leaf(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor scalar(double v) { return constant({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  /// Rows of a matrix view: all leading axes collapsed.
  std::size_t rows() const { return rank() <= 1 ? 1 : size() / cols(); }
  /// Last axis length.
  std::size_t cols() const { return node_->shape.empty() ? 1 : node_->shape.back(); }

  std::span<const double> values() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  const char* op() const { return node_->op; }

  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  /// In-place update of a leaf's values (optimizer steps, checkpoint loads).
  std::span<double> mutable_values() {
    if (!node_->is_leaf) throw DefectError("mutable_values() on a non-leaf tensor");
    return node_->value;
  }

  Tensor clone() const {
    return leaf(node_->shape, node_->value, node_->requires_grad);
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  static Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_size(shape) != values.size()) {
      throw std::invalid_argument("tensor shape " + shape_string(shape) + " does not hold " +
                                  std::to_string(values.size()) + " values");
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    if (requires_grad) n->grad.assign(n->value.size(), 0.0);
    return Tensor(std::move(n));
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

inline Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                          std::vector<Tensor> inputs, std::function<void(const Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->is_leaf = false;
  n->op = op;
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
  if (n->requires_grad) {
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

inline bool wants_grad(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }
inline std::vector<double>& grad_of(const Node& self, std::size_t i) { return self.inputs[i]->grad; }

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                " vs " + shape_string(b.shape()));
  }
}

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
  }
}

// Same-shape or row-broadcast (b is [m] or [1,m] against a [n,m]).
inline bool is_row_broadcast(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return false;
  if (b.size() != a.cols()) return false;
  return b.rank() == 1 || (b.rank() == 2 && b.shape()[0] == 1);
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return make_result(op, x.shape(), std::move(out), {x}, [deriv](const Node& self) {
    auto& gx = grad_of(self, 0);
    const auto& xin = self.inputs[0]->value;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * deriv(xin[i], self.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and shape primitives

/// [n,k] x [k,m] -> [n,m]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k) {
    throw std::invalid_argument("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                                shape_string(b.shape()));
  }
  std::vector<double> out(n * m, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = av[i * k + p];
      const double* brow = bv + p * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += s * brow[j];
    }
  }
  return detail::make_result("matmul", {n, m}, std::move(out), {a, b}, [n, k, m](const Node& self) {
    const double* g = self.grad.data();
    const double* av = self.inputs[0]->value.data();
    const double* bv = self.inputs[1]->value.data();
    if (detail::wants_grad(self, 0)) {
      // ga += g b^T, row by row against a transposed copy of b so the inner loop is an axpy.
      std::vector<double> bt(k * m);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < m; ++j) bt[j * k + p] = bv[p * m + j];
      double* ga = detail::grad_of(self, 0).data();
      for (std::size_t i = 0; i < n; ++i) {
        double* garow = ga + i * k;
        for (std::size_t j = 0; j < m; ++j) {
          const double s = g[i * m + j];
          const double* btrow = bt.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) garow[p] += s * btrow[p];
        }
      }
    }
    if (detail::wants_grad(self, 1)) {
      double* gb = detail::grad_of(self, 1).data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double s = av[i * k + p];
          double* gbrow = gb + p * m;
          const double* grow = g + i * m;
          for (std::size_t j = 0; j < m; ++j) gbrow[j] += s * grow[j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  std::vector<double> out(n * m);
  const auto av = a.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = av[i * m + j];
  return detail::make_result("transpose", {m, n}, std::move(out), {a}, [n, m](const Node& self) {
    auto& ga = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += self.grad[j * n + i];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw std::invalid_argument("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {a}, [](const Node& self) {
    auto& ga = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

/// Rows of `a` at `index`, in order (repeats allowed).
inline Tensor gather_rows(const Tensor& a, std::vector<std::size_t> index) {
  detail::require_matrix(a, "gather_rows");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  std::vector<double> out(index.size() * m);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= n) throw std::out_of_range("gather_rows: row " + std::to_string(index[r]) + " of " + std::to_string(n));
    std::copy_n(a.values().begin() + index[r] * m, m, out.begin() + r * m);
  }
  Shape shape{index.size(), m};
  return detail::make_result("gather_rows", std::move(shape), std::move(out), {a},
                             [index = std::move(index), m](const Node& self) {
                               auto& ga = detail::grad_of(self, 0);
                               for (std::size_t r = 0; r < index.size(); ++r)
                                 for (std::size_t j = 0; j < m; ++j) ga[index[r] * m + j] += self.grad[r * m + j];
                             });
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "concat_rows");
  detail::require_matrix(b, "concat_rows");
  if (a.cols() != b.cols()) throw std::invalid_argument("concat_rows: column counts differ");
  std::vector<double> out(a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  const std::size_t split = a.size();
  return detail::make_result("concat_rows", {a.shape()[0] + b.shape()[0], a.cols()}, std::move(out), {a, b},
                             [split](const Node& self) {
                               if (detail::wants_grad(self, 0)) {
                                 auto& ga = detail::grad_of(self, 0);
                                 for (std::size_t i = 0; i < split; ++i) ga[i] += self.grad[i];
                               }
                               if (detail::wants_grad(self, 1)) {
                                 auto& gb = detail::grad_of(self, 1);
                                 for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[split + i];
                               }
                             });
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len) {
  detail::require_matrix(a, "slice_cols");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  if (start + len > m) throw std::out_of_range("slice_cols beyond column count");
  std::vector<double> out(n * len);
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(a.values().begin() + i * m + start, len, out.begin() + i * len);
  return detail::make_result("slice_cols", {n, len}, std::move(out), {a}, [n, m, start, len](const Node& self) {
    auto& ga = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < len; ++j) ga[i * m + start + j] += self.grad[i * len + j];
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::vector<std::size_t> offsets;
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.rows() != n) throw std::invalid_argument("concat_cols: row counts differ");
    offsets.push_back(m);
    m += p.cols();
  }
  std::vector<double> out(n * m);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = parts[k].cols();
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(parts[k].values().begin() + i * w, w, out.begin() + i * m + offsets[k]);
  }
  return detail::make_result("concat_cols", {n, m}, std::move(out), parts, [n, m, offsets](const Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      if (!detail::wants_grad(self, k)) continue;
      auto& gk = detail::grad_of(self, k);
      const std::size_t w = gk.size() / n;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) gk[i * w + j] += self.grad[i * m + offsets[k] + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

/// a + b, with b either the same shape as a or a row vector broadcast over a's rows.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool bcast = detail::is_row_broadcast(a, b);
  if (!bcast) detail::require_same_shape(a, b, "add");
  const std::size_t m = a.cols();
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bcast ? bv[i % m] : bv[i];
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [bcast, m](const Node& self) {
    if (detail::wants_grad(self, 0)) {
      auto& ga = detail::grad_of(self, 0);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& gb = detail::grad_of(self, 1);
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[bcast ? i % m : i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  const bool bcast = detail::is_row_broadcast(a, b);
  if (!bcast) detail::require_same_shape(a, b, "sub");
  const std::size_t m = a.cols();
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bcast ? bv[i % m] : bv[i];
  return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [bcast, m](const Node& self) {
    if (detail::wants_grad(self, 0)) {
      auto& ga = detail::grad_of(self, 0);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& gb = detail::grad_of(self, 1);
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[bcast ? i % m : i] -= self.grad[i];
    }
  });
}

/// Elementwise product of same-shape tensors.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](const Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (detail::wants_grad(self, 0)) {
      auto& ga = detail::grad_of(self, 0);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bv[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& gb = detail::grad_of(self, 1);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * av[i];
    }
  });
}

/// factor * a + offset
inline Tensor scale(const Tensor& a, double factor, double offset = 0.0) {
  return detail::unary(
      "scale", a, [=](double x) { return factor * x + offset; }, [=](double, double) { return factor; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// |a|, with derivative 0 at a = 0.
inline Tensor abs(const Tensor& a) {
  return detail::unary(
      "abs", a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

/// a^p for a >= 0. The derivative at a = 0 is taken as 0 when p < 1.
inline Tensor pow(const Tensor& a, double p) {
  return detail::unary(
      "pow", a, [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return (x == 0.0 && p < 1.0) ? 0.0 : p * std::pow(x, p - 1.0); });
}

/// Exact GELU, x * Phi(x), with Phi the standard normal CDF.
inline Tensor gelu(const Tensor& a) {
  return detail::unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + x * pdf;
      });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return detail::make_result("sum", {1}, {s}, {a}, [](const Node& self) {
    auto& ga = detail::grad_of(self, 0);
    for (double& g : ga) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// ---------------------------------------------------------------------------
// Normalization and activations

/// Softmax along `axis` of a vector (axis 0) or matrix (axis 0 or 1).
/// Stabilized by subtracting the per-slice maximum. Rejects NaN input.
inline Tensor softmax(const Tensor& a, std::size_t axis) {
  if (a.rank() > 2) throw std::invalid_argument("softmax: rank > 2 unsupported");
  const std::size_t last = a.rank() == 0 ? 0 : a.rank() - 1;
  if (axis > last) throw std::invalid_argument("softmax: axis out of range");
  for (double v : a.values())
    if (std::isnan(v)) throw std::domain_error("softmax: NaN input");
  // Slices are `count` groups of `len` entries spaced `stride` apart.
  std::size_t len, count, stride, step;
  if (a.rank() <= 1) {
    len = a.size(); count = 1; stride = 1; step = 0;
  } else if (axis == 1) {
    len = a.shape()[1]; count = a.shape()[0]; stride = 1; step = a.shape()[1];
  } else {
    len = a.shape()[0]; count = a.shape()[1]; stride = a.shape()[1]; step = 1;
  }
  std::vector<double> out(a.size());
  const auto av = a.values();
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t base = s * step;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, av[base + j * stride]);
    double z = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      const double e = std::exp(av[base + j * stride] - mx);
      out[base + j * stride] = e;
      z += e;
    }
    for (std::size_t j = 0; j < len; ++j) out[base + j * stride] /= z;
  }
  return detail::make_result("softmax", a.shape(), std::move(out), {a},
                             [len, count, stride, step](const Node& self) {
                               auto& ga = detail::grad_of(self, 0);
                               for (std::size_t s = 0; s < count; ++s) {
                                 const std::size_t base = s * step;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < len; ++j) {
                                   const std::size_t i = base + j * stride;
                                   dot += self.grad[i] * self.value[i];
                                 }
                                 for (std::size_t j = 0; j < len; ++j) {
                                   const std::size_t i = base + j * stride;
                                   ga[i] += self.value[i] * (self.grad[i] - dot);
                                 }
                               }
                             });
}

/// Layer normalization over the last axis followed by per-feature gain and bias.
/// Variance is the biased (population) estimate.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  const std::size_t m = x.cols();
  const std::size_t n = x.size() / m;
  if (gain.size() != m || bias.size() != m) {
    throw std::invalid_argument("layer_norm: gain/bias length " + std::to_string(gain.size()) + " vs features " +
                                std::to_string(m));
  }
  std::vector<double> normed(x.size()), inv_std(n), out(x.size());
  const auto xv = x.values();
  for (std::size_t r = 0; r < n; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += xv[r * m + j];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (xv[r * m + j] - mu) * (xv[r * m + j] - mu);
    var /= static_cast<double>(m);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) {
      normed[r * m + j] = (xv[r * m + j] - mu) * inv_std[r];
      out[r * m + j] = normed[r * m + j] * gain[j] + bias[j];
    }
  }
  return detail::make_result(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [n, m, normed = std::move(normed), inv_std = std::move(inv_std)](const Node& self) {
        const auto& g = self.inputs[1]->value;
        if (detail::wants_grad(self, 0)) {
          auto& gx = detail::grad_of(self, 0);
          for (std::size_t r = 0; r < n; ++r) {
            double mean_d = 0.0, mean_dn = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              const double d = self.grad[r * m + j] * g[j];
              mean_d += d;
              mean_dn += d * normed[r * m + j];
            }
            mean_d /= static_cast<double>(m);
            mean_dn /= static_cast<double>(m);
            for (std::size_t j = 0; j < m; ++j) {
              const double d = self.grad[r * m + j] * g[j];
              gx[r * m + j] += inv_std[r] * (d - mean_d - normed[r * m + j] * mean_dn);
            }
          }
        }
        if (detail::wants_grad(self, 1)) {
          auto& gg = detail::grad_of(self, 1);
          for (std::size_t i = 0; i < self.grad.size(); ++i) gg[i % m] += self.grad[i] * normed[i];
        }
        if (detail::wants_grad(self, 2)) {
          auto& gb = detail::grad_of(self, 2);
          for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % m] += self.grad[i];
        }
      });
}

/// SplitMix64 step; used to derive independent per-call seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Inverted dropout keyed by an explicit seed: kept entries are scaled by 1/(1-p).
/// Identity when `training` is false or p == 0.
inline Tensor dropout(const Tensor& a, double p, std::uint64_t seed, bool training) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0,1)");
  if (!training || p == 0.0) return a;
  std::vector<double> keep(a.size());
  std::uint64_t state = seed;
  const double scale_kept = 1.0 / (1.0 - p);
  for (auto& k : keep) {
    state = mix_seed(state);
    const double u = static_cast<double>(state >> 11) * 0x1.0p-53;
    k = u < p ? 0.0 : scale_kept;
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * keep[i];
  return detail::make_result("dropout", a.shape(), std::move(out), {a}, [keep = std::move(keep)](const Node& self) {
    auto& ga = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * keep[i];
  });
}

// ---------------------------------------------------------------------------
// Spectral magnitude

/// Number of one-sided DFT bins for a real signal of length n.
inline std::size_t one_sided_bins(std::size_t n) { return n / 2 + 1; }

/// Periodic Hann window, w[i] = 0.5 - 0.5 cos(2 pi i / n).
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  return w;
}

namespace detail {

struct DftTable {
  std::vector<double> window;
  std::vector<double> cos_k;  // [K, n], already multiplied by the window
  std::vector<double> sin_k;
};

inline const DftTable& dft_table(std::size_t n) {
  thread_local std::map<std::size_t, DftTable> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  DftTable t;
  t.window = hann_window(n);
  const std::size_t k_bins = one_sided_bins(n);
  t.cos_k.resize(k_bins * n);
  t.sin_k.resize(k_bins * n);
  for (std::size_t k = 0; k < k_bins; ++k)
    for (std::size_t i = 0; i < n; ++i) {
      // Reduce k*i mod n first so the angle stays exact for large products.
      const double ang = 2.0 * std::numbers::pi * static_cast<double>((k * i) % n) / static_cast<double>(n);
      t.cos_k[k * n + i] = t.window[i] * std::cos(ang);
      t.sin_k[k * n + i] = t.window[i] * std::sin(ang);
    }
  return cache.emplace(n, std::move(t)).first->second;
}

}  // namespace detail

/// One-sided DFT magnitude of each Hann-windowed row: [rows, n] -> [rows, n/2+1].
/// A vector input is treated as a single row. No 1/n normalization. The
/// gradient is 0 at any bin whose magnitude is exactly 0.
inline Tensor dft_magnitude(const Tensor& x) {
  const std::size_t n = x.cols();
  const std::size_t rows = x.size() / n;
  const std::size_t k_bins = one_sided_bins(n);
  const auto& table = detail::dft_table(n);
  std::vector<double> re(rows * k_bins), im(rows * k_bins), mag(rows * k_bins);
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < k_bins; ++k) {
      double sr = 0.0, si = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        sr += table.cos_k[k * n + i] * xv[r * n + i];
        si -= table.sin_k[k * n + i] * xv[r * n + i];
      }
      re[r * k_bins + k] = sr;
      im[r * k_bins + k] = si;
      mag[r * k_bins + k] = std::hypot(sr, si);
    }
  Shape out_shape = x.rank() <= 1 ? Shape{k_bins} : Shape{rows, k_bins};
  return detail::make_result(
      "dft_magnitude", std::move(out_shape), std::move(mag), {x},
      [n, rows, k_bins, re = std::move(re), im = std::move(im)](const Node& self) {
        const auto& table = detail::dft_table(n);
        auto& gx = detail::grad_of(self, 0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t k = 0; k < k_bins; ++k) {
            const std::size_t idx = r * k_bins + k;
            const double m = self.value[idx];
            if (m == 0.0) continue;
            const double cr = self.grad[idx] * re[idx] / m;
            const double ci = self.grad[idx] * im[idx] / m;
            for (std::size_t i = 0; i < n; ++i)
              gx[r * n + i] += cr * table.cos_k[k * n + i] - ci * table.sin_k[k * n + i];
          }
      });
}

// ---------------------------------------------------------------------------
// Backward pass

/// Nodes reachable from `root` that require a gradient, in topological order
/// (inputs before consumers). Throws DefectError on a cycle.
inline std::vector<Node*> topological_order(const Tensor& root) {
  std::vector<Node*> order;
  if (!root.requires_grad()) return order;
  enum class Mark : std::uint8_t { active, done };
  std::unordered_map<Node*, Mark> marks;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  marks[root.node().get()] = Mark::active;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (!child->requires_grad) continue;
      auto it = marks.find(child);
      if (it == marks.end()) {
        marks.emplace(child, Mark::active);
        stack.emplace_back(child, 0);
      } else if (it->second == Mark::active) {
        throw DefectError("computation record contains a cycle");
      }
    } else {
      marks[node] = Mark::done;
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

/// Accumulates dLoss/dLeaf into every reachable leaf's grad buffer. Leaf
/// buffers are not reset, so repeated calls accumulate. `seed` scales the
/// loss gradient (useful for averaging over a batch).
inline void backward(const Tensor& loss, double seed = 1.0) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
  }
  const auto order = topological_order(loss);
  for (Node* n : order)
    if (!n->is_leaf) n->grad.assign(n->value.size(), 0.0);
  if (order.empty()) return;
  loss.node()->grad[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf && n->backward_fn) n->backward_fn(*n);
  }
  for (Node* n : order)
    if (!n->is_leaf) std::vector<double>().swap(n->grad);
}

}  // namespace fhrformer::diff
