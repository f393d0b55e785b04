#include "kmax/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace kmax {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

Tensor make_result(Shape shape, std::vector<double> values, const char* op,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(const Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  bool needs = false;
  if (grad_mode_enabled()) {
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->parents.push_back(t->node());
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

Tensor make_result_n(Shape shape, std::vector<double> values, const char* op,
                     const std::vector<Tensor>& inputs,
                     std::function<void(const Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  bool needs = false;
  if (grad_mode_enabled()) {
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
}

void require_rank(const Tensor& t, std::size_t r, const char* op) {
  require_defined(t, op);
  if (t.rank() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw AxisError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                    shape_to_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// C[m x n] += op(A) * op(B); A is m x k (k x m when ta), B is k x n (n x k when tb).
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* A,
          const double* B, double* C) {
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i) {
      double* c = C + i * n;
      const double* a = A + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[p];
        if (av == 0.0) continue;
        const double* b = B + p * n;
        for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* a = A + i * k;
      double* c = C + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double* b = B + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += a[p] * b[p];
        c[j] += acc;
      }
    }
  } else if (ta && !tb) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* a = A + p * m;
      const double* b = B + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = a[i];
        if (av == 0.0) continue;
        double* c = C + i * n;
        for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += A[p * m + i] * B[j * k + p];
        C[i * n + j] += acc;
      }
  }
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Bwd dfdx) {
  require_defined(x, op);
  auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
  return make_result(x.shape(), std::move(out), op, {&x}, [px = x.node(), dfdx](const Node& self) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dfdx(px->value[i], self.value[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_to_string(a.shape()) +
                         " x " + shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm(false, false, m, n, k, a.data().data(), b.data().data(), out.data());
  return make_result({m, n}, std::move(out), "matmul", {&a, &b},
                     [pa = a.node(), pb = b.node(), m, n, k](const Node& self) {
                       if (pa->requires_grad) {
                         gemm(false, true, m, k, n, self.grad.data(), pb->value.data(),
                              pa->grad_buffer().data());
                       }
                       if (pb->requires_grad) {
                         gemm(true, false, k, n, m, pa->value.data(), self.grad.data(),
                              pb->grad_buffer().data());
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto v = a.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return make_result({c, r}, std::move(out), "transpose", {&a},
                     [pa = a.node(), r, c](const Node& self) {
                       auto& g = pa->grad_buffer();
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                     shape_to_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {&a},
                     [pa = a.node()](const Node& self) {
                       auto& g = pa->grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add_rowwise(y, bias) : y;
}

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto av = a.data(), bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result(a.shape(), std::move(out), "add", {&a, &b},
                     [pa = a.node(), pb = b.node()](const Node& self) {
                       for (Node* p : {pa.get(), pb.get()}) {
                         if (!p->requires_grad) continue;
                         auto& g = p->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       }
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto av = a.data(), bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result(a.shape(), std::move(out), "sub", {&a, &b},
                     [pa = a.node(), pb = b.node()](const Node& self) {
                       if (pa->requires_grad) {
                         auto& g = pa->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       }
                       if (pb->requires_grad) {
                         auto& g = pb->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto av = a.data(), bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result(a.shape(), std::move(out), "mul", {&a, &b},
                     [pa = a.node(), pb = b.node()](const Node& self) {
                       if (pa->requires_grad) {
                         auto& g = pa->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
                       }
                       if (pb->requires_grad) {
                         auto& g = pb->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
                       }
                     });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  auto av = a.data(), bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return make_result(a.shape(), std::move(out), "div", {&a, &b},
                     [pa = a.node(), pb = b.node()](const Node& self) {
                       if (pa->requires_grad) {
                         auto& g = pa->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb->value[i];
                       }
                       if (pb->requires_grad) {
                         auto& g = pb->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i)
                           g[i] -= self.grad[i] * self.value[i] / pb->value[i];
                       }
                     });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, "scale", [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  require_defined(x, "add_rowwise");
  require_rank(bias, 1, "add_rowwise");
  const std::size_t n = x.shape().back();
  if (bias.dim(0) != n) {
    throw DimensionError("add_rowwise: bias " + shape_to_string(bias.shape()) +
                         " does not match rows of " + shape_to_string(x.shape()));
  }
  auto xv = x.data(), bv = bias.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + bv[i % n];
  return make_result(x.shape(), std::move(out), "add_rowwise", {&x, &bias},
                     [px = x.node(), pb = bias.node(), n](const Node& self) {
                       if (px->requires_grad) {
                         auto& g = px->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       }
                       if (pb->requires_grad) {
                         auto& g = pb->grad_buffer();
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
                       }
                     });
}

Tensor relu(const Tensor& x) {
  return unary(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor log(const Tensor& x) {
  return unary(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "softmax");
  const AxisSplit s = split_axis(x.shape(), axis, "softmax");
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < s.len; ++a) mx = std::max(mx, xv[base + a * s.inner]);
      double total = 0.0;
      for (std::size_t a = 0; a < s.len; ++a) {
        const double e = std::exp(xv[base + a * s.inner] - mx);
        out[base + a * s.inner] = e;
        total += e;
      }
      for (std::size_t a = 0; a < s.len; ++a) out[base + a * s.inner] /= total;
    }
  }
  return make_result(x.shape(), std::move(out), "softmax", {&x},
                     [px = x.node(), s](const Node& self) {
                       auto& g = px->grad_buffer();
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         for (std::size_t i = 0; i < s.inner; ++i) {
                           const std::size_t base = o * s.len * s.inner + i;
                           double dot = 0.0;
                           for (std::size_t a = 0; a < s.len; ++a) {
                             const std::size_t k = base + a * s.inner;
                             dot += self.grad[k] * self.value[k];
                           }
                           for (std::size_t a = 0; a < s.len; ++a) {
                             const std::size_t k = base + a * s.inner;
                             g[k] += self.value[k] * (self.grad[k] - dot);
                           }
                         }
                       }
                     });
}

Tensor argmax_onehot(const Tensor& x, std::size_t axis) {
  require_defined(x, "argmax_onehot");
  const AxisSplit s = split_axis(x.shape(), axis, "argmax_onehot");
  auto xv = x.data();
  std::vector<double> out(xv.size(), 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      std::size_t best = 0;
      for (std::size_t a = 1; a < s.len; ++a) {
        if (xv[base + a * s.inner] > xv[base + best * s.inner]) best = a;
      }
      out[base + best * s.inner] = 1.0;
    }
  }
  return Tensor(x.shape(), std::move(out), false);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(x, "layer_norm");
  require_rank(gain, 1, "layer_norm");
  require_rank(bias, 1, "layer_norm");
  const std::size_t n = x.shape().back();
  if (gain.dim(0) != n || bias.dim(0) != n) {
    throw DimensionError("layer_norm: gain/bias " + shape_to_string(gain.shape()) + "/" +
                         shape_to_string(bias.shape()) + " vs input " + shape_to_string(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  auto xv = x.data(), gv = gain.data(), bv = bias.data();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), "layer_norm", {&x, &gain, &bias},
      [px = x.node(), pg = gain.node(), pb = bias.node(), xhat = std::move(xhat),
       inv_std = std::move(inv_std), n, rows](const Node& self) {
        if (pg->requires_grad) {
          auto& g = pg->grad_buffer();
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i] * xhat[i];
        }
        if (pb->requires_grad) {
          auto& g = pb->grad_buffer();
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
        }
        if (px->requires_grad) {
          auto& g = px->grad_buffer();
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = self.grad[r * n + j] * pg->value[j];
              sum_d += d;
              sum_dx += d * xhat[r * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double d = self.grad[r * n + j] * pg->value[j];
              g[r * n + j] += inv_std[r] * (d - inv_n * sum_d - xhat[r * n + j] * inv_n * sum_dx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------

Tensor reduce_sum(const Tensor& x, std::size_t axis) {
  require_defined(x, "reduce_sum");
  const AxisSplit s = split_axis(x.shape(), axis, "reduce_sum");
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.shape()[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  auto xv = x.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t a = 0; a < s.len; ++a)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += xv[(o * s.len + a) * s.inner + i];
  return make_result(std::move(out_shape), std::move(out), "reduce_sum", {&x},
                     [px = x.node(), s](const Node& self) {
                       auto& g = px->grad_buffer();
                       for (std::size_t o = 0; o < s.outer; ++o)
                         for (std::size_t a = 0; a < s.len; ++a)
                           for (std::size_t i = 0; i < s.inner; ++i)
                             g[(o * s.len + a) * s.inner + i] += self.grad[o * s.inner + i];
                     });
}

Tensor reduce_mean(const Tensor& x, std::size_t axis) {
  const std::size_t len = x.dim(axis);
  return scale(reduce_sum(x, axis), 1.0 / static_cast<double>(len));
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result({1}, {total}, "sum", {&x}, [px = x.node()](const Node& self) {
    auto& g = px->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  require_defined(x, "slice");
  const AxisSplit s = split_axis(x.shape(), axis, "slice");
  if (begin >= end || end > s.len) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for axis of length " + std::to_string(s.len));
  }
  const std::size_t len = end - begin;
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  auto xv = x.data();
  std::vector<double> out(s.outer * len * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.begin() + (o * s.len + begin) * s.inner, len * s.inner,
                out.begin() + o * len * s.inner);
  return make_result(std::move(out_shape), std::move(out), "slice", {&x},
                     [px = x.node(), s, begin, len](const Node& self) {
                       auto& g = px->grad_buffer();
                       for (std::size_t o = 0; o < s.outer; ++o)
                         for (std::size_t k = 0; k < len * s.inner; ++k)
                           g[(o * s.len + begin) * s.inner + k] += self.grad[o * len * s.inner + k];
                     });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  split_axis(ref, axis, "concat");
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    const Shape& sh = p.shape();
    bool ok = sh.size() == ref.size();
    for (std::size_t i = 0; ok && i < sh.size(); ++i) ok = i == axis || sh[i] == ref[i];
    if (!ok) {
      throw DimensionError("concat: " + shape_to_string(sh) + " incompatible with " +
                           shape_to_string(ref) + " along axis " + std::to_string(axis));
    }
    total += sh[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const AxisSplit s = split_axis(out_shape, axis, "concat");
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.shape()[axis];
    auto pv = p.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(pv.begin() + o * len * s.inner, len * s.inner,
                  out.begin() + (o * s.len + off) * s.inner);
    off += len;
  }
  std::vector<NodePtr> nodes;
  for (const Tensor& p : parts) nodes.push_back(p.node());
  return make_result_n(std::move(out_shape), std::move(out), "concat", parts,
                       [nodes, offsets, s, axis](const Node& self) {
                         for (std::size_t idx = 0; idx < nodes.size(); ++idx) {
                           Node* p = nodes[idx].get();
                           if (!p->requires_grad) continue;
                           const std::size_t len = p->shape[axis];
                           auto& g = p->grad_buffer();
                           for (std::size_t o = 0; o < s.outer; ++o)
                             for (std::size_t k = 0; k < len * s.inner; ++k)
                               g[o * len * s.inner + k] +=
                                   self.grad[(o * s.len + offsets[idx]) * s.inner + k];
                         }
                       });
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_defined(x, "select_rows");
  if (rows.empty()) throw ShapeError("select_rows: empty row list");
  const std::size_t n_rows = x.dim(0);
  const std::size_t width = x.numel() / n_rows;
  auto xv = x.data();
  std::vector<double> out(rows.size() * width);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n_rows) throw ShapeError("select_rows: row index out of range");
    std::copy_n(xv.begin() + rows[r] * width, width, out.begin() + r * width);
  }
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result(std::move(out_shape), std::move(out), "select_rows", {&x},
                     [px = x.node(), idx = std::move(idx), width](const Node& self) {
                       auto& g = px->grad_buffer();
                       for (std::size_t r = 0; r < idx.size(); ++r)
                         for (std::size_t j = 0; j < width; ++j)
                           g[idx[r] * width + j] += self.grad[r * width + j];
                     });
}

Tensor take(const Tensor& x, std::span<const std::size_t> flat_indices) {
  require_defined(x, "take");
  if (flat_indices.empty()) throw ShapeError("take: empty index list");
  auto xv = x.data();
  std::vector<double> out(flat_indices.size());
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    if (flat_indices[i] >= xv.size()) throw ShapeError("take: index out of range");
    out[i] = xv[flat_indices[i]];
  }
  std::vector<std::size_t> idx(flat_indices.begin(), flat_indices.end());
  const std::size_t n = idx.size();
  return make_result({n}, std::move(out), "take", {&x},
                     [px = x.node(), idx = std::move(idx)](const Node& self) {
                       auto& g = px->grad_buffer();
                       for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
                     });
}

// ---------------------------------------------------------------------------

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  require_rank(x, 3, "upsample_nearest");
  if (factor == 0) throw ArgumentError("upsample_nearest: factor must be positive");
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  const std::size_t OH = H * factor, OW = W * factor;
  auto xv = x.data();
  std::vector<double> out(OH * OW * C);
  for (std::size_t y = 0; y < OH; ++y)
    for (std::size_t xx = 0; xx < OW; ++xx)
      std::copy_n(xv.begin() + ((y / factor) * W + xx / factor) * C, C,
                  out.begin() + (y * OW + xx) * C);
  return make_result({OH, OW, C}, std::move(out), "upsample_nearest", {&x},
                     [px = x.node(), W, C, OH, OW, factor](const Node& self) {
                       auto& g = px->grad_buffer();
                       for (std::size_t y = 0; y < OH; ++y)
                         for (std::size_t xx = 0; xx < OW; ++xx) {
                           double* dst = g.data() + ((y / factor) * W + xx / factor) * C;
                           const double* src = self.grad.data() + (y * OW + xx) * C;
                           for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
                         }
                     });
}

Tensor conv3x3(const Tensor& x, const Tensor& weight, std::size_t stride) {
  require_rank(x, 3, "conv3x3");
  require_rank(weight, 4, "conv3x3");
  if (stride != 1 && stride != 2) throw ArgumentError("conv3x3: stride must be 1 or 2");
  const std::size_t H = x.dim(0), W = x.dim(1), Cin = x.dim(2);
  if (weight.dim(0) != 3 || weight.dim(1) != 3 || weight.dim(2) != Cin) {
    throw DimensionError("conv3x3: weight " + shape_to_string(weight.shape()) +
                         " incompatible with input " + shape_to_string(x.shape()));
  }
  const std::size_t Cout = weight.dim(3);
  const std::size_t OH = (H - 1) / stride + 1, OW = (W - 1) / stride + 1;
  const std::size_t K = 9 * Cin;
  auto xv = x.data();
  // im2col: one row of 9*Cin taps per output pixel.
  std::vector<double> cols(OH * OW * K, 0.0);
  for (std::size_t oy = 0; oy < OH; ++oy)
    for (std::size_t ox = 0; ox < OW; ++ox) {
      double* row = cols.data() + (oy * OW + ox) * K;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        const long iy = static_cast<long>(oy * stride + ky) - 1;
        if (iy < 0 || iy >= static_cast<long>(H)) continue;
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const long ix = static_cast<long>(ox * stride + kx) - 1;
          if (ix < 0 || ix >= static_cast<long>(W)) continue;
          std::copy_n(xv.begin() + (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * Cin,
                      Cin, row + (ky * 3 + kx) * Cin);
        }
      }
    }
  std::vector<double> out(OH * OW * Cout, 0.0);
  gemm(false, false, OH * OW, Cout, K, cols.data(), weight.data().data(), out.data());
  return make_result(
      {OH, OW, Cout}, std::move(out), "conv3x3", {&x, &weight},
      [px = x.node(), pw = weight.node(), cols = std::move(cols), H, W, Cin, Cout, OH, OW, K,
       stride](const Node& self) {
        if (pw->requires_grad) {
          gemm(true, false, K, Cout, OH * OW, cols.data(), self.grad.data(),
               pw->grad_buffer().data());
        }
        if (px->requires_grad) {
          std::vector<double> dcols(OH * OW * K, 0.0);
          gemm(false, true, OH * OW, K, Cout, self.grad.data(), pw->value.data(), dcols.data());
          auto& g = px->grad_buffer();
          for (std::size_t oy = 0; oy < OH; ++oy)
            for (std::size_t ox = 0; ox < OW; ++ox) {
              const double* row = dcols.data() + (oy * OW + ox) * K;
              for (std::size_t ky = 0; ky < 3; ++ky) {
                const long iy = static_cast<long>(oy * stride + ky) - 1;
                if (iy < 0 || iy >= static_cast<long>(H)) continue;
                for (std::size_t kx = 0; kx < 3; ++kx) {
                  const long ix = static_cast<long>(ox * stride + kx) - 1;
                  if (ix < 0 || ix >= static_cast<long>(W)) continue;
                  double* dst = g.data() + (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * Cin;
                  const double* src = row + (ky * 3 + kx) * Cin;
                  for (std::size_t c = 0; c < Cin; ++c) dst[c] += src[c];
                }
              }
            }
        }
      });
}

// ---------------------------------------------------------------------------

Tensor cross_entropy_from_logits(const Tensor& logits, std::span<const int> targets,
                                 std::span<const double> weights) {
  require_rank(logits, 2, "cross_entropy_from_logits");
  const std::size_t m = logits.dim(0), k = logits.dim(1);
  if (targets.size() != m) {
    throw DimensionError("cross_entropy_from_logits: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(m) + " rows");
  }
  if (!weights.empty() && weights.size() != m) {
    throw DimensionError("cross_entropy_from_logits: weight count differs from row count");
  }
  std::vector<double> w(m, 0.0);
  if (weights.empty()) {
    std::size_t active = 0;
    for (int t : targets) active += t != kIgnoreIndex;
    for (std::size_t i = 0; i < m; ++i)
      w[i] = (targets[i] != kIgnoreIndex && active) ? 1.0 / static_cast<double>(active) : 0.0;
  } else {
    for (std::size_t i = 0; i < m; ++i) w[i] = targets[i] != kIgnoreIndex ? weights[i] : 0.0;
  }
  auto lv = logits.data();
  std::vector<double> probs(m * k);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = lv.data() + i * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(row[j] - mx);
      z += probs[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= z;
    if (w[i] == 0.0) continue;
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= k) {
      throw ArgumentError("cross_entropy_from_logits: target " + std::to_string(t) +
                          " out of range for " + std::to_string(k) + " classes");
    }
    total += w[i] * (mx + std::log(z) - row[t]);
  }
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result({1}, {total}, "cross_entropy", {&logits},
                     [pl = logits.node(), probs = std::move(probs), w = std::move(w),
                      tg = std::move(tg), m, k](const Node& self) {
                       auto& g = pl->grad_buffer();
                       const double up = self.grad[0];
                       for (std::size_t i = 0; i < m; ++i) {
                         if (w[i] == 0.0) continue;
                         for (std::size_t j = 0; j < k; ++j) {
                           const double onehot = static_cast<int>(j) == tg[i] ? 1.0 : 0.0;
                           g[i * k + j] += up * w[i] * (probs[i * k + j] - onehot);
                         }
                       }
                     });
}

}  // namespace kmax
