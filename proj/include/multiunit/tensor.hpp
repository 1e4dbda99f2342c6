// Copyright 2026 The multiunit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "multiunit/base.hpp"
#include "multiunit/rng.hpp"

namespace multiunit {

// ===========================================================================
// Reverse-mode autodiff over dense float64 tensors.
//
// Each op builds a node that remembers its parents and a closure that maps
// the node's upstream gradient into parent gradients. backward() on a scalar
// topologically sorts the graph and runs the closures in reverse. All math
// is double precision; determinism holds because every op iterates in fixed
// order and nothing is threaded within a graph.
// ===========================================================================

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

namespace detail {
// Scoped switch: ops record graph edges only while enabled. Decode/score
// paths disable it to skip closure allocation.
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor : public std::enable_shared_from_this<Tensor> {
 public:
  std::vector<std::size_t> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // allocated lazily, same length as data

  // Graph edges; backward_fn reads this->grad and accumulates into parents.
  std::vector<TensorPtr> parents;
  std::function<void(Tensor&)> backward_fn;

  static TensorPtr create(std::vector<std::size_t> shape, bool requires_grad = false) {
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data.assign(t->count(), 0.0);
    t->requires_grad = requires_grad;
    return t;
  }

  static TensorPtr from_values(std::vector<std::size_t> shape, std::vector<double> values,
                               bool requires_grad = false) {
    auto t = create(std::move(shape), requires_grad);
    if (values.size() != t->count())
      throw DimensionError("from_values: data size does not match shape");
    t->data = std::move(values);
    return t;
  }

  static TensorPtr scalar(double v, bool requires_grad = false) {
    return from_values({1}, {v}, requires_grad);
  }

  std::size_t count() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }

  std::size_t rank() const { return shape.size(); }

  std::size_t rows() const {
    if (shape.size() != 2) throw DimensionError("rows(): tensor is not 2-D");
    return shape[0];
  }
  std::size_t cols() const {
    if (shape.size() != 2) throw DimensionError("cols(): tensor is not 2-D");
    return shape[1];
  }

  double at2(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }
  double& at2(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }

  double item() const {
    if (count() != 1) throw DimensionError("item(): tensor is not a scalar");
    return data[0];
  }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }

  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  }

  // Reverse-mode sweep from a scalar root with seed gradient 1.
  void backward() {
    if (count() != 1) throw StateError("backward() requires a scalar root");
    if (!requires_grad) throw StateError("backward() on a node that does not require grad");

    // Iterative post-order DFS over parents.
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    struct Frame {
      Tensor* node;
      std::size_t next_parent;
    };
    std::vector<Frame> stack{{this, 0}};
    visited.insert(this);
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        Tensor* p = f.node->parents[f.next_parent++].get();
        if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }

    for (Tensor* t : order) t->ensure_grad();
    grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
  }
};

namespace detail {

inline TensorPtr make_node(std::vector<std::size_t> shape, std::vector<TensorPtr> parents) {
  bool rg = false;
  if (grad_enabled_flag()) {
    for (const auto& p : parents) rg = rg || p->requires_grad;
  }
  auto t = Tensor::create(std::move(shape), rg);
  if (rg) t->parents = std::move(parents);
  return t;
}

inline void check_finite_inputs(const Tensor& t, const char* op) {
  for (double v : t.data) {
    if (!std::isfinite(v)) throw InputError(std::string(op) + ": non-finite input value");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops.
// ---------------------------------------------------------------------------

// C[p x r] = A[p x q] * B[q x r]
inline TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
  if (a->rank() != 2 || b->rank() != 2) throw DimensionError("matmul: operands must be 2-D");
  const std::size_t p = a->shape[0], q = a->shape[1], r = b->shape[1];
  if (b->shape[0] != q)
    throw DimensionError("matmul: inner dimensions differ (" + std::to_string(q) + " vs " +
                         std::to_string(b->shape[0]) + ")");
  auto c = detail::make_node({p, r}, {a, b});
  const double* ad = a->data.data();
  const double* bd = b->data.data();
  double* cd = c->data.data();
  for (std::size_t i = 0; i < p; ++i) {
    double* crow = cd + i * r;
    for (std::size_t k = 0; k < q; ++k) {
      const double aik = ad[i * q + k];
      if (aik == 0.0) continue;
      const double* brow = bd + k * r;
      for (std::size_t j = 0; j < r; ++j) crow[j] += aik * brow[j];
    }
  }
  if (c->requires_grad) {
    c->backward_fn = [p, q, r](Tensor& self) {
      const auto& a = self.parents[0];
      const auto& b = self.parents[1];
      const double* gd = self.grad.data();
      if (a->requires_grad) {
        a->ensure_grad();
        double* gad = a->grad.data();
        const double* bd = b->data.data();
        for (std::size_t i = 0; i < p; ++i) {
          const double* grow = gd + i * r;
          for (std::size_t k = 0; k < q; ++k) {
            const double* brow = bd + k * r;
            double acc = 0.0;
            for (std::size_t j = 0; j < r; ++j) acc += grow[j] * brow[j];
            gad[i * q + k] += acc;
          }
        }
      }
      if (b->requires_grad) {
        b->ensure_grad();
        double* gbd = b->grad.data();
        const double* ad = a->data.data();
        for (std::size_t i = 0; i < p; ++i) {
          const double* grow = gd + i * r;
          for (std::size_t k = 0; k < q; ++k) {
            const double aik = ad[i * q + k];
            if (aik == 0.0) continue;
            double* gbrow = gbd + k * r;
            for (std::size_t j = 0; j < r; ++j) gbrow[j] += aik * grow[j];
          }
        }
      }
    };
  }
  return c;
}

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape) throw DimensionError("add: shapes differ");
  auto c = detail::make_node(a->shape, {a, b});
  for (std::size_t i = 0; i < c->data.size(); ++i) c->data[i] = a->data[i] + b->data[i];
  if (c->requires_grad) {
    c->backward_fn = [](Tensor& self) {
      for (const auto& p : self.parents) {
        if (!p->requires_grad) continue;
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
      }
    };
  }
  return c;
}

// out[i, j] = a[i, j] + v[j]
inline TensorPtr add_rowvec(const TensorPtr& a, const TensorPtr& v) {
  if (a->rank() != 2 || v->rank() != 1 || v->shape[0] != a->shape[1])
    throw DimensionError("add_rowvec: expected [p x q] and [q]");
  const std::size_t p = a->shape[0], q = a->shape[1];
  auto c = detail::make_node({p, q}, {a, v});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) c->data[i * q + j] = a->data[i * q + j] + v->data[j];
  if (c->requires_grad) {
    c->backward_fn = [p, q](Tensor& self) {
      const auto& a = self.parents[0];
      const auto& v = self.parents[1];
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
      }
      if (v->requires_grad) {
        v->ensure_grad();
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < q; ++j) v->grad[j] += self.grad[i * q + j];
      }
    };
  }
  return c;
}

inline TensorPtr scale(const TensorPtr& a, double s) {
  auto c = detail::make_node(a->shape, {a});
  for (std::size_t i = 0; i < c->data.size(); ++i) c->data[i] = a->data[i] * s;
  if (c->requires_grad) {
    c->backward_fn = [s](Tensor& self) {
      const auto& a = self.parents[0];
      a->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += s * self.grad[i];
    };
  }
  return c;
}

// max(0, x); the subgradient at exactly 0 is taken as 0.
inline TensorPtr relu(const TensorPtr& a) {
  auto c = detail::make_node(a->shape, {a});
  for (std::size_t i = 0; i < c->data.size(); ++i) c->data[i] = a->data[i] > 0.0 ? a->data[i] : 0.0;
  if (c->requires_grad) {
    c->backward_fn = [](Tensor& self) {
      const auto& a = self.parents[0];
      a->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (a->data[i] > 0.0) a->grad[i] += self.grad[i];
    };
  }
  return c;
}

inline TensorPtr sum_all(const TensorPtr& a) {
  auto c = detail::make_node({1}, {a});
  c->data[0] = std::accumulate(a->data.begin(), a->data.end(), 0.0);
  if (c->requires_grad) {
    c->backward_fn = [](Tensor& self) {
      const auto& a = self.parents[0];
      a->ensure_grad();
      for (double& g : a->grad) g += self.grad[0];
    };
  }
  return c;
}

// Row-wise log-softmax over the last axis. Input must be finite.
inline TensorPtr log_softmax(const TensorPtr& a) {
  if (a->rank() < 1) throw DimensionError("log_softmax: rank >= 1 required");
  detail::check_finite_inputs(*a, "log_softmax");
  const std::size_t k = a->shape.back();
  if (k == 0) throw DimensionError("log_softmax: empty last axis");
  const std::size_t rows = a->count() / k;
  auto c = detail::make_node(a->shape, {a});
  for (std::size_t i = 0; i < rows; ++i) {
    const double* x = a->data.data() + i * k;
    double* y = c->data.data() + i * k;
    double m = x[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(x[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) y[j] = x[j] - lse;
  }
  if (c->requires_grad) {
    c->backward_fn = [rows, k](Tensor& self) {
      const auto& a = self.parents[0];
      a->ensure_grad();
      for (std::size_t i = 0; i < rows; ++i) {
        const double* y = self.data.data() + i * k;
        const double* gy = self.grad.data() + i * k;
        double* gx = a->grad.data() + i * k;
        double gsum = 0.0;
        for (std::size_t j = 0; j < k; ++j) gsum += gy[j];
        for (std::size_t j = 0; j < k; ++j) gx[j] += gy[j] - std::exp(y[j]) * gsum;
      }
    };
  }
  return c;
}

// Row-wise layer normalization with learned gain and bias: n >= 2 per row.
inline TensorPtr layer_norm(const TensorPtr& a, const TensorPtr& gain, const TensorPtr& bias,
                            double eps = 1e-5) {
  if (a->rank() < 1) throw DimensionError("layer_norm: rank >= 1 required");
  const std::size_t n = a->shape.back();
  if (n < 2) throw InputError("layer_norm: last axis must have n >= 2");
  if (gain->count() != n || bias->count() != n)
    throw DimensionError("layer_norm: gain/bias must have length n");
  const std::size_t rows = a->count() / n;
  auto c = detail::make_node(a->shape, {a, gain, bias});
  for (std::size_t i = 0; i < rows; ++i) {
    const double* x = a->data.data() + i * n;
    double* y = c->data.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j)
      y[j] = gain->data[j] * (x[j] - mu) * inv + bias->data[j];
  }
  if (c->requires_grad) {
    c->backward_fn = [rows, n, eps](Tensor& self) {
      const auto& a = self.parents[0];
      const auto& gain = self.parents[1];
      const auto& bias = self.parents[2];
      if (a->requires_grad) a->ensure_grad();
      if (gain->requires_grad) gain->ensure_grad();
      if (bias->requires_grad) bias->ensure_grad();
      const double dn = static_cast<double>(n);
      std::vector<double> xhat(n), dxhat(n);
      for (std::size_t i = 0; i < rows; ++i) {
        const double* x = a->data.data() + i * n;
        const double* gy = self.grad.data() + i * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += x[j];
        mu /= dn;
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= dn;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) xhat[j] = (x[j] - mu) * inv;
        if (gain->requires_grad)
          for (std::size_t j = 0; j < n; ++j) gain->grad[j] += gy[j] * xhat[j];
        if (bias->requires_grad)
          for (std::size_t j = 0; j < n; ++j) bias->grad[j] += gy[j];
        if (a->requires_grad) {
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            dxhat[j] = gy[j] * gain->data[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
          }
          double* gx = a->grad.data() + i * n;
          for (std::size_t j = 0; j < n; ++j)
            gx[j] += inv * (dxhat[j] - sum_dxhat / dn - xhat[j] * sum_dxhat_xhat / dn);
        }
      }
    };
  }
  return c;
}

// Strided 1-D convolution over time (valid padding):
//   out[t, j] = sum_{i. c} x[t*stride + i, c] * kernel[i, c, j]
// x is [T x n_in], kernel is [k x n_in x n_out]; T must be >= k.
inline TensorPtr conv1d_time(const TensorPtr& x, const TensorPtr& kernel, std::size_t stride) {
  if (x->rank() != 2 || kernel->rank() != 3)
    throw DimensionError("conv1d_time: expected x[T x n] and kernel[k x n x n']");
  if (stride == 0) throw InputError("conv1d_time: stride must be >= 1");
  const std::size_t T = x->shape[0], nin = x->shape[1];
  const std::size_t k = kernel->shape[0], nout = kernel->shape[2];
  if (kernel->shape[1] != nin) throw DimensionError("conv1d_time: kernel input width mismatch");
  if (T < k)
    throw InputError("conv1d_time: input has " + std::to_string(T) +
                     " frames, shorter than kernel span " + std::to_string(k));
  const std::size_t Tout = (T - k) / stride + 1;
  auto c = detail::make_node({Tout, nout}, {x, kernel});
  for (std::size_t t = 0; t < Tout; ++t) {
    double* out = c->data.data() + t * nout;
    for (std::size_t i = 0; i < k; ++i) {
      const double* xrow = x->data.data() + (t * stride + i) * nin;
      const double* krow = kernel->data.data() + i * nin * nout;
      for (std::size_t ch = 0; ch < nin; ++ch) {
        const double xv = xrow[ch];
        if (xv == 0.0) continue;
        const double* kk = krow + ch * nout;
        for (std::size_t j = 0; j < nout; ++j) out[j] += xv * kk[j];
      }
    }
  }
  if (c->requires_grad) {
    c->backward_fn = [Tout, nin, nout, k, stride](Tensor& self) {
      const auto& x = self.parents[0];
      const auto& kernel = self.parents[1];
      if (x->requires_grad) x->ensure_grad();
      if (kernel->requires_grad) kernel->ensure_grad();
      for (std::size_t t = 0; t < Tout; ++t) {
        const double* gout = self.grad.data() + t * nout;
        for (std::size_t i = 0; i < k; ++i) {
          const std::size_t xr = (t * stride + i) * nin;
          if (x->requires_grad) {
            for (std::size_t ch = 0; ch < nin; ++ch) {
              const double* kk = kernel->data.data() + (i * nin + ch) * nout;
              double acc = 0.0;
              for (std::size_t j = 0; j < nout; ++j) acc += gout[j] * kk[j];
              x->grad[xr + ch] += acc;
            }
          }
          if (kernel->requires_grad) {
            for (std::size_t ch = 0; ch < nin; ++ch) {
              const double xv = x->data[xr + ch];
              if (xv == 0.0) continue;
              double* gk = kernel->grad.data() + (i * nin + ch) * nout;
              for (std::size_t j = 0; j < nout; ++j) gk[j] += xv * gout[j];
            }
          }
        }
      }
    };
  }
  return c;
}

enum class AttentionMask { none, causal };

// Scaled dot-product attention for one head:
//   out = softmax(q k^T / sqrt(d) + mask) v
// q is [Tq x d], k and v are [Tk x d]. The causal mask requires Tq == Tk and
// lets position i attend to positions <= i. Fused forward/backward keeps the
// graph small; the row softmax is safe under -inf masking because every
// causal row includes its own diagonal.
inline TensorPtr attention(const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                           AttentionMask mask = AttentionMask::none) {
  if (q->rank() != 2 || k->rank() != 2 || v->rank() != 2)
    throw DimensionError("attention: q, k, v must be 2-D");
  const std::size_t Tq = q->shape[0], d = q->shape[1], Tk = k->shape[0];
  if (k->shape[1] != d || v->shape[0] != Tk || v->shape[1] != d)
    throw DimensionError("attention: q[Tq x d], k[Tk x d], v[Tk x d] required");
  if (mask == AttentionMask::causal && Tq != Tk)
    throw DimensionError("attention: causal mask requires Tq == Tk");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  // A[Tq x Tk] = softmax rows of scaled scores.
  std::vector<double> attn(Tq * Tk, 0.0);
  for (std::size_t i = 0; i < Tq; ++i) {
    const std::size_t limit = mask == AttentionMask::causal ? i + 1 : Tk;
    double* arow = attn.data() + i * Tk;
    double m = kNegInf;
    for (std::size_t j = 0; j < limit; ++j) {
      double s = 0.0;
      const double* qrow = q->data.data() + i * d;
      const double* krow = k->data.data() + j * d;
      for (std::size_t c = 0; c < d; ++c) s += qrow[c] * krow[c];
      arow[j] = s * inv_sqrt_d;
      m = std::max(m, arow[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < limit; ++j) {
      arow[j] = std::exp(arow[j] - m);
      z += arow[j];
    }
    for (std::size_t j = 0; j < limit; ++j) arow[j] /= z;
    // masked tail stays exactly 0
  }

  auto out = detail::make_node({Tq, d}, {q, k, v});
  for (std::size_t i = 0; i < Tq; ++i) {
    double* orow = out->data.data() + i * d;
    const double* arow = attn.data() + i * Tk;
    for (std::size_t j = 0; j < Tk; ++j) {
      const double aij = arow[j];
      if (aij == 0.0) continue;
      const double* vrow = v->data.data() + j * d;
      for (std::size_t c = 0; c < d; ++c) orow[c] += aij * vrow[c];
    }
  }

  if (out->requires_grad) {
    out->backward_fn = [attn = std::move(attn), Tq, Tk, d, inv_sqrt_d](Tensor& self) {
      const auto& q = self.parents[0];
      const auto& k = self.parents[1];
      const auto& v = self.parents[2];
      if (q->requires_grad) q->ensure_grad();
      if (k->requires_grad) k->ensure_grad();
      if (v->requires_grad) v->ensure_grad();

      // dV = A^T dOut
      if (v->requires_grad) {
        for (std::size_t i = 0; i < Tq; ++i) {
          const double* arow = attn.data() + i * Tk;
          const double* grow = self.grad.data() + i * d;
          for (std::size_t j = 0; j < Tk; ++j) {
            const double aij = arow[j];
            if (aij == 0.0) continue;
            double* gv = v->grad.data() + j * d;
            for (std::size_t c = 0; c < d; ++c) gv[c] += aij * grow[c];
          }
        }
      }
      if (!q->requires_grad && !k->requires_grad) return;

      // dA = dOut V^T, then dS = A o (dA - rowsum(dA o A)),
      // dQ = dS K / sqrt(d), dK = dS^T Q / sqrt(d).
      std::vector<double> ds(Tk);
      for (std::size_t i = 0; i < Tq; ++i) {
        const double* arow = attn.data() + i * Tk;
        const double* grow = self.grad.data() + i * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < Tk; ++j) {
          if (arow[j] == 0.0) {
            ds[j] = 0.0;
            continue;
          }
          double da = 0.0;
          const double* vrow = v->data.data() + j * d;
          for (std::size_t c = 0; c < d; ++c) da += grow[c] * vrow[c];
          ds[j] = da;
          dot += arow[j] * da;
        }
        for (std::size_t j = 0; j < Tk; ++j) ds[j] = arow[j] * (ds[j] - dot) * inv_sqrt_d;
        if (q->requires_grad) {
          double* gq = q->grad.data() + i * d;
          for (std::size_t j = 0; j < Tk; ++j) {
            if (ds[j] == 0.0) continue;
            const double* krow = k->data.data() + j * d;
            for (std::size_t c = 0; c < d; ++c) gq[c] += ds[j] * krow[c];
          }
        }
        if (k->requires_grad) {
          const double* qrow = q->data.data() + i * d;
          for (std::size_t j = 0; j < Tk; ++j) {
            if (ds[j] == 0.0) continue;
            double* gk = k->grad.data() + j * d;
            for (std::size_t c = 0; c < d; ++c) gk[c] += ds[j] * qrow[c];
          }
        }
      }
    };
  }
  return out;
}

// out[u, :] = table[ids[u], :]
inline TensorPtr embedding(const TensorPtr& table, const TokenSequence& ids) {
  if (table->rank() != 2) throw DimensionError("embedding: table must be [V x n]");
  const std::size_t V = table->shape[0], n = table->shape[1];
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= V)
      throw InputError("embedding: id " + std::to_string(id) + " outside table of size " +
                       std::to_string(V));
  auto c = detail::make_node({ids.size(), n}, {table});
  for (std::size_t u = 0; u < ids.size(); ++u)
    std::copy_n(table->data.data() + static_cast<std::size_t>(ids[u]) * n, n,
                c->data.data() + u * n);
  if (c->requires_grad) {
    c->backward_fn = [ids, n](Tensor& self) {
      const auto& table = self.parents[0];
      table->ensure_grad();
      for (std::size_t u = 0; u < ids.size(); ++u) {
        double* g = table->grad.data() + static_cast<std::size_t>(ids[u]) * n;
        const double* gy = self.grad.data() + u * n;
        for (std::size_t c2 = 0; c2 < n; ++c2) g[c2] += gy[c2];
      }
    };
  }
  return c;
}

// Scalar sum_t x[t, ids[t]]; with x = log-probs this is a sequence log-likelihood.
inline TensorPtr pick_logsum(const TensorPtr& x, const TokenSequence& ids) {
  if (x->rank() != 2) throw DimensionError("pick_logsum: x must be 2-D");
  if (ids.size() != x->shape[0])
    throw DimensionError("pick_logsum: ids length must equal the number of rows");
  const std::size_t k = x->shape[1];
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= k)
      throw InputError("pick_logsum: id " + std::to_string(id) + " outside row width " +
                       std::to_string(k));
  auto c = detail::make_node({1}, {x});
  double s = 0.0;
  for (std::size_t t = 0; t < ids.size(); ++t) s += x->at2(t, static_cast<std::size_t>(ids[t]));
  c->data[0] = s;
  if (c->requires_grad) {
    c->backward_fn = [ids, k](Tensor& self) {
      const auto& x = self.parents[0];
      x->ensure_grad();
      for (std::size_t t = 0; t < ids.size(); ++t)
        x->grad[t * k + static_cast<std::size_t>(ids[t])] += self.grad[0];
    };
  }
  return c;
}

// Copy of columns [start, start + len) of a 2-D tensor.
inline TensorPtr narrow_cols(const TensorPtr& a, std::size_t start, std::size_t len) {
  if (a->rank() != 2) throw DimensionError("narrow_cols: 2-D input required");
  const std::size_t rows = a->shape[0], cols = a->shape[1];
  if (start + len > cols) throw DimensionError("narrow_cols: slice out of range");
  auto c = detail::make_node({rows, len}, {a});
  for (std::size_t i = 0; i < rows; ++i)
    std::copy_n(a->data.data() + i * cols + start, len, c->data.data() + i * len);
  if (c->requires_grad) {
    c->backward_fn = [rows, cols, start, len](Tensor& self) {
      const auto& a = self.parents[0];
      a->ensure_grad();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < len; ++j)
          a->grad[i * cols + start + j] += self.grad[i * len + j];
    };
  }
  return c;
}

// Concatenate 2-D tensors with equal row counts along columns.
inline TensorPtr concat_cols(const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw InputError("concat_cols: no inputs");
  const std::size_t rows = parts[0]->shape[0];
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p->rank() != 2 || p->shape[0] != rows)
      throw DimensionError("concat_cols: all parts must be 2-D with equal row count");
    total += p->shape[1];
  }
  auto c = detail::make_node({rows, total}, parts);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p->shape[1];
    for (std::size_t i = 0; i < rows; ++i)
      std::copy_n(p->data.data() + i * w, w, c->data.data() + i * total + off);
    off += w;
  }
  if (c->requires_grad) {
    c->backward_fn = [rows, total](Tensor& self) {
      std::size_t off = 0;
      for (const auto& p : self.parents) {
        const std::size_t w = p->shape[1];
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < w; ++j)
              p->grad[i * w + j] += self.grad[i * total + off + j];
        }
        off += w;
      }
    };
  }
  return c;
}

// ---------------------------------------------------------------------------
// Parameter initialization.
// ---------------------------------------------------------------------------

// Weight init: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) from the given stream.
inline TensorPtr init_uniform_fanin(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
  if (fan_in == 0) throw InputError("init_uniform_fanin: fan_in must be positive");
  auto t = Tensor::create(std::move(shape), /*requires_grad=*/true);
  const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t->data) v = rng.uniform(-a, a);
  return t;
}

// ---------------------------------------------------------------------------
// Optimizer: SGD with momentum, and Adam.
// ---------------------------------------------------------------------------

enum class OptimizerKind { sgd_momentum, adam };

class Optimizer {
 public:
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double momentum = 0.9;      // sgd_momentum only
  double beta1 = 0.9;         // adam
  double beta2 = 0.999;       // adam
  double epsilon = 1e-8;      // adam

  Optimizer() = default;
  Optimizer(OptimizerKind k, double lr) : kind(k), learning_rate(lr) {}

  long long step_count() const { return steps_; }

  // One update over the given parameters. Gradients are read, never modified;
  // the caller zeroes them between steps.
  void step(const std::vector<TensorPtr>& params) {
    for (const auto& p : params) {
      if (!p->requires_grad || p->grad.size() != p->data.size())
        throw StateError("optimizer step: parameter missing its gradient");
    }
    ++steps_;
    if (kind == OptimizerKind::sgd_momentum) {
      for (const auto& p : params) {
        auto& vel = slot(m1_, p.get());
        for (std::size_t i = 0; i < p->data.size(); ++i) {
          vel[i] = momentum * vel[i] + p->grad[i];
          p->data[i] -= learning_rate * vel[i];
        }
      }
    } else {
      const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps_));
      const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps_));
      for (const auto& p : params) {
        auto& m = slot(m1_, p.get());
        auto& v = slot(m2_, p.get());
        for (std::size_t i = 0; i < p->data.size(); ++i) {
          const double g = p->grad[i];
          m[i] = beta1 * m[i] + (1.0 - beta1) * g;
          v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
          const double mhat = m[i] / bc1;
          const double vhat = v[i] / bc2;
          p->data[i] -= learning_rate * mhat / (std::sqrt(vhat) + epsilon);
        }
      }
    }
  }

 private:
  std::vector<double>& slot(std::map<const Tensor*, std::vector<double>>& state, const Tensor* t) {
    auto [it, inserted] = state.try_emplace(t);
    if (inserted) it->second.assign(t->data.size(), 0.0);
    return it->second;
  }

  std::map<const Tensor*, std::vector<double>> m1_, m2_;
  long long steps_ = 0;
};

}  // namespace multiunit
