#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rsir/common.hpp"
#include "rsir/random.hpp"

namespace rsir {

template <class T>
class Tensor;

namespace detail {

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until backward touches this node
  bool requires_grad = false;

  // Tape. Set on op results while any input participates in the tape;
  // cleared by backward().
  std::vector<Tensor<T>> parents;
  std::function<void(TensorImpl&)> backprop;

  TensorImpl(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    memtrack::on_alloc(static_cast<std::int64_t>(data.size() * sizeof(T)));
  }
  ~TensorImpl() {
    memtrack::on_free(static_cast<std::int64_t>(data.size() * sizeof(T)));
  }
  TensorImpl(const TensorImpl&) = delete;
  TensorImpl& operator=(const TensorImpl&) = delete;

  bool needs_grad() const { return requires_grad || static_cast<bool>(backprop); }

  void accumulate(const T* g, std::int64_t n) {
    if (grad.empty()) grad.assign(data.size(), T(0));
    for (std::int64_t i = 0; i < n; ++i) grad[static_cast<std::size_t>(i)] += g[i];
  }
};

}  // namespace detail

// Dense row-major tensor handle with optional tape participation. Copies
// share the underlying buffer; ops allocate fresh outputs.
template <class T>
class Tensor {
 public:
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    auto n = numel(shape);
    return Tensor(std::make_shared<Impl>(std::move(shape),
                                         std::vector<T>(static_cast<std::size_t>(n), T(0))));
  }

  static Tensor full(Shape shape, T value) {
    auto n = numel(shape);
    return Tensor(std::make_shared<Impl>(std::move(shape),
                                         std::vector<T>(static_cast<std::size_t>(n), value)));
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (numel(shape) != static_cast<std::int64_t>(values.size()))
      throw ShapeError("tensor: " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    return Tensor(std::make_shared<Impl>(std::move(shape), std::move(values)));
  }

  static Tensor scalar(T value) { return from({1}, {value}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(impl_->shape.size()); }
  std::int64_t dim(std::int64_t i) const {
    if (i < 0) i += ndim();
    return impl_->shape[static_cast<std::size_t>(i)];
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::vector<T>& values() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  T item() const {
    if (numel() != 1) throw ValueError("item: tensor has " + std::to_string(numel()) + " elements");
    return impl_->data[0];
  }

  bool attached() const { return impl_ && impl_->needs_grad(); }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  // Values copied out of the tape; never receives gradient.
  Tensor detach() const {
    return Tensor(std::make_shared<Impl>(impl_->shape, impl_->data));
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::vector<T>& grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
  }
  const std::vector<T>& grad() const {
    if (impl_->grad.empty())
      throw ValueError("grad: no gradient recorded for this tensor");
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  Impl* impl() const { return impl_.get(); }
  const std::shared_ptr<Impl>& impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<Impl> impl_;

  template <class U>
  friend void attach_node(Tensor<U>& out, std::vector<Tensor<U>> parents,
                          std::function<void(detail::TensorImpl<U>&)> fn);
};

template <class T>
void attach_node(Tensor<T>& out, std::vector<Tensor<T>> parents,
                 std::function<void(detail::TensorImpl<T>&)> fn) {
  bool any = false;
  for (const auto& p : parents)
    if (p.attached()) any = true;
  if (!any) return;
  out.impl()->parents = std::move(parents);
  out.impl()->backprop = std::move(fn);
}

// ---------------------------------------------------------------------------
// raw kernels

namespace detail {

// C[m,n] (+)= A[m,k] * B[k,n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  macs::add(m * k * n);
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::int64_t l = 0; l < k; ++l) {
      const T av = a[i * k + l];
      const T* brow = b + l * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] (+)= A[m,n] * B[k,n]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::int64_t m, std::int64_t n, std::int64_t k) {
  macs::add(m * n * k);
  for (std::int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    for (std::int64_t l = 0; l < k; ++l) {
      const T* brow = b + l * n;
      T acc = T(0);
      for (std::int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      c[i * k + l] += acc;
    }
  }
}

// C[k,n] (+)= A[m,k]^T * B[m,n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  macs::add(m * k * n);
  for (std::int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::int64_t l = 0; l < k; ++l) {
      const T av = arow[l];
      T* crow = c + l * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void lane_extents(const Shape& shape, std::int64_t axis, std::int64_t& outer,
                         std::int64_t& n, std::int64_t& inner) {
  outer = 1;
  inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  n = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i)
    inner *= shape[i];
}

inline std::int64_t normalize_axis(std::int64_t axis, std::int64_t ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(ndim));
  return axis;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  auto out = Tensor<T>::zeros(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  attach_node<T>(out, {a, b}, [a, b](detail::TensorImpl<T>& self) mutable {
    const auto n = static_cast<std::int64_t>(self.grad.size());
    if (a.attached()) a.impl()->accumulate(self.grad.data(), n);
    if (b.attached()) b.impl()->accumulate(self.grad.data(), n);
  });
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  auto out = Tensor<T>::zeros(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  attach_node<T>(out, {a, b}, [a, b](detail::TensorImpl<T>& self) mutable {
    const auto n = self.grad.size();
    std::vector<T> tmp(n);
    if (a.attached()) {
      const auto& bv2 = b.values();
      for (std::size_t i = 0; i < n; ++i) tmp[i] = self.grad[i] * bv2[i];
      a.impl()->accumulate(tmp.data(), static_cast<std::int64_t>(n));
    }
    if (b.attached()) {
      const auto& av2 = a.values();
      for (std::size_t i = 0; i < n; ++i) tmp[i] = self.grad[i] * av2[i];
      b.impl()->accumulate(tmp.data(), static_cast<std::int64_t>(n));
    }
  });
  return out;
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  auto out = Tensor<T>::zeros(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
  attach_node<T>(out, {a}, [a, s](detail::TensorImpl<T>& self) mutable {
    std::vector<T> tmp(self.grad.size());
    for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = self.grad[i] * s;
    a.impl()->accumulate(tmp.data(), static_cast<std::int64_t>(tmp.size()));
  });
  return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  auto out = Tensor<T>::zeros(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + s;
  attach_node<T>(out, {a}, [a](detail::TensorImpl<T>& self) mutable {
    a.impl()->accumulate(self.grad.data(), static_cast<std::int64_t>(self.grad.size()));
  });
  return out;
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, T s) { return mul_scalar(a, s); }

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))). The erf form keeps
// finite-difference checks clean.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  auto out = Tensor<T>::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const double v = static_cast<double>(xv[i]);
    ov[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  attach_node<T>(out, {x}, [x](detail::TensorImpl<T>& self) mutable {
    const auto& xv2 = x.values();
    std::vector<T> tmp(self.grad.size());
    for (std::size_t i = 0; i < tmp.size(); ++i) {
      const double v = static_cast<double>(xv2[i]);
      const double d = 0.5 * (1.0 + std::erf(v * inv_sqrt2)) +
                       v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      tmp[i] = self.grad[i] * static_cast<T>(d);
    }
    x.impl()->accumulate(tmp.data(), static_cast<std::int64_t>(tmp.size()));
  });
  return out;
}

// ---------------------------------------------------------------------------
// matmul / linear

// a: [..., m, k] x b: [..., k, n] -> [..., m, n]. Leading batch extents must
// match exactly, or b may be rank-2 and is then shared across the batch.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(as) +
                     " and " + shape_str(bs));
  const std::int64_t m = as[as.size() - 2];
  const std::int64_t k = as[as.size() - 1];
  const std::int64_t kb = bs[bs.size() - 2];
  const std::int64_t n = bs[bs.size() - 1];
  const bool shared_b = bs.size() == 2;
  Shape batch(as.begin(), as.end() - 2);
  if (k != kb || (!shared_b && Shape(bs.begin(), bs.end() - 2) != batch))
    throw ShapeError("matmul: shape mismatch " + shape_str(as) + " x " + shape_str(bs));

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  auto out = Tensor<T>::zeros(out_shape);
  const std::int64_t nb = numel(batch);
  {
    const T* ap = a.values().data();
    const T* bp = b.values().data();
    T* op = out.values().data();
    for (std::int64_t i = 0; i < nb; ++i)
      detail::gemm_nn(ap + i * m * k, shared_b ? bp : bp + i * k * n, op + i * m * n, m, k, n);
  }
  attach_node<T>(out, {a, b}, [a, b, m, k, n, nb, shared_b](detail::TensorImpl<T>& self) mutable {
    const T* gp = self.grad.data();
    if (a.attached()) {
      std::vector<T> da(a.values().size(), T(0));
      const T* bp = b.values().data();
      for (std::int64_t i = 0; i < nb; ++i)
        detail::gemm_nt(gp + i * m * n, shared_b ? bp : bp + i * k * n, da.data() + i * m * k,
                        m, n, k);
      a.impl()->accumulate(da.data(), static_cast<std::int64_t>(da.size()));
    }
    if (b.attached()) {
      std::vector<T> db(b.values().size(), T(0));
      const T* ap = a.values().data();
      for (std::int64_t i = 0; i < nb; ++i)
        detail::gemm_tn(ap + i * m * k, gp + i * m * n,
                        shared_b ? db.data() : db.data() + i * k * n, m, k, n);
      b.impl()->accumulate(db.data(), static_cast<std::int64_t>(db.size()));
    }
  });
  return out;
}

// x: [..., in] * w: [in, out] (+ bias[out]) -> [..., out]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws.size() != 2)
    throw ShapeError("linear: weight must be rank-2, got " + shape_str(ws));
  const std::int64_t in = xs.back();
  if (in != ws[0])
    throw ShapeError("linear: shape mismatch " + shape_str(xs) + " x " + shape_str(ws));
  const std::int64_t out_dim = ws[1];
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != out_dim))
    throw ShapeError("linear: bias shape " + shape_str(bias.shape()) + " does not match out=" +
                     std::to_string(out_dim));
  const std::int64_t rows = x.numel() / in;

  Shape out_shape(xs.begin(), xs.end() - 1);
  out_shape.push_back(out_dim);
  auto out = Tensor<T>::zeros(out_shape);
  detail::gemm_nn(x.values().data(), w.values().data(), out.values().data(), rows, in, out_dim);
  if (bias.defined()) {
    T* op = out.values().data();
    const T* bp = bias.values().data();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < out_dim; ++j) op[r * out_dim + j] += bp[j];
  }
  std::vector<Tensor<T>> parents = {x, w};
  if (bias.defined()) parents.push_back(bias);
  attach_node<T>(out, std::move(parents),
                 [x, w, bias, rows, in, out_dim](detail::TensorImpl<T>& self) mutable {
    const T* gp = self.grad.data();
    if (x.attached()) {
      std::vector<T> dx(x.values().size(), T(0));
      detail::gemm_nt(gp, w.values().data(), dx.data(), rows, out_dim, in);
      x.impl()->accumulate(dx.data(), static_cast<std::int64_t>(dx.size()));
    }
    if (w.attached()) {
      std::vector<T> dw(w.values().size(), T(0));
      detail::gemm_tn(x.values().data(), gp, dw.data(), rows, in, out_dim);
      w.impl()->accumulate(dw.data(), static_cast<std::int64_t>(dw.size()));
    }
    if (bias.defined() && bias.attached()) {
      std::vector<T> db(static_cast<std::size_t>(out_dim), T(0));
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < out_dim; ++j) db[static_cast<std::size_t>(j)] += gp[r * out_dim + j];
      bias.impl()->accumulate(db.data(), out_dim);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// normalization / activation over lanes

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::int64_t axis) {
  const std::int64_t ax = detail::normalize_axis(axis, x.ndim());
  std::int64_t outer, n, inner;
  detail::lane_extents(x.shape(), ax, outer, n, inner);
  auto out = Tensor<T>::zeros(x.shape());
  const T* xp = x.values().data();
  T* op = out.values().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * n * inner + i;
      T mx = xp[base];
      for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, xp[base + j * inner]);
      T sum = T(0);
      for (std::int64_t j = 0; j < n; ++j) {
        const T e = std::exp(xp[base + j * inner] - mx);
        op[base + j * inner] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (std::int64_t j = 0; j < n; ++j) op[base + j * inner] *= inv;
    }
  }
  attach_node<T>(out, {x}, [x, out, outer, n, inner](detail::TensorImpl<T>& self) mutable {
    const T* yp = out.values().data();
    const T* gp = self.grad.data();
    std::vector<T> dx(self.grad.size());
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * n * inner + i;
        T dot = T(0);
        for (std::int64_t j = 0; j < n; ++j) dot += gp[base + j * inner] * yp[base + j * inner];
        for (std::int64_t j = 0; j < n; ++j) {
          const std::int64_t p = base + j * inner;
          dx[static_cast<std::size_t>(p)] = yp[p] * (gp[p] - dot);
        }
      }
    }
    x.impl()->accumulate(dx.data(), static_cast<std::int64_t>(dx.size()));
  });
  return out;
}

// Normalizes over the last (channel) axis, then applies the affine pair.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  const std::int64_t c = x.dim(-1);
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError("layer_norm: affine shape " + shape_str(gamma.shape()) +
                     " does not match channels " + std::to_string(c));
  const std::int64_t rows = x.numel() / c;

  auto out = Tensor<T>::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.values().size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  const T* xp = x.values().data();
  const T* gp = gamma.values().data();
  const T* bp = beta.values().data();
  T* op = out.values().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xp + r * c;
    T mean = T(0);
    for (std::int64_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<T>(c);
    T var = T(0);
    for (std::int64_t j = 0; j < c; ++j) {
      const T d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T istd = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(r)] = istd;
    for (std::int64_t j = 0; j < c; ++j) {
      const T h = (row[j] - mean) * istd;
      (*xhat)[static_cast<std::size_t>(r * c + j)] = h;
      op[r * c + j] = h * gp[j] + bp[j];
    }
  }
  attach_node<T>(out, {x, gamma, beta},
                 [x, gamma, beta, xhat, inv_std, rows, c](detail::TensorImpl<T>& self) mutable {
    const T* gy = self.grad.data();
    const T* gm = gamma.values().data();
    if (gamma.attached()) {
      std::vector<T> dg(static_cast<std::size_t>(c), T(0));
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < c; ++j)
          dg[static_cast<std::size_t>(j)] += gy[r * c + j] * (*xhat)[static_cast<std::size_t>(r * c + j)];
      gamma.impl()->accumulate(dg.data(), c);
    }
    if (beta.attached()) {
      std::vector<T> db(static_cast<std::size_t>(c), T(0));
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < c; ++j) db[static_cast<std::size_t>(j)] += gy[r * c + j];
      beta.impl()->accumulate(db.data(), c);
    }
    if (x.attached()) {
      std::vector<T> dx(x.values().size());
      for (std::int64_t r = 0; r < rows; ++r) {
        T mean_dh = T(0), mean_dh_h = T(0);
        for (std::int64_t j = 0; j < c; ++j) {
          const T dh = gy[r * c + j] * gm[j];
          const T h = (*xhat)[static_cast<std::size_t>(r * c + j)];
          mean_dh += dh;
          mean_dh_h += dh * h;
        }
        mean_dh /= static_cast<T>(c);
        mean_dh_h /= static_cast<T>(c);
        const T istd = (*inv_std)[static_cast<std::size_t>(r)];
        for (std::int64_t j = 0; j < c; ++j) {
          const T dh = gy[r * c + j] * gm[j];
          const T h = (*xhat)[static_cast<std::size_t>(r * c + j)];
          dx[static_cast<std::size_t>(r * c + j)] = istd * (dh - mean_dh - h * mean_dh_h);
        }
      }
      x.impl()->accumulate(dx.data(), static_cast<std::int64_t>(dx.size()));
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// reductions

template <class T>
Tensor<T> mean(const Tensor<T>& x, std::int64_t axis) {
  const std::int64_t ax = detail::normalize_axis(axis, x.ndim());
  std::int64_t outer, n, inner;
  detail::lane_extents(x.shape(), ax, outer, n, inner);
  Shape out_shape;
  for (std::int64_t i = 0; i < x.ndim(); ++i)
    if (i != ax) out_shape.push_back(x.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);
  auto out = Tensor<T>::zeros(out_shape);
  const T* xp = x.values().data();
  T* op = out.values().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      T s = T(0);
      for (std::int64_t j = 0; j < n; ++j) s += xp[o * n * inner + j * inner + i];
      op[o * inner + i] = s / static_cast<T>(n);
    }
  attach_node<T>(out, {x}, [x, outer, n, inner](detail::TensorImpl<T>& self) mutable {
    std::vector<T> dx(x.values().size());
    const T inv = T(1) / static_cast<T>(n);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        const T g = self.grad[static_cast<std::size_t>(o * inner + i)] * inv;
        for (std::int64_t j = 0; j < n; ++j)
          dx[static_cast<std::size_t>(o * n * inner + j * inner + i)] = g;
      }
    x.impl()->accumulate(dx.data(), static_cast<std::int64_t>(dx.size()));
  });
  return out;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T s = T(0);
  for (const T v : x.values()) s += v;
  auto out = Tensor<T>::scalar(s);
  attach_node<T>(out, {x}, [x](detail::TensorImpl<T>& self) mutable {
    std::vector<T> dx(x.values().size(), self.grad[0]);
    x.impl()->accumulate(dx.data(), static_cast<std::int64_t>(dx.size()));
  });
  return out;
}

// ---------------------------------------------------------------------------
// layout

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (numel(new_shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                     " changes element count");
  auto out = Tensor<T>::from(std::move(new_shape), x.values());
  attach_node<T>(out, {x}, [x](detail::TensorImpl<T>& self) mutable {
    x.impl()->accumulate(self.grad.data(), static_cast<std::int64_t>(self.grad.size()));
  });
  return out;
}

namespace detail {

template <class T>
std::vector<T> permute_copy(const std::vector<T>& data, const Shape& shape,
                            const std::vector<std::int64_t>& perm, Shape& out_shape) {
  const auto nd = shape.size();
  out_shape.resize(nd);
  for (std::size_t i = 0; i < nd; ++i) out_shape[i] = shape[static_cast<std::size_t>(perm[i])];
  std::vector<std::int64_t> in_strides(nd, 1), out_strides(nd, 1);
  for (std::size_t i = nd - 1; i > 0; --i)
    in_strides[i - 1] = in_strides[i] * shape[i];
  for (std::size_t i = nd - 1; i > 0; --i)
    out_strides[i - 1] = out_strides[i] * out_shape[i];
  std::vector<T> out(data.size());
  const std::int64_t total = static_cast<std::int64_t>(data.size());
  std::vector<std::int64_t> idx(nd, 0);
  for (std::int64_t lin = 0; lin < total; ++lin) {
    std::int64_t src = 0;
    for (std::size_t i = 0; i < nd; ++i) src += idx[i] * in_strides[static_cast<std::size_t>(perm[i])];
    out[static_cast<std::size_t>(lin)] = data[static_cast<std::size_t>(src)];
    for (std::size_t i = nd; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> transpose(const Tensor<T>& x, std::vector<std::int64_t> perm) {
  const auto nd = static_cast<std::size_t>(x.ndim());
  if (perm.size() != nd)
    throw ShapeError("transpose: permutation rank " + std::to_string(perm.size()) +
                     " does not match tensor rank " + std::to_string(nd));
  std::vector<bool> seen(nd, false);
  for (auto p : perm) {
    if (p < 0 || p >= static_cast<std::int64_t>(nd) || seen[static_cast<std::size_t>(p)])
      throw ShapeError("transpose: invalid permutation");
    seen[static_cast<std::size_t>(p)] = true;
  }
  Shape out_shape;
  auto data = detail::permute_copy(x.values(), x.shape(), perm, out_shape);
  auto out = Tensor<T>::from(out_shape, std::move(data));
  attach_node<T>(out, {x}, [x, perm, out_shape](detail::TensorImpl<T>& self) mutable {
    std::vector<std::int64_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<std::int64_t>(i);
    Shape back;
    auto dg = detail::permute_copy(self.grad, out_shape, inv, back);
    x.impl()->accumulate(dg.data(), static_cast<std::int64_t>(dg.size()));
  });
  return out;
}

template <class T>
Tensor<T> narrow(const Tensor<T>& x, std::int64_t axis, std::int64_t start, std::int64_t len) {
  const std::int64_t ax = detail::normalize_axis(axis, x.ndim());
  const std::int64_t n = x.dim(ax);
  if (start < 0 || len < 1 || start + len > n)
    throw ShapeError("narrow: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") exceeds axis extent " + std::to_string(n));
  std::int64_t outer, axis_n, inner;
  detail::lane_extents(x.shape(), ax, outer, axis_n, inner);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(ax)] = len;
  auto out = Tensor<T>::zeros(out_shape);
  const T* xp = x.values().data();
  T* op = out.values().data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::memcpy(op + o * len * inner, xp + (o * axis_n + start) * inner,
                static_cast<std::size_t>(len * inner) * sizeof(T));
  attach_node<T>(out, {x}, [x, outer, axis_n, inner, start, len](detail::TensorImpl<T>& self) mutable {
    std::vector<T> dx(x.values().size(), T(0));
    const T* gp = self.grad.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      T* dst = dx.data() + (o * axis_n + start) * inner;
      const T* src = gp + o * len * inner;
      for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
    }
    x.impl()->accumulate(dx.data(), static_cast<std::int64_t>(dx.size()));
  });
  return out;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::int64_t axis) {
  if (xs.empty()) throw ValueError("concat: no inputs");
  const std::int64_t ax = detail::normalize_axis(axis, xs[0].ndim());
  Shape out_shape = xs[0].shape();
  std::int64_t total_axis = 0;
  for (const auto& x : xs) {
    Shape s = x.shape();
    s[static_cast<std::size_t>(ax)] = 0;
    Shape ref = out_shape;
    ref[static_cast<std::size_t>(ax)] = 0;
    if (s != ref)
      throw ShapeError("concat: incompatible shapes " + shape_str(out_shape) + " vs " +
                       shape_str(x.shape()));
    total_axis += x.dim(ax);
  }
  out_shape[static_cast<std::size_t>(ax)] = total_axis;
  auto out = Tensor<T>::zeros(out_shape);
  std::int64_t outer, n_out, inner;
  detail::lane_extents(out_shape, ax, outer, n_out, inner);
  T* op = out.values().data();
  std::int64_t off = 0;
  for (const auto& x : xs) {
    const std::int64_t nx = x.dim(ax);
    const T* xp = x.values().data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::memcpy(op + (o * n_out + off) * inner, xp + o * nx * inner,
                  static_cast<std::size_t>(nx * inner) * sizeof(T));
    off += nx;
  }
  attach_node<T>(out, xs, [xs, ax, outer, n_out, inner](detail::TensorImpl<T>& self) mutable {
    const T* gp = self.grad.data();
    std::int64_t off2 = 0;
    for (auto& x : xs) {
      const std::int64_t nx = x.dim(ax);
      if (x.attached()) {
        std::vector<T> dx(x.values().size());
        for (std::int64_t o = 0; o < outer; ++o)
          std::memcpy(dx.data() + o * nx * inner, gp + (o * n_out + off2) * inner,
                      static_cast<std::size_t>(nx * inner) * sizeof(T));
        x.impl()->accumulate(dx.data(), static_cast<std::int64_t>(dx.size()));
      }
      off2 += nx;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// gather

// out[b, j, :] = x[b, index[b, j], :]. The backward pass scatters gradient
// additively into the source rows, so duplicate indices accumulate.
template <class T>
Tensor<T> gather(const Tensor<T>& x, const IndexMat& index) {
  if (x.ndim() != 3)
    throw ShapeError("gather: expected rank-3 input, got " + shape_str(x.shape()));
  const std::int64_t b = x.dim(0), l = x.dim(1), c = x.dim(2);
  if (index.rows != b)
    throw ShapeError("gather: index rows " + std::to_string(index.rows) +
                     " do not match batch " + std::to_string(b));
  const std::int64_t j = index.cols;
  for (std::int64_t r = 0; r < b; ++r)
    for (std::int64_t q = 0; q < j; ++q) {
      const std::int64_t v = index.at(r, q);
      if (v < 0 || v >= l)
        throw IndexError("gather: index " + std::to_string(v) + " at (" + std::to_string(r) +
                         ", " + std::to_string(q) + ") out of range [0, " + std::to_string(l) + ")");
    }
  auto out = Tensor<T>::zeros({b, j, c});
  const T* xp = x.values().data();
  T* op = out.values().data();
  for (std::int64_t r = 0; r < b; ++r)
    for (std::int64_t q = 0; q < j; ++q)
      std::memcpy(op + (r * j + q) * c, xp + (r * l + index.at(r, q)) * c,
                  static_cast<std::size_t>(c) * sizeof(T));
  attach_node<T>(out, {x}, [x, index, b, l, c, j](detail::TensorImpl<T>& self) mutable {
    std::vector<T> dx(x.values().size(), T(0));
    const T* gp = self.grad.data();
    for (std::int64_t r = 0; r < b; ++r)
      for (std::int64_t q = 0; q < j; ++q) {
        T* dst = dx.data() + (r * l + index.at(r, q)) * c;
        const T* src = gp + (r * j + q) * c;
        for (std::int64_t i = 0; i < c; ++i) dst[i] += src[i];
      }
    x.impl()->accumulate(dx.data(), static_cast<std::int64_t>(dx.size()));
  });
  return out;
}

// ---------------------------------------------------------------------------
// loss

// Mean cross entropy over the batch with a stable log-sum-exp.
template <class T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, const std::vector<std::int64_t>& labels) {
  if (logits.ndim() != 2)
    throw ShapeError("cross_entropy: expected [batch, classes], got " + shape_str(logits.shape()));
  const std::int64_t b = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != b)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(b));
  for (auto y : labels)
    if (y < 0 || y >= k) throw IndexError("cross_entropy: label " + std::to_string(y) + " out of range");

  auto probs = std::make_shared<std::vector<T>>(logits.values());
  const T* xp = logits.values().data();
  T loss = T(0);
  for (std::int64_t r = 0; r < b; ++r) {
    T mx = xp[r * k];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, xp[r * k + j]);
    T sum = T(0);
    for (std::int64_t j = 0; j < k; ++j) {
      const T e = std::exp(xp[r * k + j] - mx);
      (*probs)[static_cast<std::size_t>(r * k + j)] = e;
      sum += e;
    }
    const T inv = T(1) / sum;
    for (std::int64_t j = 0; j < k; ++j) (*probs)[static_cast<std::size_t>(r * k + j)] *= inv;
    loss += std::log(sum) + mx - xp[r * k + labels[static_cast<std::size_t>(r)]];
  }
  loss /= static_cast<T>(b);
  auto out = Tensor<T>::scalar(loss);
  attach_node<T>(out, {logits}, [logits, probs, labels, b, k](detail::TensorImpl<T>& self) mutable {
    const T g = self.grad[0] / static_cast<T>(b);
    std::vector<T> dx(logits.values().size());
    for (std::int64_t r = 0; r < b; ++r)
      for (std::int64_t j = 0; j < k; ++j) {
        T p = (*probs)[static_cast<std::size_t>(r * k + j)];
        if (j == labels[static_cast<std::size_t>(r)]) p -= T(1);
        dx[static_cast<std::size_t>(r * k + j)] = g * p;
      }
    logits.impl()->accumulate(dx.data(), static_cast<std::int64_t>(dx.size()));
  });
  return out;
}

// ---------------------------------------------------------------------------
// backward

// Reverse topological traversal from a scalar loss. Gradients accumulate
// additively into every tape participant; the tape is released afterward, so
// a second backward over the same graph raises.
template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw ValueError("backward: undefined tensor");
  if (loss.numel() != 1)
    throw ValueError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  if (!loss.attached())
    throw ValueError("backward: loss is not attached to a gradient tape");

  using Impl = detail::TensorImpl<T>;
  std::vector<Impl*> order;
  std::unordered_set<Impl*> seen;
  struct Frame {
    Impl* node;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.impl(), 0});
  seen.insert(loss.impl());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      Impl* p = f.node->parents[f.next++].impl();
      if (p && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  loss.impl()->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
  for (Impl* n : order) {
    n->backprop = nullptr;
    n->parents.clear();
    if (!n->requires_grad) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---------------------------------------------------------------------------
// parameters

template <class T>
struct Parameter {
  Tensor<T> value;
  std::string name;

  Parameter() = default;
  explicit Parameter(Tensor<T> v) : value(std::move(v)) { value.set_requires_grad(true); }

  static Parameter zeros(Shape shape) { return Parameter(Tensor<T>::zeros(std::move(shape))); }
  static Parameter ones(Shape shape) { return Parameter(Tensor<T>::full(std::move(shape), T(1))); }
  static Parameter trunc_normal(Shape shape, double stddev, RngState& rng) {
    auto n = numel(shape);
    std::vector<T> v(static_cast<std::size_t>(n));
    for (auto& e : v) e = static_cast<T>(rng.next_trunc_normal(stddev));
    return Parameter(Tensor<T>::from(std::move(shape), std::move(v)));
  }
};

// Flat, ordered view over a model's parameters. Names must be unique; the
// registration order defines the checkpoint and optimizer-slot order.
template <class T>
class ParamRegistry {
 public:
  void add(Parameter<T>& p, std::string name) {
    if (!names_.insert(name).second)
      throw ValueError("duplicate parameter name: " + name);
    p.name = std::move(name);
    params_.push_back(&p);
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::int64_t scalar_count() const {
    std::int64_t n = 0;
    for (const auto* p : params_) n += p->value.numel();
    return n;
  }

  void zero_grads() {
    for (auto* p : params_) p->value.zero_grad();
  }

 private:
  std::vector<Parameter<T>*> params_;
  std::unordered_set<std::string> names_;
};

}  // namespace rsir
