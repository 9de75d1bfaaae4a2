// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0

#include "bistil/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace bistil {

namespace {

thread_local bool g_grad_mode = true;

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

void check_shape(const std::vector<int>& shape) {
  if (shape.empty() || shape.size() > 3) {
    throw DimensionError("tensor rank must be 1..3, got rank " +
                         std::to_string(shape.size()));
  }
  for (int d : shape) {
    if (d <= 0) {
      throw DimensionError("tensor dimensions must be positive, got shape " +
                           shape_string(shape));
    }
  }
}

std::shared_ptr<detail::TensorImpl> make_impl(std::vector<int> shape) {
  check_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0f);
  impl->shape = std::move(shape);
  return impl;
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

void require_defined(const Tensor& t, const char* what) {
  if (!t.defined()) throw ContractError(std::string(what) + ": undefined tensor");
}

}  // namespace

Tensor wrap_impl(std::shared_ptr<detail::TensorImpl> impl) {
  return Tensor(std::move(impl));
}

std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor handle
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto impl = make_impl(std::move(shape));
  impl->requires_grad = requires_grad && g_grad_mode;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data,
                         bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw DimensionError("from_data: shape " + shape_string(shape) + " wants " +
                         std::to_string(shape_numel(shape)) + " elements, got " +
                         std::to_string(data.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad && g_grad_mode;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const std::vector<int>& Tensor::shape() const {
  require_defined(*this, "shape");
  return impl_->shape;
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

int Tensor::dim(int axis) const {
  const auto& s = shape();
  int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("dim: axis out of range for rank " + std::to_string(r));
  }
  return s[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const {
  require_defined(*this, "numel");
  return impl_->numel();
}

std::span<float> Tensor::data() {
  require_defined(*this, "data");
  return {impl_->data.data(), impl_->data.size()};
}

std::span<const float> Tensor::data() const {
  require_defined(*this, "data");
  return {impl_->data.data(), impl_->data.size()};
}

float Tensor::at(std::int64_t flat_index) const {
  require_defined(*this, "at");
  if (flat_index < 0 || flat_index >= impl_->numel()) {
    throw DimensionError("at: index " + std::to_string(flat_index) +
                         " out of range for " + std::to_string(impl_->numel()) +
                         " elements");
  }
  return impl_->data[static_cast<std::size_t>(flat_index)];
}

bool Tensor::requires_grad() const {
  require_defined(*this, "requires_grad");
  return impl_->requires_grad;
}

void Tensor::set_requires_grad(bool value) {
  require_defined(*this, "set_requires_grad");
  impl_->requires_grad = value;
}

std::span<float> Tensor::grad() {
  require_defined(*this, "grad");
  impl_->ensure_grad();
  return {impl_->grad.data(), impl_->grad.size()};
}

bool Tensor::has_grad() const {
  require_defined(*this, "has_grad");
  return !impl_->grad.empty();
}

void Tensor::zero_grad() {
  require_defined(*this, "zero_grad");
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

float Tensor::item() const {
  require_defined(*this, "item");
  if (impl_->numel() != 1) {
    throw DimensionError("item: tensor has " + std::to_string(impl_->numel()) +
                         " elements");
  }
  return impl_->data[0];
}

Tensor Tensor::detached_clone() const {
  require_defined(*this, "detached_clone");
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

// ---------------------------------------------------------------------------
// Grad mode
// ---------------------------------------------------------------------------

bool grad_mode_enabled() { return g_grad_mode; }

NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }

// ---------------------------------------------------------------------------
// Op helpers
// ---------------------------------------------------------------------------

namespace {

bool track(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_mode) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

Tensor make_result(std::vector<int> shape, std::initializer_list<const Tensor*> inputs,
                   std::function<void(detail::TensorImpl&)> backward_fn) {
  auto impl = make_impl(std::move(shape));
  if (track(inputs)) {
    impl->requires_grad = true;
    for (const Tensor* t : inputs) impl->parents.push_back(*t);
    impl->backward_fn = std::move(backward_fn);
  }
  return wrap_impl(std::move(impl));
}

// C[m,n] += A[m,k] * B[k,n]
void mm_nn(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    float* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      float av = arow[p];
      if (av == 0.0f) continue;
      const float* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void mm_nt(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    float* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + static_cast<std::size_t>(j) * k;
      float acc = 0.0f;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
void mm_tn(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    const float* brow = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      float av = arow[p];
      if (av == 0.0f) continue;
      float* crow = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3)) {
    throw DimensionError("matmul: wants matching rank 2 or 3 operands, got " +
                         shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const bool batched = a.rank() == 3;
  const int batch = batched ? a.dim(0) : 1;
  if (batched && b.dim(0) != batch) {
    throw DimensionError("matmul: batch mismatch " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const int m = a.dim(-2);
  const int k = a.dim(-1);
  const int bk = transpose_b ? b.dim(-1) : b.dim(-2);
  const int n = transpose_b ? b.dim(-2) : b.dim(-1);
  if (bk != k) {
    throw DimensionError(std::string("matmul: inner dimension mismatch ") +
                         shape_string(a.shape()) + (transpose_b ? " x T" : " x ") +
                         shape_string(b.shape()));
  }

  std::vector<int> out_shape =
      batched ? std::vector<int>{batch, m, n} : std::vector<int>{m, n};
  Tensor aa = a, bb = b;
  Tensor out = make_result(
      out_shape, {&a, &b}, [aa, bb, transpose_b, batch, m, k, n](detail::TensorImpl& self) {
        auto* ai = aa.unsafe_impl();
        auto* bi = bb.unsafe_impl();
        const std::size_t a_stride = static_cast<std::size_t>(m) * k;
        const std::size_t b_stride = static_cast<std::size_t>(k) * n;
        const std::size_t c_stride = static_cast<std::size_t>(m) * n;
        for (int bidx = 0; bidx < batch; ++bidx) {
          const float* go = self.grad.data() + bidx * c_stride;
          if (ai->requires_grad) {
            ai->ensure_grad();
            float* ga = ai->grad.data() + bidx * a_stride;
            const float* bd = bi->data.data() + bidx * b_stride;
            // dA = dC * B^T (or dC * B when B was already transposed)
            if (transpose_b) {
              mm_nn(go, bd, ga, m, n, k);
            } else {
              mm_nt(go, bd, ga, m, n, k);
            }
          }
          if (bi->requires_grad) {
            bi->ensure_grad();
            float* gb = bi->grad.data() + bidx * b_stride;
            const float* ad = ai->data.data() + bidx * a_stride;
            // dB = A^T * dC; transposed reading flips to dB = dC^T * A.
            if (transpose_b) {
              mm_tn(go, ad, gb, m, n, k);
            } else {
              mm_tn(ad, go, gb, m, k, n);
            }
          }
        }
      });

  const float* ad = a.data().data();
  const float* bd = b.data().data();
  float* cd = out.data().data();
  const std::size_t a_stride = static_cast<std::size_t>(m) * k;
  const std::size_t b_stride = static_cast<std::size_t>(k) * n;
  const std::size_t c_stride = static_cast<std::size_t>(m) * n;
  for (int bidx = 0; bidx < batch; ++bidx) {
    if (transpose_b) {
      mm_nt(ad + bidx * a_stride, bd + bidx * b_stride, cd + bidx * c_stride, m, k, n);
    } else {
      mm_nn(ad + bidx * a_stride, bd + bidx * b_stride, cd + bidx * c_stride, m, k, n);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

namespace {

bool last_axis_broadcast(const Tensor& a, const Tensor& b) {
  return b.rank() == 1 && a.rank() > 1 && b.dim(0) == a.dim(-1);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  const bool broadcast = last_axis_broadcast(a, b);
  if (!broadcast && !same_shape(a, b)) {
    throw DimensionError("add: shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Tensor aa = a, bb = b;
  Tensor out = make_result(a.shape(), {&a, &b}, [aa, bb, broadcast](detail::TensorImpl& self) {
    auto* ai = aa.unsafe_impl();
    auto* bi = bb.unsafe_impl();
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      if (broadcast) {
        const std::size_t width = bi->data.size();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          bi->grad[i % width] += self.grad[i];
        }
      } else {
        for (std::size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i];
      }
    }
  });
  auto ad = a.data();
  auto bd = b.data();
  auto od = out.data();
  if (broadcast) {
    const std::size_t width = bd.size();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i % width];
  } else {
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  if (!same_shape(a, b)) {
    throw DimensionError("sub: shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Tensor aa = a, bb = b;
  Tensor out = make_result(a.shape(), {&a, &b}, [aa, bb](detail::TensorImpl& self) {
    auto* ai = aa.unsafe_impl();
    auto* bi = bb.unsafe_impl();
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] -= self.grad[i];
    }
  });
  auto ad = a.data();
  auto bd = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] - bd[i];
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  if (!same_shape(a, b)) {
    throw DimensionError("mul: shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Tensor aa = a, bb = b;
  Tensor out = make_result(a.shape(), {&a, &b}, [aa, bb](detail::TensorImpl& self) {
    auto* ai = aa.unsafe_impl();
    auto* bi = bb.unsafe_impl();
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        ai->grad[i] += self.grad[i] * bi->data[i];
      }
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        bi->grad[i] += self.grad[i] * ai->data[i];
      }
    }
  });
  auto ad = a.data();
  auto bd = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
  return out;
}

Tensor scale(const Tensor& a, float c) {
  require_defined(a, "scale");
  Tensor aa = a;
  Tensor out = make_result(a.shape(), {&a}, [aa, c](detail::TensorImpl& self) {
    auto* ai = aa.unsafe_impl();
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * c;
  });
  auto ad = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * c;
  return out;
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  Tensor aa = a;
  Tensor out = make_result({1}, {&a}, [aa](detail::TensorImpl& self) {
    auto* ai = aa.unsafe_impl();
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    const float g = self.grad[0];
    for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += g;
  });
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  out.data()[0] = static_cast<float>(acc);
  return out;
}

// ---------------------------------------------------------------------------
// softmax, layernorm, activations
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& a) {
  require_defined(a, "softmax");
  const int width = a.dim(-1);
  const std::int64_t rows = a.numel() / width;
  Tensor aa = a;
  Tensor out = make_result(a.shape(), {&a}, [aa, rows, width](detail::TensorImpl& self) {
    auto* ai = aa.unsafe_impl();
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    // dx = y * (dy - sum(dy * y)) per row
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* y = self.data.data() + r * width;
      const float* gy = self.grad.data() + r * width;
      float* gx = ai->grad.data() + r * width;
      double dot = 0.0;
      for (int j = 0; j < width; ++j) dot += static_cast<double>(gy[j]) * y[j];
      for (int j = 0; j < width; ++j) {
        gx[j] += y[j] * (gy[j] - static_cast<float>(dot));
      }
    }
  });
  const float* xd = a.data().data();
  float* od = out.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* row = xd + r * width;
    float* orow = od + r * width;
    float mx = row[0];
    for (int j = 1; j < width; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < width; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int j = 0; j < width; ++j) orow[j] *= inv;
  }
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  require_defined(x, "layernorm");
  require_defined(gain, "layernorm");
  require_defined(bias, "layernorm");
  const int width = x.dim(-1);
  if (gain.rank() != 1 || gain.dim(0) != width || bias.rank() != 1 ||
      bias.dim(0) != width) {
    throw DimensionError("layernorm: gain/bias must be rank-1 of size " +
                         std::to_string(width));
  }
  const std::int64_t rows = x.numel() / width;

  // Saved forward intermediates shared with the backward closure.
  auto xhat = std::make_shared<std::vector<float>>(
      static_cast<std::size_t>(rows) * width);
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows));

  Tensor xx = x, gg = gain, bb = bias;
  Tensor out = make_result(
      x.shape(), {&x, &gain, &bias},
      [xx, gg, bb, xhat, inv_std, rows, width](detail::TensorImpl& self) {
        auto* xi = xx.unsafe_impl();
        auto* gi = gg.unsafe_impl();
        auto* bi = bb.unsafe_impl();
        if (gi->requires_grad) gi->ensure_grad();
        if (bi->requires_grad) bi->ensure_grad();
        if (xi->requires_grad) xi->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          const float* gy = self.grad.data() + r * width;
          const float* xh = xhat->data() + r * width;
          if (gi->requires_grad || bi->requires_grad) {
            for (int j = 0; j < width; ++j) {
              if (gi->requires_grad) gi->grad[j] += gy[j] * xh[j];
              if (bi->requires_grad) bi->grad[j] += gy[j];
            }
          }
          if (xi->requires_grad) {
            // dxhat = dy * gain; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) / std
            double s1 = 0.0, s2 = 0.0;
            for (int j = 0; j < width; ++j) {
              const double dxh = static_cast<double>(gy[j]) * gi->data[j];
              s1 += dxh;
              s2 += dxh * xh[j];
            }
            s1 /= width;
            s2 /= width;
            float* gx = xi->grad.data() + r * width;
            const float istd = (*inv_std)[static_cast<std::size_t>(r)];
            for (int j = 0; j < width; ++j) {
              const double dxh = static_cast<double>(gy[j]) * gi->data[j];
              gx[j] += static_cast<float>((dxh - s1 - xh[j] * s2) * istd);
            }
          }
        }
      });

  const float* xd = x.data().data();
  const float* gd = gain.data().data();
  const float* bd = bias.data().data();
  float* od = out.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* row = xd + r * width;
    double mean = 0.0;
    for (int j = 0; j < width; ++j) mean += row[j];
    mean /= width;
    double var = 0.0;
    for (int j = 0; j < width; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= width;
    const float istd = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*inv_std)[static_cast<std::size_t>(r)] = istd;
    float* xh = xhat->data() + r * width;
    float* orow = od + r * width;
    for (int j = 0; j < width; ++j) {
      xh[j] = static_cast<float>((row[j] - mean) * istd);
      orow[j] = xh[j] * gd[j] + bd[j];
    }
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  Tensor xx = x;
  Tensor out = make_result(x.shape(), {&x}, [xx](detail::TensorImpl& self) {
    auto* xi = xx.unsafe_impl();
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    constexpr float inv_sqrt2 = 0.7071067811865476f;
    constexpr float inv_sqrt2pi = 0.3989422804014327f;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const float v = xi->data[i];
      const float cdf = 0.5f * (1.0f + std::erf(v * inv_sqrt2));
      const float pdf = inv_sqrt2pi * std::exp(-0.5f * v * v);
      xi->grad[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
  auto xd = x.data();
  auto od = out.data();
  constexpr float inv_sqrt2 = 0.7071067811865476f;
  for (std::size_t i = 0; i < od.size(); ++i) {
    od[i] = 0.5f * xd[i] * (1.0f + std::erf(xd[i] * inv_sqrt2));
  }
  return out;
}

Tensor tanh_act(const Tensor& x) {
  require_defined(x, "tanh_act");
  Tensor xx = x;
  Tensor out = make_result(x.shape(), {&x}, [xx](detail::TensorImpl& self) {
    auto* xi = xx.unsafe_impl();
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const float y = self.data[i];
      xi->grad[i] += self.grad[i] * (1.0f - y * y);
    }
  });
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = std::tanh(xd[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Gather ops
// ---------------------------------------------------------------------------

namespace {

Tensor gather_rows(const Tensor& table, std::span<const int> rows, const char* op_name,
                   bool ids_are_tokens) {
  require_defined(table, op_name);
  if (table.rank() != 2) {
    throw DimensionError(std::string(op_name) + ": wants a rank-2 source, got " +
                         shape_string(table.shape()));
  }
  if (rows.empty()) {
    throw DomainError(std::string(op_name) + ": empty index list");
  }
  const int n_rows = table.dim(0);
  const int width = table.dim(1);
  for (int id : rows) {
    if (id < 0 || id >= n_rows) {
      if (ids_are_tokens) {
        throw InputError(std::string(op_name) + ": token id " + std::to_string(id) +
                         " outside vocabulary of size " + std::to_string(n_rows));
      }
      throw DimensionError(std::string(op_name) + ": row " + std::to_string(id) +
                           " out of range [0," + std::to_string(n_rows) + ")");
    }
  }
  auto idx = std::make_shared<std::vector<int>>(rows.begin(), rows.end());
  Tensor tt = table;
  Tensor out = make_result(
      {static_cast<int>(rows.size()), width}, {&table},
      [tt, idx, width](detail::TensorImpl& self) {
        auto* ti = tt.unsafe_impl();
        if (!ti->requires_grad) return;
        ti->ensure_grad();
        for (std::size_t r = 0; r < idx->size(); ++r) {
          const float* g = self.grad.data() + r * width;
          float* dst = ti->grad.data() + static_cast<std::size_t>((*idx)[r]) * width;
          for (int j = 0; j < width; ++j) dst[j] += g[j];
        }
      });
  const float* src = table.data().data();
  float* dst = out.data().data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const float* srow = src + static_cast<std::size_t>(rows[r]) * width;
    std::copy(srow, srow + width, dst + r * width);
  }
  return out;
}

}  // namespace

Tensor embed_lookup(const Tensor& table, std::span<const int> ids) {
  return gather_rows(table, ids, "embed_lookup", true);
}

Tensor select_rows(const Tensor& x, std::span<const int> rows) {
  return gather_rows(x, rows, "select_rows", false);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor split_heads(const Tensor& x, int num_heads) {
  require_defined(x, "split_heads");
  if (x.rank() != 2) {
    throw DimensionError("split_heads: wants rank-2 input, got " +
                         shape_string(x.shape()));
  }
  const int l = x.dim(0);
  const int d = x.dim(1);
  if (num_heads <= 0 || d % num_heads != 0) {
    throw DimensionError("split_heads: width " + std::to_string(d) +
                         " not divisible by " + std::to_string(num_heads) + " heads");
  }
  const int dh = d / num_heads;
  Tensor xx = x;
  Tensor out = make_result({num_heads, l, dh}, {&x},
                           [xx, num_heads, l, dh, d](detail::TensorImpl& self) {
                             auto* xi = xx.unsafe_impl();
                             if (!xi->requires_grad) return;
                             xi->ensure_grad();
                             for (int h = 0; h < num_heads; ++h) {
                               for (int i = 0; i < l; ++i) {
                                 const float* g =
                                     self.grad.data() +
                                     (static_cast<std::size_t>(h) * l + i) * dh;
                                 float* dst = xi->grad.data() +
                                              static_cast<std::size_t>(i) * d + h * dh;
                                 for (int j = 0; j < dh; ++j) dst[j] += g[j];
                               }
                             }
                           });
  const float* src = x.data().data();
  float* dst = out.data().data();
  for (int h = 0; h < num_heads; ++h) {
    for (int i = 0; i < l; ++i) {
      const float* s = src + static_cast<std::size_t>(i) * d + h * dh;
      float* o = dst + (static_cast<std::size_t>(h) * l + i) * dh;
      std::copy(s, s + dh, o);
    }
  }
  return out;
}

Tensor merge_heads(const Tensor& x) {
  require_defined(x, "merge_heads");
  if (x.rank() != 3) {
    throw DimensionError("merge_heads: wants rank-3 input, got " +
                         shape_string(x.shape()));
  }
  const int h = x.dim(0);
  const int l = x.dim(1);
  const int dh = x.dim(2);
  const int d = h * dh;
  Tensor xx = x;
  Tensor out = make_result({l, d}, {&x}, [xx, h, l, dh, d](detail::TensorImpl& self) {
    auto* xi = xx.unsafe_impl();
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (int hh = 0; hh < h; ++hh) {
      for (int i = 0; i < l; ++i) {
        const float* g = self.grad.data() + static_cast<std::size_t>(i) * d + hh * dh;
        float* dst = xi->grad.data() + (static_cast<std::size_t>(hh) * l + i) * dh;
        for (int j = 0; j < dh; ++j) dst[j] += g[j];
      }
    }
  });
  const float* src = x.data().data();
  float* dst = out.data().data();
  for (int hh = 0; hh < h; ++hh) {
    for (int i = 0; i < l; ++i) {
      const float* s = src + (static_cast<std::size_t>(hh) * l + i) * dh;
      float* o = dst + static_cast<std::size_t>(i) * d + hh * dh;
      std::copy(s, s + dh, o);
    }
  }
  return out;
}

Tensor reshape(const Tensor& x, std::vector<int> new_shape) {
  require_defined(x, "reshape");
  check_shape(new_shape);
  if (shape_numel(new_shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                         shape_string(new_shape));
  }
  Tensor xx = x;
  Tensor out = make_result(std::move(new_shape), {&x}, [xx](detail::TensorImpl& self) {
    auto* xi = xx.unsafe_impl();
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += self.grad[i];
  });
  auto xd = x.data();
  auto od = out.data();
  std::copy(xd.begin(), xd.end(), od.begin());
  return out;
}

Tensor dropout(const Tensor& x, float p, Rng& rng) {
  require_defined(x, "dropout");
  if (p < 0.0f || p >= 1.0f) {
    throw DomainError("dropout: probability must be in [0,1), got " + std::to_string(p));
  }
  if (p == 0.0f) return x;
  auto mask = std::make_shared<std::vector<float>>(x.data().size());
  const float keep = 1.0f - p;
  const float inv_keep = 1.0f / keep;
  for (auto& m : *mask) m = (rng.uniform() < p) ? 0.0f : inv_keep;
  Tensor xx = x;
  Tensor out = make_result(x.shape(), {&x}, [xx, mask](detail::TensorImpl& self) {
    auto* xi = xx.unsafe_impl();
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      xi->grad[i] += self.grad[i] * (*mask)[i];
    }
  });
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * (*mask)[i];
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

namespace {

Tensor weighted_mse(const Tensor& a, const Tensor& b, const float* row_weights,
                    std::size_t n_weights) {
  if (!same_shape(a, b)) {
    throw DimensionError("mse: shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  const int width = a.dim(-1);
  const std::int64_t rows = a.numel() / width;
  std::shared_ptr<std::vector<float>> weights;
  if (row_weights != nullptr) {
    if (a.rank() < 2) {
      throw DimensionError("mse: row weights want a rank >= 2 input");
    }
    const std::int64_t expect = a.numel() / (width * a.dim(-2));
    const std::int64_t n_inner = a.dim(-2);
    if (static_cast<std::int64_t>(n_weights) != n_inner * expect &&
        static_cast<std::int64_t>(n_weights) != n_inner) {
      throw DimensionError("mse: got " + std::to_string(n_weights) +
                           " row weights for axis of size " + std::to_string(n_inner));
    }
    weights = std::make_shared<std::vector<float>>(row_weights, row_weights + n_weights);
  }

  // Per-element weight: the weight of its axis -2 row, cycled across leading
  // batches when only one row's worth of weights was given.
  auto weight_of_row = [weights](std::int64_t row_index) -> double {
    if (!weights) return 1.0;
    return (*weights)[static_cast<std::size_t>(row_index) % weights->size()];
  };

  double denom = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) denom += weight_of_row(r) * width;
  if (denom <= 0.0) {
    throw DomainError("mse: row weights sum to zero");
  }
  const double inv_denom = 1.0 / denom;

  Tensor aa = a, bb = b;
  Tensor out = make_result(
      {1}, {&a, &b}, [aa, bb, weight_of_row, width, rows, inv_denom](detail::TensorImpl& self) {
        auto* ai = aa.unsafe_impl();
        auto* bi = bb.unsafe_impl();
        const float g = self.grad[0];
        if (ai->requires_grad) ai->ensure_grad();
        if (bi->requires_grad) bi->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          const double w = weight_of_row(r) * 2.0 * inv_denom * g;
          if (w == 0.0) continue;
          for (int j = 0; j < width; ++j) {
            const std::size_t i = static_cast<std::size_t>(r) * width + j;
            const float diff = ai->data[i] - bi->data[i];
            if (ai->requires_grad) ai->grad[i] += static_cast<float>(w * diff);
            if (bi->requires_grad) bi->grad[i] -= static_cast<float>(w * diff);
          }
        }
      });
  const float* ad = a.data().data();
  const float* bd = b.data().data();
  double acc = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double w = weight_of_row(r);
    if (w == 0.0) continue;
    double row_acc = 0.0;
    for (int j = 0; j < width; ++j) {
      const std::size_t i = static_cast<std::size_t>(r) * width + j;
      const double d = static_cast<double>(ad[i]) - bd[i];
      row_acc += d * d;
    }
    acc += w * row_acc;
  }
  out.data()[0] = static_cast<float>(acc * inv_denom);
  return out;
}

}  // namespace

Tensor mse(const Tensor& a, const Tensor& b) {
  require_defined(a, "mse");
  require_defined(b, "mse");
  return weighted_mse(a, b, nullptr, 0);
}

Tensor mse(const Tensor& a, const Tensor& b, std::span<const float> row_weights) {
  require_defined(a, "mse");
  require_defined(b, "mse");
  return weighted_mse(a, b, row_weights.data(), row_weights.size());
}

namespace {

Tensor soft_ce_impl(const Tensor& student_logits, const Tensor& teacher_logits,
                    const float* row_weights, std::size_t n_weights) {
  if (student_logits.rank() != 2 || teacher_logits.rank() != 2 ||
      !same_shape(student_logits, teacher_logits)) {
    throw DimensionError("soft_cross_entropy: wants matching rank-2 logits, got " +
                         shape_string(student_logits.shape()) + " vs " +
                         shape_string(teacher_logits.shape()));
  }
  if (teacher_logits.requires_grad()) {
    throw ContractError("soft_cross_entropy: teacher logits are a target and must not "
                        "require grad");
  }
  const int rows = student_logits.dim(0);
  const int width = student_logits.dim(1);
  std::shared_ptr<std::vector<float>> weights;
  if (row_weights != nullptr) {
    if (static_cast<int>(n_weights) != rows) {
      throw DimensionError("soft_cross_entropy: got " + std::to_string(n_weights) +
                           " row weights for " + std::to_string(rows) + " rows");
    }
    weights = std::make_shared<std::vector<float>>(row_weights, row_weights + n_weights);
  }
  double denom = 0.0;
  if (weights) {
    for (float w : *weights) denom += w;
  } else {
    denom = rows;
  }
  if (denom <= 0.0) {
    throw DomainError("soft_cross_entropy: row weights sum to zero");
  }
  const double inv_denom = 1.0 / denom;

  // Softmax of both sides, saved for backward.
  auto p_student = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(rows) * width);
  auto p_teacher = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(rows) * width);
  auto softmax_into = [width](const float* row, double* out_row) {
    float mx = row[0];
    for (int j = 1; j < width; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < width; ++j) {
      out_row[j] = std::exp(static_cast<double>(row[j]) - mx);
      z += out_row[j];
    }
    for (int j = 0; j < width; ++j) out_row[j] /= z;
  };
  const float* sd = student_logits.data().data();
  const float* td = teacher_logits.data().data();
  double acc = 0.0;
  for (int r = 0; r < rows; ++r) {
    const double w = weights ? (*weights)[static_cast<std::size_t>(r)] : 1.0;
    double* ps = p_student->data() + static_cast<std::size_t>(r) * width;
    double* pt = p_teacher->data() + static_cast<std::size_t>(r) * width;
    softmax_into(sd + static_cast<std::size_t>(r) * width, ps);
    softmax_into(td + static_cast<std::size_t>(r) * width, pt);
    if (w == 0.0) continue;
    double row_ce = 0.0;
    for (int j = 0; j < width; ++j) {
      // log(ps) via the max-shifted form is already folded into ps; recompute
      // through std::log for clarity, clamped away from zero.
      row_ce -= pt[j] * std::log(std::max(ps[j], 1e-300));
    }
    acc += w * row_ce;
  }

  Tensor ss = student_logits, tt = teacher_logits;
  Tensor out = make_result(
      {1}, {&student_logits, &teacher_logits},
      [ss, p_student, p_teacher, weights, rows, width, inv_denom](detail::TensorImpl& self) {
        auto* si = ss.unsafe_impl();
        if (!si->requires_grad) return;
        si->ensure_grad();
        const float g = self.grad[0];
        for (int r = 0; r < rows; ++r) {
          const double w = weights ? (*weights)[static_cast<std::size_t>(r)] : 1.0;
          if (w == 0.0) continue;
          const double* ps = p_student->data() + static_cast<std::size_t>(r) * width;
          const double* pt = p_teacher->data() + static_cast<std::size_t>(r) * width;
          float* gs = si->grad.data() + static_cast<std::size_t>(r) * width;
          const double c = w * inv_denom * g;
          for (int j = 0; j < width; ++j) {
            gs[j] += static_cast<float>(c * (ps[j] - pt[j]));
          }
        }
      });
  out.data()[0] = static_cast<float>(acc * inv_denom);
  return out;
}

}  // namespace

Tensor soft_cross_entropy(const Tensor& student_logits, const Tensor& teacher_logits) {
  require_defined(student_logits, "soft_cross_entropy");
  require_defined(teacher_logits, "soft_cross_entropy");
  return soft_ce_impl(student_logits, teacher_logits, nullptr, 0);
}

Tensor soft_cross_entropy(const Tensor& student_logits, const Tensor& teacher_logits,
                          std::span<const float> row_weights) {
  require_defined(student_logits, "soft_cross_entropy");
  require_defined(teacher_logits, "soft_cross_entropy");
  return soft_ce_impl(student_logits, teacher_logits, row_weights.data(),
                      row_weights.size());
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, int ignore_index) {
  require_defined(logits, "cross_entropy");
  if (logits.rank() != 2) {
    throw DimensionError("cross_entropy: wants rank-2 logits, got " +
                         shape_string(logits.shape()));
  }
  const int rows = logits.dim(0);
  const int width = logits.dim(1);
  if (static_cast<int>(labels.size()) != rows) {
    throw DimensionError("cross_entropy: got " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(rows) + " rows");
  }
  int counted = 0;
  for (int label : labels) {
    if (label == ignore_index) continue;
    if (label < 0 || label >= width) {
      throw InputError("cross_entropy: label " + std::to_string(label) +
                       " outside [0," + std::to_string(width) + ")");
    }
    ++counted;
  }
  if (counted == 0) {
    throw DomainError("cross_entropy: every label is the ignore index");
  }
  const double inv_count = 1.0 / counted;

  auto probs = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(rows) * width);
  auto labels_copy = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  const float* ld = logits.data().data();
  double acc = 0.0;
  for (int r = 0; r < rows; ++r) {
    const float* row = ld + static_cast<std::size_t>(r) * width;
    double* prow = probs->data() + static_cast<std::size_t>(r) * width;
    float mx = row[0];
    for (int j = 1; j < width; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < width; ++j) {
      prow[j] = std::exp(static_cast<double>(row[j]) - mx);
      z += prow[j];
    }
    for (int j = 0; j < width; ++j) prow[j] /= z;
    const int label = (*labels_copy)[static_cast<std::size_t>(r)];
    if (label == ignore_index) continue;
    acc -= std::log(std::max(prow[label], 1e-300));
  }

  Tensor lt = logits;
  Tensor out = make_result(
      {1}, {&logits},
      [lt, probs, labels_copy, ignore_index, rows, width, inv_count](detail::TensorImpl& self) {
        auto* li = lt.unsafe_impl();
        if (!li->requires_grad) return;
        li->ensure_grad();
        const float g = self.grad[0];
        for (int r = 0; r < rows; ++r) {
          const int label = (*labels_copy)[static_cast<std::size_t>(r)];
          if (label == ignore_index) continue;
          const double* prow = probs->data() + static_cast<std::size_t>(r) * width;
          float* grow = li->grad.data() + static_cast<std::size_t>(r) * width;
          for (int j = 0; j < width; ++j) {
            double d = prow[j];
            if (j == label) d -= 1.0;
            grow[j] += static_cast<float>(d * inv_count * g);
          }
        }
      });
  out.data()[0] = static_cast<float>(acc * inv_count);
  return out;
}

// ---------------------------------------------------------------------------
// Backward sweep
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss does not require grad (no recorded tape)");
  }

  // Iterative DFS postorder: children fully processed before their parents
  // appear in `order`, so reversing gives a valid execution order.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  struct Frame {
    detail::TensorImpl* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.unsafe_impl(), 0});
  visited.insert(loss.unsafe_impl());
  while (!stack.empty()) {
    Frame& top = stack.back();
    if (top.next_parent < top.node->parents.size()) {
      detail::TensorImpl* parent =
          top.node->parents[top.next_parent].unsafe_impl();
      ++top.next_parent;
      if (parent != nullptr && parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.push_back({parent, 0});
      }
    } else {
      order.push_back(top.node);
      stack.pop_back();
    }
  }

  auto* root = loss.unsafe_impl();
  root->ensure_grad();
  root->grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* node = *it;
    if (node->backward_fn && !node->grad.empty()) {
      node->backward_fn(*node);
    }
  }
}

}  // namespace bistil
