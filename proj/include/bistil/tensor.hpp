// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense fp32 tensors with reverse-mode automatic differentiation on a dynamic
// tape. Storage is row-major; softmax, layernorm and the loss reductions
// operate over the last axis. Rank is 1..3; batched matmul pairs rank-3
// operands over a shared leading dimension.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bistil/errors.hpp"
#include "bistil/rng.hpp"

namespace bistil {

namespace detail {
struct TensorImpl;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const;
  int rank() const;
  /// Axis may be negative (Python-style).
  int dim(int axis) const;
  std::int64_t numel() const;

  std::span<float> data();
  std::span<const float> data() const;
  float at(std::int64_t flat_index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  /// Gradient buffer; allocated zero-filled on first access.
  std::span<float> grad();
  bool has_grad() const;
  void zero_grad();

  /// Value of a one-element tensor.
  float item() const;

  /// Deep copy of the data, detached from any tape.
  Tensor detached_clone() const;

  detail::TensorImpl* unsafe_impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
  friend struct detail::TensorImpl;
  friend Tensor wrap_impl(std::shared_ptr<detail::TensorImpl>);
};

namespace detail {
struct TensorImpl {
  std::vector<int> shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until touched
  bool requires_grad = false;
  std::vector<Tensor> parents;
  std::function<void(TensorImpl&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
};
}  // namespace detail

// --------------------------------------------------------------------------
// Tape recording control. Thread-local so parallel no-grad evaluation cannot
// interfere with a recording training thread.
// --------------------------------------------------------------------------

bool grad_mode_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// --------------------------------------------------------------------------
// Operations. Every op validates shapes, computes the forward value, and,
// when recording, registers a backward closure on the output node.
// --------------------------------------------------------------------------

/// 2-D [m,k]x[k,n] or batched 3-D [B,m,k]x[B,k,n]; transpose_b reads the
/// second operand as its transpose ([n,k] resp. [B,n,k]).
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

/// Elementwise sum; b may also be rank-1 of size a.dim(-1), broadcast over
/// all leading axes (bias add, additive attention mask).
Tensor add(const Tensor& a, const Tensor& b);

Tensor sub(const Tensor& a, const Tensor& b);

/// Elementwise product of same-shape tensors.
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, float c);

/// Full reduction to a scalar.
Tensor sum(const Tensor& a);

/// Softmax over the last axis; rows are max-shifted before exponentiation.
Tensor softmax(const Tensor& a);

/// Layer normalization over the last axis with learned gain and bias.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 float eps = 1e-12f);

/// Exact (erf-based) GELU.
Tensor gelu(const Tensor& x);

Tensor tanh_act(const Tensor& x);

/// Row gather from an embedding table [V,d] -> [n,d].
Tensor embed_lookup(const Tensor& table, std::span<const int> ids);

/// Row gather from a rank-2 tensor; backward scatter-adds.
Tensor select_rows(const Tensor& x, std::span<const int> rows);

/// [l,d] -> [h,l,d/h] head split (and its inverse).
Tensor split_heads(const Tensor& x, int num_heads);
Tensor merge_heads(const Tensor& x);

/// Shape change preserving row-major element order.
Tensor reshape(const Tensor& x, std::vector<int> new_shape);

/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, float p, Rng& rng);

/// Mean squared error over all elements -> scalar.
Tensor mse(const Tensor& a, const Tensor& b);

/// MSE with per-row weights over axis -2 (padding exclusion). The mean runs
/// over weight * row-element count.
Tensor mse(const Tensor& a, const Tensor& b, std::span<const float> row_weights);

/// -sum softmax(teacher) * log softmax(student), averaged over rows of the
/// rank-2 logit matrices. The teacher side is a target and must not require
/// grad.
Tensor soft_cross_entropy(const Tensor& student_logits, const Tensor& teacher_logits);
Tensor soft_cross_entropy(const Tensor& student_logits, const Tensor& teacher_logits,
                          std::span<const float> row_weights);

constexpr int kIgnoreLabel = -100;

/// Hard-label cross entropy over rank-2 logits, mean over rows whose label
/// is not kIgnoreLabel.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                     int ignore_index = kIgnoreLabel);

/// Reverse-mode sweep from a scalar loss. Accumulates into .grad of every
/// reachable node; repeated calls without zero_grad add up.
void backward(const Tensor& loss);

std::string shape_string(const std::vector<int>& shape);

}  // namespace bistil
