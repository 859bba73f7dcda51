// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

// Row-wise kernels shared by the transformer forward and backward passes.
// Every function works on any dense row-major Eigen expression.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>

#include <Eigen/Core>

#include "forge/linalg.hpp"

namespace forge::nn {

template <class Scalar>
inline constexpr Scalar kLayerNormEps = Scalar(1e-5);

/// y = (x - mean) / sqrt(var + eps) * gain + bias, per row. Saves the
/// normalized input and reciprocal std for the backward pass.
template <class X, class G, class B, class Y, class Xhat, class Rstd>
void layer_norm(const Eigen::MatrixBase<X>& x, const Eigen::MatrixBase<G>& gain,
                const Eigen::MatrixBase<B>& bias, Eigen::MatrixBase<Y>& y,
                Eigen::MatrixBase<Xhat>& xhat, Eigen::MatrixBase<Rstd>& rstd) {
  using Scalar = typename X::Scalar;
  const Index cols = x.cols();
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.row(r).mean();
    const Scalar var = (x.row(r).array() - mean).square().sum() / Scalar(cols);
    const Scalar inv = Scalar(1) / std::sqrt(var + kLayerNormEps<Scalar>);
    rstd(r) = inv;
    xhat.row(r) = (x.row(r).array() - mean) * inv;
    y.row(r) = xhat.row(r).cwiseProduct(gain) + bias;
  }
}

/// Accumulates dgain/dbias and writes (not adds) dx.
template <class Dy, class Xhat, class Rstd, class G, class Dx, class Dg, class Db>
void layer_norm_backward(const Eigen::MatrixBase<Dy>& dy, const Eigen::MatrixBase<Xhat>& xhat,
                         const Eigen::MatrixBase<Rstd>& rstd, const Eigen::MatrixBase<G>& gain,
                         Eigen::MatrixBase<Dx>& dx, Eigen::MatrixBase<Dg>& dgain,
                         Eigen::MatrixBase<Db>& dbias) {
  using Scalar = typename Dy::Scalar;
  const Scalar inv_cols = Scalar(1) / Scalar(dy.cols());
  for (Index r = 0; r < dy.rows(); ++r) {
    dgain += dy.row(r).cwiseProduct(xhat.row(r));
    dbias += dy.row(r);
    const auto dxhat = (dy.row(r).cwiseProduct(gain)).eval();
    const Scalar mean_dxhat = dxhat.sum() * inv_cols;
    const Scalar mean_dxhat_xhat = dxhat.cwiseProduct(xhat.row(r)).sum() * inv_cols;
    dx.row(r) = rstd(r) * (dxhat.array() - mean_dxhat - xhat.row(r).array() * mean_dxhat_xhat);
  }
}

// tanh approximation
template <class Scalar>
inline Scalar gelu(Scalar u) {
  constexpr Scalar c = Scalar(0.7978845608028654);  // sqrt(2/pi)
  return Scalar(0.5) * u * (Scalar(1) + std::tanh(c * (u + Scalar(0.044715) * u * u * u)));
}

template <class Scalar>
inline Scalar gelu_grad(Scalar u) {
  constexpr Scalar c = Scalar(0.7978845608028654);
  const Scalar t = std::tanh(c * (u + Scalar(0.044715) * u * u * u));
  return Scalar(0.5) * (Scalar(1) + t) +
         Scalar(0.5) * u * (Scalar(1) - t * t) * c * (Scalar(1) + Scalar(3 * 0.044715) * u * u);
}

/// Vectorized GELU over a whole block. `t` receives the inner tanh, which the
/// backward pass reuses; tanh is taken as 1 - 2 / (1 + exp(2z)).
template <class U, class T, class G>
void gelu_forward(const Eigen::MatrixBase<U>& u, Eigen::MatrixBase<T>& t, Eigen::MatrixBase<G>& g) {
  using Scalar = typename U::Scalar;
  constexpr Scalar c = Scalar(0.7978845608028654);
  const auto ua = u.array();
  t.array() = Scalar(1) - Scalar(2) / (Scalar(1) + (Scalar(2) * c * (ua + Scalar(0.044715) * ua.cube())).exp());
  g.array() = Scalar(0.5) * ua * (Scalar(1) + t.array());
}

/// du = dg * gelu'(u), in place on `dg`.
template <class U, class T, class D>
void gelu_backward(const Eigen::MatrixBase<U>& u, const Eigen::MatrixBase<T>& t, Eigen::MatrixBase<D>& dg) {
  using Scalar = typename U::Scalar;
  constexpr Scalar c = Scalar(0.7978845608028654);
  const auto ua = u.array();
  const auto ta = t.array();
  dg.array() *= Scalar(0.5) * (Scalar(1) + ta) +
                Scalar(0.5) * ua * (Scalar(1) - ta.square()) * c * (Scalar(1) + Scalar(3 * 0.044715) * ua.square());
}

/// In-place causal softmax of a square score block: entries above the
/// diagonal become exactly zero.
template <class S>
void causal_softmax(Eigen::MatrixBase<S>& scores) {
  using Scalar = typename S::Scalar;
  for (Index i = 0; i < scores.rows(); ++i) {
    auto row = scores.row(i).head(i + 1);
    const Scalar mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
    scores.row(i).tail(scores.cols() - i - 1).setZero();
  }
}

/// Mean negative log-likelihood over rows whose target is >= 0. When `dlogits`
/// is non-null it receives d(loss)/d(logits). Returns the unmasked row count
/// through `count`.
template <class L>
typename L::Scalar masked_cross_entropy(const Eigen::MatrixBase<L>& logits,
                                        std::span<const std::int32_t> targets, Index& count,
                                        RowMatrixX<typename L::Scalar>* dlogits = nullptr) {
  using Scalar = typename L::Scalar;
  count = 0;
  for (auto t : targets) count += (t >= 0);
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  if (count == 0) return Scalar(0);
  Scalar total = 0;
  const Scalar inv_count = Scalar(1) / Scalar(count);
  for (Index r = 0; r < logits.rows(); ++r) {
    const auto t = targets[static_cast<std::size_t>(r)];
    if (t < 0) continue;
    const Scalar mx = logits.row(r).maxCoeff();
    const Scalar sum = (logits.row(r).array() - mx).exp().sum();
    const Scalar lse = mx + std::log(sum);
    total += lse - logits(r, t);
    if (dlogits) {
      dlogits->row(r) = (logits.row(r).array() - lse).exp() * inv_count;
      (*dlogits)(r, t) -= inv_count;
    }
  }
  return total * inv_count;
}

/// Index of the largest entry; ties resolve to the lowest index.
template <class V>
Index argmax(const Eigen::DenseBase<V>& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return best;
}

}  // namespace forge::nn
