#pragma once

// Token classification loss of the decoder heads with its gradient, written
// once over a generic scalar so it runs on doubles for training and on Dual
// numbers for the Hessian-vector products of the ANIL outer gradient.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "entmeta/corpus.hpp"
#include "entmeta/decoder.hpp"
#include "entmeta/dual.hpp"
#include "entmeta/error.hpp"

namespace entmeta {

namespace detail {

template <class T>
T softplus(const T& x) {
  using std::exp;
  using std::log1p;
  if (value_of(x) > 0.0) return x + log1p(exp(-x));
  return log1p(exp(x));
}

template <class T>
T sigmoid(const T& x) {
  using std::exp;
  if (value_of(x) >= 0.0) return T(1.0) / (T(1.0) + exp(-x));
  const T e = exp(x);
  return e / (T(1.0) + e);
}

/// Stable softmax of `logits` into `probs`; returns log-sum-exp.
template <class T>
T softmax(std::span<const T> logits, std::span<T> probs) {
  using std::exp;
  using std::log;
  double shift = value_of(logits[0]);
  for (const auto& a : logits) shift = std::max(shift, value_of(a));
  T total(0.0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = exp(logits[i] - T(shift));
    total += probs[i];
  }
  for (auto& p : probs) p /= total;
  return T(shift) + log(total);
}

}  // namespace detail

/// Mean loss over the `labels.size()` tokens whose features are the rows of
/// `features` (row-major, dim columns). Labels are kOutside or 0..n_way-1;
/// masked tokens must be filtered out by the caller.
///
/// The gradient of the mean loss is added into `grad_params` (layout of
/// DecoderParams) and written into `grad_features` (same shape as features).
template <class T>
T head_loss(HeadKind kind, const DecoderLayout& layout, std::span<const T> params,
            std::span<const T> features, std::span<const Label> labels, std::size_t n_way,
            std::span<T> grad_params, std::span<T> grad_features) {
  const std::size_t dim = layout.dim;
  const std::size_t n = labels.size();
  if (n_way == 0 || n_way > layout.max_way) throw Error(Errc::shape_mismatch, "n_way exceeds decoder capacity");
  if (features.size() != n * dim || grad_features.size() != n * dim || params.size() != layout.size() ||
      grad_params.size() != layout.size()) {
    throw Error(Errc::shape_mismatch, "head_loss operand sizes disagree");
  }
  if (n == 0) return T(0.0);
  const T scale(1.0 / static_cast<double>(n));

  const std::size_t n_logits = kind == HeadKind::plain ? n_way + 1 : n_way;
  std::vector<T> logits(n_logits), probs(n_logits), d_logits(n_logits);
  // column index of logit i inside the plain head
  auto plain_col = [&](std::size_t i) { return i < n_way ? i : layout.max_way; };

  T loss(0.0);
  for (std::size_t t = 0; t < n; ++t) {
    const T* h = features.data() + t * dim;
    T* gh = grad_features.data() + t * dim;
    std::fill(gh, gh + dim, T(0.0));
    const Label y = labels[t];
    if (y != kOutside && (y < 0 || static_cast<std::size_t>(y) >= n_way)) {
      throw Error(Errc::shape_mismatch, "label outside the task's classes");
    }

    if (kind == HeadKind::hierarchical) {
      T z = params[layout.binary_bias()];
      for (std::size_t k = 0; k < dim; ++k) z += params[layout.binary_weight() + k] * h[k];
      T dz(0.0);
      if (y == kOutside) {
        loss += detail::softplus(-z);
        dz = detail::sigmoid(z) - T(1.0);
      } else {
        for (std::size_t e = 0; e < n_way; ++e) {
          T a = params[layout.entity_bias(e)];
          for (std::size_t k = 0; k < dim; ++k) a += params[layout.entity_weight(e) + k] * h[k];
          logits[e] = a;
        }
        const T lse = detail::softmax<T>(logits, probs);
        loss += detail::softplus(z) + lse - logits[static_cast<std::size_t>(y)];
        dz = detail::sigmoid(z);
        for (std::size_t e = 0; e < n_way; ++e) {
          const T da = (probs[e] - T(e == static_cast<std::size_t>(y) ? 1.0 : 0.0)) * scale;
          grad_params[layout.entity_bias(e)] += da;
          for (std::size_t k = 0; k < dim; ++k) {
            grad_params[layout.entity_weight(e) + k] += da * h[k];
            gh[k] += da * params[layout.entity_weight(e) + k];
          }
        }
      }
      dz *= scale;
      grad_params[layout.binary_bias()] += dz;
      for (std::size_t k = 0; k < dim; ++k) {
        grad_params[layout.binary_weight() + k] += dz * h[k];
        gh[k] += dz * params[layout.binary_weight() + k];
      }
    } else {
      for (std::size_t i = 0; i < n_logits; ++i) {
        const std::size_t c = plain_col(i);
        T a = params[layout.plain_bias(c)];
        for (std::size_t k = 0; k < dim; ++k) a += params[layout.plain_weight(c) + k] * h[k];
        logits[i] = a;
      }
      const std::size_t target = y == kOutside ? n_way : static_cast<std::size_t>(y);
      const T lse = detail::softmax<T>(logits, probs);
      loss += lse - logits[target];
      for (std::size_t i = 0; i < n_logits; ++i) {
        const std::size_t c = plain_col(i);
        const T da = (probs[i] - T(i == target ? 1.0 : 0.0)) * scale;
        grad_params[layout.plain_bias(c)] += da;
        for (std::size_t k = 0; k < dim; ++k) {
          grad_params[layout.plain_weight(c) + k] += da * h[k];
          gh[k] += da * params[layout.plain_weight(c) + k];
        }
      }
    }
  }
  return loss * scale;
}

}  // namespace entmeta
