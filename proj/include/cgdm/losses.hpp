#pragma once

// Scalar training losses. Every cross-entropy goes through log_softmax.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cgdm/domain.hpp"
#include "cgdm/errors.hpp"
#include "cgdm/nn.hpp"
#include "cgdm/tensor.hpp"

namespace cgdm {

namespace detail {

// b x K matrix with coef[i] at (i, labels[i]) and zero elsewhere.
inline Tensor label_coefficients(std::size_t k, std::span<const int> labels, std::span<const double> coef) {
  const std::size_t b = labels.size();
  std::vector<double> out(b * k, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ContractError("label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
    }
    out[i * k + static_cast<std::size_t>(y)] = coef[i];
  }
  return Tensor(Shape{b, k}, std::move(out));
}

// Adds a constant that lifts rounding noise below zero back to exactly 0.
inline Tensor clamp_rounding_below_zero(const Tensor& loss) {
  const double v = loss.item();
  return v < 0.0 ? add(loss, Tensor::scalar(-v)) : loss;
}

}  // namespace detail

// mean_i  w_i * ( -log_softmax(logits)[i, labels[i]] )
inline Tensor weighted_cross_entropy(const Tensor& logits, std::span<const int> labels,
                                     std::span<const double> weights) {
  if (logits.rank() != 2) throw DimensionError("cross entropy expects b x K logits");
  const std::size_t b = logits.shape()[0];
  if (labels.size() != b || weights.size() != b) {
    throw ContractError("cross entropy: " + std::to_string(b) + " rows but " + std::to_string(labels.size()) +
                        " labels and " + std::to_string(weights.size()) + " weights");
  }
  if (b == 0) throw ContractError("cross entropy of an empty batch");
  std::vector<double> coef(b);
  for (std::size_t i = 0; i < b; ++i) coef[i] = weights[i] / static_cast<double>(b);
  Tensor picks = detail::label_coefficients(logits.shape()[1], labels, coef);
  return neg(sum(mul(log_softmax(logits), picks)));
}

inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::vector<double> ones(labels.size(), 1.0);
  return weighted_cross_entropy(logits, labels, ones);
}

inline Tensor weighted_cross_entropy(const Tensor& logits, const PseudoLabelSet& pseudo) {
  if (logits.rank() != 2 || pseudo.size() != logits.shape()[0]) {
    throw ContractError("weighted cross entropy: pseudo labels do not cover every batch row");
  }
  const std::vector<int> labels = pseudo.labels();
  const std::vector<double> weights = pseudo.weights();
  return weighted_cross_entropy(logits, labels, weights);
}

// (CE through F1 + CE through F2) / 2 on a labeled batch.
inline Tensor source_classification_loss(const Mlp& generator, const Mlp& classifier1, const Mlp& classifier2,
                                         const DomainBatch& batch) {
  if (!batch.labeled()) throw ContractError("source classification loss needs a labeled batch");
  Tensor features = forward(generator, batch.features);
  Tensor ce1 = cross_entropy(forward(classifier1, features), *batch.labels);
  Tensor ce2 = cross_entropy(forward(classifier2, features), *batch.labels);
  return scale(add(ce1, ce2), 0.5);
}

// Shannon entropy in nats, with 0 log 0 = 0.
inline double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

inline void require_distribution(std::span<const double> probs) {
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw ContractError("probability vector has a negative or NaN entry");
    total += p;
  }
  if (std::fabs(total - 1.0) > 1e-8) throw ContractError("probability vector does not sum to 1");
}

// 1 + exp(-H(probs)), in (1, 2]; confident predictions weigh more.
inline double entropy_weight(std::span<const double> probs) {
  require_distribution(probs);
  return 1.0 + std::exp(-entropy(probs));
}

// Mean over batch and classes of |p1 - p2|.
inline Tensor l1_discrepancy(const Tensor& p1, const Tensor& p2) {
  if (p1.shape() != p2.shape()) {
    throw DimensionError("l1_discrepancy: shape mismatch " + shape_str(p1.shape()) + " vs " + shape_str(p2.shape()));
  }
  return mean(abs(sub(p1, p2)));
}

// ln K - H(p_bar), p_bar = mean softmax row over the batch and both
// classifiers. Zero exactly when the mean prediction is uniform.
inline Tensor class_balance_loss(const Tensor& p1, const Tensor& p2) {
  if (p1.shape() != p2.shape() || p1.rank() != 2) {
    throw DimensionError("class_balance_loss: expected two b x K matrices of equal shape");
  }
  const std::size_t b = p1.shape()[0], k = p1.shape()[1];
  if (b == 0) throw ContractError("class_balance_loss of an empty batch");
  Tensor p_bar = scale(add(sum_rows(p1), sum_rows(p2)), 1.0 / static_cast<double>(2 * b));
  // Zero entries contribute 0 * log(1) = 0.
  std::vector<double> pad(k);
  for (std::size_t c = 0; c < k; ++c) pad[c] = p_bar[c] > 0.0 ? 0.0 : 1.0;
  Tensor neg_entropy = sum(mul(p_bar, log(add(p_bar, Tensor::vector(std::move(pad))))));
  Tensor loss = add(neg_entropy, Tensor::scalar(std::log(static_cast<double>(k))));
  return detail::clamp_rounding_below_zero(loss);
}

}  // namespace cgdm
