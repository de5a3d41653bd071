#pragma once

// Expected classifier-parameter gradients of the source and target domains
// and the cosine discrepancy between them.
//
// A GradVector concatenates the gradients of every F1 parameter followed by
// every F2 parameter, each in layer order (weight, bias). Built with
// create_graph it stays on the graph, so the discrepancy can be
// differentiated with respect to the generator.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cgdm/domain.hpp"
#include "cgdm/errors.hpp"
#include "cgdm/log.hpp"
#include "cgdm/losses.hpp"
#include "cgdm/nn.hpp"
#include "cgdm/tensor.hpp"

namespace cgdm {

inline constexpr double kCosineEpsilon = 1e-12;

struct GradVector {
  Tensor flat;

  std::size_t size() const { return flat.numel(); }
};

inline std::vector<Tensor> classifier_parameters(const Mlp& classifier1, const Mlp& classifier2) {
  std::vector<Tensor> params = classifier1.parameters();
  for (const Tensor& p : classifier2.parameters()) params.push_back(p);
  return params;
}

inline GradVector classifier_gradient(const Tensor& loss, const Mlp& classifier1, const Mlp& classifier2,
                                      bool create_graph) {
  GradMap grads = backward(loss, classifier_parameters(classifier1, classifier2), create_graph);
  return GradVector{concat(grads.grads())};
}

namespace detail {

inline bool is_attached(const Mlp& net) { return net.layers().front().weight.attached(); }

// Runs `fn` on graph-attached copies when the classifiers are plain constants.
template <typename F>
GradVector with_attached(const Mlp& generator, const Mlp& classifier1, const Mlp& classifier2, F fn) {
  if (is_attached(classifier1) && is_attached(classifier2)) return fn(generator, classifier1, classifier2);
  Graph graph;
  return fn(generator.attach(graph), classifier1.attach(graph), classifier2.attach(graph));
}

}  // namespace detail

// g_s = 1/2 sum_n grad_{theta_fn} mean_i CE(F_n(G(x_i)), y_i)
inline GradVector source_gradient(const Mlp& generator, const Mlp& classifier1, const Mlp& classifier2,
                                  const DomainBatch& batch, bool create_graph) {
  if (batch.size() == 0) throw ContractError("source_gradient of an empty batch");
  if (!batch.labeled()) throw ContractError("source_gradient needs a labeled batch");
  return detail::with_attached(generator, classifier1, classifier2,
                               [&](const Mlp& g, const Mlp& f1, const Mlp& f2) {
                                 Tensor loss = source_classification_loss(g, f1, f2, batch);
                                 return classifier_gradient(loss, f1, f2, create_graph);
                               });
}

// 1/2 sum_n mean_i w_i CE(F_n(G(x_i)), y*_i) over the target batch.
inline Tensor target_classification_loss(const Mlp& generator, const Mlp& classifier1, const Mlp& classifier2,
                                         const DomainBatch& batch, const PseudoLabelSet& pseudo) {
  if (pseudo.size() != batch.size()) {
    throw ContractError("pseudo labels cover " + std::to_string(pseudo.size()) + " of " +
                        std::to_string(batch.size()) + " target samples");
  }
  Tensor features = forward(generator, batch.features);
  Tensor ce1 = weighted_cross_entropy(forward(classifier1, features), pseudo);
  Tensor ce2 = weighted_cross_entropy(forward(classifier2, features), pseudo);
  return scale(add(ce1, ce2), 0.5);
}

inline GradVector target_gradient(const Mlp& generator, const Mlp& classifier1, const Mlp& classifier2,
                                  const DomainBatch& batch, const PseudoLabelSet& pseudo, bool create_graph) {
  if (batch.size() == 0) throw ContractError("target_gradient of an empty batch");
  return detail::with_attached(generator, classifier1, classifier2,
                               [&](const Mlp& g, const Mlp& f1, const Mlp& f2) {
                                 Tensor loss = target_classification_loss(g, f1, f2, batch, pseudo);
                                 return classifier_gradient(loss, f1, f2, create_graph);
                               });
}

// 1 - <gs, gt> / (|gs| |gt| + eps); 0 when either vector is (numerically) zero.
inline Tensor gradient_discrepancy_loss(const GradVector& gs, const GradVector& gt) {
  if (gs.flat.shape() != gt.flat.shape()) {
    throw DimensionError("gradient vectors differ in length: " + std::to_string(gs.size()) + " vs " +
                         std::to_string(gt.size()));
  }
  Tensor norm_s = l2_norm(gs.flat);
  Tensor norm_t = l2_norm(gt.flat);
  if (norm_s.item() < kCosineEpsilon || norm_t.item() < kCosineEpsilon) return Tensor::scalar(0.0);
  Tensor cosine = div(dot(gs.flat, gt.flat), add(mul(norm_s, norm_t), Tensor::scalar(kCosineEpsilon)));
  return detail::clamp_rounding_below_zero(sub(Tensor::scalar(1.0), cosine));
}

// d(mean_i w_i CE(W x_i + b, y_i)) / d(W, b) for a single linear layer,
// evaluated directly: (1/n) sum_i w_i (softmax(W x_i + b) - onehot(y_i)) [x_i^T, 1].
// Returned in parameter order: W row-major, then b.
inline std::vector<double> linear_head_gradient_oracle(const Tensor& features, std::span<const int> labels,
                                                       std::span<const double> weights, const Tensor& weight,
                                                       const Tensor& bias) {
  const std::size_t n = features.shape().at(0), d = features.shape().at(1), k = weight.shape().at(0);
  if (weight.shape().at(1) != d || bias.numel() != k) throw DimensionError("oracle: head shape mismatch");
  if (labels.size() != n || weights.size() != n) throw ContractError("oracle: labels/weights do not match batch");
  std::vector<double> grad_w(k * d, 0.0), grad_b(k, 0.0), z(k);
  for (std::size_t i = 0; i < n; ++i) {
    double zmax = -INFINITY;
    for (std::size_t c = 0; c < k; ++c) {
      double acc = bias[c];
      for (std::size_t j = 0; j < d; ++j) acc += weight[c * d + j] * features[i * d + j];
      z[c] = acc;
      zmax = std::max(zmax, acc);
    }
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) total += std::exp(z[c] - zmax);
    for (std::size_t c = 0; c < k; ++c) {
      const double p = std::exp(z[c] - zmax) / total;
      const double delta = weights[i] * (p - (static_cast<int>(c) == labels[i] ? 1.0 : 0.0)) / static_cast<double>(n);
      for (std::size_t j = 0; j < d; ++j) grad_w[c * d + j] += delta * features[i * d + j];
      grad_b[c] += delta;
    }
  }
  grad_w.insert(grad_w.end(), grad_b.begin(), grad_b.end());
  return grad_w;
}

// Per-class variant: mean over classes present in both batches of the
// discrepancy between the class-restricted source and target gradients.
// Classifiers and generator should be attached to one graph when the result
// is to be differentiated.
inline Tensor conditional_gradient_loss(const Mlp& generator, const Mlp& classifier1, const Mlp& classifier2,
                                        const DomainBatch& source, const DomainBatch& target,
                                        const PseudoLabelSet& pseudo, bool create_graph) {
  if (!source.labeled()) throw ContractError("conditional gradient loss needs a labeled source batch");
  if (pseudo.size() != target.size()) throw ContractError("pseudo labels do not cover the target batch");
  const std::size_t k = classifier1.output_dim();
  std::vector<Tensor> per_class;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<std::size_t> src_rows, tgt_rows;
    for (std::size_t i = 0; i < source.size(); ++i) {
      if ((*source.labels)[i] == static_cast<int>(c)) src_rows.push_back(i);
    }
    for (std::size_t i = 0; i < target.size(); ++i) {
      if (pseudo.entries[i].label == static_cast<int>(c)) tgt_rows.push_back(i);
    }
    if (src_rows.empty() || tgt_rows.empty()) continue;
    DomainBatch src_c{gather_rows(source.features, src_rows), std::vector<int>(src_rows.size(), static_cast<int>(c)),
                      src_rows};
    DomainBatch tgt_c{gather_rows(target.features, tgt_rows), std::nullopt, tgt_rows};
    GradVector gs = source_gradient(generator, classifier1, classifier2, src_c, create_graph);
    GradVector gt = target_gradient(generator, classifier1, classifier2, tgt_c, pseudo.subset(tgt_rows), create_graph);
    per_class.push_back(gradient_discrepancy_loss(gs, gt));
  }
  if (per_class.empty()) {
    warn("conditional gradient loss: no class is shared by the source and target batches");
    return Tensor::scalar(0.0);
  }
  Tensor total = per_class.front();
  for (std::size_t i = 1; i < per_class.size(); ++i) total = add(total, per_class[i]);
  return scale(total, 1.0 / static_cast<double>(per_class.size()));
}

}  // namespace cgdm
