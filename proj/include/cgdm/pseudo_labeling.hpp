#pragma once

// Target pseudo labels from softmax-weighted class centroids in generator
// feature space, assigned by nearest centroid under cosine distance.

#include <cmath>
#include <cstddef>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "cgdm/domain.hpp"
#include "cgdm/errors.hpp"
#include "cgdm/losses.hpp"
#include "cgdm/nn.hpp"
#include "cgdm/tensor.hpp"

namespace cgdm {

inline constexpr double kEmptySupport = 1e-8;

struct CentroidSet {
  Tensor centroids;                 // K x d_feat
  std::vector<double> support_mass; // per class, sum of softmax mass over both classifiers

  std::size_t num_classes() const { return centroids.shape().at(0); }
  std::size_t dim() const { return centroids.shape().at(1); }
  std::span<const double> centroid(std::size_t k) const { return centroids.values().subspan(k * dim(), dim()); }
};

// c_k = sum_n sum_i p^n_ik f_i / sum_n sum_i p^n_ik. A class with
// (numerically) no support takes the feature of the sample that gives it the
// most mass.
inline CentroidSet compute_centroids(const Tensor& features, const Tensor& probs1, const Tensor& probs2) {
  if (features.rank() != 2 || probs1.rank() != 2 || probs1.shape() != probs2.shape() ||
      probs1.shape()[0] != features.shape()[0]) {
    throw DimensionError("compute_centroids: features and probability matrices disagree");
  }
  const std::size_t n = features.shape()[0], d = features.shape()[1], k = probs1.shape()[1];
  if (n == 0) throw ContractError("compute_centroids needs at least one sample");
  std::vector<double> sums(k * d, 0.0), mass(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      const double w = probs1[i * k + c] + probs2[i * k + c];
      mass[c] += w;
      for (std::size_t j = 0; j < d; ++j) sums[c * d + j] += w * features[i * d + j];
    }
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (mass[c] < kEmptySupport) {
      std::size_t best = 0;
      double best_w = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double w = probs1[i * k + c] + probs2[i * k + c];
        if (w > best_w) {
          best_w = w;
          best = i;
        }
      }
      for (std::size_t j = 0; j < d; ++j) sums[c * d + j] = features[best * d + j];
    } else {
      for (std::size_t j = 0; j < d; ++j) sums[c * d + j] /= mass[c];
    }
  }
  return CentroidSet{Tensor(Shape{k, d}, std::move(sums)), std::move(mass)};
}

inline double cosine_distance(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw DimensionError("cosine_distance: length mismatch");
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  return 1.0 - uv / (std::sqrt(uu) * std::sqrt(vv) + 1e-12);
}

// y*_i = argmin_k d(f_i, c_k), lowest index on ties; w_i from the mean of the
// two classifiers' softmax rows.
inline PseudoLabelSet assign_pseudo_labels(const Tensor& features, const CentroidSet& centroids, const Tensor& probs1,
                                           const Tensor& probs2) {
  const std::size_t n = features.shape().at(0), d = features.shape().at(1), k = centroids.num_classes();
  if (centroids.dim() != d || probs1.shape() != Shape{n, k} || probs2.shape() != Shape{n, k}) {
    throw DimensionError("assign_pseudo_labels: shapes disagree");
  }
  PseudoLabelSet out;
  out.entries.reserve(n);
  std::vector<double> mean_probs(k);
  for (std::size_t i = 0; i < n; ++i) {
    auto f = features.values().subspan(i * d, d);
    std::size_t best = 0;
    double best_dist = cosine_distance(f, centroids.centroid(0));
    for (std::size_t c = 1; c < k; ++c) {
      const double dist = cosine_distance(f, centroids.centroid(c));
      if (dist < best_dist) {
        best_dist = dist;
        best = c;
      }
    }
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      mean_probs[c] = 0.5 * (probs1[i * k + c] + probs2[i * k + c]);
      total += mean_probs[c];
    }
    for (double& p : mean_probs) p /= total;
    out.entries.push_back({static_cast<int>(best), entropy_weight(mean_probs), std::max(0.0, best_dist)});
  }
  return out;
}

struct PseudoLabelPass {
  PseudoLabelSet labels;
  CentroidSet centroids;
  Tensor features;  // generator outputs of the whole target set
  Tensor probs1;
  Tensor probs2;
};

// One inference pass over the full target set followed by clustering.
inline PseudoLabelPass pseudo_label_pass(const Model& model, const UnlabeledView& target, std::size_t epoch = 0) {
  if (target.size() == 0) throw ContractError("pseudo labeling needs a non-empty target set");
  Tensor features = forward(model.generator.detached(), target.features);
  Tensor probs1 = softmax(forward(model.classifier1.detached(), features));
  Tensor probs2 = softmax(forward(model.classifier2.detached(), features));
  CentroidSet centroids = compute_centroids(features, probs1, probs2);
  PseudoLabelSet labels = assign_pseudo_labels(features, centroids, probs1, probs2);
  labels.epoch = epoch;
  return {std::move(labels), std::move(centroids), std::move(features), std::move(probs1), std::move(probs2)};
}

inline PseudoLabelSet pseudo_label_epoch(const Model& model, const UnlabeledView& target, std::size_t epoch = 0) {
  return pseudo_label_pass(model, target, epoch).labels;
}

// Labels from argmax of the averaged softmax, the baseline that clustering
// is compared against.
inline std::vector<int> argmax_labels(const Tensor& probs1, const Tensor& probs2) {
  const std::size_t n = probs1.shape().at(0), k = probs1.shape().at(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double best_p = -1.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double p = probs1[i * k + c] + probs2[i * k + c];
      if (p > best_p) {
        best_p = p;
        best = c;
      }
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

inline double label_agreement(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size() || truth.empty()) throw ContractError("label_agreement: size mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

// CSV: sample_id,pseudo_label,weight,distance
inline void write_pseudo_labels_csv(const std::string& path, const PseudoLabelSet& pseudo) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "sample_id,pseudo_label,weight,distance\n";
  char buf[96];
  for (std::size_t i = 0; i < pseudo.size(); ++i) {
    const auto& e = pseudo.entries[i];
    std::snprintf(buf, sizeof buf, "%zu,%d,%.17g,%.17g\n", i, e.label, e.weight, e.distance);
    os << buf;
  }
  if (!os) throw IoError("write failed for " + path);
}

}  // namespace cgdm
