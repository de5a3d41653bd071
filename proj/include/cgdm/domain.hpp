#pragma once

// Data containers shared by the training modules.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "cgdm/errors.hpp"
#include "cgdm/tensor.hpp"

namespace cgdm {

enum class DomainTag { source, target };

inline const char* to_string(DomainTag tag) { return tag == DomainTag::source ? "source" : "target"; }

// A minibatch of feature rows. Source batches carry labels; target batches
// used for training never do. `indices` are row positions in the parent set.
struct DomainBatch {
  Tensor features;  // n x d_in
  std::optional<std::vector<int>> labels;
  std::vector<std::size_t> indices;

  std::size_t size() const { return features.rank() == 2 ? features.shape()[0] : 0; }
  bool labeled() const { return labels.has_value(); }
};

// Gathers `rows` of a feature matrix.
inline Tensor gather_rows(const Tensor& features, const std::vector<std::size_t>& rows) {
  const std::size_t d = features.shape().at(1);
  std::vector<double> out;
  out.reserve(rows.size() * d);
  for (std::size_t r : rows) {
    if (r >= features.shape()[0]) throw ContractError("gather_rows: row index out of range");
    auto row = features.values().subspan(r * d, d);
    out.insert(out.end(), row.begin(), row.end());
  }
  return Tensor(Shape{rows.size(), d}, std::move(out));
}

// Features of the target domain without any labels; the only view of target
// data that the training steps receive.
struct UnlabeledView {
  Tensor features;

  std::size_t size() const { return features.shape().at(0); }

  DomainBatch batch(const std::vector<std::size_t>& rows) const {
    return DomainBatch{gather_rows(features, rows), std::nullopt, rows};
  }
};

struct DomainSet {
  Tensor features = Tensor(Shape{0, 0}, {});  // n x d_in
  std::optional<std::vector<int>> labels;
  DomainTag domain = DomainTag::source;
  std::size_t num_classes = 0;

  std::size_t size() const { return features.shape().at(0); }
  std::size_t dim() const { return features.shape().at(1); }
  bool labeled() const { return labels.has_value(); }

  DomainBatch batch(const std::vector<std::size_t>& rows) const {
    DomainBatch b{gather_rows(features, rows), std::nullopt, rows};
    if (labels) {
      std::vector<int> y;
      y.reserve(rows.size());
      for (std::size_t r : rows) y.push_back((*labels)[r]);
      b.labels = std::move(y);
    }
    return b;
  }

  DomainBatch all() const {
    std::vector<std::size_t> rows(size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    return batch(rows);
  }

  UnlabeledView unlabeled() const { return UnlabeledView{features}; }
};

struct PseudoLabel {
  int label = 0;
  double weight = 1.0;    // entropy weight in (1, 2]
  double distance = 0.0;  // cosine distance to the assigned centroid
};

// Pseudo labels for a set of target samples, stamped with the epoch in which
// they were computed.
struct PseudoLabelSet {
  std::vector<PseudoLabel> entries;
  std::size_t epoch = 0;

  std::size_t size() const { return entries.size(); }

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.label);
    return out;
  }

  std::vector<double> weights() const {
    std::vector<double> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.weight);
    return out;
  }

  PseudoLabelSet subset(const std::vector<std::size_t>& rows) const {
    PseudoLabelSet out;
    out.epoch = epoch;
    out.entries.reserve(rows.size());
    for (std::size_t r : rows) {
      if (r >= entries.size()) throw ContractError("pseudo label missing for target sample " + std::to_string(r));
      out.entries.push_back(entries[r]);
    }
    return out;
  }
};

}  // namespace cgdm
