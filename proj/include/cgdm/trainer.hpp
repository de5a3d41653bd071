#pragma once

// The three-step bi-classifier training cycle with self-supervised pseudo
// labels and gradient-discrepancy alignment.
//
//   step 1  G, F1, F2:  L_cls(src) + alpha * L^W_cls(tgt, y*) [+ cb * L_cb(tgt)]
//   step 2  F1, F2:     L_cls(src) - L_dis(tgt)               [+ cb * L_cb(tgt)]
//   step 3  G:          L_dis(tgt) + beta * L_GD               (repeated)
//
// Pseudo labels are refreshed once per epoch. With every ablation switch off
// the cycle is the plain maximum-classifier-discrepancy procedure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "cgdm/domain.hpp"
#include "cgdm/errors.hpp"
#include "cgdm/gradient_discrepancy.hpp"
#include "cgdm/losses.hpp"
#include "cgdm/nn.hpp"
#include "cgdm/pseudo_labeling.hpp"
#include "cgdm/random.hpp"
#include "cgdm/tensor.hpp"

namespace cgdm {

struct TrainConfig {
  double alpha = 0.1;
  double beta = 0.01;
  double class_balance_weight = 0.1;
  double lr = 0.02;
  std::optional<double> generator_lr;  // defaults to lr
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  std::size_t step3_repeats = 4;
  std::size_t warmup_epochs = 1;
  std::uint64_t seed = 1;

  bool enable_selfsup = true;
  bool enable_gdm = true;
  bool enable_class_balance = true;
  bool conditional_gdm = false;
  // false: train with step 1 only (source-only baseline when selfsup is off).
  bool adversarial = true;

  std::vector<std::size_t> generator_hidden = {64, 32};  // last entry is the feature width
  std::vector<std::size_t> classifier_hidden = {32};
  // Wall time goes into the metrics only on request so reruns stay byte-identical.
  bool record_wall_time = false;

  void validate() const {
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
    if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
    if (!(class_balance_weight >= 0.0)) throw ConfigError("class_balance_weight must be >= 0");
    if (!(lr >= 0.0) || (generator_lr && !(*generator_lr >= 0.0))) throw ConfigError("learning rates must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (step3_repeats == 0) throw ConfigError("step3_repeats must be >= 1");
    if (generator_hidden.empty()) throw ConfigError("generator needs at least one layer");
    for (std::size_t w : generator_hidden) {
      if (w == 0) throw ConfigError("layer widths must be positive");
    }
    for (std::size_t w : classifier_hidden) {
      if (w == 0) throw ConfigError("layer widths must be positive");
    }
  }

  bool uses_selfsup() const { return enable_selfsup && alpha > 0.0; }
  bool uses_gdm() const { return enable_gdm && beta > 0.0; }
  bool uses_class_balance() const { return enable_class_balance && class_balance_weight > 0.0; }
};

struct StepLosses {
  double cls = 0.0;
  double selfsup = 0.0;
  double dis = 0.0;
  double gd = 0.0;
  double cb = 0.0;
  double total = 0.0;

  bool finite() const {
    return std::isfinite(cls) && std::isfinite(selfsup) && std::isfinite(dis) && std::isfinite(gd) &&
           std::isfinite(cb) && std::isfinite(total);
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss_cls = 0.0;
  double loss_dis = 0.0;
  double loss_gd = 0.0;
  double loss_cb = 0.0;
  double target_acc = std::numeric_limits<double>::quiet_NaN();  // NaN without target ground truth
  double pseudo_acc = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
};

struct TrainState {
  Model model;
  OptimizerState generator_opt;
  OptimizerState classifier_opt;  // F1 and F2 as one group
  std::size_t epoch = 0;
};

inline TrainState init_state(const TrainConfig& cfg, std::size_t input_dim, std::size_t num_classes) {
  cfg.validate();
  if (num_classes < 2) throw ConfigError("need at least two classes");
  std::vector<std::size_t> g_dims{input_dim};
  g_dims.insert(g_dims.end(), cfg.generator_hidden.begin(), cfg.generator_hidden.end());
  std::vector<std::size_t> f_dims{g_dims.back()};
  f_dims.insert(f_dims.end(), cfg.classifier_hidden.begin(), cfg.classifier_hidden.end());
  f_dims.push_back(num_classes);

  TrainState state;
  state.model.generator = init_mlp(g_dims, derive_seed(cfg.seed, 10), Activation::relu, Activation::relu);
  state.model.classifier1 = init_mlp(f_dims, derive_seed(cfg.seed, 11));
  state.model.classifier2 = init_mlp(f_dims, derive_seed(cfg.seed, 12));
  state.generator_opt = OptimizerState{cfg.generator_lr.value_or(cfg.lr), cfg.momentum, cfg.weight_decay, {}};
  state.classifier_opt = OptimizerState{cfg.lr, cfg.momentum, cfg.weight_decay, {}};
  return state;
}

// Endless reshuffled stream of row indices; every draw is exactly
// `batch_size` long and wraps into a fresh permutation when exhausted.
class BatchStream {
 public:
  BatchStream(std::size_t n, std::size_t batch_size, std::uint64_t seed)
      : order_(n), batch_size_(batch_size), rng_(seed) {
    if (n == 0) throw ContractError("BatchStream over an empty set");
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    reshuffle();
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    out.reserve(batch_size_);
    while (out.size() < batch_size_) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    rng_.shuffle(std::span<std::size_t>(order_));
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::size_t pos_ = 0;
  Rng rng_;
};

inline std::size_t iterations_per_epoch(std::size_t n_source, std::size_t n_target, std::size_t batch_size) {
  const std::size_t n = std::max(n_source, n_target);
  return (n + batch_size - 1) / batch_size;
}

namespace detail {

inline void require_current(const PseudoLabelSet& pseudo, const TrainState& state) {
  if (pseudo.epoch != state.epoch) {
    throw ContractError("pseudo labels from epoch " + std::to_string(pseudo.epoch) + " used in epoch " +
                        std::to_string(state.epoch));
  }
}

inline std::vector<Tensor> concat_params(std::initializer_list<const Mlp*> nets) {
  std::vector<Tensor> out;
  for (const Mlp* n : nets) {
    for (const Tensor& p : n->parameters()) out.push_back(p);
  }
  return out;
}

inline std::vector<Tensor> slice_grads(const GradMap& grads, std::size_t from, std::size_t count) {
  return std::vector<Tensor>(grads.grads().begin() + static_cast<std::ptrdiff_t>(from),
                             grads.grads().begin() + static_cast<std::ptrdiff_t>(from + count));
}

inline bool model_finite(const Model& model) {
  for (const Mlp* net : {&model.generator, &model.classifier1, &model.classifier2}) {
    for (const Tensor& p : net->parameters()) {
      if (!all_finite(p)) return false;
    }
  }
  return true;
}

inline void apply_generator(TrainState& state, const std::vector<Tensor>& grads) {
  std::vector<Mlp*> nets{&state.model.generator};
  sgd_step(nets, grads, state.generator_opt);
}

inline void apply_classifiers(TrainState& state, const std::vector<Tensor>& grads) {
  std::vector<Mlp*> nets{&state.model.classifier1, &state.model.classifier2};
  sgd_step(nets, grads, state.classifier_opt);
}

// Step-1 objective with the optional terms switched explicitly.
inline StepLosses joint_update(TrainState& state, const DomainBatch& source, const DomainBatch* target,
                               const PseudoLabelSet* pseudo, const TrainConfig& cfg, bool selfsup, bool balance) {
  Graph graph;
  const Mlp g = state.model.generator.attach(graph);
  const Mlp f1 = state.model.classifier1.attach(graph);
  const Mlp f2 = state.model.classifier2.attach(graph);

  StepLosses out;
  Tensor cls = source_classification_loss(g, f1, f2, source);
  Tensor total = cls;
  out.cls = cls.item();
  if (selfsup) {
    Tensor self = target_classification_loss(g, f1, f2, *target, *pseudo);
    out.selfsup = self.item();
    total = add(total, scale(self, cfg.alpha));
  }
  if (balance) {
    Tensor feat = forward(g, target->features);
    Tensor cb = class_balance_loss(softmax(forward(f1, feat)), softmax(forward(f2, feat)));
    out.cb = cb.item();
    total = add(total, scale(cb, cfg.class_balance_weight));
  }
  out.total = total.item();

  const std::size_t ng = 2 * g.layers().size();
  const std::size_t nf = 2 * (f1.layers().size() + f2.layers().size());
  GradMap grads = backward(total, concat_params({&g, &f1, &f2}));
  apply_generator(state, slice_grads(grads, 0, ng));
  apply_classifiers(state, slice_grads(grads, ng, nf));
  return out;
}

}  // namespace detail

// Source classification only; the warmup epochs use this.
inline StepLosses source_only_update(TrainState& state, const DomainBatch& source, const TrainConfig& cfg) {
  return detail::joint_update(state, source, nullptr, nullptr, cfg, false, false);
}

inline StepLosses step1_update(TrainState& state, const DomainBatch& source, const DomainBatch& target,
                               const PseudoLabelSet& pseudo, const TrainConfig& cfg) {
  detail::require_current(pseudo, state);
  if (target.labeled()) throw ContractError("target batches must not carry labels during training");
  return detail::joint_update(state, source, &target, &pseudo, cfg, cfg.uses_selfsup(), cfg.uses_class_balance());
}

// Generator frozen: classifiers keep source accuracy while maximizing their
// disagreement on the target batch.
inline StepLosses step2_update(TrainState& state, const DomainBatch& source, const DomainBatch& target,
                               const TrainConfig& cfg) {
  if (!source.labeled()) throw ContractError("step 2 needs a labeled source batch");
  if (target.labeled()) throw ContractError("target batches must not carry labels during training");
  Graph graph;
  const Mlp g = state.model.generator.detached();
  const Mlp f1 = state.model.classifier1.attach(graph);
  const Mlp f2 = state.model.classifier2.attach(graph);

  StepLosses out;
  Tensor cls = source_classification_loss(g, f1, f2, source);
  Tensor feat_t = forward(g, target.features);
  Tensor p1 = softmax(forward(f1, feat_t));
  Tensor p2 = softmax(forward(f2, feat_t));
  Tensor dis = l1_discrepancy(p1, p2);
  Tensor total = sub(cls, dis);
  out.cls = cls.item();
  out.dis = dis.item();
  if (cfg.uses_class_balance()) {
    Tensor cb = class_balance_loss(p1, p2);
    out.cb = cb.item();
    total = add(total, scale(cb, cfg.class_balance_weight));
  }
  out.total = total.item();

  GradMap grads = backward(total, detail::concat_params({&f1, &f2}));
  detail::apply_classifiers(state, grads.grads());
  return out;
}

// Classifiers frozen: the generator minimizes their disagreement plus the
// gradient discrepancy, step3_repeats times. Returned losses are from the
// first repeat (before any update).
inline StepLosses step3_update(TrainState& state, const DomainBatch& source, const DomainBatch& target,
                               const PseudoLabelSet& pseudo, const TrainConfig& cfg) {
  detail::require_current(pseudo, state);
  if (target.labeled()) throw ContractError("target batches must not carry labels during training");
  StepLosses first;
  for (std::size_t r = 0; r < cfg.step3_repeats; ++r) {
    Graph graph;
    const Mlp g = state.model.generator.attach(graph);
    // Attached so the gradient vectors can be taken; never updated here.
    const Mlp f1 = state.model.classifier1.attach(graph);
    const Mlp f2 = state.model.classifier2.attach(graph);

    StepLosses out;
    Tensor feat_t = forward(g, target.features);
    Tensor dis = l1_discrepancy(softmax(forward(f1, feat_t)), softmax(forward(f2, feat_t)));
    Tensor total = dis;
    out.dis = dis.item();
    if (cfg.uses_gdm()) {
      Tensor gd;
      if (cfg.conditional_gdm) {
        gd = conditional_gradient_loss(g, f1, f2, source, target, pseudo, true);
      } else {
        GradVector gs = source_gradient(g, f1, f2, source, true);
        GradVector gt = target_gradient(g, f1, f2, target, pseudo, true);
        gd = gradient_discrepancy_loss(gs, gt);
      }
      out.gd = gd.item();
      total = add(total, scale(gd, cfg.beta));
    }
    out.total = total.item();
    if (r == 0) first = out;

    GradMap grads = backward(total, g.parameters());
    detail::apply_generator(state, grads.grads());
  }
  return first;
}

struct Evaluation {
  double accuracy = 0.0;
  std::vector<double> per_class;  // NaN for classes absent from the set
};

// Prediction is the argmax of the two classifiers' averaged softmax outputs.
inline std::vector<int> predict(const Model& model, const Tensor& features) {
  Tensor feat = forward(model.generator.detached(), features);
  Tensor p1 = softmax(forward(model.classifier1.detached(), feat));
  Tensor p2 = softmax(forward(model.classifier2.detached(), feat));
  return argmax_labels(p1, p2);
}

inline Evaluation evaluate(const Model& model, const DomainSet& set) {
  if (!set.labeled()) throw ContractError("evaluate needs a labeled set");
  if (set.size() == 0) throw ContractError("evaluate on an empty set");
  const std::vector<int> pred = predict(model, set.features);
  const std::size_t k = model.classifier1.output_dim();
  std::vector<std::size_t> hits(k, 0), counts(k, 0);
  std::size_t total_hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int y = (*set.labels)[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) throw ContractError("evaluate: label out of range");
    counts[static_cast<std::size_t>(y)]++;
    if (pred[i] == y) {
      hits[static_cast<std::size_t>(y)]++;
      total_hits++;
    }
  }
  Evaluation ev;
  ev.accuracy = static_cast<double>(total_hits) / static_cast<double>(pred.size());
  for (std::size_t c = 0; c < k; ++c) {
    ev.per_class.push_back(counts[c] ? static_cast<double>(hits[c]) / static_cast<double>(counts[c])
                                     : std::numeric_limits<double>::quiet_NaN());
  }
  return ev;
}

enum class StepKind { warmup, step1, step2, step3 };

// Optional observers; `on_step` sees the model before and after every update.
struct TrainHooks {
  std::function<void(StepKind, const Model& before, const Model& after)> on_step;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  Model model;
  bool failed = false;  // a non-finite loss stopped the run
  std::string failure;
};

inline TrainResult train(const DomainSet& source, const DomainSet& target, const TrainConfig& cfg,
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  if (!source.labeled()) throw ConfigError("source set must be labeled");
  if (source.size() == 0 || target.size() == 0) throw ConfigError("source and target sets must be non-empty");
  if (source.dim() != target.dim()) throw ConfigError("source and target feature widths differ");
  if (target.num_classes != 0 && target.num_classes != source.num_classes) {
    throw ConfigError("class count differs between source (" + std::to_string(source.num_classes) + ") and target (" +
                      std::to_string(target.num_classes) + ")");
  }

  TrainState state = init_state(cfg, source.dim(), source.num_classes);
  TrainResult result;
  if (cfg.epochs == 0) {
    result.model = state.model;
    return result;
  }

  const UnlabeledView target_view = target.unlabeled();
  BatchStream source_stream(source.size(), cfg.batch_size, derive_seed(cfg.seed, 20));
  BatchStream target_stream(target.size(), cfg.batch_size, derive_seed(cfg.seed, 21));
  const std::size_t iters = iterations_per_epoch(source.size(), target.size(), cfg.batch_size);

  auto observe = [&](StepKind kind, const Model& before) {
    if (hooks.on_step) hooks.on_step(kind, before, state.model);
  };
  auto fail = [&](const std::string& why) {
    result.failed = true;
    result.failure = why;
  };

  for (std::size_t w = 0; w < cfg.warmup_epochs && !result.failed; ++w) {
    for (std::size_t it = 0; it < iters; ++it) {
      const DomainBatch s = source.batch(source_stream.next());
      const Model before = state.model;
      StepLosses l;
      try {
        l = source_only_update(state, s, cfg);
      } catch (const DomainError& e) {
        fail(std::string("non-finite values during warmup: ") + e.what());
        break;
      }
      observe(StepKind::warmup, before);
      if (!l.finite() || !detail::model_finite(state.model)) {
        fail("non-finite loss during warmup");
        break;
      }
    }
  }

  for (std::size_t epoch = 1; epoch <= cfg.epochs && !result.failed; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    state.epoch = epoch;
    const PseudoLabelSet pseudo = pseudo_label_epoch(state.model, target_view, epoch);

    EpochMetrics m;
    m.epoch = epoch;
    if (target.labeled()) m.pseudo_acc = label_agreement(pseudo.labels(), *target.labels);

    for (std::size_t it = 0; it < iters; ++it) {
      const DomainBatch s = source.batch(source_stream.next());
      const DomainBatch t = target_view.batch(target_stream.next());
      const PseudoLabelSet p = pseudo.subset(t.indices);

      StepLosses l1, l3;
      bool finite = true;
      try {
        Model before = state.model;
        l1 = step1_update(state, s, t, p, cfg);
        observe(StepKind::step1, before);
        finite = l1.finite();
        if (cfg.adversarial && finite) {
          before = state.model;
          const StepLosses l2 = step2_update(state, s, t, cfg);
          observe(StepKind::step2, before);
          before = state.model;
          l3 = step3_update(state, s, t, p, cfg);
          observe(StepKind::step3, before);
          finite = l2.finite() && l3.finite();
        }
      } catch (const DomainError&) {
        finite = false;
      }
      finite = finite && detail::model_finite(state.model);
      if (!finite) {
        fail("non-finite loss in epoch " + std::to_string(epoch));
        break;
      }
      m.loss_cls += l1.cls;
      m.loss_cb += l1.cb;
      m.loss_dis += l3.dis;
      m.loss_gd += l3.gd;
    }
    if (result.failed) break;

    const double n = static_cast<double>(iters);
    m.loss_cls /= n;
    m.loss_cb /= n;
    m.loss_dis /= n;
    m.loss_gd /= n;
    if (target.labeled()) m.target_acc = evaluate(state.model, target).accuracy;
    if (cfg.record_wall_time) {
      m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    }
    result.metrics.push_back(m);
    if (hooks.on_epoch) hooks.on_epoch(m);
  }
  result.model = state.model;
  return result;
}

}  // namespace cgdm
