#pragma once

// Finite-difference and closed-form checks of the autodiff gradients used by
// training. Random instances are redrawn when a ReLU pre-activation or an
// |p1 - p2| term sits within a margin of its kink, where central differences
// straddle a non-differentiable point.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cgdm/domain.hpp"
#include "cgdm/gradient_discrepancy.hpp"
#include "cgdm/losses.hpp"
#include "cgdm/nn.hpp"
#include "cgdm/random.hpp"
#include "cgdm/tensor.hpp"

namespace cgdm {

struct GradCheckOptions {
  std::size_t instances = 20;
  std::uint64_t seed = 1;
  double step = 1e-4;
  double rel_tol = 1e-4;
  double scale_floor = 1e-6;  // relative errors use max(|a|, |b|, scale_floor) as denominator
  double oracle_tol = 1e-10;  // absolute, closed-form comparison
  double kink_margin = 1e-2;
};

struct GradCheckReport {
  std::size_t instances = 0;
  std::size_t entries = 0;
  std::size_t failures = 0;
  std::size_t redraws = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  double seconds = 0.0;
  std::size_t max_parameters = 0;  // largest model checked

  bool passed() const { return failures == 0 && instances > 0; }
};

namespace detail {

inline std::size_t parameter_count(const Model& m) {
  return m.generator.parameter_count() + m.classifier1.parameter_count() + m.classifier2.parameter_count();
}

inline double rel_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline void record_entry(GradCheckReport& r, double analytic, double numeric, const GradCheckOptions& opt) {
  const double rel = rel_error(analytic, numeric, opt.scale_floor);
  r.entries++;
  r.max_abs_error = std::max(r.max_abs_error, std::abs(analytic - numeric));
  r.max_rel_error = std::max(r.max_rel_error, rel);
  if (!(rel < opt.rel_tol)) r.failures++;
}

inline Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double sd = 1.0) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = rng.normal(0.0, sd);
  return Tensor(Shape{rows, cols}, std::move(v));
}

inline Mlp random_mlp(Rng& rng, const std::vector<std::size_t>& dims, Activation hidden, Activation output) {
  Mlp net = init_mlp(dims, rng.next_u64(), hidden, output);
  std::vector<Tensor> params = net.parameters();
  for (std::size_t i = 1; i < params.size(); i += 2) {
    std::vector<double> b(params[i].numel());
    for (double& x : b) x = rng.normal(0.0, 0.3);
    params[i] = Tensor(params[i].shape(), std::move(b));
  }
  net.set_parameters(params);
  return net;
}

// Smallest |pre-activation| over every ReLU layer of `net` on input `x`.
inline double relu_margin(const Mlp& net, const Tensor& x) {
  double margin = INFINITY;
  Tensor h = x;
  for (const DenseLayer& layer : net.layers()) {
    Tensor z = add(matmul(h, transpose(layer.weight)), layer.bias);
    if (layer.activation == Activation::relu) {
      for (double v : z.values()) margin = std::min(margin, std::abs(v));
      h = relu(z);
    } else {
      h = z;
    }
  }
  return margin;
}

inline std::vector<int> random_labels(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<int> y(n);
  for (int& v : y) v = static_cast<int>(rng.below(k));
  return y;
}

inline PseudoLabelSet random_pseudo(Rng& rng, std::size_t n, std::size_t k) {
  PseudoLabelSet p;
  for (std::size_t i = 0; i < n; ++i) p.entries.push_back({static_cast<int>(rng.below(k)), rng.uniform(1.0, 2.0), 0.0});
  return p;
}

struct Instance {
  Model model;
  DomainBatch source;
  DomainBatch target;
  PseudoLabelSet pseudo;
};

inline Instance draw_instance(Rng& rng, const std::vector<std::size_t>& g_dims, const std::vector<std::size_t>& f_dims,
                              std::size_t batch) {
  Instance in;
  in.model.generator = random_mlp(rng, g_dims, Activation::relu, Activation::relu);
  in.model.classifier1 = random_mlp(rng, f_dims, Activation::relu, Activation::none);
  in.model.classifier2 = random_mlp(rng, f_dims, Activation::relu, Activation::none);
  const std::size_t k = f_dims.back();
  in.source = DomainBatch{random_matrix(rng, batch, g_dims.front()), random_labels(rng, batch, k), {}};
  in.target = DomainBatch{random_matrix(rng, batch, g_dims.front()), std::nullopt, {}};
  in.pseudo = random_pseudo(rng, batch, k);
  return in;
}

inline double instance_margin(const Instance& in) {
  double m = std::min(relu_margin(in.model.generator, in.source.features),
                      relu_margin(in.model.generator, in.target.features));
  for (const Tensor* x : {&in.source.features, &in.target.features}) {
    const Tensor f = forward(in.model.generator, *x);
    m = std::min({m, relu_margin(in.model.classifier1, f), relu_margin(in.model.classifier2, f)});
  }
  return m;
}

// Rebuilds a model from one flat parameter list (G, then F1, then F2).
inline Model with_parameters(const Model& base, const std::vector<Tensor>& params) {
  Model m = base;
  const std::size_t ng = base.generator.parameters().size();
  const std::size_t nf = base.classifier1.parameters().size();
  m.generator.set_parameters({params.begin(), params.begin() + static_cast<std::ptrdiff_t>(ng)});
  m.classifier1.set_parameters(
      {params.begin() + static_cast<std::ptrdiff_t>(ng), params.begin() + static_cast<std::ptrdiff_t>(ng + nf)});
  m.classifier2.set_parameters({params.begin() + static_cast<std::ptrdiff_t>(ng + nf), params.end()});
  return m;
}

inline std::vector<Tensor> all_parameters(const Model& m) {
  std::vector<Tensor> out = m.generator.parameters();
  for (const Tensor& p : m.classifier1.parameters()) out.push_back(p);
  for (const Tensor& p : m.classifier2.parameters()) out.push_back(p);
  return out;
}

inline std::vector<Tensor> perturbed(const std::vector<Tensor>& params, std::size_t which, std::size_t index,
                                     double delta) {
  std::vector<Tensor> out = params;
  std::vector<double> v(out[which].values().begin(), out[which].values().end());
  v[index] += delta;
  out[which] = Tensor(out[which].shape(), std::move(v));
  return out;
}

// Every training term on one scalar: source CE, weighted pseudo-label CE,
// classifier discrepancy and class balance.
inline Tensor combined_objective(const Model& m, const Instance& in) {
  Tensor loss = source_classification_loss(m.generator, m.classifier1, m.classifier2, in.source);
  loss = add(loss, scale(target_classification_loss(m.generator, m.classifier1, m.classifier2, in.target, in.pseudo), 0.7));
  const Tensor feat = forward(m.generator, in.target.features);
  const Tensor p1 = softmax(forward(m.classifier1, feat));
  const Tensor p2 = softmax(forward(m.classifier2, feat));
  loss = add(loss, scale(l1_discrepancy(p1, p2), 0.5));
  return add(loss, scale(class_balance_loss(p1, p2), 0.3));
}

inline double min_prob_gap(const Instance& in) {
  const Tensor feat = forward(in.model.generator, in.target.features);
  const Tensor p1 = softmax(forward(in.model.classifier1, feat));
  const Tensor p2 = softmax(forward(in.model.classifier2, feat));
  double m = INFINITY;
  for (std::size_t i = 0; i < p1.numel(); ++i) m = std::min(m, std::abs(p1[i] - p2[i]));
  return m;
}

inline double gd_value(const Model& m, const Instance& in, bool create_graph) {
  const GradVector gs = source_gradient(m.generator, m.classifier1, m.classifier2, in.source, create_graph);
  const GradVector gt = target_gradient(m.generator, m.classifier1, m.classifier2, in.target, in.pseudo, create_graph);
  return gradient_discrepancy_loss(gs, gt).item();
}

template <typename Draw, typename Accept>
Instance draw_accepted(Rng& rng, GradCheckReport& report, Draw draw, Accept accept) {
  for (;;) {
    Instance in = draw(rng);
    if (accept(in)) return in;
    report.redraws++;
  }
}

}  // namespace detail

// d(objective)/d(every parameter) by autodiff vs central differences.
inline GradCheckReport check_first_order(const GradCheckOptions& opt = {}) {
  const auto started = std::chrono::steady_clock::now();
  GradCheckReport report;
  Rng rng(derive_seed(opt.seed, 1));
  for (std::size_t n = 0; n < opt.instances; ++n) {
    const std::size_t d_in = 2 + rng.below(3), hidden = 3 + rng.below(3), feat = 2 + rng.below(3);
    const std::size_t k = 2 + rng.below(3);
    const detail::Instance in = detail::draw_accepted(
        rng, report,
        [&](Rng& r) { return detail::draw_instance(r, {d_in, hidden, feat}, {feat, 3, k}, 6); },
        [&](const detail::Instance& i) {
          return detail::instance_margin(i) > opt.kink_margin && detail::min_prob_gap(i) > 1e-3;
        });

    Graph graph;
    const Model attached{in.model.generator.attach(graph), in.model.classifier1.attach(graph),
                         in.model.classifier2.attach(graph)};
    const std::vector<Tensor> params = detail::all_parameters(attached);
    const GradMap grads = backward(detail::combined_objective(attached, in), params);

    const std::vector<Tensor> base = detail::all_parameters(in.model);
    for (std::size_t p = 0; p < base.size(); ++p) {
      for (std::size_t i = 0; i < base[p].numel(); ++i) {
        const double up = detail::combined_objective(
                              detail::with_parameters(in.model, detail::perturbed(base, p, i, opt.step)), in)
                              .item();
        const double down = detail::combined_objective(
                                detail::with_parameters(in.model, detail::perturbed(base, p, i, -opt.step)), in)
                                .item();
        detail::record_entry(report, grads.grads()[p][i], (up - down) / (2.0 * opt.step), opt);
      }
    }
    report.max_parameters = std::max(report.max_parameters, detail::parameter_count(in.model));
    report.instances++;
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

// d(L_GD)/d(generator parameters) by double backward vs central differences
// of L_GD. The model is G 2-4 (ReLU) with two 4-2-2 classifiers: 44 parameters.
inline GradCheckReport check_second_order(GradCheckOptions opt = {}) {
  const auto started = std::chrono::steady_clock::now();
  GradCheckReport report;
  Rng rng(derive_seed(opt.seed, 2));
  for (std::size_t n = 0; n < opt.instances; ++n) {
    const detail::Instance in = detail::draw_accepted(
        rng, report, [](Rng& r) { return detail::draw_instance(r, {2, 4}, {4, 2, 2}, 8); },
        [&](const detail::Instance& i) {
          return detail::instance_margin(i) > opt.kink_margin && detail::gd_value(i.model, i, false) > 1e-3;
        });

    Graph graph;
    const Model attached{in.model.generator.attach(graph), in.model.classifier1.attach(graph),
                         in.model.classifier2.attach(graph)};
    const GradVector gs =
        source_gradient(attached.generator, attached.classifier1, attached.classifier2, in.source, true);
    const GradVector gt = target_gradient(attached.generator, attached.classifier1, attached.classifier2, in.target,
                                          in.pseudo, true);
    const GradMap grads = backward(gradient_discrepancy_loss(gs, gt), attached.generator.parameters());

    const std::vector<Tensor> base = detail::all_parameters(in.model);
    const std::size_t ng = in.model.generator.parameters().size();
    for (std::size_t p = 0; p < ng; ++p) {
      for (std::size_t i = 0; i < base[p].numel(); ++i) {
        const double up =
            detail::gd_value(detail::with_parameters(in.model, detail::perturbed(base, p, i, opt.step)), in, false);
        const double down =
            detail::gd_value(detail::with_parameters(in.model, detail::perturbed(base, p, i, -opt.step)), in, false);
        detail::record_entry(report, grads.grads()[p][i], (up - down) / (2.0 * opt.step), opt);
      }
    }
    report.max_parameters = std::max(report.max_parameters, detail::parameter_count(in.model));
    report.instances++;
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

// Single-linear-layer classifiers: autodiff source/target gradients against
// the closed-form expression. Each classifier block of g equals half of its
// own closed-form gradient because the loss averages the two classifiers.
inline GradCheckReport check_linear_head_oracle(GradCheckOptions opt = {}) {
  const auto started = std::chrono::steady_clock::now();
  GradCheckReport report;
  Rng rng(derive_seed(opt.seed, 3));
  for (std::size_t n = 0; n < opt.instances; ++n) {
    const std::size_t d_in = 2 + rng.below(4), feat = 2 + rng.below(5), k = 2 + rng.below(4);
    const std::size_t batch = 1 + rng.below(16);
    detail::Instance in = detail::draw_instance(rng, {d_in, feat}, {feat, k}, batch);
    in.model.classifier1 = detail::random_mlp(rng, {feat, k}, Activation::none, Activation::none);
    in.model.classifier2 = detail::random_mlp(rng, {feat, k}, Activation::none, Activation::none);

    const Tensor fs = forward(in.model.generator, in.source.features);
    const Tensor ft = forward(in.model.generator, in.target.features);
    const std::vector<double> ones(batch, 1.0);
    const std::vector<int> pseudo_labels = in.pseudo.labels();
    const std::vector<double> pseudo_weights = in.pseudo.weights();

    auto compare = [&](const GradVector& g, const Tensor& features, std::span<const int> labels,
                       std::span<const double> weights) {
      std::vector<double> expected;
      for (const Mlp* f : {&in.model.classifier1, &in.model.classifier2}) {
        const DenseLayer& layer = f->layers().front();
        for (double v : linear_head_gradient_oracle(features, labels, weights, layer.weight, layer.bias)) {
          expected.push_back(0.5 * v);
        }
      }
      if (expected.size() != g.size()) {
        report.failures++;
        return;
      }
      for (std::size_t i = 0; i < expected.size(); ++i) {
        const double err = std::abs(expected[i] - g.flat[i]);
        report.entries++;
        report.max_abs_error = std::max(report.max_abs_error, err);
        report.max_rel_error = std::max(report.max_rel_error, detail::rel_error(expected[i], g.flat[i], opt.scale_floor));
        if (!(err <= opt.oracle_tol)) report.failures++;
      }
    };
    compare(source_gradient(in.model.generator, in.model.classifier1, in.model.classifier2, in.source, false), fs,
            *in.source.labels, ones);
    compare(target_gradient(in.model.generator, in.model.classifier1, in.model.classifier2, in.target, in.pseudo,
                            false),
            ft, pseudo_labels, pseudo_weights);
    report.max_parameters = std::max(report.max_parameters, detail::parameter_count(in.model));
    report.instances++;
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

}  // namespace cgdm
