#pragma once

// Multilayer perceptrons, initialization, momentum SGD and the checkpoint
// text format.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cgdm/errors.hpp"
#include "cgdm/random.hpp"
#include "cgdm/tensor.hpp"

namespace cgdm {

enum class Activation { none, relu };

struct DenseLayer {
  Tensor weight;  // out x in
  Tensor bias;    // out
  Activation activation = Activation::none;
};

class Mlp {
 public:
  Mlp() = default;

  explicit Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw ContractError("Mlp needs at least one layer");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const DenseLayer& l = layers_[i];
      if (l.weight.rank() != 2 || l.bias.rank() != 1 || l.bias.numel() != l.weight.shape()[0]) {
        throw DimensionError("layer " + std::to_string(i) + ": weight " + shape_str(l.weight.shape()) +
                             " and bias " + shape_str(l.bias.shape()) + " disagree");
      }
      if (i > 0 && layers_[i - 1].weight.shape()[0] != l.weight.shape()[1]) {
        throw DimensionError("layer " + std::to_string(i) + " input does not match previous output");
      }
    }
  }

  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::size_t input_dim() const { return layers_.front().weight.shape()[1]; }
  std::size_t output_dim() const { return layers_.back().weight.shape()[0]; }

  // weight0, bias0, weight1, bias1, ...
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> params;
    params.reserve(2 * layers_.size());
    for (const DenseLayer& l : layers_) {
      params.push_back(l.weight);
      params.push_back(l.bias);
    }
    return params;
  }

  void set_parameters(const std::vector<Tensor>& params) {
    if (params.size() != 2 * layers_.size()) throw ContractError("set_parameters: wrong parameter count");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (params[2 * i].shape() != layers_[i].weight.shape() ||
          params[2 * i + 1].shape() != layers_[i].bias.shape()) {
        throw DimensionError("set_parameters: shape mismatch in layer " + std::to_string(i));
      }
      layers_[i].weight = params[2 * i];
      layers_[i].bias = params[2 * i + 1];
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const DenseLayer& l : layers_) n += l.weight.numel() + l.bias.numel();
    return n;
  }

  // A copy whose parameters are leaves of `graph`.
  Mlp attach(Graph& graph) const {
    Mlp out = *this;
    for (DenseLayer& l : out.layers_) {
      l.weight = graph.leaf(l.weight);
      l.bias = graph.leaf(l.bias);
    }
    return out;
  }

  // A copy whose parameters are plain constants.
  Mlp detached() const {
    Mlp out = *this;
    for (DenseLayer& l : out.layers_) {
      l.weight = l.weight.detach();
      l.bias = l.bias.detach();
    }
    return out;
  }

 private:
  std::vector<DenseLayer> layers_;
};

// Glorot-uniform weights, zero biases. `dims` lists layer widths, input first.
inline Mlp init_mlp(const std::vector<std::size_t>& dims, std::uint64_t seed,
                    Activation hidden = Activation::relu, Activation output = Activation::none) {
  if (dims.size() < 2) throw ContractError("init_mlp: need input and output widths");
  for (std::size_t d : dims) {
    if (d == 0) throw ContractError("init_mlp: layer widths must be positive");
  }
  Rng rng(seed);
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const std::size_t in = dims[i], out = dims[i + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::vector<double> w(in * out);
    for (double& v : w) v = rng.uniform(-bound, bound);
    const bool last = i + 2 == dims.size();
    layers.push_back({Tensor(Shape{out, in}, std::move(w)), Tensor::zeros(Shape{out}), last ? output : hidden});
  }
  return Mlp(std::move(layers));
}

inline Tensor forward(const Mlp& net, const Tensor& x) {
  if (x.rank() != 2 || x.shape()[1] != net.input_dim()) {
    throw DimensionError("forward: input " + shape_str(x.shape()) + " does not match network input width " +
                         std::to_string(net.input_dim()));
  }
  Tensor h = x;
  for (const DenseLayer& l : net.layers()) {
    h = add(matmul(h, transpose(l.weight)), l.bias);
    if (l.activation == Activation::relu) h = relu(h);
  }
  return h;
}

// Momentum SGD with L2 weight decay:
//   g <- g + wd * theta;  v <- momentum * v + g;  theta <- theta - lr * v
struct OptimizerState {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<Tensor> velocity;  // lazily zero-initialized, one per parameter
};

inline void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, OptimizerState& state) {
  if (grads.size() != params.size()) throw ContractError("sgd_step: gradient count differs from parameter count");
  if (state.velocity.empty()) {
    for (const Tensor& p : params) state.velocity.push_back(Tensor::zeros(p.shape()));
  }
  if (state.velocity.size() != params.size()) throw ContractError("sgd_step: optimizer state size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = params[i];
    if (grads[i].shape() != p.shape() || state.velocity[i].shape() != p.shape()) {
      throw ContractError("sgd_step: shape mismatch for parameter " + std::to_string(i));
    }
    const std::size_t n = p.numel();
    std::vector<double> theta(n), vel(n);
    for (std::size_t j = 0; j < n; ++j) {
      const double g = grads[i][j] + state.weight_decay * p[j];
      vel[j] = state.momentum * state.velocity[i][j] + g;
      theta[j] = p[j] - state.lr * vel[j];
    }
    params[i] = Tensor(p.shape(), std::move(theta));
    state.velocity[i] = Tensor(p.shape(), std::move(vel));
  }
}

// Steps several networks as one parameter group; `grads` follows the
// concatenated parameter order of `nets`.
inline void sgd_step(const std::vector<Mlp*>& nets, const std::vector<Tensor>& grads, OptimizerState& state) {
  std::vector<Tensor> params;
  for (const Mlp* net : nets) {
    auto p = net->parameters();
    for (Tensor& t : p) params.push_back(t.detach());
  }
  sgd_step(params, grads, state);
  std::size_t offset = 0;
  for (Mlp* net : nets) {
    const std::size_t count = 2 * net->layers().size();
    net->set_parameters(std::vector<Tensor>(params.begin() + static_cast<std::ptrdiff_t>(offset),
                                            params.begin() + static_cast<std::ptrdiff_t>(offset + count)));
    offset += count;
  }
}

// Generator and the two classifiers.
struct Model {
  Mlp generator;
  Mlp classifier1;
  Mlp classifier2;
};

// Checkpoint text format, one block per tensor:
//
//   cgdm-checkpoint 1
//   tensor <name> <rank> <dim0> ... <dimN>
//   <row-major values, %.17g, space separated>
//
// Names are "<net>.<layer>.<weight|bias>" with net in {generator,
// classifier1, classifier2}. Activations are not stored; load into a model of
// the same architecture.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline NamedTensors named_parameters(const Model& model) {
  NamedTensors out;
  auto add_net = [&out](const std::string& prefix, const Mlp& net) {
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
      out.emplace_back(prefix + "." + std::to_string(i) + ".weight", net.layers()[i].weight.detach());
      out.emplace_back(prefix + "." + std::to_string(i) + ".bias", net.layers()[i].bias.detach());
    }
  };
  add_net("generator", model.generator);
  add_net("classifier1", model.classifier1);
  add_net("classifier2", model.classifier2);
  return out;
}

inline void write_checkpoint(std::ostream& os, const NamedTensors& tensors) {
  os << "cgdm-checkpoint 1\n";
  char buf[32];
  for (const auto& [name, t] : tensors) {
    os << "tensor " << name << ' ' << t.rank();
    for (std::size_t d : t.shape()) os << ' ' << d;
    os << '\n';
    for (std::size_t i = 0; i < t.numel(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", t[i]);
      os << (i ? " " : "") << buf;
    }
    os << '\n';
  }
}

inline NamedTensors read_checkpoint(std::istream& is) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(is, line) || line != "cgdm-checkpoint 1") throw ParseError(1, "missing checkpoint header");
  NamedTensors out;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream header(line);
    std::string tag, name;
    std::size_t rank = 0;
    if (!(header >> tag >> name >> rank) || tag != "tensor") throw ParseError(line_no, "expected tensor header");
    Shape shape(rank);
    for (std::size_t& d : shape) {
      if (!(header >> d)) throw ParseError(line_no, "truncated shape");
    }
    if (!std::getline(is, line)) throw ParseError(line_no + 1, "missing values for " + name);
    ++line_no;
    std::istringstream body(line);
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) {
      std::string tok;
      if (!(body >> tok)) throw ParseError(line_no, "too few values for " + name);
      try {
        std::size_t used = 0;
        v = std::stod(tok, &used);
        if (used != tok.size()) throw ParseError(line_no, "bad number '" + tok + "'");
      } catch (const std::logic_error&) {
        throw ParseError(line_no, "bad number '" + tok + "'");
      }
    }
    out.emplace_back(name, Tensor(std::move(shape), std::move(values)));
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write checkpoint " + path);
  write_checkpoint(os, named_parameters(model));
  if (!os) throw IoError("write failed for checkpoint " + path);
}

// Loads parameters into an already-built model of matching architecture.
inline void load_checkpoint(const std::string& path, Model& model) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read checkpoint " + path);
  NamedTensors tensors = read_checkpoint(is);
  NamedTensors expected = named_parameters(model);
  if (tensors.size() != expected.size()) throw ContractError("checkpoint tensor count does not match model");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].first != expected[i].first || tensors[i].second.shape() != expected[i].second.shape()) {
      throw ContractError("checkpoint entry " + tensors[i].first + " does not match model");
    }
  }
  std::size_t k = 0;
  for (Mlp* net : {&model.generator, &model.classifier1, &model.classifier2}) {
    std::vector<Tensor> params;
    for (std::size_t i = 0; i < 2 * net->layers().size(); ++i) params.push_back(tensors[k++].second);
    net->set_parameters(params);
  }
}

}  // namespace cgdm
