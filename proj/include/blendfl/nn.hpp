#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "blendfl/errors.hpp"
#include "blendfl/matrix.hpp"
#include "blendfl/rng.hpp"

namespace blendfl {

/// Flat, ordered model parameters. Per layer: weights [out x in] row-major, then bias [out].
using ParamVector = std::vector<double>;

enum class Activation : std::uint8_t { Identity = 0, Relu = 1, Sigmoid = 2, Softmax = 3 };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Softmax: return "softmax";
  }
  return "?";
}

struct LayerSpec {
  std::size_t input_dim = 1;
  std::size_t output_dim = 1;
  Activation activation = Activation::Identity;

  std::size_t param_count() const noexcept { return input_dim * output_dim + output_dim; }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// A feed-forward stack of dense layers together with its flat parameters.
class Network {
 public:
  Network() = default;

  Network(std::vector<LayerSpec> layers, ParamVector params)
      : layers_(std::move(layers)), params_(std::move(params)) {
    validate_layers(layers_);
    compute_offsets();
    if (params_.size() != expected_param_count())
      throw ShapeError("parameter count " + std::to_string(params_.size()) + " does not match layout (" +
                       std::to_string(expected_param_count()) + ")");
  }

  /// Uniform Glorot initialisation of weights, zero biases.
  static Network initialized(std::vector<LayerSpec> layers, Rng& rng) {
    validate_layers(layers);
    ParamVector params;
    for (const auto& l : layers) {
      const double limit = std::sqrt(6.0 / static_cast<double>(l.input_dim + l.output_dim));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (std::size_t i = 0; i < l.input_dim * l.output_dim; ++i) params.push_back(dist(rng));
      params.insert(params.end(), l.output_dim, 0.0);
    }
    return Network(std::move(layers), std::move(params));
  }

  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const ParamVector& params() const noexcept { return params_; }
  std::size_t depth() const noexcept { return layers_.size(); }
  bool empty() const noexcept { return layers_.empty(); }
  std::size_t input_dim() const { return layers_.front().input_dim; }
  std::size_t output_dim() const { return layers_.back().output_dim; }

  std::size_t weight_offset(std::size_t layer) const { return offsets_[layer]; }
  std::size_t bias_offset(std::size_t layer) const {
    return offsets_[layer] + layers_[layer].input_dim * layers_[layer].output_dim;
  }

  /// Replace parameters with a vector of the same layout.
  void set_params(ParamVector params) {
    if (params.size() != params_.size())
      throw ShapeError("set_params: expected " + std::to_string(params_.size()) + " values, got " +
                       std::to_string(params.size()));
    params_ = std::move(params);
  }

  bool same_architecture(const Network& other) const noexcept { return layers_ == other.layers_; }

  /// FNV-1a over the architecture and the raw parameter bytes. Used to detect stale traces.
  std::uint64_t fingerprint() const noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
      for (int b = 0; b < 8; ++b) {
        h ^= (v >> (8 * b)) & 0xffU;
        h *= 0x100000001b3ULL;
      }
    };
    for (const auto& l : layers_) {
      mix(l.input_dim);
      mix(l.output_dim);
      mix(static_cast<std::uint64_t>(l.activation));
    }
    for (double p : params_) mix(std::bit_cast<std::uint64_t>(p));
    return h;
  }

  friend bool operator==(const Network& a, const Network& b) {
    return a.layers_ == b.layers_ && a.params_ == b.params_;
  }

 private:
  static void validate_layers(const std::vector<LayerSpec>& layers) {
    if (layers.empty()) throw ShapeError("network needs at least one layer");
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const auto& l = layers[k];
      if (l.input_dim < 1 || l.output_dim < 1)
        throw ShapeError("layer " + std::to_string(k) + " has a zero dimension");
      if (l.activation == Activation::Softmax && k + 1 != layers.size())
        throw ShapeError("layer " + std::to_string(k) + ": softmax is only allowed on the final layer");
      if (k + 1 < layers.size() && l.output_dim != layers[k + 1].input_dim)
        throw ShapeError("layer " + std::to_string(k) + " output " + std::to_string(l.output_dim) +
                         " does not feed layer " + std::to_string(k + 1) + " input " +
                         std::to_string(layers[k + 1].input_dim));
    }
  }

  std::size_t expected_param_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.param_count();
    return n;
  }

  void compute_offsets() {
    offsets_.clear();
    std::size_t off = 0;
    for (const auto& l : layers_) {
      offsets_.push_back(off);
      off += l.param_count();
    }
  }

  std::vector<LayerSpec> layers_;
  ParamVector params_;
  std::vector<std::size_t> offsets_;
};

/// Cached intermediates of one forward pass.
struct ForwardTrace {
  Matrix input;
  std::vector<Matrix> pre_activations;
  std::vector<Matrix> activations;
  std::uint64_t network_fingerprint = 0;

  std::size_t depth() const noexcept { return activations.size(); }
};

struct ForwardResult {
  Matrix output;
  ForwardTrace trace;
};

struct BackwardResult {
  ParamVector param_grad;
  Matrix input_grad;
};

namespace detail {

inline Matrix dense(const Network& net, std::size_t k, const Matrix& x) {
  const auto& l = net.layers()[k];
  const double* w = net.params().data() + net.weight_offset(k);
  const double* b = net.params().data() + net.bias_offset(k);
  Matrix z(x.rows(), l.output_dim);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xr = x.row(r);
    for (std::size_t o = 0; o < l.output_dim; ++o) {
      double s = b[o];
      const double* wo = w + o * l.input_dim;
      for (std::size_t i = 0; i < l.input_dim; ++i) s += wo[i] * xr[i];
      z(r, o) = s;
    }
  }
  return z;
}

inline Matrix activate(Activation act, const Matrix& z) {
  Matrix a = z;
  switch (act) {
    case Activation::Identity: break;
    case Activation::Relu:
      for (double& v : a.values()) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::Sigmoid:
      for (double& v : a.values()) v = 1.0 / (1.0 + std::exp(-v));
      break;
    case Activation::Softmax:
      for (std::size_t r = 0; r < a.rows(); ++r) {
        auto row = a.row(r);
        double mx = row[0];
        for (double v : row) mx = std::max(mx, v);
        double sum = 0.0;
        for (double& v : row) {
          v = std::exp(v - mx);
          sum += v;
        }
        for (double& v : row) v /= sum;
      }
      break;
  }
  return a;
}

// dL/dz given dL/da, the pre-activation z and the activation a.
inline Matrix activation_backward(Activation act, const Matrix& z, const Matrix& a, const Matrix& grad) {
  Matrix dz(grad.rows(), grad.cols());
  switch (act) {
    case Activation::Identity: dz = grad; break;
    case Activation::Relu:
      for (std::size_t i = 0; i < dz.values().size(); ++i)
        dz.values()[i] = z.values()[i] > 0.0 ? grad.values()[i] : 0.0;
      break;
    case Activation::Sigmoid:
      for (std::size_t i = 0; i < dz.values().size(); ++i) {
        const double s = a.values()[i];
        dz.values()[i] = grad.values()[i] * s * (1.0 - s);
      }
      break;
    case Activation::Softmax:
      for (std::size_t r = 0; r < grad.rows(); ++r) {
        auto s = a.row(r);
        auto g = grad.row(r);
        double dot = 0.0;
        for (std::size_t j = 0; j < s.size(); ++j) dot += g[j] * s[j];
        for (std::size_t j = 0; j < s.size(); ++j) dz(r, j) = s[j] * (g[j] - dot);
      }
      break;
  }
  return dz;
}

}  // namespace detail

inline ForwardResult forward(const Network& net, const Matrix& batch) {
  if (net.empty()) throw ShapeError("forward on an empty network");
  if (batch.rows() < 1) throw ShapeError("forward needs at least one row");
  ForwardTrace trace;
  trace.input = batch;
  trace.network_fingerprint = net.fingerprint();
  const Matrix* x = &trace.input;
  for (std::size_t k = 0; k < net.depth(); ++k) {
    if (x->cols() != net.layers()[k].input_dim)
      throw ShapeError("layer " + std::to_string(k) + " expects " + std::to_string(net.layers()[k].input_dim) +
                       " inputs, got " + std::to_string(x->cols()));
    trace.pre_activations.push_back(detail::dense(net, k, *x));
    trace.activations.push_back(detail::activate(net.layers()[k].activation, trace.pre_activations.back()));
    x = &trace.activations.back();
  }
  Matrix output = trace.activations.back();
  return {std::move(output), std::move(trace)};
}

/// Forward pass without keeping the trace.
inline Matrix predict(const Network& net, const Matrix& batch) {
  if (net.empty()) throw ShapeError("predict on an empty network");
  Matrix x = batch;
  for (std::size_t k = 0; k < net.depth(); ++k) {
    if (x.cols() != net.layers()[k].input_dim)
      throw ShapeError("layer " + std::to_string(k) + " expects " + std::to_string(net.layers()[k].input_dim) +
                       " inputs, got " + std::to_string(x.cols()));
    x = detail::activate(net.layers()[k].activation, detail::dense(net, k, x));
  }
  return x;
}

/// Chain rule through a cached trace. output_grad is dL/d(output); gradients are
/// summed over rows, so any batch averaging belongs in output_grad.
inline BackwardResult backward(const Network& net, const ForwardTrace& trace, const Matrix& output_grad) {
  if (trace.depth() != net.depth() || trace.pre_activations.size() != net.depth())
    throw TraceError("trace depth " + std::to_string(trace.depth()) + " does not match network depth " +
                     std::to_string(net.depth()));
  if (trace.network_fingerprint != net.fingerprint())
    throw TraceError("trace was produced by different parameters (stale trace)");
  if (!output_grad.same_shape(trace.activations.back()))
    throw ShapeError("output gradient " + output_grad.shape_string() + " does not match forward output " +
                     trace.activations.back().shape_string());

  BackwardResult result;
  result.param_grad.assign(net.params().size(), 0.0);
  Matrix grad = output_grad;
  for (std::size_t k = net.depth(); k-- > 0;) {
    const auto& l = net.layers()[k];
    const Matrix& x = k == 0 ? trace.input : trace.activations[k - 1];
    const Matrix dz = detail::activation_backward(l.activation, trace.pre_activations[k], trace.activations[k], grad);
    double* gw = result.param_grad.data() + net.weight_offset(k);
    double* gb = result.param_grad.data() + net.bias_offset(k);
    const double* w = net.params().data() + net.weight_offset(k);
    Matrix gx(x.rows(), l.input_dim);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      auto xr = x.row(r);
      auto gxr = gx.row(r);
      for (std::size_t o = 0; o < l.output_dim; ++o) {
        const double d = dz(r, o);
        gb[o] += d;
        double* gwo = gw + o * l.input_dim;
        const double* wo = w + o * l.input_dim;
        for (std::size_t i = 0; i < l.input_dim; ++i) {
          gwo[i] += d * xr[i];
          gxr[i] += d * wo[i];
        }
      }
    }
    grad = std::move(gx);
  }
  result.input_grad = std::move(grad);
  return result;
}

inline Network sgd_step(Network net, const ParamVector& grad, double lr) {
  if (grad.size() != net.params().size())
    throw ShapeError("gradient layout (" + std::to_string(grad.size()) + ") does not match network (" +
                     std::to_string(net.params().size()) + ")");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw NumericError("learning rate must be finite and non-negative");
  ParamVector p = net.params();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!std::isfinite(grad[i])) throw NumericError("non-finite gradient entry at index " + std::to_string(i));
    p[i] -= lr * grad[i];
    if (!std::isfinite(p[i])) throw NumericError("parameter " + std::to_string(i) + " became non-finite");
  }
  net.set_params(std::move(p));
  return net;
}

/// Chains two networks: first's output feeds second's input.
inline Network concat(const Network& first, const Network& second) {
  std::vector<LayerSpec> layers = first.layers();
  layers.insert(layers.end(), second.layers().begin(), second.layers().end());
  ParamVector params = first.params();
  params.insert(params.end(), second.params().begin(), second.params().end());
  return Network(std::move(layers), std::move(params));
}

enum class LossKind { BinaryCrossEntropy, CategoricalCrossEntropy };

inline constexpr double kProbabilityFloor = 1e-12;

struct LossResult {
  double loss = 0.0;
  Matrix output_grad;
};

/// Mean cross-entropy over the batch and its exact derivative w.r.t. the network output.
/// Binary: one sigmoid column, labels in {0,1}. Categorical: k probability columns.
inline LossResult loss_and_grad(const Matrix& output, std::span<const int> labels, LossKind kind) {
  if (output.rows() != labels.size())
    throw ShapeError("loss: " + std::to_string(output.rows()) + " outputs vs " + std::to_string(labels.size()) +
                     " labels");
  if (output.rows() == 0) throw ShapeError("loss on an empty batch");
  const double n = static_cast<double>(output.rows());
  LossResult res{0.0, Matrix(output.rows(), output.cols())};
  for (std::size_t r = 0; r < output.rows(); ++r) {
    const int y = labels[r];
    if (kind == LossKind::BinaryCrossEntropy) {
      if (output.cols() != 1) throw ShapeError("binary cross-entropy expects a single output column");
      if (y != 0 && y != 1) throw DataError("binary label " + std::to_string(y) + " out of range");
      const double p = output(r, 0);
      const double q = y == 1 ? p : 1.0 - p;
      if (q > kProbabilityFloor) {
        res.loss -= std::log(q);
        res.output_grad(r, 0) = (y == 1 ? -1.0 : 1.0) / (q * n);
      } else {
        res.loss -= std::log(kProbabilityFloor);
      }
    } else {
      if (y < 0 || static_cast<std::size_t>(y) >= output.cols())
        throw DataError("class label " + std::to_string(y) + " out of range [0," + std::to_string(output.cols()) +
                        ")");
      const double p = output(r, static_cast<std::size_t>(y));
      if (p > kProbabilityFloor) {
        res.loss -= std::log(p);
        res.output_grad(r, static_cast<std::size_t>(y)) = -1.0 / (p * n);
      } else {
        res.loss -= std::log(kProbabilityFloor);
      }
    }
  }
  res.loss /= n;
  return res;
}

}  // namespace blendfl
