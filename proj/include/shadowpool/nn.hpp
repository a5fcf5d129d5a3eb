#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "shadowpool/matrix.hpp"
#include "shadowpool/rng.hpp"

namespace shadowpool {

inline constexpr double kProbClamp = 1e-12;  // floor for probabilities inside logs

enum class Activation { kReLU, kIdentity };

// Affine map followed by an element-wise activation. weight is out×in.
struct LinearLayer {
  Matrix weight;
  std::vector<double> bias;
  Activation activation = Activation::kReLU;

  size_t in_width() const { return weight.cols; }
  size_t out_width() const { return weight.rows; }
};

// Uniform init in ±1/sqrt(fan_in).
inline LinearLayer make_layer(size_t in, size_t out, Activation act, RandomSource& rng) {
  LinearLayer layer;
  layer.weight = Matrix(out, in);
  layer.bias.assign(out, 0.0);
  layer.activation = act;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (double& w : layer.weight.values) w = rng.uniform(-bound, bound);
  for (double& b : layer.bias) b = rng.uniform(-bound, bound);
  return layer;
}

inline Matrix layer_forward(const LinearLayer& layer, const Matrix& x) {
  if (x.cols != layer.in_width()) throw ShapeError("layer_forward: input width mismatch");
  Matrix out = matmul_nt(x, layer.weight);
  for (size_t i = 0; i < out.rows; ++i) {
    double* oi = out.values.data() + i * out.cols;
    for (size_t j = 0; j < out.cols; ++j) {
      double v = oi[j] + layer.bias[j];
      if (layer.activation == Activation::kReLU && v < 0.0) v = 0.0;
      oi[j] = v;
    }
  }
  return out;
}

// Caches the input and post-activation output of every traversed layer.
// A tape backs exactly one backward pass.
struct GradientTape {
  std::vector<Matrix> inputs;
  std::vector<Matrix> outputs;
  bool consumed = false;
};

using LayerStack = std::vector<const LinearLayer*>;

inline Matrix forward_stack(std::span<const LinearLayer* const> layers, const Matrix& x,
                            GradientTape* tape = nullptr) {
  if (layers.empty()) throw InputError("forward_stack: empty layer stack");
  if (x.rows < 1) throw InputError("forward_stack: batch size must be >= 1");
  if (tape) {
    tape->inputs.clear();
    tape->outputs.clear();
    tape->consumed = false;
  }
  Matrix current = x;
  for (size_t i = 0; i < layers.size(); ++i) {
    if (current.cols != layers[i]->in_width()) {
      throw ShapeError("forward_stack: width mismatch at layer " + std::to_string(i));
    }
    Matrix next = layer_forward(*layers[i], current);
    if (tape) {
      tape->inputs.push_back(std::move(current));
      tape->outputs.push_back(next);
    }
    current = std::move(next);
  }
  ensure_finite(current, "forward_stack output");
  return current;
}

inline Matrix forward_stack(const LayerStack& layers, const Matrix& x,
                            GradientTape* tape = nullptr) {
  return forward_stack(std::span<const LinearLayer* const>(layers), x, tape);
}

struct LayerGrad {
  Matrix weight;
  std::vector<double> bias;
};

struct StackGradients {
  std::vector<LayerGrad> layers;
  Matrix input;  // gradient w.r.t. the stack input
};

// Backpropagates upstream_grad (w.r.t. the stack output) through the stack.
// output_injections[i], when present, is an extra gradient added at the
// post-activation output of layer i (used for losses on hidden activations).
inline StackGradients backward_stack(std::span<const LinearLayer* const> layers,
                                     GradientTape& tape, const Matrix& upstream_grad,
                                     const std::map<size_t, Matrix>* output_injections = nullptr) {
  if (tape.consumed) throw StateError("backward_stack: tape already consumed");
  if (tape.inputs.size() != layers.size() || tape.outputs.size() != layers.size()) {
    throw StateError("backward_stack: tape does not match layer stack");
  }
  if (!upstream_grad.same_shape(tape.outputs.back())) {
    throw ShapeError("backward_stack: upstream gradient shape mismatch");
  }
  tape.consumed = true;

  StackGradients grads;
  grads.layers.resize(layers.size());
  Matrix flowing = upstream_grad;
  for (size_t idx = layers.size(); idx-- > 0;) {
    const LinearLayer& layer = *layers[idx];
    const Matrix& input = tape.inputs[idx];
    const Matrix& output = tape.outputs[idx];
    if (output_injections) {
      auto it = output_injections->find(idx);
      if (it != output_injections->end()) {
        if (!it->second.same_shape(flowing)) {
          throw ShapeError("backward_stack: injected gradient shape mismatch at layer " +
                           std::to_string(idx));
        }
        for (size_t k = 0; k < flowing.values.size(); ++k) {
          flowing.values[k] += it->second.values[k];
        }
      }
    }
    // Through the activation: ReLU passes gradient only where output > 0.
    Matrix dz = flowing;
    if (layer.activation == Activation::kReLU) {
      for (size_t k = 0; k < dz.values.size(); ++k) {
        if (output.values[k] <= 0.0) dz.values[k] = 0.0;
      }
    }
    LayerGrad& lg = grads.layers[idx];
    lg.weight = matmul_tn(dz, input);  // out×in
    lg.bias.assign(layer.out_width(), 0.0);
    for (size_t i = 0; i < dz.rows; ++i) {
      const double* di = dz.values.data() + i * dz.cols;
      for (size_t j = 0; j < dz.cols; ++j) lg.bias[j] += di[j];
    }
    flowing = matmul_nn(dz, layer.weight);  // batch×in
  }
  grads.input = std::move(flowing);
  return grads;
}

inline StackGradients backward_stack(const LayerStack& layers, GradientTape& tape,
                                     const Matrix& upstream_grad,
                                     const std::map<size_t, Matrix>* output_injections = nullptr) {
  return backward_stack(std::span<const LinearLayer* const>(layers), tape, upstream_grad,
                        output_injections);
}

// Row-wise softmax with per-row max subtraction.
inline Matrix softmax(const Matrix& logits) {
  Matrix out(logits.rows, logits.cols);
  for (size_t i = 0; i < logits.rows; ++i) {
    const double* li = logits.values.data() + i * logits.cols;
    double* oi = out.values.data() + i * out.cols;
    double mx = li[0];
    for (size_t j = 1; j < logits.cols; ++j) mx = std::max(mx, li[j]);
    double sum = 0.0;
    for (size_t j = 0; j < logits.cols; ++j) {
      oi[j] = std::exp(li[j] - mx);
      sum += oi[j];
    }
    for (size_t j = 0; j < logits.cols; ++j) oi[j] /= sum;
  }
  return out;
}

// Mean over the batch of -ln p[label].
inline double cross_entropy(const Matrix& probs, std::span<const int> labels) {
  if (probs.rows != labels.size()) throw ShapeError("cross_entropy: label count mismatch");
  double total = 0.0;
  for (size_t i = 0; i < probs.rows; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<size_t>(y) >= probs.cols) {
      throw InputError("cross_entropy: label out of range at row " + std::to_string(i));
    }
    total += -std::log(std::max(probs.at(i, static_cast<size_t>(y)), kProbClamp));
  }
  return total / static_cast<double>(probs.rows);
}

// d(cross_entropy)/d(logits) = (p - onehot) / batch.
inline Matrix cross_entropy_logit_grad(const Matrix& probs, std::span<const int> labels) {
  if (probs.rows != labels.size()) throw ShapeError("cross_entropy_logit_grad: label count mismatch");
  Matrix grad = probs;
  const double inv_batch = 1.0 / static_cast<double>(probs.rows);
  for (size_t i = 0; i < probs.rows; ++i) {
    grad.at(i, static_cast<size_t>(labels[i])) -= 1.0;
    for (size_t j = 0; j < probs.cols; ++j) grad.at(i, j) *= inv_batch;
  }
  return grad;
}

// Sum p * ln(p/q), entries clamped below at kProbClamp before the log.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("kl_divergence: length mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double pi = std::max(p[i], kProbClamp);
    const double qi = std::max(q[i], kProbClamp);
    acc += pi * (std::log(pi) - std::log(qi));
  }
  return acc;
}

// Backpropagates a gradient on softmax outputs onto the logits, row-wise.
inline Matrix softmax_backward(const Matrix& probs, const Matrix& prob_grad) {
  if (!probs.same_shape(prob_grad)) throw ShapeError("softmax_backward: shape mismatch");
  Matrix out(probs.rows, probs.cols);
  for (size_t i = 0; i < probs.rows; ++i) {
    const double* pi = probs.values.data() + i * probs.cols;
    const double* gi = prob_grad.values.data() + i * probs.cols;
    double inner = 0.0;
    for (size_t j = 0; j < probs.cols; ++j) inner += gi[j] * pi[j];
    double* oi = out.values.data() + i * out.cols;
    for (size_t j = 0; j < probs.cols; ++j) oi[j] = pi[j] * (gi[j] - inner);
  }
  return out;
}

}  // namespace shadowpool
