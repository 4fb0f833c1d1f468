// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lptq/error.hpp"
#include "lptq/nn/conv.hpp"
#include "lptq/quant.hpp"
#include "lptq/tensor.hpp"

namespace lptq::nn {

enum class Activation : std::uint8_t { none = 0, relu = 1 };
enum class Precision : std::uint8_t { fp = 0, int8 = 1 };

/// Backbone layers form a chain in list order; every head consumes the
/// output of the last backbone layer.
enum class LayerRole : std::uint8_t { backbone = 0, head_cls = 1, head_reg = 2 };

/// One convolution with batch-norm already folded into weight and bias.
template <typename T>
struct LayerSpec {
  std::string name;
  LayerRole role = LayerRole::backbone;
  Tensor<T> weight;  // out_ch x in_ch x kH x kW
  Tensor<T> bias;    // out_ch
  int stride = 1;
  int padding = 0;
  Activation activation = Activation::relu;
  std::optional<QuantParams> w_quant;
  std::optional<QuantParams> a_quant;
  std::optional<RoundingOffsets<T>> theta;
  Precision precision = Precision::fp;
  bool fp_exempt = false;  // never quantized by the pipeline

  int out_ch() const { return weight.dim(0); }
  int in_ch() const { return weight.dim(1); }
  bool quantized() const { return precision == Precision::int8; }

  void validate() const {
    if (weight.rank() != 4) throw ShapeError(name + ": weight must be OIHW");
    if (bias.rank() != 1 || bias.dim(0) != out_ch()) {
      throw ShapeError(name + ": bias length " + bias.shape_str() + " != out_ch " +
                       std::to_string(out_ch()));
    }
    if (stride < 1 || padding < 0) throw ShapeError(name + ": bad stride/padding");
    if (theta) {
      if (!w_quant) throw ParamError(name + ": rounding offsets without weight quantizer");
      if (theta->theta.shape() != weight.shape()) {
        throw ShapeError(name + ": rounding offsets " + theta->theta.shape_str() +
                         " vs weight " + weight.shape_str());
      }
    }
    if (quantized() && (!w_quant || !a_quant)) {
      throw ParamError(name + ": int8 layer needs both weight and input quantizers");
    }
  }

  /// Effective weight: Ŵ for int8 layers, W otherwise.
  Tensor<T> effective_weight() const {
    if (!quantized()) return weight;
    return fake_quant(weight, *w_quant, theta ? &*theta : nullptr);
  }

  template <typename U>
  LayerSpec<U> cast() const {
    LayerSpec<U> o;
    o.name = name;
    o.role = role;
    o.weight = weight.template cast<U>();
    o.bias = bias.template cast<U>();
    o.stride = stride;
    o.padding = padding;
    o.activation = activation;
    o.w_quant = w_quant;
    o.a_quant = a_quant;
    if (theta) o.theta = RoundingOffsets<U>{theta->theta.template cast<U>()};
    o.precision = precision;
    o.fp_exempt = fp_exempt;
    return o;
  }
};

template <typename T>
struct Network {
  std::vector<LayerSpec<T>> layers;
  int input_channels = 0;

  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].name == name) return static_cast<int>(i);
    }
    throw Error("unknown layer '" + name + "'");
  }

  int last_backbone() const {
    int last = -1;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].role == LayerRole::backbone) last = static_cast<int>(i);
    }
    return last;
  }

  /// Index of the layer whose output feeds layer `i`, or -1 for the input.
  int producer_of(int i) const {
    if (layers[i].role != LayerRole::backbone) return last_backbone();
    for (int j = i - 1; j >= 0; --j) {
      if (layers[j].role == LayerRole::backbone) return j;
    }
    return -1;
  }

  void validate() const {
    if (layers.empty()) throw ShapeError("network has no layers");
    bool seen_head = false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      l.validate();
      if (l.role == LayerRole::backbone && seen_head) {
        throw ShapeError("backbone layer '" + l.name + "' after a head");
      }
      seen_head = seen_head || l.role != LayerRole::backbone;
      const int p = producer_of(static_cast<int>(i));
      const int expect = p < 0 ? input_channels : layers[p].out_ch();
      if (l.in_ch() != expect) {
        throw ShapeError("layer '" + l.name + "' expects " + std::to_string(l.in_ch()) +
                         " channels, producer gives " + std::to_string(expect));
      }
    }
  }

  template <typename U>
  Network<U> cast() const {
    Network<U> o;
    o.input_channels = input_channels;
    for (const auto& l : layers) o.layers.push_back(l.template cast<U>());
    return o;
  }

  /// Copy with every layer switched back to full precision.
  Network as_fp() const {
    Network o = *this;
    for (auto& l : o.layers) l.precision = Precision::fp;
    return o;
  }
};

/// One layer of the forward computation: conv2d with the layer's precision
/// mode, then its activation. Int8 layers fake-quantize both the input (Î)
/// and the weight (Ŵ) first.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const LayerSpec<T>& layer) {
  if (input.rank() != 4 || input.dim(1) != layer.in_ch()) {
    throw ShapeError("layer '" + layer.name + "': input " + input.shape_str() +
                     " incompatible with weight " + layer.weight.shape_str());
  }
  Tensor<T> y = layer.quantized()
                    ? conv2d_raw(fake_quant(input, *layer.a_quant), layer.effective_weight(),
                                 layer.bias, layer.stride, layer.padding)
                    : conv2d_raw(input, layer.weight, layer.bias, layer.stride, layer.padding);
  if (layer.activation == Activation::relu) relu_inplace(y);
  return y;
}

/// Outputs of every layer, index-aligned with `net.layers`.
template <typename T>
std::vector<Tensor<T>> forward_all(const Network<T>& net, const Tensor<T>& input) {
  std::vector<Tensor<T>> outs(net.layers.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const int p = net.producer_of(static_cast<int>(i));
    outs[i] = conv2d(p < 0 ? input : outs[p], net.layers[i]);
  }
  return outs;
}

/// Run the network; with `stop_after` return that layer's activation,
/// otherwise the output of the last layer.
template <typename T>
Tensor<T> forward(const Network<T>& net, const Tensor<T>& input,
                  const std::optional<std::string>& stop_after = std::nullopt) {
  const int stop = stop_after ? net.index_of(*stop_after)
                              : static_cast<int>(net.layers.size()) - 1;
  std::vector<Tensor<T>> outs(net.layers.size());
  for (int i = 0; i <= stop; ++i) {
    const int p = net.producer_of(i);
    if (net.layers[i].role != LayerRole::backbone && i != stop) continue;
    outs[i] = conv2d(p < 0 ? input : outs[p], net.layers[i]);
  }
  return outs[stop];
}

// ---------------------------------------------------------------------------
// Reverse mode
// ---------------------------------------------------------------------------

enum class ParamKind : std::uint8_t { weight, bias, w_scale, a_scale, theta, input };

struct ParamRef {
  int layer = 0;
  ParamKind kind = ParamKind::weight;
  auto operator<=>(const ParamRef&) const = default;
};

template <typename T>
struct LayerRecord {
  Tensor<T> input;     // I
  Tensor<T> q_input;   // Î, equal to I for fp layers
  Tensor<T> q_weight;  // Ŵ, equal to W for fp layers
  Tensor<T> output;    // post-activation
};

/// Forward computation retained for backward(). Layers before `start` are
/// not on the trace.
template <typename T>
struct Trace {
  int start = 0;
  std::vector<std::optional<LayerRecord<T>>> records;

  const Tensor<T>& output(int layer) const { return records.at(layer)->output; }
  bool on_trace(int layer) const {
    return layer >= 0 && layer < static_cast<int>(records.size()) && records[layer].has_value();
  }
};

/// Forward pass from layer `start` (a backbone layer) whose input is
/// `input`, recording what backward() needs.
template <typename T>
Trace<T> forward_traced(const Network<T>& net, const Tensor<T>& input, int start = 0) {
  if (start < 0 || start >= static_cast<int>(net.layers.size()) ||
      net.layers[start].role != LayerRole::backbone) {
    throw Error("forward_traced: start layer must be a backbone layer");
  }
  Trace<T> tr;
  tr.start = start;
  tr.records.resize(net.layers.size());
  for (int i = start; i < static_cast<int>(net.layers.size()); ++i) {
    const auto& l = net.layers[i];
    const int p = net.producer_of(i);
    LayerRecord<T> rec;
    rec.input = i == start ? input : tr.records[p]->output;
    if (rec.input.rank() != 4 || rec.input.dim(1) != l.in_ch()) {
      throw ShapeError("layer '" + l.name + "': input " + rec.input.shape_str() +
                       " incompatible with weight " + l.weight.shape_str());
    }
    rec.q_input = l.quantized() ? fake_quant(rec.input, *l.a_quant) : rec.input;
    rec.q_weight = l.effective_weight();
    rec.output = conv2d_raw(rec.q_input, rec.q_weight, l.bias, l.stride, l.padding);
    if (l.activation == Activation::relu) relu_inplace(rec.output);
    tr.records[i] = std::move(rec);
  }
  return tr;
}

template <typename T>
struct Gradients {
  std::map<ParamRef, Tensor<T>> tensors;
  std::map<ParamRef, double> scalars;

  const Tensor<T>& tensor(int layer, ParamKind k) const {
    auto it = tensors.find({layer, k});
    if (it == tensors.end()) throw Error("gradient not computed");
    return it->second;
  }
  double scalar(int layer, ParamKind k) const {
    auto it = scalars.find({layer, k});
    if (it == scalars.end()) throw Error("gradient not computed");
    return it->second;
  }
};

/// Reverse-mode gradients of a scalar loss whose partial derivatives with
/// respect to some layer outputs are given in `output_grads` (layer index ->
/// dL/d output). Fake-quant nodes follow the straight-through contract of
/// fake_quant_backward().
template <typename T>
Gradients<T> backward(const Network<T>& net, const Trace<T>& trace,
                      const std::map<int, Tensor<T>>& output_grads,
                      const std::vector<ParamRef>& wanted) {
  const int n_layers = static_cast<int>(net.layers.size());
  int earliest = n_layers;
  for (const auto& r : wanted) {
    if (!trace.on_trace(r.layer)) {
      throw Error("parameter of layer " + std::to_string(r.layer) + " is not on the trace");
    }
    const auto& l = net.layers[r.layer];
    const bool needs_quant = r.kind == ParamKind::w_scale || r.kind == ParamKind::a_scale ||
                             r.kind == ParamKind::theta;
    if (needs_quant && !l.quantized()) {
      throw Error("layer '" + l.name + "' is full precision; its quantizers are not on the trace");
    }
    if (r.kind == ParamKind::theta && !l.theta) {
      throw Error("layer '" + l.name + "' has no rounding offsets");
    }
    if (r.kind == ParamKind::input && r.layer != trace.start) {
      throw Error("input gradient is only available for the trace start layer");
    }
    earliest = std::min(earliest, r.layer);
  }
  auto wants = [&](int layer, ParamKind k) {
    for (const auto& r : wanted) {
      if (r.layer == layer && r.kind == k) return true;
    }
    return false;
  };

  std::vector<Tensor<T>> dout(net.layers.size());
  for (const auto& [layer, g] : output_grads) {
    if (!trace.on_trace(layer)) throw Error("output gradient for a layer not on the trace");
    if (g.shape() != trace.output(layer).shape()) {
      throw ShapeError("output gradient " + g.shape_str() + " for layer " +
                       std::to_string(layer));
    }
    dout[layer] = g;
  }

  Gradients<T> grads;
  for (int i = n_layers - 1; i >= earliest; --i) {
    if (!trace.on_trace(i)) continue;
    const auto& l = net.layers[i];
    const auto& rec = *trace.records[i];
    const bool has_grad = !dout[i].empty();
    Tensor<T> dpre = has_grad ? dout[i] : Tensor<T>(rec.output.shape());
    if (l.activation == Activation::relu) {
      for (std::size_t k = 0; k < dpre.size(); ++k) {
        if (!(rec.output[k] > T{0})) dpre[k] = T{0};
      }
    }
    const bool want_w = wants(i, ParamKind::weight) || wants(i, ParamKind::w_scale) ||
                        wants(i, ParamKind::theta);
    const bool want_b = wants(i, ParamKind::bias);
    const int p = net.producer_of(i);
    const bool propagate = (p >= earliest && p >= trace.start) || wants(i, ParamKind::a_scale) ||
                           wants(i, ParamKind::input);
    auto cg = conv2d_backward(rec.q_input, rec.q_weight, l.stride, l.padding, dpre, propagate,
                              want_w, want_b);
    if (want_b) grads.tensors[{i, ParamKind::bias}] = std::move(cg.db);
    if (want_w) {
      if (l.quantized()) {
        const auto* th = l.theta ? &*l.theta : nullptr;
        auto fg = fake_quant_backward(l.weight, *l.w_quant, th, cg.dw);
        if (wants(i, ParamKind::weight)) grads.tensors[{i, ParamKind::weight}] = std::move(fg.dx);
        if (wants(i, ParamKind::theta)) grads.tensors[{i, ParamKind::theta}] = std::move(fg.dtheta);
        if (wants(i, ParamKind::w_scale)) grads.scalars[{i, ParamKind::w_scale}] = fg.dscale;
      } else {
        grads.tensors[{i, ParamKind::weight}] = std::move(cg.dw);
      }
    }
    if (!propagate) continue;
    Tensor<T> dinput;
    if (l.quantized()) {
      auto fg = fake_quant_backward<T>(rec.input, *l.a_quant, nullptr, cg.dx);
      if (wants(i, ParamKind::a_scale)) grads.scalars[{i, ParamKind::a_scale}] = fg.dscale;
      dinput = std::move(fg.dx);
    } else {
      dinput = std::move(cg.dx);
    }
    if (i == trace.start) {
      if (wants(i, ParamKind::input)) grads.tensors[{i, ParamKind::input}] = std::move(dinput);
      continue;
    }
    if (p < 0) continue;
    if (dout[p].empty()) {
      dout[p] = std::move(dinput);
    } else {
      for (std::size_t k = 0; k < dinput.size(); ++k) dout[p][k] += dinput[k];
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Batch norm
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma, beta, mean, var;
  double eps = 1e-5;
};

/// Fold inference-mode batch norm into the preceding convolution:
/// w' = w * gamma / sqrt(var + eps), b' = (b - mean) * gamma / sqrt(var + eps) + beta.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> fold_batchnorm(const Tensor<T>& conv_w, const Tensor<T>& conv_b,
                                               const BatchNormParams<T>& bn) {
  const int oc = conv_w.dim(0);
  for (const Tensor<T>* t : {&conv_b, &bn.gamma, &bn.beta, &bn.mean, &bn.var}) {
    if (static_cast<int>(t->size()) != oc) {
      throw ShapeError("fold_batchnorm: per-channel parameter of length " +
                       std::to_string(t->size()) + ", expected " + std::to_string(oc));
    }
  }
  Tensor<T> w = conv_w;
  Tensor<T> b({oc});
  const std::size_t per = conv_w.size() / static_cast<std::size_t>(oc);
  for (int o = 0; o < oc; ++o) {
    if (bn.var[o] < T{0}) throw ParamError("fold_batchnorm: negative variance in channel " +
                                           std::to_string(o));
    const T k = bn.gamma[o] / std::sqrt(bn.var[o] + static_cast<T>(bn.eps));
    for (std::size_t j = 0; j < per; ++j) w[o * per + j] *= k;
    b[o] = (conv_b[o] - bn.mean[o]) * k + bn.beta[o];
  }
  return {std::move(w), std::move(b)};
}

/// Unfolded inference batch norm over NCHW; used to check folding.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const BatchNormParams<T>& bn) {
  Tensor<T> y = x;
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const T k = bn.gamma[ch] / std::sqrt(bn.var[ch] + static_cast<T>(bn.eps));
      T* p = y.ptr() + (static_cast<std::size_t>(b) * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) p[j] = (p[j] - bn.mean[ch]) * k + bn.beta[ch];
    }
  }
  return y;
}

}  // namespace lptq::nn
