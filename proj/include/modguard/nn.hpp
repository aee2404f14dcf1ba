#pragma once

// Small differentiable conv/dense network with hand-written reverse mode.
//
// A model is a chain of layers over a C x H x W input (flattening is implicit
// when a dense layer follows a convolution). One hidden activation is marked
// as the feature layer; its output is the representation handed to run-time
// detectors. Gradients are available with respect to every parameter and to
// the input, and vector-Jacobian products can start at either the logits or
// the feature layer.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "modguard/error.hpp"
#include "modguard/rng.hpp"

namespace modguard::nn {

struct Shape3 {
  std::size_t c = 1, h = 1, w = 1;
  std::size_t size() const { return c * h * w; }
  bool operator==(const Shape3&) const = default;
};

/// Row-major dense array with an explicit shape.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0)
      : shape(std::move(s)), data(element_count(shape), fill) {}

  static std::size_t element_count(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t rows() const { return shape.empty() ? 0 : shape.front(); }
  std::size_t row_size() const { return rows() == 0 ? 0 : data.size() / rows(); }
  std::span<double> row(std::size_t i) { return {data.data() + i * row_size(), row_size()}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * row_size(), row_size()}; }

  bool operator==(const Tensor&) const = default;
};

/// Probability vector over K classes.
struct LabelDist {
  std::vector<double> probs;

  static LabelDist one_hot(std::size_t k, std::size_t y) {
    LabelDist d{std::vector<double>(k, 0.0)};
    d.probs.at(y) = 1.0;
    return d;
  }
  static LabelDist uniform(std::size_t k) { return {std::vector<double>(k, 1.0 / static_cast<double>(k))}; }
  std::size_t size() const { return probs.size(); }
};

struct Conv2d {
  std::size_t out_channels = 0, kh = 0, kw = 0;
  Shape3 in, out;
  std::vector<double> weight;  // [out][in.c][kh][kw]
  std::vector<double> bias;    // [out]
};

struct Relu {
  Shape3 shape;
};

struct Dense {
  std::size_t in = 0, out = 0;
  std::vector<double> weight;  // [out][in]
  std::vector<double> bias;    // [out]
};

using Layer = std::variant<Conv2d, Relu, Dense>;

struct LayerSpec {
  enum class Kind : std::uint8_t { Conv = 1, Relu = 2, Dense = 3 };
  Kind kind = Kind::Relu;
  std::size_t out = 0, kh = 0, kw = 0;

  static LayerSpec conv(std::size_t out, std::size_t kh, std::size_t kw) { return {Kind::Conv, out, kh, kw}; }
  static LayerSpec relu() { return {Kind::Relu, 0, 0, 0}; }
  static LayerSpec dense(std::size_t out) { return {Kind::Dense, out, 0, 0}; }
  bool operator==(const LayerSpec&) const = default;
};

/// Per-parameter-tensor gradient buffers, in the order of Model::parameters().
using ParamGrads = std::vector<std::vector<double>>;

class Model {
public:
  Model() = default;

  /// `feature_layer` indexes the layer whose output is the feature vector.
  Model(Shape3 input, std::vector<LayerSpec> specs, std::size_t feature_layer)
      : input_(input), specs_(std::move(specs)), feature_layer_(feature_layer) {
    if (specs_.empty()) throw ShapeError("model needs at least one layer");
    if (feature_layer_ >= specs_.size()) throw ShapeError("feature layer index out of range");
    Shape3 cur = input_;
    for (const auto& s : specs_) {
      switch (s.kind) {
        case LayerSpec::Kind::Conv: {
          if (s.out == 0 || s.kh == 0 || s.kw == 0 || s.kh > cur.h || s.kw > cur.w)
            throw ShapeError("convolution kernel does not fit its input");
          Conv2d c;
          c.out_channels = s.out;
          c.kh = s.kh;
          c.kw = s.kw;
          c.in = cur;
          c.out = {s.out, cur.h - s.kh + 1, cur.w - s.kw + 1};
          c.weight.assign(s.out * cur.c * s.kh * s.kw, 0.0);
          c.bias.assign(s.out, 0.0);
          cur = c.out;
          layers_.emplace_back(std::move(c));
          break;
        }
        case LayerSpec::Kind::Relu:
          layers_.emplace_back(Relu{cur});
          break;
        case LayerSpec::Kind::Dense: {
          if (s.out == 0) throw ShapeError("dense layer needs a positive width");
          Dense d;
          d.in = cur.size();
          d.out = s.out;
          d.weight.assign(d.out * d.in, 0.0);
          d.bias.assign(d.out, 0.0);
          cur = {1, 1, s.out};
          layers_.emplace_back(std::move(d));
          break;
        }
      }
      sizes_.push_back(cur.size());
    }
  }

  const Shape3& input_shape() const { return input_; }
  std::size_t input_size() const { return input_.size(); }
  std::size_t output_size() const { return sizes_.back(); }
  std::size_t feature_layer() const { return feature_layer_; }
  std::size_t feature_size() const { return sizes_[feature_layer_]; }
  /// Width of the output of layer i.
  std::size_t layer_output_size(std::size_t i) const { return sizes_.at(i); }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<LayerSpec>& specs() const { return specs_; }

  std::vector<std::span<double>> parameters() {
    std::vector<std::span<double>> out;
    for (auto& l : layers_) {
      if (auto* c = std::get_if<Conv2d>(&l)) {
        out.emplace_back(c->weight);
        out.emplace_back(c->bias);
      } else if (auto* d = std::get_if<Dense>(&l)) {
        out.emplace_back(d->weight);
        out.emplace_back(d->bias);
      }
    }
    return out;
  }

  std::vector<std::span<const double>> parameters() const {
    std::vector<std::span<const double>> out;
    for (const auto& p : const_cast<Model*>(this)->parameters()) out.emplace_back(p);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.size();
    return n;
  }

  ParamGrads zero_grads() const {
    ParamGrads g;
    for (const auto& p : parameters()) g.emplace_back(p.size(), 0.0);
    return g;
  }

  /// He-normal weights, zero biases.
  void init(Rng& rng) {
    for (auto& l : layers_) {
      std::vector<double>* w = nullptr;
      std::size_t fan_in = 0;
      if (auto* c = std::get_if<Conv2d>(&l)) {
        w = &c->weight;
        fan_in = c->in.c * c->kh * c->kw;
      } else if (auto* d = std::get_if<Dense>(&l)) {
        w = &d->weight;
        fan_in = d->in;
      }
      if (!w) continue;
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      for (double& v : *w) v = dist(rng);
    }
  }

  /// Round parameters to float32 so the in-memory model equals its checkpoint.
  void round_to_float() {
    for (auto p : parameters())
      for (double& v : p) v = static_cast<double>(static_cast<float>(v));
  }

  bool same_parameters(const Model& other) const {
    const auto a = parameters();
    const auto b = other.parameters();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!std::equal(a[i].begin(), a[i].end(), b[i].begin(), b[i].end())) return false;
    return true;
  }

  bool operator==(const Model& other) const {
    return input_ == other.input_ && specs_ == other.specs_ && feature_layer_ == other.feature_layer_ &&
           same_parameters(other);
  }

private:
  Shape3 input_;
  std::vector<LayerSpec> specs_;
  std::vector<Layer> layers_;
  std::vector<std::size_t> sizes_;
  std::size_t feature_layer_ = 0;
};

/// conv(16, 1x3) relu conv(8, 2x3) relu dense(32) relu[features] dense(K)
inline Model make_classifier(std::size_t frame_length, std::size_t num_classes) {
  using S = LayerSpec;
  return Model({1, 2, frame_length},
               {S::conv(16, 1, 3), S::relu(), S::conv(8, 2, 3), S::relu(), S::dense(32), S::relu(),
                S::dense(num_classes)},
               5);
}

/// Dense 2N-64-16-64-2N autoencoder; the bottleneck activation is the feature layer.
inline Model make_autoencoder(std::size_t frame_length) {
  using S = LayerSpec;
  return Model({1, 2, frame_length},
               {S::dense(64), S::relu(), S::dense(16), S::relu(), S::dense(64), S::relu(),
                S::dense(2 * frame_length)},
               3);
}

/// Stored activations of one forward pass; acts[0] is the input, acts[i+1] the output of layer i.
struct Trace {
  std::vector<std::vector<double>> acts;

  std::span<const double> output() const { return acts.back(); }
  std::span<const double> layer_output(std::size_t i) const { return acts.at(i + 1); }
};

namespace detail {

inline void conv_forward(const Conv2d& c, std::span<const double> in, std::span<double> out) {
  const std::size_t oh = c.out.h, ow = c.out.w, ih = c.in.h, iw = c.in.w;
  for (std::size_t o = 0; o < c.out_channels; ++o) {
    double* dst = out.data() + o * oh * ow;
    std::fill(dst, dst + oh * ow, c.bias[o]);
    for (std::size_t ch = 0; ch < c.in.c; ++ch) {
      const double* src = in.data() + ch * ih * iw;
      for (std::size_t i = 0; i < c.kh; ++i) {
        for (std::size_t j = 0; j < c.kw; ++j) {
          const double wv = c.weight[((o * c.in.c + ch) * c.kh + i) * c.kw + j];
          for (std::size_t y = 0; y < oh; ++y) {
            const double* s = src + (y + i) * iw + j;
            double* d = dst + y * ow;
            for (std::size_t x = 0; x < ow; ++x) d[x] += wv * s[x];
          }
        }
      }
    }
  }
}

inline void conv_backward(const Conv2d& c, std::span<const double> in, std::span<const double> g,
                          double* dw, double* db, std::span<double> din) {
  const std::size_t oh = c.out.h, ow = c.out.w, ih = c.in.h, iw = c.in.w;
  for (std::size_t o = 0; o < c.out_channels; ++o) {
    const double* go = g.data() + o * oh * ow;
    if (db) {
      double s = 0.0;
      for (std::size_t k = 0; k < oh * ow; ++k) s += go[k];
      db[o] += s;
    }
    for (std::size_t ch = 0; ch < c.in.c; ++ch) {
      const double* src = in.data() + ch * ih * iw;
      double* dsrc = din.empty() ? nullptr : din.data() + ch * ih * iw;
      for (std::size_t i = 0; i < c.kh; ++i) {
        for (std::size_t j = 0; j < c.kw; ++j) {
          const std::size_t widx = ((o * c.in.c + ch) * c.kh + i) * c.kw + j;
          const double wv = c.weight[widx];
          double acc = 0.0;
          for (std::size_t y = 0; y < oh; ++y) {
            const double* s = src + (y + i) * iw + j;
            const double* gy = go + y * ow;
            for (std::size_t x = 0; x < ow; ++x) acc += gy[x] * s[x];
            if (dsrc) {
              double* d = dsrc + (y + i) * iw + j;
              for (std::size_t x = 0; x < ow; ++x) d[x] += wv * gy[x];
            }
          }
          if (dw) dw[widx] += acc;
        }
      }
    }
  }
}

inline void dense_forward(const Dense& d, std::span<const double> in, std::span<double> out) {
  for (std::size_t o = 0; o < d.out; ++o) {
    const double* w = d.weight.data() + o * d.in;
    double s = d.bias[o];
    for (std::size_t k = 0; k < d.in; ++k) s += w[k] * in[k];
    out[o] = s;
  }
}

inline void dense_backward(const Dense& d, std::span<const double> in, std::span<const double> g, double* dw,
                           double* db, std::span<double> din) {
  for (std::size_t o = 0; o < d.out; ++o) {
    const double go = g[o];
    if (go == 0.0) continue;
    const double* w = d.weight.data() + o * d.in;
    if (dw) {
      double* dwo = dw + o * d.in;
      for (std::size_t k = 0; k < d.in; ++k) dwo[k] += go * in[k];
    }
    if (db) db[o] += go;
    if (!din.empty())
      for (std::size_t k = 0; k < d.in; ++k) din[k] += go * w[k];
  }
}

} // namespace detail

inline Trace forward_trace(const Model& m, std::span<const double> x) {
  if (x.size() != m.input_size())
    throw ShapeError("input has " + std::to_string(x.size()) + " values, model expects " +
                     std::to_string(m.input_size()));
  Trace t;
  t.acts.reserve(m.layers().size() + 1);
  t.acts.emplace_back(x.begin(), x.end());
  for (std::size_t i = 0; i < m.layers().size(); ++i) {
    const auto& in = t.acts.back();
    std::vector<double> out(m.layer_output_size(i));
    std::visit(
        [&](const auto& layer) {
          using L = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<L, Conv2d>) {
            detail::conv_forward(layer, in, out);
          } else if constexpr (std::is_same_v<L, Dense>) {
            detail::dense_forward(layer, in, out);
          } else {
            for (std::size_t k = 0; k < out.size(); ++k) out[k] = in[k] > 0.0 ? in[k] : 0.0;
          }
        },
        m.layers()[i]);
    t.acts.push_back(std::move(out));
  }
  return t;
}

/// Reverse pass from the output of layer `top - 1` (top = number of layers
/// means the logits). `grad_top` is the cotangent at that output. Parameter
/// gradients are accumulated into `pg` when given; the input gradient is
/// written to `dx` when given.
inline void backward(const Model& m, const Trace& t, std::size_t top, std::vector<double> grad_top, ParamGrads* pg,
                     std::vector<double>* dx) {
  if (top == 0 || top > m.layers().size()) throw ShapeError("backward start layer out of range");
  if (grad_top.size() != m.layer_output_size(top - 1)) throw ShapeError("cotangent width mismatch");

  // parameter slot of each layer
  std::vector<std::size_t> slot(m.layers().size(), 0);
  {
    std::size_t s = 0;
    for (std::size_t i = 0; i < m.layers().size(); ++i) {
      slot[i] = s;
      if (!std::holds_alternative<Relu>(m.layers()[i])) s += 2;
    }
  }

  std::vector<double> g = std::move(grad_top);
  for (std::size_t li = top; li-- > 0;) {
    const auto& in = t.acts[li];
    const bool need_input_grad = li > 0 || dx != nullptr;
    std::vector<double> din;
    if (need_input_grad) din.assign(in.size(), 0.0);
    std::visit(
        [&](const auto& layer) {
          using L = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<L, Relu>) {
            if (!din.empty())
              for (std::size_t k = 0; k < in.size(); ++k) din[k] = in[k] > 0.0 ? g[k] : 0.0;
          } else {
            double* dw = pg ? (*pg)[slot[li]].data() : nullptr;
            double* db = pg ? (*pg)[slot[li] + 1].data() : nullptr;
            if constexpr (std::is_same_v<L, Conv2d>)
              detail::conv_backward(layer, in, g, dw, db, din);
            else
              detail::dense_backward(layer, in, g, dw, db, din);
          }
        },
        m.layers()[li]);
    g = std::move(din);
  }
  if (dx) *dx = std::move(g);
}

struct Output {
  std::vector<double> logits;
  std::vector<double> features;
};

inline Output forward(const Model& m, std::span<const double> x) {
  auto t = forward_trace(m, x);
  return {std::vector<double>(t.output().begin(), t.output().end()),
          std::vector<double>(t.layer_output(m.feature_layer()).begin(), t.layer_output(m.feature_layer()).end())};
}

struct BatchOutput {
  Tensor logits;    // b x K
  Tensor features;  // b x F
};

/// Batched forward; `batch` has shape {b, ...} with b rows of input_size values.
inline BatchOutput forward(const Model& m, const Tensor& batch) {
  const std::size_t b = batch.rows();
  if (b == 0 || batch.row_size() != m.input_size()) throw ShapeError("batch rows do not match the model input");
  BatchOutput out{Tensor({b, m.output_size()}), Tensor({b, m.feature_size()})};
  for (std::size_t i = 0; i < b; ++i) {
    auto o = forward(m, batch.row(i));
    std::copy(o.logits.begin(), o.logits.end(), out.logits.row(i).begin());
    std::copy(o.features.begin(), o.features.end(), out.features.row(i).begin());
  }
  return out;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline std::size_t predict(const Model& m, std::span<const double> x) { return argmax(forward(m, x).logits); }

inline std::vector<double> softmax(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - mx);
    s += p[i];
  }
  for (double& v : p) v /= s;
  return p;
}

inline constexpr double kProbFloor = 1e-12;

/// Cross-entropy -sum_k t_k log(max(p_k, 1e-12)) for one row.
inline double loss_ce(std::span<const double> logits, std::span<const double> target) {
  if (logits.size() != target.size()) throw ShapeError("logits and target widths differ");
  const auto p = softmax(logits);
  double l = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k)
    if (target[k] != 0.0) l -= target[k] * std::log(std::max(p[k], kProbFloor));
  return l;
}

/// Exact derivative of loss_ce with respect to the logits (the clamp included).
inline std::vector<double> loss_ce_grad(std::span<const double> logits, std::span<const double> target) {
  const auto p = softmax(logits);
  double active = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k)
    if (p[k] >= kProbFloor) active += target[k];
  std::vector<double> g(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) g[j] = p[j] * active - (p[j] >= kProbFloor ? target[j] : 0.0);
  return g;
}

/// Mean cross-entropy over the rows of a batch.
inline double loss_ce(const Tensor& logits, const Tensor& targets) {
  if (logits.shape != targets.shape) throw ShapeError("logits and targets shapes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) s += loss_ce(logits.row(i), targets.row(i));
  return s / static_cast<double>(logits.rows());
}

/// Accumulate scale * d loss_ce(f(x), target) / d theta into pg; returns the loss.
inline double accumulate_ce_grads(const Model& m, std::span<const double> x, std::span<const double> target,
                                  double scale, ParamGrads& pg) {
  const auto t = forward_trace(m, x);
  auto g = loss_ce_grad(t.output(), target);
  for (double& v : g) v *= scale;
  backward(m, t, m.layers().size(), std::move(g), &pg, nullptr);
  return loss_ce(t.output(), target);
}

struct Gradients {
  ParamGrads params;
  Tensor input;  // same shape as the batch
  double loss = 0.0;
};

/// Gradients of the batch-mean cross-entropy.
inline Gradients grads(const Model& m, const Tensor& batch, const Tensor& targets) {
  const std::size_t b = batch.rows();
  if (b == 0 || batch.row_size() != m.input_size()) throw ShapeError("batch rows do not match the model input");
  if (targets.rows() != b || targets.row_size() != m.output_size()) throw ShapeError("targets do not match logits");
  Gradients out{m.zero_grads(), Tensor(batch.shape), 0.0};
  const double scale = 1.0 / static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto t = forward_trace(m, batch.row(i));
    auto g = loss_ce_grad(t.output(), targets.row(i));
    for (double& v : g) v *= scale;
    std::vector<double> dx;
    backward(m, t, m.layers().size(), std::move(g), &out.params, &dx);
    std::copy(dx.begin(), dx.end(), out.input.row(i).begin());
    out.loss += loss_ce(t.output(), targets.row(i)) * scale;
  }
  return out;
}

/// (d logits / dx)^T * cotangent.
inline std::vector<double> input_vjp(const Model& m, std::span<const double> x, std::span<const double> cotangent) {
  const auto t = forward_trace(m, x);
  std::vector<double> dx;
  backward(m, t, m.layers().size(), {cotangent.begin(), cotangent.end()}, nullptr, &dx);
  return dx;
}

/// (d features / dx)^T * cotangent, without materialising the Jacobian.
inline std::vector<double> feature_vjp(const Model& m, std::span<const double> x, std::span<const double> cotangent) {
  if (cotangent.size() != m.feature_size()) throw ShapeError("cotangent width differs from the feature width");
  const auto t = forward_trace(m, x);
  std::vector<double> dx;
  backward(m, t, m.feature_layer() + 1, {cotangent.begin(), cotangent.end()}, nullptr, &dx);
  return dx;
}

/// SGD with heavy-ball momentum: v <- mu v + g, theta <- theta - lr v.
class Sgd {
public:
  Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (!(lr >= 0.0)) throw InvalidArgument("learning rate must be non-negative");
  }

  void step(std::span<const std::span<double>> params, const ParamGrads& g) {
    if (velocity_.empty()) {
      for (const auto& p : params) velocity_.emplace_back(p.size(), 0.0);
    }
    if (g.size() != params.size() || velocity_.size() != params.size())
      throw ShapeError("gradient list does not match the parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& v = velocity_[i];
      for (std::size_t k = 0; k < params[i].size(); ++k) {
        v[k] = momentum_ * v[k] + g[i][k];
        params[i][k] -= lr_ * v[k];
      }
    }
  }

  void step(Model& m, const ParamGrads& g) {
    auto params = m.parameters();
    step(params, g);
  }

  double lr() const { return lr_; }
  double momentum() const { return momentum_; }

private:
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

inline std::vector<double> to_double(std::span<const float> v) { return {v.begin(), v.end()}; }

} // namespace modguard::nn
