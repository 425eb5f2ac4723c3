#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "arob/error.hpp"
#include "arob/rng.hpp"
#include "arob/tensor.hpp"

namespace arob {

// ---------------------------------------------------------------------------
// Architecture description

struct ConvBlockSpec {
  std::size_t filters = 8;
  std::size_t pool = 2;
  friend bool operator==(const ConvBlockSpec&, const ConvBlockSpec&) = default;
};

/// Conv-BatchNorm-ReLU-MaxPool blocks followed by dropout/dense/ReLU/dropout/dense.
struct NetworkSpec {
  std::size_t in_channels = 1;
  std::array<std::size_t, 3> spatial{36, 36, 36};
  std::vector<ConvBlockSpec> blocks{{8, 2}, {16, 3}, {31, 2}, {64, 3}};
  std::size_t dense_hidden = 128;
  std::size_t classes = 2;
  double dropout = 0.4;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.1;

  std::size_t pool_product() const {
    std::size_t p = 1;
    for (const auto& b : blocks) p *= b.pool;
    return p;
  }

  void validate() const {
    static const char* axis_names[3] = {"D", "H", "W"};
    if (in_channels == 0) throw DataError("network spec: in_channels must be positive");
    if (blocks.empty()) throw DataError("network spec: at least one conv block required");
    for (const auto& b : blocks)
      if (b.filters == 0 || b.pool == 0) throw DataError("network spec: filters and pool sizes must be positive");
    const std::size_t p = pool_product();
    for (int i = 0; i < 3; ++i)
      if (spatial[i] == 0 || spatial[i] % p != 0)
        throw DataError(detail::concat("network spec: input extent ", axis_names[i], "=", spatial[i],
                                       " is not divisible by the pool product ", p));
    if (dense_hidden == 0 || classes < 2) throw DataError("network spec: dense_hidden > 0 and classes >= 2 required");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw DataError("network spec: dropout must lie in [0, 1)");
    if (!(bn_epsilon > 0.0)) throw DataError("network spec: bn_epsilon must be positive");
  }

  Shape input_shape() const { return {in_channels, spatial[0], spatial[1], spatial[2]}; }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

// ---------------------------------------------------------------------------
// Layers. Spatial tensors are (N, C, D, H, W); dense tensors are (N, F).

template <typename T>
struct Conv3d {
  Tensor<T> weight;  // (out, in, 3, 3, 3)
  Tensor<T> bias;    // (out)
  std::size_t in_channels() const { return weight.extent(1); }
  std::size_t out_channels() const { return weight.extent(0); }
};

template <typename T>
struct BatchNorm {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  double epsilon = 1e-5;
  double momentum = 0.1;
  std::size_t channels() const { return gamma.size(); }
};

struct Relu {};
struct MaxPool {
  std::size_t size = 2;
};
struct Flatten {};
struct Dropout {
  double rate = 0.4;
};

template <typename T>
struct Dense {
  Tensor<T> weight;  // (out, in)
  Tensor<T> bias;    // (out)
  std::size_t in_features() const { return weight.extent(1); }
  std::size_t out_features() const { return weight.extent(0); }
};

template <typename T>
using Layer = std::variant<Conv3d<T>, BatchNorm<T>, Relu, MaxPool, Flatten, Dropout, Dense<T>>;

template <typename T>
const char* layer_name(const Layer<T>& layer) {
  static const char* names[] = {"conv3d", "batchnorm", "relu", "maxpool", "flatten", "dropout", "dense"};
  return names[layer.index()];
}

template <typename... Fs>
struct overloaded : Fs... {
  using Fs::operator()...;
};
template <typename... Fs>
overloaded(Fs...) -> overloaded<Fs...>;

namespace detail {

// Per-sample output shape of a layer, validating its input.
template <typename T>
Shape infer_layer_shape(const Layer<T>& layer, const Shape& in, std::size_t index) {
  auto fail = [&](const std::string& why) {
    throw ShapeError(concat("layer ", index, " (", layer_name(layer), "): ", why, ", input ", shape_str(in)));
  };
  return std::visit(
      overloaded{
          [&](const Conv3d<T>& c) -> Shape {
            if (in.size() != 4) fail("expects (C,D,H,W)");
            if (c.weight.rank() != 5 || c.weight.extent(2) != 3 || c.weight.extent(3) != 3 || c.weight.extent(4) != 3)
              fail("weight must be (out,in,3,3,3)");
            if (c.in_channels() != in[0]) fail("channel mismatch");
            if (c.bias.size() != c.out_channels()) fail("bias size mismatch");
            return {c.out_channels(), in[1], in[2], in[3]};
          },
          [&](const BatchNorm<T>& b) -> Shape {
            if (in.size() < 1 || b.channels() != in[0]) fail("channel mismatch");
            return in;
          },
          [&](const Relu&) -> Shape { return in; },
          [&](const MaxPool& p) -> Shape {
            if (in.size() != 4) fail("expects (C,D,H,W)");
            if (p.size == 0 || in[1] % p.size || in[2] % p.size || in[3] % p.size)
              fail(concat("extents not divisible by pool size ", p.size));
            return {in[0], in[1] / p.size, in[2] / p.size, in[3] / p.size};
          },
          [&](const Flatten&) -> Shape { return {shape_numel(in)}; },
          [&](const Dropout& d) -> Shape {
            if (!(d.rate >= 0.0 && d.rate < 1.0)) fail("rate outside [0,1)");
            return in;
          },
          [&](const Dense<T>& d) -> Shape {
            if (in.size() != 1) fail("expects flat features");
            if (d.weight.rank() != 2 || d.in_features() != in[0]) fail("weight must be (out,in)");
            if (d.bias.size() != d.out_features()) fail("bias size mismatch");
            return {d.out_features()};
          },
      },
      layer);
}

}  // namespace detail

/// Sequential network with trainable parameters and batchnorm running state.
template <typename T>
class Network {
 public:
  Network() = default;

  Network(Shape input_shape, std::vector<Layer<T>> layers, std::optional<NetworkSpec> spec = std::nullopt)
      : input_shape_(std::move(input_shape)), layers_(std::move(layers)), spec_(std::move(spec)) {
    validate();
  }

  /// Re-derives the shape chain; throws ShapeError on any inconsistency.
  void validate() const {
    Shape s = input_shape_;
    for (std::size_t i = 0; i < layers_.size(); ++i) s = detail::infer_layer_shape(layers_[i], s, i);
    if (s.size() != 1) throw ShapeError("network must end in a flat (N, classes) output, got " + shape_str(s));
  }

  const Shape& input_shape() const noexcept { return input_shape_; }
  const std::vector<Layer<T>>& layers() const noexcept { return layers_; }
  std::vector<Layer<T>>& layers() noexcept { return layers_; }
  const std::optional<NetworkSpec>& spec() const noexcept { return spec_; }

  /// Per-sample shapes entering each layer, plus the final output shape.
  std::vector<Shape> shape_chain() const {
    std::vector<Shape> chain{input_shape_};
    for (std::size_t i = 0; i < layers_.size(); ++i)
      chain.push_back(detail::infer_layer_shape(layers_[i], chain.back(), i));
    return chain;
  }

  std::size_t classes() const { return shape_chain().back()[0]; }

  // Trainable tensors in canonical order: conv (w, b), batchnorm (gamma, beta), dense (w, b).
  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    for (auto& l : layers_) collect(l, out);
    return out;
  }
  std::vector<const Tensor<T>*> parameters() const {
    std::vector<Tensor<T>*> tmp;
    for (auto& l : const_cast<std::vector<Layer<T>>&>(layers_)) collect(l, tmp);
    return {tmp.begin(), tmp.end()};
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      std::visit(overloaded{[&](const Conv3d<T>&) { names.insert(names.end(), {p + "weight", p + "bias"}); },
                            [&](const BatchNorm<T>&) { names.insert(names.end(), {p + "gamma", p + "beta"}); },
                            [&](const Dense<T>&) { names.insert(names.end(), {p + "weight", p + "bias"}); },
                            [](const auto&) {}},
                 layers_[i]);
    }
    return names;
  }

  // Non-trainable state (running mean, running variance per batchnorm).
  std::vector<Tensor<T>*> buffers() {
    std::vector<Tensor<T>*> out;
    for (auto& l : layers_)
      if (auto* bn = std::get_if<BatchNorm<T>>(&l)) out.insert(out.end(), {&bn->running_mean, &bn->running_var});
    return out;
  }
  std::vector<const Tensor<T>*> buffers() const {
    auto tmp = const_cast<Network*>(this)->buffers();
    return {tmp.begin(), tmp.end()};
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->size();
    return n;
  }

  template <typename U>
  Network<U> cast() const {
    std::vector<Layer<U>> out;
    for (const auto& l : layers_) {
      out.push_back(std::visit(
          overloaded{
              [](const Conv3d<T>& c) -> Layer<U> { return Conv3d<U>{c.weight.template cast<U>(), c.bias.template cast<U>()}; },
              [](const BatchNorm<T>& b) -> Layer<U> {
                return BatchNorm<U>{b.gamma.template cast<U>(), b.beta.template cast<U>(),
                                    b.running_mean.template cast<U>(), b.running_var.template cast<U>(), b.epsilon,
                                    b.momentum};
              },
              [](const Dense<T>& d) -> Layer<U> { return Dense<U>{d.weight.template cast<U>(), d.bias.template cast<U>()}; },
              [](const Relu& r) -> Layer<U> { return r; },
              [](const MaxPool& p) -> Layer<U> { return p; },
              [](const Flatten& f) -> Layer<U> { return f; },
              [](const Dropout& d) -> Layer<U> { return d; },
          },
          l));
    }
    return Network<U>(input_shape_, std::move(out), spec_);
  }

 private:
  static void collect(Layer<T>& l, std::vector<Tensor<T>*>& out) {
    if (auto* c = std::get_if<Conv3d<T>>(&l)) out.insert(out.end(), {&c->weight, &c->bias});
    else if (auto* b = std::get_if<BatchNorm<T>>(&l)) out.insert(out.end(), {&b->gamma, &b->beta});
    else if (auto* d = std::get_if<Dense<T>>(&l)) out.insert(out.end(), {&d->weight, &d->bias});
  }

  Shape input_shape_;
  std::vector<Layer<T>> layers_;
  std::optional<NetworkSpec> spec_;
};

template <typename T>
Conv3d<T> make_conv(std::size_t in, std::size_t out) {
  return {Tensor<T>({out, in, 3, 3, 3}), Tensor<T>({out})};
}

template <typename T>
BatchNorm<T> make_batchnorm(std::size_t channels, double epsilon = 1e-5, double momentum = 0.1) {
  return {Tensor<T>({channels}, T{1}), Tensor<T>({channels}), Tensor<T>({channels}), Tensor<T>({channels}, T{1}),
          epsilon, momentum};
}

template <typename T>
Dense<T> make_dense(std::size_t in, std::size_t out) {
  return {Tensor<T>({out, in}), Tensor<T>({out})};
}

/// Builds the spec'd network with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit
/// gamma and zero beta. Identical seeds give bit-identical parameters.
template <typename T = float>
Network<T> build_network(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng = make_rng(seed, "init");
  auto fill_uniform = [&](Tensor<T>& w, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (T& v : w.data()) v = static_cast<T>(dist(rng));
  };

  std::vector<Layer<T>> layers;
  std::size_t channels = spec.in_channels;
  std::array<std::size_t, 3> extent = spec.spatial;
  for (const auto& block : spec.blocks) {
    auto conv = make_conv<T>(channels, block.filters);
    fill_uniform(conv.weight, channels * 27);
    layers.emplace_back(std::move(conv));
    layers.emplace_back(make_batchnorm<T>(block.filters, spec.bn_epsilon, spec.bn_momentum));
    layers.emplace_back(Relu{});
    layers.emplace_back(MaxPool{block.pool});
    channels = block.filters;
    for (auto& e : extent) e /= block.pool;
  }
  const std::size_t features = channels * extent[0] * extent[1] * extent[2];
  layers.emplace_back(Flatten{});
  layers.emplace_back(Dropout{spec.dropout});
  auto hidden = make_dense<T>(features, spec.dense_hidden);
  fill_uniform(hidden.weight, features);
  layers.emplace_back(std::move(hidden));
  layers.emplace_back(Relu{});
  layers.emplace_back(Dropout{spec.dropout});
  auto head = make_dense<T>(spec.dense_hidden, spec.classes);
  fill_uniform(head.weight, spec.dense_hidden);
  layers.emplace_back(std::move(head));
  return Network<T>(spec.input_shape(), std::move(layers), spec);
}

// ---------------------------------------------------------------------------
// Kernels

/// Half-open spatial box [lo, hi) over (D, H, W).
struct Box3 {
  std::array<std::size_t, 3> lo{0, 0, 0};
  std::array<std::size_t, 3> hi{0, 0, 0};

  static Box3 full(const Shape& s) {  // s = (N, C, D, H, W)
    return {{0, 0, 0}, {s[2], s[3], s[4]}};
  }
  Box3 grown(std::size_t by, const Shape& s) const {
    Box3 b;
    for (int i = 0; i < 3; ++i) {
      b.lo[i] = lo[i] >= by ? lo[i] - by : 0;
      b.hi[i] = std::min(hi[i] + by, s[2 + i]);
    }
    return b;
  }
  Box3 pooled(std::size_t p) const {
    Box3 b;
    for (int i = 0; i < 3; ++i) {
      b.lo[i] = lo[i] / p;
      b.hi[i] = (hi[i] + p - 1) / p;
    }
    return b;
  }
  bool covers(const Shape& s) const {
    return lo == std::array<std::size_t, 3>{0, 0, 0} && hi == std::array<std::size_t, 3>{s[2], s[3], s[4]};
  }
};

namespace kernels {

// out = conv(in) (+ bias) within `box`. Every output element accumulates in
// (bias, ic, kd, kh, kw) order regardless of the box, so partial and full
// evaluations round identically.
template <typename T>
void conv3d_forward(const Tensor<T>& weight, const T* bias, const Tensor<T>& in, Tensor<T>& out, const Box3& box) {
  const std::size_t N = in.extent(0), IC = in.extent(1), D = in.extent(2), H = in.extent(3), W = in.extent(4);
  const std::size_t OC = weight.extent(0);
  const std::size_t plane = D * H * W;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t oc = 0; oc < OC; ++oc) {
      T* dst = out.ptr() + (n * OC + oc) * plane;
      const T b0 = bias ? bias[oc] : T{0};
      for (std::size_t d = box.lo[0]; d < box.hi[0]; ++d)
        for (std::size_t h = box.lo[1]; h < box.hi[1]; ++h)
          std::fill(dst + (d * H + h) * W + box.lo[2], dst + (d * H + h) * W + box.hi[2], b0);
      for (std::size_t ic = 0; ic < IC; ++ic) {
        const T* src = in.ptr() + (n * IC + ic) * plane;
        const T* wk = weight.ptr() + (oc * IC + ic) * 27;
        for (std::size_t kd = 0; kd < 3; ++kd) {
          const std::size_t d0 = std::max(box.lo[0], kd == 0 ? std::size_t{1} : std::size_t{0});
          const std::size_t d1 = std::min(box.hi[0], D + 1 - kd);
          for (std::size_t kh = 0; kh < 3; ++kh) {
            const std::size_t h0 = std::max(box.lo[1], kh == 0 ? std::size_t{1} : std::size_t{0});
            const std::size_t h1 = std::min(box.hi[1], H + 1 - kh);
            for (std::size_t kw = 0; kw < 3; ++kw) {
              const std::size_t x0 = std::max(box.lo[2], kw == 0 ? std::size_t{1} : std::size_t{0});
              const std::size_t x1 = std::min(box.hi[2], W + 1 - kw);
              const T w = wk[(kd * 3 + kh) * 3 + kw];
              for (std::size_t d = d0; d < d1; ++d) {
                for (std::size_t h = h0; h < h1; ++h) {
                  T* o = dst + (d * H + h) * W;
                  const T* s = src + ((d + kd - 1) * H + (h + kh - 1)) * W + kw - 1;
                  for (std::size_t x = x0; x < x1; ++x) o[x] += w * s[x];
                }
              }
            }
          }
        }
      }
    }
  }
}

// grad_in = conv^T(grad_out); grad_in must be zeroed by the caller.
template <typename T>
void conv3d_backward_input(const Tensor<T>& weight, const Tensor<T>& grad_out, Tensor<T>& grad_in) {
  const std::size_t N = grad_in.extent(0), IC = grad_in.extent(1), D = grad_in.extent(2), H = grad_in.extent(3),
                    W = grad_in.extent(4);
  const std::size_t OC = weight.extent(0);
  const std::size_t plane = D * H * W;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t ic = 0; ic < IC; ++ic) {
      T* dst = grad_in.ptr() + (n * IC + ic) * plane;
      for (std::size_t oc = 0; oc < OC; ++oc) {
        const T* g = grad_out.ptr() + (n * OC + oc) * plane;
        const T* wk = weight.ptr() + (oc * IC + ic) * 27;
        for (std::size_t kd = 0; kd < 3; ++kd)
          for (std::size_t kh = 0; kh < 3; ++kh)
            for (std::size_t kw = 0; kw < 3; ++kw) {
              const T w = wk[(kd * 3 + kh) * 3 + kw];
              const std::size_t d0 = kd == 0 ? 1 : 0, d1 = D + 1 - kd;
              const std::size_t h0 = kh == 0 ? 1 : 0, h1 = H + 1 - kh;
              const std::size_t x0 = kw == 0 ? 1 : 0, x1 = W + 1 - kw;
              for (std::size_t d = d0; d < std::min(d1, D); ++d)
                for (std::size_t h = h0; h < std::min(h1, H); ++h) {
                  T* o = dst + ((d + kd - 1) * H + (h + kh - 1)) * W + kw - 1;
                  const T* s = g + (d * H + h) * W;
                  for (std::size_t x = x0; x < std::min(x1, W); ++x) o[x] += w * s[x];
                }
            }
      }
    }
}

// Accumulates dL/dweight and dL/dbias.
template <typename T>
void conv3d_backward_params(const Tensor<T>& in, const Tensor<T>& grad_out, Tensor<T>& grad_w, Tensor<T>& grad_b) {
  const std::size_t N = in.extent(0), IC = in.extent(1), D = in.extent(2), H = in.extent(3), W = in.extent(4);
  const std::size_t OC = grad_out.extent(1);
  const std::size_t plane = D * H * W;
  for (std::size_t oc = 0; oc < OC; ++oc) {
    double gb = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* g = grad_out.ptr() + (n * OC + oc) * plane;
      for (std::size_t i = 0; i < plane; ++i) gb += static_cast<double>(g[i]);
    }
    grad_b[oc] += static_cast<T>(gb);
    for (std::size_t ic = 0; ic < IC; ++ic)
      for (std::size_t k = 0; k < 27; ++k) {
        const std::size_t kd = k / 9, kh = (k / 3) % 3, kw = k % 3;
        const std::size_t d0 = kd == 0 ? 1 : 0, d1 = std::min(D, D + 1 - kd);
        const std::size_t h0 = kh == 0 ? 1 : 0, h1 = std::min(H, H + 1 - kh);
        const std::size_t x0 = kw == 0 ? 1 : 0, x1 = std::min(W, W + 1 - kw);
        double acc = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const T* g = grad_out.ptr() + (n * OC + oc) * plane;
          const T* s = in.ptr() + (n * IC + ic) * plane;
          for (std::size_t d = d0; d < d1; ++d)
            for (std::size_t h = h0; h < h1; ++h) {
              const T* gr = g + (d * H + h) * W;
              const T* sr = s + ((d + kd - 1) * H + (h + kh - 1)) * W + kw - 1;
              T row = T{0};
              for (std::size_t x = x0; x < x1; ++x) row += gr[x] * sr[x];
              acc += static_cast<double>(row);
            }
        }
        grad_w[(oc * IC + ic) * 27 + k] += static_cast<T>(acc);
      }
  }
}

// Eval-mode batchnorm as a per-channel affine map y = x * scale + shift.
template <typename T>
void batchnorm_affine(const BatchNorm<T>& bn, std::vector<T>& scale, std::vector<T>& shift) {
  const std::size_t C = bn.channels();
  scale.resize(C);
  shift.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    const double s = static_cast<double>(bn.gamma[c]) / std::sqrt(static_cast<double>(bn.running_var[c]) + bn.epsilon);
    scale[c] = static_cast<T>(s);
    shift[c] = static_cast<T>(static_cast<double>(bn.beta[c]) - static_cast<double>(bn.running_mean[c]) * s);
  }
}

// Applies a per-channel affine map to (N, C, D, H, W) within box.
template <typename T>
void channel_affine(const std::vector<T>& scale, const std::vector<T>& shift, const Tensor<T>& in, Tensor<T>& out,
                    const Box3& box) {
  const std::size_t N = in.extent(0), C = in.extent(1), D = in.extent(2), H = in.extent(3), W = in.extent(4);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * D * H * W;
      for (std::size_t d = box.lo[0]; d < box.hi[0]; ++d)
        for (std::size_t h = box.lo[1]; h < box.hi[1]; ++h)
          for (std::size_t x = box.lo[2]; x < box.hi[2]; ++x) {
            const std::size_t i = base + (d * H + h) * W + x;
            out[i] = in[i] * scale[c] + shift[c];
          }
    }
}

template <typename T>
void relu_box(const Tensor<T>& in, Tensor<T>& out, const Box3& box) {
  const std::size_t NC = in.extent(0) * in.extent(1), D = in.extent(2), H = in.extent(3), W = in.extent(4);
  for (std::size_t nc = 0; nc < NC; ++nc)
    for (std::size_t d = box.lo[0]; d < box.hi[0]; ++d)
      for (std::size_t h = box.lo[1]; h < box.hi[1]; ++h)
        for (std::size_t x = box.lo[2]; x < box.hi[2]; ++x) {
          const std::size_t i = (nc * D + d) * H * W + h * W + x;
          out[i] = in[i] > T{0} ? in[i] : T{0};
        }
}

// Max pooling with window = stride = p over the output box. Ties go to the
// first element in scan order, which is also the lowest flat offset.
template <typename T>
void maxpool_forward(const Tensor<T>& in, Tensor<T>& out, std::size_t p, const Box3& out_box,
                     std::vector<std::size_t>* argmax) {
  const std::size_t NC = in.extent(0) * in.extent(1), D = in.extent(2), H = in.extent(3), W = in.extent(4);
  const std::size_t OD = D / p, OH = H / p, OW = W / p;
  for (std::size_t nc = 0; nc < NC; ++nc)
    for (std::size_t od = out_box.lo[0]; od < out_box.hi[0]; ++od)
      for (std::size_t oh = out_box.lo[1]; oh < out_box.hi[1]; ++oh)
        for (std::size_t ow = out_box.lo[2]; ow < out_box.hi[2]; ++ow) {
          std::size_t best = ((nc * D + od * p) * H + oh * p) * W + ow * p;
          T best_v = in[best];
          for (std::size_t a = 0; a < p; ++a)
            for (std::size_t b = 0; b < p; ++b)
              for (std::size_t c = 0; c < p; ++c) {
                const std::size_t i = ((nc * D + od * p + a) * H + oh * p + b) * W + ow * p + c;
                if (in[i] > best_v) {
                  best_v = in[i];
                  best = i;
                }
              }
          const std::size_t o = ((nc * OD + od) * OH + oh) * OW + ow;
          out[o] = best_v;
          if (argmax) (*argmax)[o] = best;
        }
}

template <typename T>
void dense_forward(const Dense<T>& layer, const Tensor<T>& in, Tensor<T>& out, bool with_bias = true) {
  const std::size_t N = in.extent(0), F = layer.in_features(), O = layer.out_features();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      double acc = with_bias ? static_cast<double>(layer.bias[o]) : 0.0;
      const T* w = layer.weight.ptr() + o * F;
      const T* x = in.ptr() + n * F;
      for (std::size_t i = 0; i < F; ++i) acc += static_cast<double>(w[i]) * static_cast<double>(x[i]);
      out[n * O + o] = static_cast<T>(acc);
    }
}

// grad_in = W^T grad_out.
template <typename T>
void dense_backward_input(const Dense<T>& layer, const Tensor<T>& grad_out, Tensor<T>& grad_in) {
  const std::size_t N = grad_out.extent(0), F = layer.in_features(), O = layer.out_features();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < F; ++i) {
      double acc = 0.0;
      for (std::size_t o = 0; o < O; ++o)
        acc += static_cast<double>(layer.weight[o * F + i]) * static_cast<double>(grad_out[n * O + o]);
      grad_in[n * F + i] = static_cast<T>(acc);
    }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Forward with trace

enum class Mode { train, eval };

template <typename T>
struct LayerCache {
  Tensor<T> input;
  std::vector<std::size_t> argmax;  // maxpool: flat input offset per output
  Tensor<T> mask;                   // dropout (train): 0 or 1/(1-p)
  std::vector<double> mean, inv_std;  // batchnorm (train): batch statistics
  std::vector<double> batch_var_unbiased;
};

template <typename T>
struct ForwardTrace {
  Mode mode = Mode::eval;
  std::vector<LayerCache<T>> layers;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  ForwardTrace<T> trace;
};

namespace detail {

template <typename T>
Tensor<T> batchnorm_train_forward(const BatchNorm<T>& bn, const Tensor<T>& in, LayerCache<T>& cache) {
  const std::size_t N = in.extent(0), C = in.extent(1), S = in.size() / (N * C);
  const double M = static_cast<double>(N * S);
  Tensor<T> out(in.shape());
  cache.mean.assign(C, 0.0);
  cache.inv_std.assign(C, 0.0);
  cache.batch_var_unbiased.assign(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* x = in.ptr() + (n * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) s += static_cast<double>(x[i]);
    }
    const double mean = s / M;
    double ss = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* x = in.ptr() + (n * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        const double dx = static_cast<double>(x[i]) - mean;
        ss += dx * dx;
      }
    }
    const double var = ss / M;
    const double inv_std = 1.0 / std::sqrt(var + bn.epsilon);
    cache.mean[c] = mean;
    cache.inv_std[c] = inv_std;
    cache.batch_var_unbiased[c] = M > 1 ? ss / (M - 1) : var;
    const double g = static_cast<double>(bn.gamma[c]), b = static_cast<double>(bn.beta[c]);
    for (std::size_t n = 0; n < N; ++n) {
      const T* x = in.ptr() + (n * C + c) * S;
      T* y = out.ptr() + (n * C + c) * S;
      for (std::size_t i = 0; i < S; ++i)
        y[i] = static_cast<T>(g * ((static_cast<double>(x[i]) - mean) * inv_std) + b);
    }
  }
  return out;
}

template <typename T>
Tensor<T> batchnorm_eval_forward(const BatchNorm<T>& bn, const Tensor<T>& in) {
  std::vector<T> scale, shift;
  kernels::batchnorm_affine(bn, scale, shift);
  Tensor<T> out(in.shape());
  if (in.rank() == 5) {
    kernels::channel_affine(scale, shift, in, out, Box3::full(in.shape()));
  } else {
    const std::size_t N = in.extent(0), C = in.extent(1), S = in.size() / (N * C);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < S; ++i) {
          const std::size_t k = (n * C + c) * S + i;
          out[k] = in[k] * scale[c] + shift[c];
        }
  }
  return out;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& in) {
  Tensor<T> out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > T{0} ? in[i] : T{0};
  return out;
}

}  // namespace detail

/// Forward pass recording everything backward-style methods need. Eval mode
/// uses running statistics and identity dropout; train mode uses batch
/// statistics and draws dropout masks from `rng`. Running statistics are not
/// touched here (see update_running_stats / forward_train).
template <typename T>
ForwardResult<T> forward(const Network<T>& net, const Tensor<T>& batch, Mode mode, Rng* rng = nullptr) {
  const Shape& in_shape = net.input_shape();
  if (batch.rank() != in_shape.size() + 1 || !std::equal(in_shape.begin(), in_shape.end(), batch.shape().begin() + 1))
    throw ShapeError(detail::concat("forward: batch shape ", shape_str(batch.shape()), " does not match (N,)+",
                                    shape_str(in_shape)));
  const std::size_t N = batch.extent(0);
  ForwardResult<T> result;
  result.trace.mode = mode;
  result.trace.layers.resize(net.layers().size());
  Tensor<T> cur = batch;
  for (std::size_t li = 0; li < net.layers().size(); ++li) {
    const auto& layer = net.layers()[li];
    LayerCache<T>& cache = result.trace.layers[li];
    cache.input = cur;
    Tensor<T> out = std::visit(
        overloaded{
            [&](const Conv3d<T>& c) {
              Tensor<T> o({N, c.out_channels(), cur.extent(2), cur.extent(3), cur.extent(4)});
              kernels::conv3d_forward(c.weight, c.bias.ptr(), cur, o, Box3::full(o.shape()));
              return o;
            },
            [&](const BatchNorm<T>& b) {
              return mode == Mode::train ? detail::batchnorm_train_forward(b, cur, cache)
                                         : detail::batchnorm_eval_forward(b, cur);
            },
            [&](const Relu&) { return detail::relu_forward(cur); },
            [&](const MaxPool& p) {
              Tensor<T> o({N, cur.extent(1), cur.extent(2) / p.size, cur.extent(3) / p.size, cur.extent(4) / p.size});
              cache.argmax.assign(o.size(), 0);
              kernels::maxpool_forward(cur, o, p.size, Box3::full(o.shape()), &cache.argmax);
              return o;
            },
            [&](const Flatten&) { return cur.reshaped({N, cur.size() / N}); },
            [&](const Dropout& d) {
              if (mode == Mode::eval || d.rate == 0.0) return cur;
              if (!rng) throw UsageError("forward: train-mode dropout requires an rng");
              std::uniform_real_distribution<double> u(0.0, 1.0);
              const T keep_scale = static_cast<T>(1.0 / (1.0 - d.rate));
              cache.mask = Tensor<T>(cur.shape());
              Tensor<T> o(cur.shape());
              for (std::size_t i = 0; i < cur.size(); ++i) {
                cache.mask[i] = u(*rng) < d.rate ? T{0} : keep_scale;
                o[i] = cur[i] * cache.mask[i];
              }
              return o;
            },
            [&](const Dense<T>& d) {
              Tensor<T> o({N, d.out_features()});
              kernels::dense_forward(d, cur, o);
              return o;
            },
        },
        layer);
    cur = std::move(out);
  }
  result.logits = std::move(cur);
  return result;
}

/// Folds the batch statistics of a train-mode trace into the running stats.
template <typename T>
void update_running_stats(Network<T>& net, const ForwardTrace<T>& trace) {
  if (trace.mode != Mode::train) return;
  if (trace.layers.size() != net.layers().size()) throw UsageError("update_running_stats: stale trace");
  for (std::size_t li = 0; li < net.layers().size(); ++li) {
    auto* bn = std::get_if<BatchNorm<T>>(&net.layers()[li]);
    if (!bn) continue;
    const auto& c = trace.layers[li];
    for (std::size_t ch = 0; ch < bn->channels(); ++ch) {
      const double m = bn->momentum;
      bn->running_mean[ch] = static_cast<T>((1 - m) * bn->running_mean[ch] + m * c.mean[ch]);
      bn->running_var[ch] = static_cast<T>((1 - m) * bn->running_var[ch] + m * c.batch_var_unbiased[ch]);
    }
  }
}

template <typename T>
ForwardResult<T> forward_train(Network<T>& net, const Tensor<T>& batch, Rng& rng) {
  auto r = forward(net, batch, Mode::train, &rng);
  update_running_stats(net, r.trace);
  return r;
}

template <typename T>
Tensor<T> predict_logits(const Network<T>& net, const Tensor<T>& batch) {
  return forward(net, batch, Mode::eval).logits;
}

// ---------------------------------------------------------------------------
// Reverse mode

enum class ReluRule { standard, guided };

/// One gradient per parameter, in Network::parameters() order.
template <typename T>
using Gradients = std::vector<Tensor<T>>;

namespace detail {

template <typename T>
void check_trace(const Network<T>& net, const ForwardTrace<T>& trace, const char* who) {
  if (trace.layers.size() != net.layers().size())
    throw UsageError(concat(who, ": stale trace (", trace.layers.size(), " cached layers, network has ",
                            net.layers().size(), ")"));
}

// Shared reverse sweep. Fills param_grads when non-null; returns the input
// gradient when need_input is set (otherwise the first layer's input
// gradient is skipped).
template <typename T>
Tensor<T> reverse_sweep(const Network<T>& net, const ForwardTrace<T>& trace, Tensor<T> grad, ReluRule rule,
                        Gradients<T>* param_grads, bool need_input) {
  std::vector<std::size_t> param_offset(net.layers().size(), 0);
  {
    std::size_t k = 0;
    for (std::size_t li = 0; li < net.layers().size(); ++li) {
      param_offset[li] = k;
      const auto idx = net.layers()[li].index();
      if (idx == 0 || idx == 1 || idx == 6) k += 2;
    }
  }
  for (std::size_t li = net.layers().size(); li-- > 0;) {
    const auto& cache = trace.layers[li];
    const Tensor<T>& x = cache.input;
    const bool skip_input = !need_input && li == 0;
    Tensor<T>* gp = param_grads ? &(*param_grads)[param_offset[li]] : nullptr;
    Tensor<T> next = std::visit(
        overloaded{
            [&](const Conv3d<T>& c) {
              if (gp) kernels::conv3d_backward_params(x, grad, gp[0], gp[1]);
              if (skip_input) return Tensor<T>();
              Tensor<T> gi(x.shape());
              kernels::conv3d_backward_input(c.weight, grad, gi);
              return gi;
            },
            [&](const BatchNorm<T>& b) {
              const std::size_t N = x.extent(0), C = x.extent(1), S = x.size() / (N * C);
              const double M = static_cast<double>(N * S);
              Tensor<T> gi(x.shape());
              for (std::size_t c = 0; c < C; ++c) {
                double mean, inv_std;
                if (trace.mode == Mode::train) {
                  mean = cache.mean[c];
                  inv_std = cache.inv_std[c];
                } else {
                  mean = static_cast<double>(b.running_mean[c]);
                  inv_std = 1.0 / std::sqrt(static_cast<double>(b.running_var[c]) + b.epsilon);
                }
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t n = 0; n < N; ++n)
                  for (std::size_t i = 0; i < S; ++i) {
                    const std::size_t k = (n * C + c) * S + i;
                    const double xh = (static_cast<double>(x[k]) - mean) * inv_std;
                    sum_g += static_cast<double>(grad[k]);
                    sum_gx += static_cast<double>(grad[k]) * xh;
                  }
                if (gp) {
                  gp[0][c] += static_cast<T>(sum_gx);
                  gp[1][c] += static_cast<T>(sum_g);
                }
                const double gamma = static_cast<double>(b.gamma[c]);
                for (std::size_t n = 0; n < N; ++n)
                  for (std::size_t i = 0; i < S; ++i) {
                    const std::size_t k = (n * C + c) * S + i;
                    const double g = static_cast<double>(grad[k]);
                    if (trace.mode == Mode::train) {
                      const double xh = (static_cast<double>(x[k]) - mean) * inv_std;
                      gi[k] = static_cast<T>(gamma * inv_std / M * (M * g - sum_g - xh * sum_gx));
                    } else {
                      gi[k] = static_cast<T>(gamma * inv_std * g);
                    }
                  }
              }
              return gi;
            },
            [&](const Relu&) {
              Tensor<T> gi(x.shape());
              for (std::size_t i = 0; i < x.size(); ++i) {
                const bool open = x[i] > T{0} && (rule == ReluRule::standard || grad[i] > T{0});
                gi[i] = open ? grad[i] : T{0};
              }
              return gi;
            },
            [&](const MaxPool&) {
              Tensor<T> gi(x.shape());
              for (std::size_t o = 0; o < grad.size(); ++o) gi[cache.argmax[o]] += grad[o];
              return gi;
            },
            [&](const Flatten&) { return grad.reshaped(x.shape()); },
            [&](const Dropout&) {
              if (cache.mask.empty()) return grad;
              return mul(grad, cache.mask);
            },
            [&](const Dense<T>& d) {
              if (gp) {
                const std::size_t N = x.extent(0), F = d.in_features(), O = d.out_features();
                for (std::size_t o = 0; o < O; ++o) {
                  double gb = 0.0;
                  for (std::size_t n = 0; n < N; ++n) gb += static_cast<double>(grad[n * O + o]);
                  gp[1][o] += static_cast<T>(gb);
                  for (std::size_t i = 0; i < F; ++i) {
                    double acc = 0.0;
                    for (std::size_t n = 0; n < N; ++n)
                      acc += static_cast<double>(grad[n * O + o]) * static_cast<double>(x[n * F + i]);
                    gp[0][o * F + i] += static_cast<T>(acc);
                  }
                }
              }
              if (skip_input) return Tensor<T>();
              Tensor<T> gi(x.shape());
              kernels::dense_backward_input(d, grad, gi);
              return gi;
            },
        },
        net.layers()[li]);
    grad = std::move(next);
  }
  return grad;
}

}  // namespace detail

/// Exact reverse-mode gradients of sum(loss_grad * logits) w.r.t. every parameter.
template <typename T>
Gradients<T> backward_params(const Network<T>& net, const ForwardTrace<T>& trace, const Tensor<T>& loss_grad) {
  detail::check_trace(net, trace, "backward_params");
  if (trace.layers.empty()) return {};
  const std::size_t N = trace.layers.front().input.extent(0);
  if (loss_grad.shape() != Shape{N, net.classes()})
    throw ShapeError("backward_params: loss gradient shape " + shape_str(loss_grad.shape()) + " does not match logits");
  Gradients<T> grads;
  for (const auto* p : net.parameters()) grads.emplace_back(p->shape());
  detail::reverse_sweep(net, trace, loss_grad, ReluRule::standard, &grads, false);
  return grads;
}

/// Gradient of an arbitrary weighting of the logits with respect to the input batch.
template <typename T>
Tensor<T> backward_input(const Network<T>& net, const ForwardTrace<T>& trace, const Tensor<T>& logit_grad,
                         ReluRule rule) {
  detail::check_trace(net, trace, "backward_input");
  return detail::reverse_sweep<T>(net, trace, logit_grad, rule, nullptr, true);
}

/// Derivative of logit `class_index` (per sample) with respect to the input batch.
template <typename T>
Tensor<T> backward_input(const Network<T>& net, const ForwardTrace<T>& trace, std::size_t class_index,
                         ReluRule rule) {
  detail::check_trace(net, trace, "backward_input");
  const std::size_t classes = net.classes();
  if (class_index >= classes)
    throw UsageError(detail::concat("backward_input: class index ", class_index, " out of range [0,", classes, ")"));
  const std::size_t N = trace.layers.front().input.extent(0);
  Tensor<T> seed({N, classes});
  for (std::size_t n = 0; n < N; ++n) seed[n * classes + class_index] = T{1};
  return detail::reverse_sweep<T>(net, trace, std::move(seed), rule, nullptr, true);
}

// ---------------------------------------------------------------------------
// Region recomputation for perturbation methods

namespace detail {

// Copies box (over every batch item and channel) of a 5-D tensor.
template <typename T>
void copy_box(const Tensor<T>& src, Tensor<T>& dst, const Box3& b) {
  const std::size_t NC = src.extent(0) * src.extent(1), D = src.extent(2), H = src.extent(3), W = src.extent(4);
  for (std::size_t nc = 0; nc < NC; ++nc)
    for (std::size_t d = b.lo[0]; d < b.hi[0]; ++d)
      for (std::size_t h = b.lo[1]; h < b.hi[1]; ++h) {
        const std::size_t o = ((nc * D + d) * H + h) * W;
        std::copy(src.ptr() + o + b.lo[2], src.ptr() + o + b.hi[2], dst.ptr() + o + b.lo[2]);
      }
}

}  // namespace detail

/// Evaluates a frozen network on inputs that differ from a fixed base input
/// only inside a spatial box. Spatial layers recompute just the region the
/// change can reach; results are bit-identical to a full eval forward.
template <typename T>
class RegionEvaluator {
 public:
  RegionEvaluator(const Network<T>& net, const Tensor<T>& base_input) : net_(&net) {
    if (base_input.rank() != 5 || base_input.extent(0) != 1)
      throw ShapeError("RegionEvaluator: base input must be (1,C,D,H,W), got " + shape_str(base_input.shape()));
    auto r = forward(net, base_input, Mode::eval);
    for (std::size_t li = 0; li < net.layers().size(); ++li) {
      outputs_.push_back(li + 1 < net.layers().size() ? r.trace.layers[li + 1].input : r.logits);
    }
    base_logits_ = r.logits;
    bn_scale_.resize(net.layers().size());
    bn_shift_.resize(net.layers().size());
    for (std::size_t li = 0; li < net.layers().size(); ++li)
      if (const auto* bn = std::get_if<BatchNorm<T>>(&net.layers()[li]))
        kernels::batchnorm_affine(*bn, bn_scale_[li], bn_shift_[li]);
  }

  const Tensor<T>& base_logits() const noexcept { return base_logits_; }

  /// Per-worker scratch copies of the base activations. logits() patches
  /// them in place and restores them before returning.
  struct Workspace {
    std::vector<Tensor<T>> outputs;
  };

  Workspace make_workspace() const { return Workspace{outputs_}; }

  Tensor<T> logits(const Tensor<T>& input, Box3 dirty) const {
    Workspace ws = make_workspace();
    return logits(input, dirty, ws);
  }

  Tensor<T> logits(const Tensor<T>& input, Box3 dirty, Workspace& ws) const {
    std::optional<Box3> box = dirty;
    const Tensor<T>* cur = &input;
    Tensor<T> tail;
    std::vector<std::pair<std::size_t, Box3>> touched;
    const auto& layers = net_->layers();
    for (std::size_t li = 0; li < layers.size(); ++li) {
      const auto& layer = layers[li];
      const bool spatial = box && cur->rank() == 5 && !box->covers(cur->shape());
      const bool local = std::holds_alternative<Conv3d<T>>(layer) || std::holds_alternative<BatchNorm<T>>(layer) ||
                         std::holds_alternative<Relu>(layer) || std::holds_alternative<MaxPool>(layer) ||
                         std::holds_alternative<Dropout>(layer);
      if (!spatial || !local) {
        box.reset();
        tail = full_layer(li, *cur);
        cur = &tail;
        continue;
      }
      Tensor<T>& out = ws.outputs[li];
      if (const auto* c = std::get_if<Conv3d<T>>(&layer)) {
        box = box->grown(1, cur->shape());
        kernels::conv3d_forward(c->weight, c->bias.ptr(), *cur, out, *box);
      } else if (std::holds_alternative<BatchNorm<T>>(layer)) {
        kernels::channel_affine(bn_scale_[li], bn_shift_[li], *cur, out, *box);
      } else if (std::holds_alternative<Relu>(layer)) {
        kernels::relu_box(*cur, out, *box);
      } else if (const auto* p = std::get_if<MaxPool>(&layer)) {
        box = box->pooled(p->size);
        kernels::maxpool_forward(*cur, out, p->size, *box, nullptr);
      } else {
        detail::copy_box(*cur, out, *box);  // eval-mode dropout
      }
      touched.emplace_back(li, *box);
      cur = &out;
    }
    Tensor<T> result = *cur;
    for (const auto& [li, b] : touched) detail::copy_box(outputs_[li], ws.outputs[li], b);
    return result;
  }

 private:
  Tensor<T> full_layer(std::size_t li, const Tensor<T>& cur) const {
    const auto& layer = net_->layers()[li];
    const std::size_t N = cur.extent(0);
    return std::visit(
        overloaded{
            [&](const Conv3d<T>& c) {
              Tensor<T> o({N, c.out_channels(), cur.extent(2), cur.extent(3), cur.extent(4)});
              kernels::conv3d_forward(c.weight, c.bias.ptr(), cur, o, Box3::full(o.shape()));
              return o;
            },
            [&](const BatchNorm<T>& b) { return detail::batchnorm_eval_forward(b, cur); },
            [&](const Relu&) { return detail::relu_forward(cur); },
            [&](const MaxPool& p) {
              Tensor<T> o({N, cur.extent(1), cur.extent(2) / p.size, cur.extent(3) / p.size, cur.extent(4) / p.size});
              kernels::maxpool_forward(cur, o, p.size, Box3::full(o.shape()), nullptr);
              return o;
            },
            [&](const Flatten&) { return cur.reshaped({N, cur.size() / N}); },
            [&](const Dropout&) { return cur; },
            [&](const Dense<T>& d) {
              Tensor<T> o({N, d.out_features()});
              kernels::dense_forward(d, cur, o);
              return o;
            },
        },
        layer);
  }

  const Network<T>* net_;
  std::vector<Tensor<T>> outputs_;
  Tensor<T> base_logits_;
  std::vector<std::vector<T>> bn_scale_, bn_shift_;
};

}  // namespace arob
