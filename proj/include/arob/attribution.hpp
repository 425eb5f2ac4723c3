#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "arob/error.hpp"
#include "arob/network.hpp"
#include "arob/parallel.hpp"
#include "arob/phantom.hpp"
#include "arob/tensor.hpp"
#include "arob/train.hpp"

namespace arob {

enum class Method { gradient_input, guided_backprop, lrp, occlusion };

inline constexpr Method kAllMethods[] = {Method::gradient_input, Method::guided_backprop, Method::lrp,
                                         Method::occlusion};

inline const char* to_string(Method m) {
  switch (m) {
    case Method::gradient_input: return "gxi";
    case Method::guided_backprop: return "gbp";
    case Method::lrp: return "lrp";
    case Method::occlusion: return "occ";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : kAllMethods)
    if (s == to_string(m)) return m;
  throw UsageError("unknown attribution method '" + s + "' (expected gxi, gbp, lrp or occ)");
}

enum class Group { tp, tn };

inline const char* to_string(Group g) { return g == Group::tp ? "tp" : "tn"; }

inline Group parse_group(const std::string& s) {
  if (s == "tp") return Group::tp;
  if (s == "tn") return Group::tn;
  throw UsageError("unknown group '" + s + "' (expected tp or tn)");
}

struct OcclusionConfig {
  std::size_t patch = 6;
  std::size_t stride = 3;
  float fill = 0.0f;

  void validate() const {
    if (patch == 0 || stride == 0 || stride > patch)
      throw DataError("occlusion: require 1 <= stride <= patch, got patch " + std::to_string(patch) + ", stride " +
                      std::to_string(stride));
  }
};

enum class BatchNormLrp { identity_pass, merged_linear };

struct LrpConfig {
  double epsilon = 1e-6;
  BatchNormLrp batchnorm = BatchNormLrp::identity_pass;

  void validate() const {
    if (!(epsilon > 0)) throw DataError("lrp: epsilon must be positive");
  }
};

struct AttributionConfig {
  OcclusionConfig occlusion;
  LrpConfig lrp;
};

struct Heatmap {
  Tensor<float> values;  // spatial shape of the input
  Method method = Method::gradient_input;
  std::size_t target = 0;
  std::string subject_id;
  std::size_t timepoint = 0;
  std::size_t run = 0;
};

namespace detail {

template <typename T>
Tensor<T> as_batch(const Network<T>& net, const Tensor<T>& sample) {
  if (sample.shape() != net.input_shape())
    throw ShapeError("attribution: sample shape " + shape_str(sample.shape()) + " does not match network input " +
                     shape_str(net.input_shape()));
  Shape b{1};
  b.insert(b.end(), sample.shape().begin(), sample.shape().end());
  return sample.reshaped(b);
}

// Drops the batch axis and, for (C, D, H, W) inputs, sums over channels.
template <typename T>
Tensor<T> to_spatial(const Tensor<T>& batched) {
  Shape s(batched.shape().begin() + 1, batched.shape().end());
  if (s.size() != 4) return batched.reshaped(s);
  if (s[0] == 1) return batched.reshaped({s[1], s[2], s[3]});
  Tensor<T> out({s[1], s[2], s[3]});
  const std::size_t plane = out.size();
  for (std::size_t c = 0; c < s[0]; ++c)
    for (std::size_t i = 0; i < plane; ++i) out[i] += batched[c * plane + i];
  return out;
}

template <typename T>
void check_target(const Network<T>& net, std::size_t target) {
  if (target >= net.classes())
    throw UsageError(concat("attribution: target class ", target, " out of range [0,", net.classes(), ")"));
}

template <typename T>
T stabilized(T z, double eps) {
  return static_cast<T>(static_cast<double>(z) + (z >= T{0} ? eps : -eps));
}

}  // namespace detail

/// Input gradient of the target logit, multiplied elementwise by the input.
template <typename T>
Tensor<T> gradient_times_input(const Network<T>& net, const Tensor<T>& sample, std::size_t target) {
  detail::check_target(net, target);
  const Tensor<T> x = detail::as_batch(net, sample);
  const auto fwd = forward(net, x, Mode::eval);
  const Tensor<T> g = backward_input(net, fwd.trace, target, ReluRule::standard);
  return detail::to_spatial(mul(g, x));
}

/// Input gradient with every ReLU passing only positive gradients through
/// positively activated units. The gated gradient itself is the heatmap.
template <typename T>
Tensor<T> guided_backprop(const Network<T>& net, const Tensor<T>& sample, std::size_t target) {
  detail::check_target(net, target);
  const Tensor<T> x = detail::as_batch(net, sample);
  const auto fwd = forward(net, x, Mode::eval);
  return detail::to_spatial(backward_input(net, fwd.trace, target, ReluRule::guided));
}

/// Epsilon-rule relevance propagation from the target logit down to the
/// input voxels. Biases are left out of the redistribution so the total is
/// conserved up to the epsilon leak.
template <typename T>
Tensor<T> lrp(const Network<T>& net, const Tensor<T>& sample, std::size_t target, const LrpConfig& cfg = {}) {
  cfg.validate();
  detail::check_target(net, target);
  const Tensor<T> x = detail::as_batch(net, sample);
  const auto fwd = forward(net, x, Mode::eval);
  const auto& layers = net.layers();
  Tensor<T> R(fwd.logits.shape());
  R[target] = fwd.logits[target];

  for (std::size_t li = layers.size(); li-- > 0;) {
    const auto& cache = fwd.trace.layers[li];
    const Tensor<T>& a = cache.input;
    Tensor<T> next = std::visit(
        overloaded{
            [&](const Conv3d<T>& c) {
              Tensor<T> weight = c.weight;
              if (cfg.batchnorm == BatchNormLrp::merged_linear && li + 1 < layers.size())
                if (const auto* bn = std::get_if<BatchNorm<T>>(&layers[li + 1])) {
                  std::vector<T> scale, shift;
                  kernels::batchnorm_affine(*bn, scale, shift);
                  const std::size_t per_out = weight.size() / weight.extent(0);
                  for (std::size_t oc = 0; oc < weight.extent(0); ++oc)
                    for (std::size_t k = 0; k < per_out; ++k) weight[oc * per_out + k] *= scale[oc];
                }
              Tensor<T> z(R.shape());
              kernels::conv3d_forward(weight, static_cast<const T*>(nullptr), a, z, Box3::full(z.shape()));
              for (std::size_t i = 0; i < z.size(); ++i) z[i] = R[i] / detail::stabilized(z[i], cfg.epsilon);
              Tensor<T> c_in(a.shape());
              kernels::conv3d_backward_input(weight, z, c_in);
              return mul(a, c_in);
            },
            [&](const Dense<T>& d) {
              Tensor<T> z(R.shape());
              kernels::dense_forward(d, a, z, false);
              for (std::size_t i = 0; i < z.size(); ++i) z[i] = R[i] / detail::stabilized(z[i], cfg.epsilon);
              Tensor<T> c_in(a.shape());
              kernels::dense_backward_input(d, z, c_in);
              return mul(a, c_in);
            },
            [&](const MaxPool&) {
              Tensor<T> r_in(a.shape());
              for (std::size_t o = 0; o < R.size(); ++o) r_in[cache.argmax[o]] += R[o];
              return r_in;
            },
            [&](const Flatten&) { return R.reshaped(a.shape()); },
            [&](const auto&) { return R; },  // batchnorm, ReLU, dropout pass relevance through
        },
        layers[li]);
    if (!all_finite(next))
      throw RunError(detail::concat("lrp: non-finite relevance at layer ", li, " (", layer_name(layers[li]), ")"));
    R = std::move(next);
  }
  return detail::to_spatial(R);
}

/// Patch origins along one axis on the stride grid; the last patch is
/// clamped to end at the boundary so every voxel is covered.
inline std::vector<std::size_t> occlusion_positions(std::size_t extent, std::size_t patch, std::size_t stride) {
  if (patch > extent)
    throw DataError("occlusion: patch " + std::to_string(patch) + " larger than volume extent " +
                    std::to_string(extent));
  std::vector<std::size_t> out;
  for (std::size_t p = 0;; p += stride) {
    const std::size_t origin = std::min(p, extent - patch);
    if (out.empty() || out.back() != origin) out.push_back(origin);
    if (origin + patch >= extent) break;
  }
  return out;
}

/// Sliding-patch occlusion. Each voxel receives the mean, over the patches
/// covering it, of logit(original) - logit(occluded).
template <typename T>
Tensor<T> occlusion(const Network<T>& net, const Tensor<T>& sample, std::size_t target,
                    const OcclusionConfig& cfg = {}, std::size_t workers = worker_count()) {
  cfg.validate();
  detail::check_target(net, target);
  const Tensor<T> x = detail::as_batch(net, sample);
  if (x.rank() != 5) throw ShapeError("occlusion: expects (C, D, H, W) samples, got " + shape_str(sample.shape()));
  const std::size_t C = x.extent(1), D = x.extent(2), H = x.extent(3), W = x.extent(4);
  const auto pd = occlusion_positions(D, cfg.patch, cfg.stride);
  const auto ph = occlusion_positions(H, cfg.patch, cfg.stride);
  const auto pw = occlusion_positions(W, cfg.patch, cfg.stride);
  const std::size_t n_pos = pd.size() * ph.size() * pw.size();

  const RegionEvaluator<T> evaluator(net, x);
  const double base = static_cast<double>(evaluator.base_logits()[target]);
  std::vector<double> deltas(n_pos);
  // Contiguous position chunks, each with its own scratch input and
  // activations that are patched and restored in place.
  const std::size_t chunks = std::max<std::size_t>(1, std::min(workers, n_pos));
  parallel_for(
      chunks,
      [&](std::size_t chunk) {
        auto ws = evaluator.make_workspace();
        Tensor<T> occluded = x;
        const std::size_t begin = n_pos * chunk / chunks, end = n_pos * (chunk + 1) / chunks;
        for (std::size_t k = begin; k < end; ++k) {
          const std::size_t od = pd[k / (ph.size() * pw.size())];
          const std::size_t oh = ph[(k / pw.size()) % ph.size()];
          const std::size_t ow = pw[k % pw.size()];
          const Box3 box{{od, oh, ow}, {od + cfg.patch, oh + cfg.patch, ow + cfg.patch}};
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t d = od; d < od + cfg.patch; ++d)
              for (std::size_t h = oh; h < oh + cfg.patch; ++h)
                for (std::size_t w = ow; w < ow + cfg.patch; ++w)
                  occluded[((c * D + d) * H + h) * W + w] = static_cast<T>(cfg.fill);
          const Tensor<T> logits = evaluator.logits(occluded, box, ws);
          deltas[k] = base - static_cast<double>(logits[target]);
          detail::copy_box(x, occluded, box);
        }
      },
      chunks);

  std::vector<double> heat(D * H * W, 0.0);
  std::vector<std::uint32_t> cover(D * H * W, 0);
  for (std::size_t k = 0; k < n_pos; ++k) {
    const std::size_t od = pd[k / (ph.size() * pw.size())];
    const std::size_t oh = ph[(k / pw.size()) % ph.size()];
    const std::size_t ow = pw[k % pw.size()];
    for (std::size_t d = od; d < od + cfg.patch; ++d)
      for (std::size_t h = oh; h < oh + cfg.patch; ++h)
        for (std::size_t w = ow; w < ow + cfg.patch; ++w) {
          heat[(d * H + h) * W + w] += deltas[k];
          cover[(d * H + h) * W + w] += 1;
        }
  }
  Tensor<T> out({D, H, W});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(heat[i] / cover[i]);
  return out;
}

template <typename T>
Tensor<T> attribute(const Network<T>& net, const Tensor<T>& sample, std::size_t target, Method method,
                    const AttributionConfig& cfg = {}, std::size_t workers = worker_count()) {
  switch (method) {
    case Method::gradient_input: return gradient_times_input(net, sample, target);
    case Method::guided_backprop: return guided_backprop(net, sample, target);
    case Method::lrp: return lrp(net, sample, target, cfg.lrp);
    case Method::occlusion: return occlusion(net, sample, target, cfg.occlusion, workers);
  }
  throw UsageError("attribute: unknown method");
}

// ---------------------------------------------------------------------------
// Test-set attribution

inline bool in_group(const Prediction& p, Group g) {
  if (g == Group::tp) return p.truth == ClassLabel::patient && p.predicted == ClassLabel::patient;
  return p.truth == ClassLabel::control && p.predicted == ClassLabel::control;
}

struct GroupHeatmaps {
  std::size_t run = 0;
  Group group = Group::tp;
  Method method = Method::gradient_input;
  std::vector<Heatmap> maps;
  std::string warning;  // set when the group is empty for this run
};

/// Heatmaps for the correctly classified test samples of one group, per run.
/// The attribution target is the true class logit.
inline std::vector<GroupHeatmaps> attribute_testset(const std::vector<RunResult>& runs,
                                                    const std::vector<VolumeSample>& test, Method method, Group group,
                                                    const AttributionConfig& cfg = {},
                                                    std::size_t workers = worker_count()) {
  std::vector<GroupHeatmaps> out;
  for (const auto& run : runs) {
    GroupHeatmaps gh;
    gh.run = run.run;
    gh.group = group;
    gh.method = method;
    if (run.failed) {
      gh.warning = "run " + std::to_string(run.run) + " failed; no heatmaps";
      out.push_back(std::move(gh));
      continue;
    }
    std::vector<const Prediction*> selected;
    for (const auto& p : run.predictions) {
      if (p.sample_index >= test.size()) throw DataError("attribute_testset: prediction refers past the test set");
      if (in_group(p, group)) selected.push_back(&p);
    }
    if (selected.empty()) gh.warning = std::string("run ") + std::to_string(run.run) + ": empty " + to_string(group) + " group";
    gh.maps.resize(selected.size());
    parallel_for(
        selected.size(),
        [&](std::size_t i) {
          const Prediction& p = *selected[i];
          const VolumeSample& s = test[p.sample_index];
          const auto target = static_cast<std::size_t>(p.truth);
          Heatmap h;
          h.values = attribute(run.network, s.volume, target, method, cfg, 1);
          h.method = method;
          h.target = target;
          h.subject_id = s.subject_id;
          h.timepoint = s.timepoint;
          h.run = run.run;
          gh.maps[i] = std::move(h);
        },
        workers);
    out.push_back(std::move(gh));
  }
  return out;
}

}  // namespace arob
