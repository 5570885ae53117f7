#pragma once

// Central-difference gradient checking of every differentiable operator and
// of composite probes up to the full micro pipeline.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "vpnet/network.hpp"
#include "vpnet/ops.hpp"
#include "vpnet/pointnet.hpp"
#include "vpnet/volume.hpp"

namespace vpnet {

/// One random instance: the tensors to differentiate, a scalar loss, and an
/// analytic routine that accumulates d loss / d tensor into their grads.
struct Probe {
  std::vector<std::pair<std::string, Tensor<double>*>> wrt;
  std::function<double()> loss;
  std::function<void()> backward;
  std::shared_ptr<void> state;  // owns whatever the closures point into
};

struct GradcheckOptions {
  double step = 1e-4;
  double tolerance = 1e-3;  // kinds may carry their own
  std::size_t probes = 5;
  std::uint64_t seed = 1;
  /// Test fixture: distorts the analytic gradient of this kind.
  std::string perturb;
};

struct GradcheckRow {
  std::string kind;
  std::size_t probe = 0;
  std::string wrt;
  std::size_t elements = 0;
  double max_rel_err = 0;
  double tolerance = 0;
  bool pass = true;
  std::size_t retried = 0;  // elements re-measured with a smaller step
};

struct GradcheckKind {
  std::string name;
  double tolerance;  // 0: use the option's tolerance
  std::function<Probe(std::uint64_t)> make;
};

/// |analytic - numeric| / max(1, |numeric|) per element, maximized per
/// tensor. An element that disagrees is re-measured once with step / 100,
/// which separates ReLU kinks inside the stencil from wrong gradients; those
/// re-measurements are counted in `retried`.
inline std::vector<GradcheckRow> check_probe(const std::string& kind, std::size_t index, Probe& p, double step,
                                             double tolerance, bool perturb = false) {
  for (auto& [name, t] : p.wrt) t->zero_grad();
  p.backward();
  std::vector<GradcheckRow> rows;
  for (auto& [name, t] : p.wrt) {
    std::vector<double> analytic(t->grad().begin(), t->grad().end());
    GradcheckRow row{kind, index, name, t->size(), 0, tolerance, true, 0};
    for (std::size_t i = 0; i < t->size(); ++i) {
      double a = analytic[i];
      if (perturb) a += 0.01 * std::max(1.0, std::abs(a));
      auto error_at = [&](double h) {
        const double saved = (*t)[i];
        (*t)[i] = saved + h;
        const double up = p.loss();
        (*t)[i] = saved - h;
        const double down = p.loss();
        (*t)[i] = saved;
        const double numeric = (up - down) / (2 * h);
        return std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      };
      double err = error_at(step);
      if (!(err <= tolerance)) {
        ++row.retried;
        err = error_at(step / 100);
      }
      if (!(err <= row.max_rel_err)) row.max_rel_err = std::isnan(err) ? INFINITY : err;
    }
    row.pass = row.max_rel_err <= tolerance;
    rows.push_back(row);
  }
  return rows;
}

namespace probes {

inline Tensor<double> random(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Values with |x - k| >= margin for every kink k.
inline Tensor<double> away_from(Shape s, Rng& rng, std::initializer_list<double> kinks, double lo, double hi,
                                double margin) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) {
    do {
      v = rng.uniform(lo, hi);
    } while (std::any_of(kinks.begin(), kinks.end(), [&](double k) { return std::abs(v - k) < margin; }));
  }
  return t;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

/// Probe whose loss is a fixed random projection of a tensor-valued forward.
template <typename State>
Probe projected(std::shared_ptr<State> st, std::vector<std::pair<std::string, Tensor<double>*>> wrt) {
  Probe p;
  p.wrt = std::move(wrt);
  p.loss = [st] { return dot(st->forward().data(), st->r.data()); };
  p.backward = [st] {
    st->forward();
    st->backward(std::span<const double>(st->r.data()));
  };
  p.state = st;
  return p;
}

inline CameraRig small_rig(std::size_t w, std::size_t h) {
  CameraRig rig;
  rig.fx = rig.fy = 2.0 * static_cast<double>(w);
  rig.cx = static_cast<double>(w) / 2;
  rig.cy = static_cast<double>(h) / 2;
  rig.baseline = 0.5;
  rig.width = w;
  rig.height = h;
  return rig;
}

/// Points whose feature coordinates are strictly inside the grid.
inline PointCloud random_points(const CameraRig& rig, const VoxelGridSpec& spec, std::size_t n, Rng& rng,
                                double z_lo, double z_hi) {
  PointCloud pc;
  const double umax = static_cast<double>((spec.W - 1) * spec.downsample);
  const double vmax = static_cast<double>((spec.H - 1) * spec.downsample);
  while (pc.size() < n) {
    const double z = rng.uniform(z_lo, z_hi);
    const Vec3 p = backproject(rig, rng.uniform(0.1, umax - 0.1), rng.uniform(0.1, vmax - 0.1), z);
    const Point3 q{static_cast<float>(p.x), static_cast<float>(p.y), static_cast<float>(p.z)};
    if (voxel_index_of(spec, rig, q.as_vec())) pc.add(q);
  }
  return pc;
}

inline Probe matmul_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> a, b, r;
    Tensor<double> forward() { return matmul(a, b); }
    void backward(std::span<const double> g) { matmul_backward(a, b, g); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  const std::size_t m = 2 + rng.below(3), k = 2 + rng.below(4), n = 2 + rng.below(4);
  st->a = random({m, k}, rng);
  st->b = random({k, n}, rng);
  st->r = random({m, n}, rng);
  return projected(st, {{"a", &st->a}, {"b", &st->b}});
}

inline Probe linear_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> x, w, b, r;
    Tensor<double> forward() { return linear(x, w, b); }
    void backward(std::span<const double> g) { linear_backward(x, w, b, g, true); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  st->x = random({4, 6}, rng);
  st->w = random({3, 4}, rng);
  st->b = random({3}, rng);
  st->r = random({3, 6}, rng);
  return projected(st, {{"x", &st->x}, {"weight", &st->w}, {"bias", &st->b}});
}

inline Probe conv2d_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> x, w, b, r;
    ConvGeometry g;
    Tensor<double> forward() { return conv2d(x, w, b, g); }
    void backward(std::span<const double> gy) { conv2d_backward(x, w, b, gy, g); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  st->g = {1 + seed % 2, 1};
  st->x = random({2, 6, 7}, rng);
  st->w = random({3, 2, 3, 3}, rng);
  st->b = random({3}, rng);
  st->r = random(st->forward().shape(), rng);
  return projected(st, {{"x", &st->x}, {"weight", &st->w}, {"bias", &st->b}});
}

inline Probe conv3d_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> x, w, b, r;
    ConvGeometry g;
    Tensor<double> forward() { return conv3d(x, w, b, g); }
    void backward(std::span<const double> gy) { conv3d_backward(x, w, b, gy, g); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  st->g = {1 + seed % 2, 1};
  st->x = random({2, 4, 5, 4}, rng);
  st->w = random({2, 2, 3, 3, 3}, rng);
  st->b = random({2}, rng);
  st->r = random(st->forward().shape(), rng);
  return projected(st, {{"x", &st->x}, {"weight", &st->w}, {"bias", &st->b}});
}

inline Probe relu_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> x, r;
    Tensor<double> forward() { return relu(x); }
    void backward(std::span<const double> g) { relu_backward(x, g); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  st->x = away_from({24}, rng, {0.0}, -2, 2, 0.05);
  st->r = random({24}, rng);
  return projected(st, {{"x", &st->x}});
}

inline Probe softmax_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> x, r;
    std::size_t axis = 0;
    Tensor<double> y;
    Tensor<double> forward() { return y = softmax(x, axis); }
    void backward(std::span<const double> g) { softmax_backward(x, y, g, axis); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  st->axis = seed % 3;
  st->x = random({3, 5, 2}, rng, -3, 3);
  st->r = random({3, 5, 2}, rng);
  return projected(st, {{"x", &st->x}});
}

inline Probe add_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> a, b, r;
    Tensor<double> forward() { return add(a, b); }
    void backward(std::span<const double> g) { add_backward(a, b, g); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  st->a = random({4, 5}, rng);
  st->b = random({4, 5}, rng);
  st->r = random({4, 5}, rng);
  return projected(st, {{"a", &st->a}, {"b", &st->b}});
}

inline Probe mul_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> a, b, r;
    Tensor<double> forward() { return mul(a, b); }
    void backward(std::span<const double> g) { mul_backward(a, b, g); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  st->a = random({4, 5}, rng);
  st->b = random({4, 5}, rng);
  st->r = random({4, 5}, rng);
  return projected(st, {{"a", &st->a}, {"b", &st->b}});
}

inline Probe bilinear_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> map, r;
    std::vector<Sample2d> at;
    Border border = Border::zeros;
    Tensor<double> forward() { return bilinear_sample_2d(map, std::span<const Sample2d>(at), border); }
    void backward(std::span<const double> g) { bilinear_sample_2d_backward(map, std::span<const Sample2d>(at), border, g); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  st->border = seed % 2 ? Border::zeros : Border::clamp;
  st->map = random({2, 5, 6}, rng);
  // Interior, non-integer coordinates plus two outside the map.
  for (int i = 0; i < 10; ++i) {
    st->at.push_back({static_cast<double>(rng.below(5)) + rng.uniform(0.1, 0.9),
                      static_cast<double>(rng.below(4)) + rng.uniform(0.1, 0.9)});
  }
  st->at.push_back({-1.5, 2.3});
  st->at.push_back({3.3, 7.25});
  st->r = random({2, st->at.size()}, rng);
  return projected(st, {{"map", &st->map}});
}

inline Probe mean_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> x, r;
    Tensor<double> forward() { return mean_reduce(x); }
    void backward(std::span<const double> g) { mean_reduce_backward(x, g[0]); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  st->x = random({3, 4}, rng);
  st->r = random({1}, rng);
  return projected(st, {{"x", &st->x}});
}

inline Probe smooth_l1_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> x, r;
    Tensor<double> forward() { return smooth_l1(x); }
    void backward(std::span<const double> g) { smooth_l1_backward(x, g); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  st->x = away_from({24}, rng, {-1.0, 1.0}, -3, 3, 0.05);
  st->r = random({24}, rng);
  return projected(st, {{"x", &st->x}});
}

inline Probe concat_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> a, b, r;
    Tensor<double> forward() { return concat0(a, b); }
    void backward(std::span<const double> g) { concat0_backward(a, b, g); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  st->a = random({2, 3, 4}, rng);
  st->b = random({1, 3, 4}, rng);
  st->r = random({3, 3, 4}, rng);
  return projected(st, {{"a", &st->a}, {"b", &st->b}});
}

/// Soft-argmax depth head on a random 48-vector (odd seeds) or a [6, 2, 3] volume.
inline Probe soft_argmax_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> x, r;
    std::vector<double> centers;
    SoftArgmax<double> fwd;
    Tensor<double> forward() {
      fwd = soft_argmax(x, std::span<const double>(centers));
      return fwd.value;
    }
    void backward(std::span<const double> g) { soft_argmax_backward(x, fwd, std::span<const double>(centers), g); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  const Shape s = seed % 2 ? Shape{48} : Shape{6, 2, 3};
  st->x = random(s, rng, -3, 3);
  st->centers = depth_bin_centers<double>(s[0], 100.0);
  st->r = random(st->forward().shape(), rng);
  return projected(st, {{"logits", &st->x}});
}

inline Probe fusionconv_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> fused, coeffs, mix, r;
    PointCloud points;
    ClusterIndex clusters;
    std::unique_ptr<FusionConv<double>> layer;
    Tensor<double> forward() { return layer->forward(fused, clusters, points); }
    void backward(std::span<const double> g) { layer->backward(g, fused); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  const auto rig = small_rig(32, 16);
  const auto spec = VoxelGridSpec::depth_linear(rig, 12, 20.0);
  const std::size_t n = 10 + rng.below(11), c = 3;
  st->points = random_points(rig, spec, n, rng, 2.0, 18.0);
  st->clusters = cluster(st->points, rig, spec, Window{2, 2, 3});
  st->fused = random({2 * c, n}, rng);
  st->coeffs = random({c, 4}, rng);
  st->mix = random({c, 2 * c}, rng);
  st->layer = std::make_unique<FusionConv<double>>(st->coeffs, st->mix);
  st->r = random({c, n}, rng);
  return projected(st, {{"fused", &st->fused}, {"coeffs", &st->coeffs}, {"mix", &st->mix}});
}

inline Probe pointnet_probe(std::uint64_t seed, PointMode mode) {
  struct S {
    ParameterSet<double> params;
    std::unique_ptr<PointFeatureNet<double>> net;
    Tensor<double> image, r;
    PointCloud points;
    ClusterIndex clusters;
    CameraRig rig;
    VoxelGridSpec spec;
    Tensor<double> forward() { return net->forward(image, points, &clusters, rig, spec); }
    void backward(std::span<const double> g) { net->backward(g, image); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  st->rig = small_rig(24, 16);
  st->spec = VoxelGridSpec::depth_linear(st->rig, 10, 20.0);
  const std::size_t c = 3, n = 8 + rng.below(8);
  st->points = random_points(st->rig, st->spec, n, rng, 2.0, 18.0);
  st->clusters = cluster(st->points, st->rig, st->spec, Window{1, 1, 2});
  st->net = std::make_unique<PointFeatureNet<double>>(st->params, mode, c, rng);
  // Zero biases put dead units exactly on the ReLU kink.
  for (auto& p : st->params) {
    if (p.name.ends_with(".bias")) p.value = random(p.value.shape(), rng, 0.05, 0.5);
  }
  st->image = random({c, st->spec.H, st->spec.W}, rng);
  st->r = random({c, n}, rng);
  std::vector<std::pair<std::string, Tensor<double>*>> wrt;
  if (mode == PointMode::fusionconv) wrt.push_back({"image", &st->image});
  for (auto& p : st->params) wrt.push_back({p.name, &p.value});
  return projected(st, std::move(wrt));
}

inline Probe stereo_payload_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> fl, fr, r;
    StereoSamples at;
    VoxelGridSpec spec;
    Tensor<double> forward() { return build_stereo_payload(fl, fr, at, spec); }
    void backward(std::span<const double> g) { build_stereo_payload_backward(fl, fr, at, g); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  CameraRig rig = small_rig(20, 12);
  rig.fx = rig.fy = 10;
  st->spec = seed % 2 ? VoxelGridSpec::depth_linear(rig, 6, 10.0) : VoxelGridSpec::disparity_linear(rig, 6, 10.0, 7.0);
  st->at = stereo_samples(rig, st->spec);
  st->fl = random({2, st->spec.H, st->spec.W}, rng);
  st->fr = random({2, st->spec.H, st->spec.W}, rng);
  st->r = random({4, st->spec.D, st->spec.H, st->spec.W}, rng);
  return projected(st, {{"left", &st->fl}, {"right", &st->fr}});
}

inline Probe embed_points_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> features, r;
    EmbeddingPlan plan;
    Tensor<double> forward() { return embed_point_features(plan, features); }
    void backward(std::span<const double> g) { embed_point_features_backward(plan, features, g); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  const auto rig = small_rig(16, 8);
  const auto spec = VoxelGridSpec::depth_linear(rig, 4, 20.0);
  // Small grid so collisions are common.
  const std::size_t n = 12;
  PointCloud pc = random_points(rig, spec, n, rng, 1.0, 19.0);
  st->plan = plan_embedding(pc, rig, spec);
  st->features = random({3, n}, rng);
  st->r = random({3, spec.D, spec.H, spec.W}, rng);
  return projected(st, {{"features", &st->features}});
}

inline Probe depth_resample_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> vol, r;
    DepthResample plan;
    Tensor<double> forward() { return resample_depth_axis(vol, plan); }
    void backward(std::span<const double> g) { resample_depth_axis_backward(vol, plan, g); }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  CameraRig rig = small_rig(16, 12);
  rig.fx = rig.fy = 10;
  const auto cost = VoxelGridSpec::disparity_linear(rig, 8, 20.0);
  const auto depth = VoxelGridSpec::depth_linear(rig, 6, 20.0);
  st->plan = plan_depth_resample(rig, cost, depth);
  st->vol = random({2, cost.D, cost.H, cost.W}, rng);
  st->r = random({2, depth.D, depth.H, depth.W}, rng);
  return projected(st, {{"volume", &st->vol}});
}

inline Probe extractor_probe(std::uint64_t seed) {
  struct S {
    ParameterSet<double> params;
    std::unique_ptr<FeatureExtractor<double>> net;
    FeatureExtractor<double>::Trace tr;
    Tensor<double> image, r;
    Tensor<double> forward() { return net->forward(image, tr); }
    void backward(std::span<const double> g) {
      accumulate_grad(tr.out, g);
      net->backward(tr, true);
      accumulate_grad(image, tr.input.grad());
    }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  st->net = std::make_unique<FeatureExtractor<double>>(st->params, 3, 2, rng);
  for (auto& p : st->params) {
    if (p.name.ends_with("bias")) p.value = random(p.value.shape(), rng, -0.1, 0.1);
  }
  st->image = random({3, 8, 8}, rng, 0, 1);
  st->r = random({2, 2, 2}, rng);
  std::vector<std::pair<std::string, Tensor<double>*>> wrt{{"image", &st->image}};
  for (auto& p : st->params) wrt.push_back({p.name, &p.value});
  return projected(st, std::move(wrt));
}

inline Probe aggregate_probe(std::uint64_t seed) {
  struct S {
    ParameterSet<double> params;
    std::unique_ptr<Aggregator<double>> net;
    Aggregator<double>::Trace tr;
    Tensor<double> volume, r;
    Tensor<double> forward() {
      net->forward(volume, tr);
      return tr.stages[0].logits;
    }
    void backward(std::span<const double> g) {
      accumulate_grad(tr.stages[0].logits, g);
      net->backward(tr, true);
      accumulate_grad(volume, tr.input.grad());
    }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  st->net = std::make_unique<Aggregator<double>>(st->params, 3, 2, 1, rng);
  // The zero head would hide every upstream gradient.
  for (auto& p : st->params) {
    if (p.name.find("head") != std::string::npos || p.name.ends_with("bias")) {
      p.value = random(p.value.shape(), rng, -0.5, 0.5);
    }
  }
  st->volume = random({3, 4, 4, 4}, rng);
  st->r = random({1, 4, 4, 4}, rng);
  std::vector<std::pair<std::string, Tensor<double>*>> wrt{{"volume", &st->volume}};
  for (auto& p : st->params) wrt.push_back({p.name, &p.value});
  return projected(st, std::move(wrt));
}

inline Probe regression_probe(std::uint64_t seed) {
  struct S {
    std::unique_ptr<DepthRegressor<double>> reg;
    DepthRegressor<double>::Trace tr;
    Tensor<double> head, r;
    Tensor<double> forward() { return reg->forward(head, tr); }
    void backward(std::span<const double> g) {
      const auto gh = reg->backward(tr, g);
      accumulate_grad(head, std::span<const double>(gh));
    }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  CameraRig rig = small_rig(12, 8);
  rig.fx = rig.fy = 20;
  const auto spec = seed % 2 ? VoxelGridSpec::depth_linear(rig, 6, 30.0) : VoxelGridSpec::disparity_linear(rig, 6, 30.0);
  st->reg = std::make_unique<DepthRegressor<double>>(rig, spec);
  st->head = random({1, spec.D, spec.H, spec.W}, rng, -2, 2);
  st->r = random({rig.height, rig.width}, rng);
  return projected(st, {{"logits", &st->head}});
}

inline Probe depth_loss_probe(std::uint64_t seed) {
  struct S {
    Tensor<double> pred;
    DepthMap truth;
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  const std::size_t w = 5, h = 4;
  std::vector<float> z(w * h);
  for (auto& v : z) v = static_cast<float>(rng.uniform(2, 20));
  z[3] = 0;  // invalid pixel
  st->truth = DepthMap::from_values(w, h, z, 100.0);
  const auto resid = away_from({h, w}, rng, {-1.0, 1.0}, -3, 3, 0.05);
  st->pred = Tensor<double>({h, w});
  for (std::size_t i = 0; i < w * h; ++i) st->pred[i] = static_cast<double>(st->truth.depth[i]) + resid[i];
  Probe p;
  p.wrt = {{"pred", &st->pred}};
  p.loss = [st] { return depth_loss(st->pred, st->truth); };
  p.backward = [st] {
    std::vector<double> g;
    depth_loss(st->pred, st->truth, &g);
    accumulate_grad(st->pred, std::span<const double>(g));
  };
  p.state = st;
  return p;
}

/// Micro pipeline: C=2, D=6, 8x8 images, 5 points; the probe index cycles
/// through the volume / point-network / fusion-level modes.
inline ModelConfig micro_config(std::size_t variant) {
  ModelConfig cfg;
  cfg.channels = 2;
  cfg.bins = 6;
  cfg.z_max = 20;
  cfg.stages = 2;
  cfg.weights = default_stage_weights(2);
  cfg.hidden = 2;
  switch (variant % 5) {
    case 0: break;
    case 1: cfg.pointnet = PointMode::mlp; break;
    case 2: cfg.volume = VolumeMode::cost; cfg.pointnet = PointMode::raw; break;
    case 3: cfg.volume = VolumeMode::depth; break;
    case 4: cfg.fusion = FusionLevel::early; cfg.pointnet = PointMode::raw; break;
  }
  return cfg;
}

inline Probe pipeline_probe(std::uint64_t seed) {
  struct S {
    std::unique_ptr<Model<double>> model;
    Tensor<double> left, right;
    PointCloud points;
    CameraRig rig;
    DepthMap truth;
    double run(bool grad) {
      const auto pred = model->forward(left, right, points, rig);
      return model->loss(pred, truth, grad).total;
    }
  };
  Rng rng(seed);
  auto st = std::make_shared<S>();
  const auto cfg = micro_config(seed);
  st->model = std::make_unique<Model<double>>(cfg, seed);
  for (auto& p : st->model->params()) {
    if (p.name.find("head") != std::string::npos || p.name.ends_with("bias")) {
      p.value = random(p.value.shape(), rng, -0.3, 0.3);
    }
  }
  st->rig = small_rig(8, 8);
  st->rig.fx = st->rig.fy = 8;
  st->rig.baseline = 1.0;
  st->left = random({3, 8, 8}, rng, 0, 1);
  st->right = random({3, 8, 8}, rng, 0, 1);
  const auto spec = st->model->embed_spec(st->rig);
  st->points = random_points(st->rig, spec, 5, rng, 2.5, 18.0);
  std::vector<float> z(64);
  for (auto& v : z) v = static_cast<float>(rng.uniform(2, 18));
  st->truth = DepthMap::from_values(8, 8, z, cfg.z_max);
  Probe p;
  for (auto& prm : st->model->params()) p.wrt.push_back({prm.name, &prm.value});
  p.loss = [st] { return st->run(false); };
  p.backward = [st] { st->run(true); };
  p.state = st;
  return p;
}

}  // namespace probes

/// Every registered kind with its probe factory.
inline const std::vector<GradcheckKind>& gradcheck_registry() {
  using namespace probes;
  static const std::vector<GradcheckKind> kinds = {
      {"matmul", 0, matmul_probe},
      {"linear", 0, linear_probe},
      {"conv2d", 0, conv2d_probe},
      {"conv3d", 0, conv3d_probe},
      {"relu", 0, relu_probe},
      {"softmax", 0, softmax_probe},
      {"add", 0, add_probe},
      {"mul", 0, mul_probe},
      {"bilinear-sample-2d", 0, bilinear_probe},
      {"mean-reduce", 0, mean_probe},
      {"smooth-l1", 0, smooth_l1_probe},
      {"concat", 0, concat_probe},
      {"soft-argmax", 0, soft_argmax_probe},
      {"fusionconv", 0, fusionconv_probe},
      {"pointnet-fusionconv", 0, [](std::uint64_t s) { return pointnet_probe(s, PointMode::fusionconv); }},
      {"pointnet-mlp", 0, [](std::uint64_t s) { return pointnet_probe(s, PointMode::mlp); }},
      {"stereo-payload", 0, stereo_payload_probe},
      {"embed-points", 0, embed_points_probe},
      {"depth-resample", 0, depth_resample_probe},
      {"feature-extractor", 0, extractor_probe},
      {"aggregate-stage", 0, aggregate_probe},
      {"depth-regression", 0, regression_probe},
      {"depth-loss", 0, depth_loss_probe},
      {"pipeline-micro", 2e-3, pipeline_probe},
  };
  return kinds;
}

inline const GradcheckKind& find_gradcheck_kind(const std::string& name) {
  for (const auto& k : gradcheck_registry()) {
    if (k.name == name) return k;
  }
  throw UsageError("gradcheck: no registered backward for operator '" + name + "'");
}

inline std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

/// Runs opts.probes random instances of one kind.
inline std::vector<GradcheckRow> gradcheck(const std::string& kind, const GradcheckOptions& opts = {}) {
  const auto& k = find_gradcheck_kind(kind);
  const double tol = k.tolerance > 0 ? k.tolerance : opts.tolerance;
  std::vector<GradcheckRow> rows;
  for (std::size_t i = 0; i < opts.probes; ++i) {
    Probe p = k.make(derive_seed(derive_seed(opts.seed, name_hash(kind)), i));
    auto r = check_probe(kind, i, p, opts.step, tol, opts.perturb == kind);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return rows;
}

struct GradcheckSummary {
  std::string kind;
  std::size_t probes = 0;
  double max_rel_err = 0;
  double tolerance = 0;
  bool pass = true;
};

inline std::vector<GradcheckSummary> summarize(const std::vector<GradcheckRow>& rows) {
  std::vector<GradcheckSummary> out;
  for (const auto& r : rows) {
    if (out.empty() || out.back().kind != r.kind) out.push_back({r.kind, 0, 0, r.tolerance, true});
    auto& s = out.back();
    s.probes = std::max(s.probes, r.probe + 1);
    s.max_rel_err = std::max(s.max_rel_err, r.max_rel_err);
    s.pass = s.pass && r.pass;
  }
  return out;
}

inline std::vector<GradcheckRow> gradcheck_all(const GradcheckOptions& opts = {}) {
  std::vector<GradcheckRow> rows;
  for (const auto& k : gradcheck_registry()) {
    auto r = gradcheck(k.name, opts);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return rows;
}

}  // namespace vpnet
