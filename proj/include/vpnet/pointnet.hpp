#pragma once

// Image-guided point features: frustum-window clustering, image-to-point
// fusion, the FusionConv layer, and the raw / per-point-MLP baselines.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "vpnet/geometry.hpp"
#include "vpnet/ops.hpp"
#include "vpnet/optim.hpp"
#include "vpnet/rng.hpp"

namespace vpnet {

/// Half-extents of the clustering window in voxel units (u, v, depth bin).
struct Window {
  std::size_t wu = 1, wv = 1, wd = 1;
};

inline bool in_window(const VoxelIndex& a, const VoxelIndex& b, const Window& w) {
  auto diff = [](std::size_t x, std::size_t y) { return x > y ? x - y : y - x; };
  return diff(a.iu, b.iu) <= w.wu && diff(a.iv, b.iv) <= w.wv && diff(a.id, b.id) <= w.wd;
}

/// Neighbor lists per center point, ascending point index, center included.
struct ClusterIndex {
  Window window;
  std::vector<VoxelIndex> voxels;
  std::vector<std::vector<std::uint32_t>> neighbors;

  std::size_t size() const { return neighbors.size(); }
};

/// Keeps points whose voxel lies inside the grid and whose continuous
/// feature-map coordinate lies inside [0, W-1] x [0, H-1], so they can be
/// both embedded and sampled without clamping.
struct FilteredCloud {
  PointCloud cloud;
  std::size_t dropped = 0;
};

inline FilteredCloud filter_points_for_grid(const PointCloud& points, const CameraRig& rig,
                                            const VoxelGridSpec& spec) {
  FilteredCloud out;
  const double ds = static_cast<double>(spec.downsample);
  for (const auto& p : points) {
    const Vec3 v = p.as_vec();
    bool keep = voxel_index_of(spec, rig, v).has_value();
    if (keep) {
      const Pixel px = project(rig, v);
      const double fu = px.u / ds, fv = px.v / ds;
      keep = fu >= 0 && fu <= static_cast<double>(spec.W - 1) && fv >= 0 && fv <= static_cast<double>(spec.H - 1);
    }
    if (keep) {
      out.cloud.add(p);
    } else {
      ++out.dropped;
    }
  }
  return out;
}

/// Frustum-window clustering through a hash of occupied voxels.
inline ClusterIndex cluster(const PointCloud& points, const CameraRig& rig, const VoxelGridSpec& spec,
                            Window window = {}) {
  ClusterIndex ci;
  ci.window = window;
  ci.voxels.reserve(points.size());
  std::unordered_map<std::size_t, std::vector<std::uint32_t>> buckets;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto v = voxel_index_of(spec, rig, points[i].as_vec());
    if (!v) throw UsageError("cluster: point " + std::to_string(i) + " lies outside the voxel grid");
    ci.voxels.push_back(*v);
    buckets[flat_index(spec, *v)].push_back(static_cast<std::uint32_t>(i));
  }
  ci.neighbors.resize(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& c = ci.voxels[i];
    auto& out = ci.neighbors[i];
    const std::size_t d0 = c.id >= window.wd ? c.id - window.wd : 0;
    const std::size_t v0 = c.iv >= window.wv ? c.iv - window.wv : 0;
    const std::size_t u0 = c.iu >= window.wu ? c.iu - window.wu : 0;
    const std::size_t d1 = std::min(spec.D - 1, c.id + window.wd);
    const std::size_t v1 = std::min(spec.H - 1, c.iv + window.wv);
    const std::size_t u1 = std::min(spec.W - 1, c.iu + window.wu);
    for (std::size_t d = d0; d <= d1; ++d)
      for (std::size_t v = v0; v <= v1; ++v)
        for (std::size_t u = u0; u <= u1; ++u) {
          const auto it = buckets.find(flat_index(spec, {u, v, d}));
          if (it != buckets.end()) out.insert(out.end(), it->second.begin(), it->second.end());
        }
    std::sort(out.begin(), out.end());
  }
  return ci;
}

/// Continuous feature-map coordinates (image pixel / downsample) of each point.
inline std::vector<Sample2d> feature_coords(const PointCloud& points, const CameraRig& rig,
                                            const VoxelGridSpec& spec) {
  std::vector<Sample2d> at;
  at.reserve(points.size());
  const double ds = static_cast<double>(spec.downsample);
  for (const auto& p : points) {
    const Pixel px = project(rig, p.as_vec());
    at.push_back({px.u / ds, px.v / ds});
  }
  return at;
}

/// [C x N] point features -> [2C x N]: bilinear samples of the left feature
/// map at each point's projection, followed by the point features unchanged.
template <typename T>
Tensor<T> image_to_point_fuse(const Tensor<T>& left_features, std::span<const Sample2d> at,
                              const Tensor<T>& point_features) {
  require_rank("image-to-point-fuse", point_features.shape(), 2);
  if (point_features.dim(1) != at.size() || point_features.dim(0) != left_features.dim(0)) {
    throw ShapeError("image-to-point-fuse: point features " + to_string(point_features.shape()) +
                     " vs feature map " + to_string(left_features.shape()) + " and " +
                     std::to_string(at.size()) + " points");
  }
  return concat0(bilinear_sample_2d(left_features, at, Border::zeros), point_features);
}

template <typename T>
void image_to_point_fuse_backward(Tensor<T>& left_features, std::span<const Sample2d> at,
                                  Tensor<T>& point_features, ConstSpan<T> g_fused,
                                  bool need_image = true) {
  const std::size_t half = point_features.size();
  if (need_image) bilinear_sample_2d_backward(left_features, at, Border::zeros, g_fused.first(half));
  accumulate_grad(point_features, g_fused.subspan(half));
}

/// G(dp) = A0 + A1 dx + A2 dy + A3 dz for one output channel.
template <typename T>
T geometric_weight(const T* a, T dx, T dy, T dz) {
  return a[0] + a[1] * dx + a[2] * dy + a[3] * dz;
}

/// One FusionConv layer. The fused [2C x N] features are first mixed to C
/// channels by `mix` [C x 2C]; each center then averages its neighbors'
/// mixed features weighted by a per-channel G(p_c - p_i) with coefficients
/// `coeffs` [C x 4]. dp is in meters.
template <typename T>
class FusionConv {
 public:
  FusionConv(Tensor<T>& coeffs, Tensor<T>& mix) : coeffs_(&coeffs), mix_(&mix) {
    require_rank("fusionconv", coeffs.shape(), 2);
    require_rank("fusionconv", mix.shape(), 2);
    if (coeffs.dim(1) != 4 || coeffs.dim(0) != mix.dim(0)) {
      throw ShapeError("fusionconv: coefficients " + to_string(coeffs.shape()) + " vs mix " + to_string(mix.shape()));
    }
  }

  Tensor<T> forward(const Tensor<T>& fused, const ClusterIndex& clusters, const PointCloud& points) {
    const std::size_t n = fused.dim(1);
    if (clusters.size() != n || points.size() != n) {
      throw ShapeError("fusionconv: " + std::to_string(n) + " feature columns, " + std::to_string(clusters.size()) +
                       " clusters, " + std::to_string(points.size()) + " points");
    }
    mixed_ = matmul(*mix_, fused);
    clusters_ = &clusters;
    points_ = &points;
    const std::size_t c = mix_->dim(0);
    Tensor<T> out({c, n});
    parallel_for(n, [&](std::size_t j) {
      const auto& nb = clusters.neighbors[j];
      const T inv = T{1} / static_cast<T>(nb.size());
      const Point3& pc = points[j];
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* a = &(*coeffs_)[ch * 4];
        T acc{0};
        for (std::uint32_t i : nb) {
          const Point3& pi = points[i];
          const T g = geometric_weight(a, static_cast<T>(pc.x) - static_cast<T>(pi.x),
                                       static_cast<T>(pc.y) - static_cast<T>(pi.y),
                                       static_cast<T>(pc.z) - static_cast<T>(pi.z));
          acc += mixed_[ch * n + i] * g;
        }
        out[ch * n + j] = acc * inv;
      }
    });
    return out;
  }

  /// Accumulates into fused.grad() and the coefficient / mix gradients.
  /// Point coordinates are inputs, not parameters, and receive nothing.
  void backward(ConstSpan<T> g_out, Tensor<T>& fused, bool need_input = true) {
    if (clusters_ == nullptr) throw Error("fusionconv: backward called before forward");
    const std::size_t c = mix_->dim(0), n = fused.dim(1);
    if (g_out.size() != c * n) throw ShapeError("fusionconv backward: upstream size mismatch");
    Tensor<T> g_mixed({c, n});
    auto g_coeffs = coeffs_->grad();
    // Each output channel owns its row of g_mixed and its coefficients.
    parallel_for(c, [&](std::size_t ch) {
      const T* a = &(*coeffs_)[ch * 4];
      T ga[4]{};
      for (std::size_t j = 0; j < n; ++j) {
        const T up = g_out[ch * n + j];
        if (up == T{0}) continue;
        const auto& nb = clusters_->neighbors[j];
        const T scale = up / static_cast<T>(nb.size());
        const Point3& pc = (*points_)[j];
        for (std::uint32_t i : nb) {
          const Point3& pi = (*points_)[i];
          const T dx = static_cast<T>(pc.x) - static_cast<T>(pi.x);
          const T dy = static_cast<T>(pc.y) - static_cast<T>(pi.y);
          const T dz = static_cast<T>(pc.z) - static_cast<T>(pi.z);
          const T m = mixed_[ch * n + i];
          g_mixed[ch * n + i] += scale * geometric_weight(a, dx, dy, dz);
          ga[0] += scale * m;
          ga[1] += scale * m * dx;
          ga[2] += scale * m * dy;
          ga[3] += scale * m * dz;
        }
      }
      for (int k = 0; k < 4; ++k) g_coeffs[ch * 4 + k] += ga[k];
    });
    matmul_backward(*mix_, fused, g_mixed.data(), true, need_input);
  }

  const Tensor<T>& mixed() const { return mixed_; }

 private:
  Tensor<T>* coeffs_;
  Tensor<T>* mix_;
  Tensor<T> mixed_;
  const ClusterIndex* clusters_ = nullptr;
  const PointCloud* points_ = nullptr;
};

enum class PointMode { raw, mlp, fusionconv };

inline const char* to_string(PointMode m) {
  switch (m) {
    case PointMode::raw: return "raw";
    case PointMode::mlp: return "mlp";
    case PointMode::fusionconv: return "fusionconv";
  }
  return "?";
}

/// He-uniform initialisation over fan_in.
template <typename T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

/// Point feature extractor producing [C x N] from raw coordinates: a lift of
/// z_max-normalised xyz to C channels, then three FusionConv layers (image
/// guided, windowed) or three per-point linear layers (MLP baseline), with
/// ReLU between layers. Raw mode has no parameters and produces nothing.
template <typename T>
class PointFeatureNet {
 public:
  static constexpr std::size_t kLayers = 3;

  PointFeatureNet(ParameterSet<T>& params, PointMode mode, std::size_t channels, Rng& rng) : mode_(mode) {
    if (mode == PointMode::raw) return;
    lift_w_ = &params.add("pointnet.lift.weight", he_uniform<T>({channels, 3}, 3, rng)).value;
    lift_b_ = &params.add("pointnet.lift.bias", Tensor<T>({channels})).value;
    for (std::size_t l = 0; l < kLayers; ++l) {
      const std::string prefix = "pointnet.layer" + std::to_string(l);
      if (mode == PointMode::fusionconv) {
        Tensor<T> coeffs({channels, 4});
        for (std::size_t c = 0; c < channels; ++c) {
          coeffs[c * 4] = T{1};
          for (int k = 1; k < 4; ++k) coeffs[c * 4 + k] = static_cast<T>(rng.uniform(-0.01, 0.01));
        }
        auto& a = params.add(prefix + ".coeffs", std::move(coeffs)).value;
        auto& mix = params.add(prefix + ".mix", he_uniform<T>({channels, 2 * channels}, 2 * channels, rng)).value;
        convs_.emplace_back(a, mix);
      } else {
        weights_.push_back(&params.add(prefix + ".weight", he_uniform<T>({channels, channels}, channels, rng)).value);
        biases_.push_back(&params.add(prefix + ".bias", Tensor<T>({channels})).value);
      }
    }
  }

  PointMode mode() const { return mode_; }

  /// points must already be filtered to the grid; clusters is required in
  /// fusionconv mode; left_features is [C, H, W].
  Tensor<T> forward(const Tensor<T>& left_features, const PointCloud& points, const ClusterIndex* clusters,
                    const CameraRig& rig, const VoxelGridSpec& spec) {
    if (mode_ == PointMode::raw) throw UsageError("point network: raw mode has no features");
    if (points.empty()) throw UsageError("point network: empty cloud");
    const std::size_t n = points.size();
    coords_ = Tensor<T>({3, n});
    for (std::size_t i = 0; i < n; ++i) {
      coords_[i] = static_cast<T>(points[i].x / spec.z_max);
      coords_[n + i] = static_cast<T>(points[i].y / spec.z_max);
      coords_[2 * n + i] = static_cast<T>(points[i].z / spec.z_max);
    }
    pre_.clear();
    act_.clear();
    fused_.clear();
    pre_.push_back(linear(coords_, *lift_w_, *lift_b_));
    act_.push_back(relu(pre_.back()));
    if (mode_ == PointMode::fusionconv) {
      if (clusters == nullptr) throw UsageError("point network: fusionconv needs clusters");
      samples_ = feature_coords(points, rig, spec);
      for (std::size_t l = 0; l < kLayers; ++l) {
        fused_.push_back(image_to_point_fuse(left_features, samples_, act_.back()));
        pre_.push_back(convs_[l].forward(fused_.back(), *clusters, points));
        act_.push_back(l + 1 < kLayers ? relu(pre_.back()) : pre_.back());
      }
    } else {
      for (std::size_t l = 0; l < kLayers; ++l) {
        pre_.push_back(linear(act_.back(), *weights_[l], *biases_[l]));
        act_.push_back(l + 1 < kLayers ? relu(pre_.back()) : pre_.back());
      }
    }
    return act_.back();
  }

  /// g_out is the gradient of the forward output; image-feature gradients
  /// go into left_features.grad().
  void backward(ConstSpan<T> g_out, Tensor<T>& left_features, bool need_image = true) {
    if (pre_.empty()) throw Error("point network: backward called before forward");
    std::vector<T> g(g_out.begin(), g_out.end());
    for (std::size_t l = kLayers; l-- > 0;) {
      Tensor<T>& pre = pre_[l + 1];
      pre.zero_grad();
      if (l + 1 < kLayers) {
        relu_backward(pre, std::span<const T>(g));
      } else {
        accumulate_grad(pre, std::span<const T>(g));
      }
      Tensor<T>& input = act_[l];
      input.zero_grad();
      if (mode_ == PointMode::fusionconv) {
        Tensor<T>& fused = fused_[l];
        fused.zero_grad();
        convs_[l].backward(pre.grad(), fused);
        image_to_point_fuse_backward(left_features, samples_, input, fused.grad(), need_image);
      } else {
        linear_backward(input, *weights_[l], *biases_[l], pre.grad());
      }
      g.assign(input.grad().begin(), input.grad().end());
    }
    pre_[0].zero_grad();
    relu_backward(pre_[0], std::span<const T>(g));
    linear_backward(coords_, *lift_w_, *lift_b_, pre_[0].grad(), false);
  }

 private:
  PointMode mode_;
  Tensor<T>* lift_w_ = nullptr;
  Tensor<T>* lift_b_ = nullptr;
  std::vector<FusionConv<T>> convs_;
  std::vector<Tensor<T>*> weights_;
  std::vector<Tensor<T>*> biases_;

  Tensor<T> coords_;
  std::vector<Sample2d> samples_;
  std::vector<Tensor<T>> pre_;    // pre-activation per layer (0 = lift)
  std::vector<Tensor<T>> act_;    // activation per layer (0 = lift)
  std::vector<Tensor<T>> fused_;  // fusionconv inputs
};

}  // namespace vpnet
