#pragma once

// Fusion-volume construction: stereo feature filling, point embedding, the
// cost-volume and resampled depth-volume baselines, and the quantization
// analysis of embedded points.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "vpnet/geometry.hpp"
#include "vpnet/ops.hpp"

namespace vpnet {

// ------------------------------------------------------------ stereo fill

/// Feature-map sample locations of every voxel, D-major then H, W.
/// Left samples sit on the voxel's own feature cell; right samples are
/// shifted left by the bin-center disparity (divided by the downsample).
struct StereoSamples {
  std::vector<Sample2d> left;
  std::vector<Sample2d> right;
};

inline StereoSamples stereo_samples(const CameraRig& rig, const VoxelGridSpec& spec) {
  StereoSamples s;
  s.left.reserve(spec.voxel_count());
  s.right.reserve(spec.voxel_count());
  const double ds = static_cast<double>(spec.downsample);
  for (std::size_t d = 0; d < spec.D; ++d) {
    const double shift = spec.bin_disparity(rig, d) / ds;  // +inf at z = 0: sample lands outside
    for (std::size_t v = 0; v < spec.H; ++v) {
      for (std::size_t u = 0; u < spec.W; ++u) {
        s.left.push_back({static_cast<double>(u), static_cast<double>(v)});
        s.right.push_back({static_cast<double>(u) - shift, static_cast<double>(v)});
      }
    }
  }
  return s;
}

namespace detail {

template <typename T>
void check_feature_maps(const char* op, const Tensor<T>& fl, const Tensor<T>& fr, const VoxelGridSpec& spec) {
  require_rank(op, fl.shape(), 3);
  require_same_shape(op, fl.shape(), fr.shape());
  if (fl.dim(1) != spec.H || fl.dim(2) != spec.W) {
    throw ShapeError(std::string(op) + ": feature map " + to_string(fl.shape()) + " does not match grid " +
                     std::to_string(spec.H) + "x" + std::to_string(spec.W));
  }
}

}  // namespace detail

/// F_L, F_R [C, H, W] -> [2C, D, H, W]: left features at each voxel's cell,
/// right features bilinearly sampled at the disparity-shifted location
/// (zero outside the map). Works for either bin mode.
template <typename T>
Tensor<T> build_stereo_payload(const Tensor<T>& left, const Tensor<T>& right, const StereoSamples& at,
                               const VoxelGridSpec& spec) {
  detail::check_feature_maps("stereo payload", left, right, spec);
  const std::size_t c = left.dim(0);
  Tensor<T> l = bilinear_sample_2d(left, std::span<const Sample2d>(at.left), Border::zeros);
  Tensor<T> r = bilinear_sample_2d(right, std::span<const Sample2d>(at.right), Border::zeros);
  return concat0(l, r).reshaped({2 * c, spec.D, spec.H, spec.W});
}

template <typename T>
Tensor<T> build_stereo_payload(const Tensor<T>& left, const Tensor<T>& right, const CameraRig& rig,
                               const VoxelGridSpec& spec) {
  return build_stereo_payload(left, right, stereo_samples(rig, spec), spec);
}

template <typename T>
void build_stereo_payload_backward(Tensor<T>& left, Tensor<T>& right, const StereoSamples& at,
                                   ConstSpan<T> g_payload) {
  const std::size_t half = g_payload.size() / 2;
  bilinear_sample_2d_backward(left, std::span<const Sample2d>(at.left), Border::zeros, g_payload.first(half));
  bilinear_sample_2d_backward(right, std::span<const Sample2d>(at.right), Border::zeros, g_payload.subspan(half));
}

/// The classical concatenation cost volume: bins uniform in disparity.
template <typename T>
Tensor<T> build_cost_volume_baseline(const Tensor<T>& left, const Tensor<T>& right, const CameraRig& rig,
                                     const VoxelGridSpec& spec) {
  if (spec.mode != BinMode::disparity_linear) throw UsageError("cost volume: needs a disparity-linear grid");
  return build_stereo_payload(left, right, rig, spec);
}

// --------------------------------------------------------- point embedding

/// Points grouped by the voxel they land in. Voxels are listed in ascending
/// flat index, and each voxel's points in ascending point index.
struct EmbeddingPlan {
  struct Cell {
    std::size_t voxel = 0;
    std::vector<std::uint32_t> points;
  };
  VoxelGridSpec spec;
  std::vector<Cell> cells;
  std::size_t point_count = 0;
  std::size_t skipped = 0;  // outside the grid or depth range
};

inline EmbeddingPlan plan_embedding(const PointCloud& points, const CameraRig& rig, const VoxelGridSpec& spec) {
  EmbeddingPlan plan;
  plan.spec = spec;
  plan.point_count = points.size();
  std::map<std::size_t, std::vector<std::uint32_t>> groups;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto v = voxel_index_of(spec, rig, points[i].as_vec());
    if (!v) {
      ++plan.skipped;
      continue;
    }
    groups[flat_index(spec, *v)].push_back(static_cast<std::uint32_t>(i));
  }
  plan.cells.reserve(groups.size());
  for (auto& [voxel, members] : groups) plan.cells.push_back({voxel, std::move(members)});
  return plan;
}

/// Binary occupancy channel [1, D, H, W].
template <typename T>
Tensor<T> embed_occupancy(const EmbeddingPlan& plan) {
  const auto& s = plan.spec;
  Tensor<T> occ({1, s.D, s.H, s.W});
  for (const auto& cell : plan.cells) occ[cell.voxel] = T{1};
  return occ;
}

/// Point features [C, N] -> [C, D, H, W]; colliding points are averaged and
/// unoccupied voxels stay exactly zero.
template <typename T>
Tensor<T> embed_point_features(const EmbeddingPlan& plan, const Tensor<T>& features) {
  require_rank("embed points", features.shape(), 2);
  if (features.dim(1) != plan.point_count) {
    throw ShapeError("embed points: features " + to_string(features.shape()) + " for " +
                     std::to_string(plan.point_count) + " points");
  }
  const auto& s = plan.spec;
  const std::size_t c = features.dim(0), n = features.dim(1), plane = s.voxel_count();
  Tensor<T> out({c, s.D, s.H, s.W});
  for (const auto& cell : plan.cells) {
    const T inv = T{1} / static_cast<T>(cell.points.size());
    for (std::size_t ch = 0; ch < c; ++ch) {
      T acc{0};
      for (std::uint32_t i : cell.points) acc += features[ch * n + i];
      out[ch * plane + cell.voxel] = acc * inv;
    }
  }
  return out;
}

template <typename T>
void embed_point_features_backward(const EmbeddingPlan& plan, Tensor<T>& features, ConstSpan<T> g_out) {
  const std::size_t c = features.dim(0), n = features.dim(1), plane = plan.spec.voxel_count();
  auto g = features.grad();
  for (const auto& cell : plan.cells) {
    const T inv = T{1} / static_cast<T>(cell.points.size());
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T up = g_out[ch * plane + cell.voxel] * inv;
      for (std::uint32_t i : cell.points) g[ch * n + i] += up;
    }
  }
}

/// Occupancy mask [D x H x W] of an embedding.
inline std::vector<std::uint8_t> occupancy_mask(const EmbeddingPlan& plan) {
  std::vector<std::uint8_t> mask(plan.spec.voxel_count(), 0);
  for (const auto& cell : plan.cells) mask[cell.voxel] = 1;
  return mask;
}

/// What the point channels of a volume hold.
enum class PointChannels {
  none,       // 2C: stereo only
  occupancy,  // 2C + 1
  features,   // 3C
};

/// A voxel grid with its channel payload [Ch, D, H, W]; channels are laid
/// out as left C | right C | point channels.
template <typename T>
struct FusionVolume {
  VoxelGridSpec spec;
  std::size_t feature_channels = 0;
  PointChannels point_channels = PointChannels::none;
  Tensor<T> payload;
  std::vector<std::uint8_t> occupancy;

  std::size_t channels() const { return payload.dim(0); }

  std::size_t occupied() const {
    return static_cast<std::size_t>(std::count(occupancy.begin(), occupancy.end(), std::uint8_t{1}));
  }

  /// Copy of channels [first, first + count).
  Tensor<T> slice_channels(std::size_t first, std::size_t count) const {
    const std::size_t plane = spec.voxel_count();
    if (first + count > channels() || count == 0) throw ShapeError("volume: channel slice out of range");
    std::vector<T> v(payload.data().begin() + static_cast<std::ptrdiff_t>(first * plane),
                     payload.data().begin() + static_cast<std::ptrdiff_t>((first + count) * plane));
    return Tensor<T>({count, spec.D, spec.H, spec.W}, std::move(v));
  }
};

/// Convenience assembly used by tests and tools; the network keeps the
/// pieces separate so it can route gradients.
template <typename T>
FusionVolume<T> assemble_volume(const Tensor<T>& left, const Tensor<T>& right, const PointCloud& points,
                                const Tensor<T>* point_features, PointChannels mode, const CameraRig& rig,
                                const VoxelGridSpec& spec) {
  FusionVolume<T> vol;
  vol.spec = spec;
  vol.feature_channels = left.dim(0);
  vol.point_channels = mode;
  vol.payload = build_stereo_payload(left, right, rig, spec);
  vol.occupancy.assign(spec.voxel_count(), 0);
  if (mode == PointChannels::none) return vol;
  const auto plan = plan_embedding(points, rig, spec);
  vol.occupancy = occupancy_mask(plan);
  if (mode == PointChannels::occupancy) {
    vol.payload = concat0(vol.payload, embed_occupancy<T>(plan));
  } else {
    if (point_features == nullptr) throw UsageError("volume: feature mode needs point features");
    if (points.empty()) {
      vol.payload = concat0(vol.payload, Tensor<T>({left.dim(0), spec.D, spec.H, spec.W}));
    } else {
      vol.payload = concat0(vol.payload, embed_point_features(plan, *point_features));
    }
  }
  return vol;
}

// ------------------------------------------------- depth-volume baseline

/// Linear interpolation along the disparity axis of a disparity-linear
/// volume onto the bin centers of a depth-linear grid. Depths whose
/// disparity falls outside [0, d_max] (including z = 0) clamp to the edge
/// slice.
struct DepthResample {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;  // weight of hi
  std::size_t source_bins = 0;
};

inline DepthResample plan_depth_resample(const CameraRig& rig, const VoxelGridSpec& cost_spec,
                                         const VoxelGridSpec& depth_spec) {
  if (cost_spec.mode != BinMode::disparity_linear || depth_spec.mode != BinMode::depth_linear) {
    throw UsageError("depth resample: needs a disparity-linear source and depth-linear target");
  }
  if (cost_spec.W != depth_spec.W || cost_spec.H != depth_spec.H) {
    throw UsageError("depth resample: source and target grids differ in W or H");
  }
  DepthResample r;
  r.source_bins = cost_spec.D;
  const double last = static_cast<double>(cost_spec.D - 1);
  for (std::size_t k = 0; k < depth_spec.D; ++k) {
    const double disp = depth_spec.bin_disparity(rig, k);
    double pos = disp / cost_spec.spacing();
    if (!std::isfinite(pos) || pos > last) pos = last;
    if (pos < 0) pos = 0;
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, cost_spec.D - 1);
    r.lo.push_back(lo);
    r.hi.push_back(hi);
    r.frac.push_back(pos - static_cast<double>(lo));
  }
  return r;
}

template <typename T>
Tensor<T> resample_depth_axis(const Tensor<T>& volume, const DepthResample& plan) {
  require_rank("depth resample", volume.shape(), 4);
  if (volume.dim(1) != plan.source_bins) {
    throw ShapeError("depth resample: volume " + to_string(volume.shape()) + " has the wrong bin count");
  }
  const std::size_t c = volume.dim(0), h = volume.dim(2), w = volume.dim(3), plane = h * w;
  const std::size_t dout = plan.lo.size();
  Tensor<T> out({c, dout, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t k = 0; k < dout; ++k) {
      const T* a = &volume[(ch * plan.source_bins + plan.lo[k]) * plane];
      const T* b = &volume[(ch * plan.source_bins + plan.hi[k]) * plane];
      T* o = &out[(ch * dout + k) * plane];
      const T t = static_cast<T>(plan.frac[k]);
      for (std::size_t i = 0; i < plane; ++i) o[i] = (T{1} - t) * a[i] + t * b[i];
    }
  }
  return out;
}

template <typename T>
void resample_depth_axis_backward(Tensor<T>& volume, const DepthResample& plan, ConstSpan<T> g_out) {
  const std::size_t c = volume.dim(0), plane = volume.dim(2) * volume.dim(3), dout = plan.lo.size();
  auto g = volume.grad();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t k = 0; k < dout; ++k) {
      T* a = &g[(ch * plan.source_bins + plan.lo[k]) * plane];
      T* b = &g[(ch * plan.source_bins + plan.hi[k]) * plane];
      const T* o = &g_out[(ch * dout + k) * plane];
      const T t = static_cast<T>(plan.frac[k]);
      for (std::size_t i = 0; i < plane; ++i) {
        a[i] += (T{1} - t) * o[i];
        b[i] += t * o[i];
      }
    }
  }
}

/// Depth-volume baseline: resample an already-built cost volume (points,
/// if any, were embedded before the transform) onto depth-linear bins.
template <typename T>
Tensor<T> build_depth_volume_baseline(const Tensor<T>& cost_volume, const CameraRig& rig,
                                      const VoxelGridSpec& cost_spec, const VoxelGridSpec& depth_spec) {
  return resample_depth_axis(cost_volume, plan_depth_resample(rig, cost_spec, depth_spec));
}

// ------------------------------------------------------ quantization report

struct DepthBand {
  double lo = 0, hi = 0;
};

inline std::vector<DepthBand> default_bands() { return {{0, 20}, {20, 40}, {40, 80}}; }

struct NamedSpec {
  std::string name;
  VoxelGridSpec spec;
};

struct QuantizationRow {
  std::string spec;
  DepthBand band;
  std::size_t count = 0;
  double mean_abs_err = 0;
  double max_abs_err = 0;
};

struct QuantizationReport {
  std::vector<QuantizationRow> rows;
  /// Per spec: |z - decoded z| for each point, NaN when not embedded or
  /// when it landed in the unbounded zero-disparity bin.
  std::vector<std::vector<double>> point_errors;
  std::vector<std::size_t> rejected;   // outside the grid, per spec
  std::vector<std::size_t> unbounded;  // zero-disparity bin, per spec
};

/// Accumulates band statistics; merge() combines partial results.
class QuantizationAccumulator {
 public:
  QuantizationAccumulator(std::vector<NamedSpec> specs, std::vector<DepthBand> bands)
      : specs_(std::move(specs)), bands_(std::move(bands)) {
    if (specs_.empty()) throw UsageError("quantization: need at least one spec");
    stats_.assign(specs_.size() * bands_.size(), {});
    rejected_.assign(specs_.size(), 0);
    unbounded_.assign(specs_.size(), 0);
    errors_.resize(specs_.size());
  }

  void add(const PointCloud& points, const CameraRig& rig, bool keep_point_errors = false) {
    for (std::size_t s = 0; s < specs_.size(); ++s) {
      const auto& spec = specs_[s].spec;
      for (const auto& p : points) {
        const Vec3 v = p.as_vec();
        double err = std::numeric_limits<double>::quiet_NaN();
        if (const auto idx = voxel_index_of(spec, rig, v)) {
          const double zhat = spec.bin_depth(rig, idx->id);
          if (std::isfinite(zhat)) {
            err = std::abs(v.z - zhat);
          } else {
            ++unbounded_[s];
          }
        } else {
          ++rejected_[s];
        }
        if (keep_point_errors) errors_[s].push_back(err);
        if (std::isnan(err)) continue;
        for (std::size_t b = 0; b < bands_.size(); ++b) {
          if (v.z >= bands_[b].lo && v.z < bands_[b].hi) {
            auto& st = stats_[s * bands_.size() + b];
            ++st.count;
            st.sum += err;
            st.max = std::max(st.max, err);
          }
        }
      }
    }
  }

  QuantizationReport report() const {
    QuantizationReport r;
    for (std::size_t s = 0; s < specs_.size(); ++s) {
      for (std::size_t b = 0; b < bands_.size(); ++b) {
        const auto& st = stats_[s * bands_.size() + b];
        r.rows.push_back({specs_[s].name, bands_[b], st.count, st.count ? st.sum / static_cast<double>(st.count) : 0.0,
                          st.max});
      }
    }
    r.point_errors = errors_;
    r.rejected = rejected_;
    r.unbounded = unbounded_;
    return r;
  }

 private:
  struct Stat {
    std::size_t count = 0;
    double sum = 0;
    double max = 0;
  };
  std::vector<NamedSpec> specs_;
  std::vector<DepthBand> bands_;
  std::vector<Stat> stats_;
  std::vector<std::size_t> rejected_, unbounded_;
  std::vector<std::vector<double>> errors_;
};

/// Embeds every point under each spec, decodes its voxel back to the
/// bin-center depth, and tabulates |z - z_hat| per range band.
inline QuantizationReport quantization_report(const PointCloud& points, const CameraRig& rig,
                                              const std::vector<NamedSpec>& specs,
                                              const std::vector<DepthBand>& bands = default_bands()) {
  QuantizationAccumulator acc(specs, bands);
  acc.add(points, rig, true);
  return acc.report();
}

inline void write_quantization_csv(std::ostream& os, const QuantizationReport& report) {
  os << "spec,band_lo_m,band_hi_m,count,mean_abs_err_m,max_abs_err_m\n";
  char buf[256];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof buf, "%s,%g,%g,%zu,%.6f,%.6f\n", r.spec.c_str(), r.band.lo, r.band.hi, r.count,
                  r.mean_abs_err, r.max_abs_err);
    os << buf;
  }
}

}  // namespace vpnet
