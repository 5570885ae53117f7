#pragma once

// Model assembly: image feature extractor, sequential 3D aggregation stages,
// soft-argmax depth regression, depth losses and evaluation metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vpnet/geometry.hpp"
#include "vpnet/ops.hpp"
#include "vpnet/optim.hpp"
#include "vpnet/pointnet.hpp"
#include "vpnet/rng.hpp"
#include "vpnet/volume.hpp"

namespace vpnet {

enum class VolumeMode { fusion, cost, depth };
enum class FusionLevel { early, intermediate };

inline const char* to_string(VolumeMode m) {
  switch (m) {
    case VolumeMode::fusion: return "fusion";
    case VolumeMode::cost: return "cost";
    case VolumeMode::depth: return "depth";
  }
  return "?";
}

inline const char* to_string(FusionLevel f) { return f == FusionLevel::early ? "early" : "intermediate"; }

inline VolumeMode parse_volume_mode(const std::string& s) {
  if (s == "fusion") return VolumeMode::fusion;
  if (s == "cost") return VolumeMode::cost;
  if (s == "depth") return VolumeMode::depth;
  throw UsageError("unknown volume mode '" + s + "' (expected fusion|cost|depth)");
}

inline PointMode parse_point_mode(const std::string& s) {
  if (s == "raw") return PointMode::raw;
  if (s == "mlp") return PointMode::mlp;
  if (s == "fusionconv") return PointMode::fusionconv;
  throw UsageError("unknown point network '" + s + "' (expected raw|mlp|fusionconv)");
}

inline FusionLevel parse_fusion_level(const std::string& s) {
  if (s == "early") return FusionLevel::early;
  if (s == "intermediate") return FusionLevel::intermediate;
  throw UsageError("unknown fusion level '" + s + "' (expected early|intermediate)");
}

/// Per-stage loss weights: the tail of (0.5, 0.7, 1.0) for up to three
/// stages, linear from 0.5 to 1.0 beyond that.
inline std::vector<double> default_stage_weights(std::size_t stages) {
  static const double base[] = {0.5, 0.7, 1.0};
  std::vector<double> w;
  if (stages <= 3) {
    w.assign(base + (3 - stages), base + 3);
  } else {
    for (std::size_t s = 0; s < stages; ++s) w.push_back(0.5 + 0.5 * static_cast<double>(s) / static_cast<double>(stages - 1));
  }
  return w;
}

struct ModelConfig {
  std::size_t channels = 8;  // C
  std::size_t bins = 48;     // D
  double z_max = 100.0;
  std::size_t stages = 3;  // S
  std::vector<double> weights = default_stage_weights(3);
  std::size_t hidden = 8;  // aggregation width
  VolumeMode volume = VolumeMode::fusion;
  PointMode pointnet = PointMode::fusionconv;
  FusionLevel fusion = FusionLevel::intermediate;
  Window window;

  void validate() const {
    if (channels == 0 || hidden == 0) throw UsageError("config: channel counts must be positive");
    if (bins < 2) throw UsageError("config: need at least 2 depth bins");
    if (!(z_max > 0)) throw UsageError("config: z_max must be positive");
    if (stages == 0) throw UsageError("config: need at least one stage");
    if (weights.size() != stages) {
      throw UsageError("config: " + std::to_string(weights.size()) + " loss weights for " + std::to_string(stages) +
                       " stages");
    }
    if (fusion == FusionLevel::early && pointnet != PointMode::raw) {
      throw UsageError("config: early fusion requires --pointnet raw");
    }
  }

  /// Channels of the aggregated volume.
  std::size_t volume_channels() const {
    if (fusion == FusionLevel::early) return 2 * channels;
    return pointnet == PointMode::raw ? 2 * channels + 1 : 3 * channels;
  }

  std::size_t image_channels() const { return fusion == FusionLevel::early ? 4 : 3; }

  bool operator==(const ModelConfig& o) const {
    return channels == o.channels && bins == o.bins && z_max == o.z_max && stages == o.stages &&
           weights == o.weights && hidden == o.hidden && volume == o.volume && pointnet == o.pointnet &&
           fusion == o.fusion && window.wu == o.window.wu && window.wv == o.window.wv && window.wd == o.window.wd;
  }
};

// ------------------------------------------------------------ depth maps

/// Full-resolution depth in meters; invalid pixels hold 0.
struct DepthMap {
  std::size_t width = 0, height = 0;
  std::vector<float> depth;
  std::vector<std::uint8_t> valid;

  DepthMap() = default;
  DepthMap(std::size_t w, std::size_t h) : width(w), height(h), depth(w * h, 0.0f), valid(w * h, 0) {}

  std::size_t size() const { return depth.size(); }
  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
  }
  float at(std::size_t u, std::size_t v) const { return depth[v * width + u]; }

  /// Valid wherever 0 < z <= z_max.
  static DepthMap from_values(std::size_t w, std::size_t h, std::vector<float> z, double z_max) {
    if (z.size() != w * h) throw ShapeError("depth map: value count does not match extents");
    DepthMap m(w, h);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const bool ok = std::isfinite(z[i]) && z[i] > 0 && z[i] <= z_max;
      m.valid[i] = ok ? 1 : 0;
      m.depth[i] = ok ? z[i] : 0.0f;
    }
    return m;
  }

  template <typename T>
  static DepthMap from_tensor(const Tensor<T>& t, double z_max) {
    require_rank("depth map", t.shape(), 2);
    std::vector<float> z(t.data().begin(), t.data().end());
    return from_values(t.dim(1), t.dim(0), std::move(z), z_max);
  }
};

/// Smooth-L1 over the valid pixels of truth, averaged over their count.
/// grad (optional) receives d loss / d pred for every pixel.
template <typename T>
T depth_loss(const Tensor<T>& pred, const DepthMap& truth, std::vector<T>* grad = nullptr) {
  require_rank("depth loss", pred.shape(), 2);
  if (pred.dim(0) != truth.height || pred.dim(1) != truth.width) {
    throw ShapeError("depth loss: prediction " + to_string(pred.shape()) + " vs truth [" +
                     std::to_string(truth.height) + "x" + std::to_string(truth.width) + "]");
  }
  const std::size_t m = truth.valid_count();
  if (m == 0) throw Error("depth loss: no valid pixels");
  const T inv = T{1} / static_cast<T>(m);
  if (grad) grad->assign(pred.size(), T{0});
  T acc{0};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!truth.valid[i]) continue;
    const T r = pred[i] - static_cast<T>(truth.depth[i]);
    acc += smooth_l1_value(r);
    if (grad) (*grad)[i] = smooth_l1_slope(r) * inv;
  }
  return acc * inv;
}

inline double total_loss(const std::vector<double>& stage_losses, const std::vector<double>& weights) {
  if (stage_losses.size() != weights.size()) throw ShapeError("total loss: stage and weight counts differ");
  double acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += weights[i] * stage_losses[i];
  return acc;
}

struct Metrics {
  double rmse_mm = 0, mae_mm = 0;  // millimeters
  double irmse = 0, imae = 0;      // 1/km
  std::size_t count = 0;           // valid pixels
  std::size_t inverse_excluded = 0;
};

/// RMSE/MAE in mm and iRMSE/iMAE in 1/km over truth's valid pixels. Pixels
/// with a non-positive prediction are left out of the inverse metrics.
template <typename Pred>
Metrics evaluate_metrics(const Pred& pred, const DepthMap& truth) {
  if (pred.size() != truth.size()) throw ShapeError("metrics: prediction and truth sizes differ");
  Metrics m;
  double se = 0, ae = 0, ise = 0, iae = 0;
  std::size_t inv_count = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!truth.valid[i]) continue;
    const double z = truth.depth[i], p = static_cast<double>(pred[i]);
    const double e = (p - z) * 1000.0;
    se += e * e;
    ae += std::abs(e);
    ++m.count;
    if (p > 0) {
      const double ie = 1000.0 / p - 1000.0 / z;
      ise += ie * ie;
      iae += std::abs(ie);
      ++inv_count;
    } else {
      ++m.inverse_excluded;
    }
  }
  if (m.count == 0) throw Error("metrics: no valid pixels");
  m.rmse_mm = std::sqrt(se / static_cast<double>(m.count));
  m.mae_mm = ae / static_cast<double>(m.count);
  if (inv_count) {
    m.irmse = std::sqrt(ise / static_cast<double>(inv_count));
    m.imae = iae / static_cast<double>(inv_count);
  }
  return m;
}

// ---------------------------------------------------------------- layers

template <typename T>
Tensor<T> he_conv_weight(Shape shape, Rng& rng) {
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  return he_uniform<T>(std::move(shape), fan_in, rng);
}

/// Two stride-2 conv+relu blocks and a stride-1 conv: [in, 4H, 4W] -> [C, H, W].
template <typename T>
class FeatureExtractor {
 public:
  struct Trace {
    Tensor<T> input, pre0, act0, pre1, act1, out;
  };

  FeatureExtractor(ParameterSet<T>& params, std::size_t in_channels, std::size_t channels, Rng& rng) {
    const std::size_t cin[3] = {in_channels, channels, channels};
    for (int l = 0; l < 3; ++l) {
      const std::string prefix = "features.conv" + std::to_string(l);
      w_[l] = &params.add(prefix + ".weight", he_conv_weight<T>({channels, cin[l], 3, 3}, rng)).value;
      b_[l] = &params.add(prefix + ".bias", Tensor<T>({channels})).value;
    }
  }

  Tensor<T>& forward(const Tensor<T>& image, Trace& tr) const {
    require_rank("feature extractor", image.shape(), 3);
    if (image.dim(0) != w_[0]->dim(1)) {
      throw ShapeError("feature extractor: expected " + std::to_string(w_[0]->dim(1)) + " input channels, got " +
                       to_string(image.shape()));
    }
    if (image.dim(1) % 4 != 0 || image.dim(2) % 4 != 0) {
      throw UsageError("feature extractor: image extents " + to_string(image.shape()) + " not divisible by 4");
    }
    tr.input = image;
    tr.pre0 = conv2d(tr.input, *w_[0], *b_[0], {2, 1});
    tr.act0 = relu(tr.pre0);
    tr.pre1 = conv2d(tr.act0, *w_[1], *b_[1], {2, 1});
    tr.act1 = relu(tr.pre1);
    tr.out = conv2d(tr.act1, *w_[2], *b_[2], {1, 1});
    return tr.out;
  }

  /// Uses tr.out.grad() as the upstream gradient.
  void backward(Trace& tr, bool need_input = false) {
    conv2d_backward(tr.act1, *w_[2], *b_[2], tr.out.grad(), {1, 1});
    relu_backward(tr.pre1, tr.act1.grad());
    conv2d_backward(tr.act0, *w_[1], *b_[1], tr.pre1.grad(), {2, 1});
    relu_backward(tr.pre0, tr.act0.grad());
    conv2d_backward(tr.input, *w_[0], *b_[0], tr.pre0.grad(), {2, 1}, need_input);
  }

 private:
  Tensor<T>* w_[3]{};
  Tensor<T>* b_[3]{};
};

/// S sequential stages of two 3x3x3 conv+relu blocks; each stage emits a
/// single-channel head [D, H, W] and passes its hidden state on.
template <typename T>
class Aggregator {
 public:
  struct StageTrace {
    Tensor<T> pre_a, act_a, pre_b, act_b, logits;
  };
  struct Trace {
    Tensor<T> input;
    std::vector<StageTrace> stages;
  };

  Aggregator(ParameterSet<T>& params, std::size_t in_channels, std::size_t hidden, std::size_t stages, Rng& rng) {
    for (std::size_t s = 0; s < stages; ++s) {
      const std::string prefix = "aggregate.stage" + std::to_string(s);
      Layer l;
      const std::size_t cin = s == 0 ? in_channels : hidden;
      l.wa = &params.add(prefix + ".conv0.weight", he_conv_weight<T>({hidden, cin, 3, 3, 3}, rng)).value;
      l.ba = &params.add(prefix + ".conv0.bias", Tensor<T>({hidden})).value;
      l.wb = &params.add(prefix + ".conv1.weight", he_conv_weight<T>({hidden, hidden, 3, 3, 3}, rng)).value;
      l.bb = &params.add(prefix + ".conv1.bias", Tensor<T>({hidden})).value;
      // Zero head: every stage starts from uniform logits.
      l.wh = &params.add(prefix + ".head.weight", Tensor<T>({1, hidden, 3, 3, 3})).value;
      l.bh = &params.add(prefix + ".head.bias", Tensor<T>({1})).value;
      layers_.push_back(l);
    }
  }

  std::size_t stages() const { return layers_.size(); }

  /// volume [Ch, D, H, W]; per-stage logits land in tr.stages[s].logits.
  void forward(const Tensor<T>& volume, Trace& tr) const {
    require_rank("aggregate", volume.shape(), 4);
    tr.input = volume;
    tr.stages.assign(layers_.size(), {});
    const Tensor<T>* x = &tr.input;
    for (std::size_t s = 0; s < layers_.size(); ++s) {
      const Layer& l = layers_[s];
      StageTrace& st = tr.stages[s];
      st.pre_a = conv3d(*x, *l.wa, *l.ba);
      st.act_a = relu(st.pre_a);
      st.pre_b = conv3d(st.act_a, *l.wb, *l.bb);
      st.act_b = relu(st.pre_b);
      st.logits = conv3d(st.act_b, *l.wh, *l.bh);
      x = &st.act_b;
    }
  }

  /// Upstream gradients are taken from tr.stages[s].logits.grad(); stages
  /// without one contribute nothing. The volume gradient lands in
  /// tr.input.grad() when need_input is set.
  void backward(Trace& tr, bool need_input = true) {
    for (std::size_t s = layers_.size(); s-- > 0;) {
      const Layer& l = layers_[s];
      StageTrace& st = tr.stages[s];
      conv3d_backward(st.act_b, *l.wh, *l.bh, st.logits.grad());
      relu_backward(st.pre_b, st.act_b.grad());
      conv3d_backward(st.act_a, *l.wb, *l.bb, st.pre_b.grad());
      relu_backward(st.pre_a, st.act_a.grad());
      Tensor<T>& x = s == 0 ? tr.input : tr.stages[s - 1].act_b;
      conv3d_backward(x, *l.wa, *l.ba, st.pre_a.grad(), {}, s > 0 || need_input);
    }
  }

 private:
  struct Layer {
    Tensor<T>*wa, *ba, *wb, *bb, *wh, *bh;
  };
  std::vector<Layer> layers_;
};

// ------------------------------------------------------------ regression

/// Depth bin values: k/(D-1) * z_max.
template <typename T>
std::vector<T> depth_bin_centers(std::size_t bins, double z_max) {
  std::vector<T> c(bins);
  for (std::size_t k = 0; k < bins; ++k) {
    c[k] = static_cast<T>(static_cast<double>(k) / static_cast<double>(bins - 1) * z_max);
  }
  return c;
}

/// Soft-argmax depth of a single logit vector.
template <typename T>
T regress_depth_vector(std::span<const T> logits, double z_max) {
  Tensor<T> l({logits.size()}, std::vector<T>(logits.begin(), logits.end()));
  const auto centers = depth_bin_centers<T>(logits.size(), z_max);
  return soft_argmax(l, std::span<const T>(centers)).value[0];
}

/// Full-resolution sample locations for bilinear x`downsample` upsampling.
inline std::vector<Sample2d> upsample_locations(std::size_t width, std::size_t height, std::size_t downsample) {
  std::vector<Sample2d> at;
  at.reserve(width * height);
  const double ds = static_cast<double>(downsample);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) at.push_back({static_cast<double>(x) / ds, static_cast<double>(y) / ds});
  return at;
}

/// Soft-argmax over the depth axis of A [D, H, W] followed by bilinear
/// upsampling to [H*ds, W*ds]. Disparity-binned heads regress disparity and
/// convert it to depth, saturating at z_max.
template <typename T>
class DepthRegressor {
 public:
  struct Trace {
    Tensor<T> logits;  // [D, H, W]
    SoftArgmax<T> sa;
    Tensor<T> grid;  // [1, H, W] depth at grid resolution
    Tensor<T> full;  // [H*ds, W*ds]
  };

  DepthRegressor(const CameraRig& rig, const VoxelGridSpec& spec) : spec_(spec), fb_(rig.fx * rig.baseline) {
    centers_.resize(spec.D);
    for (std::size_t k = 0; k < spec.D; ++k) {
      centers_[k] = static_cast<T>(spec.mode == BinMode::depth_linear
                                       ? static_cast<double>(k) / static_cast<double>(spec.D - 1) * spec.z_max
                                       : static_cast<double>(k) * spec.spacing());
    }
    full_w_ = spec.W * spec.downsample;
    full_h_ = spec.H * spec.downsample;
    at_ = upsample_locations(full_w_, full_h_, spec.downsample);
  }

  const Tensor<T>& forward(const Tensor<T>& head, Trace& tr) const {
    tr.logits = head.reshaped({spec_.D, spec_.H, spec_.W});
    tr.sa = soft_argmax(tr.logits, std::span<const T>(centers_));
    tr.grid = Tensor<T>({1, spec_.H, spec_.W});
    for (std::size_t i = 0; i < tr.grid.size(); ++i) tr.grid[i] = to_depth(tr.sa.value[i]);
    tr.full = bilinear_sample_2d(tr.grid, std::span<const Sample2d>(at_), Border::clamp).reshaped({full_h_, full_w_});
    return tr.full;
  }

  /// g_full: d loss / d full-resolution depth. Returns d loss / d head.
  std::vector<T> backward(Trace& tr, ConstSpan<T> g_full) const {
    bilinear_sample_2d_backward(tr.grid, std::span<const Sample2d>(at_), Border::clamp, g_full);
    std::vector<T> g_value(tr.grid.size());
    for (std::size_t i = 0; i < g_value.size(); ++i) g_value[i] = tr.grid.grad()[i] * to_depth_slope(tr.sa.value[i]);
    tr.logits.zero_grad();
    soft_argmax_backward(tr.logits, tr.sa, std::span<const T>(centers_), std::span<const T>(g_value));
    return {tr.logits.grad().begin(), tr.logits.grad().end()};
  }

  std::size_t width() const { return full_w_; }
  std::size_t height() const { return full_h_; }

 private:
  T floor_disparity() const { return static_cast<T>(fb_ / spec_.z_max); }

  T to_depth(T v) const {
    if (spec_.mode == BinMode::depth_linear) return v;
    return static_cast<T>(fb_) / std::max(v, floor_disparity());
  }

  T to_depth_slope(T v) const {
    if (spec_.mode == BinMode::depth_linear) return T{1};
    if (v <= floor_disparity()) return T{0};
    return -static_cast<T>(fb_) / (v * v);
  }

  VoxelGridSpec spec_;
  double fb_;
  std::vector<T> centers_;
  std::size_t full_w_ = 0, full_h_ = 0;
  std::vector<Sample2d> at_;
};

// ------------------------------------------------------------ early fusion

/// Sparse depth image of a cloud in one view: nearest-pixel splat of
/// z / z_max (nearest point wins), zero elsewhere. baseline_shift selects
/// the right view (pixels shifted by the disparity).
template <typename T>
Tensor<T> sparse_depth_channel(const PointCloud& points, const CameraRig& rig, std::size_t width, std::size_t height,
                               double z_max, bool right_view) {
  Tensor<T> ch({1, height, width});
  std::vector<double> best(width * height, std::numeric_limits<double>::infinity());
  for (const auto& p : points) {
    const Pixel px = right_view ? project_right(rig, p.as_vec()) : project(rig, p.as_vec());
    const double u = std::round(px.u), v = std::round(px.v);
    if (!(u >= 0 && v >= 0 && u < static_cast<double>(width) && v < static_cast<double>(height))) continue;
    const std::size_t i = static_cast<std::size_t>(v) * width + static_cast<std::size_t>(u);
    if (p.z < best[i]) {
      best[i] = p.z;
      ch[i] = static_cast<T>(std::min(1.0, static_cast<double>(p.z) / z_max));
    }
  }
  return ch;
}

// ------------------------------------------------------------------ model

template <typename T>
struct Prediction {
  std::vector<Tensor<T>> depth;  // per stage, [H, W] full resolution
  std::size_t volume_channels = 0;
  std::size_t occupied = 0;
  std::size_t points_used = 0;

  const Tensor<T>& final_depth() const { return depth.back(); }
};

/// The full pipeline. Holds its parameters and the activations of the last
/// forward pass; not copyable because layers point into the parameter set.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(derive_seed(seed, 0x6d6f64656cULL));
    extractor_ = std::make_unique<FeatureExtractor<T>>(params_, config_.image_channels(), config_.channels, rng);
    if (config_.fusion == FusionLevel::intermediate && config_.pointnet != PointMode::raw) {
      pointnet_ = std::make_unique<PointFeatureNet<T>>(params_, config_.pointnet, config_.channels, rng);
    }
    aggregator_ =
        std::make_unique<Aggregator<T>>(params_, config_.volume_channels(), config_.hidden, config_.stages, rng);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  /// Grid the points are embedded into.
  VoxelGridSpec embed_spec(const CameraRig& rig) const {
    if (config_.volume == VolumeMode::fusion) return VoxelGridSpec::depth_linear(rig, config_.bins, config_.z_max);
    return VoxelGridSpec::disparity_linear(rig, config_.bins, config_.z_max);
  }

  /// Grid the aggregation and regression run on.
  VoxelGridSpec regress_spec(const CameraRig& rig) const {
    if (config_.volume == VolumeMode::cost) return embed_spec(rig);
    return VoxelGridSpec::depth_linear(rig, config_.bins, config_.z_max);
  }

  /// left/right [3, H, W] images in [0, 1] matching the rig extents.
  Prediction<T> forward(const Tensor<T>& left, const Tensor<T>& right, const PointCloud& points,
                        const CameraRig& rig) {
    rig.validate();
    require_same_shape("model", left.shape(), right.shape());
    require_rank("model", left.shape(), 3);
    if (left.dim(0) != 3 || left.dim(1) != rig.height || left.dim(2) != rig.width) {
      throw ShapeError("model: image " + to_string(left.shape()) + " does not match calibration " +
                       std::to_string(rig.width) + "x" + std::to_string(rig.height));
    }
    if (rig.width % 4 != 0 || rig.height % 4 != 0) throw UsageError("model: image extents must be divisible by 4");
    tr_ = Trace{};
    tr_.rig = rig;
    tr_.espec = embed_spec(rig);
    tr_.rspec = regress_spec(rig);

    // Image features.
    if (config_.fusion == FusionLevel::early) {
      const auto dl = sparse_depth_channel<T>(points, rig, rig.width, rig.height, config_.z_max, false);
      const auto dr = sparse_depth_channel<T>(points, rig, rig.width, rig.height, config_.z_max, true);
      extractor_->forward(concat0(left, dl), tr_.left);
      extractor_->forward(concat0(right, dr), tr_.right);
    } else {
      extractor_->forward(left, tr_.left);
      extractor_->forward(right, tr_.right);
    }
    Tensor<T>& fl = tr_.left.out;
    Tensor<T>& fr = tr_.right.out;

    // Volume.
    tr_.samples = stereo_samples(rig, tr_.espec);
    tr_.stereo = build_stereo_payload(fl, fr, tr_.samples, tr_.espec);
    Prediction<T> pred;
    Tensor<T> volume;
    if (config_.fusion == FusionLevel::early) {
      volume = tr_.stereo;
    } else if (config_.pointnet == PointMode::raw) {
      tr_.plan = plan_embedding(points, rig, tr_.espec);
      volume = concat0(tr_.stereo, embed_occupancy<T>(tr_.plan));
      pred.points_used = points.size() - tr_.plan.skipped;
    } else {
      tr_.filtered = filter_points_for_grid(points, rig, tr_.espec).cloud;
      tr_.plan = plan_embedding(tr_.filtered, rig, tr_.espec);
      if (tr_.filtered.empty()) {
        tr_.embedded = Tensor<T>({config_.channels, tr_.espec.D, tr_.espec.H, tr_.espec.W});
      } else {
        const bool conv = config_.pointnet == PointMode::fusionconv;
        if (conv) tr_.clusters = cluster(tr_.filtered, rig, tr_.espec, config_.window);
        tr_.point_features = pointnet_->forward(fl, tr_.filtered, conv ? &tr_.clusters : nullptr, rig, tr_.espec);
        tr_.embedded = embed_point_features(tr_.plan, tr_.point_features);
      }
      volume = concat0(tr_.stereo, tr_.embedded);
      pred.points_used = tr_.filtered.size();
    }
    pred.volume_channels = volume.dim(0);
    pred.occupied = tr_.plan.cells.size();

    if (config_.volume == VolumeMode::depth) {
      tr_.resample = plan_depth_resample(rig, tr_.espec, tr_.rspec);
      tr_.pre_resample = std::move(volume);
      volume = resample_depth_axis(tr_.pre_resample, tr_.resample);
    }

    aggregator_->forward(volume, tr_.agg);
    regressor_ = std::make_unique<DepthRegressor<T>>(rig, tr_.rspec);
    tr_.reg.resize(config_.stages);
    for (std::size_t s = 0; s < config_.stages; ++s) {
      pred.depth.push_back(regressor_->forward(tr_.agg.stages[s].logits, tr_.reg[s]));
    }
    tr_.ready = true;
    return pred;
  }

  /// g_depth[s]: d loss / d stage-s full-resolution depth (empty to skip a
  /// stage). Parameter gradients accumulate.
  void backward(const std::vector<std::vector<T>>& g_depth) {
    if (!tr_.ready) throw Error("model: backward called before forward");
    if (g_depth.size() != config_.stages) throw ShapeError("model backward: one gradient per stage expected");
    for (std::size_t s = 0; s < config_.stages; ++s) {
      if (g_depth[s].empty()) continue;
      const auto g_head = regressor_->backward(tr_.reg[s], std::span<const T>(g_depth[s]));
      accumulate_grad(tr_.agg.stages[s].logits, std::span<const T>(g_head));
    }
    aggregator_->backward(tr_.agg, true);

    std::span<const T> g_volume = tr_.agg.input.grad();
    if (config_.volume == VolumeMode::depth) {
      resample_depth_axis_backward(tr_.pre_resample, tr_.resample, g_volume);
      g_volume = tr_.pre_resample.grad();
    }
    const std::size_t stereo_size = tr_.stereo.size();
    Tensor<T>& fl = tr_.left.out;
    Tensor<T>& fr = tr_.right.out;
    fl.grad();
    fr.grad();
    if (config_.fusion == FusionLevel::intermediate && config_.pointnet != PointMode::raw &&
        !tr_.filtered.empty()) {
      embed_point_features_backward(tr_.plan, tr_.point_features, g_volume.subspan(stereo_size));
      pointnet_->backward(tr_.point_features.grad(), fl);
    }
    build_stereo_payload_backward(fl, fr, tr_.samples, g_volume.first(stereo_size));
    extractor_->backward(tr_.left);
    extractor_->backward(tr_.right);
    tr_.ready = false;
  }

  /// Per-stage losses against truth, plus their weighted total; with
  /// accumulate set, also runs backward on the weighted total.
  struct LossReport {
    std::vector<double> stages;
    double total = 0;
  };

  LossReport loss(const Prediction<T>& pred, const DepthMap& truth, bool accumulate) {
    LossReport r;
    std::vector<std::vector<T>> grads(config_.stages);
    for (std::size_t s = 0; s < config_.stages; ++s) {
      std::vector<T> g;
      r.stages.push_back(static_cast<double>(depth_loss(pred.depth[s], truth, accumulate ? &g : nullptr)));
      if (accumulate) {
        for (auto& v : g) v *= static_cast<T>(config_.weights[s]);
        grads[s] = std::move(g);
      }
    }
    r.total = total_loss(r.stages, config_.weights);
    if (accumulate) backward(grads);
    return r;
  }

 private:
  struct Trace {
    CameraRig rig;
    VoxelGridSpec espec, rspec;
    typename FeatureExtractor<T>::Trace left, right;
    StereoSamples samples;
    Tensor<T> stereo;
    PointCloud filtered;
    ClusterIndex clusters;
    EmbeddingPlan plan;
    Tensor<T> point_features, embedded;
    DepthResample resample;
    Tensor<T> pre_resample;
    typename Aggregator<T>::Trace agg;
    std::vector<typename DepthRegressor<T>::Trace> reg;
    bool ready = false;
  };

  ModelConfig config_;
  ParameterSet<T> params_;
  std::unique_ptr<FeatureExtractor<T>> extractor_;
  std::unique_ptr<PointFeatureNet<T>> pointnet_;
  std::unique_ptr<Aggregator<T>> aggregator_;
  std::unique_ptr<DepthRegressor<T>> regressor_;
  Trace tr_;
};

}  // namespace vpnet
