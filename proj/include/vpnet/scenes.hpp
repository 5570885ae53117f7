#pragma once

// Synthetic stereo scenes: a ground plane and textured fronto-parallel
// rectangles ray-cast analytically into both views, LiDAR simulation by
// sampling ground-truth depth pixels, and the on-disk dataset layout.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numbers>
#include <regex>
#include <string>
#include <vector>

#include "vpnet/geometry.hpp"
#include "vpnet/imageio.hpp"
#include "vpnet/network.hpp"
#include "vpnet/parallel.hpp"
#include "vpnet/rng.hpp"

namespace vpnet {

/// Camera used by the synthetic datasets: fx = fy = 100, 0.5 m baseline,
/// principal point at the image center.
inline CameraRig default_rig(std::size_t width = 128, std::size_t height = 64) {
  CameraRig rig;
  rig.fx = 100;
  rig.fy = 100;
  rig.cx = static_cast<double>(width) / 2;
  rig.cy = static_cast<double>(height) / 2;
  rig.baseline = 0.5;
  rig.width = width;
  rig.height = height;
  rig.validate();
  return rig;
}

/// Procedural texture in surface coordinates (meters): random sinusoids
/// plus smooth lattice noise, in [0, 1].
struct Texture {
  struct Wave {
    double fx, fy, phase, amp;
  };
  double color[3] = {0.5, 0.5, 0.5};
  std::vector<Wave> waves;
  double noise_amp = 0.2;
  double noise_scale = 1.0;  // lattice cells per meter
  std::uint64_t noise_seed = 0;

  static Texture random(Rng& rng, double wavelength_lo, double wavelength_hi) {
    Texture t;
    for (double& c : t.color) c = rng.uniform(0.25, 1.0);
    const int n = 3;
    double total = 0;
    for (int i = 0; i < n; ++i) {
      const double lambda = rng.uniform(wavelength_lo, wavelength_hi);
      const double theta = rng.uniform(0, std::numbers::pi);
      const double k = 2 * std::numbers::pi / lambda;
      Wave w{k * std::cos(theta), k * std::sin(theta), rng.uniform(0, 2 * std::numbers::pi), rng.uniform(0.3, 1.0)};
      total += w.amp;
      t.waves.push_back(w);
    }
    for (auto& w : t.waves) w.amp *= 0.35 / total;
    t.noise_amp = rng.uniform(0.1, 0.25);
    t.noise_scale = 2.0 / wavelength_lo;
    t.noise_seed = rng.next();
    return t;
  }

  double lattice(std::int64_t i, std::int64_t j) const {
    const std::uint64_t h = mix_seed(noise_seed ^ mix_seed(static_cast<std::uint64_t>(i) * 0x9e3779b97f4a7c15ULL +
                                                           static_cast<std::uint64_t>(j)));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  }

  double noise(double s, double t) const {
    const double x = s * noise_scale, y = t * noise_scale;
    const double fx = std::floor(x), fy = std::floor(y);
    const auto i = static_cast<std::int64_t>(fx), j = static_cast<std::int64_t>(fy);
    double ax = x - fx, ay = y - fy;
    ax = ax * ax * (3 - 2 * ax);
    ay = ay * ay * (3 - 2 * ay);
    const double a = lattice(i, j), b = lattice(i + 1, j), c = lattice(i, j + 1), d = lattice(i + 1, j + 1);
    return (a * (1 - ax) + b * ax) * (1 - ay) + (c * (1 - ax) + d * ax) * ay;
  }

  /// Intensity in [0, 1] at surface coordinates (s, t).
  double intensity(double s, double t) const {
    double v = 0.5;
    for (const auto& w : waves) v += w.amp * std::sin(w.fx * s + w.fy * t + w.phase);
    v += noise_amp * (noise(s, t) - 0.5);
    return std::clamp(v, 0.0, 1.0);
  }
};

/// Axis-aligned rectangle facing the camera at depth z.
struct Rectangle {
  double z = 10;
  double x0 = -1, x1 = 1, y0 = -1, y1 = 1;
  Texture texture;
};

struct Scene {
  CameraRig rig;
  double z_max = 100;
  double ground_y = 1.65;  // camera height above the ground, y down
  Texture ground;
  std::vector<Rectangle> objects;
};

struct Hit {
  double z = std::numeric_limits<double>::infinity();  // inf: sky
  double rgb[3] = {0, 0, 0};
};

/// Casts the ray through continuous pixel (u, v) of a view whose optical
/// center sits at x = offset (0 for the left camera, baseline for the right).
inline Hit cast_ray(const Scene& s, double offset, double u, double v) {
  const double dx = (u - s.rig.cx) / s.rig.fx, dy = (v - s.rig.cy) / s.rig.fy;
  Hit h;
  const Texture* tex = nullptr;
  double ss = 0, tt = 0;
  if (dy > 0) {
    const double z = s.ground_y / dy;
    h.z = z;
    tex = &s.ground;
    ss = offset + z * dx;
    tt = z;
  }
  for (const auto& r : s.objects) {
    if (r.z >= h.z) continue;
    const double x = offset + r.z * dx, y = r.z * dy;
    if (x >= r.x0 && x <= r.x1 && y >= r.y0 && y <= r.y1) {
      h.z = r.z;
      tex = &r.texture;
      ss = x - r.x0;
      tt = y - r.y0;
    }
  }
  if (tex == nullptr) {
    // Sky: depends on the image row only, so it matches across views.
    const double g = std::clamp(0.55 + 0.4 * (1.0 - v / static_cast<double>(s.rig.height)), 0.0, 1.0);
    h.rgb[0] = 0.6 * g;
    h.rgb[1] = 0.75 * g;
    h.rgb[2] = g;
    return h;
  }
  const double i = tex->intensity(ss, tt);
  for (int c = 0; c < 3; ++c) h.rgb[c] = std::clamp(tex->color[c] * (0.35 + 0.65 * i), 0.0, 1.0);
  return h;
}

/// Random scene: ground plane plus object_count rectangles with depth
/// uniform in [5, 0.9 z_max].
inline Scene generate_layout(std::uint64_t seed, const CameraRig& rig, std::size_t object_count, double z_max = 100) {
  rig.validate();
  if (object_count == 0) throw UsageError("scene: object_count must be at least 1");
  if (rig.width % 4 != 0 || rig.height % 4 != 0) throw UsageError("scene: extents must be divisible by 4");
  Rng rng(derive_seed(seed, 0x7363656e65ULL));
  Scene s;
  s.rig = rig;
  s.z_max = z_max;
  s.ground = Texture::random(rng, 0.6, 3.0);
  const double w = static_cast<double>(rig.width), h = static_cast<double>(rig.height);
  for (std::size_t k = 0; k < object_count; ++k) {
    Rectangle r;
    r.z = rng.uniform(5.0, 0.9 * z_max);
    const double uc = rng.uniform(0, w), vc = rng.uniform(0.15 * h, 0.75 * h);
    const double pw = rng.uniform(0.08 * w, 0.3 * w), ph = rng.uniform(0.15 * h, 0.5 * h);
    const double xc = (uc - rig.cx) / rig.fx * r.z, yc = (vc - rig.cy) / rig.fy * r.z;
    const double hw = 0.5 * pw / rig.fx * r.z, hh = 0.5 * ph / rig.fy * r.z;
    r.x0 = xc - hw;
    r.x1 = xc + hw;
    r.y0 = yc - hh;
    r.y1 = yc + hh;
    const double size = std::min(r.x1 - r.x0, r.y1 - r.y0);
    r.texture = Texture::random(rng, size / 8, size / 2);
    s.objects.push_back(r);
  }
  return s;
}

struct SceneSample {
  Tensor<float> left, right;  // [3, H, W] in [0, 1], 8-bit values
  DepthMap depth;             // left view, valid where z <= z_max
  PointCloud points;
  CameraRig rig;
  std::uint64_t seed = 0;
};

/// Renders one view at integer pixel positions; returns the depth of
/// every pixel when depth is non-null.
inline Tensor<float> render_view(const Scene& s, bool right_view, std::vector<double>* depth = nullptr) {
  const std::size_t w = s.rig.width, h = s.rig.height;
  Tensor<float> img({3, h, w});
  if (depth) depth->assign(w * h, 0);
  const double offset = right_view ? s.rig.baseline : 0.0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const Hit hit = cast_ray(s, offset, static_cast<double>(x), static_cast<double>(y));
      for (std::size_t c = 0; c < 3; ++c) img[(c * h + y) * w + x] = static_cast<float>(hit.rgb[c]);
      if (depth) (*depth)[y * w + x] = hit.z;
    }
  }
  return img;
}

/// Scene rendered into both views with dense ground truth; no points yet.
inline SceneSample render_scene(const Scene& s, std::uint64_t seed) {
  SceneSample out;
  out.rig = s.rig;
  out.seed = seed;
  std::vector<double> z;
  out.left = render_view(s, false, &z);
  out.right = render_view(s, true);
  quantize_8bit(out.left);
  quantize_8bit(out.right);
  std::vector<float> zf(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) zf[i] = static_cast<float>(z[i]);
  out.depth = DepthMap::from_values(s.rig.width, s.rig.height, std::move(zf), s.z_max);
  return out;
}

/// Uniformly chooses count distinct valid pixels with z < z_max, back-
/// projects them through the ground truth, then keeps each point with
/// probability 1 - dropout. Points are ordered by pixel index.
inline PointCloud sample_lidar(const SceneSample& sample, std::size_t count, std::uint64_t seed, double dropout,
                               double z_max = 100) {
  if (!(dropout >= 0 && dropout <= 1)) throw UsageError("sample_lidar: dropout must lie in [0, 1]");
  std::vector<std::uint32_t> pool;
  for (std::size_t i = 0; i < sample.depth.size(); ++i) {
    if (sample.depth.valid[i] && sample.depth.depth[i] < z_max) pool.push_back(static_cast<std::uint32_t>(i));
  }
  if (count > pool.size()) {
    throw UsageError("sample_lidar: " + std::to_string(count) + " points requested but only " +
                     std::to_string(pool.size()) + " valid pixels");
  }
  Rng rng(derive_seed(seed, 0x6c69646172ULL));
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t j = k + static_cast<std::size_t>(rng.below(pool.size() - k));
    std::swap(pool[k], pool[j]);
  }
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  PointCloud cloud;
  const std::size_t w = sample.depth.width;
  for (std::uint32_t i : pool) {
    const bool keep = rng.uniform() >= dropout;
    if (!keep) continue;
    const double z = sample.depth.depth[i];
    const Vec3 p = backproject(sample.rig, static_cast<double>(i % w), static_cast<double>(i / w), z);
    cloud.add({static_cast<float>(p.x), static_cast<float>(p.y), static_cast<float>(z)});
  }
  return cloud;
}

struct SceneOptions {
  std::size_t objects = 6;
  std::size_t points = 1000;
  double dropout = 0;
  double z_max = 100;
};

/// Sample i of a dataset seeded with seed; independent of other indices.
inline SceneSample generate_scene(std::uint64_t seed, std::size_t index, const CameraRig& rig,
                                  const SceneOptions& opt = {}) {
  const std::uint64_t s = derive_seed(seed, index);
  SceneSample out = render_scene(generate_layout(s, rig, opt.objects, opt.z_max), s);
  out.points = sample_lidar(out, opt.points, derive_seed(s, 1), opt.dropout, opt.z_max);
  return out;
}

// ---------------------------------------------------------------- dataset

inline std::string frame_path(const std::string& dir, std::size_t index, const char* suffix) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu_%s", index, suffix);
  return (std::filesystem::path(dir) / buf).string();
}

inline void save_sample(const std::string& dir, std::size_t index, const SceneSample& s) {
  save_ppm(frame_path(dir, index, "left.ppm"), s.left);
  save_ppm(frame_path(dir, index, "right.ppm"), s.right);
  save_pfm(frame_path(dir, index, "depth.pfm"), s.depth);
  save_point_cloud(frame_path(dir, index, "points.pcb"), s.points);
}

/// Frame indices present in dir (files named NNNN_left.ppm), ascending.
inline std::vector<std::size_t> list_frames(const std::string& dir) {
  std::vector<std::size_t> ids;
  if (!std::filesystem::is_directory(dir)) throw FormatError("missing directory: " + dir);
  static const std::regex pattern(R"((\d{4,})_left\.ppm)");
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (std::regex_match(name, m, pattern)) ids.push_back(std::stoul(m[1].str()));
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline SceneSample load_sample(const std::string& dir, std::size_t index, const CameraRig& rig) {
  auto need = [&](const char* suffix) {
    const std::string p = frame_path(dir, index, suffix);
    if (!std::filesystem::exists(p)) throw FormatError("missing file: " + p);
    return p;
  };
  SceneSample s;
  s.rig = rig;
  s.seed = index;
  s.left = load_ppm(need("left.ppm"));
  s.right = load_ppm(need("right.ppm"));
  s.depth = load_pfm(need("depth.pfm"));
  s.points = load_point_cloud(need("points.pcb")).cloud;
  const Shape want{3, rig.height, rig.width};
  if (s.left.shape() != want || s.right.shape() != want || s.depth.width != rig.width ||
      s.depth.height != rig.height) {
    throw FormatError("frame " + std::to_string(index) + ": extents do not match calib.txt (" +
                      std::to_string(rig.width) + "x" + std::to_string(rig.height) + ")");
  }
  return s;
}

struct Dataset {
  CameraRig rig;
  std::vector<SceneSample> samples;
};

/// Loads every frame in dir. A directory without frames is an empty
/// dataset; frames without calib.txt are an error.
inline Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  const auto ids = list_frames(dir);
  const std::string calib = (std::filesystem::path(dir) / "calib.txt").string();
  if (std::filesystem::exists(calib)) {
    ds.rig = load_calib(calib);
  } else if (!ids.empty()) {
    throw FormatError("missing file: " + calib);
  }
  for (std::size_t id : ids) ds.samples.push_back(load_sample(dir, id, ds.rig));
  return ds;
}

inline void save_dataset(const std::string& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  save_calib((std::filesystem::path(dir) / "calib.txt").string(), ds.rig);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) save_sample(dir, i, ds.samples[i]);
}

inline Dataset generate_dataset(std::uint64_t seed, std::size_t frames, const CameraRig& rig,
                                const SceneOptions& opt = {}) {
  Dataset ds;
  ds.rig = rig;
  ds.samples.resize(frames);
  parallel_for(frames, [&](std::size_t i) { ds.samples[i] = generate_scene(seed, i, rig, opt); });
  return ds;
}

}  // namespace vpnet
