#pragma once

// Pinhole stereo rig, voxel-grid bin geometry, and the calibration and
// point-cloud file formats.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vpnet/binary_io.hpp"
#include "vpnet/error.hpp"

namespace vpnet {

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

struct Pixel {
  double u = 0, v = 0;
};

/// Rectified stereo pair: left camera is the reference, the right camera sits
/// `baseline` meters along +x.
struct CameraRig {
  double fx = 0, fy = 0;
  double cx = 0, cy = 0;
  double baseline = 0;
  std::size_t width = 0, height = 0;

  void validate() const {
    if (!(fx > 0)) throw UsageError("camera rig: fx must be positive");
    if (!(fy > 0)) throw UsageError("camera rig: fy must be positive");
    if (!(baseline > 0)) throw UsageError("camera rig: baseline must be positive");
    if (width == 0 || height == 0) throw UsageError("camera rig: image extents must be positive");
    if (!(cx >= 0 && cx < static_cast<double>(width))) throw UsageError("camera rig: cx outside the image");
    if (!(cy >= 0 && cy < static_cast<double>(height))) throw UsageError("camera rig: cy outside the image");
  }

  /// fx * baseline / z in pixels; +inf at z = 0.
  double disparity(double z) const { return fx * baseline / z; }
  double depth_from_disparity(double d) const { return fx * baseline / d; }

  bool operator==(const CameraRig&) const = default;
};

inline Pixel project(const CameraRig& rig, const Vec3& p) {
  if (!(p.z > 0)) throw UsageError("project: point must have z > 0");
  return {rig.fx * p.x / p.z + rig.cx, rig.fy * p.y / p.z + rig.cy};
}

/// Projection into the rectified right view: same row, shifted by disparity.
inline Pixel project_right(const CameraRig& rig, const Vec3& p) {
  Pixel px = project(rig, p);
  px.u -= rig.disparity(p.z);
  return px;
}

inline Vec3 backproject(const CameraRig& rig, double u, double v, double z) {
  if (!(z > 0)) throw UsageError("backproject: depth must be positive");
  return {(u - rig.cx) * z / rig.fx, (v - rig.cy) * z / rig.fy, z};
}

enum class BinMode { depth_linear, disparity_linear };

inline const char* to_string(BinMode m) {
  return m == BinMode::depth_linear ? "depth-linear" : "disparity-linear";
}

/// W x H x D voxel grid over the left-camera frustum at 1/downsample of the
/// image resolution. Voxel (iu, iv) is centered on feature-map coordinate
/// (iu, iv), i.e. image pixel (iu*downsample, iv*downsample).
struct VoxelGridSpec {
  std::size_t W = 0, H = 0, D = 0;
  double z_max = 100.0;
  BinMode mode = BinMode::depth_linear;
  double d_max = 0.0;  // disparity-linear only, full-resolution pixels
  std::size_t downsample = 4;

  static VoxelGridSpec depth_linear(const CameraRig& rig, std::size_t bins, double z_max,
                                    std::size_t downsample = 4) {
    VoxelGridSpec s;
    s.W = rig.width / downsample;
    s.H = rig.height / downsample;
    s.D = bins;
    s.z_max = z_max;
    s.mode = BinMode::depth_linear;
    s.downsample = downsample;
    s.validate(rig);
    return s;
  }

  /// Bins at uniform disparities over [0, d_max]; d_max defaults to D - 1
  /// (one bin per integer disparity).
  static VoxelGridSpec disparity_linear(const CameraRig& rig, std::size_t bins, double z_max,
                                        double d_max = -1.0, std::size_t downsample = 4) {
    VoxelGridSpec s = depth_linear(rig, bins, z_max, downsample);
    s.mode = BinMode::disparity_linear;
    s.d_max = d_max > 0 ? d_max : static_cast<double>(bins - 1);
    s.validate(rig);
    return s;
  }

  void validate(const CameraRig& rig) const {
    if (W == 0 || H == 0) throw UsageError("voxel grid: extents must be positive");
    if (D < 2) throw UsageError("voxel grid: need at least 2 depth bins");
    if (downsample == 0) throw UsageError("voxel grid: downsample must be positive");
    if (W * downsample > rig.width || H * downsample > rig.height) {
      throw UsageError("voxel grid: grid exceeds the image");
    }
    if (!(z_max > 0)) throw UsageError("voxel grid: z_max must be positive");
    if (mode == BinMode::disparity_linear && !(d_max > 0)) {
      throw UsageError("voxel grid: d_max must be positive");
    }
  }

  std::size_t voxel_count() const { return W * H * D; }

  /// Bin spacing in the bin's own unit (meters or pixels of disparity).
  double spacing() const {
    return (mode == BinMode::depth_linear ? z_max : d_max) / static_cast<double>(D - 1);
  }

  /// Metric depth of bin d's center; +inf for the zero-disparity bin.
  double bin_depth(const CameraRig& rig, std::size_t d) const {
    if (mode == BinMode::depth_linear) return static_cast<double>(d) * spacing();
    const double disp = static_cast<double>(d) * spacing();
    return disp > 0 ? rig.depth_from_disparity(disp) : std::numeric_limits<double>::infinity();
  }

  /// Full-resolution disparity of bin d's center; +inf for the z = 0 bin.
  double bin_disparity(const CameraRig& rig, std::size_t d) const {
    if (mode == BinMode::disparity_linear) return static_cast<double>(d) * spacing();
    const double z = static_cast<double>(d) * spacing();
    return z > 0 ? rig.disparity(z) : std::numeric_limits<double>::infinity();
  }

  bool operator==(const VoxelGridSpec&) const = default;
};

struct VoxelIndex {
  std::size_t iu = 0, iv = 0, id = 0;
  bool operator==(const VoxelIndex&) const = default;
};

inline std::size_t flat_index(const VoxelGridSpec& s, const VoxelIndex& v) {
  return (v.id * s.H + v.iv) * s.W + v.iu;
}

/// Nearest voxel of a point, or nothing when it falls outside the grid or
/// the covered depth range. Points with z <= 0 cannot be projected and are
/// never inside the grid.
inline std::optional<VoxelIndex> voxel_index_of(const VoxelGridSpec& spec, const CameraRig& rig, const Vec3& p) {
  if (!(p.z > 0) || !std::isfinite(p.z)) return std::nullopt;
  const Pixel px = project(rig, p);
  const double ds = static_cast<double>(spec.downsample);
  const double fu = std::round(px.u / ds), fv = std::round(px.v / ds);
  double fd;
  if (spec.mode == BinMode::depth_linear) {
    fd = std::round(p.z / spec.spacing());
  } else {
    fd = std::round(rig.disparity(p.z) / spec.spacing());
  }
  if (!(fu >= 0 && fu < static_cast<double>(spec.W))) return std::nullopt;
  if (!(fv >= 0 && fv < static_cast<double>(spec.H))) return std::nullopt;
  if (!(fd >= 0 && fd < static_cast<double>(spec.D))) return std::nullopt;
  return VoxelIndex{static_cast<std::size_t>(fu), static_cast<std::size_t>(fv), static_cast<std::size_t>(fd)};
}

/// Voxel center back in metric space: the bin-center depth on the ray
/// through the voxel's image-plane center. Nothing for the unbounded
/// zero-disparity bin.
inline std::optional<Vec3> decode_voxel(const VoxelGridSpec& spec, const CameraRig& rig, const VoxelIndex& v) {
  const double z = spec.bin_depth(rig, v.id);
  if (!std::isfinite(z) || !(z > 0)) return std::nullopt;
  const double ds = static_cast<double>(spec.downsample);
  return backproject(rig, static_cast<double>(v.iu) * ds, static_cast<double>(v.iv) * ds, z);
}

// ------------------------------------------------------------- point cloud

struct Point3 {
  float x = 0, y = 0, z = 0;
  Vec3 as_vec() const { return {x, y, z}; }
  bool operator==(const Point3&) const = default;
};

/// Points in the reference-camera frame (x right, y down, z forward), meters.
class PointCloud {
 public:
  PointCloud() = default;

  /// Appends p if it lies in front of the camera; returns whether it did.
  bool add(Point3 p) {
    if (!(p.z > 0) || !std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) return false;
    points_.push_back(p);
    return true;
  }

  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }
  const Point3& operator[](std::size_t i) const { return points_[i]; }
  const std::vector<Point3>& points() const { return points_; }
  auto begin() const { return points_.begin(); }
  auto end() const { return points_.end(); }

  bool operator==(const PointCloud&) const = default;

 private:
  std::vector<Point3> points_;
};

struct PointCloudLoad {
  PointCloud cloud;
  std::size_t rejected = 0;  // non-finite or z <= 0
};

inline void write_pcb(std::ostream& os, const PointCloud& cloud) {
  os.write("PCB1", 4);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cloud.size()));
  for (const auto& p : cloud) {
    io::write_f32(os, p.x);
    io::write_f32(os, p.y);
    io::write_f32(os, p.z);
  }
}

inline PointCloudLoad read_pcb(std::istream& is) {
  io::expect_magic(is, "PCB1", "point cloud");
  const auto n = io::read_le<std::uint32_t>(is, "point cloud count");
  PointCloudLoad out;
  for (std::uint32_t i = 0; i < n; ++i) {
    Point3 p;
    p.x = io::read_f32(is, "point cloud");
    p.y = io::read_f32(is, "point cloud");
    p.z = io::read_f32(is, "point cloud");
    if (!out.cloud.add(p)) ++out.rejected;
  }
  return out;
}

inline PointCloudLoad read_xyz(std::istream& is) {
  PointCloudLoad out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    Point3 p;
    if (!(ls >> p.x >> p.y >> p.z)) throw FormatError("xyz: malformed line " + std::to_string(lineno));
    if (!out.cloud.add(p)) ++out.rejected;
  }
  return out;
}

/// PCB1 binary, or whitespace-separated text when the path ends in ".xyz".
inline PointCloudLoad load_point_cloud(const std::string& path) {
  const bool text = path.size() >= 4 && path.compare(path.size() - 4, 4, ".xyz") == 0;
  std::ifstream is(path, text ? std::ios::in : std::ios::binary);
  if (!is) throw FormatError("missing file: " + path);
  return text ? read_xyz(is) : read_pcb(is);
}

inline void save_point_cloud(const std::string& path, const PointCloud& cloud) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path);
  write_pcb(os, cloud);
}

// ------------------------------------------------------------- calibration

inline void write_calib(std::ostream& os, const CameraRig& rig) {
  char buf[64];
  auto put = [&](const char* key, double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << key << '=' << buf << '\n';
  };
  put("fx", rig.fx);
  put("fy", rig.fy);
  put("cx", rig.cx);
  put("cy", rig.cy);
  put("baseline", rig.baseline);
  os << "width=" << rig.width << '\n' << "height=" << rig.height << '\n';
}

inline CameraRig read_calib(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("calib: expected key=value, got '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto number = [&](const char* key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("missing key: ") + key);
    try {
      std::size_t used = 0;
      const double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(key);
      return v;
    } catch (const std::logic_error&) {
      throw FormatError(std::string("calib: invalid value for ") + key + ": " + it->second);
    }
  };
  CameraRig rig;
  rig.fx = number("fx");
  rig.fy = number("fy");
  rig.cx = number("cx");
  rig.cy = number("cy");
  rig.baseline = number("baseline");
  const double w = number("width"), h = number("height");
  for (auto [key, v] : {std::pair{"fx", rig.fx}, std::pair{"fy", rig.fy}, std::pair{"baseline", rig.baseline}}) {
    if (!(v > 0)) throw FormatError(std::string("calib: ") + key + " must be positive");
  }
  if (!(w >= 1) || !(h >= 1) || w != std::floor(w) || h != std::floor(h)) {
    throw FormatError("calib: width and height must be positive integers");
  }
  rig.width = static_cast<std::size_t>(w);
  rig.height = static_cast<std::size_t>(h);
  try {
    rig.validate();
  } catch (const UsageError& e) {
    throw FormatError(std::string("calib: ") + e.what());
  }
  return rig;
}

inline void save_calib(const std::string& path, const CameraRig& rig) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path);
  write_calib(os, rig);
}

inline CameraRig load_calib(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("missing file: " + path);
  return read_calib(is);
}

}  // namespace vpnet
