#pragma once

// Slow reference implementations used to check the library.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <vector>

#include "vpnet/geometry.hpp"
#include "vpnet/pointnet.hpp"
#include "vpnet/tensor.hpp"

namespace oracle {

struct Idx {
  long u, v, d;
};

// Voxel of a point straight from the projection and bin formulas.
inline bool voxel_of(const vpnet::VoxelGridSpec& s, const vpnet::CameraRig& rig, const vpnet::Point3& p, Idx& out) {
  const double z = p.z;
  if (!(z > 0)) return false;
  const double u = (rig.fx * p.x / z + rig.cx) / static_cast<double>(s.downsample);
  const double v = (rig.fy * p.y / z + rig.cy) / static_cast<double>(s.downsample);
  double d;
  if (s.mode == vpnet::BinMode::depth_linear) {
    d = z * static_cast<double>(s.D - 1) / s.z_max;
  } else {
    d = rig.fx * rig.baseline / z * static_cast<double>(s.D - 1) / s.d_max;
  }
  out = {std::lround(u), std::lround(v), std::lround(d)};
  return out.u >= 0 && out.u < static_cast<long>(s.W) && out.v >= 0 && out.v < static_cast<long>(s.H) &&
         out.d >= 0 && out.d < static_cast<long>(s.D);
}

// O(N^2) window scan.
inline std::vector<std::vector<std::uint32_t>> cluster(const vpnet::PointCloud& pts, const vpnet::CameraRig& rig,
                                                       const vpnet::VoxelGridSpec& s, long wu, long wv, long wd) {
  const std::size_t n = pts.size();
  std::vector<Idx> idx(n);
  for (std::size_t i = 0; i < n; ++i) voxel_of(s, rig, pts[i], idx[i]);
  std::vector<std::vector<std::uint32_t>> out(n);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      if (std::labs(idx[c].u - idx[i].u) <= wu && std::labs(idx[c].v - idx[i].v) <= wv &&
          std::labs(idx[c].d - idx[i].d) <= wd) {
        out[c].push_back(static_cast<std::uint32_t>(i));
      }
    }
  }
  return out;
}

// out[ch][c] = 1/|N(c)| sum_{i in N(c)} (sum_k mix[ch][k] fused[k][i]) * G_ch(p_c - p_i)
inline std::vector<double> fusionconv(const std::vector<double>& fused, std::size_t in_ch,
                                      const std::vector<double>& coeffs, const std::vector<double>& mix,
                                      std::size_t out_ch, const std::vector<std::vector<std::uint32_t>>& nb,
                                      const vpnet::PointCloud& pts) {
  const std::size_t n = pts.size();
  std::vector<double> out(out_ch * n, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t ch = 0; ch < out_ch; ++ch) {
      double acc = 0;
      for (std::uint32_t i : nb[c]) {
        double m = 0;
        for (std::size_t k = 0; k < in_ch; ++k) m += mix[ch * in_ch + k] * fused[k * n + i];
        const double dx = static_cast<double>(pts[c].x) - pts[i].x;
        const double dy = static_cast<double>(pts[c].y) - pts[i].y;
        const double dz = static_cast<double>(pts[c].z) - pts[i].z;
        const double g = coeffs[ch * 4] + coeffs[ch * 4 + 1] * dx + coeffs[ch * 4 + 2] * dy + coeffs[ch * 4 + 3] * dz;
        acc += m * g;
      }
      out[ch * n + c] = acc / static_cast<double>(nb[c].size());
    }
  }
  return out;
}

// Direct 3D convolution, zero padding, [Ci, D, H, W] -> [Co, D', H', W'].
inline std::vector<double> conv3d(const std::vector<double>& x, long ci, long d, long h, long w,
                                  const std::vector<double>& k, long co, long kd, long kh, long kw,
                                  const std::vector<double>& b, long stride, long pad, long& od, long& oh, long& ow) {
  od = (d + 2 * pad - kd) / stride + 1;
  oh = (h + 2 * pad - kh) / stride + 1;
  ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> y(static_cast<std::size_t>(co * od * oh * ow));
  for (long o = 0; o < co; ++o)
    for (long z = 0; z < od; ++z)
      for (long yy = 0; yy < oh; ++yy)
        for (long xx = 0; xx < ow; ++xx) {
          double acc = b[static_cast<std::size_t>(o)];
          for (long c = 0; c < ci; ++c)
            for (long a = 0; a < kd; ++a)
              for (long p = 0; p < kh; ++p)
                for (long q = 0; q < kw; ++q) {
                  const long iz = z * stride - pad + a, iy = yy * stride - pad + p, ix = xx * stride - pad + q;
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= d || iy >= h || ix >= w) continue;
                  acc += k[static_cast<std::size_t>((((o * ci + c) * kd + a) * kh + p) * kw + q)] *
                         x[static_cast<std::size_t>(((c * d + iz) * h + iy) * w + ix)];
                }
          y[static_cast<std::size_t>(((o * od + z) * oh + yy) * ow + xx)] = acc;
        }
  return y;
}

}  // namespace oracle
