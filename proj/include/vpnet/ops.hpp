#pragma once

// Differentiable operators. Each forward is a pure function of its inputs;
// each *_backward adds the contribution of an upstream gradient into the
// grad() buffers of the tensors it is handed.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "vpnet/parallel.hpp"
#include "vpnet/tensor.hpp"

namespace vpnet {

// ---------------------------------------------------------------- matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("matmul", a.shape(), 2);
  require_rank("matmul", b.shape(), 2);
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner extents differ " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  require_finite("matmul", a);
  require_finite("matmul", b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> c({m, n});
  parallel_for(m, [&](std::size_t i) {
    T* crow = &c[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = &b[p * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  });
  return c;
}

template <typename T>
void matmul_backward(Tensor<T>& a, Tensor<T>& b, ConstSpan<T> gc, bool need_a = true,
                     bool need_b = true) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (gc.size() != m * n) throw ShapeError("matmul backward: upstream size mismatch");
  if (need_a) {
    auto ga = a.grad();
    parallel_for(m, [&](std::size_t i) {
      for (std::size_t p = 0; p < k; ++p) {
        T acc{0};
        for (std::size_t j = 0; j < n; ++j) acc += gc[i * n + j] * b[p * n + j];
        ga[i * k + p] += acc;
      }
    });
  }
  if (need_b) {
    auto gb = b.grad();
    parallel_for(k, [&](std::size_t p) {
      for (std::size_t i = 0; i < m; ++i) {
        const T av = a[i * k + p];
        for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * gc[i * n + j];
      }
    });
  }
}

/// Per-column affine map: y[out, N] = weight[out, in] * x[in, N] + bias[out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank("linear", bias.shape(), 1);
  if (bias.dim(0) != weight.dim(0)) {
    throw ShapeError("linear: bias " + to_string(bias.shape()) + " vs weight " +
                     to_string(weight.shape()));
  }
  Tensor<T> y = matmul(weight, x);
  const std::size_t n = y.dim(1);
  for (std::size_t o = 0; o < y.dim(0); ++o) {
    for (std::size_t j = 0; j < n; ++j) y[o * n + j] += bias[o];
  }
  return y;
}

template <typename T>
void linear_backward(Tensor<T>& x, Tensor<T>& weight, Tensor<T>& bias, ConstSpan<T> gy,
                     bool need_input = true) {
  matmul_backward(weight, x, gy, true, need_input);
  const std::size_t n = x.dim(1);
  auto gb = bias.grad();
  for (std::size_t o = 0; o < weight.dim(0); ++o) {
    T acc{0};
    for (std::size_t j = 0; j < n; ++j) acc += gy[o * n + j];
    gb[o] += acc;
  }
}

// ----------------------------------------------------------- convolution

/// Zero padding on every spatial side, same stride along every axis.
struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 1;
};

namespace detail {

struct ConvDims {
  std::size_t cin = 0, cout = 0;
  std::size_t in[3]{}, k[3]{}, out[3]{}, stride[3]{}, pad[3]{};
};

inline std::size_t conv_out_extent(const char* op, std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad) {
  if (stride == 0) throw ShapeError(std::string(op) + ": stride must be positive");
  if (in + 2 * pad < k) {
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

// Output indices [lo, hi) along one axis whose tap kk lands inside the input.
inline void tap_range(const ConvDims& d, int axis, std::size_t kk, std::size_t& lo, std::size_t& hi) {
  const std::size_t s = d.stride[axis], p = d.pad[axis], in = d.in[axis];
  lo = kk < p ? (p - kk + s - 1) / s : 0;
  if (in - 1 + p < kk) {
    hi = 0;
    return;
  }
  hi = std::min(d.out[axis], (in - 1 + p - kk) / s + 1);
}

// Calls body(oz, iz, oy, iy, x0, x1, kx) for every in-range row of a tap.
template <typename Body>
void for_each_tap_row(const ConvDims& d, std::size_t kz, std::size_t ky, std::size_t kx, Body&& body) {
  std::size_t z0, z1, y0, y1, x0, x1;
  tap_range(d, 0, kz, z0, z1);
  tap_range(d, 1, ky, y0, y1);
  tap_range(d, 2, kx, x0, x1);
  for (std::size_t oz = z0; oz < z1; ++oz) {
    const std::size_t iz = oz * d.stride[0] + kz - d.pad[0];
    for (std::size_t oy = y0; oy < y1; ++oy) {
      const std::size_t iy = oy * d.stride[1] + ky - d.pad[1];
      body(oz, iz, oy, iy, x0, x1);
    }
  }
}

template <typename T>
Tensor<T> conv_forward(const ConvDims& d, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                       Shape out_shape) {
  Tensor<T> y(std::move(out_shape));
  const std::size_t in_plane = d.in[0] * d.in[1] * d.in[2];
  const std::size_t out_plane = d.out[0] * d.out[1] * d.out[2];
  const std::size_t ksize = d.k[0] * d.k[1] * d.k[2];
  const std::size_t sx = d.stride[2], px = d.pad[2];
  parallel_for(d.cout, [&](std::size_t co) {
    T* yo = &y[co * out_plane];
    std::fill(yo, yo + out_plane, b[co]);
    for (std::size_t ci = 0; ci < d.cin; ++ci) {
      const T* xi = &x[ci * in_plane];
      const T* wk = &w[(co * d.cin + ci) * ksize];
      for (std::size_t kz = 0; kz < d.k[0]; ++kz)
        for (std::size_t ky = 0; ky < d.k[1]; ++ky)
          for (std::size_t kx = 0; kx < d.k[2]; ++kx) {
            const T wv = wk[(kz * d.k[1] + ky) * d.k[2] + kx];
            for_each_tap_row(d, kz, ky, kx,
                             [&](std::size_t oz, std::size_t iz, std::size_t oy, std::size_t iy,
                                 std::size_t x0, std::size_t x1) {
                               const T* xrow = xi + (iz * d.in[1] + iy) * d.in[2];
                               T* yrow = yo + (oz * d.out[1] + oy) * d.out[2];
                               for (std::size_t ox = x0; ox < x1; ++ox) yrow[ox] += wv * xrow[ox * sx + kx - px];
                             });
          }
    }
  });
  return y;
}

template <typename T>
void conv_backward(const ConvDims& d, Tensor<T>& x, Tensor<T>& w, Tensor<T>& b, ConstSpan<T> gy,
                   bool need_input) {
  const std::size_t in_plane = d.in[0] * d.in[1] * d.in[2];
  const std::size_t out_plane = d.out[0] * d.out[1] * d.out[2];
  const std::size_t ksize = d.k[0] * d.k[1] * d.k[2];
  const std::size_t sx = d.stride[2], px = d.pad[2];
  if (gy.size() != d.cout * out_plane) throw ShapeError("conv backward: upstream size mismatch");
  auto gw = w.grad();
  auto gb = b.grad();

  // Each output channel owns its weight and bias slice.
  parallel_for(d.cout, [&](std::size_t co) {
    const T* go = gy.data() + co * out_plane;
    T acc{0};
    for (std::size_t o = 0; o < out_plane; ++o) acc += go[o];
    gb[co] += acc;
    for (std::size_t ci = 0; ci < d.cin; ++ci) {
      const T* xi = &x[ci * in_plane];
      T* gwk = &gw[(co * d.cin + ci) * ksize];
      for (std::size_t kz = 0; kz < d.k[0]; ++kz)
        for (std::size_t ky = 0; ky < d.k[1]; ++ky)
          for (std::size_t kx = 0; kx < d.k[2]; ++kx) {
            T s{0};
            for_each_tap_row(d, kz, ky, kx,
                             [&](std::size_t oz, std::size_t iz, std::size_t oy, std::size_t iy,
                                 std::size_t x0, std::size_t x1) {
                               const T* xrow = xi + (iz * d.in[1] + iy) * d.in[2];
                               const T* grow = go + (oz * d.out[1] + oy) * d.out[2];
                               for (std::size_t ox = x0; ox < x1; ++ox) s += grow[ox] * xrow[ox * sx + kx - px];
                             });
            gwk[(kz * d.k[1] + ky) * d.k[2] + kx] += s;
          }
    }
  });

  if (!need_input) return;
  auto gx = x.grad();
  // Each input channel owns its gradient slice; co and tap order are fixed.
  parallel_for(d.cin, [&](std::size_t ci) {
    T* gxi = gx.data() + ci * in_plane;
    for (std::size_t co = 0; co < d.cout; ++co) {
      const T* go = gy.data() + co * out_plane;
      const T* wk = &w[(co * d.cin + ci) * ksize];
      for (std::size_t kz = 0; kz < d.k[0]; ++kz)
        for (std::size_t ky = 0; ky < d.k[1]; ++ky)
          for (std::size_t kx = 0; kx < d.k[2]; ++kx) {
            const T wv = wk[(kz * d.k[1] + ky) * d.k[2] + kx];
            for_each_tap_row(d, kz, ky, kx,
                             [&](std::size_t oz, std::size_t iz, std::size_t oy, std::size_t iy,
                                 std::size_t x0, std::size_t x1) {
                               T* gxrow = gxi + (iz * d.in[1] + iy) * d.in[2];
                               const T* grow = go + (oz * d.out[1] + oy) * d.out[2];
                               for (std::size_t ox = x0; ox < x1; ++ox) gxrow[ox * sx + kx - px] += wv * grow[ox];
                             });
          }
    }
  });
}

template <typename T>
ConvDims conv_dims(const char* op, std::size_t spatial, const Tensor<T>& x, const Tensor<T>& w,
                   const Tensor<T>& b, ConvGeometry g) {
  require_rank(op, x.shape(), spatial + 1);
  require_rank(op, w.shape(), spatial + 2);
  require_rank(op, b.shape(), 1);
  if (w.dim(1) != x.dim(0)) {
    throw ShapeError(std::string(op) + ": weight " + to_string(w.shape()) + " does not match input " +
                     to_string(x.shape()));
  }
  if (b.dim(0) != w.dim(0)) {
    throw ShapeError(std::string(op) + ": bias " + to_string(b.shape()) + " does not match weight " +
                     to_string(w.shape()));
  }
  ConvDims d;
  d.cin = x.dim(0);
  d.cout = w.dim(0);
  const std::size_t lead = 3 - spatial;  // unit axes in front (depth for 2D)
  for (std::size_t a = 0; a < 3; ++a) {
    if (a < lead) {
      d.in[a] = d.k[a] = d.out[a] = d.stride[a] = 1;
      d.pad[a] = 0;
      continue;
    }
    d.in[a] = x.dim(1 + a - lead);
    d.k[a] = w.dim(2 + a - lead);
    d.stride[a] = g.stride;
    d.pad[a] = g.pad;
    d.out[a] = conv_out_extent(op, d.in[a], d.k[a], g.stride, g.pad);
  }
  return d;
}

}  // namespace detail

/// x [Cin, D, H, W], weight [Cout, Cin, kd, kh, kw], bias [Cout] -> [Cout, D', H', W'].
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, ConvGeometry g = {}) {
  const auto d = detail::conv_dims("conv3d", 3, x, weight, bias, g);
  require_finite("conv3d", x);
  require_finite("conv3d", weight);
  return detail::conv_forward(d, x, weight, bias, {d.cout, d.out[0], d.out[1], d.out[2]});
}

template <typename T>
void conv3d_backward(Tensor<T>& x, Tensor<T>& weight, Tensor<T>& bias, ConstSpan<T> gy,
                     ConvGeometry g = {}, bool need_input = true) {
  detail::conv_backward(detail::conv_dims("conv3d", 3, x, weight, bias, g), x, weight, bias, gy, need_input);
}

/// x [Cin, H, W], weight [Cout, Cin, kh, kw], bias [Cout] -> [Cout, H', W'].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, ConvGeometry g = {}) {
  const auto d = detail::conv_dims("conv2d", 2, x, weight, bias, g);
  require_finite("conv2d", x);
  require_finite("conv2d", weight);
  return detail::conv_forward(d, x, weight, bias, {d.cout, d.out[1], d.out[2]});
}

template <typename T>
void conv2d_backward(Tensor<T>& x, Tensor<T>& weight, Tensor<T>& bias, ConstSpan<T> gy,
                     ConvGeometry g = {}, bool need_input = true) {
  detail::conv_backward(detail::conv_dims("conv2d", 2, x, weight, bias, g), x, weight, bias, gy, need_input);
}

// ------------------------------------------------------------ elementwise

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  require_finite("relu", x);
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return y;
}

template <typename T>
void relu_backward(Tensor<T>& x, ConstSpan<T> gy) {
  if (gy.size() != x.size()) throw ShapeError("relu backward: upstream size mismatch");
  auto gx = x.grad();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > T{0}) gx[i] += gy[i];
  }
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a.shape(), b.shape());
  require_finite("add", a);
  require_finite("add", b);
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
  return y;
}

template <typename T>
void add_backward(Tensor<T>& a, Tensor<T>& b, ConstSpan<T> gy) {
  auto ga = a.grad();
  auto gb = b.grad();
  for (std::size_t i = 0; i < gy.size(); ++i) {
    ga[i] += gy[i];
    gb[i] += gy[i];
  }
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a.shape(), b.shape());
  require_finite("mul", a);
  require_finite("mul", b);
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
  return y;
}

template <typename T>
void mul_backward(Tensor<T>& a, Tensor<T>& b, ConstSpan<T> gy) {
  auto ga = a.grad();
  auto gb = b.grad();
  for (std::size_t i = 0; i < gy.size(); ++i) {
    ga[i] += gy[i] * b[i];
    gb[i] += gy[i] * a[i];
  }
}

/// Mean of all elements as a [1] tensor.
template <typename T>
Tensor<T> mean_reduce(const Tensor<T>& x) {
  require_finite("mean-reduce", x);
  T acc{0};
  for (T v : x.data()) acc += v;
  return Tensor<T>::scalar(acc / static_cast<T>(x.size()));
}

template <typename T>
void mean_reduce_backward(Tensor<T>& x, T gy) {
  auto gx = x.grad();
  const T share = gy / static_cast<T>(x.size());
  for (auto& g : gx) g += share;
}

/// 0.5 r^2 for |r| < 1, |r| - 0.5 otherwise.
template <typename T>
T smooth_l1_value(T r) {
  const T a = std::abs(r);
  return a < T{1} ? T{0.5} * r * r : a - T{0.5};
}

template <typename T>
T smooth_l1_slope(T r) {
  if (r >= T{1}) return T{1};
  if (r <= T{-1}) return T{-1};
  return r;
}

template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& x) {
  require_finite("smooth-l1", x);
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = smooth_l1_value(x[i]);
  return y;
}

template <typename T>
void smooth_l1_backward(Tensor<T>& x, ConstSpan<T> gy) {
  auto gx = x.grad();
  for (std::size_t i = 0; i < x.size(); ++i) gx[i] += gy[i] * smooth_l1_slope(x[i]);
}

// ---------------------------------------------------------------- softmax

namespace detail {

inline void axis_strides(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& n,
                         std::size_t& inner) {
  if (axis >= s.size()) throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + to_string(s));
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  n = s[axis];
}

}  // namespace detail

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  require_finite("softmax", x);
  std::size_t outer, n, inner;
  detail::axis_strides(x.shape(), axis, outer, n, inner);
  Tensor<T> y(x.shape());
  parallel_for(outer, [&](std::size_t o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = x[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
      T sum{0};
      for (std::size_t k = 0; k < n; ++k) {
        const T e = std::exp(x[base + k * inner] - mx);
        y[base + k * inner] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < n; ++k) y[base + k * inner] /= sum;
    }
  });
  return y;
}

/// gx = y * (gy - sum(gy * y)) along the axis.
template <typename T>
void softmax_backward(Tensor<T>& x, const Tensor<T>& y, ConstSpan<T> gy, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::axis_strides(x.shape(), axis, outer, n, inner);
  auto gx = x.grad();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T dot{0};
      for (std::size_t k = 0; k < n; ++k) dot += gy[base + k * inner] * y[base + k * inner];
      for (std::size_t k = 0; k < n; ++k) {
        gx[base + k * inner] += y[base + k * inner] * (gy[base + k * inner] - dot);
      }
    }
  }
}

/// Softmax over axis 0 followed by the expectation of per-bin values.
/// logits [D, ...] -> value [...] (rank-1 logits give a [1] value).
template <typename T>
struct SoftArgmax {
  Tensor<T> probs;
  Tensor<T> value;
};

template <typename T>
SoftArgmax<T> soft_argmax(const Tensor<T>& logits, ConstSpan<T> centers) {
  if (centers.size() != logits.dim(0)) {
    throw ShapeError("soft-argmax: " + std::to_string(centers.size()) + " bin centers for logits " +
                     to_string(logits.shape()));
  }
  SoftArgmax<T> r{softmax(logits, 0), {}};
  Shape rest(logits.shape().begin() + 1, logits.shape().end());
  if (rest.empty()) rest = {1};
  r.value = Tensor<T>(rest);
  const std::size_t n = centers.size(), inner = r.value.size();
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < inner; ++i) r.value[i] += centers[k] * r.probs[k * inner + i];
  }
  return r;
}

/// d value / d logit_k = p_k (c_k - value).
template <typename T>
void soft_argmax_backward(Tensor<T>& logits, const SoftArgmax<T>& fwd, ConstSpan<T> centers,
                          ConstSpan<T> gy) {
  auto gx = logits.grad();
  const std::size_t n = centers.size(), inner = fwd.value.size();
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < inner; ++i) {
      gx[k * inner + i] += gy[i] * fwd.probs[k * inner + i] * (centers[k] - fwd.value[i]);
    }
  }
}

// --------------------------------------------------------- bilinear sample

struct Sample2d {
  double x = 0;  // column, continuous
  double y = 0;  // row, continuous
};

enum class Border {
  zeros,  // samples outside [0, W-1] x [0, H-1] read as zero
  clamp,  // coordinates are clamped to the map
};

namespace detail {

struct BilinearTaps {
  std::size_t i00, i01, i10, i11;
  double w00, w01, w10, w11;
  bool valid;
};

inline BilinearTaps bilinear_taps(double x, double y, std::size_t w, std::size_t h, Border border) {
  BilinearTaps t{};
  const double xmax = static_cast<double>(w - 1), ymax = static_cast<double>(h - 1);
  if (!std::isfinite(x) || !std::isfinite(y)) {
    t.valid = false;
    if (border == Border::zeros) return t;
    x = std::isfinite(x) ? x : (x > 0 ? xmax : 0.0);
    y = std::isfinite(y) ? y : (y > 0 ? ymax : 0.0);
  }
  if (border == Border::zeros) {
    if (x < 0.0 || x > xmax || y < 0.0 || y > ymax) {
      t.valid = false;
      return t;
    }
  } else {
    x = std::clamp(x, 0.0, xmax);
    y = std::clamp(y, 0.0, ymax);
  }
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  t.i00 = y0 * w + x0;
  t.i01 = y0 * w + x1;
  t.i10 = y1 * w + x0;
  t.i11 = y1 * w + x1;
  t.w00 = (1 - fx) * (1 - fy);
  t.w01 = fx * (1 - fy);
  t.w10 = (1 - fx) * fy;
  t.w11 = fx * fy;
  t.valid = true;
  return t;
}

}  // namespace detail

/// map [C, H, W] sampled at N continuous (x, y) locations -> [C, N].
template <typename T>
Tensor<T> bilinear_sample_2d(const Tensor<T>& map, std::span<const Sample2d> at, Border border) {
  require_rank("bilinear-sample-2d", map.shape(), 3);
  require_finite("bilinear-sample-2d", map);
  if (at.empty()) throw ShapeError("bilinear-sample-2d: no sample locations");
  const std::size_t c = map.dim(0), h = map.dim(1), w = map.dim(2), n = at.size();
  Tensor<T> out({c, n});
  parallel_for(n, [&](std::size_t j) {
    const auto t = detail::bilinear_taps(at[j].x, at[j].y, w, h, border);
    if (!t.valid && border == Border::zeros) return;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* m = &map[ch * h * w];
      out[ch * n + j] = static_cast<T>(t.w00 * m[t.i00] + t.w01 * m[t.i01] + t.w10 * m[t.i10] +
                                       t.w11 * m[t.i11]);
    }
  });
  return out;
}

template <typename T>
void bilinear_sample_2d_backward(Tensor<T>& map, std::span<const Sample2d> at, Border border,
                                 ConstSpan<T> gy) {
  const std::size_t c = map.dim(0), h = map.dim(1), w = map.dim(2), n = at.size();
  if (gy.size() != c * n) throw ShapeError("bilinear-sample-2d backward: upstream size mismatch");
  auto gm = map.grad();
  // Scatter per channel; each channel owns its gradient plane.
  parallel_for(c, [&](std::size_t ch) {
    T* g = gm.data() + ch * h * w;
    for (std::size_t j = 0; j < n; ++j) {
      const auto t = detail::bilinear_taps(at[j].x, at[j].y, w, h, border);
      if (!t.valid && border == Border::zeros) continue;
      const T up = gy[ch * n + j];
      g[t.i00] += static_cast<T>(t.w00) * up;
      g[t.i01] += static_cast<T>(t.w01) * up;
      g[t.i10] += static_cast<T>(t.w10) * up;
      g[t.i11] += static_cast<T>(t.w11) * up;
    }
  });
}

// ------------------------------------------------------------- channel cat

/// Concatenates along axis 0; trailing extents must agree.
template <typename T>
Tensor<T> concat0(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw ShapeError("concat: trailing extents differ " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Shape s = a.shape();
  s[0] += b.dim(0);
  std::vector<T> v;
  v.reserve(a.size() + b.size());
  v.insert(v.end(), a.data().begin(), a.data().end());
  v.insert(v.end(), b.data().begin(), b.data().end());
  return Tensor<T>(std::move(s), std::move(v));
}

template <typename T>
void concat0_backward(Tensor<T>& a, Tensor<T>& b, ConstSpan<T> gy, bool need_a = true,
                      bool need_b = true) {
  if (need_a) {
    auto ga = a.grad();
    for (std::size_t i = 0; i < a.size(); ++i) ga[i] += gy[i];
  }
  if (need_b) {
    auto gb = b.grad();
    for (std::size_t i = 0; i < b.size(); ++i) gb[i] += gy[a.size() + i];
  }
}

/// Adds a span of gradients into a tensor's buffer.
template <typename T>
void accumulate_grad(Tensor<T>& x, ConstSpan<T> g) {
  if (g.size() != x.size()) throw ShapeError("accumulate: size mismatch");
  auto gx = x.grad();
  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
}

}  // namespace vpnet
