#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "pscdet/error.hpp"
#include "pscdet/rng.hpp"
#include "pscdet/tensor.hpp"

namespace pscdet {

// Convolution geometry for the 2-row attribute grid: full-height 2x3 kernels,
// stride 1. One zero column is padded on each side and one zero row at the
// bottom so the spatial shape is preserved. The tap at kernel position (0,1)
// maps input(y,x) onto output(y,x).
inline constexpr std::size_t kKernelRows = 2;
inline constexpr std::size_t kKernelCols = 3;
inline constexpr std::size_t kPadTop = 0;
inline constexpr std::size_t kPadLeft = 1;

// input (C_in,H,W), kernels (C_out,C_in,2,3), bias (C_out) -> (C_out,H,W).
inline Tensor conv2d_forward(const Tensor& input, const Tensor& kernels,
                             const Tensor& bias) {
  if (input.shape.size() != 3) {
    throw NumericsError("conv2d: expected rank-3 input, got " +
                        shape_str(input.shape));
  }
  const std::size_t c_in = input.shape[0];
  const std::size_t h = input.shape[1];
  const std::size_t w = input.shape[2];
  if (kernels.shape.size() != 4 || kernels.shape[1] != c_in ||
      kernels.shape[2] != kKernelRows || kernels.shape[3] != kKernelCols) {
    throw NumericsError("conv2d: expected kernels (C_outx" +
                        std::to_string(c_in) + "x2x3), got " +
                        shape_str(kernels.shape));
  }
  const std::size_t c_out = kernels.shape[0];
  require_shape(bias, {c_out}, "conv2d bias");

  Tensor out({c_out, h, w});
  const double* in = input.data.data();
  const double* k = kernels.data.data();
  for (std::size_t o = 0; o < c_out; ++o) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double acc = bias[o];
        for (std::size_t i = 0; i < c_in; ++i) {
          for (std::size_t r = 0; r < kKernelRows; ++r) {
            const std::size_t yy = y + r - kPadTop;
            if (yy >= h) continue;
            for (std::size_t c = 0; c < kKernelCols; ++c) {
              const std::size_t xx = x + c - kPadLeft;  // wraps when x+c < 1
              if (xx >= w) continue;
              acc += k[((o * c_in + i) * kKernelRows + r) * kKernelCols + c] *
                     in[(i * h + yy) * w + xx];
            }
          }
        }
        out[(o * h + y) * w + x] = acc;
      }
    }
  }
  require_finite(out, "conv2d output");
  return out;
}

struct Conv2dGrads {
  Tensor dinput;
  Tensor dkernels;
  Tensor dbias;
};

inline Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernels,
                                   const Tensor& dout) {
  const std::size_t c_in = input.shape[0];
  const std::size_t h = input.shape[1];
  const std::size_t w = input.shape[2];
  const std::size_t c_out = kernels.shape[0];
  require_shape(dout, {c_out, h, w}, "conv2d dout");

  Conv2dGrads g{Tensor(input.shape), Tensor(kernels.shape),
                Tensor({c_out})};
  const double* in = input.data.data();
  const double* k = kernels.data.data();
  for (std::size_t o = 0; o < c_out; ++o) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double d = dout[(o * h + y) * w + x];
        g.dbias[o] += d;
        for (std::size_t i = 0; i < c_in; ++i) {
          for (std::size_t r = 0; r < kKernelRows; ++r) {
            const std::size_t yy = y + r - kPadTop;
            if (yy >= h) continue;
            for (std::size_t c = 0; c < kKernelCols; ++c) {
              const std::size_t xx = x + c - kPadLeft;
              if (xx >= w) continue;
              const std::size_t ki =
                  ((o * c_in + i) * kKernelRows + r) * kKernelCols + c;
              g.dkernels[ki] += d * in[(i * h + yy) * w + xx];
              g.dinput[(i * h + yy) * w + xx] += d * k[ki];
            }
          }
        }
      }
    }
  }
  return g;
}

// y = Wx + b with W (out,in).
inline Tensor affine_forward(const Tensor& x, const Tensor& w,
                             const Tensor& b) {
  if (w.shape.size() != 2) {
    throw NumericsError("affine: expected rank-2 weight, got " +
                        shape_str(w.shape));
  }
  const std::size_t out_dim = w.shape[0];
  const std::size_t in_dim = w.shape[1];
  require_shape(x, {in_dim}, "affine input");
  require_shape(b, {out_dim}, "affine bias");
  Tensor y({out_dim});
  for (std::size_t o = 0; o < out_dim; ++o) {
    double acc = b[o];
    const double* row = w.data.data() + o * in_dim;
    for (std::size_t i = 0; i < in_dim; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
  require_finite(y, "affine output");
  return y;
}

struct AffineGrads {
  Tensor dx;
  Tensor dw;
  Tensor db;
};

inline AffineGrads affine_backward(const Tensor& x, const Tensor& w,
                                   const Tensor& dy) {
  const std::size_t out_dim = w.shape[0];
  const std::size_t in_dim = w.shape[1];
  require_shape(dy, {out_dim}, "affine dy");
  AffineGrads g{Tensor({in_dim}), Tensor(w.shape), Tensor({out_dim})};
  for (std::size_t o = 0; o < out_dim; ++o) {
    const double d = dy[o];
    g.db[o] = d;
    const double* row = w.data.data() + o * in_dim;
    double* dwrow = g.dw.data.data() + o * in_dim;
    for (std::size_t i = 0; i < in_dim; ++i) {
      dwrow[i] = d * x[i];
      g.dx[i] += d * row[i];
    }
  }
  return g;
}

inline Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

// dx from the pre-activation x; slope 0 at exactly 0.
inline Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  if (!x.same_shape(dy)) throw NumericsError("relu: dy shape mismatch");
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.numel(); ++i) {
    if (x[i] <= 0.0) dx[i] = 0.0;
  }
  return dx;
}

struct DropoutResult {
  Tensor y;
  std::vector<std::uint8_t> mask;  // 1 = kept
  double rate = 0.0;
};

// Inverted dropout: kept units scaled by 1/(1-rate). rate=0 is the identity.
inline DropoutResult dropout_forward(const Tensor& x, double rate,
                                     std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw NumericsError("dropout: rate must be in [0,1)");
  }
  DropoutResult r;
  r.rate = rate;
  r.mask.assign(x.numel(), 1);
  if (rate == 0.0) {
    r.y = x;
    return r;
  }
  Rng rng(seed);
  r.y = Tensor(x.shape);
  const double scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (rng.uniform() < rate) {
      r.mask[i] = 0;
      r.y[i] = 0.0;
    } else {
      r.y[i] = x[i] * scale;
    }
  }
  return r;
}

inline Tensor dropout_backward(const Tensor& dy,
                               const std::vector<std::uint8_t>& mask,
                               double rate) {
  if (dy.numel() != mask.size()) {
    throw NumericsError("dropout: mask size mismatch");
  }
  Tensor dx = dy;
  if (rate == 0.0) return dx;
  const double scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < dx.numel(); ++i) {
    dx[i] = mask[i] ? dx[i] * scale : 0.0;
  }
  return dx;
}

inline double cosine_sim(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw NumericsError("cosine_sim: size mismatch");
  double uu = 0, vv = 0, uv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uu += u[i] * u[i];
    vv += v[i] * v[i];
    uv += u[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw NumericsError("zero-norm vector");
  double c = uv / (std::sqrt(uu) * std::sqrt(vv));
  if (c > 1.0) c = 1.0;
  if (c < -1.0) c = -1.0;
  return c;
}

inline double cosine_sim(const Tensor& u, const Tensor& v) {
  return cosine_sim(std::span<const double>(u.data),
                    std::span<const double>(v.data));
}

}  // namespace pscdet
