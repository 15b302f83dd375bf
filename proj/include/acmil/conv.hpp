#pragma once

#include "acmil/autodiff.hpp"

namespace acmil {

/// Batched 2-D image tensor layout used by the conv ops: a (C, B*H*W)
/// matrix whose column b*H*W + y*W + x holds the C channel values of
/// pixel (y, x) of image b.
struct ConvGeom {
  int batch = 0, in_h = 0, in_w = 0, in_c = 0;
  int out_c = 0, kernel = 3, stride = 2, pad = 1;
  int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
};

template <class S>
Mat<S> im2col(const Mat<S>& x, const ConvGeom& g) {
  const int oh = g.out_h(), ow = g.out_w(), k = g.kernel, c = g.in_c;
  Mat<S> col = Mat<S>::Zero(k * k * c, static_cast<Eigen::Index>(g.batch) * oh * ow);
  for (int b = 0; b < g.batch; ++b) {
    const Eigen::Index img_base = static_cast<Eigen::Index>(b) * g.in_h * g.in_w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const Eigen::Index out_col =
            (static_cast<Eigen::Index>(b) * oh + oy) * ow + ox;
        for (int ky = 0; ky < k; ++ky) {
          const int y = oy * g.stride - g.pad + ky;
          if (y < 0 || y >= g.in_h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int xx = ox * g.stride - g.pad + kx;
            if (xx < 0 || xx >= g.in_w) continue;
            col.block((ky * k + kx) * c, out_col, c, 1) =
                x.col(img_base + static_cast<Eigen::Index>(y) * g.in_w + xx);
          }
        }
      }
    }
  }
  return col;
}

template <class S>
Mat<S> col2im(const Mat<S>& col, const ConvGeom& g) {
  const int oh = g.out_h(), ow = g.out_w(), k = g.kernel, c = g.in_c;
  Mat<S> x = Mat<S>::Zero(c, static_cast<Eigen::Index>(g.batch) * g.in_h * g.in_w);
  for (int b = 0; b < g.batch; ++b) {
    const Eigen::Index img_base = static_cast<Eigen::Index>(b) * g.in_h * g.in_w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const Eigen::Index out_col =
            (static_cast<Eigen::Index>(b) * oh + oy) * ow + ox;
        for (int ky = 0; ky < k; ++ky) {
          const int y = oy * g.stride - g.pad + ky;
          if (y < 0 || y >= g.in_h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int xx = ox * g.stride - g.pad + kx;
            if (xx < 0 || xx >= g.in_w) continue;
            x.col(img_base + static_cast<Eigen::Index>(y) * g.in_w + xx) +=
                col.block((ky * k + kx) * c, out_col, c, 1);
          }
        }
      }
    }
  }
  return x;
}

/// Convolution as a tape node. The weight node is (out_c, k*k*in_c) with
/// rows indexed (tap, channel), the bias node is (out_c, 1). The im2col
/// buffer is recomputed in the backward pass instead of stored.
template <class S>
Var conv2d(Tape<S>& t, Var x, Var w, Var b, const ConvGeom& g) {
  const auto& vx = t.value(x);
  check(vx.rows() == g.in_c &&
            vx.cols() == static_cast<Eigen::Index>(g.batch) * g.in_h * g.in_w,
        "conv2d: input shape mismatch");
  check(t.value(w).rows() == g.out_c &&
            t.value(w).cols() == g.kernel * g.kernel * g.in_c,
        "conv2d: weight shape mismatch");
  Mat<S> col = im2col(vx, g);
  Mat<S> y = t.value(w) * col;
  y.colwise() += t.value(b).col(0);
  return t.make(std::move(y), {x, w, b},
                [x, w, b, g](Tape<S>& tt, const Mat<S>& grad) {
                  Mat<S> col2 = im2col(tt.value(x), g);
                  tt.accumulate(w, grad * col2.transpose());
                  tt.accumulate(b, grad.rowwise().sum());
                  tt.accumulate(
                      x, col2im<S>(tt.value(w).transpose() * grad, g));
                });
}

/// Global average pool: (C, B*H*W) -> (C, B).
template <class S>
Var global_avg_pool(Tape<S>& t, Var x, int batch, int h, int w) {
  const auto& vx = t.value(x);
  const Eigen::Index px = static_cast<Eigen::Index>(h) * w;
  check(vx.cols() == px * batch, "global_avg_pool: shape mismatch");
  Mat<S> y(vx.rows(), batch);
  for (int b = 0; b < batch; ++b) y.col(b) = vx.middleCols(b * px, px).rowwise().mean();
  const S inv = S(1) / S(px);
  return t.make(std::move(y), {x},
                [x, batch, px, inv](Tape<S>& tt, const Mat<S>& grad) {
                  Mat<S> gx(tt.value(x).rows(), tt.value(x).cols());
                  for (int b = 0; b < batch; ++b)
                    gx.middleCols(b * px, px) =
                        (grad.col(b) * inv).replicate(1, px);
                  tt.accumulate(x, gx);
                });
}

}  // namespace acmil
