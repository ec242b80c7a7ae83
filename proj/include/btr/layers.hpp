#pragma once

#include "btr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

// Layer primitives with explicit forward/backward. Convolutional activations
// use a channel-major [C, B, H, W] layout so a convolution over the whole
// batch is one GEMM: weight [Cout, Cin*k*k] x columns [Cin*k*k, B*Ho*Wo].

namespace btr {

template <typename T>
struct Conv2d {
  int in_ch = 0, out_ch = 0, kernel = 0, stride = 1, pad = 0;
  Param<T> weight;  // [out_ch, in_ch * kernel * kernel]
  Param<T> bias;    // [out_ch]

  struct Cache {
    Tensor<T> cols;  // im2col columns (strided convs)
    Tensor<T> xpad;  // zero-padded input rows (stride-1 convs)
    int batch = 0, h = 0, w = 0, ho = 0, wo = 0;
  };

  Conv2d() = default;
  Conv2d(const std::string& name, int in, int out, int k, int s, int p, Rng& rng)
      : in_ch(in), out_ch(out), kernel(k), stride(s), pad(p),
        weight(name + ".weight", {out, in * k * k}), bias(name + ".bias", {out}) {
    const T bound = T(1) / std::sqrt(static_cast<T>(in * k * k));
    uniform_fill(weight.value, bound, rng);
    uniform_fill(bias.value, bound, rng);
  }

  int out_size(int n) const { return (n + 2 * pad - kernel) / stride + 1; }
  int fan_in() const { return in_ch * kernel * kernel; }

  // Output columns [lo, hi) whose input index ox*stride - pad + k lies in [0, n).
  static std::pair<int, int> valid_range(int k, int n, int nout, int stride, int pad) {
    int lo = 0, hi = nout;
    while (lo < hi && lo * stride - pad + k < 0) ++lo;
    while (hi > lo && (hi - 1) * stride - pad + k >= n) --hi;
    return {lo, hi};
  }

  void im2col(const Tensor<T>& x, Cache& c) const {
    const int B = c.batch, H = c.h, W = c.w, Ho = c.ho, Wo = c.wo;
    const std::size_t ncols = static_cast<std::size_t>(B) * Ho * Wo;
    c.cols.shape = {fan_in(), static_cast<int>(ncols)};
    c.cols.data.resize(static_cast<std::size_t>(fan_in()) * ncols);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    for (int ci = 0; ci < in_ch; ++ci)
      for (int ky = 0; ky < kernel; ++ky)
        for (int kx = 0; kx < kernel; ++kx) {
          T* row = c.cols.ptr() + ((static_cast<std::size_t>(ci) * kernel + ky) * kernel + kx) * ncols;
          const auto [x0, x1] = valid_range(kx, W, Wo, stride, pad);
          for (int b = 0; b < B; ++b) {
            const T* src = x.ptr() + (static_cast<std::size_t>(ci) * B + b) * plane;
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy * stride - pad + ky;
              T* dst = row + (static_cast<std::size_t>(b) * Ho + oy) * Wo;
              if (iy < 0 || iy >= H) {
                std::fill(dst, dst + Wo, T{});
                continue;
              }
              const T* srow = src + static_cast<std::size_t>(iy) * W;
              const int off = kx - pad;
              std::fill(dst, dst + x0, T{});
              if (stride == 1) {
                if (x1 > x0) std::copy(srow + (x0 + off), srow + (x1 + off), dst + x0);
              } else {
                for (int ox = x0; ox < x1; ++ox) dst[ox] = srow[ox * stride + off];
              }
              std::fill(dst + x1, dst + Wo, T{});
            }
          }
        }
  }

  void col2im(const Tensor<T>& dcols, Tensor<T>& dx, const Cache& c) const {
    const int B = c.batch, H = c.h, W = c.w, Ho = c.ho, Wo = c.wo;
    const std::size_t ncols = static_cast<std::size_t>(B) * Ho * Wo;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    dx = Tensor<T>({in_ch, B, H, W});
    for (int ci = 0; ci < in_ch; ++ci)
      for (int ky = 0; ky < kernel; ++ky)
        for (int kx = 0; kx < kernel; ++kx) {
          const T* row = dcols.ptr() + ((static_cast<std::size_t>(ci) * kernel + ky) * kernel + kx) * ncols;
          const auto [x0, x1] = valid_range(kx, W, Wo, stride, pad);
          for (int b = 0; b < B; ++b) {
            T* dst = dx.ptr() + (static_cast<std::size_t>(ci) * B + b) * plane;
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              const T* src = row + (static_cast<std::size_t>(b) * Ho + oy) * Wo;
              T* drow = dst + static_cast<std::size_t>(iy) * W;
              const int off = kx - pad;
              for (int ox = x0; ox < x1; ++ox) drow[ox * stride + off] += src[ox];
            }
          }
        }
  }

  /// x: [in_ch, B, H, W] -> [out_ch, B, Ho, Wo]; `w` is the (possibly
  /// normalised) weight actually applied, laid out like `weight`.
  Tensor<T> forward(const Tensor<T>& x, const T* w, Cache& c) const {
    if (x.shape.size() != 4 || x.dim(0) != in_ch) throw ShapeError(weight.name + ": input channel mismatch");
    c.batch = x.dim(1);
    c.h = x.dim(2);
    c.w = x.dim(3);
    c.ho = out_size(c.h);
    c.wo = out_size(c.w);
    if (c.ho < 1 || c.wo < 1) throw ShapeError(weight.name + ": input smaller than kernel");
    if (stride == 1) return forward_shifted(x, w, c);
    im2col(x, c);
    const Eigen::Index ncols = c.cols.dim(1);
    Tensor<T> y({out_ch, c.batch, c.ho, c.wo});
    auto ym = y.mat(out_ch, ncols);
    ym.noalias() = CMapRM<T>(w, out_ch, fan_in()) * c.cols.mat(fan_in(), ncols);
    ym.colwise() += bias.value.vec();
    return y;
  }

  /// Accumulates d(loss)/d(applied weight) into `dw` and the bias gradient
  /// into `bias.grad`. Returns dx when requested.
  Tensor<T> backward(const Tensor<T>& dy, const T* w, const Cache& c, T* dw, bool need_dx) {
    if (stride == 1) return backward_shifted(dy, w, c, dw, need_dx);
    const Eigen::Index ncols = c.cols.dim(1);
    auto dym = dy.mat(out_ch, ncols);
    MapRM<T>(dw, out_ch, fan_in()).noalias() += dym * c.cols.mat(fan_in(), ncols).transpose();
    bias.grad.vec() += dym.rowwise().sum();
    Tensor<T> dx;
    if (need_dx) {
      Tensor<T> dcols({fan_in(), static_cast<int>(ncols)});
      dcols.mat(fan_in(), ncols).noalias() = CMapRM<T>(w, out_ch, fan_in()).transpose() * dym;
      col2im(dcols, dx, c);
    }
    return dx;
  }

 private:
  // Stride-1 convolution as a sum of k*k shifted GEMMs over the flattened
  // zero-padded input. Output (b, oy, ox) lives at padded position
  // (b*Hp + oy)*Wp + ox; tap (ky, kx) reads the input shifted by ky*Wp + kx.
  // Positions outside the valid output window are computed and discarded.
  struct PadGeometry {
    int hp, wp;
    Eigen::Index positions, slack;
  };
  PadGeometry geometry(const Cache& c) const {
    PadGeometry g;
    g.hp = c.h + 2 * pad;
    g.wp = c.w + 2 * pad;
    g.positions = static_cast<Eigen::Index>(c.batch) * g.hp * g.wp;
    g.slack = static_cast<Eigen::Index>(kernel - 1) * g.wp + (kernel - 1);
    return g;
  }

  MatRM<T> tap(const T* w, int ky, int kx) const {
    const Eigen::Index kk = static_cast<Eigen::Index>(kernel) * kernel;
    Eigen::Map<const MatRM<T>, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>> m(
        w + ky * kernel + kx, out_ch, in_ch, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(in_ch * kk, kk));
    return m;
  }

  Tensor<T> forward_shifted(const Tensor<T>& x, const T* w, Cache& c) const {
    const PadGeometry g = geometry(c);
    const Eigen::Index len = g.positions + g.slack;
    c.xpad.shape = {in_ch, static_cast<int>(len)};
    c.xpad.data.assign(static_cast<std::size_t>(in_ch) * static_cast<std::size_t>(len), T{});
    const std::size_t plane = static_cast<std::size_t>(c.h) * c.w;
    for (int ci = 0; ci < in_ch; ++ci)
      for (int b = 0; b < c.batch; ++b) {
        const T* src = x.ptr() + (static_cast<std::size_t>(ci) * c.batch + b) * plane;
        T* dst = c.xpad.ptr() + static_cast<std::size_t>(ci) * len +
                 (static_cast<std::size_t>(b) * g.hp + pad) * g.wp + pad;
        for (int y = 0; y < c.h; ++y)
          std::copy_n(src + static_cast<std::size_t>(y) * c.w, c.w, dst + static_cast<std::size_t>(y) * g.wp);
      }
    const auto xp = c.xpad.mat(in_ch, len);
    MatRM<T> yp(out_ch, g.positions);
    for (int ky = 0; ky < kernel; ++ky)
      for (int kx = 0; kx < kernel; ++kx) {
        const Eigen::Index off = static_cast<Eigen::Index>(ky) * g.wp + kx;
        if (ky == 0 && kx == 0)
          yp.noalias() = tap(w, ky, kx) * xp.middleCols(off, g.positions);
        else
          yp.noalias() += tap(w, ky, kx) * xp.middleCols(off, g.positions);
      }
    Tensor<T> y({out_ch, c.batch, c.ho, c.wo});
    const std::size_t oplane = static_cast<std::size_t>(c.ho) * c.wo;
    for (int co = 0; co < out_ch; ++co) {
      const T bv = bias.value[static_cast<std::size_t>(co)];
      for (int b = 0; b < c.batch; ++b) {
        const T* src = yp.data() + static_cast<std::size_t>(co) * g.positions + static_cast<std::size_t>(b) * g.hp * g.wp;
        T* dst = y.ptr() + (static_cast<std::size_t>(co) * c.batch + b) * oplane;
        for (int oy = 0; oy < c.ho; ++oy)
          for (int ox = 0; ox < c.wo; ++ox)
            dst[static_cast<std::size_t>(oy) * c.wo + ox] = src[static_cast<std::size_t>(oy) * g.wp + ox] + bv;
      }
    }
    return y;
  }

  Tensor<T> backward_shifted(const Tensor<T>& dy, const T* w, const Cache& c, T* dw, bool need_dx) {
    const PadGeometry g = geometry(c);
    const Eigen::Index len = g.positions + g.slack;
    MatRM<T> dyp = MatRM<T>::Zero(out_ch, g.positions);
    const std::size_t oplane = static_cast<std::size_t>(c.ho) * c.wo;
    for (int co = 0; co < out_ch; ++co) {
      T bsum = 0;
      for (int b = 0; b < c.batch; ++b) {
        const T* src = dy.ptr() + (static_cast<std::size_t>(co) * c.batch + b) * oplane;
        T* dst = dyp.data() + static_cast<std::size_t>(co) * g.positions + static_cast<std::size_t>(b) * g.hp * g.wp;
        for (int oy = 0; oy < c.ho; ++oy)
          for (int ox = 0; ox < c.wo; ++ox) {
            const T v = src[static_cast<std::size_t>(oy) * c.wo + ox];
            dst[static_cast<std::size_t>(oy) * g.wp + ox] = v;
            bsum += v;
          }
      }
      bias.grad[static_cast<std::size_t>(co)] += bsum;
    }
    const auto xp = c.xpad.mat(in_ch, len);
    const Eigen::Index kk = static_cast<Eigen::Index>(kernel) * kernel;
    MatRM<T> dxp;
    if (need_dx) dxp = MatRM<T>::Zero(in_ch, len);
    MatRM<T> dwk(out_ch, in_ch);
    for (int ky = 0; ky < kernel; ++ky)
      for (int kx = 0; kx < kernel; ++kx) {
        const Eigen::Index off = static_cast<Eigen::Index>(ky) * g.wp + kx;
        dwk.noalias() = dyp * xp.middleCols(off, g.positions).transpose();
        Eigen::Map<MatRM<T>, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>(
            dw + ky * kernel + kx, out_ch, in_ch, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(in_ch * kk, kk)) += dwk;
        if (need_dx) dxp.middleCols(off, g.positions).noalias() += tap(w, ky, kx).transpose() * dyp;
      }
    Tensor<T> dx;
    if (!need_dx) return dx;
    dx = Tensor<T>({in_ch, c.batch, c.h, c.w});
    const std::size_t plane = static_cast<std::size_t>(c.h) * c.w;
    for (int ci = 0; ci < in_ch; ++ci)
      for (int b = 0; b < c.batch; ++b) {
        const T* src = dxp.data() + static_cast<std::size_t>(ci) * len + (static_cast<std::size_t>(b) * g.hp + pad) * g.wp + pad;
        T* dst = dx.ptr() + (static_cast<std::size_t>(ci) * c.batch + b) * plane;
        for (int y = 0; y < c.h; ++y)
          std::copy_n(src + static_cast<std::size_t>(y) * g.wp, c.w, dst + static_cast<std::size_t>(y) * c.w);
      }
    return dx;
  }
};

struct PoolCache {
  std::vector<int> argmax;  // flat input index per output element
  std::vector<int> in_shape;
};

/// Max pooling over [C, B, H, W] with implicit -inf padding.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int s, int p, PoolCache* cache) {
  const int C = x.dim(0), B = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = (H + 2 * p - k) / s + 1, Wo = (W + 2 * p - k) / s + 1;
  Tensor<T> y({C, B, Ho, Wo});
  if (cache) {
    cache->argmax.resize(y.size());
    cache->in_shape = x.shape;
  }
  std::vector<int> ylo(Ho), yhi(Ho), xlo(Wo), xhi(Wo);
  for (int o = 0; o < Ho; ++o) {
    ylo[o] = std::max(0, o * s - p);
    yhi[o] = std::min(H, o * s - p + k);
  }
  for (int o = 0; o < Wo; ++o) {
    xlo[o] = std::max(0, o * s - p);
    xhi[o] = std::min(W, o * s - p + k);
  }
  const std::size_t planes = static_cast<std::size_t>(C) * B;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* src = x.ptr() + pl * H * W;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        int arg = ylo[oy] * W + xlo[ox];
        T best = src[arg];
        for (int iy = ylo[oy]; iy < yhi[oy]; ++iy)
          for (int ix = xlo[ox]; ix < xhi[ox]; ++ix)
            if (src[iy * W + ix] > best) {
              best = src[iy * W + ix];
              arg = iy * W + ix;
            }
        const std::size_t o = (pl * Ho + oy) * Wo + ox;
        y[o] = best;
        if (cache) cache->argmax[o] = static_cast<int>(pl * H * W) + arg;
      }
  }
  return y;
}

/// Window [floor(i*n/out), ceil((i+1)*n/out)) along one axis.
inline std::pair<int, int> adaptive_window(int i, int n, int out) {
  const int lo = (i * n) / out;
  const int hi = ((i + 1) * n + out - 1) / out;
  return {lo, hi};
}

/// Adaptive max pooling of [C, B, H, W] to [C, B, out_h, out_w]. Requires
/// H >= out_h and W >= out_w.
template <typename T>
Tensor<T> adaptive_maxpool2d(const Tensor<T>& x, int out_h, int out_w, PoolCache* cache) {
  const int C = x.dim(0), B = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < out_h || W < out_w)
    throw ShapeError("adaptive_maxpool: input " + std::to_string(H) + "x" + std::to_string(W) +
                     " smaller than output " + std::to_string(out_h) + "x" + std::to_string(out_w));
  Tensor<T> y({C, B, out_h, out_w});
  if (cache) {
    cache->argmax.resize(y.size());
    cache->in_shape = x.shape;
  }
  const std::size_t planes = static_cast<std::size_t>(C) * B;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* src = x.ptr() + pl * H * W;
    for (int oy = 0; oy < out_h; ++oy) {
      const auto [y0, y1] = adaptive_window(oy, H, out_h);
      for (int ox = 0; ox < out_w; ++ox) {
        const auto [x0, x1] = adaptive_window(ox, W, out_w);
        T best = src[y0 * W + x0];
        int arg = y0 * W + x0;
        for (int iy = y0; iy < y1; ++iy)
          for (int ix = x0; ix < x1; ++ix)
            if (src[iy * W + ix] > best) {
              best = src[iy * W + ix];
              arg = iy * W + ix;
            }
        const std::size_t o = (pl * out_h + oy) * out_w + ox;
        y[o] = best;
        if (cache) cache->argmax[o] = static_cast<int>(pl * H * W) + arg;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> pool_backward(const Tensor<T>& dy, const PoolCache& c) {
  Tensor<T> dx(c.in_shape);
  for (std::size_t i = 0; i < dy.size(); ++i) dx[static_cast<std::size_t>(c.argmax[i])] += dy[i];
  return dx;
}

template <typename T>
void relu_inplace(Tensor<T>& x) {
  for (auto& v : x.data) v = v > T{} ? v : T{};
}

/// Zeroes gradient entries where the ReLU output was not positive.
template <typename T>
void relu_backward_inplace(Tensor<T>& grad, const Tensor<T>& relu_out) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(relu_out[i] > T{})) grad[i] = T{};
}

/// Fully connected layer, optionally with factorised Gaussian parameter
/// noise: W = mu + sigma * (f(eps_out) f(eps_in)^T), f(x) = sign(x) sqrt|x|.
template <typename T>
struct Dense {
  int in = 0, out = 0;
  bool noisy = false;
  Param<T> weight_mu;  // [out, in]
  Param<T> bias_mu;    // [out]
  Param<T> weight_sigma;
  Param<T> bias_sigma;
  std::vector<T> eps_in, eps_out;  // already passed through f

  Dense() = default;
  Dense(const std::string& name, int in_features, int out_features, bool is_noisy, double sigma0, Rng& rng)
      : in(in_features), out(out_features), noisy(is_noisy),
        weight_mu(name + ".weight_mu", {out_features, in_features}), bias_mu(name + ".bias_mu", {out_features}) {
    const T bound = T(1) / std::sqrt(static_cast<T>(in));
    uniform_fill(weight_mu.value, bound, rng);
    uniform_fill(bias_mu.value, bound, rng);
    if (noisy) {
      weight_sigma = Param<T>(name + ".weight_sigma", {out, in});
      bias_sigma = Param<T>(name + ".bias_sigma", {out});
      const T s = static_cast<T>(sigma0) / std::sqrt(static_cast<T>(in));
      std::fill(weight_sigma.value.data.begin(), weight_sigma.value.data.end(), s);
      std::fill(bias_sigma.value.data.begin(), bias_sigma.value.data.end(), s);
      eps_in.assign(static_cast<std::size_t>(in), T{});
      eps_out.assign(static_cast<std::size_t>(out), T{});
    }
  }

  static T scale_noise(double x) { return static_cast<T>(x >= 0 ? std::sqrt(x) : -std::sqrt(-x)); }

  void sample_noise(Rng& rng) {
    if (!noisy) return;
    std::normal_distribution<double> n01(0.0, 1.0);
    for (auto& e : eps_in) e = scale_noise(n01(rng));
    for (auto& e : eps_out) e = scale_noise(n01(rng));
  }

  void zero_noise() {
    std::fill(eps_in.begin(), eps_in.end(), T{});
    std::fill(eps_out.begin(), eps_out.end(), T{});
  }

  MatRM<T> effective_weight() const {
    MatRM<T> w = weight_mu.value.mat(out, in);
    if (noisy)
      w.array() += weight_sigma.value.mat(out, in).array() *
                   (CVecMap<T>(eps_out.data(), out) * CVecMap<T>(eps_in.data(), in).transpose()).array();
    return w;
  }

  Eigen::Matrix<T, Eigen::Dynamic, 1> effective_bias() const {
    Eigen::Matrix<T, Eigen::Dynamic, 1> b = bias_mu.value.vec();
    if (noisy) b.array() += bias_sigma.value.vec().array() * CVecMap<T>(eps_out.data(), out).array();
    return b;
  }

  /// x: [N, in] -> [N, out]
  Tensor<T> forward(const Tensor<T>& x) const {
    const int n = static_cast<int>(x.size() / static_cast<std::size_t>(in));
    if (x.size() != static_cast<std::size_t>(n) * in) throw ShapeError(weight_mu.name + ": input width mismatch");
    Tensor<T> y({n, out});
    auto ym = y.mat(n, out);
    ym.noalias() = x.mat(n, in) * effective_weight().transpose();
    ym.rowwise() += effective_bias().transpose();
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy, bool need_dx) {
    const int n = dy.dim(0);
    auto dym = dy.mat(n, out);
    MatRM<T> dw = dym.transpose() * x.mat(n, in);
    Eigen::Matrix<T, Eigen::Dynamic, 1> db = dym.colwise().sum().transpose();
    weight_mu.grad.mat(out, in) += dw;
    bias_mu.grad.vec() += db;
    if (noisy) {
      weight_sigma.grad.mat(out, in).array() +=
          dw.array() * (CVecMap<T>(eps_out.data(), out) * CVecMap<T>(eps_in.data(), in).transpose()).array();
      bias_sigma.grad.vec().array() += db.array() * CVecMap<T>(eps_out.data(), out).array();
    }
    Tensor<T> dx;
    if (need_dx) {
      dx = Tensor<T>({n, in});
      dx.mat(n, in).noalias() = dym * effective_weight();
    }
    return dx;
  }
};

/// Layer normalisation with per-feature affine parameters. Row mode
/// normalises each row of [N, F]; channel mode normalises each sample of a
/// [C, B, H, W] activation over (C, H, W) with a per-channel affine.
template <typename T>
struct LayerNorm {
  int features = 0;
  bool channel_mode = false;
  Param<T> gamma, beta;
  static constexpr double kEps = 1e-5;

  struct Cache {
    Tensor<T> xhat;
    std::vector<T> inv_std;
  };

  LayerNorm() = default;
  LayerNorm(const std::string& name, int f, bool channels)
      : features(f), channel_mode(channels), gamma(name + ".gamma", {f}), beta(name + ".beta", {f}) {
    std::fill(gamma.value.data.begin(), gamma.value.data.end(), T(1));
  }

  // Visits each normalisation group as (element offset, feature index) pairs.
  template <typename Fn>
  static void for_group(const Tensor<T>& x, bool channel_mode, int group, Fn&& fn) {
    if (!channel_mode) {
      const int F = x.dim(1);
      for (int f = 0; f < F; ++f) fn(static_cast<std::size_t>(group) * F + f, f);
    } else {
      const int C = x.dim(0), B = x.dim(1);
      const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < plane; ++i) fn((static_cast<std::size_t>(c) * B + group) * plane + i, c);
    }
  }

  int groups(const Tensor<T>& x) const { return channel_mode ? x.dim(1) : x.dim(0); }

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    Tensor<T> y(x.shape);
    Tensor<T> xhat(x.shape);
    const int G = groups(x);
    std::vector<T> inv(static_cast<std::size_t>(G));
    for (int g = 0; g < G; ++g) {
      double sum = 0, sq = 0;
      std::size_t n = 0;
      for_group(x, channel_mode, g, [&](std::size_t i, int) {
        sum += x[i];
        sq += static_cast<double>(x[i]) * x[i];
        ++n;
      });
      const double mean = sum / static_cast<double>(n);
      const double var = std::max(0.0, sq / static_cast<double>(n) - mean * mean);
      const T is = static_cast<T>(1.0 / std::sqrt(var + kEps));
      inv[static_cast<std::size_t>(g)] = is;
      for_group(x, channel_mode, g, [&](std::size_t i, int f) {
        xhat[i] = (x[i] - static_cast<T>(mean)) * is;
        y[i] = gamma.value[static_cast<std::size_t>(f)] * xhat[i] + beta.value[static_cast<std::size_t>(f)];
      });
    }
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->inv_std = std::move(inv);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& c) {
    Tensor<T> dx(dy.shape);
    const int G = groups(dy);
    for (int g = 0; g < G; ++g) {
      double mean_d = 0, mean_dx = 0;
      std::size_t n = 0;
      for_group(dy, channel_mode, g, [&](std::size_t i, int f) {
        const auto fi = static_cast<std::size_t>(f);
        gamma.grad[fi] += dy[i] * c.xhat[i];
        beta.grad[fi] += dy[i];
        const double d = static_cast<double>(dy[i]) * gamma.value[fi];
        mean_d += d;
        mean_dx += d * c.xhat[i];
        ++n;
      });
      mean_d /= static_cast<double>(n);
      mean_dx /= static_cast<double>(n);
      const T is = c.inv_std[static_cast<std::size_t>(g)];
      for_group(dy, channel_mode, g, [&](std::size_t i, int f) {
        const double d = static_cast<double>(dy[i]) * gamma.value[static_cast<std::size_t>(f)];
        dx[i] = static_cast<T>(is * (d - mean_d - c.xhat[i] * mean_dx));
      });
    }
    return dx;
  }
};

/// Persisted power-iteration vectors for one normalised weight matrix.
/// u has one entry per output row, v one per input column; both unit norm.
template <typename T>
struct SpectralState {
  std::vector<T> u, v;

  static SpectralState random(int rows, int cols, Rng& rng) {
    SpectralState s;
    std::normal_distribution<double> n01(0.0, 1.0);
    s.u.resize(static_cast<std::size_t>(rows));
    s.v.resize(static_cast<std::size_t>(cols));
    for (auto& x : s.u) x = static_cast<T>(n01(rng));
    for (auto& x : s.v) x = static_cast<T>(n01(rng));
    VecMap<T>(s.u.data(), rows).normalize();
    VecMap<T>(s.v.data(), cols).normalize();
    return s;
  }
};

inline constexpr double kSpectralSigmaFloor = 1e-12;

/// One power-iteration refinement of (u, v) for W [rows, cols]:
/// v <- W^T u / |.|, u <- W v / |.|. A vector whose update has (near) zero
/// norm is left unchanged so it stays unit length.
template <typename T>
void power_iteration(const T* w, int rows, int cols, SpectralState<T>& s) {
  CMapRM<T> W(w, rows, cols);
  VecMap<T> u(s.u.data(), rows), v(s.v.data(), cols);
  Eigen::Matrix<T, Eigen::Dynamic, 1> nv = W.transpose() * u;
  if (nv.norm() > static_cast<T>(kSpectralSigmaFloor)) v = nv / nv.norm();
  Eigen::Matrix<T, Eigen::Dynamic, 1> nu = W * v;
  if (nu.norm() > static_cast<T>(kSpectralSigmaFloor)) u = nu / nu.norm();
}

/// sigma = u^T W v, floored at 1e-12.
template <typename T>
T spectral_sigma(const T* w, int rows, int cols, const SpectralState<T>& s) {
  CMapRM<T> W(w, rows, cols);
  const T sigma = CVecMap<T>(s.u.data(), rows).dot(W * CVecMap<T>(s.v.data(), cols));
  return std::max(sigma, static_cast<T>(kSpectralSigmaFloor));
}

/// One normalisation step: refine (u, v) once, then return W / sigma.
template <typename T>
MatRM<T> spectral_normalize_step(const MatRM<T>& weight, SpectralState<T>& state) {
  const int rows = static_cast<int>(weight.rows()), cols = static_cast<int>(weight.cols());
  power_iteration(weight.data(), rows, cols, state);
  return weight / spectral_sigma(weight.data(), rows, cols, state);
}

}  // namespace btr
