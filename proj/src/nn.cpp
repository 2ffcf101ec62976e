#include "pica/nn.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "pica/gemm.hpp"

namespace pica {

template <typename T>
ConvKernel<T> ConvKernel<T>::make(int kh, int kw, int cin, int cout, int stride, int dilation,
                                  Pad4 pad) {
  if (kh < 1 || kw < 1) throw std::invalid_argument("ConvKernel: kernel dims must be >= 1");
  if (stride < 1) throw std::invalid_argument("ConvKernel: stride must be >= 1");
  if (dilation < 1) throw std::invalid_argument("ConvKernel: dilation must be >= 1");
  ConvKernel<T> k;
  k.weight = Tensor<T>(Shape4{kh, kw, cin, cout});
  k.bias = Tensor<T>(Shape4{1, 1, 1, cout});
  k.stride = stride;
  k.dilation = dilation;
  k.pad = pad;
  return k;
}

namespace {

struct ConvGeom {
  int n, in_h, in_w, cin;
  int kh, kw, cout, stride, dilation;
  Pad4 pad;
  int out_h, out_w;
  std::int64_t rows() const { return std::int64_t(n) * out_h * out_w; }
  int patch() const { return kh * kw * cin; }
};

template <typename T>
ConvGeom conv_geometry(const Tensor<T>& x, const ConvKernel<T>& k) {
  const Shape4 s = x.shape();
  if (s.c != k.cin())
    throw std::invalid_argument("conv2d: input has " + std::to_string(s.c) +
                                " channels, kernel expects " + std::to_string(k.cin()));
  ConvGeom g{s.n,    s.h,          s.w,     s.c,   k.kh(), k.kw(),
             k.cout(), k.stride,   k.dilation, k.pad, 0,      0};
  const int span_h = (g.kh - 1) * g.dilation + 1;
  const int span_w = (g.kw - 1) * g.dilation + 1;
  const int padded_h = g.in_h + g.pad.top + g.pad.bottom;
  const int padded_w = g.in_w + g.pad.left + g.pad.right;
  g.out_h = (padded_h - span_h) / g.stride + 1;
  g.out_w = (padded_w - span_w) / g.stride + 1;
  if (padded_h < span_h || padded_w < span_w)
    throw std::invalid_argument("conv2d: non-positive output size (padded extent " +
                                std::to_string(padded_h) + "x" + std::to_string(padded_w) +
                                " < receptive field " + std::to_string(span_h) + "x" +
                                std::to_string(span_w) + ")");
  return g;
}

template <typename T>
void im2col(const ConvGeom& g, const T* x, T* col) {
  const std::int64_t rows = g.rows();
#pragma omp parallel for schedule(static) if (rows * g.patch() > (1 << 16))
  for (std::int64_t r = 0; r < rows; ++r) {
    const int ow = int(r % g.out_w);
    const int oh = int((r / g.out_w) % g.out_h);
    const int n = int(r / (std::int64_t(g.out_w) * g.out_h));
    T* dst = col + r * g.patch();
    for (int ky = 0; ky < g.kh; ++ky) {
      const int iy = oh * g.stride - g.pad.top + ky * g.dilation;
      for (int kx = 0; kx < g.kw; ++kx) {
        const int ix = ow * g.stride - g.pad.left + kx * g.dilation;
        T* d = dst + (ky * g.kw + kx) * g.cin;
        if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) {
          std::fill(d, d + g.cin, T(0));
        } else {
          const T* src = x + ((std::int64_t(n) * g.in_h + iy) * g.in_w + ix) * g.cin;
          std::copy(src, src + g.cin, d);
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeom& g, const T* dcol, T* dx) {
  const std::int64_t rows = g.rows();
  for (std::int64_t r = 0; r < rows; ++r) {
    const int ow = int(r % g.out_w);
    const int oh = int((r / g.out_w) % g.out_h);
    const int n = int(r / (std::int64_t(g.out_w) * g.out_h));
    const T* src = dcol + r * g.patch();
    for (int ky = 0; ky < g.kh; ++ky) {
      const int iy = oh * g.stride - g.pad.top + ky * g.dilation;
      if (iy < 0 || iy >= g.in_h) continue;
      for (int kx = 0; kx < g.kw; ++kx) {
        const int ix = ow * g.stride - g.pad.left + kx * g.dilation;
        if (ix < 0 || ix >= g.in_w) continue;
        T* d = dx + ((std::int64_t(n) * g.in_h + iy) * g.in_w + ix) * g.cin;
        const T* s = src + (ky * g.kw + kx) * g.cin;
        for (int ci = 0; ci < g.cin; ++ci) d[ci] += s[ci];
      }
    }
  }
}

template <typename T>
bool is_pointwise(const ConvGeom& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad.top == 0 && g.pad.bottom == 0 &&
         g.pad.left == 0 && g.pad.right == 0;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvKernel<T>& k, Tape<T>* tape) {
  const ConvGeom g = conv_geometry(x, k);
  Tensor<T> out(Shape4{g.n, g.out_h, g.out_w, g.cout});

  // Pre-fill rows with the bias, then accumulate the matrix product.
  {
    const T* b = k.bias.data();
    T* o = out.data();
    const std::int64_t rows = g.rows();
    for (std::int64_t r = 0; r < rows; ++r)
      std::copy(b, b + g.cout, o + r * g.cout);
  }

  auto col = std::make_shared<std::vector<T>>();
  const T* col_ptr = x.data();
  if (!is_pointwise<T>(g)) {
    col->resize(std::size_t(g.rows()) * g.patch());
    im2col(g, x.data(), col->data());
    col_ptr = col->data();
  }
  gemm<T>(int(g.rows()), g.cout, g.patch(), col_ptr, k.weight.data(), out.data(), true);

  if (tape) {
    std::vector<int> in{tape->track(x), tape->track(k.weight), tape->track(k.bias)};
    Tensor<T> xc = x, wc = k.weight, bc = k.bias, oc = out;
    tape->record(std::move(in), out, [xc, wc, bc, oc, col, g]() mutable {
      const T* gy = oc.grad();
      const std::int64_t rows = g.rows();
      // bias
      T* db = bc.grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (int co = 0; co < g.cout; ++co) db[co] += gy[r * g.cout + co];
      const bool pointwise = col->empty();
      const T* col_ptr = pointwise ? xc.data() : col->data();
      // weights
      gemm_at<T>(g.patch(), g.cout, int(rows), col_ptr, gy, wc.grad(), true);
      // input
      std::vector<T> dcol(std::size_t(rows) * g.patch());
      gemm_bt<T>(int(rows), g.patch(), g.cout, gy, wc.data(), dcol.data(), false);
      if (pointwise) {
        T* dx = xc.grad();
        const std::int64_t nel = xc.numel();
        for (std::int64_t i = 0; i < nel; ++i) dx[i] += dcol[std::size_t(i)];
      } else {
        col2im_add(g, dcol.data(), xc.grad());
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int out_h, int out_w, Tape<T>* tape) {
  if (out_h < 1 || out_w < 1)
    throw std::invalid_argument("bilinear_upsample: target size must be >= 1");
  const Shape4 s = x.shape();
  Tensor<T> out(Shape4{s.n, out_h, out_w, s.c});

  struct Axis {
    int i0, i1;
    T f;
  };
  auto make_axis = [](int in, int outn) {
    std::vector<Axis> ax(static_cast<std::size_t>(outn));
    for (int d = 0; d < outn; ++d) {
      double src = outn > 1 ? double(d) * (in - 1) / double(outn - 1) : 0.0;
      int i0 = int(std::floor(src));
      if (i0 > in - 1) i0 = in - 1;
      int i1 = std::min(i0 + 1, in - 1);
      ax[std::size_t(d)] = Axis{i0, i1, T(src - i0)};
    }
    return ax;
  };
  const auto ay = make_axis(s.h, out_h);
  const auto axx = make_axis(s.w, out_w);

  for (int n = 0; n < s.n; ++n)
    for (int oy = 0; oy < out_h; ++oy) {
      const Axis a = ay[std::size_t(oy)];
      for (int ox = 0; ox < out_w; ++ox) {
        const Axis b = axx[std::size_t(ox)];
        const T w00 = (T(1) - a.f) * (T(1) - b.f), w01 = (T(1) - a.f) * b.f;
        const T w10 = a.f * (T(1) - b.f), w11 = a.f * b.f;
        const T* p00 = &x.at(n, a.i0, b.i0, 0);
        const T* p01 = &x.at(n, a.i0, b.i1, 0);
        const T* p10 = &x.at(n, a.i1, b.i0, 0);
        const T* p11 = &x.at(n, a.i1, b.i1, 0);
        T* o = &out.at(n, oy, ox, 0);
        for (int c = 0; c < s.c; ++c)
          o[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
      }
    }

  if (tape) {
    std::vector<int> in{tape->track(x)};
    Tensor<T> xc = x, oc = out;
    tape->record(std::move(in), out, [xc, oc, ay, axx]() mutable {
      const Shape4 s = xc.shape();
      const Shape4 so = oc.shape();
      const T* g = oc.grad();
      T* gx = xc.grad();
      for (int n = 0; n < so.n; ++n)
        for (int oy = 0; oy < so.h; ++oy) {
          const Axis a = ay[std::size_t(oy)];
          for (int ox = 0; ox < so.w; ++ox) {
            const Axis b = axx[std::size_t(ox)];
            const T w00 = (T(1) - a.f) * (T(1) - b.f), w01 = (T(1) - a.f) * b.f;
            const T w10 = a.f * (T(1) - b.f), w11 = a.f * b.f;
            const T* gp = g + flat_index(so, n, oy, ox, 0);
            for (int c = 0; c < s.c; ++c) {
              gx[flat_index(s, n, a.i0, b.i0, c)] += w00 * gp[c];
              gx[flat_index(s, n, a.i0, b.i1, c)] += w01 * gp[c];
              gx[flat_index(s, n, a.i1, b.i0, c)] += w10 * gp[c];
              gx[flat_index(s, n, a.i1, b.i1, c)] += w11 * gp[c];
            }
          }
        }
    });
  }
  return out;
}

template <typename T>
BatchNormParams<T> BatchNormParams<T>::make(int channels) {
  BatchNormParams<T> p;
  p.gamma = Tensor<T>(Shape4{1, 1, 1, channels}, T(1));
  p.beta = Tensor<T>(Shape4{1, 1, 1, channels}, T(0));
  p.running_mean.assign(std::size_t(channels), T(0));
  p.running_var.assign(std::size_t(channels), T(1));
  return p;
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormParams<T>& p, BNMode mode, Tape<T>* tape) {
  const Shape4 s = x.shape();
  if (s.c != p.channels())
    throw std::invalid_argument("batch_norm: channel mismatch");
  const std::int64_t count = std::int64_t(s.n) * s.h * s.w;
  if (count == 0) throw std::invalid_argument("batch_norm: zero-size batch");
  const int C = s.c;

  std::vector<T> mean(std::size_t(C), T(0)), var(std::size_t(C), T(0));
  if (mode == BNMode::train) {
    const T* xv = x.data();
    for (std::int64_t i = 0; i < count; ++i)
      for (int c = 0; c < C; ++c) mean[std::size_t(c)] += xv[i * C + c];
    for (int c = 0; c < C; ++c) mean[std::size_t(c)] /= T(count);
    for (std::int64_t i = 0; i < count; ++i)
      for (int c = 0; c < C; ++c) {
        const T d = xv[i * C + c] - mean[std::size_t(c)];
        var[std::size_t(c)] += d * d;
      }
    for (int c = 0; c < C; ++c) var[std::size_t(c)] /= T(count);
    for (int c = 0; c < C; ++c) {
      p.running_mean[std::size_t(c)] =
          (T(1) - p.momentum) * p.running_mean[std::size_t(c)] + p.momentum * mean[std::size_t(c)];
      p.running_var[std::size_t(c)] =
          (T(1) - p.momentum) * p.running_var[std::size_t(c)] + p.momentum * var[std::size_t(c)];
    }
  } else {
    mean = p.running_mean;
    var = p.running_var;
  }

  std::vector<T> inv_std(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) inv_std[std::size_t(c)] = T(1) / std::sqrt(var[std::size_t(c)] + p.eps);

  Tensor<T> out(s);
  auto xhat = std::make_shared<std::vector<T>>(std::size_t(x.numel()));
  {
    const T* xv = x.data();
    T* ov = out.data();
    const T* gv = p.gamma.data();
    const T* bv = p.beta.data();
    T* hv = xhat->data();
    for (std::int64_t i = 0; i < count; ++i)
      for (int c = 0; c < C; ++c) {
        const T h = (xv[i * C + c] - mean[std::size_t(c)]) * inv_std[std::size_t(c)];
        hv[i * C + c] = h;
        ov[i * C + c] = gv[c] * h + bv[c];
      }
  }

  if (tape) {
    std::vector<int> in{tape->track(x), tape->track(p.gamma), tape->track(p.beta)};
    Tensor<T> xc = x, gc = p.gamma, bc = p.beta, oc = out;
    const bool train = mode == BNMode::train;
    tape->record(std::move(in), out, [xc, gc, bc, oc, xhat, inv_std, train]() mutable {
      const Shape4 s = xc.shape();
      const std::int64_t count = std::int64_t(s.n) * s.h * s.w;
      const int C = s.c;
      const T* gy = oc.grad();
      const T* hv = xhat->data();
      std::vector<T> sum_g(std::size_t(C), T(0)), sum_gh(std::size_t(C), T(0));
      for (std::int64_t i = 0; i < count; ++i)
        for (int c = 0; c < C; ++c) {
          sum_g[std::size_t(c)] += gy[i * C + c];
          sum_gh[std::size_t(c)] += gy[i * C + c] * hv[i * C + c];
        }
      T* dgamma = gc.grad();
      T* dbeta = bc.grad();
      for (int c = 0; c < C; ++c) {
        dgamma[c] += sum_gh[std::size_t(c)];
        dbeta[c] += sum_g[std::size_t(c)];
      }
      T* dx = xc.grad();
      const T* gv = gc.data();
      if (train) {
        for (std::int64_t i = 0; i < count; ++i)
          for (int c = 0; c < C; ++c) {
            const T k = gv[c] * inv_std[std::size_t(c)];
            dx[i * C + c] += k * (gy[i * C + c] - sum_g[std::size_t(c)] / T(count) -
                                  hv[i * C + c] * sum_gh[std::size_t(c)] / T(count));
          }
      } else {
        for (std::int64_t i = 0; i < count; ++i)
          for (int c = 0; c < C; ++c)
            dx[i * C + c] += gv[c] * inv_std[std::size_t(c)] * gy[i * C + c];
      }
    });
  }
  return out;
}

namespace {

struct PoolGeom {
  int n, in_h, in_w, c;
  int kernel, stride;
  Pad4 pad;
  int out_h, out_w;
};

template <typename T>
PoolGeom pool_geometry(const Tensor<T>& x, int kernel, int stride, Pad4 pad, const char* op) {
  if (kernel < 1 || stride < 1) throw std::invalid_argument(std::string(op) + ": bad kernel/stride");
  const Shape4 s = x.shape();
  PoolGeom g{s.n, s.h, s.w, s.c, kernel, stride, pad, 0, 0};
  const int ph = s.h + pad.top + pad.bottom;
  const int pw = s.w + pad.left + pad.right;
  if (ph < kernel || pw < kernel)
    throw std::invalid_argument(std::string(op) + ": window larger than padded input");
  g.out_h = (ph - kernel) / stride + 1;
  g.out_w = (pw - kernel) / stride + 1;
  return g;
}

}  // namespace

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int kernel, int stride, Pad4 pad, Tape<T>* tape) {
  const PoolGeom g = pool_geometry(x, kernel, stride, pad, "max_pool2d");
  Tensor<T> out(Shape4{g.n, g.out_h, g.out_w, g.c});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(std::size_t(out.numel()));

  for (int n = 0; n < g.n; ++n)
    for (int oy = 0; oy < g.out_h; ++oy)
      for (int ox = 0; ox < g.out_w; ++ox)
        for (int c = 0; c < g.c; ++c) {
          T best = T(0);
          std::int64_t best_i = -1;
          for (int ky = 0; ky < g.kernel; ++ky) {
            const int iy = oy * g.stride - g.pad.top + ky;
            if (iy < 0 || iy >= g.in_h) continue;
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int ix = ox * g.stride - g.pad.left + kx;
              if (ix < 0 || ix >= g.in_w) continue;
              const std::int64_t idx = flat_index(x.shape(), n, iy, ix, c);
              if (best_i < 0 || x.data()[idx] > best) {
                best = x.data()[idx];
                best_i = idx;
              }
            }
          }
          if (best_i < 0)
            throw std::invalid_argument("max_pool2d: window fully out of bounds");
          const std::int64_t o = flat_index(out.shape(), n, oy, ox, c);
          out.data()[o] = best;
          (*argmax)[std::size_t(o)] = best_i;
        }

  if (tape) {
    std::vector<int> in{tape->track(x)};
    Tensor<T> xc = x, oc = out;
    tape->record(std::move(in), out, [xc, oc, argmax]() mutable {
      const T* gy = oc.grad();
      T* gx = xc.grad();
      const std::int64_t n = oc.numel();
      for (std::int64_t i = 0; i < n; ++i) gx[(*argmax)[std::size_t(i)]] += gy[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int kernel, int stride, Pad4 pad, Tape<T>* tape) {
  const PoolGeom g = pool_geometry(x, kernel, stride, pad, "avg_pool2d");
  Tensor<T> out(Shape4{g.n, g.out_h, g.out_w, g.c});
  const T inv = T(1) / (T(kernel) * T(kernel));

  for (int n = 0; n < g.n; ++n)
    for (int oy = 0; oy < g.out_h; ++oy)
      for (int ox = 0; ox < g.out_w; ++ox) {
        T* o = &out.at(n, oy, ox, 0);
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride - g.pad.top + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride - g.pad.left + kx;
            if (ix < 0 || ix >= g.in_w) continue;
            const T* src = &x.at(n, iy, ix, 0);
            for (int c = 0; c < g.c; ++c) o[c] += src[c];
          }
        }
        for (int c = 0; c < g.c; ++c) o[c] *= inv;
      }

  if (tape) {
    std::vector<int> in{tape->track(x)};
    Tensor<T> xc = x, oc = out;
    tape->record(std::move(in), out, [xc, oc, g, inv]() mutable {
      const T* gy = oc.grad();
      T* gx = xc.grad();
      for (int n = 0; n < g.n; ++n)
        for (int oy = 0; oy < g.out_h; ++oy)
          for (int ox = 0; ox < g.out_w; ++ox) {
            const T* gp = gy + flat_index(oc.shape(), n, oy, ox, 0);
            for (int ky = 0; ky < g.kernel; ++ky) {
              const int iy = oy * g.stride - g.pad.top + ky;
              if (iy < 0 || iy >= g.in_h) continue;
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int ix = ox * g.stride - g.pad.left + kx;
                if (ix < 0 || ix >= g.in_w) continue;
                T* d = gx + flat_index(xc.shape(), n, iy, ix, 0);
                for (int c = 0; c < g.c; ++c) d[c] += gp[c] * inv;
              }
            }
          }
    });
  }
  return out;
}

template <typename T>
void init_conv(ConvKernel<T>& k, Rng& rng) {
  const int fan_in = k.kh() * k.kw() * k.cin();
  const double limit = std::sqrt(3.0 / fan_in);
  for (std::int64_t i = 0; i < k.weight.numel(); ++i)
    k.weight.data()[i] = T(rng.uniform(-limit, limit));
  for (std::int64_t i = 0; i < k.bias.numel(); ++i) k.bias.data()[i] = T(0);
}

template <typename T>
std::vector<T> orthogonal_matrix(int rows, int cols, Rng& rng) {
  if (rows > cols) throw std::invalid_argument("orthogonal_matrix: rows must be <= cols");
  std::vector<double> m(std::size_t(rows) * cols);
  for (auto& v : m) v = rng.normal();
  // modified Gram-Schmidt over rows
  for (int i = 0; i < rows; ++i) {
    double* ri = m.data() + std::size_t(i) * cols;
    for (int j = 0; j < i; ++j) {
      const double* rj = m.data() + std::size_t(j) * cols;
      double dot = 0;
      for (int k = 0; k < cols; ++k) dot += ri[k] * rj[k];
      for (int k = 0; k < cols; ++k) ri[k] -= dot * rj[k];
    }
    double norm = 0;
    for (int k = 0; k < cols; ++k) norm += ri[k] * ri[k];
    norm = std::sqrt(norm);
    if (norm < 1e-8) {
      for (int k = 0; k < cols; ++k) ri[k] = rng.normal();
      --i;
      continue;
    }
    for (int k = 0; k < cols; ++k) ri[k] /= norm;
  }
  std::vector<T> out(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = T(m[i]);
  return out;
}

#define PICA_INSTANTIATE_NN(T)                                                              \
  template struct ConvKernel<T>;                                                            \
  template struct BatchNormParams<T>;                                                       \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const ConvKernel<T>&, Tape<T>*);           \
  template Tensor<T> bilinear_upsample<T>(const Tensor<T>&, int, int, Tape<T>*);            \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, BatchNormParams<T>&, BNMode, Tape<T>*); \
  template Tensor<T> max_pool2d<T>(const Tensor<T>&, int, int, Pad4, Tape<T>*);             \
  template Tensor<T> avg_pool2d<T>(const Tensor<T>&, int, int, Pad4, Tape<T>*);             \
  template void init_conv<T>(ConvKernel<T>&, Rng&);                                         \
  template std::vector<T> orthogonal_matrix<T>(int, int, Rng&);

PICA_INSTANTIATE_NN(float)
PICA_INSTANTIATE_NN(double)

}  // namespace pica
