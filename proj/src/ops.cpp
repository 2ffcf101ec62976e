#include "pica/ops.hpp"

#include <algorithm>
#include <cmath>

namespace pica {

namespace {

template <typename T>
void check_same_shape(const Tensor<T>& x, const Tensor<T>& y, const char* op) {
  if (!(x.shape() == y.shape()))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + x.shape().str() + " vs " +
                                y.shape().str());
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y, Tape<T>* tape) {
  check_same_shape(x, y, "add");
  Tensor<T> out(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] + y.data()[i];
  if (tape) {
    std::vector<int> in{tape->track(x), tape->track(y)};
    Tensor<T> xc = x, yc = y, oc = out;
    tape->record(std::move(in), out, [xc, yc, oc]() mutable {
      const T* g = oc.grad();
      T* gx = xc.grad();
      T* gy = yc.grad();
      const std::int64_t n = oc.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        gx[i] += g[i];
        gy[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y, Tape<T>* tape) {
  check_same_shape(x, y, "mul");
  Tensor<T> out(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * y.data()[i];
  if (tape) {
    std::vector<int> in{tape->track(x), tape->track(y)};
    Tensor<T> xc = x, yc = y, oc = out;
    tape->record(std::move(in), out, [xc, yc, oc]() mutable {
      const T* g = oc.grad();
      T* gx = xc.grad();
      T* gy = yc.grad();
      const std::int64_t n = oc.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        gx[i] += g[i] * yc.data()[i];
        gy[i] += g[i] * xc.data()[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor, Tape<T>* tape) {
  Tensor<T> out(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * factor;
  if (tape) {
    std::vector<int> in{tape->track(x)};
    Tensor<T> xc = x, oc = out;
    tape->record(std::move(in), out, [xc, oc, factor]() mutable {
      const T* g = oc.grad();
      T* gx = xc.grad();
      const std::int64_t n = oc.numel();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, Tape<T>* tape) {
  T acc = T(0);
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += x.data()[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (tape) {
    std::vector<int> in{tape->track(x)};
    Tensor<T> xc = x, oc = out;
    tape->record(std::move(in), out, [xc, oc]() mutable {
      const T g = oc.grad()[0];
      T* gx = xc.grad();
      const std::int64_t n = xc.numel();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x, Tape<T>* tape) {
  Tensor<T> out(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  if (tape) {
    std::vector<int> in{tape->track(x)};
    Tensor<T> xc = x, oc = out;
    tape->record(std::move(in), out, [xc, oc]() mutable {
      const T* g = oc.grad();
      T* gx = xc.grad();
      const std::int64_t n = oc.numel();
      for (std::int64_t i = 0; i < n; ++i)
        if (xc.data()[i] > T(0)) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x, Tape<T>* tape) {
  Tensor<T> out(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = T(1) / (T(1) + std::exp(-x.data()[i]));
  if (tape) {
    std::vector<int> in{tape->track(x)};
    Tensor<T> xc = x, oc = out;
    tape->record(std::move(in), out, [xc, oc]() mutable {
      const T* g = oc.grad();
      const T* y = oc.data();
      T* gx = xc.grad();
      const std::int64_t n = oc.numel();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x, Tape<T>* tape) {
  const Shape4 s = x.shape();
  Tensor<T> out(s);
  const std::int64_t pixels = std::int64_t(s.n) * s.h * s.w;
  const int c = s.c;
  for (std::int64_t p = 0; p < pixels; ++p) {
    const T* xv = x.data() + p * c;
    T* yv = out.data() + p * c;
    T mx = xv[0];
    for (int i = 1; i < c; ++i) mx = std::max(mx, xv[i]);
    T denom = T(0);
    for (int i = 0; i < c; ++i) {
      yv[i] = std::exp(xv[i] - mx);
      denom += yv[i];
    }
    for (int i = 0; i < c; ++i) yv[i] /= denom;
  }
  if (tape) {
    std::vector<int> in{tape->track(x)};
    Tensor<T> xc = x, oc = out;
    tape->record(std::move(in), out, [xc, oc]() mutable {
      const Shape4 s = oc.shape();
      const std::int64_t pixels = std::int64_t(s.n) * s.h * s.w;
      const int c = s.c;
      const T* g = oc.grad();
      const T* y = oc.data();
      T* gx = xc.grad();
      for (std::int64_t p = 0; p < pixels; ++p) {
        const T* gp = g + p * c;
        const T* yp = y + p * c;
        T dot = T(0);
        for (int i = 0; i < c; ++i) dot += gp[i] * yp[i];
        T* gxp = gx + p * c;
        for (int i = 0; i < c; ++i) gxp[i] += yp[i] * (gp[i] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& x, const Tensor<T>& y, Tape<T>* tape) {
  const Shape4 sx = x.shape(), sy = y.shape();
  if (sx.n != sy.n || sx.h != sy.h || sx.w != sy.w)
    throw std::invalid_argument("concat_channels: spatial/batch mismatch " + sx.str() + " vs " +
                                sy.str());
  Tensor<T> out(Shape4{sx.n, sx.h, sx.w, sx.c + sy.c});
  const std::int64_t pixels = std::int64_t(sx.n) * sx.h * sx.w;
  for (std::int64_t p = 0; p < pixels; ++p) {
    T* o = out.data() + p * (sx.c + sy.c);
    std::copy_n(x.data() + p * sx.c, sx.c, o);
    std::copy_n(y.data() + p * sy.c, sy.c, o + sx.c);
  }
  if (tape) {
    std::vector<int> in{tape->track(x), tape->track(y)};
    Tensor<T> xc = x, yc = y, oc = out;
    tape->record(std::move(in), out, [xc, yc, oc]() mutable {
      const Shape4 sx = xc.shape(), sy = yc.shape();
      const std::int64_t pixels = std::int64_t(sx.n) * sx.h * sx.w;
      const T* g = oc.grad();
      T* gx = xc.grad();
      T* gy = yc.grad();
      for (std::int64_t p = 0; p < pixels; ++p) {
        const T* gp = g + p * (sx.c + sy.c);
        for (int i = 0; i < sx.c; ++i) gx[p * sx.c + i] += gp[i];
        for (int i = 0; i < sy.c; ++i) gy[p * sy.c + i] += gp[sx.c + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& xs, const std::vector<T>& weights,
                       Tape<T>* tape) {
  if (xs.size() != weights.size())
    throw std::invalid_argument("weighted_sum: tensor/weight count mismatch");
  T acc = T(0);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!xs[i].is_scalar()) throw std::invalid_argument("weighted_sum: inputs must be scalar");
    acc += weights[i] * xs[i].data()[0];
  }
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (tape) {
    std::vector<int> in;
    for (const auto& t : xs) in.push_back(tape->track(t));
    std::vector<Tensor<T>> xc = xs;
    Tensor<T> oc = out;
    std::vector<T> wc = weights;
    tape->record(std::move(in), out, [xc, oc, wc]() mutable {
      const T g = oc.grad()[0];
      for (std::size_t i = 0; i < xc.size(); ++i) xc[i].grad()[0] += g * wc[i];
    });
  }
  return out;
}

#define PICA_INSTANTIATE_OPS(T)                                                       \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&, Tape<T>*);            \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&, Tape<T>*);            \
  template Tensor<T> scale<T>(const Tensor<T>&, T, Tape<T>*);                         \
  template Tensor<T> sum<T>(const Tensor<T>&, Tape<T>*);                              \
  template Tensor<T> relu<T>(const Tensor<T>&, Tape<T>*);                             \
  template Tensor<T> sigmoid<T>(const Tensor<T>&, Tape<T>*);                          \
  template Tensor<T> softmax_channels<T>(const Tensor<T>&, Tape<T>*);                 \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&, Tape<T>*); \
  template Tensor<T> weighted_sum<T>(const std::vector<Tensor<T>>&, const std::vector<T>&, \
                                     Tape<T>*);

PICA_INSTANTIATE_OPS(float)
PICA_INSTANTIATE_OPS(double)

}  // namespace pica
