#include "pica/reference.hpp"

namespace pica::reference {

template <typename T>
Tensor<T> conv2d_naive(const Tensor<T>& x, const ConvKernel<T>& k) {
  const Shape4 s = x.shape();
  if (s.c != k.cin()) throw std::invalid_argument("conv2d_naive: channel mismatch");
  const int span_h = k.eff_rf_h(), span_w = k.eff_rf_w();
  const int out_h = (s.h + k.pad.top + k.pad.bottom - span_h) / k.stride + 1;
  const int out_w = (s.w + k.pad.left + k.pad.right - span_w) / k.stride + 1;
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("conv2d_naive: non-positive output");
  Tensor<T> out(Shape4{s.n, out_h, out_w, k.cout()});
  for (int n = 0; n < s.n; ++n)
    for (int oy = 0; oy < out_h; ++oy)
      for (int ox = 0; ox < out_w; ++ox)
        for (int co = 0; co < k.cout(); ++co) {
          T acc = k.bias.at(0, 0, 0, co);
          for (int ky = 0; ky < k.kh(); ++ky)
            for (int kx = 0; kx < k.kw(); ++kx) {
              const int iy = oy * k.stride - k.pad.top + ky * k.dilation;
              const int ix = ox * k.stride - k.pad.left + kx * k.dilation;
              if (iy < 0 || iy >= s.h || ix < 0 || ix >= s.w) continue;
              for (int ci = 0; ci < s.c; ++ci)
                acc += x.at(n, iy, ix, ci) * k.weight.at(ky, kx, ci, co);
            }
          out.at(n, oy, ox, co) = acc;
        }
  return out;
}

template <typename T>
Tensor<T> attend_pool_naive(const Tensor<T>& f, const Tensor<T>& att, const ContextGrid& grid) {
  const Shape4 fs = f.shape();
  const int D = grid.weights();
  if (att.shape().n != fs.n || att.shape().h != fs.h || att.shape().w != fs.w ||
      att.shape().c != D)
    throw std::invalid_argument("attend_pool_naive: shape mismatch");
  Tensor<T> out(fs);
  for (int n = 0; n < fs.n; ++n)
    for (int y = 0; y < fs.h; ++y)
      for (int x = 0; x < fs.w; ++x)
        for (int c = 0; c < fs.c; ++c) {
          T acc = T(0);
          for (int i = 0; i < D; ++i) {
            int sy, sx;
            grid.source(i, y, x, sy, sx);
            if (sy < 0 || sy >= fs.h || sx < 0 || sx >= fs.w) continue;
            acc += att.at(n, y, x, i) * f.at(n, sy, sx, c);
          }
          out.at(n, y, x, c) = acc;
        }
  return out;
}

template <typename T>
Tensor<T> attend_conv_naive(const Tensor<T>& f, const Tensor<T>& gates, const ContextGrid& grid,
                            const ConvKernel<T>& k) {
  const Shape4 fs = f.shape();
  const int D = grid.weights();
  Tensor<T> out(Shape4{fs.n, fs.h, fs.w, k.cout()});
  for (int n = 0; n < fs.n; ++n)
    for (int y = 0; y < fs.h; ++y)
      for (int x = 0; x < fs.w; ++x)
        for (int co = 0; co < k.cout(); ++co) {
          T acc = k.bias.at(0, 0, 0, co);
          for (int i = 0; i < D; ++i) {
            int sy, sx;
            grid.source(i, y, x, sy, sx);
            if (sy < 0 || sy >= fs.h || sx < 0 || sx >= fs.w) continue;
            const int ky = i / grid.grid_w, kx = i % grid.grid_w;
            for (int ci = 0; ci < fs.c; ++ci)
              acc += gates.at(n, y, x, i) * f.at(n, sy, sx, ci) * k.weight.at(ky, kx, ci, co);
          }
          out.at(n, y, x, co) = acc;
        }
  return out;
}

#define PICA_INSTANTIATE_REF(T)                                                            \
  template Tensor<T> conv2d_naive<T>(const Tensor<T>&, const ConvKernel<T>&);              \
  template Tensor<T> attend_pool_naive<T>(const Tensor<T>&, const Tensor<T>&,              \
                                          const ContextGrid&);                             \
  template Tensor<T> attend_conv_naive<T>(const Tensor<T>&, const Tensor<T>&,              \
                                          const ContextGrid&, const ConvKernel<T>&);

PICA_INSTANTIATE_REF(float)
PICA_INSTANTIATE_REF(double)

}  // namespace pica::reference
