#pragma once

#include "pica/rng.hpp"
#include "pica/tensor.hpp"

namespace pica {

struct Pad4 {
  int top = 0, bottom = 0, left = 0, right = 0;
  static Pad4 same(int kernel, int dilation = 1) {
    const int span = (kernel - 1) * dilation;
    return Pad4{span / 2, span - span / 2, span / 2, span - span / 2};
  }
};

// 2-D convolution weights. Weight layout (k_h, k_w, c_in, c_out) maps onto
// Shape4 fields (n, h, w, c) in that order; bias is (1, 1, 1, c_out).
template <typename T>
struct ConvKernel {
  Tensor<T> weight;
  Tensor<T> bias;
  int stride = 1;
  int dilation = 1;
  Pad4 pad;

  int kh() const { return weight.shape().n; }
  int kw() const { return weight.shape().h; }
  int cin() const { return weight.shape().w; }
  int cout() const { return weight.shape().c; }
  int eff_rf_h() const { return (kh() - 1) * dilation + 1; }
  int eff_rf_w() const { return (kw() - 1) * dilation + 1; }

  static ConvKernel make(int kh, int kw, int cin, int cout, int stride = 1, int dilation = 1,
                         Pad4 pad = {});
};

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvKernel<T>& k, Tape<T>* tape = nullptr);

// Bilinear interpolation with align-corners mapping src = dst*(in-1)/(out-1).
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int out_h, int out_w, Tape<T>* tape = nullptr);

enum class BNMode { train, eval };

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;  // (1,1,1,C)
  Tensor<T> beta;   // (1,1,1,C)
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);  // running = (1-momentum)*running + momentum*batch

  static BatchNormParams make(int channels);
  int channels() const { return gamma.shape().c; }
};

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormParams<T>& p, BNMode mode,
                     Tape<T>* tape = nullptr);

// Max over in-bounds taps only; padded positions never win.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int kernel, int stride, Pad4 pad = {},
                     Tape<T>* tape = nullptr);

// Sum over the window divided by kernel*kernel; out-of-bounds taps contribute
// zero, matching the zero-padding convention used everywhere else.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int kernel, int stride, Pad4 pad = {},
                     Tape<T>* tape = nullptr);

// Fan-in scaled uniform weights, zero bias.
template <typename T>
void init_conv(ConvKernel<T>& k, Rng& rng);

// Orthonormal rows (rows <= cols) via Gram-Schmidt on a normal random matrix.
template <typename T>
std::vector<T> orthogonal_matrix(int rows, int cols, Rng& rng);

}  // namespace pica
