#pragma once

#include "pica/attention.hpp"
#include "pica/nn.hpp"
#include "pica/tensor.hpp"

namespace pica::reference {

// Literal per-pixel translations of the defining operations. They share no
// code with the optimized paths; tests pin the fast implementations against
// them and `bench` uses them as the timing baseline.

template <typename T>
Tensor<T> conv2d_naive(const Tensor<T>& x, const ConvKernel<T>& k);

// Per-pixel gather-and-sum: out(p) = sum_i att(p, i) * f(source(p, i)),
// zero feature for out-of-bounds taps.
template <typename T>
Tensor<T> attend_pool_naive(const Tensor<T>& f, const Tensor<T>& att, const ContextGrid& grid);

// Per-pixel decomposed gated convolution:
// out(p) = sum_i g(p, i) * f(source(p, i)) * W_i + b.
template <typename T>
Tensor<T> attend_conv_naive(const Tensor<T>& f, const Tensor<T>& gates, const ContextGrid& grid,
                            const ConvKernel<T>& k);

}  // namespace pica::reference
