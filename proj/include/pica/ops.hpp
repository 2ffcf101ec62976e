#pragma once

#include "pica/tensor.hpp"

namespace pica {

// Elementwise and structural operations over rank-4 tensors. Every op
// computes eagerly; passing a tape records the matching backward rule.

template <typename T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y, Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y, Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor, Tape<T>* tape = nullptr);

// sum over every element -> scalar tensor
template <typename T>
Tensor<T> sum(const Tensor<T>& x, Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> relu(const Tensor<T>& x, Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x, Tape<T>* tape = nullptr);

// Numerically stabilized softmax over the channel axis, independently per
// (n, y, x) location.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x, Tape<T>* tape = nullptr);

// Concatenate along channels; spatial/batch dims must match.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& x, const Tensor<T>& y, Tape<T>* tape = nullptr);

// sum_i weights[i] * xs[i] over scalar tensors -> scalar tensor
template <typename T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& xs, const std::vector<T>& weights,
                       Tape<T>* tape = nullptr);

}  // namespace pica
