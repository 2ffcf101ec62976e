#pragma once

#include "pica/nn.hpp"
#include "pica/tensor.hpp"

namespace pica {

// Standard LSTM cell (input/forget/candidate/output gating, packed in that
// order along the 4*hidden axis).
template <typename T>
struct LstmCell {
  Tensor<T> w_ih;  // (1, 1, input_size, 4*hidden)
  Tensor<T> w_hh;  // (1, 1, hidden, 4*hidden)
  Tensor<T> bias;  // (1, 1, 1, 4*hidden)
  int input_size = 0;
  int hidden = 0;

  static LstmCell make(int input_size, int hidden);
  // Fan-in scaled uniform input weights, per-gate orthogonal hidden weights,
  // zero bias except the forget gate (1).
  void init(Rng& rng);
};

// Horizontal then vertical bidirectional LSTM scans; every output pixel is a
// function of every input pixel. Output channels: 2*hidden.
template <typename T>
struct RenetParams {
  LstmCell<T> row_fwd;  // left -> right
  LstmCell<T> row_bwd;  // right -> left
  LstmCell<T> col_fwd;  // bottom -> top
  LstmCell<T> col_bwd;  // top -> bottom
  int hidden = 0;

  static RenetParams make(int input_channels, int hidden);
  void init(Rng& rng);
};

template <typename T>
Tensor<T> renet(const Tensor<T>& x, const RenetParams<T>& p, Tape<T>* tape = nullptr);

}  // namespace pica
