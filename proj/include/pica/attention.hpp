#pragma once

#include "pica/nn.hpp"
#include "pica/ops.hpp"
#include "pica/renet.hpp"
#include "pica/tensor.hpp"

namespace pica {

enum class GridMode { global, local };
enum class AttentionKind { softmax, sigmoid_gate };

// The set of source pixels each pixel attends to. Weight index i maps
// row-major onto grid positions: i = r * grid_w + c. Global grids address
// absolute positions (r*d, c*d); local grids address offsets
// ((r - grid_h/2)*d, (c - grid_w/2)*d) around the referred pixel. Local taps
// that fall off the map contribute zero features.
struct ContextGrid {
  int grid_h = 0;
  int grid_w = 0;
  int dilation = 1;
  GridMode mode = GridMode::global;

  int weights() const { return grid_h * grid_w; }  // D
  int span_h() const { return (grid_h - 1) * dilation + 1; }
  int span_w() const { return (grid_w - 1) * dilation + 1; }

  static ContextGrid global(int grid_h, int grid_w, int dilation = 1);
  // Even-sized local grids are rejected; the center tap must be well defined.
  static ContextGrid local(int grid_h, int grid_w, int dilation = 1);

  void source(int i, int y, int x, int& sy, int& sx) const {
    const int r = i / grid_w, c = i % grid_w;
    if (mode == GridMode::global) {
      sy = r * dilation;
      sx = c * dilation;
    } else {
      sy = y + (r - grid_h / 2) * dilation;
      sx = x + (c - grid_w / 2) * dilation;
    }
  }

  // Global grids must fit inside the map; local grids may overhang.
  void validate_for(int feat_h, int feat_w) const;

  bool operator==(const ContextGrid&) const = default;
};

// Per-pixel weight vectors over the D context positions.
template <typename T>
struct AttentionField {
  Tensor<T> weights;  // (n, H, W, D)
  ContextGrid grid;
  AttentionKind kind = AttentionKind::softmax;
};

// Attention-weight generator. The global flavour runs a ReNet stage so every
// pixel sees the whole map before projecting to D logits; the local flavour
// uses one spatial conv whose receptive field covers the grid span.
template <typename T>
struct AttentionHead {
  ContextGrid grid;
  AttentionKind kind = AttentionKind::softmax;
  bool global = false;
  RenetParams<T> renet_stage;  // global heads
  ConvKernel<T> spatial;       // local heads
  ConvKernel<T> project;       // 1x1 conv to D logits

  static AttentionHead make_global(int in_channels, int renet_hidden, ContextGrid grid);
  static AttentionHead make_local(int in_channels, int head_channels, ContextGrid grid,
                                  AttentionKind kind);
  void init(Rng& rng);
};

template <typename T>
AttentionField<T> attention_head(const Tensor<T>& f, const AttentionHead<T>& head,
                                 Tape<T>* tape = nullptr);

// Weighted-average pooling of attended features: one operator covers both the
// global and the local variant via the grid mode.
template <typename T>
Tensor<T> attend_pool(const Tensor<T>& f, const AttentionField<T>& att, Tape<T>* tape = nullptr);

// Gated convolution: per pixel sum_i g_i * f_i * W_i + b. The gate grid must
// match the kernel geometry; output keeps the input's spatial size.
template <typename T>
Tensor<T> attend_conv(const Tensor<T>& f, const AttentionField<T>& gates, const ConvKernel<T>& k,
                      Tape<T>* tape = nullptr);

}  // namespace pica
