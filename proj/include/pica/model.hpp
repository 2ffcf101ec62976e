#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "pica/attention.hpp"
#include "pica/nn.hpp"
#include "pica/renet.hpp"

namespace pica {

// What sits in a decoding module. gap/lap/ac are the attentive kinds; the
// rest are the vanilla comparison variants (plain ReNet context, large-kernel
// conv, average/max pooling over the same context extents).
enum class ModuleKind { none, gap, lap, ac, renet_ctx, large_conv, ave_pool, max_pool };

std::string module_kind_name(ModuleKind k);

struct ModelConfig {
  int input_size = 64;                               // square, divisible by 8
  std::vector<int> channels = {16, 32, 64, 64, 64};  // encoder blocks 1..5
  int fc_channels = 128;                             // fc6/fc7 width (En6)
  int fc_dilation = 3;                               // fc6 3x3 dilation
  std::array<ModuleKind, 6> modules{};               // [0] = D1 ... [5] = D6
  int renet_hidden = 256;                            // global head recurrent width
  int head_channels = 128;                           // local head intermediate width
  int local_grid = 7;
  int local_dilation = 2;
  bool attention_supervision = true;  // whether the D6 GAP attention loss applies
  std::string preset;

  // Every named ablation configuration constructs through here.
  static ModelConfig preset_named(const std::string& name, int input_size = 64);
  static std::vector<std::string> preset_names();

  int block_channels(int i) const {  // C^i for i = 1..6
    return i == 6 ? fc_channels : channels[std::size_t(i - 1)];
  }
  int stride_of(int i) const { return i <= 3 ? (1 << (i - 1)) : 8; }

  // Global grid for a square map: the 10x10/d=3 pairing when the 28-extent
  // map fits it exactly, otherwise the full-resolution grid.
  ContextGrid gap_grid_for(int extent) const {
    if ((10 - 1) * 3 + 1 == extent) return ContextGrid::global(10, 10, 3);
    return ContextGrid::global(extent, extent, 1);
  }
  ContextGrid local_grid_for() const {
    return ContextGrid::local(local_grid, local_grid, local_dilation);
  }

  void validate() const;
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool encoder_group = false;
};

template <typename T>
struct NamedBuffer {
  std::string name;
  std::vector<T>* data = nullptr;
};

template <typename T>
struct EncoderParams {
  std::vector<std::vector<ConvKernel<T>>> blocks;  // conv stacks per block
  ConvKernel<T> fc6;
  ConvKernel<T> fc7;
};

template <typename T>
struct DecoderModule {
  ModuleKind kind = ModuleKind::none;
  int index = 0;  // 1..6
  BatchNormParams<T> bn_en;
  ConvKernel<T> fuse;  // 1x1 -> C^i
  AttentionHead<T> head;
  ConvKernel<T> ac_kernel;
  ConvKernel<T> refuse;  // 1x1 -> C^{i-1}
  RenetParams<T> renet_ctx;
  ConvKernel<T> renet_proj;
  ConvKernel<T> lc_kernel;
  BatchNormParams<T> bn_out;
  ConvKernel<T> side;  // 1x1 -> 1
};

template <typename T>
struct ForwardResult {
  std::array<Tensor<T>, 6> saliency;  // [0] = S^1 ... [5] = S^6
  std::optional<AttentionField<T>> gap_d6;
  // (module index, field) for every attentive module, for inspection dumps
  std::vector<std::pair<int, AttentionField<T>>> attention;
};

template <typename T>
class SaliencyModel {
 public:
  static SaliencyModel make(const ModelConfig& cfg, Rng& rng);

  // En^1..En^6, each taken before the activation of its block's last conv.
  std::array<Tensor<T>, 6> encode(const Tensor<T>& image, Tape<T>* tape = nullptr);

  // One decoding module; dec_next is absent for D6.
  std::pair<Tensor<T>, Tensor<T>> decode_step(int i, const Tensor<T>& en,
                                              const Tensor<T>& dec_next, BNMode bn, Tape<T>* tape,
                                              std::optional<AttentionField<T>>* att_out = nullptr);

  ForwardResult<T> forward(const Tensor<T>& image, BNMode bn, Tape<T>* tape = nullptr);

  std::vector<NamedParam<T>> params();
  std::vector<NamedBuffer<T>> buffers();
  std::int64_t param_count();

  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  EncoderParams<T> enc_;
  std::array<DecoderModule<T>, 6> dec_;  // [0] = D1 ... [5] = D6
};

}  // namespace pica
