#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pica/attention.hpp"
#include "pica/gradcheck.hpp"
#include "pica/reference.hpp"
#include "test_util.hpp"

using namespace pica;
using testutil::max_abs_diff;
using testutil::rand_tensor;

namespace {

template <typename T>
AttentionField<T> field_from(Tensor<T> w, ContextGrid grid, AttentionKind kind) {
  AttentionField<T> f;
  f.weights = std::move(w);
  f.grid = grid;
  f.kind = kind;
  return f;
}

template <typename T>
Tensor<T> softmax_rand_field(Shape4 s, Rng& rng) {
  return softmax_channels(rand_tensor<T>(s, rng, -2.0, 2.0));
}

}  // namespace

TEST_CASE("context grid geometry") {
  ContextGrid g = ContextGrid::global(10, 10, 3);
  CHECK(g.weights() == 100);
  CHECK(g.span_h() == 28);
  g.validate_for(28, 28);
  CHECK_THROWS_AS(g.validate_for(27, 28), std::invalid_argument);

  ContextGrid l = ContextGrid::local(7, 7, 2);
  CHECK(l.span_h() == 13);
  CHECK_THROWS_AS(ContextGrid::local(4, 4, 1), std::invalid_argument);

  // row-major weight index mapping
  int sy, sx;
  g.source(13, 5, 5, sy, sx);  // r=1, c=3
  CHECK(sy == 3);
  CHECK(sx == 9);
  l.source(0, 6, 6, sy, sx);  // top-left offset (-3*2, -3*2)
  CHECK(sy == 0);
  CHECK(sx == 0);
}

TEST_CASE("attention head with zero projection gives uniform or half weights") {
  Rng rng(1);
  Tensor64 f = rand_tensor<double>(Shape4{1, 8, 8, 3}, rng);
  SUBCASE("softmax kind, local 7x7") {
    auto head = AttentionHead<double>::make_local(3, 16, ContextGrid::local(7, 7, 2),
                                                  AttentionKind::softmax);
    head.init(rng);
    for (std::int64_t i = 0; i < head.project.weight.numel(); ++i)
      head.project.weight.data()[i] = 0.0;
    AttentionField<double> att = attention_head(f, head);
    CHECK(att.weights.shape().c == 49);
    for (std::int64_t i = 0; i < att.weights.numel(); ++i)
      CHECK(att.weights.data()[i] == doctest::Approx(1.0 / 49).epsilon(1e-9));
  }
  SUBCASE("sigmoid kind") {
    auto head = AttentionHead<double>::make_local(3, 16, ContextGrid::local(7, 7, 2),
                                                  AttentionKind::sigmoid_gate);
    head.init(rng);
    for (std::int64_t i = 0; i < head.project.weight.numel(); ++i)
      head.project.weight.data()[i] = 0.0;
    AttentionField<double> att = attention_head(f, head);
    for (std::int64_t i = 0; i < att.weights.numel(); ++i)
      CHECK(att.weights.data()[i] == doctest::Approx(0.5).epsilon(1e-12));
  }
}

TEST_CASE("global attention head weights sum to one per pixel") {
  Rng rng(2);
  Tensor64 f = rand_tensor<double>(Shape4{2, 8, 8, 4}, rng);
  auto head =
      AttentionHead<double>::make_global(4, 6, ContextGrid::global(8, 8, 1));
  head.init(rng);
  AttentionField<double> att = attention_head(f, head);
  const Shape4 s = att.weights.shape();
  CHECK(s.c == 64);
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        double acc = 0;
        for (int i = 0; i < s.c; ++i) acc += att.weights.at(n, y, x, i);
        CHECK(std::abs(acc - 1.0) < 1e-6);
      }
}

TEST_CASE("attention head rejects D mismatch") {
  Rng rng(3);
  Tensor64 f = rand_tensor<double>(Shape4{1, 6, 6, 3}, rng);
  auto head = AttentionHead<double>::make_local(3, 8, ContextGrid::local(3, 3, 1),
                                                AttentionKind::softmax);
  head.init(rng);
  head.grid = ContextGrid::local(5, 5, 1);  // project still emits 9 channels
  CHECK_THROWS_AS(attention_head(f, head), std::invalid_argument);
}

TEST_CASE("attend_pool one-hot attention is a pure gather") {
  Rng rng(4);
  Tensor64 f = rand_tensor<double>(Shape4{1, 4, 4, 3}, rng);
  ContextGrid grid = ContextGrid::global(4, 4, 1);
  const int pick = 6;  // r=1, c=2 -> source pixel (1, 2)
  Tensor64 w(Shape4{1, 4, 4, 16}, 0.0);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) w.at(0, y, x, pick) = 1.0;
  Tensor64 out = attend_pool(f, field_from(w, grid, AttentionKind::softmax));
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c)
        CHECK(out.at(0, y, x, c) == doctest::Approx(f.at(0, 1, 2, c)).epsilon(1e-12));
}

TEST_CASE("attend_pool uniform global attention equals spatial mean pooling") {
  Rng rng(5);
  Tensor64 f = rand_tensor<double>(Shape4{2, 5, 5, 3}, rng);
  ContextGrid grid = ContextGrid::global(5, 5, 1);
  Tensor64 w(Shape4{2, 5, 5, 25}, 1.0 / 25);
  Tensor64 out = attend_pool(f, field_from(w, grid, AttentionKind::softmax));
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      double mean = 0;
      for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) mean += f.at(n, y, x, c);
      mean /= 25.0;
      for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x)
          CHECK(std::abs(out.at(n, y, x, c) - mean) < 1e-10);
    }
}

TEST_CASE("attend_pool matches the naive per-pixel loop") {
  Rng rng(6);
  SUBCASE("spec instance: local 3x3 d=2 on (1,6,6,3)") {
    Tensor64 f = rand_tensor<double>(Shape4{1, 6, 6, 3}, rng);
    ContextGrid grid = ContextGrid::local(3, 3, 2);
    Tensor64 w = softmax_rand_field<double>(Shape4{1, 6, 6, 9}, rng);
    Tensor64 got = attend_pool(f, field_from(w, grid, AttentionKind::softmax));
    Tensor64 ref = reference::attend_pool_naive(f, w, grid);
    CHECK(max_abs_diff(got, ref) < 1e-10);
  }
  SUBCASE("sweep grids, dilations, sizes, channels, both modes") {
    for (int g : {3, 5}) {
      for (int d : {1, 2, 3}) {
        for (int size : {7, 13}) {
          for (int c : {1, 4}) {
            const ContextGrid local = ContextGrid::local(g, g, d);
            Tensor64 f = rand_tensor<double>(Shape4{2, size, size, c}, rng);
            Tensor64 w = softmax_rand_field<double>(Shape4{2, size, size, g * g}, rng);
            Tensor64 got = attend_pool(f, field_from(w, local, AttentionKind::softmax));
            Tensor64 ref = reference::attend_pool_naive(f, w, local);
            REQUIRE(max_abs_diff(got, ref) < 1e-10);
            if ((g - 1) * d + 1 <= size) {
              const ContextGrid global = ContextGrid::global(g, g, d);
              Tensor64 got2 = attend_pool(f, field_from(w, global, AttentionKind::softmax));
              Tensor64 ref2 = reference::attend_pool_naive(f, w, global);
              REQUIRE(max_abs_diff(got2, ref2) < 1e-10);
            }
          }
        }
      }
    }
  }
}

TEST_CASE("attend_pool dilation equivalence with pre-gathered input") {
  Rng rng(7);
  const int size = 13;
  for (int g : {3, 5}) {
    for (int d : {1, 2, 3}) {
      for (GridMode mode : {GridMode::global, GridMode::local}) {
        if (mode == GridMode::global && (g - 1) * d + 1 > size) continue;
        const ContextGrid dilated{g, g, d, mode};
        const ContextGrid unit{g, g, 1, mode};
        Tensor64 f = rand_tensor<double>(Shape4{1, size, size, 2}, rng);
        Tensor64 w = softmax_rand_field<double>(Shape4{1, size, size, g * g}, rng);
        Tensor64 full = attend_pool(f, field_from(w, dilated, AttentionKind::softmax));

        // pre-gather the stride-d lattice
        const int m = (size - 1) / d + 1;
        Tensor64 fsub(Shape4{1, m, m, 2});
        Tensor64 wsub(Shape4{1, m, m, g * g});
        for (int y = 0; y < m; ++y)
          for (int x = 0; x < m; ++x) {
            for (int c = 0; c < 2; ++c) fsub.at(0, y, x, c) = f.at(0, y * d, x * d, c);
            for (int i = 0; i < g * g; ++i) wsub.at(0, y, x, i) = w.at(0, y * d, x * d, i);
          }
        Tensor64 sub = attend_pool(fsub, field_from(wsub, unit, AttentionKind::softmax));
        for (int y = 0; y < m; ++y)
          for (int x = 0; x < m; ++x)
            for (int c = 0; c < 2; ++c)
              REQUIRE(std::abs(sub.at(0, y, x, c) - full.at(0, y * d, x * d, c)) < 1e-12);
      }
    }
  }
}

TEST_CASE("attend_pool error paths") {
  Rng rng(8);
  Tensor64 f = rand_tensor<double>(Shape4{1, 4, 4, 2}, rng);
  Tensor64 w = softmax_rand_field<double>(Shape4{1, 4, 4, 9}, rng);
  CHECK_THROWS_AS(
      attend_pool(f, field_from(w, ContextGrid::local(3, 3, 1), AttentionKind::sigmoid_gate)),
      std::invalid_argument);
  CHECK_THROWS_AS(
      attend_pool(f, field_from(w, ContextGrid::local(5, 5, 1), AttentionKind::softmax)),
      std::invalid_argument);
  CHECK_THROWS_AS(
      attend_pool(f, field_from(w, ContextGrid::global(5, 5, 1), AttentionKind::softmax)),
      std::invalid_argument);
  Tensor64 small = rand_tensor<double>(Shape4{1, 3, 3, 2}, rng);
  CHECK_THROWS_AS(
      attend_pool(small, field_from(w, ContextGrid::local(3, 3, 1), AttentionKind::softmax)),
      std::invalid_argument);
}

TEST_CASE("attend_pool gradients through feature and attention paths") {
  for (GridMode mode : {GridMode::global, GridMode::local}) {
    Rng rng(mode == GridMode::global ? 9 : 10);
    const ContextGrid grid{3, 3, 1, mode};
    auto op = [grid](const std::vector<Tensor64>& in, Tape<double>* tape) {
      AttentionField<double> att;
      att.weights = softmax_channels(in[1], tape);
      att.grid = grid;
      att.kind = AttentionKind::softmax;
      return attend_pool(in[0], att, tape);
    };
    std::vector<Tensor64> inputs{rand_tensor<double>(Shape4{1, 4, 4, 2}, rng),
                                 rand_tensor<double>(Shape4{1, 4, 4, 9}, rng)};
    CHECK(fd_check<double>(op, inputs, 1e-5) < 1e-6);
  }
}

TEST_CASE("attend_conv with unit gates equals conv2d") {
  Rng rng(11);
  Tensor64 f = rand_tensor<double>(Shape4{2, 6, 6, 3}, rng);
  const ContextGrid grid = ContextGrid::local(3, 3, 2);
  auto k = ConvKernel<double>::make(3, 3, 3, 4, 1, 2, Pad4::same(3, 2));
  init_conv(k, rng);
  for (std::int64_t i = 0; i < k.bias.numel(); ++i) k.bias.data()[i] = rng.uniform(-1, 1);
  Tensor64 ones(Shape4{2, 6, 6, 9}, 1.0);
  Tensor64 got = attend_conv(f, field_from(ones, grid, AttentionKind::sigmoid_gate), k);
  Tensor64 want = conv2d(f, k);
  CHECK(max_abs_diff(got, want) < 1e-10);
}

TEST_CASE("attend_conv with zero gates returns the bias") {
  Rng rng(12);
  Tensor64 f = rand_tensor<double>(Shape4{1, 5, 5, 2}, rng);
  const ContextGrid grid = ContextGrid::local(3, 3, 1);
  auto k = ConvKernel<double>::make(3, 3, 2, 3, 1, 1, Pad4::same(3));
  init_conv(k, rng);
  k.bias.data()[0] = 0.3;
  k.bias.data()[1] = -0.8;
  k.bias.data()[2] = 1.7;
  Tensor64 zeros(Shape4{1, 5, 5, 9}, 0.0);
  Tensor64 got = attend_conv(f, field_from(zeros, grid, AttentionKind::sigmoid_gate), k);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x)
      for (int c = 0; c < 3; ++c)
        CHECK(got.at(0, y, x, c) == doctest::Approx(k.bias.data()[c]).epsilon(1e-12));
}

TEST_CASE("attend_conv matches the naive decomposed sum") {
  Rng rng(13);
  SUBCASE("spec instance: (1,5,5,2), 3x3 d=1") {
    Tensor64 f = rand_tensor<double>(Shape4{1, 5, 5, 2}, rng);
    const ContextGrid grid = ContextGrid::local(3, 3, 1);
    auto k = ConvKernel<double>::make(3, 3, 2, 3, 1, 1, Pad4::same(3));
    init_conv(k, rng);
    Tensor64 gates = sigmoid(rand_tensor<double>(Shape4{1, 5, 5, 9}, rng, -2.0, 2.0));
    Tensor64 got = attend_conv(f, field_from(gates, grid, AttentionKind::sigmoid_gate), k);
    Tensor64 ref = reference::attend_conv_naive(f, gates, grid, k);
    CHECK(max_abs_diff(got, ref) < 1e-10);
  }
  SUBCASE("sweep") {
    for (int g : {3, 5, 7}) {
      for (int d : {1, 2, 3}) {
        for (int size : {8, 13}) {
          const ContextGrid grid = ContextGrid::local(g, g, d);
          auto k = ConvKernel<double>::make(g, g, 2, 3, 1, d, Pad4::same(g, d));
          init_conv(k, rng);
          Tensor64 f = rand_tensor<double>(Shape4{1, size, size, 2}, rng);
          Tensor64 gates = sigmoid(rand_tensor<double>(Shape4{1, size, size, g * g}, rng));
          Tensor64 got = attend_conv(f, field_from(gates, grid, AttentionKind::sigmoid_gate), k);
          Tensor64 ref = reference::attend_conv_naive(f, gates, grid, k);
          REQUIRE(max_abs_diff(got, ref) < 1e-10);
        }
      }
    }
  }
}

TEST_CASE("attend_conv error paths") {
  Rng rng(14);
  Tensor64 f = rand_tensor<double>(Shape4{1, 5, 5, 2}, rng);
  Tensor64 gates(Shape4{1, 5, 5, 9}, 0.5);
  auto k = ConvKernel<double>::make(3, 3, 2, 3, 1, 1, Pad4::same(3));
  init_conv(k, rng);
  // kind mismatch
  CHECK_THROWS_AS(
      attend_conv(f, field_from(gates, ContextGrid::local(3, 3, 1), AttentionKind::softmax), k),
      std::invalid_argument);
  // grid/kernel dilation mismatch
  CHECK_THROWS_AS(
      attend_conv(f, field_from(gates, ContextGrid::local(3, 3, 2), AttentionKind::sigmoid_gate), k),
      std::invalid_argument);
  // channel mismatch
  auto k2 = ConvKernel<double>::make(3, 3, 4, 3, 1, 1, Pad4::same(3));
  CHECK_THROWS_AS(
      attend_conv(f, field_from(gates, ContextGrid::local(3, 3, 1), AttentionKind::sigmoid_gate), k2),
      std::invalid_argument);
}

TEST_CASE("attend_conv gradients through every path") {
  Rng rng(15);
  const ContextGrid grid = ContextGrid::local(3, 3, 1);
  auto op = [grid](const std::vector<Tensor64>& in, Tape<double>* tape) {
    AttentionField<double> gates;
    gates.weights = sigmoid(in[1], tape);
    gates.grid = grid;
    gates.kind = AttentionKind::sigmoid_gate;
    ConvKernel<double> k;
    k.weight = in[2];
    k.bias = in[3];
    k.dilation = 1;
    k.pad = Pad4::same(3);
    return attend_conv(in[0], gates, k, tape);
  };
  std::vector<Tensor64> inputs{rand_tensor<double>(Shape4{1, 4, 4, 2}, rng),
                               rand_tensor<double>(Shape4{1, 4, 4, 9}, rng),
                               rand_tensor<double>(Shape4{3, 3, 2, 2}, rng),
                               rand_tensor<double>(Shape4{1, 1, 1, 2}, rng)};
  CHECK(fd_check<double>(op, inputs, 1e-5) < 1e-6);
}

TEST_CASE("attention head gradient (softmax via probe, sigmoid direct)") {
  Rng rng(16);
  auto head = std::make_shared<AttentionHead<double>>(AttentionHead<double>::make_local(
      2, 4, ContextGrid::local(3, 3, 1), AttentionKind::softmax));
  head->init(rng);
  Tensor64 probe = rand_tensor<double>(Shape4{1, 4, 4, 9}, rng);
  auto op = [head, probe](const std::vector<Tensor64>& in, Tape<double>* tape) {
    AttentionHead<double> h = *head;
    h.spatial.weight = in[1];
    h.project.weight = in[2];
    AttentionField<double> att = attention_head(in[0], h, tape);
    return mul(att.weights, probe, tape);  // softmax sums are constant per pixel
  };
  std::vector<Tensor64> inputs{rand_tensor<double>(Shape4{1, 4, 4, 2}, rng),
                               rand_tensor<double>(Shape4{3, 3, 2, 4}, rng),
                               rand_tensor<double>(Shape4{1, 1, 4, 9}, rng)};
  CHECK(fd_check<double>(op, inputs, 1e-5) < 1e-6);

  auto ghead = std::make_shared<AttentionHead<double>>(
      AttentionHead<double>::make_global(2, 3, ContextGrid::global(4, 4, 1)));
  ghead->init(rng);
  Tensor64 probe2 = rand_tensor<double>(Shape4{1, 4, 4, 16}, rng);
  auto gop = [ghead, probe2](const std::vector<Tensor64>& in, Tape<double>* tape) {
    AttentionHead<double> h = *ghead;
    h.project.weight = in[1];
    AttentionField<double> att = attention_head(in[0], h, tape);
    return mul(att.weights, probe2, tape);
  };
  std::vector<Tensor64> ginputs{rand_tensor<double>(Shape4{1, 4, 4, 2}, rng),
                                rand_tensor<double>(Shape4{1, 1, 6, 16}, rng)};
  // the renet stage stacks enough arithmetic that 1e-5 steps sit below the
  // roundoff floor; 1e-4 is in the flat region of the error curve
  CHECK(fd_check<double>(gop, ginputs, 1e-4) < 1e-6);
}

TEST_CASE("batch permutation consistency") {
  Rng rng(17);
  const int B = 3;
  Tensor64 f = rand_tensor<double>(Shape4{B, 5, 5, 2}, rng);
  Tensor64 w = softmax_rand_field<double>(Shape4{B, 5, 5, 9}, rng);
  const ContextGrid grid = ContextGrid::local(3, 3, 2);
  auto k = ConvKernel<double>::make(3, 3, 2, 2, 1, 2, Pad4::same(3, 2));
  init_conv(k, rng);
  Tensor64 gates = sigmoid(rand_tensor<double>(Shape4{B, 5, 5, 9}, rng));

  const int perm[B] = {2, 0, 1};
  auto permute = [&](const Tensor64& t) {
    Tensor64 out(t.shape());
    const std::int64_t per = t.numel() / B;
    for (int b = 0; b < B; ++b)
      std::copy_n(t.data() + perm[b] * per, per, out.data() + b * per);
    return out;
  };

  Tensor64 pooled = attend_pool(f, field_from(w, grid, AttentionKind::softmax));
  Tensor64 pooled_perm =
      attend_pool(permute(f), field_from(permute(w), grid, AttentionKind::softmax));
  CHECK(max_abs_diff(permute(pooled), pooled_perm) == 0.0);

  Tensor64 conv = attend_conv(f, field_from(gates, grid, AttentionKind::sigmoid_gate), k);
  Tensor64 conv_perm =
      attend_conv(permute(f), field_from(permute(gates), grid, AttentionKind::sigmoid_gate), k);
  CHECK(max_abs_diff(permute(conv), conv_perm) == 0.0);
}
