#include "pica/attention.hpp"

#include <memory>

#include "pica/gemm.hpp"

namespace pica {

ContextGrid ContextGrid::global(int grid_h, int grid_w, int dilation) {
  if (grid_h < 1 || grid_w < 1 || dilation < 1)
    throw std::invalid_argument("ContextGrid: bad geometry");
  return ContextGrid{grid_h, grid_w, dilation, GridMode::global};
}

ContextGrid ContextGrid::local(int grid_h, int grid_w, int dilation) {
  if (grid_h < 1 || grid_w < 1 || dilation < 1)
    throw std::invalid_argument("ContextGrid: bad geometry");
  if (grid_h % 2 == 0 || grid_w % 2 == 0)
    throw std::invalid_argument("ContextGrid: local grids must be odd-sized");
  return ContextGrid{grid_h, grid_w, dilation, GridMode::local};
}

void ContextGrid::validate_for(int feat_h, int feat_w) const {
  if (mode == GridMode::global) {
    if (span_h() > feat_h || span_w() > feat_w)
      throw std::invalid_argument("ContextGrid: global span " + std::to_string(span_h()) + "x" +
                                  std::to_string(span_w()) + " exceeds feature map " +
                                  std::to_string(feat_h) + "x" + std::to_string(feat_w));
  }
}

template <typename T>
AttentionHead<T> AttentionHead<T>::make_global(int in_channels, int renet_hidden,
                                               ContextGrid grid) {
  if (grid.mode != GridMode::global)
    throw std::invalid_argument("AttentionHead: global head needs a global grid");
  AttentionHead<T> h;
  h.grid = grid;
  h.kind = AttentionKind::softmax;
  h.global = true;
  h.renet_stage = RenetParams<T>::make(in_channels, renet_hidden);
  h.project = ConvKernel<T>::make(1, 1, 2 * renet_hidden, grid.weights());
  return h;
}

template <typename T>
AttentionHead<T> AttentionHead<T>::make_local(int in_channels, int head_channels,
                                              ContextGrid grid, AttentionKind kind) {
  if (grid.mode != GridMode::local)
    throw std::invalid_argument("AttentionHead: local head needs a local grid");
  AttentionHead<T> h;
  h.grid = grid;
  h.kind = kind;
  h.global = false;
  // One spatial conv with the grid's own geometry, so its receptive field
  // equals the attended span.
  h.spatial = ConvKernel<T>::make(grid.grid_h, grid.grid_w, in_channels, head_channels, 1,
                                  grid.dilation, Pad4::same(grid.grid_h, grid.dilation));
  h.project = ConvKernel<T>::make(1, 1, head_channels, grid.weights());
  const int rf = (h.spatial.kh() - 1) * h.spatial.dilation + 1;
  if (rf < grid.span_h() || rf < grid.span_w())
    throw std::invalid_argument("AttentionHead: receptive field below grid span");
  return h;
}

template <typename T>
void AttentionHead<T>::init(Rng& rng) {
  if (global)
    renet_stage.init(rng);
  else
    init_conv(spatial, rng);
  init_conv(project, rng);
}

template <typename T>
AttentionField<T> attention_head(const Tensor<T>& f, const AttentionHead<T>& head, Tape<T>* tape) {
  Tensor<T> logits;
  if (head.global) {
    Tensor<T> ctx = renet(f, head.renet_stage, tape);
    logits = conv2d(ctx, head.project, tape);
  } else {
    Tensor<T> mid = relu(conv2d(f, head.spatial, tape), tape);
    logits = conv2d(mid, head.project, tape);
  }
  if (logits.shape().c != head.grid.weights())
    throw std::invalid_argument("attention_head: head emits " + std::to_string(logits.shape().c) +
                                " channels but the grid has " +
                                std::to_string(head.grid.weights()) + " positions");
  head.grid.validate_for(f.shape().h, f.shape().w);
  AttentionField<T> att;
  att.grid = head.grid;
  att.kind = head.kind;
  att.weights = head.kind == AttentionKind::softmax ? softmax_channels(logits, tape)
                                                    : sigmoid(logits, tape);
  return att;
}

namespace {

template <typename T>
void check_attend_pool_args(const Tensor<T>& f, const AttentionField<T>& att) {
  if (att.kind != AttentionKind::softmax)
    throw std::invalid_argument("attend_pool: attention must be softmax-kind");
  const Shape4 fs = f.shape(), as = att.weights.shape();
  if (fs.n != as.n || fs.h != as.h || fs.w != as.w)
    throw std::invalid_argument("attend_pool: attention spatial size " + as.str() +
                                " does not match features " + fs.str());
  if (as.c != att.grid.weights())
    throw std::invalid_argument("attend_pool: field carries " + std::to_string(as.c) +
                                " weights but the grid has " +
                                std::to_string(att.grid.weights()));
  att.grid.validate_for(fs.h, fs.w);
}

}  // namespace

template <typename T>
Tensor<T> attend_pool(const Tensor<T>& f, const AttentionField<T>& att, Tape<T>* tape) {
  check_attend_pool_args(f, att);
  const Shape4 fs = f.shape();
  const ContextGrid grid = att.grid;
  const int D = grid.weights();
  const int C = fs.c;
  const std::int64_t hw = std::int64_t(fs.h) * fs.w;
  Tensor<T> out(fs);

  if (grid.mode == GridMode::global) {
    // All pixels share the same D source pixels: gather them once per image
    // and contract with one matrix product.
    std::vector<T> gathered(std::size_t(D) * C);
    for (int n = 0; n < fs.n; ++n) {
      for (int i = 0; i < D; ++i) {
        int sy, sx;
        grid.source(i, 0, 0, sy, sx);
        std::copy_n(&f.at(n, sy, sx, 0), C, gathered.data() + std::size_t(i) * C);
      }
      gemm<T>(int(hw), C, D, att.weights.data() + std::int64_t(n) * hw * D, gathered.data(),
              out.data() + std::int64_t(n) * hw * C, false);
    }
  } else {
    // One shifted axpy pass per grid offset.
    std::fill(out.data(), out.data() + out.numel(), T(0));
    for (int i = 0; i < D; ++i) {
      const int dy = (i / grid.grid_w - grid.grid_h / 2) * grid.dilation;
      const int dx = (i % grid.grid_w - grid.grid_w / 2) * grid.dilation;
      for (int n = 0; n < fs.n; ++n)
        for (int y = 0; y < fs.h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= fs.h) continue;
          for (int x = 0; x < fs.w; ++x) {
            const int sx = x + dx;
            if (sx < 0 || sx >= fs.w) continue;
            const T a = att.weights.at(n, y, x, i);
            const T* src = &f.at(n, sy, sx, 0);
            T* dst = &out.at(n, y, x, 0);
            for (int c = 0; c < C; ++c) dst[c] += a * src[c];
          }
        }
    }
  }

  if (tape) {
    std::vector<int> in{tape->track(f), tape->track(att.weights)};
    Tensor<T> fc = f, ac = att.weights, oc = out;
    tape->record(std::move(in), out, [fc, ac, oc, grid]() mutable {
      const Shape4 fs = fc.shape();
      const int D = grid.weights();
      const int C = fs.c;
      const std::int64_t hw = std::int64_t(fs.h) * fs.w;
      const T* gy = oc.grad();
      T* gf = fc.grad();
      T* ga = ac.grad();
      if (grid.mode == GridMode::global) {
        std::vector<T> gathered(std::size_t(D) * C);
        std::vector<T> dgathered(std::size_t(D) * C);
        for (int n = 0; n < fs.n; ++n) {
          for (int i = 0; i < D; ++i) {
            int sy, sx;
            grid.source(i, 0, 0, sy, sx);
            std::copy_n(&fc.at(n, sy, sx, 0), C, gathered.data() + std::size_t(i) * C);
          }
          const T* gyn = gy + std::int64_t(n) * hw * C;
          const T* an = ac.data() + std::int64_t(n) * hw * D;
          // d att = gy @ gathered^T
          gemm_bt<T>(int(hw), D, C, gyn, gathered.data(), ga + std::int64_t(n) * hw * D, true);
          // d gathered = att^T @ gy
          gemm_at<T>(D, C, int(hw), an, gyn, dgathered.data(), false);
          for (int i = 0; i < D; ++i) {
            int sy, sx;
            grid.source(i, 0, 0, sy, sx);
            T* dst = gf + flat_index(fs, n, sy, sx, 0);
            const T* src = dgathered.data() + std::size_t(i) * C;
            for (int c = 0; c < C; ++c) dst[c] += src[c];
          }
        }
      } else {
        for (int i = 0; i < D; ++i) {
          const int dy = (i / grid.grid_w - grid.grid_h / 2) * grid.dilation;
          const int dx = (i % grid.grid_w - grid.grid_w / 2) * grid.dilation;
          for (int n = 0; n < fs.n; ++n)
            for (int y = 0; y < fs.h; ++y) {
              const int sy = y + dy;
              if (sy < 0 || sy >= fs.h) continue;
              for (int x = 0; x < fs.w; ++x) {
                const int sx = x + dx;
                if (sx < 0 || sx >= fs.w) continue;
                const T a = ac.at(n, y, x, i);
                const T* gp = gy + flat_index(fs, n, y, x, 0);
                const T* src = &fc.at(n, sy, sx, 0);
                T* gfp = gf + flat_index(fs, n, sy, sx, 0);
                T acc = T(0);
                for (int c = 0; c < C; ++c) {
                  acc += gp[c] * src[c];
                  gfp[c] += a * gp[c];
                }
                ga[flat_index(ac.shape(), n, y, x, i)] += acc;
              }
            }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> attend_conv(const Tensor<T>& f, const AttentionField<T>& gates, const ConvKernel<T>& k,
                      Tape<T>* tape) {
  if (gates.kind != AttentionKind::sigmoid_gate)
    throw std::invalid_argument("attend_conv: gates must be sigmoid-kind");
  const ContextGrid grid = gates.grid;
  if (grid.mode != GridMode::local)
    throw std::invalid_argument("attend_conv: grid must be local");
  if (grid.grid_h != k.kh() || grid.grid_w != k.kw() || grid.dilation != k.dilation)
    throw std::invalid_argument("attend_conv: gate grid does not match kernel geometry");
  const Shape4 fs = f.shape();
  const Shape4 as = gates.weights.shape();
  if (fs.n != as.n || fs.h != as.h || fs.w != as.w)
    throw std::invalid_argument("attend_conv: gate spatial size mismatch");
  if (as.c != grid.weights())
    throw std::invalid_argument("attend_conv: gate channel count mismatch");
  if (fs.c != k.cin()) throw std::invalid_argument("attend_conv: feature channel mismatch");

  // Same-padded stride-1 gathering with the kernel's dilation: out keeps the
  // input's spatial size and tap i of pixel p reads the grid's source pixel.
  const int D = grid.weights();
  const int C = fs.c;
  const int Cout = k.cout();
  const std::int64_t rows = std::int64_t(fs.n) * fs.h * fs.w;
  const int patch = D * C;

  auto col = std::make_shared<std::vector<T>>(std::size_t(rows) * patch, T(0));
  {
    T* cd = col->data();
#pragma omp parallel for schedule(static) if (rows * patch > (1 << 16))
    for (std::int64_t r = 0; r < rows; ++r) {
      const int x = int(r % fs.w);
      const int y = int((r / fs.w) % fs.h);
      const int n = int(r / (std::int64_t(fs.w) * fs.h));
      T* dst = cd + r * patch;
      for (int i = 0; i < D; ++i) {
        int sy, sx;
        grid.source(i, y, x, sy, sx);
        if (sy < 0 || sy >= fs.h || sx < 0 || sx >= fs.w) continue;  // stays zero
        std::copy_n(&f.at(n, sy, sx, 0), C, dst + std::size_t(i) * C);
      }
    }
  }

  Tensor<T> out(Shape4{fs.n, fs.h, fs.w, Cout});
  {
    // modulated columns: tap block i scaled by gate i
    std::vector<T> mcol(std::size_t(rows) * patch);
    const T* g = gates.weights.data();
    const T* cd = col->data();
    for (std::int64_t r = 0; r < rows; ++r)
      for (int i = 0; i < D; ++i) {
        const T gv = g[r * D + i];
        const T* s = cd + r * patch + std::size_t(i) * C;
        T* d = mcol.data() + r * patch + std::size_t(i) * C;
        for (int c = 0; c < C; ++c) d[c] = gv * s[c];
      }
    const T* b = k.bias.data();
    for (std::int64_t r = 0; r < rows; ++r) std::copy_n(b, Cout, out.data() + r * Cout);
    gemm<T>(int(rows), Cout, patch, mcol.data(), k.weight.data(), out.data(), true);
  }

  if (tape) {
    std::vector<int> in{tape->track(f), tape->track(gates.weights), tape->track(k.weight),
                        tape->track(k.bias)};
    Tensor<T> fc = f, gc = gates.weights, wc = k.weight, bc = k.bias, oc = out;
    tape->record(std::move(in), out, [fc, gc, wc, bc, oc, col, grid]() mutable {
      const Shape4 fs = fc.shape();
      const int D = grid.weights();
      const int C = fs.c;
      const int Cout = wc.shape().c;
      const std::int64_t rows = std::int64_t(fs.n) * fs.h * fs.w;
      const int patch = D * C;
      const T* gy = oc.grad();
      const T* g = gc.data();
      const T* cd = col->data();

      T* db = bc.grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (int co = 0; co < Cout; ++co) db[co] += gy[r * Cout + co];

      // dW needs the modulated columns again.
      {
        std::vector<T> mcol(std::size_t(rows) * patch);
        for (std::int64_t r = 0; r < rows; ++r)
          for (int i = 0; i < D; ++i) {
            const T gv = g[r * D + i];
            const T* s = cd + r * patch + std::size_t(i) * C;
            T* d = mcol.data() + r * patch + std::size_t(i) * C;
            for (int c = 0; c < C; ++c) d[c] = gv * s[c];
          }
        gemm_at<T>(patch, Cout, int(rows), mcol.data(), gy, wc.grad(), true);
      }

      std::vector<T> dmcol(std::size_t(rows) * patch);
      gemm_bt<T>(int(rows), patch, Cout, gy, wc.data(), dmcol.data(), false);

      T* dg = gc.grad();
      T* df = fc.grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const int x = int(r % fs.w);
        const int y = int((r / fs.w) % fs.h);
        const int n = int(r / (std::int64_t(fs.w) * fs.h));
        for (int i = 0; i < D; ++i) {
          const T gv = g[r * D + i];
          const T* dm = dmcol.data() + r * patch + std::size_t(i) * C;
          const T* s = cd + r * patch + std::size_t(i) * C;
          T acc = T(0);
          for (int c = 0; c < C; ++c) acc += dm[c] * s[c];
          dg[r * D + i] += acc;
          int sy, sx;
          grid.source(i, y, x, sy, sx);
          if (sy < 0 || sy >= fs.h || sx < 0 || sx >= fs.w) continue;
          T* d = df + flat_index(fs, n, sy, sx, 0);
          for (int c = 0; c < C; ++c) d[c] += gv * dm[c];
        }
      }
    });
  }
  return out;
}

#define PICA_INSTANTIATE_ATT(T)                                                             \
  template struct AttentionHead<T>;                                                        \
  template struct AttentionField<T>;                                                       \
  template AttentionField<T> attention_head<T>(const Tensor<T>&, const AttentionHead<T>&,   \
                                               Tape<T>*);                                   \
  template Tensor<T> attend_pool<T>(const Tensor<T>&, const AttentionField<T>&, Tape<T>*);  \
  template Tensor<T> attend_conv<T>(const Tensor<T>&, const AttentionField<T>&,             \
                                    const ConvKernel<T>&, Tape<T>*);

PICA_INSTANTIATE_ATT(float)
PICA_INSTANTIATE_ATT(double)

}  // namespace pica
