#include "pica/renet.hpp"

#include <array>
#include <cmath>
#include <memory>

#include "pica/gemm.hpp"

namespace pica {

template <typename T>
LstmCell<T> LstmCell<T>::make(int input_size, int hidden) {
  if (input_size < 1 || hidden < 1) throw std::invalid_argument("LstmCell: bad sizes");
  LstmCell<T> c;
  c.w_ih = Tensor<T>(Shape4{1, 1, input_size, 4 * hidden});
  c.w_hh = Tensor<T>(Shape4{1, 1, hidden, 4 * hidden});
  c.bias = Tensor<T>(Shape4{1, 1, 1, 4 * hidden});
  c.input_size = input_size;
  c.hidden = hidden;
  return c;
}

template <typename T>
void LstmCell<T>::init(Rng& rng) {
  const double limit = std::sqrt(3.0 / input_size);
  for (std::int64_t i = 0; i < w_ih.numel(); ++i) w_ih.data()[i] = T(rng.uniform(-limit, limit));
  for (int gate = 0; gate < 4; ++gate) {
    const std::vector<T> q = orthogonal_matrix<T>(hidden, hidden, rng);
    for (int r = 0; r < hidden; ++r)
      for (int c = 0; c < hidden; ++c)
        w_hh.data()[std::int64_t(r) * 4 * hidden + gate * hidden + c] =
            q[std::size_t(r) * hidden + c];
  }
  for (int j = 0; j < 4 * hidden; ++j)
    bias.data()[j] = (j >= hidden && j < 2 * hidden) ? T(1) : T(0);
}

template <typename T>
RenetParams<T> RenetParams<T>::make(int input_channels, int hidden) {
  RenetParams<T> p;
  p.row_fwd = LstmCell<T>::make(input_channels, hidden);
  p.row_bwd = LstmCell<T>::make(input_channels, hidden);
  p.col_fwd = LstmCell<T>::make(2 * hidden, hidden);
  p.col_bwd = LstmCell<T>::make(2 * hidden, hidden);
  p.hidden = hidden;
  return p;
}

template <typename T>
void RenetParams<T>::init(Rng& rng) {
  row_fwd.init(rng);
  row_bwd.init(rng);
  col_fwd.init(rng);
  col_bwd.init(rng);
}

namespace {

// One scan direction over a stack of independent sequences laid out inside a
// rank-4 tensor. `base[s]` is the flat element offset of the first pixel of
// sequence s at t = 0 (already direction-adjusted via `step`, which may be
// negative).
struct ScanLayout {
  std::vector<std::int64_t> base;  // per sequence, element offset of t=0 pixel
  std::int64_t step = 0;           // element offset difference per time step
  int seqs = 0;
  int len = 0;
};

ScanLayout row_layout(const Shape4& s, bool reversed, int channels) {
  ScanLayout l;
  l.seqs = s.n * s.h;
  l.len = s.w;
  l.step = (reversed ? -1 : 1) * std::int64_t(channels);
  l.base.resize(std::size_t(l.seqs));
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y) {
      std::int64_t first = (std::int64_t(n) * s.h + y) * s.w * channels;
      if (reversed) first += std::int64_t(s.w - 1) * channels;
      l.base[std::size_t(n) * s.h + y] = first;
    }
  return l;
}

ScanLayout col_layout(const Shape4& s, bool reversed, int channels) {
  ScanLayout l;
  l.seqs = s.n * s.w;
  l.len = s.h;
  l.step = (reversed ? -1 : 1) * std::int64_t(s.w) * channels;
  l.base.resize(std::size_t(l.seqs));
  for (int n = 0; n < s.n; ++n)
    for (int x = 0; x < s.w; ++x) {
      std::int64_t first = (std::int64_t(n) * s.h * s.w + x) * channels;
      if (reversed) first += std::int64_t(s.h - 1) * std::int64_t(s.w) * channels;
      l.base[std::size_t(n) * s.w + x] = first;
    }
  return l;
}

// Saved forward activations of one direction, kept for BPTT.
template <typename T>
struct DirState {
  std::vector<T> xs;      // len * seqs * input
  std::vector<T> hs;      // (len+1) * seqs * hidden, hs[0] = 0
  std::vector<T> cs;      // (len+1) * seqs * hidden
  std::vector<T> gates;   // len * seqs * 4h, post-activation i,f,g,o
  std::vector<T> tanh_c;  // len * seqs * hidden
};

// Runs one direction; writes hidden states into `out` at channel offset
// `out_ch` (out has out_channels channels per pixel).
template <typename T>
void scan_forward(const T* input, int input_ch, const ScanLayout& l, const LstmCell<T>& cell,
                  T* out, int out_channels, int out_ch_offset, const ScanLayout& lo,
                  DirState<T>& st) {
  const int S = l.seqs, L = l.len, H = cell.hidden, C = cell.input_size;
  if (input_ch != C) throw std::invalid_argument("renet scan: channel mismatch");
  st.xs.assign(std::size_t(L) * S * C, T(0));
  st.hs.assign(std::size_t(L + 1) * S * H, T(0));
  st.cs.assign(std::size_t(L + 1) * S * H, T(0));
  st.gates.assign(std::size_t(L) * S * 4 * H, T(0));
  st.tanh_c.assign(std::size_t(L) * S * H, T(0));

  std::vector<T> acts(std::size_t(S) * 4 * H);
  for (int t = 0; t < L; ++t) {
    T* xt = st.xs.data() + std::size_t(t) * S * C;
    for (int s = 0; s < S; ++s) {
      const T* src = input + l.base[std::size_t(s)] + std::int64_t(t) * l.step;
      std::copy(src, src + C, xt + std::size_t(s) * C);
    }
    // gates = x_t @ Wih + h_{t-1} @ Whh + b
    const T* b = cell.bias.data();
    for (int s = 0; s < S; ++s) std::copy(b, b + 4 * H, acts.data() + std::size_t(s) * 4 * H);
    gemm<T>(S, 4 * H, C, xt, cell.w_ih.data(), acts.data(), true);
    const T* hprev = st.hs.data() + std::size_t(t) * S * H;
    gemm<T>(S, 4 * H, H, hprev, cell.w_hh.data(), acts.data(), true);

    const T* cprev = st.cs.data() + std::size_t(t) * S * H;
    T* hnext = st.hs.data() + std::size_t(t + 1) * S * H;
    T* cnext = st.cs.data() + std::size_t(t + 1) * S * H;
    T* gates = st.gates.data() + std::size_t(t) * S * 4 * H;
    T* tc = st.tanh_c.data() + std::size_t(t) * S * H;
    for (int s = 0; s < S; ++s) {
      const T* a = acts.data() + std::size_t(s) * 4 * H;
      T* g = gates + std::size_t(s) * 4 * H;
      for (int j = 0; j < H; ++j) {
        const T gi = T(1) / (T(1) + std::exp(-a[j]));
        const T gf = T(1) / (T(1) + std::exp(-a[H + j]));
        const T gg = std::tanh(a[2 * H + j]);
        const T go = T(1) / (T(1) + std::exp(-a[3 * H + j]));
        g[j] = gi;
        g[H + j] = gf;
        g[2 * H + j] = gg;
        g[3 * H + j] = go;
        const T c = gf * cprev[std::size_t(s) * H + j] + gi * gg;
        cnext[std::size_t(s) * H + j] = c;
        const T th = std::tanh(c);
        tc[std::size_t(s) * H + j] = th;
        hnext[std::size_t(s) * H + j] = go * th;
      }
      T* dst = out + lo.base[std::size_t(s)] + std::int64_t(t) * lo.step + out_ch_offset;
      std::copy(hnext + std::size_t(s) * H, hnext + std::size_t(s) * H + H, dst);
      (void)out_channels;
    }
  }
}

// BPTT for one direction. `dout` holds the gradient of the direction's output
// slice (read at channel offset), `dinput` receives input gradients.
template <typename T>
void scan_backward(const DirState<T>& st, const ScanLayout& l, const LstmCell<T>& cell,
                   const T* dout, const ScanLayout& lo, int out_ch_offset, T* dinput,
                   T* d_wih, T* d_whh, T* d_bias) {
  const int S = l.seqs, L = l.len, H = cell.hidden, C = cell.input_size;
  std::vector<T> dh(std::size_t(S) * H, T(0)), dc(std::size_t(S) * H, T(0));
  std::vector<T> da(std::size_t(S) * 4 * H);
  std::vector<T> dx(std::size_t(S) * C);
  std::vector<T> dh_rec(std::size_t(S) * H);

  for (int t = L - 1; t >= 0; --t) {
    const T* gates = st.gates.data() + std::size_t(t) * S * 4 * H;
    const T* tc = st.tanh_c.data() + std::size_t(t) * S * H;
    const T* cprev = st.cs.data() + std::size_t(t) * S * H;
    for (int s = 0; s < S; ++s) {
      const T* go_slice = dout + lo.base[std::size_t(s)] + std::int64_t(t) * lo.step + out_ch_offset;
      const T* g = gates + std::size_t(s) * 4 * H;
      for (int j = 0; j < H; ++j) {
        const std::size_t sj = std::size_t(s) * H + j;
        const T gi = g[j], gf = g[H + j], gg = g[2 * H + j], go = g[3 * H + j];
        const T th = tc[sj];
        const T dht = dh[sj] + go_slice[j];
        const T dct = dc[sj] + dht * go * (T(1) - th * th);
        const T da_o = dht * th * go * (T(1) - go);
        const T da_f = dct * cprev[sj] * gf * (T(1) - gf);
        const T da_i = dct * gg * gi * (T(1) - gi);
        const T da_g = dct * gi * (T(1) - gg * gg);
        da[std::size_t(s) * 4 * H + j] = da_i;
        da[std::size_t(s) * 4 * H + H + j] = da_f;
        da[std::size_t(s) * 4 * H + 2 * H + j] = da_g;
        da[std::size_t(s) * 4 * H + 3 * H + j] = da_o;
        dc[sj] = dct * gf;
      }
    }
    const T* xt = st.xs.data() + std::size_t(t) * S * C;
    const T* hprev = st.hs.data() + std::size_t(t) * S * H;
    // parameter grads
    gemm_at<T>(C, 4 * H, S, xt, da.data(), d_wih, true);
    gemm_at<T>(H, 4 * H, S, hprev, da.data(), d_whh, true);
    for (int s = 0; s < S; ++s)
      for (int j = 0; j < 4 * H; ++j) d_bias[j] += da[std::size_t(s) * 4 * H + j];
    // input grad, scattered back to pixel positions
    gemm_bt<T>(S, C, 4 * H, da.data(), cell.w_ih.data(), dx.data(), false);
    for (int s = 0; s < S; ++s) {
      T* dst = dinput + l.base[std::size_t(s)] + std::int64_t(t) * l.step;
      const T* src = dx.data() + std::size_t(s) * C;
      for (int c = 0; c < C; ++c) dst[c] += src[c];
    }
    // recurrent grad to h_{t-1}
    gemm_bt<T>(S, H, 4 * H, da.data(), cell.w_hh.data(), dh_rec.data(), false);
    dh.swap(dh_rec);
  }
}

}  // namespace

template <typename T>
Tensor<T> renet(const Tensor<T>& x, const RenetParams<T>& p, Tape<T>* tape) {
  if (p.hidden < 1) throw std::invalid_argument("renet: hidden must be positive");
  const Shape4 s = x.shape();
  const int H2 = 2 * p.hidden;
  Tensor<T> mid(Shape4{s.n, s.h, s.w, H2});
  Tensor<T> out(Shape4{s.n, s.h, s.w, H2});

  auto st = std::make_shared<std::array<DirState<T>, 4>>();

  const Shape4 ms = mid.shape();
  // Row pass: left->right || right->left.
  scan_forward<T>(x.data(), s.c, row_layout(s, false, s.c), p.row_fwd, mid.data(), H2,
                  0, row_layout(ms, false, H2), (*st)[0]);
  scan_forward<T>(x.data(), s.c, row_layout(s, true, s.c), p.row_bwd, mid.data(), H2,
                  p.hidden, row_layout(ms, true, H2), (*st)[1]);
  // Column pass on the row result: bottom->top || top->bottom.
  scan_forward<T>(mid.data(), H2, col_layout(ms, true, H2), p.col_fwd, out.data(), H2,
                  0, col_layout(ms, true, H2), (*st)[2]);
  scan_forward<T>(mid.data(), H2, col_layout(ms, false, H2), p.col_bwd, out.data(), H2,
                  p.hidden, col_layout(ms, false, H2), (*st)[3]);

  if (tape) {
    std::vector<int> in{tape->track(x)};
    for (const LstmCell<T>* c : {&p.row_fwd, &p.row_bwd, &p.col_fwd, &p.col_bwd}) {
      in.push_back(tape->track(c->w_ih));
      in.push_back(tape->track(c->w_hh));
      in.push_back(tape->track(c->bias));
    }
    Tensor<T> xc = x, oc = out, mc = mid;
    RenetParams<T> pc = p;
    tape->record(std::move(in), out, [xc, oc, mc, pc, st]() mutable {
      const Shape4 s = xc.shape();
      const Shape4 ms = mc.shape();
      const int H2 = 2 * pc.hidden;
      std::vector<T> dmid(std::size_t(mc.numel()), T(0));
      const T* gout = oc.grad();
      scan_backward<T>((*st)[3], col_layout(ms, false, H2), pc.col_bwd, gout,
                       col_layout(ms, false, H2), pc.hidden, dmid.data(),
                       pc.col_bwd.w_ih.grad(), pc.col_bwd.w_hh.grad(), pc.col_bwd.bias.grad());
      scan_backward<T>((*st)[2], col_layout(ms, true, H2), pc.col_fwd, gout,
                       col_layout(ms, true, H2), 0, dmid.data(), pc.col_fwd.w_ih.grad(),
                       pc.col_fwd.w_hh.grad(), pc.col_fwd.bias.grad());
      scan_backward<T>((*st)[1], row_layout(s, true, s.c), pc.row_bwd, dmid.data(),
                       row_layout(ms, true, H2), pc.hidden, xc.grad(), pc.row_bwd.w_ih.grad(),
                       pc.row_bwd.w_hh.grad(), pc.row_bwd.bias.grad());
      scan_backward<T>((*st)[0], row_layout(s, false, s.c), pc.row_fwd, dmid.data(),
                       row_layout(ms, false, H2), 0, xc.grad(), pc.row_fwd.w_ih.grad(),
                       pc.row_fwd.w_hh.grad(), pc.row_fwd.bias.grad());
    });
  }
  return out;
}

#define PICA_INSTANTIATE_RENET(T)               \
  template struct LstmCell<T>;                  \
  template struct RenetParams<T>;               \
  template Tensor<T> renet<T>(const Tensor<T>&, const RenetParams<T>&, Tape<T>*);

PICA_INSTANTIATE_RENET(float)
PICA_INSTANTIATE_RENET(double)

}  // namespace pica
