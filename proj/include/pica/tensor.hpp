#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace pica {

// Canonical layout everywhere: (batch n, height h, width w, channels c),
// row-major with channels fastest.
struct Shape4 {
  int n = 0;
  int h = 0;
  int w = 0;
  int c = 0;

  std::int64_t numel() const { return std::int64_t(n) * h * w * c; }
  bool operator==(const Shape4&) const = default;
  std::string str() const;
};

inline std::int64_t flat_index(const Shape4& s, int n, int y, int x, int c) {
  return ((std::int64_t(n) * s.h + y) * s.w + x) * s.c + c;
}

template <typename T>
class Tape;

// Dense rank-4 tensor. Value semantics over a shared payload; immutable by
// convention once it has entered a tape.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape4 s, T fill = T(0)) : d_(std::make_shared<Payload>()) {
    if (s.n < 1 || s.h < 1 || s.w < 1 || s.c < 1)
      throw std::invalid_argument("Tensor: non-positive dimension in " + s.str());
    d_->shape = s;
    d_->value.assign(std::size_t(s.numel()), fill);
  }

  // Validating constructor for externally supplied data.
  static Tensor from_data(Shape4 s, std::vector<T> data) {
    Tensor t(s);
    if (std::int64_t(data.size()) != s.numel())
      throw std::invalid_argument("Tensor::from_data: got " + std::to_string(data.size()) +
                                  " elements for shape " + s.str());
    for (const T& v : data)
      if (!std::isfinite(double(v)))
        throw std::invalid_argument("Tensor::from_data: non-finite element");
    t.d_->value = std::move(data);
    return t;
  }

  static Tensor scalar(T v) {
    Tensor t(Shape4{1, 1, 1, 1});
    t.d_->value[0] = v;
    return t;
  }

  bool defined() const { return bool(d_); }
  const Shape4& shape() const { return d_->shape; }
  std::int64_t numel() const { return d_->shape.numel(); }
  bool is_scalar() const { return d_->shape == Shape4{1, 1, 1, 1}; }

  T* data() { return d_->value.data(); }
  const T* data() const { return d_->value.data(); }
  std::vector<T>& vec() { return d_->value; }
  const std::vector<T>& vec() const { return d_->value; }

  T& at(int n, int y, int x, int c) { return d_->value[flat_index(d_->shape, n, y, x, c)]; }
  const T& at(int n, int y, int x, int c) const {
    return d_->value[flat_index(d_->shape, n, y, x, c)];
  }

  bool has_grad() const { return d_ && !d_->grad.empty(); }
  T* grad() {
    if (d_->grad.empty()) throw std::runtime_error("Tensor::grad: no gradient present");
    return d_->grad.data();
  }
  const T* grad() const {
    if (d_->grad.empty()) throw std::runtime_error("Tensor::grad: no gradient present");
    return d_->grad.data();
  }
  const std::vector<T>& grad_vec() const { return d_->grad; }
  void ensure_zero_grad() { d_->grad.assign(std::size_t(numel()), T(0)); }
  void drop_grad() { d_->grad.clear(); }

  // Identity in the recorded graph; -1 until tracked by a tape.
  int node() const { return d_ ? d_->node : -1; }

  bool same_payload(const Tensor& o) const { return d_ == o.d_; }

 private:
  struct Payload {
    Shape4 shape;
    std::vector<T> value;
    std::vector<T> grad;
    int node = -1;
    std::uint64_t tape_id = 0;  // id of the tape that assigned `node`
  };
  std::shared_ptr<Payload> d_;
  friend class Tape<T>;
};

// Tape-based reverse-mode graph: operations are recorded in execution order
// on forward and replayed reversed on backward. Entries capture the tensors
// they need, so a tape keeps its intermediates alive.
template <typename T>
class Tape {
 public:
  // Marks a leaf. Leaves always receive a gradient buffer from backward(),
  // zero when unreachable from the loss.
  void watch(const Tensor<T>& t) { track(t, /*leaf=*/true); }

  // Tracks a tensor (no-op if already on this tape) and returns its node id.
  int track(const Tensor<T>& t, bool leaf = false);

  // Records one operation: `inputs` were consumed to produce `out`.
  // `backward_fn` must add into the inputs' grad buffers, reading out.grad().
  void record(std::vector<int> inputs, const Tensor<T>& out, std::function<void()> backward_fn);

  // Reverse-mode sweep from a scalar loss.
  void backward(const Tensor<T>& loss);

  std::size_t num_ops() const { return entries_.size(); }
  std::size_t num_nodes() const { return tracked_.size(); }

  // Raw entry injection; exists so malformed graphs are constructible in tests.
  void inject_entry(std::vector<int> inputs, int out, std::function<void()> backward_fn) {
    entries_.push_back(Entry{std::move(inputs), out, std::move(backward_fn)});
  }

 private:
  struct Entry {
    std::vector<int> inputs;
    int out = -1;
    std::function<void()> fn;
  };
  void validate() const;
  static std::uint64_t fresh_id();

  std::uint64_t id_ = fresh_id();
  std::vector<Entry> entries_;
  std::vector<Tensor<T>> tracked_;  // node id -> tensor
  std::vector<char> leaf_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

// Little-endian binary tensor format: "PTNS", u8 dtype (1 = f32, 2 = f64),
// four u32 dims (n, h, w, c), then raw data.
template <typename T>
void save_tensor(std::ostream& os, const Tensor<T>& t);
template <typename T>
Tensor<T> load_tensor(std::istream& is);

}  // namespace pica
