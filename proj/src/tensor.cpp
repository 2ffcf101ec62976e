#include "pica/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <istream>
#include <ostream>

namespace pica {

std::string Shape4::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(h) + "," + std::to_string(w) + "," +
         std::to_string(c) + ")";
}

template <typename T>
std::uint64_t Tape<T>::fresh_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

template <typename T>
int Tape<T>::track(const Tensor<T>& t, bool leaf) {
  if (!t.defined()) throw std::invalid_argument("Tape::track: undefined tensor");
  auto& p = *t.d_;
  if (p.tape_id == id_ && p.node >= 0) {
    if (leaf) leaf_[std::size_t(p.node)] = 1;
    return p.node;
  }
  p.node = int(tracked_.size());
  p.tape_id = id_;
  tracked_.push_back(t);
  leaf_.push_back(leaf ? 1 : 0);
  return p.node;
}

template <typename T>
void Tape<T>::record(std::vector<int> inputs, const Tensor<T>& out,
                     std::function<void()> backward_fn) {
  for (int id : inputs)
    if (id < 0 || id >= int(tracked_.size()))
      throw std::invalid_argument("Tape::record: unknown input node " + std::to_string(id));
  if (out.node() >= 0 && out.d_->tape_id == id_)
    throw std::invalid_argument("Tape::record: output already produced (single assignment)");
  int out_id = track(out);
  entries_.push_back(Entry{std::move(inputs), out_id, std::move(backward_fn)});
}

template <typename T>
void Tape<T>::validate() const {
  std::vector<char> produced(tracked_.size(), 0);
  for (const Entry& e : entries_) {
    if (e.out < 0 || e.out >= int(tracked_.size()))
      throw std::runtime_error("Tape: malformed graph (entry output out of range)");
    if (produced[std::size_t(e.out)])
      throw std::runtime_error("Tape: malformed graph (node produced twice)");
    for (int id : e.inputs) {
      if (id < 0 || id >= int(tracked_.size()))
        throw std::runtime_error("Tape: malformed graph (unknown input node)");
      // An input that is produced later (or by this very entry) breaks
      // topological order, i.e. the graph has a cycle.
      if (id == e.out) throw std::runtime_error("Tape: malformed graph (cycle detected)");
    }
    produced[std::size_t(e.out)] = 1;
  }
  // Forward references: re-scan requiring inputs to be leaves or already produced.
  std::fill(produced.begin(), produced.end(), 0);
  for (std::size_t i = 0; i < tracked_.size(); ++i)
    if (leaf_[i]) produced[i] = 1;
  // Nodes that are never produced by an entry are sources (constants/leaves).
  std::vector<char> is_output(tracked_.size(), 0);
  for (const Entry& e : entries_) is_output[std::size_t(e.out)] = 1;
  for (std::size_t i = 0; i < tracked_.size(); ++i)
    if (!is_output[i]) produced[i] = 1;
  for (const Entry& e : entries_) {
    for (int id : e.inputs)
      if (!produced[std::size_t(id)])
        throw std::runtime_error("Tape: malformed graph (cycle detected)");
    produced[std::size_t(e.out)] = 1;
  }
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.node() < 0 || loss.d_->tape_id != id_)
    throw std::invalid_argument("Tape::backward: loss is not on this tape");
  if (!loss.is_scalar())
    throw std::invalid_argument("Tape::backward: loss must be scalar (1,1,1,1), got " +
                                loss.shape().str());
  validate();

  std::vector<char> needed(tracked_.size(), 0);
  needed[std::size_t(loss.node())] = 1;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!needed[std::size_t(it->out)]) continue;
    for (int id : it->inputs) needed[std::size_t(id)] = 1;
  }

  for (std::size_t i = 0; i < tracked_.size(); ++i)
    if (needed[i] || leaf_[i]) tracked_[i].ensure_zero_grad();

  tracked_[std::size_t(loss.node())].grad()[0] = T(1);

  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
    if (needed[std::size_t(it->out)]) it->fn();
}

template class Tape<float>;
template class Tape<double>;

namespace {

template <typename V>
void write_le(std::ostream& os, V v) {
  unsigned char buf[sizeof(V)];
  auto u = std::uint64_t(v);
  for (std::size_t i = 0; i < sizeof(V); ++i) buf[i] = (unsigned char)((u >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(V));
}

template <typename V>
V read_le(std::istream& is) {
  unsigned char buf[sizeof(V)];
  is.read(reinterpret_cast<char*>(buf), sizeof(V));
  if (!is) throw std::runtime_error("tensor load: truncated stream");
  std::uint64_t u = 0;
  for (std::size_t i = 0; i < sizeof(V); ++i) u |= std::uint64_t(buf[i]) << (8 * i);
  return V(u);
}

template <typename T>
constexpr std::uint8_t dtype_code() {
  return sizeof(T) == 4 ? 1 : 2;
}

}  // namespace

template <typename T>
void save_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write("PTNS", 4);
  write_le<std::uint8_t>(os, dtype_code<T>());
  const Shape4& s = t.shape();
  write_le<std::uint32_t>(os, std::uint32_t(s.n));
  write_le<std::uint32_t>(os, std::uint32_t(s.h));
  write_le<std::uint32_t>(os, std::uint32_t(s.w));
  write_le<std::uint32_t>(os, std::uint32_t(s.c));
  for (std::int64_t i = 0; i < s.numel(); ++i) {
    if constexpr (sizeof(T) == 4) {
      std::uint32_t bits;
      float f = float(t.data()[i]);
      std::memcpy(&bits, &f, 4);
      write_le<std::uint32_t>(os, bits);
    } else {
      std::uint64_t bits;
      double d = double(t.data()[i]);
      std::memcpy(&bits, &d, 8);
      write_le<std::uint64_t>(os, bits);
    }
  }
}

template <typename T>
Tensor<T> load_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "PTNS") throw std::runtime_error("tensor load: bad magic");
  auto code = read_le<std::uint8_t>(is);
  if (code != dtype_code<T>())
    throw std::runtime_error("tensor load: dtype code " + std::to_string(code) +
                             " does not match requested precision");
  Shape4 s;
  s.n = int(read_le<std::uint32_t>(is));
  s.h = int(read_le<std::uint32_t>(is));
  s.w = int(read_le<std::uint32_t>(is));
  s.c = int(read_le<std::uint32_t>(is));
  std::vector<T> data(std::size_t(s.numel()));
  for (auto& v : data) {
    if constexpr (sizeof(T) == 4) {
      auto bits = read_le<std::uint32_t>(is);
      float f;
      std::memcpy(&f, &bits, 4);
      v = T(f);
    } else {
      auto bits = read_le<std::uint64_t>(is);
      double d;
      std::memcpy(&d, &bits, 8);
      v = T(d);
    }
  }
  return Tensor<T>::from_data(s, std::move(data));
}

template void save_tensor<float>(std::ostream&, const Tensor<float>&);
template void save_tensor<double>(std::ostream&, const Tensor<double>&);
template Tensor<float> load_tensor<float>(std::istream&);
template Tensor<double> load_tensor<double>(std::istream&);

}  // namespace pica
