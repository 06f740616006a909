#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vesselseg/error.hpp"

namespace vesselseg {

using Index = std::int64_t;

/// Five-axis extent (N, C, D, H, W), W fastest in memory.
struct Shape {
  std::array<Index, 5> dims{};

  Shape() = default;
  Shape(Index n, Index c, Index d, Index h, Index w) : dims{n, c, d, h, w} {}

  Index n() const { return dims[0]; }
  Index c() const { return dims[1]; }
  Index d() const { return dims[2]; }
  Index h() const { return dims[3]; }
  Index w() const { return dims[4]; }
  Index spatial() const { return dims[2] * dims[3] * dims[4]; }
  Index numel() const { return dims[0] * dims[1] * spatial(); }
  Index operator[](int i) const { return dims[static_cast<size_t>(i)]; }

  std::string str() const;
  friend bool operator==(const Shape&, const Shape&) = default;
};

/// Dense N-C-D-H-W array with an optional gradient buffer.
///
/// Tensors are shared handles: copying a Tensor aliases the same storage, the
/// way parameters and activations are passed around in the graph. Use clone()
/// for a deep copy.
template <typename S>
class Tensor {
public:
  using Scalar = S;
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(const Shape& shape, bool requires_grad = false);
  Tensor(const Shape& shape, Array values, bool requires_grad = false);

  static Tensor scalar(S v, bool requires_grad = false) { return Tensor(Shape(1, 1, 1, 1, 1), Array::Constant(1, v), requires_grad); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  Index numel() const { return s_->shape.numel(); }

  Array& value() { return s_->value; }
  const Array& value() const { return s_->value; }
  S* data() { return s_->value.data(); }
  const S* data() const { return s_->value.data(); }
  S item() const;

  bool requires_grad() const { return s_ && s_->requires_grad; }
  void set_requires_grad(bool on);

  /// Gradient buffer; allocated as zeros on first access. Constness of the
  /// handle does not extend to the buffer, so backward closures can write it.
  Array& grad() const;
  bool has_grad() const { return s_->grad.size() == s_->value.size(); }
  void zero_grad();

  /// Deep copy of the values; the copy does not require grad.
  Tensor clone() const;

  bool same_storage(const Tensor& o) const { return s_ == o.s_; }

private:
  struct Storage {
    Shape shape;
    Array value;
    Array grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

/// Ordered record of executed primitives and their backward closures.
///
/// Primitives append an entry only when the tape is recording and at least one
/// input requires grad. backward() replays the entries in exact reverse order
/// and then clears the record.
template <typename S>
class Tape {
public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  bool tracks(std::initializer_list<const Tensor<S>*> inputs) const;

  void record(std::string op, std::function<void()> backward);
  std::size_t size() const { return entries_.size(); }
  std::vector<std::string> op_names() const;

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable tensor.
  /// Gradients accumulate into existing leaf buffers.
  void backward(const Tensor<S>& loss);
  void clear() { entries_.clear(); }

private:
  struct Entry {
    std::string op;
    std::function<void()> backward;
  };
  bool recording_;
  std::vector<Entry> entries_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace vesselseg
