#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mustgan {

using Shape = std::vector<std::size_t>;

/// Raised when operand extents do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised on tape misuse: non-scalar loss, double backward, backward without a tape.
class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "tensors hold float or double");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;

  void accumulate_grad(std::span<const T> g) {
    if (grad.empty()) {
      grad.assign(g.begin(), g.end());
      return;
    }
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
  }
  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(values.size(), T(0));
    return grad;
  }
};

template <class T>
class Tape;

/// Shared handle to a row-major buffer. Copies alias the same storage; use clone() for a deep copy.
template <class T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node>()) {
    node_->values.assign(element_count(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node>()) {
    if (element_count(shape) != values.size())
      throw ShapeError("tensor shape " + mustgan::to_string(shape) + " needs " +
                       std::to_string(element_count(shape)) + " values, got " + std::to_string(values.size()));
    node_->shape = std::move(shape);
    node_->values = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->values.size(); }

  std::span<const T> values() const { return node_->values; }
  /// Write access for builders and optimizers. Must not be used between a recorded
  /// forward pass and its backward pass.
  std::span<T> mutable_values() { return node_->values; }
  T operator[](std::size_t i) const { return node_->values[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + mustgan::to_string(shape()));
    return node_->values[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void clear_grad() { node_->grad.clear(); }

  /// Same values, no history, no gradient requirement.
  Tensor detach() const { return Tensor(shape(), node_->values); }

  Tensor clone() const {
    Tensor out(shape(), node_->values);
    out.node_->requires_grad = node_->requires_grad;
    return out;
  }

  const std::shared_ptr<Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node> node_;
};

template <class T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  auto va = a.values();
  auto vb = b.values();
  return std::equal(va.begin(), va.end(), vb.begin(), [](T x, T y) {
    return std::memcmp(&x, &y, sizeof(T)) == 0;
  });
}

/// Ordered record of differentiable operations. Constructing a tape makes it the active
/// recorder on this thread; destruction restores the previously active tape.
template <class T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<TensorNode<T>>;
  using BackwardFn = std::function<void(TensorNode<T>& output)>;

  Tape() : previous_(active_) { active_ = this; }
  ~Tape() {
    if (active_ == this) active_ = previous_;
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(NodePtr output, std::vector<NodePtr> inputs, BackwardFn fn) {
    if (consumed_) throw AutodiffError("recording onto a consumed tape; call reset() first");
    entries_.push_back(Entry{std::move(output), std::move(inputs), std::move(fn)});
  }

  /// Seeds d(loss)/d(loss) = 1 and replays entries in reverse order.
  void backward(const Tensor<T>& loss) {
    if (consumed_) throw AutodiffError("second backward on the same tape without reset()");
    if (loss.numel() != 1) throw AutodiffError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
    if (!loss.requires_grad()) throw AutodiffError("loss does not depend on any tensor that requires grad");
    consumed_ = true;
    loss.node()->grad_buffer()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->fn(*it->output);
    }
  }

  void reset() {
    entries_.clear();
    consumed_ = false;
  }

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Entry {
    NodePtr output;
    std::vector<NodePtr> inputs;
    BackwardFn fn;
  };

  std::vector<Entry> entries_;
  bool consumed_ = false;
  Tape* previous_;
  static inline thread_local Tape* active_ = nullptr;
};

}  // namespace mustgan
