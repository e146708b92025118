#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmfusion/errors.hpp"

namespace mmf {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape);

// Throws ConfigError when any extent is < 1.
void check_shape(const Shape& shape, const char* what);

// Dense row-major array. Plain value type; carries no autodiff state.
template <typename T>
class NDArray {
 public:
  using value_type = T;

  NDArray() = default;
  explicit NDArray(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_shape(shape_, "NDArray");
    data_.assign(static_cast<size_t>(numel(shape_)), fill);
  }
  NDArray(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_, "NDArray");
    if (static_cast<int64_t>(data_.size()) != numel(shape_))
      throw InputError("NDArray: " + std::to_string(data_.size()) + " values for shape " +
                       shape_str(shape_));
  }

  const Shape& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_.at(i); }
  size_t rank() const { return shape_.size(); }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  NDArray reshaped(Shape shape) const {
    if (numel(shape) != size())
      throw ConfigError("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    return NDArray(std::move(shape), data_);
  }

  template <typename U>
  NDArray<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return NDArray<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const NDArray& a, const NDArray& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

namespace detail {

int64_t next_node_id();

template <typename T>
struct Node {
  int64_t id = next_node_id();
  std::string op = "leaf";
  NDArray<T> value;
  std::optional<NDArray<T>> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad, accumulates into inputs' grads.
  std::function<void(Node&)> backward_fn;

  NDArray<T>& grad_buffer() {
    if (!grad) grad.emplace(value.shape(), T(0));
    return *grad;
  }
};

}  // namespace detail

// Thread-local switch that disables graph recording (evaluation, optimizer updates).
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Autodiff handle: shared reference to a graph node holding a value and an optional grad.
// Copies alias the same node.
template <typename T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;
  explicit Tensor(NDArray<T> value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(NDArray<T>(std::move(shape)), requires_grad);
  }
  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    return Tensor(NDArray<T>(std::move(shape), std::move(data)), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t dim(size_t i) const { return node_->value.dim(i); }
  size_t rank() const { return node_->value.rank(); }
  int64_t size() const { return node_->value.size(); }
  const NDArray<T>& value() const { return node_->value; }
  // In-place access for leaves only (parameter updates, loading).
  NDArray<T>& mutable_value() {
    if (node_->backward_fn) throw UsageError("mutable_value on a non-leaf tensor");
    return node_->value;
  }
  T item() const {
    if (size() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward_fn && node_->inputs.empty(); }
  const std::string& op() const { return node_->op; }
  int64_t id() const { return node_->id; }
  const NDArray<T>* grad() const { return node_->grad ? &*node_->grad : nullptr; }
  NDArray<T>& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.reset(); }

  // Reverse-mode sweep from this scalar. Consumes the graph: a second call throws.
  void backward() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  // Builds a recorded result. `fn` is attached only when grad mode is on and some input
  // requires grad; otherwise the result is a constant leaf.
  static Tensor make_result(std::string op, NDArray<T> value, std::vector<Tensor> inputs,
                            std::function<void(Node&)> fn) {
    Tensor out(std::move(value));
    bool needs = false;
    if (GradMode::enabled())
      for (const auto& in : inputs) needs = needs || in.requires_grad();
    out.node_->op = std::move(op);
    if (needs) {
      out.node_->requires_grad = true;
      for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
      out.node_->backward_fn = std::move(fn);
    }
    return out;
  }

 private:
  std::shared_ptr<Node> node_;
};

template <typename T>
void Tensor<T>::backward() const {
  if (!node_) throw UsageError("backward on undefined tensor");
  if (size() != 1) throw UsageError("backward requires a scalar, got shape " + shape_str(shape()));
  if (node_->consumed) throw UsageError("backward called twice on the same graph; re-run forward");
  if (!node_->requires_grad) throw UsageError("backward on a tensor that does not require grad");

  // Node ids increase with creation, so sorting reachable nodes by id descending is a
  // valid reverse topological order.
  std::vector<Node*> order;
  std::vector<Node*> stack{node_.get()};
  std::vector<int64_t> seen_ids;  // sorted
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    auto it = std::lower_bound(seen_ids.begin(), seen_ids.end(), n->id);
    if (it != seen_ids.end() && *it == n->id) continue;
    seen_ids.insert(it, n->id);
    if (n->consumed) throw UsageError("graph already consumed by a previous backward");
    order.push_back(n);
    for (auto& in : n->inputs) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id > b->id; });

  node_->grad_buffer().fill(T(1));
  for (Node* n : order) {
    if (n->backward_fn && n->grad) n->backward_fn(*n);
  }
  for (Node* n : order) {
    if (n->backward_fn) {
      n->consumed = true;
      n->backward_fn = nullptr;
      n->grad.reset();
    }
  }
}

}  // namespace mmf
