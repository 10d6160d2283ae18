#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cnvs/errors.hpp"

namespace cnvs {

using Shape = std::vector<std::int64_t>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dtype);

namespace memory {

/// Bytes currently held by tensor buffers and tracked kernel scratch.
std::int64_t live_bytes();
std::int64_t peak_bytes();
/// Sets the peak watermark to the current live value.
void reset_peak();
void note_alloc(std::size_t bytes);
void note_free(std::size_t bytes);

}  // namespace memory

/// Allocator that reports every allocation to the memory counters above.
template <class T>
struct TrackedAllocator {
  using value_type = T;
  TrackedAllocator() noexcept = default;
  template <class U>
  TrackedAllocator(const TrackedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) {
    memory::note_alloc(n * sizeof(T));
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    memory::note_free(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }
  template <class U>
  bool operator==(const TrackedAllocator<U>&) const noexcept {
    return true;
  }
};

template <class T>
using Buf = std::vector<T, TrackedAllocator<T>>;

struct Node {
  Shape shape;
  DType dtype = DType::f32;
  Buf<float> f32;
  Buf<double> f64;
  Buf<float> grad_f32;
  Buf<double> grad_f64;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  template <class T>
  Buf<T>& values() {
    if constexpr (std::is_same_v<T, float>) {
      return f32;
    } else {
      return f64;
    }
  }
  template <class T>
  Buf<T>& grads() {
    if constexpr (std::is_same_v<T, float>) {
      return grad_f32;
    } else {
      return grad_f64;
    }
  }
  /// Gradient buffer, zero-allocated on first use.
  template <class T>
  std::span<T> grad_buffer() {
    auto& g = grads<T>();
    if (!has_grad) {
      g.assign(static_cast<std::size_t>(numel_of(shape)), T(0));
      has_grad = true;
    }
    return {g.data(), g.size()};
  }
  void release_grad();
};

/// Runs `fn.template operator()<T>()` with T matching the runtime dtype.
template <class F>
decltype(auto) dispatch(DType dtype, F&& fn) {
  if (dtype == DType::f32) {
    return fn.template operator()<float>();
  }
  return fn.template operator()<double>();
}

/// Handle to a dense row-major tensor that may participate in a reverse-mode graph.
///
/// Handles share their node; copying a handle never copies data. Values are treated
/// as immutable once an op has consumed them, except for leaf parameters which the
/// optimizer updates in place between steps.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape, DType dtype);
  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value, DType dtype);
  static Tensor full(const Shape& shape, double value);
  static Tensor from(const Shape& shape, std::span<const double> values, DType dtype);
  static Tensor from(const Shape& shape, std::span<const double> values);
  static Tensor from(const Shape& shape, std::initializer_list<double> values);
  static Tensor from(const Shape& shape, std::initializer_list<double> values, DType dtype);
  static Tensor scalar(double value, DType dtype);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return numel_of(node_->shape); }
  DType dtype() const { return node_->dtype; }

  template <class T>
  std::span<const T> data() const {
    check_dtype<T>();
    auto& v = node_->values<T>();
    return {v.data(), v.size()};
  }
  /// In-place access. Only for leaves (parameters, freshly built constants).
  template <class T>
  std::span<T> mutable_data() {
    check_dtype<T>();
    auto& v = node_->values<T>();
    return {v.data(), v.size()};
  }

  double item() const;
  double at(std::int64_t flat_index) const;
  std::vector<double> to_vector() const;
  Tensor to(DType dtype) const;
  /// Deep copy with no graph history.
  Tensor clone() const;
  Tensor detach() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return node_->has_grad; }
  template <class T>
  std::span<const T> grad_data() const {
    check_dtype<T>();
    auto& g = node_->grads<T>();
    return {g.data(), g.size()};
  }
  /// Copy of the gradient as a plain tensor; zeros when no gradient has been produced.
  Tensor grad() const;
  void zero_grad() { node_->release_grad(); }

  /// Reverse pass from a scalar. Each reachable node's rule runs exactly once.
  void backward() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }
  const char* op() const { return node_->op; }

 private:
  template <class T>
  void check_dtype() const {
    constexpr DType want = std::is_same_v<T, float> ? DType::f32 : DType::f64;
    if (node_->dtype != want) {
      throw ContractError(std::string("tensor dtype is ") + dtype_name(node_->dtype) +
                          ", accessed as " + dtype_name(want));
    }
  }

  std::shared_ptr<Node> node_;
};

/// Thread default dtype for factories called without an explicit dtype.
DType default_dtype();

class DTypeScope {
 public:
  explicit DTypeScope(DType dtype);
  ~DTypeScope();
  DTypeScope(const DTypeScope&) = delete;
  DTypeScope& operator=(const DTypeScope&) = delete;

 private:
  DType previous_;
};

bool grad_enabled();

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

/// Allocates a result node; wires parents and the backward rule only when recording.
std::shared_ptr<Node> make_node(const Shape& shape, DType dtype, const char* op);
bool needs_grad(std::initializer_list<const Tensor*> inputs);
void attach(const std::shared_ptr<Node>& out, std::vector<std::shared_ptr<Node>> parents,
            std::function<void(Node&)> fn);
DType common_dtype(const char* op, std::initializer_list<const Tensor*> inputs);

template <class T>
void accumulate(Node& node, std::span<const T> g) {
  if (!node.requires_grad) {
    return;
  }
  auto dst = node.grad_buffer<T>();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] += g[i];
  }
}

}  // namespace detail

}  // namespace cnvs
