#include "cnvs/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

namespace cnvs {

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "x" : "") << shape[i];
  }
  os << ']';
  return os.str();
}

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

namespace memory {
namespace {
std::atomic<std::int64_t> g_live{0};
std::atomic<std::int64_t> g_peak{0};
}  // namespace

std::int64_t live_bytes() { return g_live.load(); }
std::int64_t peak_bytes() { return g_peak.load(); }
void reset_peak() { g_peak.store(g_live.load()); }

void note_alloc(std::size_t bytes) {
  auto now = g_live.fetch_add(static_cast<std::int64_t>(bytes)) + static_cast<std::int64_t>(bytes);
  auto peak = g_peak.load();
  while (now > peak && !g_peak.compare_exchange_weak(peak, now)) {
  }
}

void note_free(std::size_t bytes) { g_live.fetch_sub(static_cast<std::int64_t>(bytes)); }

}  // namespace memory

void Node::release_grad() {
  Buf<float>().swap(grad_f32);
  Buf<double>().swap(grad_f64);
  has_grad = false;
}

namespace {
thread_local DType t_default_dtype = DType::f32;
thread_local bool t_grad_enabled = true;
}  // namespace

DType default_dtype() { return t_default_dtype; }
DTypeScope::DTypeScope(DType dtype) : previous_(t_default_dtype) { t_default_dtype = dtype; }
DTypeScope::~DTypeScope() { t_default_dtype = previous_; }

bool grad_enabled() { return t_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace detail {

std::shared_ptr<Node> make_node(const Shape& shape, DType dtype, const char* op) {
  for (auto e : shape) {
    if (e < 0) {
      throw DimensionError(std::string(op) + ": negative extent in " + shape_str(shape));
    }
  }
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->dtype = dtype;
  node->op = op;
  auto n = static_cast<std::size_t>(numel_of(shape));
  if (dtype == DType::f32) {
    node->f32.assign(n, 0.0f);
  } else {
    node->f64.assign(n, 0.0);
  }
  return node;
}

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!t_grad_enabled) {
    return false;
  }
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

void attach(const std::shared_ptr<Node>& out, std::vector<std::shared_ptr<Node>> parents,
            std::function<void(Node&)> fn) {
  out->requires_grad = true;
  out->parents = std::move(parents);
  out->backward_fn = std::move(fn);
}

DType common_dtype(const char* op, std::initializer_list<const Tensor*> inputs) {
  const Tensor* first = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->defined()) {
      throw ContractError(std::string(op) + ": undefined tensor operand");
    }
    if (first == nullptr) {
      first = t;
    } else if (t->dtype() != first->dtype()) {
      throw ContractError(std::string(op) + ": mixed dtypes " + dtype_name(first->dtype()) + " and " +
                          dtype_name(t->dtype()));
    }
  }
  return first->dtype();
}

}  // namespace detail

Tensor Tensor::zeros(const Shape& shape, DType dtype) {
  return Tensor(detail::make_node(shape, dtype, "leaf"));
}
Tensor Tensor::zeros(const Shape& shape) { return zeros(shape, default_dtype()); }

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  Tensor t = zeros(shape, dtype);
  dispatch(dtype, [&]<class T>() {
    auto d = t.mutable_data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
  return t;
}
Tensor Tensor::full(const Shape& shape, double value) { return full(shape, value, default_dtype()); }

Tensor Tensor::from(const Shape& shape, std::span<const double> values, DType dtype) {
  if (numel_of(shape) != static_cast<std::int64_t>(values.size())) {
    throw DimensionError("Tensor::from: shape " + shape_str(shape) + " holds " +
                         std::to_string(numel_of(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  Tensor t = zeros(shape, dtype);
  dispatch(dtype, [&]<class T>() {
    auto d = t.mutable_data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) {
      d[i] = static_cast<T>(values[i]);
    }
  });
  return t;
}
Tensor Tensor::from(const Shape& shape, std::span<const double> values) {
  return from(shape, values, default_dtype());
}
Tensor Tensor::from(const Shape& shape, std::initializer_list<double> values) {
  return from(shape, std::span<const double>(values.begin(), values.size()), default_dtype());
}
Tensor Tensor::from(const Shape& shape, std::initializer_list<double> values, DType dtype) {
  return from(shape, std::span<const double>(values.begin(), values.size()), dtype);
}
Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }
Tensor Tensor::scalar(double value) { return scalar(value, default_dtype()); }

std::int64_t Tensor::dim(int axis) const {
  int r = rank();
  if (axis < 0) {
    axis += r;
  }
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return node_->shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  }
  return at(0);
}

double Tensor::at(std::int64_t i) const {
  return dispatch(dtype(), [&]<class T>() { return static_cast<double>(data<T>()[static_cast<std::size_t>(i)]); });
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&]<class T>() {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

Tensor Tensor::to(DType target) const {
  auto v = to_vector();
  return from(shape(), v, target);
}

Tensor Tensor::clone() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->dtype = node_->dtype;
  node->f32 = node_->f32;
  node->f64 = node_->f64;
  return Tensor(std::move(node));
}

Tensor Tensor::detach() const { return clone(); }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (node_->backward_fn) {
    throw ContractError("set_requires_grad on a non-leaf tensor");
  }
  node_->requires_grad = flag;
  return *this;
}

Tensor Tensor::grad() const {
  Tensor g = zeros(shape(), dtype());
  if (has_grad()) {
    dispatch(dtype(), [&]<class T>() {
      auto src = grad_data<T>();
      auto dst = g.mutable_data<T>();
      std::copy(src.begin(), src.end(), dst.begin());
    });
  }
  return g;
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() requires a scalar, got " + shape_str(shape()));
  }
  if (!requires_grad()) {
    throw ContractError("backward() on a tensor that does not require grad");
  }
  // Iterative post-order DFS gives a topological order; each node is visited once.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) {
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  dispatch(dtype(), [&]<class T>() { node_->grad_buffer<T>()[0] += T(1); });
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad) {
      n->backward_fn(*n);
    }
  }
  // Free the recorded graph; leaves keep their accumulated gradients.
  for (Node* n : order) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->parents.clear();
      n->release_grad();
    }
  }
}

}  // namespace cnvs
