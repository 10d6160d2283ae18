#include "cnvs/ops.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "gemm.hpp"

namespace cnvs {

using detail::accumulate;
using detail::attach;
using detail::common_dtype;
using detail::make_node;
using detail::needs_grad;

namespace {

using NodePtr = std::shared_ptr<Node>;

std::string two_shapes(const Tensor& a, const Tensor& b) {
  return shape_str(a.shape()) + " vs " + shape_str(b.shape());
}

void require_rank(const char* op, const Tensor& x, int rank) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
  }
}

// How `b` broadcasts against `a`: b repeats every `inner` elements, `outer` times.
struct Broadcast {
  std::int64_t inner;
  std::int64_t outer;
};

Broadcast broadcast_of(const char* op, const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa == sb) {
    return {a.numel(), 1};
  }
  if (b.numel() == 1) {
    return {1, a.numel()};
  }
  if (sb.size() <= sa.size() && std::equal(sb.begin(), sb.end(), sa.end() - static_cast<std::ptrdiff_t>(sb.size()))) {
    return {b.numel(), a.numel() / std::max<std::int64_t>(b.numel(), 1)};
  }
  throw DimensionError(std::string(op) + ": cannot broadcast " + two_shapes(a, b));
}

enum class BinOp { add, sub, mul, div };

Tensor binary(const char* name, BinOp kind, const Tensor& a, const Tensor& b) {
  const DType dt = common_dtype(name, {&a, &b});
  const Broadcast bc = broadcast_of(name, a, b);
  auto out = make_node(a.shape(), dt, name);
  dispatch(dt, [&]<class T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto& o = out->values<T>();
    for (std::int64_t r = 0; r < bc.outer; ++r) {
      const std::int64_t base = r * bc.inner;
      for (std::int64_t i = 0; i < bc.inner; ++i) {
        const T u = x[static_cast<std::size_t>(base + i)];
        const T v = y[static_cast<std::size_t>(bc.inner == 1 && bc.outer > 1 ? 0 : i)];
        T res;
        switch (kind) {
          case BinOp::add: res = u + v; break;
          case BinOp::sub: res = u - v; break;
          case BinOp::mul: res = u * v; break;
          default: res = u / v; break;
        }
        o[static_cast<std::size_t>(base + i)] = res;
      }
    }
  });
  if (needs_grad({&a, &b})) {
    NodePtr an = a.node_ptr();
    NodePtr bn = b.node_ptr();
    attach(out, {an, bn}, [an, bn, bc, kind](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        auto g = self.grads<T>();
        const auto& x = an->values<T>();
        const auto& y = bn->values<T>();
        auto bidx = [&](std::int64_t i) { return static_cast<std::size_t>(bc.inner == 1 ? 0 : i); };
        if (an->requires_grad) {
          auto ga = an->grad_buffer<T>();
          for (std::int64_t r = 0; r < bc.outer; ++r) {
            for (std::int64_t i = 0; i < bc.inner; ++i) {
              const auto k = static_cast<std::size_t>(r * bc.inner + i);
              switch (kind) {
                case BinOp::add:
                case BinOp::sub: ga[k] += g[k]; break;
                case BinOp::mul: ga[k] += g[k] * y[bidx(i)]; break;
                default: ga[k] += g[k] / y[bidx(i)]; break;
              }
            }
          }
        }
        if (bn->requires_grad) {
          auto gb = bn->grad_buffer<T>();
          for (std::int64_t r = 0; r < bc.outer; ++r) {
            for (std::int64_t i = 0; i < bc.inner; ++i) {
              const auto k = static_cast<std::size_t>(r * bc.inner + i);
              const auto j = bidx(i);
              switch (kind) {
                case BinOp::add: gb[j] += g[k]; break;
                case BinOp::sub: gb[j] -= g[k]; break;
                case BinOp::mul: gb[j] += g[k] * x[k]; break;
                default: gb[j] -= g[k] * x[k] / (y[j] * y[j]); break;
              }
            }
          }
        }
      });
    });
  }
  return Tensor(out);
}

// Elementwise unary op; `deriv(x, y)` returns dy/dx.
template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
  const DType dt = common_dtype(name, {&x});
  auto out = make_node(x.shape(), dt, name);
  dispatch(dt, [&]<class T>() {
    auto in = x.data<T>();
    auto& o = out->values<T>();
    for (std::size_t i = 0; i < in.size(); ++i) {
      o[i] = static_cast<T>(fwd(in[i]));
    }
  });
  if (needs_grad({&x})) {
    NodePtr xn = x.node_ptr();
    attach(out, {xn}, [xn, deriv](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        const auto& g = self.grads<T>();
        const auto& in = xn->values<T>();
        const auto& y = self.values<T>();
        auto gx = xn->grad_buffer<T>();
        for (std::size_t i = 0; i < gx.size(); ++i) {
          gx[i] += g[i] * static_cast<T>(deriv(in[i], y[i]));
        }
      });
    });
  }
  return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinOp::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary("div", BinOp::div, a, b); }

Tensor scale(const Tensor& x, double factor) {
  return unary(
      "scale", x, [factor](auto v) { return v * static_cast<decltype(v)>(factor); },
      [factor](auto, auto) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      "add_scalar", x, [value](auto v) { return v + static_cast<decltype(v)>(value); },
      [](auto, auto) { return 1.0; });
}

Tensor elu(const Tensor& x, double alpha) {
  return unary(
      "elu", x,
      [alpha](auto v) {
        using T = decltype(v);
        return v > T(0) ? v : static_cast<T>(alpha) * std::expm1(v);
      },
      [alpha](auto v, auto y) {
        using T = decltype(v);
        return v > T(0) ? T(1) : y + static_cast<T>(alpha);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](auto v) {
        using T = decltype(v);
        if (v >= T(0)) {
          return T(1) / (T(1) + std::exp(-v));
        }
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](auto, auto y) { return y * (decltype(y)(1) - y); });
}

Tensor gelu(const Tensor& x) {
  return unary(
      "gelu", x,
      [](auto v) {
        using T = decltype(v);
        return T(0.5) * v * (T(1) + std::erf(v * static_cast<T>(M_SQRT1_2)));
      },
      [](auto v, auto) {
        using T = decltype(v);
        const T cdf = T(0.5) * (T(1) + std::erf(v * static_cast<T>(M_SQRT1_2)));
        const T pdf = std::exp(T(-0.5) * v * v) * static_cast<T>(0.3989422804014327);
        return cdf + v * pdf;
      });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](auto v) { return std::tanh(v); },
      [](auto, auto y) { return decltype(y)(1) - y * y; });
}

Tensor softplus(const Tensor& x) {
  return unary(
      "softplus", x,
      [](auto v) {
        using T = decltype(v);
        return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
      },
      [](auto v, auto) {
        using T = decltype(v);
        return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
      });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](auto v) { return std::exp(v); }, [](auto, auto y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](auto v) { return std::log(v); }, [](auto v, auto) { return decltype(v)(1) / v; });
}

Tensor sin(const Tensor& x) {
  return unary(
      "sin", x, [](auto v) { return std::sin(v); }, [](auto v, auto) { return std::cos(v); });
}

Tensor cos(const Tensor& x) {
  return unary(
      "cos", x, [](auto v) { return std::cos(v); }, [](auto v, auto) { return -std::sin(v); });
}

Tensor abs(const Tensor& x) {
  return unary(
      "abs", x, [](auto v) { return std::abs(v); },
      [](auto v, auto) {
        using T = decltype(v);
        return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
      });
}

Tensor square(const Tensor& x) {
  return unary(
      "square", x, [](auto v) { return v * v; }, [](auto v, auto) { return decltype(v)(2) * v; });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](auto v) { return v > decltype(v)(0) ? v : decltype(v)(0); },
      [](auto v, auto) { return v > decltype(v)(0) ? decltype(v)(1) : decltype(v)(0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      "clamp", x,
      [lo, hi](auto v) {
        using T = decltype(v);
        return std::min(std::max(v, static_cast<T>(lo)), static_cast<T>(hi));
      },
      [lo, hi](auto v, auto) {
        using T = decltype(v);
        return (v >= static_cast<T>(lo) && v <= static_cast<T>(hi)) ? T(1) : T(0);
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const DType dt = common_dtype("matmul", {&a, &b});
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ, " + two_shapes(a, b));
  }
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = make_node({m, n}, dt, "matmul");
  dispatch(dt, [&]<class T>() { kernel::gemm<T>(m, k, n, a.data<T>().data(), b.data<T>().data(), out->values<T>().data(), false); });
  if (needs_grad({&a, &b})) {
    NodePtr an = a.node_ptr();
    NodePtr bn = b.node_ptr();
    attach(out, {an, bn}, [an, bn, m, k, n](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        const T* g = self.grads<T>().data();
        if (an->requires_grad) {
          Buf<T> bt(static_cast<std::size_t>(k * n));
          kernel::transpose<T>(k, n, bn->values<T>().data(), bt.data());
          kernel::gemm<T>(m, n, k, g, bt.data(), an->grad_buffer<T>().data(), true);
        }
        if (bn->requires_grad) {
          Buf<T> at(static_cast<std::size_t>(m * k));
          kernel::transpose<T>(m, k, an->values<T>().data(), at.data());
          kernel::gemm<T>(k, m, n, at.data(), g, bn->grad_buffer<T>().data(), true);
        }
      });
    });
  }
  return Tensor(out);
}

Tensor transpose(const Tensor& x) {
  const DType dt = common_dtype("transpose", {&x});
  require_rank("transpose", x, 2);
  const std::int64_t r = x.dim(0), c = x.dim(1);
  auto out = make_node({c, r}, dt, "transpose");
  dispatch(dt, [&]<class T>() { kernel::transpose<T>(r, c, x.data<T>().data(), out->values<T>().data()); });
  if (needs_grad({&x})) {
    NodePtr xn = x.node_ptr();
    attach(out, {xn}, [xn, r, c](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        Buf<T> tmp(static_cast<std::size_t>(r * c));
        kernel::transpose<T>(c, r, self.grads<T>().data(), tmp.data());
        accumulate<T>(*xn, tmp);
      });
    });
  }
  return Tensor(out);
}

Tensor softmax_rows(const Tensor& x) {
  const DType dt = common_dtype("softmax_rows", {&x});
  if (x.rank() < 1 || x.dim(-1) < 1) {
    throw DimensionError("softmax_rows: need at least one column, got " + shape_str(x.shape()));
  }
  const std::int64_t n = x.dim(-1);
  const std::int64_t rows = x.numel() / n;
  auto out = make_node(x.shape(), dt, "softmax_rows");
  dispatch(dt, [&]<class T>() {
    auto in = x.data<T>();
    auto& o = out->values<T>();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* xi = in.data() + r * n;
      T* yi = o.data() + r * n;
      T mx = xi[0];
      for (std::int64_t j = 1; j < n; ++j) {
        mx = std::max(mx, xi[j]);
      }
      T s = 0;
      for (std::int64_t j = 0; j < n; ++j) {
        yi[j] = std::exp(xi[j] - mx);
        s += yi[j];
      }
      for (std::int64_t j = 0; j < n; ++j) {
        yi[j] /= s;
      }
    }
  });
  if (needs_grad({&x})) {
    NodePtr xn = x.node_ptr();
    attach(out, {xn}, [xn, rows, n](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        const auto& g = self.grads<T>();
        const auto& y = self.values<T>();
        auto gx = xn->grad_buffer<T>();
        for (std::int64_t r = 0; r < rows; ++r) {
          T dot = 0;
          for (std::int64_t j = 0; j < n; ++j) {
            dot += g[static_cast<std::size_t>(r * n + j)] * y[static_cast<std::size_t>(r * n + j)];
          }
          for (std::int64_t j = 0; j < n; ++j) {
            const auto k = static_cast<std::size_t>(r * n + j);
            gx[k] += y[k] * (g[k] - dot);
          }
        }
      });
    });
  }
  return Tensor(out);
}

namespace {

Tensor layer_norm_impl(const Tensor& x, const Tensor* gamma, const Tensor* beta, double eps) {
  const DType dt = gamma ? common_dtype("layer_norm", {&x, gamma, beta}) : common_dtype("layer_norm", {&x});
  if (x.rank() < 1) {
    throw DimensionError("layer_norm: scalar input");
  }
  const std::int64_t n = x.dim(-1);
  const std::int64_t rows = x.numel() / std::max<std::int64_t>(n, 1);
  if (gamma && (gamma->numel() != n || beta->numel() != n)) {
    throw DimensionError("layer_norm: affine extents " + two_shapes(*gamma, *beta) + " for row width " +
                         std::to_string(n));
  }
  auto out = make_node(x.shape(), dt, "layer_norm");
  // Normalized values and per-row inverse std are kept for the backward rule.
  auto saved = std::make_shared<Node>();
  saved->dtype = dt;
  dispatch(dt, [&]<class T>() {
    auto in = x.data<T>();
    auto& o = out->values<T>();
    auto& xhat = saved->values<T>();
    xhat.resize(static_cast<std::size_t>(rows * n + rows));
    const T* g = gamma ? gamma->data<T>().data() : nullptr;
    const T* b = beta ? beta->data<T>().data() : nullptr;
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* xi = in.data() + r * n;
      T mu = 0;
      for (std::int64_t j = 0; j < n; ++j) {
        mu += xi[j];
      }
      mu /= static_cast<T>(n);
      T var = 0;
      for (std::int64_t j = 0; j < n; ++j) {
        var += (xi[j] - mu) * (xi[j] - mu);
      }
      var /= static_cast<T>(n);
      const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
      xhat[static_cast<std::size_t>(rows * n + r)] = rstd;
      for (std::int64_t j = 0; j < n; ++j) {
        const T h = (xi[j] - mu) * rstd;
        xhat[static_cast<std::size_t>(r * n + j)] = h;
        o[static_cast<std::size_t>(r * n + j)] = g ? h * g[j] + b[j] : h;
      }
    }
  });
  const bool affine = gamma != nullptr;
  if (affine ? needs_grad({&x, gamma, beta}) : needs_grad({&x})) {
    NodePtr xn = x.node_ptr();
    NodePtr gn = affine ? gamma->node_ptr() : nullptr;
    NodePtr bn = affine ? beta->node_ptr() : nullptr;
    std::vector<NodePtr> parents{xn};
    if (affine) {
      parents.push_back(gn);
      parents.push_back(bn);
    }
    attach(out, std::move(parents), [xn, gn, bn, saved, rows, n](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        const auto& g = self.grads<T>();
        const auto& xhat = saved->values<T>();
        const T* gam = gn ? gn->values<T>().data() : nullptr;
        if (gn && gn->requires_grad) {
          auto gg = gn->grad_buffer<T>();
          for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t j = 0; j < n; ++j) {
              const auto k = static_cast<std::size_t>(r * n + j);
              gg[static_cast<std::size_t>(j)] += g[k] * xhat[k];
            }
          }
        }
        if (bn && bn->requires_grad) {
          auto gb = bn->grad_buffer<T>();
          for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t j = 0; j < n; ++j) {
              gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(r * n + j)];
            }
          }
        }
        if (xn->requires_grad) {
          auto gx = xn->grad_buffer<T>();
          std::vector<T> dh(static_cast<std::size_t>(n));
          for (std::int64_t r = 0; r < rows; ++r) {
            const T rstd = xhat[static_cast<std::size_t>(rows * n + r)];
            T m1 = 0, m2 = 0;
            for (std::int64_t j = 0; j < n; ++j) {
              const auto k = static_cast<std::size_t>(r * n + j);
              dh[static_cast<std::size_t>(j)] = gam ? g[k] * gam[j] : g[k];
              m1 += dh[static_cast<std::size_t>(j)];
              m2 += dh[static_cast<std::size_t>(j)] * xhat[k];
            }
            m1 /= static_cast<T>(n);
            m2 /= static_cast<T>(n);
            for (std::int64_t j = 0; j < n; ++j) {
              const auto k = static_cast<std::size_t>(r * n + j);
              gx[k] += rstd * (dh[static_cast<std::size_t>(j)] - m1 - xhat[k] * m2);
            }
          }
        }
      });
    });
  }
  return Tensor(out);
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  return layer_norm_impl(x, &gamma, &beta, eps);
}

Tensor layer_norm(const Tensor& x, double eps) { return layer_norm_impl(x, nullptr, nullptr, eps); }

Tensor reshape(const Tensor& x, const Shape& shape) {
  const DType dt = common_dtype("reshape", {&x});
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  auto out = make_node(shape, dt, "reshape");
  dispatch(dt, [&]<class T>() {
    auto in = x.data<T>();
    std::copy(in.begin(), in.end(), out->values<T>().begin());
  });
  if (needs_grad({&x})) {
    NodePtr xn = x.node_ptr();
    attach(out, {xn}, [xn](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        const auto& g = self.grads<T>();
        accumulate<T>(*xn, std::span<const T>(g.data(), g.size()));
      });
    });
  }
  return Tensor(out);
}

namespace {

// outer = product of extents before `axis`; chunk = extent(axis) * product after it.
std::pair<std::int64_t, std::int64_t> split_at(const Shape& s, int axis) {
  std::int64_t outer = 1, chunk = 1;
  for (int i = 0; i < static_cast<int>(s.size()); ++i) {
    (i < axis ? outer : chunk) *= s[static_cast<std::size_t>(i)];
  }
  return {outer, chunk};
}

int norm_axis(const char* op, int axis, int rank) {
  if (axis < 0) {
    axis += rank;
  }
  if (axis < 0 || axis >= rank) {
    throw DimensionError(std::string(op) + ": axis out of range");
  }
  return axis;
}

}  // namespace

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) {
    throw DimensionError("concat: no operands");
  }
  const DType dt = parts[0].dtype();
  const int rank = parts[0].rank();
  axis = norm_axis("concat", axis, rank);
  Shape shape = parts[0].shape();
  shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    if (p.dtype() != dt || p.rank() != rank) {
      throw DimensionError("concat: incompatible operand " + shape_str(p.shape()));
    }
    for (int i = 0; i < rank; ++i) {
      if (i != axis && p.shape()[static_cast<std::size_t>(i)] != parts[0].shape()[static_cast<std::size_t>(i)]) {
        throw DimensionError("concat: " + two_shapes(parts[0], p));
      }
    }
    shape[static_cast<std::size_t>(axis)] += p.shape()[static_cast<std::size_t>(axis)];
  }
  auto out = make_node(shape, dt, "concat");
  const auto [outer, total_chunk] = split_at(shape, axis);
  std::vector<std::int64_t> chunks;
  for (const auto& p : parts) {
    chunks.push_back(split_at(p.shape(), axis).second);
  }
  dispatch(dt, [&]<class T>() {
    auto& o = out->values<T>();
    std::int64_t offset = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      auto in = parts[pi].data<T>();
      for (std::int64_t r = 0; r < outer; ++r) {
        std::copy_n(in.data() + r * chunks[pi], chunks[pi], o.data() + r * total_chunk + offset);
      }
      offset += chunks[pi];
    }
  });
  bool any = false;
  for (const auto& p : parts) {
    any = any || needs_grad({&p});
  }
  if (any) {
    std::vector<NodePtr> nodes;
    for (const auto& p : parts) {
      nodes.push_back(p.node_ptr());
    }
    attach(out, nodes, [nodes, chunks, outer = outer, total_chunk = total_chunk](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        const auto& g = self.grads<T>();
        std::int64_t offset = 0;
        for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
          if (nodes[pi]->requires_grad) {
            auto gp = nodes[pi]->grad_buffer<T>();
            for (std::int64_t r = 0; r < outer; ++r) {
              for (std::int64_t i = 0; i < chunks[pi]; ++i) {
                gp[static_cast<std::size_t>(r * chunks[pi] + i)] +=
                    g[static_cast<std::size_t>(r * total_chunk + offset + i)];
              }
            }
          }
          offset += chunks[pi];
        }
      });
    });
  }
  return Tensor(out);
}

Tensor slice(const Tensor& x, int axis, std::int64_t begin, std::int64_t end) {
  const DType dt = common_dtype("slice", {&x});
  axis = norm_axis("slice", axis, x.rank());
  const std::int64_t extent = x.shape()[static_cast<std::size_t>(axis)];
  if (begin < 0 || end > extent || begin > end) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside extent " + std::to_string(extent) + " of " + shape_str(x.shape()));
  }
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(axis)] = end - begin;
  auto out = make_node(shape, dt, "slice");
  const auto [outer, src_chunk] = split_at(x.shape(), axis);
  const std::int64_t dst_chunk = split_at(shape, axis).second;
  const std::int64_t stride = extent == 0 ? 0 : src_chunk / extent;
  const std::int64_t offset = begin * stride;
  dispatch(dt, [&]<class T>() {
    auto in = x.data<T>();
    auto& o = out->values<T>();
    for (std::int64_t r = 0; r < outer; ++r) {
      std::copy_n(in.data() + r * src_chunk + offset, dst_chunk, o.data() + r * dst_chunk);
    }
  });
  if (needs_grad({&x})) {
    NodePtr xn = x.node_ptr();
    attach(out, {xn}, [xn, outer = outer, src_chunk = src_chunk, dst_chunk, offset](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        const auto& g = self.grads<T>();
        auto gx = xn->grad_buffer<T>();
        for (std::int64_t r = 0; r < outer; ++r) {
          for (std::int64_t i = 0; i < dst_chunk; ++i) {
            gx[static_cast<std::size_t>(r * src_chunk + offset + i)] += g[static_cast<std::size_t>(r * dst_chunk + i)];
          }
        }
      });
    });
  }
  return Tensor(out);
}

Tensor sum(const Tensor& x) {
  const DType dt = common_dtype("sum", {&x});
  auto out = make_node({}, dt, "sum");
  dispatch(dt, [&]<class T>() {
    T s = 0;
    for (T v : x.data<T>()) {
      s += v;
    }
    out->values<T>()[0] = s;
  });
  if (needs_grad({&x})) {
    NodePtr xn = x.node_ptr();
    attach(out, {xn}, [xn](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        const T g = self.grads<T>()[0];
        for (auto& v : xn->grad_buffer<T>()) {
          v += g;
        }
      });
    });
  }
  return Tensor(out);
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) {
    throw DimensionError("mean: empty tensor");
  }
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor l1(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("l1: " + two_shapes(a, b));
  }
  return mean(abs(sub(a, b)));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mse: " + two_shapes(a, b));
  }
  return mean(square(sub(a, b)));
}

Tensor mean_rows(const Tensor& x) {
  const DType dt = common_dtype("mean_rows", {&x});
  require_rank("mean_rows", x, 2);
  const std::int64_t m = x.dim(0), n = x.dim(1);
  if (m == 0) {
    throw DimensionError("mean_rows: no rows");
  }
  auto out = make_node({n}, dt, "mean_rows");
  dispatch(dt, [&]<class T>() {
    auto in = x.data<T>();
    auto& o = out->values<T>();
    for (std::int64_t r = 0; r < m; ++r) {
      for (std::int64_t j = 0; j < n; ++j) {
        o[static_cast<std::size_t>(j)] += in[static_cast<std::size_t>(r * n + j)];
      }
    }
    for (auto& v : o) {
      v /= static_cast<T>(m);
    }
  });
  if (needs_grad({&x})) {
    NodePtr xn = x.node_ptr();
    attach(out, {xn}, [xn, m, n](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        const auto& g = self.grads<T>();
        auto gx = xn->grad_buffer<T>();
        for (std::int64_t r = 0; r < m; ++r) {
          for (std::int64_t j = 0; j < n; ++j) {
            gx[static_cast<std::size_t>(r * n + j)] += g[static_cast<std::size_t>(j)] / static_cast<T>(m);
          }
        }
      });
    });
  }
  return Tensor(out);
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const DType dt = common_dtype("conv2d", {&x, &weight, &bias});
  require_rank("conv2d", x, 3);
  require_rank("conv2d", weight, 4);
  const std::int64_t h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  const std::int64_t k = weight.dim(0), cout = weight.dim(3);
  if (k != 1 && k != 3) {
    throw ConfigError("conv2d: kernel size must be 1 or 3, got " + std::to_string(k));
  }
  if (weight.dim(1) != k || weight.dim(2) != cin || bias.numel() != cout) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) +
                         ", bias " + shape_str(bias.shape()));
  }
  const std::int64_t pad = k / 2;
  const std::int64_t patch = k * k * cin;
  const std::int64_t pixels = h * w;
  auto out = make_node({h, w, cout}, dt, "conv2d");
  auto cols = std::make_shared<Node>();
  cols->dtype = dt;
  dispatch(dt, [&]<class T>() {
    auto in = x.data<T>();
    auto& c = cols->values<T>();
    c.assign(static_cast<std::size_t>(pixels * patch), T(0));
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t xx = 0; xx < w; ++xx) {
        T* row = c.data() + (y * w + xx) * patch;
        for (std::int64_t ky = 0; ky < k; ++ky) {
          const std::int64_t sy = y + ky - pad;
          if (sy < 0 || sy >= h) {
            continue;
          }
          for (std::int64_t kx = 0; kx < k; ++kx) {
            const std::int64_t sx = xx + kx - pad;
            if (sx < 0 || sx >= w) {
              continue;
            }
            std::copy_n(in.data() + (sy * w + sx) * cin, cin, row + (ky * k + kx) * cin);
          }
        }
      }
    }
    auto& o = out->values<T>();
    auto b = bias.data<T>();
    for (std::int64_t p = 0; p < pixels; ++p) {
      std::copy(b.begin(), b.end(), o.begin() + p * cout);
    }
    kernel::gemm<T>(pixels, patch, cout, c.data(), weight.data<T>().data(), o.data(), true);
  });
  if (needs_grad({&x, &weight, &bias})) {
    NodePtr xn = x.node_ptr(), wn = weight.node_ptr(), bn = bias.node_ptr();
    attach(out, {xn, wn, bn}, [=](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        const T* g = self.grads<T>().data();
        const auto& c = cols->values<T>();
        if (bn->requires_grad) {
          auto gb = bn->grad_buffer<T>();
          for (std::int64_t p = 0; p < pixels; ++p) {
            for (std::int64_t o = 0; o < cout; ++o) {
              gb[static_cast<std::size_t>(o)] += g[p * cout + o];
            }
          }
        }
        if (wn->requires_grad) {
          Buf<T> ct(static_cast<std::size_t>(pixels * patch));
          kernel::transpose<T>(pixels, patch, c.data(), ct.data());
          kernel::gemm<T>(patch, pixels, cout, ct.data(), g, wn->grad_buffer<T>().data(), true);
        }
        if (xn->requires_grad) {
          Buf<T> wt(static_cast<std::size_t>(patch * cout));
          kernel::transpose<T>(patch, cout, wn->values<T>().data(), wt.data());
          Buf<T> dcols(static_cast<std::size_t>(pixels * patch));
          kernel::gemm<T>(pixels, cout, patch, g, wt.data(), dcols.data(), false);
          auto gx = xn->grad_buffer<T>();
          for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t xx = 0; xx < w; ++xx) {
              const T* row = dcols.data() + (y * w + xx) * patch;
              for (std::int64_t ky = 0; ky < k; ++ky) {
                const std::int64_t sy = y + ky - pad;
                if (sy < 0 || sy >= h) {
                  continue;
                }
                for (std::int64_t kx = 0; kx < k; ++kx) {
                  const std::int64_t sx = xx + kx - pad;
                  if (sx < 0 || sx >= w) {
                    continue;
                  }
                  T* dst = gx.data() + (sy * w + sx) * cin;
                  const T* src = row + (ky * k + kx) * cin;
                  for (std::int64_t ci = 0; ci < cin; ++ci) {
                    dst[ci] += src[ci];
                  }
                }
              }
            }
          }
        }
      });
    });
  }
  return Tensor(out);
}

Tensor expand_last(const Tensor& x, std::int64_t n) {
  const DType dt = common_dtype("expand_last", {&x});
  if (x.rank() == 0 || x.shape().back() != 1 || n < 1) {
    throw DimensionError("expand_last: " + shape_str(x.shape()) + " has no unit trailing axis to repeat " +
                         std::to_string(n) + " times");
  }
  Shape shape = x.shape();
  shape.back() = n;
  const std::int64_t rows = x.numel();
  auto out = make_node(shape, dt, "expand_last");
  dispatch(dt, [&]<class T>() {
    auto in = x.data<T>();
    auto& o = out->values<T>();
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t j = 0; j < n; ++j) {
        o[static_cast<std::size_t>(r * n + j)] = in[static_cast<std::size_t>(r)];
      }
    }
  });
  if (needs_grad({&x})) {
    NodePtr xn = x.node_ptr();
    attach(out, {xn}, [=](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        const auto& g = self.grads<T>();
        auto gx = xn->grad_buffer<T>();
        for (std::int64_t r = 0; r < rows; ++r) {
          T acc = 0;
          for (std::int64_t j = 0; j < n; ++j) {
            acc += g[static_cast<std::size_t>(r * n + j)];
          }
          gx[static_cast<std::size_t>(r)] += acc;
        }
      });
    });
  }
  return Tensor(out);
}

Tensor avg_pool2d(const Tensor& x, std::int64_t factor) {
  const DType dt = common_dtype("avg_pool2d", {&x});
  require_rank("avg_pool2d", x, 3);
  const std::int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (factor < 1 || h % factor != 0 || w % factor != 0) {
    throw DimensionError("avg_pool2d: factor " + std::to_string(factor) + " does not divide " +
                         shape_str(x.shape()));
  }
  const std::int64_t oh = h / factor, ow = w / factor;
  auto out = make_node({oh, ow, c}, dt, "avg_pool2d");
  const double inv = 1.0 / static_cast<double>(factor * factor);
  dispatch(dt, [&]<class T>() {
    auto in = x.data<T>();
    auto& o = out->values<T>();
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t xx = 0; xx < w; ++xx) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
          o[static_cast<std::size_t>(((y / factor) * ow + xx / factor) * c + ch)] +=
              in[static_cast<std::size_t>((y * w + xx) * c + ch)];
        }
      }
    }
    for (auto& v : o) {
      v *= static_cast<T>(inv);
    }
  });
  if (needs_grad({&x})) {
    NodePtr xn = x.node_ptr();
    attach(out, {xn}, [=](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        const auto& g = self.grads<T>();
        auto gx = xn->grad_buffer<T>();
        for (std::int64_t y = 0; y < h; ++y) {
          for (std::int64_t xx = 0; xx < w; ++xx) {
            for (std::int64_t ch = 0; ch < c; ++ch) {
              gx[static_cast<std::size_t>((y * w + xx) * c + ch)] +=
                  g[static_cast<std::size_t>(((y / factor) * ow + xx / factor) * c + ch)] * static_cast<T>(inv);
            }
          }
        }
      });
    });
  }
  return Tensor(out);
}

Tensor sobel(const Tensor& x) {
  const DType dt = common_dtype("sobel", {&x});
  require_rank("sobel", x, 3);
  const std::int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (h < 3 || w < 3) {
    throw DimensionError("sobel: need at least 3x3, got " + shape_str(x.shape()));
  }
  const std::int64_t oh = h - 2, ow = w - 2;
  static constexpr int kGx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  static constexpr int kGy[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  auto out = make_node({oh, ow, c, 2}, dt, "sobel");
  dispatch(dt, [&]<class T>() {
    auto in = x.data<T>();
    auto& o = out->values<T>();
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t xx = 0; xx < ow; ++xx) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
          T gx = 0, gy = 0;
          for (int dy = 0; dy < 3; ++dy) {
            for (int dx = 0; dx < 3; ++dx) {
              const T v = in[static_cast<std::size_t>(((y + dy) * w + xx + dx) * c + ch)];
              gx += static_cast<T>(kGx[dy][dx]) * v;
              gy += static_cast<T>(kGy[dy][dx]) * v;
            }
          }
          const auto base = static_cast<std::size_t>(((y * ow + xx) * c + ch) * 2);
          o[base] = gx;
          o[base + 1] = gy;
        }
      }
    }
  });
  if (needs_grad({&x})) {
    NodePtr xn = x.node_ptr();
    attach(out, {xn}, [=](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        const auto& g = self.grads<T>();
        auto gx = xn->grad_buffer<T>();
        for (std::int64_t y = 0; y < oh; ++y) {
          for (std::int64_t xx = 0; xx < ow; ++xx) {
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const auto base = static_cast<std::size_t>(((y * ow + xx) * c + ch) * 2);
              for (int dy = 0; dy < 3; ++dy) {
                for (int dx = 0; dx < 3; ++dx) {
                  gx[static_cast<std::size_t>(((y + dy) * w + xx + dx) * c + ch)] +=
                      static_cast<T>(kGx[dy][dx]) * g[base] + static_cast<T>(kGy[dy][dx]) * g[base + 1];
                }
              }
            }
          }
        }
      });
    });
  }
  return Tensor(out);
}

namespace {

// Flat index of (token, within-patch offset) in an [H x W x C] map.
struct PatchIndex {
  std::int64_t rows, cols, patch, channels;
  std::int64_t image_index(std::int64_t token, std::int64_t j) const {
    const std::int64_t pr = token / cols, pc = token % cols;
    const std::int64_t ch = j % channels;
    const std::int64_t pix = j / channels;
    const std::int64_t py = pix / patch, px = pix % patch;
    const std::int64_t y = pr * patch + py, x = pc * patch + px;
    return (y * cols * patch + x) * channels + ch;
  }
};

Tensor permute_patches(const char* name, const Tensor& src, const Shape& out_shape, const PatchIndex& idx,
                       bool to_patches) {
  const DType dt = common_dtype(name, {&src});
  auto out = make_node(out_shape, dt, name);
  const std::int64_t tokens = idx.rows * idx.cols;
  const std::int64_t width = idx.patch * idx.patch * idx.channels;
  dispatch(dt, [&]<class T>() {
    auto in = src.data<T>();
    auto& o = out->values<T>();
    for (std::int64_t t = 0; t < tokens; ++t) {
      for (std::int64_t j = 0; j < width; ++j) {
        const auto pi = static_cast<std::size_t>(t * width + j);
        const auto ii = static_cast<std::size_t>(idx.image_index(t, j));
        if (to_patches) {
          o[pi] = in[ii];
        } else {
          o[ii] = in[pi];
        }
      }
    }
  });
  if (needs_grad({&src})) {
    NodePtr sn = src.node_ptr();
    attach(out, {sn}, [=](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        const auto& g = self.grads<T>();
        auto gs = sn->grad_buffer<T>();
        for (std::int64_t t = 0; t < tokens; ++t) {
          for (std::int64_t j = 0; j < width; ++j) {
            const auto pi = static_cast<std::size_t>(t * width + j);
            const auto ii = static_cast<std::size_t>(idx.image_index(t, j));
            if (to_patches) {
              gs[ii] += g[pi];
            } else {
              gs[pi] += g[ii];
            }
          }
        }
      });
    });
  }
  return Tensor(out);
}

}  // namespace

Tensor patchify(const Tensor& image, std::int64_t patch) {
  require_rank("patchify", image, 3);
  const std::int64_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (patch < 1 || h % patch != 0 || w % patch != 0) {
    throw ConfigError("patchify: resolution " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by patch size " + std::to_string(patch));
  }
  PatchIndex idx{h / patch, w / patch, patch, c};
  return permute_patches("patchify", image, {idx.rows * idx.cols, patch * patch * c}, idx, true);
}

Tensor unpatchify(const Tensor& patches, std::int64_t rows, std::int64_t cols, std::int64_t patch) {
  require_rank("unpatchify", patches, 2);
  if (patches.dim(0) != rows * cols) {
    throw DimensionError("unpatchify: " + std::to_string(patches.dim(0)) + " patches for a " +
                         std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  }
  const std::int64_t width = patches.dim(1);
  if (width % (patch * patch) != 0) {
    throw DimensionError("unpatchify: patch width " + std::to_string(width) + " not a multiple of " +
                         std::to_string(patch * patch));
  }
  const std::int64_t c = width / (patch * patch);
  PatchIndex idx{rows, cols, patch, c};
  return permute_patches("unpatchify", patches, {rows * patch, cols * patch, c}, idx, false);
}

}  // namespace cnvs
