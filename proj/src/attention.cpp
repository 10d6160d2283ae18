#include "cnvs/attention.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "cnvs/ops.hpp"
#include "gemm.hpp"

namespace cnvs {

using detail::attach;
using detail::common_dtype;
using detail::make_node;
using detail::needs_grad;

const char* attn_kind_name(AttnKind kind) {
  switch (kind) {
    case AttnKind::full: return "full";
    case AttnKind::linear: return "linear";
  }
  throw ConfigError("unknown attention kernel tag " + std::to_string(static_cast<int>(kind)));
}

AttnKind parse_attn_kind(const std::string& text) {
  if (text == "full" || text == "F") {
    return AttnKind::full;
  }
  if (text == "linear" || text == "L") {
    return AttnKind::linear;
  }
  throw ConfigError("unknown attention kernel '" + text + "'");
}

AttnLayout AttnLayout::all_full(int layers, int group_size) {
  return {std::vector<AttnKind>(static_cast<std::size_t>(layers), AttnKind::full), group_size};
}

int AttnLayout::count(AttnKind kind) const {
  return static_cast<int>(std::count(kinds.begin(), kinds.end(), kind));
}

std::vector<int> AttnLayout::indices_of(AttnKind kind) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (kinds[static_cast<std::size_t>(i)] == kind) {
      out.push_back(i);
    }
  }
  return out;
}

std::string AttnLayout::to_string() const {
  std::string s;
  for (auto k : kinds) {
    s += k == AttnKind::full ? 'F' : 'L';
  }
  return s;
}

namespace {

struct HeadGeometry {
  std::int64_t n;   // query rows
  std::int64_t m;   // key/value rows
  std::int64_t d;   // model width
  std::int64_t dh;  // head width
  int heads;
};

HeadGeometry check_qkv(const char* op, const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw DimensionError(std::string(op) + ": Q, K, V must be rank 2");
  }
  if (q.dim(1) != k.dim(1) || k.dim(1) != v.dim(1) || k.dim(0) != v.dim(0)) {
    throw DimensionError(std::string(op) + ": Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) + ", V " +
                         shape_str(v.shape()));
  }
  if (heads < 1 || q.dim(1) % heads != 0) {
    throw ConfigError(std::string(op) + ": width " + std::to_string(q.dim(1)) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (k.dim(0) < 1) {
    throw DimensionError(std::string(op) + ": no keys");
  }
  return {q.dim(0), k.dim(0), q.dim(1), q.dim(1) / heads, heads};
}

// Copies head columns [h*dh, (h+1)*dh) of a [rows x d] matrix into a dense [rows x dh] block.
template <class T>
void gather_head(const T* src, std::int64_t rows, std::int64_t d, std::int64_t dh, int h, T* dst) {
  for (std::int64_t r = 0; r < rows; ++r) {
    std::copy_n(src + r * d + h * dh, dh, dst + r * dh);
  }
}

template <class T>
void scatter_head(const T* src, std::int64_t rows, std::int64_t d, std::int64_t dh, int h, T* dst, bool add) {
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < dh; ++c) {
      if (add) {
        dst[r * d + h * dh + c] += src[r * dh + c];
      } else {
        dst[r * d + h * dh + c] = src[r * dh + c];
      }
    }
  }
}

template <class T>
inline T phi(T x) {
  return x > T(0) ? x + T(1) : std::exp(x);
}

template <class T>
inline T phi_grad(T x) {
  return x > T(0) ? T(1) : std::exp(x);
}

}  // namespace

Tensor full_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  const DType dt = common_dtype("full_attention", {&q, &k, &v});
  const HeadGeometry g = check_qkv("full_attention", q, k, v, heads);
  auto out = make_node({g.n, g.d}, dt, "full_attention");
  const bool record = needs_grad({&q, &k, &v});
  auto saved = std::make_shared<Node>();  // softmax weights per head, [heads x n x m]
  saved->dtype = dt;
  dispatch(dt, [&]<class T>() {
    const double scale = 1.0 / std::sqrt(static_cast<double>(g.dh));
    Buf<T> qh(static_cast<std::size_t>(g.n * g.dh)), kh(static_cast<std::size_t>(g.m * g.dh)),
        kt(static_cast<std::size_t>(g.dh * g.m)), vh(static_cast<std::size_t>(g.m * g.dh)),
        oh(static_cast<std::size_t>(g.n * g.dh)), scores(static_cast<std::size_t>(g.n * g.m));
    if (record) {
      saved->values<T>().resize(static_cast<std::size_t>(heads * g.n * g.m));
    }
    for (int h = 0; h < heads; ++h) {
      gather_head(q.data<T>().data(), g.n, g.d, g.dh, h, qh.data());
      gather_head(k.data<T>().data(), g.m, g.d, g.dh, h, kh.data());
      gather_head(v.data<T>().data(), g.m, g.d, g.dh, h, vh.data());
      kernel::transpose<T>(g.m, g.dh, kh.data(), kt.data());
      kernel::gemm<T>(g.n, g.dh, g.m, qh.data(), kt.data(), scores.data(), false);
      for (std::int64_t i = 0; i < g.n; ++i) {
        T* row = scores.data() + i * g.m;
        T mx = row[0] * static_cast<T>(scale);
        for (std::int64_t j = 0; j < g.m; ++j) {
          row[j] *= static_cast<T>(scale);
          mx = std::max(mx, row[j]);
        }
        T s = 0;
        for (std::int64_t j = 0; j < g.m; ++j) {
          row[j] = std::exp(row[j] - mx);
          s += row[j];
        }
        for (std::int64_t j = 0; j < g.m; ++j) {
          row[j] /= s;
        }
      }
      kernel::gemm<T>(g.n, g.m, g.dh, scores.data(), vh.data(), oh.data(), false);
      scatter_head(oh.data(), g.n, g.d, g.dh, h, out->values<T>().data(), false);
      if (record) {
        std::copy(scores.begin(), scores.end(), saved->values<T>().begin() + h * g.n * g.m);
      }
    }
  });
  if (record) {
    auto qn = q.node_ptr(), kn = k.node_ptr(), vn = v.node_ptr();
    attach(out, {qn, kn, vn}, [qn, kn, vn, saved, g](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(g.dh)));
        const auto sn = static_cast<std::size_t>(g.n), sm = static_cast<std::size_t>(g.m),
                   sdh = static_cast<std::size_t>(g.dh);
        Buf<T> qh(sn * sdh), kh(sm * sdh), vh(sm * sdh), vt(sdh * sm), doh(sn * sdh), pt(sm * sn), dp(sn * sm),
            dst(sm * sn), tmp_q(sn * sdh), tmp_k(sm * sdh), tmp_v(sm * sdh);
        for (int h = 0; h < g.heads; ++h) {
          const T* p = saved->values<T>().data() + h * g.n * g.m;
          gather_head(qn->values<T>().data(), g.n, g.d, g.dh, h, qh.data());
          gather_head(kn->values<T>().data(), g.m, g.d, g.dh, h, kh.data());
          gather_head(vn->values<T>().data(), g.m, g.d, g.dh, h, vh.data());
          gather_head(self.grads<T>().data(), g.n, g.d, g.dh, h, doh.data());
          if (vn->requires_grad) {
            kernel::transpose<T>(g.n, g.m, p, pt.data());
            kernel::gemm<T>(g.m, g.n, g.dh, pt.data(), doh.data(), tmp_v.data(), false);
            scatter_head(tmp_v.data(), g.m, g.d, g.dh, h, vn->grad_buffer<T>().data(), true);
          }
          if (!qn->requires_grad && !kn->requires_grad) {
            continue;
          }
          kernel::transpose<T>(g.m, g.dh, vh.data(), vt.data());
          kernel::gemm<T>(g.n, g.dh, g.m, doh.data(), vt.data(), dp.data(), false);
          for (std::int64_t i = 0; i < g.n; ++i) {
            T dot = 0;
            for (std::int64_t j = 0; j < g.m; ++j) {
              dot += dp[static_cast<std::size_t>(i * g.m + j)] * p[i * g.m + j];
            }
            for (std::int64_t j = 0; j < g.m; ++j) {
              auto& x = dp[static_cast<std::size_t>(i * g.m + j)];
              x = p[i * g.m + j] * (x - dot) * scale;
            }
          }
          if (qn->requires_grad) {
            kernel::gemm<T>(g.n, g.m, g.dh, dp.data(), kh.data(), tmp_q.data(), false);
            scatter_head(tmp_q.data(), g.n, g.d, g.dh, h, qn->grad_buffer<T>().data(), true);
          }
          if (kn->requires_grad) {
            kernel::transpose<T>(g.n, g.m, dp.data(), dst.data());
            kernel::gemm<T>(g.m, g.n, g.dh, dst.data(), qh.data(), tmp_k.data(), false);
            scatter_head(tmp_k.data(), g.m, g.d, g.dh, h, kn->grad_buffer<T>().data(), true);
          }
        }
      });
    });
  }
  return Tensor(out);
}

namespace {

// Adds key j's contribution to one head's summaries S += phi(k_j) v_j^T, z += phi(k_j).
template <class T>
void add_key(const T* kj, const T* vj, std::int64_t dh, T* s, T* z, T* phik) {
  for (std::int64_t r = 0; r < dh; ++r) {
    phik[r] = phi(kj[r]);
    z[r] += phik[r];
  }
  for (std::int64_t r = 0; r < dh; ++r) {
    T* srow = s + r * dh;
    const T b = phik[r];
    for (std::int64_t c = 0; c < dh; ++c) {
      srow[c] += b * vj[c];
    }
  }
}

// Key/value summaries of one head: S = sum_j phi(k_j) v_j^T and z = sum_j phi(k_j),
// accumulated in key order.
template <class T>
void linear_summaries(const T* k, const T* v, const HeadGeometry& g, int h, T* s, T* z, T* phik) {
  std::fill(s, s + g.dh * g.dh, T(0));
  std::fill(z, z + g.dh, T(0));
  for (std::int64_t j = 0; j < g.m; ++j) {
    add_key(k + j * g.d + h * g.dh, v + j * g.d + h * g.dh, g.dh, s, z, phik);
  }
}

// Query-side evaluation of one row; returns the denominator (1 when unnormalized).
template <class T>
T linear_row(const T* qi, const T* s, const T* z, const HeadGeometry& g, bool normalized, T eps, T* phiq, T* num) {
  std::fill(num, num + g.dh, T(0));
  T den = 0;
  for (std::int64_t r = 0; r < g.dh; ++r) {
    phiq[r] = phi(qi[r]);
    den += phiq[r] * z[r];
    const T a = phiq[r];
    const T* srow = s + r * g.dh;
    for (std::int64_t c = 0; c < g.dh; ++c) {
      num[c] += a * srow[c];
    }
  }
  return normalized ? den + eps : T(1);
}

}  // namespace

Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, LinearNorm norm, double eps) {
  const DType dt = common_dtype("linear_attention", {&q, &k, &v});
  const HeadGeometry g = check_qkv("linear_attention", q, k, v, heads);
  const bool normalized = norm == LinearNorm::normalized;
  auto out = make_node({g.n, g.d}, dt, "linear_attention");
  dispatch(dt, [&]<class T>() {
    // Row-major sweeps over all heads at once: each row of Q, K, V is read a single time.
    const auto sdh = static_cast<std::size_t>(g.dh), sq = sdh * sdh;
    Buf<T> s(sq * static_cast<std::size_t>(heads)), z(sdh * static_cast<std::size_t>(heads)), phik(sdh), phiq(sdh),
        num(sdh);
    std::fill(s.begin(), s.end(), T(0));
    std::fill(z.begin(), z.end(), T(0));
    const T *qd = q.data<T>().data(), *kd = k.data<T>().data(), *vd = v.data<T>().data();
    T* od = out->values<T>().data();
    for (std::int64_t j = 0; j < g.m; ++j) {
      for (int h = 0; h < heads; ++h) {
        add_key(kd + j * g.d + h * g.dh, vd + j * g.d + h * g.dh, g.dh, s.data() + h * sq, z.data() + h * sdh,
                phik.data());
      }
    }
    for (std::int64_t i = 0; i < g.n; ++i) {
      for (int h = 0; h < heads; ++h) {
        const T den = linear_row(qd + i * g.d + h * g.dh, s.data() + h * sq, z.data() + h * sdh, g, normalized,
                                 static_cast<T>(eps), phiq.data(), num.data());
        T* oi = od + i * g.d + h * g.dh;
        for (std::int64_t c = 0; c < g.dh; ++c) {
          oi[c] = num[static_cast<std::size_t>(c)] / den;
        }
      }
    }
  });
  if (needs_grad({&q, &k, &v})) {
    auto qn = q.node_ptr(), kn = k.node_ptr(), vn = v.node_ptr();
    attach(out, {qn, kn, vn}, [qn, kn, vn, g, normalized, eps](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        const auto sdh = static_cast<std::size_t>(g.dh);
        Buf<T> s(sdh * sdh), z(sdh), phik(sdh), phiq(sdh), num(sdh), ds(sdh * sdh), dz(sdh), dnum(sdh), db(sdh);
        const T* qd = qn->values<T>().data();
        const T* kd = kn->values<T>().data();
        const T* vd = vn->values<T>().data();
        const T* go = self.grads<T>().data();
        const T* od = self.values<T>().data();
        T* gq = qn->requires_grad ? qn->grad_buffer<T>().data() : nullptr;
        T* gk = kn->requires_grad ? kn->grad_buffer<T>().data() : nullptr;
        T* gv = vn->requires_grad ? vn->grad_buffer<T>().data() : nullptr;
        for (int h = 0; h < g.heads; ++h) {
          linear_summaries(kd, vd, g, h, s.data(), z.data(), phik.data());
          std::fill(ds.begin(), ds.end(), T(0));
          std::fill(dz.begin(), dz.end(), T(0));
          for (std::int64_t i = 0; i < g.n; ++i) {
            const T* qi = qd + i * g.d + h * g.dh;
            const T den = linear_row(qi, s.data(), z.data(), g, normalized, static_cast<T>(eps), phiq.data(), num.data());
            const T* goi = go + i * g.d + h * g.dh;
            const T* oi = od + i * g.d + h * g.dh;
            T dden = 0;
            for (std::int64_t c = 0; c < g.dh; ++c) {
              dnum[static_cast<std::size_t>(c)] = goi[c] / den;
              dden -= goi[c] * oi[c];
            }
            dden /= den;
            for (std::int64_t r = 0; r < g.dh; ++r) {
              const T* srow = s.data() + r * g.dh;
              T* dsrow = ds.data() + r * g.dh;
              const T a = phiq[static_cast<std::size_t>(r)];
              T da = 0;
              for (std::int64_t c = 0; c < g.dh; ++c) {
                da += srow[c] * dnum[static_cast<std::size_t>(c)];
                dsrow[c] += a * dnum[static_cast<std::size_t>(c)];
              }
              if (normalized) {
                da += dden * z[static_cast<std::size_t>(r)];
                dz[static_cast<std::size_t>(r)] += a * dden;
              }
              if (gq) {
                gq[i * g.d + h * g.dh + r] += da * phi_grad(qi[r]);
              }
            }
          }
          for (std::int64_t j = 0; j < g.m; ++j) {
            const T* kj = kd + j * g.d + h * g.dh;
            const T* vj = vd + j * g.d + h * g.dh;
            for (std::int64_t r = 0; r < g.dh; ++r) {
              const T* dsrow = ds.data() + r * g.dh;
              T acc = normalized ? dz[static_cast<std::size_t>(r)] : T(0);
              for (std::int64_t c = 0; c < g.dh; ++c) {
                acc += dsrow[c] * vj[c];
              }
              db[static_cast<std::size_t>(r)] = acc;
              if (gk) {
                gk[j * g.d + h * g.dh + r] += acc * phi_grad(kj[r]);
              }
            }
            if (gv) {
              T* gvj = gv + j * g.d + h * g.dh;
              for (std::int64_t r = 0; r < g.dh; ++r) {
                const T b = phi(kj[r]);
                const T* dsrow = ds.data() + r * g.dh;
                for (std::int64_t c = 0; c < g.dh; ++c) {
                  gvj[c] += b * dsrow[c];
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

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, AttnKind kind) {
  switch (kind) {
    case AttnKind::full: return full_attention(q, k, v, heads);
    case AttnKind::linear: return linear_attention(q, k, v, heads);
  }
  throw ConfigError("unknown attention kernel tag " + std::to_string(static_cast<int>(kind)));
}

TransformerBlockParams TransformerBlockParams::init(std::int64_t d, int heads, Rng& rng, DType dtype,
                                                    double out_scale) {
  if (heads < 1 || d % heads != 0) {
    throw ConfigError("token width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  constexpr double kStd = 0.02;
  TransformerBlockParams p;
  p.heads = heads;
  p.ln1_gamma = param(Tensor::full({d}, 1.0, dtype));
  p.ln1_beta = param(Tensor::zeros({d}, dtype));
  p.wq = param(normal_tensor({d, d}, kStd, rng, dtype));
  p.bq = param(Tensor::zeros({d}, dtype));
  p.wk = param(normal_tensor({d, d}, kStd, rng, dtype));
  p.bk = param(Tensor::zeros({d}, dtype));
  p.wv = param(normal_tensor({d, d}, kStd, rng, dtype));
  p.bv = param(Tensor::zeros({d}, dtype));
  p.wo = param(normal_tensor({d, d}, kStd * out_scale, rng, dtype));
  p.bo = param(Tensor::zeros({d}, dtype));
  p.ln2_gamma = param(Tensor::full({d}, 1.0, dtype));
  p.ln2_beta = param(Tensor::zeros({d}, dtype));
  p.w1 = param(normal_tensor({d, 4 * d}, kStd, rng, dtype));
  p.b1 = param(Tensor::zeros({4 * d}, dtype));
  p.w2 = param(normal_tensor({4 * d, d}, kStd * out_scale, rng, dtype));
  p.b2 = param(Tensor::zeros({d}, dtype));
  return p;
}

std::vector<Tensor*> TransformerBlockParams::tensors() {
  return {&ln1_gamma, &ln1_beta, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln2_gamma, &ln2_beta, &w1, &b1, &w2, &b2};
}

void TransformerBlockParams::append_named(const std::string& prefix, NamedTensors& out) const {
  const std::pair<const char*, const Tensor*> items[] = {
      {"ln1.gamma", &ln1_gamma}, {"ln1.beta", &ln1_beta}, {"attn.wq", &wq},  {"attn.bq", &bq},
      {"attn.wk", &wk},          {"attn.bk", &bk},        {"attn.wv", &wv},  {"attn.bv", &bv},
      {"attn.wo", &wo},          {"attn.bo", &bo},        {"ln2.gamma", &ln2_gamma}, {"ln2.beta", &ln2_beta},
      {"ffn.w1", &w1},           {"ffn.b1", &b1},         {"ffn.w2", &w2},   {"ffn.b2", &b2}};
  for (const auto& [name, t] : items) {
    out.emplace_back(prefix + "." + name, *t);
  }
}

Tensor transformer_block(const Tensor& x, const TransformerBlockParams& p, AttnKind kind) {
  if (x.rank() != 2 || x.dim(1) != p.dim()) {
    throw DimensionError("transformer_block: tokens " + shape_str(x.shape()) + " for width " +
                         std::to_string(p.dim()));
  }
  // Validate the tag before doing any work.
  (void)attn_kind_name(kind);
  const Tensor h = layer_norm(x, p.ln1_gamma, p.ln1_beta);
  const Tensor q = add(matmul(h, p.wq), p.bq);
  const Tensor k = add(matmul(h, p.wk), p.bk);
  const Tensor v = add(matmul(h, p.wv), p.bv);
  const Tensor a = attention(q, k, v, p.heads, kind);
  const Tensor x1 = add(x, add(matmul(a, p.wo), p.bo));
  const Tensor h2 = layer_norm(x1, p.ln2_gamma, p.ln2_beta);
  const Tensor f = add(matmul(gelu(add(matmul(h2, p.w1), p.b1)), p.w2), p.b2);
  return add(x1, f);
}

std::vector<BenchRow> bench_scaling(AttnKind kind, const std::vector<std::int64_t>& n_list, std::int64_t d, int heads,
                                    int repeats, std::uint64_t seed) {
  for (std::size_t i = 1; i < n_list.size(); ++i) {
    if (n_list[i] <= n_list[i - 1]) {
      throw ConfigError("bench_scaling: n_list must be strictly ascending");
    }
  }
  repeats = std::max(repeats, 1);
  NoGradGuard no_grad;
  Rng rng(seed);
  std::vector<BenchRow> rows;
  for (auto n : n_list) {
    const Tensor q = normal_tensor({n, d}, 1.0, rng, DType::f32);
    const Tensor k = normal_tensor({n, d}, 1.0, rng, DType::f32);
    const Tensor v = normal_tensor({n, d}, 1.0, rng, DType::f32);
    (void)attention(q, k, v, heads, kind);  // warm-up

    memory::reset_peak();
    const auto base = memory::live_bytes();
    std::int64_t out_bytes = 0;
    {
      const Tensor o = attention(q, k, v, heads, kind);
      out_bytes = o.numel() * static_cast<std::int64_t>(sizeof(float));
    }
    const std::int64_t peak = memory::peak_bytes() - base - out_bytes;

    std::vector<double> times;
    for (int r = 0; r < repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const Tensor o = attention(q, k, v, heads, kind);
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    double mean = 0;
    for (double t : times) {
      mean += t;
    }
    mean /= static_cast<double>(times.size());
    double var = 0;
    for (double t : times) {
      var += (t - mean) * (t - mean);
    }
    const double stddev = times.size() > 1 ? std::sqrt(var / static_cast<double>(times.size() - 1)) : 0.0;
    rows.push_back({kind, n, d, heads, mean, stddev, peak});
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows, bool header) {
  std::ostringstream os;
  if (header) {
    os << "kernel,n,d,heads,mean_s,stddev_s,peak_bytes\n";
  }
  os.precision(9);
  for (const auto& r : rows) {
    os << attn_kind_name(r.kind) << ',' << r.n << ',' << r.d << ',' << r.heads << ',' << r.mean_s << ','
       << r.stddev_s << ',' << r.peak_bytes << '\n';
  }
  return os.str();
}

}  // namespace cnvs
