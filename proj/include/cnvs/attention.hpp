#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cnvs/checkpoint.hpp"
#include "cnvs/random.hpp"
#include "cnvs/tensor.hpp"

namespace cnvs {

enum class AttnKind : std::uint8_t { full = 0, linear = 1 };

const char* attn_kind_name(AttnKind kind);
/// Accepts "full"/"F" and "linear"/"L"; anything else is a ConfigError.
AttnKind parse_attn_kind(const std::string& text);

/// Per-layer attention kernel assignment.
struct AttnLayout {
  std::vector<AttnKind> kinds;
  int group_size = 6;

  static AttnLayout all_full(int layers, int group_size);
  int size() const { return static_cast<int>(kinds.size()); }
  int count(AttnKind kind) const;
  std::vector<int> indices_of(AttnKind kind) const;
  /// Compact form such as "FFFFFL..." (one letter per layer).
  std::string to_string() const;
  bool operator==(const AttnLayout&) const = default;
};

enum class LinearNorm { normalized, unnormalized };

/// Multi-head softmax attention. Q, K, V are [n x d]; head h owns columns
/// [h*d/heads, (h+1)*d/heads). Scores are scaled by 1/sqrt(d/heads).
Tensor full_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads = 1);

/// Multi-head kernelized attention with phi(x) = elu(x) + 1:
///   out_i = phi(q_i) S / (phi(q_i) . z + eps),  S = sum_j phi(k_j) v_j^T,  z = sum_j phi(k_j).
/// Runs in O(n d^2 / heads) and never forms an n x n matrix. The unnormalized form drops the
/// denominator.
Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads = 1,
                        LinearNorm norm = LinearNorm::normalized, double eps = 1e-6);

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, AttnKind kind);

struct TransformerBlockParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, bq, wk, bk, wv, bv;
  Tensor wo, bo;
  Tensor ln2_gamma, ln2_beta;
  Tensor w1, b1, w2, b2;
  int heads = 1;

  /// Gaussian init (std 0.02); output projections scaled by `out_scale`.
  static TransformerBlockParams init(std::int64_t d, int heads, Rng& rng, DType dtype, double out_scale = 1.0);
  std::int64_t dim() const { return wq.dim(0); }
  void append_named(const std::string& prefix, NamedTensors& out) const;
  std::vector<Tensor*> tensors();
};

/// Pre-norm residual block: x + Attn(LN(x)), then + FFN(LN(.)) with a 4x GELU expansion.
Tensor transformer_block(const Tensor& x, const TransformerBlockParams& params, AttnKind kind);

struct BenchRow {
  AttnKind kind;
  std::int64_t n;
  std::int64_t d;
  int heads;
  double mean_s;
  double stddev_s;
  std::int64_t peak_bytes;
};

/// Times the attention kernel alone on random [n x d] inputs, single-threaded, no graph.
/// `peak_bytes` is the tracked allocation high-water mark during one call, excluding the
/// inputs and the output tensor.
std::vector<BenchRow> bench_scaling(AttnKind kind, const std::vector<std::int64_t>& n_list, std::int64_t d, int heads,
                                    int repeats, std::uint64_t seed = 7);
/// CSV with header `kernel,n,d,heads,mean_s,stddev_s,peak_bytes`.
std::string bench_csv(const std::vector<BenchRow>& rows, bool header = true);

}  // namespace cnvs
