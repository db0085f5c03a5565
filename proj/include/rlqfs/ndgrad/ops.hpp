#pragma once
// Differentiable operations. Tensors are rank 0, 1 or 2; the only
// broadcasting is a trailing-dimension bias add.

#include <cstdint>
#include <span>
#include <vector>

#include "rlqfs/ndgrad/rng.hpp"
#include "rlqfs/ndgrad/tensor.hpp"

namespace rlqfs::nd {

using TokenId = std::int32_t;

Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// x[T x d] + b[d] on every row (also accepts x rank 1).
Tensor add_bias(const Tensor& x, const Tensor& b);

Tensor tanh(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);

// axis counts from 0; rank-1 inputs only accept axis 0.
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x);  // over the last axis

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Rows of `table` selected by `ids`; backward scatter-adds.
Tensor embedding(const Tensor& table, std::span<const TokenId> ids);

// Inverted dropout; identity when !train or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool train);

// Stacks rank-2 inputs along rows (axis 0) or columns (axis 1); rank-1 inputs
// are joined end to end, scalars stack into a vector.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis = 0);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Rank-1 inner product.
Tensor dot(const Tensor& a, const Tensor& b);

// out[t] = x[t, idx[t]] for x of shape [T x V].
Tensor pick(const Tensor& x, std::span<const TokenId> idx);

// Mean over non-ignored positions of -log softmax(logits[t])[targets[t]].
// Zero when every position is ignored.
Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets,
                     TokenId ignore_index = -1);

// -y log(sigmoid(s)) - (1-y) log(1 - sigmoid(s)) for a scalar logit s.
Tensor bce_with_logits(const Tensor& s, double y);

struct AttentionMask {
  // Keys allowed to be attended to; empty means all.
  std::span<const std::uint8_t> key_valid;
  // Query i may not attend to key j > i.
  bool causal = false;
};

// Multi-head scaled dot-product attention over already-projected inputs:
// q [Tq x d], k and v [Tk x d], d split into n_heads contiguous slices.
// Query rows with no admissible key produce zeros.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 const AttentionMask& mask);

// Attention-score evaluations performed on this thread since the last reset.
std::uint64_t attention_score_count();
void reset_attention_score_count();

}  // namespace rlqfs::nd
