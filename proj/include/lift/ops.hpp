#pragma once

#include <cstddef>
#include <vector>

#include "lift/tape.hpp"
#include "lift/tensor.hpp"

namespace lift {

inline constexpr double kLayerNormEps = 1e-5;

// Value-level kernels shared by the differentiable ops. Every output element of
// matmul_values accumulates over the inner axis in ascending order, so a row's
// result does not depend on how many other rows are in the batch.
template <typename T>
BasicTensor<T> matmul_values(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> transpose_values(const BasicTensor<T>& a);
template <typename T>
BasicTensor<T> softmax_rows_values(const BasicTensor<T>& x);
template <typename T>
T gelu_scalar(T x);
template <typename T>
T gelu_grad_scalar(T x);

// Differentiable primitives. Tensors are treated as [rows x cols] where cols is
// the last extent; there is no broadcasting except bias-add over the last axis.

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b);
template <typename T>
Var add(Tape<T>& tape, Var a, Var b);
template <typename T>
Var sub(Tape<T>& tape, Var a, Var b);
/// Elementwise product.
template <typename T>
Var mul(Tape<T>& tape, Var a, Var b);
template <typename T>
Var scale(Tape<T>& tape, Var x, T factor);
template <typename T>
Var add_bias(Tape<T>& tape, Var x, Var bias);
template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias) {
  return add_bias(tape, matmul(tape, x, weight), bias);
}

/// Row-wise normalization with population variance, eps inside the square root.
template <typename T>
Var layer_norm(Tape<T>& tape, Var x, Var gain, Var bias, T eps = static_cast<T>(kLayerNormEps));
/// Tanh-approximated GELU.
template <typename T>
Var gelu(Tape<T>& tape, Var x);
template <typename T>
Var relu(Tape<T>& tape, Var x);
template <typename T>
Var softmax_rows(Tape<T>& tape, Var x);
/// Elementwise |x|; the subgradient at 0 is taken as 0.
template <typename T>
Var abs(Tape<T>& tape, Var x);

template <typename T>
Var concat_rows(Tape<T>& tape, Var a, Var b);
template <typename T>
Var concat_cols(Tape<T>& tape, Var a, Var b);
/// Selects rows by index (repeats allowed); backward scatter-adds.
template <typename T>
Var gather_rows(Tape<T>& tape, Var x, std::vector<std::size_t> rows);

/// Sum of all elements, shape {1}.
template <typename T>
Var sum(Tape<T>& tape, Var x);
/// Sum of squared differences, shape {1}.
template <typename T>
Var squared_error(Tape<T>& tape, Var prediction, Var target);
/// Cosine similarity of matching rows, shape {rows}. Rows where either input
/// has zero norm yield 0 with zero gradient.
template <typename T>
Var row_cosine(Tape<T>& tape, Var a, Var b);

/// Scaled dot-product attention over `batch` independent blocks of equal
/// length. q/k/v are [batch*seq x d]; heads split d into contiguous slices and
/// each head uses scale 1/sqrt(d/heads).
template <typename T>
Var scaled_dot_attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t batch, std::size_t heads);

struct AttentionWeights {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Projects q/k/v inputs, runs per-head attention, concatenates the heads and
/// applies the output projection.
template <typename T>
Var multi_head_attention(Tape<T>& tape, Var q_in, Var k_in, Var v_in, const AttentionWeights& w,
                         std::size_t heads, std::size_t batch = 1);

/// For zs, zd of shape [B x d], emits [B*steps x d] with row b*steps + (t-1)
/// equal to zs_b + (t/steps) * zd_b for t = 1..steps.
template <typename T>
Var line_points(Tape<T>& tape, Var zs, Var zd, std::size_t steps);

/// Mean logistic loss of [N] or [N x 1] logits against 0/1 labels.
template <typename T>
Var bce_with_logits(Tape<T>& tape, Var logits, const std::vector<int>& labels);
/// Mean softmax cross-entropy of [N x C] logits.
template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, const std::vector<int>& labels);

/// Single-query attention pooling over variable-length segments. `keys` and
/// `values` share rows; segment i spans rows [offsets[i], offsets[i+1]). The
/// score of a row is keys_row . query / sqrt(key_dim). Output [segments x value_dim].
template <typename T>
Var attention_pool(Tape<T>& tape, Var keys, Var values, Var query, const std::vector<std::size_t>& offsets);

}  // namespace lift
