#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "moco/tape.hpp"

// Differentiable primitives. Every function records one node on the tape of
// its first Var argument; all operands must live on the same tape. Shapes are
// validated eagerly and violations throw ShapeError naming the primitive.
namespace moco::ops {

struct Conv2dAttrs {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

// Elementwise, identical shapes.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> div(Var<T> a, Var<T> b);

template <typename T> Var<T> scale(Var<T> a, T c);
template <typename T> Var<T> add_constant(Var<T> a, T c);
/// a * s where s has shape {1}.
template <typename T> Var<T> mul_scalar(Var<T> a, Var<T> s);
/// a / s where s has shape {1}.
template <typename T> Var<T> div_scalar(Var<T> a, Var<T> s);

template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> exp(Var<T> a);
template <typename T> Var<T> log(Var<T> a);
template <typename T> Var<T> sqrt(Var<T> a);

template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);

/// 2-D matrix product op(a) * op(b).
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool transpose_a = false,
              bool transpose_b = false);
template <typename T> Var<T> transpose(Var<T> a);
template <typename T> Var<T> trace(Var<T> a);

/// x [B,C,H,W], w [O,C,kh,kw] -> [B,O,Ho,Wo], Ho = (H + 2 pad - kh)/stride + 1.
template <typename T> Var<T> conv2d(Var<T> x, Var<T> w, Conv2dAttrs attrs);

/// Adds bias[c] along axis 1 of x ([N,C] or [B,C,...]).
template <typename T> Var<T> add_channel_bias(Var<T> x, Var<T> bias);
/// gamma[c] * x + beta[c] along axis 1.
template <typename T>
Var<T> channel_affine(Var<T> x, Var<T> gamma, Var<T> beta);

/// Batch normalisation with batch statistics over (B,H,W) per channel.
/// Writes the biased batch mean/variance to the out-params (for running
/// statistics) when non-null.
template <typename T>
Var<T> batch_norm_train(Var<T> x, Var<T> gamma, Var<T> beta, T eps,
                        Grid<T>* batch_mean, Grid<T>* batch_var);
/// Batch normalisation with fixed statistics.
template <typename T>
Var<T> batch_norm_eval(Var<T> x, Var<T> gamma, Var<T> beta,
                       const Grid<T>& mean, const Grid<T>& var, T eps);

/// [B,C,H,W] -> [B,C], mean over H,W.
template <typename T> Var<T> global_avg_pool(Var<T> x);

/// [B,C,H,W] -> [B, rows*cols, C]; patch k = r*cols + c covers rows
/// [r*ph, (r+1)*ph) and cols [c*pw, (c+1)*pw).
template <typename T>
Var<T> patch_avg_pool(Var<T> x, std::size_t rows, std::size_t cols,
                      std::size_t ph, std::size_t pw);

/// Normalises every vector along the last axis: x / (||x|| + eps).
template <typename T> Var<T> l2_normalize(Var<T> x, T eps = T(1e-12));

/// a [B,M,C], b [B,N,C] -> [B,M,N] with out[b] = a[b] * b[b]^T.
template <typename T> Var<T> batched_matmul_nt(Var<T> a, Var<T> b);

/// [N,p] ++ [N,q] -> [N,p+q].
template <typename T> Var<T> concat_cols(Var<T> a, Var<T> b);

/// Mean over rows of the InfoNCE loss of a logit matrix [N,M] whose positive
/// column for row n is positive[n]. With include_positive the denominator
/// sums every column (softmax cross-entropy); otherwise only the negatives.
/// Rows without negatives contribute 0.
template <typename T>
Var<T> info_nce_rows(Var<T> logits, std::span<const std::size_t> positive,
                     bool include_positive = true);

/// Mean pixel-wise softmax cross-entropy of logits [B,C,H,W] against integer
/// labels (B*H*W entries, row-major).
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits,
                             std::span<const std::uint8_t> labels);

/// Bilinear resize [B,C,h,w] -> [B,C,H,W] with half-pixel centres
/// (align_corners = false).
template <typename T>
Var<T> bilinear_resize(Var<T> x, std::size_t out_h, std::size_t out_w);

/// [B,C,H,W] -> [C, B*H*W] (column index b*H*W + y*W + x).
template <typename T> Var<T> channels_to_rows(Var<T> x);
/// Inverse of channels_to_rows.
template <typename T>
Var<T> rows_to_channels(Var<T> y, std::size_t batch, std::size_t h,
                        std::size_t w);

/// [d,m] -> [d], mean of each row.
template <typename T> Var<T> row_mean(Var<T> x);
/// x [d,m] - v [d] broadcast along columns.
template <typename T> Var<T> sub_row_broadcast(Var<T> x, Var<T> v);

}  // namespace moco::ops
