#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "moco/tape.hpp"

namespace moco {

/// a.b / max(|a||b|, 1e-12).
double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct SimilarityScores {
  double pos = 0;
  std::vector<double> negs;
  double tau = 1;
};

/// -log softmax of the positive logit, max-shifted. With include_positive =
/// false the denominator holds the negatives only (unbounded below).
/// Empty negatives give exactly 0.
double info_nce(const SimilarityScores& scores, bool include_positive = true);

/// Mean InfoNCE over the batch: positive z_q[i].z_k[i], negatives
/// z_q[i].queue[j] for the first `queue_fill` queue rows. z_k and the queue
/// enter as constants, so no gradient reaches the momentum branch.
/// Rows of z_q, z_k and the filled queue must be unit norm within 1e-3.
template <typename T>
Var<T> global_loss(Var<T> z_q, const Grid<T>& z_k, const Grid<T>& queue,
                   std::size_t queue_fill, T tau, bool include_positive = true);

struct PatchLayout {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t patch_h = 0;
  std::size_t patch_w = 0;

  std::size_t count() const { return rows * cols; }
};

/// Factor pair rows*cols = K with |rows/cols - H1/W1| minimal (ties: more
/// rows) among pairs that fit; patch sizes are floor(H1/rows), floor(W1/cols).
/// Throws ContractError when no pair fits.
PatchLayout choose_patch_layout(std::size_t h1, std::size_t w1, std::size_t k);

template <typename T>
struct PatchGrid {
  PatchLayout layout;
  Var<T> pooled_q;  // [B,K,C1]
  Var<T> pooled_k;  // [B,K,C1], constant
};

/// Average-pools the same K tiles of both views. fm_k is detached.
template <typename T>
PatchGrid<T> sample_patch_grid(Var<T> fm_q, const Grid<T>& fm_k, std::size_t k);

/// Mean over batch and anchors i of InfoNCE with positive
/// cos(pooled_q[i], pooled_k[i]) and negatives cos(pooled_q[i], pooled_k[j]),
/// j != i, within the same image.
template <typename T>
Var<T> local_loss(const PatchGrid<T>& patches, T tau, bool include_positive = true);

double total_loss(double l_global, double l_local, double lambda);

template <typename T>
Var<T> total_loss(Var<T> l_global, Var<T> l_local, T lambda);

}  // namespace moco
