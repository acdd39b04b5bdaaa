#include "moco/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "moco/ops.hpp"

namespace moco {

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine_similarity: lengths " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double c = dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
  return std::clamp(c, -1.0, 1.0);
}

double info_nce(const SimilarityScores& s, bool include_positive) {
  if (!(s.tau > 0)) throw ContractError("info_nce: tau must be > 0");
  if (s.negs.empty()) return 0.0;
  const double pos = s.pos / s.tau;
  double mx = include_positive ? pos : -std::numeric_limits<double>::infinity();
  for (double n : s.negs) mx = std::max(mx, n / s.tau);
  double z = include_positive ? std::exp(pos - mx) : 0.0;
  for (double n : s.negs) z += std::exp(n / s.tau - mx);
  return mx + std::log(z) - pos;
}

namespace {

template <typename T>
void require_unit_rows(const char* what, const Grid<T>& g, std::size_t rows) {
  const std::size_t d = g.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += double(g[r * d + j]) * double(g[r * d + j]);
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-3) {
      throw ContractError(std::string("global_loss: ") + what + " row " + std::to_string(r) +
                          " has norm " + std::to_string(std::sqrt(ss)) + " (expected 1)");
    }
  }
}

}  // namespace

template <typename T>
Var<T> global_loss(Var<T> z_q, const Grid<T>& z_k, const Grid<T>& queue, std::size_t queue_fill,
                   T tau, bool include_positive) {
  using namespace ops;
  if (!(tau > T(0))) throw ContractError("global_loss: tau must be > 0");
  if (z_q.shape().size() != 2 || z_k.shape() != z_q.shape()) {
    throw ShapeError("global_loss: z_q " + to_string(z_q.shape()) + " vs z_k " +
                     to_string(z_k.shape()));
  }
  const std::size_t B = z_q.shape()[0], D = z_q.shape()[1];
  if (queue_fill > 0 && (queue.rank() != 2 || queue.dim(1) != D || queue_fill > queue.dim(0))) {
    throw ShapeError("global_loss: queue " + to_string(queue.shape()) + " with fill " +
                     std::to_string(queue_fill) + " for embedding dim " + std::to_string(D));
  }
  require_unit_rows("z_q", z_q.value(), B);
  require_unit_rows("z_k", z_k, B);
  if (queue_fill > 0) require_unit_rows("queue", queue, queue_fill);

  Tape<T>& tape = *z_q.tape();
  Var<T> q3 = reshape(z_q, Shape{B, 1, D});
  Var<T> k3 = tape.constant(z_k.reshaped(Shape{B, 1, D}));
  Var<T> logits = reshape(batched_matmul_nt(q3, k3), Shape{B, 1});
  if (queue_fill > 0) {
    std::vector<T> filled(queue.data(), queue.data() + queue_fill * D);
    Var<T> negs = tape.constant(Grid<T>(Shape{queue_fill, D}, std::move(filled)));
    logits = concat_cols(logits, matmul(z_q, negs, false, true));
  }
  logits = scale(logits, T(1) / tau);
  const std::vector<std::size_t> positive(B, 0);
  return info_nce_rows(logits, std::span<const std::size_t>(positive), include_positive);
}

PatchLayout choose_patch_layout(std::size_t h1, std::size_t w1, std::size_t k) {
  if (k == 0) throw ContractError("sample_patch_grid: K must be positive");
  if (h1 == 0 || w1 == 0 || h1 * w1 < k) {
    throw ContractError("sample_patch_grid: " + std::to_string(h1) + "x" + std::to_string(w1) +
                        " feature map cannot hold K=" + std::to_string(k) + " patches");
  }
  const double target = static_cast<double>(h1) / static_cast<double>(w1);
  PatchLayout best;
  double best_gap = std::numeric_limits<double>::infinity();
  // Descending rows so the first of two equal gaps keeps more rows.
  for (std::size_t rows = k; rows >= 1; --rows) {
    if (k % rows != 0) continue;
    const std::size_t cols = k / rows;
    if (rows > h1 || cols > w1) continue;
    const double gap = std::abs(static_cast<double>(rows) / static_cast<double>(cols) - target);
    if (gap < best_gap) {
      best_gap = gap;
      best = PatchLayout{rows, cols, h1 / rows, w1 / cols};
    }
  }
  if (best.rows == 0) {
    throw ContractError("sample_patch_grid: K=" + std::to_string(k) +
                        " has no factorisation fitting a " + std::to_string(h1) + "x" +
                        std::to_string(w1) + " map (patch size < 1)");
  }
  return best;
}

template <typename T>
PatchGrid<T> sample_patch_grid(Var<T> fm_q, const Grid<T>& fm_k, std::size_t k) {
  if (fm_q.shape().size() != 4 || fm_q.shape() != fm_k.shape()) {
    throw ShapeError("sample_patch_grid: view shapes " + to_string(fm_q.shape()) + " and " +
                     to_string(fm_k.shape()));
  }
  const PatchLayout lay = choose_patch_layout(fm_q.shape()[2], fm_q.shape()[3], k);
  Var<T> pq = ops::patch_avg_pool(fm_q, lay.rows, lay.cols, lay.patch_h, lay.patch_w);
  Var<T> fk = fm_q.tape()->constant(fm_k);
  Var<T> pk = ops::patch_avg_pool(fk, lay.rows, lay.cols, lay.patch_h, lay.patch_w);
  return PatchGrid<T>{lay, pq, pk};
}

template <typename T>
Var<T> local_loss(const PatchGrid<T>& patches, T tau, bool include_positive) {
  using namespace ops;
  if (!(tau > T(0))) throw ContractError("local_loss: tau must be > 0");
  const Shape& s = patches.pooled_q.shape();
  if (s.size() != 3 || patches.pooled_k.shape() != s) {
    throw ShapeError("local_loss: pooled shapes " + to_string(s) + " and " +
                     to_string(patches.pooled_k.shape()));
  }
  const std::size_t B = s[0], K = s[1];
  if (K < 2) throw ContractError("local_loss: K must be >= 2 (no negatives otherwise)");
  Tape<T>& tape = *patches.pooled_q.tape();
  Var<T> qn = l2_normalize(patches.pooled_q);
  Var<T> kn = tape.constant(l2_normalize(patches.pooled_k).value());
  Var<T> logits = scale(reshape(batched_matmul_nt(qn, kn), Shape{B * K, K}), T(1) / tau);
  std::vector<std::size_t> positive(B * K);
  for (std::size_t r = 0; r < B * K; ++r) positive[r] = r % K;
  return info_nce_rows(logits, std::span<const std::size_t>(positive), include_positive);
}

double total_loss(double l_global, double l_local, double lambda) {
  if (!(lambda >= 0)) throw ContractError("total_loss: lambda must be >= 0");
  return l_global + lambda * l_local;
}

template <typename T>
Var<T> total_loss(Var<T> l_global, Var<T> l_local, T lambda) {
  if (!(lambda >= T(0))) throw ContractError("total_loss: lambda must be >= 0");
  return ops::add(l_global, ops::scale(l_local, lambda));
}

#define MOCO_INSTANTIATE_LOSSES(T)                                                          \
  template Var<T> global_loss(Var<T>, const Grid<T>&, const Grid<T>&, std::size_t, T, bool); \
  template PatchGrid<T> sample_patch_grid(Var<T>, const Grid<T>&, std::size_t);             \
  template Var<T> local_loss(const PatchGrid<T>&, T, bool);                                 \
  template Var<T> total_loss(Var<T>, Var<T>, T);

MOCO_INSTANTIATE_LOSSES(float)
MOCO_INSTANTIATE_LOSSES(double)

#undef MOCO_INSTANTIATE_LOSSES

}  // namespace moco
