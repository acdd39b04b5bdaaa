#include "moco/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace moco::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMatMap<T> as_mat(const Grid<T>& g, std::size_t rows, std::size_t cols,
                      std::size_t offset = 0) {
  return ConstMatMap<T>(g.data() + offset, static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
}

template <typename T>
MatMap<T> as_mat(Grid<T>& g, std::size_t rows, std::size_t cols,
                 std::size_t offset = 0) {
  return MatMap<T>(g.data() + offset, static_cast<Eigen::Index>(rows),
                   static_cast<Eigen::Index>(cols));
}

[[noreturn]] void shape_fail(const char* op, const std::string& msg) {
  throw ShapeError(std::string(op) + ": " + msg);
}

template <typename T>
void same_tape(const char* op, Var<T> a, Var<T> b) {
  if (a.tape() != b.tape()) shape_fail(op, "operands live on different tapes");
}

template <typename T>
void same_shape(const char* op, Var<T> a, Var<T> b) {
  same_tape(op, a, b);
  if (a.shape() != b.shape()) {
    shape_fail(op, "shape " + to_string(a.shape()) + " vs " +
                       to_string(b.shape()));
  }
}

template <typename T>
void require_rank(const char* op, Var<T> a, std::size_t rank) {
  if (a.shape().size() != rank) {
    shape_fail(op, "expected rank " + std::to_string(rank) + ", got " +
                       to_string(a.shape()));
  }
}

template <typename T>
void require_scalar(const char* op, Var<T> s) {
  if (s.value().size() != 1) {
    shape_fail(op, "expected a scalar, got " + to_string(s.shape()));
  }
}

// Number of elements per (n, c) slice for tensors laid out [N, C, ...].
std::size_t inner_size(const Shape& s) {
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return inner;
}

template <typename T, typename F>
Grid<T> map_values(const Grid<T>& a, F f) {
  Grid<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

// Sum in double with independent partial sums so the loop vectorises.
template <typename T>
double lane_sum(const T* x, std::size_t n) {
  double acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += static_cast<double>(x[i + j]);
  for (; i < n; ++i) acc[0] += static_cast<double>(x[i]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

// Sum of (x - mu)^2, same lane scheme.
template <typename T>
double lane_sq_dev(const T* x, std::size_t n, double mu) {
  double acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) {
      const double d = static_cast<double>(x[i + j]) - mu;
      acc[j] += d * d;
    }
  for (; i < n; ++i) {
    const double d = static_cast<double>(x[i]) - mu;
    acc[0] += d * d;
  }
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

// Dot product, same lane scheme.
template <typename T>
double lane_dot(const T* x, const T* y, std::size_t n) {
  double acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j)
      acc[j] += static_cast<double>(x[i + j]) * static_cast<double>(y[i + j]);
  for (; i < n; ++i) acc[0] += static_cast<double>(x[i]) * static_cast<double>(y[i]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
Grid<T> scaled(const Grid<T>& g, T c) {
  Grid<T> out = g;
  out *= c;
  return out;
}

// Output columns [lo, hi) whose input column ox*stride + kx - pad lies in [0, W).
inline std::pair<std::size_t, std::size_t> valid_columns(std::size_t W, std::size_t Wo,
                                                         std::size_t kx, std::size_t stride,
                                                         std::size_t pad) {
  const std::size_t lo = kx >= pad ? 0 : (pad - kx + stride - 1) / stride;
  // ox*stride + kx - pad <= W - 1
  const std::size_t lim = W - 1 + pad;
  const std::size_t hi = lim < kx ? 0 : std::min(Wo, (lim - kx) / stride + 1);
  return {std::min(lo, hi), hi};
}

// im2col for one image: x [C,H,W] -> col [C*kh*kw, Ho*Wo].
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W,
            std::size_t kh, std::size_t kw, std::size_t stride,
            std::size_t pad, std::size_t Ho, std::size_t Wo, T* col) {
  const auto ipad = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t c = 0; c < C; ++c) {
    const T* xc = x + c * H * W;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = col + ((c * kh + ky) * kw + kx) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - ipad;
          T* dst = row + oy * Wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * W;
          const auto [lo, hi] = valid_columns(W, Wo, kx, stride, pad);
          std::fill(dst, dst + lo, T(0));
          if (stride == 1) {
            std::copy(src + lo + kx - pad, src + hi + kx - pad, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride + kx - pad];
          }
          std::fill(dst + hi, dst + Wo, T(0));
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates col back into dx [C,H,W].
template <typename T>
void col2im(const T* col, std::size_t C, std::size_t H, std::size_t W,
            std::size_t kh, std::size_t kw, std::size_t stride,
            std::size_t pad, std::size_t Ho, std::size_t Wo, T* dx) {
  const auto ipad = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t c = 0; c < C; ++c) {
    T* dxc = dx + c * H * W;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* row = col + ((c * kh + ky) * kw + kx) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - ipad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          T* dst = dxc + static_cast<std::size_t>(iy) * W;
          const T* src = row + oy * Wo;
          const auto [lo, hi] = valid_columns(W, Wo, kx, stride, pad);
          if (stride == 1) {
            T* d = dst + kx - pad;
            for (std::size_t ox = lo; ox < hi; ++ox) d[ox] += src[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * stride + kx - pad] += src[ox];
          }
        }
      }
    }
  }
}

struct ResizeAxis {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

ResizeAxis resize_axis(std::size_t in, std::size_t out) {
  ResizeAxis a;
  a.lo.resize(out);
  a.hi.resize(out);
  a.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    a.lo[i] = lo;
    a.hi[i] = std::min(lo + 1, in - 1);
    a.frac[i] = src - static_cast<double>(lo);
  }
  return a;
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  same_shape("add", a, b);
  Grid<T> out = a.value();
  out += b.value();
  const auto ia = a.id(), ib = b.id();
  return a.tape()->push("add", std::move(out), {ia, ib},
                        [ia, ib](const Grid<T>& g, Tape<T>& t) {
                          t.accumulate(ia, g);
                          t.accumulate(ib, g);
                        });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  same_shape("sub", a, b);
  Grid<T> out = a.value();
  out -= b.value();
  const auto ia = a.id(), ib = b.id();
  return a.tape()->push("sub", std::move(out), {ia, ib},
                        [ia, ib](const Grid<T>& g, Tape<T>& t) {
                          t.accumulate(ia, g);
                          if (t.requires_grad(ib)) t.accumulate(ib, scaled(g, T(-1)));
                        });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  same_shape("mul", a, b);
  Grid<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape()->push("mul", std::move(out), {ia, ib},
                        [ia, ib](const Grid<T>& g, Tape<T>& t) {
                          const Grid<T>& av = t.value(ia);
                          const Grid<T>& bv = t.value(ib);
                          if (t.requires_grad(ia)) {
                            Grid<T> da(g.shape());
                            for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * bv[i];
                            t.accumulate(ia, std::move(da));
                          }
                          if (t.requires_grad(ib)) {
                            Grid<T> db(g.shape());
                            for (std::size_t i = 0; i < g.size(); ++i) db[i] = g[i] * av[i];
                            t.accumulate(ib, std::move(db));
                          }
                        });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  same_shape("div", a, b);
  Grid<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape()->push("div", std::move(out), {ia, ib},
                        [ia, ib](const Grid<T>& g, Tape<T>& t) {
                          const Grid<T>& av = t.value(ia);
                          const Grid<T>& bv = t.value(ib);
                          if (t.requires_grad(ia)) {
                            Grid<T> da(g.shape());
                            for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] / bv[i];
                            t.accumulate(ia, std::move(da));
                          }
                          if (t.requires_grad(ib)) {
                            Grid<T> db(g.shape());
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              db[i] = -g[i] * av[i] / (bv[i] * bv[i]);
                            }
                            t.accumulate(ib, std::move(db));
                          }
                        });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  const auto ia = a.id();
  return a.tape()->push("scale", scaled(a.value(), c), {ia},
                        [ia, c](const Grid<T>& g, Tape<T>& t) {
                          t.accumulate(ia, scaled(g, c));
                        });
}

template <typename T>
Var<T> add_constant(Var<T> a, T c) {
  const auto ia = a.id();
  return a.tape()->push("add_constant",
                        map_values(a.value(), [c](T v) { return v + c; }), {ia},
                        [ia](const Grid<T>& g, Tape<T>& t) { t.accumulate(ia, g); });
}

template <typename T>
Var<T> mul_scalar(Var<T> a, Var<T> s) {
  same_tape("mul_scalar", a, s);
  require_scalar("mul_scalar", s);
  const T sv = s.value()[0];
  const auto ia = a.id(), is = s.id();
  return a.tape()->push("mul_scalar", scaled(a.value(), sv), {ia, is},
                        [ia, is](const Grid<T>& g, Tape<T>& t) {
                          const T sv = t.value(is)[0];
                          if (t.requires_grad(ia)) t.accumulate(ia, scaled(g, sv));
                          if (t.requires_grad(is)) {
                            const Grid<T>& av = t.value(ia);
                            T acc = 0;
                            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
                            t.accumulate(is, Grid<T>::scalar(acc));
                          }
                        });
}

template <typename T>
Var<T> div_scalar(Var<T> a, Var<T> s) {
  same_tape("div_scalar", a, s);
  require_scalar("div_scalar", s);
  const T sv = s.value()[0];
  Grid<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / sv;
  const auto ia = a.id(), is = s.id();
  return a.tape()->push("div_scalar", std::move(out), {ia, is},
                        [ia, is](const Grid<T>& g, Tape<T>& t) {
                          const T sv = t.value(is)[0];
                          if (t.requires_grad(ia)) {
                            Grid<T> da(g.shape());
                            for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] / sv;
                            t.accumulate(ia, std::move(da));
                          }
                          if (t.requires_grad(is)) {
                            const Grid<T>& av = t.value(ia);
                            T acc = 0;
                            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
                            t.accumulate(is, Grid<T>::scalar(-acc / (sv * sv)));
                          }
                        });
}

template <typename T>
Var<T> relu(Var<T> a) {
  const auto ia = a.id();
  return a.tape()->push(
      "relu", map_values(a.value(), [](T v) { return v > T(0) ? v : T(0); }),
      {ia}, [ia](const Grid<T>& g, Tape<T>& t) {
        const Grid<T>& av = t.value(ia);
        Grid<T> da(g.shape());
        // Subgradient at exactly 0 is 0.
        for (std::size_t i = 0; i < g.size(); ++i) da[i] = av[i] > T(0) ? g[i] : T(0);
        t.accumulate(ia, std::move(da));
      });
}

template <typename T>
Var<T> exp(Var<T> a) {
  const auto ia = a.id();
  Tape<T>* tape = a.tape();
  const std::size_t self = tape->size();
  return tape->push("exp", map_values(a.value(), [](T v) { return std::exp(v); }),
                    {ia}, [ia, self](const Grid<T>& g, Tape<T>& t) {
                      const Grid<T>& out = t.value(self);
                      Grid<T> da(g.shape());
                      for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * out[i];
                      t.accumulate(ia, std::move(da));
                    });
}

template <typename T>
Var<T> log(Var<T> a) {
  for (T v : a.value().values()) {
    if (!(v > T(0))) throw NumericalError("log: non-positive input");
  }
  const auto ia = a.id();
  return a.tape()->push("log", map_values(a.value(), [](T v) { return std::log(v); }),
                        {ia}, [ia](const Grid<T>& g, Tape<T>& t) {
                          const Grid<T>& av = t.value(ia);
                          Grid<T> da(g.shape());
                          for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] / av[i];
                          t.accumulate(ia, std::move(da));
                        });
}

template <typename T>
Var<T> sqrt(Var<T> a) {
  for (T v : a.value().values()) {
    if (!(v > T(0))) throw NumericalError("sqrt: non-positive input");
  }
  const auto ia = a.id();
  Tape<T>* tape = a.tape();
  const std::size_t self = tape->size();
  return tape->push("sqrt", map_values(a.value(), [](T v) { return std::sqrt(v); }),
                    {ia}, [ia, self](const Grid<T>& g, Tape<T>& t) {
                      const Grid<T>& out = t.value(self);
                      Grid<T> da(g.shape());
                      for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] / (T(2) * out[i]);
                      t.accumulate(ia, std::move(da));
                    });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T acc = 0;
  for (T v : a.value().values()) acc += v;
  const auto ia = a.id();
  return a.tape()->push("sum", Grid<T>::scalar(acc), {ia},
                        [ia](const Grid<T>& g, Tape<T>& t) {
                          t.accumulate(ia, Grid<T>(t.value(ia).shape(), g[0]));
                        });
}

template <typename T>
Var<T> mean(Var<T> a) {
  T acc = 0;
  for (T v : a.value().values()) acc += v;
  const T n = static_cast<T>(a.value().size());
  const auto ia = a.id();
  return a.tape()->push("mean", Grid<T>::scalar(acc / n), {ia},
                        [ia, n](const Grid<T>& g, Tape<T>& t) {
                          t.accumulate(ia, Grid<T>(t.value(ia).shape(), g[0] / n));
                        });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (numel(shape) != a.value().size()) {
    shape_fail("reshape", to_string(a.shape()) + " -> " + to_string(shape));
  }
  const auto ia = a.id();
  return a.tape()->push("reshape", a.value().reshaped(std::move(shape)), {ia},
                        [ia](const Grid<T>& g, Tape<T>& t) {
                          t.accumulate(ia, g.reshaped(t.value(ia).shape()));
                        });
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool ta, bool tb) {
  same_tape("matmul", a, b);
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t ar = a.shape()[0], ac = a.shape()[1];
  const std::size_t br = b.shape()[0], bc = b.shape()[1];
  const std::size_t m = ta ? ac : ar, k = ta ? ar : ac;
  const std::size_t k2 = tb ? bc : br, n = tb ? br : bc;
  if (k != k2) {
    shape_fail("matmul", "inner dims " + to_string(a.shape()) + (ta ? "^T" : "") +
                             " x " + to_string(b.shape()) + (tb ? "^T" : ""));
  }
  Grid<T> out(Shape{m, n});
  auto A = as_mat(a.value(), ar, ac);
  auto B = as_mat(b.value(), br, bc);
  auto C = as_mat(out, m, n);
  if (!ta && !tb) C.noalias() = A * B;
  else if (ta && !tb) C.noalias() = A.transpose() * B;
  else if (!ta && tb) C.noalias() = A * B.transpose();
  else C.noalias() = A.transpose() * B.transpose();

  const auto ia = a.id(), ib = b.id();
  return a.tape()->push(
      "matmul", std::move(out), {ia, ib},
      [ia, ib, ta, tb, ar, ac, br, bc, m, n](const Grid<T>& g, Tape<T>& t) {
        auto G = as_mat(g, m, n);
        auto A = as_mat(t.value(ia), ar, ac);
        auto B = as_mat(t.value(ib), br, bc);
        if (t.requires_grad(ia)) {
          Grid<T> da(Shape{ar, ac});
          auto dA = as_mat(da, ar, ac);
          // d op(A) = G op(B)^T
          if (!ta && !tb) dA.noalias() = G * B.transpose();
          else if (!ta && tb) dA.noalias() = G * B;
          else if (ta && !tb) dA.noalias() = B * G.transpose();
          else dA.noalias() = B.transpose() * G.transpose();
          t.accumulate(ia, std::move(da));
        }
        if (t.requires_grad(ib)) {
          Grid<T> db(Shape{br, bc});
          auto dB = as_mat(db, br, bc);
          // d op(B) = op(A)^T G
          if (!ta && !tb) dB.noalias() = A.transpose() * G;
          else if (ta && !tb) dB.noalias() = A * G;
          else if (!ta && tb) dB.noalias() = G.transpose() * A;
          else dB.noalias() = G.transpose() * A.transpose();
          t.accumulate(ib, std::move(db));
        }
      });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  require_rank("transpose", a, 2);
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Grid<T> out(Shape{c, r});
  as_mat(out, c, r) = as_mat(a.value(), r, c).transpose();
  const auto ia = a.id();
  return a.tape()->push("transpose", std::move(out), {ia},
                        [ia, r, c](const Grid<T>& g, Tape<T>& t) {
                          Grid<T> da(Shape{r, c});
                          as_mat(da, r, c) = as_mat(g, c, r).transpose();
                          t.accumulate(ia, std::move(da));
                        });
}

template <typename T>
Var<T> trace(Var<T> a) {
  require_rank("trace", a, 2);
  const std::size_t n = a.shape()[0];
  if (a.shape()[1] != n) shape_fail("trace", "non-square " + to_string(a.shape()));
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a.value()[i * n + i];
  const auto ia = a.id();
  return a.tape()->push("trace", Grid<T>::scalar(acc), {ia},
                        [ia, n](const Grid<T>& g, Tape<T>& t) {
                          Grid<T> da(Shape{n, n});
                          for (std::size_t i = 0; i < n; ++i) da[i * n + i] = g[0];
                          t.accumulate(ia, std::move(da));
                        });
}

// ---------------------------------------------------------------- convolution

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Conv2dAttrs attrs) {
  same_tape("conv2d", x, w);
  require_rank("conv2d", x, 4);
  require_rank("conv2d", w, 4);
  if (attrs.stride == 0) shape_fail("conv2d", "stride must be positive");
  const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t O = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  if (w.shape()[1] != C) {
    shape_fail("conv2d", "input channels " + std::to_string(C) + " vs kernel " +
                             to_string(w.shape()));
  }
  if (H + 2 * attrs.pad < kh || W + 2 * attrs.pad < kw) {
    shape_fail("conv2d", "kernel " + to_string(w.shape()) + " larger than padded input " +
                             to_string(x.shape()));
  }
  const std::size_t s = attrs.stride, p = attrs.pad;
  const std::size_t Ho = (H + 2 * p - kh) / s + 1;
  const std::size_t Wo = (W + 2 * p - kw) / s + 1;
  const std::size_t K = C * kh * kw, P = Ho * Wo;
  const bool pointwise = kh == 1 && kw == 1 && s == 1 && p == 0;

  Grid<T> out(Shape{B, O, Ho, Wo});
  std::vector<T> col(pointwise ? 0 : K * P);
  auto Wm = as_mat(w.value(), O, K);
  for (std::size_t b = 0; b < B; ++b) {
    const T* xb = x.value().data() + b * C * H * W;
    if (!pointwise) im2col(xb, C, H, W, kh, kw, s, p, Ho, Wo, col.data());
    ConstMatMap<T> Col(pointwise ? xb : col.data(), static_cast<Eigen::Index>(K),
                       static_cast<Eigen::Index>(P));
    as_mat(out, O, P, b * O * P).noalias() = Wm * Col;
  }

  const auto ix = x.id(), iw = w.id();
  return x.tape()->push(
      "conv2d", std::move(out), {ix, iw},
      [=](const Grid<T>& g, Tape<T>& t) {
        const bool need_x = t.requires_grad(ix), need_w = t.requires_grad(iw);
        const Grid<T>& xv = t.value(ix);
        auto Wm = as_mat(t.value(iw), O, K);
        Grid<T> dw;
        if (need_w) dw = Grid<T>(Shape{O, C, kh, kw});
        Grid<T> dx;
        if (need_x) dx = Grid<T>(Shape{B, C, H, W});
        std::vector<T> col(pointwise ? 0 : K * P);
        std::vector<T> dcol(pointwise ? 0 : K * P);
        for (std::size_t b = 0; b < B; ++b) {
          auto G = as_mat(g, O, P, b * O * P);
          const T* xb = xv.data() + b * C * H * W;
          if (need_w) {
            if (!pointwise) im2col(xb, C, H, W, kh, kw, s, p, Ho, Wo, col.data());
            ConstMatMap<T> Col(pointwise ? xb : col.data(), static_cast<Eigen::Index>(K),
                               static_cast<Eigen::Index>(P));
            as_mat(dw, O, K).noalias() += G * Col.transpose();
          }
          if (need_x) {
            if (pointwise) {
              as_mat(dx, C, P, b * C * P).noalias() = Wm.transpose() * G;
            } else {
              MatMap<T> DCol(dcol.data(), static_cast<Eigen::Index>(K),
                             static_cast<Eigen::Index>(P));
              DCol.noalias() = Wm.transpose() * G;
              col2im(dcol.data(), C, H, W, kh, kw, s, p, Ho, Wo, dx.data() + b * C * H * W);
            }
          }
        }
        if (need_w) t.accumulate(iw, std::move(dw));
        if (need_x) t.accumulate(ix, std::move(dx));
      });
}

// ---------------------------------------------------------------- channel ops

template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias) {
  same_tape("add_channel_bias", x, bias);
  if (x.shape().size() < 2) shape_fail("add_channel_bias", "rank < 2");
  const std::size_t N = x.shape()[0], C = x.shape()[1], I = inner_size(x.shape());
  if (bias.shape() != Shape{C}) {
    shape_fail("add_channel_bias", "bias " + to_string(bias.shape()) + " for " +
                                       to_string(x.shape()));
  }
  Grid<T> out = x.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      T* o = out.data() + (n * C + c) * I;
      const T bc = bias.value()[c];
      for (std::size_t i = 0; i < I; ++i) o[i] += bc;
    }
  const auto ix = x.id(), ib = bias.id();
  return x.tape()->push("add_channel_bias", std::move(out), {ix, ib},
                        [ix, ib, N, C, I](const Grid<T>& g, Tape<T>& t) {
                          t.accumulate(ix, g);
                          if (!t.requires_grad(ib)) return;
                          Grid<T> db(Shape{C});
                          for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t c = 0; c < C; ++c) {
                              const T* gi = g.data() + (n * C + c) * I;
                              T acc = 0;
                              for (std::size_t i = 0; i < I; ++i) acc += gi[i];
                              db[c] += acc;
                            }
                          t.accumulate(ib, std::move(db));
                        });
}

template <typename T>
Var<T> channel_affine(Var<T> x, Var<T> gamma, Var<T> beta) {
  same_tape("channel_affine", x, gamma);
  same_tape("channel_affine", x, beta);
  if (x.shape().size() < 2) shape_fail("channel_affine", "rank < 2");
  const std::size_t N = x.shape()[0], C = x.shape()[1], I = inner_size(x.shape());
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    shape_fail("channel_affine", "gamma/beta must be [" + std::to_string(C) + "]");
  }
  Grid<T> out(x.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* xi = x.value().data() + (n * C + c) * I;
      T* o = out.data() + (n * C + c) * I;
      const T gc = gamma.value()[c], bc = beta.value()[c];
      for (std::size_t i = 0; i < I; ++i) o[i] = gc * xi[i] + bc;
    }
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape()->push(
      "channel_affine", std::move(out), {ix, ig, ib},
      [ix, ig, ib, N, C, I](const Grid<T>& g, Tape<T>& t) {
        const Grid<T>& xv = t.value(ix);
        const Grid<T>& gv = t.value(ig);
        Grid<T> dx, dg(Shape{C}), db(Shape{C});
        const bool need_x = t.requires_grad(ix);
        if (need_x) dx = Grid<T>(xv.shape());
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * I;
            T sg = 0, sgx = 0;
            for (std::size_t i = 0; i < I; ++i) {
              sg += g[off + i];
              sgx += g[off + i] * xv[off + i];
              if (need_x) dx[off + i] = g[off + i] * gv[c];
            }
            dg[c] += sgx;
            db[c] += sg;
          }
        if (need_x) t.accumulate(ix, std::move(dx));
        t.accumulate(ig, std::move(dg));
        t.accumulate(ib, std::move(db));
      });
}

template <typename T>
Var<T> batch_norm_train(Var<T> x, Var<T> gamma, Var<T> beta, T eps,
                        Grid<T>* batch_mean, Grid<T>* batch_var) {
  same_tape("batch_norm", x, gamma);
  same_tape("batch_norm", x, beta);
  if (x.shape().size() < 2) shape_fail("batch_norm", "rank < 2");
  const std::size_t N = x.shape()[0], C = x.shape()[1], I = inner_size(x.shape());
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    shape_fail("batch_norm", "gamma/beta must be [" + std::to_string(C) + "]");
  }
  const std::size_t M = N * I;
  if (M < 2) throw NumericalError("batch_norm: need at least 2 values per channel");
  Grid<T> xhat(x.shape());
  Grid<T> inv_std(Shape{C});
  Grid<T> mean_g(Shape{C}), var_g(Shape{C});
  const Grid<T>& xv = x.value();
  for (std::size_t c = 0; c < C; ++c) {
    double acc = 0;
    for (std::size_t n = 0; n < N; ++n) acc += lane_sum(xv.data() + (n * C + c) * I, I);
    const double mu = acc / static_cast<double>(M);
    double vacc = 0;
    for (std::size_t n = 0; n < N; ++n) vacc += lane_sq_dev(xv.data() + (n * C + c) * I, I, mu);
    const double var = vacc / static_cast<double>(M);
    const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    mean_g[c] = static_cast<T>(mu);
    var_g[c] = static_cast<T>(var);
    inv_std[c] = is;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * I;
      for (std::size_t i = 0; i < I; ++i) {
        xhat[off + i] = (xv[off + i] - static_cast<T>(mu)) * is;
      }
    }
  }
  if (batch_mean) *batch_mean = mean_g;
  if (batch_var) *batch_var = var_g;

  Grid<T> out(x.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * I;
      const T gc = gamma.value()[c], bc = beta.value()[c];
      for (std::size_t i = 0; i < I; ++i) out[off + i] = gc * xhat[off + i] + bc;
    }

  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  Tape<T>* tape = x.tape();
  if (!tape->recording()) {
    return tape->push("batch_norm", std::move(out), {ix, ig, ib}, {});
  }
  return tape->push(
      "batch_norm", std::move(out), {ix, ig, ib},
      [ix, ig, ib, N, C, I, M, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](const Grid<T>& g, Tape<T>& t) {
        const Grid<T>& gv = t.value(ig);
        const bool need_x = t.requires_grad(ix);
        Grid<T> dx;
        if (need_x) dx = Grid<T>(xhat.shape());
        Grid<T> dg(Shape{C}), db(Shape{C});
        for (std::size_t c = 0; c < C; ++c) {
          double sgd = 0, sgxd = 0;
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t off = (n * C + c) * I;
            sgd += lane_sum(g.data() + off, I);
            sgxd += lane_dot(g.data() + off, xhat.data() + off, I);
          }
          const T sg = static_cast<T>(sgd), sgx = static_cast<T>(sgxd);
          dg[c] = sgx;
          db[c] = sg;
          if (!need_x) continue;
          // dx = gamma * inv_std / M * (M g - sum(g) - xhat * sum(g xhat))
          const T k = gv[c] * inv_std[c] / static_cast<T>(M);
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t off = (n * C + c) * I;
            for (std::size_t i = 0; i < I; ++i) {
              dx[off + i] =
                  k * (static_cast<T>(M) * g[off + i] - sg - xhat[off + i] * sgx);
            }
          }
        }
        if (need_x) t.accumulate(ix, std::move(dx));
        t.accumulate(ig, std::move(dg));
        t.accumulate(ib, std::move(db));
      });
}

template <typename T>
Var<T> batch_norm_eval(Var<T> x, Var<T> gamma, Var<T> beta, const Grid<T>& mean,
                       const Grid<T>& var, T eps) {
  same_tape("batch_norm_eval", x, gamma);
  same_tape("batch_norm_eval", x, beta);
  if (x.shape().size() < 2) shape_fail("batch_norm_eval", "rank < 2");
  const std::size_t N = x.shape()[0], C = x.shape()[1], I = inner_size(x.shape());
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} ||
      mean.shape() != Shape{C} || var.shape() != Shape{C}) {
    shape_fail("batch_norm_eval", "per-channel arrays must be [" + std::to_string(C) + "]");
  }
  Grid<T> inv_std(Shape{C});
  for (std::size_t c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);
  Grid<T> out(x.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * I;
      const T a = gamma.value()[c] * inv_std[c];
      const T b = beta.value()[c] - a * mean[c];
      for (std::size_t i = 0; i < I; ++i) out[off + i] = a * x.value()[off + i] + b;
    }
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape()->push(
      "batch_norm_eval", std::move(out), {ix, ig, ib},
      [ix, ig, ib, N, C, I, mean, inv_std](const Grid<T>& g, Tape<T>& t) {
        const Grid<T>& xv = t.value(ix);
        const Grid<T>& gv = t.value(ig);
        const bool need_x = t.requires_grad(ix);
        Grid<T> dx;
        if (need_x) dx = Grid<T>(xv.shape());
        Grid<T> dg(Shape{C}), db(Shape{C});
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * I;
            T sg = 0, sgx = 0;
            for (std::size_t i = 0; i < I; ++i) {
              const T xh = (xv[off + i] - mean[c]) * inv_std[c];
              sg += g[off + i];
              sgx += g[off + i] * xh;
              if (need_x) dx[off + i] = g[off + i] * gv[c] * inv_std[c];
            }
            dg[c] += sgx;
            db[c] += sg;
          }
        if (need_x) t.accumulate(ix, std::move(dx));
        t.accumulate(ig, std::move(dg));
        t.accumulate(ib, std::move(db));
      });
}

// ---------------------------------------------------------------- pooling

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  require_rank("global_avg_pool", x, 4);
  const std::size_t B = x.shape()[0], C = x.shape()[1];
  const std::size_t I = x.shape()[2] * x.shape()[3];
  Grid<T> out(Shape{B, C});
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    T acc = 0;
    const T* xi = x.value().data() + bc * I;
    for (std::size_t i = 0; i < I; ++i) acc += xi[i];
    out[bc] = acc / static_cast<T>(I);
  }
  const auto ix = x.id();
  return x.tape()->push("global_avg_pool", std::move(out), {ix},
                        [ix, B, C, I](const Grid<T>& g, Tape<T>& t) {
                          Grid<T> dx(t.value(ix).shape());
                          for (std::size_t bc = 0; bc < B * C; ++bc) {
                            const T v = g[bc] / static_cast<T>(I);
                            std::fill(dx.data() + bc * I, dx.data() + (bc + 1) * I, v);
                          }
                          t.accumulate(ix, std::move(dx));
                        });
}

template <typename T>
Var<T> patch_avg_pool(Var<T> x, std::size_t rows, std::size_t cols, std::size_t ph,
                      std::size_t pw) {
  require_rank("patch_avg_pool", x, 4);
  const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (rows == 0 || cols == 0 || ph == 0 || pw == 0 || rows * ph > H || cols * pw > W) {
    shape_fail("patch_avg_pool", std::to_string(rows) + "x" + std::to_string(cols) +
                                     " patches of " + std::to_string(ph) + "x" +
                                     std::to_string(pw) + " do not fit " +
                                     to_string(x.shape()));
  }
  const std::size_t K = rows * cols;
  const T inv_area = T(1) / static_cast<T>(ph * pw);
  Grid<T> out(Shape{B, K, C});
  const Grid<T>& xv = x.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* xc = xv.data() + (b * C + c) * H * W;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t q = 0; q < cols; ++q) {
          T acc = 0;
          for (std::size_t y = r * ph; y < (r + 1) * ph; ++y)
            for (std::size_t xx = q * pw; xx < (q + 1) * pw; ++xx) acc += xc[y * W + xx];
          out[(b * K + r * cols + q) * C + c] = acc * inv_area;
        }
    }
  const auto ix = x.id();
  return x.tape()->push(
      "patch_avg_pool", std::move(out), {ix},
      [=](const Grid<T>& g, Tape<T>& t) {
        Grid<T> dx(Shape{B, C, H, W});
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c) {
            T* dc = dx.data() + (b * C + c) * H * W;
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t q = 0; q < cols; ++q) {
                const T v = g[(b * K + r * cols + q) * C + c] * inv_area;
                for (std::size_t y = r * ph; y < (r + 1) * ph; ++y)
                  for (std::size_t xx = q * pw; xx < (q + 1) * pw; ++xx) dc[y * W + xx] += v;
              }
          }
        t.accumulate(ix, std::move(dx));
      });
}

template <typename T>
Var<T> l2_normalize(Var<T> x, T eps) {
  if (x.shape().empty()) shape_fail("l2_normalize", "rank 0");
  const std::size_t D = x.shape().back();
  const std::size_t R = x.value().size() / D;
  Grid<T> out(x.shape());
  Grid<T> norms(Shape{R});
  for (std::size_t r = 0; r < R; ++r) {
    const T* xi = x.value().data() + r * D;
    T ss = 0;
    for (std::size_t d = 0; d < D; ++d) ss += xi[d] * xi[d];
    const T n = std::sqrt(ss);
    norms[r] = n;
    for (std::size_t d = 0; d < D; ++d) out[r * D + d] = xi[d] / (n + eps);
  }
  const auto ix = x.id();
  return x.tape()->push(
      "l2_normalize", std::move(out), {ix},
      [ix, D, R, eps, norms = std::move(norms)](const Grid<T>& g, Tape<T>& t) {
        const Grid<T>& xv = t.value(ix);
        Grid<T> dx(xv.shape());
        for (std::size_t r = 0; r < R; ++r) {
          const T* xi = xv.data() + r * D;
          const T* gi = g.data() + r * D;
          const T n = norms[r], s = n + eps;
          T gx = 0;
          for (std::size_t d = 0; d < D; ++d) gx += gi[d] * xi[d];
          const T k = n > T(0) ? gx / (s * s * n) : T(0);
          for (std::size_t d = 0; d < D; ++d) dx[r * D + d] = gi[d] / s - xi[d] * k;
        }
        t.accumulate(ix, std::move(dx));
      });
}

template <typename T>
Var<T> batched_matmul_nt(Var<T> a, Var<T> b) {
  same_tape("batched_matmul_nt", a, b);
  require_rank("batched_matmul_nt", a, 3);
  require_rank("batched_matmul_nt", b, 3);
  const std::size_t B = a.shape()[0], M = a.shape()[1], C = a.shape()[2];
  const std::size_t N = b.shape()[1];
  if (b.shape()[0] != B || b.shape()[2] != C) {
    shape_fail("batched_matmul_nt", to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Grid<T> out(Shape{B, M, N});
  for (std::size_t i = 0; i < B; ++i) {
    as_mat(out, M, N, i * M * N).noalias() =
        as_mat(a.value(), M, C, i * M * C) * as_mat(b.value(), N, C, i * N * C).transpose();
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape()->push(
      "batched_matmul_nt", std::move(out), {ia, ib},
      [ia, ib, B, M, N, C](const Grid<T>& g, Tape<T>& t) {
        const bool need_a = t.requires_grad(ia), need_b = t.requires_grad(ib);
        Grid<T> da, db;
        if (need_a) da = Grid<T>(Shape{B, M, C});
        if (need_b) db = Grid<T>(Shape{B, N, C});
        for (std::size_t i = 0; i < B; ++i) {
          auto G = as_mat(g, M, N, i * M * N);
          if (need_a) {
            as_mat(da, M, C, i * M * C).noalias() = G * as_mat(t.value(ib), N, C, i * N * C);
          }
          if (need_b) {
            as_mat(db, N, C, i * N * C).noalias() =
                G.transpose() * as_mat(t.value(ia), M, C, i * M * C);
          }
        }
        if (need_a) t.accumulate(ia, std::move(da));
        if (need_b) t.accumulate(ib, std::move(db));
      });
}

template <typename T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
  same_tape("concat_cols", a, b);
  require_rank("concat_cols", a, 2);
  require_rank("concat_cols", b, 2);
  const std::size_t N = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
  if (b.shape()[0] != N) {
    shape_fail("concat_cols", to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Grid<T> out(Shape{N, p + q});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a.value().data() + n * p, p, out.data() + n * (p + q));
    std::copy_n(b.value().data() + n * q, q, out.data() + n * (p + q) + p);
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape()->push("concat_cols", std::move(out), {ia, ib},
                        [ia, ib, N, p, q](const Grid<T>& g, Tape<T>& t) {
                          if (t.requires_grad(ia)) {
                            Grid<T> da(Shape{N, p});
                            for (std::size_t n = 0; n < N; ++n)
                              std::copy_n(g.data() + n * (p + q), p, da.data() + n * p);
                            t.accumulate(ia, std::move(da));
                          }
                          if (t.requires_grad(ib)) {
                            Grid<T> db(Shape{N, q});
                            for (std::size_t n = 0; n < N; ++n)
                              std::copy_n(g.data() + n * (p + q) + p, q, db.data() + n * q);
                            t.accumulate(ib, std::move(db));
                          }
                        });
}

// ---------------------------------------------------------------- losses

template <typename T>
Var<T> info_nce_rows(Var<T> logits, std::span<const std::size_t> positive,
                     bool include_positive) {
  require_rank("info_nce_rows", logits, 2);
  const std::size_t N = logits.shape()[0], M = logits.shape()[1];
  if (positive.size() != N) {
    shape_fail("info_nce_rows", std::to_string(positive.size()) +
                                    " positive indices for " + std::to_string(N) + " rows");
  }
  for (std::size_t p : positive) {
    if (p >= M) shape_fail("info_nce_rows", "positive index out of range");
  }
  // dlogits / N, kept for the backward pass.
  Grid<T> probs(Shape{N, M});
  double total = 0;
  const Grid<T>& L = logits.value();
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = L.data() + n * M;
    const std::size_t p = positive[n];
    const bool has_negs = M > 1;
    if (!has_negs) continue;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < M; ++j) {
      if (include_positive || j != p) mx = std::max(mx, row[j]);
    }
    double z = 0;
    for (std::size_t j = 0; j < M; ++j) {
      if (include_positive || j != p) z += std::exp(static_cast<double>(row[j] - mx));
    }
    const double lse = static_cast<double>(mx) + std::log(z);
    total += lse - static_cast<double>(row[p]);
    for (std::size_t j = 0; j < M; ++j) {
      double d = 0;
      if (include_positive || j != p) d = std::exp(static_cast<double>(row[j]) - lse);
      if (j == p) d -= 1.0;
      probs[n * M + j] = static_cast<T>(d / static_cast<double>(N));
    }
  }
  const auto il = logits.id();
  return logits.tape()->push(
      "info_nce_rows", Grid<T>::scalar(static_cast<T>(total / static_cast<double>(N))),
      {il}, [il, probs = std::move(probs)](const Grid<T>& g, Tape<T>& t) {
        t.accumulate(il, scaled(probs, g[0]));
      });
}

template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const std::uint8_t> labels) {
  require_rank("softmax_cross_entropy", logits, 4);
  const std::size_t B = logits.shape()[0], C = logits.shape()[1];
  const std::size_t P = logits.shape()[2] * logits.shape()[3];
  if (labels.size() != B * P) {
    shape_fail("softmax_cross_entropy", std::to_string(labels.size()) + " labels for " +
                                            to_string(logits.shape()));
  }
  const double inv = 1.0 / static_cast<double>(B * P);
  Grid<T> dl(logits.shape());
  double total = 0;
  const Grid<T>& L = logits.value();
  std::vector<double> e(C);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t y = labels[b * P + p];
      if (y >= C) shape_fail("softmax_cross_entropy", "label out of range");
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, double(L[(b * C + c) * P + p]));
      double z = 0;
      for (std::size_t c = 0; c < C; ++c) {
        e[c] = std::exp(double(L[(b * C + c) * P + p]) - mx);
        z += e[c];
      }
      total += mx + std::log(z) - double(L[(b * C + y) * P + p]);
      for (std::size_t c = 0; c < C; ++c) {
        dl[(b * C + c) * P + p] = static_cast<T>((e[c] / z - (c == y ? 1.0 : 0.0)) * inv);
      }
    }
  const auto il = logits.id();
  return logits.tape()->push("softmax_cross_entropy",
                             Grid<T>::scalar(static_cast<T>(total * inv)), {il},
                             [il, dl = std::move(dl)](const Grid<T>& g, Tape<T>& t) {
                               t.accumulate(il, scaled(dl, g[0]));
                             });
}

// ---------------------------------------------------------------- resampling

template <typename T>
Var<T> bilinear_resize(Var<T> x, std::size_t out_h, std::size_t out_w) {
  require_rank("bilinear_resize", x, 4);
  if (out_h == 0 || out_w == 0) shape_fail("bilinear_resize", "empty output size");
  const std::size_t B = x.shape()[0], C = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const ResizeAxis ay = resize_axis(h, out_h), ax = resize_axis(w, out_w);
  Grid<T> out(Shape{B, C, out_h, out_w});
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T* src = x.value().data() + bc * h * w;
    T* dst = out.data() + bc * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const T fy = static_cast<T>(ay.frac[i]);
      const T* r0 = src + ay.lo[i] * w;
      const T* r1 = src + ay.hi[i] * w;
      for (std::size_t j = 0; j < out_w; ++j) {
        const T fx = static_cast<T>(ax.frac[j]);
        const T top = r0[ax.lo[j]] * (T(1) - fx) + r0[ax.hi[j]] * fx;
        const T bot = r1[ax.lo[j]] * (T(1) - fx) + r1[ax.hi[j]] * fx;
        dst[i * out_w + j] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  const auto ix = x.id();
  return x.tape()->push(
      "bilinear_resize", std::move(out), {ix},
      [ix, B, C, h, w, out_h, out_w, ay, ax](const Grid<T>& g, Tape<T>& t) {
        Grid<T> dx(Shape{B, C, h, w});
        for (std::size_t bc = 0; bc < B * C; ++bc) {
          T* d = dx.data() + bc * h * w;
          const T* gs = g.data() + bc * out_h * out_w;
          for (std::size_t i = 0; i < out_h; ++i) {
            const T fy = static_cast<T>(ay.frac[i]);
            T* r0 = d + ay.lo[i] * w;
            T* r1 = d + ay.hi[i] * w;
            for (std::size_t j = 0; j < out_w; ++j) {
              const T fx = static_cast<T>(ax.frac[j]);
              const T v = gs[i * out_w + j];
              r0[ax.lo[j]] += v * (T(1) - fy) * (T(1) - fx);
              r0[ax.hi[j]] += v * (T(1) - fy) * fx;
              r1[ax.lo[j]] += v * fy * (T(1) - fx);
              r1[ax.hi[j]] += v * fy * fx;
            }
          }
        }
        t.accumulate(ix, std::move(dx));
      });
}

// ---------------------------------------------------------------- layout

template <typename T>
Var<T> channels_to_rows(Var<T> x) {
  require_rank("channels_to_rows", x, 4);
  const std::size_t B = x.shape()[0], C = x.shape()[1];
  const std::size_t P = x.shape()[2] * x.shape()[3];
  Grid<T> out(Shape{C, B * P});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      std::copy_n(x.value().data() + (b * C + c) * P, P, out.data() + c * B * P + b * P);
  const auto ix = x.id();
  return x.tape()->push("channels_to_rows", std::move(out), {ix},
                        [ix, B, C, P](const Grid<T>& g, Tape<T>& t) {
                          Grid<T> dx(t.value(ix).shape());
                          for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t c = 0; c < C; ++c)
                              std::copy_n(g.data() + c * B * P + b * P, P,
                                          dx.data() + (b * C + c) * P);
                          t.accumulate(ix, std::move(dx));
                        });
}

template <typename T>
Var<T> rows_to_channels(Var<T> y, std::size_t batch, std::size_t h, std::size_t w) {
  require_rank("rows_to_channels", y, 2);
  const std::size_t C = y.shape()[0], P = h * w;
  if (y.shape()[1] != batch * P) {
    shape_fail("rows_to_channels", to_string(y.shape()) + " cannot hold batch " +
                                       std::to_string(batch) + " of " + std::to_string(h) +
                                       "x" + std::to_string(w));
  }
  Grid<T> out(Shape{batch, C, h, w});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < C; ++c)
      std::copy_n(y.value().data() + c * batch * P + b * P, P, out.data() + (b * C + c) * P);
  const auto iy = y.id();
  return y.tape()->push("rows_to_channels", std::move(out), {iy},
                        [iy, batch, C, P](const Grid<T>& g, Tape<T>& t) {
                          Grid<T> dy(Shape{C, batch * P});
                          for (std::size_t b = 0; b < batch; ++b)
                            for (std::size_t c = 0; c < C; ++c)
                              std::copy_n(g.data() + (b * C + c) * P, P,
                                          dy.data() + c * batch * P + b * P);
                          t.accumulate(iy, std::move(dy));
                        });
}

template <typename T>
Var<T> row_mean(Var<T> x) {
  require_rank("row_mean", x, 2);
  const std::size_t d = x.shape()[0], m = x.shape()[1];
  Grid<T> out(Shape{d});
  for (std::size_t i = 0; i < d; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < m; ++j) acc += x.value()[i * m + j];
    out[i] = acc / static_cast<T>(m);
  }
  const auto ix = x.id();
  return x.tape()->push("row_mean", std::move(out), {ix},
                        [ix, d, m](const Grid<T>& g, Tape<T>& t) {
                          Grid<T> dx(Shape{d, m});
                          for (std::size_t i = 0; i < d; ++i)
                            std::fill_n(dx.data() + i * m, m, g[i] / static_cast<T>(m));
                          t.accumulate(ix, std::move(dx));
                        });
}

template <typename T>
Var<T> sub_row_broadcast(Var<T> x, Var<T> v) {
  same_tape("sub_row_broadcast", x, v);
  require_rank("sub_row_broadcast", x, 2);
  const std::size_t d = x.shape()[0], m = x.shape()[1];
  if (v.shape() != Shape{d}) {
    shape_fail("sub_row_broadcast", to_string(x.shape()) + " - " + to_string(v.shape()));
  }
  Grid<T> out = x.value();
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] -= v.value()[i];
  const auto ix = x.id(), iv = v.id();
  return x.tape()->push("sub_row_broadcast", std::move(out), {ix, iv},
                        [ix, iv, d, m](const Grid<T>& g, Tape<T>& t) {
                          t.accumulate(ix, g);
                          if (!t.requires_grad(iv)) return;
                          Grid<T> dv(Shape{d});
                          for (std::size_t i = 0; i < d; ++i) {
                            T acc = 0;
                            for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j];
                            dv[i] = -acc;
                          }
                          t.accumulate(iv, std::move(dv));
                        });
}

// ---------------------------------------------------------------- instantiation

#define MOCO_INSTANTIATE_OPS(T)                                                        \
  template Var<T> add(Var<T>, Var<T>);                                                 \
  template Var<T> sub(Var<T>, Var<T>);                                                 \
  template Var<T> mul(Var<T>, Var<T>);                                                 \
  template Var<T> div(Var<T>, Var<T>);                                                 \
  template Var<T> scale(Var<T>, T);                                                    \
  template Var<T> add_constant(Var<T>, T);                                             \
  template Var<T> mul_scalar(Var<T>, Var<T>);                                          \
  template Var<T> div_scalar(Var<T>, Var<T>);                                          \
  template Var<T> relu(Var<T>);                                                        \
  template Var<T> exp(Var<T>);                                                         \
  template Var<T> log(Var<T>);                                                         \
  template Var<T> sqrt(Var<T>);                                                        \
  template Var<T> sum(Var<T>);                                                         \
  template Var<T> mean(Var<T>);                                                        \
  template Var<T> reshape(Var<T>, Shape);                                              \
  template Var<T> matmul(Var<T>, Var<T>, bool, bool);                                  \
  template Var<T> transpose(Var<T>);                                                   \
  template Var<T> trace(Var<T>);                                                       \
  template Var<T> conv2d(Var<T>, Var<T>, Conv2dAttrs);                                 \
  template Var<T> add_channel_bias(Var<T>, Var<T>);                                    \
  template Var<T> channel_affine(Var<T>, Var<T>, Var<T>);                              \
  template Var<T> batch_norm_train(Var<T>, Var<T>, Var<T>, T, Grid<T>*, Grid<T>*);     \
  template Var<T> batch_norm_eval(Var<T>, Var<T>, Var<T>, const Grid<T>&,              \
                                  const Grid<T>&, T);                                  \
  template Var<T> global_avg_pool(Var<T>);                                             \
  template Var<T> patch_avg_pool(Var<T>, std::size_t, std::size_t, std::size_t,        \
                                 std::size_t);                                         \
  template Var<T> l2_normalize(Var<T>, T);                                             \
  template Var<T> batched_matmul_nt(Var<T>, Var<T>);                                   \
  template Var<T> concat_cols(Var<T>, Var<T>);                                         \
  template Var<T> info_nce_rows(Var<T>, std::span<const std::size_t>, bool);           \
  template Var<T> softmax_cross_entropy(Var<T>, std::span<const std::uint8_t>);        \
  template Var<T> bilinear_resize(Var<T>, std::size_t, std::size_t);                   \
  template Var<T> channels_to_rows(Var<T>);                                            \
  template Var<T> rows_to_channels(Var<T>, std::size_t, std::size_t, std::size_t);     \
  template Var<T> row_mean(Var<T>);                                                    \
  template Var<T> sub_row_broadcast(Var<T>, Var<T>);

MOCO_INSTANTIATE_OPS(float)
MOCO_INSTANTIATE_OPS(double)

#undef MOCO_INSTANTIATE_OPS

}  // namespace moco::ops
