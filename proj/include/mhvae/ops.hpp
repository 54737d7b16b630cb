#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mhvae/graph.hpp"

namespace mhvae {
namespace detail {

template <class T>
inline void axpy(std::int64_t n, T alpha, const T* x, T* y) {
  for (std::int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// C[m x n] += A[m x k] * B[k x n]. Row-major, contiguous inner loop.
template <class T>
void matmul_nn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::int64_t>(i) * k;
    T* crow = c + static_cast<std::int64_t>(i) * n;
    for (int p = 0; p < k; ++p) axpy<T>(n, arow[p], b + static_cast<std::int64_t>(p) * n, crow);
  }
}

// C[m x n] += A[m x k] * B[n x k]^T (dot products of rows).
template <class T>
void matmul_nt_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::int64_t>(i) * k;
    T* crow = c + static_cast<std::int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::int64_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n].
template <class T>
void matmul_tn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::int64_t>(i) * k;
    const T* brow = b + static_cast<std::int64_t>(i) * n;
    for (int p = 0; p < k; ++p) axpy<T>(n, arow[p], brow, c + static_cast<std::int64_t>(p) * n);
  }
}

template <class T>
inline void check_same_graph(const Var<T>& x, const Var<T>& y, const char* op) {
  require(x.g == y.g, std::string(op) + ": operands live on different graphs");
}

template <class T>
inline T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
inline T softplus_scalar(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

// Shared skeleton for elementwise unary ops. `der(xin, yout)` returns the
// local derivative dy/dx at one element.
template <class T, class Fwd, class Der>
Var<T> map_unary(Var<T> x, Fwd fwd, Der der) {
  const Tensor<T>& xv = x.val();
  Tensor<T> out(xv.shape());
  const T* xa = xv.data();
  T* oa = out.mutable_data();
  const std::int64_t n = xv.size();
  for (std::int64_t i = 0; i < n; ++i) oa[i] = fwd(xa[i]);
  const int xi = x.id;
  Tensor<T> xin = xv;
  Tensor<T> yout = out;
  return x.g->make(std::move(out), {xi}, [xi, xin, yout, der](Graph<T>& g, int self) {
    if (!g.needs_grad(xi)) return;
    const T* ga = g.grad_buf(self).data();
    const T* xa2 = xin.data();
    const T* ya2 = yout.data();
    T* dx = g.grad_buf(xi).mutable_data();
    const std::int64_t m = xin.size();
    for (std::int64_t i = 0; i < m; ++i) dx[i] += ga[i] * der(xa2[i], ya2[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(Var<T> x, Var<T> y) {
  detail::check_same_graph(x, y, "add");
  const Tensor<T>& xv = x.val();
  const Tensor<T>& yv = y.val();
  require_shape(same_shape(xv, yv), "add: shape mismatch " + shape_str(xv.shape()) + " vs " +
                                        shape_str(yv.shape()));
  Tensor<T> out(xv.shape());
  {
    const T* xa = xv.data();
    const T* ya = yv.data();
    T* oa = out.mutable_data();
    for (std::int64_t i = 0; i < xv.size(); ++i) oa[i] = xa[i] + ya[i];
  }
  const int xi = x.id, yi = y.id;
  return x.g->make(std::move(out), {xi, yi}, [xi, yi](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad_buf(self);
    if (g.needs_grad(xi)) detail::axpy(go.size(), T(1), go.data(), g.grad_buf(xi).mutable_data());
    if (g.needs_grad(yi)) detail::axpy(go.size(), T(1), go.data(), g.grad_buf(yi).mutable_data());
  });
}

template <class T>
Var<T> sub(Var<T> x, Var<T> y) {
  detail::check_same_graph(x, y, "sub");
  const Tensor<T>& xv = x.val();
  const Tensor<T>& yv = y.val();
  require_shape(same_shape(xv, yv), "sub: shape mismatch " + shape_str(xv.shape()) + " vs " +
                                        shape_str(yv.shape()));
  Tensor<T> out(xv.shape());
  {
    const T* xa = xv.data();
    const T* ya = yv.data();
    T* oa = out.mutable_data();
    for (std::int64_t i = 0; i < xv.size(); ++i) oa[i] = xa[i] - ya[i];
  }
  const int xi = x.id, yi = y.id;
  return x.g->make(std::move(out), {xi, yi}, [xi, yi](Graph<T>& g, int self) {
    const Tensor<T>& go = g.grad_buf(self);
    if (g.needs_grad(xi)) detail::axpy(go.size(), T(1), go.data(), g.grad_buf(xi).mutable_data());
    if (g.needs_grad(yi)) detail::axpy(go.size(), T(-1), go.data(), g.grad_buf(yi).mutable_data());
  });
}

template <class T>
Var<T> mul(Var<T> x, Var<T> y) {
  detail::check_same_graph(x, y, "mul");
  const Tensor<T>& xv = x.val();
  const Tensor<T>& yv = y.val();
  require_shape(same_shape(xv, yv), "mul: shape mismatch " + shape_str(xv.shape()) + " vs " +
                                        shape_str(yv.shape()));
  Tensor<T> out(xv.shape());
  {
    const T* xa = xv.data();
    const T* ya = yv.data();
    T* oa = out.mutable_data();
    for (std::int64_t i = 0; i < xv.size(); ++i) oa[i] = xa[i] * ya[i];
  }
  const int xi = x.id, yi = y.id;
  Tensor<T> xs = xv, ys = yv;
  return x.g->make(std::move(out), {xi, yi}, [xi, yi, xs, ys](Graph<T>& g, int self) {
    const T* ga = g.grad_buf(self).data();
    const std::int64_t n = xs.size();
    if (g.needs_grad(xi)) {
      T* dx = g.grad_buf(xi).mutable_data();
      const T* ya = ys.data();
      for (std::int64_t i = 0; i < n; ++i) dx[i] += ga[i] * ya[i];
    }
    if (g.needs_grad(yi)) {
      T* dy = g.grad_buf(yi).mutable_data();
      const T* xa = xs.data();
      for (std::int64_t i = 0; i < n; ++i) dy[i] += ga[i] * xa[i];
    }
  });
}

// Elementwise product with a constant tensor (no gradient into c).
template <class T>
Var<T> mul_const(Var<T> x, Tensor<T> c) {
  const Tensor<T>& xv = x.val();
  require_shape(same_shape(xv, c), "mul_const: shape mismatch " + shape_str(xv.shape()) +
                                       " vs " + shape_str(c.shape()));
  Tensor<T> out(xv.shape());
  {
    const T* xa = xv.data();
    const T* ca = c.data();
    T* oa = out.mutable_data();
    for (std::int64_t i = 0; i < xv.size(); ++i) oa[i] = xa[i] * ca[i];
  }
  const int xi = x.id;
  return x.g->make(std::move(out), {xi}, [xi, c](Graph<T>& g, int self) {
    if (!g.needs_grad(xi)) return;
    const T* ga = g.grad_buf(self).data();
    const T* ca = c.data();
    T* dx = g.grad_buf(xi).mutable_data();
    for (std::int64_t i = 0; i < c.size(); ++i) dx[i] += ga[i] * ca[i];
  });
}

template <class T>
Var<T> scalar_mul(Var<T> x, T c) {
  return detail::map_unary(
      x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <class T>
Var<T> add_scalar(Var<T> x, T c) {
  return detail::map_unary(
      x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> neg(Var<T> x) {
  return scalar_mul(x, T(-1));
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

template <class T>
Var<T> exp_(Var<T> x) {
  return detail::map_unary(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log_(Var<T> x) {
  const Tensor<T>& xv = x.val();
  const T* xa = xv.data();
  for (std::int64_t i = 0; i < xv.size(); ++i) {
    if (!(xa[i] > T(0)))
      throw DomainError("log: non-positive input " + std::to_string(static_cast<double>(xa[i])));
  }
  return detail::map_unary(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Var<T> sigmoid_(Var<T> x) {
  return detail::map_unary(
      x, [](T v) { return detail::sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> softplus_(Var<T> x) {
  return detail::map_unary(
      x, [](T v) { return detail::softplus_scalar(v); },
      [](T v, T) { return detail::sigmoid_scalar(v); });
}

template <class T>
Var<T> leaky_relu(Var<T> x, T slope = T(0.01)) {
  return detail::map_unary(
      x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <class T>
Var<T> swish_(Var<T> x) {
  return detail::map_unary(
      x, [](T v) { return v * detail::sigmoid_scalar(v); },
      [](T v, T) {
        const T s = detail::sigmoid_scalar(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

// Gradient is passed through inside [lo, hi] and cut to zero outside.
template <class T>
Var<T> clamp_(Var<T> x, T lo, T hi) {
  require(lo < hi, "clamp: lo must be < hi");
  return detail::map_unary(
      x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::check_same_graph(a, b, "matmul");
  const Tensor<T>& av = a.val();
  const Tensor<T>& bv = b.val();
  require_shape(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
                "matmul: incompatible shapes " + shape_str(av.shape()) + " vs " +
                    shape_str(bv.shape()));
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out(Shape{m, n});
  detail::matmul_nn_acc(av.data(), bv.data(), out.mutable_data(), m, k, n);
  const int ai = a.id, bi = b.id;
  Tensor<T> as = av, bs = bv;
  return a.g->make(std::move(out), {ai, bi}, [ai, bi, as, bs, m, k, n](Graph<T>& g, int self) {
    const T* go = g.grad_buf(self).data();
    if (g.needs_grad(ai))
      detail::matmul_nt_acc(go, bs.data(), g.grad_buf(ai).mutable_data(), m, n, k);
    if (g.needs_grad(bi))
      detail::matmul_tn_acc(as.data(), go, g.grad_buf(bi).mutable_data(), m, k, n);
  });
}

// x[B x F] + b[F], broadcast over rows.
template <class T>
Var<T> bias_add(Var<T> x, Var<T> b) {
  detail::check_same_graph(x, b, "bias_add");
  const Tensor<T>& xv = x.val();
  const Tensor<T>& bv = b.val();
  require_shape(xv.rank() == 2 && bv.rank() == 1 && bv.dim(0) == xv.dim(1),
                "bias_add: shapes " + shape_str(xv.shape()) + " vs " + shape_str(bv.shape()));
  const int rows = xv.dim(0), cols = xv.dim(1);
  Tensor<T> out(xv.shape());
  {
    const T* xa = xv.data();
    const T* ba = bv.data();
    T* oa = out.mutable_data();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c)
        oa[static_cast<std::int64_t>(r) * cols + c] =
            xa[static_cast<std::int64_t>(r) * cols + c] + ba[c];
  }
  const int xi = x.id, bi = b.id;
  return x.g->make(std::move(out), {xi, bi}, [xi, bi, rows, cols](Graph<T>& g, int self) {
    const T* go = g.grad_buf(self).data();
    if (g.needs_grad(xi))
      detail::axpy(static_cast<std::int64_t>(rows) * cols, T(1), go,
                   g.grad_buf(xi).mutable_data());
    if (g.needs_grad(bi)) {
      T* db = g.grad_buf(bi).mutable_data();
      for (int r = 0; r < rows; ++r)
        detail::axpy<T>(cols, T(1), go + static_cast<std::int64_t>(r) * cols, db);
    }
  });
}

// x[B x C x H x W] + b[C], broadcast over batch and spatial dims.
template <class T>
Var<T> channel_bias_add(Var<T> x, Var<T> b) {
  detail::check_same_graph(x, b, "channel_bias_add");
  const Tensor<T>& xv = x.val();
  const Tensor<T>& bv = b.val();
  require_shape(xv.rank() == 4 && bv.rank() == 1 && bv.dim(0) == xv.dim(1),
                "channel_bias_add: shapes " + shape_str(xv.shape()) + " vs " +
                    shape_str(bv.shape()));
  const int batch = xv.dim(0), ch = xv.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(xv.dim(2)) * xv.dim(3);
  Tensor<T> out(xv.shape());
  {
    const T* xa = xv.data();
    const T* ba = bv.data();
    T* oa = out.mutable_data();
    std::int64_t off = 0;
    for (int n = 0; n < batch; ++n)
      for (int c = 0; c < ch; ++c) {
        const T bc = ba[c];
        for (std::int64_t p = 0; p < plane; ++p, ++off) oa[off] = xa[off] + bc;
      }
  }
  const int xi = x.id, bi = b.id;
  return x.g->make(std::move(out), {xi, bi}, [xi, bi, batch, ch, plane](Graph<T>& g, int self) {
    const T* go = g.grad_buf(self).data();
    if (g.needs_grad(xi))
      detail::axpy(static_cast<std::int64_t>(batch) * ch * plane, T(1), go,
                   g.grad_buf(xi).mutable_data());
    if (g.needs_grad(bi)) {
      T* db = g.grad_buf(bi).mutable_data();
      std::int64_t off = 0;
      for (int n = 0; n < batch; ++n)
        for (int c = 0; c < ch; ++c) {
          T acc = T(0);
          for (std::int64_t p = 0; p < plane; ++p, ++off) acc += go[off];
          db[c] += acc;
        }
    }
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
Var<T> sum_all(Var<T> x) {
  const Tensor<T>& xv = x.val();
  T acc = T(0);
  const T* xa = xv.data();
  for (std::int64_t i = 0; i < xv.size(); ++i) acc += xa[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  const int xi = x.id;
  const std::int64_t n = xv.size();
  return x.g->make(std::move(out), {xi}, [xi, n](Graph<T>& g, int self) {
    if (!g.needs_grad(xi)) return;
    const T g0 = g.grad_buf(self).data()[0];
    T* dx = g.grad_buf(xi).mutable_data();
    for (std::int64_t i = 0; i < n; ++i) dx[i] += g0;
  });
}

// [B x F] -> [B], summing each row.
template <class T>
Var<T> row_sum(Var<T> x) {
  const Tensor<T>& xv = x.val();
  require_shape(xv.rank() == 2, "row_sum: expects rank-2 input, got " + shape_str(xv.shape()));
  const int rows = xv.dim(0), cols = xv.dim(1);
  Tensor<T> out(Shape{rows});
  {
    const T* xa = xv.data();
    T* oa = out.mutable_data();
    for (int r = 0; r < rows; ++r) {
      T acc = T(0);
      const T* row = xa + static_cast<std::int64_t>(r) * cols;
      for (int c = 0; c < cols; ++c) acc += row[c];
      oa[r] = acc;
    }
  }
  const int xi = x.id;
  return x.g->make(std::move(out), {xi}, [xi, rows, cols](Graph<T>& g, int self) {
    if (!g.needs_grad(xi)) return;
    const T* go = g.grad_buf(self).data();
    T* dx = g.grad_buf(xi).mutable_data();
    for (int r = 0; r < rows; ++r) {
      T* row = dx + static_cast<std::int64_t>(r) * cols;
      for (int c = 0; c < cols; ++c) row[c] += go[r];
    }
  });
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> reshape(Var<T> x, Shape s) {
  const Tensor<T>& xv = x.val();
  require_shape(numel(s) == xv.size(), "reshape: cannot view " + shape_str(xv.shape()) + " as " +
                                           shape_str(s));
  Tensor<T> out = xv.reshaped(s);
  const int xi = x.id;
  const std::int64_t n = xv.size();
  return x.g->make(std::move(out), {xi}, [xi, n](Graph<T>& g, int self) {
    if (!g.needs_grad(xi)) return;
    detail::axpy(n, T(1), g.grad_buf(self).data(), g.grad_buf(xi).mutable_data());
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
  require(!xs.empty(), "concat: no inputs");
  Graph<T>* g = xs[0].g;
  const Shape& s0 = xs[0].val().shape();
  const int rank = static_cast<int>(s0.size());
  require_shape(axis >= 0 && axis < rank,
                "concat: axis " + std::to_string(axis) + " out of range for rank " +
                    std::to_string(rank));
  Shape out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = 0;
  for (const Var<T>& v : xs) {
    require(v.g == g, "concat: operands live on different graphs");
    const Shape& s = v.val().shape();
    require_shape(static_cast<int>(s.size()) == rank, "concat: rank mismatch " + shape_str(s0) +
                                                          " vs " + shape_str(s));
    for (int d = 0; d < rank; ++d)
      if (d != axis)
        require_shape(s[static_cast<size_t>(d)] == s0[static_cast<size_t>(d)],
                      "concat: shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
    out_shape[static_cast<size_t>(axis)] += s[static_cast<size_t>(axis)];
  }

  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[static_cast<size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= s0[static_cast<size_t>(d)];
  const std::int64_t out_axis = out_shape[static_cast<size_t>(axis)];

  Tensor<T> out(out_shape);
  std::vector<int> ids;
  std::vector<std::int64_t> lens;  // axis length of each input, in inner-units
  ids.reserve(xs.size());
  lens.reserve(xs.size());
  {
    T* oa = out.mutable_data();
    std::int64_t off_axis = 0;
    for (const Var<T>& v : xs) {
      const Tensor<T>& xv = v.val();
      const std::int64_t len = xv.shape()[static_cast<size_t>(axis)];
      const T* xa = xv.data();
      for (std::int64_t o = 0; o < outer; ++o)
        std::copy(xa + o * len * inner, xa + (o + 1) * len * inner,
                  oa + (o * out_axis + off_axis) * inner);
      ids.push_back(v.id);
      lens.push_back(len);
      off_axis += len;
    }
  }
  return g->make(std::move(out), ids,
                 [ids, lens, outer, inner, out_axis](Graph<T>& gr, int self) {
                   const T* go = gr.grad_buf(self).data();
                   std::int64_t off_axis = 0;
                   for (size_t i = 0; i < ids.size(); ++i) {
                     const std::int64_t len = lens[i];
                     if (gr.needs_grad(ids[i])) {
                       T* dx = gr.grad_buf(ids[i]).mutable_data();
                       for (std::int64_t o = 0; o < outer; ++o)
                         detail::axpy(len * inner, T(1),
                                      go + (o * out_axis + off_axis) * inner,
                                      dx + o * len * inner);
                     }
                     off_axis += len;
                   }
                 });
}

// Scales row b of x[B x ...] by the constant s[b]. No gradient into s.
template <class T>
Var<T> scale_rows(Var<T> x, Tensor<T> s) {
  const Tensor<T>& xv = x.val();
  require_shape(xv.rank() >= 1 && s.rank() == 1 && s.dim(0) == xv.dim(0),
                "scale_rows: shapes " + shape_str(xv.shape()) + " vs " + shape_str(s.shape()));
  const int rows = xv.dim(0);
  const std::int64_t inner = xv.size() / rows;
  Tensor<T> out(xv.shape());
  {
    const T* xa = xv.data();
    const T* sa = s.data();
    T* oa = out.mutable_data();
    for (int r = 0; r < rows; ++r) {
      const T sr = sa[r];
      const std::int64_t base = static_cast<std::int64_t>(r) * inner;
      for (std::int64_t i = 0; i < inner; ++i) oa[base + i] = xa[base + i] * sr;
    }
  }
  const int xi = x.id;
  return x.g->make(std::move(out), {xi}, [xi, s, rows, inner](Graph<T>& g, int self) {
    if (!g.needs_grad(xi)) return;
    const T* go = g.grad_buf(self).data();
    const T* sa = s.data();
    T* dx = g.grad_buf(xi).mutable_data();
    for (int r = 0; r < rows; ++r)
      detail::axpy(inner, sa[r], go + static_cast<std::int64_t>(r) * inner,
                   dx + static_cast<std::int64_t>(r) * inner);
  });
}

// out[b] = x[b, idx[b]] for x[B x K].
template <class T>
Var<T> pick(Var<T> x, const std::vector<int>& idx) {
  const Tensor<T>& xv = x.val();
  require_shape(xv.rank() == 2, "pick: expects rank-2 input, got " + shape_str(xv.shape()));
  const int rows = xv.dim(0), cols = xv.dim(1);
  require(static_cast<int>(idx.size()) == rows,
          "pick: index count " + std::to_string(idx.size()) + " != rows " + std::to_string(rows));
  for (int r = 0; r < rows; ++r) {
    if (idx[static_cast<size_t>(r)] < 0 || idx[static_cast<size_t>(r)] >= cols)
      throw DomainError("pick: index " + std::to_string(idx[static_cast<size_t>(r)]) +
                        " out of range [0, " + std::to_string(cols) + ") at row " +
                        std::to_string(r));
  }
  Tensor<T> out(Shape{rows});
  {
    const T* xa = xv.data();
    T* oa = out.mutable_data();
    for (int r = 0; r < rows; ++r)
      oa[r] = xa[static_cast<std::int64_t>(r) * cols + idx[static_cast<size_t>(r)]];
  }
  const int xi = x.id;
  return x.g->make(std::move(out), {xi}, [xi, idx, rows, cols](Graph<T>& g, int self) {
    if (!g.needs_grad(xi)) return;
    const T* go = g.grad_buf(self).data();
    T* dx = g.grad_buf(xi).mutable_data();
    for (int r = 0; r < rows; ++r)
      dx[static_cast<std::int64_t>(r) * cols + idx[static_cast<size_t>(r)]] += go[r];
  });
}

// Log-sum-exp over one axis, max-shifted for stability. The reduced axis is
// removed from the shape (a rank-1 input reduces to a scalar).
template <class T>
Var<T> logsumexp(Var<T> x, int axis) {
  const Tensor<T>& xv = x.val();
  const int rank = xv.rank();
  require_shape(axis >= 0 && axis < rank,
                "logsumexp: axis " + std::to_string(axis) + " out of range for rank " +
                    std::to_string(rank));
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= xv.dim(d);
  for (int d = axis + 1; d < rank; ++d) inner *= xv.dim(d);
  const std::int64_t len = xv.dim(axis);

  Shape out_shape;
  for (int d = 0; d < rank; ++d)
    if (d != axis) out_shape.push_back(xv.dim(d));
  if (out_shape.empty()) out_shape = Shape{1};

  Tensor<T> out(out_shape);
  {
    const T* xa = xv.data();
    T* oa = out.mutable_data();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        const T* base = xa + (o * len) * inner + i;
        T mx = base[0];
        for (std::int64_t l = 1; l < len; ++l) mx = std::max(mx, base[l * inner]);
        T s = T(0);
        for (std::int64_t l = 0; l < len; ++l) s += std::exp(base[l * inner] - mx);
        oa[o * inner + i] = mx + std::log(s);
      }
  }
  const int xi = x.id;
  Tensor<T> xin = xv, yout = out;
  return x.g->make(std::move(out), {xi},
                   [xi, xin, yout, outer, inner, len](Graph<T>& g, int self) {
                     if (!g.needs_grad(xi)) return;
                     const T* go = g.grad_buf(self).data();
                     const T* xa = xin.data();
                     const T* ya = yout.data();
                     T* dx = g.grad_buf(xi).mutable_data();
                     for (std::int64_t o = 0; o < outer; ++o)
                       for (std::int64_t i = 0; i < inner; ++i) {
                         const T gv = go[o * inner + i];
                         const T yv = ya[o * inner + i];
                         const std::int64_t base = (o * len) * inner + i;
                         for (std::int64_t l = 0; l < len; ++l)
                           dx[base + l * inner] += gv * std::exp(xa[base + l * inner] - yv);
                       }
                   });
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

// Running statistics live outside the graph; they are updated in place during
// training forward passes and carry no gradient.
template <class T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  BatchNormState() = default;
  explicit BatchNormState(int features)
      : running_mean(Shape{features}, T(0)), running_var(Shape{features}, T(1)) {}
};

// x[B x F], gamma[F], beta[F]. Training mode normalizes with biased batch
// statistics and the backward pass differentiates through them; eval mode uses
// the stored running statistics as constants.
template <class T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormState<T>& state, bool train,
                 T momentum = T(0.1), T eps = T(1e-5)) {
  detail::check_same_graph(x, gamma, "batchnorm");
  detail::check_same_graph(x, beta, "batchnorm");
  const Tensor<T>& xv = x.val();
  const Tensor<T>& gv = gamma.val();
  const Tensor<T>& bv = beta.val();
  require_shape(xv.rank() == 2, "batchnorm: expects rank-2 input, got " + shape_str(xv.shape()));
  const int rows = xv.dim(0), cols = xv.dim(1);
  require_shape(gv.rank() == 1 && gv.dim(0) == cols && bv.rank() == 1 && bv.dim(0) == cols,
                "batchnorm: parameter shapes " + shape_str(gv.shape()) + ", " +
                    shape_str(bv.shape()) + " do not match feature dim of " +
                    shape_str(xv.shape()));
  require_shape(state.running_mean.dim(0) == cols && state.running_var.dim(0) == cols,
                "batchnorm: state sized for " + shape_str(state.running_mean.shape()) +
                    " but input has " + std::to_string(cols) + " features");
  if (train && rows < 2)
    throw ConfigError("batchnorm: training forward needs batch size >= 2, got " +
                      std::to_string(rows));

  Tensor<T> mean(Shape{cols}), var(Shape{cols});
  if (train) {
    T* ma = mean.mutable_data();
    T* va = var.mutable_data();
    const T* xa = xv.data();
    for (int c = 0; c < cols; ++c) {
      T m = T(0);
      for (int r = 0; r < rows; ++r) m += xa[static_cast<std::int64_t>(r) * cols + c];
      m /= T(rows);
      T v = T(0);
      for (int r = 0; r < rows; ++r) {
        const T d = xa[static_cast<std::int64_t>(r) * cols + c] - m;
        v += d * d;
      }
      ma[c] = m;
      va[c] = v / T(rows);
    }
    T* rm = state.running_mean.mutable_data();
    T* rv = state.running_var.mutable_data();
    for (int c = 0; c < cols; ++c) {
      rm[c] = (T(1) - momentum) * rm[c] + momentum * ma[c];
      rv[c] = (T(1) - momentum) * rv[c] + momentum * va[c];
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  Tensor<T> inv_std(Shape{cols});
  {
    T* ia = inv_std.mutable_data();
    const T* va = var.data();
    for (int c = 0; c < cols; ++c) ia[c] = T(1) / std::sqrt(va[c] + eps);
  }
  Tensor<T> xhat(xv.shape());
  Tensor<T> out(xv.shape());
  {
    const T* xa = xv.data();
    const T* ma = mean.data();
    const T* ia = inv_std.data();
    const T* ga = gv.data();
    const T* ba = bv.data();
    T* ha = xhat.mutable_data();
    T* oa = out.mutable_data();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const std::int64_t k = static_cast<std::int64_t>(r) * cols + c;
        ha[k] = (xa[k] - ma[c]) * ia[c];
        oa[k] = ga[c] * ha[k] + ba[c];
      }
  }

  const int xi = x.id, gi = gamma.id, bi = beta.id;
  Tensor<T> gsave = gv;
  return x.g->make(
      std::move(out), {xi, gi, bi},
      [xi, gi, bi, xhat, inv_std, gsave, rows, cols, train](Graph<T>& g, int self) {
        const T* go = g.grad_buf(self).data();
        const T* ha = xhat.data();
        if (g.needs_grad(bi)) {
          T* db = g.grad_buf(bi).mutable_data();
          for (int r = 0; r < rows; ++r)
            detail::axpy<T>(cols, T(1), go + static_cast<std::int64_t>(r) * cols, db);
        }
        if (g.needs_grad(gi)) {
          T* dg = g.grad_buf(gi).mutable_data();
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
              const std::int64_t k = static_cast<std::int64_t>(r) * cols + c;
              dg[c] += go[k] * ha[k];
            }
        }
        if (!g.needs_grad(xi)) return;
        const T* ia = inv_std.data();
        const T* ga = gsave.data();
        T* dx = g.grad_buf(xi).mutable_data();
        if (!train) {
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
              const std::int64_t k = static_cast<std::int64_t>(r) * cols + c;
              dx[k] += go[k] * ga[c] * ia[c];
            }
          return;
        }
        // Training mode: gradient flows through the batch mean and variance.
        std::vector<T> sum_g(static_cast<size_t>(cols), T(0));
        std::vector<T> sum_gh(static_cast<size_t>(cols), T(0));
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) {
            const std::int64_t k = static_cast<std::int64_t>(r) * cols + c;
            sum_g[static_cast<size_t>(c)] += go[k];
            sum_gh[static_cast<size_t>(c)] += go[k] * ha[k];
          }
        const T invB = T(1) / T(rows);
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) {
            const std::int64_t k = static_cast<std::int64_t>(r) * cols + c;
            dx[k] += ga[c] * ia[c] *
                     (go[k] - invB * sum_g[static_cast<size_t>(c)] -
                      ha[k] * invB * sum_gh[static_cast<size_t>(c)]);
          }
      });
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

// x[B x Ci x H x W], w[Co x Ci x KH x KW]. Cross-correlation with zero
// padding; output spatial dims are (H + 2p - KH)/s + 1 (floor).
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, int stride, int pad) {
  detail::check_same_graph(x, w, "conv2d");
  require(stride >= 1 && pad >= 0, "conv2d: stride must be >= 1 and pad >= 0");
  const Tensor<T>& xv = x.val();
  const Tensor<T>& wv = w.val();
  require_shape(xv.rank() == 4 && wv.rank() == 4 && xv.dim(1) == wv.dim(1),
                "conv2d: shapes " + shape_str(xv.shape()) + " vs " + shape_str(wv.shape()));
  const int B = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Co = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
  const int Ho = (H + 2 * pad - KH) / stride + 1;
  const int Wo = (W + 2 * pad - KW) / stride + 1;
  require_shape(H + 2 * pad >= KH && W + 2 * pad >= KW,
                "conv2d: kernel " + shape_str(wv.shape()) + " larger than padded input " +
                    shape_str(xv.shape()));

  auto xat = [=](const T* p, int b, int c, int h, int ww) {
    return p[((static_cast<std::int64_t>(b) * Ci + c) * H + h) * W + ww];
  };
  auto wat = [=](const T* p, int co, int ci, int kh, int kw) {
    return p[((static_cast<std::int64_t>(co) * Ci + ci) * KH + kh) * KW + kw];
  };

  Tensor<T> out(Shape{B, Co, Ho, Wo});
  {
    const T* xa = xv.data();
    const T* wa = wv.data();
    T* oa = out.mutable_data();
    std::int64_t off = 0;
    for (int b = 0; b < B; ++b)
      for (int co = 0; co < Co; ++co)
        for (int oh = 0; oh < Ho; ++oh)
          for (int ow = 0; ow < Wo; ++ow, ++off) {
            T acc = T(0);
            for (int ci = 0; ci < Ci; ++ci)
              for (int kh = 0; kh < KH; ++kh) {
                const int ih = oh * stride - pad + kh;
                if (ih < 0 || ih >= H) continue;
                for (int kw = 0; kw < KW; ++kw) {
                  const int iw = ow * stride - pad + kw;
                  if (iw < 0 || iw >= W) continue;
                  acc += xat(xa, b, ci, ih, iw) * wat(wa, co, ci, kh, kw);
                }
              }
            oa[off] = acc;
          }
  }

  const int xi = x.id, wi = w.id;
  Tensor<T> xs = xv, ws = wv;
  return x.g->make(
      std::move(out), {xi, wi},
      [=](Graph<T>& g, int self) {
        const T* go = g.grad_buf(self).data();
        const bool nx = g.needs_grad(xi), nw = g.needs_grad(wi);
        T* dx = nx ? g.grad_buf(xi).mutable_data() : nullptr;
        T* dw = nw ? g.grad_buf(wi).mutable_data() : nullptr;
        const T* xa = xs.data();
        const T* wa = ws.data();
        std::int64_t off = 0;
        for (int b = 0; b < B; ++b)
          for (int co = 0; co < Co; ++co)
            for (int oh = 0; oh < Ho; ++oh)
              for (int ow = 0; ow < Wo; ++ow, ++off) {
                const T gv = go[off];
                if (gv == T(0)) continue;
                for (int ci = 0; ci < Ci; ++ci)
                  for (int kh = 0; kh < KH; ++kh) {
                    const int ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= H) continue;
                    for (int kw = 0; kw < KW; ++kw) {
                      const int iw = ow * stride - pad + kw;
                      if (iw < 0 || iw >= W) continue;
                      const std::int64_t xk =
                          ((static_cast<std::int64_t>(b) * Ci + ci) * H + ih) * W + iw;
                      const std::int64_t wk =
                          ((static_cast<std::int64_t>(co) * Ci + ci) * KH + kh) * KW + kw;
                      if (nx) dx[xk] += gv * wa[wk];
                      if (nw) dw[wk] += gv * xa[xk];
                    }
                  }
              }
      });
}

// x[B x Ci x H x W], w[Ci x Co x KH x KW]. Adjoint of conv2d; output spatial
// dims are (H - 1)*s - 2p + KH.
template <class T>
Var<T> conv_transpose2d(Var<T> x, Var<T> w, int stride, int pad) {
  detail::check_same_graph(x, w, "conv_transpose2d");
  require(stride >= 1 && pad >= 0, "conv_transpose2d: stride must be >= 1 and pad >= 0");
  const Tensor<T>& xv = x.val();
  const Tensor<T>& wv = w.val();
  require_shape(xv.rank() == 4 && wv.rank() == 4 && xv.dim(1) == wv.dim(0),
                "conv_transpose2d: shapes " + shape_str(xv.shape()) + " vs " +
                    shape_str(wv.shape()));
  const int B = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Co = wv.dim(1), KH = wv.dim(2), KW = wv.dim(3);
  const int Ho = (H - 1) * stride - 2 * pad + KH;
  const int Wo = (W - 1) * stride - 2 * pad + KW;
  require_shape(Ho >= 1 && Wo >= 1, "conv_transpose2d: empty output for input " +
                                        shape_str(xv.shape()) + " and kernel " +
                                        shape_str(wv.shape()));

  Tensor<T> out(Shape{B, Co, Ho, Wo});
  {
    const T* xa = xv.data();
    const T* wa = wv.data();
    T* oa = out.mutable_data();
    for (int b = 0; b < B; ++b)
      for (int ci = 0; ci < Ci; ++ci)
        for (int ih = 0; ih < H; ++ih)
          for (int iw = 0; iw < W; ++iw) {
            const T v = xa[((static_cast<std::int64_t>(b) * Ci + ci) * H + ih) * W + iw];
            if (v == T(0)) continue;
            for (int co = 0; co < Co; ++co)
              for (int kh = 0; kh < KH; ++kh) {
                const int oh = ih * stride - pad + kh;
                if (oh < 0 || oh >= Ho) continue;
                for (int kw = 0; kw < KW; ++kw) {
                  const int ow = iw * stride - pad + kw;
                  if (ow < 0 || ow >= Wo) continue;
                  oa[((static_cast<std::int64_t>(b) * Co + co) * Ho + oh) * Wo + ow] +=
                      v * wa[((static_cast<std::int64_t>(ci) * Co + co) * KH + kh) * KW + kw];
                }
              }
          }
  }

  const int xi = x.id, wi = w.id;
  Tensor<T> xs = xv, ws = wv;
  return x.g->make(
      std::move(out), {xi, wi},
      [=](Graph<T>& g, int self) {
        const T* go = g.grad_buf(self).data();
        const bool nx = g.needs_grad(xi), nw = g.needs_grad(wi);
        T* dx = nx ? g.grad_buf(xi).mutable_data() : nullptr;
        T* dw = nw ? g.grad_buf(wi).mutable_data() : nullptr;
        const T* xa = xs.data();
        const T* wa = ws.data();
        for (int b = 0; b < B; ++b)
          for (int ci = 0; ci < Ci; ++ci)
            for (int ih = 0; ih < H; ++ih)
              for (int iw = 0; iw < W; ++iw) {
                const std::int64_t xk =
                    ((static_cast<std::int64_t>(b) * Ci + ci) * H + ih) * W + iw;
                const T xval = xa[xk];
                T acc = T(0);
                for (int co = 0; co < Co; ++co)
                  for (int kh = 0; kh < KH; ++kh) {
                    const int oh = ih * stride - pad + kh;
                    if (oh < 0 || oh >= Ho) continue;
                    for (int kw = 0; kw < KW; ++kw) {
                      const int ow = iw * stride - pad + kw;
                      if (ow < 0 || ow >= Wo) continue;
                      const std::int64_t ok =
                          ((static_cast<std::int64_t>(b) * Co + co) * Ho + oh) * Wo + ow;
                      const std::int64_t wk =
                          ((static_cast<std::int64_t>(ci) * Co + co) * KH + kh) * KW + kw;
                      const T gv = go[ok];
                      if (nx) acc += gv * wa[wk];
                      if (nw) dw[wk] += gv * xval;
                    }
                  }
                if (nx) dx[xk] += acc;
              }
      });
}

}  // namespace mhvae
