#pragma once

#include <cmath>
#include <initializer_list>
#include <vector>

#include "cer/rng.hpp"
#include "cer/tensor.hpp"

namespace cer {

namespace detail {

template <class S>
inline bool want_grad(const Tape<S>* tp, std::initializer_list<const Tensor<S>*> inputs) {
  if (!tp) return false;
  for (const Tensor<S>* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

[[noreturn]] inline void shape_error(const char* op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail);
}

template <class S>
inline void require(bool ok, const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (!ok) shape_error(op, "incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

template <class S>
inline void require(bool ok, const char* op, const Tensor<S>& a) {
  if (!ok) shape_error(op, "bad shape " + shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(Tape<S>* tp, Tensor<S> a, Tensor<S> b) {
  detail::require(a.shape() == b.shape(), "add", a, b);
  Tensor<S> y = Tensor<S>::from_matrix(a.value() + b.value(), a.shape());
  if (detail::want_grad(tp, {&a, &b})) {
    y.set_requires_grad(true);
    tp->record([a, b, y]() mutable {
      if (a.requires_grad()) a.grad() += y.grad();
      if (b.requires_grad()) b.grad() += y.grad();
    });
  }
  return y;
}

template <class S>
Tensor<S> sub(Tape<S>* tp, Tensor<S> a, Tensor<S> b) {
  detail::require(a.shape() == b.shape(), "sub", a, b);
  Tensor<S> y = Tensor<S>::from_matrix(a.value() - b.value(), a.shape());
  if (detail::want_grad(tp, {&a, &b})) {
    y.set_requires_grad(true);
    tp->record([a, b, y]() mutable {
      if (a.requires_grad()) a.grad() += y.grad();
      if (b.requires_grad()) b.grad() -= y.grad();
    });
  }
  return y;
}

template <class S>
Tensor<S> mul(Tape<S>* tp, Tensor<S> a, Tensor<S> b) {
  detail::require(a.shape() == b.shape(), "mul", a, b);
  Tensor<S> y = Tensor<S>::from_matrix(a.value().cwiseProduct(b.value()), a.shape());
  if (detail::want_grad(tp, {&a, &b})) {
    y.set_requires_grad(true);
    tp->record([a, b, y]() mutable {
      if (a.requires_grad()) a.grad() += y.grad().cwiseProduct(b.value());
      if (b.requires_grad()) b.grad() += y.grad().cwiseProduct(a.value());
    });
  }
  return y;
}

template <class S>
Tensor<S> scale(Tape<S>* tp, Tensor<S> a, S c) {
  Tensor<S> y = Tensor<S>::from_matrix(a.value() * c, a.shape());
  if (detail::want_grad(tp, {&a})) {
    y.set_requires_grad(true);
    tp->record([a, y, c]() mutable { a.grad() += y.grad() * c; });
  }
  return y;
}

// Adds a length-D row vector to every row of a (..., D) tensor.
template <class S>
Tensor<S> add_bias(Tape<S>* tp, Tensor<S> a, Tensor<S> bias) {
  detail::require(bias.numel() == a.cols() && bias.rows() == 1, "add_bias", a, bias);
  Mat<S> v = a.value();
  v.rowwise() += bias.value().row(0);
  Tensor<S> y = Tensor<S>::from_matrix(std::move(v), a.shape());
  if (detail::want_grad(tp, {&a, &bias})) {
    y.set_requires_grad(true);
    tp->record([a, bias, y]() mutable {
      if (a.requires_grad()) a.grad() += y.grad();
      if (bias.requires_grad()) bias.grad().row(0) += y.grad().colwise().sum();
    });
  }
  return y;
}

template <class S>
Tensor<S> relu(Tape<S>* tp, Tensor<S> x) {
  Tensor<S> y = Tensor<S>::from_matrix(x.value().cwiseMax(S(0)), x.shape());
  if (detail::want_grad(tp, {&x})) {
    y.set_requires_grad(true);
    tp->record([x, y]() mutable {
      x.grad().array() += (x.value().array() > S(0)).template cast<S>() * y.grad().array();
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Contractions
// ---------------------------------------------------------------------------

// (..., k) x (k, m) -> (..., m); leading dimensions of `a` are flattened rows.
template <class S>
Tensor<S> matmul(Tape<S>* tp, Tensor<S> a, Tensor<S> b) {
  detail::require(b.ndim() == 2 && a.cols() == b.rows(), "matmul", a, b);
  Shape out_shape = a.shape();
  out_shape.back() = b.cols();
  Mat<S> v(a.rows(), b.cols());
  v.noalias() = a.value() * b.value();
  Tensor<S> y = Tensor<S>::from_matrix(std::move(v), std::move(out_shape));
  if (detail::want_grad(tp, {&a, &b})) {
    y.set_requires_grad(true);
    tp->record([a, b, y]() mutable {
      if (a.requires_grad()) a.grad().noalias() += y.grad() * b.value().transpose();
      if (b.requires_grad()) b.grad().noalias() += a.value().transpose() * y.grad();
    });
  }
  return y;
}

// Batched matmul over the leading dimensions: a is (G..., n, k); b is
// (G..., k, m), or (G..., m, k) with transpose_b. Batches are contiguous row
// blocks of the flattened storage.
template <class S>
Tensor<S> bmm(Tape<S>* tp, Tensor<S> a, Tensor<S> b, bool transpose_b = false) {
  detail::require(a.ndim() >= 2 && b.ndim() >= 2, "bmm", a, b);
  const Index n = a.dim(-2), k = a.dim(-1);
  const Index bk = transpose_b ? b.dim(-1) : b.dim(-2);
  const Index m = transpose_b ? b.dim(-2) : b.dim(-1);
  const Index groups = a.rows() / n;
  detail::require(k == bk && groups == b.rows() / (transpose_b ? m : k), "bmm", a, b);

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(m);
  Tensor<S> y = Tensor<S>::zeros(std::move(out_shape));
  const Index brows = transpose_b ? m : k;
  for (Index g = 0; g < groups; ++g) {
    auto A = a.value().middleRows(g * n, n);
    auto B = b.value().middleRows(g * brows, brows);
    if (transpose_b)
      y.value().middleRows(g * n, n).noalias() = A * B.transpose();
    else
      y.value().middleRows(g * n, n).noalias() = A * B;
  }
  if (detail::want_grad(tp, {&a, &b})) {
    y.set_requires_grad(true);
    tp->record([a, b, y, groups, n, brows, transpose_b]() mutable {
      for (Index g = 0; g < groups; ++g) {
        auto dY = y.grad().middleRows(g * n, n);
        if (a.requires_grad()) {
          auto B = b.value().middleRows(g * brows, brows);
          if (transpose_b)
            a.grad().middleRows(g * n, n).noalias() += dY * B;
          else
            a.grad().middleRows(g * n, n).noalias() += dY * B.transpose();
        }
        if (b.requires_grad()) {
          auto A = a.value().middleRows(g * n, n);
          if (transpose_b)
            b.grad().middleRows(g * brows, brows).noalias() += dY.transpose() * A;
          else
            b.grad().middleRows(g * brows, brows).noalias() += A.transpose() * dY;
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Normalizations
// ---------------------------------------------------------------------------

// Row-wise softmax, stabilized by row-max subtraction.
template <class S>
Tensor<S> softmax_rows(Tape<S>* tp, Tensor<S> x) {
  Mat<S> v = x.value();
  for (Index r = 0; r < v.rows(); ++r) {
    auto row = v.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp();
    row /= row.sum();
  }
  Tensor<S> y = Tensor<S>::from_matrix(std::move(v), x.shape());
  if (detail::want_grad(tp, {&x})) {
    y.set_requires_grad(true);
    tp->record([x, y]() mutable {
      for (Index r = 0; r < y.value().rows(); ++r) {
        auto yr = y.value().row(r);
        auto dyr = y.grad().row(r);
        const S dot = dyr.cwiseProduct(yr).sum();
        x.grad().row(r).array() += yr.array() * (dyr.array() - dot);
      }
    });
  }
  return y;
}

// Row-wise layer normalization with learned gain/bias over the last dim.
template <class S>
Tensor<S> layer_norm(Tape<S>* tp, Tensor<S> x, Tensor<S> gain, Tensor<S> bias,
                     S eps = S(1e-5)) {
  detail::require(gain.numel() == x.cols() && bias.numel() == x.cols(), "layer_norm", x, gain);
  const Index R = x.rows(), D = x.cols();
  Mat<S> xhat(R, D);
  Mat<S> inv_std(R, 1);
  for (Index r = 0; r < R; ++r) {
    auto row = x.value().row(r);
    const S mean = row.mean();
    const S var = (row.array() - mean).square().sum() / S(D);
    const S istd = S(1) / std::sqrt(var + eps);
    inv_std(r, 0) = istd;
    xhat.row(r) = (row.array() - mean) * istd;
  }
  Mat<S> v = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
             bias.value().row(0).array();
  Tensor<S> y = Tensor<S>::from_matrix(std::move(v), x.shape());
  if (detail::want_grad(tp, {&x, &gain, &bias})) {
    y.set_requires_grad(true);
    tp->record([x, gain, bias, y, xhat, inv_std]() mutable {
      const Index R2 = xhat.rows(), D2 = xhat.cols();
      if (gain.requires_grad())
        gain.grad().row(0) += y.grad().cwiseProduct(xhat).colwise().sum();
      if (bias.requires_grad()) bias.grad().row(0) += y.grad().colwise().sum();
      if (x.requires_grad()) {
        for (Index r = 0; r < R2; ++r) {
          Eigen::Array<S, 1, Eigen::Dynamic> dxhat =
              y.grad().row(r).array() * gain.value().row(0).array();
          const S m1 = dxhat.sum() / S(D2);
          const S m2 = (dxhat * xhat.row(r).array()).sum() / S(D2);
          x.grad().row(r).array() += inv_std(r, 0) * (dxhat - m1 - xhat.row(r).array() * m2);
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

// Inverted dropout: scales kept activations by 1/(1-p) at train time so
// inference needs no rescaling. Consumes one RNG draw per element, row-major.
template <class S>
Tensor<S> dropout(Tape<S>* tp, Tensor<S> x, double p, Rng& rng, bool train) {
  if (!train || p <= 0.0) return x;
  if (p >= 1.0) detail::shape_error("dropout", "rate must be < 1");
  const S scale = S(1.0 / (1.0 - p));
  Mat<S> mask(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r)
    for (Index c = 0; c < x.cols(); ++c) mask(r, c) = rng.uniform() < p ? S(0) : scale;
  Tensor<S> y = Tensor<S>::from_matrix(x.value().cwiseProduct(mask), x.shape());
  if (detail::want_grad(tp, {&x})) {
    y.set_requires_grad(true);
    tp->record([x, y, mask]() mutable { x.grad() += y.grad().cwiseProduct(mask); });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Gather / scatter / layout
// ---------------------------------------------------------------------------

// Row gather (embedding lookup). Backward scatter-adds into the table.
template <class S>
Tensor<S> gather_rows(Tape<S>* tp, Tensor<S> table, const std::vector<int>& ids,
                      Shape out_shape = {}) {
  const Index n = static_cast<Index>(ids.size());
  if (out_shape.empty()) out_shape = {n, table.cols()};
  if (shape_numel(out_shape) != n * table.cols())
    detail::shape_error("gather_rows", "out shape " + shape_str(out_shape) + " does not hold " +
                                           std::to_string(n) + " rows");
  Mat<S> v(n, table.cols());
  for (Index i = 0; i < n; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= table.rows())
      detail::shape_error("gather_rows", "id " + std::to_string(id) + " out of range [0," +
                                             std::to_string(table.rows()) + ")");
    v.row(i) = table.value().row(id);
  }
  Tensor<S> y = Tensor<S>::from_matrix(std::move(v), std::move(out_shape));
  if (detail::want_grad(tp, {&table})) {
    y.set_requires_grad(true);
    tp->record([table, y, ids]() mutable {
      for (Index i = 0; i < y.grad().rows(); ++i)
        table.grad().row(ids[static_cast<std::size_t>(i)]) += y.grad().row(i);
    });
  }
  return y;
}

// Replaces rows at distinct positions by the rows of `repl`. The original rows
// at replaced positions receive no gradient through this op.
template <class S>
Tensor<S> scatter_replace_rows(Tape<S>* tp, Tensor<S> x, const std::vector<Index>& positions,
                               Tensor<S> repl) {
  detail::require(repl.cols() == x.cols() && repl.rows() == static_cast<Index>(positions.size()),
                  "scatter_replace_rows", x, repl);
  Mat<S> v = x.value();
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] < 0 || positions[i] >= x.rows())
      detail::shape_error("scatter_replace_rows", "position out of range");
    v.row(positions[i]) = repl.value().row(static_cast<Index>(i));
  }
  Tensor<S> y = Tensor<S>::from_matrix(std::move(v), x.shape());
  if (detail::want_grad(tp, {&x, &repl})) {
    y.set_requires_grad(true);
    tp->record([x, repl, y, positions]() mutable {
      if (x.requires_grad()) {
        Mat<S> g = y.grad();
        for (Index p : positions) g.row(p).setZero();
        x.grad() += g;
      }
      if (repl.requires_grad()) {
        for (std::size_t i = 0; i < positions.size(); ++i)
          repl.grad().row(static_cast<Index>(i)) += y.grad().row(positions[i]);
      }
    });
  }
  return y;
}

// Means of consecutive row groups of fixed size: (G*m, D) -> (G, D).
template <class S>
Tensor<S> group_mean_rows(Tape<S>* tp, Tensor<S> x, Index group) {
  detail::require(group >= 1 && x.rows() % group == 0, "group_mean_rows", x);
  const Index g = x.rows() / group;
  Mat<S> v(g, x.cols());
  for (Index i = 0; i < g; ++i) v.row(i) = x.value().middleRows(i * group, group).colwise().mean();
  Tensor<S> y = Tensor<S>::from_matrix(std::move(v));
  if (detail::want_grad(tp, {&x})) {
    y.set_requires_grad(true);
    tp->record([x, y, g, group]() mutable {
      const S inv = S(1) / S(group);
      for (Index i = 0; i < g; ++i)
        x.grad().middleRows(i * group, group).rowwise() += (y.grad().row(i) * inv).eval();
    });
  }
  return y;
}

// (B, L, H*Dh) -> (B, H, L, Dh)
template <class S>
Tensor<S> split_heads(Tape<S>* tp, Tensor<S> x, Index heads) {
  detail::require(x.ndim() == 3 && x.cols() % heads == 0, "split_heads", x);
  const Index B = x.dim(0), L = x.dim(1), D = x.cols(), Dh = D / heads;
  Tensor<S> y = Tensor<S>::zeros({B, heads, L, Dh});
  for (Index b = 0; b < B; ++b)
    for (Index h = 0; h < heads; ++h)
      for (Index l = 0; l < L; ++l)
        y.value().row(((b * heads + h) * L) + l) = x.value().row(b * L + l).segment(h * Dh, Dh);
  if (detail::want_grad(tp, {&x})) {
    y.set_requires_grad(true);
    tp->record([x, y, B, heads, L, Dh]() mutable {
      for (Index b = 0; b < B; ++b)
        for (Index h = 0; h < heads; ++h)
          for (Index l = 0; l < L; ++l)
            x.grad().row(b * L + l).segment(h * Dh, Dh) += y.grad().row(((b * heads + h) * L) + l);
    });
  }
  return y;
}

// (B, H, L, Dh) -> (B, L, H*Dh)
template <class S>
Tensor<S> merge_heads(Tape<S>* tp, Tensor<S> x) {
  detail::require(x.ndim() == 4, "merge_heads", x);
  const Index B = x.dim(0), H = x.dim(1), L = x.dim(2), Dh = x.dim(3);
  Tensor<S> y = Tensor<S>::zeros({B, L, H * Dh});
  for (Index b = 0; b < B; ++b)
    for (Index h = 0; h < H; ++h)
      for (Index l = 0; l < L; ++l)
        y.value().row(b * L + l).segment(h * Dh, Dh) = x.value().row(((b * H + h) * L) + l);
  if (detail::want_grad(tp, {&x})) {
    y.set_requires_grad(true);
    tp->record([x, y, B, H, L, Dh]() mutable {
      for (Index b = 0; b < B; ++b)
        for (Index h = 0; h < H; ++h)
          for (Index l = 0; l < L; ++l)
            x.grad().row(((b * H + h) * L) + l) += y.grad().row(b * L + l).segment(h * Dh, Dh);
    });
  }
  return y;
}

// Adds a constant (B*Lq, Lk) additive mask to (B, H, Lq, Lk) scores,
// broadcasting over heads. Used for padding and causal masking.
template <class S>
Tensor<S> add_attention_mask(Tape<S>* tp, Tensor<S> scores, const Mat<S>& mask, Index heads) {
  detail::require(scores.ndim() == 4 && scores.dim(1) == heads, "add_attention_mask", scores);
  const Index B = scores.dim(0), Lq = scores.dim(2), Lk = scores.dim(3);
  if (mask.rows() != B * Lq || mask.cols() != Lk)
    detail::shape_error("add_attention_mask", "mask is " + std::to_string(mask.rows()) + "x" +
                                                  std::to_string(mask.cols()));
  Mat<S> v = scores.value();
  for (Index b = 0; b < B; ++b)
    for (Index h = 0; h < heads; ++h)
      v.middleRows((b * heads + h) * Lq, Lq) += mask.middleRows(b * Lq, Lq);
  Tensor<S> y = Tensor<S>::from_matrix(std::move(v), scores.shape());
  if (detail::want_grad(tp, {&scores})) {
    y.set_requires_grad(true);
    tp->record([scores, y]() mutable { scores.grad() += y.grad(); });
  }
  return y;
}

// Adds sinusoidal position rows to a (B, L, D) tensor.
template <class S>
Tensor<S> add_positions(Tape<S>* tp, Tensor<S> x, const Mat<S>& pos) {
  detail::require(x.ndim() == 3, "add_positions", x);
  const Index B = x.dim(0), L = x.dim(1);
  if (pos.rows() < L || pos.cols() != x.cols())
    detail::shape_error("add_positions", "position table too small for sequence length " +
                                             std::to_string(L));
  Mat<S> v = x.value();
  for (Index b = 0; b < B; ++b) v.middleRows(b * L, L) += pos.topRows(L);
  Tensor<S> y = Tensor<S>::from_matrix(std::move(v), x.shape());
  if (detail::want_grad(tp, {&x})) {
    y.set_requires_grad(true);
    tp->record([x, y]() mutable { x.grad() += y.grad(); });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum_all(Tape<S>* tp, Tensor<S> x) {
  Tensor<S> y = Tensor<S>::scalar(x.value().sum());
  if (detail::want_grad(tp, {&x})) {
    y.set_requires_grad(true);
    tp->record([x, y]() mutable { x.grad().array() += y.grad()(0, 0); });
  }
  return y;
}

// Mean squared error over all elements.
template <class S>
Tensor<S> mse(Tape<S>* tp, Tensor<S> a, Tensor<S> b) {
  detail::require(a.shape() == b.shape(), "mse", a, b);
  const Mat<S> diff = a.value() - b.value();
  const S n = S(a.numel());
  Tensor<S> y = Tensor<S>::scalar(diff.squaredNorm() / n);
  if (detail::want_grad(tp, {&a, &b})) {
    y.set_requires_grad(true);
    tp->record([a, b, y, diff, n]() mutable {
      const S g = y.grad()(0, 0) * S(2) / n;
      if (a.requires_grad()) a.grad() += g * diff;
      if (b.requires_grad()) b.grad() -= g * diff;
    });
  }
  return y;
}

// Per-row squared L2 distance, summed over the last dim, averaged over rows
// with nonzero weight: sum_r w_r * ||a_r - b_r||^2 / sum_r w_r.
template <class S>
Tensor<S> weighted_sq_dist(Tape<S>* tp, Tensor<S> a, Tensor<S> b,
                           const std::vector<S>& w) {
  detail::require(a.shape() == b.shape(), "weighted_sq_dist", a, b);
  if (static_cast<Index>(w.size()) != a.rows())
    detail::shape_error("weighted_sq_dist", "weight count does not match rows");
  const Mat<S> diff = a.value() - b.value();
  S wsum = S(0), acc = S(0);
  for (Index r = 0; r < diff.rows(); ++r) {
    wsum += w[static_cast<std::size_t>(r)];
    acc += w[static_cast<std::size_t>(r)] * diff.row(r).squaredNorm();
  }
  if (wsum <= S(0)) detail::shape_error("weighted_sq_dist", "all weights are zero");
  Tensor<S> y = Tensor<S>::scalar(acc / wsum);
  if (detail::want_grad(tp, {&a, &b})) {
    y.set_requires_grad(true);
    tp->record([a, b, y, diff, w, wsum]() mutable {
      const S g = y.grad()(0, 0) * S(2) / wsum;
      for (Index r = 0; r < diff.rows(); ++r) {
        const S c = g * w[static_cast<std::size_t>(r)];
        if (c == S(0)) continue;
        if (a.requires_grad()) a.grad().row(r) += c * diff.row(r);
        if (b.requires_grad()) b.grad().row(r) -= c * diff.row(r);
      }
    });
  }
  return y;
}

// Token-averaged cross entropy over rows of (T, V) logits, with optional
// label smoothing mass spread uniformly over the vocabulary. Rows with zero
// weight (padding) contribute nothing to value or gradient.
template <class S>
Tensor<S> cross_entropy(Tape<S>* tp, Tensor<S> logits, const std::vector<int>& labels,
                        const std::vector<S>& weights, S label_smoothing = S(0)) {
  const Index T = logits.rows(), V = logits.cols();
  if (static_cast<Index>(labels.size()) != T || static_cast<Index>(weights.size()) != T)
    detail::shape_error("cross_entropy", "labels/weights do not match logit rows");
  Mat<S> probs(T, V);
  S wsum = S(0), acc = S(0);
  const S eps = label_smoothing;
  for (Index t = 0; t < T; ++t) {
    auto row = logits.value().row(t);
    const S mx = row.maxCoeff();
    probs.row(t) = (row.array() - mx).exp();
    const S z = probs.row(t).sum();
    probs.row(t) /= z;
    const S w = weights[static_cast<std::size_t>(t)];
    if (w == S(0)) continue;
    const int y = labels[static_cast<std::size_t>(t)];
    if (y < 0 || y >= V) detail::shape_error("cross_entropy", "label out of range");
    const S lse = mx + std::log(z);
    S loss = lse - (S(1) - eps) * row(y);
    if (eps > S(0)) loss -= eps / S(V) * row.sum();
    acc += w * loss;
    wsum += w;
  }
  if (wsum <= S(0)) detail::shape_error("cross_entropy", "all weights are zero");
  Tensor<S> out = Tensor<S>::scalar(acc / wsum);
  if (detail::want_grad(tp, {&logits})) {
    out.set_requires_grad(true);
    tp->record([logits, out, probs, labels, weights, wsum, eps, V]() mutable {
      const S g = out.grad()(0, 0) / wsum;
      for (Index t = 0; t < probs.rows(); ++t) {
        const S w = weights[static_cast<std::size_t>(t)];
        if (w == S(0)) continue;
        auto grow = logits.grad().row(t);
        grow += (g * w) * probs.row(t);
        if (eps > S(0)) grow.array() -= g * w * eps / S(V);
        grow(labels[static_cast<std::size_t>(t)]) -= g * w * (S(1) - eps);
      }
    });
  }
  return out;
}

// Weighted-mean binary cross entropy on logits (stable softplus form).
template <class S>
Tensor<S> bce_logits(Tape<S>* tp, Tensor<S> logits, const std::vector<S>& targets,
                     const std::vector<S>& weights) {
  const Index T = logits.rows();
  detail::require(logits.cols() == 1, "bce_logits", logits);
  if (static_cast<Index>(targets.size()) != T || static_cast<Index>(weights.size()) != T)
    detail::shape_error("bce_logits", "targets/weights do not match logit rows");
  S wsum = S(0), acc = S(0);
  for (Index t = 0; t < T; ++t) {
    const S w = weights[static_cast<std::size_t>(t)];
    if (w == S(0)) continue;
    const S x = logits.value()(t, 0);
    const S y = targets[static_cast<std::size_t>(t)];
    acc += w * (std::max(x, S(0)) - x * y + std::log1p(std::exp(-std::abs(x))));
    wsum += w;
  }
  if (wsum <= S(0)) detail::shape_error("bce_logits", "all weights are zero");
  Tensor<S> out = Tensor<S>::scalar(acc / wsum);
  if (detail::want_grad(tp, {&logits})) {
    out.set_requires_grad(true);
    tp->record([logits, out, targets, weights, wsum]() mutable {
      const S g = out.grad()(0, 0) / wsum;
      for (Index t = 0; t < logits.rows(); ++t) {
        const S w = weights[static_cast<std::size_t>(t)];
        if (w == S(0)) continue;
        const S x = logits.value()(t, 0);
        const S sig = S(1) / (S(1) + std::exp(-x));
        logits.grad()(t, 0) += g * w * (sig - targets[static_cast<std::size_t>(t)]);
      }
    });
  }
  return out;
}

// Detached copy: same values, no graph connection.
template <class S>
Tensor<S> detach(Tensor<S> x) {
  return x.detached();
}

}  // namespace cer
