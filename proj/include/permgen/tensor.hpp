#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <utility>
#include <vector>

#include "permgen/common.hpp"

namespace permgen {

/// Dense row-major tensor with an optional gradient buffer. Copies share
/// storage; data is treated as immutable once an op has produced it, so
/// structural sharing is safe. Gradients are the only mutable part and are
/// owned by the same storage block.
template <typename Real>
class Tensor {
  static_assert(std::is_floating_point_v<Real>);

 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : s_(std::make_shared<Storage>()) {
    s_->shape = std::move(shape);
    s_->data.assign(count(s_->shape), Real(0));
  }

  Tensor(std::vector<int> shape, std::vector<Real> values)
      : s_(std::make_shared<Storage>()) {
    if (count(shape) != static_cast<std::int64_t>(values.size())) {
      throw shape_error("tensor init: shape [" + join_ints(shape) + "] needs " +
                        std::to_string(count(shape)) + " values, got " +
                        std::to_string(values.size()));
    }
    s_->shape = std::move(shape);
    s_->data = std::move(values);
  }

  static Tensor scalar(Real v) { return Tensor({1}, {v}); }

  static Tensor randn(std::vector<int> shape, Real stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& x : t.s_->data) x = static_cast<Real>(rand_normal(rng)) * stddev;
    return t;
  }

  bool defined() const { return static_cast<bool>(s_); }
  const std::vector<int>& shape() const { return s_->shape; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  int dim(int i) const { return s_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(s_->data.size()); }

  Real* data() { return s_->data.data(); }
  const Real* data() const { return s_->data.data(); }

  Real at(std::int64_t i) const { return s_->data[static_cast<std::size_t>(i)]; }
  Real at(int r, int c) const {
    return s_->data[static_cast<std::size_t>(r) * static_cast<std::size_t>(dim(1)) +
                    static_cast<std::size_t>(c)];
  }

  /// Rows × cols view accessors for the rank-2 case.
  int rows() const { return rank() == 2 ? dim(0) : 1; }
  int cols() const { return rank() == 2 ? dim(1) : dim(0); }

  Real item() const {
    if (size() != 1) throw shape_error("item(): tensor has " + std::to_string(size()) + " elements");
    return s_->data[0];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  void set_requires_grad(bool v) { s_->requires_grad = v; }

  bool has_grad() const { return s_ && !s_->grad.empty(); }

  /// Gradient buffer, zero-initialized on first touch.
  Real* grad() {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), Real(0));
    return s_->grad.data();
  }
  const Real* grad_data() const { return s_->grad.data(); }

  void zero_grad() {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), Real(0));
  }

  /// Deep copy (fresh storage, no grad).
  Tensor clone() const {
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = s_->shape;
    t.s_->data = s_->data;
    t.s_->requires_grad = s_->requires_grad;
    return t;
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

  static std::int64_t count(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw shape_error("tensor shape extent must be positive, got [" + join_ints(shape) + "]");
      n *= d;
    }
    return n;
  }

 private:
  struct Storage {
    std::vector<int> shape;
    std::vector<Real> data;
    std::vector<Real> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

/// Append-only record of the forward pass. Each node is a closure that
/// propagates the output gradient into its inputs; backward() runs them once
/// in reverse recording order, which is a valid topological order by
/// construction.
template <typename Real>
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }

  std::size_t node_count() const { return nodes_.size(); }

  void backward(Tensor<Real>& loss) {
    if (consumed_) {
      throw shape_error("backward: tape already consumed; reset before reuse");
    }
    if (!loss.defined() || !loss.requires_grad()) {
      throw shape_error("backward: loss tensor is detached from this tape");
    }
    if (loss.size() != 1) {
      throw shape_error("backward: loss must be a scalar, shape [" + join_ints(loss.shape()) + "]");
    }
    consumed_ = true;
    loss.grad()[0] = Real(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

namespace detail {

template <typename Real>
bool grad_flows(const Tape<Real>* tape, std::initializer_list<const Tensor<Real>*> inputs) {
  if (tape == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline void check_rank2(const char* op, const std::vector<int>& shape) {
  if (shape.size() != 2) {
    throw shape_error(std::string(op) + ": expected rank-2 tensor, got [" + join_ints(shape) + "]");
  }
}

}  // namespace detail

// ----------------------------- primitive ops -----------------------------
// Every op: plain forward on row-major buffers, plus a recorded closure that
// accumulates dInput += f(dOutput). `tape == nullptr` runs forward only.

/// C[m×n] = A[m×k] · B[k×n]; dA += dC·Bᵀ, dB += Aᵀ·dC.
template <typename Real>
Tensor<Real> matmul(Tape<Real>* tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_rank2("matmul", a.shape());
  detail::check_rank2("matmul", b.shape());
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw shape_error("matmul: inner extents differ: [" + join_ints(a.shape()) +
                      "] x [" + join_ints(b.shape()) + "]");
  }
  Tensor<Real> c({m, n});
  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* pc = c.data();
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const Real av = pa[i * k + p];
      if (av == Real(0)) continue;
      const Real* brow = pb + p * n;
      Real* crow = pc + i * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  if (detail::grad_flows(tape, {&a, &b})) {
    c.set_requires_grad(true);
    Tensor<Real> ca = a, cb = b, cc = c;
    tape->record([ca, cb, cc, m, k, n]() mutable {
      const Real* dc = cc.grad();
      if (ca.requires_grad()) {
        Real* da = ca.grad();
        const Real* pbv = cb.data();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const Real g = dc[i * n + j];
            if (g == Real(0)) continue;
            const Real* brow = pbv + 0;
            for (int p = 0; p < k; ++p) da[i * k + p] += g * brow[p * n + j];
          }
      }
      if (cb.requires_grad()) {
        Real* db = cb.grad();
        const Real* pav = ca.data();
        for (int p = 0; p < k; ++p)
          for (int i = 0; i < m; ++i) {
            const Real av = pav[i * k + p];
            if (av == Real(0)) continue;
            const Real* dcrow = dc + i * n;
            for (int j = 0; j < n; ++j) db[p * n + j] += av * dcrow[j];
          }
      }
    });
  }
  return c;
}

template <typename Real>
Tensor<Real> transpose(Tape<Real>* tape, const Tensor<Real>& x) {
  detail::check_rank2("transpose", x.shape());
  const int m = x.dim(0), n = x.dim(1);
  Tensor<Real> y({n, m});
  const Real* px = x.data();
  Real* py = y.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) py[j * m + i] = px[i * n + j];
  if (detail::grad_flows(tape, {&x})) {
    y.set_requires_grad(true);
    Tensor<Real> cx = x, cy = y;
    tape->record([cx, cy, m, n]() mutable {
      if (!cx.requires_grad()) return;
      Real* dx = cx.grad();
      const Real* dy = cy.grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) dx[i * n + j] += dy[j * m + i];
    });
  }
  return y;
}

template <typename Real>
Tensor<Real> add(Tape<Real>* tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) {
    throw shape_error("add: shape mismatch: [" + join_ints(a.shape()) + "] vs [" +
                      join_ints(b.shape()) + "]");
  }
  Tensor<Real> c(a.shape());
  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* pc = c.data();
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) pc[i] = pa[i] + pb[i];
  if (detail::grad_flows(tape, {&a, &b})) {
    c.set_requires_grad(true);
    Tensor<Real> ca = a, cb = b, cc = c;
    tape->record([ca, cb, cc, n]() mutable {
      const Real* dc = cc.grad();
      if (ca.requires_grad()) {
        Real* da = ca.grad();
        for (std::int64_t i = 0; i < n; ++i) da[i] += dc[i];
      }
      if (cb.requires_grad()) {
        Real* db = cb.grad();
        for (std::int64_t i = 0; i < n; ++i) db[i] += dc[i];
      }
    });
  }
  return c;
}

/// y[m×n] = x[m×n] + row[n] broadcast over rows (bias add).
template <typename Real>
Tensor<Real> add_row(Tape<Real>* tape, const Tensor<Real>& x, const Tensor<Real>& row) {
  detail::check_rank2("add_row", x.shape());
  const int m = x.dim(0), n = x.dim(1);
  if (row.size() != n) {
    throw shape_error("add_row: row length " + std::to_string(row.size()) +
                      " vs matrix cols " + std::to_string(n));
  }
  Tensor<Real> y({m, n});
  const Real* px = x.data();
  const Real* pr = row.data();
  Real* py = y.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) py[i * n + j] = px[i * n + j] + pr[j];
  if (detail::grad_flows(tape, {&x, &row})) {
    y.set_requires_grad(true);
    Tensor<Real> cx = x, cr = row, cy = y;
    tape->record([cx, cr, cy, m, n]() mutable {
      const Real* dy = cy.grad();
      if (cx.requires_grad()) {
        Real* dx = cx.grad();
        for (int i = 0; i < m * n; ++i) dx[i] += dy[i];
      }
      if (cr.requires_grad()) {
        Real* dr = cr.grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) dr[j] += dy[i * n + j];
      }
    });
  }
  return y;
}

template <typename Real>
Tensor<Real> mul(Tape<Real>* tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) {
    throw shape_error("mul: shape mismatch: [" + join_ints(a.shape()) + "] vs [" +
                      join_ints(b.shape()) + "]");
  }
  Tensor<Real> c(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) c.data()[i] = a.data()[i] * b.data()[i];
  if (detail::grad_flows(tape, {&a, &b})) {
    c.set_requires_grad(true);
    Tensor<Real> ca = a, cb = b, cc = c;
    tape->record([ca, cb, cc, n]() mutable {
      const Real* dc = cc.grad();
      if (ca.requires_grad()) {
        Real* da = ca.grad();
        const Real* pb = cb.data();
        for (std::int64_t i = 0; i < n; ++i) da[i] += dc[i] * pb[i];
      }
      if (cb.requires_grad()) {
        Real* db = cb.grad();
        const Real* pa = ca.data();
        for (std::int64_t i = 0; i < n; ++i) db[i] += dc[i] * pa[i];
      }
    });
  }
  return c;
}

template <typename Real>
Tensor<Real> scale(Tape<Real>* tape, const Tensor<Real>& x, Real factor) {
  Tensor<Real> y(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) y.data()[i] = x.data()[i] * factor;
  if (detail::grad_flows(tape, {&x})) {
    y.set_requires_grad(true);
    Tensor<Real> cx = x, cy = y;
    tape->record([cx, cy, factor, n]() mutable {
      if (!cx.requires_grad()) return;
      Real* dx = cx.grad();
      const Real* dy = cy.grad();
      for (std::int64_t i = 0; i < n; ++i) dx[i] += dy[i] * factor;
    });
  }
  return y;
}

template <typename Real>
Tensor<Real> relu(Tape<Real>* tape, const Tensor<Real>& x) {
  Tensor<Real> y(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) y.data()[i] = x.data()[i] > Real(0) ? x.data()[i] : Real(0);
  if (detail::grad_flows(tape, {&x})) {
    y.set_requires_grad(true);
    Tensor<Real> cx = x, cy = y;
    tape->record([cx, cy, n]() mutable {
      if (!cx.requires_grad()) return;
      Real* dx = cx.grad();
      const Real* dy = cy.grad();
      const Real* px = cx.data();
      for (std::int64_t i = 0; i < n; ++i)
        if (px[i] > Real(0)) dx[i] += dy[i];
    });
  }
  return y;
}

template <typename Real>
Tensor<Real> sum(Tape<Real>* tape, const Tensor<Real>& x) {
  Real total(0);
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) total += x.data()[i];
  Tensor<Real> y = Tensor<Real>::scalar(total);
  if (detail::grad_flows(tape, {&x})) {
    y.set_requires_grad(true);
    Tensor<Real> cx = x, cy = y;
    tape->record([cx, cy, n]() mutable {
      if (!cx.requires_grad()) return;
      Real* dx = cx.grad();
      const Real g = cy.grad()[0];
      for (std::int64_t i = 0; i < n; ++i) dx[i] += g;
    });
  }
  return y;
}

/// Softmax along `axis` of a rank-2 tensor (axis 1 = per row), computed with
/// max subtraction. Rows that are entirely -inf are a caller bug and will
/// produce NaN; masks must always leave at least one live entry.
template <typename Real>
Tensor<Real> softmax(Tape<Real>* tape, const Tensor<Real>& x, int axis) {
  const Tensor<Real> in = (x.rank() == 1) ? Tensor<Real>({1, x.dim(0)}, std::vector<Real>(x.data(), x.data() + x.size()))
                                          : x;
  detail::check_rank2("softmax", in.shape());
  if (axis != 0 && axis != 1) throw shape_error("softmax: axis must be 0 or 1, got " + std::to_string(axis));
  if (x.rank() == 1 && axis != 0) throw shape_error("softmax: rank-1 input has only axis 0");
  const int effective_axis = (x.rank() == 1) ? 1 : axis;
  Tensor<Real> work = (effective_axis == 1) ? in : transpose<Real>(nullptr, in);
  const int m = work.dim(0), n = work.dim(1);
  Tensor<Real> probs({m, n});
  for (int i = 0; i < m; ++i) {
    const Real* row = work.data() + i * n;
    Real* out = probs.data() + i * n;
    Real mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    Real denom(0);
    for (int j = 0; j < n; ++j) {
      out[j] = std::exp(row[j] - mx);
      denom += out[j];
    }
    for (int j = 0; j < n; ++j) out[j] /= denom;
  }
  Tensor<Real> y = (effective_axis == 1) ? probs : transpose<Real>(nullptr, probs);
  if (x.rank() == 1) y = Tensor<Real>({x.dim(0)}, std::vector<Real>(y.data(), y.data() + y.size()));
  if (detail::grad_flows(tape, {&x})) {
    y.set_requires_grad(true);
    Tensor<Real> cx = x, cy = y;
    const int rows_count = (x.rank() == 1) ? 1 : (axis == 1 ? x.dim(0) : x.dim(1));
    const int row_len = (x.rank() == 1) ? x.dim(0) : (axis == 1 ? x.dim(1) : x.dim(0));
    const bool along_rows = (x.rank() == 1) || axis == 1;
    tape->record([cx, cy, rows_count, row_len, along_rows]() mutable {
      if (!cx.requires_grad()) return;
      Real* dx = cx.grad();
      const Real* dy = cy.grad();
      const Real* py = cy.data();
      // dx_j += y_j * (dy_j - sum_k dy_k*y_k), per reduced slice
      for (int i = 0; i < rows_count; ++i) {
        Real dot(0);
        for (int j = 0; j < row_len; ++j) {
          const std::int64_t idx = along_rows ? (static_cast<std::int64_t>(i) * row_len + j)
                                              : (static_cast<std::int64_t>(j) * rows_count + i);
          dot += dy[idx] * py[idx];
        }
        for (int j = 0; j < row_len; ++j) {
          const std::int64_t idx = along_rows ? (static_cast<std::int64_t>(i) * row_len + j)
                                              : (static_cast<std::int64_t>(j) * rows_count + i);
          dx[idx] += py[idx] * (dy[idx] - dot);
        }
      }
    });
  }
  return y;
}

/// Row-wise log-softmax (rank-2, last axis), max-subtracted. This is the only
/// path producing log-probabilities anywhere in the library.
template <typename Real>
Tensor<Real> log_softmax_rows(Tape<Real>* tape, const Tensor<Real>& x) {
  detail::check_rank2("log_softmax_rows", x.shape());
  const int m = x.dim(0), n = x.dim(1);
  Tensor<Real> y({m, n});
  for (int i = 0; i < m; ++i) {
    const Real* row = x.data() + i * n;
    Real* out = y.data() + i * n;
    Real mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    Real denom(0);
    for (int j = 0; j < n; ++j) denom += std::exp(row[j] - mx);
    const Real log_denom = std::log(denom) + mx;
    for (int j = 0; j < n; ++j) out[j] = row[j] - log_denom;
  }
  if (detail::grad_flows(tape, {&x})) {
    y.set_requires_grad(true);
    Tensor<Real> cx = x, cy = y;
    tape->record([cx, cy, m, n]() mutable {
      if (!cx.requires_grad()) return;
      Real* dx = cx.grad();
      const Real* dy = cy.grad();
      const Real* py = cy.data();
      for (int i = 0; i < m; ++i) {
        Real grad_sum(0);
        for (int j = 0; j < n; ++j) grad_sum += dy[i * n + j];
        for (int j = 0; j < n; ++j)
          dx[i * n + j] += dy[i * n + j] - std::exp(py[i * n + j]) * grad_sum;
      }
    });
  }
  return y;
}

/// out[i] = mask[i] ? fill : x[i]. The mask is constant: gradient flows only
/// through unmasked entries. Used with fill = -inf ahead of softmax.
template <typename Real>
Tensor<Real> masked_fill(Tape<Real>* tape, const Tensor<Real>& x,
                         const std::vector<std::uint8_t>& mask, Real fill) {
  if (static_cast<std::int64_t>(mask.size()) != x.size()) {
    throw shape_error("masked_fill: mask length " + std::to_string(mask.size()) +
                      " vs tensor size " + std::to_string(x.size()));
  }
  Tensor<Real> y(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i)
    y.data()[i] = mask[static_cast<std::size_t>(i)] ? fill : x.data()[i];
  if (detail::grad_flows(tape, {&x})) {
    y.set_requires_grad(true);
    Tensor<Real> cx = x, cy = y;
    tape->record([cx, cy, mask, n]() mutable {
      if (!cx.requires_grad()) return;
      Real* dx = cx.grad();
      const Real* dy = cy.grad();
      for (std::int64_t i = 0; i < n; ++i)
        if (!mask[static_cast<std::size_t>(i)]) dx[i] += dy[i];
    });
  }
  return y;
}

/// Gather rows of `table[V×d]` at `ids`; backward scatter-adds into the table.
template <typename Real>
Tensor<Real> embedding_lookup(Tape<Real>* tape, const Tensor<Real>& table,
                              const std::vector<int>& ids) {
  detail::check_rank2("embedding_lookup", table.shape());
  const int v = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw shape_error("embedding_lookup: empty id list");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= v) {
      throw shape_error("embedding_lookup: id " + std::to_string(ids[i]) + " at position " +
                        std::to_string(i) + " outside table of " + std::to_string(v) + " rows");
    }
  }
  const int L = static_cast<int>(ids.size());
  Tensor<Real> y({L, d});
  for (int i = 0; i < L; ++i) {
    const Real* src = table.data() + static_cast<std::int64_t>(ids[static_cast<std::size_t>(i)]) * d;
    std::copy(src, src + d, y.data() + static_cast<std::int64_t>(i) * d);
  }
  if (detail::grad_flows(tape, {&table})) {
    y.set_requires_grad(true);
    Tensor<Real> ct = table, cy = y;
    tape->record([ct, cy, ids, d]() mutable {
      if (!ct.requires_grad()) return;
      Real* dt = ct.grad();
      const Real* dy = cy.grad();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        Real* dst = dt + static_cast<std::int64_t>(ids[i]) * d;
        const Real* src = dy + static_cast<std::int64_t>(i) * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return y;
}

/// Per-row layer normalization with learnable gain/bias.
template <typename Real>
Tensor<Real> layer_norm(Tape<Real>* tape, const Tensor<Real>& x, const Tensor<Real>& gain,
                        const Tensor<Real>& bias, Real eps = Real(1e-5)) {
  detail::check_rank2("layer_norm", x.shape());
  const int m = x.dim(0), n = x.dim(1);
  if (gain.size() != n || bias.size() != n) {
    throw shape_error("layer_norm: gain/bias length " + std::to_string(gain.size()) + "/" +
                      std::to_string(bias.size()) + " vs cols " + std::to_string(n));
  }
  Tensor<Real> y({m, n});
  std::vector<Real> inv_std(static_cast<std::size_t>(m));
  std::vector<Real> normed(static_cast<std::size_t>(m) * static_cast<std::size_t>(n));
  for (int i = 0; i < m; ++i) {
    const Real* row = x.data() + i * n;
    Real mean(0);
    for (int j = 0; j < n; ++j) mean += row[j];
    mean /= Real(n);
    Real var(0);
    for (int j = 0; j < n; ++j) {
      const Real dvi = row[j] - mean;
      var += dvi * dvi;
    }
    var /= Real(n);
    const Real is = Real(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < n; ++j) {
      const Real nz = (row[j] - mean) * is;
      normed[static_cast<std::size_t>(i * n + j)] = nz;
      y.data()[i * n + j] = nz * gain.data()[j] + bias.data()[j];
    }
  }
  if (detail::grad_flows(tape, {&x, &gain, &bias})) {
    y.set_requires_grad(true);
    Tensor<Real> cx = x, cg = gain, cb = bias, cy = y;
    tape->record([cx, cg, cb, cy, inv_std = std::move(inv_std), normed = std::move(normed), m, n]() mutable {
      const Real* dy = cy.grad();
      if (cg.requires_grad()) {
        Real* dg = cg.grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) dg[j] += dy[i * n + j] * normed[static_cast<std::size_t>(i * n + j)];
      }
      if (cb.requires_grad()) {
        Real* db = cb.grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) db[j] += dy[i * n + j];
      }
      if (cx.requires_grad()) {
        Real* dx = cx.grad();
        const Real* pg = cg.data();
        for (int i = 0; i < m; ++i) {
          // dL/dz where z is the normalized row, then the standard layernorm
          // input gradient in terms of row statistics.
          Real sum_dz(0), sum_dz_z(0);
          for (int j = 0; j < n; ++j) {
            const Real dz = dy[i * n + j] * pg[j];
            sum_dz += dz;
            sum_dz_z += dz * normed[static_cast<std::size_t>(i * n + j)];
          }
          const Real is = inv_std[static_cast<std::size_t>(i)];
          for (int j = 0; j < n; ++j) {
            const Real dz = dy[i * n + j] * pg[j];
            const Real z = normed[static_cast<std::size_t>(i * n + j)];
            dx[i * n + j] += is * (dz - (sum_dz + z * sum_dz_z) / Real(n));
          }
        }
      }
    });
  }
  return y;
}

/// Columns [start, start+len) of x.
template <typename Real>
Tensor<Real> slice_cols(Tape<Real>* tape, const Tensor<Real>& x, int start, int len) {
  detail::check_rank2("slice_cols", x.shape());
  const int m = x.dim(0), n = x.dim(1);
  if (start < 0 || len <= 0 || start + len > n) {
    throw shape_error("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                      ") outside " + std::to_string(n) + " columns");
  }
  Tensor<Real> y({m, len});
  for (int i = 0; i < m; ++i)
    std::copy(x.data() + i * n + start, x.data() + i * n + start + len, y.data() + i * len);
  if (detail::grad_flows(tape, {&x})) {
    y.set_requires_grad(true);
    Tensor<Real> cx = x, cy = y;
    tape->record([cx, cy, m, n, start, len]() mutable {
      if (!cx.requires_grad()) return;
      Real* dx = cx.grad();
      const Real* dy = cy.grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < len; ++j) dx[i * n + start + j] += dy[i * len + j];
    });
  }
  return y;
}

/// Concatenate rank-2 tensors along columns (equal row counts).
template <typename Real>
Tensor<Real> concat_cols(Tape<Real>* tape, const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw shape_error("concat_cols: no inputs");
  const int m = parts[0].dim(0);
  int total = 0;
  for (const auto& p : parts) {
    detail::check_rank2("concat_cols", p.shape());
    if (p.dim(0) != m) {
      throw shape_error("concat_cols: row mismatch: [" + join_ints(parts[0].shape()) + "] vs [" +
                        join_ints(p.shape()) + "]");
    }
    total += p.dim(1);
  }
  Tensor<Real> y({m, total});
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.dim(1);
    for (int i = 0; i < m; ++i)
      std::copy(p.data() + i * w, p.data() + (i + 1) * w, y.data() + i * total + off);
    off += w;
  }
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  if (tape && needs) {
    y.set_requires_grad(true);
    std::vector<Tensor<Real>> cp = parts;
    Tensor<Real> cy = y;
    tape->record([cp, cy, m, total]() mutable {
      const Real* dy = cy.grad();
      int off2 = 0;
      for (auto& p : cp) {
        const int w = p.dim(1);
        if (p.requires_grad()) {
          Real* dp = p.grad();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) dp[i * w + j] += dy[i * total + off2 + j];
        }
        off2 += w;
      }
    });
  }
  return y;
}

/// Concatenate rank-2 tensors along rows (equal column counts).
template <typename Real>
Tensor<Real> concat_rows(Tape<Real>* tape, const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw shape_error("concat_rows: no inputs");
  const int n = parts[0].dim(1);
  int total = 0;
  for (const auto& p : parts) {
    detail::check_rank2("concat_rows", p.shape());
    if (p.dim(1) != n) {
      throw shape_error("concat_rows: column mismatch: [" + join_ints(parts[0].shape()) + "] vs [" +
                        join_ints(p.shape()) + "]");
    }
    total += p.dim(0);
  }
  Tensor<Real> y({total, n});
  int off = 0;
  for (const auto& p : parts) {
    std::copy(p.data(), p.data() + p.size(), y.data() + static_cast<std::int64_t>(off) * n);
    off += p.dim(0);
  }
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  if (tape && needs) {
    y.set_requires_grad(true);
    std::vector<Tensor<Real>> cp = parts;
    Tensor<Real> cy = y;
    tape->record([cp, cy, n]() mutable {
      const Real* dy = cy.grad();
      std::int64_t off2 = 0;
      for (auto& p : cp) {
        if (p.requires_grad()) {
          Real* dp = p.grad();
          for (std::int64_t i = 0; i < p.size(); ++i) dp[i] += dy[off2 * n + i];
        }
        off2 += p.dim(0);
      }
    });
  }
  return y;
}

/// Inverted dropout; identity when not training or rate is zero.
template <typename Real>
Tensor<Real> dropout(Tape<Real>* tape, const Tensor<Real>& x, Real rate, bool training, Rng* rng) {
  if (!training || rate <= Real(0)) return x;
  if (rate >= Real(1)) throw config_error("dropout rate must be < 1");
  if (rng == nullptr) throw shape_error("dropout: training mode needs an rng");
  const std::int64_t n = x.size();
  std::vector<std::uint8_t> keep(static_cast<std::size_t>(n));
  const Real inv_keep = Real(1) / (Real(1) - rate);
  Tensor<Real> y(x.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    keep[static_cast<std::size_t>(i)] = rand_unit(*rng) >= static_cast<double>(rate) ? 1 : 0;
    y.data()[i] = keep[static_cast<std::size_t>(i)] ? x.data()[i] * inv_keep : Real(0);
  }
  if (detail::grad_flows(tape, {&x})) {
    y.set_requires_grad(true);
    Tensor<Real> cx = x, cy = y;
    tape->record([cx, cy, keep = std::move(keep), inv_keep, n]() mutable {
      if (!cx.requires_grad()) return;
      Real* dx = cx.grad();
      const Real* dy = cy.grad();
      for (std::int64_t i = 0; i < n; ++i)
        if (keep[static_cast<std::size_t>(i)]) dx[i] += dy[i] * inv_keep;
    });
  }
  return y;
}

/// Mean negative log-softmax probability of `targets` over unmasked rows.
/// `mask[i] == true` excludes position i (padding).
template <typename Real>
Tensor<Real> cross_entropy(Tape<Real>* tape, const Tensor<Real>& logits,
                           const std::vector<int>& targets, const std::vector<std::uint8_t>& mask) {
  detail::check_rank2("cross_entropy", logits.shape());
  const int L = logits.dim(0), V = logits.dim(1);
  if (static_cast<int>(targets.size()) != L) {
    throw shape_error("cross_entropy: " + std::to_string(targets.size()) + " targets vs " +
                      std::to_string(L) + " logit rows");
  }
  if (!mask.empty() && static_cast<int>(mask.size()) != L) {
    throw shape_error("cross_entropy: mask length " + std::to_string(mask.size()) + " vs " +
                      std::to_string(L) + " rows");
  }
  int live = 0;
  for (int i = 0; i < L; ++i) {
    if (!mask.empty() && mask[static_cast<std::size_t>(i)]) continue;
    if (targets[static_cast<std::size_t>(i)] < 0 || targets[static_cast<std::size_t>(i)] >= V) {
      throw shape_error("cross_entropy: target id " + std::to_string(targets[static_cast<std::size_t>(i)]) +
                        " at row " + std::to_string(i) + " outside vocab of " + std::to_string(V));
    }
    ++live;
  }
  if (live == 0) throw shape_error("cross_entropy: all positions masked");
  // log-softmax per row, accumulated in double regardless of Real.
  std::vector<Real> log_probs(static_cast<std::size_t>(L) * static_cast<std::size_t>(V));
  double total = 0.0;
  for (int i = 0; i < L; ++i) {
    const Real* row = logits.data() + static_cast<std::int64_t>(i) * V;
    Real mx = row[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < V; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
    const double log_denom = std::log(denom) + static_cast<double>(mx);
    for (int j = 0; j < V; ++j)
      log_probs[static_cast<std::size_t>(i) * V + j] = static_cast<Real>(static_cast<double>(row[j]) - log_denom);
    if (mask.empty() || !mask[static_cast<std::size_t>(i)])
      total -= static_cast<double>(log_probs[static_cast<std::size_t>(i) * V + targets[static_cast<std::size_t>(i)]]);
  }
  Tensor<Real> loss = Tensor<Real>::scalar(static_cast<Real>(total / live));
  if (detail::grad_flows(tape, {&logits})) {
    loss.set_requires_grad(true);
    Tensor<Real> cl = logits, cy = loss;
    tape->record([cl, cy, targets, mask, log_probs = std::move(log_probs), L, V, live]() mutable {
      if (!cl.requires_grad()) return;
      Real* dl = cl.grad();
      const Real g = cy.grad()[0] / Real(live);
      for (int i = 0; i < L; ++i) {
        if (!mask.empty() && mask[static_cast<std::size_t>(i)]) continue;
        const Real* lp = log_probs.data() + static_cast<std::size_t>(i) * V;
        Real* drow = dl + static_cast<std::int64_t>(i) * V;
        const int t = targets[static_cast<std::size_t>(i)];
        for (int j = 0; j < V; ++j) drow[j] += g * std::exp(lp[j]);
        drow[t] -= g;
      }
    });
  }
  return loss;
}

/// Throws numeric_error if any entry is NaN or infinite.
template <typename Real>
void check_finite(const Tensor<Real>& x, const std::string& context) {
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(x.data()[i])) {
      throw numeric_error(context + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

}  // namespace permgen
