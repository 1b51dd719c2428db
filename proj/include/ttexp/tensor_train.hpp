#pragma once

/// Tensor-train (TT) containers and arithmetic.
///
/// A TT tensor of order M is a chain of order-3 cores with shapes
/// (r_m, d_m, r_{m+1}) and boundary ranks r_1 = r_{M+1} = 1; a TT operator
/// uses order-4 cores (r_m, row_d_m, col_d_m, r_{m+1}). Core entries are
/// stored contiguously in (left, mode, right) row-major order, matching the
/// nesting order of the JSON serialization.
///
/// Free functions implement evaluation, addition, scaling, operator
/// application, inner products, orthogonalization-based norms, TT-SVD
/// rounding with a quasi-optimality guarantee, and dense conversion for
/// small instances.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ttexp/rng.hpp"

namespace ttexp {

using Index = Eigen::Index;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRowMat = Eigen::Map<RowMat>;
using ConstMapRowMat = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, Eigen::Unaligned, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, Eigen::Unaligned, Eigen::OuterStride<>>;

/// Bond ranks of a TT chain, including the two boundary ranks (always 1),
/// so a tensor of order M carries M+1 entries.
struct RankProfile {
  std::vector<Index> r;

  Index max() const { return r.empty() ? 0 : *std::max_element(r.begin(), r.end()); }
  bool operator==(const RankProfile& o) const { return r == o.r; }
};

/// Order-3 TT core with shape (r1, d, r2), entries in row-major
/// (left, mode, right) order.
struct Core3 {
  Index r1 = 1, d = 1, r2 = 1;
  std::vector<double> a;

  Core3() = default;
  Core3(Index r1_, Index d_, Index r2_) : r1(r1_), d(d_), r2(r2_), a(static_cast<size_t>(r1_ * d_ * r2_), 0.0) {
    if (r1_ <= 0 || d_ <= 0 || r2_ <= 0) throw std::invalid_argument("Core3: dimensions must be positive");
  }

  double& operator()(Index k, Index i, Index l) { return a[static_cast<size_t>((k * d + i) * r2 + l)]; }
  double operator()(Index k, Index i, Index l) const { return a[static_cast<size_t>((k * d + i) * r2 + l)]; }

  /// Left unfolding: (r1*d) x r2, row index (k, i).
  MapRowMat left() { return MapRowMat(a.data(), r1 * d, r2); }
  ConstMapRowMat left() const { return ConstMapRowMat(a.data(), r1 * d, r2); }

  /// Right unfolding: r1 x (d*r2), column index (i, l).
  MapRowMat right() { return MapRowMat(a.data(), r1, d * r2); }
  ConstMapRowMat right() const { return ConstMapRowMat(a.data(), r1, d * r2); }

  /// Mode slice i: the r1 x r2 matrix core(:, i, :).
  StridedMap slice(Index i) {
    return StridedMap(a.data() + i * r2, r1, r2, Eigen::OuterStride<>(d * r2));
  }
  ConstStridedMap slice(Index i) const {
    return ConstStridedMap(a.data() + i * r2, r1, r2, Eigen::OuterStride<>(d * r2));
  }

  double frobenius_norm() const {
    return Eigen::Map<const Eigen::VectorXd>(a.data(), static_cast<Index>(a.size())).norm();
  }
};

/// Order-4 operator core with shape (r1, dr, dc, r2), entries in row-major
/// (left, row mode, column mode, right) order.
struct Core4 {
  Index r1 = 1, dr = 1, dc = 1, r2 = 1;
  std::vector<double> a;

  Core4() = default;
  Core4(Index r1_, Index dr_, Index dc_, Index r2_)
      : r1(r1_), dr(dr_), dc(dc_), r2(r2_), a(static_cast<size_t>(r1_ * dr_ * dc_ * r2_), 0.0) {
    if (r1_ <= 0 || dr_ <= 0 || dc_ <= 0 || r2_ <= 0) throw std::invalid_argument("Core4: dimensions must be positive");
  }

  double& operator()(Index k, Index i, Index j, Index l) {
    return a[static_cast<size_t>(((k * dr + i) * dc + j) * r2 + l)];
  }
  double operator()(Index k, Index i, Index j, Index l) const {
    return a[static_cast<size_t>(((k * dr + i) * dc + j) * r2 + l)];
  }
};

namespace detail {

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace detail

/// TT tensor: a validated chain of order-3 cores.
class TTTensor {
 public:
  TTTensor() = default;
  explicit TTTensor(std::vector<Core3> cores) : cores_(std::move(cores)) { validate(); }

  Index order() const { return static_cast<Index>(cores_.size()); }

  std::vector<Index> dims() const {
    std::vector<Index> d(cores_.size());
    for (size_t m = 0; m < cores_.size(); ++m) d[m] = cores_[m].d;
    return d;
  }

  RankProfile ranks() const {
    RankProfile p;
    p.r.resize(cores_.size() + 1);
    for (size_t m = 0; m < cores_.size(); ++m) p.r[m] = cores_[m].r1;
    p.r.back() = cores_.empty() ? 1 : cores_.back().r2;
    return p;
  }

  Core3& core(Index m) { return cores_[static_cast<size_t>(m)]; }
  const Core3& core(Index m) const { return cores_[static_cast<size_t>(m)]; }
  std::vector<Core3>& cores() { return cores_; }
  const std::vector<Core3>& cores() const { return cores_; }

 private:
  void validate() const {
    detail::check(!cores_.empty(), "TTTensor: empty core chain");
    detail::check(cores_.front().r1 == 1, "TTTensor: first core must have left rank 1");
    detail::check(cores_.back().r2 == 1, "TTTensor: last core must have right rank 1");
    for (size_t m = 0; m + 1 < cores_.size(); ++m)
      detail::check(cores_[m].r2 == cores_[m + 1].r1, "TTTensor: bond rank mismatch between cores " +
                                                          std::to_string(m) + " and " + std::to_string(m + 1));
  }

  std::vector<Core3> cores_;
};

/// TT operator: a validated chain of order-4 cores mapping a tensor with
/// mode sizes col_dims() to one with mode sizes row_dims().
class TTOperator {
 public:
  TTOperator() = default;
  explicit TTOperator(std::vector<Core4> cores) : cores_(std::move(cores)) { validate(); }

  Index order() const { return static_cast<Index>(cores_.size()); }

  std::vector<Index> row_dims() const {
    std::vector<Index> d(cores_.size());
    for (size_t m = 0; m < cores_.size(); ++m) d[m] = cores_[m].dr;
    return d;
  }
  std::vector<Index> col_dims() const {
    std::vector<Index> d(cores_.size());
    for (size_t m = 0; m < cores_.size(); ++m) d[m] = cores_[m].dc;
    return d;
  }

  RankProfile ranks() const {
    RankProfile p;
    p.r.resize(cores_.size() + 1);
    for (size_t m = 0; m < cores_.size(); ++m) p.r[m] = cores_[m].r1;
    p.r.back() = cores_.empty() ? 1 : cores_.back().r2;
    return p;
  }

  Core4& core(Index m) { return cores_[static_cast<size_t>(m)]; }
  const Core4& core(Index m) const { return cores_[static_cast<size_t>(m)]; }
  std::vector<Core4>& cores() { return cores_; }
  const std::vector<Core4>& cores() const { return cores_; }

 private:
  void validate() const {
    detail::check(!cores_.empty(), "TTOperator: empty core chain");
    detail::check(cores_.front().r1 == 1, "TTOperator: first core must have left rank 1");
    detail::check(cores_.back().r2 == 1, "TTOperator: last core must have right rank 1");
    for (size_t m = 0; m + 1 < cores_.size(); ++m)
      detail::check(cores_[m].r2 == cores_[m + 1].r1, "TTOperator: bond rank mismatch at bond " + std::to_string(m + 1));
  }

  std::vector<Core4> cores_;
};

// ---------------------------------------------------------------------------
// Construction helpers
// ---------------------------------------------------------------------------

/// Coefficient tensor of the constant function c: rank 1 with unit vector
/// e_0 in every mode and the value c on the first core.
inline TTTensor constant_tt(const std::vector<Index>& dims, double c) {
  std::vector<Core3> cores;
  cores.reserve(dims.size());
  for (size_t m = 0; m < dims.size(); ++m) {
    Core3 g(1, dims[m], 1);
    g(0, 0, 0) = (m == 0) ? c : 1.0;
    cores.push_back(std::move(g));
  }
  return TTTensor(std::move(cores));
}

/// Largest representable bond ranks for the given mode sizes: the rank at
/// bond m cannot exceed the product of mode sizes on either side.
inline std::vector<Index> feasible_ranks(const std::vector<Index>& dims, const std::vector<Index>& wanted) {
  const Index M = static_cast<Index>(dims.size());
  detail::check(static_cast<Index>(wanted.size()) == M + 1, "feasible_ranks: rank profile must have order+1 entries");
  std::vector<Index> r(wanted);
  r.front() = 1;
  r.back() = 1;
  // Cap by the left/right unfolding sizes, sweeping both directions until stable.
  for (int pass = 0; pass < 2; ++pass) {
    for (Index m = 1; m < M; ++m) r[m] = std::min(r[m], r[m - 1] * dims[m - 1]);
    for (Index m = M - 1; m >= 1; --m) r[m] = std::min(r[m], r[m + 1] * dims[m]);
  }
  return r;
}

/// TT tensor with iid standard normal entries and the requested bond ranks
/// (capped to feasible values). Deterministic in the seed.
inline TTTensor random_tt(const std::vector<Index>& dims, std::vector<Index> ranks, std::uint64_t seed) {
  const auto r = feasible_ranks(dims, std::move(ranks));
  std::vector<Core3> cores;
  cores.reserve(dims.size());
  std::uint64_t counter = 0;
  for (size_t m = 0; m < dims.size(); ++m) {
    Core3 g(r[m], dims[m], r[m + 1]);
    for (auto& x : g.a) x = rng::normal(seed, counter++);
    cores.push_back(std::move(g));
  }
  return TTTensor(std::move(cores));
}

/// Uniform-rank overload.
inline TTTensor random_tt(const std::vector<Index>& dims, Index rank, std::uint64_t seed) {
  std::vector<Index> r(dims.size() + 1, rank);
  r.front() = 1;
  r.back() = 1;
  return random_tt(dims, std::move(r), seed);
}

/// Block concatenation of order-3 cores over a 2D channel grid; nullptr
/// entries are zero blocks. Row heights and column widths are inferred from
/// the non-null blocks; every row and column must contain at least one.
inline Core3 concat_cores(const std::vector<std::vector<const Core3*>>& blocks) {
  detail::check(!blocks.empty() && !blocks.front().empty(), "concat_cores: empty block grid");
  const size_t nr = blocks.size(), nc = blocks.front().size();
  for (const auto& row : blocks) detail::check(row.size() == nc, "concat_cores: ragged block grid");

  std::vector<Index> rh(nr, -1), cw(nc, -1);
  Index d = -1;
  for (size_t i = 0; i < nr; ++i)
    for (size_t j = 0; j < nc; ++j)
      if (const Core3* b = blocks[i][j]) {
        if (d < 0) d = b->d;
        detail::check(b->d == d, "concat_cores: mode size mismatch");
        if (rh[i] < 0) rh[i] = b->r1;
        if (cw[j] < 0) cw[j] = b->r2;
        detail::check(rh[i] == b->r1 && cw[j] == b->r2, "concat_cores: block shape mismatch");
      }
  for (size_t i = 0; i < nr; ++i) detail::check(rh[i] > 0, "concat_cores: row " + std::to_string(i) + " has no block");
  for (size_t j = 0; j < nc; ++j) detail::check(cw[j] > 0, "concat_cores: column " + std::to_string(j) + " has no block");

  const Index R1 = std::accumulate(rh.begin(), rh.end(), Index(0));
  const Index R2 = std::accumulate(cw.begin(), cw.end(), Index(0));
  Core3 out(R1, d, R2);
  Index roff = 0;
  for (size_t i = 0; i < nr; ++i) {
    Index coff = 0;
    for (size_t j = 0; j < nc; ++j) {
      if (const Core3* b = blocks[i][j])
        for (Index ii = 0; ii < d; ++ii) out.slice(ii).block(roff, coff, rh[i], cw[j]) = b->slice(ii);
      coff += cw[j];
    }
    roff += rh[i];
  }
  return out;
}

/// Block concatenation of order-4 operator cores; same rules as above.
inline Core4 concat_cores(const std::vector<std::vector<const Core4*>>& blocks) {
  detail::check(!blocks.empty() && !blocks.front().empty(), "concat_cores: empty block grid");
  const size_t nr = blocks.size(), nc = blocks.front().size();
  for (const auto& row : blocks) detail::check(row.size() == nc, "concat_cores: ragged block grid");

  std::vector<Index> rh(nr, -1), cw(nc, -1);
  Index dr = -1, dc = -1;
  for (size_t i = 0; i < nr; ++i)
    for (size_t j = 0; j < nc; ++j)
      if (const Core4* b = blocks[i][j]) {
        if (dr < 0) { dr = b->dr; dc = b->dc; }
        detail::check(b->dr == dr && b->dc == dc, "concat_cores: mode size mismatch");
        if (rh[i] < 0) rh[i] = b->r1;
        if (cw[j] < 0) cw[j] = b->r2;
        detail::check(rh[i] == b->r1 && cw[j] == b->r2, "concat_cores: block shape mismatch");
      }
  for (size_t i = 0; i < nr; ++i) detail::check(rh[i] > 0, "concat_cores: row " + std::to_string(i) + " has no block");
  for (size_t j = 0; j < nc; ++j) detail::check(cw[j] > 0, "concat_cores: column " + std::to_string(j) + " has no block");

  const Index R1 = std::accumulate(rh.begin(), rh.end(), Index(0));
  const Index R2 = std::accumulate(cw.begin(), cw.end(), Index(0));
  Core4 out(R1, dr, dc, R2);
  Index roff = 0;
  for (size_t i = 0; i < nr; ++i) {
    Index coff = 0;
    for (size_t j = 0; j < nc; ++j) {
      if (const Core4* b = blocks[i][j])
        for (Index ii = 0; ii < dr; ++ii)
          for (Index jj = 0; jj < dc; ++jj)
            for (Index k = 0; k < rh[i]; ++k)
              for (Index l = 0; l < cw[j]; ++l) out(roff + k, ii, jj, coff + l) = (*b)(k, ii, jj, l);
      coff += cw[j];
    }
    roff += rh[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Basic arithmetic
// ---------------------------------------------------------------------------

/// Number of degrees of freedom of the TT representation, i.e. the dimension
/// of the rank-(r_1..r_{M+1}) TT manifold containing it:
/// sum_{m<M} (r_m d_m r_{m+1} - r_{m+1}^2) + r_M d_M.
inline long long tt_dofs(const TTTensor& t) {
  const auto d = t.dims();
  const auto r = t.ranks().r;
  const Index M = t.order();
  long long n = 0;
  for (Index m = 0; m + 1 < M; ++m) n += static_cast<long long>(r[m] * d[m] * r[m + 1] - r[m + 1] * r[m + 1]);
  n += static_cast<long long>(r[M - 1] * d[M - 1]);
  return n;
}

/// Contracts the tensor against one row vector per mode:
/// sum over all indices of t[i_1..i_M] * rows[1][i_1] * ... * rows[M][i_M].
inline double evaluate(const TTTensor& t, const std::vector<Eigen::VectorXd>& rows) {
  detail::check(static_cast<Index>(rows.size()) == t.order(), "evaluate: one row vector per mode required");
  Eigen::RowVectorXd e = Eigen::RowVectorXd::Ones(1);
  for (Index m = 0; m < t.order(); ++m) {
    const Core3& g = t.core(m);
    detail::check(rows[static_cast<size_t>(m)].size() == g.d, "evaluate: row size mismatch at mode " + std::to_string(m));
    Eigen::RowVectorXd next = Eigen::RowVectorXd::Zero(g.r2);
    for (Index i = 0; i < g.d; ++i) next.noalias() += rows[static_cast<size_t>(m)][i] * (e * g.slice(i));
    e.swap(next);
  }
  return e(0);
}

/// Contracts all modes except the first; returns the resulting vector over
/// the first mode. Used for field-valued tensors with a leading spatial mode.
inline Eigen::VectorXd evaluate_keep_first(const TTTensor& t, const std::vector<Eigen::VectorXd>& rows) {
  detail::check(static_cast<Index>(rows.size()) == t.order() - 1, "evaluate_keep_first: rows for modes 2..M required");
  Eigen::VectorXd e = Eigen::VectorXd::Ones(1);
  for (Index m = t.order() - 1; m >= 1; --m) {
    const Core3& g = t.core(m);
    const Eigen::VectorXd& w = rows[static_cast<size_t>(m - 1)];
    detail::check(w.size() == g.d, "evaluate_keep_first: row size mismatch at mode " + std::to_string(m));
    Eigen::VectorXd next = Eigen::VectorXd::Zero(g.r1);
    for (Index i = 0; i < g.d; ++i) next.noalias() += w[i] * (g.slice(i) * e);
    e.swap(next);
  }
  const Core3& g0 = t.core(0);
  Eigen::VectorXd out(g0.d);
  for (Index i = 0; i < g0.d; ++i) out[i] = g0.slice(i).row(0) * e;
  return out;
}

/// Scales the represented tensor by c (folded into the first core).
inline TTTensor scale(TTTensor t, double c) {
  auto& g = t.core(0);
  for (auto& x : g.a) x *= c;
  return t;
}

/// TT sum via block concatenation; bond ranks add.
inline TTTensor add(const TTTensor& x, const TTTensor& y) {
  detail::check(x.dims() == y.dims(), "add: mode size mismatch");
  const Index M = x.order();
  if (M == 1) {
    Core3 g = x.core(0);
    for (size_t i = 0; i < g.a.size(); ++i) g.a[i] += y.core(0).a[i];
    return TTTensor({std::move(g)});
  }
  std::vector<Core3> cores;
  cores.reserve(static_cast<size_t>(M));
  cores.push_back(concat_cores({{&x.core(0), &y.core(0)}}));
  for (Index m = 1; m + 1 < M; ++m)
    cores.push_back(concat_cores({{&x.core(m), nullptr}, {nullptr, &y.core(m)}}));
  cores.push_back(concat_cores({{&x.core(M - 1)}, {&y.core(M - 1)}}));
  return TTTensor(std::move(cores));
}

inline TTTensor sub(const TTTensor& x, const TTTensor& y) { return add(x, scale(y, -1.0)); }

/// Inner product <x, y> by chain contraction.
inline double dot(const TTTensor& x, const TTTensor& y) {
  detail::check(x.dims() == y.dims(), "dot: mode size mismatch");
  Eigen::MatrixXd e = Eigen::MatrixXd::Ones(1, 1);
  for (Index m = 0; m < x.order(); ++m) {
    const Core3& gx = x.core(m);
    const Core3& gy = y.core(m);
    Eigen::MatrixXd next = Eigen::MatrixXd::Zero(gx.r2, gy.r2);
    for (Index i = 0; i < gx.d; ++i) next.noalias() += gx.slice(i).transpose() * e * gy.slice(i);
    e.swap(next);
  }
  return e(0, 0);
}

// ---------------------------------------------------------------------------
// Orthogonalization, norm, rounding
// ---------------------------------------------------------------------------

namespace detail {

/// Thin QR: A = Q R with Q of full column rank k = min(rows, cols).
inline void thin_qr(const Eigen::MatrixXd& A, Eigen::MatrixXd& Q, Eigen::MatrixXd& R) {
  const Index k = std::min(A.rows(), A.cols());
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(A);
  Q = qr.householderQ() * Eigen::MatrixXd::Identity(A.rows(), k);
  R = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
}

/// Assigns a (r1 x d*r2) matrix into a core of the given shape.
inline Core3 core_from_right(const Eigen::MatrixXd& m, Index r1, Index d, Index r2) {
  Core3 g(r1, d, r2);
  g.right() = m;
  return g;
}

/// Assigns a (r1*d x r2) matrix into a core of the given shape.
inline Core3 core_from_left(const Eigen::MatrixXd& m, Index r1, Index d, Index r2) {
  Core3 g(r1, d, r2);
  g.left() = m;
  return g;
}

}  // namespace detail

/// Brings cores 2..M into right-orthogonal form (rows of the right unfolding
/// orthonormal); the represented tensor is unchanged and its Frobenius norm
/// ends up concentrated in the first core.
inline void right_orthogonalize(TTTensor& t) {
  for (Index m = t.order() - 1; m >= 1; --m) {
    Core3& g = t.core(m);
    Eigen::MatrixXd Q, R;
    detail::thin_qr(g.right().transpose(), Q, R);
    const Index k = Q.cols();
    Core3 ng = detail::core_from_right(Q.transpose(), k, g.d, g.r2);
    Core3& prev = t.core(m - 1);
    Eigen::MatrixXd carried = prev.left() * R.transpose();  // (r0*d x k)
    prev = detail::core_from_left(carried, prev.r1, prev.d, k);
    g = std::move(ng);
  }
}

/// Brings cores 1..M-1 into left-orthogonal form; the norm moves into the
/// last core.
inline void left_orthogonalize(TTTensor& t) {
  for (Index m = 0; m + 1 < t.order(); ++m) {
    Core3& g = t.core(m);
    Eigen::MatrixXd Q, R;
    detail::thin_qr(g.left(), Q, R);
    const Index k = Q.cols();
    Core3 ng = detail::core_from_left(Q, g.r1, g.d, k);
    Core3& next = t.core(m + 1);
    Eigen::MatrixXd carried = R * next.right();  // (k x d*r2)
    next = detail::core_from_right(carried, k, next.d, next.r2);
    g = std::move(ng);
  }
}

/// Frobenius norm, computed stably through orthogonalization rather than
/// as sqrt(dot(t, t)).
inline double norm(TTTensor t) {
  right_orthogonalize(t);
  return t.core(0).frobenius_norm();
}

/// Diagnostics from a round() call.
struct RoundInfo {
  /// True when the max-rank cap forced discarding singular values whose
  /// combined weight exceeded the tolerance budget.
  bool rank_cap_binding = false;
  /// sqrt(sum of squared discarded singular values) over all bonds; an upper
  /// bound on the rounding error by TT-SVD quasi-optimality.
  double error_bound = 0.0;
};

/// TT rounding: right-to-left orthogonalization followed by a left-to-right
/// truncated SVD sweep.
///
/// The per-bond budget tol*|t|/sqrt(M-1) guarantees |t - round(t)| <=
/// tol*|t|. At every bond the largest tail of singular values whose squared
/// sum fits the budget is discarded; values at the cutoff are kept. With
/// tol = 0 only numerical zeros (sigma <= eps * sigma_max * max matrix
/// dimension) are dropped, so ranks become minimal without changing the
/// tensor beyond roundoff.
inline TTTensor round(TTTensor t, double tol, Index max_rank = -1, RoundInfo* info = nullptr) {
  detail::check(tol >= 0.0, "round: tolerance must be non-negative");
  if (info) *info = RoundInfo{};
  const Index M = t.order();
  if (M == 1) return t;

  right_orthogonalize(t);
  const double nrm = t.core(0).frobenius_norm();
  if (nrm == 0.0) return constant_tt(t.dims(), 0.0);
  const double bond_tol = tol * nrm / std::sqrt(static_cast<double>(M - 1));

  double discarded_sq = 0.0;
  for (Index m = 0; m + 1 < M; ++m) {
    Core3& g = t.core(m);
    Eigen::BDCSVD<Eigen::MatrixXd> svd(g.left(), Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd& s = svd.singularValues();
    const Index n = s.size();

    const double num_cut = std::numeric_limits<double>::epsilon() * s(0) *
                           static_cast<double>(std::max(g.left().rows(), g.left().cols()));
    Index k_num = 0;
    while (k_num < n && s(k_num) > num_cut) ++k_num;

    Index k_tol = n;
    double tail = 0.0;
    while (k_tol > 1 && tail + s(k_tol - 1) * s(k_tol - 1) <= bond_tol * bond_tol) {
      tail += s(k_tol - 1) * s(k_tol - 1);
      --k_tol;
    }

    Index k = std::max<Index>(1, std::min(k_num, k_tol));
    if (max_rank > 0 && k > max_rank) {
      if (info) info->rank_cap_binding = true;
      k = max_rank;
    }
    for (Index i = k; i < n; ++i) discarded_sq += s(i) * s(i);

    Core3 ng = detail::core_from_left(svd.matrixU().leftCols(k), g.r1, g.d, k);
    Eigen::MatrixXd carry = s.head(k).asDiagonal() * svd.matrixV().leftCols(k).transpose();
    Core3& next = t.core(m + 1);
    next = detail::core_from_right(carry * next.right(), k, next.d, next.r2);
    g = std::move(ng);
  }
  if (info) info->error_bound = std::sqrt(discarded_sq);
  return t;
}

// ---------------------------------------------------------------------------
// Operator application
// ---------------------------------------------------------------------------

/// Exact operator application: bond ranks multiply. The paired rank index is
/// row-major with the operator index slowest, (k, l) -> k * r_v + l.
inline TTTensor apply(const TTOperator& W, const TTTensor& v) {
  detail::check(W.order() == v.order(), "apply: order mismatch");
  detail::check(W.col_dims() == v.dims(), "apply: operator column dims must match tensor dims");
  std::vector<Core3> cores;
  cores.reserve(static_cast<size_t>(v.order()));
  for (Index m = 0; m < v.order(); ++m) {
    const Core4& w = W.core(m);
    const Core3& g = v.core(m);
    Core3 out(w.r1 * g.r1, w.dr, w.r2 * g.r2);
    for (Index i = 0; i < w.dr; ++i) {
      auto os = out.slice(i);
      for (Index j = 0; j < w.dc; ++j) {
        const auto vs = g.slice(j);
        for (Index k = 0; k < w.r1; ++k)
          for (Index l = 0; l < w.r2; ++l) {
            const double c = w(k, i, j, l);
            if (c != 0.0) os.block(k * g.r1, l * g.r2, g.r1, g.r2) += c * vs;
          }
      }
    }
    cores.push_back(std::move(out));
  }
  return TTTensor(std::move(cores));
}

/// Operator application with on-the-fly compression ("zip-up"): each bond is
/// truncated to a relative tolerance right after it is formed, then a final
/// rounding sweep runs right-to-left. Far cheaper than apply-then-round when
/// the product rank collapses; intended for residual evaluation with
/// tolerances well below the certification threshold.
inline TTTensor apply_rounded(const TTOperator& W, const TTTensor& v, double rel_tol, Index max_rank = -1) {
  detail::check(W.order() == v.order(), "apply_rounded: order mismatch");
  detail::check(W.col_dims() == v.dims(), "apply_rounded: operator column dims must match tensor dims");
  const Index M = v.order();

  std::vector<Core3> cores(static_cast<size_t>(M));
  Eigen::MatrixXd carry = Eigen::MatrixXd::Ones(1, 1);  // rho x (rW*rv)
  for (Index m = 0; m < M; ++m) {
    const Core4& w = W.core(m);
    const Core3& g = v.core(m);
    // Raw contracted core at this mode, with paired bonds.
    Core3 raw(w.r1 * g.r1, w.dr, w.r2 * g.r2);
    for (Index i = 0; i < w.dr; ++i) {
      auto os = raw.slice(i);
      for (Index j = 0; j < w.dc; ++j) {
        const auto vs = g.slice(j);
        for (Index k = 0; k < w.r1; ++k)
          for (Index l = 0; l < w.r2; ++l) {
            const double c = w(k, i, j, l);
            if (c != 0.0) os.block(k * g.r1, l * g.r2, g.r1, g.r2) += c * vs;
          }
      }
    }
    // Absorb the carry: Y[(a,i), q'] = sum_q carry[a,q] raw[q,i,q'].
    const Index rho = carry.rows();
    RowMat yr = carry * raw.right();  // (rho x d*rpair'), contiguous row-major
    MapRowMat yl(yr.data(), rho * w.dr, w.r2 * g.r2);

    if (m + 1 == M) {
      cores[static_cast<size_t>(m)] = detail::core_from_left(yl, rho, w.dr, 1);
      break;
    }
    Eigen::BDCSVD<Eigen::MatrixXd> svd(yl, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd& s = svd.singularValues();
    const Index n = s.size();
    const double budget = rel_tol * s.norm() / std::sqrt(static_cast<double>(M));
    Index k = n;
    double tail = 0.0;
    while (k > 1 && tail + s(k - 1) * s(k - 1) <= budget * budget) {
      tail += s(k - 1) * s(k - 1);
      --k;
    }
    if (max_rank > 0) k = std::min(k, max_rank);
    cores[static_cast<size_t>(m)] = detail::core_from_left(svd.matrixU().leftCols(k), rho, w.dr, k);
    carry = s.head(k).asDiagonal() * svd.matrixV().leftCols(k).transpose();
  }
  return round(TTTensor(std::move(cores)), rel_tol, max_rank);
}

// ---------------------------------------------------------------------------
// Dense conversion (small instances)
// ---------------------------------------------------------------------------

constexpr long long kDenseCap = 1'000'000;

/// Full tensor as a vector in row-major multi-index order (first mode
/// slowest). Guarded by an entry-count cap.
inline Eigen::VectorXd to_dense(const TTTensor& t, long long cap = kDenseCap) {
  const auto d = t.dims();
  long long total = 1;
  for (Index dm : d) {
    total *= dm;
    detail::check(total <= cap, "to_dense: tensor exceeds dense entry cap");
  }
  RowMat cur(1, 1);
  cur(0, 0) = 1.0;
  Index nrows = 1;
  for (Index m = 0; m < t.order(); ++m) {
    const Core3& g = t.core(m);
    RowMat next = cur * g.right();  // (nrows x d*r2), row-major
    nrows *= g.d;
    cur = MapRowMat(next.data(), nrows, g.r2);
  }
  return Eigen::Map<Eigen::VectorXd>(cur.data(), nrows);
}

/// Dense matrix of a TT operator, rows/columns in row-major multi-index
/// order over row_dims/col_dims.
inline Eigen::MatrixXd to_dense(const TTOperator& W, long long cap = kDenseCap) {
  const auto rd = W.row_dims();
  const auto cd = W.col_dims();
  long long nr = 1, nc = 1;
  for (Index x : rd) nr *= x;
  for (Index x : cd) nc *= x;
  detail::check(nr * nc <= cap, "to_dense: operator exceeds dense entry cap");

  // cur[(ri, ci), k] with ri, ci row-major over processed modes.
  Eigen::MatrixXd cur = Eigen::MatrixXd::Ones(1, 1);
  Index pr = 1, pc = 1;
  for (Index m = 0; m < W.order(); ++m) {
    const Core4& w = W.core(m);
    Eigen::MatrixXd next = Eigen::MatrixXd::Zero(pr * w.dr * pc * w.dc, w.r2);
    for (Index ri = 0; ri < pr; ++ri)
      for (Index ci = 0; ci < pc; ++ci)
        for (Index i = 0; i < w.dr; ++i)
          for (Index j = 0; j < w.dc; ++j) {
            const Index row = ((ri * w.dr + i) * pc + ci) * w.dc + j;
            for (Index k = 0; k < w.r1; ++k) {
              const double c = cur(ri * pc + ci, k);
              if (c != 0.0)
                for (Index l = 0; l < w.r2; ++l) next(row, l) += c * w(k, i, j, l);
            }
          }
    pr *= w.dr;
    pc *= w.dc;
    cur.swap(next);
  }
  Eigen::MatrixXd out(nr, nc);
  for (Index ri = 0; ri < nr; ++ri)
    for (Index ci = 0; ci < nc; ++ci) out(ri, ci) = cur(ri * nc + ci, 0);
  return out;
}

/// TT-SVD of a dense tensor given in row-major multi-index order, truncated
/// with the same per-bond budget as round().
inline TTTensor from_dense(const Eigen::VectorXd& a, const std::vector<Index>& dims, double tol,
                           long long cap = kDenseCap) {
  long long total = 1;
  for (Index dm : dims) {
    detail::check(dm > 0, "from_dense: mode sizes must be positive");
    total *= dm;
    detail::check(total <= cap, "from_dense: tensor exceeds dense entry cap");
  }
  detail::check(a.size() == total, "from_dense: data size does not match mode sizes");
  const Index M = static_cast<Index>(dims.size());
  const double nrm = a.norm();
  if (nrm == 0.0) return constant_tt(dims, 0.0);
  const double bond_tol = (M > 1) ? tol * nrm / std::sqrt(static_cast<double>(M - 1)) : 0.0;

  std::vector<Core3> cores;
  cores.reserve(static_cast<size_t>(M));
  RowMat rest(1, a.size());
  for (Index i = 0; i < a.size(); ++i) rest(0, i) = a(i);
  Index r = 1;
  for (Index m = 0; m + 1 < M; ++m) {
    const Index cols = rest.cols() / dims[m];
    MapRowMat unf(rest.data(), r * dims[m], cols);
    Eigen::BDCSVD<Eigen::MatrixXd> svd(unf, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd& s = svd.singularValues();
    const Index n = s.size();
    const double num_cut = std::numeric_limits<double>::epsilon() * s(0) *
                           static_cast<double>(std::max(unf.rows(), unf.cols()));
    Index k_num = 0;
    while (k_num < n && s(k_num) > num_cut) ++k_num;
    Index k_tol = n;
    double tail = 0.0;
    while (k_tol > 1 && tail + s(k_tol - 1) * s(k_tol - 1) <= bond_tol * bond_tol) {
      tail += s(k_tol - 1) * s(k_tol - 1);
      --k_tol;
    }
    const Index k = std::max<Index>(1, std::min(k_num, k_tol));
    cores.push_back(detail::core_from_left(svd.matrixU().leftCols(k), r, dims[m], k));
    RowMat carry = s.head(k).asDiagonal() * svd.matrixV().leftCols(k).transpose();
    rest = std::move(carry);
    r = k;
  }
  cores.push_back(detail::core_from_left(MapRowMat(rest.data(), r * dims[M - 1], 1), r, dims[M - 1], 1));
  return TTTensor(std::move(cores));
}

}  // namespace ttexp
