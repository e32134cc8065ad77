#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include <Eigen/Dense>

#include "cgolab/error.hpp"

namespace cgolab {

using cplx = std::complex<double>;
using CVec = std::vector<cplx>;
using RVec = std::vector<double>;
using MultiIndex = std::vector<int>;

inline std::uint64_t sym_index_count(int d, int m) {
  if (d < 1) fail(ErrorKind::RankMismatch, "slot dimension must be positive");
  if (m < 0) fail(ErrorKind::RankMismatch, "rank must be nonnegative");
  // C(d+m-1, m) computed incrementally; each partial product is itself a binomial.
  std::uint64_t c = 1;
  for (int i = 1; i <= m; ++i) c = c * static_cast<std::uint64_t>(d - 1 + i) / static_cast<std::uint64_t>(i);
  return c;
}

/// Nondecreasing multi-indices of a (d, m) symmetric tensor space in lexicographic order.
class IndexTable {
 public:
  IndexTable(int d, int m) : d_(d), m_(m) {
    MultiIndex cur(m, 0);
    if (m == 0) {
      indices_.push_back({});
    } else {
      while (true) {
        indices_.push_back(cur);
        int pos = m - 1;
        while (pos >= 0 && cur[pos] == d - 1) --pos;
        if (pos < 0) break;
        int v = cur[pos] + 1;
        for (int i = pos; i < m; ++i) cur[i] = v;
      }
    }
    for (std::size_t k = 0; k < indices_.size(); ++k) {
      position_[indices_[k]] = k;
      multiplicity_.push_back(count_permutations(indices_[k]));
    }
  }

  static std::shared_ptr<const IndexTable> get(int d, int m) {
    static std::mutex mu;
    static std::map<std::pair<int, int>, std::shared_ptr<const IndexTable>> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto& slot = cache[{d, m}];
    if (!slot) slot = std::make_shared<const IndexTable>(d, m);
    return slot;
  }

  int dim() const { return d_; }
  int rank() const { return m_; }
  std::size_t size() const { return indices_.size(); }
  const MultiIndex& index(std::size_t k) const { return indices_[k]; }
  double multiplicity(std::size_t k) const { return multiplicity_[k]; }

  std::size_t position(MultiIndex idx) const {
    std::sort(idx.begin(), idx.end());
    auto it = position_.find(idx);
    if (it == position_.end()) fail(ErrorKind::RankMismatch, "multi-index out of range");
    return it->second;
  }

 private:
  static double count_permutations(const MultiIndex& idx) {
    double num = 1;
    for (std::size_t i = 2; i <= idx.size(); ++i) num *= static_cast<double>(i);
    std::size_t i = 0;
    while (i < idx.size()) {
      std::size_t j = i;
      while (j < idx.size() && idx[j] == idx[i]) ++j;
      for (std::size_t k = 2; k <= j - i; ++k) num /= static_cast<double>(k);
      i = j;
    }
    return num;
  }

  int d_, m_;
  std::vector<MultiIndex> indices_;
  std::vector<double> multiplicity_;
  std::map<MultiIndex, std::size_t> position_;
};

class SymTensor {
 public:
  SymTensor() : SymTensor(1, 0) {}
  SymTensor(int d, int m)
      : table_(IndexTable::get(d, m)), coeffs_(table_->size(), 0.0) {}
  SymTensor(int d, int m, RVec coeffs) : table_(IndexTable::get(d, m)), coeffs_(std::move(coeffs)) {
    if (coeffs_.size() != table_->size())
      fail(ErrorKind::RankMismatch, "coefficient count does not match C(d+m-1,m)");
  }

  int dim() const { return table_->dim(); }
  int rank() const { return table_->rank(); }
  std::size_t size() const { return coeffs_.size(); }
  const IndexTable& table() const { return *table_; }
  const RVec& coeffs() const { return coeffs_; }
  RVec& coeffs() { return coeffs_; }

  /// Entry for an arbitrary (not necessarily sorted) multi-index.
  double operator()(const MultiIndex& idx) const { return coeffs_[table_->position(idx)]; }
  double& at(const MultiIndex& idx) { return coeffs_[table_->position(idx)]; }

  SymTensor& operator+=(const SymTensor& o) {
    check_same(o);
    for (std::size_t k = 0; k < size(); ++k) coeffs_[k] += o.coeffs_[k];
    return *this;
  }
  SymTensor& operator-=(const SymTensor& o) {
    check_same(o);
    for (std::size_t k = 0; k < size(); ++k) coeffs_[k] -= o.coeffs_[k];
    return *this;
  }
  SymTensor& operator*=(double s) {
    for (auto& c : coeffs_) c *= s;
    return *this;
  }
  friend SymTensor operator+(SymTensor a, const SymTensor& b) { return a += b; }
  friend SymTensor operator-(SymTensor a, const SymTensor& b) { return a -= b; }
  friend SymTensor operator*(double s, SymTensor a) { return a *= s; }

  double frobenius() const {
    double s = 0;
    for (std::size_t k = 0; k < size(); ++k) s += table_->multiplicity(k) * coeffs_[k] * coeffs_[k];
    return std::sqrt(s);
  }

 private:
  void check_same(const SymTensor& o) const {
    if (o.dim() != dim() || o.rank() != rank()) fail(ErrorKind::RankMismatch, "tensor shapes differ");
  }

  std::shared_ptr<const IndexTable> table_;
  RVec coeffs_;
};

namespace detail {

inline bool cplx_less(const CVec& a, const CVec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].real() != b[i].real()) return a[i].real() < b[i].real();
    if (a[i].imag() != b[i].imag()) return a[i].imag() < b[i].imag();
  }
  return false;
}

/// Sum over distinct orderings of idx of prod_i v_i[ordering_i]; vecs must be canonically ordered.
inline cplx symmetrized_monomial(MultiIndex idx, const std::vector<CVec>& vecs) {
  cplx total = 0.0;
  do {
    cplx term = 1.0;
    for (std::size_t i = 0; i < idx.size(); ++i) term *= vecs[i][static_cast<std::size_t>(idx[i])];
    total += term;
  } while (std::next_permutation(idx.begin(), idx.end()));
  return total;
}

inline std::vector<CVec> canonical(std::vector<CVec> vecs) {
  std::sort(vecs.begin(), vecs.end(), cplx_less);
  return vecs;
}

}  // namespace detail

/// Row of the linear map T -> contract(T, vecs) in the stored coefficient basis.
inline CVec contraction_row(int d, int m, const std::vector<CVec>& vecs) {
  if (static_cast<int>(vecs.size()) != m) fail(ErrorKind::RankMismatch, "need one vector per slot");
  for (const auto& v : vecs)
    if (static_cast<int>(v.size()) != d) fail(ErrorKind::RankMismatch, "vector length differs from slot dimension");
  auto table = IndexTable::get(d, m);
  auto canon = detail::canonical(vecs);
  CVec row(table->size());
  for (std::size_t k = 0; k < table->size(); ++k) row[k] = detail::symmetrized_monomial(table->index(k), canon);
  return row;
}

inline cplx contract(const SymTensor& T, const std::vector<CVec>& vecs) {
  CVec row = contraction_row(T.dim(), T.rank(), vecs);
  cplx s = 0.0;
  for (std::size_t k = 0; k < row.size(); ++k) s += T.coeffs()[k] * row[k];
  return s;
}

inline cplx contract(const SymTensor& T, const std::vector<RVec>& vecs) {
  std::vector<CVec> c;
  for (const auto& v : vecs) c.emplace_back(v.begin(), v.end());
  return contract(T, c);
}

/// Contraction with the same vector in every slot.
inline cplx contract_power(const SymTensor& T, const CVec& v) {
  const auto& tab = T.table();
  cplx s = 0.0;
  for (std::size_t k = 0; k < tab.size(); ++k) {
    cplx term = tab.multiplicity(k) * T.coeffs()[k];
    for (int j : tab.index(k)) term *= v[static_cast<std::size_t>(j)];
    s += term;
  }
  return s;
}

struct ContractionSample {
  std::vector<CVec> vecs;
  cplx value;
};

struct ReconstructOptions {
  double rel_threshold = 1e-8;
};

namespace detail {

// Rows are complex; real and imaginary parts are separate equations.
inline RVec solve_contraction_system(const std::vector<CVec>& rows, const std::vector<cplx>& values, Eigen::Index nunk,
                                     double rel_threshold) {
  Eigen::MatrixXd A(2 * static_cast<Eigen::Index>(rows.size()), nunk);
  Eigen::VectorXd b(A.rows());
  for (std::size_t s = 0; s < rows.size(); ++s) {
    auto r = static_cast<Eigen::Index>(2 * s);
    for (Eigen::Index k = 0; k < nunk; ++k) {
      A(r, k) = rows[s][static_cast<std::size_t>(k)].real();
      A(r + 1, k) = rows[s][static_cast<std::size_t>(k)].imag();
    }
    b(r) = values[s].real();
    b(r + 1) = values[s].imag();
  }
  Eigen::MatrixXd N = A.transpose() * A;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(N);
  const auto& ev = eig.eigenvalues();
  double top = ev.size() ? std::max(ev(ev.size() - 1), 0.0) : 0.0;
  std::vector<RVec> null_vectors;
  for (Eigen::Index k = 0; k < ev.size(); ++k) {
    if (ev(k) <= rel_threshold * top) {
      auto col = eig.eigenvectors().col(k);
      null_vectors.emplace_back(col.data(), col.data() + col.size());
    }
  }
  if (top == 0.0 || !null_vectors.empty()) {
    if (top == 0.0) {
      null_vectors.clear();
      for (Eigen::Index k = 0; k < nunk; ++k) {
        RVec e(static_cast<std::size_t>(nunk), 0.0);
        e[static_cast<std::size_t>(k)] = 1.0;
        null_vectors.push_back(e);
      }
    }
    const std::size_t nullity = null_vectors.size();
    throw RankDeficientError(nullity, std::move(null_vectors));
  }
  Eigen::VectorXd rhs = A.transpose() * b;
  Eigen::VectorXd x = eig.eigenvectors() * (eig.eigenvectors().transpose() * rhs).cwiseQuotient(ev);
  return RVec(x.data(), x.data() + x.size());
}

}  // namespace detail

/// Least-squares inverse of contraction on a sample set; real and imaginary parts are separate equations.
inline SymTensor reconstruct_from_contractions(const std::vector<ContractionSample>& samples, int d, int m,
                                               ReconstructOptions opt = {}) {
  std::vector<CVec> rows;
  std::vector<cplx> values;
  for (const auto& s : samples) {
    rows.push_back(contraction_row(d, m, s.vecs));
    values.push_back(s.value);
  }
  auto nunk = static_cast<Eigen::Index>(sym_index_count(d, m));
  return SymTensor(d, m, detail::solve_contraction_system(rows, values, nunk, opt.rel_threshold));
}

/// Row of T(v_1, ..., v_m) for a tensor without symmetry: slot l reads v_l. Unknowns are the d^m
/// components in row-major order (j_1 slowest).
inline CVec ordered_contraction_row(int d, const std::vector<CVec>& vecs) {
  CVec row{1.0};
  for (const auto& v : vecs) {
    CVec next(row.size() * static_cast<std::size_t>(d));
    for (std::size_t a = 0; a < row.size(); ++a)
      for (int j = 0; j < d; ++j) next[a * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] = row[a] * v[static_cast<std::size_t>(j)];
    row = std::move(next);
  }
  return row;
}

/// Same least-squares inverse over all d^m slot-ordered components.
inline RVec reconstruct_ordered_from_contractions(const std::vector<ContractionSample>& samples, int d, int m,
                                                  ReconstructOptions opt = {}) {
  std::vector<CVec> rows;
  std::vector<cplx> values;
  for (const auto& s : samples) {
    if (static_cast<int>(s.vecs.size()) != m) fail(ErrorKind::RankMismatch, "sample has " + std::to_string(s.vecs.size()) + " vectors, rank is " + std::to_string(m));
    rows.push_back(ordered_contraction_row(d, s.vecs));
    values.push_back(s.value);
  }
  Eigen::Index nunk = 1;
  for (int i = 0; i < m; ++i) nunk *= d;
  return detail::solve_contraction_system(rows, values, nunk, opt.rel_threshold);
}

// ---------------------------------------------------------------------------
// Admissible pairs and cutoff frames

inline cplx dot(const CVec& a, const CVec& b) {
  cplx s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double rdot(const RVec& a, const RVec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline RVec real_part(const CVec& v) {
  RVec r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) r[i] = v[i].real();
  return r;
}

inline RVec imag_part(const CVec& v) {
  RVec r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) r[i] = v[i].imag();
  return r;
}

inline CVec to_complex(const RVec& re, const RVec& im) {
  CVec v(re.size());
  for (std::size_t i = 0; i < re.size(); ++i) v[i] = cplx(re[i], im[i]);
  return v;
}

inline RVec basis_vector(int n, int i) {
  RVec e(static_cast<std::size_t>(n), 0.0);
  e[static_cast<std::size_t>(i)] = 1.0;
  return e;
}

struct AdmissiblePair {
  CVec zeta;
  CVec zeta_tilde;
};

struct PairResiduals {
  double null_zeta, null_zeta_tilde, real_mismatch, real_norm, dot_formula;
  double im_independence;  // sine of the angle between Im zeta and Im zeta_tilde
};

inline PairResiduals pair_residuals(const AdmissiblePair& p) {
  PairResiduals r{};
  r.null_zeta = std::abs(dot(p.zeta, p.zeta));
  r.null_zeta_tilde = std::abs(dot(p.zeta_tilde, p.zeta_tilde));
  RVec re = real_part(p.zeta), ret = real_part(p.zeta_tilde);
  RVec im = imag_part(p.zeta), imt = imag_part(p.zeta_tilde);
  for (std::size_t i = 0; i < re.size(); ++i) r.real_mismatch = std::max(r.real_mismatch, std::abs(re[i] - ret[i]));
  r.real_norm = std::abs(std::sqrt(rdot(re, re)) - 1.0);
  r.dot_formula = std::abs(dot(p.zeta, p.zeta_tilde) - cplx(1.0 - rdot(im, imt), 0.0));
  double c = rdot(im, imt) / std::sqrt(rdot(im, im) * rdot(imt, imt));
  r.im_independence = std::sqrt(std::max(0.0, 1.0 - c * c));
  return r;
}

inline AdmissiblePair make_admissible_pair(const RVec& xi, const RVec& eta, const RVec& mu, double tol = 1e-12) {
  if (xi.size() < 3 || eta.size() != xi.size() || mu.size() != xi.size())
    fail(ErrorKind::NotOrthonormal, "admissible pairs need three vectors in dimension n >= 3");
  const RVec* v[3] = {&xi, &eta, &mu};
  for (int i = 0; i < 3; ++i)
    for (int j = i; j < 3; ++j) {
      double g = rdot(*v[i], *v[j]);
      if (std::abs(g - (i == j ? 1.0 : 0.0)) > tol) fail(ErrorKind::NotOrthonormal, "xi, eta, mu must be orthonormal");
    }
  return {to_complex(xi, eta), to_complex(xi, mu)};
}

/// Orthonormal completion of {Re zeta, Im zeta}, Gram-Schmidt seeded by the standard basis.
inline std::vector<RVec> cutoff_frame(const CVec& zeta, double threshold = 1e-8) {
  const std::size_t n = zeta.size();
  std::vector<RVec> basis;
  auto add = [&](RVec v) {
    for (const auto& b : basis) {
      double c = rdot(v, b);
      for (std::size_t i = 0; i < n; ++i) v[i] -= c * b[i];
    }
    double nv = std::sqrt(rdot(v, v));
    if (nv <= threshold) return false;
    for (auto& x : v) x /= nv;
    basis.push_back(std::move(v));
    return true;
  };
  RVec re = real_part(zeta), im = imag_part(zeta);
  if (!add(re)) fail(ErrorKind::DegenerateZeta, "Re zeta vanishes");
  if (!add(im)) fail(ErrorKind::DegenerateZeta, "Re zeta and Im zeta are parallel");
  for (std::size_t i = 0; i < n && basis.size() < n; ++i) add(basis_vector(static_cast<int>(n), static_cast<int>(i)));
  return std::vector<RVec>(basis.begin() + 2, basis.end());
}

// ---------------------------------------------------------------------------
// Sample plans

/// Admissible pairs (e_i + i e_j, e_i +/- i e_k) over ordered standard triples.
inline std::vector<AdmissiblePair> standard_pairs(int n) {
  std::vector<AdmissiblePair> out;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        if (i == j || j == k || i == k) continue;
        for (double s : {1.0, -1.0}) {
          RVec mu = basis_vector(n, k);
          for (auto& x : mu) x *= s;
          out.push_back(make_admissible_pair(basis_vector(n, i), basis_vector(n, j), mu));
        }
      }
  return out;
}

/// Real probe directions e_i and e_i +/- e_j (i < j).
inline std::vector<RVec> real_directions(int d) {
  std::vector<RVec> out;
  for (int i = 0; i < d; ++i) out.push_back(basis_vector(d, i));
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j)
      for (double s : {1.0, -1.0}) {
        RVec v = basis_vector(d, i);
        v[static_cast<std::size_t>(j)] = s;
        out.push_back(v);
      }
  return out;
}

namespace detail {
inline void multisets(int count, int size, int start, std::vector<int>& cur, std::vector<std::vector<int>>& out) {
  if (static_cast<int>(cur.size()) == size) {
    out.push_back(cur);
    return;
  }
  for (int i = start; i < count; ++i) {
    cur.push_back(i);
    multisets(count, size, i, cur, out);
    cur.pop_back();
  }
}
}  // namespace detail

/// Determining sample plan: slots 1-2 from admissible pairs, remaining slots from real directions.
inline std::vector<std::vector<CVec>> sample_plan(int d, int m) {
  std::vector<std::vector<CVec>> plan;
  if (m == 0) {
    plan.push_back({});
    return plan;
  }
  auto reals = real_directions(d);
  auto cvec = [](const RVec& r) { return CVec(r.begin(), r.end()); };
  if (m == 1) {
    for (int i = 0; i < d; ++i) plan.push_back({cvec(basis_vector(d, i))});
    return plan;
  }
  std::vector<std::vector<int>> tails;
  std::vector<int> cur;
  if (d >= 3) {
    detail::multisets(static_cast<int>(reals.size()), m - 2, 0, cur, tails);
    for (const auto& pair : standard_pairs(d))
      for (const auto& t : tails) {
        std::vector<CVec> vecs{pair.zeta, pair.zeta_tilde};
        for (int r : t) vecs.push_back(cvec(reals[static_cast<std::size_t>(r)]));
        plan.push_back(std::move(vecs));
      }
  } else {
    detail::multisets(static_cast<int>(reals.size()), m, 0, cur, tails);
    for (const auto& t : tails) {
      std::vector<CVec> vecs;
      for (int r : t) vecs.push_back(cvec(reals[static_cast<std::size_t>(r)]));
      plan.push_back(std::move(vecs));
    }
  }
  return plan;
}

/// Rank-3 samples (zeta, zeta, zeta_tilde) over admissible pairs only.
inline std::vector<std::vector<CVec>> admissible_only_plan(int n) {
  std::vector<std::vector<CVec>> plan;
  for (const auto& p : standard_pairs(n)) plan.push_back({p.zeta, p.zeta, p.zeta_tilde});
  return plan;
}

}  // namespace cgolab
