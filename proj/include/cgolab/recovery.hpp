#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <numeric>
#include <unordered_map>

#include "cgolab/cgo.hpp"
#include "cgolab/linearization.hpp"
#include "cgolab/tensor.hpp"

namespace cgolab {

// ---------------------------------------------------------------------------
// Hashing and field helpers

inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(s.data(), s.size(), h);
}

inline std::uint64_t hash_values(const CVec& v, std::uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(v.data(), v.size() * sizeof(cplx), h);
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::uint64_t probe_hash(const ExpField& f) {
  std::uint64_t h = fnv1a(f.grid().id());
  h = hash_values(f.w, h);
  h = hash_values(f.phi.values, h);
  for (const auto& c : f.grad_phi.comp) h = hash_values(c, h);
  return h;
}

inline std::uint64_t trace_hash(const BoundaryFunction& b) { return hash_values(b.values, fnv1a(b.grid.id())); }

/// e^{zeta.x} in factored form (phi = 1).
inline ExpField exp_probe(const BoxGrid& g, const CVec& zeta) {
  if (static_cast<int>(zeta.size()) != g.n) fail(ErrorKind::GridMismatch, "probe dimension differs from grid");
  ExpField f;
  f.w = zeta;
  f.phi = ScalarField(g, cplx(1.0));
  f.grad_phi = VectorField(g);
  f.frame = "exp";
  return f;
}

/// u = c + d.x with exact gradient.
inline ExpField linear_probe(const BoxGrid& g, const RVec& d, cplx c = 0.0) {
  if (static_cast<int>(d.size()) != g.n) fail(ErrorKind::GridMismatch, "direction dimension differs from grid");
  ExpField f;
  f.w.assign(d.size(), 0.0);
  f.phi = ScalarField(g);
  f.grad_phi = VectorField(g);
  std::vector<double> x(d.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    g.coords(i, x.data());
    f.phi[i] = c + rdot(d, x);
    for (std::size_t k = 0; k < d.size(); ++k) f.grad_phi.comp[k][i] = d[k];
  }
  f.frame = "linear";
  return f;
}

inline ExpField constant_field(const BoxGrid& g, cplx c = 1.0) { return linear_probe(g, RVec(static_cast<std::size_t>(g.n), 0.0), c); }

/// The same function with the exponential multiplied in (w = 0).
inline ExpField densify(const ExpField& f) {
  bool zero = std::all_of(f.w.begin(), f.w.end(), [](const cplx& c) { return c == cplx(0.0); });
  if (zero) return f;
  ExpField out;
  out.w.assign(f.w.size(), 0.0);
  out.phi = f.direct();
  out.grad_phi = f.direct_grad();
  out.frame = f.frame;
  return out;
}

/// a + cb * b, kept in factored form when the exponents agree.
inline ExpField add_fields(const ExpField& a, const ExpField& b, cplx cb = 1.0) {
  check_same_grid(a.grid(), b.grid());
  if (a.w == b.w) {
    ExpField out = a;
    for (std::size_t i = 0; i < out.phi.size(); ++i) {
      out.phi[i] += cb * b.phi[i];
      for (std::size_t k = 0; k < out.w.size(); ++k) out.grad_phi.comp[k][i] += cb * b.grad_phi.comp[k][i];
    }
    out.frame = a.frame == b.frame ? a.frame : "sum";
    return out;
  }
  ExpField da = densify(a), db = densify(b);
  return add_fields(da, db, cb);
}

namespace detail {

struct Dense {
  CVec u;
  std::vector<CVec> g;
};

inline Dense dense(const ExpField& f) {
  ExpField d = densify(f);
  Dense out{d.phi.values, d.grad_phi.comp};
  return out;
}

/// Multilinear interpolation of nodal values at x.
inline cplx interpolate(const BoxGrid& g, const CVec& v, const double* x) {
  std::vector<int> i0(static_cast<std::size_t>(g.n));
  std::vector<double> f(static_cast<std::size_t>(g.n));
  for (int k = 0; k < g.n; ++k) {
    double s = (x[k] + g.a) / g.h();
    int i = std::clamp(static_cast<int>(std::floor(s)), 0, g.M - 2);
    i0[static_cast<std::size_t>(k)] = i;
    f[static_cast<std::size_t>(k)] = std::clamp(s - i, 0.0, 1.0);
  }
  cplx out = 0.0;
  for (unsigned c = 0; c < (1u << g.n); ++c) {
    double w = 1;
    std::size_t node = 0;
    for (int k = 0; k < g.n; ++k) {
      int bit = (c >> k) & 1;
      w *= bit ? f[static_cast<std::size_t>(k)] : 1 - f[static_cast<std::size_t>(k)];
      node += static_cast<std::size_t>(i0[static_cast<std::size_t>(k)] + bit) * g.stride(k);
    }
    if (w != 0) out += w * v[node];
  }
  return out;
}

inline bool has_real_exponent(const std::vector<ExpField>& fields) {
  CVec w(fields[0].w.size(), 0.0);
  double scale = 1;
  for (const auto& f : fields)
    for (std::size_t k = 0; k < w.size(); ++k) {
      w[k] += f.w[k];
      scale += std::abs(f.w[k]);
    }
  for (const auto& c : w)
    if (std::abs(c.real()) > 1e-9 * scale) return true;
  return false;
}

}  // namespace detail

/// Gradient of a field at an arbitrary point of Omega.
inline CVec gradient_at(const ExpField& f, const RVec& p) {
  auto d = detail::dense(f);
  CVec out(d.g.size());
  for (std::size_t k = 0; k < d.g.size(); ++k) out[k] = detail::interpolate(f.grid(), d.g[k], p.data());
  return out;
}

// ---------------------------------------------------------------------------
// Identity for factored solutions

inline ScalarField identity_integrand(const SymTensorField& T, const std::vector<ExpField>& sols) {
  const int r = T.rank;
  if (static_cast<int>(sols.size()) != r + 2) fail(ErrorKind::RankMismatch, "identity needs rank + 2 solutions");
  const BoxGrid& g = sols[0].grid();
  if (T.values.size() != g.size()) fail(ErrorKind::GridMismatch, "tensor field not sampled on the solution grid");
  ExpProduct P = exp_product(sols);
  const double orderings = factorial(r);
  ScalarField out(g);
  std::vector<CVec> vecs;
  for (std::size_t i = 0; i < g.size(); ++i) {
    cplx s = 0.0;
    const CVec& last = P.states[static_cast<std::size_t>(r + 1)][i];
    for (int l = 0; l <= r; ++l) {
      const CVec& ul = P.states[static_cast<std::size_t>(l)][i];
      cplx gg = 0.0;
      for (int k = 1; k <= g.n; ++k) gg += ul[static_cast<std::size_t>(k)] * last[static_cast<std::size_t>(k)];
      if (gg == cplx(0.0)) continue;
      vecs.clear();
      for (int j = 0; j <= r; ++j)
        if (j != l) vecs.push_back(P.states[static_cast<std::size_t>(j)][i]);
      s += contract(T.values[i], vecs) * gg;
    }
    out[i] = orderings * s * P.phase[i];
  }
  return out;
}

inline cplx identity_eval_interior(const SymTensorField& T, const std::vector<ExpField>& sols) {
  return quad_omega(identity_integrand(T, sols));
}

// ---------------------------------------------------------------------------
// Measurement oracles

struct OracleStats {
  std::size_t calls = 0, hits = 0;
  std::size_t solves = 0, solve_hits = 0;
  std::size_t store_hits = 0;  // solves and values served by an external store
};

/// Persistent backing for oracle solves and values; keys are content hashes.
class OracleStore {
 public:
  virtual ~OracleStore() = default;
  virtual bool load(const std::string& key, CVec& out) = 0;
  virtual void save(const std::string& key, const CVec& v) = 0;
};

/// I(T; u_1..u_{r+2}) for the unknown rank-r tensor T, and the fields that enter it.
class Oracle {
 public:
  virtual ~Oracle() = default;
  virtual int rank() const = 0;
  virtual const BoxGrid& grid() const = 0;
  virtual std::string backend() const = 0;
  /// Field entering the identity for a probe (the probe itself, or the solution with its boundary values).
  virtual ExpField field(const ExpField& probe) = 0;
  virtual cplx value(const std::vector<ExpField>& probes) = 0;
};

enum class OracleBackend { Interior, Hierarchy, Fd };

inline const char* oracle_backend_name(OracleBackend b) {
  switch (b) {
    case OracleBackend::Interior: return "interior";
    case OracleBackend::Hierarchy: return "hierarchy";
    case OracleBackend::Fd: return "fd";
  }
  return "?";
}

inline OracleBackend parse_oracle_backend(const std::string& s) {
  if (s == "interior") return OracleBackend::Interior;
  if (s == "hierarchy") return OracleBackend::Hierarchy;
  if (s == "fd") return OracleBackend::Fd;
  fail(ErrorKind::ConfigInvalid, "unknown oracle backend '" + s + "'");
}

class MeasurementOracle : public Oracle {
 public:
  /// Interior quadrature of the identity with a known tensor field.
  MeasurementOracle(SymTensorField T, const BoxGrid& g) : backend_(OracleBackend::Interior), g_(g), T_(std::move(T)) {
    rank_ = T_.rank;
    if (T_.values.size() != g.size()) fail(ErrorKind::GridMismatch, "tensor field not sampled on the oracle grid");
    if (T_.dim != g.n + 1) fail(ErrorKind::RankMismatch, "tensor slot dimension must be n + 1");
  }

  /// Boundary pairing of the order-(rank+1) DtN derivative of a model against its gamma0 reference.
  MeasurementOracle(const ConductivityModel& model, int rank, const BoxGrid& g, OracleBackend backend,
                    SolveConfig cfg = {}, double eps_step = 0.02)
      : backend_(backend), rank_(rank), g_(g), cfg_(std::move(cfg)), eps_(eps_step) {
    if (backend == OracleBackend::Interior) fail(ErrorKind::ConfigInvalid, "interior backend needs a tensor field");
    if (rank < 1) fail(ErrorKind::ConfigInvalid, "boundary oracles start at rank 1 (order-2 linearization)");
    model_ = std::make_unique<ConductivityModel>(model);
    hs_ = std::make_unique<HierarchySolver>(model, g, 0.0, cfg_.linear_tol);
  }

  int rank() const override { return rank_; }
  const BoxGrid& grid() const override { return g_; }
  std::string backend() const override { return oracle_backend_name(backend_); }
  const OracleStats& stats() const { return stats_; }

  /// salt must identify everything besides the probes that the results depend on (model, grid, backend, solver).
  void set_store(OracleStore* store, std::string salt) {
    store_ = store;
    salt_ = std::move(salt);
  }

  ExpField field(const ExpField& probe) override {
    check_same_grid(probe.grid(), g_);
    if (backend_ == OracleBackend::Interior) return probe;
    ExpField f = ExpField::plain(first_order(probe.trace()));
    f.frame = "solve";
    return f;
  }

  cplx value(const std::vector<ExpField>& probes) override {
    if (static_cast<int>(probes.size()) != rank_ + 2) fail(ErrorKind::RankMismatch, "identity needs rank + 2 solutions");
    ++stats_.calls;
    std::uint64_t key = 0xcbf29ce484222325ull;
    for (const auto& p : probes) {
      std::uint64_t h = backend_ == OracleBackend::Interior ? probe_hash(p) : trace_hash(p.trace());
      key = fnv1a(&h, sizeof h, key);
    }
    auto it = values_.find(key);
    if (it != values_.end()) {
      ++stats_.hits;
      return it->second;
    }
    const std::string skey = salt_ + "-value-" + hex64(key);
    CVec stored;
    if (store_ && store_->load(skey, stored) && stored.size() == 1) {
      ++stats_.store_hits;
      return values_[key] = stored[0];
    }
    cplx v = compute(probes);
    values_[key] = v;
    if (store_) store_->save(skey, {v});
    return v;
  }

 private:
  ScalarField first_order(const BoundaryFunction& f) {
    std::uint64_t h = trace_hash(f);
    auto it = solutions_.find(h);
    if (it != solutions_.end()) {
      ++stats_.solve_hits;
      return it->second;
    }
    const std::string skey = salt_ + "-solve-" + hex64(h);
    CVec stored;
    if (store_ && store_->load(skey, stored) && stored.size() == g_.size()) {
      ++stats_.store_hits;
      return solutions_[h] = ScalarField(g_, std::move(stored));
    }
    ++stats_.solves;
    ScalarField v = hs_->first_order(f);
    if (store_) store_->save(skey, v.values);
    return solutions_[h] = std::move(v);
  }

  cplx compute(const std::vector<ExpField>& probes) {
    if (backend_ == OracleBackend::Interior) {
      if (!detail::has_real_exponent(probes)) return identity_eval_interior(T_, probes);
      std::vector<ExpField> d;
      for (const auto& p : probes) d.push_back(densify(p));
      return identity_eval_interior(T_, d);
    }
    const int m = rank_ + 1;
    std::vector<BoundaryFunction> traces;
    for (const auto& p : probes) traces.push_back(p.trace());
    if (backend_ == OracleBackend::Hierarchy) {
      std::vector<ScalarField> v;
      for (int l = 0; l < m; ++l) v.push_back(first_order(traces[static_cast<std::size_t>(l)]));
      ++stats_.solves;
      auto res = hs_->solve_with(std::move(v));
      // The gamma0 reference is linear and has no derivative of order >= 2.
      return factorial(rank_) * quad_boundary(res.weak_flux, traces.back());
    }
    ProbeSet ps;
    ps.fs.assign(traces.begin(), traces.begin() + m);
    ps.f_test = traces.back();
    ps.eps_step = eps_;
    ++stats_.solves;
    return factorial(rank_) * dtn_pairing(*model_, nullptr, ps, PairingBackend::Fd, cfg_, m >= 3);
  }

  OracleBackend backend_;
  int rank_ = 0;
  BoxGrid g_;
  SymTensorField T_;
  std::unique_ptr<ConductivityModel> model_;
  std::unique_ptr<HierarchySolver> hs_;
  SolveConfig cfg_;
  double eps_ = 0.02;
  OracleStats stats_;
  std::unordered_map<std::uint64_t, ScalarField> solutions_;
  std::unordered_map<std::uint64_t, cplx> values_;
  OracleStore* store_ = nullptr;
  std::string salt_;
};

/// Identity for T(e_0^j, .): j constant solutions u = 1 fill labels of the base identity.
class ReducedOracle : public Oracle {
 public:
  ReducedOracle(Oracle& base, int j) : base_(base), j_(j), one_(constant_field(base.grid())) {
    if (j < 0 || j > base.rank()) fail(ErrorKind::RankMismatch, "reduction order must lie in [0, rank]");
  }
  int rank() const override { return base_.rank() - j_; }
  const BoxGrid& grid() const override { return base_.grid(); }
  std::string backend() const override { return base_.backend(); }
  ExpField field(const ExpField& probe) override { return base_.field(probe); }

  cplx value(const std::vector<ExpField>& probes) override {
    const int r = rank();
    if (static_cast<int>(probes.size()) != r + 2) fail(ErrorKind::RankMismatch, "identity needs rank + 2 solutions");
    std::vector<ExpField> full(probes.begin(), probes.end() - 1);
    for (int i = 0; i < j_; ++i) full.push_back(one_);
    full.push_back(probes.back());
    return base_.value(full) * factorial(r) / factorial(base_.rank());
  }

 private:
  Oracle& base_;
  int j_;
  ExpField one_;
};

// ---------------------------------------------------------------------------
// Polynomial fits for the low-rank pieces

struct PolyBasis {
  int n = 0, degree = 0;
  double scale = 1.0;
  std::vector<MultiIndex> exps;

  PolyBasis() = default;
  PolyBasis(int n_, int D, double scale_ = 1.0) : n(n_), degree(D), scale(scale_) {
    MultiIndex cur(static_cast<std::size_t>(n), 0);
    for (int t = 0; t <= D; ++t) enumerate(0, t, cur);
  }

  std::size_t size() const { return exps.size(); }

  double eval(std::size_t k, const double* x) const {
    double v = 1;
    for (int i = 0; i < n; ++i)
      for (int e = 0; e < exps[k][static_cast<std::size_t>(i)]; ++e) v *= x[i] / scale;
    return v;
  }

  std::vector<RVec> sample(const BoxGrid& g) const {
    std::vector<RVec> out(size(), RVec(g.size()));
    std::vector<double> x(static_cast<std::size_t>(g.n));
    for (std::size_t i = 0; i < g.size(); ++i) {
      g.coords(i, x.data());
      for (std::size_t k = 0; k < size(); ++k) out[k][i] = eval(k, x.data());
    }
    return out;
  }

 private:
  void enumerate(int axis, int left, MultiIndex& cur) {
    if (axis == n - 1) {
      cur[static_cast<std::size_t>(axis)] = left;
      exps.push_back(cur);
      return;
    }
    for (int e = left; e >= 0; --e) {
      cur[static_cast<std::size_t>(axis)] = e;
      enumerate(axis + 1, left - e, cur);
    }
  }
};

struct FieldFit {
  PolyBasis basis;
  RVec coef;
  double sv_ratio = 0;
  double residual = 0;

  double operator()(const double* x) const {
    double s = 0;
    for (std::size_t k = 0; k < coef.size(); ++k) s += coef[k] * basis.eval(k, x);
    return s;
  }
  double operator()(const RVec& x) const { return (*this)(x.data()); }
};

struct FitOptions {
  int degree = 2;
  int modes = 0;        // Calderon frequencies k = k0 nu with |nu_i| <= modes; 0: enough for the basis
  double k0 = 0;        // 0: pi / (4a)
  bool linear_probes = true;
  double min_sv_ratio = 1e-10;
};

/// Pairs e^{(eta + ik).x}, e^{(-eta + ik).x} with eta perpendicular to k and |eta| = |k|; their gradient product is
/// -2|k|^2 e^{2ik.x}. One pair per frequency up to sign.
inline std::vector<std::pair<CVec, CVec>> calderon_pairs(int n, int modes, double k0) {
  std::vector<std::pair<CVec, CVec>> out;
  std::vector<int> nu(static_cast<std::size_t>(n), -modes);
  while (true) {
    int first = 0;
    for (int v : nu)
      if (v != 0) {
        first = v;
        break;
      }
    if (first > 0) {
      RVec k(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) k[static_cast<std::size_t>(i)] = k0 * nu[static_cast<std::size_t>(i)];
      double kk = std::sqrt(rdot(k, k));
      int j = 0;
      for (int i = 1; i < n; ++i)
        if (std::abs(k[static_cast<std::size_t>(i)]) < std::abs(k[static_cast<std::size_t>(j)])) j = i;
      RVec eta = basis_vector(n, j);
      double c = k[static_cast<std::size_t>(j)] / (kk * kk);
      for (int i = 0; i < n; ++i) eta[static_cast<std::size_t>(i)] -= c * k[static_cast<std::size_t>(i)];
      double ne = std::sqrt(rdot(eta, eta));
      for (auto& e : eta) e *= kk / ne;
      CVec z1(static_cast<std::size_t>(n)), z2(static_cast<std::size_t>(n));
      for (std::size_t i = 0; i < z1.size(); ++i) {
        z1[i] = cplx(eta[i], k[i]);
        z2[i] = cplx(-eta[i], k[i]);
      }
      out.emplace_back(z1, z2);
    }
    int pos = n - 1;
    while (pos >= 0 && nu[static_cast<std::size_t>(pos)] == modes) nu[static_cast<std::size_t>(pos--)] = -modes;
    if (pos < 0) break;
    ++nu[static_cast<std::size_t>(pos)];
  }
  return out;
}

namespace detail {

/// Real least squares for complex data rows (real and imaginary parts stacked, rows normalized).
inline RVec solve_real_ls(const std::vector<CVec>& rows, const CVec& rhs, double min_ratio, double* sv_ratio,
                          double* residual) {
  if (rows.empty()) fail(ErrorKind::RankDeficient, "no data");
  const auto nu = static_cast<Eigen::Index>(rows[0].size());
  // Rows that are numerically zero carry only noise once normalized; drop them.
  RVec norms(rows.size(), 0.0);
  double top = 0;
  for (std::size_t s = 0; s < rows.size(); ++s) {
    for (const auto& c : rows[s]) norms[s] += std::norm(c);
    norms[s] = std::sqrt(norms[s]);
    top = std::max(top, norms[s]);
  }
  std::vector<std::size_t> keep;
  for (std::size_t s = 0; s < rows.size(); ++s)
    if (norms[s] > 1e-6 * top) keep.push_back(s);
  Eigen::MatrixXd A(2 * static_cast<Eigen::Index>(keep.size()), nu);
  Eigen::VectorXd b(A.rows());
  for (std::size_t q = 0; q < keep.size(); ++q) {
    const std::size_t s = keep[q];
    const double nr = 1 / norms[s];
    auto r = static_cast<Eigen::Index>(2 * q);
    for (Eigen::Index k = 0; k < nu; ++k) {
      A(r, k) = rows[s][static_cast<std::size_t>(k)].real() * nr;
      A(r + 1, k) = rows[s][static_cast<std::size_t>(k)].imag() * nr;
    }
    b(r) = rhs[s].real() * nr;
    b(r + 1) = rhs[s].imag() * nr;
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  double ratio = sv.size() && sv(0) > 0 ? sv(sv.size() - 1) / sv(0) : 0.0;
  if (sv_ratio) *sv_ratio = ratio;
  if (sv.size() < nu || ratio < min_ratio) {
    std::vector<std::vector<double>> nulls;
    for (Eigen::Index k = 0; k < sv.size(); ++k)
      if (sv(k) < min_ratio * sv(0)) {
        Eigen::VectorXd v = svd.matrixV().col(k);
        nulls.emplace_back(v.data(), v.data() + v.size());
      }
    throw RankDeficientError(nulls.size() + static_cast<std::size_t>(nu - sv.size()), nulls);
  }
  Eigen::VectorXd x = svd.solve(b);
  if (residual) *residual = b.norm() > 0 ? (A * x - b).norm() / b.norm() : 0.0;
  return RVec(x.data(), x.data() + x.size());
}

inline cplx weighted_sum(const BoxGrid& g, const RVec& basis, const CVec& f) {
  cplx s = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) s += g.node_weight(i) * basis[i] * f[i];
  return s;
}

inline std::vector<std::pair<ExpField, ExpField>> fit_probes(const BoxGrid& g, const FitOptions& opt, int modes) {
  std::vector<std::pair<ExpField, ExpField>> out;
  double k0 = opt.k0 > 0 ? opt.k0 : std::numbers::pi / (4 * g.a);
  for (const auto& [z1, z2] : calderon_pairs(g.n, modes, k0)) out.emplace_back(exp_probe(g, z1), exp_probe(g, z2));
  if (opt.linear_probes)
    for (int i = 0; i < g.n; ++i)
      for (int j = i; j < g.n; ++j)
        out.emplace_back(linear_probe(g, basis_vector(g.n, i)), linear_probe(g, basis_vector(g.n, j)));
  return out;
}

}  // namespace detail

/// T^0 of a rank-0 identity I = int T^0 grad u1 . grad u2, fitted on a polynomial basis.
inline FieldFit fit_scalar(Oracle& O, const FitOptions& opt = {}) {
  if (O.rank() != 0) fail(ErrorKind::RankMismatch, "scalar fit needs a rank-0 identity");
  const BoxGrid& g = O.grid();
  FieldFit fit;
  fit.basis = PolyBasis(g.n, opt.degree, g.a);
  auto B = fit.basis.sample(g);
  std::vector<CVec> rows;
  CVec rhs;
  int modes = opt.modes;
  if (modes <= 0)
    for (modes = 1; (static_cast<std::size_t>(std::pow(2 * modes + 1, g.n)) - 1) / 2 < 2 * fit.basis.size(); ++modes) {
    }
  for (const auto& [a, b] : detail::fit_probes(g, opt, modes)) {
    auto fa = detail::dense(O.field(a)), fb = detail::dense(O.field(b));
    CVec prod(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i)
      for (int k = 0; k < g.n; ++k) prod[i] += fa.g[static_cast<std::size_t>(k)][i] * fb.g[static_cast<std::size_t>(k)][i];
    CVec row(fit.basis.size());
    for (std::size_t k = 0; k < row.size(); ++k) row[k] = detail::weighted_sum(g, B[k], prod);
    rows.push_back(std::move(row));
    rhs.push_back(O.value({a, b}));
  }
  fit.coef = detail::solve_real_ls(rows, rhs, opt.min_sv_ratio, &fit.sv_ratio, &fit.residual);
  return fit;
}

/// T^1..T^n of a rank-1 identity with known T^0 = S, by polarization of oracle calls:
///   P(u, u3)      = I(u, u, u3)/2 - int S u grad u . grad u3          = int (T.grad u)(grad u . grad u3)
///   A(w, v, v)    = P(v+w, v) - P(v, v) - P(v, w) - P(w, v)             = int (T.grad w) |grad v|^2
///   A(w, v1, v2)  = [A(w, v1+v2, v1+v2) - A(w, v1, v1) - A(w, v2, v2)]/2
class PolarizationChain {
 public:
  PolarizationChain(Oracle& O, const FieldFit& S) : O_(O), g_(O.grid()), S_(g_.size()) {
    if (O.rank() != 1) fail(ErrorKind::RankMismatch, "polarization chain needs a rank-1 identity");
    std::vector<double> x(static_cast<std::size_t>(g_.n));
    for (std::size_t i = 0; i < g_.size(); ++i) {
      g_.coords(i, x.data());
      S_[i] = S(x.data());
    }
  }

  cplx P(const ExpField& u, const ExpField& u3) {
    std::uint64_t hu = probe_hash(u), h3 = probe_hash(u3);
    std::uint64_t key = fnv1a(&h3, sizeof h3, hu);
    auto it = P_.find(key);
    if (it != P_.end()) return it->second;
    const detail::Dense& fu = dense(u);
    const detail::Dense& f3 = dense(u3);
    CVec corr(g_.size(), 0.0);
    for (std::size_t i = 0; i < g_.size(); ++i) {
      cplx gg = 0.0;
      for (int k = 0; k < g_.n; ++k) gg += fu.g[static_cast<std::size_t>(k)][i] * f3.g[static_cast<std::size_t>(k)][i];
      corr[i] = S_[i] * fu.u[i] * gg;
    }
    cplx v = 0.5 * O_.value({u, u, u3}) - detail::weighted_sum(g_, RVec(g_.size(), 1.0), corr);
    return P_[key] = v;
  }

  cplx A(const ExpField& w, const ExpField& v) {
    return P(add_fields(v, w), v) - P(v, v) - P(v, w) - P(w, v);
  }

  cplx A(const ExpField& w, const ExpField& v1, const ExpField& v2) {
    return 0.5 * (A(w, add_fields(v1, v2)) - A(w, v1) - A(w, v2));
  }

  const detail::Dense& dense(const ExpField& probe) {
    std::uint64_t h = probe_hash(probe);
    auto it = fields_.find(h);
    if (it != fields_.end()) return it->second;
    return fields_[h] = detail::dense(O_.field(probe));
  }

 private:
  Oracle& O_;
  BoxGrid g_;
  RVec S_;
  std::unordered_map<std::uint64_t, cplx> P_;
  std::unordered_map<std::uint64_t, detail::Dense> fields_;
};

/// Harmonic polynomials of degree 1 and 2: x_i, x_i x_j (i < j), x_i^2 - x_{i+1}^2, with exact gradients.
inline std::vector<ExpField> harmonic_probes(const BoxGrid& g) {
  const int n = g.n;
  std::vector<ExpField> out;
  auto make = [&](const std::function<void(const double*, cplx&, CVec&)>& f, const std::string& tag) {
    ExpField e;
    e.w.assign(static_cast<std::size_t>(n), 0.0);
    e.phi = ScalarField(g);
    e.grad_phi = VectorField(g);
    e.frame = tag;
    std::vector<double> x(static_cast<std::size_t>(n));
    CVec gr(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < g.size(); ++i) {
      g.coords(i, x.data());
      std::fill(gr.begin(), gr.end(), 0.0);
      f(x.data(), e.phi[i], gr);
      for (int k = 0; k < n; ++k) e.grad_phi.comp[static_cast<std::size_t>(k)][i] = gr[static_cast<std::size_t>(k)];
    }
    out.push_back(std::move(e));
  };
  for (int i = 0; i < n; ++i) out.push_back(linear_probe(g, basis_vector(n, i)));
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      make([i, j](const double* x, cplx& v, CVec& gr) {
        v = x[i] * x[j];
        gr[static_cast<std::size_t>(i)] = x[j];
        gr[static_cast<std::size_t>(j)] = x[i];
      }, "xx");
  for (int i = 0; i + 1 < n; ++i)
    make([i](const double* x, cplx& v, CVec& gr) {
      v = x[i] * x[i] - x[i + 1] * x[i + 1];
      gr[static_cast<std::size_t>(i)] = 2 * x[i];
      gr[static_cast<std::size_t>(i + 1)] = -2 * x[i + 1];
    }, "x2");
  return out;
}

/// T^1..T^n of a rank-1 identity given T^0; w, v1, v2 run over harmonic polynomials of degree <= 2.
inline std::vector<FieldFit> fit_vector(Oracle& O, const FieldFit& S, const FitOptions& opt = {}) {
  PolarizationChain chain(O, S);
  const BoxGrid& g = O.grid();
  const int n = g.n;
  PolyBasis basis(n, opt.degree, g.a);
  auto B = basis.sample(g);
  const std::size_t nb = basis.size();
  std::vector<ExpField> ws = harmonic_probes(g);
  std::vector<std::pair<ExpField, ExpField>> vs;
  for (std::size_t a = 0; a < ws.size(); ++a)
    for (std::size_t b = a; b < ws.size(); ++b) vs.emplace_back(ws[a], ws[b]);
  std::vector<CVec> rows;
  CVec rhs;
  for (const auto& w : ws) {
    const auto& fw = chain.dense(w);
    for (const auto& [v1, v2] : vs) {
      const auto& f1 = chain.dense(v1);
      const auto& f2 = chain.dense(v2);
      CVec gg(g.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i)
        for (int k = 0; k < n; ++k) gg[i] += f1.g[static_cast<std::size_t>(k)][i] * f2.g[static_cast<std::size_t>(k)][i];
      CVec row(nb * static_cast<std::size_t>(n));
      CVec prod(g.size());
      for (int j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < g.size(); ++i) prod[i] = fw.g[static_cast<std::size_t>(j)][i] * gg[i];
        for (std::size_t k = 0; k < nb; ++k) row[static_cast<std::size_t>(j) * nb + k] = detail::weighted_sum(g, B[k], prod);
      }
      rows.push_back(std::move(row));
      rhs.push_back(chain.A(w, v1, v2));
    }
  }
  double ratio = 0, resid = 0;
  RVec coef = detail::solve_real_ls(rows, rhs, opt.min_sv_ratio, &ratio, &resid);
  std::vector<FieldFit> out;
  for (int j = 0; j < n; ++j) {
    FieldFit f;
    f.basis = basis;
    f.coef.assign(coef.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(j) * nb),
                  coef.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(j + 1) * nb));
    f.sv_ratio = ratio;
    f.residual = resid;
    out.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ray functionals

/// Leading-order coefficients of the stage-k pattern of a rank-m identity:
///   I = lambda^{k+3} [c (zeta.zeta~) T(zeta^k, zeta~, grad u^{m-k-1}) + d (grad u.zeta~) T(zeta^{k+1}, zeta~, grad u^{m-k-2})] + ...
/// counted over all orderings of the m+1 labels.
struct LeadingConstants {
  double c = 0, d = 0;
};

inline LeadingConstants leading_constants(int m, int k) {
  if (m < 1 || k < 1 || k > m - 1) fail(ErrorKind::ConfigInvalid, "stage k must lie in [1, m-1]");
  // Label kinds: 0 = zeta (coefficient 1 or -k), 1 = zeta~, 2 = auxiliary; the test label is -zeta~.
  std::vector<int> kind, perm;
  std::vector<double> coef;
  for (int l = 0; l < k; ++l) kind.push_back(0), coef.push_back(1.0);
  kind.push_back(0), coef.push_back(-k);
  kind.push_back(1), coef.push_back(1.0);
  for (int l = k + 2; l <= m; ++l) kind.push_back(2), coef.push_back(1.0);
  perm.resize(kind.size());
  std::iota(perm.begin(), perm.end(), 0);
  LeadingConstants out;
  do {
    int l = perm.back();
    double t = 1;
    for (std::size_t s = 0; s + 1 < perm.size(); ++s) t *= coef[static_cast<std::size_t>(perm[s])];
    if (kind[static_cast<std::size_t>(l)] == 0) out.c += -coef[static_cast<std::size_t>(l)] * t;
    else if (kind[static_cast<std::size_t>(l)] == 2) out.d += -t;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return out;
}

inline LeadingConstants leading_constants_closed(int m, int k) {
  return {factorial(m) * k * (k + 1), factorial(m) * k * (m - k - 1)};
}

/// Radius (in units of delta) of the tube around the ray that contains the support of a * a~.
inline double support_constant(const AdmissiblePair& pair) {
  const int n = static_cast<int>(pair.zeta.size());
  RVec xi = real_part(pair.zeta);
  double nx = std::sqrt(rdot(xi, xi));
  for (auto& v : xi) v /= nx;
  std::vector<RVec> perp;
  for (int i = 0; i < n && static_cast<int>(perp.size()) < n - 1; ++i) {
    RVec v = basis_vector(n, i);
    double c = rdot(v, xi);
    for (int j = 0; j < n; ++j) v[static_cast<std::size_t>(j)] -= c * xi[static_cast<std::size_t>(j)];
    for (const auto& b : perp) {
      double cb = rdot(v, b);
      for (int j = 0; j < n; ++j) v[static_cast<std::size_t>(j)] -= cb * b[static_cast<std::size_t>(j)];
    }
    double nv = std::sqrt(rdot(v, v));
    if (nv < 1e-8) continue;
    for (auto& x : v) x /= nv;
    perp.push_back(v);
  }
  std::vector<RVec> rows;
  for (const auto* z : {&pair.zeta, &pair.zeta_tilde})
    for (const auto& om : cutoff_frame(*z)) {
      RVec r;
      for (const auto& b : perp) r.push_back(rdot(om, b));
      rows.push_back(r);
    }
  // Vertices of {|rows y| <= 1}: n-1 active constraints.
  const int D = n - 1;
  const int R = static_cast<int>(rows.size());
  double best = -1;
  std::vector<int> pick(static_cast<std::size_t>(D));
  std::function<void(int, int)> rec = [&](int start, int depth) {
    if (depth == D) {
      Eigen::MatrixXd A(D, D);
      for (int a = 0; a < D; ++a)
        for (int b = 0; b < D; ++b) A(a, b) = rows[static_cast<std::size_t>(pick[static_cast<std::size_t>(a)])][static_cast<std::size_t>(b)];
      Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
      if (lu.rank() < D) return;
      for (unsigned s = 0; s < (1u << D); ++s) {
        Eigen::VectorXd rhs(D);
        for (int a = 0; a < D; ++a) rhs(a) = (s >> a) & 1 ? 1.0 : -1.0;
        Eigen::VectorXd y = lu.solve(rhs);
        bool ok = true;
        for (const auto& r : rows) {
          double v = 0;
          for (int b = 0; b < D; ++b) v += r[static_cast<std::size_t>(b)] * y(b);
          if (std::abs(v) > 1 + 1e-9) ok = false;
        }
        if (ok) best = std::max(best, y.norm());
      }
      return;
    }
    for (int i = start; i < R; ++i) {
      pick[static_cast<std::size_t>(depth)] = i;
      rec(i + 1, depth + 1);
    }
  };
  rec(0, 0);
  if (best < 0) fail(ErrorKind::DegenerateZeta, "cutoff planes of the pair do not bound a tube around the ray");
  return best;
}

/// Chord of the ray p + t xi (xi = Re zeta normalized) inside the box [-a, a]^n.
inline std::pair<double, double> ray_chord(const RVec& p, const RVec& xi, double a) {
  double lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (std::abs(xi[i]) < 1e-14) continue;
    double t1 = (-a - p[i]) / xi[i], t2 = (a - p[i]) / xi[i];
    lo = std::max(lo, std::min(t1, t2));
    hi = std::min(hi, std::max(t1, t2));
  }
  return {lo, hi};
}

struct RaySample {
  RVec p;
  RVec dir;                 // Re zeta
  CVec zeta, zeta_tilde;
  int m = 2;                // rank of the probed tensor
  int k = 1;                // stage
  RVec sigma_grid;
  CVec J;
  int freq_mult = 4;
  double delta = 0.1, lambda = 24;
  double t_lo = -1, t_hi = 1;  // ray chord inside Omega
  std::vector<double> lambdas;  // sweep used for extrapolation
  std::vector<CVec> J_lambda;

  void validate() const {
    const std::size_t ns = sigma_grid.size();
    if (ns < 2) fail(ErrorKind::ConfigInvalid, "sigma grid needs at least two points");
    for (std::size_t i = 0; i < ns; ++i) {
      if (std::abs(sigma_grid[i] + sigma_grid[ns - 1 - i]) > 1e-12 * (1 + std::abs(sigma_grid[i])))
        fail(ErrorKind::ConfigInvalid, "sigma grid must be symmetric about 0");
      if (std::abs(sigma_grid[i]) * delta > 0.5 + 1e-12) fail(ErrorKind::ConfigInvalid, "|sigma| delta exceeds 0.5");
      if (i > 0 && !(sigma_grid[i] > sigma_grid[i - 1])) fail(ErrorKind::ConfigInvalid, "sigma grid must increase");
    }
    if (!J.empty() && J.size() != ns) fail(ErrorKind::ConfigInvalid, "J and sigma grid differ in length");
  }
  double t_extent() const {
    return std::max(std::abs(t_lo), std::abs(t_hi)) + support_constant({zeta, zeta_tilde}) * delta;
  }
};

/// Symmetric sigma grid with |sigma| delta <= 0.5, fine enough for the chord at multiplier k+3.
inline RVec auto_sigma_grid(int k, double delta, double t_extent) {
  if (!(delta > 0)) fail(ErrorKind::ConfigInvalid, "delta must be positive");
  const double smax = 0.5 / delta;
  const double ds = 2 * std::numbers::pi / ((k + 3) * 2 * t_extent);
  const int half = static_cast<int>(std::ceil(smax / ds - 1e-12));
  RVec s;
  for (int i = -half; i <= half; ++i) s.push_back(smax * i / half);
  return s;
}

inline RaySample make_ray_sample(const RVec& p, const AdmissiblePair& pair, int m, int k, double delta, double lambda,
                                 double a, RVec sigma_grid = {}) {
  RaySample s;
  s.p = p;
  s.zeta = pair.zeta;
  s.zeta_tilde = pair.zeta_tilde;
  s.dir = real_part(pair.zeta);
  s.m = m;
  s.k = k;
  s.freq_mult = k + 3;
  s.delta = delta;
  s.lambda = lambda;
  auto [lo, hi] = ray_chord(p, s.dir, a);
  s.t_lo = lo;
  s.t_hi = hi;
  s.sigma_grid = sigma_grid.empty() ? auto_sigma_grid(k, delta, s.t_extent()) : std::move(sigma_grid);
  s.validate();
  return s;
}

/// Points must keep their probe tubes inside Omega.
inline void check_support(const RVec& p, double delta, double a) {
  const double margin = (std::sqrt(static_cast<double>(p.size())) + 1) * delta;
  for (double v : p)
    if (a - std::abs(v) < margin)
      fail(ErrorKind::SupportEscapesOmega, "point closer than (sqrt(n)+1) delta to the boundary of Omega");
}

namespace detail {

/// Orthonormal basis of the hyperplane perpendicular to xi.
inline std::vector<RVec> perp_basis(const RVec& xi) {
  const int n = static_cast<int>(xi.size());
  std::vector<RVec> out;
  RVec x = xi;
  double nx = std::sqrt(rdot(x, x));
  for (auto& v : x) v /= nx;
  std::vector<RVec> all{x};
  for (int i = 0; i < n && static_cast<int>(all.size()) < n; ++i) {
    RVec v = basis_vector(n, i);
    for (const auto& b : all) {
      double c = rdot(v, b);
      for (int j = 0; j < n; ++j) v[static_cast<std::size_t>(j)] -= c * b[static_cast<std::size_t>(j)];
    }
    double nv = std::sqrt(rdot(v, v));
    if (nv < 1e-8) continue;
    for (auto& e : v) e /= nv;
    all.push_back(v);
  }
  return std::vector<RVec>(all.begin() + 1, all.end());
}

/// Transverse quadrature nodes of the tube: offsets y, weights, and the sigma-free cutoff product.
struct TubeQuadrature {
  std::vector<RVec> y;
  RVec weight;
  RVec cut;
  RVec decay;  // ((k+1) eta + 2 mu).y
};

inline TubeQuadrature tube_quadrature(const CVec& zeta, const CVec& zeta_tilde, int k, double delta, int Q) {
  const int n = static_cast<int>(zeta.size());
  auto B = perp_basis(real_part(zeta));
  const double R = support_constant({zeta, zeta_tilde}) * delta * 1.001;
  auto om = cutoff_frame(zeta), omt = cutoff_frame(zeta_tilde);
  RVec eta = imag_part(zeta), mu = imag_part(zeta_tilde);
  RVec v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = (k + 1) * eta[static_cast<std::size_t>(i)] + 2 * mu[static_cast<std::size_t>(i)];
  const int D = n - 1;
  const double h = 2 * R / (Q - 1);
  TubeQuadrature tq;
  std::vector<int> idx(static_cast<std::size_t>(D), 0);
  RVec y(static_cast<std::size_t>(n));
  while (true) {
    std::fill(y.begin(), y.end(), 0.0);
    double w = 1;
    for (int d = 0; d < D; ++d) {
      int i = idx[static_cast<std::size_t>(d)];
      double s = -R + h * i;
      w *= (i == 0 || i == Q - 1) ? 0.5 * h : h;
      for (int j = 0; j < n; ++j) y[static_cast<std::size_t>(j)] += s * B[static_cast<std::size_t>(d)][static_cast<std::size_t>(j)];
    }
    double c = 1;
    for (const auto& o : om) c *= std::pow(chi(rdot(o, y) / delta), k + 1);
    for (const auto& o : omt) c *= std::pow(chi(rdot(o, y) / delta), 2);
    if (c != 0) {
      tq.y.push_back(y);
      tq.weight.push_back(w);
      tq.cut.push_back(c);
      tq.decay.push_back(rdot(v, y));
    }
    int d = D - 1;
    while (d >= 0 && idx[static_cast<std::size_t>(d)] == Q - 1) idx[static_cast<std::size_t>(d--)] = 0;
    if (d < 0) break;
    ++idx[static_cast<std::size_t>(d)];
  }
  return tq;
}

inline int default_tube_points(int n) { return n <= 3 ? 121 : 41; }

}  // namespace detail

/// C(sigma): integral over the hyperplane perpendicular to the ray of the cutoff product times e^{-sigma ((k+1) eta + 2 mu).y}.
inline RVec transverse_normalization(const CVec& zeta, const CVec& zeta_tilde, int k, double delta, const RVec& sigma,
                                     int Q = 0) {
  auto tq = detail::tube_quadrature(zeta, zeta_tilde, k, delta, Q > 0 ? Q : detail::default_tube_points(static_cast<int>(zeta.size())));
  RVec C(sigma.size(), 0.0);
  for (std::size_t s = 0; s < sigma.size(); ++s)
    for (std::size_t i = 0; i < tq.y.size(); ++i) C[s] += tq.weight[i] * tq.cut[i] * std::exp(-sigma[s] * tq.decay[i]);
  return C;
}

/// Leading-order J(sigma) = int_Omega G(x) a^{k+1} a~^2 dx for a given integrand G (contraction times gamma0 power),
/// by separated quadrature along the ray and across the tube.
inline CVec ray_forward_model(const std::function<cplx(const double*)>& G, const RaySample& s, double a, int nt = 0,
                              int Q = 0) {
  const int n = static_cast<int>(s.p.size());
  auto tq = detail::tube_quadrature(s.zeta, s.zeta_tilde, s.k, s.delta,
                                    Q > 0 ? Q : detail::default_tube_points(n) / 2 + 1);
  if (nt <= 0) nt = std::max(201, static_cast<int>(std::ceil((s.t_hi - s.t_lo) / (s.delta / 10))) + 1);
  const double ht = (s.t_hi - s.t_lo) / (nt - 1);
  RVec xi = s.dir;
  double nx = std::sqrt(rdot(xi, xi));
  for (auto& v : xi) v /= nx;
  // Inner sums per t and sigma.
  std::vector<CVec> acc(s.sigma_grid.size(), CVec(static_cast<std::size_t>(nt), 0.0));
  RVec x(static_cast<std::size_t>(n));
  for (int it = 0; it < nt; ++it) {
    double t = s.t_lo + ht * it;
    double wt = (it == 0 || it == nt - 1) ? 0.5 * ht : ht;
    for (std::size_t q = 0; q < tq.y.size(); ++q) {
      bool inside = true;
      for (int j = 0; j < n; ++j) {
        x[static_cast<std::size_t>(j)] = s.p[static_cast<std::size_t>(j)] + t * xi[static_cast<std::size_t>(j)] + tq.y[q][static_cast<std::size_t>(j)];
        if (std::abs(x[static_cast<std::size_t>(j)]) > a * (1 + 1e-12)) inside = false;
      }
      if (!inside) continue;
      cplx gv = G(x.data()) * (wt * tq.weight[q] * tq.cut[q]);
      for (std::size_t si = 0; si < s.sigma_grid.size(); ++si)
        acc[si][static_cast<std::size_t>(it)] += gv * std::exp(-s.sigma_grid[si] * tq.decay[q]);
    }
  }
  CVec J(s.sigma_grid.size(), 0.0);
  for (std::size_t si = 0; si < s.sigma_grid.size(); ++si)
    for (int it = 0; it < nt; ++it) {
      double t = s.t_lo + ht * it;
      J[si] += acc[si][static_cast<std::size_t>(it)] * std::exp(cplx(0, s.freq_mult * s.sigma_grid[si] * t));
    }
  return J;
}

struct RayProfile {
  RVec t;
  CVec g;    // contraction profile (gamma0 power divided out)
  CVec raw;  // inverse transform before the gamma0 division
};

struct InvertOptions {
  bool taper = true;  // cosine-squared window in sigma
  int nt = 101;
};

/// Window weights of the discrete inverse transform.
inline RVec inversion_weights(const RVec& sigma, bool taper) {
  const std::size_t ns = sigma.size();
  const double smax = sigma.back();
  RVec w(ns);
  for (std::size_t j = 0; j < ns; ++j) {
    double lo = j > 0 ? sigma[j] - sigma[j - 1] : 0.0, hi = j + 1 < ns ? sigma[j + 1] - sigma[j] : 0.0;
    w[j] = 0.5 * (lo + hi);
    if (taper) {
      double c = std::cos(std::numbers::pi * sigma[j] / (2 * smax));
      w[j] *= c * c;
    }
  }
  return w;
}

/// Kernel the inversion convolves the ray profile with: K(t) = (k+3)/(2 pi) sum_j w_j e^{-i (k+3) sigma_j t}.
inline cplx inversion_kernel(const RaySample& s, double t, bool taper = true) {
  RVec w = inversion_weights(s.sigma_grid, taper);
  cplx out = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) out += w[j] * std::exp(cplx(0, -s.freq_mult * s.sigma_grid[j] * t));
  return out * (s.freq_mult / (2 * std::numbers::pi));
}

inline RayProfile ray_invert(const RaySample& s, const Expr& gamma0, const InvertOptions& opt = {}, RVec t = {}) {
  s.validate();
  if (s.J.size() != s.sigma_grid.size()) fail(ErrorKind::ConfigInvalid, "ray sample has no J values");
  const std::size_t ns = s.sigma_grid.size();
  double ds = 0;
  for (std::size_t j = 1; j < ns; ++j) ds = std::max(ds, s.sigma_grid[j] - s.sigma_grid[j - 1]);
  const double period = 2 * std::numbers::pi / (s.freq_mult * ds);
  if (period < 2 * s.t_extent())
    fail(ErrorKind::NyquistViolated, "sigma spacing too coarse: period " + std::to_string(period) + " < 2 x extent " +
                                         std::to_string(s.t_extent()));
  RVec C = transverse_normalization(s.zeta, s.zeta_tilde, s.k, s.delta, s.sigma_grid);
  RVec w = inversion_weights(s.sigma_grid, opt.taper);
  if (t.empty())
    for (int i = 0; i < opt.nt; ++i) t.push_back(s.t_lo + (s.t_hi - s.t_lo) * i / (opt.nt - 1));
  RayProfile out;
  out.t = t;
  RVec xi = s.dir;
  double nx = std::sqrt(rdot(xi, xi));
  for (auto& v : xi) v /= nx;
  const double power = 0.5 * (s.k + 3);
  RVec x(s.p.size());
  for (double tv : t) {
    cplx g = 0.0;
    for (std::size_t j = 0; j < ns; ++j) g += w[j] * s.J[j] / C[j] * std::exp(cplx(0, -s.freq_mult * s.sigma_grid[j] * tv));
    g *= s.freq_mult / (2 * std::numbers::pi);
    out.raw.push_back(g);
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = s.p[j] + tv * xi[j];
    out.g.push_back(g * std::pow(gamma0(x.data()), power));
  }
  return out;
}

/// Frequency of the amplitude product a^{k+1} a~^2 along the ray, read off the DFT peak over one period of sigma.
inline int empirical_multiplier(const AdmissiblePair& pair, int k, const RVec& p, double sigma, double delta,
                                int samples = 64) {
  Amplitude a(pair.zeta, p, sigma, delta), at(pair.zeta_tilde, p, sigma, delta);
  RVec xi = real_part(pair.zeta);
  double nx = std::sqrt(rdot(xi, xi));
  for (auto& v : xi) v /= nx;
  const double L = 2 * std::numbers::pi / sigma;
  CVec f(static_cast<std::size_t>(samples));
  RVec x(p.size());
  for (int i = 0; i < samples; ++i) {
    double t = L * i / samples;
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = p[j] + t * xi[j];
    f[static_cast<std::size_t>(i)] = std::pow(a(x.data()), k + 1) * std::pow(at(x.data()), 2);
  }
  int best = 0;
  double mag = -1;
  for (int q = 0; q < samples; ++q) {
    cplx c = 0.0;
    for (int i = 0; i < samples; ++i)
      c += f[static_cast<std::size_t>(i)] * std::exp(cplx(0, -2 * std::numbers::pi * q * i / samples));
    if (std::abs(c) > mag) {
      mag = std::abs(c);
      best = q <= samples / 2 ? q : q - samples;
    }
  }
  return best;
}

/// Largest distance (in units of delta) from the ray among nodes where a^{k+1} a~^2 is nonzero.
inline double support_spread(const AdmissiblePair& pair, const RVec& p, double delta, const BoxGrid& g) {
  Amplitude a(pair.zeta, p, 0.0, delta), at(pair.zeta_tilde, p, 0.0, delta);
  RVec xi = real_part(pair.zeta);
  double nx = std::sqrt(rdot(xi, xi));
  for (auto& v : xi) v /= nx;
  double worst = 0;
  std::vector<double> x(static_cast<std::size_t>(g.n));
  for (std::size_t i = 0; i < g.size(); ++i) {
    g.coords(i, x.data());
    if (std::abs(a(x.data()) * at(x.data())) == 0.0) continue;
    RVec y(x.size());
    for (std::size_t j = 0; j < y.size(); ++j) y[j] = x[j] - p[j];
    double t = rdot(y, xi);
    double d2 = 0;
    for (std::size_t j = 0; j < y.size(); ++j) d2 += std::pow(y[j] - t * xi[j], 2);
    worst = std::max(worst, std::sqrt(d2) / delta);
  }
  return worst;
}

/// CGO probes from a solver, optionally without the remainder.
class CgoSource {
 public:
  CgoSource(CgoSolver& solver, bool remainder = true) : s_(solver), remainder_(remainder) {}
  ExpField operator()(const CgoProbe& pr) {
    ++count_;
    if (!remainder_) return s_.ansatz(pr);
    return s_.solve(pr).U;
  }
  const BoxGrid& grid() const { return s_.grid(); }
  const Expr& gamma0() const { return s_.gamma0(); }
  std::size_t count() const { return count_; }

 private:
  CgoSolver& s_;
  bool remainder_;
  std::size_t count_ = 0;
};

/// J(sigma) for the stage-k pattern of a rank-m identity at one lambda:
///   u_1..u_k = U_{lambda zeta}, u_{k+1} = U_{-k lambda zeta}, u_{k+2} = U_{lambda zeta~}, aux..., u_{m+2} = U_{-lambda zeta~},
/// normalized by lambda^{k+3} c_{m,k} (zeta.zeta~).
inline CVec ray_values(Oracle& O, CgoSource& src, const RaySample& s, double lambda, const ExpField* aux) {
  const int m = s.m, k = s.k;
  if (O.rank() != m) fail(ErrorKind::RankMismatch, "oracle rank differs from the ray pattern");
  if (m - k - 1 > 0 && !aux) fail(ErrorKind::StageInconsistent, "stage needs an auxiliary solution");
  auto lc = leading_constants(m, k);
  const cplx zz = dot(s.zeta, s.zeta_tilde);
  CVec J;
  for (double sigma : s.sigma_grid) {
    CgoProbe base{s.zeta, lambda, s.p, sigma, s.delta, 1.0};
    CgoProbe tilde{s.zeta_tilde, lambda, s.p, sigma, s.delta, 1.0};
    ExpField U = src(base);
    base.scale = -k;
    ExpField Um = src(base);
    ExpField Ut = src(tilde);
    tilde.scale = -1.0;
    ExpField Utm = src(tilde);
    std::vector<ExpField> sols(static_cast<std::size_t>(k), U);
    sols.push_back(Um);
    sols.push_back(Ut);
    for (int i = k + 2; i <= m; ++i) sols.push_back(*aux);
    sols.push_back(Utm);
    J.push_back(O.value(sols) / (std::pow(lambda, k + 3) * lc.c * zz));
  }
  return J;
}

/// Polynomial extrapolation in 1/lambda to lambda = infinity through all sweep values.
inline cplx extrapolate_inverse_lambda(const std::vector<double>& lambdas, const CVec& vals) {
  if (lambdas.size() != vals.size() || lambdas.empty()) fail(ErrorKind::ConfigInvalid, "sweep and values differ in length");
  cplx out = 0.0;
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    double L = 1;
    for (std::size_t j = 0; j < lambdas.size(); ++j)
      if (j != i) L *= (0 - 1 / lambdas[j]) / (1 / lambdas[i] - 1 / lambdas[j]);
    out += L * vals[i];
  }
  return out;
}

inline RaySample ray_functional(Oracle& O, CgoSource& src, RaySample s, const std::vector<double>& lambdas,
                                const ExpField* aux = nullptr) {
  s.validate();
  check_support(s.p, s.delta, src.grid().a);
  if (lambdas.empty()) fail(ErrorKind::ConfigInvalid, "lambda sweep is empty");
  s.lambdas = lambdas;
  s.J_lambda.clear();
  for (double L : lambdas) s.J_lambda.push_back(ray_values(O, src, s, L, aux));
  s.J.assign(s.sigma_grid.size(), 0.0);
  for (std::size_t j = 0; j < s.J.size(); ++j) {
    CVec v;
    for (const auto& Jl : s.J_lambda) v.push_back(Jl[j]);
    s.J[j] = extrapolate_inverse_lambda(lambdas, v);
  }
  s.lambda = lambdas.front();
  return s;
}

/// Default sweep {L, 1.5 L, 2 L}, capped so every probe of stage k stays below the exponent ceiling.
inline std::vector<double> default_lambda_sweep(double lambda, int k, int n) {
  double cap = lambda_ceiling(n) / std::max(1, k);
  std::vector<double> out;
  for (double f : {1.0, 1.5, 2.0}) out.push_back(std::min(lambda * f, cap * (1 - 1e-9)));
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Induction and assembly

struct RecoveryPlan {
  int m = 1;                           // rank of the recovered tensor
  std::vector<RVec> points;
  std::vector<AdmissiblePair> pairs;   // empty: standard pairs
  double lambda = 24;
  std::vector<double> lambda_sweep;    // empty: default sweep; {lambda}: no extrapolation
  double delta = 0.1;
  RVec sigma_grid;                     // empty: automatic per stage
  std::vector<int> stages;             // empty: m-1 down to 1
  Expr gamma0 = Expr::constant(1.0);
  CgoOptions cgo;
  bool remainder = true;
  FitOptions fit;

  void validate(int n, double a) const {
    if (m < 1) fail(ErrorKind::ConfigInvalid, "recovered rank must be >= 1");
    if (points.empty()) fail(ErrorKind::ConfigInvalid, "recovery plan has no points");
    for (const auto& p : points)
      if (static_cast<int>(p.size()) != n) fail(ErrorKind::ConfigInvalid, "point dimension differs from the grid");
    if (!(delta > 0 && lambda > 0)) fail(ErrorKind::ConfigInvalid, "delta and lambda must be positive");
    if (m >= 2)
      for (const auto& p : points) check_support(p, delta, a);
  }
};

inline std::vector<int> stage_schedule(const RecoveryPlan& plan, int q) {
  std::vector<int> st = plan.stages;
  if (st.empty() || q != plan.m)
    for (int k = q - 1; k >= 1; --k) st.push_back(k);
  if (st.empty() || st.front() != q - 1)
    fail(ErrorKind::StageInconsistent, "induction must start at stage m-1 (the base pattern)");
  for (std::size_t i = 1; i < st.size(); ++i)
    if (st[i] != st[i - 1] - 1) fail(ErrorKind::StageInconsistent, "stages must decrease by one");
  if (st.back() < 1) fail(ErrorKind::StageInconsistent, "stage index below 1");
  return st;
}

struct StageRecord {
  RVec p;
  int pair = 0;
  int k = 0;
  int aux = -1;      // index into real_directions, -1 for the base stage
  cplx raw = 0.0;    // profile value at t = 0
  cplx eliminated = 0.0;
  cplx value = 0.0;  // contraction after removing term II
};

struct PointDatabase {
  RVec p;
  std::vector<ContractionSample> samples;
};

struct InductionResult {
  std::vector<PointDatabase> points;
  std::vector<StageRecord> stages;
  std::vector<RaySample> rays;
};

/// Contractions of the pure-mu part of a rank-q identity at each plan point, stage by stage.
inline InductionResult run_induction(Oracle& O, CgoSource& src, const RecoveryPlan& plan, bool keep_rays = false) {
  const int q = O.rank();
  const BoxGrid& g = O.grid();
  const int n = g.n;
  if (q < 2) fail(ErrorKind::RankMismatch, "ray induction needs rank >= 2");
  auto stages = stage_schedule(plan, q);
  auto pairs = plan.pairs.empty() ? standard_pairs(n) : plan.pairs;
  auto dirs = real_directions(n);
  std::vector<ExpField> aux;
  if (q >= 3)
    for (const auto& d : dirs) aux.push_back(linear_probe(g, d));
  InductionResult res;
  for (const auto& p : plan.points) {
    check_support(p, plan.delta, g.a);
    PointDatabase db{p, {}};
    std::vector<CVec> aux_grad;
    for (const auto& u : aux) aux_grad.push_back(gradient_at(O.field(u), p));
    for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
      const auto& pr = pairs[pi];
      const cplx zz = dot(pr.zeta, pr.zeta_tilde);
      // prev[a]: stage k+1 value with the same auxiliary direction (a = -1 for none).
      std::map<int, cplx> prev;
      for (int k : stages) {
        auto lambdas = plan.lambda_sweep.empty() ? default_lambda_sweep(plan.lambda, k, n) : plan.lambda_sweep;
        const bool base = k == q - 1;
        std::vector<int> auxes = base ? std::vector<int>{-1} : std::vector<int>{};
        if (!base)
          for (int a = 0; a < static_cast<int>(aux.size()); ++a) auxes.push_back(a);
        std::map<int, cplx> cur;
        for (int a : auxes) {
          RaySample s = make_ray_sample(p, pr, q, k, plan.delta, plan.lambda, g.a, plan.sigma_grid);
          s = ray_functional(O, src, s, lambdas, a >= 0 ? &aux[static_cast<std::size_t>(a)] : nullptr);
          RayProfile prof = ray_invert(s, src.gamma0(), {}, {0.0});
          StageRecord rec{p, static_cast<int>(pi), k, a, prof.g[0], 0.0, prof.g[0]};
          if (!base) {
            int key = k + 1 == q - 1 ? -1 : a;
            auto it = prev.find(key);
            if (it == prev.end()) fail(ErrorKind::StageInconsistent, "previous stage value missing");
            auto lc = leading_constants(q, k);
            const CVec& gu = aux_grad[static_cast<std::size_t>(a)];
            rec.eliminated = lc.d / (lc.c * zz) * dot(gu, pr.zeta_tilde) * it->second;
            rec.value = rec.raw - rec.eliminated;
          }
          cur[a] = rec.value;
          ContractionSample cs;
          for (int i = 0; i < k; ++i) cs.vecs.push_back(pr.zeta);
          cs.vecs.push_back(pr.zeta_tilde);
          for (int i = k + 1; i < q; ++i) cs.vecs.push_back(aux_grad[static_cast<std::size_t>(a)]);
          cs.value = rec.value;
          db.samples.push_back(std::move(cs));
          res.stages.push_back(rec);
          if (keep_rays) res.rays.push_back(std::move(s));
        }
        prev = std::move(cur);
      }
    }
    res.points.push_back(std::move(db));
  }
  return res;
}

struct RecoveryResult {
  SymTensorField tensors;                       // one rank-m tensor over d = n+1 per point
  std::vector<FieldFit> scalar;                 // T(e_0^m) fit
  std::vector<FieldFit> vector;                 // T(e_0^{m-1}, e_j) fits
  std::vector<InductionResult> induction;       // per reduction order j with rank m-j >= 2
};

/// Full rank-m tensor at the plan points: T(e_0^j, .) is recovered from the identity reduced by j constant solutions.
inline RecoveryResult recover_tensor(Oracle& O, const RecoveryPlan& plan) {
  const BoxGrid& g = O.grid();
  const int n = g.n, m = O.rank();
  if (m != plan.m) fail(ErrorKind::RankMismatch, "oracle rank differs from the plan");
  plan.validate(n, g.a);
  RecoveryResult res;
  ReducedOracle r0(O, m);
  res.scalar.push_back(fit_scalar(r0, plan.fit));
  ReducedOracle r1(O, m - 1);
  res.vector = fit_vector(r1, res.scalar[0], plan.fit);
  // Pure-mu blocks of rank q = m - j >= 2.
  std::map<int, std::vector<SymTensor>> blocks;
  if (m >= 2) {
    CgoSolver solver(plan.gamma0, g, plan.cgo);
    CgoSource src(solver, plan.remainder);
    for (int j = m - 2; j >= 0; --j) {
      const int q = m - j;
      ReducedOracle rj(O, j);
      auto ind = run_induction(rj, src, plan);
      for (const auto& db : ind.points) blocks[j].push_back(reconstruct_from_contractions(db.samples, n, q));
      res.induction.push_back(std::move(ind));
    }
  }
  res.tensors = SymTensorField{n + 1, m, "points", {}};
  for (std::size_t pi = 0; pi < plan.points.size(); ++pi) {
    const RVec& p = plan.points[pi];
    SymTensor T(n + 1, m);
    const auto& tab = T.table();
    for (std::size_t c = 0; c < tab.size(); ++c) {
      const MultiIndex& idx = tab.index(c);
      int zeros = static_cast<int>(std::count(idx.begin(), idx.end(), 0));
      MultiIndex mu;
      for (int v : idx)
        if (v > 0) mu.push_back(v - 1);
      double val = 0;
      if (zeros == m) val = res.scalar[0](p);
      else if (zeros == m - 1) val = res.vector[static_cast<std::size_t>(mu[0])](p);
      else val = blocks[zeros][pi](mu);
      T.coeffs()[c] = val;
    }
    res.tensors.values.push_back(std::move(T));
  }
  return res;
}

}  // namespace cgolab
