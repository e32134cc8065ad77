#pragma once

#include <bit>
#include <cmath>
#include <map>
#include <optional>
#include <vector>

#include "cgolab/conductivity.hpp"
#include "cgolab/forward.hpp"

namespace cgolab {

struct ProbeSet {
  std::vector<BoundaryFunction> fs;  // f_1..f_m
  BoundaryFunction f_test;           // f_{m+1}
  double eps_step = 0.05;
  double rho = 0.0;

  int m() const { return static_cast<int>(fs.size()); }

  void validate(const SolveConfig& cfg = {}) const {
    if (fs.empty()) fail(ErrorKind::ConfigInvalid, "probe set needs m >= 1 boundary functions");
    for (const auto& f : fs) check_same_grid(f.grid, f_test.grid);
    if (!(eps_step > 0)) fail(ErrorKind::ConfigInvalid, "eps_step must be positive");
    if (eps_step * m() > cfg.smallness_guard * (1 + 1e-12))
      fail(ErrorKind::SmallnessViolated, "eps_step * m exceeds the smallness guard");
  }
};

namespace detail {

/// All set partitions of the bit mask, blocks as masks; the block holding the lowest bit comes first.
inline void set_partitions(unsigned mask, std::vector<unsigned>& cur, std::vector<std::vector<unsigned>>& out) {
  if (mask == 0) {
    out.push_back(cur);
    return;
  }
  unsigned low = mask & (~mask + 1u);
  unsigned rest = mask ^ low;
  for (unsigned sub = rest;; sub = (sub - 1) & rest) {
    cur.push_back(low | sub);
    set_partitions(rest ^ sub, cur, out);
    cur.pop_back();
    if (sub == 0) break;
  }
}

inline std::vector<std::vector<unsigned>> set_partitions(unsigned mask) {
  std::vector<std::vector<unsigned>> out;
  std::vector<unsigned> cur;
  set_partitions(mask, cur, out);
  return out;
}

inline void check_truncation(int K, int m) {
  if (K > 0 && K < m - 1)
    fail(ErrorKind::TruncationTooLow,
         "model truncated at order " + std::to_string(K) + " cannot produce order-" + std::to_string(m) + " linearization");
}

}  // namespace detail

struct HierarchyResult {
  std::vector<ScalarField> v;      // first-order solutions
  ScalarField w;                   // d^m u / d eps_1..d eps_m at eps = 0
  ScalarField source;              // right-hand side of the equation for w
  BoundaryFunction flux;           // d^m of the one-sided DtN flux
  BoundaryFunction weak_flux;      // d^m of the weak-form DtN flux
  std::vector<ScalarField> mixed;  // d^S u for every subset mask S (mixed[0] = rho)
};

/// Exact eps-derivatives of the discrete quasilinear scheme around u = rho, reusing one factorized operator.
class HierarchySolver {
 public:
  HierarchySolver(const ConductivityModel& model, const BoxGrid& g, double rho = 0.0, double tol = 1e-12)
      : mn_(model, g), rho_(rho), K_(model.truncation()), solver_(g, rest_gamma(mn_, rho), tol) {}

  const BoxGrid& grid() const { return mn_.grid; }
  const ModelNodes& nodes() const { return mn_; }

  ScalarField first_order(const BoundaryFunction& f) { return solver_.solve(&f); }

  HierarchyResult solve(const std::vector<BoundaryFunction>& fs) {
    std::vector<ScalarField> v;
    for (const auto& f : fs) v.push_back(first_order(f));
    return solve_with(std::move(v));
  }

  /// Same as solve() with the first-order solutions supplied (their boundary traces are the data).
  HierarchyResult solve_with(std::vector<ScalarField> v) {
    const int m = static_cast<int>(v.size());
    if (m < 1 || m > 12) fail(ErrorKind::ConfigInvalid, "linearization order must be in [1, 12]");
    detail::check_truncation(K_, m);
    const BoxGrid& g = grid();
    const unsigned full = (1u << m) - 1u;
    std::vector<ScalarField> w(full + 1, ScalarField(g));
    std::vector<std::vector<CVec>> states(full + 1);
    std::vector<std::optional<CVec>> dgam(full + 1);
    w[0] = ScalarField(g, cplx(rho_));
    for (int l = 0; l < m; ++l) {
      check_same_grid(v[static_cast<std::size_t>(l)].grid, g);
      w[1u << l] = v[static_cast<std::size_t>(l)];
    }
    auto state = [&](unsigned S) -> const std::vector<CVec>& {
      if (states[S].empty()) states[S] = nodal_states(w[S]);
      return states[S];
    };
    const bool linear = mn_.taylor.empty();
    // d^A gamma at every node by Faa di Bruno over set partitions of A.
    auto gamma_derivative = [&](unsigned A) -> const CVec& {
      if (dgam[A]) return *dgam[A];
      CVec out(g.size(), 0.0);
      if (!linear) {
        auto parts = detail::set_partitions(A);
        for (const auto& part : parts)
          for (unsigned P : part) state(P);
        std::vector<CVec> dU;
        for (std::size_t i = 0; i < g.size(); ++i) {
          cplx s = 0.0;
          for (const auto& part : parts) {
            dU.clear();
            for (unsigned P : part) dU.push_back(states[P][i]);
            s += mn_.derivative_at_rest(i, rho_, dU);
          }
          out[i] = s;
        }
      }
      dgam[A] = std::move(out);
      return *dgam[A];
    };

    HierarchyResult res;
    for (int order = 2; order <= m; ++order)
      for (unsigned S = 1; S <= full; ++S) {
        if (std::popcount(S) != order) continue;
        CVec src(g.size(), 0.0);
        if (!linear)
          for (unsigned A = (S - 1) & S; A != 0; A = (A - 1) & S) {
            CVec t = stencil_apply(g, gamma_derivative(A), w[S ^ A].values);
            for (std::size_t i = 0; i < g.size(); ++i) src[i] -= t[i];
          }
        w[S] = solver_.solve(nullptr, &src);
        if (S == full) res.source = ScalarField(g, std::move(src));
      }

    res.flux = BoundaryFunction(g);
    res.weak_flux = BoundaryFunction(g);
    CVec g0(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) g0[i] = solver_.gamma()[i];
    for (unsigned A = 0;; A = (A - full) & full) {
      if (A != full) {
        const CVec& dg = A == 0 ? g0 : gamma_derivative(A);
        const CVec& wb = w[full ^ A].values;
        for (int fc = 0; fc < g.num_faces(); ++fc)
          for (std::size_t j = 0; j < g.face_size(); ++j)
            res.flux.at(fc, j) += dg[g.face_node(fc, j)] * normal_derivative(g, wb, fc, j);
        BoundaryFunction wf = weak_flux(g, dg, wb);
        for (std::size_t k = 0; k < wf.values.size(); ++k) res.weak_flux.values[k] += wf.values[k];
      }
      if (A == full) break;
    }
    if (m == 1) res.source = ScalarField(g);
    res.w = w[full];
    res.v = std::move(v);
    res.mixed = std::move(w);
    return res;
  }

 private:
  static RVec rest_gamma(const ModelNodes& mn, double rho) {
    RVec g0(mn.grid.size());
    for (std::size_t i = 0; i < g0.size(); ++i) {
      cplx c = mn.value(i, mn.rest(rho));
      if (c.imag() != 0.0) fail(ErrorKind::NonPositiveGamma, "rest conductivity must be real");
      g0[i] = c.real();
    }
    return g0;
  }

  ModelNodes mn_;
  double rho_;
  int K_;
  DirichletSolver solver_;
};

inline HierarchyResult solve_hierarchy(const ConductivityModel& model, const ProbeSet& probes, const SolveConfig& cfg = {}) {
  probes.validate(cfg);
  HierarchySolver hs(model, probes.f_test.grid, probes.rho, cfg.linear_tol);
  return hs.solve(probes.fs);
}

enum class FluxForm { OneSided, Weak };

namespace detail {

inline BoundaryFunction mixed_dtn_stencil(const ConductivityModel& model, const ProbeSet& probes, double h,
                                          const SolveConfig& cfg, FluxForm form) {
  const BoxGrid& g = probes.f_test.grid;
  const int m = probes.m();
  ModelNodes mn(model, g);
  BoundaryFunction acc(g);
  for (unsigned s = 0; s < (1u << m); ++s) {
    BoundaryFunction f(g);
    double sign = 1;
    for (int l = 0; l < m; ++l) {
      double sl = (s >> l) & 1u ? 1.0 : -1.0;
      sign *= sl;
      const auto& fl = probes.fs[static_cast<std::size_t>(l)].values;
      for (std::size_t k = 0; k < f.values.size(); ++k) f.values[k] += sl * h * fl[k];
    }
    auto u = solve_quasilinear(model, probes.rho, f, cfg);
    auto d = dtn(mn, u);
    const auto& fl = form == FluxForm::Weak ? d.weak : d.flux;
    for (std::size_t k = 0; k < acc.values.size(); ++k) acc.values[k] += sign * fl.values[k];
  }
  double scale = std::pow(2 * h, m);
  for (auto& x : acc.values) x /= scale;
  return acc;
}

}  // namespace detail

/// Central tensor-product stencil for d^m Lambda(sum eps_l f_l) at eps = 0; Richardson with h/2 when requested.
inline BoundaryFunction mixed_dtn_fd(const ConductivityModel& model, const ProbeSet& probes, const SolveConfig& cfg = {},
                                     bool richardson = false, FluxForm form = FluxForm::OneSided) {
  probes.validate(cfg);
  for (const auto& f : probes.fs)
    for (const auto& x : f.values)
      if (x.imag() != 0.0) fail(ErrorKind::ConfigInvalid, "finite-difference linearization needs real probes");
  BoundaryFunction a = detail::mixed_dtn_stencil(model, probes, probes.eps_step, cfg, form);
  if (!richardson) return a;
  BoundaryFunction b = detail::mixed_dtn_stencil(model, probes, probes.eps_step / 2, cfg, form);
  for (std::size_t k = 0; k < a.values.size(); ++k) a.values[k] = (4.0 * b.values[k] - a.values[k]) / 3.0;
  return a;
}

enum class PairingBackend { Hierarchy, Fd };

inline const char* backend_name(PairingBackend b) { return b == PairingBackend::Hierarchy ? "hierarchy" : "fd"; }

/// quad_boundary(d^m Lambda_1 - d^m Lambda_2, f_{m+1}) with the weak-form flux; model2 = nullptr means the
/// gamma0 reference of model1.
inline cplx dtn_pairing(const ConductivityModel& model1, const ConductivityModel* model2, const ProbeSet& probes,
                        PairingBackend backend = PairingBackend::Hierarchy, const SolveConfig& cfg = {},
                        bool richardson = false) {
  probes.validate(cfg);
  ConductivityModel ref(model1.n(), model1.gamma0());
  const ConductivityModel& m2 = model2 ? *model2 : ref;
  auto flux = [&](const ConductivityModel& m) {
    if (backend == PairingBackend::Fd) return mixed_dtn_fd(m, probes, cfg, richardson, FluxForm::Weak);
    return solve_hierarchy(m, probes, cfg).weak_flux;
  };
  BoundaryFunction a = flux(model1), b = flux(m2);
  for (std::size_t k = 0; k < a.values.size(); ++k) a.values[k] -= b.values[k];
  return quad_boundary(a, probes.f_test);
}

/// Tensor field gamma^(k)(x, 0) of a model on the grid nodes.
inline SymTensorField sample_taylor(const ConductivityModel& model, int order, const BoxGrid& g) {
  SymTensorField f{model.d(), order, g.id(), {}};
  f.values.reserve(g.size());
  std::vector<double> x(static_cast<std::size_t>(g.n));
  for (std::size_t i = 0; i < g.size(); ++i) {
    g.coords(i, x.data());
    f.values.push_back(model.tensor_at(order, x.data()));
  }
  return f;
}

inline SymTensorField operator-(const SymTensorField& a, const SymTensorField& b) {
  if (a.dim != b.dim || a.rank != b.rank || a.values.size() != b.values.size())
    fail(ErrorKind::GridMismatch, "tensor fields differ in shape");
  SymTensorField c = a;
  for (std::size_t i = 0; i < c.values.size(); ++i) c.values[i] = a.values[i] - b.values[i];
  return c;
}

/// Integrand sum over orderings of labels 1..r+1 of T[U_l1..U_lr] grad u_{l_{r+1}} . grad u_{r+2}, U = (u, grad u).
inline ScalarField identity_integrand(const SymTensorField& T, const std::vector<ScalarField>& sols) {
  const int r = T.rank;
  if (static_cast<int>(sols.size()) != r + 2) fail(ErrorKind::RankMismatch, "identity needs rank + 2 solutions");
  const BoxGrid& g = sols[0].grid;
  if (T.values.size() != g.size()) fail(ErrorKind::GridMismatch, "tensor field not sampled on the solution grid");
  std::vector<std::vector<CVec>> U;
  for (const auto& s : sols) {
    check_same_grid(s.grid, g);
    U.push_back(nodal_states(s));
  }
  const double orderings = factorial(r);
  ScalarField out(g);
  std::vector<CVec> vecs;
  for (std::size_t i = 0; i < g.size(); ++i) {
    cplx s = 0.0;
    const CVec& last = U[static_cast<std::size_t>(r + 1)][i];
    for (int l = 0; l <= r; ++l) {
      vecs.clear();
      for (int j = 0; j <= r; ++j)
        if (j != l) vecs.push_back(U[static_cast<std::size_t>(j)][i]);
      const CVec& ul = U[static_cast<std::size_t>(l)][i];
      cplx gg = 0.0;
      for (int k = 1; k <= g.n; ++k) gg += ul[static_cast<std::size_t>(k)] * last[static_cast<std::size_t>(k)];
      s += contract(T.values[i], vecs) * gg;
    }
    out[i] = orderings * s;
  }
  return out;
}

inline cplx identity_eval_interior(const SymTensorField& T, const std::vector<ScalarField>& sols) {
  return quad_omega(identity_integrand(T, sols));
}

}  // namespace cgolab
