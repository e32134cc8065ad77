#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <json.hpp>

#include "cgolab/conductivity.hpp"
#include "cgolab/fields.hpp"

namespace cgolab {

using TraceSink = std::function<void(const nlohmann::json&)>;

struct SolveConfig {
  double newton_tol = 1e-11;
  int max_newton = 25;
  double linear_tol = 1e-12;
  double smallness_guard = 0.1;
  TraceSink trace;

  void validate() const {
    if (!(newton_tol > 0 && linear_tol > 0 && smallness_guard > 0 && max_newton > 0))
      fail(ErrorKind::ConfigInvalid, "solver settings must be positive");
    if (newton_tol < linear_tol) fail(ErrorKind::ConfigInvalid, "newton_tol must be >= linear_tol");
  }
};

/// sum_k [c_{i+1/2}(w_{i+1}-w_i) - c_{i-1/2}(w_i-w_{i-1})]/h^2 with arithmetic face averages; 0 on boundary nodes.
inline CVec stencil_apply(const BoxGrid& g, const CVec& c, const CVec& w) {
  CVec out(g.size(), 0.0);
  const double h2 = g.h() * g.h();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g.on_boundary(i)) continue;
    cplx s = 0.0;
    for (int k = 0; k < g.n; ++k) {
      std::size_t st = g.stride(k);
      s += 0.5 * (c[i] + c[i + st]) * (w[i + st] - w[i]) - 0.5 * (c[i] + c[i - st]) * (w[i] - w[i - st]);
    }
    out[i] = s / h2;
  }
  return out;
}

/// Dirichlet problem div(gamma grad w) = S on the box, reusable for many right-hand sides.
class DirichletSolver {
 public:
  DirichletSolver(const BoxGrid& g, RVec gamma_node, double tol = 1e-12) : g_(g), gamma_(std::move(gamma_node)), tol_(tol) {
    if (gamma_.size() != g.size()) fail(ErrorKind::GridMismatch, "gamma size differs from grid size");
    for (std::size_t i = 0; i < gamma_.size(); ++i)
      if (!(gamma_[i] > 0)) fail(ErrorKind::NonPositiveGamma, "gamma not positive at node " + std::to_string(i));
    map_.assign(g.size(), -1);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!g.on_boundary(i)) {
        map_[i] = static_cast<long>(interior_.size());
        interior_.push_back(i);
      }
    const auto ni = static_cast<Eigen::Index>(interior_.size());
    std::vector<Eigen::Triplet<double>> trip;
    const double h2 = g.h() * g.h();
    for (std::size_t r = 0; r < interior_.size(); ++r) {
      std::size_t i = interior_[r];
      double diag = 0;
      for (int k = 0; k < g.n; ++k)
        for (int sgn : {-1, 1}) {
          std::size_t j = sgn > 0 ? i + g.stride(k) : i - g.stride(k);
          double c = 0.5 * (gamma_[i] + gamma_[j]) / h2;
          diag += c;
          if (map_[j] >= 0) trip.emplace_back(static_cast<Eigen::Index>(r), map_[j], -c);
        }
      trip.emplace_back(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(r), diag);
    }
    A_.resize(ni, ni);
    A_.setFromTriplets(trip.begin(), trip.end());
    cg_.setTolerance(tol_);
    cg_.setMaxIterations(20 * static_cast<Eigen::Index>(g.M) * g.n + 200);
    cg_.compute(A_);
    if (cg_.info() != Eigen::Success) fail(ErrorKind::LinearSolveFailure, "preconditioner setup failed");
  }

  const BoxGrid& grid() const { return g_; }
  const RVec& gamma() const { return gamma_; }
  int last_iterations() const { return iterations_; }

  /// Boundary values from f (nullptr: zero), interior equation stencil(w) = source (nullptr: zero).
  ScalarField solve(const BoundaryFunction* f, const CVec* source = nullptr) {
    ScalarField w(g_);
    if (f) {
      check_same_grid(f->grid, g_);
      for (int fc = 0; fc < g_.num_faces(); ++fc)
        for (std::size_t j = 0; j < g_.face_size(); ++j) w[g_.face_node(fc, j)] = f->at(fc, j);
    }
    const double h2 = g_.h() * g_.h();
    const auto ni = static_cast<Eigen::Index>(interior_.size());
    Eigen::VectorXd bre(ni), bim(ni);
    for (std::size_t r = 0; r < interior_.size(); ++r) {
      std::size_t i = interior_[r];
      cplx b = source ? -(*source)[i] : cplx(0.0);
      for (int k = 0; k < g_.n; ++k)
        for (int sgn : {-1, 1}) {
          std::size_t j = sgn > 0 ? i + g_.stride(k) : i - g_.stride(k);
          if (map_[j] < 0) b += 0.5 * (gamma_[i] + gamma_[j]) / h2 * w[j];
        }
      bre(static_cast<Eigen::Index>(r)) = b.real();
      bim(static_cast<Eigen::Index>(r)) = b.imag();
    }
    Eigen::VectorXd xre = solve_real(bre), xim = solve_real(bim);
    for (std::size_t r = 0; r < interior_.size(); ++r)
      w[interior_[r]] = cplx(xre(static_cast<Eigen::Index>(r)), xim(static_cast<Eigen::Index>(r)));
    return w;
  }

 private:
  Eigen::VectorXd solve_real(const Eigen::VectorXd& b) {
    if (b.norm() == 0.0) return Eigen::VectorXd::Zero(b.size());
    Eigen::VectorXd x = cg_.solve(b);
    iterations_ = static_cast<int>(cg_.iterations());
    if (cg_.info() != Eigen::Success || !(cg_.error() <= 10 * tol_))
      fail(ErrorKind::LinearSolveFailure, "CG stagnated at relative residual " + std::to_string(cg_.error()));
    return x;
  }

  BoxGrid g_;
  RVec gamma_;
  double tol_;
  std::vector<long> map_;
  std::vector<std::size_t> interior_;
  Eigen::SparseMatrix<double> A_;
  Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper, Eigen::IncompleteCholesky<double>> cg_;
  int iterations_ = 0;
};

inline ScalarField solve_linear(const ScalarField& gamma_node, const BoundaryFunction& f, const SolveConfig& cfg = {}) {
  check_same_grid(gamma_node.grid, f.grid);
  RVec g(gamma_node.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (gamma_node[i].imag() != 0.0) fail(ErrorKind::NonPositiveGamma, "gamma must be real");
    g[i] = gamma_node[i].real();
  }
  DirichletSolver s(f.grid, g, cfg.linear_tol);
  return s.solve(&f);
}

struct NewtonReport {
  int iterations = 0;
  std::vector<double> residuals;  // max-norm of the nonlinear residual per iterate
  double stability_constant = 0;  // ||u - rho||_inf / ||f||_inf
};

/// Nodal (u, grad_h u) for every node.
inline std::vector<CVec> nodal_states(const ScalarField& u) {
  VectorField gu = grad(u);
  std::vector<CVec> U(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) U[i] = state_at(u, gu, i);
  return U;
}

inline ScalarField nonlinear_residual(const ModelNodes& mn, const ScalarField& u) {
  auto U = nodal_states(u);
  CVec gam(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) gam[i] = mn.value(i, U[i]);
  return ScalarField(u.grid, stencil_apply(u.grid, gam, u.values));
}

namespace detail {

/// Coefficients of d(diff_at(node, k))/du_l as (l, weight) pairs.
inline void diff_stencil(const BoxGrid& g, std::size_t node, int k, std::vector<std::pair<std::size_t, double>>& out) {
  out.clear();
  const int i = g.index_along(node, k);
  const std::size_t s = g.stride(k);
  const double h = g.h();
  if (i == 0) {
    out = {{node, -3.0 / (2 * h)}, {node + s, 4.0 / (2 * h)}, {node + 2 * s, -1.0 / (2 * h)}};
  } else if (i == g.M - 1) {
    out = {{node, 3.0 / (2 * h)}, {node - s, -4.0 / (2 * h)}, {node - 2 * s, 1.0 / (2 * h)}};
  } else {
    out = {{node + s, 1.0 / (2 * h)}, {node - s, -1.0 / (2 * h)}};
  }
}

}  // namespace detail

/// Newton iteration for div(gamma(x,u,grad u) grad u) = 0, u = rho + f on the boundary (real data).
inline ScalarField solve_quasilinear(const ConductivityModel& model, double rho, const BoundaryFunction& f,
                                     const SolveConfig& cfg = {}, NewtonReport* report = nullptr) {
  cfg.validate();
  const BoxGrid& g = f.grid;
  double fsup = boundary_sup(f);
  if (fsup > cfg.smallness_guard)
    fail(ErrorKind::SmallnessViolated, "||f||_inf = " + std::to_string(fsup) + " exceeds guard " + std::to_string(cfg.smallness_guard));
  for (const auto& v : f.values)
    if (v.imag() != 0.0) fail(ErrorKind::ConfigInvalid, "nonlinear solves accept real boundary data only");
  ModelNodes mn(model, g);

  ScalarField u(g, cplx(rho));
  for (int fc = 0; fc < g.num_faces(); ++fc)
    for (std::size_t j = 0; j < g.face_size(); ++j) u[g.face_node(fc, j)] = rho + f.at(fc, j);

  std::vector<long> map(g.size(), -1);
  std::vector<std::size_t> interior;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!g.on_boundary(i)) {
      map[i] = static_cast<long>(interior.size());
      interior.push_back(i);
    }
  const auto ni = static_cast<Eigen::Index>(interior.size());
  const double h2 = g.h() * g.h();

  // Initial guess: the linearized problem at rest.
  {
    RVec g0(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) g0[i] = mn.value(i, mn.rest(rho)).real();
    DirichletSolver lin(g, g0, cfg.linear_tol);
    BoundaryFunction fb = f;
    for (auto& v : fb.values) v += rho;
    u = lin.solve(&fb);
  }

  auto max_abs = [](const CVec& v) {
    double m = 0;
    for (const auto& x : v) m = std::max(m, std::abs(x));
    return m;
  };
  NewtonReport rep;
  ScalarField R = nonlinear_residual(mn, u);
  double r0 = max_abs(R.values);
  double scale = std::max(fsup / h2, 1e-300);
  rep.residuals.push_back(r0);
  int growth = 0;
  std::vector<std::pair<std::size_t, double>> st;
  for (int it = 0; it < cfg.max_newton; ++it) {
    if (rep.residuals.back() <= cfg.newton_tol * scale) break;
    auto U = nodal_states(u);
    RVec gam(g.size());
    std::vector<CVec> dgam(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      gam[i] = mn.value(i, U[i]).real();
      dgam[i] = mn.derivative(i, U[i]);
    }
    // Sparse row of d gamma_j / d u as (column node, weight).
    auto gamma_row = [&](std::size_t j, std::vector<std::pair<std::size_t, double>>& row) {
      row.clear();
      if (dgam[j][0].real() != 0.0) row.emplace_back(j, dgam[j][0].real());
      for (int k = 0; k < g.n; ++k) {
        double c = dgam[j][static_cast<std::size_t>(k + 1)].real();
        if (c == 0.0) continue;
        detail::diff_stencil(g, j, k, st);
        for (auto [l, w] : st) row.emplace_back(l, c * w);
      }
    };
    std::vector<Eigen::Triplet<double>> trip;
    std::vector<std::pair<std::size_t, double>> rowi, rowj;
    for (std::size_t r = 0; r < interior.size(); ++r) {
      std::size_t i = interior[r];
      gamma_row(i, rowi);
      for (int k = 0; k < g.n; ++k)
        for (int sgn : {-1, 1}) {
          std::size_t j = sgn > 0 ? i + g.stride(k) : i - g.stride(k);
          double gf = 0.5 * (gam[i] + gam[j]) / h2;
          double du = (u[j] - u[i]).real() / h2;
          if (map[j] >= 0) trip.emplace_back(static_cast<Eigen::Index>(r), map[j], gf);
          trip.emplace_back(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(r), -gf);
          gamma_row(j, rowj);
          for (const auto* row : {&rowi, &rowj})
            for (auto [l, w] : *row)
              if (map[l] >= 0) trip.emplace_back(static_cast<Eigen::Index>(r), map[l], 0.5 * w * du);
        }
    }
    Eigen::SparseMatrix<double> J(ni, ni);
    J.setFromTriplets(trip.begin(), trip.end());
    Eigen::VectorXd rhs(ni);
    for (std::size_t r = 0; r < interior.size(); ++r) rhs(static_cast<Eigen::Index>(r)) = -R[interior[r]].real();
    Eigen::BiCGSTAB<Eigen::SparseMatrix<double>, Eigen::IncompleteLUT<double>> solver;
    solver.setTolerance(cfg.linear_tol);
    solver.setMaxIterations(4000);
    solver.compute(J);
    Eigen::VectorXd dx = solver.solve(rhs);
    if (solver.info() != Eigen::Success) {
      Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
      lu.compute(J);
      if (lu.info() != Eigen::Success) fail(ErrorKind::LinearSolveFailure, "Newton Jacobian is singular");
      dx = lu.solve(rhs);
    }
    for (std::size_t r = 0; r < interior.size(); ++r) u[interior[r]] += dx(static_cast<Eigen::Index>(r));
    R = nonlinear_residual(mn, u);
    double res = max_abs(R.values);
    growth = res >= rep.residuals.back() ? growth + 1 : 0;
    rep.residuals.push_back(res);
    rep.iterations = it + 1;
    if (cfg.trace)
      cfg.trace({{"event", "newton"}, {"iter", it + 1}, {"residual", res}, {"linear_iters", solver.iterations()}});
    if (growth >= 3) fail(ErrorKind::NewtonDiverged, "residual non-decreasing for 3 Newton steps");
  }
  if (rep.residuals.back() > cfg.newton_tol * scale)
    fail(ErrorKind::NewtonDiverged, "no convergence in " + std::to_string(cfg.max_newton) + " Newton steps");
  double dev = 0;
  for (const auto& v : u.values) dev = std::max(dev, std::abs(v - rho));
  rep.stability_constant = fsup > 0 ? dev / fsup : 0.0;
  if (report) *report = rep;
  return u;
}

/// Outward one-sided second-order normal derivative on face f at face node j.
inline cplx normal_derivative(const BoxGrid& g, const CVec& u, int f, std::size_t j) {
  std::size_t node = g.face_node(f, j);
  int k = f / 2;
  cplx d = diff_at(g, u, node, k);
  return (f % 2 == 0) ? -d : d;
}

/// Boundary reaction of the discrete energy sum_e w_e c_e (D u)(D phi): quad_boundary(weak_flux, phi) equals the
/// energy for every phi once u solves the interior equations. Pointwise it is gamma d_nu u to O(h).
inline BoundaryFunction weak_flux(const BoxGrid& g, const CVec& c, const CVec& u) {
  const double h = g.h();
  auto w1 = [&](int i) { return (i == 0 || i == g.M - 1) ? 0.5 * h : h; };
  BoundaryFunction out(g);
  for (int fc = 0; fc < g.num_faces(); ++fc)
    for (std::size_t j = 0; j < g.face_size(); ++j) {
      std::size_t b = g.face_node(fc, j);
      cplx G = 0.0;
      double wtot = 0;
      for (int k = 0; k < g.n; ++k) {
        double trans = 1;
        for (int a = 0; a < g.n; ++a)
          if (a != k) trans *= w1(g.index_along(b, a));
        int ik = g.index_along(b, k);
        if (ik == 0 || ik == g.M - 1) wtot += trans;
        for (int sgn : {-1, 1}) {
          if ((sgn < 0 && ik == 0) || (sgn > 0 && ik == g.M - 1)) continue;
          std::size_t nb = sgn > 0 ? b + g.stride(k) : b - g.stride(k);
          G += h * trans * 0.5 * (c[b] + c[nb]) * (u[b] - u[nb]) / (h * h);
        }
      }
      out.at(fc, j) = G / wtot;
    }
  return out;
}

struct DtnSample {
  BoundaryFunction flux;  // gamma times the one-sided normal derivative
  BoundaryFunction weak;  // weak_flux with the same nodal gamma
  cplx conservation;      // quad_boundary(flux, 1)
};

inline DtnSample dtn(const ModelNodes& mn, const ScalarField& u) {
  const BoxGrid& g = u.grid;
  VectorField gu = grad(u);
  DtnSample out{BoundaryFunction(g), BoundaryFunction(g), 0.0};
  CVec gam(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) gam[i] = mn.value(i, state_at(u, gu, i));
  for (int fc = 0; fc < g.num_faces(); ++fc)
    for (std::size_t j = 0; j < g.face_size(); ++j)
      out.flux.at(fc, j) = gam[g.face_node(fc, j)] * normal_derivative(g, u.values, fc, j);
  out.weak = weak_flux(g, gam, u.values);
  BoundaryFunction one(g);
  for (auto& v : one.values) v = 1.0;
  out.conservation = quad_boundary(out.flux, one);
  return out;
}

inline DtnSample dtn(const ConductivityModel& model, const ScalarField& u) { return dtn(ModelNodes(model, u.grid), u); }

}  // namespace cgolab
