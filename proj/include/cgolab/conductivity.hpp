#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "cgolab/expr.hpp"
#include "cgolab/fields.hpp"
#include "cgolab/tensor.hpp"

namespace cgolab {

/// gamma^(k)(x, 0) over d = n+1 slots (slot 0 = rho, slots 1..n = mu), one expression per stored coefficient.
struct TaylorTerm {
  int order = 1;
  std::vector<Expr> coeffs;
};

/// Truncated Taylor model gamma(x,rho,mu) = gamma0(x) + sum_k (1/k!) gamma^(k)(x,0)[(rho,mu)^k].
class ConductivityModel {
 public:
  ConductivityModel() = default;
  ConductivityModel(int n, Expr gamma0) : n_(n), gamma0_(std::move(gamma0)) {}

  int n() const { return n_; }
  int d() const { return n_ + 1; }
  const Expr& gamma0() const { return gamma0_; }
  const std::vector<TaylorTerm>& taylor() const { return taylor_; }
  double radius() const { return radius_; }
  void set_radius(double r) { radius_ = r; }
  std::string name;

  int truncation() const {
    int K = 0;
    for (const auto& t : taylor_) K = std::max(K, t.order);
    return K;
  }

  /// Adds (accumulates) an entry of gamma^(k) at the given slot multi-index.
  ConductivityModel& add_entry(int order, const MultiIndex& idx, const Expr& value) {
    if (static_cast<int>(idx.size()) != order) fail(ErrorKind::RankMismatch, "entry index length differs from order");
    TaylorTerm& t = term(order);
    auto pos = IndexTable::get(d(), order)->position(idx);
    t.coeffs[pos] = t.coeffs[pos] + value;
    return *this;
  }

  const TaylorTerm* find(int order) const {
    for (const auto& t : taylor_)
      if (t.order == order) return &t;
    return nullptr;
  }

  /// Same gamma0 and Taylor terms of order <= max_order.
  ConductivityModel truncated(int max_order) const {
    ConductivityModel m(n_, gamma0_);
    m.radius_ = radius_;
    m.name = name + "|<=" + std::to_string(max_order);
    for (const auto& t : taylor_)
      if (t.order <= max_order) m.taylor_.push_back(t);
    return m;
  }

  SymTensor tensor_at(int order, const double* x) const {
    SymTensor T(d(), order);
    if (const TaylorTerm* t = find(order))
      for (std::size_t k = 0; k < T.size(); ++k) T.coeffs()[k] = t->coeffs[k](x);
    return T;
  }

  std::string describe() const {
    std::string s = "gamma0=" + gamma0_.str();
    for (const auto& t : taylor_) {
      s += ";k=" + std::to_string(t.order) + ":";
      for (const auto& c : t.coeffs) s += c.str() + ",";
    }
    return s;
  }

 private:
  TaylorTerm& term(int order) {
    for (auto& t : taylor_)
      if (t.order == order) return t;
    TaylorTerm t;
    t.order = order;
    t.coeffs.assign(static_cast<std::size_t>(sym_index_count(d(), order)), Expr::constant(0.0));
    taylor_.push_back(std::move(t));
    return taylor_.back();
  }

  int n_ = 3;
  Expr gamma0_ = Expr::constant(1.0);
  std::vector<TaylorTerm> taylor_;
  double radius_ = std::numeric_limits<double>::infinity();
};

inline double factorial(int k) {
  double f = 1;
  for (int i = 2; i <= k; ++i) f *= i;
  return f;
}

/// Model coefficients sampled at the nodes of a box grid.
struct ModelNodes {
  BoxGrid grid;
  int d = 4;
  RVec gamma0;
  std::map<int, std::vector<SymTensor>> taylor;  // order -> tensor per node
  double radius = std::numeric_limits<double>::infinity();

  ModelNodes(const ConductivityModel& m, const BoxGrid& g) : grid(g), d(m.d()), radius(m.radius()) {
    if (m.n() != g.n) fail(ErrorKind::GridMismatch, "model dimension differs from grid dimension");
    gamma0.resize(g.size());
    std::vector<double> x(static_cast<std::size_t>(g.n));
    for (const auto& t : m.taylor()) taylor[t.order].reserve(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      g.coords(i, x.data());
      gamma0[i] = m.gamma0()(x.data());
      if (!(gamma0[i] > 0)) fail(ErrorKind::NonPositiveGamma, "gamma0 not positive at node " + std::to_string(i));
      for (const auto& t : m.taylor()) taylor[t.order].push_back(m.tensor_at(t.order, x.data()));
    }
  }

  int truncation() const { return taylor.empty() ? 0 : taylor.rbegin()->first; }

  const SymTensor* at(int order, std::size_t node) const {
    auto it = taylor.find(order);
    return it == taylor.end() ? nullptr : &it->second[node];
  }

  void check_radius(const CVec& U, std::size_t node) const {
    if (!std::isfinite(radius)) return;
    double s = 0;
    for (const auto& v : U) s += std::norm(v);
    if (std::sqrt(s) > radius)
      fail(ErrorKind::RadiusExceeded, "|(u, grad u)| exceeds the model radius at node " + std::to_string(node));
  }

  /// gamma(x_node, U) for U = (u, grad u).
  cplx value(std::size_t node, const CVec& U) const {
    check_radius(U, node);
    cplx g = gamma0[node];
    for (const auto& [k, tensors] : taylor) g += contract_power(tensors[node], U) / factorial(k);
    return g;
  }

  /// Gradient of gamma in U at the node: sum_k 1/(k-1)! gamma^(k)[U^(k-1), e_s].
  CVec derivative(std::size_t node, const CVec& U) const {
    CVec D(static_cast<std::size_t>(d), 0.0);
    for (const auto& [k, tensors] : taylor) {
      for (int s = 0; s < d; ++s) {
        std::vector<CVec> vecs(static_cast<std::size_t>(k - 1), U);
        CVec e(static_cast<std::size_t>(d), 0.0);
        e[static_cast<std::size_t>(s)] = 1.0;
        vecs.push_back(e);
        D[static_cast<std::size_t>(s)] += contract(tensors[node], vecs) / factorial(k - 1);
      }
    }
    return D;
  }

  /// j-th derivative of gamma in U at (rho e_0, 0) applied to dU: sum_{k>=j} 1/(k-j)! gamma^(k)[rho e_0^(k-j), dU...].
  cplx derivative_at_rest(std::size_t node, double rho, const std::vector<CVec>& dU) const {
    const int j = static_cast<int>(dU.size());
    if (j == 0) return value(node, rest(rho));
    cplx s = 0.0;
    for (const auto& [k, tensors] : taylor) {
      if (k < j) continue;
      if (k > j && rho == 0.0) continue;
      std::vector<CVec> vecs = dU;
      for (int i = 0; i < k - j; ++i) vecs.push_back(rest(rho));
      s += contract(tensors[node], vecs) / factorial(k - j);
    }
    return s;
  }

  CVec rest(double rho) const {
    CVec U(static_cast<std::size_t>(d), 0.0);
    U[0] = rho;
    return U;
  }
};

/// (u, grad u) at node i from nodal values and a precomputed gradient.
inline CVec state_at(const ScalarField& u, const VectorField& gu, std::size_t i) {
  CVec U(static_cast<std::size_t>(u.grid.n + 1));
  U[0] = u[i];
  for (int k = 0; k < u.grid.n; ++k) U[static_cast<std::size_t>(k + 1)] = gu.comp[static_cast<std::size_t>(k)][i];
  return U;
}

inline ScalarField eval_conductivity(const ModelNodes& mn, const ScalarField& u, const VectorField& gradu) {
  check_same_grid(mn.grid, u.grid);
  ScalarField g(u.grid);
  for (std::size_t i = 0; i < u.size(); ++i) g[i] = mn.value(i, state_at(u, gradu, i));
  return g;
}

inline ScalarField eval_conductivity(const ConductivityModel& m, const ScalarField& u, const VectorField& gradu) {
  return eval_conductivity(ModelNodes(m, u.grid), u, gradu);
}

/// q = Laplacian(sqrt(gamma0)) / sqrt(gamma0), symbolically.
inline Expr q_potential(const Expr& gamma0, int n) {
  Expr s = pow(gamma0, Expr::constant(0.5));
  return laplacian(s, n) / s;
}

}  // namespace cgolab
