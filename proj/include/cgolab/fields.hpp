#pragma once

#include <cmath>
#include <complex>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgolab/error.hpp"
#include "cgolab/expr.hpp"
#include "cgolab/tensor.hpp"

namespace cgolab {

/// Uniform node grid on the box [-a,a]^n, nodes on the faces included.
struct BoxGrid {
  int n = 3;
  int M = 33;
  double a = 1.0;

  BoxGrid() = default;
  BoxGrid(int n_, int M_, double a_ = 1.0) : n(n_), M(M_), a(a_) {
    if (n < 1 || M < 3 || !(a > 0)) fail(ErrorKind::ConfigInvalid, "box grid needs n >= 1, M >= 3, a > 0");
  }

  double h() const { return 2.0 * a / (M - 1); }
  std::size_t size() const {
    std::size_t s = 1;
    for (int k = 0; k < n; ++k) s *= static_cast<std::size_t>(M);
    return s;
  }
  std::size_t stride(int k) const {
    std::size_t s = 1;
    for (int j = n - 1; j > k; --j) s *= static_cast<std::size_t>(M);
    return s;
  }
  int index_along(std::size_t node, int k) const { return static_cast<int>((node / stride(k)) % static_cast<std::size_t>(M)); }
  double coord1(int i) const { return -a + i * h(); }
  void coords(std::size_t node, double* x) const {
    for (int k = 0; k < n; ++k) x[k] = coord1(index_along(node, k));
  }
  std::vector<double> coords(std::size_t node) const {
    std::vector<double> x(static_cast<std::size_t>(n));
    coords(node, x.data());
    return x;
  }
  bool on_boundary(std::size_t node) const {
    for (int k = 0; k < n; ++k) {
      int i = index_along(node, k);
      if (i == 0 || i == M - 1) return true;
    }
    return false;
  }
  std::string id() const {
    return "box:n=" + std::to_string(n) + ",M=" + std::to_string(M) + ",a=" + std::to_string(a);
  }

  // Faces: f = 2k + s, s = 0 for x_k = -a and s = 1 for x_k = +a.
  int num_faces() const { return 2 * n; }
  std::size_t face_size() const { return size() / static_cast<std::size_t>(M); }
  /// Grid node of the j-th node on face f (remaining axes in increasing order, row-major).
  std::size_t face_node(int f, std::size_t j) const {
    int k = f / 2;
    int fixed = (f % 2 == 0) ? 0 : M - 1;
    std::size_t node = 0;
    std::size_t rem = j;
    for (int ax = n - 1; ax >= 0; --ax) {
      int i;
      if (ax == k) {
        i = fixed;
      } else {
        i = static_cast<int>(rem % static_cast<std::size_t>(M));
        rem /= static_cast<std::size_t>(M);
      }
      node += static_cast<std::size_t>(i) * stride(ax);
    }
    return node;
  }
  /// Trapezoid weight of node j within its face (an (n-1)-dimensional rule).
  double face_weight(int f, std::size_t j) const {
    std::size_t node = face_node(f, j);
    double w = 1.0;
    for (int ax = 0; ax < n; ++ax) {
      if (ax == f / 2) continue;
      int i = index_along(node, ax);
      w *= (i == 0 || i == M - 1) ? 0.5 * h() : h();
    }
    return w;
  }
  double node_weight(std::size_t node) const {
    double w = 1.0;
    for (int ax = 0; ax < n; ++ax) {
      int i = index_along(node, ax);
      w *= (i == 0 || i == M - 1) ? 0.5 * h() : h();
    }
    return w;
  }

  bool operator==(const BoxGrid& o) const { return n == o.n && M == o.M && a == o.a; }
  bool operator!=(const BoxGrid& o) const { return !(*this == o); }
};

struct ScalarField {
  BoxGrid grid;
  CVec values;

  ScalarField() = default;
  explicit ScalarField(const BoxGrid& g, cplx fill = 0.0) : grid(g), values(g.size(), fill) {}
  ScalarField(const BoxGrid& g, CVec v) : grid(g), values(std::move(v)) {
    if (values.size() != g.size()) fail(ErrorKind::GridMismatch, "field size differs from grid size");
  }
  cplx& operator[](std::size_t i) { return values[i]; }
  const cplx& operator[](std::size_t i) const { return values[i]; }
  std::size_t size() const { return values.size(); }
};

struct VectorField {
  BoxGrid grid;
  std::vector<CVec> comp;  // one array per axis

  VectorField() = default;
  explicit VectorField(const BoxGrid& g) : grid(g), comp(static_cast<std::size_t>(g.n), CVec(g.size(), 0.0)) {}
};

/// Values on the faces of the box, stored face-major. Edge/corner nodes appear once per face.
struct BoundaryFunction {
  BoxGrid grid;
  CVec values;

  BoundaryFunction() = default;
  explicit BoundaryFunction(const BoxGrid& g) : grid(g), values(g.face_size() * static_cast<std::size_t>(g.num_faces()), 0.0) {}
  cplx& at(int f, std::size_t j) { return values[static_cast<std::size_t>(f) * grid.face_size() + j]; }
  const cplx& at(int f, std::size_t j) const { return values[static_cast<std::size_t>(f) * grid.face_size() + j]; }
};

inline void check_same_grid(const BoxGrid& a, const BoxGrid& b) {
  if (a != b) fail(ErrorKind::GridMismatch, "fields live on different grids: " + a.id() + " vs " + b.id());
}

inline ScalarField sample(const BoxGrid& g, const std::function<cplx(const double*)>& f) {
  ScalarField u(g);
  std::vector<double> x(static_cast<std::size_t>(g.n));
  for (std::size_t i = 0; i < g.size(); ++i) {
    g.coords(i, x.data());
    u[i] = f(x.data());
  }
  return u;
}

inline ScalarField sample(const BoxGrid& g, const Expr& e) {
  return sample(g, [&](const double* x) { return cplx(e(x), 0.0); });
}

inline BoundaryFunction boundary_trace(const ScalarField& u) {
  BoundaryFunction b(u.grid);
  for (int f = 0; f < u.grid.num_faces(); ++f)
    for (std::size_t j = 0; j < u.grid.face_size(); ++j) b.at(f, j) = u[u.grid.face_node(f, j)];
  return b;
}

inline BoundaryFunction boundary_sample(const BoxGrid& g, const std::function<cplx(const double*)>& f) {
  BoundaryFunction b(g);
  std::vector<double> x(static_cast<std::size_t>(g.n));
  for (int fc = 0; fc < g.num_faces(); ++fc)
    for (std::size_t j = 0; j < g.face_size(); ++j) {
      g.coords(g.face_node(fc, j), x.data());
      b.at(fc, j) = f(x.data());
    }
  return b;
}

inline double boundary_sup(const BoundaryFunction& f) {
  double s = 0;
  for (const auto& v : f.values) s = std::max(s, std::abs(v));
  return s;
}

/// Second-order derivative along axis k: central inside, one-sided at the box faces.
inline cplx diff_at(const BoxGrid& g, const CVec& u, std::size_t node, int k) {
  const int i = g.index_along(node, k);
  const std::size_t s = g.stride(k);
  const double h = g.h();
  if (i == 0) return (-3.0 * u[node] + 4.0 * u[node + s] - u[node + 2 * s]) / (2.0 * h);
  if (i == g.M - 1) return (3.0 * u[node] - 4.0 * u[node - s] + u[node - 2 * s]) / (2.0 * h);
  return (u[node + s] - u[node - s]) / (2.0 * h);
}

inline VectorField grad(const ScalarField& u) {
  VectorField g(u.grid);
  for (int k = 0; k < u.grid.n; ++k)
    for (std::size_t i = 0; i < u.size(); ++i) g.comp[static_cast<std::size_t>(k)][i] = diff_at(u.grid, u.values, i, k);
  return g;
}

inline void check_positive(const ScalarField& gamma) {
  for (std::size_t i = 0; i < gamma.size(); ++i)
    if (!(gamma[i].real() > 0.0) || gamma[i].imag() != 0.0)
      fail(ErrorKind::NonPositiveGamma, "conductivity not positive at node " + std::to_string(i));
}

/// Conservative stencil sum_k [g_{i+1/2}(u_{i+1}-u_i) - g_{i-1/2}(u_i-u_{i-1})]/h^2 at interior nodes, 0 on the boundary.
inline ScalarField div_gamma_grad(const ScalarField& gamma, const ScalarField& u) {
  check_same_grid(gamma.grid, u.grid);
  check_positive(gamma);
  const BoxGrid& g = u.grid;
  ScalarField out(g);
  const double h2 = g.h() * g.h();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g.on_boundary(i)) continue;
    cplx s = 0.0;
    for (int k = 0; k < g.n; ++k) {
      std::size_t st = g.stride(k);
      double gp = 0.5 * (gamma[i].real() + gamma[i + st].real());
      double gm = 0.5 * (gamma[i].real() + gamma[i - st].real());
      s += gp * (u[i + st] - u[i]) - gm * (u[i] - u[i - st]);
    }
    out[i] = s / h2;
  }
  return out;
}

inline cplx quad_omega(const ScalarField& f) {
  cplx s = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) s += f.grid.node_weight(i) * f[i];
  return s;
}

inline cplx quad_boundary(const BoundaryFunction& f, const BoundaryFunction& g) {
  check_same_grid(f.grid, g.grid);
  cplx s = 0.0;
  for (int fc = 0; fc < f.grid.num_faces(); ++fc)
    for (std::size_t j = 0; j < f.grid.face_size(); ++j) s += f.grid.face_weight(fc, j) * f.at(fc, j) * g.at(fc, j);
  return s;
}

/// max |f| + max over components of |discrete gradient|, over all nodes of the field's grid.
inline double c1_norm(const ScalarField& f) {
  double m0 = 0, m1 = 0;
  VectorField g = grad(f);
  for (std::size_t i = 0; i < f.size(); ++i) {
    m0 = std::max(m0, std::abs(f[i]));
    for (const auto& c : g.comp) m1 = std::max(m1, std::abs(c[i]));
  }
  return m0 + m1;
}

inline double sup_norm(const ScalarField& f) {
  double m = 0;
  for (const auto& v : f.values) m = std::max(m, std::abs(v));
  return m;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json grid_to_json(const BoxGrid& g) {
  return {{"id", g.id()}, {"n", g.n}, {"M", g.M}, {"a", g.a}, {"h", g.h()}, {"axis_order", "row-major"}};
}

inline nlohmann::json field_to_json(const ScalarField& u) {
  nlohmann::json re = nlohmann::json::array(), im = nlohmann::json::array();
  for (const auto& v : u.values) {
    re.push_back(v.real());
    im.push_back(v.imag());
  }
  return {{"grid", grid_to_json(u.grid)}, {"re", re}, {"im", im}};
}

/// SymTensorField: one tensor per grid node (or per listed point).
struct SymTensorField {
  int dim = 0;
  int rank = 0;
  std::string grid_id;
  std::vector<SymTensor> values;
};

inline nlohmann::json to_json(const SymTensorField& f) {
  nlohmann::json vals = nlohmann::json::array();
  for (const auto& t : f.values)
    for (double c : t.coeffs()) vals.push_back(c);
  return {{"dim", f.dim},
          {"rank", f.rank},
          {"grid_id", f.grid_id},
          {"index_order", "nondecreasing-lexicographic"},
          {"values", vals}};
}

inline SymTensorField sym_tensor_field_from_json(const nlohmann::json& j) {
  SymTensorField f;
  f.dim = j.at("dim").get<int>();
  f.rank = j.at("rank").get<int>();
  f.grid_id = j.at("grid_id").get<std::string>();
  if (j.at("index_order").get<std::string>() != "nondecreasing-lexicographic")
    fail(ErrorKind::ConfigInvalid, "unsupported tensor index order");
  auto flat = j.at("values").get<std::vector<double>>();
  auto per = static_cast<std::size_t>(sym_index_count(f.dim, f.rank));
  if (flat.size() % per != 0) fail(ErrorKind::ConfigInvalid, "tensor value count is not a multiple of C(d+m-1,m)");
  for (std::size_t k = 0; k < flat.size(); k += per)
    f.values.emplace_back(f.dim, f.rank, RVec(flat.begin() + static_cast<long>(k), flat.begin() + static_cast<long>(k + per)));
  return f;
}

}  // namespace cgolab
