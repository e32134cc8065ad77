#pragma once

#include <fftw3.h>

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <string>
#include <vector>

#include "cgolab/conductivity.hpp"
#include "cgolab/fields.hpp"
#include "cgolab/tensor.hpp"

namespace cgolab {

/// Periodic grid on Q = [-pi, pi]^n with P = N - 1 nodes per axis (the node at +pi is the image of -pi).
struct TorusGrid {
  int n = 3;
  int P = 32;

  TorusGrid() = default;
  TorusGrid(int n_, int N) : n(n_), P(N - 1) {
    if (n < 1 || P < 4) fail(ErrorKind::ConfigInvalid, "torus grid needs n >= 1 and N >= 5");
  }

  double h() const { return 2.0 * std::numbers::pi / P; }
  std::size_t size() const {
    std::size_t s = 1;
    for (int k = 0; k < n; ++k) s *= static_cast<std::size_t>(P);
    return s;
  }
  std::size_t stride(int k) const {
    std::size_t s = 1;
    for (int j = n - 1; j > k; --j) s *= static_cast<std::size_t>(P);
    return s;
  }
  int index_along(std::size_t node, int k) const { return static_cast<int>((node / stride(k)) % static_cast<std::size_t>(P)); }
  double coord1(int j) const { return -std::numbers::pi + j * h(); }
  void coords(std::size_t node, double* y) const {
    for (int k = 0; k < n; ++k) y[k] = coord1(index_along(node, k));
  }
  /// Lattice index l of DFT slot j, |l| <= P/2.
  int mode(int j) const { return j <= P / 2 ? j : j - P; }
  /// Frequency of slot j along axis k, including the half shift on the first axis.
  double freq(int j, int k) const { return mode(j) + (k == 0 ? 0.5 : 0.0); }
};

// ---------------------------------------------------------------------------
// Cutoff profile

namespace detail {

/// e^{-1/u} and its first two derivatives (0 for u <= 0).
inline std::array<double, 3> glue(double u) {
  if (u <= 0) return {0, 0, 0};
  double g = std::exp(-1.0 / u);
  return {g, g / (u * u), g * (1.0 / (u * u * u * u) - 2.0 / (u * u * u))};
}

/// Smooth step S(u) = g(u) / (g(u) + g(1-u)) with derivatives; 0 for u <= 0, 1 for u >= 1.
inline std::array<double, 3> smooth_step(double u) {
  if (u <= 0) return {0, 0, 0};
  if (u >= 1) return {1, 0, 0};
  auto a = glue(u), b = glue(1 - u);
  double N = a[0], N1 = a[1], N2 = a[2];
  double D = a[0] + b[0], D1 = a[1] - b[1], D2 = a[2] + b[2];
  double S = N / D;
  double S1 = (N1 * D - N * D1) / (D * D);
  double S2 = (N2 * D - N * D2) / (D * D) - 2.0 * D1 * S1 / D;
  return {S, S1, S2};
}

}  // namespace detail

/// chi(t) = 1 for |t| <= 1/2, 0 for |t| >= 1; returns chi, chi', chi''.
inline std::array<double, 3> chi_jet(double t) {
  double at = std::abs(t);
  if (at <= 0.5) return {1, 0, 0};
  if (at >= 1) return {0, 0, 0};
  auto s = detail::smooth_step(2.0 * (1.0 - at));
  double sg = t > 0 ? 1.0 : -1.0;
  return {s[0], -2.0 * sg * s[1], 4.0 * s[2]};
}

inline double chi(double t) { return chi_jet(t)[0]; }

// ---------------------------------------------------------------------------
// Probes and amplitudes

struct CgoProbe {
  CVec zeta;
  double lambda = 1.0;
  RVec p;
  double sigma = 0.0;
  double delta = 0.0;  // <= 0: no cutoff (a = e^{i sigma zeta.(x-p)})
  double scale = 1.0;  // the solve uses scale * lambda * zeta

  int n() const { return static_cast<int>(zeta.size()); }
  CVec exponent() const {
    CVec w = zeta;
    for (auto& c : w) c *= scale * lambda;
    return w;
  }
};

/// a(x) = e^{i sigma zeta.(x-p)} prod_j chi(omega_j.(x-p)/delta), with closed-form gradient and Laplacian.
class Amplitude {
 public:
  struct Jet {
    cplx a;
    CVec grad;
    cplx lap;
  };

  Amplitude() = default;
  Amplitude(const CVec& zeta, const RVec& p, double sigma, double delta, std::vector<RVec> omegas = {})
      : zeta_(zeta), p_(p), sigma_(sigma), delta_(delta), omegas_(std::move(omegas)) {
    const int n = static_cast<int>(zeta.size());
    if (p_.empty()) p_.assign(static_cast<std::size_t>(n), 0.0);
    if (static_cast<int>(p_.size()) != n) fail(ErrorKind::ConfigInvalid, "probe point dimension differs from zeta");
    if (std::abs(dot(zeta, zeta)) > 1e-12 * (1 + std::norm(zeta[0]))) fail(ErrorKind::DegenerateZeta, "zeta . zeta != 0");
    if (delta_ > 0 && omegas_.empty()) omegas_ = cutoff_frame(zeta);
    check_frame();
  }
  static Amplitude of(const CgoProbe& pr) { return Amplitude(pr.zeta, pr.p, pr.sigma, pr.delta); }

  const std::vector<RVec>& omegas() const { return omegas_; }
  double delta() const { return delta_; }

  Jet jet(const double* x) const {
    const std::size_t n = zeta_.size();
    cplx ph = 0.0;
    for (std::size_t k = 0; k < n; ++k) ph += zeta_[k] * (x[k] - p_[k]);
    const cplx E = std::exp(cplx(0, sigma_) * ph);
    Jet J{E, CVec(n, 0.0), 0.0};
    double X = 1.0;
    std::vector<std::array<double, 3>> c;
    if (delta_ > 0) {
      for (const auto& w : omegas_) {
        double t = 0;
        for (std::size_t k = 0; k < n; ++k) t += w[k] * (x[k] - p_[k]);
        c.push_back(chi_jet(t / delta_));
        X *= c.back()[0];
      }
    }
    J.a = E * X;
    for (std::size_t k = 0; k < n; ++k) J.grad[k] = J.a * cplx(0, sigma_) * zeta_[k];
    // zeta.zeta = 0 and omega_j . zeta = 0 leave only the chi'' terms in the Laplacian.
    for (std::size_t j = 0; j < c.size(); ++j) {
      double rest = 1.0;
      for (std::size_t i = 0; i < c.size(); ++i)
        if (i != j) rest *= c[i][0];
      for (std::size_t k = 0; k < n; ++k) J.grad[k] += E * (c[j][1] / delta_) * omegas_[j][k] * rest;
      J.lap += E * (c[j][2] / (delta_ * delta_)) * rest;
    }
    return J;
  }
  cplx operator()(const double* x) const { return jet(x).a; }

  /// Largest |omega_j.(x-p)|; the amplitude vanishes once this reaches delta.
  double plane_offset(const double* x) const {
    double m = 0;
    for (const auto& w : omegas_) {
      double t = 0;
      for (std::size_t k = 0; k < w.size(); ++k) t += w[k] * (x[k] - p_[k]);
      m = std::max(m, std::abs(t));
    }
    return m;
  }
  /// Euclidean distance from x to the plane p + span{Re zeta, Im zeta}.
  double plane_distance(const double* x) const {
    RVec d(p_.size());
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = x[k] - p_[k];
    RVec re = real_part(zeta_), im = imag_part(zeta_);
    double nr = std::sqrt(rdot(re, re)), ni = std::sqrt(rdot(im, im));
    double cr = rdot(d, re) / nr, ci = rdot(d, im) / ni;
    return std::sqrt(std::max(0.0, rdot(d, d) - cr * cr - ci * ci));
  }

 private:
  void check_frame() const {
    RVec re = real_part(zeta_), im = imag_part(zeta_);
    double nr = std::sqrt(rdot(re, re)), ni = std::sqrt(rdot(im, im));
    for (std::size_t i = 0; i < omegas_.size(); ++i) {
      const auto& w = omegas_[i];
      if (w.size() != zeta_.size()) fail(ErrorKind::FrameMismatch, "cutoff frame dimension differs from zeta");
      if (std::abs(rdot(w, re)) > 1e-10 * nr || std::abs(rdot(w, im)) > 1e-10 * ni)
        fail(ErrorKind::FrameMismatch, "cutoff direction not orthogonal to Re zeta, Im zeta");
      for (std::size_t j = i; j < omegas_.size(); ++j)
        if (std::abs(rdot(w, omegas_[j]) - (i == j ? 1.0 : 0.0)) > 1e-10)
          fail(ErrorKind::FrameMismatch, "cutoff frame not orthonormal");
    }
  }

  CVec zeta_;
  RVec p_;
  double sigma_ = 0;
  double delta_ = 0;
  std::vector<RVec> omegas_;
};

inline ScalarField amplitude(const CgoProbe& probe, const BoxGrid& g) {
  Amplitude a = Amplitude::of(probe);
  return sample(g, [&](const double* x) { return a(x); });
}

// ---------------------------------------------------------------------------
// Frames

/// Orthogonal R with y = R x, R Re(zeta)/alpha = e1, R Im(zeta)/alpha = e2.
struct Frame {
  int n = 3;
  std::vector<RVec> rows;
  double alpha = 1.0;
  bool signed_perm = false;
  std::vector<int> axis;     // y_k = sign_k x_{axis_k} when signed_perm
  std::vector<double> sign;
  std::string tag;

  void to_frame(const double* x, double* y) const {
    for (int i = 0; i < n; ++i) {
      double s = 0;
      for (int k = 0; k < n; ++k) s += rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] * x[k];
      y[i] = s;
    }
  }
  void from_frame(const double* y, double* x) const {
    for (int k = 0; k < n; ++k) {
      double s = 0;
      for (int i = 0; i < n; ++i) s += rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] * y[i];
      x[k] = s;
    }
  }
};

inline Frame rotate_to_frame(const CVec& zeta, double omega_radius, const TorusGrid& tg) {
  const int n = static_cast<int>(zeta.size());
  if (n != tg.n) fail(ErrorKind::GridMismatch, "zeta dimension differs from torus dimension");
  if (omega_radius > std::numbers::pi - tg.h())
    fail(ErrorKind::DomainEscapesCube, "Omega does not fit in the ball of radius pi - h; rotated Omega may leave Q");
  RVec re = real_part(zeta), im = imag_part(zeta);
  double a = std::sqrt(rdot(re, re)), b = std::sqrt(rdot(im, im));
  if (!(a > 0) || std::abs(a - b) > 1e-10 * a || std::abs(rdot(re, im)) > 1e-10 * a * a)
    fail(ErrorKind::DegenerateZeta, "Re zeta and Im zeta must be orthogonal with equal length");
  Frame f;
  f.n = n;
  f.alpha = a;
  for (auto& x : re) x /= a;
  for (auto& x : im) x /= a;
  f.rows = {re, im};
  for (auto& w : cutoff_frame(zeta)) f.rows.push_back(w);
  f.signed_perm = true;
  for (int i = 0; i < n && f.signed_perm; ++i) {
    int hit = -1;
    for (int k = 0; k < n; ++k) {
      double v = f.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
      if (std::abs(std::abs(v) - 1.0) < 1e-14) {
        hit = k;
      } else if (std::abs(v) > 1e-14) {
        f.signed_perm = false;
      }
    }
    if (hit < 0) f.signed_perm = false;
    if (f.signed_perm) {
      f.axis.push_back(hit);
      f.sign.push_back(f.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(hit)] > 0 ? 1.0 : -1.0);
    }
  }
  if (f.signed_perm) {
    for (int i = 0; i < n; ++i) {
      f.rows[static_cast<std::size_t>(i)].assign(static_cast<std::size_t>(n), 0.0);
      f.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(f.axis[static_cast<std::size_t>(i)])] = f.sign[static_cast<std::size_t>(i)];
    }
    for (int i = 0; i < n; ++i)
      f.tag += (f.sign[static_cast<std::size_t>(i)] > 0 ? "+" : "-") + std::to_string(f.axis[static_cast<std::size_t>(i)] + 1);
  } else {
    f.axis.clear();
    f.sign.clear();
    f.tag = "rotation";
  }
  return f;
}

// ---------------------------------------------------------------------------
// Shifted-lattice spectral solver

namespace detail {
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

/// Solves (-Delta - 2 la d_1 - 2 i la d_2) r = f on Q in the basis e^{i(l + e1/2).y}.
class FaddeevSolver {
 public:
  FaddeevSolver(const TorusGrid& tg, double lambda_alpha) : tg_(tg), la_(lambda_alpha) {
    if (!(la_ > 0)) fail(ErrorKind::ConfigInvalid, "lambda * alpha must be positive");
    const std::size_t N = tg_.size();
    buf_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * N));
    std::vector<int> dims(static_cast<std::size_t>(tg_.n), tg_.P);
    std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
    fwd_ = fftw_plan_dft(tg_.n, dims.data(), buf_, buf_, FFTW_FORWARD, FFTW_ESTIMATE);
    bwd_ = fftw_plan_dft(tg_.n, dims.data(), buf_, buf_, FFTW_BACKWARD, FFTW_ESTIMATE);
    shift_.resize(static_cast<std::size_t>(tg_.P));
    for (int j = 0; j < tg_.P; ++j) shift_[static_cast<std::size_t>(j)] = std::exp(cplx(0, 0.5 * tg_.coord1(j)));
  }
  FaddeevSolver(const FaddeevSolver&) = delete;
  FaddeevSolver& operator=(const FaddeevSolver&) = delete;
  ~FaddeevSolver() {
    std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(bwd_);
    fftw_free(buf_);
  }

  const TorusGrid& grid() const { return tg_; }
  double lambda_alpha() const { return la_; }

  cplx symbol_of(const std::vector<int>& l) const {
    double q = 0;
    for (std::size_t k = 0; k < l.size(); ++k) {
      double f = l[k] + (k == 0 ? 0.5 : 0.0);
      q += f * f;
    }
    double l2 = l.size() > 1 ? l[1] : 0.0;
    return cplx(q + 2.0 * la_ * l2, -2.0 * la_ * (l[0] + 0.5));
  }
  /// Symbol at DFT slot `slot` (row-major over the torus axes).
  cplx symbol(std::size_t slot) const {
    std::vector<int> l(static_cast<std::size_t>(tg_.n));
    for (int k = 0; k < tg_.n; ++k) l[static_cast<std::size_t>(k)] = tg_.mode(tg_.index_along(slot, k));
    return symbol_of(l);
  }

  /// Coefficients c_l of f = sum c_l e^{i(l+e1/2).y} from samples on the torus nodes.
  CVec coefficients(const CVec& f) {
    const std::size_t N = tg_.size();
    check(f);
    for (std::size_t i = 0; i < N; ++i) {
      cplx v = f[i] * std::conj(shift_[static_cast<std::size_t>(tg_.index_along(i, 0))]);
      buf_[i][0] = v.real();
      buf_[i][1] = v.imag();
    }
    fftw_execute(fwd_);
    CVec c(N);
    const double inv = 1.0 / static_cast<double>(N);
    for (std::size_t i = 0; i < N; ++i) c[i] = cplx(buf_[i][0], buf_[i][1]) * (inv * parity(i));
    return c;
  }
  CVec values(const CVec& c) {
    const std::size_t N = tg_.size();
    check(c);
    for (std::size_t i = 0; i < N; ++i) {
      cplx v = c[i] * parity(i);
      buf_[i][0] = v.real();
      buf_[i][1] = v.imag();
    }
    fftw_execute(bwd_);
    CVec out(N);
    for (std::size_t i = 0; i < N; ++i)
      out[i] = cplx(buf_[i][0], buf_[i][1]) * shift_[static_cast<std::size_t>(tg_.index_along(i, 0))];
    return out;
  }
  /// Coefficients of r = G f.
  CVec solve_coefficients(const CVec& f) {
    CVec c = coefficients(f);
    for (std::size_t i = 0; i < c.size(); ++i) c[i] /= symbol(i);
    return c;
  }
  CVec solve(const CVec& f) { return values(solve_coefficients(f)); }

 private:
  void check(const CVec& v) const {
    if (v.size() != tg_.size()) fail(ErrorKind::GridMismatch, "torus sample size mismatch");
  }
  /// (-1)^{sum l}: e^{i l.y} at y_j = -pi + 2 pi j / P carries e^{-i pi l} per axis.
  double parity(std::size_t slot) const {
    int s = 0;
    for (int k = 0; k < tg_.n; ++k) s += tg_.mode(tg_.index_along(slot, k));
    return (s % 2 == 0) ? 1.0 : -1.0;
  }

  TorusGrid tg_;
  double la_;
  fftw_complex* buf_ = nullptr;
  fftw_plan fwd_ = nullptr, bwd_ = nullptr;
  CVec shift_;
};

inline CVec faddeev_solve(const TorusGrid& tg, const CVec& f, double lambda_alpha) {
  FaddeevSolver s(tg, lambda_alpha);
  return s.solve(f);
}

/// Values and y-gradient of sum c_l e^{i(l+e1/2).y} at the Omega box nodes, y = R x.
inline std::vector<CVec> evaluate_series(const TorusGrid& tg, const CVec& c, const Frame& fr, const BoxGrid& g) {
  const int n = tg.n;
  const std::size_t P = static_cast<std::size_t>(tg.P), M = static_cast<std::size_t>(g.M);
  std::vector<CVec> out(static_cast<std::size_t>(n + 1), CVec(g.size()));
  if (fr.signed_perm) {
    using Mat = Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    // E[k]: M x P matrix along torus axis k; D[k] the derivative variant.
    std::vector<Mat> E(static_cast<std::size_t>(n)), D(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
      E[static_cast<std::size_t>(k)].resize(static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(P));
      D[static_cast<std::size_t>(k)].resize(static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(P));
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < P; ++j) {
          double fq = tg.freq(static_cast<int>(j), k);
          cplx e = std::exp(cplx(0, fq * fr.sign[static_cast<std::size_t>(k)] * g.coord1(static_cast<int>(i))));
          E[static_cast<std::size_t>(k)](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = e;
          D[static_cast<std::size_t>(k)](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = cplx(0, fq) * e;
        }
    }
    for (int comp = 0; comp <= n; ++comp) {
      CVec cur = c;
      std::vector<std::size_t> shape(static_cast<std::size_t>(n), P);
      for (int k = 0; k < n; ++k) {
        const Mat& A = (comp == k + 1) ? D[static_cast<std::size_t>(k)] : E[static_cast<std::size_t>(k)];
        std::size_t outer = 1, inner = 1;
        for (int i = 0; i < k; ++i) outer *= shape[static_cast<std::size_t>(i)];
        for (int i = k + 1; i < n; ++i) inner *= shape[static_cast<std::size_t>(i)];
        CVec next(outer * M * inner);
        for (std::size_t o = 0; o < outer; ++o) {
          Eigen::Map<const Mat> in(cur.data() + o * P * inner, static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(inner));
          Eigen::Map<Mat> res(next.data() + o * M * inner, static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(inner));
          res.noalias() = A * in;
        }
        cur.swap(next);
        shape[static_cast<std::size_t>(k)] = M;
      }
      // cur is indexed by (i_0..i_{n-1}) along torus axes; torus axis k is box axis axis_k.
      for (std::size_t t = 0; t < cur.size(); ++t) {
        std::size_t rem = t, node = 0;
        for (int k = n - 1; k >= 0; --k) {
          std::size_t i = rem % M;
          rem /= M;
          node += i * g.stride(fr.axis[static_cast<std::size_t>(k)]);
        }
        out[static_cast<std::size_t>(comp)][node] = cur[t];
      }
    }
    return out;
  }
  // Generic rotation: direct summation, O(P^n) per node.
  std::vector<double> x(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
  std::vector<CVec> ph(static_cast<std::size_t>(n), CVec(P));
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (std::size_t node = 0; node < g.size(); ++node) {
    g.coords(node, x.data());
    fr.to_frame(x.data(), y.data());
    for (int k = 0; k < n; ++k)
      for (std::size_t j = 0; j < P; ++j)
        ph[static_cast<std::size_t>(k)][j] = std::exp(cplx(0, tg.freq(static_cast<int>(j), k) * y[static_cast<std::size_t>(k)]));
    CVec acc(static_cast<std::size_t>(n + 1), 0.0);
    for (std::size_t s = 0; s < c.size(); ++s) {
      cplx e = c[s];
      for (int k = 0; k < n; ++k) {
        int j = tg.index_along(s, k);
        idx[static_cast<std::size_t>(k)] = j;
        e *= ph[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
      }
      acc[0] += e;
      for (int k = 0; k < n; ++k) acc[static_cast<std::size_t>(k + 1)] += cplx(0, tg.freq(idx[static_cast<std::size_t>(k)], k)) * e;
    }
    for (int comp = 0; comp <= n; ++comp) out[static_cast<std::size_t>(comp)][node] = acc[static_cast<std::size_t>(comp)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Factored exponential fields

/// e^{w.x} phi on the Omega grid, never exponentiated unless asked and safe.
struct ExpField {
  CVec w;
  ScalarField phi;
  VectorField grad_phi;
  std::string frame;

  static ExpField plain(const ScalarField& u) {
    ExpField f;
    f.w.assign(static_cast<std::size_t>(u.grid.n), 0.0);
    f.phi = u;
    f.grad_phi = grad(u);
    return f;
  }

  const BoxGrid& grid() const { return phi.grid; }
  double max_real_exponent() const {
    double s = 0;
    for (const auto& c : w) s += std::abs(c.real());
    return s * grid().a;
  }
  cplx exp_at(std::size_t node) const {
    auto x = grid().coords(node);
    cplx s = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) s += w[k] * x[k];
    return std::exp(s);
  }
  void check_direct() const {
    if (max_real_exponent() > 600.0)
      fail(ErrorKind::ExponentBlowup, "direct exponentiation would overflow (|Re w.x| > 600)");
  }
  ScalarField direct() const {
    check_direct();
    ScalarField u(grid());
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = exp_at(i) * phi[i];
    return u;
  }
  VectorField direct_grad() const {
    check_direct();
    VectorField gu(grid());
    for (std::size_t i = 0; i < phi.size(); ++i) {
      cplx e = exp_at(i);
      for (std::size_t k = 0; k < w.size(); ++k) gu.comp[k][i] = e * (w[k] * phi[i] + grad_phi.comp[k][i]);
    }
    return gu;
  }
  BoundaryFunction trace() const { return boundary_trace(direct()); }
  /// (phi, w phi + grad phi) per node: the state (u, grad u) with e^{w.x} factored out.
  std::vector<CVec> reduced_states() const {
    std::vector<CVec> s(phi.size(), CVec(w.size() + 1));
    for (std::size_t i = 0; i < phi.size(); ++i) {
      s[i][0] = phi[i];
      for (std::size_t k = 0; k < w.size(); ++k) s[i][k + 1] = w[k] * phi[i] + grad_phi.comp[k][i];
    }
    return s;
  }
};

struct ExpProduct {
  CVec w;                                       // combined exponent (purely imaginary)
  ScalarField phase;                            // e^{w.x}
  std::vector<std::vector<CVec>> states;        // reduced states per field
};

inline ExpProduct exp_product(const std::vector<ExpField>& fields) {
  if (fields.empty()) fail(ErrorKind::ConfigInvalid, "exp_product needs at least one field");
  const BoxGrid& g = fields[0].grid();
  ExpProduct out;
  out.w.assign(fields[0].w.size(), 0.0);
  double scale = 1.0;
  for (const auto& f : fields) {
    check_same_grid(f.grid(), g);
    for (std::size_t k = 0; k < f.w.size(); ++k) {
      out.w[k] += f.w[k];
      scale += std::abs(f.w[k]);
    }
  }
  for (const auto& c : out.w)
    if (std::abs(c.real()) > 1e-9 * scale)
      fail(ErrorKind::ExponentBlowup, "combined exponent has a nonzero real part");
  out.phase = ScalarField(g);
  std::vector<double> x(static_cast<std::size_t>(g.n));
  for (std::size_t i = 0; i < g.size(); ++i) {
    g.coords(i, x.data());
    double s = 0;
    for (std::size_t k = 0; k < out.w.size(); ++k) s += out.w[k].imag() * x[k];
    out.phase[i] = std::exp(cplx(0, s));
  }
  for (const auto& f : fields) out.states.push_back(f.reduced_states());
  return out;
}

// ---------------------------------------------------------------------------
// CGO solutions

struct CgoOptions {
  int N = 33;               // torus nodes per axis, P = N - 1 periodic
  double series_tol = 1e-12;
  int max_terms = 50;
};

struct CgoDiagnostics {
  double lambda_alpha = 0;
  int terms = 0;
  std::vector<double> term_norms;
  double residual = 0;      // conjugated equation on the cutoff plateau, relative to max|F|
  double r_sup = 0;
  double r_c1 = 0;          // discrete C^1 norm of r on the Omega grid
  std::string frame;
};

struct CgoSolution {
  ExpField U;
  ScalarField r;
  CgoDiagnostics diag;
};

inline double lambda_ceiling(int n) { return 600.0 / (std::numbers::pi * std::sqrt(static_cast<double>(n))); }

/// CGO solutions U = e^{s lambda zeta.x} gamma0^{-1/2} (a + r) of div(gamma0 grad U) = 0 for one gamma0 and Omega grid.
class CgoSolver {
 public:
  CgoSolver(const Expr& gamma0, const BoxGrid& omega, const CgoOptions& opt = {})
      : gamma0_(gamma0), q_(q_potential(gamma0, omega.n)), g_(omega), tg_(omega.n, opt.N), opt_(opt) {
    omega_radius_ = g_.a * std::sqrt(static_cast<double>(g_.n));
    inv_sqrt_ = ScalarField(g_);
    grad_inv_sqrt_ = VectorField(g_);
    std::vector<Expr> dg;
    for (int k = 0; k < g_.n; ++k) dg.push_back(gamma0_.diff(k));
    std::vector<double> x(static_cast<std::size_t>(g_.n));
    for (std::size_t i = 0; i < g_.size(); ++i) {
      g_.coords(i, x.data());
      double gv = gamma0_(x.data());
      if (!(gv > 0)) fail(ErrorKind::NonPositiveGamma, "gamma0 must be positive on Omega");
      inv_sqrt_[i] = 1.0 / std::sqrt(gv);
      for (int k = 0; k < g_.n; ++k)
        grad_inv_sqrt_.comp[static_cast<std::size_t>(k)][i] = -0.5 * std::pow(gv, -1.5) * dg[static_cast<std::size_t>(k)](x.data());
    }
    q_const_ = q_.is_const() && q_.value() == 0.0;
  }

  const BoxGrid& grid() const { return g_; }
  const TorusGrid& torus() const { return tg_; }
  const Expr& q() const { return q_; }

  /// Torus samples of F = Delta a - q a and of the radial cutoff psi (1 on the Omega ball, 0 near the faces of Q).
  struct TorusRhs {
    Frame frame;
    CVec F;
    RVec psi;
  };

  TorusRhs torus_rhs(const CgoProbe& pr) {
    const int n = g_.n;
    if (pr.n() != n) fail(ErrorKind::GridMismatch, "probe dimension differs from grid");
    if (!(pr.lambda > 0)) fail(ErrorKind::ConfigInvalid, "lambda must be positive");
    if (std::abs(pr.scale) * pr.lambda > lambda_ceiling(n) * (1 + 1e-12))
      fail(ErrorKind::ExponentBlowup, "|scale| * lambda exceeds the ceiling 600 / (pi sqrt n)");
    TorusRhs out{rotate_to_frame(pr.exponent(), omega_radius_, tg_), CVec(tg_.size()), RVec(tg_.size())};
    Amplitude amp = Amplitude::of(pr);
    const double R0 = omega_radius_ + tg_.h(), R1 = std::numbers::pi - tg_.h();
    const RVec& qv = q_on_torus(out.frame);
    std::vector<double> y(static_cast<std::size_t>(n)), x(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < tg_.size(); ++i) {
      tg_.coords(i, y.data());
      double rho = 0;
      for (double v : y) rho += v * v;
      rho = std::sqrt(rho);
      out.psi[i] = detail::smooth_step((R1 - rho) / (R1 - R0))[0];
      if (out.psi[i] == 0.0) continue;
      out.frame.from_frame(y.data(), x.data());
      auto J = amp.jet(x.data());
      out.F[i] = J.lap - qv[i] * J.a;
    }
    return out;
  }

  CgoSolution solve(const CgoProbe& pr) {
    const int n = g_.n;
    TorusRhs rhs = torus_rhs(pr);
    const Frame& fr = rhs.frame;
    const CVec w = pr.exponent();
    Amplitude amp = Amplitude::of(pr);
    const double la = fr.alpha;  // alpha of the scaled exponent already contains lambda
    FaddeevSolver fs(tg_, la);

    const std::size_t NT = tg_.size();
    const RVec& qv = q_on_torus(fr);
    const CVec& F = rhs.F;
    const RVec& psi = rhs.psi;
    CVec psiF(NT);
    RVec psiq(NT);
    double Fmax = 0;
    for (std::size_t i = 0; i < NT; ++i) {
      psiF[i] = psi[i] * F[i];
      psiq[i] = psi[i] * qv[i];
      if (psi[i] == 1.0) Fmax = std::max(Fmax, std::abs(F[i]));
    }
    std::vector<double> x(static_cast<std::size_t>(n));

    CgoSolution sol;
    sol.diag.lambda_alpha = la;
    sol.diag.frame = fr.tag;
    CVec rt = psiF, term = psiF;
    double first = l2(term);
    sol.diag.term_norms.push_back(first);
    if (first > 0 && !q_const_) {
      int growth = 0;
      double prev = first;
      for (int k = 1; k < opt_.max_terms; ++k) {
        CVec Gt = fs.solve(term);
        for (std::size_t i = 0; i < NT; ++i) term[i] = -psiq[i] * Gt[i];
        double nt = l2(term);
        sol.diag.term_norms.push_back(nt);
        for (std::size_t i = 0; i < NT; ++i) rt[i] += term[i];
        growth = nt > prev ? growth + 1 : 0;
        if (growth >= 2) fail(ErrorKind::NeumannDiverging, "Neumann series terms grow; lambda too small for q");
        prev = nt;
        if (nt < opt_.series_tol * first) break;
      }
    }
    sol.diag.terms = static_cast<int>(sol.diag.term_norms.size());
    CVec rc = fs.solve_coefficients(rt);
    if (first > 0) {
      CVec rv = fs.values(rc);
      double res = 0;
      for (std::size_t i = 0; i < NT; ++i)
        if (psi[i] == 1.0) res = std::max(res, std::abs(rt[i] + qv[i] * rv[i] - F[i]));
      sol.diag.residual = Fmax > 0 ? res / Fmax : res;
    }

    // Back to Omega: r and grad r (x-gradient = R^T y-gradient).
    auto ev = evaluate_series(tg_, rc, fr, g_);
    sol.r = ScalarField(g_, ev[0]);
    VectorField gr(g_);
    for (std::size_t i = 0; i < g_.size(); ++i)
      for (int k = 0; k < n; ++k) {
        cplx s = 0.0;
        for (int j = 0; j < n; ++j)
          s += fr.rows[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)] * ev[static_cast<std::size_t>(j + 1)][i];
        gr.comp[static_cast<std::size_t>(k)][i] = s;
      }
    sol.diag.r_sup = sup_norm(sol.r);
    sol.diag.r_c1 = c1_norm(sol.r);

    ExpField& U = sol.U;
    U.w = w;
    U.frame = fr.tag;
    U.phi = ScalarField(g_);
    U.grad_phi = VectorField(g_);
    for (std::size_t i = 0; i < g_.size(); ++i) {
      g_.coords(i, x.data());
      auto J = amp.jet(x.data());
      cplx ar = J.a + sol.r[i];
      U.phi[i] = inv_sqrt_[i] * ar;
      for (int k = 0; k < n; ++k) {
        auto kk = static_cast<std::size_t>(k);
        U.grad_phi.comp[kk][i] = grad_inv_sqrt_.comp[kk][i] * ar + inv_sqrt_[i] * (J.grad[kk] + gr.comp[kk][i]);
      }
    }
    return sol;
  }

  /// Geometric-optics part alone, e^{w.x} gamma0^{-1/2} a (r = 0).
  ExpField ansatz(const CgoProbe& pr) const {
    const int n = g_.n;
    if (pr.n() != n) fail(ErrorKind::GridMismatch, "probe dimension differs from grid");
    Amplitude amp = Amplitude::of(pr);
    ExpField U;
    U.w = pr.exponent();
    U.frame = "ansatz";
    U.phi = ScalarField(g_);
    U.grad_phi = VectorField(g_);
    std::vector<double> x(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < g_.size(); ++i) {
      g_.coords(i, x.data());
      auto J = amp.jet(x.data());
      U.phi[i] = inv_sqrt_[i] * J.a;
      for (int k = 0; k < n; ++k) {
        auto kk = static_cast<std::size_t>(k);
        U.grad_phi.comp[kk][i] = grad_inv_sqrt_.comp[kk][i] * J.a + inv_sqrt_[i] * J.grad[kk];
      }
    }
    return U;
  }

  const Expr& gamma0() const { return gamma0_; }

 private:
  static double l2(const CVec& v) {
    double s = 0;
    for (const auto& c : v) s += std::norm(c);
    return std::sqrt(s);
  }
  const RVec& q_on_torus(const Frame& fr) {
    auto it = q_cache_.find(fr.tag + (fr.signed_perm ? "" : frame_key(fr)));
    if (it != q_cache_.end()) return it->second;
    RVec qv(tg_.size(), 0.0);
    if (!q_const_) {
      std::vector<double> y(static_cast<std::size_t>(tg_.n)), x(static_cast<std::size_t>(tg_.n));
      for (std::size_t i = 0; i < qv.size(); ++i) {
        tg_.coords(i, y.data());
        fr.from_frame(y.data(), x.data());
        qv[i] = q_(x.data());
      }
    }
    return q_cache_[fr.tag + (fr.signed_perm ? "" : frame_key(fr))] = std::move(qv);
  }
  static std::string frame_key(const Frame& fr) {
    std::string s;
    for (const auto& r : fr.rows)
      for (double v : r) s += ":" + std::to_string(v);
    return s;
  }

  Expr gamma0_, q_;
  BoxGrid g_;
  TorusGrid tg_;
  CgoOptions opt_;
  double omega_radius_ = 0;
  ScalarField inv_sqrt_;
  VectorField grad_inv_sqrt_;
  bool q_const_ = false;
  std::map<std::string, RVec> q_cache_;
};

inline CgoSolution cgo_solve(const Expr& gamma0, const CgoProbe& probe, const BoxGrid& omega, const CgoOptions& opt = {}) {
  CgoSolver s(gamma0, omega, opt);
  return s.solve(probe);
}

}  // namespace cgolab
