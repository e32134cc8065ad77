#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cgolab/recovery.hpp"

using namespace cgolab;

namespace {

SymTensorField constant_tensor_field(const BoxGrid& g, const SymTensor& T) {
  return SymTensorField{T.dim(), T.rank(), g.id(), std::vector<SymTensor>(g.size(), T)};
}

SymTensorField tensor_field(const BoxGrid& g, int d, int m, const std::function<SymTensor(const double*)>& f) {
  SymTensorField F{d, m, g.id(), {}};
  std::vector<double> x(static_cast<std::size_t>(g.n));
  for (std::size_t i = 0; i < g.size(); ++i) {
    g.coords(i, x.data());
    F.values.push_back(f(x.data()));
  }
  return F;
}

SymTensor random_tensor(int d, int m, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  SymTensor T(d, m);
  for (auto& c : T.coeffs()) c = u(rng);
  return T;
}

CVec pad(const CVec& v) {
  CVec out{0.0};
  out.insert(out.end(), v.begin(), v.end());
  return out;
}

double rel_l2(const CVec& a, const CVec& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += std::norm(a[i] - b[i]);
    den += std::norm(b[i]);
  }
  return std::sqrt(num / den);
}

double slope(const std::vector<double>& x, const std::vector<double>& y) {
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
    sxx += std::pow(std::log(x[i]) - mx, 2);
  }
  return sxy / sxx;
}

/// Constant rank-2 tensor over d = 4 used by the ray tests.
SymTensor ray_tensor() {
  SymTensor T(4, 2);
  T.coeffs() = RVec{0.3, 0.1, -0.2, 0.05, 1.0, 0.2, -0.1, 0.7, 0.15, 0.5};
  return T;
}

}  // namespace

// ---------------------------------------------------------------------------
// Identity and oracles

TEST(IdentityExpField, ZeroTensorGivesZero) {
  BoxGrid g(3, 9);
  auto pairs = calderon_pairs(3, 1, std::numbers::pi / 4);
  SymTensorField Z = constant_tensor_field(g, SymTensor(4, 2));
  std::vector<ExpField> sols{exp_probe(g, pairs[0].first), linear_probe(g, {1, 0, 0}), exp_probe(g, pairs[0].second),
                             linear_probe(g, {0, 1, 1})};
  EXPECT_EQ(identity_eval_interior(Z, sols), cplx(0.0));
}

TEST(IdentityExpField, ConstantSolutionReducesToScalarIdentity) {
  BoxGrid g(3, 13);
  auto T = tensor_field(g, 4, 1, [](const double* x) {
    SymTensor t(4, 1);
    t.coeffs() = {1 + 0.3 * x[0] * x[1], 0.4, -0.2 * x[2], 0.1};
    return t;
  });
  auto pairs = calderon_pairs(3, 1, std::numbers::pi / 4);
  ExpField u1 = exp_probe(g, pairs[4].first), u3 = exp_probe(g, pairs[4].second);
  cplx I = identity_eval_interior(T, {u1, constant_field(g), u3});
  // Direct quadrature of int T^0 grad u1 . grad u3.
  auto d1 = u1.direct_grad(), d3 = u3.direct_grad();
  ScalarField f(g);
  for (std::size_t i = 0; i < g.size(); ++i) {
    cplx gg = 0.0;
    for (int k = 0; k < 3; ++k) gg += d1.comp[static_cast<std::size_t>(k)][i] * d3.comp[static_cast<std::size_t>(k)][i];
    f[i] = T.values[i].coeffs()[0] * gg;
  }
  cplx ref = quad_omega(f);
  EXPECT_LT(std::abs(I - ref), 1e-10 * std::abs(ref));
}

TEST(IdentityExpField, FactoredAndDenseFormsAgree) {
  BoxGrid g(3, 11);
  auto T = constant_tensor_field(g, random_tensor(4, 2, 3));
  auto pairs = calderon_pairs(3, 1, std::numbers::pi / 4);
  std::vector<ExpField> sols{exp_probe(g, pairs[2].first), exp_probe(g, pairs[5].first),
                             exp_probe(g, pairs[5].second), exp_probe(g, pairs[2].second)};
  std::vector<ExpField> dense;
  for (const auto& s : sols) dense.push_back(densify(s));
  cplx a = identity_eval_interior(T, sols), b = identity_eval_interior(T, dense);
  EXPECT_LT(std::abs(a - b), 1e-10 * std::abs(a));
}

TEST(Oracle, BoundaryMatchesInteriorOnSolutionFields) {
  BoxGrid g(3, 21);
  Expr x1 = Expr::var(0), x2 = Expr::var(1);
  Expr g0 = 1 + 0.3 * sin(x1);
  ConductivityModel mod(3, g0);
  mod.add_entry(1, {0}, g0 * (0.5 + 0.2 * cos(x2)));
  mod.add_entry(1, {2}, 0.3 * g0);
  MeasurementOracle H(mod, 1, g, OracleBackend::Hierarchy);
  MeasurementOracle In(sample_taylor(mod, 1, g), g);
  auto pairs = calderon_pairs(3, 1, std::numbers::pi / 4);
  for (std::size_t p = 0; p < pairs.size(); p += 3) {
    std::vector<ExpField> probes{exp_probe(g, pairs[p].first), linear_probe(g, {0.5, 1, 0}),
                                 exp_probe(g, pairs[p].second)};
    std::vector<ExpField> fields;
    for (const auto& q : probes) fields.push_back(H.field(q));
    cplx b = H.value(probes), i = In.value(fields);
    EXPECT_LT(std::abs(b - i), 0.01 * std::abs(i)) << "pair " << p;
  }
}

TEST(Oracle, CachesRepeatedCalls) {
  BoxGrid g(3, 9);
  ConductivityModel mod(3, Expr::constant(1.0));
  mod.add_entry(1, {0}, Expr::constant(0.5));
  MeasurementOracle H(mod, 1, g, OracleBackend::Hierarchy);
  std::vector<ExpField> probes{linear_probe(g, {1, 0, 0}), linear_probe(g, {0, 1, 0}), linear_probe(g, {1, 1, 0})};
  cplx a = H.value(probes), b = H.value(probes);
  EXPECT_EQ(a, b);
  EXPECT_EQ(H.stats().calls, 2u);
  EXPECT_EQ(H.stats().hits, 1u);
  // Two first-order solves (the last probe enters through its trace) and one higher-order solve.
  EXPECT_EQ(H.stats().solves, 3u);
}

TEST(ReducedOracle, ConstantSlotsGiveLowerRankIdentity) {
  BoxGrid g(3, 11);
  SymTensor T2 = random_tensor(4, 2, 7);
  MeasurementOracle O(constant_tensor_field(g, T2), g);
  // T(e0, .) as a rank-1 tensor.
  SymTensor T1(4, 1);
  for (int j = 0; j < 4; ++j) T1.coeffs()[static_cast<std::size_t>(j)] = T2({0, j});
  MeasurementOracle O1(constant_tensor_field(g, T1), g);
  ReducedOracle R(O, 1);
  EXPECT_EQ(R.rank(), 1);
  std::vector<ExpField> probes{linear_probe(g, {1, 0.5, 0}), linear_probe(g, {0, 1, -1}, 0.3), linear_probe(g, {1, 1, 1})};
  cplx a = R.value(probes), b = O1.value(probes);
  EXPECT_LT(std::abs(a - b), 1e-12 * std::abs(b));
}

// ---------------------------------------------------------------------------
// Low-rank fits

TEST(Fit, CalderonPairsAreNullWithFourierProduct) {
  for (const auto& [z1, z2] : calderon_pairs(3, 2, 0.7)) {
    EXPECT_LT(std::abs(dot(z1, z1)), 1e-12);
    EXPECT_LT(std::abs(dot(z2, z2)), 1e-12);
    double k2 = 0;
    for (const auto& c : z1) k2 += c.imag() * c.imag();
    EXPECT_NEAR(dot(z1, z2).real(), -2 * k2, 1e-12);
    EXPECT_NEAR(dot(z1, z2).imag(), 0.0, 1e-12);
  }
  EXPECT_EQ(calderon_pairs(3, 2, 1.0).size(), 62u);
}

TEST(Fit, ScalarPolynomialIsExact) {
  BoxGrid g(3, 11);
  auto T = tensor_field(g, 4, 0, [](const double* x) {
    SymTensor t(4, 0);
    t.coeffs()[0] = 1 + 0.3 * x[0] - 0.2 * x[1] * x[2];
    return t;
  });
  MeasurementOracle O(T, g);
  FieldFit f = fit_scalar(O);
  for (RVec p : {RVec{0, 0, 0}, RVec{0.3, -0.4, 0.5}, RVec{-0.6, 0.2, 0.1}})
    EXPECT_NEAR(f(p), 1 + 0.3 * p[0] - 0.2 * p[1] * p[2], 1e-9);
}

TEST(Fit, PolarizationChainRecoversVectorField) {
  BoxGrid g(3, 11);
  auto T = tensor_field(g, 4, 1, [](const double* x) {
    SymTensor t(4, 1);
    t.coeffs() = {0.5 + 0.1 * x[0], 0.2 + 0.1 * x[1], -0.1, 0.3 * x[0] * x[2]};
    return t;
  });
  MeasurementOracle O(T, g);
  ReducedOracle R0(O, 1);
  FieldFit S = fit_scalar(R0);
  auto V = fit_vector(O, S);
  ASSERT_EQ(V.size(), 3u);
  for (RVec p : {RVec{0, 0, 0}, RVec{0.3, -0.4, 0.5}}) {
    EXPECT_NEAR(S(p), 0.5 + 0.1 * p[0], 1e-8);
    EXPECT_NEAR(V[0](p), 0.2 + 0.1 * p[1], 1e-7);
    EXPECT_NEAR(V[1](p), -0.1, 1e-7);
    EXPECT_NEAR(V[2](p), 0.3 * p[0] * p[2], 1e-7);
  }
}

TEST(Fit, DegenerateDesignIsRankDeficient) {
  BoxGrid g(3, 7);
  MeasurementOracle O(constant_tensor_field(g, SymTensor(4, 0)), g);
  FitOptions opt;
  opt.degree = 4;
  opt.modes = 1;
  opt.linear_probes = false;
  EXPECT_THROW(fit_scalar(O, opt), RankDeficientError);
}

TEST(Recover, RankOneFromBoundaryData) {
  BoxGrid g(3, 17);
  Expr x1 = Expr::var(0), x2 = Expr::var(1), x3 = Expr::var(2);
  Expr g0 = 1 + 0.3 * sin(x1);
  ConductivityModel mod(3, g0);
  mod.add_entry(1, {0}, g0 * (0.5 + 0.3 * cos(x2) * exp(0.2 * x3)));
  MeasurementOracle H(mod, 1, g, OracleBackend::Hierarchy);
  RecoveryPlan plan;
  plan.m = 1;
  plan.points = {{0, 0, 0}, {0.3, -0.2, 0.1}, {-0.4, 0.3, 0.2}};
  plan.fit.degree = 3;
  auto res = recover_tensor(H, plan);
  for (std::size_t i = 0; i < plan.points.size(); ++i) {
    SymTensor truth = mod.tensor_at(1, plan.points[i].data());
    const SymTensor& got = res.tensors.values[i];
    EXPECT_LT(std::abs(got.coeffs()[0] - truth.coeffs()[0]), 0.05 * truth.coeffs()[0]);
    for (int j = 1; j < 4; ++j) EXPECT_LT(std::abs(got.coeffs()[static_cast<std::size_t>(j)]), 0.05 * truth.coeffs()[0]);
  }
}

// ---------------------------------------------------------------------------
// Ray functionals

TEST(LeadingConstants, EnumerationMatchesClosedForm) {
  for (int m = 2; m <= 5; ++m)
    for (int k = 1; k <= m - 1; ++k) {
      auto e = leading_constants(m, k), c = leading_constants_closed(m, k);
      EXPECT_DOUBLE_EQ(e.c, c.c) << m << " " << k;
      EXPECT_DOUBLE_EQ(e.d, c.d) << m << " " << k;
      EXPECT_NE(e.c, 0.0);
    }
  EXPECT_THROW(leading_constants(2, 2), Error);
}

TEST(Support, StandardPairTubeAndContainment) {
  auto pairs = standard_pairs(3);
  EXPECT_NEAR(support_constant(pairs[0]), std::sqrt(2.0), 1e-12);
  BoxGrid g(3, 41);
  const double delta = 0.25;
  for (std::size_t p : {0u, 7u}) EXPECT_LE(support_spread(pairs[p], {0.1, 0, -0.1}, delta, g), support_constant(pairs[p]) + 1e-12);
  // Non-orthogonal imaginary parts widen the tube.
  double c = std::cos(1.0), s = std::sin(1.0);
  AdmissiblePair tilted{{1.0, cplx(0, 1), 0.0}, {1.0, cplx(0, c), cplx(0, s)}};
  double C = support_constant(tilted);
  EXPECT_GT(C, std::sqrt(2.0));
  EXPECT_LE(support_spread(tilted, {0, 0, 0}, delta, g), C + 1e-12);
  EXPECT_THROW(check_support({0.5, 0, 0}, 0.2, 1.0), Error);
  EXPECT_NO_THROW(check_support({0.0, 0, 0}, 0.2, 1.0));
}

TEST(Multiplier, MatchesAmplitudePhase) {
  auto pairs = standard_pairs(3);
  for (int k = 1; k <= 3; ++k)
    for (double sigma : {0.7, 1.3}) EXPECT_EQ(empirical_multiplier(pairs[3], k, {0, 0, 0}, sigma, 0.2), k + 3);
}

TEST(TransverseNormalization, SeparatesForStandardPair) {
  // zeta = e1 + i e2 cuts along e3, zeta~ = e1 + i e3 along e2; decay ((k+1) e2 + 2 e3).y.
  auto pr = standard_pairs(3)[0];
  ASSERT_EQ(pr.zeta_tilde[2], cplx(0, 1));
  const double delta = 0.2;
  auto line = [&](int power, double rate) {
    const int N = 20001;
    double h = 2 * delta / (N - 1), s = 0;
    for (int i = 0; i < N; ++i) {
      double y = -delta + h * i;
      s += (i == 0 || i == N - 1 ? 0.5 : 1.0) * h * std::pow(chi(y / delta), power) * std::exp(-rate * y);
    }
    return s;
  };
  for (int k : {1, 2}) {
    RVec sig{-2.0, 0.0, 1.5};
    RVec C = transverse_normalization(pr.zeta, pr.zeta_tilde, k, delta, sig);
    for (std::size_t j = 0; j < sig.size(); ++j) {
      double ref = line(2, sig[j] * (k + 1)) * line(k + 1, 2 * sig[j]);
      EXPECT_NEAR(C[j], ref, 1e-5 * ref);
    }
  }
}

TEST(RayInvert, GaussianRoundTrip) {
  auto pr = standard_pairs(3)[1];
  RaySample s = make_ray_sample({0, 0, 0}, pr, 2, 1, 0.1, 24, 1.0);
  auto gfun = [](double t) { return std::exp(-std::pow(t - 0.2, 2) / (2 * 0.09)); };
  RVec xi = real_part(pr.zeta);
  s.J = ray_forward_model([&](const double* x) { return cplx(gfun(rdot(xi, RVec(x, x + 3)))); }, s, 1.0);
  RVec t;
  for (int i = 0; i <= 40; ++i) t.push_back(-0.8 + 1.6 * i / 40);
  auto prof = ray_invert(s, Expr::constant(1.0), {}, t);
  // K_delta-smoothed g: the inversion kernel convolved with g on the chord.
  CVec smooth;
  for (double tv : t) {
    const int N = 4001;
    double h = (s.t_hi - s.t_lo) / (N - 1);
    cplx acc = 0.0;
    for (int i = 0; i < N; ++i) {
      double u = s.t_lo + h * i;
      acc += (i == 0 || i == N - 1 ? 0.5 : 1.0) * h * inversion_kernel(s, tv - u) * gfun(u);
    }
    smooth.push_back(acc);
  }
  EXPECT_LT(rel_l2(prof.g, smooth), 0.05);
}

TEST(RayInvert, ZeroAndGuards) {
  auto pr = standard_pairs(3)[0];
  RaySample s = make_ray_sample({0, 0, 0}, pr, 2, 1, 0.1, 24, 1.0);
  s.J.assign(s.sigma_grid.size(), 0.0);
  for (const auto& v : ray_invert(s, Expr::constant(1.0)).g) EXPECT_EQ(v, cplx(0.0));
  RaySample coarse = s;
  coarse.sigma_grid = {-5, -2.5, 0, 2.5, 5};
  coarse.J.assign(5, 1.0);
  try {
    ray_invert(coarse, Expr::constant(1.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NyquistViolated);
  }
  RaySample wide = s;
  wide.sigma_grid = {-6, 0, 6};
  wide.J.assign(3, 1.0);
  EXPECT_THROW(wide.validate(), Error);
  RaySample skew = s;
  skew.sigma_grid = {-1, 0, 2};
  EXPECT_THROW(skew.validate(), Error);
}

TEST(RayFunctional, ZeroTensorGivesZero) {
  BoxGrid g(3, 17);
  MeasurementOracle O(constant_tensor_field(g, SymTensor(4, 2)), g);
  CgoSolver cs(Expr::constant(1.0), g);
  CgoSource src(cs, false);
  RaySample s = make_ray_sample({0, 0, 0}, standard_pairs(3)[0], 2, 1, 0.3, 24, g.a);
  s = ray_functional(O, src, s, {24.0});
  for (const auto& v : s.J) EXPECT_EQ(v, cplx(0.0));
}

TEST(RayFunctional, SupportEscapesOmega) {
  BoxGrid g(3, 9);
  MeasurementOracle O(constant_tensor_field(g, SymTensor(4, 2)), g);
  CgoSolver cs(Expr::constant(1.0), g);
  CgoSource src(cs, false);
  RaySample s = make_ray_sample({0.6, 0, 0}, standard_pairs(3)[0], 2, 1, 0.3, 24, g.a);
  try {
    ray_functional(O, src, s, {24.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::SupportEscapesOmega);
  }
}

TEST(RayFunctional, ConstantTensorMatchesSeparatedQuadrature) {
  BoxGrid g(3, 41);
  SymTensor T = ray_tensor();
  MeasurementOracle O(constant_tensor_field(g, T), g);
  CgoSolver cs(Expr::constant(1.0), g);
  CgoSource src(cs, false);  // amplitude only: isolates the functional and its 1/lambda extrapolation
  auto pr = standard_pairs(3)[5];
  RaySample s = make_ray_sample({0, 0, 0}, pr, 2, 1, 0.3, 24, g.a);
  s = ray_functional(O, src, s, default_lambda_sweep(24, 1, 3));
  cplx tz = contract(T, std::vector<CVec>{pad(pr.zeta), pad(pr.zeta_tilde)});
  CVec sep = ray_forward_model([&](const double*) { return tz; }, s, g.a);
  EXPECT_LT(rel_l2(s.J, sep), 0.02);
  // Plateau of the inverted profile against the contraction.
  auto prof = ray_invert(s, Expr::constant(1.0), {}, {0.0});
  EXPECT_LT(std::abs(prof.g[0] - tz), 0.05 * std::abs(tz));
}

TEST(RayFunctional, RemainderContaminationDecaysLikeInverseLambda) {
  // No cutoff (delta = 0): the amplitude is smooth and the remainder is in its asymptotic regime.
  BoxGrid g(3, 21);
  SymTensor T = ray_tensor();
  MeasurementOracle O(constant_tensor_field(g, T), g);
  Expr g0 = 1 + 0.3 * sin(Expr::var(0));
  CgoSolver cs(g0, g);
  CgoSource src(cs, true);
  auto pr = standard_pairs(3)[0];
  const double sigma = 0.5;
  RaySample s;
  s.p = {0, 0, 0};
  s.zeta = pr.zeta;
  s.zeta_tilde = pr.zeta_tilde;
  s.dir = real_part(pr.zeta);
  s.delta = 0;
  s.sigma_grid = {-sigma, sigma};
  cplx tz = contract(T, std::vector<CVec>{pad(pr.zeta), pad(pr.zeta_tilde)});
  Amplitude a(pr.zeta, s.p, sigma, 0), at(pr.zeta_tilde, s.p, sigma, 0);
  ScalarField lead(g);
  std::vector<double> x(3);
  for (std::size_t i = 0; i < g.size(); ++i) {
    g.coords(i, x.data());
    lead[i] = tz * std::pow(g0(x.data()), -2.0) * std::pow(a(x.data()), 2) * std::pow(at(x.data()), 2);
  }
  cplx Jinf = quad_omega(lead);
  std::vector<double> lam{8, 16, 32, 64}, err;
  for (double L : lam) err.push_back(std::abs(ray_values(O, src, s, L, nullptr)[1] - Jinf));
  EXPECT_LE(slope(lam, err), -0.7);
}

TEST(Induction, RankTwoDatabaseMatchesContractions) {
  BoxGrid g(3, 33);
  SymTensor T = ray_tensor();
  MeasurementOracle O(constant_tensor_field(g, T), g);
  CgoSolver cs(Expr::constant(1.0), g);
  CgoSource src(cs, false);
  RecoveryPlan plan;
  plan.m = 2;
  plan.points = {{0, 0, 0}};
  auto all = standard_pairs(3);
  plan.pairs = {all[0], all[5], all[9]};
  plan.delta = 0.3;
  auto res = run_induction(O, src, plan);
  ASSERT_EQ(res.points.size(), 1u);
  ASSERT_EQ(res.points[0].samples.size(), 3u);
  for (const auto& smp : res.points[0].samples) {
    cplx truth = contract(T, std::vector<CVec>{pad(smp.vecs[0]), pad(smp.vecs[1])});
    EXPECT_LT(std::abs(smp.value - truth), 0.05 * std::abs(truth));
  }
}

TEST(Induction, RankThreeStagesMatchBruteForce) {
  BoxGrid g(3, 33);
  SymTensor T = random_tensor(4, 3, 11);
  MeasurementOracle O(constant_tensor_field(g, T), g);
  CgoSolver cs(Expr::constant(1.0), g);
  CgoSource src(cs, false);
  RecoveryPlan plan;
  plan.m = 3;
  plan.points = {{0, 0, 0}};
  plan.pairs = {standard_pairs(3)[2]};
  plan.delta = 0.3;
  auto res = run_induction(O, src, plan);
  const auto& smp = res.points[0].samples;
  ASSERT_EQ(smp.size(), 1u + real_directions(3).size());
  double scale = 0;
  for (const auto& s : smp) {
    std::vector<CVec> v;
    for (const auto& c : s.vecs) v.push_back(pad(c));
    scale = std::max(scale, std::abs(contract(T, v)));
  }
  for (const auto& s : smp) {
    std::vector<CVec> v;
    for (const auto& c : s.vecs) v.push_back(pad(c));
    EXPECT_LT(std::abs(s.value - contract(T, v)), 0.05 * scale);
  }
  int eliminated = 0;
  for (const auto& r : res.stages)
    if (r.k == 1 && std::abs(r.eliminated) > 0) ++eliminated;
  EXPECT_GT(eliminated, 0);
}

TEST(Induction, StageScheduleIsChecked) {
  RecoveryPlan plan;
  plan.m = 3;
  plan.stages = {1, 2};
  EXPECT_THROW(stage_schedule(plan, 3), Error);
  plan.stages = {2, 1};
  EXPECT_EQ(stage_schedule(plan, 3), (std::vector<int>{2, 1}));
  plan.stages = {};
  EXPECT_EQ(stage_schedule(plan, 4), (std::vector<int>{3, 2, 1}));
}
