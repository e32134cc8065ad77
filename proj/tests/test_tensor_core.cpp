#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "cgolab/tensor.hpp"

using namespace cgolab;

namespace {

// Independent oracle: full d^m sum over all (unsorted) multi-indices.
cplx naive_contract(const SymTensor& T, const std::vector<CVec>& vecs) {
  const int d = T.dim(), m = T.rank();
  MultiIndex idx(static_cast<std::size_t>(m), 0);
  cplx s = 0.0;
  while (true) {
    cplx term = T(idx);
    for (int i = 0; i < m; ++i) term *= vecs[static_cast<std::size_t>(i)][static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
    s += term;
    int p = m - 1;
    while (p >= 0 && idx[static_cast<std::size_t>(p)] == d - 1) idx[static_cast<std::size_t>(p--)] = 0;
    if (p < 0) break;
    ++idx[static_cast<std::size_t>(p)];
  }
  return s;
}

SymTensor random_tensor(int d, int m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  SymTensor T(d, m);
  for (auto& c : T.coeffs()) c = u(rng);
  return T;
}

CVec random_cvec(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  CVec v(static_cast<std::size_t>(d));
  for (auto& x : v) x = cplx(nd(rng), nd(rng));
  return v;
}

}  // namespace

TEST(SymIndexCount, MatchesBinomial) {
  EXPECT_EQ(sym_index_count(3, 2), 6u);
  EXPECT_EQ(sym_index_count(4, 3), 20u);
  EXPECT_EQ(sym_index_count(3, 0), 1u);
  for (int d = 1; d <= 5; ++d)
    for (int m = 0; m <= 5; ++m) EXPECT_EQ(IndexTable(d, m).size(), sym_index_count(d, m));
}

TEST(SymTensor, RankZeroIsScalar) {
  SymTensor T(3, 0, {2.5});
  EXPECT_EQ(T.size(), 1u);
  EXPECT_EQ(contract(T, std::vector<CVec>{}), cplx(2.5));
}

TEST(Contract, KroneckerOnNullVectorVanishes) {
  SymTensor T(3, 2);
  for (int i = 0; i < 3; ++i) T.at({i, i}) = 1.0;
  CVec z{1.0, cplx(0, 1), 0.0};
  EXPECT_NEAR(std::abs(contract(T, std::vector<CVec>{z, z})), 0.0, 1e-15);
}

TEST(Contract, BasisContractionReadsStorage) {
  std::mt19937_64 rng(7);
  SymTensor T = random_tensor(3, 2, rng);
  CVec e1{1.0, 0.0, 0.0}, e2{0.0, 1.0, 0.0};
  EXPECT_EQ(contract(T, std::vector<CVec>{e1, e2}), cplx(T({0, 1})));
}

TEST(Contract, RankMismatchThrows) {
  SymTensor T(3, 2);
  CVec v{1.0, 0.0, 0.0};
  try {
    contract(T, std::vector<CVec>{v});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::RankMismatch);
  }
}

TEST(ContractProperty, AgreesWithNaiveSumAndIsPermutationInvariant) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    int d = 1 + static_cast<int>(rng() % 4);
    int m = static_cast<int>(rng() % 5);
    SymTensor T = random_tensor(d, m, rng);
    std::vector<CVec> vecs;
    for (int i = 0; i < m; ++i) vecs.push_back(random_cvec(d, rng));
    cplx c = contract(T, vecs);
    cplx ref = naive_contract(T, vecs);
    EXPECT_NEAR(std::abs(c - ref), 0.0, 1e-12 * (1 + std::abs(ref)));
    auto perm = vecs;
    std::shuffle(perm.begin(), perm.end(), rng);
    EXPECT_EQ(contract(T, perm), c);  // bitwise: canonical ordering before summation
    if (m > 0) {
      CVec v = vecs[0];
      std::vector<CVec> same(static_cast<std::size_t>(m), v);
      EXPECT_NEAR(std::abs(contract_power(T, v) - naive_contract(T, same)), 0.0, 1e-11 * (1 + std::abs(c)));
    }
  }
}

TEST(ContractProperty, LinearInTensor) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    int d = 2 + static_cast<int>(rng() % 3), m = 1 + static_cast<int>(rng() % 3);
    SymTensor A = random_tensor(d, m, rng), B = random_tensor(d, m, rng);
    std::vector<CVec> vecs;
    for (int i = 0; i < m; ++i) vecs.push_back(random_cvec(d, rng));
    double a = 0.3, b = -1.7;
    cplx lhs = contract(a * A + b * B, vecs);
    cplx rhs = a * contract(A, vecs) + b * contract(B, vecs);
    EXPECT_NEAR(std::abs(lhs - rhs), 0.0, 1e-13 * (1 + std::abs(lhs)));
  }
}

TEST(Reconstruct, BasisSamplesRankOne) {
  std::vector<ContractionSample> s;
  double vals[3] = {0.5, -2.0, 3.25};
  for (int i = 0; i < 3; ++i) {
    CVec e(3, 0.0);
    e[static_cast<std::size_t>(i)] = 1.0;
    s.push_back({{e}, vals[i]});
  }
  SymTensor T = reconstruct_from_contractions(s, 3, 1);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(T.coeffs()[static_cast<std::size_t>(i)], vals[i], 1e-14);
}

TEST(Reconstruct, RankTwoFromTwelveAdmissiblePairs) {
  std::mt19937_64 rng(3);
  SymTensor T = random_tensor(3, 2, rng);
  auto pairs = standard_pairs(3);
  ASSERT_EQ(pairs.size(), 12u);
  std::vector<ContractionSample> s;
  for (const auto& p : pairs) s.push_back({{p.zeta, p.zeta_tilde}, naive_contract(T, {p.zeta, p.zeta_tilde})});
  SymTensor R = reconstruct_from_contractions(s, 3, 2);
  for (std::size_t k = 0; k < T.size(); ++k) EXPECT_NEAR(R.coeffs()[k], T.coeffs()[k], 1e-10);
}

TEST(ReconstructProperty, DeterminingPlanRoundTrip) {
  std::mt19937_64 rng(2024);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    int d = 1 + static_cast<int>(rng() % 4);
    int m = static_cast<int>(rng() % 5);
    SymTensor T = random_tensor(d, m, rng);
    std::vector<ContractionSample> s;
    for (const auto& vecs : sample_plan(d, m)) s.push_back({vecs, naive_contract(T, vecs)});
    SymTensor R = reconstruct_from_contractions(s, d, m);
    for (std::size_t k = 0; k < T.size(); ++k) worst = std::max(worst, std::abs(R.coeffs()[k] - T.coeffs()[k]));
  }
  EXPECT_LE(worst, 1e-10);
}

TEST(Reconstruct, UnderdeterminedReportsNullSpace) {
  // Only e1-direction samples of a rank-2 tensor in d = 2: T12 and T22 are invisible.
  std::vector<ContractionSample> s{{{CVec{1.0, 0.0}, CVec{1.0, 0.0}}, 1.0}};
  try {
    reconstruct_from_contractions(s, 2, 2);
    FAIL();
  } catch (const RankDeficientError& e) {
    EXPECT_EQ(e.nullity(), 2u);
  }
}

TEST(Reconstruct, AdmissibleOnlyRankThreeSystemOfSymmetricTensors) {
  // Samples (zeta, zeta, zeta~) over the twelve standard pairs. For symmetric tensors this
  // system has full column rank: sym(delta (x) v) contracts to 2/3 (zeta.zeta~)(v.zeta) != 0.
  auto plan = admissible_only_plan(3);
  Eigen::MatrixXd A(2 * static_cast<Eigen::Index>(plan.size()), 10);
  for (std::size_t r = 0; r < plan.size(); ++r) {
    CVec row = contraction_row(3, 3, plan[r]);
    for (int k = 0; k < 10; ++k) {
      A(2 * static_cast<Eigen::Index>(r), k) = row[static_cast<std::size_t>(k)].real();
      A(2 * static_cast<Eigen::Index>(r) + 1, k) = row[static_cast<std::size_t>(k)].imag();
    }
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
  EXPECT_GT(svd.singularValues().minCoeff(), 1.0);

  SymTensor Sd(3, 3);
  CVec v{0.3, -0.2, 0.7};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) Sd.at({i, i, j}) = 0.0;
  // sym(delta (x) v)_{abc} = (delta_ab v_c + delta_ac v_b + delta_bc v_a)/3
  for (int a = 0; a < 3; ++a)
    for (int b = a; b < 3; ++b)
      for (int c = b; c < 3; ++c)
        Sd.at({a, b, c}) = ((a == b ? v[static_cast<std::size_t>(c)].real() : 0.0) +
                            (a == c ? v[static_cast<std::size_t>(b)].real() : 0.0) +
                            (b == c ? v[static_cast<std::size_t>(a)].real() : 0.0)) / 3.0;
  for (const auto& p : standard_pairs(3)) {
    cplx expect = 2.0 / 3.0 * dot(p.zeta, p.zeta_tilde) * dot(v, p.zeta);
    EXPECT_NEAR(std::abs(contract(Sd, {p.zeta, p.zeta, p.zeta_tilde}) - expect), 0.0, 1e-14);
  }
}

TEST(Reconstruct, AdmissibleOnlyOrderedSystemHidesDeltaTensor) {
  // Without symmetry, T_{abc} = delta_ab is invisible to (zeta, zeta, zeta~) since zeta.zeta = 0.
  std::vector<ContractionSample> s;
  for (const auto& vecs : admissible_only_plan(3)) s.push_back({vecs, 0.0});
  try {
    reconstruct_ordered_from_contractions(s, 3, 3);
    FAIL();
  } catch (const RankDeficientError& e) {
    RVec delta(27, 0.0);
    for (int a = 0; a < 3; ++a)
      for (int c = 0; c < 3; ++c) delta[static_cast<std::size_t>(9 * a + 3 * a + c)] = 1.0;
    RVec proj(27, 0.0);
    for (const auto& nv : e.null_vectors()) {
      double c = 0;
      for (std::size_t k = 0; k < 27; ++k) c += nv[k] * delta[k];
      for (std::size_t k = 0; k < 27; ++k) proj[k] += c * nv[k];
    }
    for (std::size_t k = 0; k < 27; ++k) EXPECT_NEAR(proj[k], delta[k], 1e-10);
  }
}

TEST(Reconstruct, OrderedRoundTripOnPlanOfAllTriples) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  RVec T(8);
  for (auto& c : T) c = u(rng);
  std::vector<ContractionSample> s;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int c = 0; c < 2; ++c) {
        CVec ea(2, 0.0), eb(2, 0.0), ec(2, 0.0);
        ea[static_cast<std::size_t>(a)] = 1.0;
        eb[static_cast<std::size_t>(b)] = 1.0;
        ec[static_cast<std::size_t>(c)] = 1.0;
        s.push_back({{ea, eb, ec}, T[static_cast<std::size_t>(4 * a + 2 * b + c)]});
      }
  RVec R = reconstruct_ordered_from_contractions(s, 2, 3);
  for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(R[k], T[k], 1e-12);
}

TEST(AdmissiblePair, StandardTriples) {
  auto p = make_admissible_pair({1, 0, 0}, {0, 1, 0}, {0, 0, 1});
  EXPECT_EQ(p.zeta, (CVec{1.0, cplx(0, 1), 0.0}));
  EXPECT_EQ(p.zeta_tilde, (CVec{1.0, 0.0, cplx(0, 1)}));
  EXPECT_EQ(dot(p.zeta, p.zeta_tilde), cplx(1.0));
  auto q = make_admissible_pair({0, 1, 0}, {0, 0, 1}, {1, 0, 0});
  EXPECT_EQ(q.zeta, (CVec{0.0, 1.0, cplx(0, 1)}));
  EXPECT_EQ(q.zeta_tilde, (CVec{cplx(0, 1), 1.0, 0.0}));
}

TEST(AdmissiblePair, RejectsNonOrthonormal) {
  try {
    make_admissible_pair({1, 0, 0}, {0, 1, 0}, {0, 1, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NotOrthonormal);
  }
}

TEST(AdmissiblePairProperty, RandomOrthonormalTriplesSatisfyInvariants) {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 200; ++trial) {
    int n = 3 + static_cast<int>(rng() % 3);
    Eigen::MatrixXd G(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) G(i, j) = nd(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(G);
    Eigen::MatrixXd Q = qr.householderQ();
    auto col = [&](int c) { return RVec(Q.col(c).data(), Q.col(c).data() + n); };
    auto p = make_admissible_pair(col(0), col(1), col(2));
    auto r = pair_residuals(p);
    EXPECT_LE(r.null_zeta, 1e-12);
    EXPECT_LE(r.null_zeta_tilde, 1e-12);
    EXPECT_LE(r.real_mismatch, 1e-12);
    EXPECT_LE(r.real_norm, 1e-12);
    EXPECT_LE(r.dot_formula, 1e-12);
    EXPECT_GT(r.im_independence, 0.5);
    EXPECT_GT(dot(p.zeta, p.zeta_tilde).real(), 0.0);
  }
}

TEST(CutoffFrame, Examples) {
  auto f3 = cutoff_frame({1.0, cplx(0, 1), 0.0});
  ASSERT_EQ(f3.size(), 1u);
  EXPECT_EQ(f3[0], (RVec{0, 0, 1}));
  auto f4 = cutoff_frame({1.0, cplx(0, 1), 0.0, 0.0});
  ASSERT_EQ(f4.size(), 2u);
  EXPECT_EQ(f4[0], (RVec{0, 0, 1, 0}));
  EXPECT_EQ(f4[1], (RVec{0, 0, 0, 1}));
  try {
    cutoff_frame({cplx(1, 1), 0.0, 0.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateZeta);
  }
}

TEST(CutoffFrameProperty, OrthonormalAndOrthogonalToZeta) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 100; ++trial) {
    int n = 3 + static_cast<int>(rng() % 3);
    RVec re(static_cast<std::size_t>(n)), im(static_cast<std::size_t>(n));
    for (auto& x : re) x = nd(rng);
    for (auto& x : im) x = nd(rng);
    auto fr = cutoff_frame(to_complex(re, im));
    ASSERT_EQ(static_cast<int>(fr.size()), n - 2);
    for (std::size_t i = 0; i < fr.size(); ++i) {
      EXPECT_NEAR(rdot(fr[i], re), 0.0, 1e-12);
      EXPECT_NEAR(rdot(fr[i], im), 0.0, 1e-12);
      for (std::size_t j = 0; j < fr.size(); ++j) EXPECT_NEAR(rdot(fr[i], fr[j]), i == j ? 1.0 : 0.0, 1e-12);
    }
  }
}
