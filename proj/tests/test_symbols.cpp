#include <catch2/catch_amalgamated.hpp>

#include "kamred/symbols.hpp"

#include <cmath>

using namespace kamred;

namespace {

PotentialSpec harmonic(double L = 14.0) {
  PotentialSpec s;
  s.ell = 1.0;
  s.domain_halfwidth = L;
  return s;
}

EigenBasis& harmonic_basis() {
  static EigenBasis basis = [] {
    DiscretizationParams disc;
    disc.grid_points = 1025;
    return eigendecompose(build_h0(harmonic(), disc), harmonic(), 60);
  }();
  return basis;
}

CoeffFn angle_pow(double beta) {
  return [beta](double x) -> cplx { return std::pow(1.0 + x * x, 0.5 * beta); };
}

QPSymbol cos_phi_symbol(int n_freq, const KVec& k, const CoeffFn& f, double order) {
  QPSymbol w = QPSymbol::zero(n_freq, order);
  w.add_mode(k, cplx(0.5, 0.0), f);  // f(x) cos(k.phi)
  return w;
}

}  // namespace

TEST_CASE("symbol evaluation and reality", "[symbols]") {
  QPSymbol w = cos_phi_symbol(2, {1, 0}, angle_pow(1.0), 1.0);
  RVec phi(2);
  phi << 0.7, 1.3;
  const double x = 2.0;
  CHECK(w.eval(x, phi) == Catch::Approx(std::sqrt(1 + x * x) * std::cos(0.7)).epsilon(1e-14));

  RVec xs(3);
  xs << -1.0, 0.5, 3.0;
  CHECK(w.reality_defect(xs) == 0.0);

  QPSymbol sq = symbol_product(w, w);
  CHECK(sq.eval(x, phi) ==
        Catch::Approx((1 + x * x) * std::cos(0.7) * std::cos(0.7)).epsilon(1e-13));

  RVec omega(2);
  omega << 1.5, 1.2;
  QPSymbol dw = symbol_omega_dphi(w, omega);
  // d_phi of cos(phi_1) against omega gives -omega_1 sin(phi_1)
  CHECK(dw.eval(x, phi) ==
        Catch::Approx(-1.5 * std::sqrt(1 + x * x) * std::sin(0.7)).epsilon(1e-13));
}

TEST_CASE("symbol class checker", "[symbols]") {
  SECTION("<x>^beta declared at its own order passes with C0 = 1") {
    QPSymbol w = cos_phi_symbol(1, {1}, angle_pow(1.5), 1.5);
    auto rep = check_symbol_class(w, 1.5, 4, 12.0);
    CHECK(rep.pass);
    CHECK(rep.constants[0] == Catch::Approx(1.0).margin(1e-6));
  }

  SECTION("x^2 declared order 1 fails at k=0") {
    QPSymbol w = cos_phi_symbol(1, {1}, [](double x) -> cplx { return x * x; }, 1.0);
    auto rep = check_symbol_class(w, 1.0, 2, 12.0);
    CHECK_FALSE(rep.pass);
    CHECK(rep.fail_k == 0);
  }

  SECTION("bounded rational symbol passes at m=0") {
    QPSymbol w = cos_phi_symbol(2, {1, 1}, [](double x) -> cplx { return x * x / (1 + x * x); },
                                0.0);
    auto rep = check_symbol_class(w, 0.0, 4, 12.0);
    CHECK(rep.pass);
    // d^4 of x^2/<x>^2 peaks at the origin with value 24
    for (double c : rep.constants) CHECK(c < 30.0);
  }

  SECTION("sin(x) fails at m=0: derivatives gain no decay") {
    QPSymbol w = cos_phi_symbol(2, {1, 1}, [](double x) -> cplx { return std::sin(x); }, 0.0);
    auto rep = check_symbol_class(w, 0.0, 2, 12.0);
    CHECK_FALSE(rep.pass);
    CHECK(rep.fail_k >= 1);  // k=0 is fine (bounded), growth shows at k>=1
  }

  SECTION("out-of-class growth beta0 = 2l: matches own declaration, fails lower one") {
    QPSymbol w = cos_phi_symbol(1, {1}, angle_pow(4.0), 4.0);
    CHECK(check_symbol_class(w, 4.0, 3, 10.0).pass);
    CHECK_FALSE(check_symbol_class(w, 1.0, 3, 10.0).pass);
  }
}

TEST_CASE("quantize multiplication", "[symbols]") {
  const auto& basis = harmonic_basis();
  const int n = basis.n_modes;

  SECTION("W = 1 gives the identity") {
    QPSymbol one = QPSymbol::zero(1, 0.0);
    one.add_mode({0}, 1.0, [](double) -> cplx { return 1.0; });
    auto op = quantize_multiplication(one, basis);
    CHECK((*op.coeff({0}) - Mat::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-12);
  }

  SECTION("W = V: <v_i, V v_j> = lambda_j delta_ij - <v_i, (-dxx) v_j>") {
    PotentialSpec spec = harmonic();
    QPSymbol v = QPSymbol::zero(1, 2.0);
    v.add_mode({0}, 1.0, [spec](double x) -> cplx { return spec.eval(x); });
    auto op = quantize_multiplication(v, basis);

    DiscretizationParams disc;
    disc.grid_points = 1025;
    auto h0 = build_h0(spec, disc);
    // kinetic part = H0 - diag(V) applied to eigenvectors, projected
    RMat kin(basis.grid.m, n);
    for (int j = 0; j < n; ++j)
      kin.col(j) = h0.apply(basis.eigenvectors.col(j)) -
                   basis.grid.x.unaryExpr([&](double x) { return spec.eval(x); })
                           .cwiseProduct(basis.eigenvectors.col(j));
    RMat kproj = basis.eigenvectors.transpose() * kin;
    Mat expected = RMat(basis.eigenvalues.asDiagonal()).cast<cplx>() - kproj.cast<cplx>();
    CHECK((*op.coeff({0}) - expected).cwiseAbs().maxCoeff() < 1e-9);
  }

  SECTION("W = x on the harmonic basis: ladder selection rule") {
    QPSymbol xsym = QPSymbol::zero(1, 1.0);
    xsym.add_mode({0}, 1.0, [](double x) -> cplx { return x; });
    auto op = quantize_multiplication(xsym, basis);
    const Mat& m = *op.coeff({0});
    for (int i = 0; i < n - 5; ++i)
      for (int j = 0; j < n - 5; ++j) {
        if (std::abs(i - j) == 1) {
          // x_{j,j+1} = sqrt((j+1)/2) for H = -dxx + x^2
          const int lo = std::min(i, j);
          CHECK(std::abs(m(i, j)) ==
                Catch::Approx(std::sqrt((lo + 1) / 2.0)).epsilon(1e-7));
        } else {
          CHECK(std::abs(m(i, j)) < 1e-8);
        }
      }
  }
}

TEST_CASE("quantize magnetic", "[symbols]") {
  const auto& basis = harmonic_basis();
  const int n = basis.n_modes;

  SECTION("W1 = 0 gives zero") {
    auto op = quantize_magnetic(QPSymbol::zero(1, 0.0), basis);
    CHECK(op.coeffs.empty());
  }

  SECTION("W1 = 1 gives the momentum matrix") {
    QPSymbol one = QPSymbol::zero(1, 0.0);
    one.add_mode({0}, 1.0, [](double) -> cplx { return 1.0; });
    auto op = quantize_magnetic(one, basis);
    CHECK((*op.coeff({0}) - basis.momentum_matrix).cwiseAbs().maxCoeff() < 1e-12);
  }

  SECTION("W1 = x vs dense grid assembly of (PX+XP)/2") {
    QPSymbol xsym = QPSymbol::zero(1, 1.0);
    xsym.add_mode({0}, 1.0, [](double x) -> cplx { return x; });
    auto op = quantize_magnetic(xsym, basis);

    // independent dense route: P and X as full grid matrices
    DiscretizationParams disc;
    disc.grid_points = 1025;
    auto h0 = build_h0(harmonic(), disc);
    const int m = h0.grid.m;
    RMat d = RMat::Zero(m, m);
    {
      RMat eye = RMat::Identity(m, m);
      d = derivative_apply(h0, eye);
    }
    RMat xg = RMat(h0.grid.x.asDiagonal());
    Mat pg = cplx(0, -1) * d.cast<cplx>();
    Mat gg = 0.5 * (pg * xg.cast<cplx>() + xg.cast<cplx>() * pg);
    Mat proj = basis.eigenvectors.cast<cplx>().transpose() * gg * basis.eigenvectors.cast<cplx>();
    CHECK((*op.coeff({0}) - proj).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("assemble hamiltonian", "[symbols]") {
  const auto& basis = harmonic_basis();
  const int n = basis.n_modes;
  QPSymbol w0 = cos_phi_symbol(1, {1}, angle_pow(0.5), 0.5);
  QPSymbol w1 = cos_phi_symbol(1, {1}, [](double x) -> cplx { return x / (1.0 + x * x); }, -1.0);

  SECTION("eps = 0 is exactly diag(lambda)") {
    auto h = assemble_hamiltonian(0.0, w0, w1, basis, 3);
    REQUIRE(h.coeffs.size() == 1);
    CHECK((*h.coeff({0}) - Mat(basis.eigenvalues.cast<cplx>().asDiagonal())).cwiseAbs().maxCoeff() ==
          0.0);
  }

  SECTION("W1 = 0: diag(lambda) + eps Mult(W0)") {
    auto h = assemble_hamiltonian(1e-2, w0, QPSymbol::zero(1), basis, 3);
    auto m0 = quantize_multiplication(w0, basis);
    Mat expected = 1e-2 * (*m0.coeff({1}));
    CHECK((*h.coeff({1}) - expected).cwiseAbs().maxCoeff() < 1e-14);
  }

  SECTION("full-grid oracle at phi = 0.7") {
    const double eps = 1e-3;
    auto h = assemble_hamiltonian(eps, w0, w1, basis, 3);
    RVec phi(1);
    phi << 0.7;
    Mat hb = h.eval(phi);

    DiscretizationParams disc;
    disc.grid_points = 1025;
    auto h0 = build_h0(harmonic(), disc);
    const int m = h0.grid.m;
    RMat eye = RMat::Identity(m, m);
    RMat d = derivative_apply(h0, eye);
    Mat pg = cplx(0, -1) * d.cast<cplx>();
    RVec w1g(m), w0g(m);
    for (int i = 0; i < m; ++i) {
      w1g[i] = w1.eval(h0.grid.x[i], phi);
      w0g[i] = w0.eval(h0.grid.x[i], phi);
    }
    Mat hg = h0.to_dense().cast<cplx>() + eps * Mat(w0g.cast<cplx>().asDiagonal()) +
             eps * eps * Mat(w1g.cwiseProduct(w1g).cast<cplx>().asDiagonal()) -
             eps * (pg * Mat(w1g.cast<cplx>().asDiagonal()) +
                    Mat(w1g.cast<cplx>().asDiagonal()) * pg);
    Mat proj = basis.eigenvectors.cast<cplx>().transpose() * hg * basis.eigenvectors.cast<cplx>();
    CHECK((hb - proj).cwiseAbs().maxCoeff() < 1e-8);
  }

  SECTION("hermitian family at random phases; reality structure exact") {
    auto h = assemble_hamiltonian(1e-2, w0, w1, basis, 3);
    CHECK(h.herm_family_defect() < 1e-14);
    SplitMix64 rng(42);
    for (int t = 0; t < 100; ++t) {
      RVec phi(1);
      phi << rng.uniform(0, 2 * pi);
      Mat hp = h.eval(phi);
      CHECK((hp - hp.adjoint()).cwiseAbs().maxCoeff() < 1e-10);
    }
  }

  SECTION("W1^2 convolution widens the Fourier support") {
    auto h = assemble_hamiltonian(1e-2, QPSymbol::zero(1), w1, basis, 1);
    CHECK(h.k_support() == 2);  // cos^2 generates |k| = 2
    CHECK(h.k_cutoff == 2);
  }
}
