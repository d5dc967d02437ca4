#include <catch2/catch_amalgamated.hpp>

#include "kamred/kam.hpp"

#include <cmath>

using namespace kamred;

namespace {

QPOperator diag_operator(const RVec& lam, int n_freq = 1) {
  QPOperator h = QPOperator::zero(n_freq, int(lam.size()), 1);
  h.add(KVec(n_freq, 0), Mat(lam.cast<cplx>().asDiagonal()));
  return h;
}

KamParams default_params() {
  KamParams p;
  p.gamma = 0.05;
  p.tau = 1.0;
  p.d_exponent = 1.0;
  return p;
}

}  // namespace

TEST_CASE("homological solve", "[kam]") {
  RVec omega(1);
  omega << 1.618;

  SECTION("zero perturbation gives zero generator") {
    RVec lam(3);
    lam << 1, 3, 5;
    auto x = homological_solve(lam, QPOperator::zero(1, 3, 1), omega, 0.05, 1.0, 1.0);
    CHECK(x.coeffs.empty());
  }

  SECTION("scalar diagonal mode: X = mu e^{i phi} / (i omega)") {
    RVec lam(1);
    lam << 2.0;
    QPOperator pert = QPOperator::zero(1, 1, 1);
    const cplx mu(3e-3, 1e-3);
    pert.add({1}, mu * Mat::Ones(1, 1));
    pert.add({-1}, std::conj(mu) * Mat::Ones(1, 1));
    auto x = homological_solve(lam, pert, omega, 0.05, 1.0, 1.0);
    CHECK(std::abs((*x.coeff({1}))(0, 0) - mu / cplx(0, omega[0])) < 1e-15);
  }

  SECTION("single off-diagonal entry and quadratic residual after one step") {
    RVec lam(2);
    lam << 1.0, 2.0;
    const double p = 1e-3;
    QPOperator pert = QPOperator::zero(1, 2, 1);
    Mat c = Mat::Zero(2, 2);
    c(0, 1) = p;
    pert.add({1}, c);
    pert.add({-1}, c.adjoint());

    auto x = homological_solve(lam, pert, omega, 0.05, 1.0, 1.0);
    const cplx expected = p / cplx(0, omega[0] + lam[0] - lam[1]);
    CHECK(std::abs((*x.coeff({1}))(0, 1) - expected) < 1e-16);

    KAMState st;
    st.diag = lam;
    st.pert = pert;
    st.eps_history.push_back(pert.weighted_norm(2.0));
    auto params = default_params();
    auto next = kam_step(st, omega, params);
    CHECK(next.eps_history.back() < 30.0 * st.eps_history[0] * st.eps_history[0]);
  }

  SECTION("divisor below the floor excises the frequency") {
    RVec lam(2);
    lam << 1.0, 1.0 + omega[0];  // lambda_0 - lambda_1 + omega = 0
    QPOperator pert = QPOperator::zero(1, 2, 1);
    Mat c = Mat::Zero(2, 2);
    c(0, 1) = 1e-3;
    pert.add({1}, c);
    pert.add({-1}, c.adjoint());
    CHECK_THROWS_AS(homological_solve(lam, pert, omega, 0.05, 1.0, 1.0), error);
  }
}

TEST_CASE("kam iteration", "[kam]") {
  RVec omega(1);
  omega << 1.618;

  SECTION("zero perturbation is a fixed point") {
    RVec lam(4);
    lam << 1, 3.1, 5.4, 7.9;
    auto res = kam_iterate(diag_operator(lam), omega, default_params());
    CHECK(res.converged);
    CHECK((res.lambda_inf - lam).cwiseAbs().maxCoeff() == 0.0);
    RVec phi(1);
    phi << 0.8;
    CHECK((res.u_total.eval(phi) - Mat::Identity(4, 4)).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("2x2 constant perturbation matches exact diagonalization") {
    RVec lam(2);
    lam << 1.0, 2.0;
    QPOperator h = diag_operator(lam);
    Mat v = Mat::Zero(2, 2);
    v(0, 1) = 0.1;
    v(1, 0) = 0.1;
    h.add({0}, v);

    auto res = kam_iterate(h, omega, default_params());
    REQUIRE(res.converged);
    Eigen::SelfAdjointEigenSolver<Mat> es(h.eval(RVec::Zero(1)));
    RVec sorted = res.lambda_inf;
    std::sort(sorted.data(), sorted.data() + 2);
    CHECK(std::abs(sorted[0] - es.eigenvalues()[0]) < 1e-10);
    CHECK(std::abs(sorted[1] - es.eigenvalues()[1]) < 1e-10);

    // the conjugation actually diagonalizes: U^† H U - i U^† dU = diag
    RVec phi(1);
    phi << 1.3;
    Mat u = res.u_total.eval(phi);
    CHECK((u.adjoint() * h.eval(phi) * u - Mat(res.lambda_inf.cast<cplx>().asDiagonal()))
              .cwiseAbs()
              .maxCoeff() < 1e-9);
  }

  SECTION("quadratic contraction on a quasi-periodic perturbation") {
    const int n = 8;
    RVec lam(n);
    for (int j = 0; j < n; ++j) lam[j] = 2.0 * j + 1.0;
    QPOperator h = diag_operator(lam);
    SplitMix64 rng(99);
    Mat c(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) c(i, j) = 1e-3 * cplx(rng.uniform(-1, 1), rng.uniform(-1, 1));
    h.add({1}, c);
    h.add({-1}, c.adjoint().eval());
    Mat c0(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) c0(i, j) = 1e-3 * cplx(rng.uniform(-1, 1), rng.uniform(-1, 1));
    h.add({0}, 0.5 * (c0 + c0.adjoint()).eval());

    auto params = default_params();
    auto res = kam_iterate(h, omega, params);
    REQUIRE(res.converged);
    CHECK(res.final_residual <= params.tol_final);

    int consecutive = 0, best = 0;
    for (const auto& tr : res.trace) {
      consecutive = (tr.theta >= 1.5) ? consecutive + 1 : 0;
      best = std::max(best, consecutive);
    }
    CHECK(best >= 2);

    // invariants: strictly decreasing residuals, spectrum preserved per step
    for (size_t i = 1; i < res.eps_history.size(); ++i)
      CHECK(res.eps_history[i] < res.eps_history[i - 1]);
    for (const auto& tr : res.trace) {
      CHECK(tr.spectrum_defect < 1e-9);
      CHECK(tr.herm_defect < 1e-9);
    }
  }

  SECTION("resonant frequency reports structured non-convergence") {
    RVec lam(3);
    lam << 1.0, 1.0 + omega[0], 4.0;  // gap hits omega exactly
    QPOperator h = diag_operator(lam);
    Mat c = Mat::Zero(3, 3);
    c(0, 1) = 5e-3;
    h.add({1}, c);
    h.add({-1}, c.adjoint().eval());
    auto res = kam_iterate(h, omega, default_params());
    CHECK_FALSE(res.converged);
    CHECK(res.failure.find("divisor") != std::string::npos);
  }

  SECTION("fused and final-step elimination reach the same fixed point") {
    const int n = 5;
    RVec lam(n);
    for (int j = 0; j < n; ++j) lam[j] = 1.0 + 2.2 * j;
    QPOperator h = diag_operator(lam);
    SplitMix64 rng(7);
    Mat c(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) c(i, j) = 2e-3 * cplx(rng.uniform(-1, 1), rng.uniform(-1, 1));
    h.add({1}, c);  // includes diagonal time dependence
    h.add({-1}, c.adjoint().eval());

    auto p1 = default_params();
    auto p2 = default_params();
    p2.time_elim = TimeElimination::final_step;
    auto r1 = kam_iterate(h, omega, p1);
    auto r2 = kam_iterate(h, omega, p2);
    REQUIRE(r1.converged);
    REQUIRE(r2.converged);
    CHECK((r1.lambda_inf - r2.lambda_inf).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("diagonal time elimination", "[kam]") {
  RVec omega(1);
  omega << 1.618;

  SECTION("constant mu: c = 0 and lambda shifts by mu") {
    DiagonalTimeSeries mu;
    mu.n_freq = 1;
    Vec v(3);
    v << 0.1, 0.2, 0.3;
    mu.mu[{0}] = v;
    RVec lam(3);
    lam << 1, 2, 3;
    auto res = eliminate_diagonal_time(mu, lam, omega, 0.05, 1.0);
    CHECK(res.c_coeffs.empty());
    CHECK(res.lambda0[0] == Catch::Approx(1.1));
    CHECK(res.lambda0[2] == Catch::Approx(3.3));
  }

  SECTION("mu = cos(phi): c = sin(phi)/omega") {
    DiagonalTimeSeries mu;
    mu.n_freq = 1;
    mu.mu[{1}] = 0.5 * Vec::Ones(2);
    mu.mu[{-1}] = 0.5 * Vec::Ones(2);
    RVec lam(2);
    lam << 1, 2;
    auto res = eliminate_diagonal_time(mu, lam, omega, 0.05, 1.0);
    for (double phi1 : {0.3, 1.9, 4.4}) {
      RVec phi(1);
      phi << phi1;
      Mat u = res.unitary.eval(phi);
      const cplx expected = std::exp(cplx(0, -std::sin(phi1) / omega[0]));
      CHECK(std::abs(u(0, 0) - expected) < 1e-14);
    }
  }

  SECTION("defining identity omega.d_phi c_j = mu_j - <mu_j> on a phase grid") {
    DiagonalTimeSeries mu;
    mu.n_freq = 1;
    SplitMix64 rng(5);
    const int n = 4;
    for (int k = 1; k <= 2; ++k) {
      Vec v(n);
      for (int j = 0; j < n; ++j) v[j] = cplx(rng.uniform(-1, 1), rng.uniform(-1, 1));
      mu.mu[{k}] = v;
      mu.mu[{-k}] = v.conjugate();
    }
    Vec v0(n);
    for (int j = 0; j < n; ++j) v0[j] = rng.uniform(-1, 1);
    mu.mu[{0}] = v0;

    RVec lam = RVec::Zero(n);
    auto res = eliminate_diagonal_time(mu, lam, omega, 0.001, 1.0);
    const int grid = 32;
    for (int g = 0; g < grid; ++g) {
      const double phi1 = 2.0 * pi * g / grid;
      for (int j = 0; j < n; ++j) {
        cplx dc = 0, muv = 0;
        for (const auto& [k, c] : res.c_coeffs)
          dc += c[j] * cplx(0, omega[0] * k[0]) * std::exp(cplx(0, k[0] * phi1));
        for (const auto& [k, m] : mu.mu)
          if (!kis_zero(k)) muv += m[j] * std::exp(cplx(0, k[0] * phi1));
        CHECK(std::abs(dc - muv) < 1e-13);
      }
    }
  }

  SECTION("non-certified frequency aborts") {
    DiagonalTimeSeries mu;
    mu.n_freq = 2;
    mu.mu[{3, -2}] = Vec::Ones(2);  // omega.k = 0 for the rational pair
    mu.mu[{-3, 2}] = Vec::Ones(2);
    RVec lam(2);
    lam << 1, 2;
    RVec om(2);
    om << 1.0, 1.5;
    CHECK_THROWS_AS(eliminate_diagonal_time(mu, lam, om, 0.05, 2.0), error);
  }
}

TEST_CASE("diagonal smoothness fit", "[kam]") {
  SECTION("exact polynomial in lambda gives zero residuals") {
    const int n = 20;
    RVec lam(n);
    for (int j = 0; j < n; ++j) lam[j] = std::pow(1.7 * (j + 0.5), 4.0 / 3.0);  // l = 2 shape
    DiagonalTimeSeries mu;
    mu.n_freq = 1;
    Vec v(n);
    for (int j = 0; j < n; ++j) v[j] = 0.3 + 0.01 * lam[j];
    mu.mu[{0}] = v;
    auto fit = fit_diagonal_smoothness(mu, lam, 2.0, 4);
    CHECK(fit.well_conditioned);
    CHECK(fit.residuals[{0}].maxCoeff() < 1e-10);
  }

  SECTION("quantum diagonal of <x> vs the classical orbit average") {
    PotentialSpec spec;
    spec.ell = 1.0;
    spec.domain_halfwidth = 14.0;
    DiscretizationParams disc;
    disc.grid_points = 1025;
    auto basis = eigendecompose(build_h0(spec, disc), spec, 60);

    QPSymbol w0 = QPSymbol::zero(1, 1.0);
    w0.add_mode({0}, 1.0, [](double x) -> cplx { return std::sqrt(1.0 + x * x); });
    auto op = quantize_multiplication(w0, basis);

    DiagonalTimeSeries mu;
    mu.n_freq = 1;
    mu.mu[{0}] = op.coeff({0})->diagonal();
    auto fit = fit_diagonal_smoothness(mu, basis.eigenvalues, 1.0, 5);

    auto g = [](double x, double, const RVec&) { return std::sqrt(1.0 + x * x); };
    RVec none;
    for (int j = 20; j <= 40; ++j) {
      const double classical = flow_average(g, basis.eigenvalues[j], none, spec);
      const double quantum = fit.k0_fit(basis.eigenvalues[j]);
      CHECK(std::abs(quantum - classical) / classical < 0.05);
    }
  }
}
