#pragma once

// KAM reducibility engine: solves the homological equation with the
// second-Melnikov small divisors and iterates quadratically convergent
// conjugation steps until the operator family is diagonal and
// time-independent. Includes the explicit diagonal time elimination
// c_j = sum_{k!=0} mu_jk/(i omega.k) e^{ik.phi}.

#include "kamred/conjugation.hpp"
#include "kamred/diophantine.hpp"

namespace kamred {

enum class TimeElimination {
  fused,       // homological solve includes the i=j, k!=0 divisors each step
  final_step,  // diagonal time dependence kept in normal form, removed once at the end
};

struct KamParams {
  double gamma = 0.05;
  double tau = 2.0;
  double d_exponent = 1.0;  // eigenvalue growth exponent, enters the divisor bound
  double tol_final = 1e-10;
  int max_steps = 12;
  int work_bandwidth = 0;  // 0 -> 3 * support of the input
  double weight_p = -1.0;  // exponent in the coefficient norm; <0 -> tau + 1
  double admissibility = 0.1;
  TimeElimination time_elim = TimeElimination::fused;
  bool check_spectrum = true;  // per-step unitary-similarity spectrum check

  double weight() const { return weight_p < 0 ? tau + 1.0 : weight_p; }
};

struct DiagonalTimeSeries {
  int n_freq = 1;
  std::map<KVec, Vec> mu;  // diagonal Fourier data; reality mu[-k] = conj(mu[k])

  bool empty() const {
    for (const auto& [k, v] : mu)
      if (v.cwiseAbs().maxCoeff() > 0) return false;
    return true;
  }
};

struct StepTrace {
  int step = 0;
  double eps = 0;            // residual after the step
  double theta = 0;          // log eps_{n+1} / log eps_n
  double min_divisor = 0;    // smallest |divisor| used in the solve
  double max_diag_shift = 0;
  double tail_mass = 0;      // Fourier mass dropped by the working-band truncation
  double spectrum_defect = 0;
  double herm_defect = 0;
};

struct KAMState {
  int step_index = 0;
  RVec diag;
  QPOperator pert;
  DiagonalTimeSeries mu;  // used in final_step mode
  std::vector<QPUnitary> unitaries;
  std::vector<double> eps_history;
  std::vector<StepTrace> trace;
};

// X_{ij,k} = pert_{ij,k} / (i (omega.k + lambda_i - lambda_j)) away from the
// resonant set {k=0, i=j}. Divisors below the safety floor
// gamma/2 (1+|i^d-j^d|)/(1+|k|^tau) excise the frequency.
inline QPOperator homological_solve(const RVec& diag, const QPOperator& pert, const RVec& omega,
                                    double gamma, double tau, double d,
                                    double* min_divisor_out = nullptr) {
  const int n = pert.dim;
  QPOperator x = QPOperator::zero(pert.n_freq, n, pert.k_cutoff);
  double min_div = std::numeric_limits<double>::infinity();
  const double negligible = 1e-15 * std::max(1.0, pert.max_abs());

  for (const auto& [k, c] : pert.coeffs) {
    const double omk = kdot(omega, k);
    const bool kzero = kis_zero(k);
    Mat xk = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        if (kzero && i == j) continue;
        const cplx p = c(i, j);
        if (std::abs(p) == 0.0) continue;
        const double div = omk + diag[i] - diag[j];
        const double floor = 0.5 * gamma *
                             (1.0 + std::abs(std::pow(double(i), d) - std::pow(double(j), d))) /
                             (1.0 + std::pow(double(knorm1(k)), tau));
        if (std::abs(div) < floor) {
          if (std::abs(p) <= negligible) continue;  // nothing to divide
          throw error(stage::frequency,
                      "homological_solve: divisor " + std::to_string(div) + " below the floor " +
                          std::to_string(floor) + " at (i,j,k) = (" + std::to_string(i) + "," +
                          std::to_string(j) + "," + kstr(k) + "); frequency excised");
        }
        min_div = std::min(min_div, std::abs(div));
        xk(i, j) = p / cplx(0.0, div);
      }
    if (xk.squaredNorm() > 0) x.add(k, xk);
  }
  x.hermitize();
  if (min_divisor_out) *min_divisor_out = min_div;
  return x;
}

namespace detail {

// split a conjugated operator into (diagonal average, diagonal time series,
// off-diagonal remainder) according to the elimination mode
inline void resplit(const QPOperator& a, TimeElimination mode, RVec& diag, QPOperator& pert,
                    DiagonalTimeSeries& mu, double& max_diag_shift) {
  const int n = a.dim;
  pert = QPOperator::zero(a.n_freq, n, a.k_cutoff);
  mu.n_freq = a.n_freq;
  mu.mu.clear();
  max_diag_shift = 0;

  for (const auto& [k, c] : a.coeffs) {
    if (kis_zero(k)) {
      Mat off = c;
      for (int j = 0; j < n; ++j) {
        const double shift = c(j, j).real() - diag[j];
        max_diag_shift = std::max(max_diag_shift, std::abs(shift));
        off(j, j) = 0.0;
      }
      for (int j = 0; j < n; ++j) diag[j] = c(j, j).real();
      if (off.squaredNorm() > 0) pert.add(k, off);
    } else if (mode == TimeElimination::final_step) {
      Mat off = c;
      Vec d = c.diagonal();
      off.diagonal().setZero();
      if (d.cwiseAbs().maxCoeff() > 0) mu.mu[k] = d;
      if (off.squaredNorm() > 0) pert.add(k, off);
    } else {
      if (c.squaredNorm() > 0) pert.add(k, c);
    }
  }
  pert.hermitize();
  pert.prune(1e-300);
}

inline QPOperator to_operator(const RVec& diag, const QPOperator& pert,
                              const DiagonalTimeSeries& mu) {
  QPOperator a = pert;
  a.add(KVec(pert.n_freq, 0), Mat(diag.cast<cplx>().asDiagonal()));
  for (const auto& [k, v] : mu.mu) a.add(k, Mat(v.asDiagonal()));
  return a;
}

}  // namespace detail

inline KAMState init_kam_state(const QPOperator& h1, const KamParams& params) {
  KAMState st;
  st.diag = RVec::Zero(h1.dim);
  double shift = 0;
  detail::resplit(h1, params.time_elim, st.diag, st.pert, st.mu, shift);
  st.eps_history.push_back(st.pert.weighted_norm(params.weight()));
  return st;
}

// one quadratic step: solve, conjugate by exp(-iX), absorb the new diagonal
inline KAMState kam_step(const KAMState& state, const RVec& omega, const KamParams& params) {
  if (state.eps_history.back() > params.admissibility)
    throw error(stage::kam, "kam_step: residual " + std::to_string(state.eps_history.back()) +
                                " above the admissibility threshold");

  StepTrace tr;
  tr.step = state.step_index + 1;

  QPOperator x = homological_solve(state.diag, state.pert, omega, params.gamma, params.tau,
                                   params.d_exponent, &tr.min_divisor);
  QPUnitary u = QPUnitary::exp_generator(x);

  QPOperator a = detail::to_operator(state.diag, state.pert, state.mu);
  // the band must hold several generator convolutions, or the aliased tail
  // puts a floor above tol_final
  const int sup = std::max(1, a.k_support());
  const int bw = params.work_bandwidth > 0 ? params.work_bandwidth
                                           : std::max(3 * sup, sup + 8);
  ConjugationParams cp;
  cp.out_cutoff = bw;
  cp.work_bandwidth = bw;
  cp.throw_on_tail = false;
  ConjugationResult conj = conjugate(a, u, omega, cp);
  tr.tail_mass = conj.dropped_mass;
  tr.herm_defect = conj.h_plus.herm_family_defect();

  if (params.check_spectrum) {
    SplitMix64 rng(0xabcdULL + state.step_index);
    for (int s = 0; s < 5; ++s) {
      RVec phi(a.n_freq);
      for (int dd = 0; dd < a.n_freq; ++dd) phi[dd] = rng.uniform(0.0, 2.0 * pi);
      Mat ap = a.eval(phi);
      Mat up = u.eval(phi);
      Eigen::SelfAdjointEigenSolver<Mat> e1(ap);
      Eigen::SelfAdjointEigenSolver<Mat> e2(Mat(up.adjoint() * ap * up));
      tr.spectrum_defect = std::max(
          tr.spectrum_defect, (e1.eigenvalues() - e2.eigenvalues()).cwiseAbs().maxCoeff());
    }
  }

  KAMState next;
  next.step_index = state.step_index + 1;
  next.diag = state.diag;
  next.unitaries = state.unitaries;
  next.unitaries.push_back(u);
  next.eps_history = state.eps_history;
  next.trace = state.trace;

  detail::resplit(conj.h_plus, params.time_elim, next.diag, next.pert, next.mu,
                  tr.max_diag_shift);
  next.pert.prune(1e-18 * std::max(1.0, next.pert.max_abs()));

  const double eps_new = next.pert.weighted_norm(params.weight());
  const double eps_old = state.eps_history.back();
  tr.eps = eps_new;
  tr.theta = (eps_new > 0 && eps_old > 0 && eps_old < 1.0)
                 ? std::log(eps_new) / std::log(eps_old)
                 : 0.0;
  next.eps_history.push_back(eps_new);
  next.trace.push_back(tr);

  // growth high above the target signals resonance or cutoff starvation;
  // near the target it is just the numerical floor (handled by the caller)
  if (eps_new >= eps_old && eps_old > 100.0 * params.tol_final)
    throw error(stage::kam, "kam_step: residual grew from " + to_sci(eps_old) + " to " +
                                to_sci(eps_new) + " (resonance or cutoff starvation)");
  return next;
}

struct TimeEliminationResult {
  std::map<KVec, Vec> c_coeffs;  // c_j Fourier coefficients per k != 0
  QPUnitary unitary;             // diag(e^{-i c_j(phi)})
  RVec lambda0;                  // diagonal after averaging
};

// Exact diagonal normal-form step: c_j = sum_{k!=0} mu_jk/(i omega.k) e^{ik.phi},
// lambda0_j = lambda_j + mu_j0. omega.d_phi c_j = mu_j - <mu_j> identically.
inline TimeEliminationResult eliminate_diagonal_time(const DiagonalTimeSeries& mu,
                                                     const RVec& lambda, const RVec& omega,
                                                     double gamma, double tau) {
  TimeEliminationResult res;
  res.lambda0 = lambda;
  const int dim = int(lambda.size());
  for (const auto& [k, v] : mu.mu) {
    if (kis_zero(k)) {
      res.lambda0 += v.real();
      continue;
    }
    const double omk = kdot(omega, k);
    const double floor = 0.5 * gamma / std::pow(double(knorm1(k)), tau);
    if (std::abs(omk) < floor && v.cwiseAbs().maxCoeff() > 1e-15)
      throw error(stage::frequency, "eliminate_diagonal_time: |omega.k| below the Diophantine "
                                    "floor at k = " + kstr(k));
    res.c_coeffs[k] = v / cplx(0.0, omk);
  }
  res.unitary = res.c_coeffs.empty()
                    ? QPUnitary::identity(mu.n_freq, dim)
                    : QPUnitary::diagonal_phase(mu.n_freq, dim, res.c_coeffs);
  return res;
}

struct KamResult {
  bool converged = false;
  RVec lambda_inf;
  QPUnitary u_total;
  std::vector<StepTrace> trace;
  std::vector<double> eps_history;
  double final_residual = 0;
  std::string failure;
};

// Iterates kam_step until the weighted residual drops below tol_final.
// Non-convergence (including frequency excision by a small divisor) is a
// structured failure carrying the trace, not an exception.
inline KamResult kam_iterate(const QPOperator& h1, const RVec& omega, const KamParams& params) {
  KamResult res;
  KAMState st = init_kam_state(h1, params);
  res.u_total = QPUnitary::identity(h1.n_freq, h1.dim);
  try {
    while (st.eps_history.back() > params.tol_final && st.step_index < params.max_steps) {
      st = kam_step(st, omega, params);
      const size_t m = st.eps_history.size();
      if (st.eps_history[m - 1] >= st.eps_history[m - 2]) break;  // numerical floor
    }

    if (st.eps_history.back() > params.tol_final) {
      res.failure = "residual stalled at " + to_sci(st.eps_history.back()) + " after " +
                    std::to_string(st.step_index) + " steps (tol " + to_sci(params.tol_final) +
                    ")";
    } else {
      res.converged = true;
    }
  } catch (const error& e) {
    res.failure = e.what();
  }

  res.lambda_inf = st.diag;
  res.trace = st.trace;
  res.eps_history = st.eps_history;
  res.final_residual = st.eps_history.back();

  std::vector<QPUnitary> factors = st.unitaries;
  if (res.converged && params.time_elim == TimeElimination::final_step && !st.mu.empty()) {
    auto elim = eliminate_diagonal_time(st.mu, st.diag, omega, params.gamma, params.tau);
    res.lambda_inf = elim.lambda0;
    factors.push_back(elim.unitary);
  }
  if (!factors.empty()) res.u_total = QPUnitary::product(std::move(factors));
  return res;
}

// --- interpolation diagnostic --------------------------------------------------

struct SmoothnessFit {
  std::map<KVec, RVec> residuals;    // delta_j per Fourier mode
  double decay_exponent = 0;         // fitted |delta_j| ~ j^{-kappa} on the k=0 mode
  std::function<double(double)> k0_fit;  // smooth fit <z>(E) of the k=0 diagonal
  bool well_conditioned = true;
};

// Per-mode least-squares fit of mu_{j,k} as a low-degree polynomial in the
// scaled variable u_j = lambda_j^{1/(2l)}; residuals delta_j should decay in j.
inline SmoothnessFit fit_diagonal_smoothness(const DiagonalTimeSeries& mu, const RVec& lambdas,
                                             double ell, int degree = 4) {
  const int n = int(lambdas.size());
  if (n < 12)
    throw error(stage::kam, "fit_diagonal_smoothness: need at least 12 resolved modes");
  SmoothnessFit fit;

  RVec u(n);
  for (int j = 0; j < n; ++j) u[j] = std::pow(lambdas[j], 1.0 / (2.0 * ell));
  const double ulo = u.minCoeff(), uhi = u.maxCoeff();
  RVec t = (2.0 * u.array() - (uhi + ulo)) / (uhi - ulo);  // scaled to [-1,1]

  RMat vander(n, degree + 1);
  for (int j = 0; j < n; ++j) {
    double p = 1.0;
    for (int q = 0; q <= degree; ++q) {
      vander(j, q) = p;
      p *= t[j];
    }
  }
  Eigen::ColPivHouseholderQR<RMat> qr(vander);
  if (qr.rank() < degree + 1) fit.well_conditioned = false;

  for (const auto& [k, v] : mu.mu) {
    RVec re = v.real(), im = v.imag();
    RVec cre = qr.solve(re), cim = qr.solve(im);
    RVec res_re = re - vander * cre, res_im = im - vander * cim;
    fit.residuals[k] = (res_re.array().square() + res_im.array().square()).sqrt();
    if (kis_zero(k)) {
      const double scale = 2.0 / (uhi - ulo), mid = 0.5 * (uhi + ulo);
      fit.k0_fit = [cre, scale, mid, ell](double energy) {
        const double tt = (std::pow(energy, 1.0 / (2.0 * ell)) - mid) * scale;
        double acc = 0, p = 1.0;
        for (int q = 0; q < cre.size(); ++q) {
          acc += cre[q] * p;
          p *= tt;
        }
        return acc;
      };
    }
  }

  // decay exponent of the k=0 residuals over the upper half of the range
  auto it = fit.residuals.find(KVec(mu.n_freq, 0));
  if (it != fit.residuals.end()) {
    std::vector<double> lx, ly;
    for (int j = n / 3; j < n; ++j) {
      if (it->second[j] <= 0) continue;
      lx.push_back(std::log(double(j)));
      ly.push_back(std::log(it->second[j]));
    }
    if (lx.size() >= 6) {
      RVec vx = Eigen::Map<RVec>(lx.data(), lx.size());
      RVec vy = Eigen::Map<RVec>(ly.data(), ly.size());
      fit.decay_exponent = -fit_line(vx, vy).slope;
    }
  }
  return fit;
}

}  // namespace kamred
