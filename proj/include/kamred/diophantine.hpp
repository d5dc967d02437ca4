#pragma once

// Frequency arithmetic: Diophantine certification |omega.k| >= gamma/|k|^tau,
// Monte Carlo estimation of the excluded measure, and the second Melnikov
// scan |lambda_i - lambda_j + omega.k| >= gamma(1+|i^d-j^d|)/(1+|k|^tau).

#include "kamred/common.hpp"

#include <cmath>
#include <functional>
#include <optional>

namespace kamred {

struct DiophantineCertificate {
  double gamma = 0;
  double tau = 0;
  int k_checked = 0;
};

struct FrequencyVector {
  RVec omega;
  std::optional<DiophantineCertificate> certificate;

  int n() const { return int(omega.size()); }

  void validate() const {
    for (int d = 0; d < omega.size(); ++d)
      if (omega[d] < 1.0 || omega[d] > 2.0)
        throw error(stage::frequency, "frequency component outside Omega = [1,2]^n");
  }
};

namespace detail {

// visits one representative of each pair {k, -k}, 0 < |k|_1 <= kmax,
// in a fixed deterministic order (first nonzero component positive)
inline void for_half_lattice(int n, int kmax, const std::function<void(const KVec&)>& fn) {
  KVec k(n, 0);
  std::function<void(int, int)> rec = [&](int dim, int budget) {
    if (dim == n) {
      for (int c : k)
        if (c != 0) {
          if (c > 0) fn(k);  // first nonzero positive -> half lattice
          return;
        }
      return;  // k = 0 skipped
    }
    for (int v = -budget; v <= budget; ++v) {
      k[dim] = v;
      rec(dim + 1, budget - std::abs(v));
    }
    k[dim] = 0;
  };
  rec(0, kmax);
}

}  // namespace detail

struct DiophantineScan {
  bool certified = false;
  double gamma_max = 0;  // min over scanned k of |omega.k| |k|_1^tau
  KVec worst_k;
};

// exhaustive scan over 0 < |k|_1 <= kmax; certifies iff gamma_max >= gamma
inline DiophantineScan check_diophantine(const RVec& omega, double gamma, double tau, int kmax) {
  const int n = int(omega.size());
  if (tau <= n - 1)
    throw error(stage::frequency, "check_diophantine: need tau > n-1");
  if (kmax < 1) throw error(stage::frequency, "check_diophantine: need K >= 1");
  DiophantineScan scan;
  scan.gamma_max = std::numeric_limits<double>::infinity();
  detail::for_half_lattice(n, kmax, [&](const KVec& k) {
    const double v = std::abs(kdot(omega, k)) * std::pow(double(knorm1(k)), tau);
    if (v < scan.gamma_max) {
      scan.gamma_max = v;
      scan.worst_k = k;
    }
  });
  scan.certified = scan.gamma_max >= gamma;
  return scan;
}

inline FrequencyVector certify(const RVec& omega, double gamma, double tau, int kmax) {
  FrequencyVector f;
  f.omega = omega;
  f.validate();
  const auto scan = check_diophantine(omega, gamma, tau, kmax);
  if (!scan.certified)
    throw error(stage::frequency, "frequency not Diophantine at gamma = " + std::to_string(gamma) +
                                      ": violation at k = " + kstr(scan.worst_k) +
                                      " (achievable gamma " + std::to_string(scan.gamma_max) + ")");
  f.certificate = DiophantineCertificate{gamma, tau, kmax};
  return f;
}

// Monte Carlo fraction of [1,2]^n failing the (gamma, tau, K) condition.
// Deterministic for a fixed seed.
inline double measure_estimate(double gamma, double tau, int n, int kmax, long n_samples,
                               std::uint64_t seed) {
  if (gamma == 0.0) return 0.0;
  // precompute the half lattice once
  std::vector<KVec> ks;
  detail::for_half_lattice(n, kmax, [&](const KVec& k) { ks.push_back(k); });
  std::vector<double> bounds(ks.size());
  for (size_t i = 0; i < ks.size(); ++i) bounds[i] = gamma / std::pow(double(knorm1(ks[i])), tau);

  SplitMix64 rng(seed);
  long excluded = 0;
  RVec omega(n);
  for (long s = 0; s < n_samples; ++s) {
    for (int d = 0; d < n; ++d) omega[d] = rng.uniform(1.0, 2.0);
    for (size_t i = 0; i < ks.size(); ++i) {
      if (std::abs(kdot(omega, ks[i])) < bounds[i]) {
        ++excluded;
        break;
      }
    }
  }
  return double(excluded) / double(n_samples);
}

struct MelnikovViolation {
  int i = 0, j = 0;
  KVec k;
  double divisor = 0;
  double bound = 0;
};

struct MelnikovReport {
  std::vector<MelnikovViolation> violations;
  double min_margin = 0;        // min over scanned of |divisor| - bound
  double min_divisor = 0;       // min |divisor| over scanned
  double achievable_gamma = 0;  // min |divisor| (1+|k|^tau)/(1+|i^d-j^d|)
  double binding_bound_factor = 0;  // (1+|i^d-j^d|)/(1+|k|^tau) at the margin argmin
  bool pass() const { return violations.empty(); }
};

// scan of the second Melnikov conditions, Eq. shape
// |lambda_i - lambda_j + omega.k| >= gamma (1+|i^d - j^d|)/(1+|k|^tau),
// over i,j < N, |k|_1 <= kmax, |i-j| + |k| != 0. The half lattice covers
// (j,i,-k) by symmetry of the absolute values.
inline MelnikovReport check_second_melnikov(const RVec& lambdas, const RVec& omega, double gamma,
                                            double tau, double d, int kmax,
                                            size_t max_violations = 50) {
  const int nmodes = int(lambdas.size());
  const int n = int(omega.size());
  MelnikovReport rep;
  rep.min_margin = std::numeric_limits<double>::infinity();
  rep.min_divisor = std::numeric_limits<double>::infinity();
  rep.achievable_gamma = std::numeric_limits<double>::infinity();

  auto visit = [&](int i, int j, const KVec& k, double omk) {
    const double div = std::abs(lambdas[i] - lambdas[j] + omk);
    const double growth = 1.0 + std::abs(std::pow(double(i), d) - std::pow(double(j), d));
    const double denom = 1.0 + std::pow(double(knorm1(k)), tau);
    const double bound = gamma * growth / denom;
    const double margin = div - bound;
    if (margin < rep.min_margin) {
      rep.min_margin = margin;
      rep.binding_bound_factor = growth / denom;
    }
    rep.min_divisor = std::min(rep.min_divisor, div);
    rep.achievable_gamma = std::min(rep.achievable_gamma, div * denom / growth);
    if (div < bound && rep.violations.size() < max_violations)
      rep.violations.push_back({i, j, k, lambdas[i] - lambdas[j] + omk, bound});
  };

  KVec zero(n, 0);
  for (int i = 0; i < nmodes; ++i)
    for (int j = 0; j < i; ++j) visit(i, j, zero, 0.0);  // k = 0, i != j
  detail::for_half_lattice(n, kmax, [&](const KVec& k) {
    const double omk = kdot(omega, k);
    for (int i = 0; i < nmodes; ++i)
      for (int j = 0; j < nmodes; ++j) visit(i, j, k, omk);
  });
  return rep;
}

}  // namespace kamred
