#pragma once

// Even anharmonic potentials V(x) ~ |x|^{2l} + lower-order even terms.

#include "kamred/common.hpp"

#include <cmath>

namespace kamred {

struct PotentialSpec {
  double ell = 1.0;  // growth exponent l >= 1; V ~ |x|^{2l}
  // expansion tail: (degree a_j, coefficient), degrees a_j = 2(l-j) by convention
  std::vector<std::pair<double, double>> lower_terms;
  double domain_halfwidth = 12.0;  // grid truncation L

  double eval(double x) const {
    const double ax = std::abs(x);
    double v = std::pow(ax, 2.0 * ell);
    for (const auto& [deg, c] : lower_terms) v += c * std::pow(ax, deg);
    return v;
  }

  double deriv(double x) const {
    const double ax = std::abs(x);
    if (ax == 0.0) return 0.0;
    const double sgn = x > 0 ? 1.0 : -1.0;
    double d = 2.0 * ell * std::pow(ax, 2.0 * ell - 1.0);
    for (const auto& [deg, c] : lower_terms)
      d += c * deg * std::pow(ax, deg - 1.0);
    return sgn * d;
  }

  double d_exponent() const { return 2.0 * ell / (ell + 1.0); }
};

// Validates the potential hypotheses on a grid: evenness, l=1 strictness and
// V' != 0 away from the origin (sign of finite differences, per (V3)).
inline void validate_potential(const PotentialSpec& spec, const RVec& x) {
  if (spec.ell < 1.0)
    throw error(stage::basis, "potential: growth exponent ell must be >= 1");
  if (spec.domain_halfwidth <= 0.0)
    throw error(stage::basis, "potential: domain halfwidth must be positive");
  if (spec.ell == 1.0 && !spec.lower_terms.empty())
    throw error(stage::basis, "potential: ell = 1 requires V(x) = x^2 exactly (no lower terms)");

  const int m = int(x.size());
  for (int i = 0; i < m; ++i) {
    const double v1 = spec.eval(x[i]);
    const double v2 = spec.eval(-x[i]);
    if (v1 != v2)
      throw error(stage::basis, "potential: V(x) != V(-x) at x = " + std::to_string(x[i]));
    if (!std::isfinite(v1))
      throw error(stage::basis, "potential: V not finite at x = " + std::to_string(x[i]));
  }

  // V' != 0 for x != 0: finite-difference slope must keep a fixed sign on x>0
  const double h = m > 1 ? x[1] - x[0] : 0.1;
  for (int i = 0; i + 1 < m; ++i) {
    const double xm = 0.5 * (x[i] + x[i + 1]);
    if (std::abs(xm) < 10.0 * h) continue;  // small neighborhood of 0 excluded
    const double slope = (spec.eval(x[i + 1]) - spec.eval(x[i])) / h;
    if (slope * xm <= 0.0)
      throw error(stage::basis,
                  "potential: V' vanishes or changes sign near x = " + std::to_string(xm) +
                      " (double well? hypothesis (V3) violated)");
  }
}

}  // namespace kamred
