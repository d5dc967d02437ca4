#pragma once

// Discretized H0 = -d_xx + V(x): banded finite differences on a symmetric
// grid, eigenpairs via LAPACK, Sobolev weights, and the classical-orbit
// quadratures (period, flow averages) used as semiclassical oracles.

#include "kamred/common.hpp"
#include "kamred/potential.hpp"

#include <lapacke.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>

namespace kamred {

// Interior points of [-L,L] with Dirichlet walls; m odd so that x=0 is a node
// and the grid is exactly symmetric under x -> -x.
struct Grid {
  double L = 0;
  int m = 0;
  double h = 0;
  RVec x;

  static Grid make(double halfwidth, int points) {
    if (points < 9 || points % 2 == 0)
      throw error(stage::basis, "grid: need an odd number of points >= 9");
    Grid g;
    g.L = halfwidth;
    g.m = points;
    g.h = 2.0 * halfwidth / (points + 1);
    g.x.resize(points);
    const int c = (points - 1) / 2;
    for (int i = 0; i < points; ++i) g.x[i] = (i - c) * g.h;  // exactly reflection-symmetric
    return g;
  }
};

struct DiscretizationParams {
  int grid_points = 1025;  // odd
  int n_keep = 0;          // 0 -> grid_points/3
  int fd_order = 10;       // 2, 6 or 10

  int resolve_n_keep() const { return n_keep > 0 ? n_keep : grid_points / 3; }
};

namespace detail {

// Central finite-difference weights (Fornberg). second[]: weights of
// f(x +- m h) in d^2f/dx^2; first[]: antisymmetric weights in df/dx.
struct FdStencil {
  std::vector<double> second;  // index 0 = center
  std::vector<double> first;   // index 0 unused (0), m>0 coefficient of f(x+mh)
};

inline FdStencil fd_stencil(int order) {
  FdStencil s;
  switch (order) {
    case 2:
      s.second = {-2.0, 1.0};
      s.first = {0.0, 1.0 / 2.0};
      break;
    case 6:
      s.second = {-49.0 / 18.0, 3.0 / 2.0, -3.0 / 20.0, 1.0 / 90.0};
      s.first = {0.0, 3.0 / 4.0, -3.0 / 20.0, 1.0 / 60.0};
      break;
    case 10:
      s.second = {-5269.0 / 1800.0, 5.0 / 3.0, -5.0 / 21.0,
                  5.0 / 126.0,      -5.0 / 1008.0, 1.0 / 3150.0};
      s.first = {0.0, 5.0 / 6.0, -5.0 / 21.0, 5.0 / 84.0, -5.0 / 504.0, 1.0 / 1260.0};
      break;
    default:
      throw error(stage::basis, "fd_order must be 2, 6 or 10");
  }
  return s;
}

}  // namespace detail

// Symmetric banded H0; band[b] holds the b-th superdiagonal (length m-b).
struct H0Matrix {
  Grid grid;
  RVec diag;
  std::vector<RVec> bands;
  int fd_order = 10;

  int bandwidth() const { return int(bands.size()); }

  RMat to_dense() const {
    const int m = grid.m;
    RMat a = RMat::Zero(m, m);
    a.diagonal() = diag;
    for (int b = 1; b <= bandwidth(); ++b)
      for (int i = 0; i + b < m; ++i) a(i, i + b) = a(i + b, i) = bands[b - 1][i];
    return a;
  }

  RVec apply(const RVec& v) const {
    const int m = grid.m;
    RVec r = diag.cwiseProduct(v);
    for (int b = 1; b <= bandwidth(); ++b)
      for (int i = 0; i + b < m; ++i) {
        r[i] += bands[b - 1][i] * v[i + b];
        r[i + b] += bands[b - 1][i] * v[i];
      }
    return r;
  }
};

inline H0Matrix build_h0(const PotentialSpec& spec, const DiscretizationParams& disc) {
  if (disc.grid_points <= 0)
    throw error(stage::basis, "build_h0: grid resolution must be positive");
  Grid g = Grid::make(spec.domain_halfwidth, disc.grid_points);
  validate_potential(spec, g.x);

  const auto st = detail::fd_stencil(disc.fd_order);
  const double ih2 = 1.0 / (g.h * g.h);
  H0Matrix h0;
  h0.grid = g;
  h0.fd_order = disc.fd_order;
  h0.diag.resize(g.m);
  for (int i = 0; i < g.m; ++i) h0.diag[i] = -st.second[0] * ih2 + spec.eval(g.x[i]);
  for (size_t b = 1; b < st.second.size(); ++b) {
    RVec band(g.m - int(b));
    band.setConstant(-st.second[b] * ih2);
    h0.bands.push_back(band);
  }
  return h0;
}

// First-derivative matrix d/dx as an antisymmetric banded operator applied to
// the eigenvector columns (Dirichlet clipping at the walls).
inline RMat derivative_apply(const H0Matrix& h0, const RMat& v) {
  const auto st = detail::fd_stencil(h0.fd_order);
  const int m = h0.grid.m;
  const double ih = 1.0 / h0.grid.h;
  RMat r = RMat::Zero(m, v.cols());
  for (size_t b = 1; b < st.first.size(); ++b) {
    const double c = st.first[b] * ih;
    const int bb = int(b);
    r.topRows(m - bb) += c * v.bottomRows(m - bb);
    r.bottomRows(m - bb) -= c * v.topRows(m - bb);
  }
  return r;
}

struct EigenBasis {
  int n_modes = 0;
  RVec eigenvalues;    // ascending, positive
  RMat eigenvectors;   // m x N, l2-orthonormal columns, fixed real sign
  Mat momentum_matrix; // N x N, -i d/dx in the eigenbasis (hermitian)
  RMat position_matrix;// N x N, x in the eigenbasis
  RMat dv;             // m x N, d/dx applied to eigenvectors (grid level)
  Grid grid;
  double ell = 1.0;
  double d_exponent = 1.0;
  double max_residual = 0.0;  // max_j ||H0 v_j - lambda_j v_j|| / lambda_j

  RVec position_grid() const { return grid.x; }
};

// All eigenpairs of the banded H0 via LAPACK dsbevd, then Galerkin data for
// the lowest n_keep modes.
inline EigenBasis eigendecompose(const H0Matrix& h0, const PotentialSpec& spec, int n_keep,
                                 double tol_eig = 1e-8, double degeneracy_gap = 1e-8) {
  const int m = h0.grid.m;
  if (n_keep <= 0) n_keep = m / 3;
  if (n_keep > m / 3)
    throw error(stage::basis, "eigendecompose: n_keep must be <= grid_dim/3 "
                              "(upper spectrum is discretization artifact)");

  const int kd = h0.bandwidth();
  // LAPACK banded storage, uplo='L', column-major: ab(i, j) = A(j+i, j)
  std::vector<double> ab(size_t(kd + 1) * m, 0.0);
  for (int j = 0; j < m; ++j) {
    ab[size_t(j) * (kd + 1)] = h0.diag[j];
    for (int b = 1; b <= kd && j + b < m; ++b)
      ab[size_t(j) * (kd + 1) + b] = h0.bands[b - 1][j];
  }
  std::vector<double> w(m), z(size_t(m) * m);
  int info = LAPACKE_dsbevd(LAPACK_COL_MAJOR, 'V', 'L', m, kd, ab.data(), kd + 1,
                            w.data(), z.data(), m);
  if (info != 0)
    throw error(stage::basis, "eigendecompose: dsbevd failed, info = " + std::to_string(info));

  EigenBasis basis;
  basis.grid = h0.grid;
  basis.ell = spec.ell;
  basis.d_exponent = spec.d_exponent();
  basis.n_modes = n_keep;
  basis.eigenvalues = Eigen::Map<RVec>(w.data(), m).head(n_keep);
  basis.eigenvectors = Eigen::Map<RMat>(z.data(), m, m).leftCols(n_keep);

  if (basis.eigenvalues[0] <= 0.0)
    throw error(stage::basis, "eigendecompose: nonpositive eigenvalue (potential not confining?)");
  for (int j = 0; j + 1 < n_keep; ++j) {
    const double gap = basis.eigenvalues[j + 1] - basis.eigenvalues[j];
    if (gap <= degeneracy_gap * std::abs(basis.eigenvalues[j + 1]))
      throw error(stage::basis, "eigendecompose: near-degenerate retained eigenvalues at j = " +
                                    std::to_string(j) + " (1D spectrum must be simple)");
  }

  // fix sign: first grid point where the mode is resolvably nonzero is positive
  for (int j = 0; j < n_keep; ++j) {
    auto col = basis.eigenvectors.col(j);
    const double big = col.cwiseAbs().maxCoeff();
    for (int i = 0; i < m; ++i) {
      if (std::abs(col[i]) > 1e-6 * big) {
        if (col[i] < 0) basis.eigenvectors.col(j) = -col;
        break;
      }
    }
  }

  for (int j = 0; j < n_keep; ++j) {
    const RVec r = h0.apply(basis.eigenvectors.col(j)) -
                   basis.eigenvalues[j] * basis.eigenvectors.col(j);
    basis.max_residual = std::max(basis.max_residual, r.norm() / basis.eigenvalues[j]);
  }
  if (basis.max_residual > tol_eig)
    throw error(stage::basis, "eigendecompose: eigenpair residual " +
                                  std::to_string(basis.max_residual) + " exceeds tolerance");

  basis.dv = derivative_apply(h0, basis.eigenvectors);
  RMat s = basis.eigenvectors.transpose() * basis.dv;  // antisymmetric
  s = 0.5 * (s - s.transpose());                       // enforce exactly
  basis.momentum_matrix = cplx(0, -1) * s.cast<cplx>();
  basis.position_matrix =
      basis.eigenvectors.transpose() * h0.grid.x.asDiagonal() * basis.eigenvectors;
  return basis;
}

inline EigenBasis make_basis(const PotentialSpec& spec, const DiscretizationParams& disc) {
  return eigendecompose(build_h0(spec, disc), spec, disc.resolve_n_keep());
}

// H^s ladder weights w_j = (1+lambda_j)^{s(l+1)/(2l)}  (graph norm of K0^s).
struct SobolevWeights {
  double s = 0;
  RVec weights;

  static SobolevWeights make(const EigenBasis& basis, double s) {
    SobolevWeights w;
    w.s = s;
    const double p = s * (basis.ell + 1.0) / (2.0 * basis.ell);
    w.weights = (1.0 + basis.eigenvalues.array()).pow(p).matrix();
    return w;
  }
};

inline double sobolev_norm(const Vec& coeffs, double s, const EigenBasis& basis) {
  const auto w = SobolevWeights::make(basis, s);
  double acc = 0;
  for (int j = 0; j < coeffs.size(); ++j) acc += std::norm(coeffs[j]) * w.weights[j] * w.weights[j];
  return std::sqrt(acc);
}

struct ExponentFit {
  double d_est = 0;
  double c_est = 0;
  double residual = 0;
};

// least-squares fit of log(lambda_j) vs log(j) over [j_min, j_max]
inline ExponentFit fit_eigenvalue_exponent(const EigenBasis& basis, int j_min, int j_max) {
  j_max = std::min(j_max, basis.n_modes - 1);
  if (j_min < 1 || j_max - j_min + 1 < 8)
    throw error(stage::basis, "fit_eigenvalue_exponent: need at least 8 modes with j >= 1");
  const int n = j_max - j_min + 1;
  RVec lx(n), ly(n);
  for (int i = 0; i < n; ++i) {
    lx[i] = std::log(double(j_min + i));
    ly[i] = std::log(basis.eigenvalues[j_min + i]);
  }
  const LineFit f = fit_line(lx, ly);
  return {f.slope, std::exp(f.intercept), f.residual};
}

// --- classical mechanics of h0 = xi^2 + V(x) (so xdot = 2 xi) ---

inline double turning_point(double energy, const PotentialSpec& spec) {
  if (energy <= spec.eval(0.0))
    throw error(stage::basis, "turning_point: energy below the well bottom");
  double hi = 1.0;
  int guard = 0;
  while (spec.eval(hi) < energy) {
    hi *= 2.0;
    if (++guard > 200) throw error(stage::basis, "turning_point: bracketing failed");
  }
  double lo = hi * 0.5 < 1.0 ? 0.0 : hi * 0.5;
  if (spec.eval(lo) >= energy) lo = 0.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (spec.eval(mid) < energy ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// T(E) = 2 int_0^{x_t} dx / sqrt(E - V); substitution x = x_t sin(theta)
// absorbs the inverse-square-root endpoint singularity.
inline double classical_period(double energy, const PotentialSpec& spec, int quad_points = 96) {
  const double xt = turning_point(energy, spec);
  static thread_local std::map<int, Quadrature> cache;
  auto it = cache.find(quad_points);
  if (it == cache.end()) it = cache.emplace(quad_points, gauss_legendre(quad_points)).first;
  const Quadrature& q = it->second;

  double acc = 0;
  for (int i = 0; i < quad_points; ++i) {
    const double theta = 0.25 * pi * (q.nodes[i] + 1.0);  // [0, pi/2]
    const double x = xt * std::sin(theta);
    const double den = energy - spec.eval(x);
    acc += q.weights[i] * xt * std::cos(theta) / std::sqrt(std::max(den, 1e-300));
  }
  return 2.0 * acc * 0.25 * pi;
}

// (1/T) closed-orbit time average of g(x, xi, phi) at energy E, both branches
// xi = +-sqrt(E-V) folded in, reparametrized through x = x_t sin(theta).
inline double flow_average(const std::function<double(double, double, const RVec&)>& g,
                           double energy, const RVec& phi, const PotentialSpec& spec,
                           int quad_points = 96) {
  const double xt = turning_point(energy, spec);
  static thread_local std::map<int, Quadrature> cache;
  auto it = cache.find(quad_points);
  if (it == cache.end()) it = cache.emplace(quad_points, gauss_legendre(quad_points)).first;
  const Quadrature& q = it->second;

  double acc = 0;
  for (int i = 0; i < quad_points; ++i) {
    const double theta = 0.5 * pi * q.nodes[i];  // [-pi/2, pi/2]
    const double x = xt * std::sin(theta);
    const double den = energy - spec.eval(x);
    const double xi = std::sqrt(std::max(den, 0.0));
    const double avg_branches = 0.5 * (g(x, xi, phi) + g(x, -xi, phi));
    acc += q.weights[i] * xt * std::cos(theta) * avg_branches / std::sqrt(std::max(den, 1e-300));
  }
  acc *= 0.5 * pi;  // dtheta jacobian of [-1,1] -> [-pi/2,pi/2]
  // acc is the closed-orbit time integral of g; divide by the period
  return acc / classical_period(energy, spec, quad_points);
}

// --- binary cache ---

inline std::uint64_t basis_cache_key(const PotentialSpec& spec, const DiscretizationParams& disc) {
  std::string s = "v1;" + std::to_string(spec.ell) + ";" + std::to_string(spec.domain_halfwidth);
  for (auto& [d, c] : spec.lower_terms) s += ";" + std::to_string(d) + ":" + std::to_string(c);
  s += ";" + std::to_string(disc.grid_points) + ";" + std::to_string(disc.resolve_n_keep()) +
       ";" + std::to_string(disc.fd_order);
  return fnv1a(s);
}

inline void save_basis(const EigenBasis& b, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw error(stage::io, "save_basis: cannot open " + path);
  const char magic[8] = {'K', 'R', 'B', 'A', 'S', '1', 0, 0};
  f.write(magic, 8);
  auto wi = [&](std::int64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); };
  auto wd = [&](const double* p, size_t n) { f.write(reinterpret_cast<const char*>(p), 8 * n); };
  wi(b.n_modes);
  wi(b.grid.m);
  wd(&b.grid.L, 1);
  wd(&b.ell, 1);
  wd(&b.max_residual, 1);
  wd(b.eigenvalues.data(), b.n_modes);
  wd(b.eigenvectors.data(), size_t(b.grid.m) * b.n_modes);
  wd(b.dv.data(), size_t(b.grid.m) * b.n_modes);
}

inline bool load_basis(EigenBasis& b, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) return false;
  char magic[8];
  f.read(magic, 8);
  if (std::string(magic, 6) != "KRBAS1") return false;
  std::int64_t n_modes = 0, m = 0;
  f.read(reinterpret_cast<char*>(&n_modes), 8);
  f.read(reinterpret_cast<char*>(&m), 8);
  double L = 0;
  f.read(reinterpret_cast<char*>(&L), 8);
  f.read(reinterpret_cast<char*>(&b.ell), 8);
  f.read(reinterpret_cast<char*>(&b.max_residual), 8);
  b.grid = Grid::make(L, int(m));
  b.n_modes = int(n_modes);
  b.d_exponent = 2.0 * b.ell / (b.ell + 1.0);
  b.eigenvalues.resize(n_modes);
  b.eigenvectors.resize(m, n_modes);
  b.dv.resize(m, n_modes);
  f.read(reinterpret_cast<char*>(b.eigenvalues.data()), 8 * n_modes);
  f.read(reinterpret_cast<char*>(b.eigenvectors.data()), 8 * m * n_modes);
  f.read(reinterpret_cast<char*>(b.dv.data()), 8 * m * n_modes);
  if (!f) return false;
  RMat s = b.eigenvectors.transpose() * b.dv;
  s = 0.5 * (s - s.transpose());
  b.momentum_matrix = cplx(0, -1) * s.cast<cplx>();
  b.position_matrix = b.eigenvectors.transpose() * b.grid.x.asDiagonal() * b.eigenvectors;
  return true;
}

}  // namespace kamred
