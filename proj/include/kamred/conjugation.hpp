#pragma once

// Quasi-periodic change of coordinates H+ = U^{-1}(H U - i omega.d_phi U),
// computed by phase-grid sampling and exact discrete Fourier analysis, plus
// the explicit gauge transformation e^{-i eps b} removing the magnetic term.

#include "kamred/symbols.hpp"

#include <Eigen/SVD>

#include <memory>
#include <variant>

namespace kamred {

// Uniform grid on T^n with P (odd) points per dimension. The same flat layout
// indexes samples (digit p, phi_p = 2 pi p / P) and Fourier modes
// (digit = k + B, k in [-B, B], P = 2B+1).
struct PhaseBox {
  int n = 1;
  int points = 1;

  PhaseBox(int n_, int points_) : n(n_), points(points_) {
    if (points % 2 == 0) throw error(stage::kam, "phase grid size must be odd");
  }

  int bandwidth() const { return (points - 1) / 2; }

  long total() const {
    long t = 1;
    for (int d = 0; d < n; ++d) t *= points;
    return t;
  }

  RVec phi_of(long flat) const {
    RVec phi(n);
    for (int d = 0; d < n; ++d) {
      phi[d] = 2.0 * pi * double(flat % points) / points;
      flat /= points;
    }
    return phi;
  }

  KVec k_of(long flat) const {
    KVec k(n);
    for (int d = 0; d < n; ++d) {
      k[d] = int(flat % points) - bandwidth();
      flat /= points;
    }
    return k;
  }

  long flat_of_k(const KVec& k) const {
    long flat = 0, stride = 1;
    for (int d = 0; d < n; ++d) {
      const int digit = k[d] + bandwidth();
      if (digit < 0 || digit >= points) return -1;
      flat += digit * stride;
      stride *= points;
    }
    return flat;
  }
};

namespace detail {

using MatArray = std::vector<Mat>;

// one separable pass along dimension d: out_line = T * in_line
inline void dft_pass(const PhaseBox& box, int d, const Eigen::MatrixXcd& t,
                     MatArray& data, MatArray& scratch, std::vector<char>& nz,
                     std::vector<char>& nz_scratch, int dim) {
  const int p = box.points;
  long stride = 1;
  for (int i = 0; i < d; ++i) stride *= p;
  const long outer_count = box.total() / (stride * p);

  for (long outer = 0; outer < outer_count; ++outer)
    for (long inner = 0; inner < stride; ++inner) {
      const long base = outer * stride * p + inner;
      bool any = false;
      for (int b = 0; b < p; ++b) any = any || nz[base + b * stride];
      if (!any) {
        for (int a = 0; a < p; ++a) {
          nz_scratch[base + a * stride] = 0;
          scratch[base + a * stride].setZero(dim, dim);
        }
        continue;
      }
      for (int a = 0; a < p; ++a) {
        Mat& acc = scratch[base + a * stride];
        acc.setZero(dim, dim);
        for (int b = 0; b < p; ++b)
          if (nz[base + b * stride]) acc.noalias() += t(a, b) * data[base + b * stride];
        nz_scratch[base + a * stride] = 1;
      }
    }
  data.swap(scratch);
  nz.swap(nz_scratch);
}

// coefficients (box layout) -> samples on the phase grid
inline void fourier_synthesis(const PhaseBox& box, MatArray& data, std::vector<char>& nz, int dim) {
  const int p = box.points, bw = box.bandwidth();
  Eigen::MatrixXcd t(p, p);
  for (int a = 0; a < p; ++a)
    for (int b = 0; b < p; ++b)
      t(a, b) = std::exp(cplx(0, (b - bw) * 2.0 * pi * a / p));
  MatArray scratch(data.size(), Mat());
  std::vector<char> nzs(data.size(), 0);
  for (int d = 0; d < box.n; ++d) dft_pass(box, d, t, data, scratch, nz, nzs, dim);
}

// samples -> coefficients (box layout); exact for content within the band
inline void fourier_analysis(const PhaseBox& box, MatArray& data, std::vector<char>& nz, int dim) {
  const int p = box.points, bw = box.bandwidth();
  Eigen::MatrixXcd t(p, p);
  for (int a = 0; a < p; ++a)
    for (int b = 0; b < p; ++b)
      t(a, b) = std::exp(cplx(0, -(a - bw) * 2.0 * pi * b / p)) / double(p);
  MatArray scratch(data.size(), Mat());
  std::vector<char> nzs(data.size(), 0);
  for (int d = 0; d < box.n; ++d) dft_pass(box, d, t, data, scratch, nz, nzs, dim);
}

inline void scatter_coeffs(const QPOperator& op, const PhaseBox& box, MatArray& data,
                           std::vector<char>& nz) {
  data.assign(box.total(), Mat());
  nz.assign(box.total(), 0);
  for (long i = 0; i < box.total(); ++i) data[i].setZero(op.dim, op.dim);
  for (const auto& [k, c] : op.coeffs) {
    const long f = box.flat_of_k(k);
    if (f < 0)
      throw error(stage::kam, "conjugate: operator support exceeds the working bandwidth");
    data[f] = c;
    nz[f] = 1;
  }
}

inline Mat polar_unitary(const Mat& a) {
  Eigen::BDCSVD<Mat> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return svd.matrixU() * svd.matrixV().adjoint();
}

}  // namespace detail

// --- quasi-periodic unitary families ------------------------------------------

class QPUnitary {
 public:
  QPUnitary() = default;

  static QPUnitary identity(int n_freq, int dim) {
    QPUnitary u;
    u.n_freq_ = n_freq;
    u.dim_ = dim;
    u.kind_ = Identity{};
    return u;
  }

  // U(phi) = exp(-i G(phi)), G a hermitian family
  static QPUnitary exp_generator(QPOperator g) {
    QPUnitary u;
    u.n_freq_ = g.n_freq;
    u.dim_ = g.dim;
    u.kind_ = ExpGen{std::make_shared<QPOperator>(std::move(g))};
    return u;
  }

  // U(phi) = diag(exp(-i theta_j(phi))), theta_j real trig polynomials given
  // by coefficients theta[k][j] with theta[-k] = conj(theta[k])
  static QPUnitary diagonal_phase(int n_freq, int dim, std::map<KVec, Vec> theta) {
    QPUnitary u;
    u.n_freq_ = n_freq;
    u.dim_ = dim;
    u.kind_ = DiagPhase{std::make_shared<std::map<KVec, Vec>>(std::move(theta))};
    return u;
  }

  // multiplication by e^{-i eps b(phi, x)} projected to the eigenbasis and
  // re-unitarized by its polar factor (the raw projection is unitary only up
  // to truncation leakage at the top modes)
  static QPUnitary grid_multiplier(const EigenBasis& basis, std::map<KVec, Vec> b_grid,
                                   double eps, int n_freq) {
    QPUnitary u;
    u.n_freq_ = n_freq;
    u.dim_ = basis.n_modes;
    u.kind_ = GridMult{std::make_shared<RMat>(basis.eigenvectors),
                       std::make_shared<std::map<KVec, Vec>>(std::move(b_grid)), eps};
    return u;
  }

  static QPUnitary product(std::vector<QPUnitary> factors) {
    if (factors.empty()) throw error(stage::kam, "unitary product needs at least one factor");
    QPUnitary u;
    u.n_freq_ = factors.front().n_freq_;
    u.dim_ = factors.front().dim_;
    u.kind_ = Product{std::make_shared<std::vector<QPUnitary>>(std::move(factors))};
    return u;
  }

  QPUnitary adjoint() const {
    QPUnitary u;
    u.n_freq_ = n_freq_;
    u.dim_ = dim_;
    u.kind_ = Adjoint{std::make_shared<QPUnitary>(*this)};
    return u;
  }

  int n_freq() const { return n_freq_; }
  int dim() const { return dim_; }

  Mat eval(const RVec& phi) const {
    if (std::holds_alternative<Identity>(kind_)) return Mat::Identity(dim_, dim_);
    if (const auto* e = std::get_if<ExpGen>(&kind_)) {
      Mat g = e->gen->eval(phi);
      Eigen::SelfAdjointEigenSolver<Mat> es(g);
      Vec ph = (cplx(0, -1) * es.eigenvalues().cast<cplx>().array()).exp().matrix();
      return es.eigenvectors() * ph.asDiagonal() * es.eigenvectors().adjoint();
    }
    if (const auto* d = std::get_if<DiagPhase>(&kind_)) {
      Vec theta = Vec::Zero(dim_);
      for (const auto& [k, v] : *d->theta) theta += v * std::exp(cplx(0, kdot(phi, k)));
      Vec ph(dim_);
      for (int j = 0; j < dim_; ++j) ph[j] = std::exp(cplx(0, -theta[j].real()));
      return Mat(ph.asDiagonal());
    }
    if (const auto* g = std::get_if<GridMult>(&kind_)) {
      const RMat& v = *g->eigvecs;
      Vec b = Vec::Zero(v.rows());
      for (const auto& [k, c] : *g->b_coeffs) b += c * std::exp(cplx(0, kdot(phi, k)));
      Vec w(v.rows());
      for (long i = 0; i < v.rows(); ++i) w[i] = std::exp(cplx(0, -g->eps * b[i].real()));
      Mat a = v.cast<cplx>().transpose() * w.asDiagonal() * v.cast<cplx>();
      return detail::polar_unitary(a);
    }
    if (const auto* p = std::get_if<Product>(&kind_)) {
      Mat u = p->factors->front().eval(phi);
      for (size_t i = 1; i < p->factors->size(); ++i) u = u * (*p->factors)[i].eval(phi);
      return u;
    }
    const auto& a = std::get<Adjoint>(kind_);
    return a.inner->eval(phi).adjoint();
  }

  // hint for the conjugation engine's working bandwidth
  int generator_support() const {
    if (std::holds_alternative<Identity>(kind_)) return 0;
    if (const auto* e = std::get_if<ExpGen>(&kind_)) return e->gen->k_support();
    if (const auto* d = std::get_if<DiagPhase>(&kind_)) {
      int s = 0;
      for (const auto& [k, v] : *d->theta) s = std::max(s, knorm_inf(k));
      return s;
    }
    if (const auto* g = std::get_if<GridMult>(&kind_)) {
      int s = 0;
      for (const auto& [k, v] : *g->b_coeffs) s = std::max(s, knorm_inf(k));
      return s;
    }
    if (const auto* p = std::get_if<Product>(&kind_)) {
      int s = 0;
      for (const auto& f : *p->factors) s += f.generator_support();
      return s;
    }
    return std::get<Adjoint>(kind_).inner->generator_support();
  }

  double unitarity_defect(int samples = 20, std::uint64_t seed = 1) const {
    SplitMix64 rng(seed);
    double worst = 0;
    for (int t = 0; t < samples; ++t) {
      RVec phi(n_freq_);
      for (int d = 0; d < n_freq_; ++d) phi[d] = rng.uniform(0.0, 2.0 * pi);
      Mat u = eval(phi);
      worst = std::max(worst, (u.adjoint() * u - Mat::Identity(dim_, dim_)).cwiseAbs().maxCoeff());
    }
    return worst;
  }

 private:
  struct Identity {};
  struct ExpGen {
    std::shared_ptr<QPOperator> gen;
  };
  struct DiagPhase {
    std::shared_ptr<std::map<KVec, Vec>> theta;
  };
  struct GridMult {
    std::shared_ptr<RMat> eigvecs;
    std::shared_ptr<std::map<KVec, Vec>> b_coeffs;  // grid samples of b per mode k
    double eps = 0;
  };
  struct Product {
    std::shared_ptr<std::vector<QPUnitary>> factors;
  };
  struct Adjoint {
    std::shared_ptr<QPUnitary> inner;
  };

  int n_freq_ = 1;
  int dim_ = 0;
  std::variant<Identity, ExpGen, DiagPhase, GridMult, Product, Adjoint> kind_;
};

// --- the transformation law ----------------------------------------------------

struct ConjugationParams {
  int out_cutoff = 0;       // Fourier cutoff of the result
  int work_bandwidth = 0;   // 0 -> automatic from supports
  double tol_tail = 1e-10;  // dropped-mass fraction allowed
  bool throw_on_tail = true;
  stage err_stage = stage::kam;
};

struct ConjugationResult {
  QPOperator h_plus;
  double tail_frac = 0;     // ||dropped||_F^2 / ||total||_F^2
  double dropped_mass = 0;  // absolute ||dropped||_F^2
};

// H+ = U^{-1}(H U - i omega.d_phi U). Sampling U pointwise is exact for every
// unitary kind; only the final Fourier truncation loses mass, and that loss
// is reported.
inline ConjugationResult conjugate(const QPOperator& h, const QPUnitary& u, const RVec& omega,
                                   ConjugationParams params) {
  const int n = h.n_freq, dim = h.dim;
  if (params.out_cutoff <= 0) params.out_cutoff = std::max(1, h.k_cutoff);
  int bw = params.work_bandwidth;
  if (bw <= 0)
    bw = std::max({params.out_cutoff, 2 * h.k_cutoff,
                   h.k_support() + 4 * std::max(1, u.generator_support())});
  const PhaseBox box(n, 2 * bw + 1);
  const long total = box.total();

  // samples of U and of H
  detail::MatArray usamp(total);
  std::vector<char> nz_u(total, 1);
  for (long i = 0; i < total; ++i) usamp[i] = u.eval(box.phi_of(i));

  detail::MatArray hsamp;
  std::vector<char> nz_h;
  detail::scatter_coeffs(h, box, hsamp, nz_h);
  detail::fourier_synthesis(box, hsamp, nz_h, dim);

  // derivative term: coefficients (omega.k) U_k synthesized back to the grid
  detail::MatArray ucoef = usamp;
  std::vector<char> nz_uc = nz_u;
  detail::fourier_analysis(box, ucoef, nz_uc, dim);
  for (long i = 0; i < total; ++i)
    if (nz_uc[i]) ucoef[i] *= kdot(omega, box.k_of(i));
  detail::fourier_synthesis(box, ucoef, nz_uc, dim);

  // pointwise H+ = U^† (H U + D),  D = -i omega.d_phi U
  for (long i = 0; i < total; ++i) {
    Mat hu = hsamp[i] * usamp[i];
    if (nz_uc[i]) hu += ucoef[i];
    hsamp[i] = usamp[i].adjoint() * hu;
    nz_h[i] = 1;
  }

  detail::fourier_analysis(box, hsamp, nz_h, dim);

  QPOperator out = QPOperator::zero(n, dim, params.out_cutoff);
  double kept = 0, dropped = 0;
  for (long i = 0; i < total; ++i) {
    const double mass = hsamp[i].squaredNorm();
    if (mass == 0.0) continue;
    const KVec k = box.k_of(i);
    if (knorm_inf(k) <= params.out_cutoff) {
      kept += mass;
      if (mass > 1e-30) out.add(k, hsamp[i]);
    } else {
      dropped += mass;
    }
  }
  out.hermitize();

  ConjugationResult res;
  res.h_plus = std::move(out);
  res.dropped_mass = dropped;
  res.tail_frac = (kept + dropped) > 0 ? dropped / (kept + dropped) : 0.0;
  if (params.throw_on_tail && res.tail_frac > params.tol_tail)
    throw error(params.err_stage,
                "conjugate: truncated Fourier tail fraction " + std::to_string(res.tail_frac) +
                    " exceeds tolerance; widen the cutoff or the working bandwidth");
  return res;
}

// --- gauge transformation -------------------------------------------------------

// b(phi, x) = int_0^x W1(phi, y) dy per Fourier coefficient, cumulative
// 4th-order Simpson from the center node (b(phi, 0) = 0 by construction).
inline QPSymbol gauge_b(const QPSymbol& w1, const Grid& grid) {
  QPSymbol b = QPSymbol::zero(w1.n_freq, std::max(w1.declared_order + 1.0, 0.0));
  const int m = grid.m;
  const int c = (m - 1) / 2;
  const double h = grid.h;

  for (const auto& [k, f] : w1.terms) {
    Vec fv(m);
    for (int i = 0; i < m; ++i) fv[i] = f(grid.x[i]);
    auto bv = std::make_shared<Vec>(Vec::Zero(m));
    // two-step Simpson chain through the even-offset nodes; odd nodes hang off
    // the chain with a single 3-point step, so their local error never accumulates
    for (int i = c; i + 2 < m; i += 2)
      (*bv)[i + 2] = (*bv)[i] + h / 3.0 * (fv[i] + 4.0 * fv[i + 1] + fv[i + 2]);
    for (int i = c; i - 2 >= 0; i -= 2)
      (*bv)[i - 2] = (*bv)[i] - h / 3.0 * (fv[i] + 4.0 * fv[i - 1] + fv[i - 2]);
    for (int i = c; i + 1 < m; i += 2) {
      if (i + 2 < m)
        (*bv)[i + 1] = (*bv)[i] + h / 12.0 * (5.0 * fv[i] + 8.0 * fv[i + 1] - fv[i + 2]);
      else
        (*bv)[i + 1] = (*bv)[i] + h / 12.0 * (-fv[i - 1] + 8.0 * fv[i] + 5.0 * fv[i + 1]);
    }
    for (int i = c; i - 1 >= 0; i -= 2) {
      if (i - 2 >= 0)
        (*bv)[i - 1] = (*bv)[i] - h / 12.0 * (5.0 * fv[i] + 8.0 * fv[i - 1] - fv[i - 2]);
      else
        (*bv)[i - 1] = (*bv)[i] - h / 12.0 * (-fv[i + 1] + 8.0 * fv[i] + 5.0 * fv[i - 1]);
    }

    const Grid g = grid;  // value copy into the closure
    b.append(k, [bv, g](double x) -> cplx {
      const double t = (x - g.x[0]) / g.h;
      const int i0 = std::clamp(int(std::floor(t)), 0, g.m - 2);
      const double frac = t - i0;
      if (std::abs(frac) < 1e-9) return (*bv)[i0];
      if (std::abs(frac - 1.0) < 1e-9) return (*bv)[i0 + 1];
      return (1.0 - frac) * (*bv)[i0] + frac * (*bv)[i0 + 1];  // off-node fallback
    });
  }
  return b;
}

// commutator-with-position extractor of the first-order (magnetic) component:
// i/2 [A_k - delta_k0 diag(lambda), X] on the interior mode block. Pure
// multiplication operators commute with X up to truncation leakage, so the
// extractor vanishes on them and returns ~Mult(W) on (PW+WP)/2.
inline double magnetic_component_norm(const QPOperator& a, const EigenBasis& basis,
                                      int buffer = -1) {
  const int n = basis.n_modes;
  if (buffer < 0) buffer = std::max(4, n / 5);
  const int keep = n - buffer;
  const Mat x = basis.position_matrix.cast<cplx>();
  double acc = 0;
  for (const auto& [k, c] : a.coeffs) {
    Mat m = c;
    if (kis_zero(k)) m -= Mat(basis.eigenvalues.cast<cplx>().asDiagonal());
    Mat comm = cplx(0, 0.5) * (m * x - x * m);
    acc += comm.topLeftCorner(keep, keep).squaredNorm();
  }
  return std::sqrt(acc);
}

struct GaugeOptions {
  double tol_gauge = 1e-6;  // agreement of numeric conjugation with the closed form
  bool cross_check = true;
  int commutator_buffer = -1;
};

struct GaugeResult {
  QPOperator h1;        // diag(lambda) + eps Mult(W0 - omega.d_phi b)
  QPSymbol w0_shifted;  // W0 - omega.d_phi b
  QPUnitary u1;
  double magnetic_pre = 0;
  double magnetic_post = 0;
  double conj_agreement = 0;  // max-abs difference numeric vs closed form (interior block)
  double b_boundary_max = 0;  // max |b| at the grid edge, per the truncation report
};

// Lemma-(mag) step: the exact operator identity gives H1; the numerical
// conjugation by the projected multiplier is kept as a cross-check.
inline GaugeResult apply_gauge(const QPOperator& h, const QPSymbol& w0, const QPSymbol& w1,
                               const QPSymbol& b, double eps, const RVec& omega,
                               const EigenBasis& basis, const GaugeOptions& opts = {}) {
  if (w1.declared_order > basis.ell)
    throw error(stage::gauge, "apply_gauge: beta_1 > ell, e^{-i eps b} does not map H^s into "
                              "itself (Lemma precondition)");

  GaugeResult res;
  // conjugating P = -i d_x by e^{+i eps b} sends P to P + eps b_x = P + eps W1,
  // which cancels the magnetic term; the phase-derivative term then adds
  // +omega.d_phi b to W0
  res.w0_shifted = symbol_sum(w0, symbol_omega_dphi(b, omega));
  res.w0_shifted.declared_order = std::max(w0.declared_order, b.declared_order);

  const int n_freq = h.n_freq;
  res.h1 = QPOperator::zero(n_freq, basis.n_modes, h.k_cutoff);
  res.h1.add(KVec(n_freq, 0), basis.eigenvalues.cast<cplx>().asDiagonal());
  if (eps != 0.0 && !res.w0_shifted.empty()) {
    QPOperator m = quantize_multiplication(res.w0_shifted, basis);
    m *= eps;
    res.h1 += m;
  }
  res.h1.hermitize();

  std::map<KVec, Vec> b_grid;
  for (const auto& [k, f] : b.terms) {
    Vec v(basis.grid.m);
    for (int i = 0; i < basis.grid.m; ++i) v[i] = f(basis.grid.x[i]);
    b_grid[k] = v;
    res.b_boundary_max = std::max({res.b_boundary_max, std::abs(v[0]), std::abs(v[basis.grid.m - 1])});
  }
  // grid_multiplier applies e^{-i s b}; s = -eps realizes U1 = e^{+i eps b}
  res.u1 = b_grid.empty() ? QPUnitary::identity(n_freq, basis.n_modes)
                          : QPUnitary::grid_multiplier(basis, std::move(b_grid), -eps, n_freq);

  res.magnetic_pre = magnetic_component_norm(h, basis, opts.commutator_buffer);
  res.magnetic_post = magnetic_component_norm(res.h1, basis, opts.commutator_buffer);

  if (opts.cross_check && eps != 0.0) {
    ConjugationParams cp;
    cp.out_cutoff = std::max(res.h1.k_support(), h.k_support());
    cp.throw_on_tail = false;
    cp.err_stage = stage::gauge;
    ConjugationResult num = conjugate(h, res.u1, omega, cp);
    const int keep = basis.n_modes - std::max(4, basis.n_modes / 5);
    double worst = 0;
    for (const auto& [k, c] : num.h_plus.coeffs) {
      const Mat* ref = res.h1.coeff(k);
      Mat diff = ref ? Mat(c - *ref) : c;
      worst = std::max(worst, diff.topLeftCorner(keep, keep).cwiseAbs().maxCoeff());
    }
    res.conj_agreement = worst;
    if (worst > opts.tol_gauge)
      throw error(stage::gauge,
                  "apply_gauge: numeric conjugation deviates from the closed form by " +
                      std::to_string(worst) +
                      "; refine the grid or enlarge the Fourier cutoff");
  }
  return res;
}

}  // namespace kamred
