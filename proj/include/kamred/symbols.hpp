#pragma once

// Quasi-periodic symbols W(x, phi) = sum_k c_k(x) e^{ik.phi}, the S^m_V
// growth-class checker, and their quantization as matrices in the eigenbasis.

#include "kamred/basis.hpp"
#include "kamred/common.hpp"

#include <functional>
#include <memory>

namespace kamred {

using CoeffFn = std::function<cplx(double)>;

struct QPSymbol {
  int n_freq = 1;
  double declared_order = 0.0;  // beta
  std::map<KVec, CoeffFn> terms;

  static QPSymbol zero(int n_freq, double order = 0.0) {
    QPSymbol s;
    s.n_freq = n_freq;
    s.declared_order = order;
    return s;
  }

  bool empty() const { return terms.empty(); }

  // adds c*f(x) e^{ik.phi} + conj(c)*f(x) e^{-ik.phi}; for k=0 adds Re(c)*f once
  void add_mode(const KVec& k, cplx amp, const CoeffFn& f) {
    if (int(k.size()) != n_freq)
      throw error(stage::symbols, "symbol: mode index has wrong dimension");
    if (kis_zero(k)) {
      append(k, [f, amp](double x) { return amp.real() * f(x); });
      return;
    }
    append(k, [f, amp](double x) { return amp * f(x); });
    append(kneg(k), [f, amp](double x) { return std::conj(amp) * f(x); });
  }

  void append(const KVec& k, const CoeffFn& f) {
    auto it = terms.find(k);
    if (it == terms.end()) {
      terms.emplace(k, f);
    } else {
      CoeffFn old = it->second;
      it->second = [old, f](double x) { return old(x) + f(x); };
    }
  }

  cplx coeff(const KVec& k, double x) const {
    auto it = terms.find(k);
    return it == terms.end() ? cplx(0) : it->second(x);
  }

  double eval(double x, const RVec& phi) const {
    cplx acc = 0;
    for (const auto& [k, f] : terms) acc += f(x) * std::exp(cplx(0, kdot(phi, k)));
    return acc.real();
  }

  int k_support() const {
    int s = 0;
    for (const auto& [k, f] : terms) s = std::max(s, knorm_inf(k));
    return s;
  }

  double reality_defect(const RVec& xs) const {
    double worst = 0;
    for (const auto& [k, f] : terms) {
      const KVec mk = kneg(k);
      for (int i = 0; i < xs.size(); ++i)
        worst = std::max(worst, std::abs(coeff(mk, xs[i]) - std::conj(coeff(k, xs[i]))));
    }
    return worst;
  }
};

inline QPSymbol symbol_scaled(const QPSymbol& a, double c) {
  QPSymbol out = QPSymbol::zero(a.n_freq, a.declared_order);
  for (const auto& [k, f] : a.terms)
    out.append(k, [f, c](double x) { return c * f(x); });
  return out;
}

inline QPSymbol symbol_sum(const QPSymbol& a, const QPSymbol& b) {
  QPSymbol out = QPSymbol::zero(a.n_freq, std::max(a.declared_order, b.declared_order));
  for (const auto& [k, f] : a.terms) out.append(k, f);
  for (const auto& [k, f] : b.terms) out.append(k, f);
  return out;
}

// pointwise product; Fourier supports convolve
inline QPSymbol symbol_product(const QPSymbol& a, const QPSymbol& b) {
  QPSymbol out = QPSymbol::zero(a.n_freq, a.declared_order + b.declared_order);
  for (const auto& [k1, f1] : a.terms)
    for (const auto& [k2, f2] : b.terms)
      out.append(kadd(k1, k2), [f1, f2](double x) { return f1(x) * f2(x); });
  return out;
}

// omega . d_phi W: multiplies c_k by i(omega.k)
inline QPSymbol symbol_omega_dphi(const QPSymbol& a, const RVec& omega) {
  QPSymbol out = QPSymbol::zero(a.n_freq, a.declared_order);
  for (const auto& [k, f] : a.terms) {
    const cplx factor(0.0, kdot(omega, k));
    if (factor == cplx(0)) continue;
    out.append(k, [f, factor](double x) { return factor * f(x); });
  }
  return out;
}

// --- S^m_V class check -------------------------------------------------------

struct SymbolClassReport {
  bool pass = true;
  std::vector<double> constants;      // C_k on the base window
  std::vector<double> growth_ratio;   // C_k on [-2L,2L] / C_k on [-L,L]
  std::vector<double> step_stability; // relative change under step refinement
  int fail_k = -1;
  double fail_x = 0.0;
  std::string reason;
};

namespace detail {

// k-th central difference with x-proportional step, so roundoff noise does
// not grow with <x> for polynomially bounded symbols
inline double symbol_derivative(const QPSymbol& w, int k, double x, const RVec& phi, double h0) {
  if (k == 0) return w.eval(x, phi);
  const double delta = h0 * std::sqrt(1.0 + x * x);
  double acc = 0, binom = 1;
  for (int i = 0; i <= k; ++i) {
    acc += ((k - i) % 2 == 0 ? 1.0 : -1.0) * binom * w.eval(x + (0.5 * k - i) * delta, phi);
    binom *= double(k - i) / double(i + 1);
  }
  return acc / std::pow(delta, k);
}

inline std::vector<RVec> sample_phases(int n_freq, int count) {
  std::vector<RVec> phases;
  phases.push_back(RVec::Zero(n_freq));  // zero phase attains cos-mode maxima
  SplitMix64 rng(0x5eedULL);
  for (int m = 1; m < count; ++m) {
    RVec phi(n_freq);
    for (int d = 0; d < n_freq; ++d) phi[d] = rng.uniform(0.0, 2.0 * pi);
    phases.push_back(phi);
  }
  return phases;
}

struct CkEstimate {
  double value = 0;
  double arg_x = 0;
};

inline CkEstimate estimate_ck(const QPSymbol& w, int k, double m_order, double halfwidth,
                              int points, const std::vector<RVec>& phases, double h0) {
  CkEstimate best;
  for (int i = 0; i < points; ++i) {
    const double x = -halfwidth + 2.0 * halfwidth * i / (points - 1);
    const double wt = std::pow(1.0 + x * x, 0.5 * (k - m_order));
    for (const auto& phi : phases) {
      const double v = std::abs(symbol_derivative(w, k, x, phi, h0)) * wt;
      if (!std::isfinite(v)) return {std::numeric_limits<double>::infinity(), x};
      if (v > best.value) {
        best.value = v;
        best.arg_x = x;
      }
    }
  }
  return best;
}

}  // namespace detail

// Estimates C_k = sup |d_x^k W| <x>^{k-m} for k = 0..k_max over the grid
// window and sampled phases. Passes iff every C_k is finite, stable under
// derivative-step refinement, and stable under extension of the window to
// twice the halfwidth (growth beyond <x>^m shows up as a ratio ~ 2^excess).
inline SymbolClassReport check_symbol_class(const QPSymbol& w, double m_order, int k_max,
                                            double halfwidth, int points = 257,
                                            double growth_tol = 1.3) {
  if (k_max > 6)
    throw error(stage::symbols, "check_symbol_class: k_max <= 6 (finite differences)");
  const double h0 = 0.02;
  const auto phases = detail::sample_phases(w.n_freq, 12);

  SymbolClassReport rep;
  double c0_scale = 1.0;
  for (int k = 0; k <= k_max; ++k) {
    const auto base = detail::estimate_ck(w, k, m_order, halfwidth, points, phases, h0);
    const auto wide = detail::estimate_ck(w, k, m_order, 2.0 * halfwidth, 2 * points, phases, h0);
    const auto refined = detail::estimate_ck(w, k, m_order, halfwidth, points, phases, 0.5 * h0);

    // roundoff floor of the k-th difference; below it the derivative is zero
    const double floor_k = 50.0 * std::pow(2.0, k) * 2.2e-16 * std::max(c0_scale, 1.0) /
                           std::pow(h0 * 0.5, k);
    rep.constants.push_back(base.value);
    if (k == 0) c0_scale = std::max(base.value, 1.0);

    const double ref = std::max({base.value, refined.value, floor_k});
    rep.step_stability.push_back(std::abs(base.value - refined.value) / ref);
    rep.growth_ratio.push_back(wide.value / std::max(base.value, floor_k));

    const bool finite = std::isfinite(base.value) && std::isfinite(wide.value);
    const bool negligible = base.value < floor_k && wide.value < floor_k;
    const bool stable = rep.step_stability.back() < 0.3;
    const bool bounded = rep.growth_ratio.back() <= growth_tol;
    if (!finite || (!negligible && (!stable || !bounded))) {
      rep.pass = false;
      if (rep.fail_k < 0) {
        rep.fail_k = k;
        rep.fail_x = wide.arg_x;
        rep.reason = !finite  ? "derivative estimate not finite"
                     : !bounded ? "growth exceeds <x>^(m-k) (window extension ratio " +
                                      std::to_string(rep.growth_ratio.back()) + ")"
                                : "derivative estimate unstable under step refinement";
      }
    }
  }
  return rep;
}

// --- operators ---------------------------------------------------------------

// Hermitian quasi-periodic operator family in the eigenbasis:
// H(phi) = sum_{|k|_inf <= k_cutoff} coeff(k) e^{ik.phi}, coeff(-k) = coeff(k)^†.
struct QPOperator {
  int n_freq = 1;
  int dim = 0;
  int k_cutoff = 0;
  std::map<KVec, Mat> coeffs;

  static QPOperator zero(int n_freq, int dim, int k_cutoff) {
    QPOperator a;
    a.n_freq = n_freq;
    a.dim = dim;
    a.k_cutoff = k_cutoff;
    return a;
  }

  void add(const KVec& k, const Mat& m) {
    auto it = coeffs.find(k);
    if (it == coeffs.end())
      coeffs.emplace(k, m);
    else
      it->second += m;
    k_cutoff = std::max(k_cutoff, knorm_inf(k));
  }

  const Mat* coeff(const KVec& k) const {
    auto it = coeffs.find(k);
    return it == coeffs.end() ? nullptr : &it->second;
  }

  Mat eval(const RVec& phi) const {
    Mat h = Mat::Zero(dim, dim);
    for (const auto& [k, c] : coeffs) h += c * std::exp(cplx(0, kdot(phi, k)));
    return h;
  }

  int k_support() const {
    int s = 0;
    for (const auto& [k, c] : coeffs) s = std::max(s, knorm_inf(k));
    return s;
  }

  QPOperator& operator+=(const QPOperator& o) {
    for (const auto& [k, c] : o.coeffs) add(k, c);
    return *this;
  }

  QPOperator& operator*=(double s) {
    for (auto& [k, c] : coeffs) c *= s;
    return *this;
  }

  // enforce coeff(-k) = coeff(k)^† exactly
  void hermitize() {
    std::map<KVec, Mat> out;
    for (const auto& [k, c] : coeffs) {
      if (out.count(k)) continue;
      const KVec mk = kneg(k);
      const Mat* cm = coeff(mk);
      Mat sym = cm ? Mat(0.5 * (c + cm->adjoint())) : Mat(0.5 * c);
      out[k] = sym;
      if (mk != k)
        out[mk] = sym.adjoint();
      else
        out[k] = 0.5 * (sym + sym.adjoint());
    }
    coeffs = std::move(out);
  }

  double herm_family_defect() const {
    double worst = 0;
    for (const auto& [k, c] : coeffs) {
      const Mat* cm = coeff(kneg(k));
      worst = std::max(worst, cm ? (c - cm->adjoint()).cwiseAbs().maxCoeff()
                                 : c.cwiseAbs().maxCoeff());
    }
    return worst;
  }

  void prune(double tol) {
    for (auto it = coeffs.begin(); it != coeffs.end();)
      it = (it->second.norm() <= tol) ? coeffs.erase(it) : std::next(it);
  }

  // weighted norm sum_k ||c_k||_2 (1+|k|_1)^p; ||.||_2 = spectral norm
  double weighted_norm(double p) const {
    double acc = 0;
    for (const auto& [k, c] : coeffs) {
      const double fro = c.norm();
      double s2;
      if (fro < 1e-13) {
        s2 = fro;  // negligible block, Frobenius bound suffices
      } else {
        Eigen::SelfAdjointEigenSolver<Mat> es(c.adjoint() * c, Eigen::EigenvaluesOnly);
        s2 = std::sqrt(std::max(0.0, es.eigenvalues().maxCoeff()));
      }
      acc += s2 * std::pow(1.0 + knorm1(k), p);
    }
    return acc;
  }

  double max_abs() const {
    double acc = 0;
    for (const auto& [k, c] : coeffs) acc = std::max(acc, c.cwiseAbs().maxCoeff());
    return acc;
  }
};

namespace detail {

// V^T diag(w) V with complex grid samples, using real GEMMs
inline Mat project_multiplication(const RVec& re, const RVec& im, const EigenBasis& basis) {
  const RMat& v = basis.eigenvectors;
  RMat pre = v.transpose() * re.asDiagonal() * v;
  if (im.cwiseAbs().maxCoeff() == 0.0) return pre.cast<cplx>();
  RMat pim = v.transpose() * im.asDiagonal() * v;
  return pre.cast<cplx>() + cplx(0, 1) * pim.cast<cplx>();
}

inline void sample_coeff(const CoeffFn& f, const RVec& x, RVec& re, RVec& im) {
  re.resize(x.size());
  im.resize(x.size());
  for (int i = 0; i < x.size(); ++i) {
    const cplx c = f(x[i]);
    if (!std::isfinite(c.real()) || !std::isfinite(c.imag()))
      throw error(stage::symbols, "symbol coefficient not finite on the grid");
    re[i] = c.real();
    im[i] = c.imag();
  }
}

}  // namespace detail

// multiplication operator: coeff(k)_ij = <v_i, W_k(.) v_j> by grid quadrature
inline QPOperator quantize_multiplication(const QPSymbol& w, const EigenBasis& basis) {
  QPOperator out = QPOperator::zero(w.n_freq, basis.n_modes, w.k_support());
  RVec re, im;
  for (const auto& [k, f] : w.terms) {
    detail::sample_coeff(f, basis.grid.x, re, im);
    out.add(k, detail::project_multiplication(re, im, basis));
  }
  out.prune(0.0);
  return out;
}

// Op^w(xi W(x)) = (P W + W P)/2: grid-level symmetrized product projected to
// the basis (exact Galerkin projection; P = -i d/dx).
inline QPOperator quantize_magnetic(const QPSymbol& w1, const EigenBasis& basis) {
  QPOperator out = QPOperator::zero(w1.n_freq, basis.n_modes, w1.k_support());
  const RMat& v = basis.eigenvectors;
  const RMat& dv = basis.dv;
  RVec re, im;
  for (const auto& [k, f] : w1.terms) {
    detail::sample_coeff(f, basis.grid.x, re, im);
    // -i/2 (B - B^T), B = V^T diag(w) (DV)
    RMat bre = v.transpose() * re.asDiagonal() * dv;
    Mat b = bre.cast<cplx>();
    if (im.cwiseAbs().maxCoeff() != 0.0) {
      RMat bim = v.transpose() * im.asDiagonal() * dv;
      b += cplx(0, 1) * bim.cast<cplx>();
    }
    out.add(k, cplx(0, -0.5) * (b - b.transpose()).eval());
  }
  out.prune(0.0);
  return out;
}

// H = (P - eps W1)^2 + V + eps W0 in the eigenbasis:
// diag(lambda) + eps Mult(W0) + eps^2 Mult(W1^2) - 2 eps Op^w(xi W1)
inline QPOperator assemble_hamiltonian(double eps, const QPSymbol& w0, const QPSymbol& w1,
                                       const EigenBasis& basis, int k_cutoff = 0) {
  if (std::abs(eps) >= 1.0)
    throw error(stage::symbols, "assemble_hamiltonian: |eps| must be < 1");
  const int n_freq = w0.empty() ? w1.n_freq : w0.n_freq;
  QPOperator h = QPOperator::zero(n_freq, basis.n_modes, k_cutoff);
  h.add(KVec(n_freq, 0), basis.eigenvalues.cast<cplx>().asDiagonal());

  if (!w0.empty() && eps != 0.0) {
    QPOperator m0 = quantize_multiplication(w0, basis);
    m0 *= eps;
    h += m0;
  }
  if (!w1.empty() && eps != 0.0) {
    QPOperator mag = quantize_magnetic(w1, basis);
    mag *= -2.0 * eps;
    h += mag;
    QPOperator sq = quantize_multiplication(symbol_product(w1, w1), basis);
    sq *= eps * eps;
    h += sq;
  }
  if (h.k_support() > k_cutoff && k_cutoff > 0) {
    // W1^2 convolution widened the support; keep it and record the new cutoff
    h.k_cutoff = h.k_support();
  }
  h.hermitize();
  return h;
}

}  // namespace kamred
