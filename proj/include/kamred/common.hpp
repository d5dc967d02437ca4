#pragma once

// Shared aliases and small utilities used across kamred.

#include <Eigen/Dense>

#include <complex>
#include <cstdint>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace kamred {

using cplx = std::complex<double>;
using Mat  = Eigen::MatrixXcd;
using RMat = Eigen::MatrixXd;
using Vec  = Eigen::VectorXcd;
using RVec = Eigen::VectorXd;

inline constexpr double pi = 3.14159265358979323846;

// Pipeline stages, doubling as CLI exit codes.
enum class stage : int {
  ok         = 0,
  config     = 2,
  basis      = 3,
  symbols    = 4,
  gauge      = 5,
  frequency  = 6,
  kam        = 7,
  simulation = 8,
  io         = 9,
};

class error : public std::runtime_error {
 public:
  error(stage st, const std::string& msg) : std::runtime_error(msg), stage_(st) {}
  stage where() const { return stage_; }
  int exit_code() const { return static_cast<int>(stage_); }

 private:
  stage stage_;
};

// Integer frequency multi-index k in Z^n; std::vector<int> compares
// lexicographically, so it works directly as a map key.
using KVec = std::vector<int>;

inline int knorm1(const KVec& k) {
  int s = 0;
  for (int c : k) s += std::abs(c);
  return s;
}

inline int knorm_inf(const KVec& k) {
  int s = 0;
  for (int c : k) s = std::max(s, std::abs(c));
  return s;
}

inline KVec kneg(const KVec& k) {
  KVec r(k);
  for (int& c : r) c = -c;
  return r;
}

inline KVec kadd(const KVec& a, const KVec& b) {
  KVec r(a);
  for (size_t i = 0; i < r.size(); ++i) r[i] += b[i];
  return r;
}

inline bool kis_zero(const KVec& k) {
  for (int c : k) if (c != 0) return false;
  return true;
}

inline double kdot(const RVec& omega, const KVec& k) {
  double s = 0;
  for (int i = 0; i < omega.size(); ++i) s += omega[i] * k[i];
  return s;
}

inline std::string kstr(const KVec& k) {
  std::string s = "(";
  for (size_t i = 0; i < k.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(k[i]);
  }
  return s + ")";
}

// SplitMix64: tiny deterministic generator, identical streams on every
// platform (std::uniform_real_distribution is implementation-defined).
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0,1)
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in [a,b)
  double uniform(double a, double b) { return a + (b - a) * next_double(); }

 private:
  std::uint64_t state_;
};

inline std::uint64_t fnv1a(const void* data, size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a(s.data(), s.size(), h);
}

inline std::string to_sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// Least-squares line fit y = slope*x + intercept. Returns {slope, intercept, rms residual}.
struct LineFit {
  double slope = 0;
  double intercept = 0;
  double residual = 0;
};

inline LineFit fit_line(const RVec& x, const RVec& y) {
  const double n = double(x.size());
  const double xm = x.mean(), ym = y.mean();
  const double sxx = (x.array() - xm).square().sum();
  LineFit f;
  f.slope = (x.array() - xm).cwiseProduct(y.array() - ym).sum() / sxx;
  f.intercept = ym - f.slope * xm;
  f.residual = std::sqrt((y.array() - f.slope * x.array() - f.intercept).square().sum() / n);
  return f;
}

// Gauss-Legendre nodes/weights on [-1,1] by Newton iteration on P_n.
struct Quadrature {
  RVec nodes;
  RVec weights;
};

inline Quadrature gauss_legendre(int n) {
  Quadrature q;
  q.nodes.resize(n);
  q.weights.resize(n);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(pi * (i + 0.75) / (n + 0.5));
    double dp = 0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = x;
      for (int m = 2; m <= n; ++m) {
        double p2 = ((2 * m - 1) * x * p1 - (m - 1) * p0) / m;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    q.nodes[i] = -x;
    q.nodes[n - 1 - i] = x;
    q.weights[i] = q.weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
  }
  return q;
}

}  // namespace kamred
