#pragma once

// Dense double-precision matrix/vector kernels, scalar softplus, and a
// reproducible RNG. Everything is a pure function of its inputs; no globals.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <random>
#include <vector>

namespace selssm {

using Vector = std::vector<double>;

struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;  // row-major, rows*cols entries

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<size_t>(r) * static_cast<size_t>(c), fill) {}

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
};

// Raised when an iterative routine fails to converge; carries the last estimate.
struct numeric_error : std::runtime_error {
  double last_estimate;
  numeric_error(const std::string& msg, double last)
      : std::runtime_error(msg), last_estimate(last) {}
};

inline double dot(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: size mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(const Vector& v) { return std::sqrt(dot(v, v)); }

// y = M v, where v has M.cols entries.
inline Vector matvec(const Matrix& m, const Vector& v) {
  if (static_cast<int>(v.size()) != m.cols) throw std::invalid_argument("matvec: size mismatch");
  Vector y(m.rows, 0.0);
  for (int r = 0; r < m.rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < m.cols; ++c) s += m.at(r, c) * v[c];
    y[r] = s;
  }
  return y;
}

// y = M^T v, where v has M.rows entries.
inline Vector matvec_t(const Matrix& m, const Vector& v) {
  if (static_cast<int>(v.size()) != m.rows) throw std::invalid_argument("matvec_t: size mismatch");
  Vector y(m.cols, 0.0);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) y[c] += m.at(r, c) * v[r];
  return y;
}

enum class NormOrder { one, two, inf };

// ||X||_{p,q}: q-norm of the vector of column p-norms. p, q in {1, 2, inf}.
inline double mixed_norm(const Matrix& x, NormOrder p, NormOrder q) {
  auto vec_norm = [](const Vector& v, NormOrder o) {
    switch (o) {
      case NormOrder::one: {
        double s = 0.0;
        for (double e : v) s += std::fabs(e);
        return s;
      }
      case NormOrder::two: {
        double s = 0.0;
        for (double e : v) s += e * e;
        return std::sqrt(s);
      }
      case NormOrder::inf: {
        double s = 0.0;
        for (double e : v) s = std::max(s, std::fabs(e));
        return s;
      }
    }
    throw std::invalid_argument("mixed_norm: unsupported norm order");
  };
  Vector col_norms(x.cols, 0.0);
  Vector col(x.rows, 0.0);
  for (int c = 0; c < x.cols; ++c) {
    for (int r = 0; r < x.rows; ++r) col[r] = x.at(r, c);
    col_norms[c] = vec_norm(col, p);
  }
  return vec_norm(col_norms, q);
}

// Largest singular value via power iteration on X^T X. Deterministic start
// (normalized all-ones); if that start happens to lie in the null space, a
// fixed alternating-sign vector and then a seeded pseudo-random vector are
// tried before concluding the matrix is zero. Capped at 10000 iterations.
inline double spectral_norm(const Matrix& x, double tol = 1e-9) {
  if (x.rows <= 0 || x.cols <= 0) throw std::invalid_argument("spectral_norm: empty matrix");
  if (tol <= 0) throw std::invalid_argument("spectral_norm: tol must be > 0");

  auto run = [&](Vector v) -> double {
    double nv = l2_norm(v);
    if (nv == 0.0) return -1.0;
    for (double& e : v) e /= nv;
    double sigma_prev = -1.0;
    for (int it = 0; it < 10000; ++it) {
      Vector xv = matvec(x, v);
      double sigma = l2_norm(xv);
      if (sigma == 0.0) return -1.0;  // start vector was in the null space
      if (sigma_prev >= 0.0 && std::fabs(sigma - sigma_prev) < tol * sigma) return sigma;
      sigma_prev = sigma;
      Vector w = matvec_t(x, xv);
      double nw = l2_norm(w);
      if (nw == 0.0) return -1.0;
      for (size_t i = 0; i < w.size(); ++i) v[i] = w[i] / nw;
    }
    throw numeric_error("spectral_norm: power iteration did not converge", sigma_prev);
  };

  Vector ones(x.cols, 1.0);
  double s = run(ones);
  if (s >= 0.0) return s;
  Vector alt(x.cols, 1.0);
  for (int c = 1; c < x.cols; c += 2) alt[c] = -1.0;
  s = run(alt);
  if (s >= 0.0) return s;
  std::mt19937_64 gen(0x5eed);
  Vector rnd(x.cols);
  for (double& e : rnd) e = static_cast<double>(gen() >> 11) * 0x1.0p-53 - 0.5;
  s = run(rnd);
  return s >= 0.0 ? s : 0.0;
}

// ln(1 + e^x), overflow-safe: above the threshold e^x would dwarf the 1, so
// the identity softplus(x) = x + softplus(-x) is used instead.
inline double softplus(double x) {
  constexpr double threshold = 30.0;
  if (x > threshold) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

// d/dx softplus(x) = 1/(1+e^{-x}), the logistic sigmoid, in (0,1).
inline double softplus_deriv(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double ex = std::exp(x);
  return ex / (1.0 + ex);
}

// mt19937_64 with hand-rolled output mappings. The engine's bit stream is
// pinned by the C++ standard; std::uniform_*_distribution is not, so those
// are avoided to keep generated artifacts byte-identical everywhere.
struct Rng {
  std::mt19937_64 gen;

  explicit Rng(uint64_t seed) : gen(seed) {}

  uint64_t next_u64() { return gen(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform in {0, ..., n-1} via 128-bit multiply (bias < 2^-64, no rejection
  // loop so the stream position per call is fixed).
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>((static_cast<__uint128_t>(gen()) * n) >> 64);
  }

  // Uniform in {lo, ..., hi} inclusive.
  int int_in(int lo, int hi) {
    return lo + static_cast<int>(below(static_cast<uint64_t>(hi - lo + 1)));
  }

  // In-place Fisher-Yates with the explicit mappings above.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }
};

}  // namespace selssm
