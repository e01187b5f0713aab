#pragma once

// Closed-form generalization-theory quantities for the selective SSM class:
// the effective decay rate rho_a, step-size ceiling m_delta, the geometric
// sums S1/S2, covering-number log-sizes, capacity, the two-term gap bound,
// the restricted-class Rademacher lower bound with exact and Monte-Carlo
// empirical counterparts, and the empirical norm auditor.

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "selssm/datasets.hpp"
#include "selssm/numkit.hpp"
#include "selssm/ssm.hpp"

namespace selssm {

// Norm and scale bounds the theory is stated under.  b_* bound parameter and
// input norms, m_* are the per-matrix spectral ceilings, c_l / l_l bound the
// loss and its Lipschitz constant, eta is the arbitrarily small slack added
// to the spectral abscissa.
struct BoundAssumptions {
  double b_u = 1.0, b_b = 1.0, b_c = 1.0, b_w = 1.0, b_q = 1.0, b_a = 1.0;
  double m_a = 1.0, m_b = 1.0, m_c = 1.0, m_w = 1.0, m_q = 1.0;
  double p = 0.0;
  double s_a = 0.0;
  double eta = 1e-3;
  long long T = 1, N = 1, d = 1, m = 1;
  double delta = 0.05;
  double c_l = 1.0, l_l = 1.0;

  // Throws listing every offending field, not just the first.
  void validate() const {
    std::vector<std::string> bad;
    auto positive = [&](double v, const char* name) {
      if (!(v > 0.0) || !std::isfinite(v)) bad.push_back(name);
    };
    positive(b_u, "b_u");
    positive(b_b, "b_b");
    positive(b_c, "b_c");
    positive(b_w, "b_w");
    positive(b_q, "b_q");
    positive(b_a, "b_a");
    positive(m_a, "m_a");
    positive(m_b, "m_b");
    positive(m_c, "m_c");
    positive(m_w, "m_w");
    positive(m_q, "m_q");
    positive(eta, "eta");
    positive(c_l, "c_l");
    positive(l_l, "l_l");
    if (!std::isfinite(p)) bad.push_back("p");
    if (!std::isfinite(s_a) || s_a + eta == 0.0) bad.push_back("s_a");
    if (T < 1) bad.push_back("T");
    if (N < 1) bad.push_back("N");
    if (d < 1) bad.push_back("d");
    if (m < 1) bad.push_back("m");
    if (!(delta > 0.0 && delta < 1.0)) bad.push_back("delta");
    if (!bad.empty()) {
      std::string msg = "invalid assumptions:";
      for (const std::string& f : bad) msg += " " + f;
      throw std::invalid_argument(msg);
    }
  }
};

// Worst-case per-step growth rate (1 + e^{p - b_q b_u})^{s_a + eta}.  Below
// one exactly when s_a + eta < 0.  The excluded point s_a + eta = 0 would
// collapse every regime to rate one.
inline double rho_a(const BoundAssumptions& a) {
  double expo = a.s_a + a.eta;
  if (expo == 0.0) throw std::invalid_argument("s_a + eta must be nonzero");
  return std::pow(1.0 + std::exp(a.p - a.b_q * a.b_u), expo);
}

// Largest reachable step size softplus(p + b_q b_u).
inline double m_delta(const BoundAssumptions& a) { return softplus(a.p + a.b_q * a.b_u); }

// S1 = sum_{t=0}^{T-1} rho^t.  The closed form degenerates near rho = 1, so
// the exact limit T takes over inside |rho - 1| <= 1e-8.
inline double s1(double rho, long long T) {
  if (!(rho > 0.0)) throw std::invalid_argument("rho must be positive");
  if (T < 0) throw std::invalid_argument("T must be nonnegative");
  if (std::fabs(rho - 1.0) <= 1e-8) return static_cast<double>(T);
  return (1.0 - std::pow(rho, static_cast<double>(T))) / (1.0 - rho);
}

// S2 = sum_{t=0}^{T-1} t rho^t = rho(1-rho^T)/(1-rho)^2 - T rho^T/(1-rho),
// with the limit T(T-1)/2 inside the same window around rho = 1.
inline double s2(double rho, long long T) {
  if (!(rho > 0.0)) throw std::invalid_argument("rho must be positive");
  if (T < 0) throw std::invalid_argument("T must be nonnegative");
  double Td = static_cast<double>(T);
  if (std::fabs(rho - 1.0) <= 1e-8) return Td * (Td - 1.0) / 2.0;
  double om = 1.0 - rho;
  double rt = std::pow(rho, Td);
  return rho * (1.0 - rt) / (om * om) - Td * rt / om;
}

// Capacity of the selective SSM class with every O-tilde constant and log
// factor set to one: a bound-shape quantity whose T- and norm-scaling are the
// claims under test, not its absolute value.
inline double capacity_ssm(const BoundAssumptions& a) {
  double md = m_delta(a);
  double rho = rho_a(a);
  double s2v = s2(rho, a.T);
  double inner = std::pow(md, 2.0 / 3.0) *
                     std::pow(static_cast<double>(a.N), 1.0 / 3.0) *
                     std::pow(static_cast<double>(a.d), 1.0 / 3.0) +
                 std::pow(a.b_q, 2.0 / 3.0) * std::pow(a.b_u, 2.0 / 3.0);
  return md * a.b_w * a.b_u * a.b_u * a.b_u * a.b_b * a.b_c * a.b_a * s2v *
         std::pow(inner, 1.5);
}

// Linear-attention capacity T b_w b_b b_c b_u^3 (same O-tilde convention).
inline double capacity_linear_attention(double b_w, double b_b, double b_c,
                                         double b_u, long long T) {
  if (!(b_w > 0.0 && b_b > 0.0 && b_c > 0.0 && b_u > 0.0) || T < 1)
    throw std::invalid_argument("linear-attention capacity needs positive inputs");
  return static_cast<double>(T) * b_w * b_b * b_c * b_u * b_u * b_u;
}

struct GapResult {
  double gap = 0.0;
  bool alpha_valid = false;  // whether the proof's alpha stays admissible
};

// Two-term generalization gap 12 l_l C/sqrt(m) (1 + ln(c_l sqrt(m)/(3C)))
// + 3 c_l sqrt(ln(2/delta)/(2m)).  delta is taken as given here; range
// checking belongs to BoundAssumptions::validate.
inline GapResult generalization_gap(double capacity, const BoundAssumptions& a) {
  if (!(capacity > 0.0)) throw std::invalid_argument("capacity must be positive");
  if (a.m < 1) throw std::invalid_argument("m must be at least 1");
  double sqm = std::sqrt(static_cast<double>(a.m));
  GapResult r;
  double lead = 12.0 * a.l_l * capacity / sqm;
  r.gap = lead * (1.0 + std::log(a.c_l * sqm / (3.0 * capacity))) +
          3.0 * a.c_l * std::sqrt(std::log(2.0 / a.delta) / (2.0 * static_cast<double>(a.m)));
  r.alpha_valid = 3.0 * a.l_l * capacity / sqm <= a.c_l;
  return r;
}

// Log covering number of the diagonal state blocks: 2 m_a^2 N d / eps^2
// * ln(sqrt(2) N d).
inline double cover_log_size_ac(double m_a, long long N, long long d, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("eps must be positive");
  if (N < 1 || d < 1) throw std::invalid_argument("N and d must be at least 1");
  double nd = static_cast<double>(N) * static_cast<double>(d);
  return 2.0 * m_a * m_a * nd / (eps * eps) * std::log(std::sqrt(2.0) * nd);
}

// Log covering number of a d1 x d2 linear map under bounded inputs:
// b_u^2 m_w^2 / eps^2 * ln(2 d1 d2 + 1).
inline double cover_log_size_linear(double b_u, double m_w, long long d1, long long d2,
                                    double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("eps must be positive");
  if (d1 < 1 || d2 < 1) throw std::invalid_argument("d1 and d2 must be at least 1");
  return b_u * b_u * m_w * m_w / (eps * eps) *
         std::log(2.0 * static_cast<double>(d1) * static_cast<double>(d2) + 1.0);
}

// ((1+s)^T - 1)/s, the restricted scalar model's total growth; the limit at
// s = 0 is T.  Near zero the direct form cancels, so expm1/log1p take over
// to keep the approach continuous; elsewhere pow keeps round values exact
// (s=1, T=3 gives 7 with no rounding).
inline double restricted_growth_factor(double s, long long T) {
  if (T < 0) throw std::invalid_argument("T must be nonnegative");
  if (!(s > -1.0)) throw std::invalid_argument("s must exceed -1");
  if (s == 0.0) return static_cast<double>(T);
  if (std::fabs(s) < 1e-4)
    return std::expm1(static_cast<double>(T) * std::log1p(s)) / s;
  return (std::pow(1.0 + s, static_cast<double>(T)) - 1.0) / s;
}

// Analytic lower bound b_w factor sqrt(2/(pi m)) on the expected Rademacher
// complexity of the restricted class; stated only for s_a >= 0.
inline double rademacher_lower_bound(double b_w, double s_a, long long T, long long m) {
  if (s_a < 0.0) throw std::invalid_argument("lower bound requires s_a >= 0");
  if (T < 1 || m < 1) throw std::invalid_argument("T and m must be at least 1");
  const double pi = 3.14159265358979323846;
  return b_w * restricted_growth_factor(s_a, T) *
         std::sqrt(2.0 / (pi * static_cast<double>(m)));
}

// Exact empirical Rademacher complexity of the restricted class,
// (b_w factor / m) E|sum sigma|, via the binomial identity
// E|sum sigma| = 2^{-m} sum_k C(m,k) |2k - m|.  All integer arithmetic is
// exact for the supported m, so the result carries no enumeration error.
inline double exact_rademacher_restricted(double b_w, double s_a, long long T,
                                          long long m) {
  if (m < 1 || m > 40)
    throw std::invalid_argument("exact enumeration supports 1 <= m <= 40");
  unsigned long long binom = 1;  // C(m, 0)
  unsigned long long numer = 0;
  for (long long k = 0; k <= m; ++k) {
    long long dev = 2 * k - m;
    numer += binom * static_cast<unsigned long long>(dev < 0 ? -dev : dev);
    if (k < m) binom = binom * static_cast<unsigned long long>(m - k) /
                       static_cast<unsigned long long>(k + 1);
  }
  double e_abs = std::ldexp(static_cast<double>(numer), static_cast<int>(-m));
  return b_w * restricted_growth_factor(s_a, T) / static_cast<double>(m) * e_abs;
}

// Monte-Carlo version of the same quantity: trials draws of m signs, scored
// as (b_w factor / m) |sum sigma|.  Deterministic given the seed.
inline double mc_rademacher_restricted(double b_w, double s_a, long long T,
                                       long long m, long long trials,
                                       std::uint64_t seed) {
  if (m < 1 || trials < 1)
    throw std::invalid_argument("need m >= 1 and trials >= 1");
  Rng rng(seed);
  const long long words = m / 64;
  const int rem = static_cast<int>(m % 64);
  const std::uint64_t rem_mask = rem ? ((std::uint64_t{1} << rem) - 1) : 0;
  long long total_abs = 0;
  for (long long t = 0; t < trials; ++t) {
    long long s = 0;
    for (long long w = 0; w < words; ++w)
      s += 2 * std::popcount(rng.next_u64()) - 64;
    if (rem) s += 2 * std::popcount(rng.next_u64() & rem_mask) - rem;
    total_abs += s < 0 ? -s : s;
  }
  double e_abs = static_cast<double>(total_abs) / static_cast<double>(trials);
  return b_w * restricted_growth_factor(s_a, T) / static_cast<double>(m) * e_abs;
}

// The nine logged parameter statistics.
struct NormAudit {
  double s_a = 0.0;       // spectral abscissa of a_diag
  double abs_p = 0.0;     // |p|
  double q_l2 = 0.0;      // ||q||_2
  double wb_l2 = 0.0;     // ||w_b||_2 (spectral)
  double wb_l11 = 0.0;    // ||w_b||_{1,1}
  double wc_l2 = 0.0;     // ||w_c||_2
  double wc_l11 = 0.0;    // ||w_c||_{1,1}
  double ac_l2 = 0.0;     // ||A_c||_2 = max |a_diag entry|
  double max_u_l2 = 0.0;  // max over data and steps of ||u_t||_2
};

inline NormAudit audit_norms(const SsmParams& params, const DatasetSplit& data) {
  if (data.examples.empty()) throw std::invalid_argument("audit needs a nonempty dataset");
  NormAudit a;
  a.s_a = spectral_abscissa(params.a_diag);
  a.abs_p = std::fabs(params.p);
  a.q_l2 = l2_norm(params.q);
  a.wb_l2 = spectral_norm(params.w_b);
  a.wb_l11 = mixed_norm(params.w_b, NormOrder::one, NormOrder::one);
  a.wc_l2 = spectral_norm(params.w_c);
  a.wc_l11 = mixed_norm(params.w_c, NormOrder::one, NormOrder::one);
  for (double e : params.a_diag.data) a.ac_l2 = std::max(a.ac_l2, std::fabs(e));
  Vector row_norm(params.embedding.rows, -1.0);  // lazily filled per token id
  for (const LabeledSequence& ex : data.examples) {
    for (int id : ex.tokens) {
      if (id < 0 || id >= params.embedding.rows)
        throw std::invalid_argument("dataset token outside the embedding table");
      if (row_norm[id] < 0.0) {
        double s = 0.0;
        for (int j = 0; j < params.embedding.cols; ++j)
          s += params.embedding.at(id, j) * params.embedding.at(id, j);
        row_norm[id] = std::sqrt(s);
      }
      a.max_u_l2 = std::max(a.max_u_l2, row_norm[id]);
    }
  }
  return a;
}

// Everything the `bound` command reports.  The lower bound is only stated
// for s_a >= 0; rademacher_lower is NaN outside that range and omitted from
// the JSON.
struct BoundReport {
  double rho_a = 0.0;
  double m_delta = 0.0;
  double s1 = 0.0;
  double s2 = 0.0;
  double capacity = 0.0;
  double capacity_linear = 0.0;
  double gap_bound = 0.0;
  bool alpha_valid = false;
  double rademacher_lower = 0.0;
  std::string regime;  // stable / marginal / unstable by sign of s_a
  std::string note;
};

inline BoundReport make_bound_report(const BoundAssumptions& a) {
  a.validate();
  BoundReport r;
  r.rho_a = rho_a(a);
  r.m_delta = m_delta(a);
  r.s1 = s1(r.rho_a, a.T);
  r.s2 = s2(r.rho_a, a.T);
  r.capacity = capacity_ssm(a);
  r.capacity_linear = capacity_linear_attention(a.b_w, a.b_b, a.b_c, a.b_u, a.T);
  if (r.capacity > 0.0) {
    GapResult g = generalization_gap(r.capacity, a);
    r.gap_bound = g.gap;
    r.alpha_valid = g.alpha_valid;
  } else {
    r.gap_bound = 0.0;
    r.alpha_valid = true;
  }
  r.regime = a.s_a < 0.0 ? "stable" : (a.s_a > 0.0 ? "unstable" : "marginal");
  r.rademacher_lower = a.s_a >= 0.0
                           ? rademacher_lower_bound(a.b_w, a.s_a, a.T, a.m)
                           : std::numeric_limits<double>::quiet_NaN();
  r.note = "capacity and gap are bound shapes: hidden constants and log factors set to 1";
  return r;
}

inline nlohmann::json bound_report_to_json(const BoundReport& r) {
  nlohmann::json j;
  j["rho_a"] = r.rho_a;
  j["m_delta"] = r.m_delta;
  j["s1"] = r.s1;
  j["s2"] = r.s2;
  j["capacity"] = r.capacity;
  j["capacity_linear"] = r.capacity_linear;
  j["gap_bound"] = r.gap_bound;
  j["alpha_valid"] = r.alpha_valid;
  if (!std::isnan(r.rademacher_lower)) j["rademacher_lower"] = r.rademacher_lower;
  j["regime"] = r.regime;
  j["note"] = r.note;
  return j;
}

inline BoundAssumptions assumptions_from_json(const nlohmann::json& j) {
  BoundAssumptions a;
  auto need = [&](const char* field) -> const nlohmann::json& {
    if (!j.contains(field))
      throw std::invalid_argument(std::string("assumptions missing field ") + field);
    return j.at(field);
  };
  a.b_u = need("b_u").get<double>();
  a.b_b = need("b_b").get<double>();
  a.b_c = need("b_c").get<double>();
  a.b_w = need("b_w").get<double>();
  a.b_q = need("b_q").get<double>();
  a.b_a = need("b_a").get<double>();
  a.m_a = j.value("m_a", a.b_a);
  a.m_b = j.value("m_b", a.b_b);
  a.m_c = j.value("m_c", a.b_c);
  a.m_w = j.value("m_w", a.b_w);
  a.m_q = j.value("m_q", a.b_q);
  a.p = need("p").get<double>();
  a.s_a = need("s_a").get<double>();
  a.eta = j.value("eta", 1e-3);
  a.T = need("T").get<long long>();
  a.N = need("N").get<long long>();
  a.d = need("d").get<long long>();
  a.m = need("m").get<long long>();
  a.delta = j.value("delta", 0.05);
  a.c_l = j.value("c_l", 1.0);
  a.l_l = j.value("l_l", 1.0);
  a.validate();
  return a;
}

}  // namespace selssm
