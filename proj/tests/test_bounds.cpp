#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "selssm/bounds.hpp"

using namespace selssm;

namespace {

BoundAssumptions unit_assumptions() {
  BoundAssumptions a;  // defaults are all ones with p = 0, s_a = 0
  return a;
}

double brute_s2(double rho, long long T) {
  double sum = 0.0;
  double pw = 1.0;
  for (long long t = 0; t < T; ++t) {
    sum += static_cast<double>(t) * pw;
    pw *= rho;
  }
  return sum;
}

Matrix diag_block(const Matrix& a_diag) {
  int n = a_diag.rows * a_diag.cols;
  Matrix full(n, n);
  for (int i = 0; i < n; ++i) full.at(i, i) = a_diag.data[i];
  return full;
}

}  // namespace

TEST_CASE("decay rate hits its anchors and tracks the regime sign") {
  BoundAssumptions a = unit_assumptions();
  a.p = 1.0;       // p - b_q b_u = 0, so the base is 2
  a.eta = 1e-300;  // keeps eta positive without moving the exponent off 1
  a.s_a = 1.0;
  CHECK(rho_a(a) == Catch::Approx(2.0).epsilon(1e-9));
  a.s_a = -1.0;
  CHECK(rho_a(a) == Catch::Approx(0.5).epsilon(1e-9));

  BoundAssumptions b = unit_assumptions();
  b.p = 0.0;
  b.s_a = 0.1;
  b.eta = 1e-3;  // exponent 0.101, base 1 + e^{-1}
  CHECK(rho_a(b) == Catch::Approx(1.0321452780328021).epsilon(1e-14));

  BoundAssumptions bad = unit_assumptions();
  bad.s_a = -1e-3;
  bad.eta = 1e-3;
  CHECK_THROWS_AS(rho_a(bad), std::invalid_argument);

  Rng rng(301);
  for (int rep = 0; rep < 50; ++rep) {
    BoundAssumptions c = unit_assumptions();
    c.p = rng.uniform(-3.0, 3.0);
    c.b_q = rng.uniform(0.1, 2.0);
    c.b_u = rng.uniform(0.1, 2.0);
    c.s_a = rng.uniform(-0.5, 0.5);
    c.eta = 1e-3;
    if (c.s_a + c.eta == 0.0) continue;
    double r = rho_a(c);
    CHECK(r > 0.0);
    if (c.s_a + c.eta < 0.0) CHECK(r < 1.0);
    if (c.s_a + c.eta > 0.0) CHECK(r > 1.0);
  }
}

TEST_CASE("step-size ceiling evaluates softplus at the corner") {
  BoundAssumptions a = unit_assumptions();
  a.p = 0.0;
  a.b_q = 1e-300;  // b_q b_u effectively 0 while staying positive
  CHECK(m_delta(a) == Catch::Approx(std::log(2.0)).epsilon(1e-14));
  a.p = std::log(std::exp(1.0) - 1.0);
  CHECK(m_delta(a) == Catch::Approx(1.0).epsilon(1e-14));
  BoundAssumptions b = unit_assumptions();
  b.p = 1.0;
  b.b_q = 1.0;
  b.b_u = 2.0;
  CHECK(m_delta(b) == Catch::Approx(3.0485873515737421).epsilon(1e-13));
}

TEST_CASE("geometric sums match their closed forms and limits") {
  CHECK(s2(1.0, 10) == 45.0);
  CHECK(s2(0.5, 3) == Catch::Approx(1.0).epsilon(1e-14));
  CHECK(s1(0.5, 3) == Catch::Approx(1.75).epsilon(1e-14));
  CHECK(s1(1.0, 10) == 10.0);
  CHECK(s2(1.0 + 5e-9, 10) == 45.0);  // inside the limit window
  CHECK(s1(2.0, 4) == Catch::Approx(15.0).epsilon(1e-14));
  CHECK_THROWS_AS(s1(0.0, 5), std::invalid_argument);
  CHECK_THROWS_AS(s2(-1.0, 5), std::invalid_argument);
}

TEST_CASE("weighted geometric sum agrees with brute force on the grid") {
  for (double rho : {0.2, 0.9, 0.999, 1.0, 1.001, 1.5}) {
    for (long long T : {1LL, 10LL, 100LL, 1000LL}) {
      double closed = s2(rho, T);
      double brute = brute_s2(rho, T);
      CHECK(std::fabs(closed - brute) <= 1e-9 * (1.0 + std::fabs(brute)));
    }
  }
}

TEST_CASE("stable-regime sum saturates and unstable-regime sum explodes") {
  for (double rho : {0.2, 0.7, 0.95}) {
    double cap = rho / ((1.0 - rho) * (1.0 - rho));
    double prev = -1.0;
    for (long long T : {1LL, 10LL, 100LL, 1000LL, 100000LL}) {
      double v = s2(rho, T);
      CHECK(v >= prev);
      CHECK(v <= cap * (1.0 + 1e-12));
      prev = v;
    }
  }
  for (double rho : {1.5, 2.0, 3.0}) {
    const long long T = 600;
    double ratio = s2(rho, T) / (static_cast<double>(T) * std::pow(rho, static_cast<double>(T)));
    double limit = 1.0 / (rho - 1.0);
    double next_order = rho / ((rho - 1.0) * (rho - 1.0) * static_cast<double>(T));
    CHECK(std::fabs(ratio - limit) <= 2.0 * next_order);
  }
}

TEST_CASE("capacity saturates in T for contracting rates") {
  BoundAssumptions a = unit_assumptions();
  a.p = std::log(std::exp(1.0) - 1.0) - 1.0;  // m_delta exactly 1
  a.s_a = -0.5;
  a.eta = 1e-3;
  a.N = 1;
  a.d = 1;
  a.T = 1000000;
  REQUIRE(m_delta(a) == Catch::Approx(1.0).epsilon(1e-14));
  double rho = rho_a(a);
  REQUIRE(rho < 1.0);
  double tail = rho / ((1.0 - rho) * (1.0 - rho));
  CHECK(capacity_ssm(a) ==
        Catch::Approx(tail * std::pow(2.0, 1.5)).epsilon(1e-9));

  a.T = 1;  // S2 is an empty weighted sum
  CHECK(capacity_ssm(a) == 0.0);

  a.T = 50;
  double base = capacity_ssm(a);
  a.b_w = 2.0;
  CHECK(capacity_ssm(a) == Catch::Approx(2.0 * base).epsilon(1e-12));
}

TEST_CASE("linear-attention capacity is the plain product") {
  CHECK(capacity_linear_attention(1, 1, 1, 1, 1) == 1.0);
  CHECK(capacity_linear_attention(1, 1, 1, 2, 1) == 8.0);
  CHECK(capacity_linear_attention(1, 1, 1, 1, 100) == 100.0);
  CHECK_THROWS_AS(capacity_linear_attention(0, 1, 1, 1, 1), std::invalid_argument);
}

TEST_CASE("generalization gap matches the worked example") {
  BoundAssumptions a = unit_assumptions();
  a.m = 900;
  a.delta = 2.0 / std::exp(1.0);
  a.c_l = 1.0;
  a.l_l = 1.0;
  GapResult g = generalization_gap(1.0, a);
  CHECK(g.gap == Catch::Approx(1.3917447153162730).epsilon(1e-13));
  CHECK(g.alpha_valid);  // 3/30 <= 1

  // Degenerate confidence delta = 2 zeroes the deviation term; this bypasses
  // validate() deliberately to probe the raw formula.
  BoundAssumptions d2 = a;
  d2.delta = 2.0;
  GapResult gd = generalization_gap(1.0, d2);
  double lead = 12.0 / 30.0 * (1.0 + std::log(30.0 / 3.0));
  CHECK(gd.gap == Catch::Approx(lead).epsilon(1e-13));

  CHECK_THROWS_AS(generalization_gap(0.0, a), std::invalid_argument);
  CHECK_THROWS_AS(generalization_gap(-1.0, a), std::invalid_argument);

  // Monotone in capacity while alpha stays admissible.
  double prev = 0.0;
  for (double cap : {0.01, 0.1, 1.0, 5.0}) {
    GapResult r = generalization_gap(cap, a);
    if (r.alpha_valid) {
      CHECK(r.gap > prev);
      prev = r.gap;
    }
  }
  BoundAssumptions big = a;
  big.m = 400000000;
  GapResult shrunk = generalization_gap(1.0, big);
  CHECK(shrunk.gap < g.gap);
}

TEST_CASE("covering-number log sizes match their plug-ins") {
  CHECK(cover_log_size_ac(1.0, 1, 1, 1.0) == Catch::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(cover_log_size_ac(0.0, 3, 2, 0.5) == 0.0);
  double v1 = cover_log_size_ac(1.5, 2, 3, 0.2);
  double v2 = cover_log_size_ac(1.5, 2, 3, 0.4);
  CHECK(v2 == Catch::Approx(v1 / 4.0).epsilon(1e-12));

  CHECK(cover_log_size_linear(1.0, 1.0, 1, 1, 1.0) ==
        Catch::Approx(1.0986122886681098).epsilon(1e-14));
  CHECK(cover_log_size_linear(1.0, 0.0, 4, 5, 0.3) == 0.0);
  double w1 = cover_log_size_linear(1.0, 1.2, 2, 2, 0.7);
  double w2 = cover_log_size_linear(2.0, 1.2, 2, 2, 0.7);
  CHECK(w2 == Catch::Approx(4.0 * w1).epsilon(1e-12));
  CHECK_THROWS_AS(cover_log_size_ac(1.0, 1, 1, 0.0), std::invalid_argument);
}

TEST_CASE("restricted growth factor and lower bound follow the two branches") {
  CHECK(restricted_growth_factor(0.0, 7) == 7.0);
  CHECK(restricted_growth_factor(1.0, 3) == Catch::Approx(7.0).epsilon(1e-14));
  CHECK(rademacher_lower_bound(1.0, 0.0, 10, 100) ==
        Catch::Approx(0.7978845608028654).epsilon(1e-13));
  double sq = rademacher_lower_bound(1.0, 1.0, 3, 400);
  CHECK(sq == Catch::Approx(7.0 * std::sqrt(2.0 / (3.14159265358979323846 * 400.0)))
                  .epsilon(1e-13));
  CHECK(rademacher_lower_bound(1.0, 1e-9, 10, 100) ==
        Catch::Approx(rademacher_lower_bound(1.0, 0.0, 10, 100)).epsilon(1e-6));
  CHECK_THROWS_AS(rademacher_lower_bound(1.0, -0.1, 10, 100), std::invalid_argument);

  double base = rademacher_lower_bound(1.0, 0.5, 10, 100);
  CHECK(rademacher_lower_bound(2.0, 0.5, 10, 100) > base);
  CHECK(rademacher_lower_bound(1.0, 0.6, 10, 100) > base);
  CHECK(rademacher_lower_bound(1.0, 0.5, 11, 100) > base);
  CHECK(rademacher_lower_bound(1.0, 0.5, 10, 200) < base);
}

TEST_CASE("exact restricted Rademacher matches full sign enumeration") {
  for (long long m : {2LL, 3LL, 5LL, 8LL, 12LL}) {
    for (double s_a : {0.0, 0.5}) {
      const long long T = 4;
      const double b_w = 1.3;
      unsigned long long sum_abs = 0;
      for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << m); ++mask) {
        long long s = 2 * std::popcount(mask) - m;
        sum_abs += static_cast<unsigned long long>(s < 0 ? -s : s);
      }
      double e_abs = static_cast<double>(sum_abs) /
                     static_cast<double>(std::uint64_t{1} << m);
      double expect = b_w * restricted_growth_factor(s_a, T) /
                      static_cast<double>(m) * e_abs;
      CHECK(exact_rademacher_restricted(b_w, s_a, T, m) == expect);
    }
  }
  // Closed-form spot values of E|sum sigma|.
  CHECK(exact_rademacher_restricted(1.0, 0.0, 1, 2) == 0.5);          // E=1, /2
  CHECK(exact_rademacher_restricted(3.0, 0.0, 1, 3) == 1.5);          // E=1.5
  CHECK(exact_rademacher_restricted(12.0, 0.0, 1, 12) == 2.70703125); // E=2.70703125
  CHECK_THROWS_AS(exact_rademacher_restricted(1.0, 0.0, 1, 0), std::invalid_argument);
}

TEST_CASE("Monte-Carlo restricted Rademacher is calibrated and seeded") {
  double est = mc_rademacher_restricted(1.0, 0.0, 1, 2, 20000, 9);
  CHECK(std::fabs(est - 0.5) <= 3.0 / (2.0 * std::sqrt(20000.0)));
  CHECK(mc_rademacher_restricted(0.0, 0.0, 1, 64, 100, 1) == 0.0);
  CHECK(mc_rademacher_restricted(1.0, 0.0, 1, 100, 500, 4) ==
        mc_rademacher_restricted(1.0, 0.0, 1, 100, 500, 4));
  CHECK(mc_rademacher_restricted(1.0, 0.0, 1, 100, 500, 4) !=
        mc_rademacher_restricted(1.0, 0.0, 1, 100, 500, 5));
  double big = mc_rademacher_restricted(1.0, 0.0, 1, 10000, 100000, 12);
  double asym = std::sqrt(2.0 / (3.14159265358979323846 * 10000.0));
  CHECK(std::fabs(big - asym) <= 0.02 * asym);
}

TEST_CASE("norm audit reproduces hand-computed statistics") {
  SsmParams params;
  params.d = 2;
  params.N = 2;
  params.K = 2;
  params.V = 3;
  params.a_diag = Matrix(2, 2);
  params.a_diag.at(0, 0) = -2.0;
  params.a_diag.at(0, 1) = 0.5;
  params.a_diag.at(1, 0) = 1.0;
  params.a_diag.at(1, 1) = -0.3;
  params.w_b = Matrix(2, 2);
  params.w_b.at(0, 0) = 3.0;
  params.w_b.at(1, 1) = 4.0;
  params.w_c = Matrix(2, 2);
  params.w_c.at(0, 0) = 1.0;
  params.w_c.at(1, 1) = 1.0;
  params.p = -0.7;
  params.q = {3.0, 4.0};
  params.readout = Matrix(2, 2);
  params.embedding = Matrix(3, 2);
  params.embedding.at(0, 0) = 0.0;  // pad row stays zero
  params.embedding.at(1, 0) = 0.6;
  params.embedding.at(1, 1) = 0.8;  // norm 1
  params.embedding.at(2, 0) = 3.0;
  params.embedding.at(2, 1) = 4.0;  // norm 5, never referenced below

  DatasetSplit data;
  data.T = 3;
  data.vocab_size = 3;
  data.num_classes = 2;
  data.examples = {{{0, 1, 0}, 0}, {{1, 1, 1}, 1}};

  NormAudit a = audit_norms(params, data);
  CHECK(a.s_a == 1.0);
  CHECK(a.abs_p == Catch::Approx(0.7).epsilon(1e-15));
  CHECK(a.q_l2 == Catch::Approx(5.0).epsilon(1e-14));
  CHECK(a.wb_l2 == Catch::Approx(4.0).epsilon(1e-9));
  CHECK(a.wb_l11 == Catch::Approx(7.0).epsilon(1e-14));
  CHECK(a.wc_l2 == Catch::Approx(1.0).epsilon(1e-9));
  CHECK(a.wc_l11 == Catch::Approx(2.0).epsilon(1e-14));
  CHECK(a.ac_l2 == Catch::Approx(2.0).epsilon(1e-15));
  CHECK(a.max_u_l2 == Catch::Approx(1.0).epsilon(1e-12));

  // The diagonal ||A_c||_2 shortcut equals the materialized spectral norm.
  CHECK(a.ac_l2 == Catch::Approx(spectral_norm(diag_block(params.a_diag))).epsilon(1e-9));

  SsmParams zero = params;
  for (double* ptr : {&zero.p}) *ptr = 0.0;
  zero.a_diag = Matrix(2, 2);
  zero.w_b = Matrix(2, 2);
  zero.w_c = Matrix(2, 2);
  zero.q = {0.0, 0.0};
  zero.embedding = Matrix(3, 2);
  NormAudit z = audit_norms(zero, data);
  CHECK(z.s_a == 0.0);
  CHECK(z.abs_p == 0.0);
  CHECK(z.q_l2 == 0.0);
  CHECK(z.wb_l2 == 0.0);
  CHECK(z.wb_l11 == 0.0);
  CHECK(z.ac_l2 == 0.0);
  CHECK(z.max_u_l2 == 0.0);
  CHECK_THROWS_AS(audit_norms(params, DatasetSplit{}), std::invalid_argument);
}

TEST_CASE("bound report labels regimes and respects the lower bound's domain") {
  BoundAssumptions a = unit_assumptions();
  a.s_a = -0.2;
  a.T = 100;
  a.m = 1000;
  BoundReport r = make_bound_report(a);
  CHECK(r.regime == "stable");
  CHECK(std::isnan(r.rademacher_lower));
  nlohmann::json j = bound_report_to_json(r);
  CHECK(!j.contains("rademacher_lower"));
  CHECK(j.contains("capacity"));
  CHECK(j.contains("note"));

  a.s_a = 0.0;
  r = make_bound_report(a);
  CHECK(r.regime == "marginal");
  CHECK(!std::isnan(r.rademacher_lower));
  a.s_a = 0.1;
  r = make_bound_report(a);
  CHECK(r.regime == "unstable");
  CHECK(r.rho_a > 1.0);

  BoundAssumptions bad = unit_assumptions();
  bad.b_u = -1.0;
  bad.delta = 1.5;
  try {
    make_bound_report(bad);
    FAIL("expected invalid_argument");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("b_u") != std::string::npos);
    CHECK(msg.find("delta") != std::string::npos);
  }
}

TEST_CASE("assumptions parse from JSON with defaults") {
  nlohmann::json j = {
      {"b_u", 1.0}, {"b_b", 1.0}, {"b_c", 1.0}, {"b_w", 2.0}, {"b_q", 1.0},
      {"b_a", 1.0}, {"p", 0.0},   {"s_a", -0.1}, {"T", 100},  {"N", 4},
      {"d", 4},     {"m", 1000}};
  BoundAssumptions a = assumptions_from_json(j);
  CHECK(a.b_w == 2.0);
  CHECK(a.eta == 1e-3);
  CHECK(a.delta == 0.05);
  CHECK(a.m_w == 2.0);  // m_* default to the matching b_*
  j.erase("T");
  CHECK_THROWS_AS(assumptions_from_json(j), std::invalid_argument);
}
