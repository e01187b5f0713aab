#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "selssm/numkit.hpp"

using namespace selssm;

namespace {

Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  int r = static_cast<int>(rows.size());
  int c = static_cast<int>(rows.begin()->size());
  Matrix m(r, c);
  int i = 0;
  for (const auto& row : rows) {
    int j = 0;
    for (double e : row) m.at(i, j++) = e;
    ++i;
  }
  return m;
}

Matrix random_matrix(Rng& rng, int r, int c, double lo = -2.0, double hi = 2.0) {
  Matrix m(r, c);
  for (double& e : m.data) e = rng.uniform(lo, hi);
  return m;
}

}  // namespace

TEST_CASE("mixed_norm matches the pinned examples") {
  Matrix id = from_rows({{1, 0}, {0, 1}});
  CHECK(mixed_norm(id, NormOrder::two, NormOrder::one) == Catch::Approx(2.0).epsilon(1e-14));

  Matrix a = from_rows({{1, -2}, {3, 4}});
  CHECK(mixed_norm(a, NormOrder::one, NormOrder::one) == Catch::Approx(10.0).epsilon(1e-14));

  Matrix b = from_rows({{3, 0}, {0, 4}});
  CHECK(mixed_norm(b, NormOrder::two, NormOrder::one) == Catch::Approx(7.0).epsilon(1e-14));
}

TEST_CASE("mixed_norm (1,1) is the sum of absolute entries") {
  Rng rng(11);
  for (int rep = 0; rep < 50; ++rep) {
    int r = rng.int_in(1, 5);
    int c = rng.int_in(1, 5);
    Matrix m = random_matrix(rng, r, c);
    double expect = 0.0;
    for (double e : m.data) expect += std::fabs(e);
    CHECK(mixed_norm(m, NormOrder::one, NormOrder::one) == Catch::Approx(expect).epsilon(1e-13));
  }
}

TEST_CASE("mixed_norm supports inf orders") {
  Matrix a = from_rows({{1, -2}, {3, 4}});
  // column inf-norms: (3, 4); their 1-norm is 7, their inf-norm is 4.
  CHECK(mixed_norm(a, NormOrder::inf, NormOrder::one) == Catch::Approx(7.0));
  CHECK(mixed_norm(a, NormOrder::inf, NormOrder::inf) == Catch::Approx(4.0));
  // column 1-norms: (4, 6); inf over them is 6 (the classical induced 1-norm).
  CHECK(mixed_norm(a, NormOrder::one, NormOrder::inf) == Catch::Approx(6.0));
}

TEST_CASE("spectral_norm matches the pinned examples") {
  CHECK(spectral_norm(from_rows({{3, 0}, {0, -4}})) == Catch::Approx(4.0).epsilon(1e-9));
  CHECK(spectral_norm(from_rows({{1, 0}, {0, 1}})) == Catch::Approx(1.0).epsilon(1e-12));
  Matrix id5(5, 5);
  for (int i = 0; i < 5; ++i) id5.at(i, i) = 1.0;
  CHECK(spectral_norm(id5) == Catch::Approx(1.0).epsilon(1e-12));
  // Nilpotent shift: singular values of [[0,1],[0,0]] are {1, 0}.
  CHECK(spectral_norm(from_rows({{0, 1}, {0, 0}})) == Catch::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("spectral_norm survives an all-ones start in the null space") {
  // X = [1, -1] annihilates the all-ones start; true norm is sqrt(2).
  Matrix x = from_rows({{1, -1}});
  CHECK(spectral_norm(x) == Catch::Approx(std::sqrt(2.0)).epsilon(1e-9));
  Matrix zero(3, 2);
  CHECK(spectral_norm(zero) == 0.0);
}

TEST_CASE("spectral_norm is dominated by the column-norm sum") {
  Rng rng(12);
  for (int rep = 0; rep < 50; ++rep) {
    int r = rng.int_in(1, 6);
    int c = rng.int_in(1, 6);
    Matrix m = random_matrix(rng, r, c);
    double spec = spectral_norm(m);
    double dom = mixed_norm(m, NormOrder::two, NormOrder::one);
    CHECK(spec <= dom * (1.0 + 1e-9) + 1e-12);
  }
}

TEST_CASE("spectral_norm rejects bad arguments") {
  Matrix empty;
  CHECK_THROWS_AS(spectral_norm(empty), std::invalid_argument);
  CHECK_THROWS_AS(spectral_norm(Matrix(2, 2, 1.0), 0.0), std::invalid_argument);
}

TEST_CASE("softplus matches the pinned examples") {
  CHECK(softplus(0.0) == Catch::Approx(0.6931471805599453).epsilon(1e-14));
  CHECK(softplus(std::log(std::exp(1.0) - 1.0)) == Catch::Approx(1.0).epsilon(1e-14));
  CHECK(std::fabs(softplus(50.0) - 50.0) < 1e-15);
  CHECK(softplus(2.0) == Catch::Approx(2.1269280110429727).epsilon(1e-14));
}

TEST_CASE("softplus is monotone and 1-Lipschitz") {
  Rng rng(13);
  for (int rep = 0; rep < 200; ++rep) {
    double a = rng.uniform(-40.0, 40.0);
    double b = rng.uniform(-40.0, 40.0);
    if (a > b) std::swap(a, b);
    double fa = softplus(a);
    double fb = softplus(b);
    CHECK(fb >= fa);
    CHECK(fb - fa <= (b - a) + 1e-12);
  }
}

TEST_CASE("softplus_deriv matches central finite differences") {
  Rng rng(14);
  const double h = 1e-5;
  for (int rep = 0; rep < 100; ++rep) {
    double x = rng.uniform(-20.0, 20.0);
    double fd = (softplus(x + h) - softplus(x - h)) / (2 * h);
    CHECK(std::fabs(softplus_deriv(x) - fd) < 1e-8);
    CHECK(softplus_deriv(x) > 0.0);
    CHECK(softplus_deriv(x) < 1.0);
  }
}

TEST_CASE("Rng is deterministic and its helpers stay in range") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.next_u64() == b.next_u64());
  }
  Rng r(7);
  for (int i = 0; i < 1000; ++i) {
    double u = r.uniform01();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    int k = r.int_in(-3, 3);
    CHECK(k >= -3);
    CHECK(k <= 3);
  }
  std::vector<int> v{1, 2, 3, 4, 5};
  Rng s1(9), s2(9);
  auto w = v;
  s1.shuffle(v);
  s2.shuffle(w);
  CHECK(v == w);
}
