#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "selssm/autograd.hpp"

using namespace selssm;

namespace {

struct Instance {
  SsmParams params;
  std::vector<LabeledSequence> batch;
};

Instance random_instance(Rng& rng, int max_dn = 3, int max_T = 8) {
  Instance inst;
  int d = rng.int_in(1, max_dn);
  int N = rng.int_in(1, max_dn);
  int K = rng.int_in(2, 3);
  int V = rng.int_in(2, 5);
  inst.params = init_params(d, N, K, V, 0.2, rng.next_u64());
  // Spread the remaining parameters a little wider than the init so the
  // gradient check does not sit near a symmetric point.
  for (double* p : param_view(inst.params)) *p += rng.uniform(-0.3, 0.3);
  int B = rng.int_in(1, 3);
  for (int b = 0; b < B; ++b) {
    LabeledSequence ex;
    int T = rng.int_in(1, max_T);
    for (int t = 0; t < T; ++t) ex.tokens.push_back(rng.int_in(0, V - 1));
    ex.label = rng.int_in(0, K - 1);
    inst.batch.push_back(std::move(ex));
  }
  // All sequences in a batch share one length.
  std::size_t T0 = inst.batch[0].tokens.size();
  for (auto& ex : inst.batch) ex.tokens.resize(T0, 0);
  return inst;
}

double max_rel_error(GradientSet& a, GradientSet& fd) {
  auto va = grad_view(a);
  auto vfd = grad_view(fd);
  double worst = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i)
    worst = std::max(worst, std::fabs(*va[i] - *vfd[i]) / (1e-6 + std::fabs(*vfd[i])));
  return worst;
}

}  // namespace

TEST_CASE("cross entropy matches its closed-form anchors") {
  CrossEntropyResult even = cross_entropy({0.3, 0.3}, 1);
  CHECK(even.loss == Catch::Approx(std::log(2.0)).epsilon(1e-14));
  CrossEntropyResult sharp = cross_entropy({10.0, -10.0}, 0);
  CHECK(sharp.loss == Catch::Approx(2.0611536203143807e-9).epsilon(1e-12));
  CHECK(sharp.correct);
  CrossEntropyResult wrong = cross_entropy({10.0, -10.0}, 1);
  CHECK(wrong.loss == Catch::Approx(20.0).epsilon(1e-9));
  CHECK(!wrong.correct);
}

TEST_CASE("cross entropy gradient is softmax minus onehot") {
  Rng rng(201);
  for (int rep = 0; rep < 100; ++rep) {
    int K = rng.int_in(2, 6);
    Vector logits(K);
    for (double& z : logits) z = rng.uniform(-5.0, 5.0);
    int label = rng.int_in(0, K - 1);
    CrossEntropyResult r = cross_entropy(logits, label);
    double sum = 0.0;
    for (double gv : r.d_logits) sum += gv;
    CHECK(std::fabs(sum) < 1e-12);
    CHECK(r.d_logits[label] < 0.0);
    CHECK(r.loss >= 0.0);
  }
  // Flipping the binary label shifts the gradient by the onehot difference,
  // and negates it exactly when the logits are tied.
  Vector logits{0.7, -0.4};
  CrossEntropyResult g0 = cross_entropy(logits, 0);
  CrossEntropyResult g1 = cross_entropy(logits, 1);
  CHECK(g0.d_logits[0] - g1.d_logits[0] == Catch::Approx(-1.0).epsilon(1e-14));
  CHECK(g0.d_logits[1] - g1.d_logits[1] == Catch::Approx(1.0).epsilon(1e-14));
  CrossEntropyResult e0 = cross_entropy({1.0, 1.0}, 0);
  CrossEntropyResult e1 = cross_entropy({1.0, 1.0}, 1);
  CHECK(e0.d_logits[0] == Catch::Approx(-e1.d_logits[0]).epsilon(1e-14));
  CHECK(e0.d_logits[1] == Catch::Approx(-e1.d_logits[1]).epsilon(1e-14));
  CHECK_THROWS_AS(cross_entropy(logits, 2), std::invalid_argument);
}

TEST_CASE("analytic gradients match central finite differences") {
  Rng rng(202);
  const double step = 1e-5;
  for (int rep = 0; rep < 20; ++rep) {
    Instance inst = random_instance(rng);
    double reg_lambda = (rep % 3 == 0) ? 0.05 : 0.0;
    LossAndGrad lg = loss_and_grad(inst.params, inst.batch, reg_lambda);
    GradientSet fd = finite_diff_grad(inst.params, inst.batch, reg_lambda, step);
    CHECK(max_rel_error(lg.grads, fd) <= 1e-4);
  }
}

TEST_CASE("forced unit step size keeps step parameters frozen") {
  Rng rng(203);
  ScanOptions opts;
  opts.unit_delta = true;
  for (int rep = 0; rep < 5; ++rep) {
    Instance inst = random_instance(rng);
    LossAndGrad lg = loss_and_grad(inst.params, inst.batch, 0.0, opts);
    CHECK(lg.grads.d_p == 0.0);
    for (double dq : lg.grads.d_q) CHECK(dq == 0.0);
    GradientSet fd = finite_diff_grad(inst.params, inst.batch, 0.0, 1e-5, opts);
    CHECK(max_rel_error(lg.grads, fd) <= 1e-4);
  }
}

TEST_CASE("step-size bias gradient matches a tight finite difference") {
  Rng rng(204);
  Instance inst = random_instance(rng, 2, 5);
  LossAndGrad lg = loss_and_grad(inst.params, inst.batch, 0.0);
  const double h = 1e-6;
  SsmParams up = inst.params, down = inst.params;
  up.p += h;
  down.p -= h;
  double fd = (batch_loss(up, inst.batch, 0.0).loss - batch_loss(down, inst.batch, 0.0).loss) / (2 * h);
  CHECK(std::fabs(lg.grads.d_p - fd) < 1e-7);
}

TEST_CASE("batch gradient is invariant to example order") {
  Rng rng(205);
  Instance inst = random_instance(rng);
  while (inst.batch.size() < 3) inst.batch.push_back(inst.batch[0]);
  LossAndGrad a = loss_and_grad(inst.params, inst.batch, 0.01);
  std::vector<LabeledSequence> rev(inst.batch.rbegin(), inst.batch.rend());
  LossAndGrad b = loss_and_grad(inst.params, rev, 0.01);
  auto va = grad_view(a.grads);
  auto vb = grad_view(b.grads);
  for (std::size_t i = 0; i < va.size(); ++i) CHECK(std::fabs(*va[i] - *vb[i]) < 1e-12);
  CHECK(a.value.loss == Catch::Approx(b.value.loss).epsilon(1e-14));
  CHECK(a.value.correct == b.value.correct);
}

TEST_CASE("gradients are bitwise deterministic") {
  Rng rng(206);
  Instance inst = random_instance(rng);
  LossAndGrad a = loss_and_grad(inst.params, inst.batch, 0.01);
  LossAndGrad b = loss_and_grad(inst.params, inst.batch, 0.01);
  auto va = grad_view(a.grads);
  auto vb = grad_view(b.grads);
  for (std::size_t i = 0; i < va.size(); ++i) CHECK(*va[i] == *vb[i]);
  CHECK(a.value.loss == b.value.loss);
}

TEST_CASE("zero embeddings starve the projection gradients") {
  SsmParams m = init_params(3, 2, 2, 4, 0.0, 77);
  for (double& e : m.embedding.data) e = 0.0;
  std::vector<LabeledSequence> batch{{{0, 1, 2}, 1}, {{3, 3, 0}, 0}};
  LossAndGrad lg = loss_and_grad(m, batch, 0.0);
  for (double e : lg.grads.d_w_b.data) CHECK(e == 0.0);
  for (double e : lg.grads.d_w_c.data) CHECK(e == 0.0);
  for (double e : lg.grads.d_a_diag.data) CHECK(e == 0.0);
  // The readout still learns its bias toward the labels... through y_T = 0 it
  // cannot: dlogits x 0 = 0.
  for (double e : lg.grads.d_readout.data) CHECK(e == 0.0);
}

TEST_CASE("stability penalty adds exactly its closed form") {
  Rng rng(207);
  Instance inst = random_instance(rng);
  const double lam = 0.7;
  LossAndGrad with = loss_and_grad(inst.params, inst.batch, lam);
  LossAndGrad without = loss_and_grad(inst.params, inst.batch, 0.0);
  double hinge = 0.0;
  for (double e : inst.params.a_diag.data)
    if (e > 0.0) hinge += e * e;
  CHECK(with.value.loss - without.value.loss == Catch::Approx(lam * hinge).epsilon(1e-12));
  for (int i = 0; i < inst.params.a_diag.rows * inst.params.a_diag.cols; ++i) {
    double e = inst.params.a_diag.data[i];
    double expect = e > 0.0 ? 2.0 * lam * e : 0.0;
    CHECK(with.grads.d_a_diag.data[i] - without.grads.d_a_diag.data[i] ==
          Catch::Approx(expect).margin(1e-13));
  }
}

TEST_CASE("forward overflow propagates out of the loss") {
  SsmParams m = init_params(1, 1, 2, 2, 0.0, 3);
  m.a_diag = Matrix(1, 1, 360.0);
  m.embedding = Matrix(2, 1, 1.0);
  std::vector<LabeledSequence> batch{{{0, 1, 0}, 1}};
  ScanOptions opts;
  opts.unit_delta = true;
  CHECK_THROWS_AS(loss_and_grad(m, batch, 0.0, opts), scan_overflow_error);
  CHECK_THROWS_AS(loss_and_grad(m, {}, 0.0), std::invalid_argument);
}
