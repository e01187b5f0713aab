#pragma once

// Exact reverse-mode gradients of the classification objective through
// embedding, selective scan, readout, and the stability penalty, plus a
// central-finite-difference oracle used to test them.

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "selssm/datasets.hpp"
#include "selssm/numkit.hpp"
#include "selssm/ssm.hpp"

namespace selssm {

// One array per parameter field, shape-matched to SsmParams.
struct GradientSet {
  Matrix d_a_diag;
  Matrix d_w_b;
  Matrix d_w_c;
  double d_p = 0.0;
  Vector d_q;
  Matrix d_readout;
  Matrix d_embedding;

  static GradientSet zeros_like(const SsmParams& m) {
    GradientSet g;
    g.d_a_diag = Matrix(m.a_diag.rows, m.a_diag.cols);
    g.d_w_b = Matrix(m.w_b.rows, m.w_b.cols);
    g.d_w_c = Matrix(m.w_c.rows, m.w_c.cols);
    g.d_q = Vector(m.q.size(), 0.0);
    g.d_readout = Matrix(m.readout.rows, m.readout.cols);
    g.d_embedding = Matrix(m.embedding.rows, m.embedding.cols);
    return g;
  }
};

// Flat scalar views over parameters and gradients in one fixed field order
// (a_diag, w_b, w_c, p, q, readout, embedding), so optimizers and the
// finite-difference oracle can treat the model as a single parameter vector.
inline std::vector<double*> param_view(SsmParams& m) {
  std::vector<double*> v;
  v.reserve(m.a_diag.data.size() + m.w_b.data.size() + m.w_c.data.size() + 1 +
            m.q.size() + m.readout.data.size() + m.embedding.data.size());
  for (double& e : m.a_diag.data) v.push_back(&e);
  for (double& e : m.w_b.data) v.push_back(&e);
  for (double& e : m.w_c.data) v.push_back(&e);
  v.push_back(&m.p);
  for (double& e : m.q) v.push_back(&e);
  for (double& e : m.readout.data) v.push_back(&e);
  for (double& e : m.embedding.data) v.push_back(&e);
  return v;
}

inline std::vector<double*> grad_view(GradientSet& g) {
  std::vector<double*> v;
  v.reserve(g.d_a_diag.data.size() + g.d_w_b.data.size() + g.d_w_c.data.size() + 1 +
            g.d_q.size() + g.d_readout.data.size() + g.d_embedding.data.size());
  for (double& e : g.d_a_diag.data) v.push_back(&e);
  for (double& e : g.d_w_b.data) v.push_back(&e);
  for (double& e : g.d_w_c.data) v.push_back(&e);
  v.push_back(&g.d_p);
  for (double& e : g.d_q) v.push_back(&e);
  for (double& e : g.d_readout.data) v.push_back(&e);
  for (double& e : g.d_embedding.data) v.push_back(&e);
  return v;
}

inline std::vector<const double*> grad_view(const GradientSet& g) {
  auto v = grad_view(const_cast<GradientSet&>(g));
  return std::vector<const double*>(v.begin(), v.end());
}

struct LossValue {
  double loss = 0.0;
  bool correct = false;
};

struct CrossEntropyResult {
  double loss = 0.0;
  bool correct = false;
  Vector d_logits;
};

// Negative log softmax probability of the label, computed with
// max-subtraction; gradient over logits is softmax - onehot(label).
inline CrossEntropyResult cross_entropy(const Vector& logits, int label) {
  const int K = static_cast<int>(logits.size());
  if (label < 0 || label >= K) throw std::invalid_argument("label outside 0..K-1");
  int argmax = 0;
  double mx = logits[0];
  for (int k = 1; k < K; ++k)
    if (logits[k] > mx) {
      mx = logits[k];
      argmax = k;
    }
  // After max-subtraction the largest exponential is exactly 1; summing the
  // rest separately lets log1p keep precision when the loss is tiny.
  double others = 0.0;
  CrossEntropyResult res;
  res.d_logits = Vector(K, 0.0);
  for (int k = 0; k < K; ++k) {
    res.d_logits[k] = std::exp(logits[k] - mx);
    if (k != argmax) others += res.d_logits[k];
  }
  res.loss = std::log1p(others) + (mx - logits[label]);
  const double z = 1.0 + others;
  for (int k = 0; k < K; ++k) res.d_logits[k] /= z;
  res.d_logits[label] -= 1.0;
  res.correct = (argmax == label);
  return res;
}

struct BatchLoss {
  double loss = 0.0;  // mean cross-entropy plus the stability penalty
  int correct = 0;    // argmax hits in the batch
};

struct LossAndGrad {
  BatchLoss value;
  GradientSet grads;
};

namespace detail {

inline double stability_penalty_value(const Matrix& a_diag, double reg_lambda) {
  double s = 0.0;
  for (double e : a_diag.data)
    if (e > 0.0) s += e * e;
  return reg_lambda * s;
}

}  // namespace detail

// Mean batch loss without gradients; the oracle below evaluates this.
inline BatchLoss batch_loss(const SsmParams& m, const std::vector<LabeledSequence>& batch,
                            double reg_lambda, const ScanOptions& opts = {}) {
  if (batch.empty()) throw std::invalid_argument("batch must be nonempty");
  BatchLoss out;
  for (const LabeledSequence& ex : batch) {
    ScanResult r = scan_forward(m, ex.tokens, opts);
    CrossEntropyResult ce = cross_entropy(r.logits, ex.label);
    out.loss += ce.loss;
    out.correct += ce.correct ? 1 : 0;
  }
  out.loss = out.loss / static_cast<double>(batch.size()) +
             detail::stability_penalty_value(m.a_diag, reg_lambda);
  return out;
}

// Mean cross-entropy over the batch plus reg_lambda * sum of squared positive
// a_diag entries, with its exact gradient.  The scan trajectory is stored and
// reversed; every appearance of u_t (the B-path projection, the u_j gate, the
// C-path at the last step, and the step-size argument) feeds the embedding
// gradient.  Under opts.unit_delta the step size is constant, so d_p and d_q
// stay exactly zero.
inline LossAndGrad loss_and_grad(const SsmParams& m,
                                 const std::vector<LabeledSequence>& batch,
                                 double reg_lambda, const ScanOptions& opts = {}) {
  if (batch.empty()) throw std::invalid_argument("batch must be nonempty");
  LossAndGrad out;
  out.grads = GradientSet::zeros_like(m);
  GradientSet& g = out.grads;
  const double inv_m = 1.0 / static_cast<double>(batch.size());

  ScanTrace trace;
  for (const LabeledSequence& ex : batch) {
    scan_forward(m, ex.tokens, opts, &trace);
    CrossEntropyResult ce = cross_entropy(trace.logits, ex.label);
    out.value.loss += ce.loss;
    out.value.correct += ce.correct ? 1 : 0;

    const int T = trace.T;
    Vector dlogits = ce.d_logits;
    for (double& e : dlogits) e *= inv_m;

    // Readout layer: logits = readout y_T.
    Vector lam_y(m.d, 0.0);
    for (int k = 0; k < m.K; ++k)
      for (int j = 0; j < m.d; ++j) {
        g.d_readout.at(k, j) += dlogits[k] * trace.y_last[j];
        lam_y[j] += m.readout.at(k, j) * dlogits[k];
      }
    if (T == 0) continue;

    Matrix g_u(T, m.d);  // gradient on embedded inputs, scattered at the end
    const Matrix& x_T = trace.x[T];

    // Emission at the last step: y_T[j] = (w_c u_T) . x_T[j,:].
    Vector lam_c(m.N, 0.0);
    for (int j = 0; j < m.d; ++j)
      for (int n = 0; n < m.N; ++n) lam_c[n] += lam_y[j] * x_T.at(j, n);
    for (int n = 0; n < m.N; ++n)
      for (int j = 0; j < m.d; ++j) {
        g.d_w_c.at(n, j) += lam_c[n] * trace.u.at(T - 1, j);
        g_u.at(T - 1, j) += m.w_c.at(n, j) * lam_c[n];
      }

    // State adjoint entering the loop: dL/dx_T[j,:] = lam_y[j] * c_T.
    Matrix lam_x(m.d, m.N);
    for (int j = 0; j < m.d; ++j)
      for (int n = 0; n < m.N; ++n) lam_x.at(j, n) = lam_y[j] * trace.c_last[n];

    for (int t = T - 1; t >= 0; --t) {
      const Matrix& x_prev = trace.x[t];
      const Matrix& decay = trace.decay[t];
      const double delta = trace.delta[t];
      double g_delta = 0.0;
      for (int j = 0; j < m.d; ++j) {
        for (int n = 0; n < m.N; ++n) {
          double g_decay = lam_x.at(j, n) * x_prev.at(j, n);
          g.d_a_diag.at(j, n) += g_decay * decay.at(j, n) * delta;
          g_delta += g_decay * decay.at(j, n) * m.a_diag.at(j, n);
        }
      }
      // Input injection: x[j,:] += delta * b_t * u_{t,j}.
      Vector lam_b(m.N, 0.0);
      for (int j = 0; j < m.d; ++j) {
        double along_b = 0.0;
        for (int n = 0; n < m.N; ++n) {
          along_b += trace.b.at(t, n) * lam_x.at(j, n);
          lam_b[n] += trace.u.at(t, j) * lam_x.at(j, n);
        }
        g_delta += trace.u.at(t, j) * along_b;
        g_u.at(t, j) += delta * along_b;
      }
      for (int n = 0; n < m.N; ++n) {
        double lb = delta * lam_b[n];
        for (int j = 0; j < m.d; ++j) {
          g.d_w_b.at(n, j) += lb * trace.u.at(t, j);
          g_u.at(t, j) += m.w_b.at(n, j) * lb;
        }
      }
      if (!opts.unit_delta) {
        double g_s = g_delta * softplus_deriv(trace.s[t]);
        g.d_p += g_s;
        for (int j = 0; j < m.d; ++j) {
          g.d_q[j] += g_s * trace.u.at(t, j);
          g_u.at(t, j) += g_s * m.q[j];
        }
      }
      for (int j = 0; j < m.d; ++j)
        for (int n = 0; n < m.N; ++n) lam_x.at(j, n) *= decay.at(j, n);
    }

    for (int t = 0; t < T; ++t) {
      int id = ex.tokens[t];
      for (int j = 0; j < m.d; ++j) g.d_embedding.at(id, j) += g_u.at(t, j);
    }
  }

  out.value.loss = out.value.loss * inv_m +
                   detail::stability_penalty_value(m.a_diag, reg_lambda);
  for (int i = 0; i < m.a_diag.rows * m.a_diag.cols; ++i) {
    double e = m.a_diag.data[i];
    if (e > 0.0) g.d_a_diag.data[i] += 2.0 * reg_lambda * e;
  }

  for (double* p : grad_view(g))
    if (!std::isfinite(*p))
      throw numeric_error("gradient contains a non-finite value", *p);
  return out;
}

// Central-difference estimate of the same objective, one scalar at a time.
inline GradientSet finite_diff_grad(const SsmParams& m,
                                    const std::vector<LabeledSequence>& batch,
                                    double reg_lambda, double step,
                                    const ScanOptions& opts = {}) {
  if (!(step > 0.0)) throw std::invalid_argument("step must be positive");
  SsmParams work = m;
  GradientSet g = GradientSet::zeros_like(m);
  std::vector<double*> params = param_view(work);
  std::vector<double*> grads = grad_view(g);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double saved = *params[i];
    *params[i] = saved + step;
    double up = batch_loss(work, batch, reg_lambda, opts).loss;
    *params[i] = saved - step;
    double down = batch_loss(work, batch, reg_lambda, opts).loss;
    *params[i] = saved;
    *grads[i] = (up - down) / (2.0 * step);
  }
  return g;
}

}  // namespace selssm
