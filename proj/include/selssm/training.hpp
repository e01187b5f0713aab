#pragma once

// Training loop for the selective SSM classifier: quadratic-hinge stability
// penalty, AdamW updates, balanced subsetting, per-epoch metric logging, and
// the metrics CSV writer.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "selssm/autograd.hpp"
#include "selssm/bounds.hpp"
#include "selssm/datasets.hpp"
#include "selssm/ssm.hpp"

namespace selssm {

struct TrainConfig {
  double learning_rate = 0.01;
  double weight_decay = 1e-5;
  int batch_size = 64;
  int epochs = 0;
  double reg_lambda = 0.01;
  double s_a_init = 0.0;
  std::uint64_t seed = 0;
  int N = 4, d = 4, K = 2, V = 2, T = 0;
  double subset_frac = 1.0;
};

// One row per completed epoch; `norms` carries the nine audit columns.
struct MetricsRow {
  int epoch = 0;         // 1-based
  double mean_loss = 0;  // running mean training loss over the epoch
  double accuracy = 0;   // running training accuracy over the epoch
  NormAudit norms;
  bool diverged = false;
};

struct RegResult {
  double value = 0.0;
  Matrix grad;
};

// R = lambda * sum over entries of max(0, entry)^2; zero exactly when every
// entry is nonpositive.  Matches the penalty folded into loss_and_grad.
inline RegResult stability_regularizer(const Matrix& a_diag, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("lambda must be nonnegative");
  RegResult r;
  r.grad = Matrix(a_diag.rows, a_diag.cols);
  for (std::size_t i = 0; i < a_diag.data.size(); ++i) {
    double e = a_diag.data[i];
    if (e > 0.0) {
      r.value += lambda * e * e;
      r.grad.data[i] = 2.0 * lambda * e;
    }
  }
  return r;
}

struct AdamState {
  GradientSet m;  // first moments
  GradientSet v;  // second moments
  long long t = 0;

  static AdamState zeros_like(const SsmParams& params) {
    AdamState s;
    s.m = GradientSet::zeros_like(params);
    s.v = GradientSet::zeros_like(params);
    return s;
  }
};

// AdamW: decoupled weight decay shrinks the parameters first, then the
// bias-corrected moment update applies.  beta = (0.9, 0.999), eps = 1e-8.
inline void adam_step(SsmParams& params, const GradientSet& grads, AdamState& state,
                      double lr, double wd, double beta1 = 0.9, double beta2 = 0.999,
                      double eps = 1e-8) {
  std::vector<double*> p = param_view(params);
  std::vector<const double*> g = grad_view(grads);
  std::vector<double*> m = grad_view(state.m);
  std::vector<double*> v = grad_view(state.v);
  if (g.size() != p.size() || m.size() != p.size())
    throw std::invalid_argument("optimizer state does not match the parameters");
  state.t += 1;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  double shrink = 1.0 - lr * wd;
  for (std::size_t i = 0; i < p.size(); ++i) {
    *p[i] *= shrink;
    *m[i] = beta1 * *m[i] + (1.0 - beta1) * *g[i];
    *v[i] = beta2 * *v[i] + (1.0 - beta2) * *g[i] * *g[i];
    double mhat = *m[i] / bc1;
    double vhat = *v[i] / bc2;
    *p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

struct EvalResult {
  double loss = std::numeric_limits<double>::quiet_NaN();
  double accuracy = 0.0;
};

// Mean cross-entropy (no penalty) and argmax accuracy over a whole split.
inline EvalResult evaluate(const SsmParams& params, const DatasetSplit& split) {
  EvalResult r;
  if (split.examples.empty()) return r;
  double loss = 0.0;
  long long correct = 0;
  for (const LabeledSequence& ex : split.examples) {
    ScanResult out = scan_forward(params, ex.tokens);
    CrossEntropyResult ce = cross_entropy(out.logits, ex.label);
    loss += ce.loss;
    correct += ce.correct ? 1 : 0;
  }
  r.loss = loss / static_cast<double>(split.examples.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(split.examples.size());
  return r;
}

// Stratified subset: per class, round(frac * count) examples chosen uniformly
// by the supplied RNG, preserving label proportions to within one example.
// Original example order is kept.
inline DatasetSplit subset_balanced(const DatasetSplit& split, double frac, Rng& rng) {
  if (!(frac > 0.0 && frac <= 1.0)) throw std::invalid_argument("frac must be in (0, 1]");
  if (frac == 1.0) return split;
  std::vector<std::vector<int>> by_class;
  for (std::size_t i = 0; i < split.examples.size(); ++i) {
    int label = split.examples[i].label;
    if (label >= static_cast<int>(by_class.size())) by_class.resize(label + 1);
    by_class[label].push_back(static_cast<int>(i));
  }
  std::vector<int> keep;
  for (std::vector<int>& idx : by_class) {
    int want = static_cast<int>(std::llround(frac * static_cast<double>(idx.size())));
    rng.shuffle(idx);
    for (int j = 0; j < want; ++j) keep.push_back(idx[j]);
  }
  std::sort(keep.begin(), keep.end());
  DatasetSplit out;
  out.T = split.T;
  out.vocab_size = split.vocab_size;
  out.num_classes = split.num_classes;
  out.examples.reserve(keep.size());
  for (int i : keep) out.examples.push_back(split.examples[i]);
  return out;
}

struct FitResult {
  std::vector<MetricsRow> metrics;
  SsmParams params;
  EvalResult train_eval;  // on the (possibly subsetted) training data
  EvalResult test_eval;
  bool diverged = false;
};

// Seeded epoch loop.  Parameters come from init_params(config.seed); data
// order (subset choice and per-epoch shuffles) comes from one derived RNG
// stream so the whole trajectory is pinned by config.seed.  A scan overflow
// or non-finite gradient marks the epoch diverged and stops training.
inline FitResult fit(const TrainConfig& config, const DatasetSplit& train,
                     const DatasetSplit& test) {
  if (!(config.learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (config.batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (config.epochs < 0) throw std::invalid_argument("epochs must be nonnegative");
  if (train.T != config.T || test.T != config.T)
    throw std::invalid_argument("config T does not match the splits");
  if (train.vocab_size > config.V || test.vocab_size > config.V)
    throw std::invalid_argument("config V is smaller than the data vocabulary");
  if (train.num_classes > config.K || test.num_classes > config.K)
    throw std::invalid_argument("config K is smaller than the label range");
  if (train.examples.empty()) throw std::invalid_argument("training split is empty");

  FitResult res;
  res.params = init_params(config.d, config.N, config.K, config.V, config.s_a_init,
                           config.seed);
  Rng order_rng(config.seed * 0x9E3779B97F4A7C15ULL + 1);
  DatasetSplit subset = subset_balanced(train, config.subset_frac, order_rng);
  if (subset.examples.empty()) throw std::invalid_argument("subset kept no examples");

  if (config.epochs == 0) {
    try {
      res.train_eval = evaluate(res.params, subset);
      res.test_eval = evaluate(res.params, test);
    } catch (const scan_overflow_error&) {
      res.diverged = true;
    }
    return res;
  }

  AdamState state = AdamState::zeros_like(res.params);
  const int m_total = static_cast<int>(subset.examples.size());
  std::vector<int> order(m_total);
  for (int i = 0; i < m_total; ++i) order[i] = i;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    long long correct = 0;
    long long seen = 0;
    bool diverged = false;
    for (int start = 0; start < m_total && !diverged; start += config.batch_size) {
      int stop = std::min(start + config.batch_size, m_total);
      std::vector<LabeledSequence> batch;
      batch.reserve(stop - start);
      for (int i = start; i < stop; ++i) batch.push_back(subset.examples[order[i]]);
      try {
        LossAndGrad lg = loss_and_grad(res.params, batch, config.reg_lambda);
        if (!std::isfinite(lg.value.loss)) throw numeric_error("non-finite loss", lg.value.loss);
        loss_sum += lg.value.loss * static_cast<double>(batch.size());
        correct += lg.value.correct;
        seen += static_cast<long long>(batch.size());
        adam_step(res.params, lg.grads, state, config.learning_rate, config.weight_decay);
      } catch (const scan_overflow_error&) {
        diverged = true;
      } catch (const numeric_error&) {
        diverged = true;
      }
    }
    MetricsRow row;
    row.epoch = epoch;
    row.mean_loss = seen > 0 ? loss_sum / static_cast<double>(seen)
                             : std::numeric_limits<double>::quiet_NaN();
    row.accuracy = seen > 0 ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    row.norms = audit_norms(res.params, subset);
    row.diverged = diverged;
    res.metrics.push_back(row);
    if (diverged) {
      res.diverged = true;
      res.train_eval = EvalResult{};
      res.test_eval = EvalResult{};
      return res;
    }
  }
  try {
    res.train_eval = evaluate(res.params, subset);
    res.test_eval = evaluate(res.params, test);
  } catch (const scan_overflow_error&) {
    res.diverged = true;
    if (!res.metrics.empty()) res.metrics.back().diverged = true;
    res.train_eval = EvalResult{};
    res.test_eval = EvalResult{};
  }
  return res;
}

namespace detail {

// Shortest round-trip decimal form, identical across runs.
inline std::string csv_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw std::runtime_error("failed to format a double");
  return std::string(buf, end);
}

}  // namespace detail

inline const char* metrics_csv_header() {
  return "epoch,mean_loss,accuracy,s_a,abs_p,q_l2,wb_l2,wb_l11,wc_l2,wc_l11,ac_l2,max_u_l2,diverged";
}

inline void write_metrics_csv(const std::vector<MetricsRow>& rows, std::ostream& out) {
  out << metrics_csv_header() << '\n';
  for (const MetricsRow& r : rows) {
    out << r.epoch << ',' << detail::csv_double(r.mean_loss) << ','
        << detail::csv_double(r.accuracy) << ',' << detail::csv_double(r.norms.s_a) << ','
        << detail::csv_double(r.norms.abs_p) << ',' << detail::csv_double(r.norms.q_l2) << ','
        << detail::csv_double(r.norms.wb_l2) << ',' << detail::csv_double(r.norms.wb_l11) << ','
        << detail::csv_double(r.norms.wc_l2) << ',' << detail::csv_double(r.norms.wc_l11) << ','
        << detail::csv_double(r.norms.ac_l2) << ',' << detail::csv_double(r.norms.max_u_l2)
        << ',' << (r.diverged ? 1 : 0) << '\n';
  }
}

inline void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open metrics file for writing: " + path);
  write_metrics_csv(rows, out);
  if (!out) throw std::runtime_error("failed writing metrics: " + path);
}

}  // namespace selssm
