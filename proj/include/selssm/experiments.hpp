#pragma once

// Experiment drivers shared by the CLI: config resolution with per-task
// budgets, seeded data generation per run cell, retry-on-divergence, aggregate
// statistics, and atomic CSV/JSON artifact writers.  Every command is
// deterministic given its resolved config; reruns overwrite byte-identically.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "selssm/bounds.hpp"
#include "selssm/datasets.hpp"
#include "selssm/ssm.hpp"
#include "selssm/training.hpp"

namespace selssm {

// ---------------------------------------------------------------------------
// Seed derivation and atomic file output.

// splitmix64 finalizer over (seed, stream): decorrelates the data-generation
// seeds from the parameter-init seed within one run cell.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline void write_file_atomic(const std::string& path, const std::string& bytes) {
  std::filesystem::path tmp(path + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing: " + path);
  }
  std::filesystem::rename(tmp, path);
}

// Runs a path-taking writer against a temp file, then renames into place.
inline void write_atomic_via(const std::string& path,
                             const std::function<void(const std::string&)>& writer) {
  std::string tmp = path + ".tmp";
  writer(tmp);
  std::filesystem::rename(tmp, path);
}

// Index-sharded worker pool; inline when threads <= 1.  The first exception
// from any worker is rethrown after join.
inline void run_parallel(int threads, int n, const std::function<void(int)>& work) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) work(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto body = [&] {
    for (;;) {
      int i = next.fetch_add(1);
      if (i >= n) return;
      try {
        work(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  int n_workers = std::min(threads, n);
  pool.reserve(n_workers);
  for (int w = 0; w < n_workers; ++w) pool.emplace_back(body);
  for (std::thread& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Config resolution.

// Fully resolved settings for one CLI command.  `train` holds the per-task
// budget; T and seed are filled per run cell from `lengths` x `seeds`.
struct ExperimentConfig {
  std::string command;
  std::string task = "majority";
  std::vector<long long> lengths;
  std::vector<std::uint64_t> seeds;
  TrainConfig train;
  int m_train = 1000;
  int m_test = 1000;
  double noise = 0.1;  // majority flip fraction
  int threads = 1;
  std::string out_dir;
  std::string text_train, text_test, text_vocab;  // task == "text" inputs
};

// Per-task model and budget defaults.  V=0/K=0 mean "derive from the data"
// (text task only).
inline TrainConfig task_train_defaults(const std::string& task) {
  TrainConfig t;
  if (task == "majority") {
    t.d = 4; t.N = 4; t.K = 2; t.V = 2; t.epochs = 40; t.batch_size = 64;
  } else if (task == "listops") {
    t.d = 16; t.N = 4; t.K = 10; t.V = 19; t.epochs = 50; t.batch_size = 64;
  } else if (task == "text") {
    t.d = 16; t.N = 4; t.K = 0; t.V = 0; t.epochs = 30; t.batch_size = 256;
  } else {
    throw std::invalid_argument("unknown task: " + task +
                                " (expected majority, listops, or text)");
  }
  return t;
}

// The spectral-abscissa sweep grid: -0.10 to 0.10 in 0.02 increments.
inline std::vector<double> sa_sweep_grid() {
  std::vector<double> grid;
  for (int centi = -10; centi <= 10; centi += 2)
    grid.push_back(static_cast<double>(centi) / 100.0);
  return grid;
}

inline long long default_sweep_length(const std::string& task) {
  if (task == "majority") return 250;
  if (task == "listops") return 300;
  throw std::invalid_argument("sweep-sa needs an explicit length for task " + task);
}

namespace detail {

template <typename T>
void maybe_read(const nlohmann::json& j, const char* key, T& slot) {
  if (j.contains(key)) slot = j.at(key).get<T>();
}

}  // namespace detail

// Builds the resolved config for `command` from an optional JSON document.
// Resolution order: task budget, then command defaults, then JSON overrides
// (CLI flags are merged into the JSON by the caller before this runs).
inline ExperimentConfig make_experiment_config(const std::string& command,
                                               const nlohmann::json& j) {
  ExperimentConfig cfg;
  cfg.command = command;
  detail::maybe_read(j, "task", cfg.task);
  cfg.train = task_train_defaults(cfg.task);

  if (command == "experiment1") {
    cfg.train.s_a_init = 0.1;
    cfg.train.epochs = 10;
    cfg.train.subset_frac = 0.1;
    cfg.lengths = {100, 2000};
    cfg.seeds = {1, 2, 3, 4, 5};
  } else if (command == "experiment2") {
    cfg.train.s_a_init = 0.0;
    cfg.lengths = {50, 100, 200};
    cfg.seeds = {1, 2, 3, 4, 5};
  } else if (command == "sweep-sa") {
    cfg.lengths = {default_sweep_length(cfg.task)};
    cfg.seeds = {1};
  } else if (command == "train") {
    cfg.lengths = {50};
    cfg.seeds = {1};
  } else {
    throw std::invalid_argument("unknown command: " + command);
  }

  detail::maybe_read(j, "lengths", cfg.lengths);
  detail::maybe_read(j, "seeds", cfg.seeds);
  detail::maybe_read(j, "m_train", cfg.m_train);
  detail::maybe_read(j, "m_test", cfg.m_test);
  detail::maybe_read(j, "noise", cfg.noise);
  detail::maybe_read(j, "threads", cfg.threads);
  detail::maybe_read(j, "out_dir", cfg.out_dir);
  detail::maybe_read(j, "text_train", cfg.text_train);
  detail::maybe_read(j, "text_test", cfg.text_test);
  detail::maybe_read(j, "text_vocab", cfg.text_vocab);

  detail::maybe_read(j, "learning_rate", cfg.train.learning_rate);
  detail::maybe_read(j, "weight_decay", cfg.train.weight_decay);
  detail::maybe_read(j, "batch_size", cfg.train.batch_size);
  detail::maybe_read(j, "epochs", cfg.train.epochs);
  detail::maybe_read(j, "reg_lambda", cfg.train.reg_lambda);
  detail::maybe_read(j, "s_a_init", cfg.train.s_a_init);
  detail::maybe_read(j, "subset_frac", cfg.train.subset_frac);
  detail::maybe_read(j, "d", cfg.train.d);
  detail::maybe_read(j, "N", cfg.train.N);
  detail::maybe_read(j, "K", cfg.train.K);
  detail::maybe_read(j, "V", cfg.train.V);

  // Single-run spellings accepted by the train command.
  if (j.contains("T")) cfg.lengths = {j.at("T").get<long long>()};
  if (j.contains("seed")) cfg.seeds = {j.at("seed").get<std::uint64_t>()};

  if (cfg.lengths.empty()) throw std::invalid_argument("lengths list must be nonempty");
  if (cfg.seeds.empty()) throw std::invalid_argument("seeds list must be nonempty");
  for (long long T : cfg.lengths) {
    if (T < 1) throw std::invalid_argument("lengths must be positive");
  }
  if (cfg.task == "text" &&
      (cfg.text_train.empty() || cfg.text_test.empty() || cfg.text_vocab.empty()))
    throw std::invalid_argument(
        "text task needs text_train, text_test, and text_vocab paths");
  if (cfg.threads < 1) cfg.threads = 1;
  return cfg;
}

// The effective settings, echoed into the output directory for provenance.
inline nlohmann::json resolved_config_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["command"] = cfg.command;
  j["task"] = cfg.task;
  j["lengths"] = cfg.lengths;
  j["seeds"] = cfg.seeds;
  j["m_train"] = cfg.m_train;
  j["m_test"] = cfg.m_test;
  j["noise"] = cfg.noise;
  j["threads"] = cfg.threads;
  j["out_dir"] = cfg.out_dir;
  j["learning_rate"] = cfg.train.learning_rate;
  j["weight_decay"] = cfg.train.weight_decay;
  j["batch_size"] = cfg.train.batch_size;
  j["epochs"] = cfg.train.epochs;
  j["reg_lambda"] = cfg.train.reg_lambda;
  j["s_a_init"] = cfg.train.s_a_init;
  j["subset_frac"] = cfg.train.subset_frac;
  j["d"] = cfg.train.d;
  j["N"] = cfg.train.N;
  j["K"] = cfg.train.K;
  j["V"] = cfg.train.V;
  if (cfg.command == "sweep-sa") j["sa_grid"] = sa_sweep_grid();
  if (cfg.task == "text") {
    j["text_train"] = cfg.text_train;
    j["text_test"] = cfg.text_test;
    j["text_vocab"] = cfg.text_vocab;
  }
  return j;
}

inline void write_config_echo(const ExperimentConfig& cfg) {
  if (cfg.out_dir.empty())
    throw std::invalid_argument("an output directory is required (--out)");
  std::filesystem::create_directories(cfg.out_dir);
  write_file_atomic(cfg.out_dir + "/config.json", resolved_config_json(cfg).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Run cells.

struct TaskData {
  DatasetSplit train_split;
  DatasetSplit test_split;
};

// Data for one (T, seed) cell.  Generated tasks derive separate train/test
// seeds from the cell seed; the text task reads the configured files with
// sequences truncated or padded to T.
inline TaskData make_task_data(const ExperimentConfig& cfg, long long T,
                               std::uint64_t cell_seed) {
  TaskData data;
  int t = static_cast<int>(T);
  if (cfg.task == "majority") {
    data.train_split = gen_majority(cfg.m_train, t, cfg.noise, derive_seed(cell_seed, 1));
    data.test_split = gen_majority(cfg.m_test, t, cfg.noise, derive_seed(cell_seed, 2));
  } else if (cfg.task == "listops") {
    data.train_split = gen_listops(cfg.m_train, t, derive_seed(cell_seed, 1));
    data.test_split = gen_listops(cfg.m_test, t, derive_seed(cell_seed, 2));
  } else {
    Vocabulary vocab = load_vocabulary(cfg.text_vocab);
    data.train_split = load_text_jsonl(cfg.text_train, vocab, t);
    data.test_split = load_text_jsonl(cfg.text_test, vocab, t);
    data.train_split.vocab_size = vocab.size();
    data.test_split.vocab_size = vocab.size();
  }
  return data;
}

// TrainConfig for one cell: budget plus the cell's T and seed, with V/K
// derived from the data when the task leaves them open.
inline TrainConfig cell_train_config(const ExperimentConfig& cfg, const TaskData& data,
                                     std::uint64_t seed, double s_a_init) {
  TrainConfig t = cfg.train;
  t.T = data.train_split.T;
  t.seed = seed;
  t.s_a_init = s_a_init;
  if (t.V == 0) t.V = std::max(data.train_split.vocab_size, data.test_split.vocab_size);
  if (t.K == 0) t.K = std::max(data.train_split.num_classes, data.test_split.num_classes);
  return t;
}

// Chance-level cross-entropy with a small margin; a run only counts as having
// reduced the loss if it ends below this (a collapsed uniform predictor sits
// at ln K exactly).
inline double loss_reduction_threshold(int num_classes) {
  return 0.98 * std::log(static_cast<double>(num_classes));
}

// Flat per-run summary shared by all experiment commands.
struct RunRecord {
  long long T = 0;
  std::uint64_t seed = 0;       // slot seed from the config
  std::uint64_t seed_used = 0;  // actual seed after divergence retries
  int attempts = 1;
  double s_a_init = 0.0;
  bool diverged = false;
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();
  bool loss_reduced = false;
  double final_sa = std::numeric_limits<double>::quiet_NaN();
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double train_acc = 0.0;
  double test_loss = std::numeric_limits<double>::quiet_NaN();
  double test_acc = 0.0;
  int epochs_run = 0;
};

inline RunRecord summarize_run(long long T, std::uint64_t slot_seed,
                               std::uint64_t seed_used, int attempts, double s_a_init,
                               const FitResult& fr, int num_classes) {
  RunRecord r;
  r.T = T;
  r.seed = slot_seed;
  r.seed_used = seed_used;
  r.attempts = attempts;
  r.s_a_init = s_a_init;
  r.diverged = fr.diverged;
  r.epochs_run = static_cast<int>(fr.metrics.size());
  if (!fr.metrics.empty()) r.final_train_loss = fr.metrics.back().mean_loss;
  r.loss_reduced = !fr.diverged && !fr.metrics.empty() &&
                   std::isfinite(r.final_train_loss) &&
                   r.final_train_loss < loss_reduction_threshold(num_classes);
  r.final_sa = spectral_abscissa(fr.params.a_diag);
  r.train_loss = fr.train_eval.loss;
  r.train_acc = fr.train_eval.accuracy;
  r.test_loss = fr.test_eval.loss;
  r.test_acc = fr.test_eval.accuracy;
  return r;
}

// ---------------------------------------------------------------------------
// Artifact writers.

namespace detail {

inline std::string sa_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return std::string(buf);
}

inline std::string metrics_csv_string(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  write_metrics_csv(rows, os);
  return os.str();
}

}  // namespace detail

inline const char* eval_csv_header() {
  return "T,seed,seed_used,attempts,s_a_init,diverged,train_loss,train_acc,test_loss,"
         "test_acc,final_sa,final_train_loss,loss_reduced";
}

inline std::string eval_csv_string(const RunRecord& r) {
  std::ostringstream os;
  os << eval_csv_header() << '\n'
     << r.T << ',' << r.seed << ',' << r.seed_used << ',' << r.attempts << ','
     << detail::csv_double(r.s_a_init) << ',' << (r.diverged ? 1 : 0) << ','
     << detail::csv_double(r.train_loss) << ',' << detail::csv_double(r.train_acc) << ','
     << detail::csv_double(r.test_loss) << ',' << detail::csv_double(r.test_acc) << ','
     << detail::csv_double(r.final_sa) << ',' << detail::csv_double(r.final_train_loss)
     << ',' << (r.loss_reduced ? 1 : 0) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Aggregation.

struct Stats {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std_dev = 0.0;
  int n = 0;
};

// Sample standard deviation (n-1 denominator); zero when n <= 1.
inline Stats sample_stats(const std::vector<double>& xs) {
  Stats s;
  s.n = static_cast<int>(xs.size());
  if (s.n == 0) return s;
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / s.n;
  if (s.n >= 2) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.std_dev = std::sqrt(ss / (s.n - 1));
  }
  return s;
}

// Per-T summary over the successful (non-diverged) seeds; a T where every
// retry diverged keeps NaN statistics and is thereby marked missing.
struct AggregateRow {
  long long T = 0;
  Stats train_acc, test_acc, train_loss, test_loss, gap, final_sa;
  int diverged_count = 0;  // diverged attempts at this T, replacements included
  int successes = 0;
};

inline const char* aggregate_csv_header() {
  return "T,train_acc_mean,train_acc_std,test_acc_mean,test_acc_std,gap_mean,gap_std,"
         "final_sa_mean,diverged_count";
}

inline std::string aggregate_csv_string(const std::vector<AggregateRow>& rows) {
  std::ostringstream os;
  os << aggregate_csv_header() << '\n';
  for (const AggregateRow& r : rows) {
    os << r.T << ',' << detail::csv_double(r.train_acc.mean) << ','
       << detail::csv_double(r.train_acc.std_dev) << ','
       << detail::csv_double(r.test_acc.mean) << ','
       << detail::csv_double(r.test_acc.std_dev) << ','
       << detail::csv_double(r.gap.mean) << ',' << detail::csv_double(r.gap.std_dev)
       << ',' << detail::csv_double(r.final_sa.mean) << ',' << r.diverged_count << '\n';
  }
  return os.str();
}

inline AggregateRow aggregate_records(long long T, const std::vector<RunRecord>& runs,
                                      int diverged_attempts) {
  AggregateRow row;
  row.T = T;
  row.diverged_count = diverged_attempts;
  std::vector<double> tr_acc, te_acc, tr_loss, te_loss, gap, sa;
  for (const RunRecord& r : runs) {
    if (r.diverged) continue;
    tr_acc.push_back(r.train_acc);
    te_acc.push_back(r.test_acc);
    tr_loss.push_back(r.train_loss);
    te_loss.push_back(r.test_loss);
    gap.push_back(r.train_acc - r.test_acc);
    sa.push_back(r.final_sa);
  }
  row.successes = static_cast<int>(tr_acc.size());
  row.train_acc = sample_stats(tr_acc);
  row.test_acc = sample_stats(te_acc);
  row.train_loss = sample_stats(tr_loss);
  row.test_loss = sample_stats(te_loss);
  row.gap = sample_stats(gap);
  row.final_sa = sample_stats(sa);
  return row;
}

// ---------------------------------------------------------------------------
// Commands.

struct GenDataResult {
  std::string data_path;
  std::string vocab_path;
  int m = 0;
  long long T = 0;
  std::vector<long long> histogram;  // examples per label
};

inline GenDataResult cmd_gen_data(const std::string& task, int m, long long T,
                                  std::uint64_t seed, double noise,
                                  const std::string& out_dir) {
  DatasetSplit split;
  Vocabulary vocab;
  if (task == "majority") {
    split = gen_majority(m, static_cast<int>(T), noise, seed);
    vocab = make_vocabulary({"<pad>", "1"});
  } else if (task == "listops") {
    split = gen_listops(m, static_cast<int>(T), seed);
    vocab = listops_vocabulary();
  } else {
    throw std::invalid_argument("gen-data supports the majority and listops tasks");
  }
  std::filesystem::create_directories(out_dir);

  GenDataResult res;
  res.m = m;
  res.T = split.T;
  res.data_path =
      out_dir + "/" + task + "_T" + std::to_string(T) + "_seed" + std::to_string(seed) +
      ".jsonl";
  res.vocab_path = out_dir + "/" + task + "_vocab.json";
  write_atomic_via(res.data_path,
                   [&](const std::string& p) { write_jsonl(split, p); });
  write_atomic_via(res.vocab_path,
                   [&](const std::string& p) { write_vocabulary(vocab, p); });
  res.histogram.assign(split.num_classes, 0);
  for (const LabeledSequence& ex : split.examples) res.histogram[ex.label] += 1;
  return res;
}

struct TrainCommandResult {
  RunRecord record;
  FitResult fit;
};

// One fit run: metrics CSV, final checkpoint, eval summary, config echo.
inline TrainCommandResult cmd_train(const ExperimentConfig& cfg) {
  write_config_echo(cfg);
  long long T = cfg.lengths.front();
  std::uint64_t seed = cfg.seeds.front();
  TaskData data = make_task_data(cfg, T, seed);
  TrainConfig tc = cell_train_config(cfg, data, seed, cfg.train.s_a_init);

  TrainCommandResult res;
  res.fit = fit(tc, data.train_split, data.test_split);
  res.record = summarize_run(T, seed, seed, 1, tc.s_a_init, res.fit, tc.K);

  write_file_atomic(cfg.out_dir + "/metrics.csv",
                    detail::metrics_csv_string(res.fit.metrics));
  write_file_atomic(cfg.out_dir + "/eval.csv", eval_csv_string(res.record));
  write_atomic_via(cfg.out_dir + "/checkpoint.json", [&](const std::string& p) {
    save_checkpoint(res.fit.params, p);
  });
  return res;
}

inline std::string run_file_stem(long long T, std::uint64_t slot_seed) {
  return "run_T" + std::to_string(T) + "_seed" + std::to_string(slot_seed);
}

inline const char* experiment1_summary_header() {
  return "T,seed,diverged,final_train_loss,loss_reduced,final_sa,sa_nonpositive";
}

// Unstable-init probe: one fixed-budget fit per (T, seed), no retries; the
// summary flags which runs diverged, which reduced the loss below chance, and
// which drove the spectral abscissa to zero or below.
inline std::vector<RunRecord> cmd_experiment1(const ExperimentConfig& cfg) {
  write_config_echo(cfg);
  const int n_seeds = static_cast<int>(cfg.seeds.size());
  const int n_cells = static_cast<int>(cfg.lengths.size()) * n_seeds;
  std::vector<RunRecord> records(n_cells);

  run_parallel(cfg.threads, n_cells, [&](int cell) {
    long long T = cfg.lengths[cell / n_seeds];
    std::uint64_t seed = cfg.seeds[cell % n_seeds];
    TaskData data = make_task_data(cfg, T, seed);
    TrainConfig tc = cell_train_config(cfg, data, seed, cfg.train.s_a_init);
    FitResult fr = fit(tc, data.train_split, data.test_split);
    RunRecord rec = summarize_run(T, seed, seed, 1, tc.s_a_init, fr, tc.K);
    records[cell] = rec;
    std::string stem = cfg.out_dir + "/" + run_file_stem(T, seed);
    write_file_atomic(stem + ".csv", detail::metrics_csv_string(fr.metrics));
    write_file_atomic(cfg.out_dir + "/eval_T" + std::to_string(T) + "_seed" +
                          std::to_string(seed) + ".csv",
                      eval_csv_string(rec));
  });

  std::ostringstream summary;
  summary << experiment1_summary_header() << '\n';
  for (const RunRecord& r : records) {
    summary << r.T << ',' << r.seed << ',' << (r.diverged ? 1 : 0) << ','
            << detail::csv_double(r.final_train_loss) << ',' << (r.loss_reduced ? 1 : 0)
            << ',' << detail::csv_double(r.final_sa) << ','
            << (r.final_sa <= 0.0 ? 1 : 0) << '\n';
  }
  write_file_atomic(cfg.out_dir + "/summary.csv", summary.str());
  return records;
}

struct Experiment2Result {
  std::vector<RunRecord> records;  // one per (T, seed) slot, final attempt
  std::vector<AggregateRow> aggregates;
};

// Marginally-stable training with aggregation: a diverged slot is retried
// with replacement seeds (slot seed + 100003 * attempt) up to 3 times; a T
// with no surviving seed keeps NaN statistics in the aggregate CSV.
inline Experiment2Result cmd_experiment2(const ExperimentConfig& cfg) {
  write_config_echo(cfg);
  const int n_seeds = static_cast<int>(cfg.seeds.size());
  const int n_lengths = static_cast<int>(cfg.lengths.size());
  const int n_cells = n_lengths * n_seeds;
  Experiment2Result res;
  res.records.resize(n_cells);

  run_parallel(cfg.threads, n_cells, [&](int cell) {
    long long T = cfg.lengths[cell / n_seeds];
    std::uint64_t slot_seed = cfg.seeds[cell % n_seeds];
    RunRecord rec;
    FitResult fr;
    int attempts = 0;
    for (int attempt = 0; attempt <= 3; ++attempt) {
      std::uint64_t seed_used = slot_seed + 100003ULL * static_cast<std::uint64_t>(attempt);
      TaskData data = make_task_data(cfg, T, seed_used);
      TrainConfig tc = cell_train_config(cfg, data, seed_used, cfg.train.s_a_init);
      fr = fit(tc, data.train_split, data.test_split);
      attempts = attempt + 1;
      rec = summarize_run(T, slot_seed, seed_used, attempts, tc.s_a_init, fr, tc.K);
      if (!fr.diverged) break;
    }
    res.records[cell] = rec;
    std::string stem = cfg.out_dir + "/" + run_file_stem(T, slot_seed);
    write_file_atomic(stem + ".csv", detail::metrics_csv_string(fr.metrics));
    write_file_atomic(cfg.out_dir + "/eval_T" + std::to_string(T) + "_seed" +
                          std::to_string(slot_seed) + ".csv",
                      eval_csv_string(rec));
  });

  for (int li = 0; li < n_lengths; ++li) {
    std::vector<RunRecord> at_T(res.records.begin() + li * n_seeds,
                                res.records.begin() + (li + 1) * n_seeds);
    int diverged_attempts = 0;
    for (const RunRecord& r : at_T)
      diverged_attempts += r.diverged ? r.attempts : r.attempts - 1;
    res.aggregates.push_back(aggregate_records(cfg.lengths[li], at_T, diverged_attempts));
  }
  write_file_atomic(cfg.out_dir + "/aggregate.csv",
                    aggregate_csv_string(res.aggregates));
  return res;
}

// Eleven runs across the init grid at the task's fixed length; per-run metric
// CSVs plus one combined trajectory file for plotting.
inline std::vector<RunRecord> cmd_sweep_sa(const ExperimentConfig& cfg) {
  write_config_echo(cfg);
  std::vector<double> grid = sa_sweep_grid();
  const int n = static_cast<int>(grid.size());
  long long T = cfg.lengths.front();
  std::uint64_t seed = cfg.seeds.front();
  std::vector<RunRecord> records(n);
  std::vector<std::vector<MetricsRow>> trajectories(n);

  run_parallel(cfg.threads, n, [&](int i) {
    double sa = grid[i];
    TaskData data = make_task_data(cfg, T, seed);
    TrainConfig tc = cell_train_config(cfg, data, seed, sa);
    FitResult fr = fit(tc, data.train_split, data.test_split);
    records[i] = summarize_run(T, seed, seed, 1, sa, fr, tc.K);
    trajectories[i] = fr.metrics;
    std::string stem =
        cfg.out_dir + "/run_sa" + detail::sa_label(sa) + "_T" + std::to_string(T);
    write_file_atomic(stem + ".csv", detail::metrics_csv_string(fr.metrics));
    write_file_atomic(cfg.out_dir + "/eval_sa" + detail::sa_label(sa) + "_T" +
                          std::to_string(T) + ".csv",
                      eval_csv_string(records[i]));
  });

  std::ostringstream sweep;
  sweep << "s_a_init,epoch,mean_loss,s_a,diverged\n";
  for (int i = 0; i < n; ++i) {
    for (const MetricsRow& row : trajectories[i]) {
      sweep << detail::csv_double(grid[i]) << ',' << row.epoch << ','
            << detail::csv_double(row.mean_loss) << ','
            << detail::csv_double(row.norms.s_a) << ',' << (row.diverged ? 1 : 0)
            << '\n';
    }
  }
  write_file_atomic(cfg.out_dir + "/sweep.csv", sweep.str());
  return records;
}

// Bound report from an assumptions JSON document; written as bound.json when
// an output directory is given.
inline nlohmann::json cmd_bound(const nlohmann::json& assumptions_json,
                                const std::string& out_dir) {
  BoundAssumptions a = assumptions_from_json(assumptions_json);
  nlohmann::json report = bound_report_to_json(make_bound_report(a));
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    nlohmann::json echo;
    echo["command"] = "bound";
    echo["assumptions"] = assumptions_json;
    write_file_atomic(out_dir + "/config.json", echo.dump(2) + "\n");
    write_file_atomic(out_dir + "/bound.json", report.dump(2) + "\n");
  }
  return report;
}

// Loads a JSONL dataset of integer token ids without a vocabulary: T is the
// longest line, shorter lines are right-padded with 0.
inline DatasetSplit load_id_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset: " + path);
  DatasetSplit split;
  std::string line;
  int line_no = 0;
  std::size_t max_len = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw parse_error("malformed JSON line", line_no);
    }
    if (!j.contains("tokens") || !j.contains("label") || !j.at("tokens").is_array() ||
        !j.at("label").is_number_integer())
      throw parse_error("need integer label and tokens array", line_no);
    LabeledSequence ex;
    ex.label = j.at("label").get<int>();
    if (ex.label < 0) throw data_error("labels must be nonnegative");
    for (const nlohmann::json& tok : j.at("tokens")) {
      if (!tok.is_number_integer()) throw parse_error("tokens must be integer ids", line_no);
      int id = tok.get<int>();
      if (id < 0) throw data_error("token ids must be nonnegative");
      ex.tokens.push_back(id);
      split.vocab_size = std::max(split.vocab_size, id + 1);
    }
    max_len = std::max(max_len, ex.tokens.size());
    split.num_classes = std::max(split.num_classes, ex.label + 1);
    split.examples.push_back(std::move(ex));
  }
  split.T = static_cast<int>(max_len);
  for (LabeledSequence& ex : split.examples) ex.tokens.resize(max_len, 0);
  return split;
}

inline const char* audit_csv_header() {
  return "s_a,abs_p,q_l2,wb_l2,wb_l11,wc_l2,wc_l11,ac_l2,max_u_l2";
}

inline std::string audit_csv_string(const NormAudit& a) {
  std::ostringstream os;
  os << audit_csv_header() << '\n'
     << detail::csv_double(a.s_a) << ',' << detail::csv_double(a.abs_p) << ','
     << detail::csv_double(a.q_l2) << ',' << detail::csv_double(a.wb_l2) << ','
     << detail::csv_double(a.wb_l11) << ',' << detail::csv_double(a.wc_l2) << ','
     << detail::csv_double(a.wc_l11) << ',' << detail::csv_double(a.ac_l2) << ','
     << detail::csv_double(a.max_u_l2) << '\n';
  return os.str();
}

// Nine-column norm audit of a checkpoint against a dataset of token ids.
inline NormAudit cmd_audit(const std::string& checkpoint_path,
                           const std::string& data_path, const std::string& out_dir) {
  SsmParams params = load_checkpoint(checkpoint_path);
  DatasetSplit data = load_id_jsonl(data_path);
  NormAudit audit = audit_norms(params, data);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    nlohmann::json echo;
    echo["command"] = "audit-norms";
    echo["checkpoint"] = checkpoint_path;
    echo["data"] = data_path;
    write_file_atomic(out_dir + "/config.json", echo.dump(2) + "\n");
    write_file_atomic(out_dir + "/audit.csv", audit_csv_string(audit));
  }
  return audit;
}

}  // namespace selssm
