// Command-line driver: data generation, single training runs, the three
// experiment protocols, bound reports, and checkpoint norm audits.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "selssm/experiments.hpp"

namespace {

using selssm::detail::csv_double;

nlohmann::json load_config_json(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw std::runtime_error("config must be a JSON object: " + path);
  return j;
}

// Shared flag set merged over the config file; flags win.
struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  std::string task;
  std::vector<std::uint64_t> seeds;
  std::vector<long long> lengths;
  double sa_init = 0.0;
  CLI::Option* sa_opt = nullptr;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--task", task, "majority, listops, or text");
    cmd->add_option("--seeds", seeds, "comma-separated seeds")->delimiter(',');
    cmd->add_option("--lengths", lengths, "comma-separated sequence lengths")
        ->delimiter(',');
    sa_opt = cmd->add_option("--sa-init", sa_init, "initial spectral abscissa");
  }

  nlohmann::json merged() const {
    nlohmann::json j = load_config_json(config_path);
    if (!task.empty()) j["task"] = task;
    if (!seeds.empty()) j["seeds"] = seeds;
    if (!lengths.empty()) j["lengths"] = lengths;
    if (sa_opt != nullptr && sa_opt->count() > 0) j["s_a_init"] = sa_init;
    if (!out_dir.empty()) j["out_dir"] = out_dir;
    return j;
  }
};

void print_run(const selssm::RunRecord& r) {
  std::cout << "T=" << r.T << " seed=" << r.seed;
  if (r.seed_used != r.seed) std::cout << " seed_used=" << r.seed_used;
  std::cout << " diverged=" << (r.diverged ? 1 : 0)
            << " final_train_loss=" << csv_double(r.final_train_loss)
            << " loss_reduced=" << (r.loss_reduced ? 1 : 0)
            << " final_sa=" << csv_double(r.final_sa);
  if (!r.diverged)
    std::cout << " train_acc=" << csv_double(r.train_acc)
              << " test_acc=" << csv_double(r.test_acc);
  std::cout << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"selective state-space model training and bound experiments"};
  app.require_subcommand(1);

  // gen-data
  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_task = "majority", gen_out = ".";
  int gen_m = 1000;
  long long gen_T = 50;
  std::uint64_t gen_seed = 1;
  double gen_noise = 0.1;
  gen->add_option("--task", gen_task, "majority or listops");
  gen->add_option("--m", gen_m, "number of examples");
  gen->add_option("--T", gen_T, "sequence length (listops: pre-pad target)");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--noise", gen_noise, "majority flip fraction");
  gen->add_option("--out", gen_out, "output directory");

  // train
  CLI::App* train = app.add_subcommand("train", "one training run");
  CommonFlags train_flags;
  train_flags.add_to(train);
  long long train_T = 0;
  std::uint64_t train_seed = 0;
  CLI::Option* train_T_opt = train->add_option("--T", train_T, "sequence length");
  CLI::Option* train_seed_opt = train->add_option("--seed", train_seed, "run seed");

  // experiment1 / experiment2 / sweep-sa
  CLI::App* exp1 = app.add_subcommand("experiment1", "unstable-init probe");
  CommonFlags exp1_flags;
  exp1_flags.add_to(exp1);
  CLI::App* exp2 = app.add_subcommand("experiment2", "length generalization sweep");
  CommonFlags exp2_flags;
  exp2_flags.add_to(exp2);
  CLI::App* sweep = app.add_subcommand("sweep-sa", "init spectral-abscissa sweep");
  CommonFlags sweep_flags;
  sweep_flags.add_to(sweep);

  // bound
  CLI::App* bound = app.add_subcommand("bound", "closed-form bound report");
  std::string bound_config, bound_out;
  bound->add_option("--config", bound_config, "assumptions JSON file")->required();
  bound->add_option("--out", bound_out, "output directory");

  // audit-norms
  CLI::App* audit = app.add_subcommand("audit-norms", "norm audit of a checkpoint");
  std::string audit_ckpt, audit_data, audit_out;
  audit->add_option("--checkpoint", audit_ckpt, "checkpoint JSON")->required();
  audit->add_option("--data", audit_data, "dataset JSONL of token ids")->required();
  audit->add_option("--out", audit_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      selssm::GenDataResult res =
          selssm::cmd_gen_data(gen_task, gen_m, gen_T, gen_seed, gen_noise, gen_out);
      std::cout << "wrote " << res.data_path << " (m=" << res.m << ", T=" << res.T
                << ")\nwrote " << res.vocab_path << "\nlabel histogram:";
      for (std::size_t k = 0; k < res.histogram.size(); ++k)
        std::cout << ' ' << k << ':' << res.histogram[k];
      std::cout << '\n';
    } else if (*train) {
      nlohmann::json j = train_flags.merged();
      if (train_T_opt->count() > 0) j["T"] = train_T;
      if (train_seed_opt->count() > 0) j["seed"] = train_seed;
      selssm::ExperimentConfig cfg = selssm::make_experiment_config("train", j);
      selssm::TrainCommandResult res = selssm::cmd_train(cfg);
      print_run(res.record);
      std::cout << "metrics: " << cfg.out_dir << "/metrics.csv\ncheckpoint: "
                << cfg.out_dir << "/checkpoint.json\n";
    } else if (*exp1) {
      selssm::ExperimentConfig cfg =
          selssm::make_experiment_config("experiment1", exp1_flags.merged());
      std::vector<selssm::RunRecord> records = selssm::cmd_experiment1(cfg);
      for (const selssm::RunRecord& r : records) print_run(r);
      std::cout << "summary: " << cfg.out_dir << "/summary.csv\n";
    } else if (*exp2) {
      selssm::ExperimentConfig cfg =
          selssm::make_experiment_config("experiment2", exp2_flags.merged());
      selssm::Experiment2Result res = selssm::cmd_experiment2(cfg);
      std::cout << selssm::aggregate_csv_string(res.aggregates)
                << "aggregate: " << cfg.out_dir << "/aggregate.csv\n";
    } else if (*sweep) {
      selssm::ExperimentConfig cfg =
          selssm::make_experiment_config("sweep-sa", sweep_flags.merged());
      std::vector<selssm::RunRecord> records = selssm::cmd_sweep_sa(cfg);
      for (const selssm::RunRecord& r : records) {
        std::cout << "s_a_init=" << csv_double(r.s_a_init) << " diverged="
                  << (r.diverged ? 1 : 0) << " final_sa=" << csv_double(r.final_sa)
                  << " final_train_loss=" << csv_double(r.final_train_loss) << '\n';
      }
      std::cout << "sweep: " << cfg.out_dir << "/sweep.csv\n";
    } else if (*bound) {
      nlohmann::json report = selssm::cmd_bound(load_config_json(bound_config), bound_out);
      std::cout << report.dump(2) << '\n';
    } else if (*audit) {
      selssm::NormAudit a = selssm::cmd_audit(audit_ckpt, audit_data, audit_out);
      std::cout << selssm::audit_csv_string(a);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
