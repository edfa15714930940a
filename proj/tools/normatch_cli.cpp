// normatch: command-line driver for experiments.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "normatch/normatch.hpp"

namespace fs = std::filesystem;
using namespace normatch;
using namespace normatch::harness;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitNumeric = 2;

RunOptions progress(bool quiet) {
  RunOptions opt;
  if (!quiet)
    opt.on_row = [](const MetricsRow& r) {
      std::fprintf(stderr, "seed %llu step %lld  loss %.4f  test_ema %.4f  test_live %.4f  r_hc %.3f\n",
                   static_cast<unsigned long long>(r.seed), static_cast<long long>(r.step),
                   r.loss_total, r.test_acc_ema, r.test_acc_live, r.r_hc);
    };
  return opt;
}

void print_stat(const std::string& label, const ExperimentResult& r) {
  const auto ema = r.test_acc_ema();
  const auto hc = r.r_hc();
  std::printf("%-22s test_acc_ema %.2f +- %.2f  r_hc %.2f  (%zu seeds)\n", label.c_str(),
              100.0 * ema.mean, 100.0 * ema.std, 100.0 * hc.mean, r.seeds.size());
}

std::vector<WeightPolicy> parse_policies(const std::vector<std::string>& names) {
  std::vector<WeightPolicy> out;
  for (const auto& n : names) {
    try {
      out.push_back(WeightPolicy::parse(n));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NorMatch semi-supervised learning experiments on synthetic 2-D data"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint_path;
  bool quiet = false;
  std::uint64_t seed_override = 0;
  std::vector<std::string> policy_names;
  std::vector<double> lambdas;

  auto* run = app.add_subcommand("run", "train every seed of a config");
  run->add_option("--config", config_path, "experiment JSON")->required();
  auto* seed_opt = run->add_option("--seed-override", seed_override, "run only this seed");
  run->add_option("--out", out_dir, "output directory (overrides output_dir)");
  run->add_flag("--quiet", quiet, "no per-interval progress");

  auto* compare = app.add_subcommand("compare", "same seeds and data under several weight policies");
  compare->add_option("--config", config_path, "experiment JSON")->required();
  compare->add_option("--policies", policy_names, "e.g. ncue,ncue-zero,threshold:0.95,none")
      ->delimiter(',')
      ->required();
  compare->add_option("--out", out_dir, "output directory");
  compare->add_flag("--quiet", quiet, "no per-interval progress");

  auto* sweep = app.add_subcommand("sweep-lambda", "mean accuracy per NUM loss weight");
  sweep->add_option("--config", config_path, "experiment JSON")->required();
  sweep->add_option("--values", lambdas, "lambda values (default 0,1e-7,1e-6,1e-5,1e-4)")->delimiter(',');
  sweep->add_option("--out", out_dir, "output directory");
  sweep->add_flag("--quiet", quiet, "no per-interval progress");

  auto* exp = app.add_subcommand("export-data", "write each seed's dataset as CSV");
  exp->add_option("--config", config_path, "experiment JSON")->required();
  exp->add_option("--out", out_dir, "output directory");

  auto* resume = app.add_subcommand("resume", "continue a run from a checkpoint");
  resume->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  resume->add_option("--out", out_dir, "output directory");
  resume->add_flag("--quiet", quiet, "no per-interval progress");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*resume) {
      Run r = restore_run(load_checkpoint(checkpoint_path));
      const fs::path dir = out_dir.empty() ? fs::path(r.config().output_dir) : fs::path(out_dir);
      ensure_writable_dir(dir);
      const auto opt = progress(quiet);
      while (!r.done())
        if (auto row = r.advance(); row && opt.on_row) opt.on_row(*row);
      auto out = open_for_write(metrics_path(dir, r.seed()));
      write_metrics_header(out);
      for (const auto& row : r.rows()) write_metrics_row(out, row);
      std::printf("seed %llu finished at step %lld, test_acc_ema %.4f\n",
                  static_cast<unsigned long long>(r.seed()), static_cast<long long>(r.step()),
                  r.rows().back().test_acc_ema);
      return 0;
    }

    ExperimentConfig cfg = load_config(config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;

    if (*run) {
      if (*seed_opt) cfg.seeds = {seed_override};
      const auto r = run_experiment(cfg, progress(quiet));
      print_stat(cfg.train.loss.policy.name(), r);
      std::printf("results in %s\n", cfg.output_dir.c_str());
    } else if (*compare) {
      const auto results = compare_policies(cfg, parse_policies(policy_names), progress(quiet));
      for (const auto& p : results) print_stat(p.policy.name(), p.result);
      std::printf("results in %s\n", cfg.output_dir.c_str());
    } else if (*sweep) {
      if (lambdas.empty()) lambdas = default_lambda_values();
      const auto results = lambda_sweep(cfg, lambdas, progress(quiet));
      for (const auto& l : results) print_stat("lambda=" + format_double(l.lambda), l.result);
      std::printf("results in %s\n", cfg.output_dir.c_str());
    } else if (*exp) {
      const fs::path dir = cfg.output_dir;
      ensure_writable_dir(dir);
      for (auto seed : cfg.seeds) {
        const auto d = build_data(cfg, seed);
        const auto path = dir / ("dataset_seed" + std::to_string(seed) + ".csv");
        auto out = open_for_write(path);
        data::write_dataset_csv(out, d.split, d.test);
        std::printf("%s\n", path.c_str());
      }
    }
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return kExitConfig;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime failure: %s\n", e.what());
    return kExitNumeric;
  }
}
