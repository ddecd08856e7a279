// tsfed: train, evaluate, sweep and ablate federated pretraining runs.
// Exit codes: 0 success, 2 bad arguments or configuration, 1 anything else.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "tsfed/config.hpp"
#include "tsfed/errors.hpp"
#include "tsfed/evaluation.hpp"
#include "tsfed/orchestrator.hpp"

namespace fs = std::filesystem;
using namespace tsfed;

namespace {

RunConfig load_with_seed(const std::string& path, const std::optional<std::uint64_t>& seed) {
  RunConfig c = path.empty() ? RunConfig{} : load_config(path);
  if (seed) c.seed = *seed;
  c.validate();
  return c;
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("grid: cannot parse '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("grid: no values");
  return out;
}

void set_ablation(RunConfig& c, const std::string& name, bool on) {
  if (name == "dbe") c.ablations.dbe = on;
  else if (name == "gbe_correction") c.ablations.gbe_correction = on;
  else if (name == "gbe_coreset") c.ablations.gbe_coreset = on;
  else if (name == "bias_alignment") c.ablations.bias_alignment = on;
  else throw ConfigError("ablate: unknown toggle '" + name + "'");
}

bool get_ablation(const RunConfig& c, const std::string& name) {
  if (name == "dbe") return c.ablations.dbe;
  if (name == "gbe_correction") return c.ablations.gbe_correction;
  if (name == "gbe_coreset") return c.ablations.gbe_coreset;
  if (name == "bias_alignment") return c.ablations.bias_alignment;
  throw ConfigError("ablate: unknown toggle '" + name + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated pretraining simulator for time series models"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", checkpoint, axis, grid, toggle;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  double mask_ratio = 0.75;

  auto* train = app.add_subcommand("train", "Run federated training and evaluate the final model");
  train->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);

  auto* evalc = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out set");
  evalc->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  evalc->add_option("--mask-ratio", mask_ratio, "Fraction of masked patches")->check(CLI::Range(0.0, 1.0));
  evalc->add_option("--config", config_path, "Config file (default: config.snapshot of the run)");

  auto* sweep = app.add_subcommand("sweep", "Scaling sweep along one axis");
  sweep->add_option("--axis", axis, "data, clients or join_rate")->required();
  sweep->add_option("--grid", grid, "Comma-separated values")->required();
  sweep->add_option("--config", config_path, "Base config file")->check(CLI::ExistingFile);

  auto* ablate = app.add_subcommand("ablate", "Compare a config against a copy with one mechanism flipped");
  ablate->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  ablate->add_option("--toggle", toggle, "dbe, gbe_correction, gbe_coreset or bias_alignment")->required();

  for (auto* sub : {train, evalc, sweep, ablate}) {
    sub->add_option("--out", out_dir, "Output directory");
    sub->add_option("--seed", seed, "Override the config seed");
    sub->add_option("--workers", workers, "Client threads");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*train) {
      RunConfig c = load_with_seed(config_path, seed);
      if (workers) c.workers = *workers;
      const auto res = run_training(c, fs::path(out_dir));
      const auto holdout = make_holdout(c);
      const auto reports = eval::mask_sweep(res.theta, c.model, holdout, eval::standard_ratios(), c.seed);
      eval::write_reports_csv(reports, fs::path(out_dir) / "eval.csv");
      for (const auto& r : reports) std::cout << "mask " << r.mask_ratio << " mse " << r.mse << " mae " << r.mae << '\n';
    } else if (*evalc) {
      std::string cfg_path = config_path;
      if (cfg_path.empty()) {
        const fs::path snap = fs::path(checkpoint).parent_path().parent_path() / "config.snapshot";
        if (!fs::exists(snap)) throw ConfigError("eval: no --config given and " + snap.string() + " not found");
        cfg_path = snap.string();
      }
      const RunConfig c = load_with_seed(cfg_path, seed);
      const ParamSet theta = load_checkpoint(checkpoint);
      const auto holdout = make_holdout(c);
      eval::EvalOptions opt;
      opt.model_id = fs::path(checkpoint).stem().string();
      const auto rep = eval::reconstruct_eval(theta, c.model, holdout, mask_ratio, c.seed, opt);
      const std::vector<eval::EvalReport> reports{rep};
      eval::write_reports_csv(reports, fs::path(out_dir) / "eval.csv");
      std::cout << "mask " << rep.mask_ratio << " mse " << rep.mse << " mae " << rep.mae << '\n';
    } else if (*sweep) {
      RunConfig c = load_with_seed(config_path, seed);
      if (workers) c.workers = *workers;
      const auto rows = eval::scaling_sweep(eval::sweep_axis_from_string(axis), parse_grid(grid), c);
      eval::write_sweep_csv(rows, fs::path(out_dir) / "sweep.csv");
      for (const auto& r : rows) std::cout << eval::to_string(r.axis) << ' ' << r.value << " mse " << r.mse_75 << '\n';
    } else if (*ablate) {
      RunConfig base = load_with_seed(config_path, seed);
      if (workers) base.workers = *workers;
      RunConfig flipped = base;
      set_ablation(flipped, toggle, !get_ablation(base, toggle));
      flipped.validate();
      const auto holdout = make_holdout(base);
      std::vector<eval::EvalReport> reports;
      for (const auto& [name, cfg] : {std::pair{std::string("base"), base}, std::pair{toggle + "_flipped", flipped}}) {
        const auto res = run_training(cfg, fs::path(out_dir) / name);
        eval::EvalOptions opt;
        opt.model_id = name;
        for (auto& r : eval::mask_sweep(res.theta, cfg.model, holdout, eval::standard_ratios(), cfg.seed, opt))
          reports.push_back(r);
      }
      eval::write_reports_csv(reports, fs::path(out_dir) / "ablation.csv");
      for (const auto& r : reports)
        std::cout << r.model_id << " mask " << r.mask_ratio << " mse " << r.mse << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
