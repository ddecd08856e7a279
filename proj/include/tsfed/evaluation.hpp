#pragma once

// Masked-reconstruction metrics on held-out shards, mask-ratio sweeps and
// federated scaling sweeps.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tsfed/config.hpp"
#include "tsfed/data.hpp"
#include "tsfed/model.hpp"
#include "tsfed/param_set.hpp"

namespace tsfed::eval {

struct EvalReport {
  std::string model_id;
  std::string dataset_id;
  double mask_ratio = 0.0;
  double mse = 0.0;
  double mae = 0.0;
  std::size_t n_sequences = 0;
  std::size_t n_masked_values = 0;
  std::uint64_t seed = 0;
  bool no_masked_positions = false;  // mse and mae are then defined as 0
};

struct EvalOptions {
  std::string model_id = "global";
  std::string dataset_id = "holdout";
  std::size_t batch_size = 32;
  // Adds this vector to every latent before the head; empty means none.
  std::vector<double> inject_bias;
};

// MSE and MAE over masked positions only. Shard k is masked with the stream
// derive_seed(seed, eval, k).
EvalReport reconstruct_eval(const ParamSet& theta, const model::BackboneConfig& config,
                            std::span<const data::SeriesShard> dataset, double mask_ratio, std::uint64_t seed,
                            const EvalOptions& options = {});

std::vector<EvalReport> mask_sweep(const ParamSet& theta, const model::BackboneConfig& config,
                                   std::span<const data::SeriesShard> dataset, std::span<const double> ratios,
                                   std::uint64_t seed, const EvalOptions& options = {});

inline const std::vector<double>& standard_ratios() {
  static const std::vector<double> r{0.2, 0.35, 0.5, 0.75, 0.9};
  return r;
}

enum class SweepAxis { kData, kClients, kJoinRate };
SweepAxis sweep_axis_from_string(const std::string& s);
std::string to_string(SweepAxis a);

struct SweepRow {
  SweepAxis axis;
  double value = 0.0;
  double mse_75 = 0.0;
};

// One full training run per grid value (same seed), each scored at 75% mask on
// the config's held-out set, which does not depend on the grid value.
std::vector<SweepRow> scaling_sweep(SweepAxis axis, std::span<const double> grid, const RunConfig& base);
// The config with `value` applied along `axis`.
RunConfig apply_axis(const RunConfig& base, SweepAxis axis, double value);

void write_reports_csv(std::span<const EvalReport> reports, const std::filesystem::path& path);
void write_sweep_csv(std::span<const SweepRow> rows, const std::filesystem::path& path);

}  // namespace tsfed::eval
