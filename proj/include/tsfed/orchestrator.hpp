#pragma once

// End-to-end federated pretraining loop: initialization with a warm-up epoch,
// per-round client sampling, the local phase (optionally on several threads)
// and the serialized server phase.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "tsfed/config.hpp"
#include "tsfed/coreset.hpp"
#include "tsfed/data.hpp"
#include "tsfed/model.hpp"
#include "tsfed/server.hpp"

namespace tsfed {

struct ClientRoundLog {
  int client_id = 0;
  std::vector<double> epoch_loss;
  std::vector<double> bias_distance;  // ||b_hat - b_global|| after each epoch
  double coreset_match_loss = 0.0;
  double coreset_align_loss = 0.0;
};

struct RoundReport {
  std::size_t round = 0;
  std::vector<int> participants;
  std::vector<ClientRoundLog> clients;
  double drift_pre = 0.0;   // ||theta' - theta_prev||
  double drift_post = 0.0;  // ||theta'' - theta_prev||
  double pooled_coreset_loss = 0.0;
  double state_norm = 0.0;
  double mean_train_loss = 0.0;
  double mean_bias_distance = 0.0;
  double mean_pairwise_bias_distance = 0.0;  // over all clients' b_hat
  double wall_ms = 0.0;
};

struct Simulation {
  RunConfig config;
  server::ServerState state;
  std::vector<model::ClientModel> clients;
  std::vector<data::SeriesShard> shards;
  std::vector<coreset::CoreSet> last_coresets;  // aligned core-sets of the latest round
  std::vector<std::vector<double>> warmup_biases;  // b_hat per client after the warm-up epoch
};

std::vector<data::SeriesShard> make_training_shards(const RunConfig& config);
// One shard per configured domain, generated from streams disjoint from training.
std::vector<data::SeriesShard> make_holdout(const RunConfig& config);

Simulation initialize(const RunConfig& config);
// As above with caller-provided shards (one per client).
Simulation initialize(const RunConfig& config, std::vector<data::SeriesShard> shards);

// max(1, round(rho * n)) distinct ids, ascending.
std::vector<int> sample_clients(std::size_t n_clients, double rho, std::size_t round_index, std::uint64_t seed);

double mean_pairwise_distance(const std::vector<std::vector<double>>& vectors);

RoundReport run_round(Simulation& sim);

struct TrainingResult {
  ParamSet theta;
  std::vector<RoundReport> reports;
  // b_hat of every client per round; round 0 holds the warm-up estimates.
  std::vector<std::vector<double>> bias_trajectory;  // [round][client * d + dim]
};

// Writes artifacts when `out_dir` is set.
TrainingResult run_training(const RunConfig& config, const std::optional<std::filesystem::path>& out_dir = {});
TrainingResult run_training(Simulation& sim, const std::optional<std::filesystem::path>& out_dir = {});

}  // namespace tsfed
