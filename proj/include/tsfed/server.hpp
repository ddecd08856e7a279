#pragma once

// Server side of a round: size-weighted aggregation, drift-correcting state
// update, fine-tuning on the pooled client core-sets, convex fusion and the
// global bias.

#include <cstdint>
#include <span>
#include <vector>

#include "tsfed/coreset.hpp"
#include "tsfed/model.hpp"
#include "tsfed/param_set.hpp"

namespace tsfed::server {

struct ServerState {
  ParamSet theta_g;
  ParamSet s;  // congruent with theta_g, starts at zero
  std::vector<double> b_global;
  std::size_t round = 0;
  double beta = 0.1;
  double alpha = 0.7;

  static ServerState create(ParamSet theta, std::size_t d_model, double beta, double alpha);
  void validate() const;
};

ParamSet weighted_average(std::span<const ParamSet> params, std::span<const double> sizes);
ParamSet weighted_average(std::span<const model::ClientModel> models, std::span<const double> sizes);

// s <- s - beta * w * sum_i (theta_i - theta_prev); w = 1 is the plain sum.
void update_state(ServerState& state, std::span<const ParamSet> client_params, const ParamSet& theta_prev,
                  double drift_weight = 1.0);

// theta' - s / beta
ParamSet correct_global(const ParamSet& theta_prime, const ServerState& state);

struct FinetuneOptions {
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  double lr = 0.05;
  double mask_ratio = 0.75;
  std::uint64_t seed = 0;
  bool loss_on_all_tokens = false;
};

struct FinetuneResult {
  ParamSet theta;
  double initial_loss = 0.0;  // pooled loss before the first step
  double final_loss = 0.0;    // pooled loss after the last step
  bool skipped = false;
};

// Masked-reconstruction SGD on the pooled aligned core-sets. The input is
// left untouched. Pooled losses are evaluated with a fixed mask seed.
FinetuneResult coreset_finetune(const ParamSet& theta, const model::BackboneConfig& config,
                                std::span<const coreset::CoreSet> coresets, const FinetuneOptions& options);

// alpha * corrected + (1 - alpha) * tuned
ParamSet fuse(const ParamSet& corrected, const ParamSet& tuned, double alpha);

enum class BiasPhase { kInit, kRound };

// Init: size-weighted mean. Round: plain mean over participants.
void update_global_bias(ServerState& state, std::span<const std::vector<double>> biases,
                        std::span<const double> sizes, BiasPhase phase);

}  // namespace tsfed::server
