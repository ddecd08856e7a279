#pragma once

// Per-client decoder-only transformer with a linear reconstruction head, plus
// the domain-bias block: latent trend/season decomposition, bias extraction,
// exponential moving average tracking and the bias-regularized local objective.

#include <cstdint>
#include <span>
#include <vector>

#include "tsfed/data.hpp"
#include "tsfed/param_set.hpp"
#include "tsfed/tensor.hpp"

namespace tsfed::model {

struct BackboneConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t patch_len = 16;
  std::size_t n_tokens = 16;
  std::size_t ffn_mult = 4;
  double dropout = 0.0;  // only 0 is supported; runs must stay deterministic

  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
};

// Bias vectors of one client. b_trend and b_season are trainable leaves; b_hat
// mirrors their sum and is refreshed after every EMA or SGD update.
struct BiasState {
  Tensor b_trend;
  Tensor b_season;
  std::vector<double> b_hat;
  std::vector<double> b_global;  // received from the server, read-only on clients
  double mu = 0.1;

  static BiasState zeros(std::size_t d_model, double mu);
  void resync();
  ParamSet trainable() const;  // {"bias.season", "bias.trend"}
  double distance_to_global() const;
};

struct ClientModel {
  int client_id = 0;
  BackboneConfig config;
  ParamSet weights;  // "backbone.*" and "head.*"
  BiasState bias;
};

// Deterministic random initialization of backbone + head for `seed`.
ParamSet init_weights(const BackboneConfig& config, std::uint64_t seed);
ClientModel make_client(int client_id, const BackboneConfig& config, const ParamSet& global, double mu);

// tokens [B, T, P] (zero-filled where masked), mask [B*T] with 1 = masked.
// Returns latents [B, T, d_model]. Token t only attends to tokens <= t.
Tensor forward_backbone(const ParamSet& weights, const BackboneConfig& config, const Tensor& tokens,
                        std::span<const std::uint8_t> mask);
Tensor forward_backbone(const ClientModel& model, const data::MaskedBatch& batch);

// Linear head d_model -> patch_len over the last axis.
Tensor apply_head(const ParamSet& weights, const Tensor& latent);

struct Decomposition {
  Tensor trend;
  Tensor season;
};

// Centered moving average of width tau along the token axis (axis -2) with
// edge replication; season = latent - trend. Where plain subtraction would lose
// bits the trend is rounded onto the latent's ulp grid first, so trend + season
// reproduces the latent exactly whenever |trend| <= |latent| (and in most cases
// up to about 2|latent|). Larger cancelling pairs cannot be exact in doubles.
Decomposition decompose(const Tensor& latent, std::size_t tau);

struct BiasEstimate {
  std::vector<double> trend;
  std::vector<double> season;
};

// Mean over all axes except the last.
BiasEstimate extract_bias(const Decomposition& parts);

// b <- (1 - mu) b + mu b_new for both components, then b_hat = trend + season.
void ema_update(BiasState& bias, std::span<const double> trend_new, std::span<const double> season_new);

struct LossOptions {
  double lambda = 1e-2;
  bool inject_bias = true;
  bool loss_on_all_tokens = false;
};

// Masked-position reconstruction MSE of head(latent + b_hat) against the
// originals, plus lambda * ||b_hat - b_global||^2 when lambda > 0.
Tensor local_loss_from_latent(const ClientModel& model, const Tensor& latent, const data::MaskedBatch& batch,
                              const LossOptions& options);
Tensor local_loss(const ClientModel& model, const data::MaskedBatch& batch, const LossOptions& options);

// Plain masked reconstruction loss with no bias, as used by the server and by
// core-set construction.
Tensor reconstruction_loss(const ParamSet& weights, const BackboneConfig& config, const data::MaskedBatch& batch,
                           bool loss_on_all_tokens = false);

struct TrainOptions {
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  double lr = 0.05;
  double lambda = 1e-2;
  double mask_ratio = 0.75;
  std::size_t tau = 4;
  std::uint64_t seed = 0;
  bool dbe = true;             // bias injection + SGD on bias components
  bool bias_alignment = true;  // lambda term; needs dbe
  bool loss_on_all_tokens = false;
};

struct TrainStats {
  std::vector<double> epoch_loss;  // mean batch loss per epoch
  std::vector<double> b_hat;       // final local bias
  std::vector<double> bias_distance;  // ||b_hat - b_global|| after each epoch
};

// Per batch: forward, decompose, extract_bias, ema_update, local_loss,
// backward, sgd_step.
TrainStats local_train(ClientModel& model, const data::SeriesShard& shard, const TrainOptions& options);

}  // namespace tsfed::model
