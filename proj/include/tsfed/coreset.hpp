#pragma once

// Client-side core-set construction: gradient matching against a sampled
// mini-batch, amplitude-only Fourier perturbation, then latent alignment.
//
// Gradient matching is taken over the head weights only. The head gradient of
// the masked reconstruction loss has the closed form
//   g = 2/(M*P) * Z^T (mask * (Z W - Y)),
// which is built from ordinary tape operations, so differentiating the match
// loss with respect to the core-set needs only a single backward pass.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "tsfed/data.hpp"
#include "tsfed/model.hpp"
#include "tsfed/tensor.hpp"

namespace tsfed::coreset {

enum class Stage { kInitial, kPerturbed, kAligned };

const char* to_string(Stage s);

struct CoreSet {
  Stage stage = Stage::kInitial;
  int source_client = 0;
  std::size_t length = 0;
  std::vector<std::vector<double>> sequences;  // K x length
  std::vector<std::size_t> reference_indices;  // shard rows of the sampled mini-batch
  double epsilon_used = 0.0;
  std::vector<double> match_trace;  // loss before each step, then the final loss
  std::vector<double> align_trace;
  double match_loss_final = 0.0;
  double align_loss_final = 0.0;

  std::size_t size() const { return sequences.size(); }
};

// Head-weight gradient of the masked reconstruction loss, as a graph node.
// latent [N, d], targets [N, P]; row_weights selects the masked rows.
Tensor head_gradient(const Tensor& latent, const Tensor& head_w, const Tensor& targets,
                     std::span<const double> row_weights);

// Model weights as constants, so core-set losses never write model gradients.
ParamSet freeze(const ParamSet& weights);

// sum_k || grad_head L(C) - grad_head L(x_k) ||^2.
// coreset: [K, length] (may require grad). Both sides are masked with
// draw_mask(.., mask_ratio, mask_seed), so row j of the core-set and sample j
// of the mini-batch share a mask pattern.
Tensor match_loss(const Tensor& coreset, std::span<const std::vector<double>> minibatch, const ParamSet& weights,
                  const model::BackboneConfig& config, double mask_ratio, std::uint64_t mask_seed);

// Mean-pooled final latent per sequence of unmasked input: [n, d].
Tensor pooled_embedding(const Tensor& sequences, const ParamSet& weights, const model::BackboneConfig& config);

// (1/K) || sum_j e_c[j] - sum_k e_x[k] ||^2 on pooled embeddings [K, d].
Tensor align_loss_from_embeddings(const Tensor& coreset_emb, const Tensor& minibatch_emb);

Tensor align_loss(const Tensor& perturbed, std::span<const std::vector<double>> minibatch, const ParamSet& weights,
                  const model::BackboneConfig& config);

struct BuildOptions {
  std::size_t k = 16;
  double eta = 0.05;
  std::size_t steps = 25;
  double mask_ratio = 0.75;
  std::uint64_t seed = 0;
};

CoreSet build_coreset(const model::ClientModel& client, const data::SeriesShard& shard, const BuildOptions& options);

// Adds amplitude_noise[k] to |X_k| of the real DFT, clamps at 0, keeps phase.
std::vector<double> perturb_amplitude(std::span<const double> sequence, std::span<const double> amplitude_noise);

CoreSet perturb_fourier(const CoreSet& coreset, double epsilon, std::uint64_t seed);

CoreSet refine_alignment(const CoreSet& coreset, std::span<const std::vector<double>> minibatch,
                         const ParamSet& weights, const model::BackboneConfig& config, double eta, std::size_t steps);

std::vector<std::vector<double>> gather(const data::SeriesShard& shard, std::span<const std::size_t> rows);

// Mean over core-set sequences of the L2 distance to the nearest shard sequence.
double mean_nearest_distance(const CoreSet& coreset, const data::SeriesShard& shard);

// client_id,seq_index,step,value
void write_coreset_csv(const CoreSet& coreset, const std::filesystem::path& path);

}  // namespace tsfed::coreset
