#pragma once

// Synthetic multi-domain time series, client partitioning, patch tokenization
// and random patch masking.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsfed/tensor.hpp"

namespace tsfed::data {

enum class Dynamics { kSinusoidMixture, kBoundedSaturating, kRegimeSwitching };

std::string to_string(Dynamics d);
Dynamics dynamics_from_string(const std::string& s);

struct DomainSpec {
  std::string domain_id;
  std::size_t resolution = 8;  // samples per base cycle
  Dynamics dynamics = Dynamics::kSinusoidMixture;
  double amp_lo = 0.5;
  double amp_hi = 1.5;
  double noise_std = 0.0;
  std::optional<double> transition_prob;  // regime-switching only
  std::size_t components = 0;             // sinusoid-mixture; 0 draws 2..4 per sequence

  void validate() const;
};

struct GeneratedDomain {
  std::vector<std::vector<double>> sequences;
  // Active latent generator per step; only filled for regime-switching domains.
  std::vector<std::vector<std::uint8_t>> regimes;
};

GeneratedDomain generate_domain_detailed(const DomainSpec& spec, std::size_t n_sequences,
                                         std::size_t length, std::uint64_t seed);
std::vector<std::vector<double>> generate_domain(const DomainSpec& spec, std::size_t n_sequences,
                                                 std::size_t length, std::uint64_t seed);

struct SeriesStats {
  double mean = 0.0;
  double std = 1.0;
};

// Per-sequence z-score in place. Constant sequences use std = 1.
SeriesStats normalize(std::vector<double>& seq);

struct SeriesShard {
  int client_id = 0;
  std::vector<std::vector<double>> sequences;  // normalized
  std::vector<std::string> domain_tags;
  std::vector<std::size_t> seq_ids;  // unique within one partition call
  std::vector<SeriesStats> stats;

  std::size_t size() const { return sequences.size(); }
};

enum class PartitionMode { kDomainMixed, kDomainIndependent };

std::string to_string(PartitionMode m);
PartitionMode partition_mode_from_string(const std::string& s);

struct PartitionSpec {
  PartitionMode mode = PartitionMode::kDomainIndependent;
  std::size_t n_clients = 4;
  std::size_t seqs_per_client = 32;
  std::size_t length = 256;
  std::size_t domains_per_client = 2;  // domain-mixed only
};

// DM: each client round-robins its sequences over `domains_per_client` domains.
// DI: client c holds only domain (c mod #domains); needs n_clients >= #domains.
std::vector<SeriesShard> partition(std::span<const DomainSpec> domains, const PartitionSpec& spec,
                                   std::uint64_t seed);

// CSV with one row per time step: client_id,seq_id,domain_id,value
void write_shards_csv(std::span<const SeriesShard> shards, const std::filesystem::path& path);

// Built-in domain catalog and the named heterogeneity presets.
std::vector<DomainSpec> domain_catalog();
DomainSpec catalog_domain(const std::string& name);

struct DataPreset {
  std::vector<std::string> domains;
  PartitionMode mode;
  std::size_t domains_per_client;
};
// "di2", "di6", "h1", "h2".
DataPreset data_preset(const std::string& name);

// --- tokenization ---------------------------------------------------------

struct Tokens {
  std::size_t n_tokens = 0;
  std::size_t patch_len = 0;
  std::vector<double> data;  // row-major [n_tokens x patch_len]
};

Tokens patchify(std::span<const double> sequence, std::size_t patch_len);
std::vector<double> unpatchify(const Tokens& tokens);

struct MaskedBatch {
  std::size_t batch = 0;
  std::size_t n_tokens = 0;
  std::size_t patch_len = 0;
  std::vector<double> tokens;      // [batch x n_tokens x patch_len], zeros where masked
  std::vector<std::uint8_t> mask;  // [batch x n_tokens], 1 = masked
  std::vector<double> originals;   // [batch x n_tokens x patch_len]

  std::size_t rows() const { return batch * n_tokens; }
  std::size_t masked_count() const;
  Tensor tokens_tensor() const;     // constant [batch, n_tokens, patch_len]
  Tensor originals_tensor() const;  // constant [batch, n_tokens, patch_len]
  // 1.0 at masked rows, 0.0 elsewhere; one entry per token row.
  std::vector<double> mask_weights() const;
};

// Number of masked tokens per sequence: round(ratio * n_tokens).
std::size_t masked_per_sequence(double ratio, std::size_t n_tokens);

// Masks each sequence with its own stream keyed by (seed, index in batch).
MaskedBatch mask_tokens(std::span<const std::vector<double>> sequences, std::size_t patch_len,
                        double ratio, std::uint64_t seed);

// Mask pattern only: [n_sequences x n_tokens], 1 = masked.
std::vector<std::uint8_t> draw_mask(std::size_t n_sequences, std::size_t n_tokens, double ratio,
                                    std::uint64_t seed);

}  // namespace tsfed::data
