#pragma once

// Experiment configuration. On disk it is an INI document: top-level keys for
// the protocol, plus [ablations], [data] and [model] sections. Every key is
// optional; unknown keys and sections are rejected.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tsfed/data.hpp"
#include "tsfed/model.hpp"

namespace tsfed {

struct Ablations {
  bool dbe = true;
  bool gbe_correction = true;
  bool gbe_coreset = true;
  bool bias_alignment = true;

  static Ablations fedavg() { return {false, false, false, false}; }
};

struct DataConfig {
  std::string preset = "di2";       // di2, di6, h1, h2 or "custom"
  std::vector<std::string> domains;  // custom only
  data::PartitionMode mode = data::PartitionMode::kDomainIndependent;  // custom only
  std::size_t domains_per_client = 2;                                   // custom only
  std::size_t n_clients = 4;
  std::size_t seqs_per_client = 32;
  std::size_t length = 256;
  std::size_t holdout_per_domain = 32;

  // Domain list, mode and mix after resolving the preset.
  std::vector<data::DomainSpec> domain_specs() const;
  data::PartitionSpec partition_spec() const;
};

struct RunConfig {
  std::size_t rounds = 30;
  std::size_t local_epochs = 10;
  double join_ratio = 1.0;
  double lambda = 1e-2;
  double alpha = 0.7;
  double beta = 0.1;
  double epsilon = 0.5;
  double mu = 0.1;
  std::size_t tau = 4;
  std::size_t coreset_size = 16;
  std::size_t coreset_steps = 25;
  double coreset_eta = 0.05;
  std::size_t align_steps = 25;
  double align_eta = 0.05;
  std::size_t server_epochs = 1;
  double server_lr = 0.05;
  double mask_ratio = 0.75;
  double lr = 0.1;
  double warmup_lr = 0.0;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  bool freeze_global_bias = false;
  bool loss_on_all_tokens = false;
  // Server state accumulates the drift mean over all clients instead of the sum.
  bool mean_state_drift = true;
  std::size_t workers = 1;
  Ablations ablations;
  DataConfig data;
  model::BackboneConfig model;

  void validate() const;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
// Round-trips through parse_config.
std::string to_config_text(const RunConfig& config);

// Sets one field by name, e.g. "lr", "ablations.dbe", "data.n_clients".
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);

}  // namespace tsfed
