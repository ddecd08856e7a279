#pragma once

// Recomputes one FedAvg-mode round by hand: every participant trains from the
// broadcast model with its own seed, then parameters are averaged with weights
// n_i / sum n_j in participant order.

#include <string>
#include <utility>

#include "tsfed/orchestrator.hpp"
#include "tsfed/rng.hpp"

namespace tsfed::testing {

// (checkpoint bytes from run_training, checkpoint bytes of the hand average).
inline std::pair<std::string, std::string> fedavg_round_vs_oracle(RunConfig cfg) {
  cfg.rounds = 1;
  cfg.ablations = Ablations::fedavg();
  cfg.lambda = 0.0;
  cfg.alpha = 1.0;
  const auto run = run_training(cfg);

  auto sim = initialize(cfg);
  const ParamSet theta0 = sim.state.theta_g.clone();
  const auto ids = sample_clients(cfg.data.n_clients, cfg.join_ratio, 1, cfg.seed);
  std::vector<ParamSet> trained;
  std::vector<double> sizes;
  for (int id : ids) {
    auto& c = sim.clients[static_cast<std::size_t>(id)];
    c.weights = theta0.clone();
    c.bias.b_global = sim.state.b_global;
    model::TrainOptions o;
    o.epochs = cfg.local_epochs;
    o.batch_size = cfg.batch_size;
    o.lr = cfg.lr;
    o.lambda = 0.0;
    o.mask_ratio = cfg.mask_ratio;
    o.tau = cfg.tau;
    o.seed = derive_seed({cfg.seed, 1, static_cast<std::uint64_t>(id)});
    o.dbe = false;
    o.bias_alignment = false;
    model::local_train(c, sim.shards[static_cast<std::size_t>(id)], o);
    trained.push_back(c.weights);
    sizes.push_back(static_cast<double>(sim.shards[static_cast<std::size_t>(id)].size()));
  }
  double total = 0.0;
  for (double n : sizes) total += n;
  ParamSet avg;
  for (const auto& [path, t] : trained.front()) {
    std::vector<double> v(t.numel(), 0.0);
    for (std::size_t i = 0; i < trained.size(); ++i) {
      const double w = sizes[i] / total;
      const auto src = trained[i].at(path).values();
      for (std::size_t j = 0; j < v.size(); ++j) v[j] += w * src[j];
    }
    avg.insert(path, Tensor::leaf(t.shape(), v));
  }
  if (trained.size() == 1) avg = trained.front().clone();
  return {serialize(run.theta), serialize(avg)};
}

}  // namespace tsfed::testing
