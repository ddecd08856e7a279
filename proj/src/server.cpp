#include "tsfed/server.hpp"

#include <algorithm>
#include <iostream>
#include <numeric>

#include "tsfed/errors.hpp"
#include "tsfed/rng.hpp"

namespace tsfed::server {

ServerState ServerState::create(ParamSet theta, std::size_t d_model, double beta, double alpha) {
  ServerState st;
  st.s = zeros_like(theta);
  st.theta_g = std::move(theta);
  st.b_global.assign(d_model, 0.0);
  st.beta = beta;
  st.alpha = alpha;
  st.validate();
  return st;
}

void ServerState::validate() const {
  require_congruent(theta_g, s, "server state");
  if (!(beta > 0.0)) throw ConfigError("server: beta must be > 0");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("server: alpha must lie in [0, 1]");
}

ParamSet weighted_average(std::span<const ParamSet> params, std::span<const double> sizes) {
  if (params.empty()) throw ContractError("weighted_average: no models");
  if (params.size() != sizes.size()) throw ContractError("weighted_average: one size per model required");
  for (double n : sizes)
    if (!(n > 0.0)) throw ContractError("weighted_average: sizes must be positive");
  for (const auto& p : params) require_congruent(params[0], p, "weighted_average");
  if (params.size() == 1) return params[0].clone();

  const double total = std::accumulate(sizes.begin(), sizes.end(), 0.0);
  ParamSet out = zeros_like(params[0]);
  for (auto& [path, t] : out) {
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double w = sizes[i] / total;
      const auto src = params[i].at(path).values();
      for (std::size_t j = 0; j < v.size(); ++j) v[j] += w * src[j];
    }
  }
  return out;
}

ParamSet weighted_average(std::span<const model::ClientModel> models, std::span<const double> sizes) {
  std::vector<ParamSet> params;
  params.reserve(models.size());
  for (const auto& m : models) params.push_back(m.weights);
  return weighted_average(params, sizes);
}

void update_state(ServerState& state, std::span<const ParamSet> client_params, const ParamSet& theta_prev,
                  double drift_weight) {
  require_congruent(state.s, theta_prev, "update_state");
  ParamSet drift = zeros_like(theta_prev);
  for (const auto& p : client_params) {
    require_congruent(state.s, p, "update_state");
    for (auto& [path, t] : drift) {
      auto d = t.mutable_values();
      const auto a = p.at(path).values();
      const auto b = theta_prev.at(path).values();
      for (std::size_t j = 0; j < d.size(); ++j) d[j] += a[j] - b[j];
    }
  }
  for (auto& [path, t] : state.s) {
    auto s = t.mutable_values();
    const auto d = drift.at(path).values();
    for (std::size_t j = 0; j < s.size(); ++j) s[j] -= state.beta * (drift_weight * d[j]);
  }
}

ParamSet correct_global(const ParamSet& theta_prime, const ServerState& state) {
  if (!(state.beta > 0.0)) throw ConfigError("correct_global: beta must be > 0");
  require_congruent(theta_prime, state.s, "correct_global");
  ParamSet out = theta_prime.clone();
  for (auto& [path, t] : out) {
    auto v = t.mutable_values();
    const auto s = state.s.at(path).values();
    for (std::size_t j = 0; j < v.size(); ++j) v[j] -= s[j] / state.beta;
  }
  return out;
}

namespace {

double pooled_loss(const ParamSet& theta, const model::BackboneConfig& cfg,
                   const std::vector<std::vector<double>>& pool, const FinetuneOptions& opt) {
  const auto batch = data::mask_tokens(pool, cfg.patch_len, opt.mask_ratio,
                                       derive_seed({opt.seed, tag(Stream::kServerTune), 0xE7A1}));
  return model::reconstruction_loss(theta, cfg, batch, opt.loss_on_all_tokens).item();
}

}  // namespace

FinetuneResult coreset_finetune(const ParamSet& theta, const model::BackboneConfig& cfg,
                                std::span<const coreset::CoreSet> coresets, const FinetuneOptions& opt) {
  FinetuneResult res;
  res.theta = theta.clone();
  std::vector<std::vector<double>> pool;
  for (const auto& cs : coresets) {
    if (cs.stage != coreset::Stage::kAligned) {
      throw ContractError(std::string("coreset_finetune: core-set of client ") + std::to_string(cs.source_client) +
                          " is in stage " + coreset::to_string(cs.stage) + ", expected aligned");
    }
    pool.insert(pool.end(), cs.sequences.begin(), cs.sequences.end());
  }
  if (pool.empty()) {
    std::cerr << "warning: coreset_finetune: pooled core-set is empty, skipping fine-tuning\n";
    res.skipped = true;
    return res;
  }
  if (opt.batch_size == 0) throw ConfigError("coreset_finetune: batch_size must be >= 1");

  res.initial_loss = pooled_loss(res.theta, cfg, pool, opt);
  if (opt.epochs == 0 || opt.lr == 0.0) {
    res.final_loss = res.initial_loss;
    return res;
  }

  std::vector<std::size_t> order(pool.size());
  std::vector<std::vector<double>> batch_seqs;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = make_rng({opt.seed, tag(Stream::kServerTune), epoch});
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t b = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size, ++b) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      batch_seqs.clear();
      for (std::size_t i = start; i < end; ++i) batch_seqs.push_back(pool[order[i]]);
      const auto batch = data::mask_tokens(batch_seqs, cfg.patch_len, opt.mask_ratio,
                                           derive_seed({opt.seed, tag(Stream::kServerTune), epoch, b}));
      Tensor loss = model::reconstruction_loss(res.theta, cfg, batch, opt.loss_on_all_tokens);
      if (!loss.requires_grad()) continue;
      res.theta.zero_grad();
      backward(loss);
      for (auto& [path, t] : res.theta)
        if (!t.has_grad()) t.node()->grad_buffer();
      sgd_step(res.theta, opt.lr);
    }
  }
  res.final_loss = pooled_loss(res.theta, cfg, pool, opt);
  return res;
}

ParamSet fuse(const ParamSet& corrected, const ParamSet& tuned, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("fuse: alpha must lie in [0, 1]");
  require_congruent(corrected, tuned, "fuse");
  if (alpha == 1.0) return corrected.clone();
  if (alpha == 0.0) return tuned.clone();
  ParamSet out = corrected.clone();
  for (auto& [path, t] : out) {
    auto v = t.mutable_values();
    const auto y = tuned.at(path).values();
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double x = v[j];
      // Rounding can push the blend one ulp outside [min, max]; clamp it back.
      v[j] = std::clamp(alpha * x + (1.0 - alpha) * y[j], std::min(x, y[j]), std::max(x, y[j]));
    }
  }
  return out;
}

void update_global_bias(ServerState& state, std::span<const std::vector<double>> biases,
                        std::span<const double> sizes, BiasPhase phase) {
  if (biases.empty()) throw ContractError("update_global_bias: no participant biases");
  const std::size_t d = biases[0].size();
  for (const auto& b : biases)
    if (b.size() != d) throw DimensionError("update_global_bias: bias widths differ");
  std::vector<double> w(biases.size(), 1.0);
  if (phase == BiasPhase::kInit) {
    if (sizes.size() != biases.size()) throw ContractError("update_global_bias: one size per bias required");
    std::copy(sizes.begin(), sizes.end(), w.begin());
  }
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  if (!(total > 0.0)) throw ContractError("update_global_bias: weights must sum to a positive value");
  std::vector<double> out(d, 0.0);
  if (biases.size() == 1) {
    out = biases[0];
  } else {
    for (std::size_t i = 0; i < biases.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) out[j] += (w[i] / total) * biases[i][j];
  }
  state.b_global = std::move(out);
}

}  // namespace tsfed::server
