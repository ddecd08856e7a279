#include "tsfed/orchestrator.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <thread>

#include "tsfed/errors.hpp"
#include "tsfed/rng.hpp"

namespace tsfed {

namespace fs = std::filesystem;

std::vector<data::SeriesShard> make_training_shards(const RunConfig& config) {
  const auto specs = config.data.domain_specs();
  return data::partition(specs, config.data.partition_spec(), derive_seed({config.seed, tag(Stream::kData)}));
}

std::vector<data::SeriesShard> make_holdout(const RunConfig& config) {
  const auto specs = config.data.domain_specs();
  std::vector<data::SeriesShard> out;
  std::size_t next_id = 0;
  for (std::size_t d = 0; d < specs.size(); ++d) {
    data::SeriesShard shard;
    shard.client_id = -1;
    shard.sequences = data::generate_domain(specs[d], config.data.holdout_per_domain, config.data.length,
                                            derive_seed({config.seed, tag(Stream::kHoldout), d}));
    for (auto& seq : shard.sequences) {
      shard.stats.push_back(data::normalize(seq));
      shard.domain_tags.push_back(specs[d].domain_id);
      shard.seq_ids.push_back(next_id++);
    }
    out.push_back(std::move(shard));
  }
  return out;
}

std::vector<int> sample_clients(std::size_t n_clients, double rho, std::size_t round_index, std::uint64_t seed) {
  if (n_clients == 0) throw ContractError("sample_clients: no clients");
  if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("sample_clients: rho must lie in (0, 1]");
  const auto k = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(rho * static_cast<double>(n_clients))),
                                         1, n_clients);
  std::vector<int> ids(n_clients);
  for (std::size_t i = 0; i < n_clients; ++i) ids[i] = static_cast<int>(i);
  auto rng = make_rng({seed, tag(Stream::kSampling), round_index});
  for (std::size_t i = 0; i < k; ++i)
    std::swap(ids[i], ids[std::uniform_int_distribution<std::size_t>(i, n_clients - 1)(rng)]);
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

double mean_pairwise_distance(const std::vector<std::vector<double>>& v) {
  if (v.size() < 2) return 0.0;
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < v.size(); ++a)
    for (std::size_t b = a + 1; b < v.size(); ++b) {
      double acc = 0.0;
      for (std::size_t j = 0; j < v[a].size(); ++j) acc += (v[a][j] - v[b][j]) * (v[a][j] - v[b][j]);
      total += std::sqrt(acc);
      ++pairs;
    }
  return total / static_cast<double>(pairs);
}

namespace {

// Runs job(i) for i in [0, n) on up to `workers` threads. Results must be
// written to per-index slots; the first exception (by index) is rethrown.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& job) {
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t i) {
    try {
      job(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t threads = std::min(workers, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) run(i);
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

model::TrainOptions train_options(const RunConfig& c, std::uint64_t seed) {
  model::TrainOptions o;
  o.epochs = c.local_epochs;
  o.batch_size = c.batch_size;
  o.lr = c.lr;
  o.lambda = c.lambda;
  o.mask_ratio = c.mask_ratio;
  o.tau = c.tau;
  o.seed = seed;
  o.dbe = c.ablations.dbe;
  o.bias_alignment = c.ablations.bias_alignment;
  o.loss_on_all_tokens = c.loss_on_all_tokens;
  return o;
}

std::vector<double> shard_sizes(const Simulation& sim, const std::vector<int>& ids) {
  std::vector<double> out;
  for (int id : ids) out.push_back(static_cast<double>(sim.shards[static_cast<std::size_t>(id)].size()));
  return out;
}

std::vector<std::vector<double>> all_biases(const Simulation& sim) {
  std::vector<std::vector<double>> out;
  for (const auto& c : sim.clients) out.push_back(c.bias.b_hat);
  return out;
}

std::vector<double> flatten_biases(const std::vector<std::vector<double>>& b) {
  std::vector<double> out;
  for (const auto& v : b) out.insert(out.end(), v.begin(), v.end());
  return out;
}

}  // namespace

Simulation initialize(const RunConfig& config) { return initialize(config, make_training_shards(config)); }

Simulation initialize(const RunConfig& config, std::vector<data::SeriesShard> shards) {
  config.validate();
  if (shards.size() != config.data.n_clients)
    throw ConfigError("initialize: " + std::to_string(shards.size()) + " shards for " +
                      std::to_string(config.data.n_clients) + " clients");
  Simulation sim;
  sim.config = config;
  sim.shards = std::move(shards);
  const ParamSet theta0 = model::init_weights(config.model, derive_seed({config.seed, tag(Stream::kInit)}));
  sim.state = server::ServerState::create(theta0.clone(), config.model.d_model, config.beta, config.alpha);
  for (std::size_t i = 0; i < config.data.n_clients; ++i)
    sim.clients.push_back(model::make_client(static_cast<int>(i), config.model, theta0, config.mu));

  // Warm-up epoch: only populates the bias EMAs unless warmup_lr > 0.
  RunConfig warm = config;
  warm.local_epochs = 1;
  warm.lr = config.warmup_lr;
  warm.ablations.bias_alignment = false;
  parallel_for(sim.clients.size(), config.workers, [&](std::size_t i) {
    model::local_train(sim.clients[i], sim.shards[i], train_options(warm, derive_seed({config.seed, 0, i})));
  });

  std::vector<int> everyone(sim.clients.size());
  for (std::size_t i = 0; i < everyone.size(); ++i) everyone[i] = static_cast<int>(i);
  sim.warmup_biases = all_biases(sim);
  server::update_global_bias(sim.state, sim.warmup_biases, shard_sizes(sim, everyone), server::BiasPhase::kInit);
  for (auto& c : sim.clients) {
    c.bias = model::BiasState::zeros(config.model.d_model, config.mu);
    c.bias.b_global = sim.state.b_global;
    c.weights = theta0.clone();
  }
  return sim;
}

RoundReport run_round(Simulation& sim) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig& cfg = sim.config;
  auto& st = sim.state;
  RoundReport rep;
  rep.round = ++st.round;
  rep.participants = sample_clients(sim.clients.size(), cfg.join_ratio, rep.round, cfg.seed);
  const ParamSet theta_prev = st.theta_g.clone();

  const std::size_t n = rep.participants.size();
  std::vector<ClientRoundLog> logs(n);
  std::vector<coreset::CoreSet> coresets(cfg.ablations.gbe_coreset ? n : 0);
  parallel_for(n, cfg.workers, [&](std::size_t j) {
    const auto id = static_cast<std::size_t>(rep.participants[j]);
    auto& client = sim.clients[id];
    const auto& shard = sim.shards[id];
    client.weights = theta_prev.clone();
    client.bias.b_global = st.b_global;
    const std::uint64_t seed = derive_seed({cfg.seed, rep.round, id});
    const auto stats = model::local_train(client, shard, train_options(cfg, seed));
    logs[j].client_id = client.client_id;
    logs[j].epoch_loss = stats.epoch_loss;
    logs[j].bias_distance = stats.bias_distance;
    if (!cfg.ablations.gbe_coreset) return;

    coreset::BuildOptions bo;
    bo.k = cfg.coreset_size;
    bo.eta = cfg.coreset_eta;
    bo.steps = cfg.coreset_steps;
    bo.mask_ratio = cfg.mask_ratio;
    bo.seed = derive_seed({seed, tag(Stream::kCoreset)});
    auto initial = coreset::build_coreset(client, shard, bo);
    auto perturbed = coreset::perturb_fourier(initial, cfg.epsilon, derive_seed({seed, tag(Stream::kFourier)}));
    const auto minibatch = coreset::gather(shard, initial.reference_indices);
    coresets[j] = coreset::refine_alignment(perturbed, minibatch, client.weights, client.config, cfg.align_eta,
                                            cfg.align_steps);
    logs[j].coreset_match_loss = coresets[j].match_loss_final;
    logs[j].coreset_align_loss = coresets[j].align_loss_final;
  });

  // Server phase.
  std::vector<ParamSet> params;
  std::vector<std::vector<double>> biases;
  for (int id : rep.participants) {
    params.push_back(sim.clients[static_cast<std::size_t>(id)].weights);
    biases.push_back(sim.clients[static_cast<std::size_t>(id)].bias.b_hat);
  }
  const ParamSet theta_prime = server::weighted_average(params, shard_sizes(sim, rep.participants));
  rep.drift_pre = l2_norm(subtract(theta_prime, theta_prev));

  ParamSet corrected = theta_prime;
  if (cfg.ablations.gbe_correction) {
    // The plain sum feeds back N times the mean drift every round and diverges at
    // desk scale; the mean over all N clients keeps the correction bounded.
    const double w = cfg.mean_state_drift ? 1.0 / static_cast<double>(cfg.data.n_clients) : 1.0;
    server::update_state(st, params, theta_prev, w);
    corrected = server::correct_global(theta_prime, st);
  }
  rep.drift_post = l2_norm(subtract(corrected, theta_prev));
  rep.state_norm = l2_norm(st.s);

  if (cfg.ablations.gbe_coreset) {
    server::FinetuneOptions fo;
    fo.epochs = cfg.server_epochs;
    fo.batch_size = cfg.batch_size;
    fo.lr = cfg.server_lr;
    fo.mask_ratio = cfg.mask_ratio;
    fo.seed = derive_seed({cfg.seed, tag(Stream::kServerTune), rep.round});
    fo.loss_on_all_tokens = cfg.loss_on_all_tokens;
    const auto tuned = server::coreset_finetune(corrected, cfg.model, coresets, fo);
    rep.pooled_coreset_loss = tuned.final_loss;
    st.theta_g = server::fuse(corrected, tuned.theta, st.alpha);
  } else {
    st.theta_g = corrected;
  }
  if (!cfg.freeze_global_bias) server::update_global_bias(st, biases, {}, server::BiasPhase::kRound);
  sim.last_coresets = std::move(coresets);

  double loss_sum = 0.0;
  double dist_sum = 0.0;
  for (const auto& l : logs) {
    loss_sum += l.epoch_loss.empty() ? 0.0 : l.epoch_loss.back();
    dist_sum += l.bias_distance.empty() ? 0.0 : l.bias_distance.back();
  }
  rep.mean_train_loss = loss_sum / static_cast<double>(n);
  rep.mean_bias_distance = dist_sum / static_cast<double>(n);
  rep.mean_pairwise_bias_distance = mean_pairwise_distance(all_biases(sim));
  rep.clients = std::move(logs);
  rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

namespace {

class Artifacts {
 public:
  explicit Artifacts(const fs::path& dir) : dir_(dir) {
    fs::create_directories(dir_ / "checkpoints");
    open(rounds_, "rounds.csv");
    open(clients_, "client_train.csv");
    open(bias_, "bias_trajectory.csv");
    open(timing_, "timing.csv");
    rounds_ << "round,participants,mean_train_loss,drift_pre,drift_post,pooled_coreset_loss,state_norm,"
               "mean_bias_distance,mean_pairwise_bias_distance\n";
    clients_ << "round,client,epoch,loss,bias_distance,coreset_match_loss,coreset_align_loss\n";
    bias_ << "round,client,dim,value\n";
    timing_ << "round,wall_ms\n";
  }

  void config(const RunConfig& c) { write_text(dir_ / "config.snapshot", to_config_text(c)); }

  void round(const RoundReport& r, const Simulation& sim) {
    std::string ids;
    for (int id : r.participants) ids += (ids.empty() ? "" : ";") + std::to_string(id);
    rounds_ << r.round << ',' << ids << ',' << r.mean_train_loss << ',' << r.drift_pre << ',' << r.drift_post << ','
            << r.pooled_coreset_loss << ',' << r.state_norm << ',' << r.mean_bias_distance << ','
            << r.mean_pairwise_bias_distance << '\n';
    for (const auto& c : r.clients)
      for (std::size_t e = 0; e < c.epoch_loss.size(); ++e)
        clients_ << r.round << ',' << c.client_id << ',' << e << ',' << c.epoch_loss[e] << ',' << c.bias_distance[e]
                 << ',' << c.coreset_match_loss << ',' << c.coreset_align_loss << '\n';
    timing_ << r.round << ',' << r.wall_ms << '\n';
    for (std::size_t j = 0; j < sim.last_coresets.size(); ++j)
      coreset::write_coreset_csv(sim.last_coresets[j], dir_ / "coresets" / ("round_" + std::to_string(r.round)) /
                                                           ("client_" + std::to_string(r.participants[j]) + ".csv"));
    check();
  }

  void biases(std::size_t round, const std::vector<std::vector<double>>& b) {
    for (std::size_t c = 0; c < b.size(); ++c)
      for (std::size_t d = 0; d < b[c].size(); ++d) bias_ << round << ',' << c << ',' << d << ',' << b[c][d] << '\n';
    check();
  }

  void checkpoint(const std::string& name, const ParamSet& theta) {
    save_checkpoint(theta, dir_ / "checkpoints" / name);
  }

 private:
  void open(std::ofstream& f, const std::string& name) {
    f.open(dir_ / name);
    if (!f) throw std::runtime_error("cannot write " + (dir_ / name).string());
    f.precision(17);
  }
  void check() {
    if (!rounds_ || !clients_ || !bias_ || !timing_) throw std::runtime_error("write failed under " + dir_.string());
  }
  static void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p);
    f << text;
    if (!f) throw std::runtime_error("cannot write " + p.string());
  }

  fs::path dir_;
  std::ofstream rounds_, clients_, bias_, timing_;
};

}  // namespace

TrainingResult run_training(const RunConfig& config, const std::optional<fs::path>& out_dir) {
  Simulation sim = initialize(config);
  return run_training(sim, out_dir);
}

TrainingResult run_training(Simulation& sim, const std::optional<fs::path>& out_dir) {
  std::optional<Artifacts> art;
  if (out_dir) {
    art.emplace(*out_dir);
    art->config(sim.config);
    art->checkpoint("round_0.ckpt", sim.state.theta_g);
    art->biases(0, sim.warmup_biases);
  }
  TrainingResult res;
  res.bias_trajectory.push_back(flatten_biases(sim.warmup_biases));
  for (std::size_t r = 0; r < sim.config.rounds; ++r) {
    res.reports.push_back(run_round(sim));
    res.bias_trajectory.push_back(flatten_biases(all_biases(sim)));
    if (art) {
      art->round(res.reports.back(), sim);
      art->biases(res.reports.back().round, all_biases(sim));
      art->checkpoint("round_" + std::to_string(res.reports.back().round) + ".ckpt", sim.state.theta_g);
    }
  }
  if (art) art->checkpoint("final.ckpt", sim.state.theta_g);
  res.theta = sim.state.theta_g.clone();
  return res;
}

}  // namespace tsfed
