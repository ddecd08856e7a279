#include "tsfed/coreset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "tsfed/errors.hpp"
#include "tsfed/fourier.hpp"
#include "tsfed/rng.hpp"

namespace tsfed::coreset {

const char* to_string(Stage s) {
  switch (s) {
    case Stage::kInitial: return "initial";
    case Stage::kPerturbed: return "perturbed";
    case Stage::kAligned: return "aligned";
  }
  return "?";
}

Tensor head_gradient(const Tensor& latent, const Tensor& head_w, const Tensor& targets,
                     std::span<const double> row_weights) {
  if (latent.rank() != 2 || targets.rank() != 2 || latent.dim(0) != targets.dim(0) ||
      head_w.shape() != Shape{latent.dim(1), targets.dim(1)}) {
    throw DimensionError("head_gradient: latent " + shape_str(latent.shape()) + ", head " + shape_str(head_w.shape()) +
                         ", targets " + shape_str(targets.shape()));
  }
  const std::size_t rows = latent.dim(0);
  const std::size_t p = targets.dim(1);
  std::vector<double> w(rows, 1.0);
  if (!row_weights.empty()) {
    if (row_weights.size() != rows) throw DimensionError("head_gradient: row weight count mismatch");
    std::copy(row_weights.begin(), row_weights.end(), w.begin());
  }
  const auto selected = static_cast<std::size_t>(std::count_if(w.begin(), w.end(), [](double x) { return x != 0.0; }));
  if (selected == 0) return Tensor::zeros(head_w.shape());
  Tensor residual = ops::mul(ops::sub(ops::matmul(latent, head_w), targets), Tensor::constant({rows, 1}, std::move(w)));
  return ops::scale(ops::matmul(ops::transpose(latent), residual), 2.0 / static_cast<double>(selected * p));
}

ParamSet freeze(const ParamSet& weights) {
  ParamSet out;
  for (const auto& [path, t] : weights) out.insert(path, t.detach(false));
  return out;
}

namespace {

Tensor stack(std::span<const std::vector<double>> seqs) {
  if (seqs.empty()) throw ContractError("core-set: empty sequence list");
  const std::size_t len = seqs[0].size();
  std::vector<double> flat;
  flat.reserve(seqs.size() * len);
  for (const auto& s : seqs) {
    if (s.size() != len) throw DimensionError("core-set: sequences differ in length");
    flat.insert(flat.end(), s.begin(), s.end());
  }
  return Tensor::constant({seqs.size(), len}, std::move(flat));
}

std::vector<std::vector<double>> unstack(const Tensor& t) {
  const std::size_t n = t.dim(0);
  const std::size_t len = t.dim(1);
  std::vector<std::vector<double>> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i].assign(t.values().begin() + static_cast<std::ptrdiff_t>(i * len),
                  t.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * len));
  return out;
}

struct Masked {
  Tensor latent;   // [n*T, d]
  Tensor targets;  // [n*T, P]
  std::vector<double> weights;
};

// Forward pass of [n, length] sequences with the given mask pattern.
Masked masked_forward(const Tensor& seqs, const ParamSet& weights, const model::BackboneConfig& cfg,
                      const std::vector<std::uint8_t>& mask) {
  const std::size_t n = seqs.dim(0);
  const std::size_t p = cfg.patch_len;
  if (seqs.dim(1) % p != 0) throw ConfigError("core-set: length not divisible by patch_len");
  const std::size_t t = seqs.dim(1) / p;
  Tensor tokens = ops::reshape(seqs, {n, t, p});
  std::vector<double> keep(n * t);
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = mask[i] ? 0.0 : 1.0;
  Tensor input = ops::mul(tokens, Tensor::constant({n, t, 1}, std::move(keep)));
  Tensor latent = model::forward_backbone(weights, cfg, input, mask);
  Masked out;
  out.latent = ops::reshape(latent, {n * t, cfg.d_model});
  out.targets = ops::reshape(seqs, {n * t, p});
  out.weights.resize(n * t);
  for (std::size_t i = 0; i < mask.size(); ++i) out.weights[i] = mask[i] ? 1.0 : 0.0;
  return out;
}

std::vector<std::size_t> sample_rows(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[std::uniform_int_distribution<std::size_t>(i, n - 1)(rng)]);
  idx.resize(k);
  return idx;
}

void descend(Tensor& leaf, double eta) {
  auto v = leaf.mutable_values();
  const auto g = leaf.grad();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= eta * g[i];
  leaf.zero_grad();
}

// Per-sample head gradients of the mini-batch; constant during descent.
std::vector<Tensor> sample_gradients(std::span<const std::vector<double>> minibatch, const ParamSet& weights,
                                     const model::BackboneConfig& cfg, double mask_ratio, std::uint64_t mask_seed) {
  if (minibatch.empty()) throw ContractError("match_loss: empty mini-batch");
  const std::size_t t = minibatch[0].size() / cfg.patch_len;
  const std::size_t d = cfg.d_model;
  const std::size_t p = cfg.patch_len;
  const ParamSet frozen = freeze(weights);
  const auto x_mask = data::draw_mask(minibatch.size(), t, mask_ratio, mask_seed);
  const auto x = masked_forward(stack(minibatch), frozen, cfg, x_mask);
  std::vector<Tensor> out;
  for (std::size_t s = 0; s < minibatch.size(); ++s) {
    const auto rows = [&](const Tensor& m, std::size_t width) {
      const auto first = m.values().begin() + static_cast<std::ptrdiff_t>(s * t * width);
      return Tensor::constant({t, width}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(t * width)));
    };
    const std::span<const double> w(x.weights.data() + s * t, t);
    const Tensor g = head_gradient(rows(x.latent, d), frozen.at("head.w"), rows(x.targets, p), w);
    out.push_back(Tensor::constant(g.shape(), {g.values().begin(), g.values().end()}));
  }
  return out;
}

Tensor match_loss_against(const Tensor& coreset, const std::vector<Tensor>& targets, const ParamSet& weights,
                          const model::BackboneConfig& cfg, double mask_ratio, std::uint64_t mask_seed) {
  if (coreset.rank() != 2 || coreset.dim(0) == 0) throw ContractError("match_loss: core-set must be non-empty [K, length]");
  const std::size_t k = coreset.dim(0);
  const std::size_t t = coreset.dim(1) / cfg.patch_len;
  const auto c_mask = data::draw_mask(k, t, mask_ratio, mask_seed);
  const auto c = masked_forward(coreset, weights, cfg, c_mask);
  const Tensor g_c = head_gradient(c.latent, weights.at("head.w"), c.targets, c.weights);
  Tensor total;
  for (const auto& g_k : targets) {
    Tensor term = ops::sum_squares(ops::sub(g_c, g_k));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

}  // namespace

Tensor match_loss(const Tensor& coreset, std::span<const std::vector<double>> minibatch, const ParamSet& weights,
                  const model::BackboneConfig& cfg, double mask_ratio, std::uint64_t mask_seed) {
  if (coreset.rank() != 2 || coreset.dim(0) == 0) throw ContractError("match_loss: core-set must be non-empty [K, length]");
  const auto targets = sample_gradients(minibatch, weights, cfg, mask_ratio, mask_seed);
  return match_loss_against(coreset, targets, weights, cfg, mask_ratio, mask_seed);
}

Tensor pooled_embedding(const Tensor& sequences, const ParamSet& weights, const model::BackboneConfig& cfg) {
  const std::size_t n = sequences.dim(0);
  const std::size_t p = cfg.patch_len;
  if (sequences.dim(1) % p != 0) throw ConfigError("pooled_embedding: length not divisible by patch_len");
  const std::size_t t = sequences.dim(1) / p;
  const std::vector<std::uint8_t> none(n * t, 0);
  Tensor latent = model::forward_backbone(weights, cfg, ops::reshape(sequences, {n, t, p}), none);
  return ops::mean(latent, 1);
}

Tensor align_loss_from_embeddings(const Tensor& coreset_emb, const Tensor& minibatch_emb) {
  if (coreset_emb.rank() != 2 || minibatch_emb.rank() != 2 || coreset_emb.dim(1) != minibatch_emb.dim(1)) {
    throw DimensionError("align_loss: embeddings " + shape_str(coreset_emb.shape()) + " vs " +
                         shape_str(minibatch_emb.shape()));
  }
  if (coreset_emb.dim(0) != minibatch_emb.dim(0)) {
    throw ContractError("align_loss: core-set has " + std::to_string(coreset_emb.dim(0)) + " sequences, mini-batch " +
                        std::to_string(minibatch_emb.dim(0)) + "; both sums need K elements");
  }
  if (coreset_emb.dim(0) == 0) throw ContractError("align_loss: empty core-set");
  const double k = static_cast<double>(coreset_emb.dim(0));
  // Sum over rows = K * mean over rows.
  Tensor diff = ops::sub(ops::scale(ops::mean(coreset_emb, 0), k), ops::scale(ops::mean(minibatch_emb, 0), k));
  return ops::scale(ops::sum_squares(diff), 1.0 / k);
}

Tensor align_loss(const Tensor& perturbed, std::span<const std::vector<double>> minibatch, const ParamSet& weights,
                  const model::BackboneConfig& cfg) {
  if (perturbed.rank() != 2) throw DimensionError("align_loss: core-set must be [K, length]");
  if (perturbed.dim(0) != minibatch.size()) {
    throw ContractError("align_loss: core-set has " + std::to_string(perturbed.dim(0)) + " sequences, mini-batch " +
                        std::to_string(minibatch.size()) + "; both sums need K elements");
  }
  const Tensor x_emb = pooled_embedding(stack(minibatch), freeze(weights), cfg);
  return align_loss_from_embeddings(pooled_embedding(perturbed, weights, cfg), x_emb);
}

std::vector<std::vector<double>> gather(const data::SeriesShard& shard, std::span<const std::size_t> rows) {
  std::vector<std::vector<double>> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(shard.sequences.at(r));
  return out;
}

CoreSet build_coreset(const model::ClientModel& client, const data::SeriesShard& shard, const BuildOptions& opt) {
  if (opt.k == 0) throw ContractError("build_coreset: K must be >= 1");
  if (shard.size() < opt.k) {
    throw ConfigError("build_coreset: shard of client " + std::to_string(shard.client_id) + " has " +
                      std::to_string(shard.size()) + " sequences, fewer than K = " + std::to_string(opt.k));
  }
  auto rng = make_rng({opt.seed, tag(Stream::kCoreset)});
  const auto init_rows = sample_rows(shard.size(), opt.k, rng);
  CoreSet cs;
  cs.source_client = client.client_id;
  cs.reference_indices = sample_rows(shard.size(), opt.k, rng);
  cs.length = shard.sequences.front().size();

  const ParamSet frozen = freeze(client.weights);
  const auto minibatch = gather(shard, cs.reference_indices);
  Tensor c = stack(gather(shard, init_rows)).detach(true);
  const std::uint64_t mask_seed = derive_seed({opt.seed, tag(Stream::kCoreset), 1});
  const auto targets = sample_gradients(minibatch, frozen, client.config, opt.mask_ratio, mask_seed);
  for (std::size_t step = 0; step < opt.steps; ++step) {
    Tensor loss = match_loss_against(c, targets, frozen, client.config, opt.mask_ratio, mask_seed);
    cs.match_trace.push_back(loss.item());
    if (!loss.requires_grad()) break;
    backward(loss);
    descend(c, opt.eta);
  }
  cs.match_loss_final = match_loss_against(c, targets, frozen, client.config, opt.mask_ratio, mask_seed).item();
  cs.match_trace.push_back(cs.match_loss_final);
  cs.sequences = unstack(c);
  return cs;
}

std::vector<double> perturb_amplitude(std::span<const double> sequence, std::span<const double> amplitude_noise) {
  auto bins = fourier::rfft(sequence);
  if (amplitude_noise.size() != bins.size()) {
    throw DimensionError("perturb_amplitude: " + std::to_string(amplitude_noise.size()) + " noise values for " +
                         std::to_string(bins.size()) + " frequency bins");
  }
  for (std::size_t k = 0; k < bins.size(); ++k) {
    const double amp = std::abs(bins[k]);
    const double phase = std::arg(bins[k]);
    bins[k] = std::polar(std::max(amp + amplitude_noise[k], 0.0), phase);
  }
  return fourier::irfft(bins, sequence.size());
}

CoreSet perturb_fourier(const CoreSet& coreset, double epsilon, std::uint64_t seed) {
  if (coreset.stage != Stage::kInitial) {
    throw ContractError(std::string("perturb_fourier: core-set is in stage ") + to_string(coreset.stage) +
                        ", expected initial");
  }
  if (epsilon < 0.0) throw ConfigError("perturb_fourier: epsilon must be >= 0");
  CoreSet out = coreset;
  out.stage = Stage::kPerturbed;
  out.epsilon_used = epsilon;
  for (std::size_t i = 0; i < out.sequences.size(); ++i) {
    auto rng = make_rng({seed, tag(Stream::kFourier), i});
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> noise(out.sequences[i].size() / 2 + 1);
    for (auto& v : noise) v = epsilon * normal(rng);
    out.sequences[i] = perturb_amplitude(out.sequences[i], noise);
  }
  return out;
}

CoreSet refine_alignment(const CoreSet& coreset, std::span<const std::vector<double>> minibatch,
                         const ParamSet& weights, const model::BackboneConfig& cfg, double eta, std::size_t steps) {
  if (coreset.stage != Stage::kPerturbed) {
    throw ContractError(std::string("refine_alignment: core-set is in stage ") + to_string(coreset.stage) +
                        ", expected perturbed");
  }
  CoreSet out = coreset;
  out.stage = Stage::kAligned;
  const ParamSet frozen = freeze(weights);
  Tensor c = stack(coreset.sequences).detach(true);
  if (c.dim(0) != minibatch.size()) {
    throw ContractError("refine_alignment: core-set has " + std::to_string(c.dim(0)) + " sequences, mini-batch " +
                        std::to_string(minibatch.size()));
  }
  const Tensor x_emb = pooled_embedding(stack(minibatch), frozen, cfg);
  for (std::size_t step = 0; step < steps; ++step) {
    Tensor loss = align_loss_from_embeddings(pooled_embedding(c, frozen, cfg), x_emb);
    out.align_trace.push_back(loss.item());
    if (!loss.requires_grad()) break;
    backward(loss);
    descend(c, eta);
  }
  out.align_loss_final = align_loss_from_embeddings(pooled_embedding(c, frozen, cfg), x_emb).item();
  out.align_trace.push_back(out.align_loss_final);
  out.sequences = unstack(c);
  return out;
}

double mean_nearest_distance(const CoreSet& coreset, const data::SeriesShard& shard) {
  if (coreset.sequences.empty() || shard.size() == 0) throw ContractError("mean_nearest_distance: empty input");
  double total = 0.0;
  for (const auto& c : coreset.sequences) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& s : shard.sequences) {
      double acc = 0.0;
      for (std::size_t i = 0; i < c.size(); ++i) acc += (c[i] - s[i]) * (c[i] - s[i]);
      best = std::min(best, acc);
    }
    total += std::sqrt(best);
  }
  return total / static_cast<double>(coreset.sequences.size());
}

void write_coreset_csv(const CoreSet& coreset, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.precision(17);
  f << "client_id,seq_index,step,value\n";
  for (std::size_t i = 0; i < coreset.sequences.size(); ++i)
    for (std::size_t t = 0; t < coreset.sequences[i].size(); ++t)
      f << coreset.source_client << ',' << i << ',' << t << ',' << coreset.sequences[i][t] << '\n';
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace tsfed::coreset
