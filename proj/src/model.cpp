#include "tsfed/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "tsfed/errors.hpp"
#include "tsfed/rng.hpp"

namespace tsfed::model {

using ops::add;
using ops::matmul;

void BackboneConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || patch_len < 1 || n_tokens < 1 || ffn_mult < 1) {
    throw ConfigError("model: all sizes must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (dropout != 0.0) throw ConfigError("model: dropout must be 0 (training is deterministic)");
}

BiasState BiasState::zeros(std::size_t d_model, double mu) {
  if (!(mu >= 0.0 && mu <= 1.0)) throw ConfigError("bias: mu must lie in [0, 1]");
  BiasState b;
  b.b_trend = Tensor::zeros({d_model}, true);
  b.b_season = Tensor::zeros({d_model}, true);
  b.b_hat.assign(d_model, 0.0);
  b.b_global.assign(d_model, 0.0);
  b.mu = mu;
  return b;
}

void BiasState::resync() {
  const auto t = b_trend.values();
  const auto s = b_season.values();
  b_hat.resize(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) b_hat[i] = t[i] + s[i];
}

ParamSet BiasState::trainable() const {
  ParamSet p;
  p.insert("bias.season", b_season);
  p.insert("bias.trend", b_trend);
  return p;
}

double BiasState::distance_to_global() const {
  double acc = 0.0;
  for (std::size_t i = 0; i < b_hat.size(); ++i) acc += (b_hat[i] - b_global[i]) * (b_hat[i] - b_global[i]);
  return std::sqrt(acc);
}

ParamSet init_weights(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto rng = make_rng({seed, tag(Stream::kInit)});
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t d = cfg.d_model;
  const std::size_t p = cfg.patch_len;
  const std::size_t ff = cfg.ffn_mult * d;
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));

  ParamSet w;
  auto gauss = [&](const std::string& name, Shape shape, double stddev) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = stddev * normal(rng);
    w.insert(name, Tensor::leaf(std::move(shape), std::move(v)));
  };
  auto fill = [&](const std::string& name, Shape shape, double value) {
    w.insert(name, Tensor::leaf(shape, std::vector<double>(numel(shape), value)));
  };
  auto inv_sqrt = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

  gauss("backbone.embed.w", {p, d}, inv_sqrt(p));
  fill("backbone.embed.b", {d}, 0.0);
  gauss("backbone.mask_emb", {d}, 0.1);
  gauss("backbone.pos", {cfg.n_tokens, d}, 0.1);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "backbone.layer" + std::to_string(l) + ".";
    fill(pre + "ln1.g", {d}, 1.0);
    fill(pre + "ln1.b", {d}, 0.0);
    gauss(pre + "attn.wq", {d, d}, inv_sqrt(d));
    gauss(pre + "attn.wk", {d, d}, inv_sqrt(d));
    gauss(pre + "attn.wv", {d, d}, inv_sqrt(d));
    gauss(pre + "attn.wo", {d, d}, inv_sqrt(d) * residual_scale);
    fill(pre + "ln2.g", {d}, 1.0);
    fill(pre + "ln2.b", {d}, 0.0);
    gauss(pre + "ffn.w1", {d, ff}, inv_sqrt(d));
    fill(pre + "ffn.b1", {ff}, 0.0);
    gauss(pre + "ffn.w2", {ff, d}, inv_sqrt(ff) * residual_scale);
    fill(pre + "ffn.b2", {d}, 0.0);
  }
  fill("backbone.ln_f.g", {d}, 1.0);
  fill("backbone.ln_f.b", {d}, 0.0);
  gauss("head.w", {d, p}, inv_sqrt(d));
  return w;
}

ClientModel make_client(int client_id, const BackboneConfig& config, const ParamSet& global, double mu) {
  ClientModel m;
  m.client_id = client_id;
  m.config = config;
  m.weights = global.clone();
  m.bias = BiasState::zeros(config.d_model, mu);
  return m;
}

Tensor forward_backbone(const ParamSet& w, const BackboneConfig& cfg, const Tensor& tokens,
                        std::span<const std::uint8_t> mask) {
  if (tokens.rank() != 3 || tokens.dim(2) != cfg.patch_len || tokens.dim(1) > cfg.n_tokens) {
    throw DimensionError("forward_backbone: tokens " + shape_str(tokens.shape()) + " incompatible with patch_len " +
                         std::to_string(cfg.patch_len) + " and n_tokens " + std::to_string(cfg.n_tokens));
  }
  const std::size_t B = tokens.dim(0);
  const std::size_t T = tokens.dim(1);
  const std::size_t N = B * T;
  const std::size_t d = cfg.d_model;
  const std::size_t dh = cfg.head_dim();
  if (mask.size() != N) {
    throw DimensionError("forward_backbone: mask has " + std::to_string(mask.size()) + " flags for " +
                         std::to_string(N) + " tokens");
  }

  Tensor x = add(matmul(ops::reshape(tokens, {N, cfg.patch_len}), w.at("backbone.embed.w")), w.at("backbone.embed.b"));
  std::vector<double> mask_col(N);
  for (std::size_t i = 0; i < N; ++i) mask_col[i] = mask[i] ? 1.0 : 0.0;
  x = add(x, ops::mul(Tensor::constant({N, 1}, std::move(mask_col)), w.at("backbone.mask_emb")));
  std::vector<std::size_t> pos_idx(N);
  for (std::size_t i = 0; i < N; ++i) pos_idx[i] = i % T;
  x = add(x, ops::embedding_lookup(w.at("backbone.pos"), pos_idx));

  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "backbone.layer" + std::to_string(l) + ".";
    Tensor h = ops::layernorm(x, w.at(pre + "ln1.g"), w.at(pre + "ln1.b"));
    Tensor q = matmul(h, w.at(pre + "attn.wq"));
    Tensor k = matmul(h, w.at(pre + "attn.wk"));
    Tensor v = matmul(h, w.at(pre + "attn.wv"));
    std::vector<Tensor> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      auto split = [&](const Tensor& t) { return ops::reshape(ops::slice(t, 1, hd * dh, (hd + 1) * dh), {B, T, dh}); };
      Tensor scores = ops::scale(matmul(split(q), ops::transpose(split(k))), att_scale);
      Tensor att = ops::softmax(ops::causal_mask(scores));
      heads.push_back(ops::reshape(matmul(att, split(v)), {N, dh}));
    }
    x = add(x, matmul(ops::concat(heads, 1), w.at(pre + "attn.wo")));
    Tensor h2 = ops::layernorm(x, w.at(pre + "ln2.g"), w.at(pre + "ln2.b"));
    Tensor f = ops::gelu(add(matmul(h2, w.at(pre + "ffn.w1")), w.at(pre + "ffn.b1")));
    x = add(x, add(matmul(f, w.at(pre + "ffn.w2")), w.at(pre + "ffn.b2")));
  }
  x = ops::layernorm(x, w.at("backbone.ln_f.g"), w.at("backbone.ln_f.b"));
  return ops::reshape(x, {B, T, d});
}

Tensor forward_backbone(const ClientModel& model, const data::MaskedBatch& batch) {
  if (batch.patch_len != model.config.patch_len) {
    throw DimensionError("forward_backbone: batch patch width " + std::to_string(batch.patch_len) +
                         " differs from model patch_len " + std::to_string(model.config.patch_len));
  }
  return forward_backbone(model.weights, model.config, batch.tokens_tensor(), batch.mask);
}

Tensor apply_head(const ParamSet& w, const Tensor& latent) {
  const Tensor& hw = w.at("head.w");
  const std::size_t d = hw.dim(0);
  if (latent.rank() == 0 || latent.shape().back() != d) {
    throw DimensionError("apply_head: latent " + shape_str(latent.shape()) + " vs head " + shape_str(hw.shape()));
  }
  Shape out_shape = latent.shape();
  out_shape.back() = hw.dim(1);
  return ops::reshape(matmul(ops::reshape(latent, {latent.numel() / d, d}), hw), std::move(out_shape));
}

Decomposition decompose(const Tensor& latent, std::size_t tau) {
  const auto& s = latent.shape();
  if (s.size() < 2) throw DimensionError("decompose: latent needs token and feature axes, got " + shape_str(s));
  const std::size_t T = s[s.size() - 2];
  const std::size_t d = s.back();
  if (tau < 1 || tau > T) {
    throw ContractError("decompose: tau " + std::to_string(tau) + " outside [1, " + std::to_string(T) + "]");
  }
  const std::size_t B = latent.numel() / (T * d);
  const std::size_t front = (tau - 1) / 2;
  const auto x = latent.values();
  std::vector<double> trend(x.size());
  std::vector<double> season(x.size());
  const double inv_tau = 1.0 / static_cast<double>(tau);
  for (std::size_t b = 0; b < B; ++b) {
    const double* xb = x.data() + b * T * d;
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t w = 0; w < tau; ++w) {
          // Window [t - front, t - front + tau), indices clamped to the edges.
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + w) - static_cast<std::ptrdiff_t>(front);
          const std::size_t idx = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(src, 0, static_cast<std::ptrdiff_t>(T) - 1));
          acc += xb[idx * d + j];
        }
        const std::size_t i = b * T * d + t * d + j;
        double tr = acc * inv_tau;
        double se = x[i] - tr;
        if (tr + se != x[i]) {
          // Move the trend onto the latent's ulp grid. That makes the pair exact
          // whenever |trend| is within about twice |latent|; beyond that no pair of
          // doubles near (trend, season) sums to the latent and the plain split stays.
          const double u = std::nextafter(std::fabs(x[i]), INFINITY) - std::fabs(x[i]);
          const double snapped = x[i] + std::round((tr - x[i]) / u) * u;
          if (snapped + (x[i] - snapped) == x[i]) {
            tr = snapped;
            se = x[i] - snapped;
          }
        }
        trend[i] = tr;
        season[i] = se;
      }
    }
  }
  return {Tensor::constant(s, std::move(trend)), Tensor::constant(s, std::move(season))};
}

BiasEstimate extract_bias(const Decomposition& parts) {
  auto reduce = [](const Tensor& t) {
    const std::size_t d = t.shape().back();
    const std::size_t rows = t.numel() / d;
    std::vector<double> out(d, 0.0);
    const auto v = t.values();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) out[j] += v[r * d + j];
    for (auto& o : out) o /= static_cast<double>(rows);
    return out;
  };
  return {reduce(parts.trend), reduce(parts.season)};
}

void ema_update(BiasState& bias, std::span<const double> trend_new, std::span<const double> season_new) {
  if (!(bias.mu >= 0.0 && bias.mu <= 1.0)) throw ContractError("ema_update: mu must lie in [0, 1]");
  if (trend_new.size() != bias.b_trend.numel() || season_new.size() != bias.b_season.numel()) {
    throw DimensionError("ema_update: estimate width does not match bias width");
  }
  const double mu = bias.mu;
  auto blend = [mu](Tensor& state, std::span<const double> fresh) {
    auto v = state.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (1.0 - mu) * v[i] + mu * fresh[i];
  };
  blend(bias.b_trend, trend_new);
  blend(bias.b_season, season_new);
  bias.resync();
}

Tensor local_loss_from_latent(const ClientModel& model, const Tensor& latent, const data::MaskedBatch& batch,
                              const LossOptions& opt) {
  Tensor z = latent;
  Tensor b_hat;
  if (opt.inject_bias || opt.lambda > 0.0) b_hat = add(model.bias.b_trend, model.bias.b_season);
  if (opt.inject_bias) z = add(z, b_hat);
  Tensor pred = apply_head(model.weights, z);
  const auto weights = batch.mask_weights();
  Tensor loss = ops::mse(pred, batch.originals_tensor(),
                         opt.loss_on_all_tokens ? std::span<const double>{} : std::span<const double>(weights));
  if (opt.lambda > 0.0) {
    const auto& g = model.bias.b_global;
    Tensor diff = ops::sub(b_hat, Tensor::constant({g.size()}, g));
    loss = add(loss, ops::scale(ops::sum_squares(diff), opt.lambda));
  }
  return loss;
}

Tensor local_loss(const ClientModel& model, const data::MaskedBatch& batch, const LossOptions& opt) {
  return local_loss_from_latent(model, forward_backbone(model, batch), batch, opt);
}

Tensor reconstruction_loss(const ParamSet& weights, const BackboneConfig& config, const data::MaskedBatch& batch,
                           bool loss_on_all_tokens) {
  Tensor latent = forward_backbone(weights, config, batch.tokens_tensor(), batch.mask);
  Tensor pred = apply_head(weights, latent);
  const auto w = batch.mask_weights();
  return ops::mse(pred, batch.originals_tensor(),
                  loss_on_all_tokens ? std::span<const double>{} : std::span<const double>(w));
}

TrainStats local_train(ClientModel& model, const data::SeriesShard& shard, const TrainOptions& opt) {
  TrainStats stats;
  if (opt.epochs == 0 || shard.size() == 0) {
    stats.b_hat = model.bias.b_hat;
    return stats;
  }
  if (opt.batch_size == 0) throw ConfigError("local_train: batch_size must be >= 1");

  const LossOptions loss_opt{opt.dbe && opt.bias_alignment ? opt.lambda : 0.0, opt.dbe, opt.loss_on_all_tokens};
  ParamSet trainable = model.weights;  // shares tensors with the model
  if (opt.dbe) {
    for (const auto& [path, t] : model.bias.trainable()) trainable.insert(path, t);
  }

  std::vector<std::size_t> order(shard.size());
  std::vector<std::vector<double>> batch_seqs;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = make_rng({opt.seed, tag(Stream::kLocalTrain), epoch});
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      batch_seqs.clear();
      for (std::size_t i = start; i < end; ++i) batch_seqs.push_back(shard.sequences[order[i]]);
      const auto batch = data::mask_tokens(batch_seqs, model.config.patch_len, opt.mask_ratio,
                                           derive_seed({opt.seed, epoch, n_batches}));

      Tensor latent = forward_backbone(model, batch);
      const auto est = extract_bias(decompose(latent, opt.tau));
      ema_update(model.bias, est.trend, est.season);

      Tensor loss = local_loss_from_latent(model, latent, batch, loss_opt);
      loss_sum += loss.item();
      ++n_batches;
      if (!loss.requires_grad()) continue;  // no masked positions and no regularizer
      trainable.zero_grad();
      backward(loss);
      // With zero masked rows only the regularizer is live; untouched parameters take a zero step.
      for (auto& [path, t] : trainable)
        if (!t.has_grad()) t.node()->grad_buffer();
      sgd_step(trainable, opt.lr);
      model.bias.resync();
    }
    stats.epoch_loss.push_back(loss_sum / static_cast<double>(n_batches));
    stats.bias_distance.push_back(model.bias.distance_to_global());
  }
  stats.b_hat = model.bias.b_hat;
  return stats;
}

}  // namespace tsfed::model
