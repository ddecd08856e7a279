#include "tsfed/evaluation.hpp"

#include <cmath>
#include <fstream>
#include <iostream>

#include "tsfed/errors.hpp"
#include "tsfed/orchestrator.hpp"
#include "tsfed/rng.hpp"

namespace tsfed::eval {

EvalReport reconstruct_eval(const ParamSet& theta, const model::BackboneConfig& cfg,
                            std::span<const data::SeriesShard> dataset, double mask_ratio, std::uint64_t seed,
                            const EvalOptions& opt) {
  std::size_t total = 0;
  for (const auto& s : dataset) total += s.size();
  if (total == 0) throw ContractError("reconstruct_eval: empty dataset");
  if (opt.batch_size == 0) throw ConfigError("reconstruct_eval: batch_size must be >= 1");
  if (!opt.inject_bias.empty() && opt.inject_bias.size() != cfg.d_model)
    throw DimensionError("reconstruct_eval: injected bias width differs from d_model");

  ParamSet frozen;
  for (const auto& [path, t] : theta) frozen.insert(path, t.detach(false));
  const Tensor bias = opt.inject_bias.empty() ? Tensor() : Tensor::constant({cfg.d_model}, opt.inject_bias);

  double sq = 0.0;
  double ab = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < dataset.size(); ++k) {
    const auto& seqs = dataset[k].sequences;
    // One mask stream per shard; sequence i of the shard always gets the same mask.
    const auto mask = data::draw_mask(seqs.size(), cfg.n_tokens, mask_ratio,
                                      derive_seed({seed, tag(Stream::kEval), k}));
    for (std::size_t start = 0; start < seqs.size(); start += opt.batch_size) {
      const std::size_t end = std::min(seqs.size(), start + opt.batch_size);
      data::MaskedBatch b;
      b.batch = end - start;
      b.n_tokens = cfg.n_tokens;
      b.patch_len = cfg.patch_len;
      for (std::size_t i = start; i < end; ++i) {
        const auto tok = data::patchify(seqs[i], cfg.patch_len);
        if (tok.n_tokens != cfg.n_tokens) throw DimensionError("reconstruct_eval: sequence length mismatch");
        for (std::size_t t = 0; t < cfg.n_tokens; ++t) {
          const bool m = mask[i * cfg.n_tokens + t] != 0;
          b.mask.push_back(m ? 1 : 0);
          for (std::size_t p = 0; p < cfg.patch_len; ++p) {
            const double v = tok.data[t * cfg.patch_len + p];
            b.originals.push_back(v);
            b.tokens.push_back(m ? 0.0 : v);
          }
        }
      }
      if (b.masked_count() == 0) continue;
      Tensor latent = model::forward_backbone(frozen, cfg, b.tokens_tensor(), b.mask);
      if (bias.defined()) latent = ops::add(latent, bias);
      const Tensor pred = model::apply_head(frozen, latent);
      const auto pv = pred.values();
      for (std::size_t row = 0; row < b.rows(); ++row) {
        if (!b.mask[row]) continue;
        for (std::size_t p = 0; p < cfg.patch_len; ++p) {
          const double e = pv[row * cfg.patch_len + p] - b.originals[row * cfg.patch_len + p];
          sq += e * e;
          ab += std::abs(e);
          ++count;
        }
      }
    }
  }

  EvalReport r;
  r.model_id = opt.model_id;
  r.dataset_id = opt.dataset_id;
  r.mask_ratio = mask_ratio;
  r.n_sequences = total;
  r.n_masked_values = count;
  r.seed = seed;
  if (count == 0) {
    std::cerr << "warning: reconstruct_eval: no masked positions at ratio " << mask_ratio << "; reporting 0\n";
    r.no_masked_positions = true;
    return r;
  }
  r.mse = sq / static_cast<double>(count);
  r.mae = ab / static_cast<double>(count);
  return r;
}

std::vector<EvalReport> mask_sweep(const ParamSet& theta, const model::BackboneConfig& cfg,
                                   std::span<const data::SeriesShard> dataset, std::span<const double> ratios,
                                   std::uint64_t seed, const EvalOptions& opt) {
  std::vector<EvalReport> out;
  for (double r : ratios) out.push_back(reconstruct_eval(theta, cfg, dataset, r, seed, opt));
  return out;
}

SweepAxis sweep_axis_from_string(const std::string& s) {
  if (s == "data") return SweepAxis::kData;
  if (s == "clients") return SweepAxis::kClients;
  if (s == "join_rate") return SweepAxis::kJoinRate;
  throw ConfigError("sweep: unknown axis '" + s + "' (data, clients, join_rate)");
}

std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::kData: return "data";
    case SweepAxis::kClients: return "clients";
    case SweepAxis::kJoinRate: return "join_rate";
  }
  return "?";
}

RunConfig apply_axis(const RunConfig& base, SweepAxis axis, double value) {
  RunConfig c = base;
  auto as_count = [&](const char* what) {
    if (!(value >= 1.0) || value != std::floor(value))
      throw ConfigError(std::string("sweep: ") + what + " grid values must be positive integers");
    return static_cast<std::size_t>(value);
  };
  switch (axis) {
    case SweepAxis::kData: c.data.seqs_per_client = as_count("data"); break;
    case SweepAxis::kClients: c.data.n_clients = as_count("clients"); break;
    case SweepAxis::kJoinRate: c.join_ratio = value; break;
  }
  c.validate();
  return c;
}

std::vector<SweepRow> scaling_sweep(SweepAxis axis, std::span<const double> grid, const RunConfig& base) {
  const auto holdout = make_holdout(base);
  std::vector<SweepRow> rows;
  for (double v : grid) {
    const RunConfig c = apply_axis(base, axis, v);
    const auto res = run_training(c);
    const auto rep = reconstruct_eval(res.theta, c.model, holdout, 0.75, c.seed);
    rows.push_back({axis, v, rep.mse});
  }
  return rows;
}

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.precision(17);
  return f;
}

}  // namespace

void write_reports_csv(std::span<const EvalReport> reports, const std::filesystem::path& path) {
  auto f = open_csv(path);
  f << "model_id,dataset_id,mask_ratio,mse,mae,n_sequences,n_masked_values,seed,no_masked_positions\n";
  for (const auto& r : reports)
    f << r.model_id << ',' << r.dataset_id << ',' << r.mask_ratio << ',' << r.mse << ',' << r.mae << ','
      << r.n_sequences << ',' << r.n_masked_values << ',' << r.seed << ',' << (r.no_masked_positions ? 1 : 0) << '\n';
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

void write_sweep_csv(std::span<const SweepRow> rows, const std::filesystem::path& path) {
  auto f = open_csv(path);
  f << "axis,value,mse_75\n";
  for (const auto& r : rows) f << to_string(r.axis) << ',' << r.value << ',' << r.mse_75 << '\n';
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace tsfed::eval
