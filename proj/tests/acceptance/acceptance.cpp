// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset. Exits non-zero when any selected criterion fails.

#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "coreset_oracle.hpp"
#include "fedavg_oracle.hpp"
#include "grad_check.hpp"
#include "tsfed/config.hpp"
#include "tsfed/coreset.hpp"
#include "tsfed/evaluation.hpp"
#include "tsfed/fourier.hpp"
#include "tsfed/model.hpp"
#include "tsfed/orchestrator.hpp"
#include "tsfed/server.hpp"

#ifndef TSFED_CONFIG_DIR
#define TSFED_CONFIG_DIR "configs"
#endif

using namespace tsfed;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

RunConfig default_config() { return load_config(fs::path(TSFED_CONFIG_DIR) / "default.ini"); }

fs::path work_dir() {
  const auto p = fs::temp_directory_path() / "tsfed_acceptance";
  fs::create_directories(p);
  return p;
}

double mse_at(const TrainingResult& r, const RunConfig& c, double ratio) {
  return eval::reconstruct_eval(r.theta, c.model, make_holdout(c), ratio, c.seed).mse;
}

// Training runs shared between criteria 8 to 12, keyed by a label and seed.
std::map<std::pair<std::string, std::uint64_t>, TrainingResult> g_runs;

const TrainingResult& cached_run(const std::string& label, const RunConfig& c) {
  const auto key = std::make_pair(label, c.seed);
  auto it = g_runs.find(key);
  if (it == g_runs.end()) {
    const auto t0 = Clock::now();
    it = g_runs.emplace(key, run_training(c)).first;
    std::printf("    run %s seed %llu: %.1f s\n", label.c_str(), static_cast<unsigned long long>(c.seed),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return it->second;
}

RunConfig seeded(RunConfig c, std::uint64_t seed) {
  c.seed = seed;
  return c;
}

RunConfig fedavg_config() {
  auto c = default_config();
  c.ablations = Ablations::fedavg();
  return c;
}

// A random chain of 3 to 7 ops on an [n, c] activation, reduced to a scalar.
struct RandomGraph {
  std::vector<Tensor> leaves;
  std::function<Tensor()> f;
};

RandomGraph random_graph(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> dim(3, 6);
  std::uniform_int_distribution<int> pick(0, 8);
  std::uniform_int_distribution<int> depth(3, 7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  RandomGraph g;
  auto leaf = [&](Shape s, double sc) {
    std::vector<double> v(numel(s));
    for (auto& x : v) x = sc * u(rng);
    g.leaves.push_back(Tensor::leaf(s, v));
    return g.leaves.back();
  };
  const std::size_t n = dim(rng);
  std::size_t c = dim(rng);
  const Tensor x = leaf({n, c}, 1.0);
  std::vector<std::function<Tensor(const Tensor&)>> steps;
  const int k = depth(rng);
  for (int s = 0; s < k; ++s) {
    switch (pick(rng)) {
      case 0: {
        const std::size_t c2 = dim(rng);
        const Tensor w = leaf({c, c2}, 1.0 / std::sqrt(static_cast<double>(c)));
        steps.emplace_back([w](const Tensor& h) { return ops::matmul(h, w); });
        c = c2;
        break;
      }
      case 1: {
        const Tensor b = leaf({c}, 1.0);
        steps.emplace_back([b](const Tensor& h) { return ops::add(h, b); });
        break;
      }
      case 2: {
        const Tensor m = leaf({n, c}, 1.0);
        steps.emplace_back([m](const Tensor& h) { return ops::mul(h, m); });
        break;
      }
      case 3:
        steps.emplace_back([](const Tensor& h) { return ops::gelu(h); });
        break;
      case 4:
        steps.emplace_back([](const Tensor& h) { return ops::scale(ops::softmax(h), 3.0); });
        break;
      case 5: {
        const Tensor gm = leaf({c}, 1.0);
        const Tensor bt = leaf({c}, 1.0);
        steps.emplace_back([gm, bt](const Tensor& h) { return ops::layernorm(h, gm, bt); });
        break;
      }
      case 6:
        steps.emplace_back([](const Tensor& h) {
          const auto s = ops::scale(ops::matmul(h, ops::transpose(h)), 0.5);
          return ops::matmul(ops::softmax(ops::causal_mask(s)), h);
        });
        break;
      case 7:
        steps.emplace_back([c](const Tensor& h) {
          const std::vector<Tensor> parts{ops::slice(h, 1, 0, 1), ops::scale(ops::slice(h, 1, 1, c), -0.5)};
          return ops::concat(parts, 1);
        });
        break;
      default:
        steps.emplace_back([n, c](const Tensor& h) {
          return ops::add(h, ops::reshape(ops::mean(ops::reshape(h, {1, n, c}), 1), {1, c}));
        });
        break;
    }
  }
  std::vector<double> tv(n * c);
  for (auto& v : tv) v = u(rng);
  const Tensor target = Tensor::constant({n, c}, tv);
  const bool use_mse = u(rng) > 0.0;
  g.f = [x, steps, target, use_mse] {
    Tensor h = x;
    for (const auto& s : steps) h = s(h);
    return use_mse ? ops::mse(h, target) : ops::sum_squares(h);
  };
  return g;
}

Outcome c1_gradients() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  int bad = 0;
  for (int i = 0; i < 50; ++i) {
    const auto g = random_graph(rng);
    const double e = testing::max_grad_error(g.f, g.leaves);
    worst = std::max(worst, e);
    bad += !(e < 1e-4);
  }
  const double secs = seconds_since(t0);
  return {bad == 0 && secs < 30.0,
          fmt("worst relative error %.2e over 50 graphs (%d above 1e-4), %.2f s", worst, bad, secs)};
}

Outcome c2_decomposition() {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> tau(1, 8);
  std::size_t inexact = 0, total = 0, exact_latents = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> v(2 * 8 * 16);
    for (auto& x : v) x = g(rng);
    const auto d = model::decompose(Tensor::constant({2, 8, 16}, v), tau(rng));
    bool all = true;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double r = d.trend.values()[i] + d.season.values()[i];
      ++total;
      if (r != v[i]) {
        ++inexact;
        all = false;
        worst = std::max(worst, std::abs(r - v[i]));
      }
    }
    exact_latents += all;
  }
  return {exact_latents == 1000,
          fmt("%zu/1000 latents exact; %zu of %zu elements off, worst |error| %.1e (elements with |trend| > ~2|latent| "
              "have no exact double split)",
              exact_latents, inexact, total, worst)};
}

Outcome c3_ema() {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 32;
    std::vector<double> t0(d), s0(d), tn(d), sn(d);
    for (auto* v : {&t0, &s0, &tn, &sn})
      for (auto& x : *v) x = g(rng);
    for (double mu : {0.0, 0.5, 1.0}) {
      auto b = model::BiasState::zeros(d, mu);
      for (std::size_t j = 0; j < d; ++j) {
        b.b_trend.mutable_values()[j] = t0[j];
        b.b_season.mutable_values()[j] = s0[j];
      }
      b.resync();
      model::ema_update(b, tn, sn);
      for (std::size_t j = 0; j < d; ++j) {
        const double wt = mu == 0.0 ? t0[j] : mu == 1.0 ? tn[j] : 0.5 * (t0[j] + tn[j]);
        const double ws = mu == 0.0 ? s0[j] : mu == 1.0 ? sn[j] : 0.5 * (s0[j] + sn[j]);
        worst = std::max({worst, std::abs(b.b_trend.values()[j] - wt), std::abs(b.b_season.values()[j] - ws),
                          std::abs(b.b_hat[j] - (wt + ws))});
      }
    }
  }
  return {worst <= 1e-15, fmt("worst deviation %.1e over 100 trials x mu in {0, 0.5, 1}", worst)};
}

Outcome c4_fedavg() {
  auto c = default_config();
  const auto [run, oracle] = testing::fedavg_round_vs_oracle(c);
  return {run == oracle, fmt("checkpoint %zu bytes, %s", run.size(), run == oracle ? "bit-identical" : "differs")};
}

ParamSet scalar(double v) {
  ParamSet p;
  p.insert("x", Tensor::leaf({1}, {v}));
  return p;
}

double val(const ParamSet& p) { return p.at("x").values()[0]; }

ParamSet random_set(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> a(12), b(4);
  for (auto& v : a) v = g(rng);
  for (auto& v : b) v = g(rng);
  ParamSet p;
  p.insert("a", Tensor::leaf({3, 4}, a));
  p.insert("b", Tensor::leaf({4}, b));
  return p;
}

Outcome c5_state() {
  using server::ServerState;
  int ok = 0, n = 0;
  auto check = [&](bool b) { ok += b; ++n; };
  const auto prev = scalar(1.0);
  {
    auto st = ServerState::create(prev.clone(), 2, 0.1, 0.7);
    const std::vector<ParamSet> same{scalar(1.0), scalar(1.0)};
    server::update_state(st, same, prev);
    check(val(st.s) == 0.0);
  }
  {
    auto st = ServerState::create(prev.clone(), 2, 0.1, 0.7);
    const std::vector<ParamSet> one{scalar(1.5)};
    server::update_state(st, one, prev);
    check(val(st.s) == -0.1 * 0.5);
  }
  {
    auto st = ServerState::create(prev.clone(), 2, 0.1, 0.7);
    const std::vector<ParamSet> two{scalar(1.25), scalar(0.75)};
    server::update_state(st, two, prev);
    check(val(st.s) == 0.0);
  }
  {
    auto st = ServerState::create(scalar(0.0), 2, 0.1, 0.7);
    check(val(server::correct_global(scalar(2.0), st)) == 2.0);
    st.s = scalar(0.5);
    check(val(server::correct_global(scalar(2.0), st)) == -3.0);
    auto unit = ServerState::create(scalar(0.0), 2, 1.0, 0.7);
    unit.s = scalar(1.75);
    check(val(server::correct_global(scalar(1.75), unit)) == 0.0);
  }
  std::mt19937_64 rng(5);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = random_set(rng);
    std::vector<ParamSet> d1, d2;
    for (int i = 0; i < 1 + trial % 3; ++i) d1.push_back(random_set(rng));
    for (int i = 0; i < 1 + trial % 4; ++i) d2.push_back(random_set(rng));
    auto a = ServerState::create(p.clone(), 2, 0.1, 0.7);
    auto b = ServerState::create(p.clone(), 2, 0.1, 0.7);
    server::update_state(a, d1, p);
    server::update_state(a, d2, p);
    auto all = d1;
    all.insert(all.end(), d2.begin(), d2.end());
    server::update_state(b, all, p);
    const auto fa = a.s.flatten();
    const auto fb = b.s.flatten();
    for (std::size_t i = 0; i < fa.size(); ++i) worst = std::max(worst, std::abs(fa[i] - fb[i]));
  }
  return {ok == n && worst <= 1e-12,
          fmt("%d/%d scalar examples exact; linearity worst %.1e over 100 random pairs", ok, n, worst)};
}

Outcome c6_fuse() {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t outside = 0, checked = 0;
  bool endpoints = true;
  for (int trial = 0; trial < 500; ++trial) {
    const auto a = random_set(rng);
    const auto b = random_set(rng);
    const auto f = server::fuse(a, b, u(rng)).flatten();
    const auto fa = a.flatten();
    const auto fb = b.flatten();
    for (std::size_t i = 0; i < f.size(); ++i) {
      ++checked;
      outside += f[i] < std::min(fa[i], fb[i]) || f[i] > std::max(fa[i], fb[i]);
    }
    endpoints = endpoints && server::fuse(a, b, 1.0).flatten() == fa && server::fuse(a, b, 0.0).flatten() == fb;
  }
  return {outside == 0 && endpoints, fmt("%zu/%zu elements outside the envelope; endpoints %s", outside, checked,
                                         endpoints ? "exact" : "inexact")};
}

Outcome c7_coreset() {
  model::BackboneConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.patch_len = 4;
  cfg.n_tokens = 4;
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g(0.0, 1.0);
  auto seq = [&](std::size_t len) {
    std::vector<double> x(len);
    for (auto& v : x) v = g(rng);
    return x;
  };
  double self_match = 0.0, self_align = 0.0, oracle_err = 0.0, ident_err = 0.0, phase_err = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto w = model::init_weights(cfg, s);
    const auto x = seq(16);
    const std::vector<std::vector<double>> one{x};
    self_match = std::max(self_match, std::abs(coreset::match_loss(Tensor::constant({1, 16}, x), one, w, cfg, 0.75, s).item()));
    const std::vector<std::vector<double>> three{seq(16), seq(16), seq(16)};
    std::vector<double> flat;
    for (const auto& r : three) flat.insert(flat.end(), r.begin(), r.end());
    self_align = std::max(self_align, std::abs(coreset::align_loss(Tensor::constant({3, 16}, flat), three, w, cfg).item()));

    const std::vector<std::vector<double>> batch{seq(2), seq(2), seq(2)};
    const auto [impl, oracle] = testing::match_loss_vs_oracle(seq(2), batch, s + 1, g(rng), g(rng));
    oracle_err = std::max(oracle_err, std::abs(impl - oracle));

    coreset::CoreSet cs;
    cs.sequences = {seq(32), seq(32)};
    cs.length = 32;
    const auto p0 = coreset::perturb_fourier(cs, 0.0, s);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t t = 0; t < 32; ++t) ident_err = std::max(ident_err, std::abs(p0.sequences[i][t] - cs.sequences[i][t]));
    const auto p = coreset::perturb_fourier(cs, 0.5, s);
    for (std::size_t i = 0; i < 2; ++i) {
      const auto a = fourier::rfft(cs.sequences[i]);
      const auto b = fourier::rfft(p.sequences[i]);
      for (std::size_t k = 0; k < a.size(); ++k) {
        if (std::abs(b[k]) <= 1e-8 || std::abs(a[k]) <= 1e-8) continue;
        double d = std::abs(std::arg(a[k]) - std::arg(b[k]));
        d = std::min(d, 2.0 * std::numbers::pi - d);
        phase_err = std::max(phase_err, d);
      }
    }
  }
  const bool pass = self_match == 0.0 && self_align == 0.0 && oracle_err <= 1e-10 && ident_err <= 1e-9 && phase_err <= 1e-6;
  return {pass, fmt("self match %.1e, self align %.1e, oracle %.1e, eps-0 identity %.1e, phase %.1e rad (20 seeds)",
                    self_match, self_align, oracle_err, ident_err, phase_err)};
}

Outcome c8_determinism() {
  auto c = default_config();
  const auto dir = work_dir() / "determinism";
  fs::remove_all(dir);
  const auto t0 = Clock::now();
  g_runs.emplace(std::make_pair(std::string("full"), c.seed), run_training(c, dir / "a"));
  const double secs = seconds_since(t0);
  run_training(c, dir / "b");
  c.workers = 2;
  run_training(c, dir / "parallel");
  bool same = true;
  for (const char* f : {"rounds.csv", "checkpoints/final.ckpt"}) {
    const auto a = slurp(dir / "a" / f);
    same = same && !a.empty() && a == slurp(dir / "b" / f) && a == slurp(dir / "parallel" / f);
  }
  fs::remove_all(dir);
  return {same && secs <= 300.0,
          fmt("rounds.csv and final checkpoint %s across two runs and 2 workers; one run took %.1f s (budget 300 s)",
              same ? "bit-identical" : "differ", secs)};
}

Outcome c9_vs_fedavg() {
  int wins = 0;
  std::string per;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    const auto fc = seeded(default_config(), s);
    const auto ac = seeded(fedavg_config(), s);
    const double a = mse_at(cached_run("full", fc), fc, 0.75);
    const double b = mse_at(cached_run("fedavg", ac), ac, 0.75);
    wins += a <= b;
    per += fmt(" s%llu %.4f/%.4f", static_cast<unsigned long long>(s), a, b);
  }
  return {wins >= 4, fmt("full <= FedAvg in %d/5 seeds (mse@0.75 full/FedAvg:%s)", wins, per.c_str())};
}

Outcome c10_mask_trend() {
  double lo = 0.0, hi = 0.0;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    const auto c = seeded(default_config(), s);
    const auto& r = cached_run("full", c);
    lo += mse_at(r, c, 0.2) / 5.0;
    hi += mse_at(r, c, 0.9) / 5.0;
  }
  return {hi >= lo, fmt("mean mse@0.9 %.4f vs mean mse@0.2 %.4f over 5 seeds", hi, lo)};
}

Outcome c11_bias() {
  double first = 0.0, last = 0.0;
  for (std::uint64_t s = 1; s <= 3; ++s) {
    const auto& r = cached_run("full", seeded(default_config(), s));
    first += r.reports.front().mean_pairwise_bias_distance / 3.0;
    last += r.reports.back().mean_pairwise_bias_distance / 3.0;
  }
  const auto& r = cached_run("full", seeded(default_config(), 1));
  return {last < 0.5 * first, fmt("mean pairwise bias distance round %zu %.4f vs round %zu %.4f (ratio %.3f)",
                                  r.reports.back().round, last, r.reports.front().round, first, last / first)};
}

Outcome c12_scaling() {
  const std::vector<double> grid{4, 8, 16, 32, 64};
  std::vector<double> mean(grid.size(), 0.0);
  for (std::uint64_t s = 1; s <= 3; ++s) {
    auto c = seeded(default_config(), s);
    c.coreset_size = 4;
    const auto t0 = Clock::now();
    const auto rows = eval::scaling_sweep(eval::SweepAxis::kData, grid, c);
    std::printf("    data sweep seed %llu: %.1f s\n", static_cast<unsigned long long>(s), seconds_since(t0));
    std::fflush(stdout);
    for (std::size_t i = 0; i < rows.size(); ++i) mean[i] += rows[i].mse_75 / 3.0;
  }
  int down = 0;
  std::string curve;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    curve += fmt(" %g:%.4f", grid[i], mean[i]);
    if (i > 0) down += mean[i] <= mean[i - 1];
  }
  int join_ok = 0;
  std::string join;
  for (std::uint64_t s = 1; s <= 3; ++s) {
    const auto full = seeded(default_config(), s);
    auto sparse = full;
    sparse.join_ratio = 0.1;
    const double a = mse_at(cached_run("full", full), full, 0.75);
    const double b = mse_at(cached_run("join0.1", sparse), sparse, 0.75);
    join_ok += a <= b;
    join += fmt(" s%llu %.4f/%.4f", static_cast<unsigned long long>(s), a, b);
  }
  return {down >= 3 && join_ok >= 2,
          fmt("non-increasing in %d/4 doubling pairs (seqs:mse%s); join 1.0 <= 0.1 in %d/3 seeds (%s)", down,
              curve.c_str(), join_ok, join.c_str() + 1)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", c1_gradients},
      {"decomposition identity", c2_decomposition},
      {"EMA endpoints", c3_ema},
      {"FedAvg reduction", c4_fedavg},
      {"state update and correction algebra", c5_state},
      {"fusion convexity", c6_fuse},
      {"core-set identities", c7_coreset},
      {"protocol determinism and budget", c8_determinism},
      {"full method vs FedAvg", c9_vs_fedavg},
      {"mask-ratio trend", c10_mask_trend},
      {"bias convergence", c11_bias},
      {"scaling direction", c12_scaling},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %2d %s  %s: %s\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
