#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include "coreset_oracle.hpp"
#include "tsfed/coreset.hpp"
#include "tsfed/errors.hpp"
#include "tsfed/fourier.hpp"

using namespace tsfed;
using namespace tsfed::coreset;

namespace {

model::BackboneConfig tiny_config() {
  model::BackboneConfig c;
  c.n_layers = 1;
  c.d_model = 8;
  c.n_heads = 2;
  c.patch_len = 4;
  c.n_tokens = 4;
  return c;
}

data::SeriesShard noisy_shard(std::size_t n, std::size_t length, std::uint64_t seed) {
  data::SeriesShard s;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> x(length);
    const double ph = g(rng);
    for (std::size_t t = 0; t < length; ++t) x[t] = std::sin(0.7 * static_cast<double>(t) + ph) + 0.3 * g(rng);
    data::normalize(x);
    s.sequences.push_back(x);
    s.domain_tags.push_back("d");
    s.seq_ids.push_back(i);
  }
  return s;
}

model::ClientModel client(std::uint64_t seed) {
  model::ClientModel m;
  m.config = tiny_config();
  m.weights = model::init_weights(m.config, seed);
  return m;
}

}  // namespace

TEST_CASE("match loss is zero against itself and non-negative") {
  const auto m = client(1);
  const auto shard = noisy_shard(3, 16, 2);
  const std::vector<std::vector<double>> one{shard.sequences[0]};
  CHECK(match_loss(Tensor::constant({1, 16}, shard.sequences[0]), one, m.weights, m.config, 0.75, 9).item() == 0.0);
  const std::vector<std::vector<double>> two{shard.sequences[1], shard.sequences[2]};
  CHECK(match_loss(Tensor::constant({1, 16}, shard.sequences[0]), two, m.weights, m.config, 0.75, 9).item() >= 0.0);
  CHECK_THROWS_AS(match_loss(Tensor::constant({1, 16}, shard.sequences[0]), {}, m.weights, m.config, 0.75, 9),
                  ContractError);
}

TEST_CASE("match loss agrees with the one-parameter closed form") {
  const std::vector<std::vector<double>> batch{{0.4, -1.3}, {2.0, 0.25}};
  for (std::uint64_t seed : {1, 2, 3, 4}) {
    const auto [impl, oracle] = testing::match_loss_vs_oracle({0.9, -0.2}, batch, seed);
    CHECK(impl == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(std::abs(impl - oracle) < 1e-10);
  }
}

TEST_CASE("head gradient closed form") {
  // Two rows, d = 1, P = 1, only the second row selected: 2/1 * z1 (z1 w - y1).
  const auto z = Tensor::constant({2, 1}, {0.5, 2.0});
  const auto w = Tensor::constant({1, 1}, {0.25});
  const auto y = Tensor::constant({2, 1}, {1.0, -1.0});
  const std::vector<double> sel{0.0, 1.0};
  CHECK(head_gradient(z, w, y, sel).values()[0] == doctest::Approx(2.0 * 2.0 * (0.5 + 1.0)).epsilon(1e-15));
  const std::vector<double> none{0.0, 0.0};
  CHECK(head_gradient(z, w, y, none).values()[0] == 0.0);
}

TEST_CASE("build_coreset") {
  const auto shard = noisy_shard(12, 16, 3);
  const auto m = client(4);
  SUBCASE("zero steps returns its seed sequences") {
    BuildOptions o;
    o.k = 4;
    o.steps = 0;
    o.seed = 5;
    const auto cs = build_coreset(m, shard, o);
    CHECK(cs.stage == Stage::kInitial);
    CHECK(cs.size() == 4);
    for (const auto& s : cs.sequences) {
      bool found = false;
      for (const auto& x : shard.sequences) found = found || x == s;
      CHECK(found);
    }
  }
  SUBCASE("descends in most seeds") {
    int ok = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      BuildOptions o;
      o.k = 4;
      o.steps = 10;
      o.eta = 0.02;
      o.seed = seed;
      const auto cs = build_coreset(client(seed), noisy_shard(12, 16, seed), o);
      ok += cs.match_loss_final <= cs.match_trace.front();
    }
    CHECK(ok >= 9);
  }
  SUBCASE("too small a shard") {
    BuildOptions o;
    o.k = 20;
    CHECK_THROWS_AS(build_coreset(m, shard, o), ConfigError);
  }
  SUBCASE("deterministic per seed") {
    BuildOptions o;
    o.k = 3;
    o.steps = 3;
    o.seed = 8;
    CHECK(build_coreset(m, shard, o).sequences == build_coreset(m, shard, o).sequences);
  }
}

TEST_CASE("fourier perturbation") {
  std::vector<double> x(32);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& v : x) v = g(rng);
  CoreSet cs;
  cs.sequences = {x};
  cs.length = x.size();

  SUBCASE("epsilon 0 is an identity") {
    const auto p = perturb_fourier(cs, 0.0, 3);
    CHECK(p.stage == Stage::kPerturbed);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(p.sequences[0][i] - x[i]) < 1e-9);
  }
  SUBCASE("phase is preserved where the amplitude survives") {
    const auto p = perturb_fourier(cs, 0.5, 3);
    const auto a = fourier::rfft(x);
    const auto b = fourier::rfft(p.sequences[0]);
    for (std::size_t k = 0; k < a.size(); ++k) {
      if (std::abs(b[k]) <= 1e-8) continue;
      double d = std::abs(std::arg(a[k]) - std::arg(b[k]));
      d = std::min(d, 2.0 * std::numbers::pi - d);
      CHECK(d < 1e-6);
    }
  }
  SUBCASE("single-bin cosine is rescaled") {
    std::vector<double> c(16);
    for (std::size_t t = 0; t < 16; ++t) c[t] = 1.5 * std::cos(2.0 * std::numbers::pi * 2.0 * static_cast<double>(t) / 16.0 + 0.3);
    std::vector<double> noise(9, 0.0);
    noise[2] = 4.0;
    const auto out = perturb_amplitude(c, noise);
    // Bin 2 of a cosine with amplitude a has |X| = a * n / 2 = 12.
    const double scale = (12.0 + 4.0) / 12.0;
    for (std::size_t t = 0; t < 16; ++t) CHECK(out[t] == doctest::Approx(scale * c[t]).epsilon(1e-12));
  }
  SUBCASE("stage order is enforced") {
    const auto p = perturb_fourier(cs, 0.1, 1);
    CHECK_THROWS_AS(perturb_fourier(p, 0.1, 1), ContractError);
    const std::vector<std::vector<double>> mb{x};
    const auto m = client(1);
    auto cfg = m.config;
    cfg.n_tokens = 8;
    CHECK_THROWS_AS(refine_alignment(cs, mb, m.weights, cfg, 0.1, 1), ContractError);
    const auto a = refine_alignment(p, mb, model::init_weights(cfg, 1), cfg, 0.1, 1);
    CHECK(a.stage == Stage::kAligned);
    CHECK_THROWS_AS(perturb_fourier(a, 0.1, 1), ContractError);
  }
}

TEST_CASE("align loss identities") {
  const auto m = client(2);
  const auto shard = noisy_shard(3, 16, 6);
  const Tensor same = Tensor::constant({3, 16}, [&] {
    std::vector<double> v;
    for (const auto& s : shard.sequences) v.insert(v.end(), s.begin(), s.end());
    return v;
  }());
  CHECK(align_loss(same, shard.sequences, m.weights, m.config).item() == 0.0);
  const std::vector<std::vector<double>> two{shard.sequences[0], shard.sequences[1]};
  CHECK_THROWS_AS(align_loss(same, two, m.weights, m.config), ContractError);

  // Embedding = sequence mean, d = 1.
  const auto ec = Tensor::constant({2, 1}, {0.5, 1.5});
  const auto ex = Tensor::constant({2, 1}, {-1.0, 0.25});
  const double want = 0.5 * std::pow((0.5 + 1.5) - (-1.0 + 0.25), 2);
  CHECK(align_loss_from_embeddings(ec, ex).item() == doctest::Approx(want).epsilon(1e-15));
}

TEST_CASE("refine_alignment") {
  const auto m = client(3);
  const auto shard = noisy_shard(8, 16, 7);
  CoreSet start;
  start.stage = Stage::kPerturbed;
  start.sequences = {shard.sequences[0], shard.sequences[1]};
  const std::vector<std::vector<double>> mb{shard.sequences[2], shard.sequences[3]};

  SUBCASE("zero steps keeps the sequences") {
    CHECK(refine_alignment(start, mb, m.weights, m.config, 0.1, 0).sequences == start.sequences);
  }
  SUBCASE("starting at the mini-batch stays there") {
    CoreSet at = start;
    at.sequences = mb;
    const auto out = refine_alignment(at, mb, m.weights, m.config, 0.1, 5);
    CHECK(out.sequences == mb);
    CHECK(out.align_loss_final == 0.0);
  }
  SUBCASE("descends in most seeds") {
    int ok = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto s = noisy_shard(4, 16, 100 + seed);
      CoreSet c0;
      c0.stage = Stage::kPerturbed;
      c0.sequences = {s.sequences[0], s.sequences[1]};
      const std::vector<std::vector<double>> b{s.sequences[2], s.sequences[3]};
      const auto out = refine_alignment(c0, b, client(seed).weights, m.config, 0.05, 10);
      bool mono = true;
      for (std::size_t i = 1; i < out.align_trace.size(); ++i) mono = mono && out.align_trace[i] <= out.align_trace[i - 1];
      ok += mono;
    }
    CHECK(ok >= 9);
  }
}

TEST_CASE("perturbation moves core-sets well above the round-trip floor") {
  const auto shard = noisy_shard(12, 16, 9);
  const auto m = client(9);
  BuildOptions o;
  o.k = 4;
  o.steps = 0;
  o.seed = 1;
  const auto cs = build_coreset(m, shard, o);
  const double floor = mean_nearest_distance(perturb_fourier(cs, 0.0, 2), shard);
  const auto mb = gather(shard, cs.reference_indices);
  const auto aligned = refine_alignment(perturb_fourier(cs, 0.5, 2), mb, m.weights, m.config, 0.05, 5);
  CHECK(mean_nearest_distance(aligned, shard) >= 100.0 * std::max(floor, 1e-15));
}
