#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "tsfed/data.hpp"
#include "tsfed/errors.hpp"

using namespace tsfed;
using namespace tsfed::data;

TEST_CASE("noiseless single sinusoid has the resolution as its period") {
  DomainSpec s;
  s.domain_id = "sine";
  s.resolution = 8;
  s.components = 1;
  s.noise_std = 0.0;
  const auto seqs = generate_domain(s, 3, 16, 5);
  for (const auto& x : seqs)
    for (std::size_t t = 0; t + 8 < x.size(); ++t) CHECK(std::abs(x[t] - x[t + 8]) < 1e-12);
}

TEST_CASE("bounded-saturating respects its clamp") {
  DomainSpec s;
  s.domain_id = "bounded";
  s.dynamics = Dynamics::kBoundedSaturating;
  s.amp_lo = -1.0;
  s.amp_hi = 1.0;
  s.noise_std = 0.3;
  for (const auto& x : generate_domain(s, 20, 128, 3))
    for (double v : x) CHECK((v >= -1.0 && v <= 1.0));
}

TEST_CASE("regime switch count matches the binomial expectation") {
  DomainSpec s;
  s.domain_id = "regime";
  s.dynamics = Dynamics::kRegimeSwitching;
  s.transition_prob = 0.05;
  const auto g = generate_domain_detailed(s, 100, 512, 9);
  std::size_t switches = 0;
  for (const auto& r : g.regimes)
    for (std::size_t t = 1; t < r.size(); ++t) switches += r[t] != r[t - 1];
  const double expected = 0.05 * 511 * 100;
  CHECK(std::abs(static_cast<double>(switches) - expected) <= 0.3 * expected);
}

TEST_CASE("generation is deterministic and validates length") {
  const auto spec = catalog_domain(domain_catalog().front().domain_id);
  CHECK(generate_domain(spec, 2, 64, 1) == generate_domain(spec, 2, 64, 1));
  CHECK(generate_domain(spec, 2, 64, 1) != generate_domain(spec, 2, 64, 2));
  CHECK_THROWS_AS(generate_domain(spec, 2, spec.resolution, 1), ConfigError);
}

TEST_CASE("normalization gives zero mean and unit std") {
  std::vector<double> x{1, 5, 2, 8, 3};
  normalize(x);
  double m = 0.0;
  for (double v : x) m += v;
  m /= 5.0;
  double var = 0.0;
  for (double v : x) var += (v - m) * (v - m);
  CHECK(std::abs(m) < 1e-9);
  CHECK(std::abs(std::sqrt(var / 5.0) - 1.0) < 1e-9);
  std::vector<double> c(4, 2.0);
  CHECK(normalize(c).std == 1.0);
}

TEST_CASE("partition modes") {
  const auto cat = domain_catalog();
  SUBCASE("DI with three domains") {
    const std::vector<DomainSpec> d{cat[0], cat[1], cat[2]};
    const auto shards = partition(d, {PartitionMode::kDomainIndependent, 3, 4, 64, 2}, 1);
    std::set<std::string> tags;
    for (const auto& s : shards) {
      CHECK(std::set<std::string>(s.domain_tags.begin(), s.domain_tags.end()).size() == 1);
      tags.insert(s.domain_tags[0]);
    }
    CHECK(tags.size() == 3);
  }
  SUBCASE("DM with two domains") {
    const std::vector<DomainSpec> d{cat[0], cat[1]};
    for (const auto& s : partition(d, {PartitionMode::kDomainMixed, 2, 6, 64, 2}, 1))
      CHECK(std::set<std::string>(s.domain_tags.begin(), s.domain_tags.end()).size() == 2);
    const std::vector<DomainSpec> one{cat[0]};
    CHECK_THROWS_AS(partition(one, {PartitionMode::kDomainMixed, 2, 6, 64, 2}, 1), ConfigError);
  }
  SUBCASE("DI, 2 domains, 4 clients: 40 distinct sequences") {
    const std::vector<DomainSpec> d{cat[0], cat[1]};
    const auto shards = partition(d, {PartitionMode::kDomainIndependent, 4, 10, 64, 2}, 3);
    std::set<std::vector<double>> seqs;
    std::set<std::size_t> ids;
    std::set<std::string> tags;
    for (const auto& s : shards) {
      for (std::size_t i = 0; i < s.size(); ++i) {
        seqs.insert(s.sequences[i]);
        ids.insert(s.seq_ids[i]);
        tags.insert(s.domain_tags[i]);
      }
    }
    CHECK(seqs.size() == 40);
    CHECK(ids.size() == 40);
    CHECK(tags.size() == 2);
  }
}

TEST_CASE("patchify round-trips and rejects ragged lengths") {
  std::vector<double> x(1024);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(0.1 * static_cast<double>(i));
  const auto t = patchify(x, 32);
  CHECK(t.n_tokens == 32);
  CHECK(t.patch_len == 32);
  CHECK(unpatchify(t) == x);
  const auto whole = patchify(x, 1024);
  CHECK(whole.n_tokens == 1);
  CHECK(whole.data == x);
  CHECK_THROWS_AS(patchify(x, 30), ConfigError);
}

TEST_CASE("masking sets exactly round(ratio * T) tokens and zero-fills them") {
  std::vector<std::vector<double>> seqs(5, std::vector<double>(64));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t t = 0; t < 64; ++t) seqs[i][t] = 1.0 + static_cast<double>(i * 64 + t);
  const auto b = mask_tokens(seqs, 8, 0.75, 4);
  CHECK(b.masked_count() == 5 * masked_per_sequence(0.75, 8));
  for (std::size_t i = 0; i < 5; ++i) {
    std::size_t n = 0;
    for (std::size_t t = 0; t < 8; ++t) n += b.mask[i * 8 + t];
    CHECK(n == 6);
  }
  for (std::size_t r = 0; r < b.rows(); ++r)
    for (std::size_t p = 0; p < 8; ++p) {
      const double tok = b.tokens[r * 8 + p];
      CHECK(tok == (b.mask[r] ? 0.0 : b.originals[r * 8 + p]));
    }
  CHECK(masked_per_sequence(0.0, 8) == 0);
  CHECK(masked_per_sequence(1.0, 8) == 8);
}
