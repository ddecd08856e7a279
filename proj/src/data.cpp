#include "tsfed/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "tsfed/errors.hpp"
#include "tsfed/rng.hpp"

namespace tsfed::data {

std::string to_string(Dynamics d) {
  switch (d) {
    case Dynamics::kSinusoidMixture: return "sinusoid-mixture";
    case Dynamics::kBoundedSaturating: return "bounded-saturating";
    case Dynamics::kRegimeSwitching: return "regime-switching";
  }
  return "?";
}

Dynamics dynamics_from_string(const std::string& s) {
  if (s == "sinusoid-mixture") return Dynamics::kSinusoidMixture;
  if (s == "bounded-saturating") return Dynamics::kBoundedSaturating;
  if (s == "regime-switching") return Dynamics::kRegimeSwitching;
  throw ConfigError("unknown dynamics '" + s + "'");
}

void DomainSpec::validate() const {
  if (!(amp_lo < amp_hi)) throw ConfigError("domain " + domain_id + ": amplitude range needs lo < hi");
  if (resolution < 2) throw ConfigError("domain " + domain_id + ": resolution must be >= 2");
  if (noise_std < 0.0) throw ConfigError("domain " + domain_id + ": noise_std must be >= 0");
  if (dynamics == Dynamics::kRegimeSwitching) {
    if (!transition_prob || *transition_prob <= 0.0 || *transition_prob > 1.0) {
      throw ConfigError("domain " + domain_id + ": regime-switching needs transition_prob in (0, 1]");
    }
  } else if (transition_prob) {
    throw ConfigError("domain " + domain_id + ": transition_prob only applies to regime-switching");
  }
}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::vector<double> sinusoid_mixture(const DomainSpec& spec, std::size_t length, std::mt19937_64& rng) {
  static constexpr double kPeriodScale[] = {1.0, 2.0, 0.5, 4.0};
  std::uniform_real_distribution<double> amp(spec.amp_lo, spec.amp_hi);
  std::uniform_real_distribution<double> phase(0.0, kTwoPi);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::size_t n_comp = spec.components;
  if (n_comp == 0) n_comp = std::uniform_int_distribution<std::size_t>(2, 4)(rng);
  n_comp = std::min<std::size_t>(n_comp, 4);

  std::vector<double> x(length, 0.0);
  for (std::size_t c = 0; c < n_comp; ++c) {
    const double period = std::max(2.0, static_cast<double>(spec.resolution) * kPeriodScale[c]);
    const double a = amp(rng);
    const double ph = phase(rng);
    for (std::size_t t = 0; t < length; ++t) x[t] += a * std::sin(kTwoPi * static_cast<double>(t) / period + ph);
  }
  if (spec.noise_std > 0.0)
    for (auto& v : x) v += spec.noise_std * noise(rng);
  return x;
}

std::vector<double> bounded_saturating(const DomainSpec& spec, std::size_t length, std::mt19937_64& rng) {
  const double center = 0.5 * (spec.amp_lo + spec.amp_hi);
  const double half = 0.5 * (spec.amp_hi - spec.amp_lo);
  std::uniform_real_distribution<double> gain(1.0, 1.6);
  std::uniform_real_distribution<double> phase(0.0, kTwoPi);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double a = gain(rng) * half;
  const double ph = phase(rng);
  const double period = static_cast<double>(spec.resolution);
  std::vector<double> x(length);
  double walk = 0.0;
  for (std::size_t t = 0; t < length; ++t) {
    walk += 0.05 * half * noise(rng);
    double v = center + a * std::sin(kTwoPi * static_cast<double>(t) / period + ph) + walk;
    if (spec.noise_std > 0.0) v += spec.noise_std * noise(rng);
    x[t] = std::clamp(v, spec.amp_lo, spec.amp_hi);
  }
  return x;
}

std::vector<double> regime_switching(const DomainSpec& spec, std::size_t length, std::mt19937_64& rng,
                                     std::vector<std::uint8_t>& regime) {
  std::uniform_real_distribution<double> amp(spec.amp_lo, spec.amp_hi);
  std::uniform_real_distribution<double> phase(0.0, kTwoPi);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double p = *spec.transition_prob;
  const double a0 = amp(rng), ph0 = phase(rng);
  const double a1 = amp(rng), ph1 = phase(rng);
  const double period0 = static_cast<double>(spec.resolution);
  const double period1 = 3.0 * static_cast<double>(spec.resolution);
  const double level1 = spec.amp_hi;

  std::vector<double> x(length);
  regime.assign(length, 0);
  std::uint8_t state = unit(rng) < 0.5 ? 0 : 1;
  for (std::size_t t = 0; t < length; ++t) {
    if (t > 0 && unit(rng) < p) state ^= 1;
    regime[t] = state;
    const double tt = static_cast<double>(t);
    double v = state == 0 ? a0 * std::sin(kTwoPi * tt / period0 + ph0)
                          : level1 + a1 * std::sin(kTwoPi * tt / period1 + ph1);
    if (spec.noise_std > 0.0) v += spec.noise_std * noise(rng);
    x[t] = v;
  }
  return x;
}

}  // namespace

GeneratedDomain generate_domain_detailed(const DomainSpec& spec, std::size_t n_sequences,
                                         std::size_t length, std::uint64_t seed) {
  spec.validate();
  if (n_sequences < 1) throw ConfigError("generate_domain: n_sequences must be >= 1");
  if (length < 2 * spec.resolution) {
    throw ConfigError("generate_domain: length " + std::to_string(length) + " shorter than two cycles of resolution " +
                      std::to_string(spec.resolution) + " for domain " + spec.domain_id);
  }
  GeneratedDomain out;
  out.sequences.reserve(n_sequences);
  for (std::size_t i = 0; i < n_sequences; ++i) {
    auto rng = make_rng({seed, i});
    switch (spec.dynamics) {
      case Dynamics::kSinusoidMixture: out.sequences.push_back(sinusoid_mixture(spec, length, rng)); break;
      case Dynamics::kBoundedSaturating: out.sequences.push_back(bounded_saturating(spec, length, rng)); break;
      case Dynamics::kRegimeSwitching: {
        std::vector<std::uint8_t> regime;
        out.sequences.push_back(regime_switching(spec, length, rng, regime));
        out.regimes.push_back(std::move(regime));
        break;
      }
    }
  }
  return out;
}

std::vector<std::vector<double>> generate_domain(const DomainSpec& spec, std::size_t n_sequences,
                                                 std::size_t length, std::uint64_t seed) {
  return generate_domain_detailed(spec, n_sequences, length, seed).sequences;
}

SeriesStats normalize(std::vector<double>& seq) {
  SeriesStats st;
  if (seq.empty()) return st;
  const double n = static_cast<double>(seq.size());
  st.mean = std::accumulate(seq.begin(), seq.end(), 0.0) / n;
  double var = 0.0;
  for (double v : seq) var += (v - st.mean) * (v - st.mean);
  var /= n;
  st.std = var > 1e-24 ? std::sqrt(var) : 1.0;
  for (auto& v : seq) v = (v - st.mean) / st.std;
  return st;
}

std::string to_string(PartitionMode m) { return m == PartitionMode::kDomainMixed ? "dm" : "di"; }

PartitionMode partition_mode_from_string(const std::string& s) {
  if (s == "dm" || s == "DM") return PartitionMode::kDomainMixed;
  if (s == "di" || s == "DI") return PartitionMode::kDomainIndependent;
  throw ConfigError("unknown partition mode '" + s + "' (expected dm or di)");
}

std::vector<SeriesShard> partition(std::span<const DomainSpec> domains, const PartitionSpec& spec,
                                   std::uint64_t seed) {
  const std::size_t n_domains = domains.size();
  if (n_domains == 0) throw ConfigError("partition: no domains");
  if (spec.n_clients == 0) throw ConfigError("partition: n_clients must be >= 1");
  if (spec.seqs_per_client == 0) throw ConfigError("partition: seqs_per_client must be >= 1");

  std::vector<std::vector<std::size_t>> client_domains(spec.n_clients);
  if (spec.mode == PartitionMode::kDomainMixed) {
    if (n_domains < 2) throw ConfigError("partition: domain-mixed mode needs at least 2 domains");
    if (spec.domains_per_client < 2) throw ConfigError("partition: domain-mixed mode needs domains_per_client >= 2");
    if (spec.seqs_per_client < 2) throw ConfigError("partition: domain-mixed mode needs seqs_per_client >= 2");
    const std::size_t per = std::min(spec.domains_per_client, n_domains);
    for (std::size_t c = 0; c < spec.n_clients; ++c)
      for (std::size_t j = 0; j < per; ++j) client_domains[c].push_back((c + j) % n_domains);
  } else {
    if (spec.n_clients < n_domains) {
      throw ConfigError("partition: domain-independent mode needs n_clients (" + std::to_string(spec.n_clients) +
                        ") >= number of domains (" + std::to_string(n_domains) + ")");
    }
    for (std::size_t c = 0; c < spec.n_clients; ++c) client_domains[c].push_back(c % n_domains);
  }

  std::vector<SeriesShard> shards(spec.n_clients);
  for (std::size_t c = 0; c < spec.n_clients; ++c) {
    auto& shard = shards[c];
    shard.client_id = static_cast<int>(c);
    const auto& doms = client_domains[c];
    // Sequence i of this client comes from doms[i % doms.size()].
    std::vector<std::size_t> counts(doms.size(), 0);
    for (std::size_t i = 0; i < spec.seqs_per_client; ++i) ++counts[i % doms.size()];
    std::vector<std::vector<std::vector<double>>> generated(doms.size());
    for (std::size_t j = 0; j < doms.size(); ++j) {
      if (counts[j] == 0) continue;
      generated[j] = generate_domain(domains[doms[j]], counts[j], spec.length, derive_seed({seed, c, doms[j]}));
    }
    std::vector<std::size_t> cursor(doms.size(), 0);
    for (std::size_t i = 0; i < spec.seqs_per_client; ++i) {
      const std::size_t j = i % doms.size();
      auto seq = std::move(generated[j][cursor[j]++]);
      shard.stats.push_back(normalize(seq));
      shard.sequences.push_back(std::move(seq));
      shard.domain_tags.push_back(domains[doms[j]].domain_id);
      shard.seq_ids.push_back(c * spec.seqs_per_client + i);
    }
  }
  return shards;
}

void write_shards_csv(std::span<const SeriesShard> shards, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.precision(17);
  f << "client_id,seq_id,domain_id,value\n";
  for (const auto& s : shards)
    for (std::size_t i = 0; i < s.size(); ++i)
      for (double v : s.sequences[i]) f << s.client_id << ',' << s.seq_ids[i] << ',' << s.domain_tags[i] << ',' << v << '\n';
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

std::vector<DomainSpec> domain_catalog() {
  auto make = [](std::string id, std::size_t res, Dynamics dyn, double lo, double hi, double noise,
                 std::optional<double> p = std::nullopt) {
    DomainSpec d;
    d.domain_id = std::move(id);
    d.resolution = res;
    d.dynamics = dyn;
    d.amp_lo = lo;
    d.amp_hi = hi;
    d.noise_std = noise;
    d.transition_prob = p;
    return d;
  };
  return {
      make("energy", 24, Dynamics::kSinusoidMixture, 0.5, 2.0, 0.1),
      make("sensor", 8, Dynamics::kBoundedSaturating, -1.0, 1.0, 0.05),
      make("traffic", 12, Dynamics::kRegimeSwitching, 0.5, 3.0, 0.1, 0.02),
      make("weather", 64, Dynamics::kSinusoidMixture, 0.5, 1.5, 0.2),
      make("physio", 4, Dynamics::kBoundedSaturating, -0.5, 2.0, 0.1),
      make("web", 32, Dynamics::kRegimeSwitching, 0.2, 1.0, 0.3, 0.05),
  };
}

DomainSpec catalog_domain(const std::string& name) {
  for (auto& d : domain_catalog())
    if (d.domain_id == name) return d;
  throw ConfigError("unknown domain '" + name + "'");
}

DataPreset data_preset(const std::string& name) {
  if (name == "di2") return {{"energy", "traffic"}, PartitionMode::kDomainIndependent, 1};
  if (name == "di6") {
    return {{"energy", "sensor", "traffic", "weather", "physio", "web"}, PartitionMode::kDomainIndependent, 1};
  }
  // H1: two domains per client over a moderate resolution spread (8..64).
  if (name == "h1") return {{"energy", "sensor", "traffic", "weather"}, PartitionMode::kDomainMixed, 2};
  // H2: four domains per client over the full spread (4..64).
  if (name == "h2") {
    return {{"energy", "sensor", "traffic", "weather", "physio", "web"}, PartitionMode::kDomainMixed, 4};
  }
  throw ConfigError("unknown data preset '" + name + "' (expected di2, di6, h1 or h2)");
}

Tokens patchify(std::span<const double> sequence, std::size_t patch_len) {
  if (patch_len == 0) throw ConfigError("patchify: patch_len must be >= 1");
  if (sequence.size() % patch_len != 0) {
    throw ConfigError("patchify: length " + std::to_string(sequence.size()) + " not divisible by patch_len " +
                      std::to_string(patch_len));
  }
  return Tokens{sequence.size() / patch_len, patch_len, std::vector<double>(sequence.begin(), sequence.end())};
}

std::vector<double> unpatchify(const Tokens& tokens) { return tokens.data; }

std::size_t MaskedBatch::masked_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

Tensor MaskedBatch::tokens_tensor() const { return Tensor::constant({batch, n_tokens, patch_len}, tokens); }

Tensor MaskedBatch::originals_tensor() const { return Tensor::constant({batch, n_tokens, patch_len}, originals); }

std::vector<double> MaskedBatch::mask_weights() const {
  std::vector<double> w(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) w[i] = mask[i] ? 1.0 : 0.0;
  return w;
}

std::size_t masked_per_sequence(double ratio, std::size_t n_tokens) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ContractError("mask ratio must lie in [0, 1]");
  return std::min<std::size_t>(n_tokens, static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n_tokens))));
}

std::vector<std::uint8_t> draw_mask(std::size_t n_sequences, std::size_t n_tokens, double ratio, std::uint64_t seed) {
  const std::size_t k = masked_per_sequence(ratio, n_tokens);
  std::vector<std::uint8_t> mask(n_sequences * n_tokens, 0);
  std::vector<std::size_t> idx(n_tokens);
  for (std::size_t s = 0; s < n_sequences; ++s) {
    auto rng = make_rng({seed, s});
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    // Partial Fisher-Yates: the first k entries form a uniform k-subset.
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(i, n_tokens - 1)(rng);
      std::swap(idx[i], idx[j]);
      mask[s * n_tokens + idx[i]] = 1;
    }
  }
  return mask;
}

MaskedBatch mask_tokens(std::span<const std::vector<double>> sequences, std::size_t patch_len, double ratio,
                        std::uint64_t seed) {
  MaskedBatch b;
  b.batch = sequences.size();
  b.patch_len = patch_len;
  if (b.batch == 0) return b;
  b.n_tokens = patchify(sequences[0], patch_len).n_tokens;
  for (const auto& s : sequences) {
    if (s.size() != sequences[0].size()) throw DimensionError("mask_tokens: sequences differ in length");
    if (s.size() % patch_len != 0) patchify(s, patch_len);  // throws
    b.originals.insert(b.originals.end(), s.begin(), s.end());
  }
  b.mask = draw_mask(b.batch, b.n_tokens, ratio, seed);
  b.tokens = b.originals;
  for (std::size_t r = 0; r < b.rows(); ++r)
    if (b.mask[r]) std::fill_n(b.tokens.begin() + static_cast<std::ptrdiff_t>(r * patch_len), patch_len, 0.0);
  return b;
}

}  // namespace tsfed::data
