#include "tsfed/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "tsfed/errors.hpp"

namespace tsfed {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::size_t parse_count(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw ConfigError("config: " + key + " expects a non-negative integer, got '" + raw + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw ConfigError("config: " + key + " expects a number, got '" + raw + "'");
  return out;
}

bool parse_flag(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("config: " + key + " expects true/false, got '" + raw + "'");
}

std::string fmt_real(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::vector<std::string> split_list(const std::string& raw) {
  std::vector<std::string> out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Get>
Field count_field(const std::string& key, Get member) {
  return {[key, member](RunConfig& c, const std::string& v) { member(c) = parse_count(key, v); },
          [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }};
}

template <typename Get>
Field real_field(const std::string& key, Get member) {
  return {[key, member](RunConfig& c, const std::string& v) { member(c) = parse_real(key, v); },
          [member](const RunConfig& c) { return fmt_real(member(const_cast<RunConfig&>(c))); }};
}

template <typename Get>
Field flag_field(const std::string& key, Get member) {
  return {[key, member](RunConfig& c, const std::string& v) { member(c) = parse_flag(key, v); },
          [member](const RunConfig& c) { return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

// Ordered so that snapshots list keys the same way every time.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    auto count = [&t](const std::string& k, auto m) { t.emplace_back(k, count_field(k, m)); };
    auto real = [&t](const std::string& k, auto m) { t.emplace_back(k, real_field(k, m)); };
    auto flag = [&t](const std::string& k, auto m) { t.emplace_back(k, flag_field(k, m)); };

    count("rounds", [](RunConfig& c) -> std::size_t& { return c.rounds; });
    count("local_epochs", [](RunConfig& c) -> std::size_t& { return c.local_epochs; });
    real("join_ratio", [](RunConfig& c) -> double& { return c.join_ratio; });
    real("lambda", [](RunConfig& c) -> double& { return c.lambda; });
    real("alpha", [](RunConfig& c) -> double& { return c.alpha; });
    real("beta", [](RunConfig& c) -> double& { return c.beta; });
    real("epsilon", [](RunConfig& c) -> double& { return c.epsilon; });
    real("mu", [](RunConfig& c) -> double& { return c.mu; });
    count("tau", [](RunConfig& c) -> std::size_t& { return c.tau; });
    count("coreset_size", [](RunConfig& c) -> std::size_t& { return c.coreset_size; });
    count("coreset_steps", [](RunConfig& c) -> std::size_t& { return c.coreset_steps; });
    real("coreset_eta", [](RunConfig& c) -> double& { return c.coreset_eta; });
    count("align_steps", [](RunConfig& c) -> std::size_t& { return c.align_steps; });
    real("align_eta", [](RunConfig& c) -> double& { return c.align_eta; });
    count("server_epochs", [](RunConfig& c) -> std::size_t& { return c.server_epochs; });
    real("server_lr", [](RunConfig& c) -> double& { return c.server_lr; });
    real("mask_ratio", [](RunConfig& c) -> double& { return c.mask_ratio; });
    real("lr", [](RunConfig& c) -> double& { return c.lr; });
    real("warmup_lr", [](RunConfig& c) -> double& { return c.warmup_lr; });
    count("batch_size", [](RunConfig& c) -> std::size_t& { return c.batch_size; });
    t.emplace_back("seed", Field{[](RunConfig& c, const std::string& v) { c.seed = parse_count("seed", v); },
                                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    flag("freeze_global_bias", [](RunConfig& c) -> bool& { return c.freeze_global_bias; });
    flag("loss_on_all_tokens", [](RunConfig& c) -> bool& { return c.loss_on_all_tokens; });
    flag("mean_state_drift", [](RunConfig& c) -> bool& { return c.mean_state_drift; });
    count("workers", [](RunConfig& c) -> std::size_t& { return c.workers; });

    flag("ablations.dbe", [](RunConfig& c) -> bool& { return c.ablations.dbe; });
    flag("ablations.gbe_correction", [](RunConfig& c) -> bool& { return c.ablations.gbe_correction; });
    flag("ablations.gbe_coreset", [](RunConfig& c) -> bool& { return c.ablations.gbe_coreset; });
    flag("ablations.bias_alignment", [](RunConfig& c) -> bool& { return c.ablations.bias_alignment; });

    t.emplace_back("data.preset", Field{[](RunConfig& c, const std::string& v) { c.data.preset = trim(v); },
                                        [](const RunConfig& c) { return c.data.preset; }});
    t.emplace_back("data.domains", Field{[](RunConfig& c, const std::string& v) { c.data.domains = split_list(v); },
                                         [](const RunConfig& c) {
                                           std::string s;
                                           for (const auto& d : c.data.domains) s += (s.empty() ? "" : ",") + d;
                                           return s;
                                         }});
    t.emplace_back("data.mode",
                   Field{[](RunConfig& c, const std::string& v) { c.data.mode = data::partition_mode_from_string(trim(v)); },
                         [](const RunConfig& c) { return data::to_string(c.data.mode); }});
    count("data.domains_per_client", [](RunConfig& c) -> std::size_t& { return c.data.domains_per_client; });
    count("data.n_clients", [](RunConfig& c) -> std::size_t& { return c.data.n_clients; });
    count("data.seqs_per_client", [](RunConfig& c) -> std::size_t& { return c.data.seqs_per_client; });
    count("data.length", [](RunConfig& c) -> std::size_t& { return c.data.length; });
    count("data.holdout_per_domain", [](RunConfig& c) -> std::size_t& { return c.data.holdout_per_domain; });

    count("model.n_layers", [](RunConfig& c) -> std::size_t& { return c.model.n_layers; });
    count("model.d_model", [](RunConfig& c) -> std::size_t& { return c.model.d_model; });
    count("model.n_heads", [](RunConfig& c) -> std::size_t& { return c.model.n_heads; });
    count("model.patch_len", [](RunConfig& c) -> std::size_t& { return c.model.patch_len; });
    count("model.ffn_mult", [](RunConfig& c) -> std::size_t& { return c.model.ffn_mult; });
    real("model.dropout", [](RunConfig& c) -> double& { return c.model.dropout; });
    return t;
  }();
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& [k, f] : fields())
    if (k == key) return &f;
  return nullptr;
}

void derive(RunConfig& c) {
  if (c.model.patch_len > 0) c.model.n_tokens = c.data.length / c.model.patch_len;
}

}  // namespace

std::vector<data::DomainSpec> DataConfig::domain_specs() const {
  std::vector<std::string> names = domains;
  if (preset != "custom") names = data::data_preset(preset).domains;
  std::vector<data::DomainSpec> out;
  for (const auto& n : names) out.push_back(data::catalog_domain(n));
  return out;
}

data::PartitionSpec DataConfig::partition_spec() const {
  data::PartitionSpec p;
  p.mode = mode;
  p.domains_per_client = domains_per_client;
  if (preset != "custom") {
    const auto pre = data::data_preset(preset);
    p.mode = pre.mode;
    p.domains_per_client = pre.domains_per_client;
  }
  p.n_clients = n_clients;
  p.seqs_per_client = seqs_per_client;
  p.length = length;
  return p;
}

void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("config: " + msg);
  };
  need(join_ratio > 0.0 && join_ratio <= 1.0, "join_ratio must lie in (0, 1]");
  need(lambda >= 0.0, "lambda must be >= 0");
  need(alpha >= 0.0 && alpha <= 1.0, "alpha must lie in [0, 1]");
  need(beta > 0.0, "beta must be > 0");
  need(epsilon >= 0.0, "epsilon must be >= 0");
  need(mu >= 0.0 && mu <= 1.0, "mu must lie in [0, 1]");
  need(mask_ratio >= 0.0 && mask_ratio <= 1.0, "mask_ratio must lie in [0, 1]");
  need(lr >= 0.0 && warmup_lr >= 0.0 && server_lr >= 0.0, "learning rates must be >= 0");
  need(coreset_eta >= 0.0 && align_eta >= 0.0, "core-set step sizes must be >= 0");
  need(batch_size >= 1, "batch_size must be >= 1");
  need(workers >= 1, "workers must be >= 1");
  need(coreset_size >= 1, "coreset_size must be >= 1");
  need(data.n_clients >= 1, "data.n_clients must be >= 1");
  need(data.seqs_per_client >= 1, "data.seqs_per_client must be >= 1");
  need(model.patch_len >= 1 && data.length % model.patch_len == 0,
       "data.length " + std::to_string(data.length) + " is not divisible by model.patch_len " +
           std::to_string(model.patch_len));
  need(model.n_tokens == data.length / model.patch_len, "model.n_tokens must equal data.length / model.patch_len");
  need(tau >= 1 && tau <= model.n_tokens, "tau must lie in [1, n_tokens]");
  if (ablations.gbe_coreset)
    need(data.seqs_per_client >= coreset_size, "data.seqs_per_client must be >= coreset_size");
  model.validate();
  const auto specs = data.domain_specs();
  need(!specs.empty(), "no domains configured");
  for (const auto& s : specs) s.validate();
  const auto p = data.partition_spec();
  if (p.mode == data::PartitionMode::kDomainIndependent)
    need(data.n_clients >= specs.size(), "domain-independent partition needs n_clients >= number of domains");
  else
    need(specs.size() >= 2 && p.domains_per_client >= 2 && p.domains_per_client <= specs.size(),
         "domain-mixed partition needs 2 <= domains_per_client <= number of domains");
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("config: unknown key '" + key + "'");
  f->set(config, value);
  derive(config);
}

RunConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig c;
  for (const auto& [name, node] : tree) {
    const bool section = name == "ablations" || name == "data" || name == "model";
    if (node.empty() && !(section && node.data().empty())) {
      set_config_value(c, name, node.data());
      continue;
    }
    if (!section)
      throw ConfigError("config: unknown section [" + name + "]");
    for (const auto& [key, leaf] : node) set_config_value(c, name + "." + key, leaf.data());
  }
  derive(c);
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string to_config_text(const RunConfig& config) {
  std::string out;
  std::string section;
  for (const auto& [key, f] : fields()) {
    const auto dot = key.find('.');
    const std::string sec = dot == std::string::npos ? "" : key.substr(0, dot);
    if (sec != section) {
      out += "\n[" + sec + "]\n";
      section = sec;
    }
    const std::string value = f.get(config);
    if (value.empty()) continue;  // read_ini cannot express an empty list
    out += (dot == std::string::npos ? key : key.substr(dot + 1)) + " = " + value + "\n";
  }
  return out;
}

}  // namespace tsfed
