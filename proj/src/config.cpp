#include "convivit/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "convivit/errors.hpp"
#include "convivit/rng.hpp"

namespace convivit {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& why) {
  throw ConfigError("invalid value '" + value + "' for " + key + ": " + why);
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "expected an integer");
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "expected a non-negative integer");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "expected a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "expected true or false");
}

std::vector<std::int64_t> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<std::int64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int(key, trim(item)));
  if (out.empty()) bad_value(key, v, "expected a comma-separated list");
  return out;
}

std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string join(const std::vector<std::int64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    auto int_field = [&](const std::string& key, auto member) {
      t[key] = {[member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = parse_int(k, v); },
                [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }};
    };
    auto double_field = [&](const std::string& key, auto member) {
      t[key] = {[member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = parse_double(k, v); },
                [member](const RunConfig& c) { return fmt(member(const_cast<RunConfig&>(c))); }};
    };
    auto string_field = [&](const std::string& key, auto member) {
      t[key] = {[member](RunConfig& c, const std::string&, const std::string& v) { member(c) = v; },
                [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); }};
    };

    int_field("model.in_channels", [](RunConfig& c) -> std::int64_t& { return c.model.in_channels; });
    t["model.stem_channels"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) { c.model.stem_channels = parse_int_list(k, v); },
        [](const RunConfig& c) { return join(c.model.stem_channels); }};
    int_field("model.cnn_blocks", [](RunConfig& c) -> std::int64_t& { return c.model.cnn_blocks; });
    t["model.patch"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          auto p = parse_int_list(k, v);
          if (p.size() != 3) bad_value(k, v, "expected three extents t,h,w");
          c.model.patch = {p[0], p[1], p[2]};
        },
        [](const RunConfig& c) { return join({c.model.patch[0], c.model.patch[1], c.model.patch[2]}); }};
    int_field("model.embed_dim", [](RunConfig& c) -> std::int64_t& { return c.model.embed_dim; });
    int_field("model.depth", [](RunConfig& c) -> std::int64_t& { return c.model.depth; });
    int_field("model.heads", [](RunConfig& c) -> std::int64_t& { return c.model.heads; });
    int_field("model.mlp_ratio", [](RunConfig& c) -> std::int64_t& { return c.model.mlp_ratio; });
    t["model.variant"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          try {
            c.model.variant = parse_variant(v);
          } catch (const ConfigError&) {
            bad_value(k, v, "expected factorized_self or factorized_dot_product");
          }
        },
        [](const RunConfig& c) { return std::string(variant_name(c.model.variant)); }};
    int_field("model.num_classes", [](RunConfig& c) -> std::int64_t& { return c.model.num_classes; });
    t["model.dpe"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) { c.model.dpe = parse_bool(k, v); },
        [](const RunConfig& c) { return std::string(c.model.dpe ? "true" : "false"); }};
    t["model.large_kernel"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          try {
            c.model.large_kernel = parse_large_kernel(v);
          } catch (const ConfigError&) {
            bad_value(k, v, "expected depthwise or dense");
          }
        },
        [](const RunConfig& c) { return std::string(large_kernel_name(c.model.large_kernel)); }};

    t["train.optimizer"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          try {
            c.train.optimizer = parse_optimizer(v);
          } catch (const ConfigError&) {
            bad_value(k, v, "expected sgd or adam");
          }
        },
        [](const RunConfig& c) { return std::string(optimizer_name(c.train.optimizer)); }};
    double_field("train.lr", [](RunConfig& c) -> double& { return c.train.learning_rate; });
    double_field("train.momentum", [](RunConfig& c) -> double& { return c.train.momentum; });
    double_field("train.beta1", [](RunConfig& c) -> double& { return c.train.beta1; });
    double_field("train.beta2", [](RunConfig& c) -> double& { return c.train.beta2; });
    int_field("train.batch_size", [](RunConfig& c) -> std::int64_t& { return c.train.batch_size; });
    int_field("train.epochs", [](RunConfig& c) -> std::int64_t& { return c.train.epochs; });
    double_field("train.clip_norm", [](RunConfig& c) -> double& { return c.train.clip_norm; });
    double_field("train.target_accuracy", [](RunConfig& c) -> double& { return c.train.target_accuracy; });

    int_field("data.frames", [](RunConfig& c) -> std::int64_t& { return c.synth.frames; });
    int_field("data.height", [](RunConfig& c) -> std::int64_t& { return c.synth.height; });
    int_field("data.width", [](RunConfig& c) -> std::int64_t& { return c.synth.width; });
    double_field("data.blob_radius", [](RunConfig& c) -> double& { return c.synth.blob_radius; });
    double_field("data.speed", [](RunConfig& c) -> double& { return c.synth.speed; });
    double_field("data.noise_std", [](RunConfig& c) -> double& { return c.synth.noise_std; });
    int_field("data.distractors", [](RunConfig& c) -> std::int64_t& { return c.synth.distractors; });
    int_field("data.train_size", [](RunConfig& c) -> std::int64_t& { return c.data.train_size; });
    int_field("data.test_size", [](RunConfig& c) -> std::int64_t& { return c.data.test_size; });
    string_field("data.train_manifest", [](RunConfig& c) -> std::string& { return c.data.train_manifest; });
    string_field("data.test_manifest", [](RunConfig& c) -> std::string& { return c.data.test_manifest; });

    t["run.seed"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_uint(k, v); },
        [](const RunConfig& c) { return std::to_string(c.seed); }};
    return t;
  }();
  return table;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
  synth.validate();
  if (data.train_size < 1 || data.test_size < 1) throw ConfigError("data: train_size and test_size must be >= 1");
  if (data.train_manifest.empty() != data.test_manifest.empty()) {
    throw ConfigError("data: train_manifest and test_manifest must be given together");
  }
}

std::uint64_t RunConfig::init_seed() const { return mix_seed(seed, 0); }
std::uint64_t RunConfig::train_data_seed() const { return mix_seed(seed, 1); }
std::uint64_t RunConfig::test_data_seed() const { return mix_seed(seed, 2); }

std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text,
                                                                  const std::string& source) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    }
    out.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return out;
}

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
  const auto& table = fields();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(config, key, value);
  config.synth.num_classes = config.model.num_classes;
  config.train.seed = config.seed;
}

std::string to_text(const RunConfig& config) {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + "=" + field.get(config) + "\n";
  return out;
}

std::string model_config_to_text(const ModelConfig& config) {
  RunConfig rc;
  rc.model = config;
  std::string out;
  for (const auto& [key, field] : fields()) {
    if (key.rfind("model.", 0) == 0) out += key + "=" + field.get(rc) + "\n";
  }
  return out;
}

ModelConfig model_config_from_text(const std::string& text) {
  RunConfig rc;
  for (const auto& [k, v] : parse_key_values(text, "model config")) {
    if (k.rfind("model.", 0) != 0) throw ConfigError("unexpected key '" + k + "' in model config");
    apply_setting(rc, k, v);
  }
  rc.model.validate();
  return rc.model;
}

RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                         const std::vector<std::string>& overrides,
                         std::optional<std::uint64_t> seed) {
  RunConfig config;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw IoError("cannot open config file " + file->string());
    std::stringstream ss;
    ss << in.rdbuf();
    for (const auto& [k, v] : parse_key_values(ss.str(), file->string())) apply_setting(config, k, v);
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + o + "'");
    apply_setting(config, trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
  if (seed) apply_setting(config, "run.seed", std::to_string(*seed));
  config.synth.num_classes = config.model.num_classes;
  config.train.seed = config.seed;
  config.validate();
  return config;
}

}  // namespace convivit
