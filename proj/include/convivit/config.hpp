#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "convivit/data.hpp"
#include "convivit/model.hpp"
#include "convivit/train.hpp"

namespace convivit {

struct DataConfig {
  std::int64_t train_size = 400;
  std::int64_t test_size = 100;
  /// When set, clips come from `path<TAB>label` manifests instead of the generator.
  std::string train_manifest;
  std::string test_manifest;
};

/// Everything a CLI run resolves to. Seeds of the individual consumers
/// (initialization, train/test generation, shuffling) derive from `seed`.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SynthTaskSpec synth;
  DataConfig data;
  std::uint64_t seed = 0;

  void validate() const;
  std::uint64_t init_seed() const;
  std::uint64_t train_data_seed() const;
  std::uint64_t test_data_seed() const;
};

/// Parses flat `section.key=value` lines. Blank lines and lines starting
/// with '#' are skipped; anything else without '=' is an error.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text,
                                                                  const std::string& source);

/// Applies one setting; unknown keys and unparsable values throw ConfigError
/// naming the key and value.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);

/// Every key with its resolved value, one `key=value` per line, sorted.
std::string to_text(const RunConfig& config);

std::string model_config_to_text(const ModelConfig& config);
ModelConfig model_config_from_text(const std::string& text);

/// defaults < file < overrides (each `key=value`) < explicit seed.
RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                         const std::vector<std::string>& overrides,
                         std::optional<std::uint64_t> seed);

}  // namespace convivit
