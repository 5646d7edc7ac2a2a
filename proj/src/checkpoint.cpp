#include "convivit/checkpoint.hpp"

#include "binary_io.hpp"
#include "convivit/config.hpp"
#include "convivit/errors.hpp"

namespace convivit {

void save_checkpoint(const ConViViT& model, const std::filesystem::path& path) {
  BinaryWriter w;
  w.bytes("CVVTW", 5);
  w.u32(kCheckpointVersion);
  w.string(model_config_to_text(model.config()));
  for (const auto& e : model.parameters().entries()) {
    w.string(e.name);
    const auto& shape = e.tensor.shape();
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) w.u32(static_cast<std::uint32_t>(d));
    w.floats(e.tensor.data());
  }
  w.write_file(path);
}

ConViViT load_checkpoint(const std::filesystem::path& path) {
  BinaryReader r(read_file(path), path.string());
  r.expect_magic("CVVTW", "checkpoint");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw IoError(path.string() + ": checkpoint format version " + std::to_string(version) +
                  " not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto config_len = r.u32("config length");
  ModelConfig config;
  try {
    config = model_config_from_text(r.string(config_len, "config block"));
  } catch (const ConfigError& e) {
    throw IoError(path.string() + ": bad config block: " + e.what());
  }
  ParameterStore store;
  while (!r.at_end()) {
    const auto name_len = r.u32("tensor name length");
    const auto name = r.string(name_len, "tensor name");
    const auto rank = r.u32("rank of " + name);
    if (rank > 8) throw IoError(path.string() + ": implausible rank for " + name);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32("extents of " + name));
    const auto n = r.checked_count(shape, "extents of " + name);
    store.add(name, Tensor(shape, r.floats(n, "values of " + name)), false);
  }
  return ConViViT(config, std::move(store));
}

}  // namespace convivit
