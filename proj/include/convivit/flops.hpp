#pragma once

#include <cstdint>
#include <string>

#include "convivit/model.hpp"

namespace convivit {

/// Multiply-accumulate counts per pipeline stage.
struct StageMacs {
  std::int64_t stem = 0;
  std::int64_t patch_embed = 0;  // includes the position-embedding conv
  std::int64_t spatial_attention = 0;
  std::int64_t temporal_attention = 0;
  std::int64_t joint_attention = 0;
  std::int64_t mlp = 0;
  std::int64_t head = 0;

  std::int64_t total() const {
    return stem + patch_embed + spatial_attention + temporal_attention + joint_attention + mlp + head;
  }
};

/// Analytic cost of one forward pass, for both factorized variants and a
/// hypothetical joint attention over all T*N tokens.
struct FlopReport {
  std::int64_t batch = 1, frames = 0, height = 0, width = 0;
  std::int64_t time_tokens = 0, spatial_tokens = 0, embed_dim = 0;
  StageMacs factorized_self;
  StageMacs factorized_dot_product;
  StageMacs joint;

  static const char* accounting();
  static const char* csv_header();
  std::string to_csv() const;
  std::string to_table() const;
};

FlopReport count_flops(const ModelConfig& config, std::int64_t batch, std::int64_t frames,
                       std::int64_t height, std::int64_t width);

}  // namespace convivit
