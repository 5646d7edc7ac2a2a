#pragma once

#include <cstdint>
#include <vector>

#include "convivit/nn.hpp"
#include "convivit/tensor.hpp"

namespace convivit {

/// Token-grid heatmap with values in [0, 1], row-major rows x cols.
struct Heatmap {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<float> values;
  /// Min and max coincided, so every value was set to zero.
  bool degenerate = false;
};

/// Layers and spatial heads present in a sink (for range diagnostics).
struct AttentionRanges {
  int layers = 0;
  std::vector<int> spatial_heads;
};
AttentionRanges attention_ranges(const AttentionSink& sink);

/// Attention received by each spatial token averaged over queries, min-max
/// normalized. One map per frame for the chosen layer, head and batch item.
/// Throws Error on an empty sink and ConfigError when layer/head select no
/// spatial records.
std::vector<Heatmap> export_attention_maps(const AttentionSink& sink, int layer, int head,
                                           std::int64_t h_tokens, std::int64_t w_tokens,
                                           int batch = 0);

/// Channel mean of |x| for one frame of a B x C x T x H x W activation.
Heatmap feature_map(const Tensor& activation, std::int64_t batch, std::int64_t frame);

/// Min-max normalization in place; returns false when the range is degenerate.
bool normalize_min_max(std::vector<float>& values);

}  // namespace convivit
