#include "convivit/visualize.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "convivit/errors.hpp"

namespace convivit {

bool normalize_min_max(std::vector<float>& values) {
  if (values.empty()) return false;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const float mn = *lo, mx = *hi;
  if (!(mx - mn > 0.0f)) {
    std::fill(values.begin(), values.end(), 0.0f);
    return false;
  }
  for (auto& v : values) v = (v - mn) / (mx - mn);
  return true;
}

AttentionRanges attention_ranges(const AttentionSink& sink) {
  AttentionRanges r;
  std::set<int> heads;
  for (const auto& rec : sink.records) {
    r.layers = std::max(r.layers, rec.layer + 1);
    if (rec.stage == AttentionStage::Spatial) heads.insert(rec.head);
  }
  r.spatial_heads.assign(heads.begin(), heads.end());
  return r;
}

std::vector<Heatmap> export_attention_maps(const AttentionSink& sink, int layer, int head,
                                           std::int64_t h_tokens, std::int64_t w_tokens,
                                           int batch) {
  if (sink.records.empty()) throw Error("export_attention_maps: attention sink is empty");
  const auto ranges = attention_ranges(sink);
  const bool head_ok = std::find(ranges.spatial_heads.begin(), ranges.spatial_heads.end(), head) !=
                       ranges.spatial_heads.end();
  if (layer < 0 || layer >= ranges.layers || !head_ok) {
    std::string heads;
    for (auto h : ranges.spatial_heads) heads += (heads.empty() ? "" : ",") + std::to_string(h);
    throw ConfigError("attention layer " + std::to_string(layer) + " head " + std::to_string(head) +
                      " out of range: layers 0.." + std::to_string(ranges.layers - 1) +
                      ", spatial heads {" + heads + "}");
  }
  std::map<int, const AttentionRecord*> frames;
  for (const auto& rec : sink.records) {
    if (rec.layer == layer && rec.head == head && rec.batch == batch &&
        rec.stage == AttentionStage::Spatial) {
      frames[rec.slice] = &rec;
    }
  }
  if (frames.empty()) throw ConfigError("no attention recorded for batch item " + std::to_string(batch));
  std::vector<Heatmap> out;
  for (const auto& [frame, rec] : frames) {
    if (rec->cols != h_tokens * w_tokens) {
      throw ShapeError("attention over " + std::to_string(rec->cols) + " tokens does not fit a " +
                       std::to_string(h_tokens) + "x" + std::to_string(w_tokens) + " grid");
    }
    Heatmap h;
    h.rows = h_tokens;
    h.cols = w_tokens;
    h.values.assign(static_cast<std::size_t>(rec->cols), 0.0f);
    for (int c = 0; c < rec->cols; ++c) {
      double s = 0.0;
      for (int r = 0; r < rec->rows; ++r) s += rec->weight(r, c);
      h.values[static_cast<std::size_t>(c)] = static_cast<float>(s / rec->rows);
    }
    h.degenerate = !normalize_min_max(h.values);
    out.push_back(std::move(h));
  }
  return out;
}

Heatmap feature_map(const Tensor& activation, std::int64_t batch, std::int64_t frame) {
  if (activation.rank() != 5) {
    throw ShapeError("feature_map: expected B x C x T x H x W, got " + shape_str(activation.shape()));
  }
  const auto C = activation.dim(1), T = activation.dim(2), H = activation.dim(3), W = activation.dim(4);
  if (batch < 0 || batch >= activation.dim(0) || frame < 0 || frame >= T) {
    throw ShapeError("feature_map: batch/frame index out of range");
  }
  Heatmap h;
  h.rows = H;
  h.cols = W;
  h.values.assign(static_cast<std::size_t>(H * W), 0.0f);
  auto x = activation.data();
  for (std::int64_t c = 0; c < C; ++c) {
    const float* plane = x.data() + (((batch * C + c) * T + frame) * H * W);
    for (std::int64_t i = 0; i < H * W; ++i) h.values[static_cast<std::size_t>(i)] += std::abs(plane[i]);
  }
  for (auto& v : h.values) v /= static_cast<float>(C);
  return h;
}

}  // namespace convivit
