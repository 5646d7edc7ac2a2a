#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "convivit/rng.hpp"
#include "convivit/tensor.hpp"

namespace convivit {

using Triple = std::array<std::int64_t, 3>;

/// Geometry of a 3D convolution over B x C x T x H x W inputs.
/// Weights are laid out Cout x (Cin / groups) x kt x kh x kw.
struct Conv3dSpec {
  std::int64_t in_channels = 1;
  std::int64_t out_channels = 1;
  Triple kernel{1, 1, 1};
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};
  std::int64_t groups = 1;

  /// Throws ShapeError unless channels divide by groups and all extents are positive.
  void validate() const;
  bool depthwise() const { return groups == in_channels && groups == out_channels; }
  Shape weight_shape() const;
  /// Output extents (T', H', W') for input extents (T, H, W).
  Triple output_extents(const Triple& input) const;

  static Conv3dSpec depthwise_spec(std::int64_t channels, std::int64_t kernel, std::int64_t pad,
                                   Triple stride = {1, 1, 1});
  static Conv3dSpec pointwise(std::int64_t in, std::int64_t out, Triple stride = {1, 1, 1});
};

/// Cross-correlation (no kernel flip) with zero padding. `bias` may be undefined.
Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv3dSpec& spec);

/// conv3d restricted to groups == channels (one filter per channel).
Tensor depthwise_conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        const Conv3dSpec& spec);

enum class Mode { Train, Eval };

/// Running statistics of a batch-norm layer. These are the only mutable
/// state touched by a forward pass (train mode only).
struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;

  static BatchNormStats fresh(std::int64_t channels);
};

/// Per-channel normalization over (B, T, H, W). Train mode normalizes with
/// batch statistics (biased variance) and folds them into `stats` with the
/// configured momentum (unbiased variance); eval mode uses the running values.
Tensor batch_norm3d(const Tensor& x, const Tensor& scale, const Tensor& shift,
                    BatchNormStats& stats, Mode mode);

/// y = x W^T + b over the last axis. weight: out x in, bias: out (optional).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Exact GELU, 0.5 x (1 + erf(x / sqrt 2)).
Tensor gelu(const Tensor& x);

/// Normalizes over the last axis, eps = 1e-5, then applies scale and shift.
Tensor layer_norm(const Tensor& x, const Tensor& scale, const Tensor& shift);

struct AttentionSpec {
  std::int64_t embed_dim = 1;
  std::int64_t num_heads = 1;

  std::int64_t head_dim() const { return embed_dim / num_heads; }
  void validate() const;
};

/// Query/key/value/output projections of one attention layer (weights D x D).
struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

enum class AttentionStage { Spatial, Temporal };

const char* stage_name(AttentionStage stage);

/// Softmax weights of one head for one attention slice.
struct AttentionRecord {
  int layer = 0;
  AttentionStage stage = AttentionStage::Spatial;
  int head = 0;
  int batch = 0;
  /// Frame index for spatial attention, spatial-token index for temporal.
  int slice = 0;
  int rows = 0;
  int cols = 0;
  std::vector<float> weights;  // rows x cols, row-major

  float weight(int r, int c) const { return weights[static_cast<std::size_t>(r * cols + c)]; }
};

struct AttentionSink {
  std::vector<AttentionRecord> records;
};

/// Where captured attention weights go and how to label them. Sequences of
/// the attention call are indexed batch * slices_per_batch + slice.
struct AttentionCapture {
  AttentionSink* sink = nullptr;
  int layer = 0;
  AttentionStage stage = AttentionStage::Spatial;
  int slices_per_batch = 1;
  int head_offset = 0;
};

/// Scaled dot-product attention over pre-split heads: q is ... x Sq x d,
/// k and v are ... x Sk x d. Returns (... x Sq x d output, ... x Sq x Sk weights).
std::pair<Tensor, Tensor> scaled_dot_product_attention(const Tensor& q, const Tensor& k,
                                                       const Tensor& v);

/// Copies the weights tensor (B' x H x Sq x Sk) into capture->sink.
void capture_attention(const Tensor& weights, const AttentionCapture& capture);

/// Multi-head attention over sequences: query B' x Sq x D, key/value
/// B' x Sk x D. Projects, attends per head with scale 1/sqrt(head_dim),
/// concatenates the heads and applies the output projection.
Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value,
                            const AttentionParams& params, const AttentionSpec& spec,
                            const AttentionCapture* capture = nullptr);

// Initializers.
Tensor trunc_normal(const Shape& shape, double stddev, Rng& rng);
/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
Tensor fan_in_uniform(const Shape& shape, std::int64_t fan_in, Rng& rng);

}  // namespace convivit
