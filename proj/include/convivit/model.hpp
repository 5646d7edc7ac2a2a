#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "convivit/nn.hpp"
#include "convivit/tensor.hpp"

namespace convivit {

enum class Variant { FactorizedSelf, FactorizedDotProduct };

/// Kernel grouping of the 5x5x5 stage of each CNN block.
enum class LargeKernel { Depthwise, Dense };

const char* variant_name(Variant v);
Variant parse_variant(const std::string& s);
const char* large_kernel_name(LargeKernel k);
LargeKernel parse_large_kernel(const std::string& s);

struct ModelConfig {
  std::int64_t in_channels = 3;
  std::vector<std::int64_t> stem_channels{64, 128};
  std::int64_t cnn_blocks = 2;
  Triple patch{1, 4, 4};
  std::int64_t embed_dim = 128;
  std::int64_t depth = 4;
  std::int64_t heads = 4;
  std::int64_t mlp_ratio = 4;
  Variant variant = Variant::FactorizedSelf;
  std::int64_t num_classes = 4;
  bool dpe = true;
  LargeKernel large_kernel = LargeKernel::Depthwise;

  /// Throws ConfigError on inconsistent hyperparameters.
  void validate() const;
  /// Throws ShapeError when a B x C x T x H x W clip cannot flow through the
  /// pipeline (channel count, divisibility by stem stride times patch).
  void validate_input(const Shape& clip) const;
  std::int64_t stem_out_channels() const;
  /// Spatial downsampling factor of the CNN module (2 per block).
  std::int64_t stem_stride() const { return std::int64_t{1} << cnn_blocks; }
};

/// Tokens laid out B x T x N x D with N = h_tokens * w_tokens.
struct TokenGrid {
  Tensor tokens;
  std::int64_t h_tokens = 0;
  std::int64_t w_tokens = 0;

  std::int64_t batch() const { return tokens.dim(0); }
  std::int64_t time() const { return tokens.dim(1); }
  std::int64_t count() const { return tokens.dim(2); }
  std::int64_t dim() const { return tokens.dim(3); }
};

/// Channel plan of one CNN block: depthwise 3^3 -> pointwise reduce to
/// out/4 -> 5^3 stride (1,2,2) -> pointwise expand, plus a strided 1^3
/// residual projection of the block input.
struct CnnBlockSpec {
  std::int64_t in_channels = 3;
  std::int64_t out_channels = 64;
  LargeKernel large_kernel = LargeKernel::Depthwise;

  std::int64_t mid_channels() const { return out_channels / 4; }
  Conv3dSpec depthwise() const;
  Conv3dSpec reduce() const;
  Conv3dSpec large() const;
  Conv3dSpec expand() const;
  Conv3dSpec residual() const;
};

struct CnnBlockParams {
  Tensor dw_weight, dw_bias;
  Tensor bn1_scale, bn1_shift;
  BatchNormStats bn1;
  Tensor reduce_weight, reduce_bias;
  Tensor large_weight, large_bias;
  Tensor bn2_scale, bn2_shift;
  BatchNormStats bn2;
  Tensor expand_weight, expand_bias;
  Tensor residual_weight, residual_bias;
};

struct TransformerBlockParams {
  // Factorized-self: norm1/attn1 spatial, norm2/attn2 temporal.
  // Factorized dot-product: norm1/attn1 only, heads split between axes.
  Tensor norm1_scale, norm1_shift;
  AttentionParams attn1;
  Tensor norm2_scale, norm2_shift;
  AttentionParams attn2;
  Tensor norm_mlp_scale, norm_mlp_shift;
  Tensor fc1_weight, fc1_bias, fc2_weight, fc2_bias;
};

/// Named tensors in registration order. Buffers (batch-norm running
/// statistics) are stored but never trained.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool trainable = true;
  };

  Tensor& add(const std::string& name, Tensor t, bool trainable = true);
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  /// Trainable element count.
  std::int64_t parameter_count() const;
  /// Name without its last component, e.g. "stem.block0" for "stem.block0.dw_weight".
  static std::string group_of(const std::string& name);

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Intermediate activations captured by a forward pass.
struct ForwardTrace {
  std::vector<Tensor> stem_blocks;  // output of each CNN block
  std::vector<TokenGrid> grids;     // input of every transformer block, then the final grid
};

Tensor cnn_block_forward(const Tensor& x, CnnBlockParams& p, const CnnBlockSpec& spec, Mode mode);

/// Stem of `config.cnn_blocks` blocks; B x 3 x T x H x W -> B x C x T x H/s x W/s.
Tensor cnn_module_forward(const Tensor& x, std::vector<CnnBlockParams>& blocks,
                          const ModelConfig& config, Mode mode, ForwardTrace* trace = nullptr);

/// Non-overlapping conv (kernel == stride == patch) to embed_dim, regrouped as tokens.
TokenGrid patch_embed(const Tensor& x, const Tensor& weight, const Tensor& bias,
                      const ModelConfig& config);

/// tokens + depthwise 3^3 conv (zero padding 1) over the (T, h, w) token volume.
TokenGrid dynamic_position_embed(const TokenGrid& t, const Tensor& weight, const Tensor& bias);

/// Pre-norm residual self-attention among the N tokens of each frame.
TokenGrid spatial_attention_stage(const TokenGrid& t, const Tensor& norm_scale,
                                  const Tensor& norm_shift, const AttentionParams& attn,
                                  const AttentionSpec& spec, AttentionSink* sink = nullptr,
                                  int layer = 0);

/// Pre-norm residual self-attention among the T tokens at each spatial position.
TokenGrid temporal_attention_stage(const TokenGrid& t, const Tensor& norm_scale,
                                   const Tensor& norm_shift, const AttentionParams& attn,
                                   const AttentionSpec& spec, AttentionSink* sink = nullptr,
                                   int layer = 0);

/// Pre-norm residual MLP (GELU hidden layer).
TokenGrid mlp_stage(const TokenGrid& t, const TransformerBlockParams& p);

TokenGrid factorized_self_attention_block(const TokenGrid& t, const TransformerBlockParams& p,
                                          const AttentionSpec& spec, AttentionSink* sink = nullptr,
                                          int layer = 0);

/// Half of the heads attend within each frame and half along time, all from
/// the same normalized input; heads are fused by the shared output projection.
TokenGrid factorized_dot_product_block(const TokenGrid& t, const TransformerBlockParams& p,
                                       const AttentionSpec& spec, AttentionSink* sink = nullptr,
                                       int layer = 0);

/// The full network: CNN module, patch embedding, dynamic position
/// embedding, transformer blocks, final norm, token mean-pool, linear head.
class ConViViT {
 public:
  /// Fresh parameters drawn from `seed`.
  ConViViT(ModelConfig config, std::uint64_t seed);
  /// Adopts an existing store (e.g. from a checkpoint). Every expected name
  /// must be present with the expected shape.
  ConViViT(ModelConfig config, ParameterStore store);

  ConViViT(const ConViViT&) = delete;
  ConViViT& operator=(const ConViViT&) = delete;
  ConViViT(ConViViT&&) = default;
  ConViViT& operator=(ConViViT&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }

  /// clip: B x 3 x T x H x W -> logits B x num_classes.
  Tensor forward(const Tensor& clip, Mode mode, AttentionSink* sink = nullptr,
                 ForwardTrace* trace = nullptr);

  std::vector<CnnBlockParams>& cnn_blocks() { return cnn_; }
  std::vector<TransformerBlockParams>& transformer_blocks() { return blocks_; }
  AttentionSpec attention_spec() const { return {config_.embed_dim, config_.heads}; }
  Tensor& patch_weight() { return store_.get("patch_embed.weight"); }
  Tensor& patch_bias() { return store_.get("patch_embed.bias"); }
  Tensor& dpe_weight() { return store_.get("dpe.weight"); }
  Tensor& dpe_bias() { return store_.get("dpe.bias"); }

  /// Applies one transformer block of the configured variant.
  TokenGrid transformer_block(const TokenGrid& t, int layer, AttentionSink* sink = nullptr);

 private:
  void bind();

  ModelConfig config_;
  ParameterStore store_;
  std::vector<CnnBlockParams> cnn_;
  std::vector<TransformerBlockParams> blocks_;
};

/// Expected (name, shape, trainable) layout of a config, in registration order.
struct ParameterSpec {
  std::string name;
  Shape shape;
  bool trainable;
};
std::vector<ParameterSpec> parameter_layout(const ModelConfig& config);

}  // namespace convivit
