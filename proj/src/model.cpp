#include "convivit/model.hpp"

#include <algorithm>

#include "convivit/errors.hpp"
#include "convivit/ops.hpp"

namespace convivit {

const char* variant_name(Variant v) {
  return v == Variant::FactorizedSelf ? "factorized_self" : "factorized_dot_product";
}

Variant parse_variant(const std::string& s) {
  if (s == "factorized_self") return Variant::FactorizedSelf;
  if (s == "factorized_dot_product") return Variant::FactorizedDotProduct;
  throw ConfigError("unknown variant '" + s + "' (expected factorized_self or factorized_dot_product)");
}

const char* large_kernel_name(LargeKernel k) {
  return k == LargeKernel::Depthwise ? "depthwise" : "dense";
}

LargeKernel parse_large_kernel(const std::string& s) {
  if (s == "depthwise") return LargeKernel::Depthwise;
  if (s == "dense") return LargeKernel::Dense;
  throw ConfigError("unknown large_kernel '" + s + "' (expected depthwise or dense)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model: " + msg); };
  if (in_channels != 3) fail("in_channels must be 3 (RGB clips)");
  if (cnn_blocks != 1 && cnn_blocks != 2) fail("cnn_blocks must be 1 or 2");
  if (static_cast<std::int64_t>(stem_channels.size()) < cnn_blocks) {
    fail("stem_channels lists fewer widths than cnn_blocks");
  }
  for (auto c : stem_channels) {
    if (c <= 0 || c % 4 != 0) fail("stem channel widths must be positive multiples of 4");
  }
  if (cnn_blocks == 2 && stem_channels[1] != 128) fail("a two-block stem must emit 128 channels");
  for (auto p : patch) {
    if (p <= 0) fail("patch extents must be positive");
  }
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0) {
    fail("embed_dim must be a positive multiple of heads");
  }
  if (variant == Variant::FactorizedDotProduct && heads % 2 != 0) {
    fail("factorized_dot_product needs an even head count");
  }
  if (depth < 1) fail("depth must be >= 1");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (num_classes < 2) fail("num_classes must be >= 2");
}

std::int64_t ModelConfig::stem_out_channels() const {
  return stem_channels[static_cast<std::size_t>(cnn_blocks - 1)];
}

void ModelConfig::validate_input(const Shape& clip) const {
  if (clip.size() != 5) throw ShapeError("clip must be B x 3 x T x H x W, got " + shape_str(clip));
  if (clip[1] != in_channels) {
    throw ShapeError("clip has " + std::to_string(clip[1]) + " channels, expected " +
                     std::to_string(in_channels));
  }
  const auto s = stem_stride();
  if (clip[2] % patch[0] != 0 || clip[3] % (s * patch[1]) != 0 || clip[4] % (s * patch[2]) != 0) {
    throw ShapeError("clip " + shape_str(clip) + ": T must be a multiple of " +
                     std::to_string(patch[0]) + " and H, W multiples of " +
                     std::to_string(s * patch[1]) + ", " + std::to_string(s * patch[2]));
  }
}

Conv3dSpec CnnBlockSpec::depthwise() const { return Conv3dSpec::depthwise_spec(in_channels, 3, 1); }

Conv3dSpec CnnBlockSpec::reduce() const { return Conv3dSpec::pointwise(in_channels, mid_channels()); }

Conv3dSpec CnnBlockSpec::large() const {
  Conv3dSpec s;
  s.in_channels = s.out_channels = mid_channels();
  s.groups = large_kernel == LargeKernel::Depthwise ? mid_channels() : 1;
  s.kernel = {5, 5, 5};
  s.stride = {1, 2, 2};
  s.padding = {2, 2, 2};
  return s;
}

Conv3dSpec CnnBlockSpec::expand() const { return Conv3dSpec::pointwise(mid_channels(), out_channels); }

Conv3dSpec CnnBlockSpec::residual() const {
  return Conv3dSpec::pointwise(in_channels, out_channels, {1, 2, 2});
}

Tensor& ParameterStore::add(const std::string& name, Tensor t, bool trainable) {
  if (index_.count(name)) throw Error("duplicate parameter '" + name + "'");
  if (trainable) t.set_requires_grad(true);
  index_[name] = entries_.size();
  entries_.push_back({name, std::move(t), trainable});
  return entries_.back().tensor;
}

Tensor& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
  return entries_[it->second].tensor;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
  return entries_[it->second].tensor;
}

std::int64_t ParameterStore::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) {
    if (e.trainable) n += e.tensor.numel();
  }
  return n;
}

std::string ParameterStore::group_of(const std::string& name) {
  const auto pos = name.rfind('.');
  return pos == std::string::npos ? name : name.substr(0, pos);
}

namespace {

CnnBlockSpec block_spec(const ModelConfig& config, std::int64_t i) {
  CnnBlockSpec s;
  s.in_channels = i == 0 ? config.in_channels : config.stem_channels[static_cast<std::size_t>(i - 1)];
  s.out_channels = config.stem_channels[static_cast<std::size_t>(i)];
  s.large_kernel = config.large_kernel;
  return s;
}

void add_conv(std::vector<ParameterSpec>& out, const std::string& prefix, const Conv3dSpec& s) {
  out.push_back({prefix + ".weight", s.weight_shape(), true});
  out.push_back({prefix + ".bias", {s.out_channels}, true});
}

void add_bn(std::vector<ParameterSpec>& out, const std::string& prefix, std::int64_t c) {
  out.push_back({prefix + ".scale", {c}, true});
  out.push_back({prefix + ".shift", {c}, true});
  out.push_back({prefix + ".running_mean", {c}, false});
  out.push_back({prefix + ".running_var", {c}, false});
}

void add_norm(std::vector<ParameterSpec>& out, const std::string& prefix, std::int64_t d) {
  out.push_back({prefix + ".scale", {d}, true});
  out.push_back({prefix + ".shift", {d}, true});
}

void add_linear(std::vector<ParameterSpec>& out, const std::string& prefix, std::int64_t in,
                std::int64_t o) {
  out.push_back({prefix + ".weight", {o, in}, true});
  out.push_back({prefix + ".bias", {o}, true});
}

void add_attention(std::vector<ParameterSpec>& out, const std::string& prefix, std::int64_t d) {
  for (const char* p : {"q", "k", "v", "o"}) add_linear(out, prefix + "." + p, d, d);
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

Tensor initial_value(const ParameterSpec& p, Rng& rng) {
  if (ends_with(p.name, ".running_var") || ends_with(p.name, ".scale")) return Tensor::ones(p.shape);
  if (ends_with(p.name, ".bias") || ends_with(p.name, ".shift") ||
      ends_with(p.name, ".running_mean")) {
    return Tensor::zeros(p.shape);
  }
  if (p.shape.size() == 5) {
    return fan_in_uniform(p.shape, p.shape[1] * p.shape[2] * p.shape[3] * p.shape[4], rng);
  }
  return trunc_normal(p.shape, 0.02, rng);
}

}  // namespace

std::vector<ParameterSpec> parameter_layout(const ModelConfig& config) {
  config.validate();
  std::vector<ParameterSpec> out;
  for (std::int64_t i = 0; i < config.cnn_blocks; ++i) {
    const auto s = block_spec(config, i);
    const std::string pre = "stem.block" + std::to_string(i);
    add_conv(out, pre + ".dw", s.depthwise());
    add_bn(out, pre + ".bn1", s.in_channels);
    add_conv(out, pre + ".reduce", s.reduce());
    add_conv(out, pre + ".large", s.large());
    add_bn(out, pre + ".bn2", s.mid_channels());
    add_conv(out, pre + ".expand", s.expand());
    add_conv(out, pre + ".residual", s.residual());
  }
  const auto D = config.embed_dim;
  Conv3dSpec patch;
  patch.in_channels = config.stem_out_channels();
  patch.out_channels = D;
  patch.kernel = patch.stride = config.patch;
  add_conv(out, "patch_embed", patch);
  if (config.dpe) add_conv(out, "dpe", Conv3dSpec::depthwise_spec(D, 3, 1));
  for (std::int64_t l = 0; l < config.depth; ++l) {
    const std::string pre = "blocks." + std::to_string(l);
    add_norm(out, pre + ".norm1", D);
    add_attention(out, pre + ".attn1", D);
    if (config.variant == Variant::FactorizedSelf) {
      add_norm(out, pre + ".norm2", D);
      add_attention(out, pre + ".attn2", D);
    }
    add_norm(out, pre + ".norm_mlp", D);
    add_linear(out, pre + ".mlp.fc1", D, D * config.mlp_ratio);
    add_linear(out, pre + ".mlp.fc2", D * config.mlp_ratio, D);
  }
  add_norm(out, "norm", D);
  add_linear(out, "head", D, config.num_classes);
  return out;
}

ConViViT::ConViViT(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  Rng rng(seed);
  for (const auto& p : parameter_layout(config_)) {
    store_.add(p.name, initial_value(p, rng), p.trainable);
  }
  bind();
}

ConViViT::ConViViT(ModelConfig config, ParameterStore store) : config_(std::move(config)) {
  for (const auto& p : parameter_layout(config_)) {
    if (!store.contains(p.name)) throw IoError("checkpoint lacks parameter '" + p.name + "'");
    Tensor t = store.get(p.name).detach();
    if (t.shape() != p.shape) {
      throw IoError("parameter '" + p.name + "' has shape " + shape_str(t.shape()) +
                    ", config expects " + shape_str(p.shape));
    }
    store_.add(p.name, t, p.trainable);
  }
  if (store.entries().size() != store_.entries().size()) {
    throw IoError("checkpoint carries parameters the config does not use");
  }
  bind();
}

void ConViViT::bind() {
  cnn_.assign(static_cast<std::size_t>(config_.cnn_blocks), {});
  for (std::int64_t i = 0; i < config_.cnn_blocks; ++i) {
    auto& b = cnn_[static_cast<std::size_t>(i)];
    const std::string pre = "stem.block" + std::to_string(i);
    auto get = [&](const std::string& n) { return store_.get(pre + "." + n); };
    b.dw_weight = get("dw.weight");
    b.dw_bias = get("dw.bias");
    b.bn1_scale = get("bn1.scale");
    b.bn1_shift = get("bn1.shift");
    b.bn1.running_mean = get("bn1.running_mean");
    b.bn1.running_var = get("bn1.running_var");
    b.reduce_weight = get("reduce.weight");
    b.reduce_bias = get("reduce.bias");
    b.large_weight = get("large.weight");
    b.large_bias = get("large.bias");
    b.bn2_scale = get("bn2.scale");
    b.bn2_shift = get("bn2.shift");
    b.bn2.running_mean = get("bn2.running_mean");
    b.bn2.running_var = get("bn2.running_var");
    b.expand_weight = get("expand.weight");
    b.expand_bias = get("expand.bias");
    b.residual_weight = get("residual.weight");
    b.residual_bias = get("residual.bias");
  }
  blocks_.assign(static_cast<std::size_t>(config_.depth), {});
  for (std::int64_t l = 0; l < config_.depth; ++l) {
    auto& b = blocks_[static_cast<std::size_t>(l)];
    const std::string pre = "blocks." + std::to_string(l);
    auto get = [&](const std::string& n) { return store_.get(pre + "." + n); };
    auto attn = [&](const std::string& n) {
      return AttentionParams{get(n + ".q.weight"), get(n + ".q.bias"), get(n + ".k.weight"),
                             get(n + ".k.bias"),   get(n + ".v.weight"), get(n + ".v.bias"),
                             get(n + ".o.weight"), get(n + ".o.bias")};
    };
    b.norm1_scale = get("norm1.scale");
    b.norm1_shift = get("norm1.shift");
    b.attn1 = attn("attn1");
    if (config_.variant == Variant::FactorizedSelf) {
      b.norm2_scale = get("norm2.scale");
      b.norm2_shift = get("norm2.shift");
      b.attn2 = attn("attn2");
    }
    b.norm_mlp_scale = get("norm_mlp.scale");
    b.norm_mlp_shift = get("norm_mlp.shift");
    b.fc1_weight = get("mlp.fc1.weight");
    b.fc1_bias = get("mlp.fc1.bias");
    b.fc2_weight = get("mlp.fc2.weight");
    b.fc2_bias = get("mlp.fc2.bias");
  }
}

Tensor cnn_block_forward(const Tensor& x, CnnBlockParams& p, const CnnBlockSpec& spec, Mode mode) {
  if (x.rank() != 5 || x.dim(1) != spec.in_channels) {
    throw ShapeError("cnn block expects " + std::to_string(spec.in_channels) +
                     " input channels, got " + shape_str(x.shape()));
  }
  Tensor h = depthwise_conv3d(x, p.dw_weight, p.dw_bias, spec.depthwise());
  h = gelu(batch_norm3d(h, p.bn1_scale, p.bn1_shift, p.bn1, mode));
  h = conv3d(h, p.reduce_weight, p.reduce_bias, spec.reduce());
  h = conv3d(h, p.large_weight, p.large_bias, spec.large());
  h = gelu(batch_norm3d(h, p.bn2_scale, p.bn2_shift, p.bn2, mode));
  h = conv3d(h, p.expand_weight, p.expand_bias, spec.expand());
  Tensor shortcut = conv3d(x, p.residual_weight, p.residual_bias, spec.residual());
  return add(h, shortcut);
}

Tensor cnn_module_forward(const Tensor& x, std::vector<CnnBlockParams>& blocks,
                          const ModelConfig& config, Mode mode, ForwardTrace* trace) {
  if (x.rank() != 5 || x.dim(1) != 3) {
    throw ShapeError("CNN module expects a B x 3 x T x H x W clip, got " + shape_str(x.shape()));
  }
  if (static_cast<std::int64_t>(blocks.size()) != config.cnn_blocks) {
    throw ShapeError("CNN module: parameter blocks do not match cnn_blocks");
  }
  Tensor h = x;
  for (std::int64_t i = 0; i < config.cnn_blocks; ++i) {
    h = cnn_block_forward(h, blocks[static_cast<std::size_t>(i)], block_spec(config, i), mode);
    if (trace) trace->stem_blocks.push_back(h.detach());
  }
  return h;
}

TokenGrid patch_embed(const Tensor& x, const Tensor& weight, const Tensor& bias,
                      const ModelConfig& config) {
  if (x.rank() != 5) throw ShapeError("patch_embed: input must be rank 5");
  const auto& p = config.patch;
  if (x.dim(2) % p[0] != 0 || x.dim(3) % p[1] != 0 || x.dim(4) % p[2] != 0) {
    throw ShapeError("patch_embed: extents " + shape_str(x.shape()) + " not divisible by patch " +
                     shape_str({p[0], p[1], p[2]}));
  }
  Conv3dSpec spec;
  spec.in_channels = x.dim(1);
  spec.out_channels = config.embed_dim;
  spec.kernel = spec.stride = p;
  Tensor y = conv3d(x, weight, bias, spec);  // B x D x T' x h x w
  const auto B = y.dim(0), D = y.dim(1), T = y.dim(2), h = y.dim(3), w = y.dim(4);
  Tensor tokens = permute(y, {0, 2, 3, 4, 1}).reshape({B, T, h * w, D});
  return {tokens, h, w};
}

TokenGrid dynamic_position_embed(const TokenGrid& t, const Tensor& weight, const Tensor& bias) {
  const auto B = t.batch(), T = t.time(), D = t.dim();
  Tensor volume = permute(t.tokens.reshape({B, T, t.h_tokens, t.w_tokens, D}), {0, 4, 1, 2, 3});
  Tensor pos = depthwise_conv3d(volume, weight, bias, Conv3dSpec::depthwise_spec(D, 3, 1));
  Tensor back = permute(pos, {0, 2, 3, 4, 1}).reshape({B, T, t.count(), D});
  return {add(t.tokens, back), t.h_tokens, t.w_tokens};
}

TokenGrid spatial_attention_stage(const TokenGrid& t, const Tensor& norm_scale,
                                  const Tensor& norm_shift, const AttentionParams& attn,
                                  const AttentionSpec& spec, AttentionSink* sink, int layer) {
  const auto B = t.batch(), T = t.time(), N = t.count(), D = t.dim();
  Tensor y = layer_norm(t.tokens, norm_scale, norm_shift).reshape({B * T, N, D});
  AttentionCapture cap{sink, layer, AttentionStage::Spatial, static_cast<int>(T), 0};
  Tensor a = multi_head_attention(y, y, y, attn, spec, sink ? &cap : nullptr);
  return {add(t.tokens, a.reshape({B, T, N, D})), t.h_tokens, t.w_tokens};
}

TokenGrid temporal_attention_stage(const TokenGrid& t, const Tensor& norm_scale,
                                   const Tensor& norm_shift, const AttentionParams& attn,
                                   const AttentionSpec& spec, AttentionSink* sink, int layer) {
  const auto B = t.batch(), T = t.time(), N = t.count(), D = t.dim();
  Tensor y = permute(layer_norm(t.tokens, norm_scale, norm_shift), {0, 2, 1, 3}).reshape({B * N, T, D});
  AttentionCapture cap{sink, layer, AttentionStage::Temporal, static_cast<int>(N), 0};
  Tensor a = multi_head_attention(y, y, y, attn, spec, sink ? &cap : nullptr);
  Tensor back = permute(a.reshape({B, N, T, D}), {0, 2, 1, 3});
  return {add(t.tokens, back), t.h_tokens, t.w_tokens};
}

TokenGrid mlp_stage(const TokenGrid& t, const TransformerBlockParams& p) {
  Tensor y = layer_norm(t.tokens, p.norm_mlp_scale, p.norm_mlp_shift);
  y = linear(gelu(linear(y, p.fc1_weight, p.fc1_bias)), p.fc2_weight, p.fc2_bias);
  return {add(t.tokens, y), t.h_tokens, t.w_tokens};
}

TokenGrid factorized_self_attention_block(const TokenGrid& t, const TransformerBlockParams& p,
                                          const AttentionSpec& spec, AttentionSink* sink,
                                          int layer) {
  TokenGrid s = spatial_attention_stage(t, p.norm1_scale, p.norm1_shift, p.attn1, spec, sink, layer);
  TokenGrid st = temporal_attention_stage(s, p.norm2_scale, p.norm2_shift, p.attn2, spec, sink, layer);
  return mlp_stage(st, p);
}

TokenGrid factorized_dot_product_block(const TokenGrid& t, const TransformerBlockParams& p,
                                       const AttentionSpec& spec, AttentionSink* sink, int layer) {
  spec.validate();
  if (spec.num_heads % 2 != 0) {
    throw ShapeError("factorized dot-product attention needs an even head count, got " +
                     std::to_string(spec.num_heads));
  }
  const auto B = t.batch(), T = t.time(), N = t.count(), D = t.dim();
  const auto H = spec.num_heads, half = H / 2, hd = spec.head_dim();
  Tensor y = layer_norm(t.tokens, p.norm1_scale, p.norm1_shift);
  auto heads = [&](const Tensor& w, const Tensor& b) {
    return linear(y, w, b).reshape({B, T, N, H, hd});
  };
  Tensor q = heads(p.attn1.wq, p.attn1.bq);
  Tensor k = heads(p.attn1.wk, p.attn1.bk);
  Tensor v = heads(p.attn1.wv, p.attn1.bv);

  // Spatial heads: sequences are the N tokens of one frame.
  auto spatial = [&](const Tensor& x) {
    return permute(narrow(x, 3, 0, half), {0, 1, 3, 2, 4}).reshape({B * T, half, N, hd});
  };
  auto [s_out, s_w] = scaled_dot_product_attention(spatial(q), spatial(k), spatial(v));
  if (sink) capture_attention(s_w, {sink, layer, AttentionStage::Spatial, static_cast<int>(T), 0});
  Tensor s_back = permute(s_out.reshape({B, T, half, N, hd}), {0, 1, 3, 2, 4});

  // Temporal heads: sequences are the T tokens at one spatial position.
  auto temporal = [&](const Tensor& x) {
    return permute(narrow(x, 3, half, half), {0, 2, 3, 1, 4}).reshape({B * N, half, T, hd});
  };
  auto [t_out, t_w] = scaled_dot_product_attention(temporal(q), temporal(k), temporal(v));
  if (sink) {
    capture_attention(t_w, {sink, layer, AttentionStage::Temporal, static_cast<int>(N),
                            static_cast<int>(half)});
  }
  Tensor t_back = permute(t_out.reshape({B, N, half, T, hd}), {0, 3, 1, 2, 4});

  Tensor fused = concat({s_back, t_back}, 3).reshape({B, T, N, D});
  Tensor out = add(t.tokens, linear(fused, p.attn1.wo, p.attn1.bo));
  return mlp_stage({out, t.h_tokens, t.w_tokens}, p);
}

TokenGrid ConViViT::transformer_block(const TokenGrid& t, int layer, AttentionSink* sink) {
  const auto& p = blocks_.at(static_cast<std::size_t>(layer));
  if (config_.variant == Variant::FactorizedSelf) {
    return factorized_self_attention_block(t, p, attention_spec(), sink, layer);
  }
  return factorized_dot_product_block(t, p, attention_spec(), sink, layer);
}

Tensor ConViViT::forward(const Tensor& clip, Mode mode, AttentionSink* sink, ForwardTrace* trace) {
  config_.validate_input(clip.shape());
  Tensor stem = cnn_module_forward(clip, cnn_, config_, mode, trace);
  TokenGrid grid = patch_embed(stem, patch_weight(), patch_bias(), config_);
  if (config_.dpe) grid = dynamic_position_embed(grid, dpe_weight(), dpe_bias());
  for (int l = 0; l < static_cast<int>(config_.depth); ++l) {
    if (trace) trace->grids.push_back({grid.tokens.detach(), grid.h_tokens, grid.w_tokens});
    grid = transformer_block(grid, l, sink);
  }
  if (trace) trace->grids.push_back({grid.tokens.detach(), grid.h_tokens, grid.w_tokens});
  const auto B = grid.batch(), D = grid.dim();
  Tensor normed = layer_norm(grid.tokens, store_.get("norm.scale"), store_.get("norm.shift"));
  Tensor pooled = mean_axis(normed.reshape({B, grid.time() * grid.count(), D}), 1);
  return linear(pooled, store_.get("head.weight"), store_.get("head.bias"));
}

}  // namespace convivit
