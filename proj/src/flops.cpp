#include "convivit/flops.hpp"

#include <cstdio>

#include "convivit/errors.hpp"

namespace convivit {

namespace {

std::int64_t conv_macs(const Conv3dSpec& s, Triple& extents) {
  const Triple out = s.output_extents(extents);
  extents = out;
  return s.out_channels * out[0] * out[1] * out[2] * (s.in_channels / s.groups) * s.kernel[0] *
         s.kernel[1] * s.kernel[2];
}

}  // namespace

const char* FlopReport::accounting() {
  return "# unit: multiply-accumulates (1 MAC = one multiply plus one add)\n"
         "# counted: convolutions, attention projections, QK^T and AV products, MLP, head;"
         " norms, activations, softmax and pooling are not counted\n"
         "# B=batch T=time tokens N=spatial tokens per frame D=embed dim L=depth\n"
         "# factorized_self: spatial L*B*T*(2*N^2*D + 4*N*D^2), temporal L*B*N*(2*T^2*D + 4*T*D^2)\n"
         "# factorized_dot_product: half the heads per axis, one shared projection set:"
         " spatial L*B*T*(N^2*D + 2*N*D^2), temporal L*B*N*(T^2*D + 2*T*D^2)\n"
         "# joint baseline: L*B*(2*(T*N)^2*D + 4*T*N*D^2)\n"
         "# mlp: L*B*T*N*2*D*(mlp_ratio*D); head: B*D*K; patch_embed includes the position conv\n";
}

const char* FlopReport::csv_header() {
  return "variant,stem,patch_embed,spatial_attention,temporal_attention,joint_attention,mlp,head,total";
}

std::string FlopReport::to_csv() const {
  std::string out = std::string(csv_header()) + "\n";
  auto row = [&](const char* name, const StageMacs& m) {
    char buf[320];
    std::snprintf(buf, sizeof buf, "%s,%lld,%lld,%lld,%lld,%lld,%lld,%lld,%lld\n", name,
                  static_cast<long long>(m.stem), static_cast<long long>(m.patch_embed),
                  static_cast<long long>(m.spatial_attention),
                  static_cast<long long>(m.temporal_attention),
                  static_cast<long long>(m.joint_attention), static_cast<long long>(m.mlp),
                  static_cast<long long>(m.head), static_cast<long long>(m.total()));
    out += buf;
  };
  row("factorized_self", factorized_self);
  row("factorized_dot_product", factorized_dot_product);
  row("joint", joint);
  return out;
}

std::string FlopReport::to_table() const {
  std::string out = accounting();
  char buf[320];
  std::snprintf(buf, sizeof buf, "# input B=%lld T=%lld H=%lld W=%lld -> tokens T=%lld N=%lld D=%lld\n",
                static_cast<long long>(batch), static_cast<long long>(frames),
                static_cast<long long>(height), static_cast<long long>(width),
                static_cast<long long>(time_tokens), static_cast<long long>(spatial_tokens),
                static_cast<long long>(embed_dim));
  out += buf;
  std::snprintf(buf, sizeof buf, "%-20s %16s %16s %16s\n", "stage", "factorized_self",
                "factorized_dot", "joint");
  out += buf;
  auto line = [&](const char* name, std::int64_t a, std::int64_t b, std::int64_t c) {
    std::snprintf(buf, sizeof buf, "%-20s %16lld %16lld %16lld\n", name, static_cast<long long>(a),
                  static_cast<long long>(b), static_cast<long long>(c));
    out += buf;
  };
  const auto& f = factorized_self;
  const auto& d = factorized_dot_product;
  const auto& j = joint;
  line("stem", f.stem, d.stem, j.stem);
  line("patch_embed", f.patch_embed, d.patch_embed, j.patch_embed);
  line("spatial_attention", f.spatial_attention, d.spatial_attention, j.spatial_attention);
  line("temporal_attention", f.temporal_attention, d.temporal_attention, j.temporal_attention);
  line("joint_attention", f.joint_attention, d.joint_attention, j.joint_attention);
  line("mlp", f.mlp, d.mlp, j.mlp);
  line("head", f.head, d.head, j.head);
  line("total", f.total(), d.total(), j.total());
  return out;
}

FlopReport count_flops(const ModelConfig& config, std::int64_t batch, std::int64_t frames,
                       std::int64_t height, std::int64_t width) {
  config.validate();
  if (batch < 1) throw ConfigError("count_flops: batch must be >= 1");
  config.validate_input({batch, config.in_channels, frames, height, width});

  FlopReport r;
  r.batch = batch;
  r.frames = frames;
  r.height = height;
  r.width = width;

  StageMacs common;
  Triple ext{frames, height, width};
  std::int64_t channels = config.in_channels;
  for (std::int64_t b = 0; b < config.cnn_blocks; ++b) {
    CnnBlockSpec spec{channels, config.stem_channels[static_cast<std::size_t>(b)], config.large_kernel};
    Triple block_in = ext;
    Triple e = ext;
    std::int64_t m = conv_macs(spec.depthwise(), e);
    m += conv_macs(spec.reduce(), e);
    m += conv_macs(spec.large(), e);
    m += conv_macs(spec.expand(), e);
    m += conv_macs(spec.residual(), block_in);
    common.stem += batch * m;
    ext = e;
    channels = spec.out_channels;
  }

  Conv3dSpec patch;
  patch.in_channels = channels;
  patch.out_channels = config.embed_dim;
  patch.kernel = patch.stride = config.patch;
  common.patch_embed = batch * conv_macs(patch, ext);
  if (config.dpe) {
    Triple e = ext;
    common.patch_embed += batch * conv_macs(Conv3dSpec::depthwise_spec(config.embed_dim, 3, 1), e);
  }

  const std::int64_t T = ext[0], N = ext[1] * ext[2], D = config.embed_dim, L = config.depth,
                     B = batch;
  r.time_tokens = T;
  r.spatial_tokens = N;
  r.embed_dim = D;
  common.mlp = L * B * T * N * 2 * D * (config.mlp_ratio * D);
  common.head = B * D * config.num_classes;

  r.factorized_self = common;
  r.factorized_self.spatial_attention = L * B * T * (2 * N * N * D + 4 * N * D * D);
  r.factorized_self.temporal_attention = L * B * N * (2 * T * T * D + 4 * T * D * D);

  r.factorized_dot_product = common;
  r.factorized_dot_product.spatial_attention = L * B * T * (N * N * D + 2 * N * D * D);
  r.factorized_dot_product.temporal_attention = L * B * N * (T * T * D + 2 * T * D * D);

  r.joint = common;
  r.joint.joint_attention = L * B * (2 * (T * N) * (T * N) * D + 4 * T * N * D * D);
  return r;
}

}  // namespace convivit
