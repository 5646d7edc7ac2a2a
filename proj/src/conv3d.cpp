#include <algorithm>
#include <cstring>

#include "convivit/errors.hpp"
#include "convivit/nn.hpp"
#include "gemm.hpp"

namespace convivit {

void Conv3dSpec::validate() const {
  if (in_channels <= 0 || out_channels <= 0 || groups <= 0) {
    throw ShapeError("conv3d: channel counts and groups must be positive");
  }
  if (in_channels % groups != 0 || out_channels % groups != 0) {
    throw ShapeError("conv3d: channels " + std::to_string(in_channels) + "->" +
                     std::to_string(out_channels) + " not divisible by groups " +
                     std::to_string(groups));
  }
  for (int i = 0; i < 3; ++i) {
    if (kernel[i] <= 0 || stride[i] <= 0 || padding[i] < 0) {
      throw ShapeError("conv3d: kernel/stride must be positive and padding non-negative");
    }
  }
}

Shape Conv3dSpec::weight_shape() const {
  return {out_channels, in_channels / groups, kernel[0], kernel[1], kernel[2]};
}

Triple Conv3dSpec::output_extents(const Triple& input) const {
  Triple out{};
  for (int i = 0; i < 3; ++i) {
    const auto span = input[i] + 2 * padding[i] - kernel[i];
    out[i] = span < 0 ? 0 : span / stride[i] + 1;
  }
  return out;
}

Conv3dSpec Conv3dSpec::depthwise_spec(std::int64_t channels, std::int64_t k, std::int64_t pad,
                                      Triple stride) {
  Conv3dSpec s;
  s.in_channels = s.out_channels = s.groups = channels;
  s.kernel = {k, k, k};
  s.padding = {pad, pad, pad};
  s.stride = stride;
  return s;
}

Conv3dSpec Conv3dSpec::pointwise(std::int64_t in, std::int64_t out, Triple stride) {
  Conv3dSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.stride = stride;
  return s;
}

namespace {

struct Geometry {
  std::int64_t batch, cin, cout, groups, cin_g, cout_g;
  Triple in, out, k, stride, pad;
  std::int64_t in_plane() const { return in[0] * in[1] * in[2]; }
  std::int64_t out_plane() const { return out[0] * out[1] * out[2]; }
  std::int64_t kernel_volume() const { return k[0] * k[1] * k[2]; }
  bool is_pointwise() const {
    return k == Triple{1, 1, 1} && stride == Triple{1, 1, 1} && pad == Triple{0, 0, 0};
  }
};

// Range [lo, hi) of output positions whose input index o * s - p + k lies in [0, n).
inline std::pair<std::int64_t, std::int64_t> valid_range(std::int64_t n, std::int64_t out,
                                                         std::int64_t s, std::int64_t p,
                                                         std::int64_t k) {
  const std::int64_t off = p - k;  // need o * s >= off and o * s <= n - 1 + off
  std::int64_t lo = off <= 0 ? 0 : (off + s - 1) / s;
  std::int64_t hi_num = n - 1 + off;
  std::int64_t hi = hi_num < 0 ? 0 : hi_num / s + 1;
  lo = std::min(lo, out);
  hi = std::clamp(hi, lo, out);
  return {lo, hi};
}

// Visits every (output row, input row, kernel tap) triple of one channel
// plane; fn(out_row_offset, in_row_offset, tap, ow_lo, ow_hi, kw).
template <typename Fn>
void for_each_row_tap(const Geometry& g, Fn&& fn) {
  const auto [To, Ho, Wo] = g.out;
  const auto [T, H, W] = g.in;
  for (std::int64_t ot = 0; ot < To; ++ot) {
    for (std::int64_t kt = 0; kt < g.k[0]; ++kt) {
      const std::int64_t it = ot * g.stride[0] - g.pad[0] + kt;
      if (it < 0 || it >= T) continue;
      for (std::int64_t oh = 0; oh < Ho; ++oh) {
        for (std::int64_t kh = 0; kh < g.k[1]; ++kh) {
          const std::int64_t ih = oh * g.stride[1] - g.pad[1] + kh;
          if (ih < 0 || ih >= H) continue;
          for (std::int64_t kw = 0; kw < g.k[2]; ++kw) {
            const auto [lo, hi] = valid_range(W, Wo, g.stride[2], g.pad[2], kw);
            if (lo >= hi) continue;
            const std::int64_t tap = (kt * g.k[1] + kh) * g.k[2] + kw;
            fn((ot * Ho + oh) * Wo, (it * H + ih) * W, tap, lo, hi, kw);
          }
        }
      }
    }
  }
}

// Builds the (cin_g * K) x out_plane patch matrix of one group of one sample.
void im2col(const Geometry& g, const float* x, float* col) {
  const auto K = g.kernel_volume();
  const auto S = g.out_plane();
  std::fill_n(col, g.cin_g * K * S, 0.0f);
  const std::int64_t sw = g.stride[2], pw = g.pad[2];
  for (std::int64_t c = 0; c < g.cin_g; ++c) {
    const float* plane = x + c * g.in_plane();
    float* rows = col + c * K * S;
    for_each_row_tap(g, [&](std::int64_t orow, std::int64_t irow, std::int64_t tap,
                            std::int64_t lo, std::int64_t hi, std::int64_t kw) {
      float* dst = rows + tap * S + orow;
      const float* src = plane + irow - pw + kw;
      for (std::int64_t ow = lo; ow < hi; ++ow) dst[ow] = src[ow * sw];
    });
  }
}

void col2im(const Geometry& g, const float* col, float* dx) {
  const auto K = g.kernel_volume();
  const auto S = g.out_plane();
  const std::int64_t sw = g.stride[2], pw = g.pad[2];
  for (std::int64_t c = 0; c < g.cin_g; ++c) {
    float* plane = dx + c * g.in_plane();
    const float* rows = col + c * K * S;
    for_each_row_tap(g, [&](std::int64_t orow, std::int64_t irow, std::int64_t tap,
                            std::int64_t lo, std::int64_t hi, std::int64_t kw) {
      const float* src = rows + tap * S + orow;
      float* dst = plane + irow - pw + kw;
      for (std::int64_t ow = lo; ow < hi; ++ow) dst[ow * sw] += src[ow];
    });
  }
}

// Per-channel kernels work on a copy of each input plane that is zero padded
// along W and split by column residue modulo the W stride. Padded column
// ow * sw + kw then lives in phase kw % sw at index ow + kw / sw, so every
// tap is a full, branch-free, unit-stride row update.
struct PhaseSplit {
  std::int64_t sw, pw, width, rows;
  std::vector<float> buf;  // [phase][row][width]

  PhaseSplit(std::int64_t stride, std::int64_t pad, std::int64_t W, std::int64_t R)
      : sw(stride), pw(pad), width((W + 2 * pad + stride - 1) / stride), rows(R),
        buf(static_cast<std::size_t>(stride * width * R), 0.0f) {}

  // Visits (padded-buffer pointer, plane pointer, count) runs: within one
  // phase and row, plane columns w0, w0 + sw, ... map to consecutive slots.
  template <typename Fn>
  void for_each_run(std::int64_t W, Fn&& fn) const {
    for (std::int64_t ph = 0; ph < sw; ++ph) {
      // first real column w >= 0 with (w + pw) % sw == ph
      const std::int64_t w0 = ((ph - pw) % sw + sw) % sw;
      if (w0 >= W) continue;
      const std::int64_t n = (W - w0 + sw - 1) / sw;
      const std::int64_t slot0 = (w0 + pw) / sw;
      for (std::int64_t r = 0; r < rows; ++r) fn((ph * rows + r) * width + slot0, r * W + w0, n);
    }
  }
  void load(const float* plane, std::int64_t W) {
    float* dst = buf.data();
    const std::int64_t s = sw;
    for_each_run(W, [&](std::int64_t slot, std::int64_t pos, std::int64_t n) {
      for (std::int64_t i = 0; i < n; ++i) dst[slot + i] = plane[pos + i * s];
    });
  }
  void add_to(float* plane, std::int64_t W) const {
    const float* src = buf.data();
    const std::int64_t s = sw;
    for_each_run(W, [&](std::int64_t slot, std::int64_t pos, std::int64_t n) {
      for (std::int64_t i = 0; i < n; ++i) plane[pos + i * s] += src[slot + i];
    });
  }
  /// Start of padded column kw of row 0, per kw.
  std::vector<std::int64_t> tap_offsets(std::int64_t kernel_w) const {
    std::vector<std::int64_t> out;
    for (std::int64_t kw = 0; kw < kernel_w; ++kw) out.push_back((kw % sw) * rows * width + kw / sw);
    return out;
  }
};

// fn(out_row_offset, row, kernel_row) for every output row and every (kt, kh)
// whose input row is inside the volume.
template <typename Fn>
void for_each_kernel_row(const Geometry& g, Fn&& fn) {
  const auto [To, Ho, Wo] = g.out;
  const auto [T, H, W] = g.in;
  for (std::int64_t ot = 0; ot < To; ++ot) {
    for (std::int64_t kt = 0; kt < g.k[0]; ++kt) {
      const std::int64_t it = ot * g.stride[0] - g.pad[0] + kt;
      if (it < 0 || it >= T) continue;
      for (std::int64_t oh = 0; oh < Ho; ++oh) {
        for (std::int64_t kh = 0; kh < g.k[1]; ++kh) {
          const std::int64_t ih = oh * g.stride[1] - g.pad[1] + kh;
          if (ih < 0 || ih >= H) continue;
          fn((ot * Ho + oh) * Wo, it * H + ih, kt * g.k[1] + kh);
        }
      }
    }
  }
}

// One filter per channel: direct loops, no patch matrix.
void depthwise_forward(const Geometry& g, const float* x, const float* w, const float* bias,
                       float* y) {
  const auto K = g.kernel_volume();
  const std::int64_t KW = g.k[2], Wo = g.out[2];
  PhaseSplit split(g.stride[2], g.pad[2], g.in[2], g.in[0] * g.in[1]);
  const auto taps = split.tap_offsets(KW);
  for (std::int64_t b = 0; b < g.batch; ++b) {
    for (std::int64_t c = 0; c < g.cin; ++c) {
      split.load(x + (b * g.cin + c) * g.in_plane(), g.in[2]);
      const float* src0 = split.buf.data();
      float* out = y + (b * g.cout + c) * g.out_plane();
      std::fill_n(out, g.out_plane(), bias ? bias[c] : 0.0f);
      const float* wc = w + c * K;
      for_each_kernel_row(g, [&](std::int64_t orow, std::int64_t row, std::int64_t krow) {
        float* dst = out + orow;
        const float* base = src0 + row * split.width;
        for (std::int64_t kw = 0; kw < KW; ++kw) {
          const float wv = wc[krow * KW + kw];
          const float* src = base + taps[static_cast<std::size_t>(kw)];
          for (std::int64_t ow = 0; ow < Wo; ++ow) dst[ow] += wv * src[ow];
        }
      });
    }
  }
}

void depthwise_backward(const Geometry& g, const float* x, const float* w, const float* gy,
                        float* gx, double* gw) {
  const auto K = g.kernel_volume();
  const std::int64_t KW = g.k[2], Wo = g.out[2];
  PhaseSplit split(g.stride[2], g.pad[2], g.in[2], g.in[0] * g.in[1]);
  PhaseSplit gsplit(g.stride[2], g.pad[2], g.in[2], g.in[0] * g.in[1]);
  const auto taps = split.tap_offsets(KW);
  std::vector<float> gw_plane(static_cast<std::size_t>(K));
  for (std::int64_t b = 0; b < g.batch; ++b) {
    for (std::int64_t c = 0; c < g.cin; ++c) {
      const float* gout = gy + (b * g.cout + c) * g.out_plane();
      const float* wc = w + c * K;
      if (gw) split.load(x + (b * g.cin + c) * g.in_plane(), g.in[2]);
      if (gx) std::fill(gsplit.buf.begin(), gsplit.buf.end(), 0.0f);
      std::fill(gw_plane.begin(), gw_plane.end(), 0.0f);
      const float* src0 = split.buf.data();
      float* gsrc0 = gsplit.buf.data();
      for_each_kernel_row(g, [&](std::int64_t orow, std::int64_t row, std::int64_t krow) {
        const float* go = gout + orow;
        for (std::int64_t kw = 0; kw < KW; ++kw) {
          const auto off = row * split.width + taps[static_cast<std::size_t>(kw)];
          if (gx) {
            const float wv = wc[krow * KW + kw];
            float* dst = gsrc0 + off;
            for (std::int64_t ow = 0; ow < Wo; ++ow) dst[ow] += wv * go[ow];
          }
          if (gw) {
            const float* src = src0 + off;
            float acc = 0.0f;
#pragma omp simd reduction(+ : acc)
            for (std::int64_t ow = 0; ow < Wo; ++ow) acc += go[ow] * src[ow];
            gw_plane[static_cast<std::size_t>(krow * KW + kw)] += acc;
          }
        }
      });
      if (gx) gsplit.add_to(gx + (b * g.cin + c) * g.in_plane(), g.in[2]);
      if (gw) {
        for (std::int64_t t = 0; t < K; ++t) gw[c * K + t] += gw_plane[static_cast<std::size_t>(t)];
      }
    }
  }
}

Geometry make_geometry(const Tensor& x, const Tensor& weight, const Tensor& bias,
                       const Conv3dSpec& spec) {
  spec.validate();
  if (x.rank() != 5) throw ShapeError("conv3d: input must be B x C x T x H x W, got " + shape_str(x.shape()));
  if (x.dim(1) != spec.in_channels) {
    throw ShapeError("conv3d: input has " + std::to_string(x.dim(1)) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  }
  if (weight.shape() != spec.weight_shape()) {
    throw ShapeError("conv3d: weight shape " + shape_str(weight.shape()) + ", expected " +
                     shape_str(spec.weight_shape()));
  }
  if (bias.defined() && bias.shape() != Shape{spec.out_channels}) {
    throw ShapeError("conv3d: bias shape " + shape_str(bias.shape()));
  }
  Geometry g{};
  g.batch = x.dim(0);
  g.cin = spec.in_channels;
  g.cout = spec.out_channels;
  g.groups = spec.groups;
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  g.in = {x.dim(2), x.dim(3), x.dim(4)};
  g.out = spec.output_extents(g.in);
  g.k = spec.kernel;
  g.stride = spec.stride;
  g.pad = spec.padding;
  if (g.out[0] <= 0 || g.out[1] <= 0 || g.out[2] <= 0) {
    throw ShapeError("conv3d: non-positive output extent for input " + shape_str(x.shape()));
  }
  return g;
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv3dSpec& spec) {
  const Geometry g = make_geometry(x, weight, bias, spec);
  const auto S = g.out_plane();
  const auto K = g.kernel_volume();
  const auto CK = g.cin_g * K;
  Shape out_shape{g.batch, g.cout, g.out[0], g.out[1], g.out[2]};
  std::vector<float> y(static_cast<std::size_t>(shape_numel(out_shape)));
  const bool per_channel = g.cin_g == 1 && g.cout_g == 1;
  const float* bp = bias.defined() ? bias.ptr() : nullptr;

  if (per_channel) {
    depthwise_forward(g, x.ptr(), weight.ptr(), bp, y.data());
  } else {
    std::vector<float> col(g.is_pointwise() ? 0 : static_cast<std::size_t>(CK * S));
    for (std::int64_t b = 0; b < g.batch; ++b) {
      for (std::int64_t grp = 0; grp < g.groups; ++grp) {
        const float* xin = x.ptr() + (b * g.cin + grp * g.cin_g) * g.in_plane();
        const float* patches = xin;
        if (!g.is_pointwise()) {
          im2col(g, xin, col.data());
          patches = col.data();
        }
        float* out = y.data() + (b * g.cout + grp * g.cout_g) * S;
        detail::gemm(false, false, g.cout_g, S, CK, weight.ptr() + grp * g.cout_g * CK, patches,
                     out, false);
        if (bp) {
          for (std::int64_t o = 0; o < g.cout_g; ++o) {
            const float bv = bp[grp * g.cout_g + o];
            float* row = out + o * S;
            for (std::int64_t s = 0; s < S; ++s) row[s] += bv;
          }
        }
      }
    }
  }

  return make_op_result(
      out_shape, std::move(y), per_channel ? "depthwise_conv3d" : "conv3d", {x, weight, bias},
      [x, weight, bias, g, per_channel](const Tensor& gy) {
        const auto S = g.out_plane();
        const auto K = g.kernel_volume();
        const auto CK = g.cin_g * K;
        std::vector<Tensor> grads(3);
        const bool want_x = x.requires_grad();
        const bool want_w = weight.requires_grad();
        std::vector<float> gx(want_x ? static_cast<std::size_t>(x.numel()) : 0, 0.0f);
        std::vector<float> gw_f;
        if (per_channel) {
          std::vector<double> gw(want_w ? static_cast<std::size_t>(weight.numel()) : 0, 0.0);
          depthwise_backward(g, x.ptr(), weight.ptr(), gy.ptr(), want_x ? gx.data() : nullptr,
                             want_w ? gw.data() : nullptr);
          gw_f.assign(gw.begin(), gw.end());
        } else {
          if (want_w) gw_f.assign(static_cast<std::size_t>(weight.numel()), 0.0f);
          std::vector<float> col(g.is_pointwise() ? 0 : static_cast<std::size_t>(CK * S));
          std::vector<float> dcol(g.is_pointwise() || !want_x ? 0 : static_cast<std::size_t>(CK * S));
          for (std::int64_t b = 0; b < g.batch; ++b) {
            for (std::int64_t grp = 0; grp < g.groups; ++grp) {
              const std::int64_t in_off = (b * g.cin + grp * g.cin_g) * g.in_plane();
              const float* gout = gy.ptr() + (b * g.cout + grp * g.cout_g) * S;
              const float* wg = weight.ptr() + grp * g.cout_g * CK;
              if (want_w) {
                const float* patches = x.ptr() + in_off;
                if (!g.is_pointwise()) {
                  im2col(g, x.ptr() + in_off, col.data());
                  patches = col.data();
                }
                detail::gemm(false, true, g.cout_g, CK, S, gout, patches,
                             gw_f.data() + grp * g.cout_g * CK, true);
              }
              if (want_x) {
                if (g.is_pointwise()) {
                  detail::gemm(true, false, CK, S, g.cout_g, wg, gout, gx.data() + in_off, true);
                } else {
                  detail::gemm(true, false, CK, S, g.cout_g, wg, gout, dcol.data(), false);
                  col2im(g, dcol.data(), gx.data() + in_off);
                }
              }
            }
          }
        }
        if (want_x) grads[0] = Tensor(x.shape(), std::move(gx));
        if (want_w) grads[1] = Tensor(weight.shape(), std::move(gw_f));
        if (bias.defined() && bias.requires_grad()) {
          std::vector<double> gb(static_cast<std::size_t>(g.cout), 0.0);
          const float* gp = gy.ptr();
          for (std::int64_t b = 0; b < g.batch; ++b) {
            for (std::int64_t c = 0; c < g.cout; ++c) {
              const float* row = gp + (b * g.cout + c) * S;
              float acc = 0.0f;
              for (std::int64_t s = 0; s < S; ++s) acc += row[s];
              gb[static_cast<std::size_t>(c)] += acc;
            }
          }
          grads[2] = Tensor(bias.shape(), std::vector<float>(gb.begin(), gb.end()));
        }
        return grads;
      });
}

Tensor depthwise_conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        const Conv3dSpec& spec) {
  if (x.rank() != 5) throw ShapeError("depthwise_conv3d: input must be rank 5");
  if (spec.groups != x.dim(1) || !spec.depthwise()) {
    throw ShapeError("depthwise_conv3d: groups (" + std::to_string(spec.groups) +
                     ") must equal the channel count (" + std::to_string(x.dim(1)) + ")");
  }
  return conv3d(x, weight, bias, spec);
}

}  // namespace convivit
