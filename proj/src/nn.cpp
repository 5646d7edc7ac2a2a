#include "convivit/nn.hpp"

#include <cmath>
#include <numbers>

#include "convivit/errors.hpp"
#include "convivit/ops.hpp"
#include "gemm.hpp"

namespace convivit {

BatchNormStats BatchNormStats::fresh(std::int64_t channels) {
  return {Tensor::zeros({channels}), Tensor::ones({channels})};
}

Tensor batch_norm3d(const Tensor& x, const Tensor& scale, const Tensor& shift,
                    BatchNormStats& stats, Mode mode) {
  if (x.rank() != 5) throw ShapeError("batch_norm3d: input must be rank 5, got " + shape_str(x.shape()));
  const auto B = x.dim(0), C = x.dim(1);
  const auto S = x.dim(2) * x.dim(3) * x.dim(4);
  const Shape per_channel{C};
  if (scale.shape() != per_channel || shift.shape() != per_channel ||
      stats.running_mean.shape() != per_channel || stats.running_var.shape() != per_channel) {
    throw ShapeError("batch_norm3d: per-channel parameters must have length " + std::to_string(C));
  }
  const double n = static_cast<double>(B * S);
  std::vector<float> mean(static_cast<std::size_t>(C)), inv_std(static_cast<std::size_t>(C));
  auto in = x.data();
  if (mode == Mode::Train) {
    auto rm = stats.running_mean.mutable_data();
    auto rv = stats.running_var.mutable_data();
    for (std::int64_t c = 0; c < C; ++c) {
      double s1 = 0.0;
      for (std::int64_t b = 0; b < B; ++b) {
        const float* p = in.data() + (b * C + c) * S;
        for (std::int64_t i = 0; i < S; ++i) s1 += p[i];
      }
      const double mu = s1 / n;
      double s2 = 0.0;
      for (std::int64_t b = 0; b < B; ++b) {
        const float* p = in.data() + (b * C + c) * S;
        for (std::int64_t i = 0; i < S; ++i) {
          const double d = p[i] - mu;
          s2 += d * d;
        }
      }
      const double var = s2 / n;
      const auto ci = static_cast<std::size_t>(c);
      mean[ci] = static_cast<float>(mu);
      inv_std[ci] = static_cast<float>(1.0 / std::sqrt(var + stats.eps));
      const double unbiased = n > 1 ? s2 / (n - 1) : var;
      rm[ci] = static_cast<float>((1.0 - stats.momentum) * rm[ci] + stats.momentum * mu);
      rv[ci] = static_cast<float>((1.0 - stats.momentum) * rv[ci] + stats.momentum * unbiased);
    }
  } else {
    auto rm = stats.running_mean.data();
    auto rv = stats.running_var.data();
    for (std::int64_t c = 0; c < C; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      mean[ci] = rm[ci];
      inv_std[ci] = static_cast<float>(1.0 / std::sqrt(static_cast<double>(rv[ci]) + stats.eps));
    }
  }

  std::vector<float> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<float> y(xhat.size());
  auto gamma = scale.data(), beta = shift.data();
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const std::int64_t off = (b * C + c) * S;
      for (std::int64_t i = 0; i < S; ++i) {
        const auto k = static_cast<std::size_t>(off + i);
        xhat[k] = (in[k] - mean[ci]) * inv_std[ci];
        y[k] = xhat[k] * gamma[ci] + beta[ci];
      }
    }
  }
  const bool train = mode == Mode::Train;
  Tensor xhat_t(x.shape(), std::move(xhat));
  return make_op_result(
      x.shape(), std::move(y), "batch_norm3d", {x, scale, shift},
      [xhat_t, scale, inv_std, B, C, S, train](const Tensor& g) {
        auto gd = g.data();
        auto xh = xhat_t.data();
        auto gamma = scale.data();
        std::vector<double> sum_g(static_cast<std::size_t>(C), 0.0), sum_gx(sum_g);
        for (std::int64_t b = 0; b < B; ++b) {
          for (std::int64_t c = 0; c < C; ++c) {
            const std::int64_t off = (b * C + c) * S;
            double a = 0.0, bx = 0.0;
            for (std::int64_t i = 0; i < S; ++i) {
              const auto k = static_cast<std::size_t>(off + i);
              a += gd[k];
              bx += static_cast<double>(gd[k]) * xh[k];
            }
            sum_g[static_cast<std::size_t>(c)] += a;
            sum_gx[static_cast<std::size_t>(c)] += bx;
          }
        }
        const double n = static_cast<double>(B * S);
        std::vector<float> gx(static_cast<std::size_t>(xhat_t.numel()));
        for (std::int64_t b = 0; b < B; ++b) {
          for (std::int64_t c = 0; c < C; ++c) {
            const auto ci = static_cast<std::size_t>(c);
            const std::int64_t off = (b * C + c) * S;
            const float k0 = gamma[ci] * inv_std[ci];
            const float mg = train ? static_cast<float>(sum_g[ci] / n) : 0.0f;
            const float mgx = train ? static_cast<float>(sum_gx[ci] / n) : 0.0f;
            for (std::int64_t i = 0; i < S; ++i) {
              const auto k = static_cast<std::size_t>(off + i);
              gx[k] = k0 * (gd[k] - mg - xh[k] * mgx);
            }
          }
        }
        std::vector<float> gs(sum_gx.begin(), sum_gx.end()), gb(sum_g.begin(), sum_g.end());
        return std::vector<Tensor>{Tensor(xhat_t.shape(), std::move(gx)),
                                   Tensor({C}, std::move(gs)), Tensor({C}, std::move(gb))};
      });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() < 1 || weight.rank() != 2 || x.dim(-1) != weight.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const auto in = weight.dim(1), out = weight.dim(0);
  if (bias.defined() && bias.shape() != Shape{out}) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " for " + std::to_string(out) +
                     " outputs");
  }
  const auto M = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out;
  std::vector<float> y(static_cast<std::size_t>(M * out));
  detail::gemm(false, true, M, out, in, x.ptr(), weight.ptr(), y.data(), false);
  if (bias.defined()) {
    auto b = bias.data();
    for (std::int64_t r = 0; r < M; ++r) {
      float* row = y.data() + r * out;
      for (std::int64_t j = 0; j < out; ++j) row[j] += b[static_cast<std::size_t>(j)];
    }
  }
  return make_op_result(out_shape, std::move(y), "linear", {x, weight, bias},
                        [x, weight, bias, M, in, out](const Tensor& g) {
                          std::vector<Tensor> grads(3);
                          if (x.requires_grad()) {
                            std::vector<float> gx(static_cast<std::size_t>(M * in));
                            detail::gemm(false, false, M, in, out, g.ptr(), weight.ptr(), gx.data(), false);
                            grads[0] = Tensor(x.shape(), std::move(gx));
                          }
                          if (weight.requires_grad()) {
                            std::vector<float> gw(static_cast<std::size_t>(out * in));
                            detail::gemm(true, false, out, in, M, g.ptr(), x.ptr(), gw.data(), false);
                            grads[1] = Tensor(weight.shape(), std::move(gw));
                          }
                          if (bias.defined() && bias.requires_grad()) {
                            std::vector<double> gb(static_cast<std::size_t>(out), 0.0);
                            auto gd = g.data();
                            for (std::int64_t r = 0; r < M; ++r) {
                              for (std::int64_t j = 0; j < out; ++j) {
                                gb[static_cast<std::size_t>(j)] += gd[static_cast<std::size_t>(r * out + j)];
                              }
                            }
                            grads[2] = Tensor(bias.shape(), std::vector<float>(gb.begin(), gb.end()));
                          }
                          return grads;
                        });
}

Tensor gelu(const Tensor& x) {
  auto in = x.data();
  std::vector<float> y(in.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = in[i];
    y[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)));
  }
  return make_op_result(x.shape(), std::move(y), "gelu", {x}, [x](const Tensor& g) {
    auto in = x.data();
    auto gd = g.data();
    std::vector<float> gx(in.size());
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double v = in[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] = static_cast<float>(gd[i] * (cdf + v * pdf));
    }
    return std::vector<Tensor>{Tensor(x.shape(), std::move(gx))};
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& scale, const Tensor& shift) {
  const auto D = x.dim(-1);
  if (scale.shape() != Shape{D} || shift.shape() != Shape{D}) {
    throw ShapeError("layer_norm: scale/shift must have length " + std::to_string(D));
  }
  constexpr double eps = 1e-5;
  const auto rows = x.numel() / D;
  auto in = x.data();
  auto gamma = scale.data(), beta = shift.data();
  std::vector<float> xhat(in.size()), y(in.size()), inv_std(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* p = in.data() + r * D;
    double s1 = 0.0;
    for (std::int64_t j = 0; j < D; ++j) s1 += p[j];
    const double mu = s1 / static_cast<double>(D);
    double s2 = 0.0;
    for (std::int64_t j = 0; j < D; ++j) s2 += (p[j] - mu) * (p[j] - mu);
    const double is = 1.0 / std::sqrt(s2 / static_cast<double>(D) + eps);
    inv_std[static_cast<std::size_t>(r)] = static_cast<float>(is);
    for (std::int64_t j = 0; j < D; ++j) {
      const auto k = static_cast<std::size_t>(r * D + j);
      xhat[k] = static_cast<float>((p[j] - mu) * is);
      y[k] = xhat[k] * gamma[static_cast<std::size_t>(j)] + beta[static_cast<std::size_t>(j)];
    }
  }
  Tensor xhat_t(x.shape(), std::move(xhat));
  return make_op_result(
      x.shape(), std::move(y), "layer_norm", {x, scale, shift},
      [xhat_t, scale, inv_std, rows, D](const Tensor& g) {
        auto gd = g.data();
        auto xh = xhat_t.data();
        auto gamma = scale.data();
        std::vector<float> gx(xh.size());
        std::vector<double> gs(static_cast<std::size_t>(D), 0.0), gb(gs);
        std::vector<double> dxh(static_cast<std::size_t>(D));
        for (std::int64_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::int64_t j = 0; j < D; ++j) {
            const auto k = static_cast<std::size_t>(r * D + j);
            const auto ju = static_cast<std::size_t>(j);
            dxh[ju] = static_cast<double>(gd[k]) * gamma[ju];
            m1 += dxh[ju];
            m2 += dxh[ju] * xh[k];
            gs[ju] += static_cast<double>(gd[k]) * xh[k];
            gb[ju] += gd[k];
          }
          m1 /= static_cast<double>(D);
          m2 /= static_cast<double>(D);
          const double is = inv_std[static_cast<std::size_t>(r)];
          for (std::int64_t j = 0; j < D; ++j) {
            const auto k = static_cast<std::size_t>(r * D + j);
            gx[k] = static_cast<float>(is * (dxh[static_cast<std::size_t>(j)] - m1 - xh[k] * m2));
          }
        }
        return std::vector<Tensor>{Tensor(xhat_t.shape(), std::move(gx)),
                                   Tensor({D}, std::vector<float>(gs.begin(), gs.end())),
                                   Tensor({D}, std::vector<float>(gb.begin(), gb.end()))};
      });
}

void AttentionSpec::validate() const {
  if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0) {
    throw ShapeError("attention: embed_dim " + std::to_string(embed_dim) +
                     " not divisible by num_heads " + std::to_string(num_heads));
  }
}

const char* stage_name(AttentionStage stage) {
  return stage == AttentionStage::Spatial ? "spatial" : "temporal";
}

std::pair<Tensor, Tensor> scaled_dot_product_attention(const Tensor& q, const Tensor& k,
                                                       const Tensor& v) {
  if (q.rank() < 2 || k.rank() != q.rank() || v.rank() != q.rank() || q.dim(-1) != k.dim(-1) ||
      k.dim(-2) != v.dim(-2)) {
    throw ShapeError("attention: incompatible q/k/v shapes " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const auto r = q.rank();
  std::vector<std::int64_t> swap_last(static_cast<std::size_t>(r));
  for (std::int64_t i = 0; i < r; ++i) swap_last[static_cast<std::size_t>(i)] = i;
  std::swap(swap_last[static_cast<std::size_t>(r - 1)], swap_last[static_cast<std::size_t>(r - 2)]);
  const float factor = static_cast<float>(1.0 / std::sqrt(static_cast<double>(q.dim(-1))));
  Tensor scores = scale(matmul(q, permute(k, swap_last)), factor);
  Tensor weights = softmax(scores, -1);
  return {matmul(weights, v), weights};
}

void capture_attention(const Tensor& weights, const AttentionCapture& capture) {
  if (!capture.sink) return;
  const auto Bp = weights.dim(0), H = weights.dim(1), Sq = weights.dim(2), Sk = weights.dim(3);
  auto w = weights.data();
  for (std::int64_t b = 0; b < Bp; ++b) {
    for (std::int64_t h = 0; h < H; ++h) {
      AttentionRecord rec;
      rec.layer = capture.layer;
      rec.stage = capture.stage;
      rec.head = capture.head_offset + static_cast<int>(h);
      rec.batch = static_cast<int>(b / capture.slices_per_batch);
      rec.slice = static_cast<int>(b % capture.slices_per_batch);
      rec.rows = static_cast<int>(Sq);
      rec.cols = static_cast<int>(Sk);
      const auto* start = w.data() + (b * H + h) * Sq * Sk;
      rec.weights.assign(start, start + Sq * Sk);
      capture.sink->records.push_back(std::move(rec));
    }
  }
}

Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value,
                            const AttentionParams& p, const AttentionSpec& spec,
                            const AttentionCapture* capture) {
  spec.validate();
  const auto D = spec.embed_dim;
  if (query.rank() != 3 || key.rank() != 3 || value.rank() != 3 || query.dim(-1) != D ||
      key.dim(-1) != D || value.dim(-1) != D || key.dim(1) != value.dim(1) ||
      key.dim(0) != query.dim(0) || value.dim(0) != query.dim(0)) {
    throw ShapeError("multi_head_attention: expected B x S x " + std::to_string(D) +
                     " sequences, got " + shape_str(query.shape()) + ", " + shape_str(key.shape()) +
                     ", " + shape_str(value.shape()));
  }
  const auto H = spec.num_heads, hd = spec.head_dim();
  auto split_heads = [&](const Tensor& t) {
    return permute(t.reshape({t.dim(0), t.dim(1), H, hd}), {0, 2, 1, 3});
  };
  Tensor q = split_heads(linear(query, p.wq, p.bq));
  Tensor k = split_heads(linear(key, p.wk, p.bk));
  Tensor v = split_heads(linear(value, p.wv, p.bv));
  auto [attended, weights] = scaled_dot_product_attention(q, k, v);
  if (capture) capture_attention(weights, *capture);
  Tensor merged = permute(attended, {0, 2, 1, 3}).reshape({query.dim(0), query.dim(1), D});
  return linear(merged, p.wo, p.bo);
}

Tensor trunc_normal(const Shape& shape, double stddev, Rng& rng) {
  Tensor t(shape);
  for (auto& v : t.mutable_data()) {
    double z = rng.normal();
    while (std::abs(z) > 2.0) z = rng.normal();
    v = static_cast<float>(z * stddev);
  }
  return t;
}

Tensor fan_in_uniform(const Shape& shape, std::int64_t fan_in, Rng& rng) {
  Tensor t(shape);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace convivit
