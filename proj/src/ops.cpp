#include "convivit/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "convivit/errors.hpp"
#include "gemm.hpp"

namespace convivit {

namespace detail {

void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
          const float* a, const float* b, float* c, bool accumulate) {
  using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ColMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
  Eigen::Map<RowMat> cm(c, m, n);
  // A row-major k x m buffer is a column-major m x k view of its transpose.
  auto run = [&](const auto& am, const auto& bm) {
    if (accumulate) {
      cm.noalias() += am * bm;
    } else {
      cm.noalias() = am * bm;
    }
  };
  if (!trans_a && !trans_b) {
    run(Eigen::Map<const RowMat>(a, m, k), Eigen::Map<const RowMat>(b, k, n));
  } else if (!trans_a && trans_b) {
    run(Eigen::Map<const RowMat>(a, m, k), Eigen::Map<const ColMat>(b, k, n));
  } else if (trans_a && !trans_b) {
    run(Eigen::Map<const ColMat>(a, m, k), Eigen::Map<const RowMat>(b, k, n));
  } else {
    run(Eigen::Map<const ColMat>(a, m, k), Eigen::Map<const ColMat>(b, k, n));
  }
}

}  // namespace detail

namespace {

std::int64_t normalize_axis(std::int64_t axis, std::int64_t rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError(std::string(op) + ": axis out of range for rank " + std::to_string(rank));
  }
  return axis;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

std::vector<float> to_vec(std::span<const float> s) { return {s.begin(), s.end()}; }

// Extents split around `axis`: outer * extent * inner == numel.
struct AxisSplit {
  std::int64_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& shape, std::int64_t axis) {
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (std::int64_t i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> out(static_cast<std::size_t>(a.numel()));
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_op_result(a.shape(), std::move(out), "add", {a, b},
                        [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<float> out(static_cast<std::size_t>(a.numel()));
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_op_result(a.shape(), std::move(out), "sub", {a, b}, [](const Tensor& g) {
    return std::vector<Tensor>{g, scale(g, -1.0f)};
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<float> out(static_cast<std::size_t>(a.numel()));
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_op_result(a.shape(), std::move(out), "mul", {a, b}, [a, b](const Tensor& g) {
    NoGradGuard guard;
    return std::vector<Tensor>{mul(g, b.detach()), mul(g, a.detach())};
  });
}

Tensor scale(const Tensor& x, float factor) {
  std::vector<float> out = to_vec(x.data());
  for (auto& v : out) v *= factor;
  return make_op_result(x.shape(), std::move(out), "scale", {x}, [factor](const Tensor& g) {
    NoGradGuard guard;
    return std::vector<Tensor>{scale(g, factor)};
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Shape shape = x.shape();
  return make_op_result({}, {static_cast<float>(acc)}, "sum", {x}, [shape](const Tensor& g) {
    return std::vector<Tensor>{Tensor(shape, g.item())};
  });
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const auto n = x.numel();
  Shape shape = x.shape();
  return make_op_result({}, {static_cast<float>(acc / static_cast<double>(n))}, "mean", {x},
                        [shape, n](const Tensor& g) {
                          return std::vector<Tensor>{
                              Tensor(shape, g.item() / static_cast<float>(n))};
                        });
}

Tensor mean_axis(const Tensor& x, std::int64_t axis) {
  axis = normalize_axis(axis, x.rank(), "mean_axis");
  const auto s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  std::vector<float> out(static_cast<std::size_t>(s.outer * s.inner));
  auto in = x.data();
  std::vector<double> acc(static_cast<std::size_t>(s.inner));
  for (std::int64_t o = 0; o < s.outer; ++o) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::int64_t e = 0; e < s.extent; ++e) {
      const float* row = in.data() + (o * s.extent + e) * s.inner;
      for (std::int64_t i = 0; i < s.inner; ++i) acc[static_cast<std::size_t>(i)] += row[i];
    }
    for (std::int64_t i = 0; i < s.inner; ++i) {
      out[static_cast<std::size_t>(o * s.inner + i)] =
          static_cast<float>(acc[static_cast<std::size_t>(i)] / static_cast<double>(s.extent));
    }
  }
  Shape in_shape = x.shape();
  return make_op_result(out_shape, std::move(out), "mean_axis", {x},
                        [in_shape, s](const Tensor& g) {
                          std::vector<float> gx(static_cast<std::size_t>(shape_numel(in_shape)));
                          auto gd = g.data();
                          const float inv = 1.0f / static_cast<float>(s.extent);
                          for (std::int64_t o = 0; o < s.outer; ++o) {
                            for (std::int64_t e = 0; e < s.extent; ++e) {
                              float* row = gx.data() + (o * s.extent + e) * s.inner;
                              const float* src = gd.data() + o * s.inner;
                              for (std::int64_t i = 0; i < s.inner; ++i) row[i] = src[i] * inv;
                            }
                          }
                          return std::vector<Tensor>{Tensor(in_shape, std::move(gx))};
                        });
}

namespace {

// Batch offsets (in matrices) of each broadcast batch index into a and b.
struct BatchPlan {
  Shape batch_shape;
  std::vector<std::int64_t> a_index, b_index;
};

BatchPlan plan_batches(const Shape& a_batch, const Shape& b_batch) {
  const std::size_t r = std::max(a_batch.size(), b_batch.size());
  Shape a_full(r, 1), b_full(r, 1), out(r, 1);
  std::copy(a_batch.begin(), a_batch.end(), a_full.begin() + static_cast<std::ptrdiff_t>(r - a_batch.size()));
  std::copy(b_batch.begin(), b_batch.end(), b_full.begin() + static_cast<std::ptrdiff_t>(r - b_batch.size()));
  for (std::size_t i = 0; i < r; ++i) {
    if (a_full[i] != b_full[i] && a_full[i] != 1 && b_full[i] != 1) {
      throw ShapeError("matmul: batch extents do not broadcast");
    }
    out[i] = std::max(a_full[i], b_full[i]);
  }
  BatchPlan plan;
  plan.batch_shape = out;
  const auto total = shape_numel(out);
  plan.a_index.resize(static_cast<std::size_t>(total));
  plan.b_index.resize(static_cast<std::size_t>(total));
  std::vector<std::int64_t> idx(r, 0);
  for (std::int64_t flat = 0; flat < total; ++flat) {
    std::int64_t ai = 0, bi = 0;
    for (std::size_t d = 0; d < r; ++d) {
      ai = ai * a_full[d] + (a_full[d] == 1 ? 0 : idx[d]);
      bi = bi * b_full[d] + (b_full[d] == 1 ? 0 : idx[d]);
    }
    plan.a_index[static_cast<std::size_t>(flat)] = ai;
    plan.b_index[static_cast<std::size_t>(flat)] = bi;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
  return plan;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const auto m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  BatchPlan plan;
  try {
    plan = plan_batches(a_batch, b_batch);
  } catch (const ShapeError&) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Shape out_shape = plan.batch_shape;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<float> out(static_cast<std::size_t>(shape_numel(out_shape)));
  const float* ap = a.ptr();
  const float* bp = b.ptr();
  for (std::size_t i = 0; i < plan.a_index.size(); ++i) {
    detail::gemm(false, false, m, n, k, ap + plan.a_index[i] * m * k, bp + plan.b_index[i] * k * n,
                 out.data() + static_cast<std::int64_t>(i) * m * n, false);
  }
  return make_op_result(
      out_shape, std::move(out), "matmul", {a, b}, [a, b, plan, m, n, k](const Tensor& g) {
        std::vector<Tensor> grads(2);
        const float* gp = g.ptr();
        if (a.requires_grad()) {
          std::vector<float> ga(static_cast<std::size_t>(a.numel()), 0.0f);
          for (std::size_t i = 0; i < plan.a_index.size(); ++i) {
            detail::gemm(false, true, m, k, n, gp + static_cast<std::int64_t>(i) * m * n,
                         b.ptr() + plan.b_index[i] * k * n, ga.data() + plan.a_index[i] * m * k,
                         true);
          }
          grads[0] = Tensor(a.shape(), std::move(ga));
        }
        if (b.requires_grad()) {
          std::vector<float> gb(static_cast<std::size_t>(b.numel()), 0.0f);
          for (std::size_t i = 0; i < plan.b_index.size(); ++i) {
            detail::gemm(true, false, k, n, m, a.ptr() + plan.a_index[i] * m * k,
                         gp + static_cast<std::int64_t>(i) * m * n,
                         gb.data() + plan.b_index[i] * k * n, true);
          }
          grads[1] = Tensor(b.shape(), std::move(gb));
        }
        return grads;
      });
}

Tensor softmax(const Tensor& x, std::int64_t axis) {
  axis = normalize_axis(axis, x.rank(), "softmax");
  const auto s = split_axis(x.shape(), axis);
  std::vector<float> out(static_cast<std::size_t>(x.numel()));
  auto in = x.data();
  std::vector<double> e(static_cast<std::size_t>(s.extent));
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const std::int64_t base = o * s.extent * s.inner + i;
      float mx = in[static_cast<std::size_t>(base)];
      for (std::int64_t j = 1; j < s.extent; ++j) {
        mx = std::max(mx, in[static_cast<std::size_t>(base + j * s.inner)]);
      }
      double total = 0.0;
      for (std::int64_t j = 0; j < s.extent; ++j) {
        e[static_cast<std::size_t>(j)] =
            std::exp(static_cast<double>(in[static_cast<std::size_t>(base + j * s.inner)]) - mx);
        total += e[static_cast<std::size_t>(j)];
      }
      for (std::int64_t j = 0; j < s.extent; ++j) {
        out[static_cast<std::size_t>(base + j * s.inner)] =
            static_cast<float>(e[static_cast<std::size_t>(j)] / total);
      }
    }
  }
  Tensor y_saved(x.shape(), out);
  return make_op_result(x.shape(), std::move(out), "softmax", {x}, [y_saved, s](const Tensor& g) {
    // dx = y * (g - sum(g * y)) along the axis.
    std::vector<float> gx(static_cast<std::size_t>(y_saved.numel()));
    auto y = y_saved.data();
    auto gd = g.data();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t i = 0; i < s.inner; ++i) {
        const std::int64_t base = o * s.extent * s.inner + i;
        double dot = 0.0;
        for (std::int64_t j = 0; j < s.extent; ++j) {
          const auto p = static_cast<std::size_t>(base + j * s.inner);
          dot += static_cast<double>(gd[p]) * y[p];
        }
        for (std::int64_t j = 0; j < s.extent; ++j) {
          const auto p = static_cast<std::size_t>(base + j * s.inner);
          gx[p] = static_cast<float>(y[p] * (gd[p] - dot));
        }
      }
    }
    return std::vector<Tensor>{Tensor(y_saved.shape(), std::move(gx))};
  });
}

namespace {

std::vector<float> permute_values(std::span<const float> in, const Shape& shape,
                                  const std::vector<std::int64_t>& order, Shape& out_shape) {
  const std::size_t r = shape.size();
  out_shape.assign(r, 0);
  std::vector<std::int64_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * shape[i];
  std::vector<std::int64_t> src_strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = shape[static_cast<std::size_t>(order[i])];
    src_strides[i] = in_strides[static_cast<std::size_t>(order[i])];
  }
  std::vector<float> out(in.size());
  if (r == 0) {
    out.assign(in.begin(), in.end());
    return out;
  }
  // Walk the output in row-major order; the innermost output axis is a
  // strided run through the input.
  std::vector<std::int64_t> idx(r, 0);
  const std::int64_t inner = out_shape[r - 1];
  const std::int64_t inner_stride = src_strides[r - 1];
  std::int64_t src = 0;
  for (std::size_t dst = 0; dst < out.size(); dst += static_cast<std::size_t>(inner)) {
    const float* p = in.data() + src;
    for (std::int64_t j = 0; j < inner; ++j) out[dst + static_cast<std::size_t>(j)] = p[j * inner_stride];
    for (std::size_t d = r - 1; d-- > 0;) {
      src += src_strides[d];
      if (++idx[d] < out_shape[d]) break;
      src -= src_strides[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  return out;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::int64_t>& order) {
  const auto r = static_cast<std::size_t>(x.rank());
  if (order.size() != r) throw ShapeError("permute: order length does not match rank");
  std::vector<bool> used(r, false);
  for (auto o : order) {
    if (o < 0 || o >= static_cast<std::int64_t>(r) || used[static_cast<std::size_t>(o)]) {
      throw ShapeError("permute: order is not a permutation of 0..rank-1");
    }
    used[static_cast<std::size_t>(o)] = true;
  }
  Shape out_shape;
  auto out = permute_values(x.data(), x.shape(), order, out_shape);
  std::vector<std::int64_t> inverse(r);
  for (std::size_t i = 0; i < r; ++i) inverse[static_cast<std::size_t>(order[i])] = static_cast<std::int64_t>(i);
  return make_op_result(out_shape, std::move(out), "permute", {x},
                        [inverse](const Tensor& g) {
                          Shape back;
                          auto gx = permute_values(g.data(), g.shape(), inverse, back);
                          return std::vector<Tensor>{Tensor(back, std::move(gx))};
                        });
}

Tensor narrow(const Tensor& x, std::int64_t axis, std::int64_t start, std::int64_t length) {
  axis = normalize_axis(axis, x.rank(), "narrow");
  const auto s = split_axis(x.shape(), axis);
  if (start < 0 || length <= 0 || start + length > s.extent) {
    throw ShapeError("narrow: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") outside axis of extent " +
                     std::to_string(s.extent));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  std::vector<float> out(static_cast<std::size_t>(s.outer * length * s.inner));
  auto in = x.data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    std::copy_n(in.data() + (o * s.extent + start) * s.inner, length * s.inner,
                out.data() + o * length * s.inner);
  }
  Shape in_shape = x.shape();
  return make_op_result(out_shape, std::move(out), "narrow", {x},
                        [in_shape, s, start, length](const Tensor& g) {
                          std::vector<float> gx(static_cast<std::size_t>(shape_numel(in_shape)), 0.0f);
                          auto gd = g.data();
                          for (std::int64_t o = 0; o < s.outer; ++o) {
                            std::copy_n(gd.data() + o * length * s.inner, length * s.inner,
                                        gx.data() + (o * s.extent + start) * s.inner);
                          }
                          return std::vector<Tensor>{Tensor(in_shape, std::move(gx))};
                        });
}

Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  axis = normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = parts[0].shape();
    if (a.size() != b.size()) throw ShapeError("concat: rank mismatch");
    a[static_cast<std::size_t>(axis)] = b[static_cast<std::size_t>(axis)] = 0;
    if (a != b) {
      throw ShapeError("concat: extents differ off the concat axis: " + shape_str(p.shape()) +
                       " vs " + shape_str(parts[0].shape()));
    }
    total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  const auto s = split_axis(out_shape, axis);
  std::vector<float> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::int64_t offset = 0;
  std::vector<std::int64_t> extents;
  for (const auto& p : parts) {
    const auto e = p.dim(axis);
    extents.push_back(e);
    auto in = p.data();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      std::copy_n(in.data() + o * e * s.inner, e * s.inner,
                  out.data() + (o * total + offset) * s.inner);
    }
    offset += e;
  }
  std::vector<Shape> shapes;
  for (const auto& p : parts) shapes.push_back(p.shape());
  return make_op_result(out_shape, std::move(out), "concat", parts,
                        [shapes, extents, s, total](const Tensor& g) {
                          std::vector<Tensor> grads;
                          auto gd = g.data();
                          std::int64_t off = 0;
                          for (std::size_t k = 0; k < shapes.size(); ++k) {
                            const auto e = extents[k];
                            std::vector<float> gp(static_cast<std::size_t>(shape_numel(shapes[k])));
                            for (std::int64_t o = 0; o < s.outer; ++o) {
                              std::copy_n(gd.data() + (o * total + off) * s.inner, e * s.inner,
                                          gp.data() + o * e * s.inner);
                            }
                            grads.emplace_back(shapes[k], std::move(gp));
                            off += e;
                          }
                          return grads;
                        });
}

}  // namespace convivit
