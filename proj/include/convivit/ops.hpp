#pragma once

#include <cstdint>
#include <vector>

#include "convivit/tensor.hpp"

namespace convivit {

// Elementwise ops require identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);

/// Sum of all elements as a rank-0 tensor (64-bit accumulation).
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean over one axis; the axis is removed from the result.
Tensor mean_axis(const Tensor& x, std::int64_t axis);

/// Batched matrix product over the trailing two axes. Leading axes follow
/// numpy broadcasting (missing or unit extents broadcast).
Tensor matmul(const Tensor& a, const Tensor& b);

/// Numerically stable softmax along `axis` (per-slice max subtracted).
Tensor softmax(const Tensor& x, std::int64_t axis);

/// result[i_0, ..., i_{r-1}] = x[j] with j[order[k]] = i_k.
Tensor permute(const Tensor& x, const std::vector<std::int64_t>& order);

/// Contiguous slice [start, start + length) of `axis`.
Tensor narrow(const Tensor& x, std::int64_t axis, std::int64_t start, std::int64_t length);

/// Concatenation along `axis`; all other extents must match.
Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis);

}  // namespace convivit
