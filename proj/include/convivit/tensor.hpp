#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace convivit {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;
struct Node;

/// Dense row-major float32 tensor.
///
/// A Tensor is a cheap handle: copies share the same buffer and autodiff
/// node. Values are treated as immutable once a tensor has been consumed by
/// an op; `mutable_data()` exists for the owners of leaf tensors
/// (initializers, optimizers, test fixtures).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }
  static Tensor scalar(float value) { return Tensor(Shape{}, std::vector<float>{value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t rank() const { return static_cast<std::int64_t>(shape().size()); }
  /// Extent of `axis`; negative axes count from the back.
  std::int64_t dim(std::int64_t axis) const;
  std::int64_t numel() const;

  std::span<const float> data() const;
  std::span<float> mutable_data();
  const float* ptr() const { return data().data(); }

  float item() const;
  float at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const;
  /// Marks a leaf tensor as a trainable input of the tape.
  Tensor& set_requires_grad(bool flag);
  /// Id of the autodiff node, 0 when the tensor is not on the tape.
  std::uint64_t node_id() const;
  const std::shared_ptr<Node>& node() const;

  /// Same values, detached from the tape.
  Tensor detach() const;
  /// Deep copy of the values, detached from the tape.
  Tensor clone() const;
  /// Differentiable reshape; shares the buffer.
  Tensor reshape(Shape shape) const;

 private:
  struct Impl {
    Shape shape;
    std::shared_ptr<std::vector<float>> buffer;
    std::shared_ptr<Node> node;
  };
  std::shared_ptr<Impl> impl_;

  friend Tensor make_op_result(Shape, std::vector<float>, const char*, std::vector<Tensor>,
                               std::function<std::vector<Tensor>(const Tensor&)>);
  friend Tensor share_buffer(const Tensor&, Shape);
};

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_output)>;

/// One entry of the autodiff tape.
///
/// Ids are drawn from a monotonically increasing counter, so every input has
/// a smaller id than its consumers and a descending-id sweep is a valid
/// reverse topological order.
struct Node {
  std::uint64_t id = 0;
  const char* op = "leaf";
  std::vector<Tensor> inputs;
  /// Returns one gradient per input (undefined when the input needs none).
  BackwardFn backward;
  bool freed = false;
};

/// Builds the result of a differentiable op. The node is only recorded when
/// gradient mode is on and at least one input requires gradients.
Tensor make_op_result(Shape shape, std::vector<float> values, const char* op,
                      std::vector<Tensor> inputs, BackwardFn backward);

/// New tensor over the same buffer with a different shape (no tape entry).
Tensor share_buffer(const Tensor& t, Shape shape);

bool grad_enabled();

/// Disables tape recording for its lifetime (evaluation, finite differences).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Gradients produced by one backward sweep, keyed by node id.
class Gradients {
 public:
  bool contains(const Tensor& t) const;
  /// Gradient of `t`; throws if `t` received none.
  const Tensor& of(const Tensor& t) const;
  std::size_t size() const { return grads_.size(); }

  std::unordered_map<std::uint64_t, Tensor>& map() { return grads_; }
  const std::unordered_map<std::uint64_t, Tensor>& map() const { return grads_; }

 private:
  std::unordered_map<std::uint64_t, Tensor> grads_;
};

/// Reverse sweep from a scalar loss. Gradients are kept for the loss itself
/// and for every leaf tensor that requires gradients; the tape below the
/// loss is released afterwards, so a second call on the same loss throws.
Gradients backward(const Tensor& loss);

}  // namespace convivit
