#include "convivit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "convivit/errors.hpp"

namespace convivit {

namespace {

std::atomic<std::uint64_t> next_node_id{1};
thread_local bool grad_mode = true;

#ifdef __GLIBC__
// Activation buffers are large and short-lived. Serving them from the heap
// instead of fresh mmap pages avoids a page fault per 4 KiB on every op.
const bool allocator_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

std::shared_ptr<Node> new_node(const char* op) {
  auto node = std::make_shared<Node>();
  node->id = next_node_id.fetch_add(1);
  node->op = op;
  return node;
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  const auto n = shape_numel(shape);
  impl_ = std::make_shared<Impl>();
  impl_->shape = std::move(shape);
  impl_->buffer = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  impl_ = std::make_shared<Impl>();
  impl_->shape = std::move(shape);
  impl_->buffer = std::make_shared<std::vector<float>>(std::move(values));
}

const Shape& Tensor::shape() const {
  if (!impl_) throw Error("use of undefined tensor");
  return impl_->shape;
}

std::int64_t Tensor::dim(std::int64_t axis) const {
  const auto r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return shape()[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const float> Tensor::data() const {
  if (!impl_) throw Error("use of undefined tensor");
  return {impl_->buffer->data(), impl_->buffer->size()};
}

std::span<float> Tensor::mutable_data() {
  if (!impl_) throw Error("use of undefined tensor");
  return {impl_->buffer->data(), impl_->buffer->size()};
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return data()[0];
}

float Tensor::at(std::initializer_list<std::int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + shape_str(s));
  std::int64_t offset = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i < 0 || i >= s[k]) throw ShapeError("index out of range for " + shape_str(s));
    offset = offset * s[k] + i;
    ++k;
  }
  return data()[static_cast<std::size_t>(offset)];
}

bool Tensor::requires_grad() const { return impl_ && impl_->node != nullptr; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw Error("use of undefined tensor");
  if (flag && !impl_->node) {
    impl_->node = new_node("leaf");
  } else if (!flag) {
    impl_->node.reset();
  }
  return *this;
}

std::uint64_t Tensor::node_id() const { return impl_ && impl_->node ? impl_->node->id : 0; }

const std::shared_ptr<Node>& Tensor::node() const {
  static const std::shared_ptr<Node> none;
  return impl_ ? impl_->node : none;
}

Tensor Tensor::detach() const {
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = shape();
  t.impl_->buffer = impl_->buffer;
  return t;
}

Tensor Tensor::clone() const {
  return Tensor(shape(), std::vector<float>(data().begin(), data().end()));
}

Tensor share_buffer(const Tensor& t, Shape shape) {
  Tensor out;
  out.impl_ = std::make_shared<Tensor::Impl>();
  out.impl_->shape = std::move(shape);
  out.impl_->buffer = t.impl_->buffer;
  return out;
}

Tensor Tensor::reshape(Shape new_shape) const {
  std::int64_t known = 1;
  int inferred = -1;
  for (std::size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      if (inferred >= 0) throw ShapeError("reshape allows a single -1 extent");
      inferred = static_cast<int>(i);
    } else {
      known *= new_shape[i];
    }
  }
  if (inferred >= 0 && known > 0) new_shape[static_cast<std::size_t>(inferred)] = numel() / known;
  for (auto d : new_shape) {
    if (d <= 0) throw ShapeError("invalid reshape target " + shape_str(new_shape));
  }
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
  }
  Tensor out = share_buffer(*this, new_shape);
  if (grad_enabled() && requires_grad()) {
    auto node = new_node("reshape");
    node->inputs = {*this};
    Shape original = shape();
    node->backward = [original](const Tensor& g) {
      return std::vector<Tensor>{share_buffer(g, original)};
    };
    out.impl_->node = std::move(node);
  }
  return out;
}

Tensor make_op_result(Shape shape, std::vector<float> values, const char* op,
                      std::vector<Tensor> inputs, BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values));
  if (!grad_mode) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!any) return out;
  auto node = new_node(op);
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.impl_->node = std::move(node);
  return out;
}

bool grad_enabled() { return grad_mode; }

NoGradGuard::NoGradGuard() : previous_(grad_mode) { grad_mode = false; }
NoGradGuard::~NoGradGuard() { grad_mode = previous_; }

bool Gradients::contains(const Tensor& t) const {
  return t.node_id() != 0 && grads_.count(t.node_id()) > 0;
}

const Tensor& Gradients::of(const Tensor& t) const {
  auto it = grads_.find(t.node_id());
  if (t.node_id() == 0 || it == grads_.end()) throw Error("tensor received no gradient");
  return it->second;
}

namespace {

void accumulate(Tensor& slot, const Tensor& g) {
  if (!slot.defined()) {
    slot = g;
    return;
  }
  // Copy-on-accumulate: the first gradient may share a buffer with a saved value.
  std::vector<float> sum(slot.data().begin(), slot.data().end());
  auto src = g.data();
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += src[i];
  slot = Tensor(slot.shape(), std::move(sum));
}

}  // namespace

Gradients backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  const auto& root = loss.node();
  if (!root) throw Error("backward(): loss is not on the tape");
  if (root->freed) throw Error("backward(): tape already released for this loss");

  // Owning references: releasing one node's inputs must not destroy nodes
  // still to be visited.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> seen;
  std::vector<std::shared_ptr<Node>> stack{root};
  while (!stack.empty()) {
    auto n = stack.back();
    stack.pop_back();
    if (!seen.insert(n.get()).second) continue;
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in.defined() && in.node()) stack.push_back(in.node());
    }
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->id > b->id; });

  std::unordered_map<std::uint64_t, Tensor> pending;
  pending[root->id] = Tensor(loss.shape(), 1.0f);
  Gradients result;
  result.map()[root->id] = pending[root->id];

  for (const auto& n : order) {
    auto it = pending.find(n->id);
    if (it == pending.end()) continue;
    Tensor g = std::move(it->second);
    pending.erase(it);
    if (n->freed) throw Error("backward(): tape already released below this loss");
    if (n->inputs.empty()) {
      result.map()[n->id] = g;
      continue;
    }
    if (!n->backward) throw Error(std::string("backward(): node '") + n->op + "' has no backward");
    auto input_grads = n->backward(g);
    for (std::size_t i = 0; i < n->inputs.size() && i < input_grads.size(); ++i) {
      const auto& in = n->inputs[i];
      if (!in.defined() || !in.node() || !input_grads[i].defined()) continue;
      if (input_grads[i].shape() != in.shape()) {
        throw ShapeError(std::string("backward(): op '") + n->op + "' produced gradient " +
                         shape_str(input_grads[i].shape()) + " for input " +
                         shape_str(in.shape()));
      }
      accumulate(pending[in.node()->id], input_grads[i]);
    }
  }

  for (const auto& n : order) {
    if (n->inputs.empty()) continue;
    n->inputs.clear();
    n->backward = nullptr;
    n->freed = true;
  }
  return result;
}

}  // namespace convivit
