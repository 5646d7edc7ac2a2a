#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "convivit/data.hpp"
#include "convivit/model.hpp"
#include "convivit/tensor.hpp"

namespace convivit {

enum class OptimizerKind { Sgd, Adam };

const char* optimizer_name(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double momentum = 0.9;  // SGD only
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::int64_t batch_size = 8;
  std::int64_t epochs = 30;
  std::uint64_t seed = 0;
  /// Global gradient-norm clip; 0 disables clipping.
  double clip_norm = 0.0;
  /// Stop once test accuracy reaches this value; 0 disables early stopping.
  double target_accuracy = 0.0;

  void validate() const;
};

/// Mean over the batch of -log softmax(logits)[label] (log-sum-exp form).
Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels);

/// Same loss evaluated entirely in 64-bit arithmetic from float logits.
double cross_entropy_value(const Tensor& logits, const std::vector<std::int64_t>& labels);

/// SGD with momentum (v <- mu v + g, p <- p - lr v) or bias-corrected Adam
/// (eps = 1e-8). State is keyed by parameter name.
class Optimizer {
 public:
  explicit Optimizer(TrainConfig config);

  /// Updates every trainable parameter in place; throws Error if any lacks a gradient.
  void step(ParameterStore& params, const Gradients& grads);
  std::int64_t steps() const { return steps_; }

 private:
  TrainConfig config_;
  std::int64_t steps_ = 0;
  std::map<std::string, std::vector<float>> first_, second_;
};

/// Global L2 norm of the gradients of all trainable parameters (64-bit).
double gradient_norm(const ParameterStore& params, const Gradients& grads);

struct EvalResult {
  std::int64_t correct = 0;
  std::int64_t total = 0;
  double accuracy = 0.0;
  /// confusion[true][predicted]
  std::vector<std::vector<std::int64_t>> confusion;
};

EvalResult evaluate(const std::function<std::int64_t(const Clip&)>& predict,
                    const std::vector<Clip>& data, std::int64_t num_classes);

/// Batched eval-mode evaluation of a model.
EvalResult evaluate(ConViViT& model, const std::vector<Clip>& data, std::int64_t batch_size = 8);

/// B x 3 x T x H x W batch of the selected clips.
Tensor stack_clips(const std::vector<Clip>& data, const std::vector<std::size_t>& indices);

std::vector<std::int64_t> argmax_rows(const Tensor& logits);

struct EpochMetrics {
  std::int64_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;

  /// `epoch=.. loss=.. train_acc=.. test_acc=..`
  std::string to_line() const;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  EvalResult final_eval;
  bool reached_target = false;
};

/// Minibatch training with a seeded per-epoch shuffle; evaluates on `test`
/// after each epoch. Throws NumericalError on a non-finite loss.
TrainResult train_model(ConViViT& model, const TrainConfig& config, const std::vector<Clip>& train,
                        const std::vector<Clip>& test,
                        const std::function<void(const EpochMetrics&)>& on_epoch = {});

}  // namespace convivit
