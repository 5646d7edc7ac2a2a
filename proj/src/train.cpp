#include "convivit/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "convivit/errors.hpp"
#include "convivit/rng.hpp"

namespace convivit {

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train: lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0, 1)");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw ConfigError("train: betas must be in [0, 1)");
  }
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (clip_norm < 0.0) throw ConfigError("train: clip_norm must be >= 0");
  if (target_accuracy < 0.0 || target_accuracy > 1.0) {
    throw ConfigError("train: target_accuracy must be in [0, 1]");
  }
}

namespace {

void check_labels(const Tensor& logits, const std::vector<std::int64_t>& labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be B x K, got " + shape_str(logits.shape()));
  if (static_cast<std::int64_t>(labels.size()) != logits.dim(0)) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(logits.dim(0)));
  }
  for (auto l : labels) {
    if (l < 0 || l >= logits.dim(1)) {
      throw Error("cross_entropy: label " + std::to_string(l) + " out of range for " +
                  std::to_string(logits.dim(1)) + " classes");
    }
  }
}

}  // namespace

double cross_entropy_value(const Tensor& logits, const std::vector<std::int64_t>& labels) {
  check_labels(logits, labels);
  const auto B = logits.dim(0), K = logits.dim(1);
  auto z = logits.data();
  double total = 0.0;
  for (std::int64_t b = 0; b < B; ++b) {
    const float* row = z.data() + b * K;
    const double mx = *std::max_element(row, row + K);
    double s = 0.0;
    for (std::int64_t k = 0; k < K; ++k) s += std::exp(row[k] - mx);
    total += mx + std::log(s) - row[labels[static_cast<std::size_t>(b)]];
  }
  return total / static_cast<double>(B);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels) {
  const double loss = cross_entropy_value(logits, labels);
  const auto B = logits.dim(0), K = logits.dim(1);
  return make_op_result({}, {static_cast<float>(loss)}, "cross_entropy", {logits},
                        [logits, labels, B, K](const Tensor& g) {
                          // d/dz = (softmax(z) - onehot) * g / B
                          auto z = logits.data();
                          std::vector<float> gz(static_cast<std::size_t>(B * K));
                          const double scale = g.item() / static_cast<double>(B);
                          for (std::int64_t b = 0; b < B; ++b) {
                            const float* row = z.data() + b * K;
                            const double mx = *std::max_element(row, row + K);
                            double s = 0.0;
                            for (std::int64_t k = 0; k < K; ++k) s += std::exp(row[k] - mx);
                            for (std::int64_t k = 0; k < K; ++k) {
                              double p = std::exp(row[k] - mx) / s;
                              if (k == labels[static_cast<std::size_t>(b)]) p -= 1.0;
                              gz[static_cast<std::size_t>(b * K + k)] = static_cast<float>(p * scale);
                            }
                          }
                          return std::vector<Tensor>{Tensor(logits.shape(), std::move(gz))};
                        });
}

double gradient_norm(const ParameterStore& params, const Gradients& grads) {
  double sq = 0.0;
  for (const auto& e : params.entries()) {
    if (!e.trainable || !grads.contains(e.tensor)) continue;
    for (float g : grads.of(e.tensor).data()) sq += static_cast<double>(g) * g;
  }
  return std::sqrt(sq);
}

Optimizer::Optimizer(TrainConfig config) : config_(config) { config_.validate(); }

void Optimizer::step(ParameterStore& params, const Gradients& grads) {
  for (const auto& e : params.entries()) {
    if (e.trainable && !grads.contains(e.tensor)) {
      throw Error("optimizer: missing gradient for parameter '" + e.name + "'");
    }
  }
  ++steps_;
  double clip = 1.0;
  if (config_.clip_norm > 0.0) {
    const double norm = gradient_norm(params, grads);
    if (norm > config_.clip_norm) clip = config_.clip_norm / norm;
  }
  const double lr = config_.learning_rate;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  constexpr double eps = 1e-8;
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    auto p = e.tensor.mutable_data();
    auto g = grads.of(e.tensor).data();
    auto& m = first_[e.name];
    if (m.empty()) m.assign(p.size(), 0.0f);
    if (config_.optimizer == OptimizerKind::Sgd) {
      const float mu = static_cast<float>(config_.momentum);
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = mu * m[i] + static_cast<float>(clip * g[i]);
        p[i] -= static_cast<float>(lr * m[i]);
      }
    } else {
      auto& v = second_[e.name];
      if (v.empty()) v.assign(p.size(), 0.0f);
      const double b1 = config_.beta1, b2 = config_.beta2;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = clip * g[i];
        m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * gi);
        v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * gi * gi);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }
}

EvalResult evaluate(const std::function<std::int64_t(const Clip&)>& predict,
                    const std::vector<Clip>& data, std::int64_t num_classes) {
  if (data.empty()) throw Error("evaluate: empty dataset");
  EvalResult r;
  r.confusion.assign(static_cast<std::size_t>(num_classes),
                     std::vector<std::int64_t>(static_cast<std::size_t>(num_classes), 0));
  for (const auto& c : data) {
    const auto p = predict(c);
    if (c.label < 0 || c.label >= num_classes || p < 0 || p >= num_classes) {
      throw Error("evaluate: label or prediction out of range");
    }
    ++r.confusion[static_cast<std::size_t>(c.label)][static_cast<std::size_t>(p)];
    r.correct += p == c.label;
    ++r.total;
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

Tensor stack_clips(const std::vector<Clip>& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw Error("stack_clips: no clips selected");
  const Shape clip_shape = data[indices[0]].video.shape();
  Shape shape{static_cast<std::int64_t>(indices.size())};
  shape.insert(shape.end(), clip_shape.begin(), clip_shape.end());
  std::vector<float> values;
  values.reserve(static_cast<std::size_t>(shape_numel(shape)));
  for (auto i : indices) {
    const auto& v = data[i].video;
    if (v.shape() != clip_shape) {
      throw ShapeError("stack_clips: clip " + shape_str(v.shape()) + " differs from " + shape_str(clip_shape));
    }
    values.insert(values.end(), v.data().begin(), v.data().end());
  }
  return Tensor(shape, std::move(values));
}

std::vector<std::int64_t> argmax_rows(const Tensor& logits) {
  const auto B = logits.dim(0), K = logits.dim(1);
  std::vector<std::int64_t> out(static_cast<std::size_t>(B));
  auto z = logits.data();
  for (std::int64_t b = 0; b < B; ++b) {
    const float* row = z.data() + b * K;
    out[static_cast<std::size_t>(b)] = std::max_element(row, row + K) - row;
  }
  return out;
}

EvalResult evaluate(ConViViT& model, const std::vector<Clip>& data, std::int64_t batch_size) {
  if (data.empty()) throw Error("evaluate: empty dataset");
  NoGradGuard no_grad;
  std::vector<std::int64_t> predictions(data.size());
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
      idx.push_back(i);
    }
    const auto pred = argmax_rows(model.forward(stack_clips(data, idx), Mode::Eval));
    for (std::size_t j = 0; j < idx.size(); ++j) predictions[idx[j]] = pred[j];
  }
  std::size_t cursor = 0;
  return evaluate([&](const Clip&) { return predictions[cursor++]; }, data,
                  model.config().num_classes);
}

std::string EpochMetrics::to_line() const {
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch=%lld loss=%.6f train_acc=%.4f test_acc=%.4f",
                static_cast<long long>(epoch), loss, train_accuracy, test_accuracy);
  return buf;
}

TrainResult train_model(ConViViT& model, const TrainConfig& config, const std::vector<Clip>& train,
                        const std::vector<Clip>& test,
                        const std::function<void(const EpochMetrics&)>& on_epoch) {
  config.validate();
  if (train.empty() || test.empty()) throw Error("train: empty train or test set");
  Optimizer opt(config);
  Rng shuffle_rng(mix_seed(config.seed, 17));
  std::vector<std::size_t> order(train.size());
  TrainResult result;
  for (std::int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
    }
    double loss_sum = 0.0;
    std::int64_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const auto stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(stop));
      std::vector<std::int64_t> labels;
      for (auto i : idx) labels.push_back(train[i].label);
      Tensor logits = model.forward(stack_clips(train, idx), Mode::Train);
      Tensor loss = cross_entropy(logits, labels);
      if (!std::isfinite(loss.item())) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch));
      }
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
      const auto pred = argmax_rows(logits);
      for (std::size_t j = 0; j < idx.size(); ++j) correct += pred[j] == labels[j];
      opt.step(model.parameters(), backward(loss));
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.loss = loss_sum / static_cast<double>(train.size());
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
    result.final_eval = evaluate(model, test, config.batch_size);
    m.test_accuracy = result.final_eval.accuracy;
    result.epochs.push_back(m);
    if (on_epoch) on_epoch(m);
    if (config.target_accuracy > 0.0 && m.test_accuracy >= config.target_accuracy) {
      result.reached_target = true;
      break;
    }
  }
  return result;
}

}  // namespace convivit
