#include "convivit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "convivit/ops.hpp"
#include "convivit/rng.hpp"
#include "convivit/train.hpp"

namespace convivit {

Objective weighted_sum_objective(std::function<Tensor()> f, const Shape& output_shape,
                                 std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> w(static_cast<std::size_t>(shape_numel(output_shape)));
  for (auto& v : w) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  Tensor weights(output_shape, w);
  Objective obj;
  obj.forward = [f, weights] { return sum(mul(f(), weights)); };
  obj.evaluate = [f, w] {
    NoGradGuard guard;
    const Tensor out = f();
    auto y = out.data();
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(w[i]) * y[i];
    return s;
  };
  return obj;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

bool GradCheckReport::passed() const {
  return std::none_of(groups.begin(), groups.end(), [](const GradCheckGroup& g) { return g.flagged; });
}

std::string GradCheckReport::to_text() const {
  std::string out = "group max_rel_error checked status\n";
  char buf[256];
  for (const auto& g : groups) {
    std::snprintf(buf, sizeof buf, "%s %.3e %lld %s\n", g.group.c_str(), g.max_rel_error,
                  static_cast<long long>(g.checked), g.flagged ? "FAIL" : "ok");
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "total checked=%lld max_rel_error=%.3e %s\n",
                static_cast<long long>(checked), max_rel_error, passed() ? "PASS" : "FAIL");
  out += buf;
  return out;
}

GradCheckReport grad_check(const Objective& objective, std::vector<NamedTensor> params,
                           const GradCheckConfig& config) {
  for (auto& p : params) p.tensor.set_requires_grad(true);
  const Gradients grads = backward(objective.forward());

  Rng rng(config.seed);
  std::map<std::string, GradCheckGroup> groups;
  std::vector<std::string> order;
  GradCheckReport report;
  for (auto& p : params) {
    const auto n = p.tensor.numel();
    std::vector<std::int64_t> idx;
    if (n <= config.samples_per_tensor) {
      for (std::int64_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      while (static_cast<std::int64_t>(idx.size()) < config.samples_per_tensor) {
        const auto i = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(n)));
        if (std::find(idx.begin(), idx.end(), i) == idx.end()) idx.push_back(i);
      }
    }
    std::vector<float> analytic(static_cast<std::size_t>(n), 0.0f);
    if (grads.contains(p.tensor)) {
      auto g = grads.of(p.tensor).data();
      std::copy(g.begin(), g.end(), analytic.begin());
    }

    const auto group_name = ParameterStore::group_of(p.name);
    auto [it, inserted] = groups.try_emplace(group_name);
    if (inserted) {
      it->second.group = group_name;
      order.push_back(group_name);
    }
    auto& group = it->second;
    for (auto i : idx) {
      auto data = p.tensor.mutable_data();
      const float orig = data[static_cast<std::size_t>(i)];
      const float up = orig + static_cast<float>(config.epsilon);
      const float down = orig - static_cast<float>(config.epsilon);
      data[static_cast<std::size_t>(i)] = up;
      const double f_up = objective.evaluate();
      p.tensor.mutable_data()[static_cast<std::size_t>(i)] = down;
      const double f_down = objective.evaluate();
      p.tensor.mutable_data()[static_cast<std::size_t>(i)] = orig;
      // divide by the step actually taken in float
      const double numeric = (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
      const double err = relative_error(analytic[static_cast<std::size_t>(i)], numeric,
                                        config.magnitude_floor);
      group.max_rel_error = std::max(group.max_rel_error, err);
      ++group.checked;
      ++report.checked;
      report.max_rel_error = std::max(report.max_rel_error, err);
    }
  }
  for (const auto& name : order) {
    auto g = groups[name];
    g.flagged = !(g.max_rel_error < config.tolerance);
    report.groups.push_back(g);
  }
  return report;
}

GradCheckReport grad_check_model(ConViViT& model, const Tensor& clips,
                                 const std::vector<std::int64_t>& labels,
                                 const GradCheckConfig& config) {
  // Train-mode batch norm updates running statistics on every pass; keep a
  // copy so the check leaves the model as it found it.
  std::vector<std::pair<Tensor, std::vector<float>>> buffers;
  std::vector<NamedTensor> params;
  for (auto& e : model.parameters().entries()) {
    if (e.trainable) {
      params.push_back({e.name, e.tensor});
    } else {
      buffers.emplace_back(e.tensor, std::vector<float>(e.tensor.data().begin(), e.tensor.data().end()));
    }
  }
  Objective obj;
  obj.forward = [&] { return cross_entropy(model.forward(clips, Mode::Train), labels); };
  obj.evaluate = [&] {
    NoGradGuard guard;
    return cross_entropy_value(model.forward(clips, Mode::Train), labels);
  };
  auto report = grad_check(obj, std::move(params), config);
  for (auto& [t, values] : buffers) std::copy(values.begin(), values.end(), t.mutable_data().begin());
  return report;
}

ModelConfig micro_model_config(Variant variant) {
  ModelConfig c;
  c.stem_channels = {16, 128};
  c.cnn_blocks = 2;
  c.patch = {1, 2, 2};
  c.embed_dim = 16;
  c.depth = 1;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.variant = variant;
  c.num_classes = 4;
  return c;
}

}  // namespace convivit
