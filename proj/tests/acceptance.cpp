// Acceptance runner: one PASS/FAIL line per criterion. Criteria can be
// selected by number on the command line (default: all).

#include <algorithm>
#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "convivit/checkpoint.hpp"
#include "convivit/cli.hpp"
#include "convivit/config.hpp"
#include "convivit/data.hpp"
#include "convivit/flops.hpp"
#include "convivit/gradcheck.hpp"
#include "convivit/model.hpp"
#include "convivit/nn.hpp"
#include "convivit/ops.hpp"
#include "convivit/train.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"
#include "probes.hpp"

using namespace convivit;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

void note(const std::string& s) { std::printf("    %s\n", s.c_str()); std::fflush(stdout); }

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), sizeof(float) * a.numel()) == 0;
}

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("convivit_accept_" + std::to_string(getpid()) + "_" + name);
  fs::remove_all(p);
  return p;
}

// ---------------------------------------------------------------- 1

Outcome conv_oracle() {
  const auto start = Clock::now();
  Rng rng(1);
  std::int64_t cases = 0;
  double worst = 0;
  auto check = [&](const Conv3dSpec& spec, std::int64_t B, const Triple& ext) {
    const auto x = oracle::random_tensor({B, spec.in_channels, ext[0], ext[1], ext[2]}, rng);
    const double bound = 1.0 / std::sqrt(double(spec.weight_shape()[1] * spec.kernel[0] * spec.kernel[1] * spec.kernel[2]));
    const auto w = oracle::random_tensor(spec.weight_shape(), rng, -bound, bound);
    const auto b = oracle::random_tensor({spec.out_channels}, rng);
    const auto ref = oracle::conv3d(x, w, &b, spec);
    worst = std::max(worst, oracle::max_abs_diff(ref, conv3d(x, w, b, spec).data()));
    if (spec.depthwise()) worst = std::max(worst, oracle::max_abs_diff(ref, depthwise_conv3d(x, w, b, spec).data()));
    ++cases;
  };
  struct Channels {
    std::int64_t in, out, groups;
  };
  const Channels channel_plans[] = {{2, 3, 1}, {4, 6, 2}, {3, 3, 3}};
  // every input extent and kernel extent up to 5 on each axis
  for (std::int64_t t = 1; t <= 5; ++t)
    for (std::int64_t h = 1; h <= 5; ++h)
      for (std::int64_t w = 1; w <= 5; ++w)
        for (std::int64_t kt = 1; kt <= 5; ++kt)
          for (std::int64_t kh = 1; kh <= 5; ++kh)
            for (std::int64_t kw = 1; kw <= 5; ++kw)
              for (int geometry = 0; geometry < 2; ++geometry) {
                Conv3dSpec s;
                const auto& c = channel_plans[(t + h + w + kt + kh + kw + geometry) % 3];
                s.in_channels = c.in;
                s.out_channels = c.out;
                s.groups = c.groups;
                s.kernel = {kt, kh, kw};
                if (geometry == 1) {
                  s.stride = {1, 2, 2};
                  s.padding = {kt / 2, kh / 2, kw / 2};
                }
                const Triple ext{t, h, w};
                const auto out = s.output_extents(ext);
                if (out[0] < 1 || out[1] < 1 || out[2] < 1) continue;
                check(s, 1, ext);
              }
  const auto exhaustive = cases;
  for (int i = 0; i < 100; ++i) {
    Conv3dSpec s;
    const std::int64_t groups = std::int64_t{1} << rng.uniform_int(3);
    s.groups = groups;
    s.in_channels = groups * static_cast<std::int64_t>(1 + rng.uniform_int(3));
    s.out_channels = rng.uniform_int(3) == 0 ? s.in_channels : groups * static_cast<std::int64_t>(1 + rng.uniform_int(3));
    if (rng.uniform_int(4) == 0) s.in_channels = s.out_channels = s.groups;  // depthwise
    Triple ext;
    for (int a = 0; a < 3; ++a) {
      s.kernel[a] = static_cast<std::int64_t>(1 + rng.uniform_int(5));
      s.stride[a] = static_cast<std::int64_t>(1 + rng.uniform_int(3));
      s.padding[a] = static_cast<std::int64_t>(rng.uniform_int(3));
      ext[a] = static_cast<std::int64_t>(6 + rng.uniform_int(7));
    }
    check(s, static_cast<std::int64_t>(1 + rng.uniform_int(2)), ext);
  }
  const double secs = seconds_since(start);
  const bool ok = worst <= 1e-5 && secs < 120;
  return {ok, fmt("%lld exhaustive + %lld random cases, max |diff| %.2e (limit 1e-5), %.1fs (limit 120s)",
                  static_cast<long long>(exhaustive), static_cast<long long>(cases - exhaustive), worst, secs)};
}

// ---------------------------------------------------------------- 2

Outcome gradient_suite() {
  const auto start = Clock::now();
  bool ok = true;
  double worst_op = 0;
  std::int64_t checked = 0;
  std::vector<std::string> failed;
  auto record = [&](const std::string& name, const GradCheckReport& r) {
    checked += r.checked;
    worst_op = std::max(worst_op, r.max_rel_error);
    if (!r.passed()) {
      ok = false;
      failed.push_back(name);
      note("gradient check failed for " + name + "\n" + r.to_text());
    }
  };
  using Fn = std::function<Tensor(const std::vector<Tensor>&)>;
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    Rng rng(500 + trial);
    auto r = [&](const Shape& s) { return oracle::random_tensor(s, rng); };
    auto a = r({3, 4}), b = r({3, 4});
    const std::vector<std::pair<std::string, Fn>> binary = {
        {"add", [](const auto& p) { return add(p[0], p[1]); }},
        {"sub", [](const auto& p) { return sub(p[0], p[1]); }},
        {"mul", [](const auto& p) { return mul(p[0], p[1]); }},
        {"scale", [](const auto& p) { return scale(p[0], -1.7f); }},
        {"sum", [](const auto& p) { return sum(p[0]); }},
        {"mean", [](const auto& p) { return mean(p[0]); }},
        {"mean_axis", [](const auto& p) { return mean_axis(p[0], 0); }},
        {"softmax", [](const auto& p) { return softmax(p[0], 1); }},
        {"permute", [](const auto& p) { return permute(p[0], {1, 0}); }},
        {"reshape", [](const auto& p) { return p[0].reshape({2, 6}); }},
        {"narrow", [](const auto& p) { return narrow(p[0], 1, 1, 2); }},
        {"concat", [](const auto& p) { return concat({p[0], p[1]}, 0); }},
    };
    for (const auto& [name, f] : binary) record(name, oracle::fd_check({a.clone(), b.clone()}, f, trial));
    record("matmul", oracle::fd_check({r({2, 4, 3}), a.clone(), r({4, 2})},
                                      [](const auto& p) { return matmul(matmul(p[0], p[1]), p[2]); }, trial));

    Conv3dSpec cs;
    cs.in_channels = cs.out_channels = 4;
    cs.groups = 2;
    cs.kernel = {3, 2, 3};
    cs.stride = {1, 2, 2};
    cs.padding = {1, 0, 1};
    record("conv3d", oracle::fd_check({r({2, 4, 3, 4, 5}), r(cs.weight_shape()), r({4})},
                                      [cs](const auto& p) { return conv3d(p[0], p[1], p[2], cs); }, trial));
    auto ds = Conv3dSpec::depthwise_spec(2, 5, 2, {1, 2, 2});
    record("depthwise_conv3d", oracle::fd_check({r({1, 2, 3, 6, 6}), r(ds.weight_shape()), r({2})},
                                                [ds](const auto& p) { return depthwise_conv3d(p[0], p[1], p[2], ds); }, trial));
    record("batch_norm3d", oracle::fd_check({r({2, 3, 2, 3, 3}), r({3}), r({3})}, [](const auto& p) {
             auto stats = BatchNormStats::fresh(3);
             return batch_norm3d(p[0], p[1], p[2], stats, Mode::Train);
           }, trial));
    record("linear", oracle::fd_check({r({2, 3, 6}), r({4, 6}), r({4})},
                                      [](const auto& p) { return linear(p[0], p[1], p[2]); }, trial));
    record("gelu", oracle::fd_check({r({5, 6})}, [](const auto& p) { return gelu(p[0]); }, trial));
    record("layer_norm", oracle::fd_check({r({4, 6}), r({6}), r({6})},
                                          [](const auto& p) { return layer_norm(p[0], p[1], p[2]); }, trial));
    record("scaled_dot_product_attention",
           oracle::fd_check({r({2, 4, 3}), r({2, 5, 3}), r({2, 5, 3})},
                            [](const auto& p) { return scaled_dot_product_attention(p[0], p[1], p[2]).first; }, trial));
    record("multi_head_attention",
           oracle::fd_check({r({2, 3, 4}), r({4, 4}), r({4}), r({4, 4}), r({4}), r({4, 4}), r({4}), r({4, 4}), r({4})},
                            [](const auto& p) {
                              AttentionParams q{p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8]};
                              return multi_head_attention(p[0], p[0], p[0], q, {4, 2});
                            },
                            trial));
    record("cross_entropy", oracle::fd_check({r({3, 5})}, [](const auto& p) { return cross_entropy(p[0], {4, 0, 2}); }, trial));
  }

  double worst_model = 0;
  for (auto v : {Variant::FactorizedSelf, Variant::FactorizedDotProduct}) {
    ConViViT model(micro_model_config(v), 5);
    Rng rng(6);
    const auto clips = oracle::random_tensor({2, 3, 2, 16, 16}, rng, 0.0, 1.0);
    GradCheckConfig cfg;
    cfg.seed = 7;
    const auto rep = grad_check_model(model, clips, {1, 3}, cfg);
    checked += rep.checked;
    worst_model = std::max(worst_model, rep.max_rel_error);
    note(fmt("micro model %s: %lld entries over %zu groups, max rel error %.2e", variant_name(v),
             static_cast<long long>(rep.checked), rep.groups.size(), rep.max_rel_error));
    if (!rep.passed()) {
      ok = false;
      failed.push_back(std::string("model ") + variant_name(v));
      note(rep.to_text());
    }
  }
  const double secs = seconds_since(start);
  ok = ok && worst_op < 1e-2 && worst_model < 1e-2 && secs < 600;
  std::string detail = fmt("%lld entries; max rel error ops %.2e, micro models %.2e (limit 1e-2); %.1fs (limit 600s)",
                           static_cast<long long>(checked), worst_op, worst_model, secs);
  for (const auto& f : failed) detail += "; failed: " + f;
  return {ok, detail};
}

// ---------------------------------------------------------------- 3

Outcome normalization() {
  const auto start = Clock::now();
  std::vector<ConViViT> models;
  for (auto v : {Variant::FactorizedSelf, Variant::FactorizedDotProduct}) {
    ModelConfig c;
    c.variant = v;
    models.emplace_back(c, 31);
    models.emplace_back(c, 32);
    fixture::randomize(models.back().parameters(), 33, 0.2);  // sharper, less uniform attention
  }
  SynthTaskSpec spec;
  Rng rng(34);
  double worst = 0;
  std::int64_t rows = 0;
  for (int i = 0; i < 100; ++i) {
    Tensor clip;
    if (i % 4 == 3) {
      clip = oracle::random_tensor({1, 3, 8, 64, 64}, rng, 0.0, 1.0);
    } else {
      clip = generate_clip(spec, static_cast<std::int64_t>(rng.uniform_int(4)), rng.next_u64()).video.reshape({1, 3, 8, 64, 64});
    }
    auto& model = models[static_cast<std::size_t>(i % 4)];
    AttentionSink sink;
    NoGradGuard guard;
    const auto logits = model.forward(clip, Mode::Eval, &sink);
    for (const auto& rec : sink.records) {
      for (int r = 0; r < rec.rows; ++r) {
        double s = 0;
        for (int c = 0; c < rec.cols; ++c) s += rec.weight(r, c);
        worst = std::max(worst, std::abs(s - 1.0));
        ++rows;
      }
    }
    const auto p = softmax(logits, 1);
    double s = 0;
    for (float v : p.data()) s += v;
    worst = std::max(worst, std::abs(s - 1.0));
    ++rows;
  }
  const bool ok = worst <= 1e-5 && rows > 0;
  return {ok, fmt("%lld softmax rows over 100 clips (both variants), max |sum - 1| %.2e (limit 1e-5), %.1fs",
                  static_cast<long long>(rows), worst, seconds_since(start))};
}

// ---------------------------------------------------------------- 4

Outcome architecture() {
  bool ok = true;
  std::string detail;
  Rng rng(41);
  const auto clip = oracle::random_tensor({2, 3, 8, 64, 64}, rng, 0.0, 1.0);
  for (auto v : {Variant::FactorizedSelf, Variant::FactorizedDotProduct}) {
    ModelConfig c;
    c.variant = v;
    ConViViT model(c, 42);
    ForwardTrace trace;
    NoGradGuard guard;
    model.forward(clip, Mode::Eval, nullptr, &trace);
    const auto& stem = trace.stem_blocks.back();
    const bool channels = stem.dim(1) == 128;
    bool conserved = trace.grids.size() == static_cast<std::size_t>(c.depth + 1);
    for (const auto& g : trace.grids) {
      conserved = conserved && g.time() == trace.grids[0].time() && g.count() == trace.grids[0].count() &&
                  g.batch() == 2 && g.dim() == c.embed_dim;
    }
    ok = ok && channels && conserved;
    detail += fmt("%s: stem %s, T=%lld N=%lld through %zu grids%s; ", variant_name(v), shape_str(stem.shape()).c_str(),
                  static_cast<long long>(trace.grids[0].time()), static_cast<long long>(trace.grids[0].count()),
                  trace.grids.size(), conserved ? "" : " NOT conserved");
  }
  // N = T = 1: one token per clip, where both variants reduce to the same map
  // once the factorized-self temporal projection is zeroed.
  int agree = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto c = micro_model_config(Variant::FactorizedDotProduct);
    c.patch = {1, 4, 4};
    ConViViT dot(c, 100 + s);
    fixture::randomize(dot.parameters(), 200 + s);
    auto self = fixture::self_twin(dot);
    Rng crng(300 + s);
    const auto x = oracle::random_tensor({2, 3, 1, 16, 16}, crng, 0.0, 1.0);
    NoGradGuard guard;
    agree += bitwise_equal(dot.forward(x, Mode::Eval), self.forward(x, Mode::Eval));
  }
  ok = ok && agree == 10;
  detail += fmt("N=T=1 bitwise agreement %d/10", agree);
  return {ok, detail};
}

// ---------------------------------------------------------------- 5

Outcome equivariance() {
  Rng rng(51);
  double attn_worst = 0, block_worst = 0, dpe_smallest = 1e9, model_dpe_smallest = 1e9;
  auto max_diff = [](const Tensor& a, const Tensor& b) {
    double m = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.data()[i]) - b.data()[i]));
    return m;
  };
  auto random_perm = [&](std::int64_t n) {
    std::vector<std::int64_t> p(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) p[i] = i;
    do {
      for (std::size_t i = p.size(); i > 1; --i) std::swap(p[i - 1], p[rng.uniform_int(i)]);
    } while (std::is_sorted(p.begin(), p.end()));
    return p;
  };
  NoGradGuard guard;
  for (int trial = 0; trial < 20; ++trial) {
    // bare multi-head attention over a sequence
    const std::int64_t S = 7, D = 8;
    auto x = oracle::random_tensor({2, S, D}, rng);
    auto r = [&](const Shape& s) { return oracle::random_tensor(s, rng, -0.5, 0.5); };
    AttentionParams p{r({D, D}), r({D}), r({D, D}), r({D}), r({D, D}), r({D}), r({D, D}), r({D})};
    const auto perm = random_perm(S);
    auto seq_perm = [&](const Tensor& t) {
      std::vector<Tensor> parts;
      for (auto i : perm) parts.push_back(narrow(t, 1, i, 1));
      return concat(parts, 1);
    };
    const auto y = multi_head_attention(x, x, x, p, {D, 2});
    const auto yp = multi_head_attention(seq_perm(x), seq_perm(x), seq_perm(x), p, {D, 2});
    attn_worst = std::max(attn_worst, max_diff(seq_perm(y), yp));

    // a full transformer block (spatial tokens) without position embedding
    auto variant = trial % 2 ? Variant::FactorizedDotProduct : Variant::FactorizedSelf;
    auto mc = micro_model_config(variant);
    ConViViT m(mc, 60 + trial);
    fixture::randomize(m.parameters(), 70 + trial);
    TokenGrid g{oracle::random_tensor({1, 3, 9, mc.embed_dim}, rng), 3, 3};
    const auto tperm = random_perm(9);
    const auto a = fixture::permute_tokens(m.transformer_block(g, 0).tokens, tperm);
    const auto b = m.transformer_block({fixture::permute_tokens(g.tokens, tperm), 3, 3}, 0).tokens;
    block_worst = std::max(block_worst, max_diff(a, b));

    // the position embedding alone
    const auto after = fixture::permute_tokens(dynamic_position_embed(g, m.dpe_weight(), m.dpe_bias()).tokens, tperm);
    const auto before = dynamic_position_embed({fixture::permute_tokens(g.tokens, tperm), 3, 3}, m.dpe_weight(), m.dpe_bias()).tokens;
    dpe_smallest = std::min(dpe_smallest, max_diff(after, before));

    // embedding followed by the block
    const auto a2 = fixture::permute_tokens(m.transformer_block(dynamic_position_embed(g, m.dpe_weight(), m.dpe_bias()), 0).tokens, tperm);
    const auto b2 = m.transformer_block(dynamic_position_embed({fixture::permute_tokens(g.tokens, tperm), 3, 3},
                                                               m.dpe_weight(), m.dpe_bias()), 0).tokens;
    model_dpe_smallest = std::min(model_dpe_smallest, max_diff(a2, b2));
  }
  const bool ok = attn_worst < 1e-5 && block_worst < 1e-5 && dpe_smallest > 1e-3 && model_dpe_smallest > 1e-3;
  return {ok, fmt("20 random trials: attention max deviation %.2e, block %.2e (limit 1e-5); "
                  "with DPE min deviation %.2e alone, %.2e with block (must exceed 1e-3)",
                  attn_worst, block_worst, dpe_smallest, model_dpe_smallest)};
}

// ---------------------------------------------------------------- 6

Outcome toy_training() {
  const RunConfig rc = resolve_config(std::nullopt, {"train.target_accuracy=0.95"}, std::nullopt);
  const auto train = generate_dataset(rc.synth, rc.data.train_size, rc.train_data_seed());
  const auto test = generate_dataset(rc.synth, rc.data.test_size, rc.test_data_seed());

  const auto probe_start = Clock::now();
  const auto probe = probe::frame_probe(train, test, {0}, rc.model.num_classes, 61);
  note(fmt("frame-0 probe: train accuracy %.3f, test accuracy %.3f (chance 0.25), %.1fs", probe.train_accuracy,
           probe.test_accuracy, seconds_since(probe_start)));
  const bool probe_ok = std::abs(probe.test_accuracy - 0.25) <= 0.10;

  const auto start = Clock::now();
  ConViViT model(rc.model, rc.init_seed());
  const auto result = train_model(model, rc.train, train, test, [&](const EpochMetrics& m) {
    note(m.to_line() + fmt(" elapsed=%.0fs", seconds_since(start)));
  });
  const double secs = seconds_since(start);
  const auto& ep = result.epochs;
  if (ep.size() >= 5) note(fmt("loss epoch 1 -> 5: %.4f -> %.4f", ep[0].loss, ep[4].loss));
  const double best = ep.empty() ? 0.0 : ep.back().test_accuracy;
  const bool ok = result.reached_target && best >= 0.95 && secs < 1800 && probe_ok;
  return {ok, fmt("%s test accuracy %.3f after %zu epochs (limit 30), %.0fs (limit 1800s); frame-0 probe %.3f "
                  "(chance 0.25 +- 0.10)",
                  variant_name(rc.model.variant), best, ep.size(), secs, probe.test_accuracy)};
}

// ---------------------------------------------------------------- 7

Outcome ablation() {
  const auto start = Clock::now();
  const auto dir = scratch_dir("ablation");
  const std::vector<std::string> args{"convivit", "ablate", "--out", dir.string(), "--set", "train.epochs=10"};
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  std::ifstream csv(dir / "ablation.csv");
  std::string line;
  std::getline(csv, line);
  std::vector<std::pair<std::string, double>> cells;
  bool all_ok = code == kExitOk;
  while (std::getline(csv, line)) {
    const auto close = line.find("\",");
    const auto label = line.substr(1, close - 1);
    std::vector<std::string> fields;
    std::stringstream ss(line.substr(close + 2));
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    // variant, cnn_blocks, params, macs, test_accuracy, status
    cells.emplace_back(label, std::stod(fields.at(4)));
    all_ok = all_ok && fields.at(5) == "ok";
    note(fmt("%-58s accuracy %.3f params %s", label.c_str(), cells.back().second, fields.at(2).c_str()));
  }
  bool top = cells.size() == 4 && cells[0].first == "Ours - Factorized Self-attention variant";
  for (const auto& c : cells) top = top && c.second <= cells[0].second;
  note("report: " + (dir / "ablation.txt").string());
  return {top && all_ok, fmt("shared budget 10 epochs x 400 clips per cell; two-block factorized self %.3f %s; %.0fs",
                             cells.empty() ? 0.0 : cells[0].second,
                             top ? "is highest (ties count)" : "is NOT highest", seconds_since(start))};
}

// ---------------------------------------------------------------- 8

Outcome flop_inequality() {
  std::int64_t configs = 0, self_violations = 0, dot_violations = 0;
  for (std::int64_t T : {2, 3, 4, 8, 16})
    for (auto [H, W] : std::vector<std::pair<std::int64_t, std::int64_t>>{{16, 32}, {32, 32}, {64, 64}, {64, 128}, {128, 128}})
      for (std::int64_t D : {32, 64, 128, 256})
        for (std::int64_t depth : {1, 4}) {
          ModelConfig c;
          c.embed_dim = D;
          c.depth = depth;
          const auto r = count_flops(c, 1, T, H, W);
          if (r.time_tokens < 2 || r.spatial_tokens < 2) continue;
          ++configs;
          self_violations += r.factorized_self.total() >= r.joint.total();
          dot_violations += r.factorized_dot_product.total() >= r.joint.total();
        }
  // default config (T=8, N=16, D=128, L=4) worked by hand:
  //   joint    4 * (2*128^2*128 + 4*128*128^2)             = 50331648
  //   self     4*8*(2*16^2*128 + 4*16*128^2) + 4*16*(2*8^2*128 + 4*8*128^2) = 70254592
  //   dot      half of self                                  = 35127296
  const auto d = count_flops(ModelConfig{}, 1, 8, 64, 64);
  const auto attn = [](const StageMacs& m) { return m.spatial_attention + m.temporal_attention + m.joint_attention; };
  const bool spot = attn(d.joint) == 50331648 && attn(d.factorized_self) == 70254592 &&
                    attn(d.factorized_dot_product) == 35127296;
  note(fmt("default totals: factorized_self %lld, factorized_dot_product %lld, joint %lld",
           static_cast<long long>(d.factorized_self.total()), static_cast<long long>(d.factorized_dot_product.total()),
           static_cast<long long>(d.joint.total())));
  return {self_violations == 0 && dot_violations == 0 && spot,
          fmt("%lld configs with T>=2, N>=2: factorized_dot_product < joint in %lld, factorized_self < joint in %lld; "
              "hand-computed default attention MACs %s",
              static_cast<long long>(configs), static_cast<long long>(configs - dot_violations),
              static_cast<long long>(configs - self_violations), spot ? "match" : "DO NOT match")};
}

// ---------------------------------------------------------------- 9

Outcome reproducibility() {
  const RunConfig rc = resolve_config(std::nullopt, {"train.epochs=1"}, std::nullopt);
  const auto train = generate_dataset(rc.synth, 16, rc.train_data_seed());
  const auto test = generate_dataset(rc.synth, 8, rc.test_data_seed());
  auto run = [&] {
    ConViViT model(rc.model, rc.init_seed());
    auto r = train_model(model, rc.train, train, test);
    return std::make_pair(std::move(model), r.epochs.at(0).to_line());
  };
  auto [m1, line1] = run();
  auto [m2, line2] = run();
  bool params_equal = true;
  for (std::size_t i = 0; i < m1.parameters().entries().size(); ++i) {
    params_equal = params_equal && bitwise_equal(m1.parameters().entries()[i].tensor, m2.parameters().entries()[i].tensor);
  }
  const bool training = params_equal && line1 == line2;

  const auto dir = scratch_dir("repro");
  fs::create_directories(dir);
  save_checkpoint(m1, dir / "model.cvvtw");
  auto back = load_checkpoint(dir / "model.cvvtw");
  bool ckpt = back.parameters().entries().size() == m1.parameters().entries().size() &&
              model_config_to_text(back.config()) == model_config_to_text(m1.config());
  for (std::size_t i = 0; ckpt && i < m1.parameters().entries().size(); ++i) {
    const auto& a = m1.parameters().entries()[i];
    const auto& b = back.parameters().entries()[i];
    ckpt = a.name == b.name && a.trainable == b.trainable && bitwise_equal(a.tensor, b.tensor);
  }
  save_clip(test[3], dir / "clip.cvc");
  const bool clip = bitwise_equal(load_clip(dir / "clip.cvc").video, test[3].video);
  fs::remove_all(dir);
  return {training && ckpt && clip,
          fmt("two seeded runs %s; checkpoint round trip %s; clip round trip %s",
              training ? "bitwise identical" : "DIFFER", ckpt ? "bitwise" : "MISMATCH", clip ? "bitwise" : "MISMATCH")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"oracle equivalence of conv3d", conv_oracle},
      {"gradient suite", gradient_suite},
      {"normalization invariants", normalization},
      {"architecture contracts", architecture},
      {"equivariance and position embedding", equivariance},
      {"toy training", toy_training},
      {"ablation direction", ablation},
      {"FLOP inequality", flop_inequality},
      {"reproducibility", reproducibility},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(n)) continue;
    std::printf("criterion %d: %s\n", n, criteria[i].first);
    std::fflush(stdout);
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", n, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
