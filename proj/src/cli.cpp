#include "convivit/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "convivit/checkpoint.hpp"
#include "convivit/config.hpp"
#include "convivit/data.hpp"
#include "convivit/errors.hpp"
#include "convivit/flops.hpp"
#include "convivit/gradcheck.hpp"
#include "convivit/rng.hpp"
#include "convivit/train.hpp"
#include "convivit/visualize.hpp"

namespace fs = std::filesystem;

namespace convivit {

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

struct CommonArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> set;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool out_required) {
  cmd->add_option("--config", a.config, "flat key=value config file");
  auto* out = cmd->add_option("--out", a.out, "output directory");
  if (out_required) out->required();
  cmd->add_option("--seed", a.seed, "run seed (overrides run.seed)");
  cmd->add_option("--set", a.set, "override key=value (repeatable)")->take_all()->allow_extra_args(false);
  cmd->add_flag("--force", a.force, "allow a non-empty output directory");
}

RunConfig resolve(const CommonArgs& a) {
  std::optional<fs::path> file;
  if (!a.config.empty()) file = a.config;
  return resolve_config(file, a.set, a.seed);
}

void prepare_out(const CommonArgs& a, const RunConfig& config) {
  const fs::path dir(a.out);
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    if (!fs::is_directory(dir, ec)) throw IoError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir, ec) && !a.force) {
      throw IoError("output directory " + dir.string() + " is not empty (use --force)");
    }
  } else if (!fs::create_directories(dir, ec) || ec) {
    throw IoError("cannot create output directory " + dir.string());
  }
  write_text(dir / "config.resolved.txt", to_text(config));
}

std::pair<std::vector<Clip>, std::vector<Clip>> load_data(const RunConfig& c) {
  if (!c.data.train_manifest.empty()) {
    return {load_manifest_clips(c.data.train_manifest), load_manifest_clips(c.data.test_manifest)};
  }
  return {generate_dataset(c.synth, c.data.train_size, c.train_data_seed()),
          generate_dataset(c.synth, c.data.test_size, c.test_data_seed())};
}

Clip load_any_clip(const std::string& path) {
  if (fs::is_directory(path)) return load_frames_dir(path);
  return load_clip(path);
}

Tensor batch_of(const Clip& clip) {
  Shape s{1};
  s.insert(s.end(), clip.video.shape().begin(), clip.video.shape().end());
  return clip.video.reshape(s);
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string eval_report(const EvalResult& r, std::int64_t params, std::int64_t epochs) {
  std::ostringstream s;
  s << "test_accuracy=" << fixed(r.accuracy) << "\n"
    << "correct=" << r.correct << "\n"
    << "total=" << r.total << "\n"
    << "epochs=" << epochs << "\n"
    << "parameters=" << params << "\n"
    << "confusion (rows true, columns predicted):\n";
  for (const auto& row : r.confusion) {
    for (std::size_t j = 0; j < row.size(); ++j) s << (j ? " " : "") << row[j];
    s << "\n";
  }
  return s.str();
}

int cmd_train(const CommonArgs& a, std::ostream& out) {
  const RunConfig config = resolve(a);
  prepare_out(a, config);
  const fs::path dir(a.out);
  auto [train, test] = load_data(config);
  ConViViT model(config.model, config.init_seed());
  std::ofstream log(dir / "metrics.log");
  if (!log) throw IoError("cannot write " + (dir / "metrics.log").string());
  const auto result = train_model(model, config.train, train, test, [&](const EpochMetrics& m) {
    log << m.to_line() << "\n" << std::flush;
    out << m.to_line() << "\n" << std::flush;
  });
  save_checkpoint(model, dir / "model.cvvtw");
  write_text(dir / "report.txt", eval_report(result.final_eval, model.parameters().parameter_count(),
                                              static_cast<std::int64_t>(result.epochs.size())));
  out << "final test_accuracy=" << fixed(result.final_eval.accuracy) << "\n";
  return kExitOk;
}

struct AblationCell {
  std::string label;
  Variant variant;
  std::int64_t blocks;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  double accuracy = 0.0;
  std::string status = "pending";
};

void write_ablation(const fs::path& dir, const std::vector<AblationCell>& cells, const std::string& verdict) {
  std::string csv = "label,variant,cnn_blocks,params,macs,test_accuracy,status\n";
  std::string txt = "Model | Accuracy | Params | MACs per clip | Status\n";
  for (const auto& c : cells) {
    csv += "\"" + c.label + "\"," + variant_name(c.variant) + "," + std::to_string(c.blocks) + "," +
           std::to_string(c.params) + "," + std::to_string(c.macs) + "," + fixed(c.accuracy) + "," +
           c.status + "\n";
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-56s | %6.2f%% | %9lld | %14lld | %s\n", c.label.c_str(),
                  100.0 * c.accuracy, static_cast<long long>(c.params), static_cast<long long>(c.macs),
                  c.status.c_str());
    txt += buf;
  }
  if (!verdict.empty()) txt += verdict + "\n";
  write_text(dir / "ablation.csv", csv);
  write_text(dir / "ablation.txt", txt);
}

int cmd_ablate(const CommonArgs& a, std::ostream& out, std::ostream& err) {
  const RunConfig config = resolve(a);
  prepare_out(a, config);
  const fs::path dir(a.out);
  auto [train, test] = load_data(config);
  std::vector<AblationCell> cells{
      {"Ours - Factorized Self-attention variant", Variant::FactorizedSelf, 2},
      {"Ours - Factorized Dot Product self-attention variant", Variant::FactorizedDotProduct, 2},
      {"Ours - Self-attention Variant (One CNN Block)", Variant::FactorizedSelf, 1},
      {"Ours - Dot Product self-attention Variant (One CNN Block)", Variant::FactorizedDotProduct, 1},
  };
  bool any_failed = false;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    auto& cell = cells[i];
    try {
      const ModelConfig mc = ablation_model(config.model, cell.variant, cell.blocks);
      mc.validate();
      ConViViT model(mc, config.init_seed());
      cell.params = model.parameters().parameter_count();
      const auto flops = count_flops(mc, 1, config.synth.frames, config.synth.height, config.synth.width);
      cell.macs = cell.variant == Variant::FactorizedSelf ? flops.factorized_self.total()
                                                          : flops.factorized_dot_product.total();
      std::ofstream log(dir / ("cell" + std::to_string(i) + "_metrics.log"));
      // identical train config, hence identical data order, in every cell
      const auto r = train_model(model, config.train, train, test, [&](const EpochMetrics& m) {
        log << m.to_line() << "\n" << std::flush;
      });
      cell.accuracy = r.final_eval.accuracy;
      cell.status = "ok";
    } catch (const Error& e) {
      cell.status = std::string("failed: ") + e.what();
      std::replace(cell.status.begin(), cell.status.end(), ',', ';');
      any_failed = true;
      err << cell.label << ": " << e.what() << "\n";
    }
    out << cell.label << ": accuracy=" << fixed(cell.accuracy) << " (" << cell.status << ")\n";
    write_ablation(dir, cells, "");
  }
  const double top = cells[0].accuracy;
  const bool ordered = cells[0].status == "ok" &&
                       std::all_of(cells.begin(), cells.end(), [&](const AblationCell& c) { return c.accuracy <= top; });
  const std::string verdict = ordered
                                  ? "ordering: two-block factorized self-attention is highest (ties count): yes"
                                  : "ordering: FAILED, two-block factorized self-attention is not highest";
  write_ablation(dir, cells, verdict);
  out << verdict << "\n";
  return any_failed ? kExitNumerical : kExitOk;
}

int cmd_infer(const CommonArgs& a, const std::string& checkpoint, const std::string& clip_path,
              std::ostream& out) {
  ConViViT model = load_checkpoint(checkpoint);
  const Clip clip = load_any_clip(clip_path);
  Tensor logits;
  {
    NoGradGuard guard;
    logits = model.forward(batch_of(clip), Mode::Eval);
  }
  const auto K = logits.dim(1);
  auto z = logits.data();
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (float v : z) s += std::exp(v - mx);
  std::ostringstream line;
  const auto pred = argmax_rows(logits)[0];
  line << "prediction=" << pred;
  if (pred < 8) line << " direction=" << direction_name(pred);
  for (std::int64_t k = 0; k < K; ++k) line << " p" << k << "=" << fixed(std::exp(z[k] - mx) / s);
  out << line.str() << "\n";
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_text(fs::path(a.out) / "prediction.txt", line.str() + "\n");
  }
  return kExitOk;
}

int cmd_gradcheck(const CommonArgs& a, std::int64_t samples, double epsilon, std::ostream& out) {
  const RunConfig config = resolve(a);
  if (!a.out.empty()) prepare_out(a, config);
  ConViViT model(config.model, config.init_seed());
  SynthTaskSpec spec = config.synth;
  const auto clips = generate_dataset(spec, 2, config.train_data_seed());
  std::vector<std::size_t> idx{0, 1};
  GradCheckConfig gc;
  gc.samples_per_tensor = samples;
  gc.epsilon = epsilon;
  gc.seed = mix_seed(config.seed, 5);
  const auto report = grad_check_model(model, stack_clips(clips, idx), {clips[0].label, clips[1].label}, gc);
  out << report.to_text();
  if (!a.out.empty()) write_text(fs::path(a.out) / "gradcheck.txt", report.to_text());
  return report.passed() ? kExitOk : kExitNumerical;
}

int cmd_export(const CommonArgs& a, const std::string& checkpoint, const std::string& clip_path,
               int layer, int head, std::ostream& out) {
  ConViViT model = load_checkpoint(checkpoint);
  const Clip clip = load_any_clip(clip_path);
  if (layer < 0 || layer >= model.config().depth) {
    throw ConfigError("layer " + std::to_string(layer) + " out of range 0.." +
                      std::to_string(model.config().depth - 1));
  }
  RunConfig echo;
  echo.model = model.config();
  prepare_out(a, echo);
  const fs::path dir(a.out);
  AttentionSink sink;
  ForwardTrace trace;
  {
    NoGradGuard guard;
    model.forward(batch_of(clip), Mode::Eval, &sink, &trace);
  }
  const auto& grid = trace.grids.front();
  const auto maps = export_attention_maps(sink, layer, head, grid.h_tokens, grid.w_tokens);
  const auto upscale = std::max<std::int64_t>(1, clip.video.dim(2) / grid.h_tokens);
  const int width = std::max<int>(3, static_cast<int>(std::to_string(maps.size()).size()));
  auto indexed = [&](const std::string& prefix, std::size_t t, const char* ext) {
    std::string index = std::to_string(t);
    index.insert(0, static_cast<std::size_t>(std::max<int>(0, width - static_cast<int>(index.size()))), '0');
    return dir / (prefix + index + "." + ext);
  };
  for (std::size_t t = 0; t < maps.size(); ++t) {
    save_heatmap_ppm(maps[t].values, maps[t].rows, maps[t].cols, indexed("attention_frame_", t, "ppm"), upscale);
  }
  std::size_t features = 0;
  for (std::size_t b = 0; b < trace.stem_blocks.size(); ++b) {
    const auto& act = trace.stem_blocks[b];
    for (std::int64_t t = 0; t < act.dim(2); ++t) {
      const auto fm = feature_map(act, 0, t);
      save_feature_pgm(fm.values, fm.rows, fm.cols,
                       indexed("stem_block" + std::to_string(b + 1) + "_frame_", static_cast<std::size_t>(t), "pgm"));
      ++features;
    }
  }
  out << "wrote " << maps.size() << " attention heatmaps and " << features << " feature maps to "
      << dir.string() << "\n";
  return kExitOk;
}

int cmd_bench(const CommonArgs& a, int reps, std::ostream& out) {
  const RunConfig config = resolve(a);
  prepare_out(a, config);
  const fs::path dir(a.out);
  const auto& s = config.synth;
  const auto report = count_flops(config.model, 1, s.frames, s.height, s.width);
  write_text(dir / "flops.csv", report.to_csv());
  write_text(dir / "flops.txt", report.to_table());
  out << report.to_table();

  std::string timings = "variant,batch,frames,height,width,reps,seconds_per_forward\n";
  const Clip clip = generate_clip(s, 0, config.test_data_seed());
  for (Variant v : {Variant::FactorizedSelf, Variant::FactorizedDotProduct}) {
    ModelConfig mc = config.model;
    mc.variant = v;
    ConViViT model(mc, config.init_seed());
    NoGradGuard guard;
    const auto start = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) model.forward(batch_of(clip), Mode::Eval);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / reps;
    timings += std::string(variant_name(v)) + ",1," + std::to_string(s.frames) + "," +
               std::to_string(s.height) + "," + std::to_string(s.width) + "," + std::to_string(reps) +
               "," + fixed(secs, 6) + "\n";
  }
  write_text(dir / "timings.csv", timings);
  return kExitOk;
}

}  // namespace

// Same token geometry for both stem depths: a one-block stem downsamples by
// 2 instead of 4 and stops at the first block's width, so its patch grows
// by 2 to keep N unchanged.
ModelConfig ablation_model(ModelConfig base, Variant v, std::int64_t blocks) {
  base.variant = v;
  if (blocks != base.cnn_blocks) {
    if (blocks == 1) {
      base.stem_channels = {base.stem_channels.front()};
      base.patch[1] *= 2;
      base.patch[2] *= 2;
    } else {
      base.stem_channels = {base.stem_out_channels(), 2 * base.stem_out_channels()};
      base.patch[1] = std::max<std::int64_t>(1, base.patch[1] / 2);
      base.patch[2] = std::max<std::int64_t>(1, base.patch[2] / 2);
    }
    base.cnn_blocks = blocks;
  }
  return base;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"ConViViT: hybrid 3D-CNN / factorized attention video classifier", "convivit"};
  app.require_subcommand(1);

  CommonArgs train_args, ablate_args, infer_args, grad_args, export_args, bench_args;
  auto* train = app.add_subcommand("train", "train on the synthetic task or manifests");
  add_common(train, train_args, true);
  auto* ablate = app.add_subcommand("ablate", "2x2 variant x CNN-block ablation");
  add_common(ablate, ablate_args, true);

  std::string checkpoint, clip_path;
  auto* infer = app.add_subcommand("infer", "classify one clip");
  add_common(infer, infer_args, false);
  infer->add_option("--checkpoint", checkpoint, "CVVTW checkpoint")->required();
  infer->add_option("--clip", clip_path, "CVVTC clip or directory of PPM frames")->required();

  std::int64_t samples = 4;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
  add_common(grad, grad_args, false);
  grad->add_option("--samples", samples, "entries checked per parameter tensor")->check(CLI::PositiveNumber);
  double epsilon = 1e-3;
  grad->add_option("--epsilon", epsilon, "central-difference step")->check(CLI::PositiveNumber);

  int layer = 0, head = 0;
  std::string export_ckpt, export_clip;
  auto* exp = app.add_subcommand("export-attention", "per-frame attention heatmaps and stem feature maps");
  add_common(exp, export_args, true);
  exp->add_option("--checkpoint", export_ckpt, "CVVTW checkpoint")->required();
  exp->add_option("--clip", export_clip, "CVVTC clip or directory of PPM frames")->required();
  exp->add_option("--layer", layer, "transformer layer");
  exp->add_option("--head", head, "spatial attention head");

  int reps = 3;
  auto* bench = app.add_subcommand("bench", "analytic MAC counts and forward timings");
  add_common(bench, bench_args, true);
  bench->add_option("--reps", reps, "timed forward passes per variant")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (*train) return cmd_train(train_args, out);
    if (*ablate) return cmd_ablate(ablate_args, out, err);
    if (*infer) return cmd_infer(infer_args, checkpoint, clip_path, out);
    if (*grad) return cmd_gradcheck(grad_args, samples, epsilon, out);
    if (*exp) return cmd_export(export_args, export_ckpt, export_clip, layer, head, out);
    if (*bench) return cmd_bench(bench_args, reps, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace convivit
