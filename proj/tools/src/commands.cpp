#include "commands.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "collab/data.hpp"
#include "collab/harness.hpp"
#include "collab/verify.hpp"
#include "config.hpp"

namespace collab::cli {

namespace fs = std::filesystem;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::numeric:
    case ErrorKind::invalid_check:
      return numeric_failure;
    case ErrorKind::io:
      return io_failure;
    default:
      return validation;
  }
}

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr double kGradStep = 1e-5;

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::string> out;
  std::optional<int> precision;

  void add_to(CLI::App& cmd) {
    cmd.add_option("--seed", seed, "Override train.seed");
    cmd.add_option("--epochs", epochs, "Override train.epochs");
    cmd.add_option("--out", out, "Override output.dir");
    cmd.add_option("--precision", precision, "Override train.precision (32 or 64)");
  }

  void apply(ExperimentConfig& cfg) const {
    if (seed) cfg.train.seed = *seed;
    if (epochs) {
      cfg.train.epochs = *epochs;
      // Milestones past a shortened run no longer apply.
      std::erase_if(cfg.train.milestones, [&](std::size_t m) { return m >= *epochs; });
    }
    if (out) cfg.out_dir = *out;
    if (precision) cfg.train.precision = *precision;
    cfg.train.validate();
  }
};

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

template <typename T>
RunMetrics run_typed(const ExperimentConfig& cfg, const Prepared& prep, std::ostream& out,
                     const std::string& tag) {
  const EpochCallback progress = [&](const EpochRecord& r) {
    out << tag << "epoch " << (r.epoch + 1) << "/" << cfg.train.epochs << "  lr "
        << format_g6(r.lr) << "  loss " << format_g6(r.train_loss_total) << "  train_err "
        << format_g6(r.train_error) << "%  test_err " << format_g6(r.test_error) << "%\n";
  };
  return run_experiment<T>(prep.arch, cfg.train, cfg.loss, cfg.noise, prep.data, progress);
}

RunMetrics run_one(const ExperimentConfig& cfg, const Prepared& prep, std::ostream& out,
                   const std::string& tag) {
  return cfg.train.precision == 64 ? run_typed<double>(cfg, prep, out, tag)
                                   : run_typed<float>(cfg, prep, out, tag);
}

// ---- train ----------------------------------------------------------------

int cmd_train(const std::string& path, const Overrides& ov, std::ostream& out) {
  ExperimentConfig cfg = load_config(path);
  ov.apply(cfg);
  const Prepared prep = prepare(cfg);
  const std::string echo = config_echo(cfg, prep.arch).dump();

  const RunMetrics m = run_one(cfg, prep, out, "");
  write_metrics(cfg.out_dir, m, echo);
  out << "best_test_error " << format_g6(m.best_test_error) << " (epoch " << (m.best_epoch + 1)
      << ", initial " << format_g6(m.initial_test_error) << ")\n";
  out << "metrics written to " << cfg.out_dir.string() << "\n";
  return ok;
}

// ---- gradcheck --------------------------------------------------------------

struct FaultScope {
  explicit FaultScope(Fault f) { set_fault(f); }
  ~FaultScope() { set_fault(Fault::none); }
};

int cmd_gradcheck(const std::string& path, std::optional<std::uint64_t> seed,
                  const std::string& fault, std::ostream& out) {
  LossConfig loss;
  if (path.empty()) {
    set_active(loss, {"out", "mid", "pull_push", "kernel"});
  } else {
    loss = load_config(path).loss;
  }
  ToySpec spec;
  if (seed) spec.seed = *seed;

  Fault f = Fault::none;
  if (fault == "relu") {
    f = Fault::relu_backward;
  } else if (fault == "scale") {
    f = Fault::scale_backward;
  } else if (!fault.empty()) {
    fail(ErrorKind::usage, "--inject-fault expects relu or scale, got \"" + fault + "\"");
  }

  ToyProblem problem = make_toy_problem(spec, loss);  // validates the loss settings
  std::vector<ScopedCheck> checks;
  {
    FaultScope scope(f);
    checks = check_losses(problem, kGradStep);
    if (checks.empty()) checks.push_back(check_out(problem, kGradStep));
  }

  out << "toy network: " << problem.net.depth() << " conv blocks x " << spec.channels
      << " channels, batch " << spec.batch << ", " << spec.classes << " classes, 64-bit, h = "
      << format_g6(kGradStep) << "\n";
  if (f != Fault::none) out << "fault injected: " << fault << " backward\n";
  bool all_ok = true;
  for (const ScopedCheck& c : checks) {
    const bool pass = c.passed(kGradTolerance);
    all_ok = all_ok && pass;
    out << std::left << std::setw(14) << c.label() << " max_rel_err " << fmt("%.3e", c.grad.max_rel_error)
        << "  coords " << c.grad.coordinates << "  kink_refined " << c.grad.kinks_refined
        << "  out_of_scope_grads " << (c.structural_leaks.size() + c.numeric_leaks.size()) << "  "
        << (pass ? "PASS" : "FAIL") << "\n";
    for (const auto& name : c.structural_leaks) out << "    on tape: " << name << "\n";
    for (const auto& name : c.numeric_leaks) out << "    nonzero grad: " << name << "\n";
  }
  out << "gradcheck " << (all_ok ? "PASS" : "FAIL") << " (tolerance " << format_g6(kGradTolerance) << ")\n";
  return all_ok ? ok : numeric_failure;
}

// ---- eval-losses ------------------------------------------------------------

struct EvalInputs {
  std::string config;
  std::vector<std::string> losses;
  std::string logits, target, branches, local_logits, features, input;
  std::vector<std::string> kernels;
  std::size_t layer = 0;
  std::size_t depth = 0;
};

Tensor<double> read_tensor(const std::string& path, const char* flag) {
  if (path.empty()) fail(ErrorKind::usage, std::string("missing ") + flag);
  TensorFile t = load_tensor(path);
  return Tensor<double>::constant(t.shape, std::move(t.values));
}

/// Splits a rank-3 tensor into its leading-axis slices.
std::vector<Tensor<double>> slices(const Tensor<double>& t, const char* what) {
  if (t.rank() != 3) {
    fail(ErrorKind::dimension, std::string(what) + " must be rank 3, got " + shape_str(t.shape()));
  }
  const std::size_t n = t.dim(1) * t.dim(2);
  std::vector<Tensor<double>> out;
  for (std::size_t b = 0; b < t.dim(0); ++b) {
    const auto v = t.values().subspan(b * n, n);
    out.push_back(Tensor<double>::constant({t.dim(1), t.dim(2)}, {v.begin(), v.end()}));
  }
  return out;
}

int cmd_eval_losses(const EvalInputs& in, std::ostream& out) {
  LossConfig cfg;
  if (!in.config.empty()) cfg = load_config(in.config).loss;
  auto print = [&out](const std::string& name, double v) {
    out << name << " " << fmt("%#.12g", v) << "\n";
  };

  for (const std::string& name : in.losses) {
    if (name == "j_hard") {
      print(name, j_hard(read_tensor(in.target, "--target"), read_tensor(in.logits, "--logits"), 1.0).item());
    } else if (name == "j_soft") {
      print(name, j_soft(read_tensor(in.target, "--target"), read_tensor(in.logits, "--logits"), cfg.T).item());
    } else if (name == "l_out") {
      BranchSet<double> b;
      b.logits = slices(read_tensor(in.branches, "--branches"), "--branches");
      print(name, l_out(read_tensor(in.target, "--target"), b, cfg).item());
    } else if (name == "l_mid") {
      const auto z = slices(read_tensor(in.local_logits, "--local-logits"), "--local-logits");
      const Tensor<double> y = read_tensor(in.target, "--target");
      if (in.layer > z.size()) {
        fail(ErrorKind::dimension, "--layer " + std::to_string(in.layer) + " outside 1.." + std::to_string(z.size()));
      }
      double total = 0.0;
      for (std::size_t i = 1; i <= z.size(); ++i) {
        if (in.layer != 0 && i != in.layer) continue;
        total += l_mid_layer(y, z, i, cfg).item();
      }
      print(in.layer ? "l_mid[" + std::to_string(in.layer) + "]" : name, total);
    } else if (name == "pull_push") {
      const std::size_t depth = in.depth ? in.depth : 1;
      const std::size_t layer = in.layer ? in.layer : depth;
      if (!cfg.pull_push_schedule.empty() && cfg.pull_push_schedule.size() != depth) {
        fail(ErrorKind::config, "pull_push_schedule length does not match --depth");
      }
      const auto [ap, apush] = cfg.pull_push_weights(layer, depth);
      const Tensor<double> y = read_tensor(in.target, "--target");
      const Tensor<double> x = read_tensor(in.input, "--input");
      print(name, l_pull_push(read_tensor(in.features, "--features"), target_similarity(y),
                              input_similarity(x), ap, apush)
                      .item());
    } else if (name == "kernel") {
      if (in.kernels.empty()) fail(ErrorKind::usage, "missing --kernel");
      double total = 0.0;
      for (const auto& k : in.kernels) total += kernel_decorrelation(read_tensor(k, "--kernel")).item();
      print(name, total);
    } else {
      fail(ErrorKind::usage, "unknown --loss \"" + name +
                                 "\" (expected j_hard, j_soft, l_out, l_mid, pull_push, kernel)");
    }
  }
  return ok;
}

// ---- noise-sweep ------------------------------------------------------------

struct SweepRow {
  double level;
  std::string variant;
  std::uint64_t seed;
  double best_test_error;
  std::size_t noisy_labels;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io, "cannot write " + path.string());
  f << text;
  if (!f) fail(ErrorKind::io, "write failed for " + path.string());
}

int cmd_noise_sweep(const std::string& path, const std::vector<double>& level_flag, const Overrides& ov,
                    std::ostream& out) {
  ExperimentConfig base = load_config(path);
  ov.apply(base);
  std::vector<double> levels = level_flag.empty() ? base.sweep.levels : level_flag;
  if (levels.empty()) fail(ErrorKind::config, "noise-sweep needs --levels or sweep.levels");
  for (double p : levels) {
    if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::config, "noise levels must be in [0, 1], got " + format_g6(p));
  }
  std::vector<std::uint64_t> seeds = base.sweep.seeds;
  if (seeds.empty() || ov.seed) seeds = {base.train.seed};
  auto variants = base.sweep.variants;
  if (variants.empty()) variants.emplace_back("config", active_names(base.loss));

  // Validate every run before any output appears.
  const Prepared prep = prepare(base);
  std::vector<ExperimentConfig> variant_cfgs;
  for (const auto& [name, active] : variants) {
    ExperimentConfig c = base;
    set_active(c.loss, active);
    validate_loss(c.loss, prep.arch, prep.data.train.classes);
    variant_cfgs.push_back(std::move(c));
  }

  std::vector<SweepRow> rows;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    for (std::uint64_t seed : seeds) {
      for (double level : levels) {
        ExperimentConfig c = variant_cfgs[v];
        c.train.seed = seed;
        c.noise.level = level;
        const fs::path dir = base.out_dir / variants[v].first / ("seed_" + std::to_string(seed)) /
                             ("level_" + format_g6(level));
        std::ostringstream quiet;
        const RunMetrics m = run_one(c, prep, quiet, "");
        write_metrics(dir, m, config_echo(c, prep.arch).dump());
        const std::size_t noisy = m.epochs.empty() ? 0 : m.epochs.back().noisy_labels;
        rows.push_back({level, variants[v].first, seed, m.best_test_error, noisy});
        out << variants[v].first << "  seed " << seed << "  level " << format_g6(level)
            << "  best_test_error " << format_g6(m.best_test_error) << "  noisy_labels/epoch " << noisy
            << "\n";
      }
    }
  }

  std::ostringstream csv;
  csv << "level,variant,seed,best_test_error,noisy_labels\n";
  for (const auto& r : rows) {
    csv << format_g6(r.level) << "," << r.variant << "," << r.seed << "," << format_g6(r.best_test_error)
        << "," << r.noisy_labels << "\n";
  }
  fs::create_directories(base.out_dir);
  write_text(base.out_dir / "sweep.csv", csv.str());

  // Noise level down the rows, one mean/std column pair per variant.
  std::ostringstream cmp;
  cmp << "level";
  for (const auto& v : variants) cmp << "," << v.first << "_mean," << v.first << "_std";
  cmp << "\n";
  out << "\nbest test error (%) by noise level, mean +- std over " << seeds.size() << " seed(s)\n";
  out << std::left << std::setw(8) << "level";
  for (const auto& v : variants) out << std::setw(20) << v.first;
  out << "\n";
  for (double level : levels) {
    cmp << format_g6(level);
    out << std::setw(8) << format_g6(level);
    for (const auto& v : variants) {
      std::vector<double> xs;
      for (const auto& r : rows) {
        if (r.level == level && r.variant == v.first) xs.push_back(r.best_test_error);
      }
      double mean = 0.0;
      for (double x : xs) mean += x;
      mean /= static_cast<double>(xs.size());
      double var = 0.0;
      for (double x : xs) var += (x - mean) * (x - mean);
      const double sd = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
      cmp << "," << format_g6(mean) << "," << format_g6(sd);
      out << std::setw(20) << (format_g6(mean) + " +- " + format_g6(sd));
    }
    cmp << "\n";
    out << "\n";
  }
  write_text(base.out_dir / "comparison.csv", cmp.str());
  out << "sweep written to " << base.out_dir.string() << "\n";
  return ok;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Collaborative-learning regularizers: training, gradient checks and loss evaluation"};
  app.require_subcommand(1);

  std::string train_config;
  Overrides train_ov;
  auto* train = app.add_subcommand("train", "Run one experiment and write metrics");
  train->add_option("config", train_config, "Experiment config (JSON)")->required();
  train_ov.add_to(*train);

  std::string gc_config, gc_fault;
  std::optional<std::uint64_t> gc_seed;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference and locality checks on a toy network");
  gradcheck->add_option("config", gc_config, "Config whose loss section selects the checks (default: all four)");
  gradcheck->add_option("--seed", gc_seed, "Toy problem seed");
  gradcheck->add_option("--inject-fault", gc_fault, "Corrupt a backward rule: relu or scale");

  EvalInputs ev;
  auto* eval = app.add_subcommand("eval-losses", "Evaluate loss values on tensor files");
  eval->add_option("--loss", ev.losses, "j_hard, j_soft, l_out, l_mid, pull_push or kernel (repeatable)")
      ->required();
  eval->add_option("--config", ev.config, "Config whose loss section supplies weights and T");
  eval->add_option("--logits", ev.logits, "N x m logits");
  eval->add_option("--target", ev.target, "N x m one-hot labels or distributions");
  eval->add_option("--branches", ev.branches, "B x N x m branch logits");
  eval->add_option("--local-logits", ev.local_logits, "L x N x m local-classifier logits");
  eval->add_option("--features", ev.features, "N x C x H x W projected feature maps");
  eval->add_option("--input", ev.input, "N x C x H x W input images");
  eval->add_option("--kernel", ev.kernels, "F x C x Kh x Kw conv kernel (repeatable)");
  eval->add_option("--layer", ev.layer, "1-based layer for l_mid / pull_push");
  eval->add_option("--depth", ev.depth, "Conv-block count N for the pull-push schedule");

  std::string sweep_config;
  std::vector<double> sweep_levels;
  Overrides sweep_ov;
  auto* sweep = app.add_subcommand("noise-sweep", "Train across label-noise levels");
  sweep->add_option("config", sweep_config, "Experiment config (JSON)")->required();
  sweep->add_option("--levels", sweep_levels, "Noise levels, e.g. 0,0.3,0.5")->delimiter(',');
  sweep_ov.add_to(*sweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ok : validation;
  }

  try {
    if (*train) return cmd_train(train_config, train_ov, out);
    if (*gradcheck) return cmd_gradcheck(gc_config, gc_seed, gc_fault, out);
    if (*eval) return cmd_eval_losses(ev, out);
    if (*sweep) return cmd_noise_sweep(sweep_config, sweep_levels, sweep_ov, out);
  } catch (const Error& e) {
    err << to_string(e.kind()) << ": " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return io_failure;
  }
  return validation;
}

}  // namespace collab::cli
