// meprop: train / sweep / bench / verify / inspect-checkpoint.
//
// Exit codes: 0 success, 1 run failure (divergence, failed checks, I/O),
// 2 usage error (bad flag or value, missing data).

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "meprop/bench.hpp"
#include "meprop/checkpoint.hpp"
#include "meprop/config.hpp"
#include "meprop/dataio.hpp"
#include "meprop/error.hpp"
#include "meprop/trainer.hpp"
#include "meprop/verify.hpp"

namespace fs = std::filesystem;
using namespace meprop;

namespace {

constexpr int kUsageError = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flag values as given on the command line, keyed by config key.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::vector<std::pair<std::string, CLI::Option*>> options;

  void add_to(CLI::App& app) {
    app.add_option("--config", config_path, "key=value config file; flags override it")
        ->check(CLI::ExistingFile);
    static const std::map<std::string, std::string> help = {
        {"task", "mnist|parity"},
        {"policy", "dense|topk|randomk"},
        {"k", "kept gradient entries per hidden layer"},
        {"k-output", "kept entries at the output layer (default: k)"},
        {"unified-score", "mean_abs|abs_mean"},
        {"hidden", "hidden dimension"},
        {"layers", "hidden layers (1..5)"},
        {"activation", "relu|tanh|sigmoid|identity"},
        {"dropout", "dropout rate after each hidden layer"},
        {"optimizer", "adam|adagrad|sgd"},
        {"lr", "learning rate (default per optimizer)"},
        {"batch", "mini-batch size"},
        {"epochs", "training iterations (passes over the data)"},
        {"seed", "root seed for all randomness"},
        {"precision", "f32|f64"},
        {"train-limit", "use only the first N training images (0 = all)"},
        {"seq-len", "parity: sequence length"},
        {"seq-vocab", "parity: token vocabulary"},
        {"seq-train", "parity: training sequences"},
        {"seq-eval", "parity: dev and test sequences"},
        {"data-dir", "MNIST directory (default: $MEPROP_DATA_DIR)"},
        {"out-dir", "parent of the per-run output directory"},
    };
    for (const auto& key : config_keys()) {
      std::string& slot = values[key];
      CLI::Option* opt = nullptr;
      if (key == "unified" || key == "lazy" || key == "bias") {
        opt = app.add_flag("--" + key + "{true}", slot, "true|false");
      } else {
        const auto it = help.find(key);
        opt = app.add_option("--" + key, slot, it != help.end() ? it->second : "");
      }
      options.emplace_back(key, opt);
    }
  }

  TrainConfig resolve() const {
    TrainConfig c;
    if (!config_path.empty()) c = load_config_file(config_path);
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) apply_key_value(c, key, values.at(key));
    }
    c.data_dir = resolve_data_dir(c.data_dir);
    c.validate();
    return c;
  }
};

std::string timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  localtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

fs::path make_run_dir(const fs::path& parent, const std::string& what) {
  const std::string base = timestamp() + "-" + what;
  fs::path dir = parent / base;
  for (int i = 1; fs::exists(dir); ++i) dir = parent / (base + "-" + std::to_string(i));
  fs::create_directories(dir);
  return dir;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  return out;
}

MnistSplits load_data(const TrainConfig& c) {
  if (c.task != Task::Mnist) return {};
  if (c.data_dir.empty()) {
    throw UsageError("mnist data not found: pass --data-dir or set MEPROP_DATA_DIR");
  }
  if (!fs::is_directory(c.data_dir)) {
    throw UsageError("data directory '" + c.data_dir.string() + "' does not exist");
  }
  MnistSplits data = load_mnist(c.data_dir);
  if (c.train_limit > 0 && c.train_limit < data.train.size()) {
    data.train = data.train.slice(0, c.train_limit);
  }
  return data;
}

void print_epoch(const EpochRecord& e) {
  std::printf("iter %2zu  loss %.4f  dev %.4f  test %.4f  fp %.2fs  bp %.2fs (linear %.2fs)\n",
              e.iteration, e.train_loss, e.dev_acc, e.test_acc, e.fp_time, e.overall_bp_time,
              e.linear_bp_time);
  std::fflush(stdout);
}

template <typename T>
RunReport train_and_save(const TrainConfig& c, const MnistSplits& data, const fs::path& dir,
                         bool save) {
  MlpTrainer<T> trainer(c, data);
  RunReport report = trainer.run(print_epoch);
  if (save) save_checkpoint(dir / "model.ckpt", trainer.model(), &trainer.optimizer());
  return report;
}

int cmd_train(const ConfigFlags& flags, bool with_baseline, bool save_model) {
  const TrainConfig c = flags.resolve();
  const MnistSplits data = load_data(c);
  const fs::path dir = make_run_dir(c.out_dir, "train");
  open_out(dir / "effective_config.txt") << format_config(c);
  std::printf("run directory: %s\n", dir.c_str());

  RunReport report;
  if (c.task == Task::Mnist) {
    report = c.precision == Precision::F64 ? train_and_save<double>(c, data, dir, save_model)
                                           : train_and_save<float>(c, data, dir, save_model);
  } else {
    report = train(c, nullptr, print_epoch);
  }

  std::optional<RunReport> baseline;
  if (with_baseline && c.policy != SelectionMode::Dense) {
    TrainConfig dense = c;
    dense.policy = SelectionMode::Dense;
    std::printf("dense baseline:\n");
    baseline = train(dense, c.task == Task::Mnist ? &data : nullptr, print_epoch);
    auto out = open_out(dir / "baseline.csv");
    write_csv(out, *baseline);
  }

  {
    auto out = open_out(dir / "report.csv");
    write_csv(out, report);
  }
  {
    auto out = open_out(dir / "summary.txt");
    write_summary(out, c, report, baseline ? &*baseline : nullptr);
  }
  std::printf("chosen iteration %zu, test accuracy %.4f\n", report.chosen_iteration,
              report.final_test_acc);
  if (report.diverged) {
    std::fprintf(stderr, "meprop: %s\n", report.error.c_str());
    return 1;
  }
  return 0;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int cmd_sweep(const ConfigFlags& flags, const std::string& param_text,
              const std::string& values_text) {
  const TrainConfig base = flags.resolve();
  const SweepParameter param = parse_sweep_parameter(param_text);
  const auto values = split_list(values_text);
  if (values.empty()) throw UsageError("--values needs at least one value");
  // Reject invalid values before any training starts.
  for (const auto& v : values) apply_sweep_value(base, param, v).validate();
  const MnistSplits data = load_data(base);
  const fs::path dir = make_run_dir(base.out_dir, "sweep");
  {
    auto out = open_out(dir / "effective_config.txt");
    out << format_config(base) << "# sweep " << to_string(param) << '=' << values_text << '\n';
  }
  std::printf("run directory: %s\n", dir.c_str());

  const auto entries = sweep(base, param, values, base.task == Task::Mnist ? &data : nullptr,
                             [&](const SweepEntry& e) {
                               std::printf("%s=%s: test %.4f at iteration %zu%s%s\n",
                                           std::string(to_string(param)).c_str(), e.value.c_str(),
                                           e.report.final_test_acc, e.report.chosen_iteration,
                                           e.report.error.empty() ? "" : "  error: ",
                                           e.report.error.c_str());
                               std::fflush(stdout);
                             });
  {
    auto out = open_out(dir / "sweep.csv");
    write_sweep_csv(out, param, entries);
  }
  bool failed = false;
  auto out = open_out(dir / "summary.txt");
  for (const auto& e : entries) {
    out << "[" << to_string(param) << "=" << e.value << "]\n";
    write_summary(out, e.config, e.report);
    failed = failed || !e.report.error.empty();
  }
  return failed ? 1 : 0;
}

int cmd_bench(const BenchOptions& opt, const std::string& k_text, const fs::path& out_dir) {
  BenchOptions o = opt;
  if (!k_text.empty()) {
    o.k_list.clear();
    for (const auto& s : split_list(k_text)) {
      try {
        o.k_list.push_back(std::stoul(s));
      } catch (const std::exception&) {
        throw UsageError("--k-list: '" + s + "' is not an integer");
      }
    }
  }
  o.validate();
  const fs::path dir = make_run_dir(out_dir, "bench");
  {
    auto out = open_out(dir / "effective_config.txt");
    out << "batch=" << o.batch << "\nn=" << o.n << "\nm=" << o.m << "\nk-list=";
    for (std::size_t i = 0; i < o.k_list.size(); ++i) out << (i ? "," : "") << o.k_list[i];
    out << "\nreps=" << o.reps << "\nwarmup=" << o.warmup << "\nthreads=" << o.threads
        << "\nseed=" << o.seed << "\nprecision=" << (o.f64 ? "f64" : "f32") << '\n';
  }
  std::printf("run directory: %s\n", dir.c_str());
  const auto results = bench_backward(o);
  {
    auto out = open_out(dir / "bench.csv");
    write_bench_csv(out, results);
  }
  auto summary = open_out(dir / "summary.txt");
  for (const auto& r : results) {
    char line[200];
    std::snprintf(line, sizeof line, "%-6s k=%-5zu %10.3f ms  speedup %7.2fx  flop speedup %8.2fx%s\n",
                  r.method.c_str(), r.k, r.median_ms, r.speedup, r.flop_speedup,
                  r.skipped ? "  (skipped)" : "");
    std::fputs(line, stdout);
    summary << line;
  }
  return 0;
}

int cmd_verify(const VerifyOptions& opt, const fs::path& out_dir) {
  const fs::path dir = make_run_dir(out_dir, "verify");
  open_out(dir / "effective_config.txt") << "seed=" << opt.seed << "\ninstances=" << opt.instances
                                          << '\n';
  std::size_t failed = 0;
  const auto results = run_verification(opt, [&](const CheckResult& r) {
    std::printf("%s %s%s%s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                r.detail.empty() ? "" : ": ", r.detail.c_str());
    std::fflush(stdout);
    if (!r.passed) ++failed;
  });
  {
    auto out = open_out(dir / "verify.csv");
    out << "check,passed,detail\n";
    for (const auto& r : results) out << r.name << ',' << (r.passed ? 1 : 0) << ',' << r.detail << '\n';
  }
  open_out(dir / "summary.txt") << "checks: " << results.size() << "\nfailed: " << failed << '\n';
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparsified back propagation experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "meprop 0.1.0");

  ConfigFlags train_flags;
  bool with_baseline = false;
  bool no_checkpoint = false;
  auto* train_cmd = app.add_subcommand("train", "train one configuration");
  train_flags.add_to(*train_cmd);
  train_cmd->add_flag("--with-baseline", with_baseline,
                      "also train the dense baseline to report wall-clock speedup");
  train_cmd->add_flag("--no-checkpoint", no_checkpoint, "do not write model.ckpt");

  ConfigFlags sweep_flags;
  std::string sweep_param;
  std::string sweep_values;
  auto* sweep_cmd = app.add_subcommand("sweep", "train once per value of one parameter");
  sweep_flags.add_to(*sweep_cmd);
  sweep_cmd->add_option("--param", sweep_param, "k|hidden|layers|policy")->required();
  sweep_cmd->add_option("--values", sweep_values, "comma-separated values")->required();

  BenchOptions bench_opt;
  std::string bench_k;
  std::string bench_out = "runs";
  auto* bench_cmd = app.add_subcommand("bench", "dense vs sparsified backward matmul timing");
  bench_cmd->add_option("--batch", bench_opt.batch, "batch size")->capture_default_str();
  bench_cmd->add_option("--n", bench_opt.n, "output dimension")->capture_default_str();
  bench_cmd->add_option("--m", bench_opt.m, "input dimension")->capture_default_str();
  bench_cmd->add_option("--k-list", bench_k, "comma-separated k values (default 8..512)");
  bench_cmd->add_option("--reps", bench_opt.reps, "timed repetitions (>= 5)")->capture_default_str();
  bench_cmd->add_option("--warmup", bench_opt.warmup, "untimed repetitions")->capture_default_str();
  bench_cmd->add_option("--threads", bench_opt.threads, "worker threads")->capture_default_str();
  bench_cmd->add_option("--seed", bench_opt.seed, "operand seed")->capture_default_str();
  bench_cmd->add_flag("--f64", bench_opt.f64, "64-bit scalars");
  bench_cmd->add_option("--out-dir", bench_out, "parent of the run directory")->capture_default_str();

  VerifyOptions verify_opt;
  std::string verify_out = "runs";
  auto* verify_cmd = app.add_subcommand("verify", "run the oracle and invariant checks");
  verify_cmd->add_option("--seed", verify_opt.seed, "seed for random instances")->capture_default_str();
  verify_cmd->add_option("--instances", verify_opt.instances, "random oracle instances")
      ->capture_default_str();
  verify_cmd->add_option("--out-dir", verify_out, "parent of the run directory")->capture_default_str();

  std::string ckpt_path;
  auto* inspect_cmd = app.add_subcommand("inspect-checkpoint", "print a checkpoint header");
  inspect_cmd->add_option("path", ckpt_path, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string what = e.what();
    if (const auto nl = what.find('\n'); nl != std::string::npos) what.resize(nl);
    std::fprintf(stderr, "meprop: %s (see --help)\n", what.c_str());
    return kUsageError;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_flags, with_baseline, !no_checkpoint);
    if (sweep_cmd->parsed()) return cmd_sweep(sweep_flags, sweep_param, sweep_values);
    if (bench_cmd->parsed()) return cmd_bench(bench_opt, bench_k, bench_out);
    if (verify_cmd->parsed()) return cmd_verify(verify_opt, verify_out);
    if (inspect_cmd->parsed()) {
      std::fputs(describe(inspect_checkpoint(ckpt_path)).c_str(), stdout);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "meprop: %s\n", e.what());
    return kUsageError;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "meprop: %s\n", e.what());
    return kUsageError;
  } catch (const DataError& e) {
    std::fprintf(stderr, "meprop: %s\n", e.what());
    return kUsageError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "meprop: %s\n", e.what());
    return 1;
  }
  return 0;
}
