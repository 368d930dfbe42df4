#include "meprop/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "meprop/error.hpp"

namespace meprop {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
  throw ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key) +
                    " (expected " + expected + ")");
}

std::uint64_t parse_uint(std::string_view key, std::string_view value) {
  std::uint64_t out = 0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end || value.empty()) bad_value(key, value, "unsigned integer");
  return out;
}

double parse_double(std::string_view key, std::string_view value) {
  double out = 0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end || value.empty()) bad_value(key, value, "number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  bad_value(key, value, "true|false");
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

std::string_view to_string(Task task) { return task == Task::Mnist ? "mnist" : "parity"; }

Task parse_task(std::string_view text) {
  if (text == "mnist") return Task::Mnist;
  if (text == "parity") return Task::Parity;
  throw ConfigError("unknown task '" + std::string(text) + "' (expected mnist|parity)");
}

std::string_view to_string(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

Precision parse_precision(std::string_view text) {
  if (text == "f32") return Precision::F32;
  if (text == "f64") return Precision::F64;
  throw ConfigError("unknown precision '" + std::string(text) + "' (expected f32|f64)");
}

void TrainConfig::validate() const {
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (hidden < 1) throw ConfigError("hidden must be >= 1");
  if (layers < 1 || layers > 5) throw ConfigError("layers must be in 1..5");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  if (lr && !(*lr >= 0.0)) throw ConfigError("lr must be >= 0");
  if (policy != SelectionMode::Dense) {
    if (k < 1) throw ConfigError("k must be >= 1");
    const std::size_t limit = task == Task::Mnist ? hidden : 4 * hidden;
    if (k > limit) {
      throw ConfigError("k (" + std::to_string(k) + ") must not exceed the " +
                        (task == Task::Mnist ? std::string("hidden dimension (")
                                             : std::string("LSTM gate dimension (")) +
                        std::to_string(limit) + ")");
    }
    if (effective_k_output() < 1) throw ConfigError("k-output must be >= 1");
  }
  if (unified && task != Task::Mnist) throw ConfigError("unified top-k is only available for mnist");
  if (task == Task::Parity && (seq_len < 1 || seq_train < 1 || seq_eval < 1)) {
    throw ConfigError("parity task needs seq-len, seq-train and seq-eval >= 1");
  }
}

SelectionPolicy TrainConfig::hidden_policy() const {
  return SelectionPolicy{policy, policy == SelectionMode::Dense ? 0 : k, seed};
}

SelectionPolicy TrainConfig::output_policy() const {
  return SelectionPolicy{policy, policy == SelectionMode::Dense ? 0 : effective_k_output(), seed};
}

OptimizerConfig TrainConfig::optimizer_config() const {
  OptimizerConfig c = OptimizerConfig::defaults_for(optimizer);
  if (lr) c.lr = *lr;
  c.lazy = lazy;
  return c;
}

MlpSpec TrainConfig::mlp_spec() const {
  MlpSpec spec;
  spec.input_dim = 784;
  spec.hidden_dim = hidden;
  spec.num_hidden_layers = layers;
  spec.output_dim = 10;
  spec.activation = activation;
  spec.dropout_rate = dropout;
  spec.use_bias = bias;
  spec.hidden_policy = hidden_policy();
  spec.output_policy = output_policy();
  return spec;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "task",      "policy",    "k",         "k-output",  "unified",  "unified-score",
      "hidden",    "layers",    "activation", "bias",     "dropout",  "optimizer",
      "lr",        "lazy",      "batch",     "epochs",    "seed",     "precision",
      "train-limit", "seq-len", "seq-vocab", "seq-train", "seq-eval", "data-dir",
      "out-dir"};
  return keys;
}

std::vector<std::pair<std::string, std::string>> to_key_values(const TrainConfig& c) {
  const auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  return {
      {"task", std::string(to_string(c.task))},
      {"policy", std::string(to_string(c.policy))},
      {"k", std::to_string(c.k)},
      {"k-output", std::to_string(c.effective_k_output())},
      {"unified", b(c.unified)},
      {"unified-score", std::string(to_string(c.unified_score))},
      {"hidden", std::to_string(c.hidden)},
      {"layers", std::to_string(c.layers)},
      {"activation", std::string(to_string(c.activation))},
      {"bias", b(c.bias)},
      {"dropout", format_double(c.dropout)},
      {"optimizer", std::string(to_string(c.optimizer))},
      {"lr", format_double(c.optimizer_config().lr)},
      {"lazy", b(c.lazy)},
      {"batch", std::to_string(c.batch)},
      {"epochs", std::to_string(c.epochs)},
      {"seed", std::to_string(c.seed)},
      {"precision", std::string(to_string(c.precision))},
      {"train-limit", std::to_string(c.train_limit)},
      {"seq-len", std::to_string(c.seq_len)},
      {"seq-vocab", std::to_string(c.seq_vocab)},
      {"seq-train", std::to_string(c.seq_train)},
      {"seq-eval", std::to_string(c.seq_eval)},
      {"data-dir", c.data_dir.string()},
      {"out-dir", c.out_dir.string()},
  };
}

std::string format_config(const TrainConfig& config) {
  std::ostringstream out;
  for (const auto& [key, value] : to_key_values(config)) out << key << '=' << value << '\n';
  return out.str();
}

void apply_key_value(TrainConfig& c, std::string_view key, std::string_view raw) {
  const std::string_view value = trim(raw);
  if (key == "task") c.task = parse_task(value);
  else if (key == "policy") c.policy = parse_selection_mode(value);
  else if (key == "k") c.k = parse_uint(key, value);
  else if (key == "k-output") c.k_output = parse_uint(key, value);
  else if (key == "unified") c.unified = parse_bool(key, value);
  else if (key == "unified-score") c.unified_score = parse_unified_score(value);
  else if (key == "hidden") c.hidden = parse_uint(key, value);
  else if (key == "layers") c.layers = parse_uint(key, value);
  else if (key == "activation") c.activation = parse_activation(value);
  else if (key == "bias") c.bias = parse_bool(key, value);
  else if (key == "dropout") c.dropout = parse_double(key, value);
  else if (key == "optimizer") c.optimizer = parse_optimizer_kind(value);
  else if (key == "lr") c.lr = parse_double(key, value);
  else if (key == "lazy") c.lazy = parse_bool(key, value);
  else if (key == "batch") c.batch = parse_uint(key, value);
  else if (key == "epochs") c.epochs = parse_uint(key, value);
  else if (key == "seed") c.seed = parse_uint(key, value);
  else if (key == "precision") c.precision = parse_precision(value);
  else if (key == "train-limit") c.train_limit = parse_uint(key, value);
  else if (key == "seq-len") c.seq_len = parse_uint(key, value);
  else if (key == "seq-vocab") c.seq_vocab = parse_uint(key, value);
  else if (key == "seq-train") c.seq_train = parse_uint(key, value);
  else if (key == "seq-eval") c.seq_eval = parse_uint(key, value);
  else if (key == "data-dir") c.data_dir = std::string(value);
  else if (key == "out-dir") c.out_dir = std::string(value);
  else throw ConfigError("unknown config key '" + std::string(key) + "'");
}

TrainConfig parse_config_text(std::string_view text, TrainConfig base) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    apply_key_value(base, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return base;
}

TrainConfig load_config_file(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config_text(text.str(), std::move(base));
}

}  // namespace meprop
