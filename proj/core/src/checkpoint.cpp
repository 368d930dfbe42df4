#include "meprop/checkpoint.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <sstream>

#include "meprop/error.hpp"

namespace meprop {

namespace {

constexpr std::array<char, 4> kMagic = {'M', 'E', 'P', 'M'};

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw DataError("cannot open '" + path.string() + "' for writing");
  }

  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  }
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  template <typename T>
  void scalar(T v) {
    if constexpr (sizeof(T) == 4) {
      le(std::bit_cast<std::uint32_t>(v));
    } else {
      le(std::bit_cast<std::uint64_t>(v));
    }
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void finish() {
    out_.flush();
    if (!out_) throw DataError("write failed for '" + path_.string() + "'");
  }

 private:
  template <typename U>
  void le(U v) {
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(buf, sizeof(U));
  }

  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw DataError("cannot open checkpoint '" + path.string() + "'");
  }

  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) fail("truncated");
  }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  template <typename T>
  T scalar() {
    if constexpr (sizeof(T) == 4) {
      return std::bit_cast<T>(le<std::uint32_t>());
    } else {
      return std::bit_cast<T>(le<std::uint64_t>());
    }
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > (1u << 16)) fail("implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  void skip(std::size_t n) {
    in_.seekg(static_cast<std::streamoff>(n), std::ios::cur);
    if (!in_) fail("truncated");
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

  [[noreturn]] void fail(const std::string& what) const {
    throw DataError("checkpoint '" + path_.string() + "': " + what);
  }

 private:
  template <typename U>
  U le() {
    unsigned char buf[sizeof(U)];
    bytes(buf, sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
  }

  std::filesystem::path path_;
  std::ifstream in_;
};

std::uint32_t optimizer_code(const std::optional<OptimizerConfig>& c) {
  if (!c) return 0;
  switch (c->kind) {
    case OptimizerKind::Sgd: return 1;
    case OptimizerKind::AdaGrad: return 2;
    case OptimizerKind::Adam: return 3;
  }
  return 0;
}

void write_policy(Writer& w, const SelectionPolicy& p) {
  w.u32(static_cast<std::uint32_t>(p.mode));
  w.u64(p.k);
  w.u64(p.seed);
}

SelectionPolicy read_policy(Reader& r) {
  SelectionPolicy p;
  const std::uint32_t mode = r.u32();
  if (mode > static_cast<std::uint32_t>(SelectionMode::RandomK)) r.fail("bad selection mode");
  p.mode = static_cast<SelectionMode>(mode);
  p.k = r.u64();
  p.seed = r.u64();
  return p;
}

/// Reads everything up to the first tensor payload.
struct Header {
  std::size_t scalar_bytes = 0;
  MlpSpec spec;
  std::uint32_t num_tensors = 0;
};

Header read_header(Reader& r) {
  std::array<char, 4> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != kMagic) r.fail("bad magic");
  if (const auto v = r.u32(); v != kCheckpointVersion) {
    r.fail("unsupported version " + std::to_string(v));
  }
  Header h;
  h.scalar_bytes = r.u32();
  if (h.scalar_bytes != 4 && h.scalar_bytes != 8) r.fail("bad scalar size");
  MlpSpec& s = h.spec;
  s.input_dim = r.u64();
  s.hidden_dim = r.u64();
  s.num_hidden_layers = r.u64();
  s.output_dim = r.u64();
  const std::uint32_t act = r.u32();
  if (act > static_cast<std::uint32_t>(Activation::Sigmoid)) r.fail("bad activation");
  s.activation = static_cast<Activation>(act);
  s.use_bias = r.u32() != 0;
  s.dropout_rate = r.f64();
  s.hidden_policy = read_policy(r);
  s.output_policy = read_policy(r);
  h.num_tensors = r.u32();
  return h;
}

struct OptimizerHeader {
  std::optional<OptimizerConfig> config;
  std::uint64_t steps = 0;
  std::uint32_t num_state = 0;
};

OptimizerHeader read_optimizer_header(Reader& r) {
  OptimizerHeader h;
  const std::uint32_t code = r.u32();
  if (code > 3) r.fail("bad optimizer kind");
  OptimizerConfig c;
  c.lr = r.f64();
  c.beta1 = r.f64();
  c.beta2 = r.f64();
  c.eps = r.f64();
  c.lazy = r.u32() != 0;
  h.steps = r.u64();
  h.num_state = r.u32();
  if (code != 0) {
    c.kind = code == 1 ? OptimizerKind::Sgd : code == 2 ? OptimizerKind::AdaGrad
                                                         : OptimizerKind::Adam;
    h.config = c;
  }
  return h;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Mlp<T>& model,
                     Optimizer<T>* optimizer) {
  Writer w(path);
  const MlpSpec& s = model.spec();
  w.bytes(kMagic.data(), kMagic.size());
  w.u32(kCheckpointVersion);
  w.u32(sizeof(T));
  w.u64(s.input_dim);
  w.u64(s.hidden_dim);
  w.u64(s.num_hidden_layers);
  w.u64(s.output_dim);
  w.u32(static_cast<std::uint32_t>(s.activation));
  w.u32(s.use_bias ? 1 : 0);
  w.f64(s.dropout_rate);
  write_policy(w, s.hidden_policy);
  write_policy(w, s.output_policy);

  w.u32(static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    w.str(p.name);
    w.u64(p.value.rows());
    w.u64(p.value.cols());
    for (std::size_t i = 0; i < p.value.size(); ++i) w.scalar(p.value.data()[i]);
  }

  std::optional<OptimizerConfig> cfg;
  if (optimizer != nullptr) cfg = optimizer->config();
  const OptimizerConfig c = cfg.value_or(OptimizerConfig{});
  w.u32(optimizer_code(cfg));
  w.f64(c.lr);
  w.f64(c.beta1);
  w.f64(c.beta2);
  w.f64(c.eps);
  w.u32(c.lazy ? 1 : 0);
  w.u64(optimizer != nullptr ? optimizer->steps() : 0);
  const auto state = optimizer != nullptr ? optimizer->state_tensors()
                                          : std::vector<std::span<T>>{};
  w.u32(static_cast<std::uint32_t>(state.size()));
  for (const auto& t : state) {
    w.u64(t.size());
    for (const T v : t) w.scalar(v);
  }
  w.finish();
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  const Header h = read_header(r);
  if (h.scalar_bytes != sizeof(T)) {
    r.fail("stored with " + std::to_string(h.scalar_bytes * 8) + "-bit scalars, requested " +
           std::to_string(sizeof(T) * 8));
  }
  try {
    h.spec.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("invalid model shape: ") + e.what());
  }
  Checkpoint<T> ck;
  ck.model = std::make_unique<Mlp<T>>(h.spec, 0);
  auto& params = ck.model->params();
  if (h.num_tensors != params.size()) r.fail("tensor count does not match the model shape");
  for (auto& p : params) {
    const std::string name = r.str();
    const std::size_t rows = r.u64();
    const std::size_t cols = r.u64();
    if (name != p.name || rows != p.value.rows() || cols != p.value.cols()) {
      r.fail("unexpected tensor '" + name + "'");
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value.data()[i] = r.scalar<T>();
  }
  const OptimizerHeader oh = read_optimizer_header(r);
  ck.optimizer = oh.config;
  ck.optimizer_steps = oh.steps;
  for (std::uint32_t t = 0; t < oh.num_state; ++t) {
    const std::size_t n = r.u64();
    if (n > (std::size_t{1} << 32)) r.fail("implausible state tensor size");
    std::vector<T> values(n);
    for (auto& v : values) v = r.scalar<T>();
    ck.optimizer_state.push_back(std::move(values));
  }
  if (!r.at_end()) r.fail("trailing bytes");
  return ck;
}

template <typename T>
void Checkpoint<T>::restore(Optimizer<T>& opt) const {
  if (!optimizer || optimizer->kind != opt.kind()) {
    throw DataError("checkpoint optimizer does not match");
  }
  auto tensors = opt.state_tensors();
  if (tensors.size() != optimizer_state.size()) throw DataError("optimizer state count mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].size() != optimizer_state[i].size()) {
      throw DataError("optimizer state shape mismatch");
    }
    std::copy(optimizer_state[i].begin(), optimizer_state[i].end(), tensors[i].begin());
  }
  opt.set_steps(optimizer_steps);
}

CheckpointInfo inspect_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  const Header h = read_header(r);
  CheckpointInfo info;
  info.version = kCheckpointVersion;
  info.scalar_bytes = h.scalar_bytes;
  info.spec = h.spec;
  for (std::uint32_t t = 0; t < h.num_tensors; ++t) {
    TensorInfo ti;
    ti.name = r.str();
    ti.rows = r.u64();
    ti.cols = r.u64();
    r.skip(ti.rows * ti.cols * h.scalar_bytes);
    info.tensors.push_back(std::move(ti));
  }
  const OptimizerHeader oh = read_optimizer_header(r);
  info.optimizer = oh.config;
  info.optimizer_steps = oh.steps;
  info.optimizer_state_tensors = oh.num_state;
  return info;
}

std::string describe(const CheckpointInfo& info) {
  std::ostringstream out;
  const MlpSpec& s = info.spec;
  out << "version: " << info.version << '\n';
  out << "precision: f" << info.scalar_bytes * 8 << '\n';
  out << "shape: " << s.input_dim;
  for (std::size_t l = 0; l < s.num_hidden_layers; ++l) out << " -> " << s.hidden_dim;
  out << " -> " << s.output_dim << '\n';
  out << "activation: " << to_string(s.activation) << '\n';
  out << "bias: " << (s.use_bias ? "true" : "false") << '\n';
  out << "dropout: " << s.dropout_rate << '\n';
  out << "hidden policy: " << to_string(s.hidden_policy.mode);
  if (s.hidden_policy.mode != SelectionMode::Dense) out << " k=" << s.hidden_policy.k;
  out << '\n';
  out << "output policy: " << to_string(s.output_policy.mode);
  if (s.output_policy.mode != SelectionMode::Dense) out << " k=" << s.output_policy.k;
  out << '\n';
  std::size_t scalars = 0;
  for (const auto& t : info.tensors) {
    out << "tensor " << t.name << ": " << t.rows << "x" << t.cols << '\n';
    scalars += t.rows * t.cols;
  }
  out << "parameters: " << scalars << '\n';
  if (info.optimizer) {
    out << "optimizer: " << to_string(info.optimizer->kind) << " lr=" << info.optimizer->lr
        << " steps=" << info.optimizer_steps << " state_tensors=" << info.optimizer_state_tensors
        << '\n';
  } else {
    out << "optimizer: none\n";
  }
  return out.str();
}

template void save_checkpoint<float>(const std::filesystem::path&, const Mlp<float>&,
                                     Optimizer<float>*);
template void save_checkpoint<double>(const std::filesystem::path&, const Mlp<double>&,
                                      Optimizer<double>*);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);
template struct Checkpoint<float>;
template struct Checkpoint<double>;

}  // namespace meprop
