#include "meprop/dataio.hpp"

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <string>

#include "meprop/error.hpp"
#include "meprop/rng.hpp"

namespace meprop {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::vector<std::uint8_t> bytes;
  if (path.extension() == ".gz") {
    gzFile f = gzopen(path.c_str(), "rb");
    if (f == nullptr) throw DataError("cannot open " + path.string());
    std::array<std::uint8_t, 1 << 16> buf{};
    int got = 0;
    while ((got = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) {
      bytes.insert(bytes.end(), buf.begin(), buf.begin() + got);
    }
    const bool failed = got < 0;
    gzclose(f);
    if (failed) throw DataError("corrupt gzip stream in " + path.string());
    return bytes;
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  bytes.resize(static_cast<std::size_t>(in.tellg()));
  in.seekg(0, std::ios::beg);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw DataError("failed reading " + path.string());
  return bytes;
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                        const fs::path& path) {
  if (offset + 4 > bytes.size()) throw DataError(path.string() + ": truncated IDX header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b, 4);
}

std::string hex(std::uint32_t v) {
  char buf[11];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

struct Fnv1a {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void bytes(const void* data, std::size_t len) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
};

fs::path find_file(const fs::path& dir, const std::string& stem) {
  for (const auto& name : {stem, stem + ".gz"}) {
    if (fs::exists(dir / name)) return dir / name;
  }
  // Some mirrors ship "train-images.idx3-ubyte".
  std::string dotted = stem;
  if (const auto pos = dotted.rfind("-idx"); pos != std::string::npos) dotted[pos] = '.';
  for (const auto& name : {dotted, dotted + ".gz"}) {
    if (fs::exists(dir / name)) return dir / name;
  }
  throw DataError("MNIST file " + stem + "[.gz] not found in " + dir.string());
}

}  // namespace

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "?";
}

std::uint64_t Dataset::digest() const {
  Fnv1a f;
  f.u64(image_rows);
  f.u64(image_cols);
  f.bytes(pixels.data(), pixels.size() * sizeof(float));
  f.bytes(labels.data(), labels.size());
  return f.h;
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw ConfigError("Dataset::slice: range out of bounds");
  Dataset out;
  out.image_rows = image_rows;
  out.image_cols = image_cols;
  out.split = split;
  const std::size_t f = features();
  out.pixels.assign(pixels.begin() + static_cast<std::ptrdiff_t>(begin * f),
                    pixels.begin() + static_cast<std::ptrdiff_t>(end * f));
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    labels.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

Dataset load_idx(const fs::path& images_path, const fs::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);

  const std::uint32_t img_magic = read_be32(img, 0, images_path);
  if (img_magic != kImageMagic) {
    throw DataError(images_path.string() + ": bad IDX image magic " + hex(img_magic) +
                    " (expected 0x00000803)");
  }
  const std::uint32_t lab_magic = read_be32(lab, 0, labels_path);
  if (lab_magic != kLabelMagic) {
    throw DataError(labels_path.string() + ": bad IDX label magic " + hex(lab_magic) +
                    " (expected 0x00000801)");
  }

  const std::size_t count = read_be32(img, 4, images_path);
  const std::size_t rows = read_be32(img, 8, images_path);
  const std::size_t cols = read_be32(img, 12, images_path);
  const std::size_t label_count = read_be32(lab, 4, labels_path);
  if (count != label_count) {
    throw DataError("count mismatch: " + images_path.string() + " has " +
                    std::to_string(count) + " images but " + labels_path.string() + " has " +
                    std::to_string(label_count) + " labels");
  }
  const std::size_t pixel_bytes = count * rows * cols;
  if (img.size() < 16 + pixel_bytes) {
    throw DataError(images_path.string() + ": truncated, expected " +
                    std::to_string(16 + pixel_bytes) + " bytes, found " +
                    std::to_string(img.size()));
  }
  if (lab.size() < 8 + count) {
    throw DataError(labels_path.string() + ": truncated, expected " + std::to_string(8 + count) +
                    " bytes, found " + std::to_string(lab.size()));
  }

  Dataset ds;
  ds.image_rows = rows;
  ds.image_cols = cols;
  ds.pixels.resize(pixel_bytes);
  for (std::size_t i = 0; i < pixel_bytes; ++i) {
    ds.pixels[i] = static_cast<float>(img[16 + i]) / 255.0f;
  }
  ds.labels.assign(lab.begin() + 8, lab.begin() + 8 + static_cast<std::ptrdiff_t>(count));
  for (std::size_t i = 0; i < count; ++i) {
    if (ds.labels[i] > 9) {
      throw DataError(labels_path.string() + ": label " + std::to_string(ds.labels[i]) +
                      " at index " + std::to_string(i) + " is outside 0..9");
    }
  }
  return ds;
}

void write_idx_images(const fs::path& path, std::size_t count, std::size_t rows,
                      std::size_t cols, std::span<const std::uint8_t> pixels) {
  if (pixels.size() != count * rows * cols) throw ConfigError("write_idx_images: size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  put_be32(out, kImageMagic);
  put_be32(out, static_cast<std::uint32_t>(count));
  put_be32(out, static_cast<std::uint32_t>(rows));
  put_be32(out, static_cast<std::uint32_t>(cols));
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
}

void write_idx_labels(const fs::path& path, std::span<const std::uint8_t> labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  put_be32(out, kLabelMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size()));
}

std::pair<Dataset, Dataset> split_dev(const Dataset& train, std::size_t dev_size) {
  if (train.size() < dev_size) {
    throw ConfigError("dev split needs at least " + std::to_string(dev_size) +
                      " training examples, got " + std::to_string(train.size()));
  }
  Dataset dev = train.slice(0, dev_size);
  dev.split = Split::Dev;
  Dataset rest = train.slice(dev_size, train.size());
  rest.split = Split::Train;
  return {std::move(rest), std::move(dev)};
}

MnistSplits load_mnist(const fs::path& dir) {
  if (dir.empty()) throw DataError("no MNIST data directory given (use --data-dir or MEPROP_DATA_DIR)");
  if (!fs::is_directory(dir)) throw DataError("MNIST data directory " + dir.string() + " does not exist");
  Dataset full = load_idx(find_file(dir, "train-images-idx3-ubyte"),
                          find_file(dir, "train-labels-idx1-ubyte"));
  MnistSplits out;
  auto [train, dev] = split_dev(full);
  out.train = std::move(train);
  out.dev = std::move(dev);
  out.test = load_idx(find_file(dir, "t10k-images-idx3-ubyte"),
                      find_file(dir, "t10k-labels-idx1-ubyte"));
  out.test.split = Split::Test;
  return out;
}

fs::path resolve_data_dir(const fs::path& explicit_dir) {
  if (!explicit_dir.empty()) return explicit_dir;
  if (const char* env = std::getenv("MEPROP_DATA_DIR"); env != nullptr && *env != '\0') {
    return fs::path(env);
  }
  return {};
}

// ---------------------------------------------------------------------------

std::uint64_t SequenceDataset::digest() const {
  Fnv1a f;
  f.u64(vocab);
  for (const auto& s : sequences) {
    f.u64(s.size());
    f.bytes(s.data(), s.size());
  }
  f.bytes(labels.data(), labels.size());
  return f.h;
}

SequenceDataset synth_sequences(std::size_t n, std::size_t len, std::uint64_t seed,
                                std::size_t vocab) {
  if (vocab < 2 || vocab > 256) throw ConfigError("synth_sequences: vocab must be in 2..256");
  if (len == 0) throw ConfigError("synth_sequences: length must be >= 1");
  Rng rng(seed);
  SequenceDataset ds;
  ds.vocab = vocab;
  ds.sequences.reserve(n);
  ds.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::uint8_t> seq(len);
    std::size_t sum = 0;
    for (auto& tok : seq) {
      tok = static_cast<std::uint8_t>(rng.below(vocab));
      sum += tok;
    }
    ds.sequences.push_back(std::move(seq));
    ds.labels.push_back(static_cast<std::uint8_t>(sum % 2));
  }
  return ds;
}

template <typename T>
MatmulProblem<T> synth_matmul(std::size_t b, std::size_t n, std::size_t m, std::uint64_t seed) {
  if (b == 0 || n == 0 || m == 0) throw ConfigError("synth_matmul: dimensions must be >= 1");
  Rng root(seed);
  MatmulProblem<T> p{Matrix<T>(b, n), Matrix<T>(b, m), Matrix<T>(n, m)};
  Rng r0 = root.split(0), r1 = root.split(1), r2 = root.split(2);
  for (auto& v : p.grad_out.data()) v = static_cast<T>(r0.uniform(-1.0, 1.0));
  for (auto& v : p.input.data()) v = static_cast<T>(r1.uniform(-1.0, 1.0));
  for (auto& v : p.weight.data()) v = static_cast<T>(r2.uniform(-1.0, 1.0));
  return p;
}

template MatmulProblem<float> synth_matmul<float>(std::size_t, std::size_t, std::size_t,
                                                  std::uint64_t);
template MatmulProblem<double> synth_matmul<double>(std::size_t, std::size_t, std::size_t,
                                                    std::uint64_t);

}  // namespace meprop
