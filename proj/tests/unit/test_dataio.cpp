#include <doctest.h>

#include <zlib.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "meprop/dataio.hpp"
#include "meprop/error.hpp"

using namespace meprop;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "meprop_dataio_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Synthetic labelled set of `n` 2x3 images, written as an IDX pair.
Dataset write_fixture(const std::string& stem, std::size_t n, std::vector<std::uint8_t>* raw = nullptr) {
  std::vector<std::uint8_t> pixels(n * 6);
  std::vector<std::uint8_t> labels(n);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<std::uint8_t>((i * 37) % 256);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::uint8_t>(i % 10);
  write_idx_images(scratch(stem + "-images"), n, 2, 3, pixels);
  write_idx_labels(scratch(stem + "-labels"), labels);
  if (raw) *raw = pixels;
  return load_idx(scratch(stem + "-images"), scratch(stem + "-labels"));
}

}  // namespace

TEST_SUITE("dataio") {

TEST_CASE("one-image fixture round-trips exactly") {
  const std::vector<std::uint8_t> pixels = {0, 1, 127, 128, 254, 255};
  const std::vector<std::uint8_t> labels = {7};
  write_idx_images(scratch("one-images"), 1, 2, 3, pixels);
  write_idx_labels(scratch("one-labels"), labels);
  const auto img = read_bytes(scratch("one-images"));
  REQUIRE(img.size() == 16 + 6);
  CHECK(static_cast<unsigned char>(img[2]) == 0x08);
  CHECK(static_cast<unsigned char>(img[3]) == 0x03);
  const auto lbl = read_bytes(scratch("one-labels"));
  CHECK(static_cast<unsigned char>(lbl[3]) == 0x01);

  const Dataset d = load_idx(scratch("one-images"), scratch("one-labels"));
  CHECK(d.size() == 1);
  CHECK(d.image_rows == 2);
  CHECK(d.image_cols == 3);
  CHECK(d.labels[0] == 7);
  for (std::size_t i = 0; i < 6; ++i) CHECK(d.pixels[i] == static_cast<float>(pixels[i]) / 255.0f);
  CHECK(d.pixels[0] == 0.0f);
  CHECK(d.pixels[5] == 1.0f);
}

TEST_CASE("gzip input is detected by extension") {
  std::vector<std::uint8_t> raw;
  const Dataset plain = write_fixture("gz", 12, &raw);
  const auto bytes = read_bytes(scratch("gz-images"));
  gzFile f = gzopen(scratch("gz-images.gz").c_str(), "wb");
  REQUIRE(f != nullptr);
  gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
  gzclose(f);
  const Dataset packed = load_idx(scratch("gz-images.gz"), scratch("gz-labels"));
  CHECK(packed.digest() == plain.digest());
}

TEST_CASE("malformed files raise errors naming the file") {
  write_fixture("bad", 4);
  SUBCASE("bad magic") {
    auto bytes = read_bytes(scratch("bad-images"));
    bytes[3] = 0x05;
    write_bytes(scratch("bad-magic"), bytes);
    try {
      load_idx(scratch("bad-magic"), scratch("bad-labels"));
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("bad-magic") != std::string::npos);
    }
  }
  SUBCASE("truncated pixels") {
    auto bytes = read_bytes(scratch("bad-images"));
    bytes.resize(bytes.size() - 3);
    write_bytes(scratch("bad-trunc"), bytes);
    CHECK_THROWS_AS(load_idx(scratch("bad-trunc"), scratch("bad-labels")), DataError);
  }
  SUBCASE("count mismatch") {
    write_idx_labels(scratch("bad-labels3"), std::vector<std::uint8_t>{1, 2, 3});
    CHECK_THROWS_AS(load_idx(scratch("bad-images"), scratch("bad-labels3")), DataError);
  }
  SUBCASE("label out of range") {
    write_idx_labels(scratch("bad-labels-range"), std::vector<std::uint8_t>{1, 2, 3, 10});
    CHECK_THROWS_AS(load_idx(scratch("bad-images"), scratch("bad-labels-range")), DataError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_idx(scratch("nope"), scratch("bad-labels")), DataError);
    CHECK_THROWS_AS(load_mnist(scratch("no-such-dir")), DataError);
  }
}

TEST_CASE("dev split is file order") {
  const Dataset all = write_fixture("split", 5030);
  SUBCASE("default size") {
    const auto [train, dev] = split_dev(all);
    CHECK(dev.size() == 5000);
    CHECK(train.size() == 30);
    CHECK(dev.split == Split::Dev);
    CHECK(train.split == Split::Train);
    std::vector<float> joined = dev.pixels;
    joined.insert(joined.end(), train.pixels.begin(), train.pixels.end());
    CHECK(joined == all.pixels);
    std::vector<std::uint8_t> labels = dev.labels;
    labels.insert(labels.end(), train.labels.begin(), train.labels.end());
    CHECK(labels == all.labels);
  }
  SUBCASE("boundary: exactly the dev size leaves an empty train set") {
    const auto [train, dev] = split_dev(all.slice(0, 5000));
    CHECK(train.size() == 0);
    CHECK(dev.size() == 5000);
  }
  SUBCASE("too few examples") {
    CHECK_THROWS_AS(split_dev(all.slice(0, 4999)), ConfigError);
  }
}

TEST_CASE("digest is stable and sensitive") {
  const Dataset a = write_fixture("dig", 20);
  const Dataset b = load_idx(scratch("dig-images"), scratch("dig-labels"));
  CHECK(a.digest() == b.digest());
  Dataset c = b;
  c.labels[3] = static_cast<std::uint8_t>((c.labels[3] + 1) % 10);
  CHECK(c.digest() != a.digest());
  for (const float v : a.pixels) CHECK((v >= 0.0f && v <= 1.0f));
}

TEST_CASE("synthetic sequences") {
  const auto a = synth_sequences(4000, 8, 11);
  const auto b = synth_sequences(4000, 8, 11);
  CHECK(a.digest() == b.digest());
  CHECK(synth_sequences(4000, 8, 12).digest() != a.digest());
  std::size_t ones = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a.sequences[i].size() == 8);
    unsigned sum = 0;
    for (const auto t : a.sequences[i]) {
      CHECK(t < 4);
      sum += t;
    }
    CHECK(a.labels[i] == sum % 2);
    ones += a.labels[i];
  }
  const double n = 4000;
  CHECK(std::abs(static_cast<double>(ones) - n / 2) <= 3 * std::sqrt(n * 0.25));
}

TEST_CASE("synthetic matmul operands") {
  const auto p = synth_matmul<float>(4, 6, 5, 3);
  CHECK(p.grad_out.rows() == 4);
  CHECK(p.grad_out.cols() == 6);
  CHECK(p.input.rows() == 4);
  CHECK(p.input.cols() == 5);
  CHECK(p.weight.rows() == 6);
  CHECK(p.weight.cols() == 5);
  for (const float v : p.weight.data()) CHECK((v >= -1.0f && v < 1.0f));
  CHECK(synth_matmul<float>(4, 6, 5, 3).weight == p.weight);
  CHECK(synth_matmul<float>(4, 6, 5, 4).weight != p.weight);
}

TEST_CASE("data directory resolution") {
  CHECK(resolve_data_dir("/some/where") == fs::path("/some/where"));
}

}  // TEST_SUITE
