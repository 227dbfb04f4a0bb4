#pragma once

// Dataset ingestion. All pixel sources are scaled to [0, 1] (bytes / 255;
// USPS text values from [-1, 1] via (v + 1) / 2).
//
// RTFT feature container (all integers little-endian):
//   offset 0   char[4]  magic "RTFT"
//   offset 4   uint32   version (1)
//   offset 8   uint64   n   (rows)
//   offset 16  uint64   d   (features per row, > 0)
//   offset 24  uint32   C   (classes, > 0)
//   offset 28  float64  n*d feature values, row-major, little-endian IEEE-754
//   then       uint16   n labels, each < C

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "raymoe/errors.hpp"
#include "raymoe/rng.hpp"

namespace raymoe {

enum class FeatureSource { raw_pixels, external_features };

struct Dataset {
  struct Splits {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;

    friend bool operator==(const Splits&, const Splits&) = default;
  };

  std::string name;
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  std::vector<double> features;
  std::vector<std::uint16_t> labels;
  Splits splits;
  FeatureSource source = FeatureSource::raw_pixels;

  std::size_t size() const noexcept { return labels.size(); }
  std::span<const double> row(std::size_t i) const noexcept { return {features.data() + i * dim, dim}; }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<unsigned char> buf(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size))) {
    throw DataError("failed reading '" + path.string() + "'");
  }
  return buf;
}

inline std::uint32_t read_be32(const unsigned char* p) noexcept {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

template <class T>
T read_le(const unsigned char* p) noexcept {
  T v{};
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(&v, p, sizeof(T));
  } else {
    std::array<unsigned char, sizeof(T)> tmp{};
    for (std::size_t i = 0; i < sizeof(T); ++i) tmp[i] = p[sizeof(T) - 1 - i];
    std::memcpy(&v, tmp.data(), sizeof(T));
  }
  return v;
}

template <class T>
void write_le(std::vector<unsigned char>& out, T v) {
  std::array<unsigned char, sizeof(T)> tmp{};
  std::memcpy(tmp.data(), &v, sizeof(T));
  if constexpr (std::endian::native != std::endian::little) std::reverse(tmp.begin(), tmp.end());
  out.insert(out.end(), tmp.begin(), tmp.end());
}

inline std::vector<std::size_t> iota_indices(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v;
  v.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) v.push_back(i);
  return v;
}

inline std::size_t infer_classes(const std::vector<std::uint16_t>& labels) {
  return labels.empty() ? 0 : static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
}

}  // namespace detail

/// IDX image/label pair (big-endian magic 2051 / 2049). Every sample lands in
/// the train split; callers re-split as needed.
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  if (img.size() < 16) throw DataError("'" + images_path.string() + "': truncated IDX header");
  if (lab.size() < 8) throw DataError("'" + labels_path.string() + "': truncated IDX header");
  const auto img_magic = detail::read_be32(img.data());
  const auto lab_magic = detail::read_be32(lab.data());
  if (img_magic != 0x00000803) {
    throw DataError("'" + images_path.string() + "': bad IDX image magic " + std::to_string(img_magic) + " (expected 2051)");
  }
  if (lab_magic != 0x00000801) {
    throw DataError("'" + labels_path.string() + "': bad IDX label magic " + std::to_string(lab_magic) + " (expected 2049)");
  }
  const std::size_t n = detail::read_be32(img.data() + 4);
  const std::size_t rows = detail::read_be32(img.data() + 8);
  const std::size_t cols = detail::read_be32(img.data() + 12);
  const std::size_t n_labels = detail::read_be32(lab.data() + 4);
  const std::size_t d = rows * cols;
  if (img.size() != 16 + n * d) {
    throw DataError("'" + images_path.string() + "': expected " + std::to_string(16 + n * d) + " bytes, found " +
                    std::to_string(img.size()));
  }
  if (lab.size() != 8 + n_labels) {
    throw DataError("'" + labels_path.string() + "': expected " + std::to_string(8 + n_labels) + " bytes, found " +
                    std::to_string(lab.size()));
  }
  if (n != n_labels) {
    throw DataError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(n_labels) + " labels");
  }
  Dataset ds;
  ds.name = images_path.stem().string();
  ds.dim = d;
  ds.features.resize(n * d);
  for (std::size_t i = 0; i < n * d; ++i) ds.features[i] = img[16 + i] / 255.0;
  ds.labels.assign(lab.begin() + 8, lab.end());
  ds.num_classes = detail::infer_classes(ds.labels);
  ds.splits.train = detail::iota_indices(0, n);
  return ds;
}

/// CIFAR-10 binary batches: 3073-byte records (label byte, 3072 channel-major pixels).
inline Dataset load_cifar10(std::span<const std::filesystem::path> batch_paths) {
  constexpr std::size_t kRecord = 3073;
  constexpr std::size_t kDim = 3072;
  Dataset ds;
  ds.name = "cifar10";
  ds.dim = kDim;
  ds.num_classes = 10;
  for (const auto& path : batch_paths) {
    const auto buf = detail::read_file(path);
    if (buf.size() % kRecord != 0) {
      throw DataError("'" + path.string() + "': length " + std::to_string(buf.size()) +
                      " is not a multiple of the 3073-byte record size");
    }
    const std::size_t n = buf.size() / kRecord;
    for (std::size_t r = 0; r < n; ++r) {
      const unsigned char* rec = buf.data() + r * kRecord;
      if (rec[0] >= 10) throw DataError("'" + path.string() + "': record " + std::to_string(r) + " has label " +
                                        std::to_string(rec[0]));
      ds.labels.push_back(rec[0]);
      for (std::size_t k = 0; k < kDim; ++k) ds.features.push_back(rec[1 + k] / 255.0);
    }
  }
  ds.splits.train = detail::iota_indices(0, ds.labels.size());
  return ds;
}

/// Whitespace-delimited USPS text: label then 256 values in [-1, 1] per line.
inline Dataset load_usps(const std::filesystem::path& path) {
  constexpr std::size_t kDim = 256;
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  Dataset ds;
  ds.name = "usps";
  ds.dim = kDim;
  std::string line;
  std::size_t line_no = 0;
  std::vector<double> vals;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string label_tok;
    if (!(ss >> label_tok)) continue;
    const auto where = "'" + path.string() + "' line " + std::to_string(line_no) + ": ";
    double label = 0.0;
    try {
      std::size_t used = 0;
      label = std::stod(label_tok, &used);
      if (used != label_tok.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw DataError(where + "bad label token '" + label_tok + "'");
    }
    if (label < 0 || label > 65535 || label != std::floor(label)) {
      throw DataError(where + "label '" + label_tok + "' is not a class index");
    }
    vals.clear();
    std::string tok;
    while (ss >> tok) {
      char* end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (end != tok.c_str() + tok.size()) throw DataError(where + "bad value token '" + tok + "'");
      if (!(v >= -1.0 - 1e-9 && v <= 1.0 + 1e-9)) throw DataError(where + "value " + tok + " outside [-1, 1]");
      vals.push_back(std::clamp((v + 1.0) / 2.0, 0.0, 1.0));
    }
    if (vals.size() != kDim) {
      throw DataError(where + "expected 256 pixel values, found " + std::to_string(vals.size()));
    }
    ds.labels.push_back(static_cast<std::uint16_t>(label));
    ds.features.insert(ds.features.end(), vals.begin(), vals.end());
  }
  ds.num_classes = detail::infer_classes(ds.labels);
  ds.splits.train = detail::iota_indices(0, ds.labels.size());
  return ds;
}

inline constexpr std::uint32_t kFeatureFileVersion = 1;

inline std::vector<unsigned char> encode_features(std::span<const double> features, std::size_t n, std::size_t d,
                                                  std::span<const std::uint16_t> labels, std::uint32_t num_classes) {
  if (d == 0) throw ConfigError("feature file: d must be > 0");
  if (features.size() != n * d || labels.size() != n) throw ConfigError("feature file: shape mismatch");
  std::vector<unsigned char> out = {'R', 'T', 'F', 'T'};
  detail::write_le<std::uint32_t>(out, kFeatureFileVersion);
  detail::write_le<std::uint64_t>(out, n);
  detail::write_le<std::uint64_t>(out, d);
  detail::write_le<std::uint32_t>(out, num_classes);
  for (double v : features) detail::write_le<double>(out, v);
  for (auto l : labels) detail::write_le<std::uint16_t>(out, l);
  return out;
}

inline void write_features(const std::filesystem::path& path, std::span<const double> features, std::size_t n,
                           std::size_t d, std::span<const std::uint16_t> labels, std::uint32_t num_classes) {
  const auto bytes = encode_features(features, n, d, labels, num_classes);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

inline Dataset decode_features(std::span<const unsigned char> buf, const std::string& origin) {
  constexpr std::size_t kHeader = 28;
  if (buf.size() < kHeader) throw DataError(origin + ": truncated RTFT header");
  if (std::memcmp(buf.data(), "RTFT", 4) != 0) throw DataError(origin + ": bad magic (expected \"RTFT\")");
  const auto version = detail::read_le<std::uint32_t>(buf.data() + 4);
  if (version != kFeatureFileVersion) {
    throw DataError(origin + ": unsupported RTFT version " + std::to_string(version));
  }
  const auto n = detail::read_le<std::uint64_t>(buf.data() + 8);
  const auto d = detail::read_le<std::uint64_t>(buf.data() + 16);
  const auto c = detail::read_le<std::uint32_t>(buf.data() + 24);
  if (d == 0) throw DataError(origin + ": d must be > 0");
  if (c == 0) throw DataError(origin + ": C must be > 0");
  const std::uint64_t expected = kHeader + n * d * 8 + n * 2;
  if (buf.size() != expected) {
    throw DataError(origin + ": header declares n=" + std::to_string(n) + ", d=" + std::to_string(d) + " (" +
                    std::to_string(expected) + " bytes) but payload has " + std::to_string(buf.size()) + " bytes");
  }
  Dataset ds;
  ds.name = origin;
  ds.dim = d;
  ds.num_classes = c;
  ds.source = FeatureSource::external_features;
  ds.features.resize(n * d);
  const unsigned char* p = buf.data() + kHeader;
  for (std::size_t i = 0; i < n * d; ++i, p += 8) {
    ds.features[i] = detail::read_le<double>(p);
    if (!std::isfinite(ds.features[i])) throw DataError(origin + ": non-finite feature at value " + std::to_string(i));
  }
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i, p += 2) {
    ds.labels[i] = detail::read_le<std::uint16_t>(p);
    if (ds.labels[i] >= c) throw DataError(origin + ": label " + std::to_string(ds.labels[i]) + " >= C");
  }
  ds.splits.train = detail::iota_indices(0, n);
  return ds;
}

inline Dataset load_features(const std::filesystem::path& path) {
  const auto buf = detail::read_file(path);
  return decode_features(buf, path.string());
}

/// Appends `test`'s samples after `train`'s: train split = original training
/// indices, test split = the appended block.
inline Dataset combine_train_test(Dataset train, const Dataset& test, std::string name) {
  if (train.dim != test.dim) {
    throw DataError("train/test feature dimension mismatch: " + std::to_string(train.dim) + " vs " +
                    std::to_string(test.dim));
  }
  const std::size_t n_train = train.size();
  train.name = std::move(name);
  train.features.insert(train.features.end(), test.features.begin(), test.features.end());
  train.labels.insert(train.labels.end(), test.labels.begin(), test.labels.end());
  train.num_classes = std::max(train.num_classes, test.num_classes);
  train.splits.train = detail::iota_indices(0, n_train);
  train.splits.val.clear();
  train.splits.test = detail::iota_indices(n_train, train.size());
  return train;
}

/// Keeps a seeded random subset of `count` training indices (sorted). count = 0 keeps all.
inline Dataset subsample_train(Dataset ds, std::size_t count, std::uint64_t seed) {
  if (count == 0 || count >= ds.splits.train.size()) return ds;
  Rng rng(seed);
  auto idx = ds.splits.train;
  rng.shuffle(idx);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  ds.splits.train = std::move(idx);
  return ds;
}

/// Seeded shuffle of the training indices into val (floor(val_fraction * n)
/// samples) and train (the rest). Both lists are returned sorted; the test
/// split is untouched.
inline Dataset split(Dataset ds, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  auto idx = ds.splits.train;
  idx.insert(idx.end(), ds.splits.val.begin(), ds.splits.val.end());
  std::sort(idx.begin(), idx.end());
  Rng rng(seed);
  rng.shuffle(idx);
  const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(idx.size())));
  ds.splits.val.assign(idx.end() - static_cast<std::ptrdiff_t>(n_val), idx.end());
  ds.splits.train.assign(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(n_val));
  std::sort(ds.splits.train.begin(), ds.splits.train.end());
  std::sort(ds.splits.val.begin(), ds.splits.val.end());
  return ds;
}

}  // namespace raymoe
