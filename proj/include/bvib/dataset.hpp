#pragma once

// IDX (MNIST) parsing and seeded synthetic Gaussian-blob datasets.

#include <cstdint>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bvib/error.hpp"
#include "bvib/rng.hpp"

namespace bvib::data {

/// Features column-per-sample, labels alongside.
struct Dataset {
  Eigen::MatrixXd features;  ///< dim x count
  std::vector<std::uint8_t> labels;
  std::size_t classes = 10;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(features.rows()); }
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Raw contents of one IDX file.
struct IdxArray {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;
};

/// Parses an unsigned-byte IDX file: big-endian magic (0x0803 images or
/// 0x0801 labels), big-endian u32 dimension sizes, then exactly the payload.
inline IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  auto be32 = [&](std::size_t at) {
    if (at + 4 > bytes.size()) fail(Errc::format_error, "IDX header truncated");
    return std::uint32_t{bytes[at]} << 24 | std::uint32_t{bytes[at + 1]} << 16 | std::uint32_t{bytes[at + 2]} << 8 |
           std::uint32_t{bytes[at + 3]};
  };
  IdxArray a;
  a.magic = be32(0);
  std::size_t rank = 0;
  if (a.magic == kIdxImagesMagic) {
    rank = 3;
  } else if (a.magic == kIdxLabelsMagic) {
    rank = 1;
  } else {
    fail(Errc::format_error, "unsupported IDX magic");
  }
  std::uint64_t expected = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    a.dims.push_back(be32(4 + 4 * d));
    expected *= a.dims.back();
  }
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() - header != expected) fail(Errc::format_error, "IDX payload size does not match its header");
  a.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return a;
}

/// Combines an image array and a label array; pixels are scaled to [0, 1].
inline Dataset from_idx(const IdxArray& images, const IdxArray& labels, std::size_t classes = 10) {
  if (images.magic != kIdxImagesMagic || labels.magic != kIdxLabelsMagic) fail(Errc::format_error, "IDX kinds swapped");
  if (images.dims[0] != labels.dims[0]) fail(Errc::format_error, "image and label counts differ");
  const std::size_t count = images.dims[0];
  const std::size_t dim = std::size_t{images.dims[1]} * images.dims[2];
  Dataset d;
  d.classes = classes;
  d.features.resize(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(count));
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t p = 0; p < dim; ++p)
      d.features(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) = images.payload[i * dim + p] / 255.0;
  d.labels = labels.payload;
  for (auto y : d.labels)
    if (y >= classes) fail(Errc::format_error, "label outside the class range");
  return d;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::dataset_error, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Reads an IDX image/label pair, keeping at most `limit` samples (0 keeps all).
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t limit = 0) {
  Dataset d = from_idx(parse_idx(read_file(images_path)), parse_idx(read_file(labels_path)));
  if (limit > 0 && limit < d.size()) {
    d.features.conservativeResize(Eigen::NoChange, static_cast<Eigen::Index>(limit));
    d.labels.resize(limit);
  }
  return d;
}

/// Class means uniform on [0,1]^dim; samples are mean + spread * N(0, I).
/// Samples are ordered class by class.
inline Dataset synth_dataset(std::size_t classes, std::size_t per_class, std::size_t dim, double spread,
                             std::uint64_t seed) {
  require(classes >= 2 && classes <= 256, Errc::invalid_parameter, "classes must be in [2, 256]");
  require(per_class >= 1 && dim >= 1, Errc::invalid_parameter, "per_class and dim must be >= 1");
  require(spread >= 0.0, Errc::invalid_parameter, "spread must be non-negative");
  const RandomStream root = RandomStream(seed).split(StreamTag::data);
  RandomStream mean_rng = root.split(0);
  Eigen::MatrixXd means(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(classes));
  for (Eigen::Index c = 0; c < means.cols(); ++c)
    for (Eigen::Index i = 0; i < means.rows(); ++i) means(i, c) = mean_rng.uniform();
  RandomStream noise = root.split(1);
  Dataset d;
  d.classes = classes;
  d.features.resize(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(classes * per_class));
  d.labels.reserve(classes * per_class);
  Eigen::Index col = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t k = 0; k < per_class; ++k, ++col) {
      for (Eigen::Index i = 0; i < means.rows(); ++i)
        d.features(i, col) = means(i, static_cast<Eigen::Index>(c)) + spread * noise.normal();
      d.labels.push_back(static_cast<std::uint8_t>(c));
    }
  }
  return d;
}

/// Seeded permutation of columns, then the first `first` samples and the rest.
inline std::pair<Dataset, Dataset> shuffle_split(const Dataset& all, std::size_t first, std::uint64_t seed) {
  require(first <= all.size(), Errc::invalid_parameter, "split point beyond dataset");
  std::vector<std::size_t> order(all.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  RandomStream rng = RandomStream(seed).split(StreamTag::data).split(2);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  auto take = [&](std::size_t from, std::size_t to) {
    Dataset d;
    d.classes = all.classes;
    d.features.resize(all.features.rows(), static_cast<Eigen::Index>(to - from));
    for (std::size_t i = from; i < to; ++i) {
      d.features.col(static_cast<Eigen::Index>(i - from)) = all.features.col(static_cast<Eigen::Index>(order[i]));
      d.labels.push_back(all.labels[order[i]]);
    }
    return d;
  };
  return {take(0, first), take(first, all.size())};
}

}  // namespace bvib::data
