// Datasets: synthetic Gaussian blobs for desk-scale experiments and the IDX
// binary image format (big-endian magic + dims + unsigned byte payload,
// pixels scaled to [0,1]).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "advdpnp/rng.hpp"
#include "advdpnp/tensor.hpp"

namespace advdpnp {

struct Dataset {
  Tensor inputs;                 // (N, D), D = product of sample_shape
  std::vector<int> labels;       // class indices in [0, num_classes)
  std::vector<int> sample_shape; // {D} for flat data, {H,W} for images
  std::string split = "train";   // "train" | "test"
  double box_low = 0.0;
  double box_high = 1.0;
  int num_classes = 0;

  int size() const { return inputs.dim(0); }
  bool image_shaped() const { return sample_shape.size() == 2; }
};

struct BlobSpec {
  int classes = 3;
  int dim = 2;
  std::vector<std::vector<double>> centers;  // one per class
  double stddev = 0.5;
  int samples_per_class = 100;
  std::uint64_t seed = 0;
  double box_low = -8.0;
  double box_high = 8.0;

  void validate() const {
    if (classes < 2) throw ConfigError("blob spec needs at least 2 classes");
    if (static_cast<int>(centers.size()) != classes) {
      throw ConfigError("blob spec needs one center per class");
    }
    for (const auto& c : centers) {
      if (static_cast<int>(c.size()) != dim) {
        throw ConfigError("blob center dimension mismatch");
      }
    }
    for (std::size_t a = 0; a < centers.size(); ++a) {
      for (std::size_t b = a + 1; b < centers.size(); ++b) {
        if (centers[a] == centers[b]) {
          throw ConfigError("blob centers must be pairwise distinct");
        }
      }
    }
    if (!(stddev > 0.0)) throw ConfigError("blob stddev must be positive");
    if (samples_per_class < 1) throw ConfigError("blob samples_per_class must be >= 1");
    if (!(box_low < box_high)) throw ConfigError("blob box is empty");
  }
};

inline Dataset gen_blobs(const BlobSpec& spec, const std::string& split) {
  spec.validate();
  Rng rng(spec.seed);
  const int n = spec.classes * spec.samples_per_class;
  Dataset ds;
  ds.inputs = Tensor({n, spec.dim});
  ds.labels.resize(static_cast<std::size_t>(n));
  ds.sample_shape = {spec.dim};
  ds.split = split;
  ds.box_low = spec.box_low;
  ds.box_high = spec.box_high;
  ds.num_classes = spec.classes;
  int row = 0;
  for (int c = 0; c < spec.classes; ++c) {
    for (int s = 0; s < spec.samples_per_class; ++s, ++row) {
      double* x = ds.inputs.row(row);
      for (int d = 0; d < spec.dim; ++d) {
        const double v = spec.centers[static_cast<std::size_t>(c)]
                                     [static_cast<std::size_t>(d)] +
                         spec.stddev * rng.normal();
        x[d] = std::clamp(v, spec.box_low, spec.box_high);
      }
      ds.labels[static_cast<std::size_t>(row)] = c;
    }
  }
  return ds;
}

namespace detail {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw ConfigError("truncated IDX file: " + path);
  }
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) |
         (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

inline Dataset load_idx(const std::string& images_path,
                        const std::string& labels_path,
                        const std::string& split) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw ConfigError("cannot open IDX image file: " + images_path);
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw ConfigError("cannot open IDX label file: " + labels_path);

  const std::uint32_t img_magic = detail::read_be32(img, images_path);
  if (img_magic != detail::kIdxImagesMagic) {
    throw ConfigError("bad IDX image magic in " + images_path);
  }
  const std::uint32_t n_images = detail::read_be32(img, images_path);
  const std::uint32_t height = detail::read_be32(img, images_path);
  const std::uint32_t width = detail::read_be32(img, images_path);

  const std::uint32_t lab_magic = detail::read_be32(lab, labels_path);
  if (lab_magic != detail::kIdxLabelsMagic) {
    throw ConfigError("bad IDX label magic in " + labels_path);
  }
  const std::uint32_t n_labels = detail::read_be32(lab, labels_path);
  if (n_images != n_labels) {
    throw ConfigError("IDX image/label count mismatch: " +
                      std::to_string(n_images) + " vs " +
                      std::to_string(n_labels));
  }
  if (n_images == 0) throw ConfigError("empty IDX dataset: " + images_path);

  const std::size_t pixels = static_cast<std::size_t>(n_images) * height * width;
  std::vector<unsigned char> raw(pixels);
  if (!img.read(reinterpret_cast<char*>(raw.data()),
                static_cast<std::streamsize>(pixels))) {
    throw ConfigError("truncated IDX image payload: " + images_path);
  }
  std::vector<unsigned char> raw_labels(n_labels);
  if (!lab.read(reinterpret_cast<char*>(raw_labels.data()),
                static_cast<std::streamsize>(n_labels))) {
    throw ConfigError("truncated IDX label payload: " + labels_path);
  }

  Dataset ds;
  ds.inputs = Tensor({static_cast<int>(n_images), static_cast<int>(height * width)});
  for (std::size_t i = 0; i < pixels; ++i) {
    ds.inputs[static_cast<std::int64_t>(i)] = static_cast<double>(raw[i]) / 255.0;
  }
  ds.labels.reserve(n_labels);
  int max_label = 0;
  for (unsigned char l : raw_labels) {
    ds.labels.push_back(static_cast<int>(l));
    max_label = std::max(max_label, static_cast<int>(l));
  }
  ds.sample_shape = {static_cast<int>(height), static_cast<int>(width)};
  ds.split = split;
  ds.box_low = 0.0;
  ds.box_high = 1.0;
  ds.num_classes = max_label + 1;
  return ds;
}

// Inverse of load_idx for [0,1]-scaled image datasets; used for fixtures and
// round-trip checks.
inline void save_idx(const Dataset& ds, const std::string& images_path,
                     const std::string& labels_path) {
  if (!ds.image_shaped()) throw ConfigError("save_idx needs an image dataset");
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw ConfigError("cannot write IDX image file: " + images_path);
  detail::write_be32(img, detail::kIdxImagesMagic);
  detail::write_be32(img, static_cast<std::uint32_t>(ds.size()));
  detail::write_be32(img, static_cast<std::uint32_t>(ds.sample_shape[0]));
  detail::write_be32(img, static_cast<std::uint32_t>(ds.sample_shape[1]));
  for (std::int64_t i = 0; i < ds.inputs.numel(); ++i) {
    const double v = std::clamp(ds.inputs[i], 0.0, 1.0) * 255.0;
    const unsigned char b = static_cast<unsigned char>(std::lround(v));
    img.write(reinterpret_cast<const char*>(&b), 1);
  }
  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw ConfigError("cannot write IDX label file: " + labels_path);
  detail::write_be32(lab, detail::kIdxLabelsMagic);
  detail::write_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int l : ds.labels) {
    const unsigned char b = static_cast<unsigned char>(l);
    lab.write(reinterpret_cast<const char*>(&b), 1);
  }
}

inline Dataset subset(const Dataset& ds, int n) {
  if (n < 1 || n > ds.size()) throw ConfigError("subset size out of range");
  Dataset out = ds;
  const std::int64_t row = ds.inputs.row_size();
  out.inputs = Tensor({n, static_cast<int>(row)},
                      std::vector<double>(ds.inputs.data(),
                                          ds.inputs.data() + n * row));
  out.labels.assign(ds.labels.begin(), ds.labels.begin() + n);
  return out;
}

// ---- augmentation ----------------------------------------------------------

struct AugmentConfig {
  int pad = 4;
  double flip_prob = 0.5;
};

inline void flip_image_row(double* img, int height, int width) {
  for (int y = 0; y < height; ++y) {
    double* row = img + static_cast<std::int64_t>(y) * width;
    for (int x = 0; x < width / 2; ++x) std::swap(row[x], row[width - 1 - x]);
  }
}

// Pad-and-random-crop plus horizontal flip, per sample. Padding is zero,
// which stays inside the [0,1] pixel box.
inline Tensor augment(const Tensor& batch, int height, int width,
                      const AugmentConfig& cfg, Rng& rng) {
  if (batch.rank() != 2 ||
      batch.dim(1) != height * width) {
    throw ConfigError("augment expects image-shaped rows");
  }
  Tensor out = batch;
  const int pad = cfg.pad;
  std::vector<double> padded(static_cast<std::size_t>((height + 2 * pad) *
                                                      (width + 2 * pad)));
  for (int b = 0; b < batch.dim(0); ++b) {
    const int offy = static_cast<int>(rng.uniform_int(2 * pad + 1));
    const int offx = static_cast<int>(rng.uniform_int(2 * pad + 1));
    const bool flip = rng.uniform() < cfg.flip_prob;
    double* dst = out.row(b);
    if (pad > 0) {
      std::fill(padded.begin(), padded.end(), 0.0);
      const double* src = batch.row(b);
      const int pw = width + 2 * pad;
      for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
          padded[static_cast<std::size_t>((y + pad) * pw + (x + pad))] =
              src[y * width + x];
        }
      }
      for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
          dst[y * width + x] =
              padded[static_cast<std::size_t>((y + offy) * pw + (x + offx))];
        }
      }
    }
    if (flip) flip_image_row(dst, height, width);
  }
  return out;
}

// Shuffled index batches; the final short batch is retained.
inline std::vector<std::vector<int>> batches(const Dataset& ds, int batch_size,
                                             Rng& rng) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  std::vector<int> order(static_cast<std::size_t>(ds.size()));
  for (int i = 0; i < ds.size(); ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  std::vector<std::vector<int>> out;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

inline Tensor gather_rows(const Tensor& inputs, const std::vector<int>& idx) {
  const std::int64_t row = inputs.row_size();
  Tensor out({static_cast<int>(idx.size()), static_cast<int>(row)});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const double* src = inputs.row(idx[i]);
    std::copy(src, src + row, out.row(static_cast<int>(i)));
  }
  return out;
}

inline std::vector<int> gather_labels(const std::vector<int>& labels,
                                      const std::vector<int>& idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    out[i] = labels[static_cast<std::size_t>(idx[i])];
  return out;
}

}  // namespace advdpnp
