#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ewa/errors.hpp"
#include "ewa/rng.hpp"

namespace ewa {

// Train/test split with the train-only standardization statistics attached.
// Inputs are stored P x (N0*A0), position-major / channel-minor, so the same
// matrix feeds both MLP and CNN code.
struct DatasetSplit {
  Eigen::MatrixXd x_train;
  Eigen::VectorXd y_train;
  Eigen::MatrixXd x_test;
  Eigen::VectorXd y_test;
  double mean = 0.0;  // m_D, computed on the train split only
  double stddev = 1.0;  // sigma_D
  std::string tag;
  int channels = 1;
  int width = 0;  // N0 (positions)

  int p() const { return static_cast<int>(x_train.rows()); }
  int p_test() const { return static_cast<int>(x_test.rows()); }
  int input_dim() const { return static_cast<int>(x_train.cols()); }
};

// Dataset root: $EWA_DATA_DIR, falling back to ./data.
inline std::string dataset_root() {
  const char* env = std::getenv("EWA_DATA_DIR");
  return env ? std::string(env) : std::string("data");
}

// ---------------------------------------------------------------------------
// IDX (MNIST) parsing. Big-endian magic 0x00000803 for images and 0x00000801
// for labels.

struct IdxData {
  std::vector<int> dims;
  std::vector<std::uint8_t> data;
};

inline IdxData read_idx(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("read_idx: cannot open " + path);
  const auto read_u32 = [&](std::size_t offset) -> std::uint32_t {
    unsigned char b[4];
    if (!f.read(reinterpret_cast<char*>(b), 4))
      throw ParseError("read_idx: " + path + ": truncated header at byte " +
                       std::to_string(offset));
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
  };
  const std::uint32_t magic = read_u32(0);
  if (magic != 0x00000803u && magic != 0x00000801u)
    throw ParseError("read_idx: " + path + ": bad magic number at byte 0");
  const int n_dims = magic == 0x00000803u ? 3 : 1;
  IdxData out;
  std::size_t total = 1;
  for (int d = 0; d < n_dims; ++d) {
    const std::uint32_t v = read_u32(4 + 4 * static_cast<std::size_t>(d));
    out.dims.push_back(static_cast<int>(v));
    total *= v;
  }
  out.data.resize(total);
  if (!f.read(reinterpret_cast<char*>(out.data.data()), static_cast<std::streamsize>(total)))
    throw ParseError("read_idx: " + path + ": truncated payload at byte " +
                     std::to_string(4 + 4 * static_cast<std::size_t>(n_dims)));
  return out;
}

inline void write_idx_images(const std::string& path, const std::vector<std::uint8_t>& pixels,
                             int n, int rows, int cols) {
  std::ofstream f(path, std::ios::binary);
  const auto put_u32 = [&](std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
  };
  put_u32(0x00000803u);
  put_u32(static_cast<std::uint32_t>(n));
  put_u32(static_cast<std::uint32_t>(rows));
  put_u32(static_cast<std::uint32_t>(cols));
  f.write(reinterpret_cast<const char*>(pixels.data()),
          static_cast<std::streamsize>(pixels.size()));
}

inline void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels) {
  std::ofstream f(path, std::ios::binary);
  const auto put_u32 = [&](std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
  };
  put_u32(0x00000801u);
  put_u32(static_cast<std::uint32_t>(labels.size()));
  f.write(reinterpret_cast<const char*>(labels.data()),
          static_cast<std::streamsize>(labels.size()));
}

// ---------------------------------------------------------------------------
// Bilinear 32x32 RGB -> 28x28 grayscale (channel mean after per-channel
// resize), align-corners-false sampling: src = (dst + 0.5) * scale - 0.5,
// clamped to the source frame. For the 32 -> 28 case no clamping triggers, so
// affine images stay affine.

inline Eigen::VectorXd grayscale_resize(const std::vector<double>& rgb, int src = 32,
                                        int dst = 28) {
  if (rgb.size() != static_cast<std::size_t>(3 * src * src))
    throw ShapeError("grayscale_resize: want 3 channel planes of " + std::to_string(src * src));
  const double scale = static_cast<double>(src) / dst;
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dst) * dst);
  for (int ch = 0; ch < 3; ++ch) {
    const double* plane = rgb.data() + static_cast<std::size_t>(ch) * src * src;
    for (int r = 0; r < dst; ++r) {
      double fy = (r + 0.5) * scale - 0.5;
      fy = std::min(std::max(fy, 0.0), static_cast<double>(src - 1));
      const int y0 = static_cast<int>(std::floor(fy));
      const int y1 = std::min(y0 + 1, src - 1);
      const double wy = fy - y0;
      for (int c = 0; c < dst; ++c) {
        double fx = (c + 0.5) * scale - 0.5;
        fx = std::min(std::max(fx, 0.0), static_cast<double>(src - 1));
        const int x0 = static_cast<int>(std::floor(fx));
        const int x1 = std::min(x0 + 1, src - 1);
        const double wx = fx - x0;
        const double top = plane[y0 * src + x0] * (1 - wx) + plane[y0 * src + x1] * wx;
        const double bot = plane[y1 * src + x0] * (1 - wx) + plane[y1 * src + x1] * wx;
        out[static_cast<Eigen::Index>(r) * dst + c] += (top * (1 - wy) + bot * wy) / 3.0;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Selection: class filter first, then a seeded Fisher-Yates shuffle, then the
// first P rows. Deterministic given (files, seed).

namespace detail {

inline std::vector<std::size_t> filtered_shuffled(const std::vector<std::uint8_t>& labels,
                                                  std::pair<int, int> classes,
                                                  RandomSource& rng) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == classes.first || labels[i] == classes.second) idx.push_back(i);
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(i));
    std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
  }
  return idx;
}

}  // namespace detail

enum class ImageTask { Mnist, Cifar10 };

// MNIST IDX pair or CIFAR-10 binary batches -> raw split (pixel units; CIFAR
// is bilinearly downsampled to 28x28 grayscale first, so both tasks give
// N0 = 784). Labels map classes.first -> 0, classes.second -> 1.
inline DatasetSplit load_image_task(const std::string& dir, ImageTask task,
                                    std::pair<int, int> classes, int p, int p_test,
                                    RandomSource rng) {
  std::vector<Eigen::VectorXd> train_x, test_x;
  std::vector<double> train_y, test_y;

  const auto select = [&](const std::vector<std::uint8_t>& labels,
                          const std::function<Eigen::VectorXd(std::size_t)>& fetch, int want,
                          std::vector<Eigen::VectorXd>& xs, std::vector<double>& ys,
                          RandomSource& r) {
    const auto idx = detail::filtered_shuffled(labels, classes, r);
    if (static_cast<int>(idx.size()) < want)
      throw InsufficientSamplesError("load_image_task: only " + std::to_string(idx.size()) +
                                     " samples of the requested classes, need " +
                                     std::to_string(want));
    for (int i = 0; i < want; ++i) {
      xs.push_back(fetch(idx[static_cast<std::size_t>(i)]));
      ys.push_back(labels[idx[static_cast<std::size_t>(i)]] == classes.first ? 0.0 : 1.0);
    }
  };

  if (task == ImageTask::Mnist) {
    const IdxData timg = read_idx(dir + "/train-images-idx3-ubyte");
    const IdxData tlab = read_idx(dir + "/train-labels-idx1-ubyte");
    const IdxData simg = read_idx(dir + "/t10k-images-idx3-ubyte");
    const IdxData slab = read_idx(dir + "/t10k-labels-idx1-ubyte");
    const int d = timg.dims[1] * timg.dims[2];
    const auto fetch_train = [&](std::size_t i) {
      Eigen::VectorXd v(d);
      for (int k = 0; k < d; ++k) v[k] = timg.data[i * d + k];
      return v;
    };
    const auto fetch_test = [&](std::size_t i) {
      Eigen::VectorXd v(d);
      for (int k = 0; k < d; ++k) v[k] = simg.data[i * d + k];
      return v;
    };
    RandomSource r_train = rng.fork(1), r_test = rng.fork(2);
    select(tlab.data, fetch_train, p, train_x, train_y, r_train);
    select(slab.data, fetch_test, p_test, test_x, test_y, r_test);
  } else {
    // CIFAR-10 binary batches: 3073-byte records, label then R/G/B planes.
    std::vector<std::uint8_t> train_bytes, test_bytes;
    const auto slurp = [&](const std::string& path, std::vector<std::uint8_t>& sink) {
      std::ifstream f(path, std::ios::binary);
      if (!f) throw ParseError("load_image_task: cannot open " + path);
      sink.insert(sink.end(), std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    };
    for (int b = 1; b <= 5; ++b) slurp(dir + "/data_batch_" + std::to_string(b) + ".bin",
                                       train_bytes);
    slurp(dir + "/test_batch.bin", test_bytes);
    const auto parse = [&](const std::vector<std::uint8_t>& bytes,
                           std::vector<std::uint8_t>& labels) {
      if (bytes.size() % 3073 != 0)
        throw ParseError("load_image_task: CIFAR batch size not a multiple of 3073 (byte " +
                         std::to_string(bytes.size()) + ")");
      const std::size_t n = bytes.size() / 3073;
      for (std::size_t i = 0; i < n; ++i) labels.push_back(bytes[i * 3073]);
      return n;
    };
    std::vector<std::uint8_t> tlab, slab;
    parse(train_bytes, tlab);
    parse(test_bytes, slab);
    const auto fetch_from = [&](const std::vector<std::uint8_t>& bytes, std::size_t i) {
      std::vector<double> rgb(3072);
      for (int k = 0; k < 3072; ++k) rgb[static_cast<std::size_t>(k)] = bytes[i * 3073 + 1 + k];
      return grayscale_resize(rgb);
    };
    RandomSource r_train = rng.fork(1), r_test = rng.fork(2);
    select(tlab, [&](std::size_t i) { return fetch_from(train_bytes, i); }, p, train_x, train_y,
           r_train);
    select(slab, [&](std::size_t i) { return fetch_from(test_bytes, i); }, p_test, test_x, test_y,
           r_test);
  }

  DatasetSplit out;
  out.width = static_cast<int>(train_x.front().size());
  out.channels = 1;
  out.x_train.resize(p, out.width);
  out.y_train.resize(p);
  for (int i = 0; i < p; ++i) {
    out.x_train.row(i) = train_x[static_cast<std::size_t>(i)];
    out.y_train[i] = train_y[static_cast<std::size_t>(i)];
  }
  out.x_test.resize(p_test, out.width);
  out.y_test.resize(p_test);
  for (int i = 0; i < p_test; ++i) {
    out.x_test.row(i) = test_x[static_cast<std::size_t>(i)];
    out.y_test[i] = test_y[static_cast<std::size_t>(i)];
  }
  out.tag = task == ImageTask::Mnist ? "mnist" : "cifar10";
  return out;
}

// Standardize by the global train mean/std over all pixels jointly; the test
// split is transformed with the train statistics, never its own.
inline DatasetSplit standardize(DatasetSplit split) {
  const double n = static_cast<double>(split.x_train.size());
  if (n < 1) throw DegenerateDataError("standardize: empty train split");
  const double m = split.x_train.sum() / n;
  const double sd = std::sqrt((split.x_train.array() - m).square().sum() / n);
  if (!(sd > 0.0)) throw DegenerateDataError("standardize: zero train variance");
  split.x_train = ((split.x_train.array() - m) / sd).matrix();
  split.x_test = ((split.x_test.array() - m) / sd).matrix();
  split.mean = m;
  split.stddev = sd;
  return split;
}

// Synthetic linear-teacher task: x ~ N(0, I), w* uniform on the unit sphere,
// noiseless labels y = x.w*; already standardized by construction.
inline DatasetSplit gaussian_teacher(int n0, int p, int p_test, RandomSource rng) {
  if (n0 < 1) throw DomainError("gaussian_teacher: n0 must be positive");
  Eigen::VectorXd w = rng.normal_vector(n0);
  w /= w.norm();
  DatasetSplit out;
  out.x_train = rng.normal_matrix(p, n0);
  out.x_test = rng.normal_matrix(p_test, n0);
  out.y_train = out.x_train * w;
  out.y_test = out.x_test * w;
  out.width = n0;
  out.channels = 1;
  out.tag = "gaussian";
  return out;
}

// CSV export of a split (one row per sample, label last).
inline void write_split_csv(const DatasetSplit& split, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw Error("write_split_csv: cannot open " + path);
  std::fprintf(f, "# tag=%s mean=%.17g std=%.17g\n", split.tag.c_str(), split.mean, split.stddev);
  const auto dump = [&](const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const char* which) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      std::fprintf(f, "%s", which);
      for (Eigen::Index j = 0; j < x.cols(); ++j) std::fprintf(f, ",%.17g", x(i, j));
      std::fprintf(f, ",%.17g\n", y[i]);
    }
  };
  dump(split.x_train, split.y_train, "train");
  dump(split.x_test, split.y_test, "test");
  std::fclose(f);
}

}  // namespace ewa
