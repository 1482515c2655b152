#pragma once

// CIFAR-10 ingestion and the 8x8 grayscale image pool.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "icl_lab/errors.hpp"
#include "icl_lab/prompt.hpp"
#include "icl_lab/rng.hpp"

namespace icl {

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;  // 3072
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;             // 3073

// Raw images, [count x 3 x 32 x 32] in [0, 1].
struct RawImages {
  std::size_t count = 0;
  std::vector<float> pixels;
};

namespace detail {

inline void append_cifar_file(const std::filesystem::path& file, RawImages& out) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open CIFAR-10 batch " + file.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecord != 0)
    throw FormatError(file.string() + ": size " + std::to_string(bytes.size()) +
                      " is not a multiple of the 3073-byte record");
  const std::size_t records = bytes.size() / kCifarRecord;
  out.pixels.reserve(out.pixels.size() + records * kCifarPixels);
  for (std::size_t r = 0; r < records; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecord + 1;  // skip label
    for (std::size_t i = 0; i < kCifarPixels; ++i)
      out.pixels.push_back(static_cast<float>(rec[i]) / 255.0f);
  }
  out.count += records;
}

}  // namespace detail

// Reads one binary batch file, or every *.bin batch in a directory (sorted by
// name). Labels are discarded.
inline RawImages load_cifar10(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  RawImages out;
  if (!fs::exists(path)) throw IoError("CIFAR-10 path does not exist: " + path.string());
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path))
      if (entry.is_regular_file() && entry.path().extension() == ".bin")
        files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no .bin batches under " + path.string());
    for (const auto& f : files) detail::append_cifar_file(f, out);
  } else {
    detail::append_cifar_file(path, out);
  }
  return out;
}

// Encodes images back into the CIFAR-10 record layout (label byte first).
inline std::vector<unsigned char> encode_cifar_records(std::span<const unsigned char> labels,
                                                       std::span<const unsigned char> pixels) {
  if (pixels.size() != labels.size() * kCifarPixels)
    throw DimensionError("pixel buffer does not hold one 3072-byte image per label");
  std::vector<unsigned char> out;
  out.reserve(labels.size() * kCifarRecord);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    out.push_back(labels[r]);
    out.insert(out.end(), pixels.begin() + static_cast<std::ptrdiff_t>(r * kCifarPixels),
               pixels.begin() + static_cast<std::ptrdiff_t>((r + 1) * kCifarPixels));
  }
  return out;
}

// Unweighted channel mean: [3 x H x W] -> [H x W].
inline std::vector<float> to_gray(std::span<const float> rgb, std::size_t channels = 3) {
  if (channels != 3) throw DimensionError("to_gray expects 3 channels, got " +
                                          std::to_string(channels));
  if (rgb.size() % 3 != 0) throw DimensionError("to_gray input is not 3-channel");
  const std::size_t plane = rgb.size() / 3;
  std::vector<float> out(plane);
  for (std::size_t i = 0; i < plane; ++i)
    out[i] = (rgb[i] + rgb[plane + i] + rgb[2 * plane + i]) / 3.0f;
  return out;
}

// 4x4 block average: [32 x 32] -> [8 x 8].
inline std::vector<float> downscale(std::span<const float> gray, std::size_t side = kCifarSide) {
  if (gray.size() != side * side || side % kImageSide != 0 || side / kImageSide != 4)
    throw DimensionError("downscale expects a 32x32 image, got " +
                         std::to_string(gray.size()) + " pixels");
  constexpr std::size_t f = 4;
  std::vector<float> out(kImagePixels);
  for (std::size_t r = 0; r < kImageSide; ++r)
    for (std::size_t c = 0; c < kImageSide; ++c) {
      float acc = 0;
      for (std::size_t i = 0; i < f; ++i)
        for (std::size_t j = 0; j < f; ++j) acc += gray[(r * f + i) * side + c * f + j];
      out[r * kImageSide + c] = acc / float(f * f);
    }
  return out;
}

enum class PoolSource { Cifar10, Synthetic };

struct PoolStats {
  double mean = 0.0;
  double std = 1.0;
};

// Normalized 8x8 single-channel images, [count x 1 x 8 x 8].
struct ImagePool {
  std::vector<float> images;
  std::size_t count = 0;
  PoolStats stats;
  PoolSource source = PoolSource::Synthetic;

  std::span<const float> image(std::size_t i) const {
    return {images.data() + i * kImagePixels, kImagePixels};
  }
  std::span<const float> all() const { return images; }

  // First 80% of images by index.
  std::size_t train_count() const { return count - eval_count(); }
  std::size_t eval_count() const { return count / 5; }
  std::span<const float> train_split() const {
    return {images.data(), train_count() * kImagePixels};
  }
  std::span<const float> eval_split() const {
    return {images.data() + train_count() * kImagePixels, eval_count() * kImagePixels};
  }
};

// Global (scalar) z-score: subtract the mean of all pixels, divide by their
// standard deviation. The stats are kept for reuse.
inline ImagePool normalize(std::vector<float> images, PoolSource source) {
  if (images.empty() || images.size() % kImagePixels != 0)
    throw DataError("pool must hold whole 8x8 images");
  double sum = 0;
  for (float v : images) sum += v;
  const double mean = sum / static_cast<double>(images.size());
  double sq = 0;
  for (float v : images) sq += (v - mean) * (v - mean);
  const double std = std::sqrt(sq / static_cast<double>(images.size()));
  if (!(std > 0.0)) throw DataError("cannot normalize a pool with zero standard deviation");
  for (auto& v : images) v = static_cast<float>((v - mean) / std);
  ImagePool pool;
  pool.count = images.size() / kImagePixels;
  pool.images = std::move(images);
  pool.stats = {mean, std};
  pool.source = source;
  return pool;
}

// Gray -> 8x8 -> normalized, for every raw image.
inline ImagePool cifar_pool(const RawImages& raw) {
  std::vector<float> small;
  small.reserve(raw.count * kImagePixels);
  for (std::size_t i = 0; i < raw.count; ++i) {
    std::span<const float> rgb(raw.pixels.data() + i * kCifarPixels, kCifarPixels);
    const auto g = downscale(to_gray(rgb));
    small.insert(small.end(), g.begin(), g.end());
  }
  auto pool = normalize(std::move(small), PoolSource::Cifar10);
  if (pool.count < 41) throw DataError("CIFAR-10 pool too small for a 41-image prompt");
  return pool;
}

// Smooth random images: a 3x3 Gaussian control grid bilinearly upsampled to
// 8x8, plus a little pixel noise, then normalized.
inline ImagePool synthetic_pool(std::size_t count, std::uint64_t seed) {
  if (count < 41) throw DataError("synthetic pool needs at least 41 images");
  std::mt19937_64 rng(derive_seed(seed, {0x5eed}));
  std::normal_distribution<double> normal;
  std::vector<float> images(count * kImagePixels);
  constexpr std::size_t grid = 3;
  for (std::size_t n = 0; n < count; ++n) {
    double ctrl[grid][grid];
    for (auto& row : ctrl)
      for (auto& v : row) v = normal(rng);
    for (std::size_t r = 0; r < kImageSide; ++r)
      for (std::size_t c = 0; c < kImageSide; ++c) {
        const double gy = static_cast<double>(r) * (grid - 1) / (kImageSide - 1);
        const double gx = static_cast<double>(c) * (grid - 1) / (kImageSide - 1);
        const auto y0 = std::min<std::size_t>(static_cast<std::size_t>(gy), grid - 2);
        const auto x0 = std::min<std::size_t>(static_cast<std::size_t>(gx), grid - 2);
        const double ty = gy - static_cast<double>(y0), tx = gx - static_cast<double>(x0);
        const double v = (1 - ty) * ((1 - tx) * ctrl[y0][x0] + tx * ctrl[y0][x0 + 1]) +
                         ty * ((1 - tx) * ctrl[y0 + 1][x0] + tx * ctrl[y0 + 1][x0 + 1]);
        images[n * kImagePixels + r * kImageSide + c] =
            static_cast<float>(v + 0.1 * normal(rng));
      }
  }
  return normalize(std::move(images), PoolSource::Synthetic);
}

}  // namespace icl
