#pragma once

// Target-function classes, curriculum masking and prompt construction.

#include <Eigen/QR>

#include <array>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <variant>

#include "icl_lab/nn.hpp"
#include "icl_lab/prompt.hpp"
#include "icl_lab/rng.hpp"

namespace icl {

using Image = std::array<float, kImagePixels>;

// Zeroes every pixel outside the top-left d x d block.
inline Image mask_image(std::span<const float> x, std::size_t d) {
  if (x.size() != kImagePixels)
    throw DimensionError("mask_image expects 64 pixels, got " + std::to_string(x.size()));
  if (d < 1 || d > kImageSide)
    throw ContractError("mask size d must be in [1, 8], got " + std::to_string(d));
  Image out{};
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * kImageSide + c] = x[r * kImageSide + c];
  return out;
}

// ---------------------------------------------------------------------------
// Curriculum

struct CurriculumState {
  std::uint64_t step = 0;
  std::size_t d = 2;
  std::size_t n = 11;
};

inline constexpr std::size_t kCurriculumStartD = 2;
inline constexpr std::size_t kCurriculumMaxD = kImageSide;

// d = min(2 + step / step_per_stage, 8), n = k_mult * d + 1.
inline CurriculumState curriculum_at(std::uint64_t step, std::size_t k_mult = 5,
                                     std::uint64_t step_per_stage = 5000) {
  if (step_per_stage == 0) throw ContractError("step_per_stage must be positive");
  const std::uint64_t stage = step / step_per_stage;
  const std::size_t d =
      stage >= kCurriculumMaxD - kCurriculumStartD
          ? kCurriculumMaxD
          : kCurriculumStartD + static_cast<std::size_t>(stage);
  return {step, d, k_mult * d + 1};
}

// ---------------------------------------------------------------------------
// Target functions

enum class TargetClass { Linear, ConvLinear, TwoLayerCnn, FrozenVit };

inline std::string to_string(TargetClass c) {
  switch (c) {
    case TargetClass::Linear: return "linear";
    case TargetClass::ConvLinear: return "convlinear";
    case TargetClass::TwoLayerCnn: return "cnn";
    case TargetClass::FrozenVit: return "vit";
  }
  return "?";
}

inline TargetClass parse_target_class(const std::string& name) {
  if (name == "linear") return TargetClass::Linear;
  if (name == "convlinear") return TargetClass::ConvLinear;
  if (name == "cnn") return TargetClass::TwoLayerCnn;
  if (name == "vit") return TargetClass::FrozenVit;
  throw ConfigError("unknown function class '" + name +
                    "' (expected linear, convlinear, cnn or vit)");
}

struct LinearTarget {
  std::array<float, kImagePixels> w{};
};

// w . flatten(conv(x, kernel)) with a same-padded 3x3 kernel.
struct ConvLinearTarget {
  std::array<float, 9> kernel{};
  std::array<float, kImagePixels> w{};
};

// w . flatten(relu(conv(x, kernel))) with a 2x2 kernel at stride 2.
struct TwoLayerCnnTarget {
  std::array<float, 4> kernel{};
  std::array<float, 16> w{};
};

struct FrozenVitTarget {
  std::shared_ptr<const VitEncoder<float>> net;
};

using TargetFunction =
    std::variant<LinearTarget, ConvLinearTarget, TwoLayerCnnTarget, FrozenVitTarget>;

inline TargetClass class_of(const TargetFunction& f) {
  return static_cast<TargetClass>(f.index());
}

// Architecture of the frozen ViT target.
inline EncoderConfig frozen_vit_config() {
  EncoderConfig cfg;
  cfg.kind = EncoderKind::Vit;
  cfg.n_layers = 4;
  cfg.n_heads = 2;
  cfg.patch_size = 4;
  cfg.width = 32;
  cfg.pos_embedding = PositionalKind::Sinusoidal;
  return cfg;
}

// Q from a QR factorization of a Gaussian 3x3 matrix, columns sign-fixed so
// that diag(R) > 0.
inline std::array<float, 9> orthogonal_kernel(std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Eigen::Matrix3d a;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a(r, c) = normal(rng);
  Eigen::HouseholderQR<Eigen::Matrix3d> qr(a);
  Eigen::Matrix3d q = qr.householderQ();
  const Eigen::Matrix3d r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int c = 0; c < 3; ++c)
    if (r(c, c) < 0) q.col(c) *= -1.0;
  std::array<float, 9> k{};
  for (int r2 = 0; r2 < 3; ++r2)
    for (int c = 0; c < 3; ++c) k[static_cast<std::size_t>(r2 * 3 + c)] = static_cast<float>(q(r2, c));
  return k;
}

// Linear and ConvLinear draw w from the same stream, so a ConvLinear target
// with an identity kernel coincides with the Linear target of equal seed.
inline TargetFunction sample_target(TargetClass cls, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, {1}));
  std::normal_distribution<float> normal(0.0f, 1.0f);
  switch (cls) {
    case TargetClass::Linear: {
      LinearTarget t;
      for (auto& v : t.w) v = normal(rng);
      return t;
    }
    case TargetClass::ConvLinear: {
      ConvLinearTarget t;
      for (auto& v : t.w) v = normal(rng);
      std::mt19937_64 krng(derive_seed(seed, {2}));
      t.kernel = orthogonal_kernel(krng);
      return t;
    }
    case TargetClass::TwoLayerCnn: {
      TwoLayerCnnTarget t;
      for (auto& v : t.kernel) v = normal(rng);
      for (auto& v : t.w) v = normal(rng);
      return t;
    }
    case TargetClass::FrozenVit: {
      Initializer init(derive_seed(seed, {3}));
      return FrozenVitTarget{std::make_shared<const VitEncoder<float>>(
          frozen_vit_config(), 1, init, /*trainable=*/false)};
    }
  }
  throw ContractError("invalid target class");
}

// Evaluates f on an already masked, normalized 8x8 image.
inline float eval_target(const TargetFunction& f, std::span<const float> x) {
  if (x.size() != kImagePixels)
    throw DimensionError("eval_target expects 64 pixels, got " + std::to_string(x.size()));
  constexpr auto side = static_cast<std::ptrdiff_t>(kImageSide);
  return std::visit(
      [&](const auto& t) -> float {
        using K = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<K, LinearTarget>) {
          double acc = 0;
          for (std::size_t i = 0; i < kImagePixels; ++i)
            acc += static_cast<double>(t.w[i]) * x[i];
          return static_cast<float>(acc);
        } else if constexpr (std::is_same_v<K, ConvLinearTarget>) {
          double acc = 0;
          for (std::ptrdiff_t r = 0; r < side; ++r)
            for (std::ptrdiff_t c = 0; c < side; ++c) {
              double conv = 0;
              for (std::ptrdiff_t i = 0; i < 3; ++i)
                for (std::ptrdiff_t j = 0; j < 3; ++j) {
                  const auto y = r + i - 1, xx = c + j - 1;
                  if (y < 0 || xx < 0 || y >= side || xx >= side) continue;
                  conv += static_cast<double>(t.kernel[static_cast<std::size_t>(i * 3 + j)]) *
                          x[static_cast<std::size_t>(y * side + xx)];
                }
              acc += static_cast<double>(t.w[static_cast<std::size_t>(r * side + c)]) * conv;
            }
          return static_cast<float>(acc);
        } else if constexpr (std::is_same_v<K, TwoLayerCnnTarget>) {
          double acc = 0;
          for (std::ptrdiff_t r = 0; r < 4; ++r)
            for (std::ptrdiff_t c = 0; c < 4; ++c) {
              double conv = 0;
              for (std::ptrdiff_t i = 0; i < 2; ++i)
                for (std::ptrdiff_t j = 0; j < 2; ++j)
                  conv += static_cast<double>(t.kernel[static_cast<std::size_t>(i * 2 + j)]) *
                          x[static_cast<std::size_t>((2 * r + i) * side + 2 * c + j)];
              const double act = conv > 0 ? conv : 0.0;
              acc += static_cast<double>(t.w[static_cast<std::size_t>(r * 4 + c)]) * act;
            }
          return static_cast<float>(acc);
        } else {
          Tensor<float> img({1, kImageSide, kImageSide},
                            std::vector<float>(x.begin(), x.end()));
          return (*t.net)(img).item();
        }
      },
      f);
}

// ---------------------------------------------------------------------------
// Prompt construction

// n distinct indices in [0, pool_size) in random order (Floyd's algorithm,
// then shuffled).
inline std::vector<std::size_t> sample_distinct(std::size_t pool_size, std::size_t n,
                                                std::mt19937_64& rng) {
  if (n > pool_size)
    throw DataError("need " + std::to_string(n) + " distinct images but the pool holds " +
                    std::to_string(pool_size));
  std::unordered_set<std::size_t> chosen;
  std::vector<std::size_t> out;
  out.reserve(n);
  for (std::size_t j = pool_size - n; j < pool_size; ++j) {
    std::uniform_int_distribution<std::size_t> pick(0, j);
    const std::size_t t = pick(rng);
    const std::size_t v = chosen.insert(t).second ? t : j;
    if (v == j) chosen.insert(j);
    out.push_back(v);
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

// Fills prompt row `row` from the given images (each 64 pixels, in order):
// masks each to d, labels it with f, zeroes slots from n on.
inline void fill_prompt_row(PromptBatch& prompt, std::size_t row,
                            std::span<const Image> images, const TargetFunction& f,
                            std::size_t d) {
  const std::size_t n = images.size();
  if (n == 0 || n > prompt.n_max)
    throw ContractError("prompt length " + std::to_string(n) + " outside [1, n_max=" +
                        std::to_string(prompt.n_max) + "]");
  for (std::size_t i = 0; i < prompt.n_max; ++i) {
    float* dst = prompt.image(row, i);
    if (i < n) {
      const Image masked = mask_image(images[i], d);
      std::copy(masked.begin(), masked.end(), dst);
      prompt.value(row, i) = eval_target(f, masked);
    } else {
      std::fill(dst, dst + kImagePixels, 0.0f);
      prompt.value(row, i) = 0.0f;
    }
  }
  prompt.valid_len[row] = n;
}

// Samples n images without replacement from `pool` (N x 64 floats) and
// writes one prompt row.
inline void build_prompt(PromptBatch& prompt, std::size_t row, std::span<const float> pool,
                         const TargetFunction& f, std::size_t d, std::size_t n,
                         std::mt19937_64& rng) {
  const std::size_t count = pool.size() / kImagePixels;
  if (count < n)
    throw DataError("prompt needs " + std::to_string(n) + " images, pool has " +
                    std::to_string(count));
  const auto idx = sample_distinct(count, n, rng);
  std::vector<Image> picked(n);
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(pool.data() + idx[i] * kImagePixels, kImagePixels, picked[i].begin());
  fill_prompt_row(prompt, row, picked, f, d);
}

}  // namespace icl
