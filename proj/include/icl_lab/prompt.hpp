#pragma once

#include <cstddef>
#include <vector>

namespace icl {

inline constexpr std::size_t kImageSide = 8;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;

// A batch of interleaved (image, value) prompts. Images are stored
// [batch x n_max x 1 x 8 x 8] and values [batch x n_max]; slots at or beyond
// valid_len[b] are zero and excluded from the loss.
struct PromptBatch {
  std::size_t batch = 0;
  std::size_t n_max = 0;
  std::size_t d = 0;
  std::vector<float> images;
  std::vector<float> values;
  std::vector<std::size_t> valid_len;

  static PromptBatch empty(std::size_t batch, std::size_t n_max, std::size_t d) {
    PromptBatch p;
    p.batch = batch;
    p.n_max = n_max;
    p.d = d;
    p.images.assign(batch * n_max * kImagePixels, 0.0f);
    p.values.assign(batch * n_max, 0.0f);
    p.valid_len.assign(batch, 0);
    return p;
  }

  float* image(std::size_t row, std::size_t slot) {
    return images.data() + (row * n_max + slot) * kImagePixels;
  }
  const float* image(std::size_t row, std::size_t slot) const {
    return images.data() + (row * n_max + slot) * kImagePixels;
  }
  float& value(std::size_t row, std::size_t slot) { return values[row * n_max + slot]; }
  float value(std::size_t row, std::size_t slot) const { return values[row * n_max + slot]; }

  std::size_t longest() const {
    std::size_t n = 0;
    for (auto v : valid_len) n = v > n ? v : n;
    return n;
  }
};

}  // namespace icl
