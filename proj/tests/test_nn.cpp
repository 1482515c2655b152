#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "icl_lab/nn.hpp"
#include "icl_lab/selftest.hpp"
#include "icl_lab/tasks.hpp"
#include "icl_lab/testing/oracles.hpp"
#include "icl_lab/train.hpp"

using namespace icl;
using icl::testing::random_tensor;

namespace {

ModelConfig tiny_vit_model() {
  ModelConfig cfg;
  cfg.decoder = {32, 2, 4, 82};
  cfg.encoder.kind = EncoderKind::Vit;
  cfg.encoder.n_layers = 1;
  cfg.encoder.n_heads = 2;
  cfg.encoder.patch_size = 4;
  cfg.encoder.width = 16;
  return cfg;
}

EncoderConfig vit_encoder_cfg() {
  EncoderConfig cfg;
  cfg.kind = EncoderKind::Vit;
  cfg.n_layers = 4;
  cfg.n_heads = 8;
  cfg.patch_size = 4;
  return cfg;
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b, std::size_t from = 0, std::size_t to = 0) {
  if (to == 0) to = a.size();
  for (std::size_t i = from; i < to; ++i)
    if (a.at(i) != b.at(i)) return false;
  return true;
}

}  // namespace

TEST(ConfigTest, DecoderDefaultsAreGpt2Small) {
  const DecoderConfig cfg;
  EXPECT_EQ(cfg.embed_dim, 256u);
  EXPECT_EQ(cfg.n_layers, 12u);
  EXPECT_EQ(cfg.n_heads, 8u);
  EXPECT_EQ(cfg.max_seq_len, 82u);
  EXPECT_EQ(cfg.max_pairs(), 41u);
  EXPECT_THROW((DecoderConfig{250, 12, 8, 82}.validate()), ConfigError);
}

TEST(ConfigTest, EncoderValidation) {
  auto cfg = vit_encoder_cfg();
  cfg.patch_size = 3;
  EXPECT_THROW(cfg.validate(256), ConfigError);
  cfg.patch_size = 4;
  cfg.n_heads = 7;
  EXPECT_THROW(cfg.validate(256), ConfigError);
  EncoderConfig cnn;
  cnn.kernel = 4;
  EXPECT_THROW(cnn.validate(256), ConfigError);
}

TEST(SinusoidalTest, ClosedFormEntries) {
  const auto pe = sinusoidal_pe<double>(5, 16);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(pe.at(2 * i), 0.0);
    EXPECT_EQ(pe.at(2 * i + 1), 1.0);
  }
  EXPECT_NEAR(pe.at(16), std::sin(1.0), 1e-15);
  EXPECT_NEAR(pe.at(16), 0.8415, 1e-4);
  // PE[3, 2i+1] = cos(3 / 10000^(2i/16)) at i = 2.
  EXPECT_NEAR(pe.at(3 * 16 + 5), std::cos(3.0 / std::pow(10000.0, 4.0 / 16.0)), 1e-15);
  EXPECT_THROW(sinusoidal_pe<double>(4, 7), ConfigError);
}

TEST(CnnEncoderTest, ZeroImageGivesZeroEmbedding) {
  Initializer init(1);
  CnnEncoder<float> enc(EncoderConfig{}, 256, init);
  const auto out = cnn_encode(enc, Tensor<float>::zeros({1, 8, 8}));
  ASSERT_EQ(out.shape(), (Shape{256}));
  for (float v : out.data()) EXPECT_EQ(v, 0.0f);
}

TEST(CnnEncoderTest, IdenticalImagesGiveIdenticalEmbeddings) {
  Initializer init(2);
  CnnEncoder<float> enc(EncoderConfig{}, 256, init);
  std::mt19937_64 rng(3);
  std::normal_distribution<float> normal;
  std::vector<float> px(64);
  for (auto& v : px) v = normal(rng);
  std::vector<float> two(px);
  two.insert(two.end(), px.begin(), px.end());
  const auto out = enc(Tensor<float>({2, 1, 8, 8}, two));
  ASSERT_EQ(out.shape(), (Shape{2, 256}));
  for (std::size_t i = 0; i < 256; ++i) EXPECT_EQ(out.at(i), out.at(256 + i));
  const auto single = enc(Tensor<float>({1, 8, 8}, px));
  ASSERT_EQ(single.shape(), (Shape{256}));
}

TEST(CnnEncoderTest, RejectsWrongShape) {
  Initializer init(4);
  CnnEncoder<float> enc(EncoderConfig{}, 256, init);
  EXPECT_THROW(enc(Tensor<float>::zeros({1, 4, 4})), DimensionError);
  EXPECT_THROW(enc(Tensor<float>::zeros({2, 3, 8, 8})), DimensionError);
}

TEST(VitEncoderTest, PatchCountAndShape) {
  const auto cfg = vit_encoder_cfg();
  EXPECT_EQ(cfg.patch_count(), 4u);
  auto two = cfg;
  two.patch_size = 2;
  EXPECT_EQ(two.patch_count(), 16u);
  Initializer init(5);
  VitEncoder<float> enc(cfg, 256, init);
  EXPECT_EQ(vit_encode(enc, Tensor<float>::zeros({1, 8, 8})).shape(), (Shape{256}));
}

TEST(VitEncoderTest, SwappingPatchesChangesEmbedding) {
  Initializer init(6);
  VitEncoder<double> enc(vit_encoder_cfg(), 256, init);
  std::mt19937_64 rng(7);
  auto img = random_tensor({1, 8, 8}, rng, false);
  std::vector<double> swapped(img.data().begin(), img.data().end());
  // Exchange the top-left and top-right 4x4 patches.
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) std::swap(swapped[r * 8 + c], swapped[r * 8 + c + 4]);
  const auto a = vit_encode(enc, img);
  const auto b = vit_encode(enc, Tensor<double>({1, 8, 8}, swapped));
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a.at(i) - b.at(i)));
  EXPECT_GT(diff, 1e-6);
}

TEST(VitEncoderTest, PatchifyOrder) {
  std::vector<float> px(64);
  for (std::size_t i = 0; i < 64; ++i) px[i] = static_cast<float>(i);
  const auto p = patchify(Tensor<float>({1, 1, 8, 8}, px), 4);
  ASSERT_EQ(p.shape(), (Shape{1, 4, 16}));
  // Patch 1 is the top-right block; its first row is pixels 4..7.
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(p.at(16 + j), static_cast<float>(4 + j));
  // Patch 2 starts at row 4, column 0.
  EXPECT_EQ(p.at(32), 32.0f);
}

TEST(DecoderTest, OutputsDependOnlyOnEarlierTokens) {
  Initializer init(8);
  Decoder<float> dec({64, 3, 4, 82}, init);
  std::mt19937_64 rng(9);
  std::normal_distribution<float> normal;
  const std::size_t len = 22;
  std::vector<float> tokens(len * 64);
  for (auto& v : tokens) v = normal(rng);
  const auto mask = AttentionMask::causal(len);
  const auto base = decoder_forward(dec, Tensor<float>({len, 64}, tokens), mask);
  for (std::size_t p = 0; p + 1 < len; ++p) {
    auto changed = tokens;
    for (std::size_t j = (p + 1) * 64; j < changed.size(); ++j) changed[j] += normal(rng);
    const auto out = decoder_forward(dec, Tensor<float>({len, 64}, changed), mask);
    EXPECT_TRUE(bit_equal(base, out, 0, (p + 1) * 64)) << "position " << p;
  }
}

TEST(DecoderTest, PaddedSuffixDoesNotAlterPrefix) {
  Initializer init(10);
  Decoder<float> dec({32, 2, 4, 82}, init);
  std::mt19937_64 rng(11);
  std::normal_distribution<float> normal;
  const std::size_t len = 12, valid = 7;
  std::vector<float> tokens(2 * len * 32);
  for (auto& v : tokens) v = normal(rng);
  const auto mask = AttentionMask::causal_padded(len, {valid, len});
  const auto base = dec(Tensor<float>({2, len, 32}, tokens), mask);
  auto changed = tokens;
  for (std::size_t j = valid * 32; j < len * 32; ++j) changed[j] = 100.0f * normal(rng);
  const auto out = dec(Tensor<float>({2, len, 32}, changed), mask);
  EXPECT_TRUE(bit_equal(base, out, 0, valid * 32));
  EXPECT_TRUE(bit_equal(base, out, len * 32, 2 * len * 32));
}

TEST(DecoderTest, AttentionRowsSumToOne) {
  Initializer init(12);
  Decoder<float> dec({32, 2, 4, 82}, init);
  dec.set_capture_attention(true);
  std::mt19937_64 rng(13);
  std::normal_distribution<float> normal;
  const std::size_t len = 10;
  std::vector<float> tokens(len * 32);
  for (auto& v : tokens) v = normal(rng);
  dec(Tensor<float>({len, 32}, tokens), AttentionMask::causal(len));
  for (std::size_t layer = 0; layer < 2; ++layer) {
    const auto& probs = dec.attention_probs(layer);
    ASSERT_EQ(probs.shape(), (Shape{1, 4, len, len}));
    for (std::size_t row = 0; row < 4 * len; ++row) {
      double total = 0;
      for (std::size_t c = 0; c < len; ++c) {
        const float p = probs.at(row * len + c);
        if (c > row % len) { EXPECT_EQ(p, 0.0f); }
        total += p;
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(DecoderTest, OverlongSequenceIsCapacityError) {
  Initializer init(14);
  Decoder<float> dec({32, 1, 4, 10}, init);
  EXPECT_THROW(dec(Tensor<float>::zeros({11, 32}), AttentionMask::causal(11)), CapacityError);
}

class IclModelTest : public ::testing::Test {
 protected:
  static std::pair<Tensor<float>, Tensor<float>> random_prompt(std::size_t batch, std::size_t n,
                                                               std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal;
    std::vector<float> images(batch * n * 64), values(batch * n);
    for (auto& v : images) v = normal(rng);
    for (auto& v : values) v = normal(rng);
    return {Tensor<float>({batch, n, 1, 8, 8}, images), Tensor<float>({batch, n}, values)};
  }
};

TEST_F(IclModelTest, PredictionIgnoresCurrentAndLaterValues) {
  IclModel<float> model(e1_tiny_model(), 15);
  const std::size_t n = 11;
  auto [images, values] = random_prompt(2, n, 16);
  const std::vector<std::size_t> valid(2, n);
  const auto base = model.forward(images, values, valid);
  std::mt19937_64 rng(17);
  std::normal_distribution<float> normal;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<float> v2({2, n}, std::vector<float>(values.data().begin(), values.data().end()));
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t j = i; j < n; ++j) v2.mutable_data()[b * n + j] += 10 * normal(rng);
    const auto out = model.forward(images, v2, valid);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t k = 0; k <= i; ++k) EXPECT_EQ(out.at(b * n + k), base.at(b * n + k));
  }
}

TEST_F(IclModelTest, PredictionIgnoresLaterImages) {
  IclModel<float> model(e1_tiny_model(), 18);
  const std::size_t n = 11;
  auto [images, values] = random_prompt(2, n, 19);
  const std::vector<std::size_t> valid(2, n);
  const auto base = model.forward(images, values, valid);
  std::mt19937_64 rng(20);
  std::normal_distribution<float> normal;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    Tensor<float> im2(images.shape(), std::vector<float>(images.data().begin(), images.data().end()));
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t j = i + 1; j < n; ++j)
        for (std::size_t p = 0; p < 64; ++p) im2.mutable_data()[(b * n + j) * 64 + p] += normal(rng);
    const auto out = model.forward(im2, values, valid);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t k = 0; k <= i; ++k) EXPECT_EQ(out.at(b * n + k), base.at(b * n + k));
    // The perturbed positions do move.
    EXPECT_NE(out.at(i + 1), base.at(i + 1));
  }
}

TEST_F(IclModelTest, OutputShapeAcrossCurriculum) {
  IclModel<float> model(tiny_vit_model(), 21);
  for (std::size_t d = 2; d <= 8; ++d) {
    const std::size_t n = 5 * d + 1;
    auto [images, values] = random_prompt(2, n, 22 + d);
    const auto out = model.forward(images, values, {n, n});
    EXPECT_EQ(out.shape(), (Shape{2, n}));
  }
}

TEST_F(IclModelTest, IclForwardOnPromptBatch) {
  IclModel<float> model(e1_tiny_model(), 30);
  auto prompt = PromptBatch::empty(3, 11, 2);
  std::mt19937_64 rng(31);
  const auto pool = random_tensor({60, 64}, rng, false);
  std::vector<float> px(pool.data().begin(), pool.data().end());
  for (std::size_t b = 0; b < 3; ++b)
    build_prompt(prompt, b, px, sample_target(TargetClass::Linear, b), 2, 11, rng);
  EXPECT_EQ(icl_forward(model, prompt).shape(), (Shape{3, 11}));
}

TEST_F(IclModelTest, TooManyPairsIsCapacityError) {
  IclModel<float> model(e1_tiny_model(), 32);
  auto [images, values] = random_prompt(1, 42, 33);
  EXPECT_THROW(model.forward(images, values, {42}), CapacityError);
}

TEST_F(IclModelTest, SameSeedSameOutputs) {
  IclModel<float> a(e1_tiny_model(), 34), b(e1_tiny_model(), 34);
  auto [images, values] = random_prompt(2, 11, 35);
  EXPECT_TRUE(bit_equal(a.forward(images, values, {11, 11}), b.forward(images, values, {11, 11})));
}

TEST_F(IclModelTest, ParameterCountIsAFunctionOfConfig) {
  const auto cfg = e1_tiny_model();
  const auto count = parameter_count(IclModel<float>(cfg, 1).parameters());
  EXPECT_EQ(count, parameter_count(IclModel<float>(cfg, 2).parameters()));
  // Hand count: conv 1->8 and 8->8 (3x3 + bias), head 512->64, value 1->64,
  // positions 82x64, 3 blocks, final norm, readout 64->1.
  const std::size_t d = 64;
  const std::size_t encoder = (8 * 9 + 8) + (8 * 8 * 9 + 8) + (512 * d + d);
  const std::size_t block = 2 * (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * 4 * d + 4 * d) +
                            (4 * d * d + d);
  const std::size_t expected = encoder + (d + d) + 82 * d + 3 * block + 2 * d + (d + 1);
  EXPECT_EQ(count, expected);
}

TEST_F(IclModelTest, EveryParameterReceivesGradient) {
  for (const auto& cfg : {e1_tiny_model(), tiny_vit_model()}) {
    IclModel<float> model(cfg, 36);
    auto [images, values] = random_prompt(2, 11, 37);
    backward(weighted_mse(model.forward(images, values, {11, 11}), values, 11));
    for (const auto& p : model.parameters()) {
      EXPECT_TRUE(p.tensor.has_grad()) << p.name;
      double norm = 0;
      for (float g : p.tensor.grad()) norm += std::abs(g);
      EXPECT_GT(norm, 0.0) << p.name;
    }
  }
}

TEST_F(IclModelTest, FullModelGradientCheck) {
  const auto outcome = model_gradient_check(10, 3);
  EXPECT_TRUE(outcome.ok) << outcome.detail;
}
