#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "icl_lab/baselines.hpp"
#include "icl_lab/testing/oracles.hpp"

using namespace icl;

namespace {

Image gaussian_image(std::mt19937_64& rng, std::size_t d = 8) {
  std::normal_distribution<float> normal;
  Image x;
  for (auto& v : x) v = normal(rng);
  return mask_image(x, d);
}

Image basis(std::size_t i, float scale = 1.0f) {
  Image x{};
  x[i] = scale;
  return x;
}

// Support of m noiseless linear examples in the top-left d x d block.
SupportSet linear_support(const TargetFunction& f, std::size_t d, std::size_t m,
                          std::mt19937_64& rng) {
  SupportSet s;
  s.d = d;
  for (std::size_t i = 0; i < m; ++i) {
    const auto x = gaussian_image(rng, d);
    s.add(x, eval_target(f, x));
  }
  return s;
}

}  // namespace

TEST(LeastSquaresTest, IdentitySystemRecoversWeights) {
  SupportSet s;
  for (std::size_t i = 0; i < 64; ++i) s.add(basis(i), static_cast<float>(i) - 30.0f);
  for (std::size_t i = 0; i < 64; ++i)
    EXPECT_NEAR(least_squares(s, basis(i)).value, static_cast<double>(i) - 30.0, 1e-9);
}

TEST(LeastSquaresTest, ExactRecoveryWithFullRankSupport) {
  std::mt19937_64 rng(1);
  for (std::size_t d : {2u, 3u, 5u}) {
    for (int t = 0; t < 10; ++t) {
      const auto f = sample_target(TargetClass::Linear, 100 * d + t);
      for (std::size_t m : {d * d, d * d + 3, 5 * d + 1}) {
        if (m < d * d) continue;
        const auto s = linear_support(f, d, m, rng);
        const auto q = gaussian_image(rng, d);
        const double err = least_squares(s, q).value - eval_target(f, q);
        EXPECT_LT(err * err, 1e-8) << "d=" << d << " m=" << m;
      }
    }
  }
}

TEST(LeastSquaresTest, SingleExampleUsesPseudoInverse) {
  SupportSet s;
  s.add(basis(0), 2.0f);
  EXPECT_NEAR(least_squares(s, basis(0)).value, 2.0, 1e-12);
  EXPECT_NEAR(least_squares(s, basis(1)).value, 0.0, 1e-12);
  // x = (1, 1), y = 2 -> minimal-norm w = (1, 1).
  SupportSet t;
  Image x{};
  x[0] = x[1] = 1.0f;
  t.add(x, 2.0f);
  EXPECT_NEAR(least_squares(t, basis(0)).value, 1.0, 1e-12);
}

TEST(LeastSquaresTest, EmptySupportIsFlagged) {
  const auto p = least_squares(SupportSet{}, basis(0));
  EXPECT_TRUE(p.empty_support);
  EXPECT_EQ(p.value, 0.0);
  EXPECT_TRUE(knn3(SupportSet{}, basis(0)).empty_support);
  EXPECT_TRUE(mean_predict(SupportSet{}).empty_support);
}

TEST(LeastSquaresTest, InvariantToSupportOrder) {
  std::mt19937_64 rng(2);
  const auto f = sample_target(TargetClass::Linear, 3);
  const auto s = linear_support(f, 3, 6, rng);
  const auto q = gaussian_image(rng, 3);
  std::vector<std::size_t> order{5, 2, 0, 4, 1, 3};
  SupportSet shuffled;
  for (auto i : order) shuffled.add(s.x(i), s.ys[i]);
  EXPECT_NEAR(least_squares(s, q).value, least_squares(shuffled, q).value, 1e-9);
}

TEST(LeastSquaresTest, RejectsWrongQuerySize) {
  SupportSet s;
  s.add(basis(0), 1.0f);
  volatile std::size_t bad = 10;  // opaque size keeps -Wstringop-overread quiet
  std::vector<float> q(bad);
  EXPECT_THROW(least_squares(s, q), DimensionError);
  EXPECT_THROW(knn3(s, q), DimensionError);
  EXPECT_THROW(s.add(q, 1.0f), DimensionError);
}

TEST(KnnTest, HandExamples) {
  SupportSet s;
  s.add(basis(0, 0.0f), 1.0f);  // origin
  s.add(basis(0, 1.0f), 2.0f);
  s.add(basis(0, 2.0f), 3.0f);
  s.add(basis(0, 10.0f), 100.0f);
  EXPECT_DOUBLE_EQ(knn3(s, basis(0, 0.5f)).value, 2.0);
  EXPECT_DOUBLE_EQ(knn3(s, basis(0, 9.0f)).value, (100.0 + 3.0 + 2.0) / 3.0);
}

TEST(KnnTest, TiesGoToLowerIndex) {
  SupportSet s;
  s.add(basis(0, 1.0f), 1.0f);
  s.add(basis(0, -1.0f), 2.0f);
  s.add(basis(1, 1.0f), 4.0f);
  s.add(basis(1, -1.0f), 8.0f);
  // All four are at distance 1 from the origin.
  EXPECT_DOUBLE_EQ(knn3(s, Image{}).value, (1.0 + 2.0 + 4.0) / 3.0);
}

TEST(KnnTest, MatchesSortOracleOnRandomInstances) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> size(1, 40);
  std::uniform_int_distribution<int> coarse(-2, 2);
  for (int t = 0; t < 100; ++t) {
    const std::size_t m = size(rng);
    SupportSet s;
    std::normal_distribution<float> normal;
    for (std::size_t i = 0; i < m; ++i) {
      Image x{};
      // Coarse values make distance ties common.
      for (std::size_t j = 0; j < 4; ++j) x[j] = static_cast<float>(coarse(rng));
      s.add(x, normal(rng));
    }
    Image q{};
    for (std::size_t j = 0; j < 4; ++j) q[j] = static_cast<float>(coarse(rng));
    const double ref = icl::testing::knn3_sort(s.xs, s.ys, {q.begin(), q.end()});
    EXPECT_DOUBLE_EQ(knn3(s, q).value, ref) << "instance " << t;
  }
}

TEST(KnnTest, SmallSupportEqualsMean) {
  std::mt19937_64 rng(5);
  for (std::size_t m = 1; m <= 3; ++m) {
    SupportSet s;
    std::normal_distribution<float> normal;
    for (std::size_t i = 0; i < m; ++i) s.add(gaussian_image(rng), normal(rng));
    EXPECT_DOUBLE_EQ(knn3(s, gaussian_image(rng)).value, mean_predict(s).value);
  }
}

TEST(KnnTest, PredictionWithinLabelRange) {
  std::mt19937_64 rng(6);
  std::normal_distribution<float> normal;
  for (int t = 0; t < 50; ++t) {
    SupportSet s;
    for (int i = 0; i < 12; ++i) s.add(gaussian_image(rng), normal(rng));
    const double p = knn3(s, gaussian_image(rng)).value;
    EXPECT_GE(p, *std::min_element(s.ys.begin(), s.ys.end()));
    EXPECT_LE(p, *std::max_element(s.ys.begin(), s.ys.end()));
  }
}

TEST(MeanTest, Examples) {
  SupportSet s;
  s.add(basis(0), 1.0f);
  s.add(basis(1), 2.0f);
  s.add(basis(2), 6.0f);
  EXPECT_DOUBLE_EQ(mean_predict(s).value, 3.0);
  SupportSet one;
  one.add(basis(5), -4.5f);
  EXPECT_DOUBLE_EQ(mean_predict(one).value, -4.5);
}

TEST(FreshModelTest, ZeroTargetsAreFitQuickly) {
  std::mt19937_64 rng(7);
  SupportSet s;
  for (int i = 0; i < 11; ++i) s.add(gaussian_image(rng, 2), 0.0f);
  FreshOptions opts;
  opts.steps = 300;
  for (auto kind : {FreshKind::Mlp, FreshKind::Cnn, FreshKind::Vit}) {
    const auto p = gd_train_fresh(kind, s, opts);
    EXPECT_LT(p.final_train_mse, 1e-4) << to_string(kind);
  }
}

TEST(FreshModelTest, MlpFitsFortyOneLinearPoints) {
  std::mt19937_64 rng(8);
  const auto f = sample_target(TargetClass::Linear, 9);
  const auto s = linear_support(f, 8, 41, rng);
  FreshOptions opts;  // 5000 steps at lr 1e-3
  opts.seed = 1;
  const auto p = gd_train_fresh(FreshKind::Mlp, s, opts);
  EXPECT_LT(p.final_train_mse, 1e-2);
  // The predictor is the trained model.
  double sq = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double e = p(s.x(i)) - s.ys[i];
    sq += e * e;
  }
  EXPECT_NEAR(sq / s.size(), p.final_train_mse, 1e-5 * std::max(1.0, p.final_train_mse));
}

TEST(FreshModelTest, DeterministicPerSeed) {
  std::mt19937_64 rng(10);
  const auto f = sample_target(TargetClass::Linear, 11);
  const auto s = linear_support(f, 4, 12, rng);
  FreshOptions opts;
  opts.steps = 50;
  opts.seed = 5;
  const auto q = gaussian_image(rng, 4);
  for (auto kind : {FreshKind::Mlp, FreshKind::Cnn, FreshKind::Vit}) {
    const auto a = gd_train_fresh(kind, s, opts), b = gd_train_fresh(kind, s, opts);
    EXPECT_EQ(a.final_train_mse, b.final_train_mse);
    EXPECT_EQ(a(q), b(q));
    auto other = opts;
    other.seed = 6;
    EXPECT_NE(gd_train_fresh(kind, s, other)(q), a(q)) << to_string(kind);
  }
}

TEST(FreshModelTest, EmptySupportIsContractError) {
  EXPECT_THROW(gd_train_fresh(FreshKind::Mlp, SupportSet{}), ContractError);
}

TEST(FreshModelTest, ArchitectureSizes) {
  const FreshModel mlp(FreshKind::Mlp, 0), cnn(FreshKind::Cnn, 0);
  EXPECT_EQ(parameter_count(mlp.parameters()), (64 * 64 + 64) + (64 * 64 + 64) + (64 + 1));
  EXPECT_EQ(parameter_count(cnn.parameters()), 4u + 1u + 16u + 1u);
  for (const auto& p : FreshModel(FreshKind::Vit, 0).parameters())
    EXPECT_TRUE(p.tensor.requires_grad()) << p.name;
}
