#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "icl_lab/train.hpp"

using namespace icl;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config(std::uint64_t steps, std::size_t batch = 64) {
  auto cfg = experiment_preset(Experiment::E1);
  apply_config(cfg, read_config_file(ICL_LAB_CONFIG_DIR "/e1_tiny.cfg"));
  cfg.total_steps = steps;
  cfg.batch_size = batch;
  cfg.checkpoint_every = 0;
  cfg.synthetic_images = 400;
  cfg.seed = 3;
  return cfg;
}

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() /
         ("icl_train_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) +
          "_" + name);
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void dump(const fs::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void expect_same_params(const Checkpoint& a, const Checkpoint& b) {
  ASSERT_EQ(a.params.size(), b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    EXPECT_EQ(a.params[i].name, b.params[i].name);
    EXPECT_EQ(a.params[i].shape, b.params[i].shape);
    EXPECT_EQ(a.params[i].data, b.params[i].data) << a.params[i].name;
  }
}

}  // namespace

TEST(LossTest, EqualInputsGiveZero) {
  Tensor<float> p({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(weighted_mse(p, p, 3).item(), 0.0f);
}

TEST(LossTest, HandExample) {
  Tensor<double> p({1, 2}, {1, 1}), t({1, 2}, {0, 0});
  EXPECT_DOUBLE_EQ(weighted_mse(p, t, 2).item(), 2.5);
}

TEST(LossTest, WeightsForFourAreExact) {
  const auto w = loss_weights<double>(4, 4);
  EXPECT_EQ(w, (std::vector<double>{0.25, 1.0, 2.25, 4.0}));
  const auto wf = loss_weights<float>(4, 6);
  EXPECT_EQ(wf, (std::vector<float>{0.25f, 1.0f, 2.25f, 4.0f, 0.0f, 0.0f}));
}

TEST(LossTest, LastWeightIsFourAndHalfwayRatioIsFour) {
  for (std::size_t n = 1; n <= 41; ++n) {
    const auto w = loss_weights<double>(n, n);
    EXPECT_DOUBLE_EQ(w[n - 1], 4.0);
    if (n % 2 == 0) { EXPECT_DOUBLE_EQ(w[n - 1] / w[n / 2 - 1], 4.0); }
    for (std::size_t k = 1; k < n; ++k) EXPECT_LT(w[k - 1], w[k]);
  }
}

TEST(LossTest, UnitWeightsGivePlainMseBitExactly) {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> normal;
  for (std::size_t n : {1u, 4u, 11u, 41u}) {
    std::vector<float> a(8 * n), b(8 * n);
    for (auto& v : a) v = normal(rng);
    for (auto& v : b) v = normal(rng);
    Tensor<float> p({8, n}, a), t({8, n}, b);
    const auto weighted = weighted_mse(p, t, std::vector<std::size_t>(8, n), true).item();
    EXPECT_EQ(weighted, mse(p, t).item());
  }
}

TEST(LossTest, PaddingSlotsGetZeroGradient) {
  Tensor<double> p({2, 5}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, true);
  Tensor<double> t({2, 5}, {0, 0, 0, 9, 9, 0, 0, 0, 0, 0});
  backward(weighted_mse(p, t, {3, 5}));
  const auto g = p.grad();
  EXPECT_EQ(g[3], 0.0);
  EXPECT_EQ(g[4], 0.0);
  for (std::size_t i : {0u, 1u, 2u, 5u, 9u}) EXPECT_NE(g[i], 0.0);
  // d/dp of w_k (p - t)^2 / total, weights for n = 3 on row 0.
  EXPECT_DOUBLE_EQ(g[2], 2.0 * 4.0 * 3.0 / 8.0);
}

TEST(LossTest, ShapeMismatchIsDimensionError) {
  auto a = Tensor<float>::zeros({2, 3}), b = Tensor<float>::zeros({3, 2});
  EXPECT_THROW(weighted_mse(a, b, 2), DimensionError);
  EXPECT_THROW(weighted_mse(a, a, std::vector<std::size_t>{3}), DimensionError);
  EXPECT_THROW(weighted_mse(a, a, 4), DimensionError);
}

TEST(AdamTest, ZeroGradientLeavesParametersButAdvancesTime) {
  Tensor<double> w({3}, {1, -2, 3}, true);
  w.mutable_grad();  // allocated, all zero
  AdamState<double> st;
  adam_step<double>({{"w", w}}, st);
  EXPECT_EQ(st.t, 1u);
  EXPECT_EQ(std::vector<double>(w.data().begin(), w.data().end()), (std::vector<double>{1, -2, 3}));
}

TEST(AdamTest, FirstStepMovesByLearningRate) {
  Tensor<double> w({4}, {0, 0, 0, 0}, true);
  const std::vector<double> g{3.0, -0.5, 100.0, -1e-2};
  std::copy(g.begin(), g.end(), w.mutable_grad().begin());
  AdamState<double> st;
  st.lr = 1e-3;
  adam_step<double>({{"w", w}}, st);
  for (std::size_t i = 0; i < 4; ++i) {
    const double delta = std::abs(w.at(i));
    EXPECT_GE(delta, 0.99 * st.lr);
    EXPECT_LE(delta, st.lr);
    EXPECT_EQ(std::signbit(w.at(i)), g[i] > 0);
  }
  for (double v : w.grad()) EXPECT_EQ(v, 0.0);
}

TEST(AdamTest, QuadraticTrajectoryMatchesScalarSimulation) {
  Tensor<double> w({1}, {1.0}, true);
  AdamState<double> st;
  st.lr = 0.1;
  double sw = 1.0, m = 0.0, v = 0.0;
  bool crossed = false;
  double prev = 1.0;
  for (int t = 1; t <= 100; ++t) {
    backward(sum(square(w)));
    adam_step<double>({{"w", w}}, st);
    const double g = 2.0 * sw;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t)), vhat = v / (1.0 - std::pow(0.999, t));
    sw -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    ASSERT_NEAR(w.at(0), sw, 1e-12 * std::max(1.0, std::abs(sw))) << "step " << t;
    // |w| shrinks every step until the iterate first overshoots zero.
    crossed = crossed || w.at(0) <= 0.0;
    if (!crossed) {
      EXPECT_LT(std::abs(w.at(0)), prev) << "step " << t;
      prev = std::abs(w.at(0));
    }
  }
  EXPECT_LT(std::abs(w.at(0)), 0.5);
}

TEST(AdamTest, MissingGradientIsContractError) {
  Tensor<double> w({2}, {1, 2}, true);
  AdamState<double> st;
  EXPECT_THROW(adam_step<double>({{"w", w}}, st), ContractError);
}

TEST(AdamTest, ClipScalesJointNorm) {
  Tensor<double> a({1}, {0}, true), b({1}, {0}, true);
  a.mutable_grad()[0] = 3;
  b.mutable_grad()[0] = 4;
  EXPECT_DOUBLE_EQ(clip_grad_norm<double>({{"a", a}, {"b", b}}, 1.0), 5.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-15);
}

TEST(TrainLoopTest, HundredStepSmokeRun) {
  const auto cfg = tiny_config(100);
  const auto pool = load_pool(cfg);
  const auto ckpt = train_loop(cfg, pool);
  ASSERT_EQ(ckpt.history.size(), 100u);
  for (std::size_t i = 0; i < 100; ++i) {
    EXPECT_TRUE(std::isfinite(ckpt.history[i].loss));
    EXPECT_EQ(ckpt.history[i].step, i);
    EXPECT_EQ(ckpt.history[i].d, 2u);
    EXPECT_EQ(ckpt.history[i].n, 11u);
  }
  EXPECT_EQ(ckpt.step, 100u);
  EXPECT_EQ(ckpt.adam_t, 100u);
}

TEST(TrainLoopTest, CurriculumTraceOverTwelveThousandSteps) {
  auto cfg = tiny_config(12000, 1);
  cfg.fixed_d = 0;
  const auto pool = load_pool(cfg);
  Trainer trainer(cfg, pool);
  for (std::uint64_t s = 0; s < 12000; ++s) {
    const std::size_t d = s < 5000 ? 2 : s < 10000 ? 3 : 4;
    const auto cur = curriculum_for(cfg, s);
    ASSERT_EQ(cur.d, d) << s;
    ASSERT_EQ(cur.n, 5 * d + 1) << s;
  }
  for (std::uint64_t s : {0ull, 4999ull, 5000ull, 9999ull, 10000ull, 11999ull}) {
    const auto batch = trainer.batch_for(s);
    EXPECT_EQ(batch.d, curriculum_for(cfg, s).d);
    EXPECT_EQ(batch.valid_len[0], curriculum_for(cfg, s).n);
  }
}

TEST(TrainLoopTest, CheckpointHookCadence) {
  auto cfg = tiny_config(5, 4);
  cfg.checkpoint_every = 2;
  const auto pool = load_pool(cfg);
  std::vector<std::uint64_t> seen;
  std::size_t steps = 0;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](const Checkpoint& c) { seen.push_back(c.step); };
  hooks.on_step = [&](const LossRecord&) { ++steps; };
  train_loop(cfg, pool, hooks);
  EXPECT_EQ(seen, (std::vector<std::uint64_t>{2, 4, 5}));
  EXPECT_EQ(steps, 5u);
}

TEST(TrainLoopTest, SameSeedSameHistory) {
  const auto cfg = tiny_config(8, 8);
  const auto pool = load_pool(cfg);
  const auto a = train_loop(cfg, pool), b = train_loop(cfg, pool);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].loss, b.history[i].loss);
  expect_same_params(a, b);
  auto other = cfg;
  other.seed = 4;
  EXPECT_NE(train_loop(other, load_pool(other)).history[0].loss, a.history[0].loss);
}

TEST(TrainLoopTest, ResumeReproducesDirectRunBitExactly) {
  const auto full_cfg = tiny_config(6, 8);
  auto half_cfg = full_cfg;
  half_cfg.total_steps = 3;
  const auto pool = load_pool(full_cfg);
  const auto direct = train_loop(full_cfg, pool);
  const auto half = train_loop(half_cfg, pool);
  const auto path = temp_path("half.bin");
  save_checkpoint(half, path);
  const auto loaded = load_checkpoint(path);
  fs::remove(path);
  const auto resumed = train_loop(full_cfg, pool, {}, &loaded);
  ASSERT_EQ(resumed.history.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(resumed.history[i].loss, direct.history[i].loss) << i;
  expect_same_params(resumed, direct);
  EXPECT_EQ(resumed.adam_m, direct.adam_m);
  EXPECT_EQ(resumed.adam_v, direct.adam_v);
}

TEST(TrainLoopTest, ResumeRejectsDifferentConfig) {
  auto cfg = tiny_config(2, 4);
  const auto pool = load_pool(cfg);
  const auto ckpt = train_loop(cfg, pool);
  auto other = cfg;
  other.total_steps = 4;
  other.lr = 1e-3;
  EXPECT_THROW(train_loop(other, pool, {}, &ckpt), ConfigError);
}

TEST(TrainLoopTest, NonFinitePoolAbortsWithDiagnostics) {
  const auto cfg = tiny_config(3, 4);
  auto pool = load_pool(cfg);
  std::fill(pool.images.begin(), pool.images.end(), std::nanf(""));
  try {
    train_loop(cfg, pool);
    FAIL() << "expected TrainingDiverged";
  } catch (const TrainingDiverged& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("d=2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("lr=0.0001"), std::string::npos) << msg;
  }
}

TEST(TrainLoopTest, PoolTooSmallIsDataError) {
  auto cfg = tiny_config(2, 4);
  cfg.fixed_d = 0;
  cfg.total_steps = 40000;  // reaches d = 8, n = 41
  cfg.synthetic_images = 50;
  EXPECT_THROW(train_loop(cfg, load_pool(cfg)), DataError);
}

TEST(CheckpointTest, RoundTripIsBitExact) {
  const auto cfg = tiny_config(3, 4);
  const auto ckpt = train_loop(cfg, load_pool(cfg));
  const auto path = temp_path("rt.bin");
  save_checkpoint(ckpt, path);
  const auto back = load_checkpoint(path);
  fs::remove(path);
  EXPECT_EQ(to_config_text(back.config), to_config_text(ckpt.config));
  EXPECT_EQ(back.step, 3u);
  EXPECT_EQ(back.curriculum.d, ckpt.curriculum.d);
  EXPECT_EQ(back.curriculum.n, ckpt.curriculum.n);
  EXPECT_EQ(back.adam_t, ckpt.adam_t);
  expect_same_params(back, ckpt);
  EXPECT_EQ(back.adam_m, ckpt.adam_m);
  EXPECT_EQ(back.adam_v, ckpt.adam_v);
  ASSERT_EQ(back.history.size(), ckpt.history.size());
  for (std::size_t i = 0; i < back.history.size(); ++i)
    EXPECT_EQ(back.history[i].loss, ckpt.history[i].loss);

  // The restored model reproduces the trained one's predictions.
  const auto model = restore_model(back);
  const auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    EXPECT_TRUE(std::equal(params[i].tensor.data().begin(), params[i].tensor.data().end(),
                           ckpt.params[i].data.begin()));
}

class CorruptCheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto cfg = tiny_config(1, 2);
    path_ = temp_path("c.bin");
    save_checkpoint(train_loop(cfg, load_pool(cfg)), path_);
    bytes_ = slurp(path_);
  }
  void TearDown() override { fs::remove(path_); }
  fs::path path_;
  std::vector<char> bytes_;
};

TEST_F(CorruptCheckpointTest, BadMagicIsFormatError) {
  bytes_[0] = 'X';
  dump(path_, bytes_);
  EXPECT_THROW(load_checkpoint(path_), FormatError);
}

TEST_F(CorruptCheckpointTest, BadVersionIsFormatError) {
  bytes_[8] = 9;
  dump(path_, bytes_);
  try {
    load_checkpoint(path_);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST_F(CorruptCheckpointTest, EditedConfigFailsDigest) {
  bytes_[8 + 4 + 8 + 8 + 3] ^= 0x20;  // inside the config text
  dump(path_, bytes_);
  EXPECT_THROW(load_checkpoint(path_), FormatError);
}

TEST_F(CorruptCheckpointTest, TruncationIsIoError) {
  for (std::size_t keep : {std::size_t{4}, std::size_t{30}, bytes_.size() / 2, bytes_.size() - 1}) {
    dump(path_, std::vector<char>(bytes_.begin(), bytes_.begin() + static_cast<std::ptrdiff_t>(keep)));
    EXPECT_THROW(load_checkpoint(path_), IoError) << keep;
  }
}

TEST(CheckpointTest, MissingFileIsIoError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt.bin"), IoError);
}

TEST(LossCsvTest, ColumnsAndValues) {
  const std::vector<LossRecord> hist{{0, 2, 11, 1.5}, {1, 3, 16, 0.125}};
  const auto path = temp_path("loss.csv");
  write_loss_csv(hist, path);
  std::ifstream in(path);
  std::string header, a, b;
  std::getline(in, header);
  std::getline(in, a);
  std::getline(in, b);
  fs::remove(path);
  EXPECT_EQ(header, "step,d,n,loss");
  EXPECT_EQ(a, "0,2,11,1.5");
  EXPECT_EQ(b, "1,3,16,0.125");
  EXPECT_THROW(write_loss_csv(hist, "/nonexistent/dir/loss.csv"), IoError);
}

TEST(ConfigFileTest, PresetsFollowTheTables) {
  const auto e1 = experiment_preset(Experiment::E1);
  EXPECT_EQ(e1.model.encoder.kind, EncoderKind::Cnn);
  EXPECT_EQ(e1.lr, 1e-4);
  EXPECT_EQ(e1.batch_size, 64u);
  EXPECT_EQ(e1.k_mult, 5u);
  EXPECT_EQ(e1.step_per_stage, 5000u);
  EXPECT_EQ(e1.model.decoder.embed_dim, 256u);
  EXPECT_EQ(e1.model.decoder.n_layers, 12u);
  EXPECT_EQ(e1.model.decoder.n_heads, 8u);
  const auto e2 = experiment_preset(Experiment::E2);
  EXPECT_EQ(e2.model.encoder.kind, EncoderKind::Vit);
  EXPECT_EQ(e2.model.encoder.n_heads, 8u);
  EXPECT_EQ(e2.target, TargetClass::Linear);
  EXPECT_EQ(experiment_preset(Experiment::E3).target, TargetClass::TwoLayerCnn);
  const auto e4 = experiment_preset(Experiment::E4);
  EXPECT_EQ(e4.target, TargetClass::FrozenVit);
  EXPECT_EQ(e4.lr, 1e-5);
  for (auto e : {Experiment::E1, Experiment::E2, Experiment::E3, Experiment::E4}) {
    const auto cfg = experiment_preset(e);
    EXPECT_NO_THROW(cfg.validate());
    EXPECT_EQ(cfg.grad_clip, 0.0);
    EXPECT_EQ(cfg.warmup_steps, 0u);
  }
}

TEST(ConfigFileTest, TextRoundTrip) {
  auto cfg = tiny_config(123, 7);
  cfg.lr = 3.3e-4;
  cfg.grad_clip = 1.5;
  TrainConfig back = experiment_preset(Experiment::E2);
  apply_config(back, parse_key_values(to_config_text(cfg)));
  EXPECT_EQ(to_config_text(back), to_config_text(cfg));
  EXPECT_EQ(config_digest(back), config_digest(cfg));
  EXPECT_EQ(back.lr, 3.3e-4);
}

TEST(ConfigFileTest, ErrorsNameTheKey) {
  auto cfg = experiment_preset(Experiment::E1);
  auto message = [&](const std::string& text) {
    try {
      apply_config(cfg, parse_key_values(text));
      cfg.validate();
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message("bogus = 1").find("bogus"), std::string::npos);
  EXPECT_NE(message("lr = fast").find("lr"), std::string::npos);
  EXPECT_NE(message("batch_size = -3").find("batch_size"), std::string::npos);
  EXPECT_NE(message("encoder.kind = rnn").find("encoder.kind"), std::string::npos);
  EXPECT_NE(message("target_class = quadratic").find("target_class"), std::string::npos);
  cfg = experiment_preset(Experiment::E1);
  EXPECT_NE(message("lr = 0").find("lr"), std::string::npos);
  cfg = experiment_preset(Experiment::E1);
  EXPECT_NE(message("decoder.max_seq_len = 40").find("decoder.max_seq_len"), std::string::npos);
  EXPECT_THROW(parse_key_values("no equals sign"), ConfigError);
}

TEST(ConfigFileTest, CommentsAndWhitespace) {
  const auto kv = parse_key_values("# c\n\n  lr = 0.5   # trailing\nseed=9\n");
  ASSERT_EQ(kv.size(), 2u);
  EXPECT_EQ(kv.at("lr"), "0.5");
  EXPECT_EQ(kv.at("seed"), "9");
}
