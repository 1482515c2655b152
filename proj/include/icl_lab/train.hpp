#pragma once

// Weighted-MSE objective, Adam, the curriculum training loop and checkpoints.

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "icl_lab/config.hpp"
#include "icl_lab/data.hpp"
#include "icl_lab/nn.hpp"
#include "icl_lab/tasks.hpp"

namespace icl {

// Training allocates and frees the same large activation buffers every step.
// Keeping them on the heap avoids an mmap/munmap round trip each time. Call
// once at program start; a no-op off glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

// ---------------------------------------------------------------------------
// Loss

// (2k/n)^2 for k = 1..n, zero for slots k > n up to width.
template <typename T>
std::vector<T> loss_weights(std::size_t n, std::size_t width) {
  std::vector<T> w(width, T(0));
  for (std::size_t k = 1; k <= n && k <= width; ++k) {
    const double r = 2.0 * static_cast<double>(k) / static_cast<double>(n);
    w[k - 1] = static_cast<T>(r * r);
  }
  return w;
}

// Mean over rows and valid slots of weight_k * (pred_k - target_k)^2.
// preds/targets are [B x W]; valid_len[b] <= W. With unit_weights set, every
// valid slot weighs 1 (plain MSE).
template <typename T>
Tensor<T> weighted_mse(const Tensor<T>& preds, const Tensor<T>& targets,
                       const std::vector<std::size_t>& valid_len,
                       bool unit_weights = false) {
  if (preds.shape() != targets.shape() || preds.rank() != 2)
    throw DimensionError("weighted_mse needs equal [B x n] shapes, got " +
                         detail::pair_shapes(preds.shape(), targets.shape()));
  const std::size_t batch = preds.dim(0), width = preds.dim(1);
  if (valid_len.size() != batch)
    throw DimensionError("weighted_mse: valid_len has " + std::to_string(valid_len.size()) +
                         " rows, predictions have " + std::to_string(batch));
  std::vector<T> weights(batch * width, T(0));
  std::size_t total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t n = valid_len[b];
    if (n == 0 || n > width) throw DimensionError("weighted_mse: valid length out of range");
    const auto row = loss_weights<T>(n, width);
    for (std::size_t k = 0; k < n; ++k) weights[b * width + k] = unit_weights ? T(1) : row[k];
    total += n;
  }
  Tensor<T> w({batch, width}, std::move(weights));
  auto err = mul(square(sub(preds, targets)), w);
  return scale(sum(err), T(1) / static_cast<T>(total));
}

template <typename T>
Tensor<T> weighted_mse(const Tensor<T>& preds, const Tensor<T>& targets, std::size_t n) {
  return weighted_mse(preds, targets, std::vector<std::size_t>(preds.dim(0), n));
}

// Plain mean squared error over every entry.
template <typename T>
Tensor<T> mse(const Tensor<T>& preds, const Tensor<T>& targets) {
  if (preds.shape() != targets.shape())
    throw DimensionError("mse shape mismatch: " +
                         detail::pair_shapes(preds.shape(), targets.shape()));
  return scale(sum(square(sub(preds, targets))), T(1) / static_cast<T>(preds.size()));
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

// Bias-corrected Adam update of every parameter, then zeroes the grads.
template <typename T>
void adam_step(const ParameterList<T>& params, AdamState<T>& state,
               std::optional<double> lr_override = std::nullopt) {
  for (const auto& p : params)
    if (!p.tensor.has_grad())
      throw ContractError("adam_step: parameter '" + p.name + "' has no gradient");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.size(), T(0));
      state.v.emplace_back(p.tensor.size(), T(0));
    }
  }
  if (state.m.size() != params.size())
    throw ContractError("adam_step: optimizer state does not match parameter list");
  state.t += 1;
  const double lr = lr_override.value_or(state.lr);
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T step = static_cast<T>(lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(state.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto tensor = params[i].tensor;
    auto data = tensor.mutable_data();
    auto grad = tensor.mutable_grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != data.size())
      throw ContractError("adam_step: moment size mismatch for '" + params[i].name + "'");
    for (std::size_t j = 0; j < data.size(); ++j) {
      const T g = grad[j];
      m[j] = b1 * m[j] + (T(1) - b1) * g;
      v[j] = b2 * v[j] + (T(1) - b2) * g * g;
      data[j] -= step * m[j] / (std::sqrt(v[j] * inv_c2) + eps);
    }
    tensor.zero_grad();
  }
}

// Scales all grads so their joint L2 norm is at most max_norm. Returns the
// norm before clipping.
template <typename T>
double clip_grad_norm(const ParameterList<T>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    for (const T g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (const auto& p : params) {
      auto t = p.tensor;
      for (auto& g : t.mutable_grad()) g *= f;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training loop

struct LossRecord {
  std::uint64_t step = 0;
  std::size_t d = 0;
  std::size_t n = 0;
  double loss = 0.0;
};

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'I', 'C', 'L', 'C', 'K', 'P', 'T', '\0'};

struct Checkpoint {
  TrainConfig config;
  std::uint64_t step = 0;  // completed optimizer steps
  CurriculumState curriculum;
  std::uint64_t adam_t = 0;
  std::vector<StoredTensor> params;
  std::vector<std::vector<float>> adam_m;
  std::vector<std::vector<float>> adam_v;
  std::vector<LossRecord> history;
};

// Seed used to initialize model weights for a config.
inline std::uint64_t model_seed(const TrainConfig& cfg) {
  return derive_seed(cfg.seed, {0x30de1});
}

// Loads the image pool a config names: synthetic or a CIFAR-10 path.
inline ImagePool load_pool(const TrainConfig& cfg) {
  if (cfg.data == "synthetic")
    return synthetic_pool(cfg.synthetic_images, derive_seed(cfg.seed, {0xda7a}));
  return cifar_pool(load_cifar10(cfg.data));
}

// Rebuilds a model from checkpointed parameters.
inline IclModel<float> restore_model(const Checkpoint& ckpt) {
  IclModel<float> model(ckpt.config.model, model_seed(ckpt.config));
  auto params = model.parameters();
  if (params.size() != ckpt.params.size())
    throw FormatError("checkpoint holds " + std::to_string(ckpt.params.size()) +
                      " parameter tensors, model expects " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& stored = ckpt.params[i];
    if (stored.name != params[i].name || stored.shape != params[i].tensor.shape())
      throw FormatError("checkpoint parameter '" + stored.name + "' does not match model");
    auto dst = params[i].tensor.mutable_data();
    std::copy(stored.data.begin(), stored.data.end(), dst.begin());
  }
  return model;
}

// Owns the model and optimizer for one run. Every step draws its randomness
// from a stream keyed by (seed, step), so resuming from a checkpoint replays
// the exact batches of an uninterrupted run.
class Trainer {
 public:
  Trainer(TrainConfig cfg, const ImagePool& pool)
      : cfg_(std::move(cfg)), pool_(&pool), model_(cfg_.model, model_seed(cfg_)) {
    cfg_.validate();
    params_ = model_.parameters();
    adam_.lr = cfg_.lr;
  }

  Trainer(const Checkpoint& ckpt, const ImagePool& pool)
      : cfg_(ckpt.config), pool_(&pool), model_(restore_model(ckpt)) {
    cfg_.validate();
    params_ = model_.parameters();
    adam_.lr = cfg_.lr;
    adam_.t = ckpt.adam_t;
    adam_.m = ckpt.adam_m;
    adam_.v = ckpt.adam_v;
    step_ = ckpt.step;
    history_ = ckpt.history;
  }

  const TrainConfig& config() const { return cfg_; }
  std::uint64_t step() const { return step_; }
  const std::vector<LossRecord>& history() const { return history_; }
  IclModel<float>& model() { return model_; }

  // Prompt batch for a given step, from the training split.
  PromptBatch batch_for(std::uint64_t step) const {
    const auto cur = curriculum_for(cfg_, step);
    auto prompt = PromptBatch::empty(cfg_.batch_size, cur.n, cur.d);
    std::mt19937_64 rng(derive_seed(cfg_.seed, {0xba7c4, step}));
    const auto split = pool_->train_split();
    for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
      const auto f = sample_target(cfg_.target, derive_seed(cfg_.seed, {0x7a4, step, b}));
      build_prompt(prompt, b, split, f, cur.d, cur.n, rng);
    }
    return prompt;
  }

  LossRecord train_step() {
    const auto cur = curriculum_for(cfg_, step_);
    const auto prompt = batch_for(step_);
    auto preds = icl_forward(model_, prompt);
    const std::size_t n = preds.dim(1);
    std::vector<float> targets(prompt.batch * n);
    for (std::size_t b = 0; b < prompt.batch; ++b)
      for (std::size_t i = 0; i < n; ++i) targets[b * n + i] = prompt.value(b, i);
    Tensor<float> y({prompt.batch, n}, std::move(targets));
    auto loss = weighted_mse(preds, y, prompt.valid_len);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      char msg[160];
      std::snprintf(msg, sizeof msg, "loss is not finite at step %llu (d=%zu, lr=%g)",
                    static_cast<unsigned long long>(step_), cur.d, current_lr());
      throw TrainingDiverged(msg);
    }
    backward(loss);
    if (cfg_.grad_clip > 0) clip_grad_norm(params_, cfg_.grad_clip);
    adam_step(params_, adam_, current_lr());
    LossRecord rec{step_, cur.d, cur.n, value};
    history_.push_back(rec);
    ++step_;
    return rec;
  }

  Checkpoint checkpoint() const {
    Checkpoint c;
    c.config = cfg_;
    c.step = step_;
    c.curriculum = curriculum_for(cfg_, step_);
    c.adam_t = adam_.t;
    for (const auto& p : params_)
      c.params.push_back({p.name, p.tensor.shape(),
                          std::vector<float>(p.tensor.data().begin(), p.tensor.data().end())});
    c.adam_m = adam_.m;
    c.adam_v = adam_.v;
    if (c.adam_m.empty()) {
      for (const auto& p : params_) {
        c.adam_m.emplace_back(p.tensor.size(), 0.0f);
        c.adam_v.emplace_back(p.tensor.size(), 0.0f);
      }
    }
    c.history = history_;
    return c;
  }

 private:
  double current_lr() const {
    if (cfg_.warmup_steps == 0 || step_ >= cfg_.warmup_steps) return cfg_.lr;
    return cfg_.lr * static_cast<double>(step_ + 1) / static_cast<double>(cfg_.warmup_steps);
  }

  TrainConfig cfg_;
  const ImagePool* pool_;
  IclModel<float> model_;
  ParameterList<float> params_;
  AdamState<float> adam_;
  std::uint64_t step_ = 0;
  std::vector<LossRecord> history_;
};

struct TrainHooks {
  std::function<void(const Checkpoint&)> on_checkpoint;
  std::function<void(const LossRecord&)> on_step;
};

// Runs until cfg.total_steps, optionally resuming. Calls on_checkpoint every
// checkpoint_every steps and once at the end.
inline Checkpoint train_loop(const TrainConfig& cfg, const ImagePool& pool,
                             const TrainHooks& hooks = {},
                             const Checkpoint* resume = nullptr) {
  // n never shrinks, so the last step needs the most images.
  const auto last = curriculum_for(cfg, cfg.total_steps ? cfg.total_steps - 1 : 0);
  if (pool.train_count() < last.n)
    throw DataError("training split is too small for a prompt");
  Trainer trainer = resume ? Trainer(*resume, pool) : Trainer(cfg, pool);
  if (resume) {
    // Allow extending the horizon of a resumed run.
    // The rest of the config must match the checkpoint.
    auto a = resume->config, b = cfg;
    a.total_steps = b.total_steps = 0;
    if (to_config_text(a) != to_config_text(b))
      throw ConfigError("resume: config differs from the checkpoint's");
  }
  while (trainer.step() < cfg.total_steps) {
    const auto rec = trainer.train_step();
    if (hooks.on_step) hooks.on_step(rec);
    if (cfg.checkpoint_every && trainer.step() % cfg.checkpoint_every == 0 &&
        trainer.step() < cfg.total_steps && hooks.on_checkpoint)
      hooks.on_checkpoint(trainer.checkpoint());
  }
  auto ckpt = trainer.checkpoint();
  ckpt.config.total_steps = cfg.total_steps;
  if (hooks.on_checkpoint) hooks.on_checkpoint(ckpt);
  return ckpt;
}

// ---------------------------------------------------------------------------
// Persistence

namespace detail {

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void f64(double v) { bytes(&v, sizeof v); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void floats(const std::vector<float>& v) {
    u64(v.size());
    bytes(v.data(), v.size() * sizeof(float));
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::uint64_t size) : in_(in), left_(size) {}
  void bytes(void* p, std::size_t n) {
    if (n > left_) throw IoError("checkpoint is truncated");
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw IoError("checkpoint is truncated");
    left_ -= n;
  }
  std::uint64_t u64() { std::uint64_t v; bytes(&v, sizeof v); return v; }
  std::uint32_t u32() { std::uint32_t v; bytes(&v, sizeof v); return v; }
  double f64() { double v; bytes(&v, sizeof v); return v; }
  // A count of `unit`-byte items; anything that cannot fit in the rest of the
  // file means truncation or corruption.
  std::uint64_t length(std::uint64_t unit) {
    const auto n = u64();
    if (unit && n > left_ / unit) throw IoError("checkpoint is truncated or corrupt (length field)");
    return n;
  }
  std::string str() {
    std::string s(length(1), '\0');
    bytes(s.data(), s.size());
    return s;
  }
  std::vector<float> floats() {
    std::vector<float> v(length(sizeof(float)));
    bytes(v.data(), v.size() * sizeof(float));
    return v;
  }

 private:
  std::istream& in_;
  std::uint64_t left_;
};

}  // namespace detail

// Layout: magic[8], version u32, config digest u64, config text, step,
// curriculum (d, n), adam t, params (name, shape, data), adam m, adam v,
// loss history.
inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  detail::Writer w(out);
  const auto text = to_config_text(ckpt.config);
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u64(fnv1a(text));
  w.str(text);
  w.u64(ckpt.step);
  w.u64(ckpt.curriculum.d);
  w.u64(ckpt.curriculum.n);
  w.u64(ckpt.adam_t);
  w.u64(ckpt.params.size());
  for (const auto& p : ckpt.params) {
    w.str(p.name);
    w.u64(p.shape.size());
    for (auto e : p.shape) w.u64(e);
    w.floats(p.data);
  }
  for (const auto& m : ckpt.adam_m) w.floats(m);
  for (const auto& v : ckpt.adam_v) w.floats(v);
  w.u64(ckpt.history.size());
  for (const auto& r : ckpt.history) {
    w.u64(r.step);
    w.u64(r.d);
    w.u64(r.n);
    w.f64(r.loss);
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  detail::Reader r(in, std::filesystem::file_size(path));
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw FormatError(path.string() + " is not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto digest = r.u64();
  const auto text = r.str();
  if (fnv1a(text) != digest) throw FormatError("checkpoint config digest mismatch");
  Checkpoint c;
  c.config = experiment_preset(Experiment::E1);
  apply_config(c.config, parse_key_values(text));
  c.step = r.u64();
  c.curriculum.step = c.step;
  c.curriculum.d = r.u64();
  c.curriculum.n = r.u64();
  c.adam_t = r.u64();
  const auto count = r.length(1);
  for (std::uint64_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.str();
    const auto rank = r.length(sizeof(std::uint64_t));
    for (std::uint64_t k = 0; k < rank; ++k) t.shape.push_back(r.u64());
    t.data = r.floats();
    if (numel(t.shape) != t.data.size()) throw FormatError("checkpoint tensor '" + t.name + "' is inconsistent");
    c.params.push_back(std::move(t));
  }
  for (std::uint64_t i = 0; i < count; ++i) c.adam_m.push_back(r.floats());
  for (std::uint64_t i = 0; i < count; ++i) c.adam_v.push_back(r.floats());
  const auto hist = r.length(4 * sizeof(std::uint64_t));
  c.history.resize(hist);
  for (auto& rec : c.history) {
    rec.step = r.u64();
    rec.d = r.u64();
    rec.n = r.u64();
    rec.loss = r.f64();
  }
  return c;
}

// CSV columns: step,d,n,loss.
inline void write_loss_csv(const std::vector<LossRecord>& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write loss CSV " + path.string());
  out << "step,d,n,loss\n";
  char buf[64];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%.9g", r.loss);
    out << r.step << ',' << r.d << ',' << r.n << ',' << buf << '\n';
  }
  if (!out) throw IoError("failed writing loss CSV " + path.string());
}

}  // namespace icl
