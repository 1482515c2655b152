#pragma once

// Model zoo: GPT-2 style causal decoder, CNN and ViT image encoders, and the
// composite in-context regression model that interleaves image and value
// tokens.

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "icl_lab/ops.hpp"
#include "icl_lab/prompt.hpp"

namespace icl {

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

template <typename T>
std::size_t parameter_count(const ParameterList<T>& params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.tensor.size();
  return total;
}

// Draws weights with variance 1/fan_in; biases start at zero.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  template <typename T>
  Tensor<T> gaussian(Shape shape, std::size_t fan_in, bool trainable = true) {
    return normal<T>(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)),
                     trainable);
  }

  template <typename T>
  Tensor<T> normal(Shape shape, double stddev, bool trainable = true) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> values(numel(shape));
    for (auto& v : values) v = static_cast<T>(dist(rng_));
    return Tensor<T>(std::move(shape), std::move(values), trainable);
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

// ---------------------------------------------------------------------------
// Configuration

struct DecoderConfig {
  std::size_t embed_dim = 256;
  std::size_t n_layers = 12;
  std::size_t n_heads = 8;
  std::size_t max_seq_len = 82;

  void validate() const {
    if (embed_dim == 0 || n_heads == 0 || embed_dim % n_heads != 0)
      throw ConfigError("decoder embed_dim " + std::to_string(embed_dim) +
                        " is not divisible by n_heads " + std::to_string(n_heads));
    if (max_seq_len < 2) throw ConfigError("decoder max_seq_len must be >= 2");
  }

  // Largest number of (image, value) pairs the decoder can hold.
  std::size_t max_pairs() const { return max_seq_len / 2; }
};

enum class EncoderKind { Cnn, Vit };
enum class PositionalKind { Learned, Sinusoidal };

struct EncoderConfig {
  EncoderKind kind = EncoderKind::Cnn;
  std::size_t n_layers = 8;
  // CNN
  std::size_t channels = 32;
  std::size_t kernel = 3;
  // ViT
  std::size_t n_heads = 8;
  std::size_t patch_size = 4;
  std::size_t width = 0;  // 0: use the output embedding size
  PositionalKind pos_embedding = PositionalKind::Learned;

  std::size_t vit_width(std::size_t out_dim) const { return width ? width : out_dim; }

  void validate(std::size_t out_dim) const {
    if (n_layers == 0) throw ConfigError("encoder n_layers must be positive");
    if (kind == EncoderKind::Cnn) {
      if (channels == 0) throw ConfigError("encoder channels must be positive");
      if (kernel == 0 || kernel % 2 == 0 || kernel > kImageSide)
        throw ConfigError("encoder kernel must be odd and at most 8");
    } else {
      if (patch_size == 0 || kImageSide % patch_size != 0)
        throw ConfigError("patch_size " + std::to_string(patch_size) +
                          " does not divide the image side 8");
      const auto w = vit_width(out_dim);
      if (n_heads == 0 || w % n_heads != 0)
        throw ConfigError("ViT width " + std::to_string(w) +
                          " is not divisible by n_heads " + std::to_string(n_heads));
      if (pos_embedding == PositionalKind::Sinusoidal && w % 2 != 0)
        throw ConfigError("sinusoidal positional encoding needs an even width");
    }
  }

  std::size_t patch_count() const {
    const auto per_side = kImageSide / patch_size;
    return per_side * per_side;
  }
};

// PE[p, 2i] = sin(p / 10000^(2i/dim)), PE[p, 2i+1] = cos(same).
template <typename T>
Tensor<T> sinusoidal_pe(std::size_t length, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0)
    throw ConfigError("sinusoidal_pe needs an even dim, got " + std::to_string(dim));
  if (length == 0) throw ConfigError("sinusoidal_pe needs a positive length");
  std::vector<T> table(length * dim);
  for (std::size_t p = 0; p < length; ++p)
    for (std::size_t i = 0; i < dim / 2; ++i) {
      const double freq =
          std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(dim));
      const double angle = static_cast<double>(p) / freq;
      table[p * dim + 2 * i] = static_cast<T>(std::sin(angle));
      table[p * dim + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  return Tensor<T>({length, dim}, std::move(table));
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Initializer& init, bool trainable = true)
      : weight_(init.gaussian<T>({in, out}, in, trainable)),
        bias_(Tensor<T>::zeros({out}, trainable)) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    return add(matmul(x, weight_), bias_);
  }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({prefix + ".weight", weight_});
    out.push_back({prefix + ".bias", bias_});
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(std::size_t dim, bool trainable = true)
      : gain_(Tensor<T>::full({dim}, T(1), trainable)),
        bias_(Tensor<T>::zeros({dim}, trainable)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layernorm(x, gain_, bias_); }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({prefix + ".gain", gain_});
    out.push_back({prefix + ".bias", bias_});
  }

 private:
  Tensor<T> gain_;
  Tensor<T> bias_;
};

template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t heads, Initializer& init,
                     bool trainable = true)
      : dim_(dim),
        heads_(heads),
        qkv_(dim, 3 * dim, init, trainable),
        proj_(dim, dim, init, trainable) {}

  // x: [B, T, D]. mask == nullptr means full attention.
  Tensor<T> operator()(const Tensor<T>& x, const AttentionMask* mask) const {
    const std::size_t batch = x.dim(0), len = x.dim(1), head_dim = dim_ / heads_;
    const auto qkv = qkv_(x);
    auto split = [&](std::size_t part) {
      auto t = narrow(qkv, 2, part * dim_, dim_);
      t = reshape(t, {batch, len, heads_, head_dim});
      t = permute(t, {0, 2, 1, 3});
      return reshape(t, {batch * heads_, len, head_dim});
    };
    const auto q = split(0), k = split(1), v = split(2);
    auto scores = scale(matmul(q, transpose(k)),
                        T(1) / std::sqrt(static_cast<T>(head_dim)));
    scores = reshape(scores, {batch, heads_, len, len});
    auto probs = softmax(scores, mask);
    if (capture_) last_probs_ = probs.detach();
    probs = reshape(probs, {batch * heads_, len, len});
    auto ctx = matmul(probs, v);
    ctx = reshape(ctx, {batch, heads_, len, head_dim});
    ctx = permute(ctx, {0, 2, 1, 3});
    ctx = reshape(ctx, {batch, len, dim_});
    return proj_(ctx);
  }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    qkv_.collect(prefix + ".qkv", out);
    proj_.collect(prefix + ".proj", out);
  }

  void set_capture(bool flag) { capture_ = flag; }
  // [B, H, T, T] probabilities from the last forward with capture on.
  const Tensor<T>& last_probs() const { return last_probs_; }

 private:
  std::size_t dim_ = 0;
  std::size_t heads_ = 1;
  Linear<T> qkv_;
  Linear<T> proj_;
  bool capture_ = false;
  mutable Tensor<T> last_probs_;
};

// Pre-norm residual block: x + attn(ln(x)), then x + mlp(ln(x)).
template <typename T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(std::size_t dim, std::size_t heads, Initializer& init,
                   bool trainable = true)
      : ln1_(dim, trainable),
        attn_(dim, heads, init, trainable),
        ln2_(dim, trainable),
        fc_(dim, 4 * dim, init, trainable),
        out_(4 * dim, dim, init, trainable) {}

  Tensor<T> operator()(const Tensor<T>& x, const AttentionMask* mask) const {
    auto h = add(x, attn_(ln1_(x), mask));
    return add(h, out_(gelu(fc_(ln2_(h)))));
  }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    ln1_.collect(prefix + ".ln1", out);
    attn_.collect(prefix + ".attn", out);
    ln2_.collect(prefix + ".ln2", out);
    fc_.collect(prefix + ".mlp.fc", out);
    out_.collect(prefix + ".mlp.out", out);
  }

  MultiHeadAttention<T>& attention() { return attn_; }

 private:
  LayerNorm<T> ln1_;
  MultiHeadAttention<T> attn_;
  LayerNorm<T> ln2_;
  Linear<T> fc_;
  Linear<T> out_;
};

// ---------------------------------------------------------------------------
// Decoder

template <typename T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(const DecoderConfig& cfg, Initializer& init) : cfg_(cfg) {
    cfg.validate();
    pos_ = init.normal<T>({cfg.max_seq_len, cfg.embed_dim}, 0.02);
    for (std::size_t i = 0; i < cfg.n_layers; ++i)
      blocks_.emplace_back(cfg.embed_dim, cfg.n_heads, init);
    ln_f_ = LayerNorm<T>(cfg.embed_dim);
  }

  // tokens: [seq, D] or [B, seq, D]; mask covers [seq, seq] (optionally
  // per batch row).
  Tensor<T> operator()(const Tensor<T>& tokens, const AttentionMask& mask) const {
    const bool unbatched = tokens.rank() == 2;
    auto x = unbatched ? reshape(tokens, {1, tokens.dim(0), tokens.dim(1)}) : tokens;
    if (x.rank() != 3 || x.dim(2) != cfg_.embed_dim)
      throw DimensionError("decoder expects [B, seq, " + std::to_string(cfg_.embed_dim) +
                           "] tokens, got " + to_string(tokens.shape()));
    const std::size_t len = x.dim(1);
    if (len > cfg_.max_seq_len)
      throw CapacityError("sequence of " + std::to_string(len) +
                          " tokens exceeds max_seq_len " +
                          std::to_string(cfg_.max_seq_len));
    if (mask.rows != len || mask.cols != len)
      throw DimensionError("attention mask does not match sequence length");
    x = add(x, narrow(pos_, 0, 0, len));
    for (const auto& block : blocks_) x = block(x, &mask);
    x = ln_f_(x);
    return unbatched ? reshape(x, {len, cfg_.embed_dim}) : x;
  }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({prefix + ".pos", pos_});
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
    ln_f_.collect(prefix + ".ln_f", out);
  }

  const DecoderConfig& config() const { return cfg_; }
  void set_capture_attention(bool flag) {
    for (auto& b : blocks_) b.attention().set_capture(flag);
  }
  const Tensor<T>& attention_probs(std::size_t layer) {
    return blocks_.at(layer).attention().last_probs();
  }

 private:
  DecoderConfig cfg_;
  Tensor<T> pos_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> ln_f_;
};

// ---------------------------------------------------------------------------
// Encoders. Both map [N, 1, 8, 8] images to [N, out_dim].

template <typename T>
Tensor<T> as_image_batch(const Tensor<T>& images) {
  if (images.rank() == 3 && images.dim(0) == 1 && images.dim(1) == kImageSide &&
      images.dim(2) == kImageSide)
    return reshape(images, {1, 1, kImageSide, kImageSide});
  if (images.rank() == 4 && images.dim(1) == 1 && images.dim(2) == kImageSide &&
      images.dim(3) == kImageSide)
    return images;
  throw DimensionError("encoder expects [1x8x8] or [Nx1x8x8] images, got " +
                       to_string(images.shape()));
}

// Stack of same-padded stride-1 conv+relu layers, flattened into a linear head.
template <typename T>
class CnnEncoder {
 public:
  CnnEncoder() = default;
  CnnEncoder(const EncoderConfig& cfg, std::size_t out_dim, Initializer& init,
             bool trainable = true)
      : cfg_(cfg), out_dim_(out_dim) {
    cfg.validate(out_dim);
    std::size_t in_ch = 1;
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
      const std::size_t fan_in = in_ch * cfg.kernel * cfg.kernel;
      kernels_.push_back(init.gaussian<T>({cfg.channels, in_ch, cfg.kernel, cfg.kernel},
                                          fan_in, trainable));
      biases_.push_back(Tensor<T>::zeros({cfg.channels}, trainable));
      in_ch = cfg.channels;
    }
    head_ = Linear<T>(cfg.channels * kImagePixels, out_dim, init, trainable);
  }

  Tensor<T> operator()(const Tensor<T>& images) const {
    auto x = as_image_batch(images);
    const std::size_t n = x.dim(0);
    for (std::size_t i = 0; i < kernels_.size(); ++i)
      x = relu(conv2d(x, kernels_[i], biases_[i], 1, cfg_.kernel / 2));
    x = reshape(x, {n, cfg_.channels * kImagePixels});
    auto out = head_(x);
    return images.rank() == 3 ? reshape(out, {out_dim_}) : out;
  }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    for (std::size_t i = 0; i < kernels_.size(); ++i) {
      out.push_back({prefix + ".conv" + std::to_string(i) + ".kernel", kernels_[i]});
      out.push_back({prefix + ".conv" + std::to_string(i) + ".bias", biases_[i]});
    }
    head_.collect(prefix + ".head", out);
  }

 private:
  EncoderConfig cfg_;
  std::size_t out_dim_ = 0;
  std::vector<Tensor<T>> kernels_;
  std::vector<Tensor<T>> biases_;
  Linear<T> head_;
};

// [N, 1, 8, 8] -> [N, patches, patch_size^2], patches in row-major order.
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch) {
  const std::size_t n = images.dim(0), grid = kImageSide / patch;
  auto x = reshape(images, {n, grid, patch, grid, patch});
  x = permute(x, {0, 1, 3, 2, 4});
  return reshape(x, {n, grid * grid, patch * patch});
}

// Patch embedding + positional table, full-attention blocks, mean pool over
// patch tokens, linear head.
template <typename T>
class VitEncoder {
 public:
  VitEncoder() = default;
  VitEncoder(const EncoderConfig& cfg, std::size_t out_dim, Initializer& init,
             bool trainable = true)
      : cfg_(cfg), out_dim_(out_dim) {
    cfg.validate(out_dim);
    const std::size_t width = cfg.vit_width(out_dim);
    const std::size_t patches = cfg.patch_count();
    embed_ = Linear<T>(cfg.patch_size * cfg.patch_size, width, init, trainable);
    if (cfg.pos_embedding == PositionalKind::Learned)
      pos_ = init.normal<T>({patches, width}, 0.02, trainable);
    else
      pos_ = sinusoidal_pe<T>(patches, width);
    for (std::size_t i = 0; i < cfg.n_layers; ++i)
      blocks_.emplace_back(width, cfg.n_heads, init, trainable);
    ln_f_ = LayerNorm<T>(width, trainable);
    head_ = Linear<T>(width, out_dim, init, trainable);
  }

  Tensor<T> operator()(const Tensor<T>& images) const {
    auto x = as_image_batch(images);
    auto tokens = add(embed_(patchify(x, cfg_.patch_size)), pos_);
    for (const auto& block : blocks_) tokens = block(tokens, nullptr);
    auto pooled = mean_axis(ln_f_(tokens), 1);
    auto out = head_(pooled);
    return images.rank() == 3 ? reshape(out, {out_dim_}) : out;
  }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    embed_.collect(prefix + ".patch", out);
    if (cfg_.pos_embedding == PositionalKind::Learned) out.push_back({prefix + ".pos", pos_});
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
    ln_f_.collect(prefix + ".ln_f", out);
    head_.collect(prefix + ".head", out);
  }

 private:
  EncoderConfig cfg_;
  std::size_t out_dim_ = 0;
  Linear<T> embed_;
  Tensor<T> pos_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> ln_f_;
  Linear<T> head_;
};

template <typename T>
Tensor<T> cnn_encode(const CnnEncoder<T>& encoder, const Tensor<T>& image) {
  return encoder(image);
}

template <typename T>
Tensor<T> vit_encode(const VitEncoder<T>& encoder, const Tensor<T>& image) {
  return encoder(image);
}

// ---------------------------------------------------------------------------
// In-context regression model

struct ModelConfig {
  DecoderConfig decoder;
  EncoderConfig encoder;
};

template <typename T>
class IclModel {
 public:
  IclModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.decoder.validate();
    cfg.encoder.validate(cfg.decoder.embed_dim);
    Initializer init(seed);
    const std::size_t dim = cfg.decoder.embed_dim;
    if (cfg.encoder.kind == EncoderKind::Cnn)
      encoder_ = CnnEncoder<T>(cfg.encoder, dim, init);
    else
      encoder_ = VitEncoder<T>(cfg.encoder, dim, init);
    value_embed_ = Linear<T>(1, dim, init);
    decoder_ = Decoder<T>(cfg.decoder, init);
    readout_ = Linear<T>(dim, 1, init);
  }

  const ModelConfig& config() const { return cfg_; }

  Tensor<T> encode(const Tensor<T>& images) const {
    return std::visit([&](const auto& enc) { return enc(images); }, encoder_);
  }

  // images: [B, n, 1, 8, 8], values: [B, n]. Returns predictions [B, n],
  // where entry i is read at the token of image i.
  Tensor<T> forward(const Tensor<T>& images, const Tensor<T>& values,
                    const std::vector<std::size_t>& valid_len) const {
    if (images.rank() != 5 || values.rank() != 2 || images.dim(0) != values.dim(0) ||
        images.dim(1) != values.dim(1))
      throw DimensionError("icl forward expects [B,n,1,8,8] images and [B,n] values, got " +
                           detail::pair_shapes(images.shape(), values.shape()));
    const std::size_t batch = images.dim(0), n = images.dim(1),
                      dim = cfg_.decoder.embed_dim;
    if (n > cfg_.decoder.max_pairs())
      throw CapacityError("prompt of " + std::to_string(n) +
                          " pairs exceeds model capacity of " +
                          std::to_string(cfg_.decoder.max_pairs()));
    auto image_tokens = encode(reshape(images, {batch * n, 1, kImageSide, kImageSide}));
    image_tokens = reshape(image_tokens, {batch, n, dim});
    auto value_tokens = value_embed_(reshape(values, {batch, n, 1}));
    auto tokens = interleave(image_tokens, value_tokens);
    bool uniform = true;
    for (auto v : valid_len) uniform &= v >= n;
    AttentionMask mask;
    if (uniform) {
      mask = AttentionMask::causal(2 * n);
    } else {
      std::vector<std::size_t> token_len(valid_len.size());
      for (std::size_t b = 0; b < valid_len.size(); ++b) token_len[b] = 2 * valid_len[b];
      mask = AttentionMask::causal_padded(2 * n, token_len);
    }
    auto hidden = decoder_(tokens, mask);
    auto at_images = narrow(hidden, 1, 0, n, 2);
    return reshape(readout_(at_images), {batch, n});
  }

  ParameterList<T> parameters() const {
    ParameterList<T> out;
    std::visit([&](const auto& enc) { enc.collect("encoder", out); }, encoder_);
    value_embed_.collect("value_embed", out);
    decoder_.collect("decoder", out);
    readout_.collect("readout", out);
    return out;
  }

  Decoder<T>& decoder() { return decoder_; }

 private:
  ModelConfig cfg_;
  std::variant<CnnEncoder<T>, VitEncoder<T>> encoder_;
  Linear<T> value_embed_;
  Decoder<T> decoder_;
  Linear<T> readout_;
};

template <typename T>
Tensor<T> decoder_forward(const Decoder<T>& decoder, const Tensor<T>& tokens,
                          const AttentionMask& mask) {
  return decoder(tokens, mask);
}

// Runs the model on the first longest() slots of every prompt row.
template <typename T>
Tensor<T> icl_forward(const IclModel<T>& model, const PromptBatch& prompt) {
  const std::size_t n = prompt.longest();
  if (n == 0) throw ContractError("prompt batch has no valid slots");
  if (n > model.config().decoder.max_pairs())
    throw CapacityError("prompt of " + std::to_string(n) +
                        " pairs exceeds model capacity of " +
                        std::to_string(model.config().decoder.max_pairs()));
  std::vector<T> images(prompt.batch * n * kImagePixels);
  std::vector<T> values(prompt.batch * n);
  for (std::size_t b = 0; b < prompt.batch; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      const float* src = prompt.image(b, i);
      std::copy(src, src + kImagePixels, images.begin() + (b * n + i) * kImagePixels);
      values[b * n + i] = static_cast<T>(prompt.value(b, i));
    }
  Tensor<T> img({prompt.batch, n, 1, kImageSide, kImageSide}, std::move(images));
  Tensor<T> val({prompt.batch, n}, std::move(values));
  return model.forward(img, val, prompt.valid_len);
}

}  // namespace icl
