#pragma once

// Reference predictors over a support set: minimal-norm least squares,
// 3-nearest-neighbours, the support mean, and small models trained from
// scratch with full-batch Adam.

#include <Eigen/SVD>

#include <algorithm>
#include <functional>
#include <numeric>

#include "icl_lab/tasks.hpp"
#include "icl_lab/train.hpp"

namespace icl {

// m labelled examples; xs is [m x 64] flattened (masked) images.
struct SupportSet {
  std::vector<float> xs;
  std::vector<float> ys;
  std::size_t d = kImageSide;

  std::size_t size() const { return ys.size(); }
  std::span<const float> x(std::size_t i) const {
    return {xs.data() + i * kImagePixels, kImagePixels};
  }
  void add(std::span<const float> image, float y) {
    if (image.size() != kImagePixels)
      throw DimensionError("support images must have 64 pixels");
    xs.insert(xs.end(), image.begin(), image.end());
    ys.push_back(y);
  }
};

struct Prediction {
  double value = 0.0;
  bool empty_support = false;
};

inline constexpr double kLeastSquaresRankTol = 1e-8;

// Minimal-norm solution of min ||X w - y|| via SVD, singular values below
// 1e-8 * sigma_max treated as zero; returns w . query.
inline Prediction least_squares(const SupportSet& s, std::span<const float> query) {
  if (query.size() != kImagePixels) throw DimensionError("query must have 64 pixels");
  const std::size_t m = s.size();
  if (m == 0) return {0.0, true};
  Eigen::MatrixXd x(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(kImagePixels));
  Eigen::VectorXd y(static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < kImagePixels; ++j)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s.xs[i * kImagePixels + j];
    y(static_cast<Eigen::Index>(i)) = s.ys[i];
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
  svd.setThreshold(kLeastSquaresRankTol);
  const Eigen::VectorXd w = svd.solve(y);
  double out = 0;
  for (std::size_t j = 0; j < kImagePixels; ++j) out += w(static_cast<Eigen::Index>(j)) * query[j];
  return {out, false};
}

// Mean label of the min(3, m) nearest support points (Euclidean); ties go to
// the lower support index.
inline Prediction knn3(const SupportSet& s, std::span<const float> query) {
  if (query.size() != kImagePixels) throw DimensionError("query must have 64 pixels");
  const std::size_t m = s.size();
  if (m == 0) return {0.0, true};
  std::vector<std::pair<double, std::size_t>> dist(m);
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0;
    const auto xi = s.x(i);
    for (std::size_t j = 0; j < kImagePixels; ++j) {
      const double diff = static_cast<double>(xi[j]) - query[j];
      acc += diff * diff;
    }
    dist[i] = {acc, i};
  }
  const std::size_t k = std::min<std::size_t>(3, m);
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
  double acc = 0;
  for (std::size_t i = 0; i < k; ++i) acc += s.ys[dist[i].second];
  return {acc / static_cast<double>(k), false};
}

inline Prediction mean_predict(const SupportSet& s) {
  if (s.size() == 0) return {0.0, true};
  double acc = 0;
  for (float y : s.ys) acc += y;
  return {acc / static_cast<double>(s.size()), false};
}

// ---------------------------------------------------------------------------
// Models trained from scratch on the support set

enum class FreshKind { Mlp, Cnn, Vit };

inline std::string to_string(FreshKind k) {
  switch (k) {
    case FreshKind::Mlp: return "mlp";
    case FreshKind::Cnn: return "cnn";
    case FreshKind::Vit: return "vit";
  }
  return "?";
}

struct FreshOptions {
  std::size_t steps = 5000;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

// Scalar regressor over [N, 1, 8, 8] images, returning [N].
class FreshModel {
 public:
  FreshModel(FreshKind kind, std::uint64_t seed) : kind_(kind) {
    Initializer init(seed);
    switch (kind) {
      case FreshKind::Mlp:
        layers_.emplace_back(kImagePixels, 64, init);
        layers_.emplace_back(64, 64, init);
        layers_.emplace_back(64, 1, init);
        break;
      case FreshKind::Cnn:
        // Mirrors the two-layer CNN target: 2x2 kernel at stride 2, relu, readout.
        kernel_ = init.gaussian<float>({1, 1, 2, 2}, 4);
        kernel_bias_ = Tensor<float>::zeros({1}, true);
        layers_.emplace_back(16, 1, init);
        break;
      case FreshKind::Vit: {
        EncoderConfig cfg;
        cfg.kind = EncoderKind::Vit;
        cfg.n_layers = 2;
        cfg.n_heads = 2;
        cfg.patch_size = 4;
        cfg.width = 32;
        cfg.pos_embedding = PositionalKind::Learned;
        vit_ = std::make_shared<VitEncoder<float>>(cfg, 1, init);
        break;
      }
    }
  }

  Tensor<float> operator()(const Tensor<float>& images) const {
    const std::size_t n = images.dim(0);
    switch (kind_) {
      case FreshKind::Mlp: {
        auto h = reshape(images, {n, kImagePixels});
        h = relu(layers_[0](h));
        h = relu(layers_[1](h));
        return reshape(layers_[2](h), {n});
      }
      case FreshKind::Cnn: {
        auto h = relu(conv2d(images, kernel_, kernel_bias_, 2, 0));
        return reshape(layers_[0](reshape(h, {n, 16})), {n});
      }
      case FreshKind::Vit:
        return reshape((*vit_)(images), {n});
    }
    throw ContractError("invalid fresh model kind");
  }

  ParameterList<float> parameters() const {
    ParameterList<float> out;
    if (kind_ == FreshKind::Cnn) {
      out.push_back({"conv.kernel", kernel_});
      out.push_back({"conv.bias", kernel_bias_});
    }
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect("fc" + std::to_string(i), out);
    if (vit_) vit_->collect("vit", out);
    return out;
  }

  double predict(std::span<const float> image) const {
    Tensor<float> x({1, 1, kImageSide, kImageSide}, std::vector<float>(image.begin(), image.end()));
    return (*this)(x).item();
  }

 private:
  FreshKind kind_;
  std::vector<Linear<float>> layers_;
  Tensor<float> kernel_;
  Tensor<float> kernel_bias_;
  std::shared_ptr<VitEncoder<float>> vit_;
};

struct FreshPredictor {
  std::shared_ptr<const FreshModel> model;
  double final_train_mse = 0.0;

  double operator()(std::span<const float> image) const { return model->predict(image); }
};

inline Tensor<float> support_images(const SupportSet& s) {
  return Tensor<float>({s.size(), 1, kImageSide, kImageSide}, s.xs);
}

// Full-batch Adam on plain MSE over the support set.
inline FreshPredictor gd_train_fresh(FreshKind kind, const SupportSet& s,
                                     const FreshOptions& opts = {}) {
  if (s.size() == 0) throw ContractError("gd_train_fresh needs a non-empty support set");
  auto model = std::make_shared<FreshModel>(kind, opts.seed);
  const auto params = model->parameters();
  AdamState<float> adam;
  adam.lr = opts.lr;
  const auto x = support_images(s);
  const Tensor<float> y({s.size()}, s.ys);
  for (std::size_t step = 0; step < opts.steps; ++step) {
    auto loss = mse((*model)(x), y);
    if (!std::isfinite(loss.item()))
      throw TrainingDiverged("fresh " + to_string(kind) + " model diverged at step " +
                             std::to_string(step));
    backward(loss);
    adam_step(params, adam);
  }
  const double final_mse = mse((*model)(x), y).item();
  if (!std::isfinite(final_mse))
    throw TrainingDiverged("fresh " + to_string(kind) + " model diverged at step " +
                           std::to_string(opts.steps));
  return {model, final_mse};
}

}  // namespace icl
