#pragma once

// Gradient checks and oracle comparisons runnable from the CLI.

#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>

#include "icl_lab/baselines.hpp"
#include "icl_lab/nn.hpp"
#include "icl_lab/ops.hpp"
#include "icl_lab/tasks.hpp"
#include "icl_lab/testing/oracles.hpp"
#include "icl_lab/train.hpp"

namespace icl {

struct CheckOutcome {
  std::string name;
  bool ok = true;
  std::string detail;
};

// Architecture of the small end-to-end configuration (3-layer, 64-dim
// decoder with 4 heads; 2-layer, 8-channel CNN encoder).
inline ModelConfig e1_tiny_model() {
  ModelConfig m;
  m.decoder.embed_dim = 64;
  m.decoder.n_layers = 3;
  m.decoder.n_heads = 4;
  m.decoder.max_seq_len = 82;
  m.encoder.kind = EncoderKind::Cnn;
  m.encoder.n_layers = 2;
  m.encoder.channels = 8;
  m.encoder.kernel = 3;
  return m;
}

namespace detail {

using testing::gradcheck;
using testing::random_tensor;
using D = double;

// Reduces an op output to a scalar with a fixed random projection.
inline Tensor<D> project(const Tensor<D>& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto w = random_tensor(out.shape(), rng, false);
  return sum(mul(out, w));
}

struct OpCase {
  std::string name;
  // Builds inputs from the rng and returns them with the forward closure.
  std::function<std::pair<std::vector<Tensor<D>>, std::function<Tensor<D>(const std::vector<Tensor<D>>&)>>(
      std::mt19937_64&)>
      make;
};

inline std::vector<OpCase> op_cases() {
  using Inputs = std::vector<Tensor<D>>;
  auto r = [](Shape s, std::mt19937_64& g) { return random_tensor(std::move(s), g); };
  std::vector<OpCase> cases;
  cases.push_back({"matmul", [r](auto& g) {
                     return std::pair{Inputs{r({3, 4}, g), r({4, 2}, g)},
                                      std::function([](const Inputs& in) { return matmul(in[0], in[1]); })};
                   }});
  cases.push_back({"matmul_batched", [r](auto& g) {
                     return std::pair{Inputs{r({2, 3, 4}, g), r({2, 4, 3}, g)},
                                      std::function([](const Inputs& in) { return matmul(in[0], in[1]); })};
                   }});
  cases.push_back({"add_broadcast", [r](auto& g) {
                     return std::pair{Inputs{r({2, 3, 4}, g), r({4}, g)},
                                      std::function([](const Inputs& in) { return add(in[0], in[1]); })};
                   }});
  cases.push_back({"sub", [r](auto& g) {
                     return std::pair{Inputs{r({3, 4}, g), r({3, 4}, g)},
                                      std::function([](const Inputs& in) { return sub(in[0], in[1]); })};
                   }});
  cases.push_back({"mul_broadcast", [r](auto& g) {
                     return std::pair{Inputs{r({3, 4}, g), r({4}, g)},
                                      std::function([](const Inputs& in) { return mul(in[0], in[1]); })};
                   }});
  cases.push_back({"scale", [r](auto& g) {
                     return std::pair{Inputs{r({5}, g)},
                                      std::function([](const Inputs& in) { return scale(in[0], D(-1.7)); })};
                   }});
  cases.push_back({"square", [r](auto& g) {
                     return std::pair{Inputs{r({6}, g)},
                                      std::function([](const Inputs& in) { return square(in[0]); })};
                   }});
  cases.push_back({"sum_mean", [r](auto& g) {
                     return std::pair{Inputs{r({2, 3}, g)}, std::function([](const Inputs& in) {
                                        return add(sum(in[0]), mean(in[0]));
                                      })};
                   }});
  cases.push_back({"mean_axis", [r](auto& g) {
                     return std::pair{Inputs{r({2, 3, 4}, g)},
                                      std::function([](const Inputs& in) { return mean_axis(in[0], 1); })};
                   }});
  cases.push_back({"relu", [r](auto& g) {
                     return std::pair{Inputs{r({4, 5}, g)},
                                      std::function([](const Inputs& in) { return relu(in[0]); })};
                   }});
  cases.push_back({"gelu", [r](auto& g) {
                     return std::pair{Inputs{r({4, 5}, g)},
                                      std::function([](const Inputs& in) { return gelu(in[0]); })};
                   }});
  cases.push_back({"softmax", [r](auto& g) {
                     return std::pair{Inputs{r({3, 5}, g)},
                                      std::function([](const Inputs& in) { return softmax(in[0]); })};
                   }});
  cases.push_back({"softmax_causal", [r](auto& g) {
                     auto mask = std::make_shared<AttentionMask>(AttentionMask::causal(4));
                     return std::pair{Inputs{r({2, 2, 4, 4}, g)}, std::function([mask](const Inputs& in) {
                                        return softmax(in[0], mask.get());
                                      })};
                   }});
  cases.push_back({"layernorm", [r](auto& g) {
                     return std::pair{Inputs{r({3, 6}, g), r({6}, g), r({6}, g)},
                                      std::function([](const Inputs& in) {
                                        return layernorm(in[0], in[1], in[2]);
                                      })};
                   }});
  cases.push_back({"reshape_permute", [r](auto& g) {
                     return std::pair{Inputs{r({2, 3, 4}, g)}, std::function([](const Inputs& in) {
                                        return permute(reshape(in[0], {6, 4}), {1, 0});
                                      })};
                   }});
  cases.push_back({"transpose", [r](auto& g) {
                     return std::pair{Inputs{r({2, 3, 4}, g)},
                                      std::function([](const Inputs& in) { return transpose(in[0]); })};
                   }});
  cases.push_back({"narrow_strided", [r](auto& g) {
                     return std::pair{Inputs{r({2, 7, 3}, g)},
                                      std::function([](const Inputs& in) { return narrow(in[0], 1, 1, 3, 2); })};
                   }});
  cases.push_back({"interleave", [r](auto& g) {
                     return std::pair{Inputs{r({2, 3, 4}, g), r({2, 3, 4}, g)},
                                      std::function([](const Inputs& in) { return interleave(in[0], in[1]); })};
                   }});
  cases.push_back({"conv2d", [r](auto& g) {
                     return std::pair{Inputs{r({2, 2, 5, 5}, g), r({3, 2, 3, 3}, g), r({3}, g)},
                                      std::function([](const Inputs& in) {
                                        return conv2d(in[0], in[1], in[2], 2, 1);
                                      })};
                   }});
  cases.push_back({"conv_relu_matmul_chain", [r](auto& g) {
                     return std::pair{Inputs{r({1, 8, 8}, g), r({2, 1, 2, 2}, g), r({32, 3}, g)},
                                      std::function([](const Inputs& in) {
                                        auto h = relu(conv2d(in[0], in[1], 2, 0));
                                        return matmul(reshape(h, {1, 32}), in[2]);
                                      })};
                   }});
  return cases;
}

inline std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

}  // namespace detail

// Finite-difference check of every op on `instances` random inputs each.
inline std::vector<CheckOutcome> op_gradient_checks(std::size_t instances = 10,
                                                    std::uint64_t seed = 1234) {
  std::vector<CheckOutcome> out;
  for (const auto& c : detail::op_cases()) {
    CheckOutcome o{"grad/" + c.name, true, {}};
    double worst = 0;
    for (std::size_t i = 0; i < instances; ++i) {
      std::mt19937_64 rng(derive_seed(seed, {i, std::hash<std::string>{}(c.name)}));
      auto made = c.make(rng);
      auto& inputs = made.first;
      const auto& fn = made.second;
      const std::uint64_t proj = rng();
      auto loss_fn = [&]() { return detail::project(fn(inputs), proj); };
      const auto res = testing::gradcheck(loss_fn, inputs);
      worst = std::max(worst, res.worst_rel_err);
      if (!res.ok && o.ok) {
        o.ok = false;
        o.detail = "instance " + std::to_string(i) + ": " + res.detail;
      }
    }
    if (o.ok) o.detail = "worst rel err " + detail::sci(worst);
    out.push_back(o);
  }
  return out;
}

// Finite-difference check of the whole small model under the weighted loss,
// probing `coords` random coordinates of every parameter tensor.
inline CheckOutcome model_gradient_check(std::size_t instances = 10, std::size_t coords = 3,
                                         std::uint64_t seed = 99) {
  CheckOutcome o{"grad/e1_tiny_model", true, {}};
  double worst = 0;
  std::size_t checked = 0, kinks = 0;
  for (std::size_t inst = 0; inst < instances; ++inst) {
    const auto s = derive_seed(seed, {inst});
    IclModel<double> model(e1_tiny_model(), s);
    std::mt19937_64 rng(s);
    const std::size_t batch = 2, n = 5;
    auto images = testing::random_tensor({batch, n, 1, kImageSide, kImageSide}, rng, false);
    auto values = testing::random_tensor({batch, n}, rng, false);
    auto targets = testing::random_tensor({batch, n}, rng, false);
    const std::vector<std::size_t> valid(batch, n);
    std::vector<Tensor<double>> params;
    for (const auto& p : model.parameters()) params.push_back(p.tensor);
    auto loss_fn = [&] { return weighted_mse(model.forward(images, values, valid), targets, valid); };
    const auto res = testing::gradcheck(loss_fn, params, 1e-4, 1e-4, coords, s);
    worst = std::max(worst, res.worst_rel_err);
    checked += res.checked;
    kinks += res.kinks_skipped;
    if (!res.ok && o.ok) {
      o.ok = false;
      o.detail = "instance " + std::to_string(inst) + ": " + res.detail;
    }
  }
  if (o.ok)
    o.detail = std::to_string(checked) + " coordinates, worst rel err " + detail::sci(worst) +
               ", " + std::to_string(kinks) + " relu-kink stencils skipped";
  return o;
}

inline std::vector<CheckOutcome> oracle_checks(std::uint64_t seed = 4321) {
  std::vector<CheckOutcome> out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  {
    CheckOutcome o{"oracle/matmul", true, {}};
    for (int t = 0; t < 10 && o.ok; ++t) {
      auto a = testing::random_tensor({3, 4}, rng, false);
      auto b = testing::random_tensor({4, 2}, rng, false);
      const auto ref = testing::matmul_loop({a.data().begin(), a.data().end()},
                                            {b.data().begin(), b.data().end()}, 3, 4, 2);
      const auto got = matmul(a, b);
      for (std::size_t i = 0; i < ref.size(); ++i)
        if (std::abs(ref[i] - got.at(i)) > 1e-6) o = {o.name, false, "entry " + std::to_string(i)};
    }
    out.push_back(o);
  }
  {
    CheckOutcome o{"oracle/conv2d", true, {}};
    for (int t = 0; t < 10 && o.ok; ++t) {
      auto x = testing::random_tensor({1, 8, 8}, rng, false);
      auto k = testing::random_tensor({1, 1, 2, 2}, rng, false);
      const auto ref = testing::conv2d_loop({x.data().begin(), x.data().end()}, 1, 8, 8,
                                            {k.data().begin(), k.data().end()}, 1, 2, 2, 2, 0);
      const auto got = conv2d(x, k, 2, 0);
      for (std::size_t i = 0; i < ref.size(); ++i)
        if (std::abs(ref[i] - got.at(i)) > 1e-6) o = {o.name, false, "entry " + std::to_string(i)};
    }
    out.push_back(o);
  }
  {
    CheckOutcome o{"oracle/knn3", true, {}};
    for (int t = 0; t < 100 && o.ok; ++t) {
      SupportSet s;
      std::vector<float> q(kImagePixels);
      for (auto& v : q) v = static_cast<float>(normal(rng));
      for (int i = 0; i < 10; ++i) {
        std::vector<float> x(kImagePixels);
        for (auto& v : x) v = static_cast<float>(normal(rng));
        s.add(x, static_cast<float>(normal(rng)));
      }
      const double ref = testing::knn3_sort(s.xs, s.ys, q);
      if (std::abs(ref - knn3(s, q).value) > 1e-12) o = {o.name, false, "instance " + std::to_string(t)};
    }
    out.push_back(o);
  }
  {
    CheckOutcome o{"oracle/least_squares", true, {}};
    for (std::size_t d : {2u, 3u}) {
      const auto f = sample_target(TargetClass::Linear, 17 + d);
      SupportSet s;
      for (std::size_t i = 0; i < d * d + 3; ++i) {
        std::vector<float> x(kImagePixels);
        for (auto& v : x) v = static_cast<float>(normal(rng));
        const auto masked = mask_image(x, d);
        s.add(masked, eval_target(f, masked));
      }
      double se = 0;
      for (int q = 0; q < 20; ++q) {
        std::vector<float> x(kImagePixels);
        for (auto& v : x) v = static_cast<float>(normal(rng));
        const auto masked = mask_image(x, d);
        const double p = least_squares(s, masked).value;
        const double y = eval_target(f, masked);
        se += (p - y) * (p - y) / 20.0;
      }
      if (!(se < 1e-8)) o = {o.name, false, "d=" + std::to_string(d) + " mse " + std::to_string(se)};
    }
    out.push_back(o);
  }
  {
    CheckOutcome o{"oracle/curriculum", true, {}};
    for (std::uint64_t step = 0; step < 40000; step += 250) {
      const auto c = curriculum_at(step);
      const std::size_t d = std::min<std::size_t>(2 + step / 5000, 8);
      if (c.d != d || c.n != 5 * d + 1) o = {o.name, false, "step " + std::to_string(step)};
    }
    out.push_back(o);
  }
  {
    CheckOutcome o{"oracle/loss_weights", true, {}};
    const auto w = loss_weights<double>(4, 4);
    if (w != std::vector<double>{0.25, 1.0, 2.25, 4.0}) o = {o.name, false, "n=4 weights"};
    out.push_back(o);
  }
  return out;
}

inline bool run_selftest(std::ostream& os) {
  std::vector<CheckOutcome> all = op_gradient_checks();
  all.push_back(model_gradient_check());
  for (auto& c : oracle_checks()) all.push_back(c);
  bool ok = true;
  for (const auto& c : all) {
    os << (c.ok ? "PASS " : "FAIL ") << c.name;
    if (!c.detail.empty()) os << "  (" << c.detail << ")";
    os << '\n';
    ok &= c.ok;
  }
  os << (ok ? "selftest passed" : "selftest FAILED") << '\n';
  return ok;
}

}  // namespace icl
