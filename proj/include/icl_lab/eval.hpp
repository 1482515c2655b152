#pragma once

// Error-vs-context-length evaluation of an in-context model against the
// baselines, plus CSV / SVG report output.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "icl_lab/baselines.hpp"
#include "icl_lab/nn.hpp"
#include "icl_lab/tasks.hpp"

namespace icl {

struct EvalRow {
  std::size_t context_len = 0;
  std::optional<double> model_mse;
  double ls_mse = 0.0;
  double knn_mse = 0.0;
  double mean_mse = 0.0;
  std::optional<double> gd_mlp_mse;
  std::optional<double> gd_cnn_mse;
  std::optional<double> gd_vit_mse;

  bool operator==(const EvalRow&) const = default;
};

struct EvalReport {
  std::string experiment;
  TargetClass function_class = TargetClass::Linear;
  std::size_t n_tasks = 0;
  std::size_t d = 0;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::uint64_t config_digest = 0;
  bool has_gd = false;
  std::vector<EvalRow> rows;

  const EvalRow& at_context(std::size_t m) const {
    for (const auto& r : rows)
      if (r.context_len == m) return r;
    throw ContractError("report has no row for context length " + std::to_string(m));
  }
};

struct EvalOptions {
  std::size_t batch = 64;
  // Fresh-model columns, trained on a subsample of prefix lengths.
  bool gd_baselines = false;
  std::size_t gd_tasks = 0;  // 0: every task
  FreshOptions gd;
  // Replaces the kernel of ConvLinear targets (test hook).
  std::optional<std::array<float, 9>> kernel_override;
  std::string experiment;
  std::uint64_t config_digest = 0;
};

// Prefix lengths at which fresh models are trained: 1, ceil(n/4), ceil(n/2), n-1.
inline std::vector<std::size_t> gd_prefixes(std::size_t n) {
  std::vector<std::size_t> m{1, (n + 3) / 4, (n + 1) / 2, n - 1};
  std::sort(m.begin(), m.end());
  m.erase(std::unique(m.begin(), m.end()), m.end());
  m.erase(std::remove_if(m.begin(), m.end(), [n](std::size_t v) { return v < 1 || v > n - 1; }),
          m.end());
  return m;
}

// Writes the prompt of evaluation task `task` into `row`. The target and the
// image draw depend only on (seed, task).
inline TargetFunction task_prompt(PromptBatch& prompt, std::size_t row, TargetClass cls,
                                  std::size_t d, std::size_t n, std::uint64_t seed,
                                  std::size_t task, std::span<const float> eval_images,
                                  const EvalOptions& opts = {}) {
  auto f = sample_target(cls, derive_seed(seed, {0xe7a1, task}));
  if (opts.kernel_override)
    if (auto* conv = std::get_if<ConvLinearTarget>(&f)) conv->kernel = *opts.kernel_override;
  std::mt19937_64 rng(derive_seed(seed, {0x1a6e, task}));
  build_prompt(prompt, row, eval_images, f, d, n, rng);
  return f;
}

// Per-task streams are keyed by (seed, task), so the sampled prompts do not
// depend on batching. The model (when given) and every baseline see the same
// prompts and answer the same query x_{m+1} at prefix m.
inline EvalReport evaluate(const IclModel<float>* model, TargetClass cls, std::size_t d,
                           std::size_t n, std::size_t n_tasks, std::uint64_t seed,
                           std::span<const float> eval_images, const EvalOptions& opts = {}) {
  if (n < 2) throw ContractError("evaluation needs n >= 2");
  if (n_tasks < 1) throw ContractError("evaluation needs at least one task");
  if (d < 1 || d > kImageSide) throw ContractError("d must be in [1, 8]");
  if (model && n > model->config().decoder.max_pairs())
    throw CapacityError("n = " + std::to_string(n) + " exceeds model capacity of " +
                        std::to_string(model->config().decoder.max_pairs()) + " pairs");
  EvalReport report;
  report.experiment = opts.experiment;
  report.function_class = cls;
  report.n_tasks = n_tasks;
  report.d = d;
  report.n = n;
  report.seed = seed;
  report.config_digest = opts.config_digest;
  report.has_gd = opts.gd_baselines;

  const std::size_t rows = n - 1;
  std::vector<double> model_se(rows, 0), ls_se(rows, 0), knn_se(rows, 0), mean_se(rows, 0);
  const auto gd_ms = gd_prefixes(n);
  std::array<std::vector<double>, 3> gd_se;
  for (auto& v : gd_se) v.assign(rows, 0.0);
  const std::size_t gd_tasks =
      opts.gd_tasks == 0 ? n_tasks : std::min(opts.gd_tasks, n_tasks);

  const std::size_t chunk = std::max<std::size_t>(1, opts.batch);
  for (std::size_t start = 0; start < n_tasks; start += chunk) {
    const std::size_t count = std::min(chunk, n_tasks - start);
    auto prompt = PromptBatch::empty(count, n, d);
    for (std::size_t b = 0; b < count; ++b)
      task_prompt(prompt, b, cls, d, n, seed, start + b, eval_images, opts);
    std::optional<Tensor<float>> preds;
    if (model) preds = icl_forward(*model, prompt);
    for (std::size_t b = 0; b < count; ++b) {
      const std::size_t task = start + b;
      SupportSet support;
      support.d = d;
      for (std::size_t m = 1; m < n; ++m) {
        support.add({prompt.image(b, m - 1), kImagePixels}, prompt.value(b, m - 1));
        const std::span<const float> query(prompt.image(b, m), kImagePixels);
        const double y = prompt.value(b, m);
        auto se = [y](double p) { return (p - y) * (p - y); };
        if (preds) model_se[m - 1] += se(preds->at(b * n + m));
        ls_se[m - 1] += se(least_squares(support, query).value);
        knn_se[m - 1] += se(knn3(support, query).value);
        mean_se[m - 1] += se(mean_predict(support).value);
        if (opts.gd_baselines && task < gd_tasks &&
            std::find(gd_ms.begin(), gd_ms.end(), m) != gd_ms.end()) {
          const FreshKind kinds[3] = {FreshKind::Mlp, FreshKind::Cnn, FreshKind::Vit};
          for (std::size_t k = 0; k < 3; ++k) {
            auto fo = opts.gd;
            fo.seed = derive_seed(seed, {0x9d, task, m, k});
            const auto pred = gd_train_fresh(kinds[k], support, fo);
            gd_se[k][m - 1] += se(pred(query));
          }
        }
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(n_tasks);
  const double gd_inv = 1.0 / static_cast<double>(gd_tasks);
  for (std::size_t m = 1; m < n; ++m) {
    EvalRow row;
    row.context_len = m;
    if (model) row.model_mse = model_se[m - 1] * inv;
    row.ls_mse = ls_se[m - 1] * inv;
    row.knn_mse = knn_se[m - 1] * inv;
    row.mean_mse = mean_se[m - 1] * inv;
    if (opts.gd_baselines && std::find(gd_ms.begin(), gd_ms.end(), m) != gd_ms.end()) {
      row.gd_mlp_mse = gd_se[0][m - 1] * gd_inv;
      row.gd_cnn_mse = gd_se[1][m - 1] * gd_inv;
      row.gd_vit_mse = gd_se[2][m - 1] * gd_inv;
    }
    report.rows.push_back(row);
  }
  return report;
}

inline EvalReport evaluate(const IclModel<float>& model, TargetClass cls, std::size_t d,
                           std::size_t n, std::size_t n_tasks, std::uint64_t seed,
                           std::span<const float> eval_images, const EvalOptions& opts = {}) {
  return evaluate(&model, cls, d, n, n_tasks, seed, eval_images, opts);
}

// Same protocol on linear-convolution targets.
inline EvalReport evaluate_ood(const IclModel<float>& model, std::size_t d, std::size_t n,
                               std::size_t n_tasks, std::uint64_t seed,
                               std::span<const float> eval_images, const EvalOptions& opts = {}) {
  return evaluate(&model, TargetClass::ConvLinear, d, n, n_tasks, seed, eval_images, opts);
}

// ---------------------------------------------------------------------------
// CSV

inline constexpr const char* kReportHeader = "context_len,model_mse,ls_mse,knn_mse,mean_mse";
inline constexpr const char* kReportGdHeader = ",gd_mlp_mse,gd_cnn_mse,gd_vit_mse";

namespace detail {

inline std::string cell(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string cell(const std::optional<double>& v) { return v ? cell(*v) : std::string{}; }

inline std::optional<double> parse_cell(const std::string& s, std::size_t line) {
  if (s.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("report line " + std::to_string(line) + ": bad number '" + s + "'");
  }
}

}  // namespace detail

inline void write_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write report " + path.string());
  out << kReportHeader << (report.has_gd ? kReportGdHeader : "") << '\n';
  for (const auto& r : report.rows) {
    out << r.context_len << ',' << detail::cell(r.model_mse) << ',' << detail::cell(r.ls_mse)
        << ',' << detail::cell(r.knn_mse) << ',' << detail::cell(r.mean_mse);
    if (report.has_gd)
      out << ',' << detail::cell(r.gd_mlp_mse) << ',' << detail::cell(r.gd_cnn_mse) << ','
          << detail::cell(r.gd_vit_mse);
    out << '\n';
  }
  if (!out) throw IoError("failed writing report " + path.string());
}

// Reads the rows back; metadata fields other than has_gd are not stored.
inline EvalReport read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read report " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError("report is empty");
  EvalReport report;
  const std::string base = kReportHeader;
  if (line == base) report.has_gd = false;
  else if (line == base + kReportGdHeader) report.has_gd = true;
  else throw FormatError("unexpected report header: " + line);
  const std::size_t columns = report.has_gd ? 8 : 5;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != columns)
      throw FormatError("report line " + std::to_string(lineno) + ": expected " +
                        std::to_string(columns) + " columns");
    EvalRow r;
    const auto m = detail::parse_cell(cells[0], lineno);
    if (!m) throw FormatError("report line " + std::to_string(lineno) + ": missing context_len");
    r.context_len = static_cast<std::size_t>(*m);
    r.model_mse = detail::parse_cell(cells[1], lineno);
    r.ls_mse = detail::parse_cell(cells[2], lineno).value_or(0.0);
    r.knn_mse = detail::parse_cell(cells[3], lineno).value_or(0.0);
    r.mean_mse = detail::parse_cell(cells[4], lineno).value_or(0.0);
    if (report.has_gd) {
      r.gd_mlp_mse = detail::parse_cell(cells[5], lineno);
      r.gd_cnn_mse = detail::parse_cell(cells[6], lineno);
      r.gd_vit_mse = detail::parse_cell(cells[7], lineno);
    }
    report.rows.push_back(r);
  }
  report.n = report.rows.size() + 1;
  return report;
}

// ---------------------------------------------------------------------------
// SVG

// Log-scale line plot of every present column against context length.
inline std::string render_svg(const EvalReport& report) {
  struct Series {
    const char* name;
    const char* color;
    std::optional<double> EvalRow::*opt = nullptr;
    double EvalRow::*val = nullptr;
  };
  const std::vector<Series> all = {
      {"model", "#d62728", &EvalRow::model_mse, nullptr},
      {"least squares", "#1f77b4", nullptr, &EvalRow::ls_mse},
      {"3-NN", "#2ca02c", nullptr, &EvalRow::knn_mse},
      {"mean", "#7f7f7f", nullptr, &EvalRow::mean_mse},
      {"GD MLP", "#9467bd", &EvalRow::gd_mlp_mse, nullptr},
      {"GD CNN", "#8c564b", &EvalRow::gd_cnn_mse, nullptr},
      {"GD ViT", "#e377c2", &EvalRow::gd_vit_mse, nullptr},
  };
  constexpr double floor_v = 1e-12;
  using Points = std::vector<std::pair<double, double>>;
  std::vector<std::pair<const Series*, Points>> present;
  double lo = 1e300, hi = -1e300, xmax = 1;
  for (const auto& s : all) {
    Points pts;
    for (const auto& r : report.rows) {
      std::optional<double> v = s.opt ? r.*(s.opt) : std::optional<double>(r.*(s.val));
      if (!v) continue;
      const double y = std::log10(std::max(*v, floor_v));
      pts.emplace_back(static_cast<double>(r.context_len), y);
      lo = std::min(lo, y);
      hi = std::max(hi, y);
      xmax = std::max(xmax, static_cast<double>(r.context_len));
    }
    if (!pts.empty()) present.emplace_back(&s, std::move(pts));
  }
  if (present.empty()) lo = 0, hi = 1;
  lo = std::floor(lo);
  hi = std::ceil(hi);
  if (hi <= lo) hi = lo + 1;

  constexpr double W = 720, H = 440, left = 70, right = 170, top = 30, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  auto px = [&](double x) { return left + (xmax > 1 ? (x - 1) / (xmax - 1) : 0.5) * pw; };
  auto py = [&](double y) { return top + (hi - y) / (hi - lo) * ph; };
  char buf[256];
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << ' ' << H << "\">\n"
     << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf,
                "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"none\" stroke=\"black\"/>\n",
                left, top, pw, ph);
  os << buf;
  for (double e = lo; e <= hi; e += 1) {
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" text-anchor=\"end\">1e%d</text>\n",
                  left - 6, py(e) + 4, static_cast<int>(e));
    os << buf;
  }
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" text-anchor=\"middle\">in-context examples</text>\n",
                left + pw / 2, H - 12);
  os << buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"16\" y=\"%.1f\" font-size=\"12\" transform=\"rotate(-90 16 %.1f)\" text-anchor=\"middle\">squared error</text>\n",
                top + ph / 2, top + ph / 2);
  os << buf;
  std::size_t legend = 0;
  for (const auto& [series, pts] : present) {
    os << "<polyline fill=\"none\" stroke=\"" << series->color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", i ? " " : "", px(pts[i].first), py(pts[i].second));
      os << buf;
    }
    os << "\"/>\n";
    const double ly = top + 14 + 18 * static_cast<double>(legend++);
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"%s\" stroke-width=\"2\"/>\n"
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\">%s</text>\n",
                  W - right + 12, ly, W - right + 36, ly, series->color, W - right + 42, ly + 4,
                  series->name);
    os << buf;
  }
  os << "</svg>\n";
  return os.str();
}

inline void render_svg(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write plot " + path.string());
  out << render_svg(report);
  if (!out) throw IoError("failed writing plot " + path.string());
}

}  // namespace icl
