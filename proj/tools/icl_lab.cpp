// Command-line front end: train, eval, baselines, plot, selftest.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

#include "icl_lab/icl_lab.hpp"
#include "icl_lab/selftest.hpp"

namespace fs = std::filesystem;

namespace {

std::uint64_t default_seed() {
  if (const char* env = std::getenv("ICL_LAB_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw icl::ConfigError("ICL_LAB_SEED: expected a non-negative integer, got '" +
                             std::string(env) + "'");
    }
  }
  return 0;
}

struct DataFlags {
  std::string data;
  bool synthetic = false;
  std::optional<std::size_t> synthetic_images;
};

void add_data_flags(CLI::App* cmd, DataFlags& f) {
  auto* data = cmd->add_option("--data", f.data, "CIFAR-10 batch file or directory");
  auto* syn = cmd->add_flag("--synthetic", f.synthetic, "Use the synthetic smooth-image pool");
  data->excludes(syn);
  cmd->add_option("--synthetic-images", f.synthetic_images, "Size of the synthetic pool");
}

void apply_data_flags(const DataFlags& f, icl::TrainConfig& cfg) {
  if (f.synthetic) cfg.data = "synthetic";
  if (!f.data.empty()) cfg.data = f.data;
  if (f.synthetic_images) cfg.synthetic_images = *f.synthetic_images;
}

void print_config(const icl::TrainConfig& cfg) {
  std::cout << "# resolved config (seed " << cfg.seed << ")\n" << icl::to_config_text(cfg);
  std::cout.flush();
}

struct TrainFlags {
  std::string experiment;
  std::string config;
  std::optional<std::uint64_t> steps;
  std::optional<std::uint64_t> seed;
  std::string out = "runs";
  std::string resume;
  std::size_t log_every = 100;
  DataFlags data;
};

int run_train(const TrainFlags& f) {
  auto cfg = icl::experiment_preset(icl::parse_experiment(f.experiment));
  cfg.seed = default_seed();
  if (!f.config.empty()) icl::apply_config(cfg, icl::read_config_file(f.config));
  if (f.steps) cfg.total_steps = *f.steps;
  if (f.seed) cfg.seed = *f.seed;
  apply_data_flags(f.data, cfg);
  cfg.validate();
  print_config(cfg);

  std::optional<icl::Checkpoint> resume;
  if (!f.resume.empty()) resume = icl::load_checkpoint(f.resume);
  const auto pool = icl::load_pool(cfg);
  std::cout << "# pool: " << pool.count << " images (" << pool.train_count() << " train, "
            << pool.eval_count() << " eval), mean " << pool.stats.mean << ", std "
            << pool.stats.std << '\n';

  fs::create_directories(f.out);
  const fs::path final_path = fs::path(f.out) / "checkpoint.bin";
  const fs::path csv_path = fs::path(f.out) / "loss.csv";
  icl::TrainHooks hooks;
  hooks.on_step = [&](const icl::LossRecord& r) {
    if (f.log_every && (r.step + 1) % f.log_every == 0)
      std::cout << "step " << r.step + 1 << "  d=" << r.d << " n=" << r.n << "  loss "
                << r.loss << std::endl;
  };
  hooks.on_checkpoint = [&](const icl::Checkpoint& c) {
    const bool final = c.step >= cfg.total_steps;
    const auto path = final ? final_path
                            : fs::path(f.out) / ("checkpoint_step" + std::to_string(c.step) + ".bin");
    icl::save_checkpoint(c, path);
    icl::write_loss_csv(c.history, csv_path);
  };
  const auto ckpt = icl::train_loop(cfg, pool, hooks, resume ? &*resume : nullptr);
  std::cout << "wrote " << final_path.string() << " and " << csv_path.string() << " ("
            << ckpt.history.size() << " steps)\n";
  return 0;
}

struct EvalFlags {
  std::string checkpoint;
  std::string function_class = "linear";
  std::size_t tasks = 200;
  std::string out;
  std::string svg;
  std::optional<std::size_t> d;
  std::optional<std::size_t> n;
  std::optional<std::uint64_t> seed;
  bool gd = false;
  std::size_t gd_tasks = 0;
  std::size_t gd_steps = 5000;
  DataFlags data;
};

icl::EvalOptions eval_options(const EvalFlags& f) {
  icl::EvalOptions opts;
  opts.gd_baselines = f.gd;
  opts.gd_tasks = f.gd_tasks;
  opts.gd.steps = f.gd_steps;
  return opts;
}

void finish_report(const icl::EvalReport& report, const EvalFlags& f) {
  icl::write_csv(report, f.out);
  if (!f.svg.empty()) icl::render_svg(report, f.svg);
  std::cout << "context_len  model_mse  ls_mse  knn_mse  mean_mse\n";
  for (const auto& r : report.rows)
    std::cout << r.context_len << "  " << (r.model_mse ? std::to_string(*r.model_mse) : "-")
              << "  " << r.ls_mse << "  " << r.knn_mse << "  " << r.mean_mse << '\n';
  std::cout << "wrote " << f.out << '\n';
}

int run_eval(const EvalFlags& f) {
  const auto ckpt = icl::load_checkpoint(f.checkpoint);
  auto cfg = ckpt.config;
  apply_data_flags(f.data, cfg);
  const auto model = icl::restore_model(ckpt);
  const std::size_t d = f.d.value_or(ckpt.curriculum.d);
  const std::size_t n = f.n.value_or(cfg.k_mult * d + 1);
  const std::uint64_t seed = f.seed.value_or(default_seed());
  const auto cls = icl::parse_target_class(f.function_class);
  print_config(cfg);
  std::cout << "# eval class=" << icl::to_string(cls) << " d=" << d << " n=" << n
            << " tasks=" << f.tasks << " seed=" << seed << '\n';
  const auto pool = icl::load_pool(cfg);
  auto opts = eval_options(f);
  opts.experiment = icl::to_string(cfg.experiment);
  opts.config_digest = icl::config_digest(cfg);
  const auto report = icl::evaluate(model, cls, d, n, f.tasks, seed, pool.eval_split(), opts);
  finish_report(report, f);
  return 0;
}

int run_baselines(const EvalFlags& f) {
  icl::TrainConfig cfg;
  cfg.seed = f.seed.value_or(default_seed());
  apply_data_flags(f.data, cfg);
  const std::size_t d = f.d.value_or(8);
  const std::size_t n = f.n.value_or(5 * d + 1);
  const auto cls = icl::parse_target_class(f.function_class);
  std::cout << "# baselines class=" << icl::to_string(cls) << " d=" << d << " n=" << n
            << " tasks=" << f.tasks << " seed=" << cfg.seed << " data=" << cfg.data << '\n';
  const auto pool = icl::load_pool(cfg);
  const auto report =
      icl::evaluate(nullptr, cls, d, n, f.tasks, cfg.seed, pool.eval_split(), eval_options(f));
  finish_report(report, f);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  icl::tune_allocator();
  CLI::App app{"In-context regression lab: train, evaluate and compare against baselines"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  TrainFlags train;
  auto* train_cmd = app.add_subcommand("train", "Train an in-context model");
  train_cmd->add_option("--experiment", train.experiment, "e1, e2, e3 or e4")
      ->required()
      ->check(CLI::IsMember({"e1", "e2", "e3", "e4"}));
  train_cmd->add_option("--config", train.config, "key=value config file")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--steps", train.steps, "Total optimizer steps");
  train_cmd->add_option("--seed", train.seed, "Master seed (default: ICL_LAB_SEED or 0)");
  train_cmd->add_option("--out", train.out, "Output directory")->capture_default_str();
  train_cmd->add_option("--resume", train.resume, "Checkpoint to resume from")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--log-every", train.log_every, "Print the loss every N steps")
      ->capture_default_str();
  add_data_flags(train_cmd, train.data);

  EvalFlags eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint against the baselines");
  eval_cmd->add_option("--checkpoint", eval.checkpoint)->required()->check(CLI::ExistingFile);
  EvalFlags base;
  auto* base_cmd = app.add_subcommand("baselines", "Baselines only, no model");
  for (auto [cmd, f] : {std::pair{eval_cmd, &eval}, std::pair{base_cmd, &base}}) {
    cmd->add_option("--class", f->function_class, "linear, convlinear, cnn or vit")
        ->check(CLI::IsMember({"linear", "convlinear", "cnn", "vit"}))
        ->capture_default_str();
    cmd->add_option("--tasks", f->tasks, "Number of sampled tasks")->capture_default_str();
    cmd->add_option("--out", f->out, "Report CSV path")->required();
    cmd->add_option("--svg", f->svg, "Also render the report as SVG");
    cmd->add_option("--d", f->d, "Mask block size");
    cmd->add_option("--n", f->n, "Prompt length");
    cmd->add_option("--seed", f->seed, "Evaluation seed (default: ICL_LAB_SEED or 0)");
    cmd->add_flag("--gd", f->gd, "Add fresh MLP/CNN/ViT columns trained by Adam");
    cmd->add_option("--gd-tasks", f->gd_tasks, "Tasks used for GD columns (0: all)");
    cmd->add_option("--gd-steps", f->gd_steps, "Adam steps per fresh model")->capture_default_str();
    add_data_flags(cmd, f->data);
  }

  std::string plot_in, plot_out;
  auto* plot_cmd = app.add_subcommand("plot", "Render a report CSV as SVG");
  plot_cmd->add_option("--in", plot_in)->required()->check(CLI::ExistingFile);
  plot_cmd->add_option("--out", plot_out)->required();

  auto* selftest_cmd = app.add_subcommand("selftest", "Gradient checks and oracle suites");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return run_train(train);
    if (eval_cmd->parsed()) return run_eval(eval);
    if (base_cmd->parsed()) return run_baselines(base);
    if (plot_cmd->parsed()) {
      icl::render_svg(icl::read_csv(plot_in), plot_out);
      std::cout << "wrote " << plot_out << '\n';
      return 0;
    }
    if (selftest_cmd->parsed()) return icl::run_selftest(std::cout) ? 0 : 1;
  } catch (const icl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
