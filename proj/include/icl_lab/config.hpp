#pragma once

// Training configuration, experiment presets, and the flat key=value text
// format used for config files and checkpoint headers.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "icl_lab/nn.hpp"
#include "icl_lab/tasks.hpp"

namespace icl {

enum class Experiment { E1, E2, E3, E4 };

inline std::string to_string(Experiment e) {
  switch (e) {
    case Experiment::E1: return "e1";
    case Experiment::E2: return "e2";
    case Experiment::E3: return "e3";
    case Experiment::E4: return "e4";
  }
  return "?";
}

inline Experiment parse_experiment(const std::string& s) {
  if (s == "e1" || s == "E1") return Experiment::E1;
  if (s == "e2" || s == "E2") return Experiment::E2;
  if (s == "e3" || s == "E3") return Experiment::E3;
  if (s == "e4" || s == "E4") return Experiment::E4;
  throw ConfigError("experiment: expected e1, e2, e3 or e4, got '" + s + "'");
}

struct TrainConfig {
  Experiment experiment = Experiment::E1;
  TargetClass target = TargetClass::Linear;
  ModelConfig model;
  double lr = 1e-4;
  std::size_t batch_size = 64;
  std::uint64_t total_steps = 500000;
  std::size_t k_mult = 5;
  std::uint64_t step_per_stage = 5000;
  std::size_t fixed_d = 0;  // 0: follow the curriculum
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_every = 0;  // 0: only at the end
  double grad_clip = 0.0;              // global-norm clip, 0: off
  std::uint64_t warmup_steps = 0;      // linear lr warmup, 0: off
  std::string data = "synthetic";      // "synthetic" or a CIFAR-10 path
  std::size_t synthetic_images = 5000;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr: must be > 0");
    if (total_steps < 1) throw ConfigError("steps: must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
    if (k_mult < 1) throw ConfigError("k_mult: must be >= 1");
    if (step_per_stage < 1) throw ConfigError("step_per_stage: must be >= 1");
    if (fixed_d > kImageSide) throw ConfigError("fixed_d: must be in [0, 8]");
    if (grad_clip < 0.0) throw ConfigError("grad_clip: must be >= 0");
    model.decoder.validate();
    model.encoder.validate(model.decoder.embed_dim);
    if (k_mult * kImageSide + 1 > model.decoder.max_pairs() && fixed_d == 0)
      throw ConfigError("decoder.max_seq_len: too short for the curriculum's longest prompt");
    if (fixed_d && k_mult * fixed_d + 1 > model.decoder.max_pairs())
      throw ConfigError("decoder.max_seq_len: too short for the fixed-d prompt");
  }
};

// Curriculum position for a config, honouring fixed_d.
inline CurriculumState curriculum_for(const TrainConfig& cfg, std::uint64_t step) {
  if (cfg.fixed_d) return {step, cfg.fixed_d, cfg.k_mult * cfg.fixed_d + 1};
  return curriculum_at(step, cfg.k_mult, cfg.step_per_stage);
}

// Paper-scale defaults per experiment (decoder 256/12/8).
inline TrainConfig experiment_preset(Experiment e) {
  TrainConfig cfg;
  cfg.experiment = e;
  auto& enc = cfg.model.encoder;
  switch (e) {
    case Experiment::E1:
      enc.kind = EncoderKind::Cnn;
      enc.n_layers = 8;
      enc.channels = 32;
      enc.kernel = 3;
      cfg.target = TargetClass::Linear;
      cfg.lr = 1e-4;
      cfg.total_steps = 500000;
      break;
    case Experiment::E2:
    case Experiment::E3:
    case Experiment::E4:
      enc.kind = EncoderKind::Vit;
      enc.n_layers = e == Experiment::E4 ? 12 : 4;
      enc.n_heads = 8;
      enc.patch_size = 4;
      enc.pos_embedding = PositionalKind::Learned;
      cfg.target = e == Experiment::E2   ? TargetClass::Linear
                   : e == Experiment::E3 ? TargetClass::TwoLayerCnn
                                         : TargetClass::FrozenVit;
      cfg.lr = e == Experiment::E4 ? 1e-5 : 1e-4;
      cfg.total_steps = e == Experiment::E4 ? 80000 : 300000;
      break;
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// key=value text

using KeyValues = std::map<std::string, std::string>;

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// One `key = value` per line; blank lines and '#' comments are skipped.
inline KeyValues parse_key_values(const std::string& text) {
  KeyValues out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

inline KeyValues read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

namespace detail {

template <typename U>
U parse_unsigned(const std::string& key, const std::string& v) {
  U out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// Applies every key to cfg; unknown keys and bad values name the key.
inline void apply_config(TrainConfig& cfg, const KeyValues& kv) {
  using detail::parse_double;
  using detail::parse_unsigned;
  auto& dec = cfg.model.decoder;
  auto& enc = cfg.model.encoder;
  for (const auto& [key, value] : kv) {
    if (key == "experiment") cfg.experiment = parse_experiment(value);
    else if (key == "target_class") {
      try {
        cfg.target = parse_target_class(value);
      } catch (const ConfigError& e) {
        throw ConfigError("target_class: " + std::string(e.what()));
      }
    }
    else if (key == "lr") cfg.lr = parse_double(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_unsigned<std::size_t>(key, value);
    else if (key == "steps") cfg.total_steps = parse_unsigned<std::uint64_t>(key, value);
    else if (key == "k_mult") cfg.k_mult = parse_unsigned<std::size_t>(key, value);
    else if (key == "step_per_stage") cfg.step_per_stage = parse_unsigned<std::uint64_t>(key, value);
    else if (key == "fixed_d") cfg.fixed_d = parse_unsigned<std::size_t>(key, value);
    else if (key == "seed") cfg.seed = parse_unsigned<std::uint64_t>(key, value);
    else if (key == "checkpoint_every") cfg.checkpoint_every = parse_unsigned<std::uint64_t>(key, value);
    else if (key == "grad_clip") cfg.grad_clip = parse_double(key, value);
    else if (key == "warmup_steps") cfg.warmup_steps = parse_unsigned<std::uint64_t>(key, value);
    else if (key == "data") cfg.data = value;
    else if (key == "synthetic_images") cfg.synthetic_images = parse_unsigned<std::size_t>(key, value);
    else if (key == "decoder.embed_dim") dec.embed_dim = parse_unsigned<std::size_t>(key, value);
    else if (key == "decoder.n_layers") dec.n_layers = parse_unsigned<std::size_t>(key, value);
    else if (key == "decoder.n_heads") dec.n_heads = parse_unsigned<std::size_t>(key, value);
    else if (key == "decoder.max_seq_len") dec.max_seq_len = parse_unsigned<std::size_t>(key, value);
    else if (key == "encoder.kind") {
      if (value == "cnn") enc.kind = EncoderKind::Cnn;
      else if (value == "vit") enc.kind = EncoderKind::Vit;
      else throw ConfigError(key + ": expected cnn or vit, got '" + value + "'");
    }
    else if (key == "encoder.n_layers") enc.n_layers = parse_unsigned<std::size_t>(key, value);
    else if (key == "encoder.channels") enc.channels = parse_unsigned<std::size_t>(key, value);
    else if (key == "encoder.kernel") enc.kernel = parse_unsigned<std::size_t>(key, value);
    else if (key == "encoder.n_heads") enc.n_heads = parse_unsigned<std::size_t>(key, value);
    else if (key == "encoder.patch_size") enc.patch_size = parse_unsigned<std::size_t>(key, value);
    else if (key == "encoder.width") enc.width = parse_unsigned<std::size_t>(key, value);
    else if (key == "encoder.pos_embedding") {
      if (value == "learned") enc.pos_embedding = PositionalKind::Learned;
      else if (value == "sinusoidal") enc.pos_embedding = PositionalKind::Sinusoidal;
      else throw ConfigError(key + ": expected learned or sinusoidal, got '" + value + "'");
    }
    else throw ConfigError("unknown config key '" + key + "'");
  }
}

// Canonical text: every key, fixed order. Also the digest input.
inline std::string to_config_text(const TrainConfig& cfg) {
  const auto& dec = cfg.model.decoder;
  const auto& enc = cfg.model.encoder;
  std::ostringstream os;
  os << "experiment=" << to_string(cfg.experiment) << '\n'
     << "target_class=" << to_string(cfg.target) << '\n'
     << "lr=" << detail::format_double(cfg.lr) << '\n'
     << "batch_size=" << cfg.batch_size << '\n'
     << "steps=" << cfg.total_steps << '\n'
     << "k_mult=" << cfg.k_mult << '\n'
     << "step_per_stage=" << cfg.step_per_stage << '\n'
     << "fixed_d=" << cfg.fixed_d << '\n'
     << "seed=" << cfg.seed << '\n'
     << "checkpoint_every=" << cfg.checkpoint_every << '\n'
     << "grad_clip=" << detail::format_double(cfg.grad_clip) << '\n'
     << "warmup_steps=" << cfg.warmup_steps << '\n'
     << "data=" << cfg.data << '\n'
     << "synthetic_images=" << cfg.synthetic_images << '\n'
     << "decoder.embed_dim=" << dec.embed_dim << '\n'
     << "decoder.n_layers=" << dec.n_layers << '\n'
     << "decoder.n_heads=" << dec.n_heads << '\n'
     << "decoder.max_seq_len=" << dec.max_seq_len << '\n'
     << "encoder.kind=" << (enc.kind == EncoderKind::Cnn ? "cnn" : "vit") << '\n'
     << "encoder.n_layers=" << enc.n_layers << '\n'
     << "encoder.channels=" << enc.channels << '\n'
     << "encoder.kernel=" << enc.kernel << '\n'
     << "encoder.n_heads=" << enc.n_heads << '\n'
     << "encoder.patch_size=" << enc.patch_size << '\n'
     << "encoder.width=" << enc.width << '\n'
     << "encoder.pos_embedding="
     << (enc.pos_embedding == PositionalKind::Learned ? "learned" : "sinusoidal") << '\n';
  return os.str();
}

// FNV-1a, 64-bit.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t config_digest(const TrainConfig& cfg) {
  return fnv1a(to_config_text(cfg));
}

}  // namespace icl
