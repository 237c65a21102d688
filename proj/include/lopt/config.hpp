#pragma once

// Experiment configuration: flat `key = value` text with preset inheritance.
//
//   preset = rugged-desk
//   seed = 7
//   train.B = 10
//
// Resolution starts from the base defaults, applies the named preset, then
// the explicit overrides. serialize() emits every resolved key in canonical
// form, so parse(serialize(c)) == c.

#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lopt/archive.hpp"
#include "lopt/errors.hpp"
#include "lopt/inference.hpp"
#include "lopt/models.hpp"
#include "lopt/objectives.hpp"
#include "lopt/optimizers.hpp"
#include "lopt/trainer.hpp"

namespace lopt {

using ConfigMap = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline const ConfigMap& base_defaults() {
  static const ConfigMap defaults = {
      {"preset", "rugged-desk"},
      {"seed", "1"},
      {"output.dir", "out"},
      {"model.kind", "rugged_decoder"},
      {"model.inner", "rugged_decoder"},
      {"model.dx", "2"},
      {"model.dy", "8"},
      {"model.features", "24"},
      {"model.frequency", "4"},
      {"model.amplitude", "1"},
      {"model.linear_gain", "1"},
      {"model.hidden", "32"},
      {"model.fit_samples", "512"},
      {"model.fit_epochs", "1500"},
      {"model.fit_lr", "0.01"},
      {"model.anchor_sigma", "0.5"},
      {"theta.dz", "4"},
      {"theta.hidden", "64"},
      {"theta.slope", "0.2"},
      {"objective.kind", "l2"},
      {"objective.mask", ""},
      {"objective.feature_rows", "4"},
      {"objective.decay", "0"},
      {"prior.sigma", "4"},
      {"prior.noise", "0"},
      {"train.mode", "cd"},
      {"train.B", "50"},
      {"train.N", "64"},
      {"train.T", "20"},
      {"train.z_opt", "adam"},
      {"train.z_lr", "0.03"},
      {"train.theta_opt", "adamw"},
      {"train.theta_lr", "0.001"},
      {"train.weight_decay", "0.1"},
      {"train.init", "zero"},
      {"train.sigma", "1"},
      {"train.checkpoint_every", "0"},
      {"infer.steps", "20"},
      {"infer.opt", "adam"},
      {"infer.lr", "0.03"},
      {"infer.init", "zero"},
      {"infer.sigma", "1"},
      {"infer.hypotheses", "1"},
      {"eval.heldout", "100"},
  };
  return defaults;
}

inline const std::map<std::string, ConfigMap>& presets() {
  static const std::map<std::string, ConfigMap> table = {
      {"rugged-desk", {}},
      // GAN inversion hyperparameters with the tiny decoder standing in for
      // the generator and a random-projection feature term.
      {"gan-like",
       {{"model.kind", "mini_decoder"}, {"model.dx", "32"}, {"model.dy", "128"},
        {"model.hidden", "128"}, {"theta.dz", "32"}, {"theta.hidden", "1024"},
        {"objective.kind", "l2_plus_feature"}, {"objective.feature_rows", "64"},
        {"train.B", "500"}, {"train.N", "256"}, {"train.T", "20"}, {"train.z_lr", "0.1"},
        {"train.theta_lr", "0.0001"}, {"train.weight_decay", "0.1"}, {"infer.steps", "2000"},
        {"infer.lr", "0.1"}, {"prior.sigma", "1"}}},
      {"pose-like",
       {{"model.kind", "mini_decoder"}, {"model.dx", "32"}, {"model.dy", "63"},
        {"model.hidden", "128"}, {"theta.dz", "128"}, {"theta.hidden", "512"},
        {"objective.kind", "l2"}, {"train.B", "500"}, {"train.N", "40960"}, {"train.T", "200"},
        {"train.z_lr", "0.1"}, {"train.theta_lr", "0.005"}, {"train.weight_decay", "0.1"},
        {"infer.steps", "200"}, {"infer.lr", "0.1"}, {"prior.sigma", "1"}}},
      {"defense-like",
       {{"model.kind", "additive_correction"}, {"model.inner", "rugged_decoder"},
        {"model.dx", "3072"}, {"model.dy", "128"}, {"model.features", "256"},
        {"theta.dz", "3072"}, {"theta.hidden", "3072"}, {"objective.kind", "task_plus_decay"},
        {"objective.decay", "1"}, {"train.B", "70"}, {"train.N", "5120"}, {"train.T", "5"},
        {"train.z_lr", "0.000784313725490196"}, {"train.theta_lr", "0.0001"},
        {"train.weight_decay", "0.1"}, {"train.init", "gaussian"},
        {"train.sigma", "0.03137254901960784"}, {"infer.steps", "5"},
        {"infer.lr", "0.000784313725490196"}, {"infer.init", "gaussian"},
        {"infer.sigma", "0.03137254901960784"}, {"prior.sigma", "1"}}},
  };
  return table;
}

}  // namespace detail

inline std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& [k, v] : detail::presets()) out.push_back(k);
  return out;
}

// Raw `key = value` pairs, in file order semantics (last wins).
inline ConfigMap parse_config_text(std::string_view text) {
  ConfigMap out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    out[key] = detail::trim(std::string_view(t).substr(eq + 1));
  }
  return out;
}

// Base defaults <- preset <- overrides. Unknown keys are rejected.
inline ConfigMap resolve_config(const ConfigMap& overrides) {
  ConfigMap out = detail::base_defaults();
  const auto pit = overrides.find("preset");
  const std::string preset = pit == overrides.end() ? out.at("preset") : pit->second;
  const auto& table = detail::presets();
  const auto it = table.find(preset);
  if (it == table.end()) throw ConfigError("unknown preset '" + preset + "'");
  for (const auto& [k, v] : it->second) out[k] = v;
  out["preset"] = preset;
  for (const auto& [k, v] : overrides) {
    if (!out.count(k)) throw ConfigError("unknown config key '" + k + "'");
    out[k] = v;
  }
  return out;
}

struct ModelConfig {
  ForwardKind kind = ForwardKind::rugged_decoder;
  ForwardKind inner = ForwardKind::rugged_decoder;  // additive_correction only
  std::size_t dx = 2;
  std::size_t dy = 8;
  std::size_t features = 24;
  double frequency = 4.0;
  double amplitude = 1.0;
  double linear_gain = 1.0;
  std::size_t hidden = 32;
  std::size_t fit_samples = 512;
  std::size_t fit_epochs = 1500;
  double fit_lr = 0.01;
  double anchor_sigma = 0.5;
};

struct ThetaConfig {
  std::size_t dz = 4;
  std::size_t hidden = 64;
  double slope = 0.2;
};

struct ObjectiveConfig {
  ObjectiveKind kind = ObjectiveKind::l2;
  std::string mask;  // literal as written
  std::size_t feature_rows = 4;
  double decay = 0.0;
};

struct ExperimentConfig {
  std::string preset;
  std::uint64_t seed = 1;
  std::string output_dir;
  ModelConfig model;
  ThetaConfig theta;
  ObjectiveConfig objective;
  double prior_sigma = 4.0;
  double prior_noise = 0.0;
  bool online = false;
  std::size_t checkpoint_every = 0;
  TrainConfig train;
  InferenceConfig infer;
  std::size_t heldout = 100;

  ConfigMap to_map() const;
  std::string serialize() const;
  std::uint64_t hash() const;
  std::string hash_hex() const;
};

namespace detail {

inline std::size_t to_size(const ConfigMap& m, const std::string& key) {
  const auto& v = m.at(key);
  try {
    std::size_t used = 0;
    const auto r = std::stoull(v, &used);
    if (used != v.size() || v.front() == '-') throw std::invalid_argument(v);
    return static_cast<std::size_t>(r);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
}

inline double to_double(const ConfigMap& m, const std::string& key) {
  try {
    return parse_double(m.at(key));
  } catch (const IoError&) {
    throw ConfigError("config key '" + key + "' expects a number, got '" + m.at(key) + "'");
  }
}

inline ForwardKind parse_forward_kind(const std::string& s) {
  if (s == "rugged_decoder") return ForwardKind::rugged_decoder;
  if (s == "mini_decoder") return ForwardKind::mini_decoder;
  if (s == "additive_correction") return ForwardKind::additive_correction;
  throw ConfigError("unknown model kind '" + s + "'");
}

}  // namespace detail

inline ExperimentConfig config_from_map(const ConfigMap& raw) {
  const ConfigMap m = resolve_config(raw);
  using detail::to_double;
  using detail::to_size;
  ExperimentConfig c;
  try {
    c.preset = m.at("preset");
    c.seed = std::stoull(m.at("seed"));
  } catch (const std::exception&) {
    throw ConfigError("config key 'seed' expects an unsigned integer");
  }
  c.output_dir = m.at("output.dir");
  c.model.kind = detail::parse_forward_kind(m.at("model.kind"));
  c.model.inner = detail::parse_forward_kind(m.at("model.inner"));
  if (c.model.inner == ForwardKind::additive_correction) {
    throw ConfigError("model.inner cannot itself be additive_correction");
  }
  c.model.dx = to_size(m, "model.dx");
  c.model.dy = to_size(m, "model.dy");
  c.model.features = to_size(m, "model.features");
  c.model.frequency = to_double(m, "model.frequency");
  c.model.amplitude = to_double(m, "model.amplitude");
  c.model.linear_gain = to_double(m, "model.linear_gain");
  c.model.hidden = to_size(m, "model.hidden");
  c.model.fit_samples = to_size(m, "model.fit_samples");
  c.model.fit_epochs = to_size(m, "model.fit_epochs");
  c.model.fit_lr = to_double(m, "model.fit_lr");
  c.model.anchor_sigma = to_double(m, "model.anchor_sigma");
  c.theta.dz = to_size(m, "theta.dz");
  c.theta.hidden = to_size(m, "theta.hidden");
  c.theta.slope = to_double(m, "theta.slope");
  c.objective.kind = parse_objective_kind(m.at("objective.kind"));
  c.objective.mask = m.at("objective.mask");
  c.objective.feature_rows = to_size(m, "objective.feature_rows");
  c.objective.decay = to_double(m, "objective.decay");
  c.prior_sigma = to_double(m, "prior.sigma");
  c.prior_noise = to_double(m, "prior.noise");
  const auto& mode = m.at("train.mode");
  if (mode != "cd" && mode != "online") throw ConfigError("train.mode must be cd or online");
  c.online = mode == "online";
  c.train.rounds = to_size(m, "train.B");
  c.train.samples = to_size(m, "train.N");
  c.train.steps = to_size(m, "train.T");
  c.train.z_optimizer = {parse_optimizer_kind(m.at("train.z_opt")), to_double(m, "train.z_lr")};
  c.train.theta_optimizer = {parse_optimizer_kind(m.at("train.theta_opt")),
                             to_double(m, "train.theta_lr")};
  c.train.theta_optimizer.weight_decay = to_double(m, "train.weight_decay");
  c.train.init = parse_init_policy(m.at("train.init"));
  c.train.sigma = to_double(m, "train.sigma");
  c.train.seed = c.seed;
  c.checkpoint_every = to_size(m, "train.checkpoint_every");
  c.infer.steps = to_size(m, "infer.steps");
  c.infer.optimizer = {parse_optimizer_kind(m.at("infer.opt")), to_double(m, "infer.lr")};
  c.infer.init = parse_init_policy(m.at("infer.init"));
  c.infer.sigma = to_double(m, "infer.sigma");
  c.infer.hypotheses = to_size(m, "infer.hypotheses");
  c.infer.seed = c.seed;
  c.heldout = to_size(m, "eval.heldout");

  if (c.model.dx == 0 || c.model.dy == 0 || c.theta.dz == 0 || c.theta.hidden == 0) {
    throw ConfigError("model and mapping dimensions must be positive");
  }
  if (!(c.theta.slope >= 0.0)) throw ConfigError("theta.slope must be >= 0");
  if (!(c.prior_sigma > 0.0) || !(c.prior_noise >= 0.0)) throw ConfigError("bad prior settings");
  c.train.validate();
  c.infer.validate();
  if (!c.objective.mask.empty()) (void)parse_mask(c.objective.mask, c.model.dy);
  return c;
}

inline ConfigMap ExperimentConfig::to_map() const {
  auto d = [](double v) { return format_double(v); };
  auto n = [](std::size_t v) { return std::to_string(v); };
  return {
      {"preset", preset},
      {"seed", std::to_string(seed)},
      {"output.dir", output_dir},
      {"model.kind", std::string(to_string(model.kind))},
      {"model.inner", std::string(to_string(model.inner))},
      {"model.dx", n(model.dx)},
      {"model.dy", n(model.dy)},
      {"model.features", n(model.features)},
      {"model.frequency", d(model.frequency)},
      {"model.amplitude", d(model.amplitude)},
      {"model.linear_gain", d(model.linear_gain)},
      {"model.hidden", n(model.hidden)},
      {"model.fit_samples", n(model.fit_samples)},
      {"model.fit_epochs", n(model.fit_epochs)},
      {"model.fit_lr", d(model.fit_lr)},
      {"model.anchor_sigma", d(model.anchor_sigma)},
      {"theta.dz", n(theta.dz)},
      {"theta.hidden", n(theta.hidden)},
      {"theta.slope", d(theta.slope)},
      {"objective.kind", std::string(to_string(objective.kind))},
      {"objective.mask", objective.mask},
      {"objective.feature_rows", n(objective.feature_rows)},
      {"objective.decay", d(objective.decay)},
      {"prior.sigma", d(prior_sigma)},
      {"prior.noise", d(prior_noise)},
      {"train.mode", online ? "online" : "cd"},
      {"train.B", n(train.rounds)},
      {"train.N", n(train.samples)},
      {"train.T", n(train.steps)},
      {"train.z_opt", std::string(to_string(train.z_optimizer.kind))},
      {"train.z_lr", d(train.z_optimizer.lr)},
      {"train.theta_opt", std::string(to_string(train.theta_optimizer.kind))},
      {"train.theta_lr", d(train.theta_optimizer.lr)},
      {"train.weight_decay", d(train.theta_optimizer.weight_decay)},
      {"train.init", std::string(to_string(train.init))},
      {"train.sigma", d(train.sigma)},
      {"train.checkpoint_every", n(checkpoint_every)},
      {"infer.steps", n(infer.steps)},
      {"infer.opt", std::string(to_string(infer.optimizer.kind))},
      {"infer.lr", d(infer.optimizer.lr)},
      {"infer.init", std::string(to_string(infer.init))},
      {"infer.sigma", d(infer.sigma)},
      {"infer.hypotheses", n(infer.hypotheses)},
      {"eval.heldout", n(heldout)},
  };
}

inline std::string serialize_config(const ConfigMap& m) {
  std::ostringstream out;
  for (const auto& [k, v] : m) out << k << " = " << v << '\n';
  return out.str();
}

inline std::string ExperimentConfig::serialize() const { return serialize_config(to_map()); }

// FNV-1a over the serialized form. Where the outputs go is not part of the
// experiment, so output.dir is left out.
inline std::uint64_t ExperimentConfig::hash() const {
  ConfigMap m = to_map();
  m.erase("output.dir");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : serialize_config(m)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string ExperimentConfig::hash_hex() const {
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << hash();
  return out.str();
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return a.to_map() == b.to_map();
}

inline ExperimentConfig parse_config(std::string_view text) {
  return config_from_map(parse_config_text(text));
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

// ---------------------------------------------------------------------------
// Building runtime objects from a config

// Forward model with seeded weights. Mini decoders are fitted here on the
// seeded synthetic decoder dataset.
inline ForwardModel build_forward_model(const ExperimentConfig& c) {
  auto build = [&](ForwardKind kind) -> ForwardModel {
    if (kind == ForwardKind::rugged_decoder) {
      RuggedOptions o;
      o.dx = c.model.dx;
      o.dy = c.model.dy;
      o.features = c.model.features;
      o.frequency = c.model.frequency;
      o.amplitude = c.model.amplitude;
      o.linear_gain = c.model.linear_gain;
      o.seed = c.seed;
      return ForwardModel(make_rugged_decoder(o));
    }
    MiniDecoder m;
    m.dx = c.model.dx;
    m.dy = c.model.dy;
    m.hidden = c.model.hidden;
    const auto data = make_decoder_dataset(c.model.fit_samples, m.dx, m.dy, c.seed);
    m.net = fit_mini_decoder(data, m.hidden, c.model.fit_epochs, c.model.fit_lr, c.seed).params;
    return ForwardModel(std::move(m));
  };
  if (c.model.kind != ForwardKind::additive_correction) return build(c.model.kind);
  auto inner = std::make_shared<const ForwardModel>(build(c.model.inner));
  Rng rng = make_rng(c.seed, {streams::model_weights, 99});
  return ForwardModel(AdditiveCorrection{
      inner, Tensor::vector(gaussian_vector(rng, c.model.dx, c.model.anchor_sigma))});
}

inline Objective build_objective(const ExperimentConfig& c) {
  const Mask mask = parse_mask(c.objective.mask, c.model.dy);
  switch (c.objective.kind) {
    case ObjectiveKind::l2: return Objective::l2(mask);
    case ObjectiveKind::l2_plus_feature:
      return Objective::l2_plus_feature(
          make_feature_projection(c.model.dy, c.objective.feature_rows, c.seed), mask);
    case ObjectiveKind::task_plus_decay: return Objective::task_plus_decay(c.objective.decay, mask);
  }
  throw ConfigError("unknown objective kind");
}

inline MlpParams build_theta(const ExperimentConfig& c) {
  return make_mapping_network(c.theta.dz, c.theta.hidden, c.model.dx, c.seed, c.theta.slope);
}

// Training observations come from one stream, held-out ones from another.
inline PriorSampler make_sampler(const ExperimentConfig& c,
                                 std::shared_ptr<const ForwardModel> model, bool heldout) {
  return PriorSampler(std::move(model), c.prior_sigma, c.prior_noise, c.seed,
                      heldout ? streams::heldout_obs : streams::train_obs);
}

}  // namespace lopt
