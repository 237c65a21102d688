#pragma once

// Subcommands behind tools/lopt. Each returns a process exit code:
// 0 ok, 1 failed check, 2 config or input error, 3 io error, 4 divergence.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lopt/analysis.hpp"
#include "lopt/archive.hpp"
#include "lopt/config.hpp"
#include "lopt/errors.hpp"
#include "lopt/experiments.hpp"
#include "lopt/gradcheck.hpp"
#include "lopt/inference.hpp"
#include "lopt/oracle_suite.hpp"
#include "lopt/parallel.hpp"
#include "lopt/trainer.hpp"

namespace lopt::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kConfigError = 2, kIoError = 3, kDivergence = 4 };

// ---------------------------------------------------------------------------
// Files

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir.string() + "'");
}

inline void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << content;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline std::string hash_comment(const ExperimentConfig& c) { return "# config_hash=" + c.hash_hex() + "\n"; }

inline std::string numbered(const std::string& prefix, std::size_t n) {
  std::string out;
  for (std::size_t i = 0; i < n; ++i) out += (i ? "," : "") + prefix + std::to_string(i);
  return out;
}

inline void append_row(std::string& out, std::span<const double> values) {
  for (double v : values) {
    out += ',';
    out += format_double(v);
  }
}

// Observation files: comment lines, a header y0..y{d-1}, one row per
// observation.
inline std::string observations_csv(const ExperimentConfig& c, std::span<const Observation> obs) {
  std::string out = hash_comment(c);
  out += numbered("y", obs.empty() ? c.model.dy : obs.front().y.numel()) + "\n";
  for (const auto& o : obs) {
    std::string row;
    append_row(row, o.y.values());
    out += row.substr(1) + "\n";
  }
  return out;
}

inline std::vector<Observation> read_observations(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t width = 0;
  std::size_t lineno = 0;
  std::vector<Observation> out;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (width == 0) {
      if (cells.empty() || cells[0] != "y0") {
        throw IoError(path.string() + ": expected a header starting with y0");
      }
      width = cells.size();
      continue;
    }
    if (cells.size() != width) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(width) +
                    " values, got " + std::to_string(cells.size()));
    }
    std::vector<double> y;
    for (const auto& c : cells) y.push_back(parse_double(c));
    try {
      out.emplace_back(Tensor::vector(std::move(y)));
    } catch (const InputError& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (width == 0) throw IoError(path.string() + ": no header row");
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  ExperimentConfig config;
  std::shared_ptr<const ForwardModel> model;
  MlpParams theta;
  std::size_t rounds_done = 0;
  std::uint64_t optimizer_steps = 0;
  std::vector<std::vector<double>> first_moments;
  std::vector<std::vector<double>> second_moments;
};

inline Archive checkpoint_archive(const ExperimentConfig& c, const ForwardModel& model,
                                  const MlpParams& theta, const Optimizer* opt, std::size_t rounds_done) {
  Archive ar{std::string(kCheckpointVersion)};
  for (const auto& [k, v] : c.to_map()) {
    if (k != "output.dir") ar.set_attr("config." + k, v);
  }
  ar.set_attr("config_hash", c.hash_hex());
  ar.set_attr("rounds_done", std::to_string(rounds_done));
  model.store(ar, "model");
  store_mlp(ar, "theta", theta);
  if (opt) {
    ar.set_attr("optimizer.kind", std::string(to_string(opt->config().kind)));
    ar.set_attr("optimizer.steps", std::to_string(opt->steps()));
    const auto& params = opt->params();
    for (std::size_t i = 0; i < opt->first_moments().size(); ++i) {
      ar.put("optimizer.m." + std::to_string(i), NamedArray{params[i].shape(), opt->first_moments()[i]});
      ar.put("optimizer.v." + std::to_string(i), NamedArray{params[i].shape(), opt->second_moments()[i]});
    }
  }
  return ar;
}

inline void save_checkpoint(const fs::path& path, const ExperimentConfig& c, const ForwardModel& model,
                            const MlpParams& theta, const Optimizer* opt, std::size_t rounds_done) {
  checkpoint_archive(c, model, theta, opt, rounds_done).save(path);
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  const Archive ar = Archive::load(path, kCheckpointVersion);
  ConfigMap raw;
  for (const auto& [k, v] : ar.attrs()) {
    if (k.rfind("config.", 0) == 0) raw[k.substr(7)] = v;
  }
  Checkpoint ck;
  ck.config = config_from_map(raw);
  ck.model = std::make_shared<const ForwardModel>(ForwardModel::load(ar, "model"));
  ck.theta = load_mlp(ar, "theta", false);
  ck.rounds_done = std::stoul(ar.attr("rounds_done"));
  if (ar.has_attr("optimizer.steps")) {
    ck.optimizer_steps = std::stoull(ar.attr("optimizer.steps"));
    for (std::size_t i = 0; ar.has("optimizer.m." + std::to_string(i)); ++i) {
      ck.first_moments.push_back(ar.get("optimizer.m." + std::to_string(i)).values);
      ck.second_moments.push_back(ar.get("optimizer.v." + std::to_string(i)).values);
    }
  }
  if (ck.theta.out_dim() != ck.model->input_dim()) {
    throw DimensionError("checkpoint theta output dim " + std::to_string(ck.theta.out_dim()) +
                         " vs model input dim " + std::to_string(ck.model->input_dim()));
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Config assembly

struct ConfigSource {
  std::string config_path;
  std::string preset;
  std::vector<std::string> overrides;  // key=value
  std::string out_dir;
};

inline std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("LOPT_SEED");
  if (!s || !*s) return std::nullopt;
  std::size_t used = 0;
  try {
    const auto v = std::stoull(s, &used);
    if (used == std::string_view(s).size() && s[0] != '-') return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("LOPT_SEED must be a non-negative integer, got '" + std::string(s) + "'");
}

inline ExperimentConfig assemble_config(const ConfigSource& src) {
  ConfigMap raw;
  if (!src.config_path.empty()) raw = parse_config_text(read_file(src.config_path));
  if (!src.preset.empty()) raw["preset"] = src.preset;
  for (const auto& kv : src.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    raw[std::string(detail::trim(std::string_view(kv).substr(0, eq)))] =
        std::string(detail::trim(std::string_view(kv).substr(eq + 1)));
  }
  if (!src.out_dir.empty()) raw["output.dir"] = src.out_dir;
  if (const auto s = env_seed()) raw["seed"] = std::to_string(*s);
  return config_from_map(raw);
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  ConfigSource source;
  bool online = false;
  int threads = 0;
};

inline std::string round_stats_csv(const ExperimentConfig& c, const std::vector<RoundStats>& rounds) {
  std::string out = hash_comment(c);
  out += "round,collection_loss,train_loss_after,sampled_loss,theta_updates,retries\n";
  for (const auto& r : rounds) {
    out += std::to_string(r.round) + "," + format_double(r.collection_loss) + "," +
           format_double(r.train_loss_after) + "," + format_double(r.sampled_loss) + "," +
           std::to_string(r.theta_updates) + "," + std::to_string(r.retries) + "\n";
  }
  return out;
}

inline int cmd_train(const TrainOptions& opt, std::ostream& log) {
  ExperimentConfig cfg = assemble_config(opt.source);
  if (opt.online) cfg.online = true;
  const int threads = opt.threads > 0 ? opt.threads : default_thread_count();
  const fs::path dir = cfg.output_dir.empty() ? fs::path("out") : fs::path(cfg.output_dir);
  ensure_dir(dir);
  write_file(dir / "config.txt", cfg.serialize());

  const Experiment e = build_experiment(cfg);
  const auto heldout = heldout_observations(e, cfg.heldout);
  write_file(dir / "heldout_obs.csv", observations_csv(cfg, heldout));

  std::vector<RoundStats> stats;
  const auto on_round = [&](const RoundStats& s, const MlpParams& theta, const Optimizer& o) {
    stats.push_back(s);
    const std::size_t done = s.round + 1;
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.train.rounds) {
      save_checkpoint(dir / ("checkpoint_round" + std::to_string(done) + ".ckpt"), cfg, *e.model, theta,
                      &o, done);
    }
    log << "round " << s.round << " collection " << format_double(s.collection_loss) << " after "
        << format_double(s.train_loss_after) << '\n';
  };
  const TrainResult result = train_mapping(e, threads, on_round);
  write_file(dir / "round_stats.csv", round_stats_csv(cfg, stats));
  save_checkpoint(dir / "final.ckpt", cfg, *e.model, result.theta, result.optimizer.get(),
                  result.rounds.size());
  log << "wrote " << (dir / "final.ckpt").string() << " (" << result.iterations << " theta updates)\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// infer

struct InferOptions {
  std::string checkpoint;
  std::string observations;
  std::string out_dir = "infer_out";
  bool baseline = false;  // otherwise mapped
  std::size_t hypotheses = 0;  // 0 keeps the checkpoint config
  std::optional<std::string> mask;
  std::size_t steps = 0;
  std::optional<std::string> init;
  int threads = 0;
};

inline std::string trace_csv(const ExperimentConfig& c, const InferenceTrace& t) {
  std::string out = hash_comment(c);
  const std::size_t d = t.records.empty() ? 0 : t.records.front().point.size();
  out += "step,loss";
  if (d) out += "," + numbered("z", d);
  out += '\n';
  for (const auto& r : t.records) {
    out += std::to_string(r.step) + "," + format_double(r.loss);
    append_row(out, r.point);
    out += '\n';
  }
  return out;
}

inline std::string curve_csv(const ExperimentConfig& c, const std::vector<CurveRow>& rows) {
  std::string out = hash_comment(c) + "step,mean,stderr,n\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + format_double(r.mean) + "," + format_double(r.stderr_) + "," +
           std::to_string(r.n) + "\n";
  }
  return out;
}

inline int cmd_infer(const InferOptions& opt, std::ostream& log) {
  Checkpoint ck = load_checkpoint(opt.checkpoint);
  ExperimentConfig& cfg = ck.config;
  if (const auto s = env_seed()) cfg.seed = *s;
  if (opt.mask) cfg.objective.mask = *opt.mask;
  if (opt.steps) cfg.infer.steps = opt.steps;
  if (opt.hypotheses) cfg.infer.hypotheses = opt.hypotheses;
  if (opt.init) cfg.infer.init = parse_init_policy(*opt.init);
  cfg.infer.seed = cfg.seed;
  cfg.infer.validate();
  if (cfg.infer.hypotheses >= 2 && cfg.infer.init == InitPolicy::zero) {
    throw ConfigError("multiple hypotheses need a random init policy; zero init makes them coincide");
  }
  const Objective obj = build_objective(cfg);
  const auto observations = read_observations(opt.observations);
  for (const auto& o : observations) {
    if (o.y.numel() != ck.model->output_dim()) {
      throw DimensionError("observation dim " + std::to_string(o.y.numel()) + " vs model output dim " +
                           std::to_string(ck.model->output_dim()));
    }
  }
  const int threads = opt.threads > 0 ? opt.threads : default_thread_count();
  const std::size_t H = cfg.infer.hypotheses;
  const std::string mode = opt.baseline ? "baseline" : "mapped";

  std::vector<std::vector<InferenceTrace>> results(observations.size());
  parallel_for(observations.size(), threads, [&](std::size_t i) {
    InferenceConfig c = cfg.infer;
    const std::uint64_t base = stream_seed(cfg.seed, {i});
    std::vector<InferenceTrace> runs;
    for (std::size_t h = 0; h < H; ++h) {
      c.seed = hypothesis_seed(base, h);
      runs.push_back(opt.baseline ? infer_baseline(*ck.model, obj, observations[i], c)
                                  : infer_mapped(ck.theta, *ck.model, obj, observations[i], c));
    }
    std::stable_sort(runs.begin(), runs.end(),
                     [](const auto& a, const auto& b) { return a.final_loss < b.final_loss; });
    results[i] = std::move(runs);
  });

  const fs::path dir = opt.out_dir;
  ensure_dir(dir);
  std::string recon = hash_comment(cfg) + "obs,hypothesis,final_loss," +
                      numbered("x", ck.model->input_dim()) + "," + numbered("yhat", ck.model->output_dim()) +
                      "\n";
  std::vector<InferenceTrace> best;
  for (std::size_t i = 0; i < results.size(); ++i) {
    for (std::size_t h = 0; h < results[i].size(); ++h) {
      const auto& t = results[i][h];
      std::string name = "trace_" + mode + "_obs" + std::to_string(i);
      if (H > 1) name += "_h" + std::to_string(h);
      write_file(dir / (name + ".csv"), trace_csv(cfg, t));
      NoGradGuard guard;
      const auto y_hat = ck.model->forward(Tensor::vector(t.x_hat)).to_vector();
      recon += std::to_string(i) + "," + std::to_string(h) + "," + format_double(t.final_loss);
      append_row(recon, t.x_hat);
      append_row(recon, y_hat);
      recon += '\n';
    }
    best.push_back(results[i].front());
  }
  write_file(dir / ("reconstructions_" + mode + ".csv"), recon);
  if (!best.empty()) {
    const auto curve = convergence_curves(best);
    write_file(dir / ("curve_" + mode + ".csv"), curve_csv(cfg, curve));
    log << mode << ": " << observations.size() << " observations, mean final loss "
        << format_double(curve.back().mean) << '\n';
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// landscape

struct LandscapeOptions {
  std::string checkpoint;
  std::string observations;
  std::string out_dir = "landscape_out";
  std::size_t count = 0;  // grids for the first `count` observations; 0 = all
  std::size_t resolution = 41;
  double width_factor = 3.0;
  int threads = 0;
};

inline std::string grid_csv(const ExperimentConfig& c, const LandscapeGrid& g) {
  std::string out = hash_comment(c) + "alpha,beta,loss\n";
  for (std::size_t i = 0; i < g.resolution; ++i) {
    for (std::size_t j = 0; j < g.resolution; ++j) {
      out += format_double(g.offsets[i]) + "," + format_double(g.offsets[j]) + "," +
             format_double(g.at(i, j)) + "\n";
    }
  }
  return out;
}

inline int cmd_landscape(const LandscapeOptions& opt, std::ostream& log) {
  Checkpoint ck = load_checkpoint(opt.checkpoint);
  ExperimentConfig& cfg = ck.config;
  if (const auto s = env_seed()) cfg.seed = *s;
  cfg.infer.seed = cfg.seed;
  const Objective obj = build_objective(cfg);
  const auto observations = read_observations(opt.observations);
  for (const auto& o : observations) {
    if (o.y.numel() != ck.model->output_dim()) {
      throw DimensionError("observation dim " + std::to_string(o.y.numel()) + " vs model output dim " +
                           std::to_string(ck.model->output_dim()));
    }
  }
  const int threads = opt.threads > 0 ? opt.threads : default_thread_count();
  const auto setup = landscape_setup(ck.theta, *ck.model, obj, observations, cfg.infer, 20,
                                     opt.width_factor, threads);
  const std::size_t n = opt.count ? std::min(opt.count, observations.size()) : observations.size();
  const fs::path dir = opt.out_dir;
  ensure_dir(dir);
  log << "obs,spikes_x,spikes_z,laplacian_x,laplacian_z\n";
  for (std::size_t i = 0; i < n; ++i) {
    const auto pair = landscape_pair(ck.theta, *ck.model, obj, observations[i], setup, opt.resolution, threads);
    write_file(dir / ("landscape_x_obs" + std::to_string(i) + ".csv"), grid_csv(cfg, pair.x));
    write_file(dir / ("landscape_z_obs" + std::to_string(i) + ".csv"), grid_csv(cfg, pair.z));
    log << i << ',' << pair.spikes_x << ',' << pair.spikes_z << ',' << format_double(pair.laplacian_x) << ','
        << format_double(pair.laplacian_z) << '\n';
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateOptions {
  ConfigSource source;
  std::vector<std::size_t> steps{20, 200};
  int threads = 0;
};

inline int cmd_ablate(const AblateOptions& opt, std::ostream& log) {
  const ExperimentConfig cfg = assemble_config(opt.source);
  const int threads = opt.threads > 0 ? opt.threads : default_thread_count();
  const fs::path dir = cfg.output_dir.empty() ? fs::path("out") : fs::path(cfg.output_dir);
  ensure_dir(dir);
  const Experiment e = build_experiment(cfg);
  const auto run = ablate(e, heldout_observations(e, cfg.heldout), opt.steps, threads);
  std::string out = hash_comment(cfg) + "variant,steps,mean_loss\n";
  for (std::size_t v = 0; v < run.report.labels.size(); ++v) {
    for (std::size_t s = 0; s < run.report.step_counts.size(); ++s) {
      out += run.report.labels[v] + "," + std::to_string(run.report.step_counts[s]) + "," +
             format_double(run.report.mean_loss[v][s]) + "\n";
    }
  }
  write_file(dir / "ablation.csv", out);
  log << out;
  return kOk;
}

// ---------------------------------------------------------------------------
// check

struct CheckOptions {
  bool grad = false;
  bool oracle = false;
  std::optional<std::string> perturb;  // op[:factor]
  std::size_t seeds = 100;
  std::string fixtures;  // empty = compiled-in default
  int threads = 0;
};

// Test hook: scales the adjoint of one op so the gate can be shown to fail.
inline void apply_perturbation(const std::string& arg) {
  const auto colon = arg.find(':');
  const std::string name = arg.substr(0, colon);
  const double factor = colon == std::string::npos ? 1.5 : parse_double(arg.substr(colon + 1));
  for (Op op : kAllOps) {
    if (op_name(op) == name) {
      testing::perturb_adjoint(op, factor);
      return;
    }
  }
  throw ConfigError("unknown op '" + name + "' for --perturb");
}

inline int cmd_check(const CheckOptions& opt, std::ostream& log) {
  const bool both = !opt.grad && !opt.oracle;
  if (opt.perturb) apply_perturbation(*opt.perturb);
  struct Restore {
    ~Restore() { testing::clear_adjoint_perturbation(); }
  } restore;
  bool ok = true;
  if (opt.grad || both) {
    GradCheckOptions g;
    g.seeds = opt.seeds;
    const auto report = run_gradcheck(g);
    log << report.format();
    ok = ok && report.passed();
  }
  if (opt.oracle || both) {
    const int threads = opt.threads > 0 ? opt.threads : default_thread_count();
    const auto report = oracle::run_oracle_suite(
        opt.fixtures.empty() ? oracle::default_fixture_path() : fs::path(opt.fixtures), threads);
    log << report.format();
    ok = ok && report.passed();
  }
  log << (ok ? "all checks passed\n" : "checks FAILED\n");
  return ok ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------------------

// Maps library errors onto the exit-code contract.
template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const DivergenceError& e) {
    err << "error: divergence: " << e.what() << '\n';
    return kDivergence;
  } catch (const IoError& e) {
    err << "error: io: " << e.what() << '\n';
    return kIoError;
  } catch (const OracleError& e) {
    err << "error: oracle: " << e.what() << '\n';
    return kCheckFailed;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const fs::filesystem_error& e) {
    err << "error: io: " << e.what() << '\n';
    return kIoError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kCheckFailed;
  }
}

}  // namespace lopt::cli
