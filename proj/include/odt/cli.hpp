#pragma once

// odt_lab command line: gen-data | pretrain | finetune | eval | sweep-rtg | ablate.
//
// Exit codes: 0 success, 1 configuration error (bad flags, bad or missing
// config fields, unreadable inputs), 2 runtime abort (non-finite loss or any
// other failure while running).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "odt/checkpoint.hpp"
#include "odt/config.hpp"
#include "odt/envs.hpp"
#include "odt/error.hpp"
#include "odt/pipeline.hpp"
#include "odt/stats.hpp"

namespace odt::cli {

namespace fs = std::filesystem;

struct Options {
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  bool strict = false;
  bool quiet = false;
  std::vector<std::string> sets;

  std::string dataset;
  std::string checkpoint;
  std::string env;
  std::string quality;
  std::optional<int> n;
  std::optional<double> noise;
  std::optional<double> g_eval;
  std::optional<int> episodes;
  std::vector<double> grid;
  bool absolute_grid = false;
  std::string preset;
  double q = 90.0;
  std::string baseline;
};

struct Console {
  std::ostream& out;
  std::ostream& err;
  bool quiet = false;
  bool color = false;

  void info(const std::string& s) const {
    if (!quiet) err << s << '\n';
  }
  void error(const std::string& s) const {
    err << (color ? "\033[31merror:\033[0m " : "error: ") << s << '\n';
  }
};

inline bool color_enabled() { return std::getenv("NO_COLOR") == nullptr && ::isatty(2) == 1; }

// ---------------------------------------------------------------------------
// Config resolution: file, then --set overrides, then dedicated flags.

inline nlohmann::json parse_set_value(const std::string& v) {
  try {
    return nlohmann::json::parse(v);
  } catch (const nlohmann::json::parse_error&) {
    return v;  // bare strings
  }
}

inline std::uint64_t parse_seed(const std::string& s, const char* source) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string(source) + " is not a non-negative integer: '" + s + "'");
  }
}

inline RunConfig resolve_config(const Options& o, std::vector<std::string>& overrides) {
  RunConfig c;
  bool seed_in_file = false;
  if (!o.config_path.empty()) {
    c = load_config(o.config_path);
    std::ifstream is(o.config_path);
    seed_in_file = nlohmann::json::parse(is).contains("seed");
  }
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    apply_json(c, nlohmann::json{{key, parse_set_value(kv.substr(eq + 1))}});
    overrides.push_back(kv);
    if (key == "seed") seed_in_file = true;
  }
  auto flag = [&](const char* key, const nlohmann::json& v) {
    apply_json(c, nlohmann::json{{key, v}});
    overrides.push_back(std::string(key) + "=" + (v.is_string() ? v.get<std::string>() : v.dump()));
  };
  if (o.seed) flag("seed", *o.seed);
  else if (!seed_in_file) {
    if (const char* env = std::getenv("ODT_LAB_SEED")) {
      c.seed = parse_seed(env, "ODT_LAB_SEED");
      overrides.push_back("seed=" + std::to_string(c.seed) + " (ODT_LAB_SEED)");
    }
  }
  if (o.strict) flag("strict_determinism", true);
  if (!o.dataset.empty()) flag("dataset_path", o.dataset);
  if (!o.checkpoint.empty()) flag("pretrained_checkpoint", o.checkpoint);
  if (!o.env.empty()) flag("env", o.env);
  if (!o.quality.empty()) flag("dataset_quality", o.quality);
  if (o.n) flag("dataset_size", *o.n);
  if (o.noise) flag("dataset_noise", *o.noise);
  if (o.g_eval) flag("g_eval", *o.g_eval);
  if (o.episodes) flag("eval_episodes", *o.episodes);
  if (!o.grid.empty() && !o.absolute_grid) flag("sweep_fractions", o.grid);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Run directory

class RunDir {
 public:
  explicit RunDir(fs::path root, bool with_checkpoints = true) : root_(std::move(root)) {
    std::error_code ec;
    fs::create_directories(with_checkpoints ? root_ / "checkpoints" : root_, ec);
    if (ec) throw ConfigError("cannot create output directory '" + root_.string() + "': " + ec.message());
  }

  const fs::path& root() const { return root_; }
  std::string path(const std::string& name) const { return (root_ / name).string(); }

  void write_config(const RunConfig& c, const std::string& command, const std::vector<std::string>& overrides) const {
    const auto env = make_env(c.env);
    nlohmann::json j = to_json(c, &env->spec());
    j["command"] = command;
    j["overrides"] = overrides;
    write_json("config.json", j);
  }

  void write_json(const std::string& name, const nlohmann::json& j) const {
    std::ofstream os(path(name));
    if (!os) throw Error("cannot write '" + path(name) + "'");
    os << j.dump(2) << '\n';
  }

 private:
  fs::path root_;
};

class CsvFile {
 public:
  CsvFile(const std::string& path, const std::string& header, bool flush_each = true)
      : os_(path), flush_each_(flush_each) {
    if (!os_) throw Error("cannot write '" + path + "'");
    os_ << header << '\n';
  }
  void line(const std::string& s) {
    os_ << s << '\n';
    if (flush_each_) os_.flush();
  }

 private:
  std::ofstream os_;
  bool flush_each_;
};

inline std::string format_step(const StepMetrics& m) {
  std::ostringstream os;
  os << m.step << ',' << format_number(m.loss) << ',' << format_number(m.nll) << ',' << format_number(m.entropy) << ','
     << format_number(m.l2) << ',' << format_number(m.lambda) << ',' << format_number(m.grad_norm_pre) << ','
     << format_number(m.grad_norm_post) << ',' << format_number(m.lr);
  return os.str();
}

inline const char* train_log_header() { return "step,loss,nll,entropy,l2,lambda,grad_norm_pre,grad_norm_post,lr"; }

/// Hooks writing metrics rows and the per-iteration log into open files.
inline Hooks file_hooks(CsvFile& metrics, CsvFile& train_log, const Console& con, const RunDir& dir) {
  Hooks h;
  h.log = [&con](const std::string& s) { con.info(s); };
  h.on_row = [&metrics](const MetricsRow& r) { metrics.line(format_row(r)); };
  h.on_step = [&train_log](const StepMetrics& m) { train_log.line(format_step(m)); };
  h.checkpoint_dir = dir.path("checkpoints");
  return h;
}

// ---------------------------------------------------------------------------
// Shared steps

inline std::vector<Trajectory> load_dataset(const RunConfig& c) {
  if (c.dataset_path.empty()) throw ConfigError("missing required field 'dataset_path' (use --dataset or the config)");
  if (!fs::exists(c.dataset_path)) throw ConfigError("dataset_path '" + c.dataset_path + "' does not exist");
  std::vector<Trajectory> data;
  try {
    data = load_jsonl(c.dataset_path);
  } catch (const Error& e) {
    throw ConfigError("dataset_path '" + c.dataset_path + "': " + e.what());
  }
  if (data.empty()) throw ConfigError("dataset_path '" + c.dataset_path + "' contains no trajectories");
  const auto env = make_env(c.env);
  for (const auto& t : data)
    if (t.state_dim() != env->spec().state_dim || t.action_dim() != env->spec().action_dim)
      throw ConfigError("dataset '" + c.dataset_path + "' does not match env '" + c.env + "'");
  return data;
}

inline void write_dataset_sidecar(const RunDir& dir, const RunConfig& c, std::span<const Trajectory> data) {
  const auto env = make_env(c.env);
  nlohmann::json j = dataset_summary(env->spec(), data);
  j["path"] = c.dataset_path;
  ReplayBuffer top = ReplayBuffer::init_top_n(data, c.buffer_size);
  j["top_n_buffer_mean_return"] = stats::mean(top.returns());
  dir.write_json("dataset.json", j);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  if (path.empty()) throw ConfigError("missing required field 'pretrained_checkpoint' (use --checkpoint)");
  return load_checkpoint(path);
}

/// Policy rebuilt from a checkpoint; its config comes from the checkpoint.
inline PolicyModel model_from_checkpoint(const Checkpoint& ck, const EnvSpec& spec) {
  if (ck.policy.state_dim != spec.state_dim || ck.policy.action_dim != spec.action_dim)
    throw ConfigError("checkpoint does not match env '" + spec.name + "'");
  Rng unused(0);
  PolicyModel m(ck.policy, unused);
  load_parameters(m, ck);
  return m;
}

inline void save_lab(const Lab& lab, const RunDir& dir, const std::string& name) {
  save_checkpoint(dir.path("checkpoints/" + name), lab.checkpoint());
}

/// Pretrain-or-load, then finetune, into `dir`. Returns the final report.
inline FinetuneResult pretrain_and_finetune(const RunConfig& c, const RunDir& dir, const Console& con) {
  const auto data = load_dataset(c);
  write_dataset_sidecar(dir, c, data);
  Lab lab(c);
  if (!c.pretrained_checkpoint.empty()) {
    lab.restore(read_checkpoint(c.pretrained_checkpoint));
  } else {
    CsvFile metrics(dir.path("pretrain_metrics.csv"), metrics_header());
    CsvFile log(dir.path("pretrain_train_log.csv"), train_log_header(), false);
    pretrain(lab, data, file_hooks(metrics, log, con, dir));
    save_lab(lab, dir, "pretrained.json");
  }
  CsvFile metrics(dir.path("metrics.csv"), metrics_header());
  CsvFile log(dir.path("train_log.csv"), train_log_header(), false);
  FinetuneResult res = finetune(lab, data, file_hooks(metrics, log, con, dir));
  save_lab(lab, dir, "final.json");
  res.buffer.save_snapshot(dir.path("checkpoints/buffer"));
  return res;
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_gen_data(RunConfig c, const Options& o, const std::vector<std::string>& ov, const Console& con) {
  RunDir dir(o.out, false);
  if (c.dataset_path.empty()) c.dataset_path = dir.path("dataset.jsonl");
  dir.write_config(c, "gen-data", ov);
  const auto data = generate_dataset(c, c.seed);
  save_jsonl(c.dataset_path, data);
  const auto env = make_env(c.env);
  nlohmann::json side = dataset_summary(env->spec(), data);
  side["quality"] = c.dataset_quality;
  side["noise"] = c.dataset_noise.value_or(calibrated_medium_noise(env->spec()));
  side["seed"] = c.seed;
  side["path"] = c.dataset_path;
  std::ofstream(fs::path(c.dataset_path).replace_extension(".json")) << side.dump(2) << '\n';
  con.info("wrote " + std::to_string(data.size()) + " trajectories to " + c.dataset_path + " (mean return " +
           format_number(side["mean_return"].get<double>()) + ")");
  return 0;
}

inline int cmd_pretrain(const RunConfig& c, const Options& o, const std::vector<std::string>& ov, const Console& con) {
  RunDir dir(o.out);
  dir.write_config(c, "pretrain", ov);
  const auto data = load_dataset(c);
  write_dataset_sidecar(dir, c, data);
  Lab lab(c);
  CsvFile metrics(dir.path("metrics.csv"), metrics_header());
  CsvFile log(dir.path("train_log.csv"), train_log_header(), false);
  pretrain(lab, data, file_hooks(metrics, log, con, dir));
  save_lab(lab, dir, "pretrained.json");
  return 0;
}

inline int cmd_finetune(const RunConfig& c, const Options& o, const std::vector<std::string>& ov, const Console& con) {
  RunDir dir(o.out);
  dir.write_config(c, "finetune", ov);
  const FinetuneResult r = pretrain_and_finetune(c, dir, con);
  con.out << "initial normalized " << format_number(r.initial.normalized) << " final normalized "
          << format_number(r.final.normalized) << '\n';
  return 0;
}

inline int cmd_eval(const RunConfig& c, const Options& o, const std::vector<std::string>& ov, const Console& con) {
  RunDir dir(o.out, false);
  dir.write_config(c, "eval", ov);
  const Checkpoint ck = read_checkpoint(c.pretrained_checkpoint);
  const auto env = make_env(c.env);
  const PolicyModel model = model_from_checkpoint(ck, env->spec());
  if (c.eval_context_len > model.config().context_len)
    throw ConfigError("eval_context_len exceeds the checkpoint's context length");
  const Streams rng(c.seed);
  const EvalReport r = evaluate(model, *env, c.resolved_g_eval(env->spec()), c.eval_episodes, c.eval_context_len,
                                rng.eval_root);
  CsvFile metrics(dir.path("metrics.csv"), metrics_header());
  MetricsRow row;
  row.eval = r;
  if (!model.config().deterministic) row.lambda = ck.dual.lambda();
  metrics.line(format_row(row));
  dir.write_json("eval.json", {{"g_eval", c.resolved_g_eval(env->spec())},
                               {"n_episodes", r.n_episodes},
                               {"mean_return", r.mean_return},
                               {"std_return", r.std_return},
                               {"normalized", r.normalized},
                               {"mean_length", r.mean_length},
                               {"returns", r.returns}});
  con.out << "eval mean " << format_number(r.mean_return) << " std " << format_number(r.std_return) << " normalized "
          << format_number(r.normalized) << '\n';
  return 0;
}

inline int cmd_sweep(const RunConfig& c, const Options& o, const std::vector<std::string>& ov, const Console& con) {
  RunDir dir(o.out, false);
  dir.write_config(c, "sweep-rtg", ov);
  const Checkpoint ck = read_checkpoint(c.pretrained_checkpoint);
  const auto env = make_env(c.env);
  const PolicyModel model = model_from_checkpoint(ck, env->spec());
  if (c.eval_context_len > model.config().context_len)
    throw ConfigError("eval_context_len exceeds the checkpoint's context length");
  std::vector<double> grid = o.absolute_grid ? o.grid : c.sweep_fractions;
  if (!o.absolute_grid)
    for (double& g : grid) g *= env->spec().expert_return;
  const Streams rng(c.seed);
  const auto points = sweep_rtg(model, *env, grid, c.eval_episodes, c.eval_context_len, rng.eval_root);
  CsvFile csv(dir.path("sweep.csv"), "g_eval,eval_mean,eval_std,normalized");
  std::vector<double> gs, means;
  for (const auto& p : points) {
    csv.line(format_number(p.g_eval) + "," + format_number(p.report.mean_return) + "," +
             format_number(p.report.std_return) + "," + format_number(p.report.normalized));
    gs.push_back(p.g_eval);
    means.push_back(p.report.mean_return);
    con.out << "g_eval " << format_number(p.g_eval) << " mean " << format_number(p.report.mean_return) << '\n';
  }
  nlohmann::json summary = {{"grid", gs}, {"mean_return", means}};
  if (gs.size() >= 2) summary["spearman"] = stats::spearman(gs, means);
  if (stats::mean(means) != 0.0) summary["relative_spread"] = stats::relative_spread(means);
  dir.write_json("sweep.json", summary);
  return 0;
}

inline const std::vector<std::string>& ablation_presets() {
  static const std::vector<std::string> p{"deterministic", "curriculum-q", "hindsight-off", "buffer-random-init",
                                          "gonline-1x"};
  return p;
}

/// Config changes of an ablation preset.
inline void apply_preset(RunConfig& c, const std::string& preset, double q) {
  if (preset == "deterministic") c.deterministic = true;
  else if (preset == "curriculum-q") {
    c.g_online_mode = GOnlineMode::curriculum;
    c.g_online_quantile = q;
  } else if (preset == "hindsight-off") c.hindsight = false;
  else if (preset == "buffer-random-init") c.buffer_init = BufferInit::random;
  else if (preset == "gonline-1x") c.g_online_scale = 1.0;
  else throw ConfigError("unknown ablation preset '" + preset + "'");
  c.validate();
}

/// Final evaluated normalized score in a metrics.csv, if any.
inline std::optional<double> final_normalized(const std::string& metrics_path) {
  std::ifstream is(metrics_path);
  if (!is) return std::nullopt;
  std::string line;
  std::getline(is, line);
  std::optional<double> last;
  while (std::getline(is, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() >= 5 && !f[4].empty()) last = std::stod(f[4]);
  }
  return last;
}

inline int cmd_ablate(RunConfig c, const Options& o, std::vector<std::string> ov, const Console& con) {
  apply_preset(c, o.preset, o.q);
  ov.push_back("preset=" + o.preset);
  RunDir dir(o.out);
  dir.write_config(c, "ablate", ov);
  const FinetuneResult r = pretrain_and_finetune(c, dir, con);
  double base = std::numeric_limits<double>::quiet_NaN();
  if (!o.baseline.empty())
    base = final_normalized((fs::path(o.baseline) / "metrics.csv").string()).value_or(base);
  CsvFile csv(dir.path("comparison.csv"), "preset,final_normalized,baseline_normalized,ratio");
  const double ratio = base != 0.0 ? r.final.normalized / base : std::numeric_limits<double>::quiet_NaN();
  const std::string row =
      o.preset + "," + format_number(r.final.normalized) + "," + format_number(base) + "," + format_number(ratio);
  csv.line(row);
  con.out << "preset,final_normalized,baseline_normalized,ratio\n" << row << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Options o;
  CLI::App app{"Online Decision Transformer lab", "odt_lab"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--config", o.config_path, "JSON run config")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "root seed (fallback: ODT_LAB_SEED, then 0)");
  app.add_option("--out", o.out, "output directory")->capture_default_str();
  app.add_flag("--strict-determinism", o.strict, "bit-reproducible mode");
  app.add_flag("--quiet", o.quiet, "suppress progress output");
  app.add_option("--set", o.sets, "override a config field, key=value (repeatable)");

  auto* gen = app.add_subcommand("gen-data", "generate an offline dataset");
  gen->add_option("--env", o.env, "pointctrl | gridgoal");
  gen->add_option("--quality", o.quality, "medium | medium-replay");
  gen->add_option("--n", o.n, "number of trajectories");
  gen->add_option("--noise", o.noise, "behaviour noise (default: calibrated medium)");
  gen->add_option("--dataset", o.dataset, "output jsonl path (default: <out>/dataset.jsonl)");

  auto* pre = app.add_subcommand("pretrain", "offline pretraining");
  pre->add_option("--dataset", o.dataset, "offline dataset (jsonl)");

  auto* fin = app.add_subcommand("finetune", "online finetuning (pretrains first without --checkpoint)");
  fin->add_option("--dataset", o.dataset, "offline dataset (jsonl)");
  fin->add_option("--checkpoint", o.checkpoint, "pretrained checkpoint");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate");
  ev->add_option("--g-eval", o.g_eval, "evaluation RTG (default: expert return)");
  ev->add_option("--episodes", o.episodes, "number of episodes");

  auto* sw = app.add_subcommand("sweep-rtg", "evaluate over a grid of g_eval values");
  sw->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate");
  sw->add_option("--grid", o.grid, "grid values (fractions of the expert return)");
  sw->add_flag("--absolute", o.absolute_grid, "grid values are absolute returns");
  sw->add_option("--episodes", o.episodes, "episodes per grid point");

  auto* ab = app.add_subcommand("ablate", "run an ablation preset");
  ab->add_option("preset", o.preset, "deterministic | curriculum-q | hindsight-off | buffer-random-init | gonline-1x")
      ->required();
  ab->add_option("--q", o.q, "percentile for curriculum-q")->capture_default_str();
  ab->add_option("--dataset", o.dataset, "offline dataset (jsonl)");
  ab->add_option("--checkpoint", o.checkpoint, "pretrained checkpoint");
  ab->add_option("--baseline", o.baseline, "default-run directory to compare against");

  Console con{out, err, false, color_enabled()};
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }
  con.quiet = o.quiet;
  for (auto* sub : app.get_subcommands()) o.command = sub->get_name();

  try {
    std::vector<std::string> overrides;
    const RunConfig c = resolve_config(o, overrides);
    if (!overrides.empty() && !o.quiet)
      for (const auto& s : overrides) con.info("override " + s);
    if (o.command == "gen-data") return cmd_gen_data(c, o, overrides, con);
    if (o.command == "pretrain") return cmd_pretrain(c, o, overrides, con);
    if (o.command == "finetune") return cmd_finetune(c, o, overrides, con);
    if (o.command == "eval") return cmd_eval(c, o, overrides, con);
    if (o.command == "sweep-rtg") return cmd_sweep(c, o, overrides, con);
    if (o.command == "ablate") return cmd_ablate(c, o, overrides, con);
    throw ConfigError("unknown command");
  } catch (const ConfigError& e) {
    con.error(e.what());
    return 1;
  } catch (const NumericalError& e) {
    con.error(std::string("numerical abort: ") + e.what());
    return 2;
  } catch (const std::exception& e) {
    con.error(e.what());
    return 2;
  }
}

}  // namespace odt::cli
