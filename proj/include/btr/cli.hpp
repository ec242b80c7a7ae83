#pragma once

#include "btr/analysis.hpp"
#include "btr/checkpoint.hpp"
#include "btr/config.hpp"
#include "btr/metrics.hpp"
#include "btr/orchestrator.hpp"
#include "btr/plot.hpp"
#include "btr/run.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <ostream>
#include <string>
#include <vector>

// Subcommands train | eval | analyze | plot. Exit codes: 0 success,
// 1 runtime failure, 2 usage error.

namespace btr {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Bad command-line input; reported with usage text and exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace cli_detail {

inline AgentConfig config_from(const std::string& path, const std::vector<std::string>& sets) {
  if (path.empty()) throw UsageError("--config is required");
  if (!std::filesystem::exists(path)) throw UsageError("config file '" + path + "' does not exist");
  AgentConfig cfg = load_config(path);
  for (const auto& s : sets) apply_override(cfg, s);
  validate(cfg);
  return cfg;
}

inline void apply_sets(AgentConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) apply_override(cfg, s);
  validate(cfg);
}

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string run_dir;
  std::string resume;
  int keep = 0;
  bool quiet = false;
  bool no_analysis = false;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  AgentConfig cfg = config_from(a.config, a.sets);
  const std::filesystem::path dir = a.run_dir.empty() ? run_dir(cfg) : std::filesystem::path(a.run_dir);
  write_manifest(dir, cfg);
  TrainOptions o;
  o.run_dir = dir.string();
  o.resume_from = a.resume;
  o.keep_checkpoints = a.keep;
  o.progress = !a.quiet;
  o.analysis = !a.no_analysis;
  const TrainResult r = run_training(cfg, o);
  out << "run_dir " << dir.string() << "\n";
  out << "frames " << r.counters.frames << " env_steps " << r.counters.env_steps << " grad_steps " << r.counters.grad_steps
      << " transitions " << r.counters.transitions << " episodes " << r.counters.episodes << "\n";
  if (!r.rows.empty()) {
    const MetricsRow& last = r.rows.back();
    out << "final mean " << format_number(last.mean) << " iqm " << format_number(last.iqm) << " ci ["
        << format_number(last.ci_low) << ", " << format_number(last.ci_high) << "] oracle "
        << format_number(r.oracle_return) << (r.early_stopped ? " (early stop)" : "") << "\n";
  }
  out << "checkpoint " << r.final_checkpoint << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::vector<std::string> sets;
  int episodes = -1;
  double epsilon = -1;
  double jitter = 0;
  std::int64_t seed = 0;
  std::string out_csv;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  AgentConfig cfg = ck.cfg;
  apply_sets(cfg, a.sets);
  const GridLayout layout = load_layout(cfg.env_layout);
  EvalOptions eo;
  eo.episodes = a.episodes > 0 ? a.episodes : static_cast<int>(cfg.eval_episodes);
  eo.epsilon = a.epsilon >= 0 ? a.epsilon : eval_epsilon_at(ck.counters.frames, cfg);
  eo.brightness_jitter = a.jitter;
  eo.seed = static_cast<std::uint64_t>(a.seed);
  const auto scores =
      evaluate(ck.learner->online(), layout, env_options(cfg), eo, ck.learner->num_taus(), cfg.eval_noisy);
  const ScoreSummary s = summarize_scores(scores, static_cast<int>(cfg.bootstrap_resamples), derive_seed(eo.seed, 17));
  const double oracle = oracle_optimal_return(layout, env_options(cfg), cfg.discount).undiscounted;
  if (!a.out_csv.empty()) {
    std::ofstream f(a.out_csv);
    if (!f) throw std::runtime_error("cannot write '" + a.out_csv + "'");
    f << "episode,score\n";
    for (std::size_t i = 0; i < scores.size(); ++i) f << i << ',' << format_number(scores[i]) << '\n';
  }
  out << "episodes " << scores.size() << " epsilon " << format_number(eo.epsilon) << " jitter "
      << format_number(eo.brightness_jitter) << "\n";
  out << "mean " << format_number(s.mean) << " iqm " << format_number(s.iqm) << " ci_low " << format_number(s.ci_low)
      << " ci_high " << format_number(s.ci_high) << " oracle " << format_number(oracle) << "\n";
  return kExitOk;
}

struct AnalyzeArgs {
  std::vector<std::string> checkpoints;
  std::vector<std::string> sets;
  std::int64_t probe_seed = 0;
  int episodes = -1;
  std::string out_csv;
  std::string extended_csv;
};

/// Replay filled with uniform-random rollouts, for the churn batch.
inline double analyze_churn(const AgentConfig& cfg, const GridLayout& layout, const Learner& learner,
                            const ProbeEvaluator<float>& pe, const std::vector<int>& before, std::uint64_t seed) {
  const int E = 8;
  const std::size_t batch = static_cast<std::size_t>(cfg.use_vectorization ? cfg.batch_size : cfg.nonvec_batch_size);
  VectorEnv venv(layout, env_options(cfg), E, derive_seed(seed, 1));
  ReplayOptions ro = replay_options(cfg, venv.obs_bytes());
  ro.num_envs = E;
  ro.capacity = std::max<std::size_t>(4 * batch, 1024);
  PrioritizedReplay replay(ro);
  Rng rng(derive_seed(seed, 2));
  std::uniform_int_distribution<int> pick(0, kGridActions - 1);
  std::vector<std::uint8_t> obs;
  while (replay.size() < 2 * batch) {
    obs = venv.observations();
    std::vector<int> acts(E);
    for (auto& x : acts) x = pick(rng);
    const VectorStep vs = venv.step(acts);
    const std::size_t ob = venv.obs_bytes();
    for (int i = 0; i < E; ++i) {
      const auto k = static_cast<std::size_t>(i);
      replay.push(i, std::span<const std::uint8_t>(obs.data() + k * ob, ob), acts[k], clip_reward(vs.rewards[k], cfg.reward_clip),
                  std::span<const std::uint8_t>(vs.final_obs.data() + k * ob, ob), vs.terminal[k], vs.truncated[k]);
    }
  }
  return measure_churn(learner, replay, batch, cfg.per_beta_end, pe, before, rng);
}

inline int cmd_analyze(const AnalyzeArgs& a, std::ostream& out) {
  std::ofstream csv_file, ext_file;
  std::ostream* csv = &out;
  if (!a.out_csv.empty()) {
    csv_file.open(a.out_csv);
    if (!csv_file) throw std::runtime_error("cannot write '" + a.out_csv + "'");
    csv = &csv_file;
  }
  *csv << metrics_header() << '\n';
  if (!a.extended_csv.empty()) {
    ext_file.open(a.extended_csv);
    if (!ext_file) throw std::runtime_error("cannot write '" + a.extended_csv + "'");
    ext_file << "checkpoint,frame,action_swaps,dormant_pct_zero,score_eps0,score_eps0.01,score_eps0.03,score_jitter0.1,"
                "l2_layers\n";
  }
  for (const auto& path : a.checkpoints) {
    LoadedCheckpoint ck = load_checkpoint(path);
    AgentConfig cfg = ck.cfg;
    apply_sets(cfg, a.sets);
    const GridLayout layout = load_layout(cfg.env_layout);
    const EnvOptions env = env_options(cfg);
    const auto seed = static_cast<std::uint64_t>(a.probe_seed);
    const StateProbe probe = collect_probe(layout, env, static_cast<std::size_t>(cfg.probe_size), seed);
    const Learner& learner = *ck.learner;
    ProbeEvaluator<float> pe(probe, learner.num_taus(), derive_seed(seed, 14));
    const ProbeMetrics pm = probe_metrics(learner.online(), pe, cfg.dormant_threshold);

    MetricsRow row;
    row.frame = ck.counters.frames;
    row.episodes = ck.counters.episodes;
    row.epsilon = epsilon_at(ck.counters.frames, cfg);
    row.action_gap = pm.action_gap;
    row.dormant_pct = pm.dormant_pct;
    row.srank = pm.srank;
    row.l2_total = pm.l2.total;
    row.churn = analyze_churn(cfg, layout, learner, pe, pm.greedy, derive_seed(seed, 15));
    const int episodes = a.episodes >= 0 ? a.episodes : static_cast<int>(cfg.eval_episodes);
    auto eval_mean = [&](double eps, double jitter) {
      EvalOptions eo;
      eo.episodes = episodes;
      eo.epsilon = eps;
      eo.brightness_jitter = jitter;
      eo.seed = derive_seed(seed, 16);
      return evaluate(learner.online(), layout, env, eo, learner.num_taus(), cfg.eval_noisy);
    };
    if (episodes > 0) {
      const auto scores = eval_mean(eval_epsilon_at(ck.counters.frames, cfg), 0.0);
      const ScoreSummary s = summarize_scores(scores, static_cast<int>(cfg.bootstrap_resamples), derive_seed(seed, 17));
      row.mean = s.mean;
      row.iqm = s.iqm;
      row.ci_low = s.ci_low;
      row.ci_high = s.ci_high;
    }
    *csv << format_row(row) << '\n';
    if (ext_file.is_open()) {
      ext_file << path << ',' << row.frame << ',' << format_number(pm.action_swaps) << ','
               << format_number(pm.dormant_pct_zero);
      for (auto [eps, jit] : {std::pair{0.0, 0.0}, {0.01, 0.0}, {0.03, 0.0}, {0.0, 0.1}})
        ext_file << ',' << (episodes > 0 ? format_number(mean(eval_mean(eps, jit))) : std::string("nan"));
      ext_file << ',';
      for (std::size_t i = 0; i < pm.l2.layers.size(); ++i)
        ext_file << (i ? ";" : "") << pm.l2.layers[i] << ':' << format_number(pm.l2.norms[i]);
      ext_file << '\n';
    }
  }
  return kExitOk;
}

struct PlotArgs {
  std::vector<std::string> inputs;  // [label=]path.csv or a run directory
  std::string out_dir;
  std::string title = "BTR";
};

inline int cmd_plot(const PlotArgs& a, std::ostream& out) {
  if (a.inputs.empty()) throw UsageError("plot needs at least one metrics CSV or run directory");
  std::vector<std::pair<std::string, std::vector<MetricsRow>>> runs;
  std::string default_out;
  for (const auto& in : a.inputs) {
    std::string label, path = in;
    if (const auto eq = in.find('='); eq != std::string::npos) {
      label = in.substr(0, eq);
      path = in.substr(eq + 1);
    }
    std::filesystem::path p(path);
    if (std::filesystem::is_directory(p)) {
      if (default_out.empty()) default_out = (p / "plots").string();
      p /= "metrics.csv";
    }
    if (label.empty()) label = p.parent_path().filename().string().empty() ? p.stem().string() : p.parent_path().filename().string();
    runs.emplace_back(label, read_metrics(p.string()));
  }
  const std::string out_dir = !a.out_dir.empty() ? a.out_dir : (!default_out.empty() ? default_out : std::string("plots"));
  std::filesystem::create_directories(out_dir);

  std::vector<Series> curve;
  if (runs.size() == 1) {
    curve.push_back(metrics_series("IQM (95% CI)", runs[0].second, &MetricsRow::iqm, true));
    curve.push_back(metrics_series("mean", runs[0].second, &MetricsRow::mean));
  } else {
    for (const auto& [label, rows] : runs) curve.push_back(metrics_series(label, rows, &MetricsRow::iqm, true));
  }
  std::vector<std::string> written;
  auto emit = [&](const std::string& name, const std::string& svg) {
    const std::string path = (std::filesystem::path(out_dir) / name).string();
    write_text_file(path, svg);
    written.push_back(path);
  };
  emit("learning_curve.svg", svg_chart(a.title + ": evaluation return", "frames", "return", curve));
  struct Panel {
    const char* file;
    const char* title;
    double MetricsRow::*field;
  };
  const Panel panels[] = {{"loss.svg", "training loss", &MetricsRow::loss},
                          {"dormant.svg", "dormant neurons (%)", &MetricsRow::dormant_pct},
                          {"srank.svg", "SRank", &MetricsRow::srank},
                          {"churn.svg", "policy churn (%)", &MetricsRow::churn},
                          {"action_gap.svg", "action gap", &MetricsRow::action_gap},
                          {"l2.svg", "weight L2 norm", &MetricsRow::l2_total}};
  for (const auto& panel : panels) {
    std::vector<Series> ss;
    for (const auto& [label, rows] : runs) ss.push_back(metrics_series(label, rows, panel.field));
    emit(panel.file, svg_chart(a.title + ": " + panel.title, "frames", panel.title, ss));
  }
  for (const auto& w : written) out << w << "\n";
  return kExitOk;
}

}  // namespace cli_detail

/// Entry point shared by the executable and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"BTR: training, evaluation and analysis on pixel grid worlds", "btr"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train an agent and write a run directory");
  train->add_option("--config", ta.config, "flat key = value config file")->required();
  train->add_option("--set", ta.sets, "override a config key (key=value), repeatable");
  train->add_option("--run-dir", ta.run_dir, "run directory (default $BTR_RUN_ROOT/<config-hash>-<seed>)");
  train->add_option("--resume", ta.resume, "continue from a checkpoint");
  train->add_option("--keep-checkpoints", ta.keep, "keep only the newest N checkpoints (0 keeps all)");
  train->add_flag("--quiet", ta.quiet, "no progress lines on stderr");
  train->add_flag("--no-analysis", ta.no_analysis, "skip probe metrics at evaluation time");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint, "checkpoint file")->required();
  eval->add_option("--set", ea.sets, "override a config key for the evaluation environment");
  eval->add_option("--episodes", ea.episodes, "episodes (default eval_episodes)");
  eval->add_option("--epsilon", ea.epsilon, "evaluation epsilon (default from the schedule)");
  eval->add_option("--jitter", ea.jitter, "brightness jitter");
  eval->add_option("--seed", ea.seed, "evaluation seed");
  eval->add_option("--out", ea.out_csv, "write per-episode scores as CSV");

  AnalyzeArgs aa;
  auto* analyze = app.add_subcommand("analyze", "probe metrics for checkpoints");
  analyze->add_option("--checkpoint", aa.checkpoints, "checkpoint file, repeatable")->required();
  analyze->add_option("--set", aa.sets, "override a config key (probe environment, thresholds)");
  analyze->add_option("--probe-seed", aa.probe_seed, "seed of the probe rollouts");
  analyze->add_option("--episodes", aa.episodes, "evaluation episodes per checkpoint (0 skips evaluation)");
  analyze->add_option("--out", aa.out_csv, "metrics CSV (default stdout)");
  analyze->add_option("--extended", aa.extended_csv, "extra measurements CSV (swaps, robustness, per-layer L2)");

  PlotArgs pa;
  auto* plot = app.add_subcommand("plot", "SVG charts from metrics CSVs");
  plot->add_option("inputs", pa.inputs, "metrics CSV or run directory, optionally label=path")->required();
  plot->add_option("--out", pa.out_dir, "output directory");
  plot->add_option("--title", pa.title, "chart title prefix");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    app.exit(e, out, err);
    return kExitUsage;
  }
  try {
    if (*train) return cmd_train(ta, out);
    if (*eval) return cmd_eval(ea, out);
    if (*analyze) return cmd_analyze(aa, out);
    if (*plot) return cmd_plot(pa, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace btr
