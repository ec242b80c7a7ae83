#pragma once

#include "btr/analysis.hpp"
#include "btr/checkpoint.hpp"
#include "btr/config.hpp"
#include "btr/envs.hpp"
#include "btr/learner.hpp"
#include "btr/metrics.hpp"
#include "btr/network.hpp"
#include "btr/replay.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

// The training loop: act in a vector of environments, feed replay, take one
// gradient step per vector step once warm, evaluate and checkpoint on a
// fixed frame interval. One environment step is one frame for the grid envs.

namespace btr {

/// Training epsilon at `frame`: linear eps_start -> eps_end over
/// eps_decay_frames, held, then 0 from eps_disable_frame. Milestones are
/// rescaled by total_frames / schedule_reference_frames.
inline double epsilon_at(std::int64_t frame, const AgentConfig& cfg) {
  const AgentConfig s = scaled_schedule(cfg);
  if (frame >= s.eps_disable_frame) return 0.0;
  if (s.eps_decay_frames <= 0 || frame >= s.eps_decay_frames) return s.eps_end;
  const double f = static_cast<double>(frame) / static_cast<double>(s.eps_decay_frames);
  return s.eps_start + (s.eps_end - s.eps_start) * f;
}

/// Evaluation epsilon: eval_epsilon until the (rescaled) disable frame, then 0.
inline double eval_epsilon_at(std::int64_t frame, const AgentConfig& cfg) {
  const AgentConfig s = scaled_schedule(cfg);
  return frame >= s.eval_eps_disable_frame ? 0.0 : s.eval_epsilon;
}

/// Greedy actions for a batch of observations: argmax of the mean over
/// `num_taus` fresh taus, ties to the lowest index. Uses the network's
/// current noise.
template <typename T>
std::vector<int> greedy_actions(Network<T>& net, std::span<const std::uint8_t> obs, int batch, int num_taus,
                                Rng& rng) {
  if (batch == 0) return {};
  const Tensor<T> taus = uniform_taus<T>(batch, num_taus, rng);
  return argmax_rows(net.forward(obs, batch, taus).q_values());
}

/// Epsilon-greedy selection for `batch` observations. Random decisions are
/// drawn first (one uniform per env, then one action for each exploring
/// env); only the greedy envs go through the network.
template <typename T>
std::vector<int> select_actions(Network<T>& net, std::span<const std::uint8_t> obs, int batch, double epsilon,
                                int num_taus, Rng& rng) {
  const int A = net.spec().num_actions;
  const std::size_t obs_bytes = obs.size() / static_cast<std::size_t>(std::max(batch, 1));
  std::vector<int> actions(static_cast<std::size_t>(batch), -1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, A - 1);
  std::vector<int> greedy_idx;
  for (int i = 0; i < batch; ++i) {
    if (epsilon > 0 && coin(rng) < epsilon)
      actions[static_cast<std::size_t>(i)] = pick(rng);
    else
      greedy_idx.push_back(i);
  }
  if (greedy_idx.empty()) return actions;
  if (static_cast<int>(greedy_idx.size()) == batch) return greedy_actions(net, obs, batch, num_taus, rng);
  std::vector<std::uint8_t> sub(greedy_idx.size() * obs_bytes);
  for (std::size_t k = 0; k < greedy_idx.size(); ++k)
    std::copy_n(obs.data() + static_cast<std::size_t>(greedy_idx[k]) * obs_bytes, obs_bytes, sub.data() + k * obs_bytes);
  const auto g = greedy_actions(net, std::span<const std::uint8_t>(sub), static_cast<int>(greedy_idx.size()), num_taus, rng);
  for (std::size_t k = 0; k < greedy_idx.size(); ++k) actions[static_cast<std::size_t>(greedy_idx[k])] = g[k];
  return actions;
}

/// Chooses actions for the listed environments (all mid-episode).
using GreedyPolicy = std::function<std::vector<int>(std::span<GridPixelEnv* const>)>;

struct EvalOptions {
  int episodes = 100;
  double epsilon = 0.0;
  double brightness_jitter = 0.0;
  std::uint64_t seed = 0;
};

/// Runs `episodes` episodes side by side, each on its own freshly seeded
/// environment, and returns their undiscounted, unclipped returns in
/// episode order.
inline std::vector<double> evaluate_policy(const GridLayout& layout, EnvOptions env, const EvalOptions& eo,
                                           const GreedyPolicy& policy) {
  if (eo.episodes < 1) throw std::invalid_argument("evaluation needs at least one episode");
  env.brightness_jitter = eo.brightness_jitter;
  std::vector<GridPixelEnv> envs;
  envs.reserve(static_cast<std::size_t>(eo.episodes));
  for (int i = 0; i < eo.episodes; ++i)
    envs.emplace_back(layout, env, derive_seed(eo.seed, static_cast<std::uint64_t>(i)));
  Rng rng(derive_seed(eo.seed, 0xe7a1));
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, kGridActions - 1);
  std::vector<double> returns(envs.size(), 0.0);
  std::vector<std::size_t> active(envs.size());
  std::iota(active.begin(), active.end(), std::size_t{0});
  while (!active.empty()) {
    std::vector<int> actions(active.size(), -1);
    std::vector<GridPixelEnv*> greedy;
    std::vector<std::size_t> greedy_pos;
    for (std::size_t k = 0; k < active.size(); ++k) {
      if (eo.epsilon > 0 && coin(rng) < eo.epsilon) {
        actions[k] = pick(rng);
      } else {
        greedy.push_back(&envs[active[k]]);
        greedy_pos.push_back(k);
      }
    }
    if (!greedy.empty()) {
      const auto g = policy(std::span<GridPixelEnv* const>(greedy));
      if (g.size() != greedy.size()) throw std::logic_error("policy returned the wrong number of actions");
      for (std::size_t j = 0; j < g.size(); ++j) actions[greedy_pos[j]] = g[j];
    }
    std::vector<std::size_t> still;
    for (std::size_t k = 0; k < active.size(); ++k) {
      const StepOutcome o = envs[active[k]].step(actions[k]);
      returns[active[k]] += o.reward;
      if (!o.terminal && !o.truncated) still.push_back(active[k]);
    }
    active.swap(still);
  }
  return returns;
}

/// Network policy for evaluate_policy: zero noise unless `noisy`, fresh
/// taus per decision. `net` is copied.
template <typename T>
GreedyPolicy network_policy(const Network<T>& net, int num_taus, std::uint64_t seed, bool noisy = false) {
  auto n = std::make_shared<Network<T>>(net);
  auto rng = std::make_shared<Rng>(seed);
  if (!noisy) n->zero_noise();
  return [n, rng, num_taus, noisy](std::span<GridPixelEnv* const> envs) {
    if (noisy) n->sample_noise(*rng);
    const std::size_t bytes = envs.front()->obs_bytes();
    std::vector<std::uint8_t> obs(envs.size() * bytes);
    for (std::size_t i = 0; i < envs.size(); ++i)
      std::copy(envs[i]->observation().begin(), envs[i]->observation().end(), obs.begin() + static_cast<std::ptrdiff_t>(i * bytes));
    return greedy_actions(*n, std::span<const std::uint8_t>(obs), static_cast<int>(envs.size()), num_taus, *rng);
  };
}

template <typename T>
std::vector<double> evaluate(const Network<T>& net, const GridLayout& layout, const EnvOptions& env,
                             const EvalOptions& eo, int num_taus, bool noisy = false) {
  return evaluate_policy(layout, env, eo, network_policy(net, num_taus, derive_seed(eo.seed, 0x7a05), noisy));
}

struct ScoreSummary {
  double mean = 0, iqm = 0, ci_low = 0, ci_high = 0;
};

inline ScoreSummary summarize_scores(const std::vector<double>& scores, int resamples, std::uint64_t seed) {
  ScoreSummary s;
  s.mean = btr::mean(scores);
  s.iqm = iqm(scores);
  std::tie(s.ci_low, s.ci_high) = bootstrap_ci(scores, resamples, 0.95, seed);
  return s;
}

struct ProbeMetrics {
  double action_gap = std::numeric_limits<double>::quiet_NaN();
  double action_swaps = std::numeric_limits<double>::quiet_NaN();
  double dormant_pct = std::numeric_limits<double>::quiet_NaN();
  double dormant_pct_zero = std::numeric_limits<double>::quiet_NaN();
  double srank = std::numeric_limits<double>::quiet_NaN();
  WeightNorms l2;
  std::vector<int> greedy;
};

/// Zero-noise measurements of one network on a probe.
inline ProbeMetrics probe_metrics(const Network<float>& net, const ProbeEvaluator<float>& pe, double dormant_threshold) {
  ProbeMetrics m;
  auto r = pe.run(net, true, true);
  m.action_gap = action_gap_q(r.q);
  m.action_swaps = action_swaps(r.greedy);
  m.dormant_pct = dormant_fraction(r.recorder, dormant_threshold).percent();
  m.dormant_pct_zero = dormant_fraction(r.recorder, 0.0).percent();
  m.srank = srank(r.features, 0.01);
  m.l2 = weight_l2(net);
  m.greedy = std::move(r.greedy);
  return m;
}

/// Churn of one gradient step: a copy of the learner takes one step on a
/// freshly sampled batch and the probe's greedy actions are compared.
inline double measure_churn(const Learner& learner, const PrioritizedReplay& replay, std::size_t batch, double beta,
                            const ProbeEvaluator<float>& pe, const std::vector<int>& before, Rng& rng) {
  if (replay.size() < std::max<std::size_t>(batch, replay.options().min_size))
    return std::numeric_limits<double>::quiet_NaN();
  Learner copy = learner;
  copy.learn(replay.sample(batch, beta, rng));
  const auto after = pe.run(copy.online(), false, false).greedy;
  return policy_churn(before, after);
}

struct TrainOptions {
  std::string run_dir;      // metrics.csv and checkpoints go here; empty keeps everything in memory
  std::string resume_from;  // checkpoint to continue from
  int keep_checkpoints = 0;  // 0 keeps all
  bool progress = true;
  bool analysis = true;
  std::function<void(const MetricsRow&)> on_eval;
};

struct TrainResult {
  TrainCounters counters;
  std::vector<MetricsRow> rows;
  std::string final_checkpoint;
  bool early_stopped = false;
  double oracle_return = 0.0;  // undiscounted optimum of the training layout
  double seconds = 0.0;
};

/// Number of frames before learning may start: min_replay_size rounded up
/// to whole vector steps.
inline std::int64_t warmup_frames(const AgentConfig& cfg) {
  const std::int64_t e = cfg.use_vectorization ? cfg.num_envs : 1;
  return (cfg.min_replay_size + e - 1) / e * e;
}

inline ReplayOptions replay_options(const AgentConfig& cfg, std::size_t obs_bytes) {
  ReplayOptions o;
  o.capacity = static_cast<std::size_t>(cfg.replay_capacity);
  o.obs_bytes = obs_bytes;
  o.num_envs = cfg.use_vectorization ? static_cast<int>(cfg.num_envs) : 1;
  o.n_step = static_cast<int>(cfg.n_step);
  o.gamma = cfg.discount;
  o.alpha = cfg.use_per ? cfg.per_alpha : 0.0;
  o.priority_epsilon = cfg.per_priority_epsilon;
  o.min_size = 1;
  return o;
}

namespace orch_detail {

inline std::string checkpoint_path(const std::string& dir, std::int64_t frame) {
  return (std::filesystem::path(dir) / ("ckpt_" + std::to_string(frame) + ".bin")).string();
}

}  // namespace orch_detail

inline TrainResult run_training(const AgentConfig& cfg_in, const TrainOptions& topt = {}) {
  validate(cfg_in);
  const auto t0 = std::chrono::steady_clock::now();
  AgentConfig cfg = cfg_in;
  const bool vec = cfg.use_vectorization;
  const int E = vec ? static_cast<int>(cfg.num_envs) : 1;
  const std::size_t batch = static_cast<std::size_t>(vec ? cfg.batch_size : cfg.nonvec_batch_size);
  const int train_every = vec ? 1 : static_cast<int>(cfg.nonvec_train_every);
  const std::uint64_t seed = static_cast<std::uint64_t>(cfg.master_seed);

  const GridLayout layout = load_layout(cfg.env_layout);
  const EnvOptions env_opt = env_options(cfg);
  const NetworkSpec spec = network_spec(cfg, kGridActions);

  TrainResult result;
  result.oracle_return = oracle_optimal_return(layout, env_opt, cfg.discount).undiscounted;

  std::unique_ptr<Learner> learner;
  TrainCounters c;
  bool resumed = false;
  if (!topt.resume_from.empty()) {
    LoadedCheckpoint ck = load_checkpoint(topt.resume_from);
    if (network_spec(ck.cfg, ck.num_actions) != spec)
      throw CheckpointError("checkpoint network does not match the configured network");
    learner = std::move(ck.learner);
    c = ck.counters;
    resumed = true;
  } else {
    learner = std::make_unique<Learner>(cfg, spec, derive_seed(seed, 12));
  }

  VectorEnv venv(layout, env_opt, E, derive_seed(derive_seed(seed, 10), static_cast<std::uint64_t>(c.frames)));
  PrioritizedReplay replay(replay_options(cfg, venv.obs_bytes()));
  Rng act_rng(derive_seed(derive_seed(seed, 11), static_cast<std::uint64_t>(c.frames)));
  Rng churn_rng(derive_seed(seed, 15));
  const int num_taus = learner->num_taus();

  std::optional<StateProbe> probe;
  std::optional<ProbeEvaluator<float>> pe;
  if (topt.analysis) {
    probe = collect_probe(layout, env_opt, static_cast<std::size_t>(cfg.probe_size), derive_seed(seed, 13));
    pe.emplace(*probe, num_taus, derive_seed(seed, 14));
  }

  MetricsWriter writer;
  if (!topt.run_dir.empty()) {
    std::filesystem::create_directories(topt.run_dir);
    writer = MetricsWriter((std::filesystem::path(topt.run_dir) / "metrics.csv").string(), resumed);
  }
  std::vector<std::string> saved;

  const std::int64_t warmup = warmup_frames(cfg);
  // A resumed run refills replay before learning again.
  const std::size_t refill = resumed ? static_cast<std::size_t>(std::max<std::int64_t>(cfg.min_replay_size, 1)) : batch;
  double loss_sum = 0, grad_sum = 0;
  std::int64_t loss_n = 0;
  std::int64_t next_eval = (c.frames / cfg.eval_interval + 1) * cfg.eval_interval;
  auto last_print = std::chrono::steady_clock::now();

  auto evaluate_now = [&]() -> MetricsRow {
    MetricsRow row;
    row.frame = c.frames;
    row.episodes = c.episodes;
    EvalOptions eo;
    eo.episodes = static_cast<int>(cfg.eval_episodes);
    eo.epsilon = eval_epsilon_at(c.frames, cfg);
    eo.seed = derive_seed(seed, 16);
    const auto scores = evaluate(learner->online(), layout, env_opt, eo, num_taus, cfg.eval_noisy);
    const ScoreSummary s = summarize_scores(scores, static_cast<int>(cfg.bootstrap_resamples), derive_seed(seed, 17));
    row.mean = s.mean;
    row.iqm = s.iqm;
    row.ci_low = s.ci_low;
    row.ci_high = s.ci_high;
    if (loss_n > 0) {
      row.loss = loss_sum / static_cast<double>(loss_n);
      row.grad_norm = grad_sum / static_cast<double>(loss_n);
    }
    row.epsilon = epsilon_at(c.frames, cfg);
    if (pe) {
      const ProbeMetrics pm = probe_metrics(learner->online(), *pe, cfg.dormant_threshold);
      row.action_gap = pm.action_gap;
      row.dormant_pct = pm.dormant_pct;
      row.srank = pm.srank;
      row.l2_total = pm.l2.total;
      const double beta = per_beta_at(c.frames, cfg.total_frames, cfg.per_beta_start, cfg.per_beta_end);
      row.churn = measure_churn(*learner, replay, batch, beta, *pe, pm.greedy, churn_rng);
    } else {
      row.l2_total = weight_l2(learner->online()).total;
    }
    loss_sum = grad_sum = 0;
    loss_n = 0;
    return row;
  };

  auto save = [&](const std::string& path) {
    c.grad_steps = learner->grad_steps();
    c.since_sync = learner->steps_since_sync();
    save_checkpoint(path, cfg, kGridActions, c, *learner);
  };

  auto record = [&](const MetricsRow& row) {
    result.rows.push_back(row);
    writer.write(row);
    if (!topt.run_dir.empty()) {
      const std::string path = orch_detail::checkpoint_path(topt.run_dir, c.frames);
      save(path);
      result.final_checkpoint = path;
      saved.push_back(path);
      if (topt.keep_checkpoints > 0)
        while (saved.size() > static_cast<std::size_t>(topt.keep_checkpoints)) {
          std::filesystem::remove(saved.front());
          saved.erase(saved.begin());
        }
    }
    if (topt.on_eval) topt.on_eval(row);
    if (topt.progress)
      std::fprintf(stderr, "[eval] frame %lld  mean %.4f  iqm %.4f  ci [%.4f, %.4f]  eps %.3f  loss %s\n",
                   static_cast<long long>(row.frame), row.mean, row.iqm, row.ci_low, row.ci_high, row.epsilon,
                   format_number(row.loss).c_str());
  };

  std::vector<std::uint8_t> obs;
  try {
    while (c.frames < cfg.total_frames) {
      obs = venv.observations();
      const double eps = epsilon_at(c.frames, cfg);
      learner->online().sample_noise(act_rng);
      const auto actions = select_actions(learner->online(), std::span<const std::uint8_t>(obs), E, eps, num_taus, act_rng);
      const VectorStep vs = venv.step(actions);
      c.frames += E;
      ++c.env_steps;
      const std::size_t ob = venv.obs_bytes();
      for (int i = 0; i < E; ++i) {
        const auto off = static_cast<std::size_t>(i) * ob;
        c.transitions += static_cast<std::int64_t>(
            replay.push(i, std::span<const std::uint8_t>(obs.data() + off, ob), actions[static_cast<std::size_t>(i)],
                        clip_reward(vs.rewards[static_cast<std::size_t>(i)], cfg.reward_clip),
                        std::span<const std::uint8_t>(vs.final_obs.data() + off, ob), vs.terminal[static_cast<std::size_t>(i)],
                        vs.truncated[static_cast<std::size_t>(i)]));
      }
      c.episodes += static_cast<std::int64_t>(vs.finished_returns.size());

      if (c.frames > warmup && c.env_steps % train_every == 0 && replay.size() >= refill) {
        const LossReport r = learner->train_step(replay, batch, c.frames);
        loss_sum += r.loss;
        grad_sum += r.grad_norm_preclip;
        ++loss_n;
      }
      c.grad_steps = learner->grad_steps();
      c.since_sync = learner->steps_since_sync();

      const bool at_end = c.frames >= cfg.total_frames;
      if (c.frames >= next_eval || at_end) {
        while (next_eval <= c.frames) next_eval += cfg.eval_interval;
        const MetricsRow row = evaluate_now();
        record(row);
        if (cfg.early_stop_fraction > 0 && row.mean >= cfg.early_stop_fraction * result.oracle_return) {
          result.early_stopped = true;
          break;
        }
      }
      if (topt.progress) {
        const auto now = std::chrono::steady_clock::now();
        if (now - last_print > std::chrono::seconds(10)) {
          last_print = now;
          const double secs = std::chrono::duration<double>(now - t0).count();
          std::fprintf(stderr, "[train] frame %lld/%lld  grad steps %lld  episodes %lld  eps %.3f  %.0f fps\n",
                       static_cast<long long>(c.frames), static_cast<long long>(cfg.total_frames),
                       static_cast<long long>(c.grad_steps), static_cast<long long>(c.episodes), eps,
                       static_cast<double>(c.frames) / std::max(secs, 1e-9));
        }
      }
    }
  } catch (...) {
    if (!topt.run_dir.empty()) {
      try {
        save((std::filesystem::path(topt.run_dir) / ("ckpt_" + std::to_string(c.frames) + "_crash.bin")).string());
      } catch (...) {
      }
    }
    throw;
  }
  result.counters = c;
  result.counters.grad_steps = learner->grad_steps();
  result.counters.since_sync = learner->steps_since_sync();
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace btr
