#include "btr/orchestrator.hpp"
#include "support/oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace btr {
namespace {

namespace fs = std::filesystem;

// ---- schedules ----

TEST(Epsilon, PublishedScheduleMilestones) {
  const AgentConfig cfg;  // 200M frames, reference 200M
  EXPECT_DOUBLE_EQ(epsilon_at(0, cfg), 1.0);
  EXPECT_NEAR(epsilon_at(4'000'000, cfg), 0.505, 1e-12);
  EXPECT_DOUBLE_EQ(epsilon_at(8'000'000, cfg), 0.01);
  EXPECT_DOUBLE_EQ(epsilon_at(50'000'000, cfg), 0.01);
  EXPECT_DOUBLE_EQ(epsilon_at(99'999'999, cfg), 0.01);
  EXPECT_DOUBLE_EQ(epsilon_at(100'000'000, cfg), 0.0);
  EXPECT_DOUBLE_EQ(eval_epsilon_at(124'999'999, cfg), 0.01);
  EXPECT_DOUBLE_EQ(eval_epsilon_at(125'000'000, cfg), 0.0);
}

TEST(Epsilon, MilestonesScaleWithBudget) {
  AgentConfig cfg;
  cfg.total_frames = 2'000'000;  // 1% of the reference budget
  EXPECT_DOUBLE_EQ(epsilon_at(0, cfg), 1.0);
  EXPECT_NEAR(epsilon_at(40'000, cfg), 0.505, 1e-12);
  EXPECT_DOUBLE_EQ(epsilon_at(80'000, cfg), 0.01);
  EXPECT_DOUBLE_EQ(epsilon_at(999'999, cfg), 0.01);
  EXPECT_DOUBLE_EQ(epsilon_at(1'000'000, cfg), 0.0);
  EXPECT_DOUBLE_EQ(eval_epsilon_at(1'249'999, cfg), 0.01);
  EXPECT_DOUBLE_EQ(eval_epsilon_at(1'250'000, cfg), 0.0);
}

// ---- action selection ----

NetworkSpec tiny_spec() {
  NetworkSpec s;
  s.height = 16;
  s.width = 16;
  s.num_actions = 4;
  s.width_scale = 1;
  s.maxpool_out = 1;
  s.dueling_hidden = 8;
  s.cos_embedding = 8;
  return s;
}

// All weights zero; the advantage bias picks the favourite (or ties all).
Network<float> constant_net(int favourite) {
  Network<float> net(tiny_spec(), 1);
  for (auto* p : net.params()) p->value.zero();
  if (favourite >= 0)
    for (auto* p : net.params())
      if (p->name == "head.adv_out.bias_mu") p->value[static_cast<std::size_t>(favourite)] = 1.0f;
  return net;
}

std::vector<std::uint8_t> random_obs(int batch, Rng& rng) {
  std::vector<std::uint8_t> obs(static_cast<std::size_t>(batch) * 4 * 16 * 16);
  for (auto& v : obs) v = static_cast<std::uint8_t>(rng() & 0xFF);
  return obs;
}

TEST(SelectActions, TiesGoToLowestIndex) {
  auto net = constant_net(-1);
  Rng rng(1);
  const auto obs = random_obs(5, rng);
  for (int a : select_actions(net, obs, 5, 0.0, 4, rng)) EXPECT_EQ(a, 0);
}

TEST(SelectActions, GreedyFollowsDominantAction) {
  auto net = constant_net(2);
  Rng rng(2);
  const auto obs = random_obs(7, rng);
  for (int a : select_actions(net, obs, 7, 0.0, 4, rng)) EXPECT_EQ(a, 2);
}

TEST(SelectActions, EpsilonMixtureFrequencies) {
  auto net = constant_net(2);
  Rng rng(3);
  const auto obs = random_obs(16, rng);
  for (double eps : {1.0, 0.3}) {
    std::vector<std::size_t> counts(4, 0);
    for (int rep = 0; rep < 1500; ++rep)
      for (int a : select_actions(net, obs, 16, eps, 2, rng)) ++counts[static_cast<std::size_t>(a)];
    std::vector<double> p(4, eps / 4);
    p[2] += 1.0 - eps;
    EXPECT_LT(oracle::chi2_statistic(counts, p), oracle::chi2_critical(3, 0.999)) << eps;
  }
}

TEST(SelectActions, ExploringEnvsSkipTheNetwork) {
  // with every env exploring the result must not depend on the network
  auto a = constant_net(1), b = constant_net(3);
  Rng obs_rng(4);
  const auto obs = random_obs(6, obs_rng);
  Rng r1(9), r2(9);
  EXPECT_EQ(select_actions(a, obs, 6, 1.0, 4, r1), select_actions(b, obs, 6, 1.0, 4, r2));
}

// ---- evaluation ----

EnvOptions small_env(double sticky = 0.0) {
  EnvOptions o;
  o.height = 16;
  o.width = 16;
  o.sticky_action_prob = sticky;
  o.max_episode_steps = 50;
  return o;
}

// right along the top row, then down the last column
std::vector<int> hand_policy(std::span<GridPixelEnv* const> envs) {
  std::vector<int> out;
  for (auto* e : envs) out.push_back(e->agent() % e->layout().cols < e->layout().cols - 1 ? 3 : 1);
  return out;
}

TEST(Evaluate, OptimalHandPolicyScoresTheOracle) {
  const auto layout = load_layout("open3");
  EvalOptions eo;
  eo.episodes = 20;
  const auto scores = evaluate_policy(layout, small_env(), eo, hand_policy);
  ASSERT_EQ(scores.size(), 20u);
  const double oracle = oracle_optimal_return(layout, small_env(), 0.99).undiscounted;
  EXPECT_NEAR(oracle, 0.96, 1e-9);
  for (double s : scores) EXPECT_NEAR(s, oracle, 1e-12);
}

// Uniform-random episodes simulated directly on one environment.
double random_policy_reference(const GridLayout& layout, const EnvOptions& o, int episodes, std::uint64_t seed) {
  GridPixelEnv env(layout, o, seed);
  Rng rng(seed + 1);
  std::uniform_int_distribution<int> pick(0, 3);
  double sum = 0;
  for (int e = 0; e < episodes; ++e) {
    env.reset();
    for (;;) {
      const auto out = env.step(pick(rng));
      sum += out.reward;
      if (out.terminal || out.truncated) break;
    }
  }
  return sum / episodes;
}

TEST(Evaluate, EpsilonOneMatchesRandomReference) {
  const auto layout = load_layout("open3");
  EnvOptions o = small_env(0.25);
  o.max_episode_steps = 20;
  EvalOptions eo;
  eo.episodes = 4000;
  eo.epsilon = 1.0;
  eo.seed = 5;
  const auto scores = evaluate_policy(layout, o, eo, hand_policy);
  const double ref = random_policy_reference(layout, o, 40000, 99);
  double m = 0, sq = 0;
  for (double s : scores) m += s, sq += s * s;
  m /= static_cast<double>(scores.size());
  const double se = std::sqrt((sq / static_cast<double>(scores.size()) - m * m) / static_cast<double>(scores.size()));
  EXPECT_NEAR(m, ref, 4.5 * se);
}

TEST(Evaluate, ZeroPerturbationsEqualPlainEvaluation) {
  const auto layout = load_layout("hazard8");
  Network<float> net(tiny_spec(), 3);
  EvalOptions eo;
  eo.episodes = 6;
  eo.seed = 8;
  const auto plain = evaluate(net, layout, small_env(0.25), eo, 4);
  EXPECT_EQ(evaluate(net, layout, small_env(0.25), eo, 4), plain);
  eo.brightness_jitter = 0.0;
  eo.epsilon = 0.0;
  EXPECT_EQ(evaluate(net, layout, small_env(0.25), eo, 4), plain);
}

TEST(Evaluate, DoesNotMutateTheNetwork) {
  Network<float> net(tiny_spec(), 4);
  Rng rng(1);
  net.sample_noise(rng);
  const Network<float> before = net;
  EvalOptions eo;
  eo.episodes = 4;
  evaluate(net, load_layout("open8"), small_env(), eo, 4, true);
  const auto a = net.params();
  const auto b = before.params();
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k]->value.data, b[k]->value.data) << a[k]->name;
  Rng t(2);
  const auto taus = uniform_taus<float>(1, 4, t);
  std::vector<std::uint8_t> obs(4 * 16 * 16, 40);
  Network<float> n1 = net, n2 = before;
  EXPECT_EQ(n1.forward(obs, 1, taus).quantiles.data, n2.forward(obs, 1, taus).quantiles.data);
}

TEST(Evaluate, SummaryBracketsIqm) {
  const std::vector<double> s{0.1, 0.5, 0.9, 0.3, 0.7, 0.2};
  const auto sum = summarize_scores(s, 1000, 3);
  EXPECT_NEAR(sum.mean, 0.45, 1e-12);
  EXPECT_LE(sum.ci_low, sum.iqm);
  EXPECT_GE(sum.ci_high, sum.iqm);
}

// ---- training loop ----

AgentConfig tiny_config() {
  AgentConfig c;
  c.env_layout = "open3";
  c.render_height = 16;
  c.render_width = 16;
  c.env_max_episode_steps = 30;
  c.impala_width = 1;
  c.maxpool_out = 1;
  c.dueling_hidden = 16;
  c.iqn_taus = 4;
  c.iqn_cos_embedding = 8;
  c.num_envs = 4;
  c.batch_size = 8;
  c.nonvec_batch_size = 8;
  c.replay_capacity = 1024;
  c.min_replay_size = 64;
  c.target_update_period = 10;
  c.learning_rate = 1e-3;
  c.total_frames = 400;
  c.eval_interval = 200;
  c.eval_episodes = 5;
  c.probe_size = 30;
  c.bootstrap_resamples = 1000;
  c.master_seed = 7;
  return c;
}

TrainOptions quiet(const std::string& dir = {}) {
  TrainOptions t;
  t.run_dir = dir;
  t.progress = false;
  return t;
}

std::string temp_dir(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("btr_orch_" + name);
  fs::remove_all(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

TEST(Training, WarmupEqualToBudgetMeansNoLearning) {
  auto cfg = tiny_config();
  cfg.total_frames = 64;
  cfg.min_replay_size = 64;
  const auto r = run_training(cfg, quiet());
  EXPECT_EQ(r.counters.frames, 64);
  EXPECT_EQ(r.counters.grad_steps, 0);
}

TEST(Training, GradStepCountIsExact) {
  auto cfg = tiny_config();
  cfg.min_replay_size = 62;  // rounds up to 64 frames
  EXPECT_EQ(warmup_frames(cfg), 64);
  const auto r = run_training(cfg, quiet());
  EXPECT_EQ(r.counters.frames, 400);
  EXPECT_EQ(r.counters.env_steps, 100);
  EXPECT_EQ(r.counters.grad_steps, (400 - 64) / 4);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[0].frame, 200);
  EXPECT_EQ(r.rows[1].frame, 400);
}

TEST(Training, NonVectorisedTrainsEveryFourthStep) {
  auto cfg = tiny_config();
  cfg.use_vectorization = false;
  cfg.total_frames = 200;
  const auto r = run_training(cfg, quiet());
  EXPECT_EQ(r.counters.env_steps, 200);
  EXPECT_EQ(r.counters.grad_steps, (200 - 64) / 4);
}

TEST(Training, MetricsFileIsDeterministic) {
  const auto a = temp_dir("det_a"), b = temp_dir("det_b");
  run_training(tiny_config(), quiet(a));
  run_training(tiny_config(), quiet(b));
  const std::string ma = slurp(a + "/metrics.csv");
  EXPECT_FALSE(ma.empty());
  EXPECT_EQ(ma, slurp(b + "/metrics.csv"));
  const auto rows = read_metrics(a + "/metrics.csv");
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& row : rows) {
    EXPECT_LE(row.ci_low, row.iqm);
    EXPECT_GE(row.ci_high, row.iqm);
    EXPECT_TRUE(std::isfinite(row.dormant_pct));
    EXPECT_TRUE(std::isfinite(row.srank));
    EXPECT_TRUE(std::isfinite(row.churn));
  }
  EXPECT_TRUE(fs::exists(a + "/ckpt_200.bin"));
  EXPECT_TRUE(fs::exists(a + "/ckpt_400.bin"));
}

TEST(Training, ResumeContinuesCountersAndAppendsMetrics) {
  const auto dir = temp_dir("resume");
  auto cfg = tiny_config();
  cfg.total_frames = 200;
  const auto first = run_training(cfg, quiet(dir));
  ASSERT_EQ(first.final_checkpoint, dir + "/ckpt_200.bin");
  cfg.total_frames = 400;
  auto opts = quiet(dir);
  opts.resume_from = first.final_checkpoint;
  const auto second = run_training(cfg, opts);
  EXPECT_EQ(second.counters.frames, 400);
  EXPECT_EQ(second.counters.env_steps, 100);
  EXPECT_GE(second.counters.episodes, first.counters.episodes);
  // learning resumes only after the replay refills to min_replay_size
  const std::int64_t new_steps = second.counters.grad_steps - first.counters.grad_steps;
  EXPECT_GT(new_steps, 0);
  EXPECT_LE(new_steps, (400 - 200) / 4 - 64 / 4 + 1);
  ASSERT_EQ(second.rows.size(), 1u);
  EXPECT_EQ(second.rows[0].frame, 400);
  const auto rows = read_metrics(dir + "/metrics.csv");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].frame, 200);
  EXPECT_EQ(rows[1].frame, 400);
}

TEST(Training, ResumeRejectsDifferentNetwork) {
  const auto dir = temp_dir("resume_bad");
  auto cfg = tiny_config();
  cfg.total_frames = 200;
  const auto first = run_training(cfg, quiet(dir));
  cfg.dueling_hidden = 32;
  cfg.total_frames = 400;
  auto opts = quiet(dir);
  opts.resume_from = first.final_checkpoint;
  EXPECT_THROW(run_training(cfg, opts), CheckpointError);
}

TEST(Training, KeepsOnlyRecentCheckpoints) {
  const auto dir = temp_dir("prune");
  auto cfg = tiny_config();
  cfg.eval_interval = 100;
  auto opts = quiet(dir);
  opts.keep_checkpoints = 2;
  run_training(cfg, opts);
  EXPECT_FALSE(fs::exists(dir + "/ckpt_100.bin"));
  EXPECT_FALSE(fs::exists(dir + "/ckpt_200.bin"));
  EXPECT_TRUE(fs::exists(dir + "/ckpt_300.bin"));
  EXPECT_TRUE(fs::exists(dir + "/ckpt_400.bin"));
}

TEST(Training, EarlyStopAtOracleFraction) {
  auto cfg = tiny_config();
  cfg.env_layout = "pair";
  cfg.eval_epsilon = 1.0;  // random evaluation reaches the adjacent goal
  cfg.early_stop_fraction = 0.1;
  cfg.eval_interval = 100;
  const auto r = run_training(cfg, quiet());
  EXPECT_TRUE(r.early_stopped);
  EXPECT_EQ(r.counters.frames, 100);
  EXPECT_NEAR(r.oracle_return, 0.99, 1e-9);
}

TEST(Training, FailureLeavesCrashCheckpoint) {
  const auto dir = temp_dir("crash");
  auto opts = quiet(dir);
  opts.on_eval = [](const MetricsRow&) { throw std::runtime_error("boom"); };
  EXPECT_THROW(run_training(tiny_config(), opts), std::runtime_error);
  ASSERT_TRUE(fs::exists(dir + "/ckpt_200_crash.bin"));
  EXPECT_EQ(load_checkpoint(dir + "/ckpt_200_crash.bin").counters.frames, 200);
}

}  // namespace
}  // namespace btr
