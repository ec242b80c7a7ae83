#include "btr/envs.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>

namespace btr {
namespace {

constexpr int kUp = 0, kDown = 1, kLeft = 2, kRight = 3;

EnvOptions tiny_render(int h = 8, int w = 8) {
  EnvOptions o;
  o.height = h;
  o.width = w;
  o.frame_stack = 1;
  return o;
}

// ---- oracle ----

TEST(Oracle, PairIsOneStep) {
  EnvOptions o = tiny_render(2, 2);
  o.sticky_action_prob = 0.0;
  o.step_penalty = 0.0;
  EXPECT_NEAR(oracle_optimal_return(load_layout("pair"), o, 0.99).undiscounted, 1.0, 1e-9);
  o.step_penalty = -0.01;
  EXPECT_NEAR(oracle_optimal_return(load_layout("pair"), o, 0.99).undiscounted, 0.99, 1e-9);
}

TEST(Oracle, OpenThreeWithoutStickiness) {
  EnvOptions o = tiny_render(3, 3);
  o.sticky_action_prob = 0.0;
  const auto r = oracle_optimal_return(load_layout("open3"), o, 0.9);
  EXPECT_NEAR(r.undiscounted, 1.0 - 4 * 0.01, 1e-9);
  // four steps, penalty every step, goal bonus on the last
  const double disc = -0.01 * (1 + 0.9 + 0.81 + 0.729) + 0.729 * 1.0;
  EXPECT_NEAR(r.discounted, disc, 1e-9);
}

// On an open n x n grid the agent must turn once. Turning fails with
// probability p and retries, so it costs 1 / (1 - p) steps in expectation.
double open_grid_return(int n, double p, double penalty) {
  const double steps = 2.0 * (n - 1) - 1.0 + 1.0 / (1.0 - p);
  return 1.0 + penalty * steps;
}

TEST(Oracle, StickyOpenGridsMatchClosedForm) {
  for (double p : {0.1, 0.25, 0.5}) {
    EnvOptions o = tiny_render();
    o.sticky_action_prob = p;
    EXPECT_NEAR(oracle_optimal_return(load_layout("open3"), o, 0.99).undiscounted, open_grid_return(3, p, -0.01), 1e-8);
    EXPECT_NEAR(oracle_optimal_return(load_layout("open8"), o, 0.99).undiscounted, open_grid_return(8, p, -0.01), 1e-8);
  }
}

TEST(Oracle, ChainTwoIgnoresStickiness) {
  EnvOptions o = tiny_render(3, 3);
  o.sticky_action_prob = 0.25;
  EXPECT_NEAR(oracle_optimal_return(load_layout("chain2"), o, 0.99).undiscounted, 0.98, 1e-9);
}

// Monte Carlo of the env itself under the turn-once policy.
TEST(Oracle, MonteCarloAgreesWithStickyOracle) {
  EnvOptions o = tiny_render(3, 3);
  o.sticky_action_prob = 0.25;
  const auto layout = load_layout("open3");
  GridPixelEnv env(layout, o, 77);
  const int episodes = 200000;
  double sum = 0, sq = 0;
  for (int e = 0; e < episodes; ++e) {
    env.reset();
    double ret = 0;
    for (;;) {
      const int a = env.agent() % 3 < 2 ? kRight : kDown;
      const auto out = env.step(a);
      ret += out.reward;
      if (out.terminal || out.truncated) break;
    }
    sum += ret;
    sq += ret * ret;
  }
  const double mean = sum / episodes;
  const double se = std::sqrt((sq / episodes - mean * mean) / episodes);
  const double want = oracle_optimal_return(layout, o, 0.99).undiscounted;
  EXPECT_NEAR(mean, want, 4 * se + 1e-9);
}

TEST(Oracle, HazardsAreAvoided) {
  EnvOptions o = tiny_render();
  o.sticky_action_prob = 0.0;
  // 14 steps is the shortest route and it can avoid every hazard
  EXPECT_NEAR(oracle_optimal_return(load_layout("hazard8"), o, 0.99).undiscounted, 1.0 - 0.14, 1e-9);
}

// ---- dynamics ----

TEST(Env, StickyRepeatFrequency) {
  EnvOptions o = tiny_render();
  o.max_episode_steps = 1 << 30;
  GridPixelEnv env(load_layout("open8"), o, 5);
  // alternate two blocked moves so the agent never leaves the corner
  const int n = 200000;
  int repeats = 0;
  env.step(kUp);
  for (int t = 0; t < n; ++t) {
    env.step(t % 2 ? kUp : kLeft);
    repeats += env.last_was_repeat();
  }
  EXPECT_NEAR(static_cast<double>(repeats) / n, 0.25, 0.01);
}

TEST(Env, FirstStepAfterResetIsNeverSticky) {
  EnvOptions o = tiny_render();
  o.sticky_action_prob = 0.9;
  GridPixelEnv env(load_layout("open8"), o, 2);
  for (int e = 0; e < 200; ++e) {
    env.reset();
    env.step(kRight);
    EXPECT_FALSE(env.last_was_repeat());
    EXPECT_EQ(env.agent(), 1);
  }
}

TEST(Env, SameSeedSameTrajectory) {
  EnvOptions o = tiny_render(16, 16);
  o.brightness_jitter = 0.1;
  GridPixelEnv a(load_layout("hazard8"), o, 42), b(load_layout("hazard8"), o, 42);
  Rng pick(1);
  for (int t = 0; t < 2000; ++t) {
    const int act = static_cast<int>(pick() % 4);
    const auto ra = a.step(act), rb = b.step(act);
    ASSERT_EQ(ra.reward, rb.reward);
    ASSERT_EQ(a.observation(), b.observation());
    if (ra.terminal || ra.truncated) {
      a.reset();
      b.reset();
    }
  }
}

TEST(Env, JitterScalesWholeFrameWithinBounds) {
  EnvOptions o = tiny_render(8, 8);
  const auto layout = load_layout("open8");
  GridPixelEnv plain(layout, o, 3);
  o.brightness_jitter = 0.1;
  GridPixelEnv jit(layout, o, 3);
  for (int t = 0; t < 50; ++t) {
    plain.step(kDown);
    jit.step(kDown);
    const auto& p = plain.observation();
    const auto& q = jit.observation();
    double lo = 1e9, hi = -1e9;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] * 1.1 <= 255) {  // brighter pixels may clamp
        const double ratio = static_cast<double>(q[i]) / p[i];
        lo = std::min(lo, ratio);
        hi = std::max(hi, ratio);
        EXPECT_GE(q[i], std::floor(p[i] * 0.9) - 1);
        EXPECT_LE(q[i], std::ceil(p[i] * 1.1) + 1);
      }
    }
    // one factor per frame: every pixel ratio agrees up to rounding
    EXPECT_LT(hi - lo, 0.04);
    if (plain.steps() >= 7) break;
  }
}

TEST(Env, TruncatesAtStepLimitWithoutTerminal) {
  EnvOptions o = tiny_render();
  o.max_episode_steps = 3;
  GridPixelEnv env(load_layout("open8"), o, 0);
  EXPECT_FALSE(env.step(kUp).truncated);
  EXPECT_FALSE(env.step(kUp).truncated);
  const auto last = env.step(kUp);
  EXPECT_TRUE(last.truncated);
  EXPECT_FALSE(last.terminal);
}

TEST(Env, TerminalWinsOverTruncation) {
  EnvOptions o = tiny_render(2, 2);
  o.max_episode_steps = 1;
  GridPixelEnv env(load_layout("pair"), o, 0);
  const auto r = env.step(kRight);
  EXPECT_TRUE(r.terminal);
  EXPECT_FALSE(r.truncated);
  EXPECT_DOUBLE_EQ(r.reward, 0.99);
}

TEST(Env, HazardEndsEpisodeWithPenalty) {
  EnvOptions o = tiny_render(3, 3);
  o.sticky_action_prob = 0.0;
  GridPixelEnv env(parse_layout("AX\n.G\n"), o, 0);
  const auto r = env.step(kRight);
  EXPECT_TRUE(r.terminal);
  EXPECT_DOUBLE_EQ(r.reward, -1.01);
}

TEST(Env, FrameStackShiftsOldestOut) {
  EnvOptions o = tiny_render(1, 5);
  o.frame_stack = 3;
  o.sticky_action_prob = 0.0;
  GridPixelEnv env(load_layout("corridor5"), o, 0);
  const std::vector<std::uint8_t> start{kAgentPx, kFloorPx, kFloorPx, kFloorPx, kGoalPx};
  for (int k = 0; k < 3; ++k)
    EXPECT_TRUE(std::equal(start.begin(), start.end(), env.observation().begin() + 5 * k));
  env.step(kRight);
  const auto& obs = env.observation();
  EXPECT_TRUE(std::equal(start.begin(), start.end(), obs.begin()));
  EXPECT_TRUE(std::equal(start.begin(), start.end(), obs.begin() + 5));
  EXPECT_EQ(obs[10], kFloorPx);
  EXPECT_EQ(obs[11], kAgentPx);
}

TEST(Env, RejectsBadActionsAndOptions) {
  GridPixelEnv env(load_layout("pair"), tiny_render(2, 2), 0);
  EXPECT_THROW(env.step(4), EnvError);
  EXPECT_THROW(env.step(-1), EnvError);
  EnvOptions o = tiny_render(2, 2);
  o.sticky_action_prob = 1.0;
  EXPECT_THROW(GridPixelEnv(load_layout("pair"), o, 0), EnvError);
  EXPECT_THROW(GridPixelEnv(load_layout("open8"), tiny_render(4, 4), 0), EnvError);
}

// ---- vector env ----

TEST(VectorEnv, AutoResetKeepsFinalObservation) {
  EnvOptions o = tiny_render(2, 2);
  o.frame_stack = 1;
  VectorEnv venv(load_layout("pair"), o, 2, 9);
  const auto reset_obs = venv.observations();
  const auto vs = venv.step({kRight, kUp});
  EXPECT_TRUE(vs.terminal[0]);
  EXPECT_FALSE(vs.terminal[1]);
  ASSERT_EQ(vs.finished_returns.size(), 1u);
  EXPECT_DOUBLE_EQ(vs.finished_returns[0], 0.99);
  EXPECT_EQ(vs.finished_lengths[0], 1);
  // env 0: final frame shows the agent on the goal; next obs is the reset frame
  EXPECT_EQ(vs.final_obs[0], kFloorPx);
  EXPECT_EQ(vs.final_obs[1], kAgentPx);
  EXPECT_TRUE(std::equal(vs.obs.begin(), vs.obs.begin() + 4, reset_obs.begin()));
  EXPECT_EQ(venv.env(0).steps(), 0);
  EXPECT_EQ(venv.env(1).steps(), 1);
}

TEST(VectorEnv, ReturnsAccumulateAcrossSteps) {
  EnvOptions o = tiny_render(3, 3);
  o.sticky_action_prob = 0.0;
  VectorEnv venv(load_layout("open3"), o, 1, 0);
  for (int a : {kRight, kRight, kDown}) EXPECT_TRUE(venv.step({a}).finished_returns.empty());
  const auto vs = venv.step({kDown});
  ASSERT_EQ(vs.finished_returns.size(), 1u);
  EXPECT_NEAR(vs.finished_returns[0], 0.96, 1e-12);
  EXPECT_EQ(vs.finished_lengths[0], 4);
}

TEST(VectorEnv, ActionErrorNamesTheEnv) {
  VectorEnv venv(load_layout("pair"), tiny_render(2, 2), 3, 0);
  try {
    venv.step({0, 7, 0});
    FAIL() << "expected an error";
  } catch (const EnvError& e) {
    EXPECT_NE(std::string(e.what()).find("env 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(venv.step({0, 0}), EnvError);
}

TEST(VectorEnv, EnvsHaveIndependentStreams) {
  EnvOptions o = tiny_render();
  o.max_episode_steps = 1 << 20;
  VectorEnv venv(load_layout("open8"), o, 2, 4);
  int differ = 0;
  for (int t = 0; t < 200; ++t) {
    venv.step({t % 2 ? kUp : kLeft, t % 2 ? kUp : kLeft});
    differ += venv.env(0).last_was_repeat() != venv.env(1).last_was_repeat();
  }
  EXPECT_GT(differ, 0);
}

// ---- rewards and layouts ----

TEST(Rewards, ClipIsIdempotent) {
  for (double r : {-5.0, -1.0, -0.3, 0.0, 0.99, 1.0, 7.5}) {
    const double c = clip_reward(r, 1.0);
    EXPECT_GE(c, -1.0);
    EXPECT_LE(c, 1.0);
    EXPECT_EQ(clip_reward(c, 1.0), c);
  }
  EXPECT_EQ(clip_reward(0.5, 1.0), 0.5);
}

TEST(Layout, ParsesCommentsAndCells) {
  const auto g = parse_layout("; a comment\nA.#\nX.G\n");
  EXPECT_EQ(g.rows, 2);
  EXPECT_EQ(g.cols, 3);
  EXPECT_EQ(g.start, 0);
  EXPECT_EQ(g.at(0, 2), Cell::wall);
  EXPECT_EQ(g.at(1, 0), Cell::hazard);
  EXPECT_EQ(g.at(1, 2), Cell::goal);
}

TEST(Layout, ErrorsNameTheProblem) {
  auto message = [](const std::string& text) {
    try {
      parse_layout(text);
    } catch (const EnvError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message("A..\n..\n..G\n").find("row 2"), std::string::npos);
  EXPECT_NE(message("A.Q\n..G\n").find("'Q'"), std::string::npos);
  EXPECT_NE(message("...\n..G\n").find("start"), std::string::npos);
  EXPECT_NE(message("AA.\n..G\n").find("start"), std::string::npos);
  EXPECT_NE(message("A..\n...\n").find("goal"), std::string::npos);
  EXPECT_NE(message("").find("empty"), std::string::npos);
}

TEST(Layout, LoadsFromFileOrName) {
  const std::string path = ::testing::TempDir() + "btr_layout.txt";
  {
    std::ofstream f(path);
    f << "; two cells\nAG\n";
  }
  EXPECT_EQ(load_layout(path).cols, 2);
  std::remove(path.c_str());
  EXPECT_THROW(load_layout("no_such_layout"), EnvError);
  for (const char* name : {"open8", "hazard8", "walls8", "corridor5", "chain2", "open3", "pair"})
    EXPECT_NO_THROW(load_layout(name)) << name;
}

TEST(Layout, ShippedRoomsLayoutIsSolvable) {
  const char* root = std::getenv("BTR_SOURCE_DIR");
  if (!root) GTEST_SKIP() << "BTR_SOURCE_DIR not set";
  const auto g = load_layout(std::string(root) + "/layouts/rooms8.txt");
  EnvOptions o = tiny_render();
  EXPECT_GT(oracle_optimal_return(g, o, 0.99).undiscounted, 0.5);
}

}  // namespace
}  // namespace btr
