#pragma once

#include "btr/config.hpp"
#include "btr/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

// Grid worlds rendered as greyscale pixels, a frame-stacking wrapper, a
// vectorized auto-resetting driver and an exact optimal-return oracle.
//
// Layout text: one row per line, all rows the same length.
//   .  floor      #  wall (blocks movement)
//   A  start      G  goal (terminal, goal reward)
//   X  hazard (terminal, hazard reward)
// Blank lines and lines starting with ';' are ignored.

namespace btr {

class EnvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Cell : std::uint8_t { floor, wall, goal, hazard };

struct GridLayout {
  int rows = 0, cols = 0;
  std::vector<Cell> cells;
  int start = 0;  // flat index

  Cell at(int r, int c) const { return cells[static_cast<std::size_t>(r) * cols + c]; }
  Cell at(int idx) const { return cells[static_cast<std::size_t>(idx)]; }
  int size() const noexcept { return rows * cols; }
};

inline GridLayout parse_layout(const std::string& text) {
  GridLayout g;
  std::istringstream in(text);
  std::string line;
  int starts = 0, goals = 0;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line[0] == ';') continue;
    if (g.cols == 0) g.cols = static_cast<int>(line.size());
    if (static_cast<int>(line.size()) != g.cols)
      throw EnvError("layout row " + std::to_string(g.rows + 1) + " has " + std::to_string(line.size()) +
                     " cells, expected " + std::to_string(g.cols));
    for (int c = 0; c < g.cols; ++c) {
      Cell cell = Cell::floor;
      switch (line[static_cast<std::size_t>(c)]) {
        case '.': break;
        case '#': cell = Cell::wall; break;
        case 'G': cell = Cell::goal; ++goals; break;
        case 'X': cell = Cell::hazard; break;
        case 'A':
          g.start = g.rows * g.cols + c;
          ++starts;
          break;
        default:
          throw EnvError("layout row " + std::to_string(g.rows + 1) + ": unknown cell '" +
                         std::string(1, line[static_cast<std::size_t>(c)]) + "'");
      }
      g.cells.push_back(cell);
    }
    ++g.rows;
  }
  if (g.rows == 0) throw EnvError("empty layout");
  if (starts != 1) throw EnvError("layout needs exactly one start cell 'A'");
  if (goals < 1) throw EnvError("layout needs at least one goal cell 'G'");
  return g;
}

/// Layouts available by name; anything else is read as a file path.
inline std::string builtin_layout(const std::string& name) {
  if (name == "open8")
    return "A.......\n........\n........\n........\n........\n........\n........\n.......G\n";
  if (name == "hazard8")
    return "A.......\n..X.....\n..X..X..\n.....X..\n.##.....\n....X...\n.X......\n...X...G\n";
  if (name == "walls8")
    return "A..#....\n...#....\n...#..#.\n......#.\n####..#.\n......#.\n.X......\n......#G\n";
  if (name == "corridor5") return "A...G\n";
  if (name == "chain2") return "A.G\n";
  if (name == "open3") return "A..\n...\n..G\n";
  if (name == "pair") return "AG\n";
  return {};
}

inline GridLayout load_layout(const std::string& name_or_path) {
  const std::string text = builtin_layout(name_or_path);
  if (!text.empty()) return parse_layout(text);
  std::ifstream f(name_or_path);
  if (!f) throw EnvError("unknown layout '" + name_or_path + "' (not a built-in name or readable file)");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_layout(ss.str());
}

struct EnvOptions {
  int height = 84, width = 84;
  double step_penalty = -0.01;
  double goal_reward = 1.0;
  double hazard_reward = -1.0;
  int max_episode_steps = 200;
  double sticky_action_prob = 0.25;
  double brightness_jitter = 0.0;
  int frame_stack = 4;
};

inline EnvOptions env_options(const AgentConfig& cfg) {
  EnvOptions o;
  o.height = static_cast<int>(cfg.render_height);
  o.width = static_cast<int>(cfg.render_width);
  o.step_penalty = cfg.env_step_penalty;
  o.goal_reward = cfg.env_goal_reward;
  o.hazard_reward = cfg.env_hazard_reward;
  o.max_episode_steps = static_cast<int>(cfg.env_max_episode_steps);
  o.sticky_action_prob = cfg.sticky_action_prob;
  return o;
}

inline constexpr int kGridActions = 4;  // up, down, left, right
inline constexpr int kNoAction = -1;

/// Cell reached from `idx` by `action`; walls and edges block.
inline int grid_move(const GridLayout& g, int idx, int action) {
  static constexpr std::array<int, 4> dr{-1, 1, 0, 0};
  static constexpr std::array<int, 4> dc{0, 0, -1, 1};
  const int r = idx / g.cols + dr[static_cast<std::size_t>(action)];
  const int c = idx % g.cols + dc[static_cast<std::size_t>(action)];
  if (r < 0 || r >= g.rows || c < 0 || c >= g.cols || g.at(r, c) == Cell::wall) return idx;
  return r * g.cols + c;
}

/// Greyscale levels per cell type.
inline constexpr std::uint8_t kFloorPx = 32, kWallPx = 96, kHazardPx = 150, kGoalPx = 200, kAgentPx = 255;

/// Nearest-neighbour render of the layout with the agent at `agent`.
inline void render_grid(const GridLayout& g, int agent, int H, int W, std::uint8_t* out) {
  if (H < g.rows || W < g.cols) throw EnvError("render resolution smaller than the grid");
  for (int y = 0; y < H; ++y) {
    const int r = static_cast<int>(static_cast<std::int64_t>(y) * g.rows / H);
    for (int x = 0; x < W; ++x) {
      const int c = static_cast<int>(static_cast<std::int64_t>(x) * g.cols / W);
      const int idx = r * g.cols + c;
      std::uint8_t v = kFloorPx;
      if (idx == agent) {
        v = kAgentPx;
      } else {
        switch (g.at(idx)) {
          case Cell::wall: v = kWallPx; break;
          case Cell::goal: v = kGoalPx; break;
          case Cell::hazard: v = kHazardPx; break;
          case Cell::floor: break;
        }
      }
      out[static_cast<std::size_t>(y) * W + x] = v;
    }
  }
}

/// Multiplies every pixel by (1 + u), u ~ U(-j, j), clamped to [0, 255].
inline void apply_brightness_jitter(std::uint8_t* px, std::size_t n, double j, Rng& rng) {
  if (j <= 0) return;
  const double f = 1.0 + std::uniform_real_distribution<double>(-j, j)(rng);
  for (std::size_t i = 0; i < n; ++i) px[i] = static_cast<std::uint8_t>(std::clamp(std::lround(px[i] * f), 0L, 255L));
}

struct StepOutcome {
  double reward = 0.0;
  bool terminal = false;
  bool truncated = false;
};

/// Single grid episode driver with sticky actions and a frame stack.
class GridPixelEnv {
 public:
  GridPixelEnv(GridLayout layout, EnvOptions opt, std::uint64_t seed)
      : g_(std::move(layout)), opt_(opt), rng_(seed), jitter_rng_(derive_seed(seed, 7)) {
    if (opt_.sticky_action_prob < 0 || opt_.sticky_action_prob >= 1) throw EnvError("sticky_action_prob must be in [0, 1)");
    if (opt_.brightness_jitter < 0) throw EnvError("brightness_jitter must be >= 0");
    if (opt_.max_episode_steps < 1) throw EnvError("max_episode_steps must be >= 1");
    if (opt_.frame_stack < 1) throw EnvError("frame_stack must be >= 1");
    if (opt_.height < g_.rows || opt_.width < g_.cols) throw EnvError("render resolution smaller than the grid");
    frame_.resize(frame_bytes());
    stack_.resize(obs_bytes());
    reset();
  }

  const GridLayout& layout() const noexcept { return g_; }
  const EnvOptions& options() const noexcept { return opt_; }
  int num_actions() const noexcept { return kGridActions; }
  std::size_t frame_bytes() const noexcept { return static_cast<std::size_t>(opt_.height) * opt_.width; }
  std::size_t obs_bytes() const noexcept { return frame_bytes() * static_cast<std::size_t>(opt_.frame_stack); }
  int agent() const noexcept { return agent_; }
  int steps() const noexcept { return steps_; }
  int last_executed() const noexcept { return prev_; }
  bool last_was_repeat() const noexcept { return repeated_; }
  void set_brightness_jitter(double j) { opt_.brightness_jitter = j; }

  /// Stacked frames [k, H, W], oldest first.
  const std::vector<std::uint8_t>& observation() const noexcept { return stack_; }

  const std::vector<std::uint8_t>& reset() {
    agent_ = g_.start;
    prev_ = kNoAction;
    steps_ = 0;
    repeated_ = false;
    draw_frame();
    for (int k = 0; k < opt_.frame_stack; ++k)
      std::copy(frame_.begin(), frame_.end(), stack_.begin() + static_cast<std::ptrdiff_t>(k * frame_bytes()));
    return stack_;
  }

  StepOutcome step(int action) {
    if (action < 0 || action >= kGridActions) throw EnvError("action " + std::to_string(action) + " out of range");
    int exec = action;
    repeated_ = false;
    if (prev_ != kNoAction && opt_.sticky_action_prob > 0 &&
        std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < opt_.sticky_action_prob) {
      exec = prev_;
      repeated_ = true;
    }
    prev_ = exec;
    agent_ = grid_move(g_, agent_, exec);
    ++steps_;
    StepOutcome o;
    o.reward = opt_.step_penalty;
    const Cell c = g_.at(agent_);
    if (c == Cell::goal) {
      o.reward += opt_.goal_reward;
      o.terminal = true;
    } else if (c == Cell::hazard) {
      o.reward += opt_.hazard_reward;
      o.terminal = true;
    }
    if (!o.terminal && steps_ >= opt_.max_episode_steps) o.truncated = true;
    draw_frame();
    std::copy(stack_.begin() + static_cast<std::ptrdiff_t>(frame_bytes()), stack_.end(), stack_.begin());
    std::copy(frame_.begin(), frame_.end(), stack_.end() - static_cast<std::ptrdiff_t>(frame_bytes()));
    return o;
  }

 private:
  void draw_frame() {
    render_grid(g_, agent_, opt_.height, opt_.width, frame_.data());
    apply_brightness_jitter(frame_.data(), frame_.size(), opt_.brightness_jitter, jitter_rng_);
  }

  GridLayout g_;
  EnvOptions opt_;
  Rng rng_;
  Rng jitter_rng_;
  int agent_ = 0;
  int prev_ = kNoAction;
  int steps_ = 0;
  bool repeated_ = false;
  std::vector<std::uint8_t> frame_;
  std::vector<std::uint8_t> stack_;
};

/// Clips a reward into [-bound, bound]; idempotent.
inline double clip_reward(double r, double bound) { return std::clamp(r, -bound, bound); }

/// Results of one vector step, all in env-index order. `obs` holds the
/// observation to act on next (the reset observation after an episode
/// ended); `final_obs` holds the observation the action actually led to.
struct VectorStep {
  std::vector<std::uint8_t> obs;
  std::vector<std::uint8_t> final_obs;
  std::vector<double> rewards;
  std::vector<std::uint8_t> terminal;
  std::vector<std::uint8_t> truncated;
  std::vector<double> finished_returns;  // undiscounted returns of episodes that ended this step
  std::vector<int> finished_lengths;
};

class VectorEnv {
 public:
  VectorEnv(const GridLayout& layout, const EnvOptions& opt, int num_envs, std::uint64_t seed) {
    if (num_envs < 1) throw EnvError("num_envs must be >= 1");
    for (int i = 0; i < num_envs; ++i) envs_.emplace_back(layout, opt, derive_seed(seed, static_cast<std::uint64_t>(i)));
    returns_.assign(static_cast<std::size_t>(num_envs), 0.0);
    obs_.resize(obs_bytes() * static_cast<std::size_t>(num_envs));
    for (int i = 0; i < num_envs; ++i) copy_obs(i, obs_);
  }

  int size() const noexcept { return static_cast<int>(envs_.size()); }
  int num_actions() const noexcept { return kGridActions; }
  std::size_t obs_bytes() const noexcept { return envs_.front().obs_bytes(); }
  const std::vector<std::uint8_t>& observations() const noexcept { return obs_; }
  GridPixelEnv& env(int i) { return envs_.at(static_cast<std::size_t>(i)); }

  VectorStep step(const std::vector<int>& actions) {
    if (actions.size() != envs_.size())
      throw EnvError("vector_step expects " + std::to_string(envs_.size()) + " actions, got " +
                     std::to_string(actions.size()));
    const std::size_t n = envs_.size();
    VectorStep vs;
    vs.rewards.resize(n);
    vs.terminal.resize(n);
    vs.truncated.resize(n);
    vs.final_obs.resize(obs_.size());
    for (std::size_t i = 0; i < n; ++i) {
      const int a = actions[i];
      if (a < 0 || a >= kGridActions)
        throw EnvError("env " + std::to_string(i) + ": action " + std::to_string(a) + " out of range");
      const StepOutcome o = envs_[i].step(a);
      vs.rewards[i] = o.reward;
      vs.terminal[i] = o.terminal;
      vs.truncated[i] = o.truncated;
      returns_[i] += o.reward;
      copy_obs(static_cast<int>(i), vs.final_obs);
      if (o.terminal || o.truncated) {
        vs.finished_returns.push_back(returns_[i]);
        vs.finished_lengths.push_back(envs_[i].steps());
        returns_[i] = 0.0;
        envs_[i].reset();
      }
      copy_obs(static_cast<int>(i), obs_);
    }
    vs.obs = obs_;
    return vs;
  }

 private:
  void copy_obs(int i, std::vector<std::uint8_t>& dst) const {
    const auto& o = envs_[static_cast<std::size_t>(i)].observation();
    std::copy(o.begin(), o.end(), dst.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(i) * obs_bytes()));
  }

  std::vector<GridPixelEnv> envs_;
  std::vector<double> returns_;
  std::vector<std::uint8_t> obs_;
};

struct OracleReturn {
  double discounted = 0.0;    // optimal expected discounted return from the start
  double undiscounted = 0.0;  // optimal expected undiscounted return from the start
  int iterations = 0;
};

namespace envs_detail {

// Value iteration over (cell, previously executed action). The episode cap
// is not part of the state: values are for the untruncated MDP.
inline std::pair<double, int> value_iteration(const GridLayout& g, const EnvOptions& o, double gamma, double tol,
                                              int max_iter) {
  const int S = g.size();
  const int P = kGridActions + 1;  // slot kGridActions means "no previous action"
  std::vector<double> V(static_cast<std::size_t>(S) * P, 0.0), Vn(V.size(), 0.0);
  auto terminal_cell = [&](int idx) { return g.at(idx) == Cell::goal || g.at(idx) == Cell::hazard; };
  auto reward_into = [&](int idx) {
    double r = o.step_penalty;
    if (g.at(idx) == Cell::goal) r += o.goal_reward;
    if (g.at(idx) == Cell::hazard) r += o.hazard_reward;
    return r;
  };
  auto outcome = [&](int next, int exec) {
    const double r = reward_into(next);
    if (terminal_cell(next)) return r;
    return r + gamma * V[static_cast<std::size_t>(next) * P + static_cast<std::size_t>(exec)];
  };
  for (int it = 1; it <= max_iter; ++it) {
    double delta = 0;
    for (int s = 0; s < S; ++s) {
      if (g.at(s) == Cell::wall || terminal_cell(s)) continue;
      for (int p = 0; p < P; ++p) {
        double best = -std::numeric_limits<double>::infinity();
        for (int a = 0; a < kGridActions; ++a) {
          double q = (p == kGridActions || o.sticky_action_prob == 0)
                         ? outcome(grid_move(g, s, a), a)
                         : (1 - o.sticky_action_prob) * outcome(grid_move(g, s, a), a) +
                               o.sticky_action_prob * outcome(grid_move(g, s, p), p);
          best = std::max(best, q);
        }
        const std::size_t k = static_cast<std::size_t>(s) * P + static_cast<std::size_t>(p);
        delta = std::max(delta, std::abs(best - V[k]));
        Vn[k] = best;
      }
    }
    V.swap(Vn);
    if (delta < tol) return {V[static_cast<std::size_t>(g.start) * P + kGridActions], it};
  }
  throw EnvError("value iteration did not converge in " + std::to_string(max_iter) + " sweeps");
}

}  // namespace envs_detail

/// Exact optimal expected return from the start state, with sticky actions.
inline OracleReturn oracle_optimal_return(const GridLayout& g, const EnvOptions& o, double gamma,
                                          std::size_t state_cap = 1'000'000) {
  if (static_cast<std::size_t>(g.size()) * (kGridActions + 1) > state_cap)
    throw EnvError("grid has too many states for the oracle");
  OracleReturn r;
  const auto [d, it1] = envs_detail::value_iteration(g, o, gamma, 1e-10, 1'000'000);
  const auto [u, it2] = envs_detail::value_iteration(g, o, 1.0, 1e-10, 1'000'000);
  r.discounted = d;
  r.undiscounted = u;
  r.iterations = std::max(it1, it2);
  return r;
}

}  // namespace btr
