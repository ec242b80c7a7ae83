#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace btr {

/// Raised for malformed config text or a value that breaks an invariant.
/// `line` is 0 when the error is not tied to a line (validation, overrides).
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, std::size_t line, const std::string& what)
      : std::runtime_error(what), field_(std::move(field)), line_(line) {}

  const std::string& field() const noexcept { return field_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string field_;
  std::size_t line_;
};

/// Every hyperparameter and ablation switch. Defaults are the published
/// Atari settings; desk-scale runs override them from a config file.
struct AgentConfig {
  // optimisation
  double learning_rate = 1e-4;
  double discount = 0.997;
  std::int64_t n_step = 3;
  std::int64_t iqn_taus = 8;
  std::int64_t iqn_cos_embedding = 64;
  double huber_kappa = 1.0;
  double grad_clip_max_norm = 10.0;
  std::int64_t num_envs = 64;
  std::int64_t batch_size = 256;
  std::int64_t target_update_period = 500;
  double adam_eps = 1.95e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;

  // network
  std::int64_t impala_width = 2;
  std::int64_t maxpool_out = 6;
  std::int64_t dueling_hidden = 512;
  double noisy_sigma0 = 0.5;

  // exploration, in frames on the reference schedule
  double eps_start = 1.0;
  double eps_end = 0.01;
  std::int64_t eps_decay_frames = 8'000'000;
  std::int64_t eps_disable_frame = 100'000'000;

  // replay
  std::int64_t replay_capacity = std::int64_t{1} << 20;
  std::int64_t min_replay_size = 200'000;
  double per_alpha = 0.2;
  double per_beta_start = 0.4;
  double per_beta_end = 1.0;
  double per_priority_epsilon = 1e-6;
  bool use_per_is_weights = true;

  // munchausen
  double munchausen_tau = 0.03;
  double munchausen_alpha = 0.9;
  double munchausen_l0 = -1.0;

  // evaluation
  std::int64_t eval_episodes = 100;
  double eval_epsilon = 0.01;
  std::int64_t eval_eps_disable_frame = 125'000'000;
  std::int64_t eval_interval = 50'000;
  bool eval_noisy = false;

  // ablations
  bool use_munchausen = true;
  bool use_iqn = true;
  bool use_spectral_norm = true;
  bool use_impala = true;
  bool use_maxpool = true;
  bool use_vectorization = true;
  bool use_noisy = true;
  bool use_dueling = true;
  bool use_per = true;
  bool use_layer_norm = false;

  // run length; milestones above scale by total_frames / schedule_reference_frames
  std::int64_t total_frames = 200'000'000;
  std::int64_t schedule_reference_frames = 200'000'000;
  std::int64_t nonvec_batch_size = 32;
  std::int64_t nonvec_train_every = 4;
  // stop once an evaluation mean reaches this fraction of the oracle
  // optimal return; 0 disables
  double early_stop_fraction = 0.0;

  // environment
  std::string env_layout = "open8";
  std::int64_t render_height = 84;
  std::int64_t render_width = 84;
  double sticky_action_prob = 0.25;
  double reward_clip = 1.0;
  double env_step_penalty = -0.01;
  double env_goal_reward = 1.0;
  double env_hazard_reward = -1.0;
  std::int64_t env_max_episode_steps = 200;

  // analysis
  std::int64_t probe_size = 1000;
  double dormant_threshold = 0.025;
  std::int64_t bootstrap_resamples = 2000;

  std::int64_t master_seed = 0;

  bool operator==(const AgentConfig&) const = default;
};

namespace config_detail {

using FieldPtr = std::variant<double AgentConfig::*, std::int64_t AgentConfig::*,
                              bool AgentConfig::*, std::string AgentConfig::*>;

struct Field {
  std::string_view name;
  FieldPtr ptr;
};

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"learning_rate", &AgentConfig::learning_rate},
      {"discount", &AgentConfig::discount},
      {"n_step", &AgentConfig::n_step},
      {"iqn_taus", &AgentConfig::iqn_taus},
      {"iqn_cos_embedding", &AgentConfig::iqn_cos_embedding},
      {"huber_kappa", &AgentConfig::huber_kappa},
      {"grad_clip_max_norm", &AgentConfig::grad_clip_max_norm},
      {"num_envs", &AgentConfig::num_envs},
      {"batch_size", &AgentConfig::batch_size},
      {"target_update_period", &AgentConfig::target_update_period},
      {"adam_eps", &AgentConfig::adam_eps},
      {"adam_beta1", &AgentConfig::adam_beta1},
      {"adam_beta2", &AgentConfig::adam_beta2},
      {"impala_width", &AgentConfig::impala_width},
      {"maxpool_out", &AgentConfig::maxpool_out},
      {"dueling_hidden", &AgentConfig::dueling_hidden},
      {"noisy_sigma0", &AgentConfig::noisy_sigma0},
      {"eps_start", &AgentConfig::eps_start},
      {"eps_end", &AgentConfig::eps_end},
      {"eps_decay_frames", &AgentConfig::eps_decay_frames},
      {"eps_disable_frame", &AgentConfig::eps_disable_frame},
      {"replay_capacity", &AgentConfig::replay_capacity},
      {"min_replay_size", &AgentConfig::min_replay_size},
      {"per_alpha", &AgentConfig::per_alpha},
      {"per_beta_start", &AgentConfig::per_beta_start},
      {"per_beta_end", &AgentConfig::per_beta_end},
      {"per_priority_epsilon", &AgentConfig::per_priority_epsilon},
      {"use_per_is_weights", &AgentConfig::use_per_is_weights},
      {"munchausen_tau", &AgentConfig::munchausen_tau},
      {"munchausen_alpha", &AgentConfig::munchausen_alpha},
      {"munchausen_l0", &AgentConfig::munchausen_l0},
      {"eval_episodes", &AgentConfig::eval_episodes},
      {"eval_epsilon", &AgentConfig::eval_epsilon},
      {"eval_eps_disable_frame", &AgentConfig::eval_eps_disable_frame},
      {"eval_interval", &AgentConfig::eval_interval},
      {"eval_noisy", &AgentConfig::eval_noisy},
      {"use_munchausen", &AgentConfig::use_munchausen},
      {"use_iqn", &AgentConfig::use_iqn},
      {"use_spectral_norm", &AgentConfig::use_spectral_norm},
      {"use_impala", &AgentConfig::use_impala},
      {"use_maxpool", &AgentConfig::use_maxpool},
      {"use_vectorization", &AgentConfig::use_vectorization},
      {"use_noisy", &AgentConfig::use_noisy},
      {"use_dueling", &AgentConfig::use_dueling},
      {"use_per", &AgentConfig::use_per},
      {"use_layer_norm", &AgentConfig::use_layer_norm},
      {"total_frames", &AgentConfig::total_frames},
      {"schedule_reference_frames", &AgentConfig::schedule_reference_frames},
      {"nonvec_batch_size", &AgentConfig::nonvec_batch_size},
      {"nonvec_train_every", &AgentConfig::nonvec_train_every},
      {"early_stop_fraction", &AgentConfig::early_stop_fraction},
      {"env_layout", &AgentConfig::env_layout},
      {"render_height", &AgentConfig::render_height},
      {"render_width", &AgentConfig::render_width},
      {"sticky_action_prob", &AgentConfig::sticky_action_prob},
      {"reward_clip", &AgentConfig::reward_clip},
      {"env_step_penalty", &AgentConfig::env_step_penalty},
      {"env_goal_reward", &AgentConfig::env_goal_reward},
      {"env_hazard_reward", &AgentConfig::env_hazard_reward},
      {"env_max_episode_steps", &AgentConfig::env_max_episode_steps},
      {"probe_size", &AgentConfig::probe_size},
      {"dormant_threshold", &AgentConfig::dormant_threshold},
      {"bootstrap_resamples", &AgentConfig::bootstrap_resamples},
      {"master_seed", &AgentConfig::master_seed},
  };
  return table;
}

inline std::string_view trim(std::string_view s) {
  const auto* ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

inline const Field* find_field(std::string_view key) {
  for (const auto& f : fields())
    if (f.name == key) return &f;
  return nullptr;
}

inline void assign(AgentConfig& cfg, const Field& field, std::string_view text, std::size_t line) {
  const std::string name(field.name);
  auto fail = [&](const char* kind) {
    throw ConfigError(name, line,
                      (line ? "line " + std::to_string(line) + ": " : std::string{}) + "cannot parse '" +
                          std::string(text) + "' as " + kind + " for " + name);
  };
  std::visit(
      [&](auto member) {
        using T = std::remove_reference_t<decltype(cfg.*member)>;
        if constexpr (std::is_same_v<T, double>) {
          double v{};
          auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
          if (ec != std::errc{} || p != text.data() + text.size()) fail("real");
          cfg.*member = v;
        } else if constexpr (std::is_same_v<T, std::int64_t>) {
          std::int64_t v{};
          auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
          if (ec != std::errc{} || p != text.data() + text.size()) {
            // accept integral reals such as 8e6
            double d{};
            auto [p2, ec2] = std::from_chars(text.data(), text.data() + text.size(), d);
            if (ec2 != std::errc{} || p2 != text.data() + text.size() || d != std::floor(d)) fail("integer");
            v = static_cast<std::int64_t>(d);
          }
          cfg.*member = v;
        } else if constexpr (std::is_same_v<T, bool>) {
          if (text == "true" || text == "1")
            cfg.*member = true;
          else if (text == "false" || text == "0")
            cfg.*member = false;
          else
            fail("boolean");
        } else {
          cfg.*member = std::string(text);
        }
      },
      field.ptr);
}

inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

}  // namespace config_detail

/// Checks every invariant, throwing ConfigError naming the first bad field.
inline void validate(const AgentConfig& c) {
  auto require = [](bool ok, const char* field, const std::string& msg) {
    if (!ok) throw ConfigError(field, 0, std::string(field) + ": " + msg);
  };
  require(c.discount >= 0.0 && c.discount < 1.0, "discount", "must lie in [0, 1)");
  require(c.n_step >= 1, "n_step", "must be >= 1");
  require(c.iqn_taus >= 1, "iqn_taus", "must be >= 1");
  require(c.iqn_cos_embedding >= 1, "iqn_cos_embedding", "must be >= 1");
  require(c.huber_kappa > 0.0, "huber_kappa", "must be > 0");
  require(c.grad_clip_max_norm > 0.0, "grad_clip_max_norm", "must be > 0");
  require(c.learning_rate > 0.0, "learning_rate", "must be > 0");
  require(c.num_envs >= 1, "num_envs", "must be >= 1");
  require(c.batch_size >= 1, "batch_size", "must be >= 1");
  require(c.batch_size <= c.replay_capacity, "batch_size", "must not exceed replay_capacity");
  require(c.nonvec_batch_size >= 1 && c.nonvec_batch_size <= c.replay_capacity, "nonvec_batch_size",
          "must lie in [1, replay_capacity]");
  require(c.nonvec_train_every >= 1, "nonvec_train_every", "must be >= 1");
  require(c.early_stop_fraction >= 0.0, "early_stop_fraction", "must be >= 0");
  require(c.target_update_period >= 1, "target_update_period", "must be >= 1");
  require(c.impala_width >= 1, "impala_width", "must be >= 1");
  require(c.maxpool_out >= 1, "maxpool_out", "must be >= 1");
  require(c.dueling_hidden >= 1, "dueling_hidden", "must be >= 1");
  require(c.noisy_sigma0 >= 0.0, "noisy_sigma0", "must be >= 0");
  require(c.eps_start >= 0.0 && c.eps_start <= 1.0, "eps_start", "must lie in [0, 1]");
  require(c.eps_end >= 0.0 && c.eps_end <= 1.0, "eps_end", "must lie in [0, 1]");
  require(c.eval_epsilon >= 0.0 && c.eval_epsilon <= 1.0, "eval_epsilon", "must lie in [0, 1]");
  require(c.eps_decay_frames >= 0, "eps_decay_frames", "must be >= 0");
  require(c.eps_disable_frame >= 0, "eps_disable_frame", "must be >= 0");
  require(c.replay_capacity >= 1, "replay_capacity", "must be >= 1");
  require(c.min_replay_size >= 1 && c.min_replay_size <= c.replay_capacity, "min_replay_size",
          "must lie in [1, replay_capacity]");
  require(c.per_alpha >= 0.0, "per_alpha", "must be >= 0");
  require(c.per_beta_start >= 0.0 && c.per_beta_end >= 0.0, "per_beta_start", "must be >= 0");
  require(c.per_priority_epsilon > 0.0, "per_priority_epsilon", "must be > 0");
  require(c.adam_eps > 0.0, "adam_eps", "must be > 0");
  require(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0, "adam_beta1", "must lie in [0, 1)");
  require(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0, "adam_beta2", "must lie in [0, 1)");
  require(c.munchausen_tau > 0.0, "munchausen_tau", "must be > 0");
  require(c.munchausen_alpha >= 0.0 && c.munchausen_alpha <= 1.0, "munchausen_alpha", "must lie in [0, 1]");
  require(c.munchausen_l0 < 0.0, "munchausen_l0", "must be < 0");
  require(c.eval_episodes >= 1, "eval_episodes", "must be >= 1");
  require(c.eval_interval >= 1, "eval_interval", "must be >= 1");
  require(c.total_frames >= 0, "total_frames", "must be >= 0");
  require(c.schedule_reference_frames >= 1, "schedule_reference_frames", "must be >= 1");
  require(c.render_height >= 1 && c.render_width >= 1, "render_height", "must be >= 1");
  require(c.sticky_action_prob >= 0.0 && c.sticky_action_prob < 1.0, "sticky_action_prob", "must lie in [0, 1)");
  require(c.reward_clip > 0.0, "reward_clip", "must be > 0");
  require(c.env_max_episode_steps >= 1, "env_max_episode_steps", "must be >= 1");
  require(c.probe_size >= 1, "probe_size", "must be >= 1");
  require(c.dormant_threshold >= 0.0, "dormant_threshold", "must be >= 0");
  require(c.bootstrap_resamples >= 1000, "bootstrap_resamples", "must be >= 1000");
}

/// Sets one `key=value` pair; unknown keys are rejected.
inline void apply_override(AgentConfig& cfg, std::string_view assignment, std::size_t line = 0) {
  using namespace config_detail;
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos)
    throw ConfigError("", line,
                      (line ? "line " + std::to_string(line) + ": " : std::string{}) + "expected key = value, got '" +
                          std::string(assignment) + "'");
  const auto key = trim(assignment.substr(0, eq));
  const auto value = trim(assignment.substr(eq + 1));
  const Field* f = find_field(key);
  if (!f)
    throw ConfigError(std::string(key), line,
                      (line ? "line " + std::to_string(line) + ": " : std::string{}) + "unknown key '" +
                          std::string(key) + "'");
  assign(cfg, *f, value, line);
}

/// Parses flat `key = value` text. Blank lines and `#` comments are ignored.
/// Does not validate; see load_config.
inline AgentConfig parse_config(std::string_view text) {
  AgentConfig cfg;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = config_detail::trim(line);
    if (!line.empty()) apply_override(cfg, line, line_no);
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  return cfg;
}

inline AgentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", 0, "cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  AgentConfig cfg = parse_config(ss.str());
  validate(cfg);
  return cfg;
}

/// Writes every key in table order; parse_config(serialize_config(c)) == c.
inline std::string serialize_config(const AgentConfig& cfg) {
  std::string out;
  for (const auto& f : config_detail::fields()) {
    out += f.name;
    out += " = ";
    std::visit(
        [&](auto member) {
          using T = std::remove_cvref_t<decltype(cfg.*member)>;
          if constexpr (std::is_same_v<T, double>)
            out += config_detail::format_double(cfg.*member);
          else if constexpr (std::is_same_v<T, std::int64_t>)
            out += std::to_string(cfg.*member);
          else if constexpr (std::is_same_v<T, bool>)
            out += (cfg.*member ? "true" : "false");
          else
            out += cfg.*member;
        },
        f.ptr);
    out += '\n';
  }
  return out;
}

/// FNV-1a over the serialized config, used to name run directories.
inline std::uint64_t config_hash(const AgentConfig& cfg) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : serialize_config(cfg)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

/// Copy of `cfg` with frame milestones rescaled so a run of total_frames
/// keeps the shape of the reference schedule.
inline AgentConfig scaled_schedule(const AgentConfig& cfg) {
  AgentConfig out = cfg;
  const double f = static_cast<double>(cfg.total_frames) / static_cast<double>(cfg.schedule_reference_frames);
  auto scale = [f](std::int64_t v) { return static_cast<std::int64_t>(std::llround(static_cast<double>(v) * f)); };
  out.eps_decay_frames = scale(cfg.eps_decay_frames);
  out.eps_disable_frame = scale(cfg.eps_disable_frame);
  out.eval_eps_disable_frame = scale(cfg.eval_eps_disable_frame);
  out.schedule_reference_frames = cfg.total_frames > 0 ? cfg.total_frames : cfg.schedule_reference_frames;
  return out;
}

}  // namespace btr
