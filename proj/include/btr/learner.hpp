#pragma once

#include "btr/config.hpp"
#include "btr/network.hpp"
#include "btr/replay.hpp"
#include "btr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

// Munchausen-IQN targets, quantile Huber loss and the optimiser step.
// Target rules and the loss operate on plain tensors in double precision so
// they can be checked independently of the network that produced the inputs.

namespace btr {

/// Row-wise softmax of q / tau with max subtraction. q: [B, A].
inline Tensor<double> soft_policy(const Tensor<double>& q, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("soft_policy temperature must be positive");
  const int B = q.dim(0), A = q.dim(1);
  Tensor<double> pi({B, A});
  for (int b = 0; b < B; ++b) {
    const double* row = q.ptr() + static_cast<std::size_t>(b) * A;
    const double m = *std::max_element(row, row + A);
    double z = 0;
    for (int a = 0; a < A; ++a) z += std::exp((row[a] - m) / tau);
    for (int a = 0; a < A; ++a) pi[static_cast<std::size_t>(b) * A + a] = std::exp((row[a] - m) / tau) / z;
  }
  return pi;
}

/// tau * ln softmax(q / tau), computed without forming the softmax.
inline Tensor<double> scaled_log_policy(const Tensor<double>& q, double tau) {
  const int B = q.dim(0), A = q.dim(1);
  Tensor<double> out({B, A});
  for (int b = 0; b < B; ++b) {
    const double* row = q.ptr() + static_cast<std::size_t>(b) * A;
    const double m = *std::max_element(row, row + A);
    double z = 0;
    for (int a = 0; a < A; ++a) z += std::exp((row[a] - m) / tau);
    const double lse = tau * std::log(z);
    for (int a = 0; a < A; ++a) out[static_cast<std::size_t>(b) * A + a] = row[a] - m - lse;
  }
  return out;
}

struct TargetParams {
  double gamma = 0.997;
  double tau = 0.03;
  double alpha = 0.9;
  double l0 = -1.0;
};

inline TargetParams target_params(const AgentConfig& cfg) {
  return {cfg.discount, cfg.munchausen_tau, cfg.munchausen_alpha, cfg.munchausen_l0};
}

/// alpha * clip(tau * ln pi(a_t | s_t), l0, 0) with pi the soft policy of q_s.
inline std::vector<double> munchausen_bonus(const Tensor<double>& q_s, std::span<const int> actions,
                                            const TargetParams& p) {
  const auto lp = scaled_log_policy(q_s, p.tau);
  const int A = q_s.dim(1);
  std::vector<double> out(actions.size());
  for (std::size_t b = 0; b < actions.size(); ++b) {
    const double v = lp[b * static_cast<std::size_t>(A) + static_cast<std::size_t>(actions[b])];
    out[b] = p.alpha * std::clamp(v, p.l0, 0.0);
  }
  return out;
}

/// Inputs shared by the target rules; per-sample vectors have length B.
struct TargetBatch {
  std::span<const double> returns;
  std::span<const std::uint8_t> terminals;
  std::span<const int> horizons;
  std::span<const int> actions;
};

/// Munchausen rule. q_target_s: target-net mean-Q at s_t [B, A];
/// z_next: target-net quantiles at s_{t+m} [B, N', A]. Returns [B, N'].
inline Tensor<double> munchausen_targets(const TargetBatch& tb, const Tensor<double>& q_target_s,
                                         const Tensor<double>& z_next, const TargetParams& p) {
  const int B = z_next.dim(0), N = z_next.dim(1), A = z_next.dim(2);
  const auto bonus = munchausen_bonus(q_target_s, tb.actions, p);
  // soft policy of the target network's mean-Q at s_{t+m}
  Tensor<double> q_next({B, A});
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < N; ++n)
      for (int a = 0; a < A; ++a)
        q_next[static_cast<std::size_t>(b) * A + a] += z_next[(static_cast<std::size_t>(b) * N + n) * A + a] / N;
  const auto pi = soft_policy(q_next, p.tau);
  const auto lp = scaled_log_policy(q_next, p.tau);
  Tensor<double> out({B, N});
  for (int b = 0; b < B; ++b) {
    const auto bi = static_cast<std::size_t>(b);
    const double base = tb.returns[bi] + bonus[bi];
    const double disc = tb.terminals[bi] ? 0.0 : std::pow(p.gamma, tb.horizons[bi]);
    for (int n = 0; n < N; ++n) {
      double soft = 0;
      if (disc != 0.0)
        for (int a = 0; a < A; ++a) {
          const std::size_t k = bi * A + static_cast<std::size_t>(a);
          soft += pi[k] * (z_next[(bi * N + n) * A + a] - lp[k]);
        }
      out[bi * N + n] = base + disc * soft;
    }
  }
  return out;
}

/// Double-DQN rule: a* = argmax of the online mean-Q at s_{t+m}, target
/// quantiles R + gamma^m z'(s_{t+m}, a*). Returns [B, N'].
inline Tensor<double> double_dqn_targets(const TargetBatch& tb, const Tensor<double>& q_online_next,
                                         const Tensor<double>& z_next, double gamma) {
  const int B = z_next.dim(0), N = z_next.dim(1), A = z_next.dim(2);
  Tensor<double> out({B, N});
  for (int b = 0; b < B; ++b) {
    const auto bi = static_cast<std::size_t>(b);
    const double* q = q_online_next.ptr() + bi * A;
    const int astar = static_cast<int>(std::max_element(q, q + A) - q);  // first maximum
    const double disc = tb.terminals[bi] ? 0.0 : std::pow(gamma, tb.horizons[bi]);
    for (int n = 0; n < N; ++n)
      out[bi * N + n] = tb.returns[bi] + (disc == 0.0 ? 0.0 : disc * z_next[(bi * N + n) * A + astar]);
  }
  return out;
}

inline double huber(double d, double kappa) {
  const double a = std::abs(d);
  return a <= kappa ? 0.5 * d * d : kappa * (a - 0.5 * kappa);
}

struct LossReport {
  double loss = 0.0;
  std::vector<double> per_sample_td;
  double grad_norm_preclip = 0.0;
  Tensor<double> dpred;  // d(loss)/d(pred), [B, N]
};

/// Quantile Huber loss. pred [B, N] with taus [B, N]; target [B, N'].
/// With quantile=false the asymmetric weight is dropped (plain Huber).
/// `weights` (optional, length B) scale each sample before the batch mean.
inline LossReport quantile_huber_loss(const Tensor<double>& pred, const Tensor<double>& target,
                                      const Tensor<double>& taus, double kappa, std::span<const double> weights = {},
                                      bool quantile = true) {
  if (!(kappa > 0)) throw std::invalid_argument("huber kappa must be positive");
  const int B = pred.dim(0), N = pred.dim(1), M = target.dim(1);
  if (target.dim(0) != B) throw ShapeError("loss: batch mismatch");
  LossReport r;
  r.per_sample_td.assign(static_cast<std::size_t>(B), 0.0);
  r.dpred = Tensor<double>({B, N});
  for (int b = 0; b < B; ++b) {
    const auto bi = static_cast<std::size_t>(b);
    const double w = weights.empty() ? 1.0 : weights[bi];
    double lb = 0, td = 0;
    for (int i = 0; i < N; ++i) {
      const double p = pred[bi * N + i];
      const double t = quantile ? taus[bi * N + i] : 0.0;
      double g = 0;
      for (int j = 0; j < M; ++j) {
        const double d = target[bi * M + j] - p;
        const double wq = quantile ? std::abs(t - (d < 0 ? 1.0 : 0.0)) : 1.0;
        lb += wq * huber(d, kappa) / kappa;
        g += wq * std::clamp(d, -kappa, kappa) / kappa;
        td += std::abs(d);
      }
      r.dpred[bi * N + i] = -w * g / (static_cast<double>(M) * B);
    }
    r.loss += w * lb / M;
    r.per_sample_td[bi] = td / (static_cast<double>(N) * M);
  }
  r.loss /= B;
  return r;
}

/// Adam with bias correction over a fixed parameter list.
template <typename T>
struct Adam {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1.95e-5;
  std::int64_t steps = 0;
  std::vector<std::vector<T>> m, v;

  Adam() = default;
  Adam(double lr_, double b1, double b2, double e) : lr(lr_), beta1(b1), beta2(b2), eps(e) {}

  void step(const std::vector<Param<T>*>& params) {
    if (m.empty()) {
      for (auto* p : params) {
        m.emplace_back(p->value.size(), T{});
        v.emplace_back(p->value.size(), T{});
      }
    }
    if (m.size() != params.size()) throw std::logic_error("Adam: parameter list changed");
    ++steps;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
    const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
    const T step_size = static_cast<T>(lr / c1);
    const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
    const T e = static_cast<T>(eps);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& val = params[k]->value.data;
      const auto& g = params[k]->grad.data;
      auto& mk = m[k];
      auto& vk = v[k];
      for (std::size_t i = 0; i < val.size(); ++i) {
        mk[i] = b1 * mk[i] + (1 - b1) * g[i];
        vk[i] = b2 * vk[i] + (1 - b2) * g[i] * g[i];
        val[i] -= step_size * mk[i] / (std::sqrt(vk[i]) * inv_sqrt_c2 + e);
      }
    }
  }
};

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<Param<T>*>& params, double max_norm) {
  double sq = 0;
  for (auto* p : params)
    for (T g : p->grad.data) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto* p : params)
      for (T& g : p->grad.data) g *= s;
  }
  return norm;
}

template <typename T>
Tensor<double> to_double(const Tensor<T>& t) {
  return t.template cast<double>();
}

/// Online and target networks with their optimiser and counters.
class Learner {
 public:
  using Net = Network<float>;

  Learner(const AgentConfig& cfg, const NetworkSpec& spec, std::uint64_t seed)
      : cfg_(cfg),
        online_(spec, derive_seed(seed, 1)),
        target_(online_),
        adam_(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
        rng_(derive_seed(seed, 2)) {}

  Net& online() noexcept { return online_; }
  Net& target() noexcept { return target_; }
  const Net& online() const noexcept { return online_; }
  const Net& target() const noexcept { return target_; }
  Adam<float>& optimizer() noexcept { return adam_; }
  const Adam<float>& optimizer() const noexcept { return adam_; }
  Rng& rng() noexcept { return rng_; }
  const Rng& rng() const noexcept { return rng_; }
  std::int64_t grad_steps() const noexcept { return grad_steps_; }
  std::int64_t steps_since_sync() const noexcept { return since_sync_; }
  void set_counters(std::int64_t grad_steps, std::int64_t since_sync) {
    grad_steps_ = grad_steps;
    since_sync_ = since_sync;
  }

  int num_taus() const { return online_.spec().iqn ? static_cast<int>(cfg_.iqn_taus) : 1; }

  void sync_target() {
    target_ = online_;
    since_sync_ = 0;
  }

  /// Samples a batch (uniform when PER is off), learns from it and feeds
  /// the TD magnitudes back as priorities.
  LossReport train_step(PrioritizedReplay& replay, std::size_t batch_size, std::int64_t frame) {
    const double beta = per_beta_at(frame, cfg_.total_frames, cfg_.per_beta_start, cfg_.per_beta_end);
    const ReplayBatch b = replay.sample(batch_size, beta, rng_);
    LossReport r = learn(b);
    if (cfg_.use_per) replay.update_priorities(b.ids, r.per_sample_td);
    return r;
  }

  /// One gradient step on a given batch.
  LossReport learn(const ReplayBatch& b) {
    const NetworkSpec& s = online_.spec();
    const int B = static_cast<int>(b.size());
    const int N = num_taus();
    online_.sample_noise(rng_);
    target_.sample_noise(rng_);
    const Tensor<float> x = scale_observations<float>(b.states, {B, s.channels, s.height, s.width});
    const Tensor<float> xn = scale_observations<float>(b.next_states, {B, s.channels, s.height, s.width});

    const Tensor<double> targets = compute_targets(b, x, xn, N);

    const Tensor<float> taus = uniform_taus<float>(B, N, rng_);
    const QuantileOutput<float> out = online_.forward(x, taus, Pass::train);
    const int A = s.num_actions;
    Tensor<double> pred({B, N});
    for (int i = 0; i < B; ++i)
      for (int n = 0; n < N; ++n)
        pred[static_cast<std::size_t>(i) * N + n] =
            out.quantiles[(static_cast<std::size_t>(i) * N + n) * A + static_cast<std::size_t>(b.actions[static_cast<std::size_t>(i)])];

    std::span<const double> w;
    if (cfg_.use_per && cfg_.use_per_is_weights) w = b.is_weights;
    LossReport r = quantile_huber_loss(pred, targets, to_double(taus), cfg_.huber_kappa, w, s.iqn);

    Tensor<float> dq({B, N, A});
    for (int i = 0; i < B; ++i)
      for (int n = 0; n < N; ++n)
        dq[(static_cast<std::size_t>(i) * N + n) * A + static_cast<std::size_t>(b.actions[static_cast<std::size_t>(i)])] =
            static_cast<float>(r.dpred[static_cast<std::size_t>(i) * N + n]);
    online_.zero_grad();
    online_.backward(dq);
    const auto params = online_.params();
    r.grad_norm_preclip = clip_grad_norm(params, cfg_.grad_clip_max_norm);
    adam_.step(params);

    ++grad_steps_;
    if (++since_sync_ >= cfg_.target_update_period) sync_target();
    return r;
  }

 private:
  Tensor<double> compute_targets(const ReplayBatch& b, const Tensor<float>& x, const Tensor<float>& xn, int N) {
    const int B = static_cast<int>(b.size());
    TargetBatch tb{b.returns, b.terminals, b.horizons, b.actions};
    const Tensor<double> z_next = to_double(target_.forward(xn, uniform_taus<float>(B, N, rng_)).quantiles);
    if (cfg_.use_munchausen) {
      const Tensor<double> q_s = to_double(target_.forward(x, uniform_taus<float>(B, N, rng_)).q_values());
      return munchausen_targets(tb, q_s, z_next, target_params(cfg_));
    }
    const Tensor<double> q_on = to_double(online_.forward(xn, uniform_taus<float>(B, N, rng_)).q_values());
    return double_dqn_targets(tb, q_on, z_next, cfg_.discount);
  }

  AgentConfig cfg_;
  Net online_;
  Net target_;
  Adam<float> adam_;
  Rng rng_;
  std::int64_t grad_steps_ = 0;
  std::int64_t since_sync_ = 0;
};

}  // namespace btr
