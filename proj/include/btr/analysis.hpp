#pragma once

#include "btr/envs.hpp"
#include "btr/network.hpp"
#include "btr/tensor.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

// Evaluation statistics and the network measurements used to study
// plasticity and policy stability. Everything here is read-only with respect
// to network parameters: measurements run on copies.

namespace btr {

class AnalysisError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Mean of the sorted scores after dropping floor(n/4) from each end.
inline double iqm(std::vector<double> scores) {
  if (scores.empty()) throw AnalysisError("iqm of an empty score list");
  std::sort(scores.begin(), scores.end());
  const std::size_t cut = scores.size() / 4;
  const double sum = std::accumulate(scores.begin() + static_cast<std::ptrdiff_t>(cut),
                                     scores.end() - static_cast<std::ptrdiff_t>(cut), 0.0);
  return sum / static_cast<double>(scores.size() - 2 * cut);
}

inline double mean(std::span<const double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Linear-interpolated quantile of sorted data (numpy's default rule).
inline double sorted_quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// Percentile bootstrap interval of the IQM.
inline std::pair<double, double> bootstrap_ci(const std::vector<double>& scores, int n_resamples, double level,
                                              std::uint64_t seed) {
  if (scores.empty()) throw AnalysisError("bootstrap of an empty score list");
  if (n_resamples < 1) throw AnalysisError("bootstrap needs at least one resample");
  if (!(level > 0 && level < 1)) throw AnalysisError("confidence level must be in (0, 1)");
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, scores.size() - 1);
  std::vector<double> stats(static_cast<std::size_t>(n_resamples));
  std::vector<double> resample(scores.size());
  for (auto& s : stats) {
    for (auto& r : resample) r = scores[pick(rng)];
    s = iqm(resample);
  }
  std::sort(stats.begin(), stats.end());
  const double tail = (1.0 - level) / 2.0;
  return {sorted_quantile(stats, tail), sorted_quantile(stats, 1.0 - tail)};
}

inline double human_normalize(double score, double random_ref, double human_ref) {
  if (human_ref == random_ref) throw AnalysisError("human and random reference scores are equal");
  return (score - random_ref) / (human_ref - random_ref);
}

/// Mean shortfall below 1.0, floored at zero per entry.
inline double optimality_gap(std::span<const double> normalized) {
  if (normalized.empty()) return 0.0;
  double s = 0;
  for (double v : normalized) s += std::max(0.0, 1.0 - v);
  return s / static_cast<double>(normalized.size());
}

/// Mean over rows of (largest - second largest) Q. q: [B, A].
template <typename T>
double action_gap_q(const Tensor<T>& q) {
  const int B = q.dim(0), A = q.dim(1);
  if (A < 2) throw AnalysisError("action gap needs at least two actions");
  if (B == 0) throw AnalysisError("action gap of an empty probe");
  double total = 0;
  for (int b = 0; b < B; ++b) {
    double m1 = -std::numeric_limits<double>::infinity(), m2 = m1;
    for (int a = 0; a < A; ++a) {
      const double v = static_cast<double>(q[static_cast<std::size_t>(b) * A + a]);
      if (v > m1) {
        m2 = m1;
        m1 = v;
      } else if (v > m2) {
        m2 = v;
      }
    }
    total += m1 - m2;
  }
  return total / B;
}

/// Percentage of consecutive entries whose action differs.
inline double action_swaps(std::span<const int> greedy) {
  if (greedy.size() < 2) throw AnalysisError("action swaps need a trajectory of at least two states");
  std::size_t swaps = 0;
  for (std::size_t i = 1; i < greedy.size(); ++i) swaps += greedy[i] != greedy[i - 1];
  return 100.0 * static_cast<double>(swaps) / static_cast<double>(greedy.size() - 1);
}

/// Percentage of positions where two greedy-action lists disagree.
inline double policy_churn(std::span<const int> before, std::span<const int> after) {
  if (before.size() != after.size()) throw AnalysisError("churn: action lists differ in length");
  if (before.empty()) throw AnalysisError("churn of an empty probe");
  std::size_t diff = 0;
  for (std::size_t i = 0; i < before.size(); ++i) diff += before[i] != after[i];
  return 100.0 * static_cast<double>(diff) / static_cast<double>(before.size());
}

struct DormancyReport {
  std::size_t dormant = 0;
  std::size_t total = 0;
  double percent() const { return total ? 100.0 * static_cast<double>(dormant) / static_cast<double>(total) : 0.0; }
};

/// Neuron i of a layer is dormant when its mean |activation| divided by the
/// layer average of those means is <= threshold. A layer whose activations
/// are all zero counts entirely as dormant.
inline DormancyReport dormant_fraction(const ActivationRecorder& rec, double threshold) {
  if (threshold < 0) throw AnalysisError("dormancy threshold must be >= 0");
  if (rec.layers.empty()) throw AnalysisError("dormancy needs recorded activations (empty probe?)");
  DormancyReport r;
  for (std::size_t l = 0; l < rec.layers.size(); ++l) {
    const auto m = rec.means(l);
    const double avg = std::accumulate(m.begin(), m.end(), 0.0) / static_cast<double>(m.size());
    r.total += m.size();
    for (double v : m)
      if (avg <= 0.0 || v / avg <= threshold) ++r.dormant;
  }
  return r;
}

/// Smallest k whose leading singular values hold a (1 - delta) share of the
/// singular-value mass. Zero for an all-zero matrix.
template <typename Derived>
int srank(const Eigen::MatrixBase<Derived>& features, double delta) {
  if (features.rows() < 1) throw AnalysisError("srank of an empty feature matrix");
  const Eigen::MatrixXd m = features.template cast<double>();
  const Eigen::VectorXd sv = Eigen::BDCSVD<Eigen::MatrixXd>(m).singularValues();
  const double total = sv.sum();
  if (total <= 0) return 0;
  double acc = 0;
  for (Eigen::Index k = 0; k < sv.size(); ++k) {
    acc += sv[k];
    if (acc >= (1.0 - delta) * total * (1.0 - 1e-12)) return static_cast<int>(k + 1);
  }
  return static_cast<int>(sv.size());
}

struct WeightNorms {
  std::vector<std::string> layers;
  std::vector<double> norms;
  double total = 0.0;
};

/// L2 norm of each layer's (mu) weight matrix and of their concatenation.
/// Biases, noise scales and normalisation gains are excluded.
template <typename T>
WeightNorms weight_l2(const Network<T>& net) {
  WeightNorms w;
  double sq_total = 0;
  for (const Param<T>* p : net.params()) {
    const std::string& n = p->name;
    const bool conv_w = n.size() >= 7 && n.compare(n.size() - 7, 7, ".weight") == 0;
    const bool dense_w = n.size() >= 10 && n.compare(n.size() - 10, 10, ".weight_mu") == 0;
    if (!conv_w && !dense_w) continue;
    if (n.find(".norm") != std::string::npos) continue;
    double sq = 0;
    for (T v : p->value.data) sq += static_cast<double>(v) * static_cast<double>(v);
    w.layers.push_back(n.substr(0, n.rfind('.')));
    w.norms.push_back(std::sqrt(sq));
    sq_total += sq;
  }
  w.total = std::sqrt(sq_total);
  return w;
}

/// A fixed set of observations from seeded uniform-random rollouts, in
/// trajectory order (consecutive steps of one environment).
struct StateProbe {
  std::vector<std::uint8_t> obs;  // [count, obs_bytes]
  std::size_t count = 0;
  std::size_t obs_bytes = 0;
  std::vector<int> shape;  // {C, H, W}

  std::span<const std::uint8_t> rows(std::size_t begin, std::size_t n) const {
    return {obs.data() + begin * obs_bytes, n * obs_bytes};
  }
};

inline StateProbe collect_probe(const GridLayout& layout, const EnvOptions& opt, std::size_t count,
                                std::uint64_t seed) {
  if (count == 0) throw AnalysisError("probe size must be positive");
  GridPixelEnv env(layout, opt, seed);
  Rng rng(derive_seed(seed, 1));
  std::uniform_int_distribution<int> act(0, env.num_actions() - 1);
  StateProbe p;
  p.obs_bytes = env.obs_bytes();
  p.count = count;
  p.shape = {opt.frame_stack, opt.height, opt.width};
  p.obs.reserve(count * p.obs_bytes);
  for (std::size_t i = 0; i < count; ++i) {
    const auto& o = env.observation();
    p.obs.insert(p.obs.end(), o.begin(), o.end());
    const StepOutcome s = env.step(act(rng));
    if (s.terminal || s.truncated) env.reset();
  }
  return p;
}

inline std::string shape_text(const std::vector<int>& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
  return s;
}

/// Probe forward passes with zero noise and one shared set of taus.
template <typename T>
class ProbeEvaluator {
 public:
  ProbeEvaluator(const StateProbe& probe, int num_taus, std::uint64_t tau_seed, std::size_t chunk = 256)
      : probe_(probe), chunk_(chunk) {
    Rng rng(tau_seed);
    taus_ = uniform_taus<T>(1, num_taus, rng);
  }

  struct Result {
    Tensor<T> q;  // [count, A]
    std::vector<int> greedy;
    Eigen::MatrixXd features;  // [count, D]
    ActivationRecorder recorder;
  };

  /// `net` is copied; the caller's noise and spectral state are untouched.
  Result run(const Network<T>& net, bool want_features = true, bool want_activations = true) const {
    Network<T> n = net;
    n.zero_noise();
    const NetworkSpec& s = n.spec();
    if (probe_.shape != std::vector<int>{s.channels, s.height, s.width})
      throw AnalysisError("spec mismatch: probe observations are " + shape_text(probe_.shape) +
                          " but the network expects " + shape_text({s.channels, s.height, s.width}));
    Result r;
    const int A = s.num_actions;
    const int N = taus_.dim(1);
    r.q = Tensor<T>({static_cast<int>(probe_.count), A});
    if (want_features) r.features.resize(static_cast<Eigen::Index>(probe_.count), n.feature_dim());
    for (std::size_t begin = 0; begin < probe_.count; begin += chunk_) {
      const std::size_t m = std::min(chunk_, probe_.count - begin);
      const int B = static_cast<int>(m);
      const Tensor<T> x = scale_observations<T>(probe_.rows(begin, m), {B, s.channels, s.height, s.width});
      Tensor<T> taus({B, N});
      for (int b = 0; b < B; ++b) std::copy_n(taus_.ptr(), N, taus.ptr() + static_cast<std::size_t>(b) * N);
      const auto out = n.forward(x, taus, Pass::inference, want_activations ? &r.recorder : nullptr);
      const auto q = out.q_values();
      std::copy(q.data.begin(), q.data.end(), r.q.data.begin() + static_cast<std::ptrdiff_t>(begin * A));
      if (want_features) {
        const auto f = n.features(x);
        const int D = n.feature_dim();
        for (int b = 0; b < B; ++b)
          for (int d = 0; d < D; ++d)
            r.features(static_cast<Eigen::Index>(begin) + b, d) = static_cast<double>(f[static_cast<std::size_t>(b) * D + d]);
      }
    }
    r.greedy = argmax_rows(r.q);
    return r;
  }

 private:
  const StateProbe& probe_;
  std::size_t chunk_;
  Tensor<T> taus_;
};

}  // namespace btr
