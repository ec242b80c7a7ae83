// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.
//
//   acceptance [--only 1,4,9] [--runs DIR]
//
// Training criteria (9, 10, 12) write their run directories under DIR
// (default: ./acceptance_runs).

#include "btr/analysis.hpp"
#include "btr/config.hpp"
#include "btr/learner.hpp"
#include "btr/metrics.hpp"
#include "btr/orchestrator.hpp"
#include "btr/replay.hpp"
#include "btr/run.hpp"
#include "support/oracles.hpp"

#include <Eigen/SVD>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace btr;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

fs::path g_runs = "acceptance_runs";

fs::path source_dir() {
  if (const char* s = std::getenv("BTR_SOURCE_DIR")) return s;
#ifdef BTR_DEFAULT_SOURCE_DIR
  return BTR_DEFAULT_SOURCE_DIR;
#else
  return ".";
#endif
}

AgentConfig shipped_config(const std::string& name) { return load_config((source_dir() / "configs" / name).string()); }

Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data) v = u(rng);
  return t;
}

// ---- 1-3: architecture -----------------------------------------------------

Outcome parameter_count() {
  const NetworkSpec s;  // 4x84x84, 18 actions, width 2, maxpool 6x6
  const auto pc = count_parameters(s);
  const double total = static_cast<double>(pc.total_mu), linear = static_cast<double>(pc.linear_mu);
  const bool ok = std::abs(total - 2.91e6) <= 0.02 * 2.91e6 && std::abs(linear - 2.52e6) <= 0.02 * 2.52e6;
  return {ok, fmt("total_mu %.4fM (want 2.91M +-2%%), linear %.4fM (want 2.52M +-2%%), sigma %.4fM", total / 1e6,
                  linear / 1e6, static_cast<double>(pc.heads_sigma) / 1e6)};
}

Outcome maxpool_share() {
  NetworkSpec with, without;
  without.maxpool = false;
  const double a = static_cast<double>(count_parameters(with).total_mu);
  const double b = static_cast<double>(count_parameters(without).total_mu);
  const double share = a / b;
  return {std::abs(share - 0.23) <= 0.03,
          fmt("maxpool %.3fM / no-maxpool %.3fM = %.1f%% (want 23%% +-3pp)", a / 1e6, b / 1e6, 100 * share)};
}

Outcome resolution_invariance() {
  NetworkSpec a, b;
  b.height = 140;
  b.width = 114;
  Rng rng(3);
  std::vector<int> lengths;
  for (const auto& s : {a, b}) {
    Network<float> net(s, 1);
    Tensor<float> x({1, s.channels, s.height, s.width});
    std::uniform_real_distribution<float> u(0, 1);
    for (auto& v : x.data) v = u(rng);
    lengths.push_back(net.features(x).dim(1));
  }
  const auto ha = count_parameters(a).heads_mu, hb = count_parameters(b).heads_mu;
  const bool ok = lengths[0] == 2304 && lengths[1] == 2304 && ha == hb &&
                  count_parameters(a).embedding == count_parameters(b).embedding;
  return {ok, fmt("feature length %d / %d, head params %lld / %lld", lengths[0], lengths[1], static_cast<long long>(ha),
                  static_cast<long long>(hb))};
}

// ---- 4-5: loss and targets -------------------------------------------------

Outcome loss_gradient() {
  double worst = 0;
  std::size_t checked = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const int B = 3, in = 5, hidden = 7, N = 4, M = 6, A = 3;
    Dense<double> l1("l1", in, hidden, false, 0.5, rng), l2("l2", hidden, N, true, 0.5, rng);
    l2.sample_noise(rng);
    const std::vector<Param<double>*> params{&l1.weight_mu, &l1.bias_mu,      &l2.weight_mu,
                                             &l2.bias_mu,   &l2.weight_sigma, &l2.bias_sigma};
    const auto x = random_tensor({B, in}, rng);
    const auto taus = random_tensor({B, N}, rng, 0.0, 1.0);
    const std::vector<double> returns{0.3, -0.2, 1.0}, weights{0.4, 1.0, 0.7};
    const std::vector<std::uint8_t> terms{0, 0, 1};
    const std::vector<int> horizons{3, 3, 2}, actions{2, 0, 1};
    const auto target = munchausen_targets({returns, terms, horizons, actions}, random_tensor({B, A}, rng),
                                           random_tensor({B, M, A}, rng, -2.0, 2.0), TargetParams{});
    auto loss_of = [&] {
      auto h = l1.forward(x);
      relu_inplace(h);
      return quantile_huber_loss(l2.forward(h), target, taus, 1.0, weights, true).loss;
    };
    for (auto* p : params) p->grad.zero();
    auto h = l1.forward(x);
    relu_inplace(h);
    const auto rep = quantile_huber_loss(l2.forward(h), target, taus, 1.0, weights, true);
    auto dh = l2.backward(h, rep.dpred, true);
    relu_backward_inplace(dh, h);
    l1.backward(x, dh, false);
    const double eps = 1e-6;
    for (auto* p : params)
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double keep = p->value[i];
        p->value[i] = keep + eps;
        const double up = loss_of();
        p->value[i] = keep - eps;
        const double down = loss_of();
        p->value[i] = keep;
        const double fd = (up - down) / (2 * eps), an = p->grad[i];
        worst = std::max(worst, std::abs(fd - an) / std::max(1e-7, std::abs(fd) + std::abs(an)));
        ++checked;
      }
  }
  return {worst < 1e-4, fmt("%zu partials over 5 seeds, worst relative error %.2e (want < 1e-4)", checked, worst)};
}

Outcome target_limits() {
  // alpha = 0 and tau -> 0 collapse the Munchausen target to a hard-max n-step target
  Rng rng(21);
  double worst = 0;
  for (int inst = 0; inst < 50; ++inst) {
    std::uniform_int_distribution<int> dim(2, 6);
    const int B = dim(rng), N = dim(rng), A = dim(rng);
    const double gamma = std::uniform_real_distribution<double>(0.8, 0.999)(rng);
    const auto q_s = random_tensor({B, A}, rng, -3, 3);
    const auto z = random_tensor({B, N, A}, rng, -3, 3);
    std::vector<double> returns(B);
    std::vector<std::uint8_t> terms(B);
    std::vector<int> horizons(B), actions(B);
    for (int b = 0; b < B; ++b) {
      const auto bi = static_cast<std::size_t>(b);
      returns[bi] = std::uniform_real_distribution<double>(-2, 2)(rng);
      terms[bi] = rng() % 4 == 0;
      horizons[bi] = 1 + static_cast<int>(rng() % 3);
      actions[bi] = static_cast<int>(rng() % static_cast<unsigned>(A));
    }
    const auto got = munchausen_targets({returns, terms, horizons, actions}, q_s, z, TargetParams{gamma, 1e-6, 0.0, -1.0});
    for (int b = 0; b < B; ++b) {
      const auto bi = static_cast<std::size_t>(b);
      int best = 0;
      double bestq = -1e300;
      for (int a = 0; a < A; ++a) {
        double q = 0;
        for (int n = 0; n < N; ++n) q += z[static_cast<std::size_t>((b * N + n) * A + a)];
        if (q > bestq) bestq = q, best = a;
      }
      for (int n = 0; n < N; ++n) {
        const double want = returns[bi] + (terms[bi] ? 0.0
                                                     : std::pow(gamma, horizons[bi]) *
                                                           z[static_cast<std::size_t>((b * N + n) * A + best)]);
        worst = std::max(worst, std::abs(got[bi * static_cast<std::size_t>(N) + static_cast<std::size_t>(n)] - want));
      }
    }
  }
  // double DQN on a two-state chain: s0 -(r=1, two steps)-> s1, s1 -(r=0.5)-> end
  Tensor<double> q_online({2, 2});
  q_online.data = {0.1, 0.5, 9.0, -9.0};
  Tensor<double> z({2, 2, 2});
  z.data = {3, 7, 4, 8, 100, 100, 100, 100};
  const std::vector<double> returns{1.0, 0.5};
  const std::vector<std::uint8_t> terms{0, 1};
  const std::vector<int> horizons{2, 1}, actions{0, 1};
  const auto t = double_dqn_targets({returns, terms, horizons, actions}, q_online, z, 0.9);
  // online argmax at s1' is action 1; bootstrap 0.81 * z[., 1]; s1 is terminal
  const bool exact = t[0] == 1.0 + 0.81 * 7 && t[1] == 1.0 + 0.81 * 8 && t[2] == 0.5 && t[3] == 0.5;
  return {worst < 1e-3 && exact,
          fmt("hard-max limit worst |diff| %.2e over 50 instances (want < 1e-3); double-DQN chain %s", worst,
              exact ? "exact" : "MISMATCH")};
}

// ---- 6-8: replay and spectral norm -----------------------------------------

Outcome per_sampling() {
  double worst_ratio = 0;
  int passed = 0;
  for (int v = 0; v < 10; ++v) {
    Rng rng(600 + static_cast<std::uint64_t>(v));
    const int n = 8 + 4 * v;
    const double alpha = std::array{0.2, 0.5, 1.0}[static_cast<std::size_t>(v % 3)];
    ReplayOptions o;
    o.capacity = 64;
    o.obs_bytes = 4;
    o.n_step = 1;
    o.alpha = alpha;
    o.min_size = 1;
    PrioritizedReplay r(o);
    for (int t = 0; t < n; ++t) {
      const std::vector<std::uint8_t> s(4, static_cast<std::uint8_t>(t)), s2(4, static_cast<std::uint8_t>(t + 1));
      r.push(0, s, t % 4, 0.0, s2, false, false);
    }
    std::vector<std::uint64_t> ids;
    std::vector<double> td;
    std::exponential_distribution<double> ex(0.5);
    for (int s = 0; s < n; ++s) {
      ids.push_back(r.id_at(static_cast<std::size_t>(s)));
      td.push_back(ex(rng) * (rng() % 2 ? 1.0 : -1.0));
    }
    r.update_priorities(ids, td);
    std::vector<double> p(static_cast<std::size_t>(n));
    double z = 0;
    for (int s = 0; s < n; ++s) z += p[static_cast<std::size_t>(s)] = std::pow(std::abs(td[static_cast<std::size_t>(s)]) + o.priority_epsilon, alpha);
    for (auto& x : p) x /= z;
    std::vector<std::size_t> counts(static_cast<std::size_t>(n), 0);
    std::mt19937_64 srng(700 + static_cast<std::uint64_t>(v));
    for (int d = 0; d < 100000; ++d) ++counts[r.slot_of(r.sample(1, 0.4, srng).ids[0])];
    const double stat = oracle::chi2_statistic(counts, p), crit = oracle::chi2_critical(n - 1, 0.99);
    worst_ratio = std::max(worst_ratio, stat / crit);
    passed += stat < crit;
  }
  return {passed == 10, fmt("%d/10 priority vectors pass chi-squared at 99%%, worst statistic/critical %.2f", passed, worst_ratio)};
}

// Distinct bytes per (env, episode, step); within an episode the next
// observation of one step is the state of the following one.
std::vector<std::uint8_t> tagged_obs(int env, int episode, int t) {
  std::vector<std::uint8_t> o(6);
  o[0] = static_cast<std::uint8_t>(env);
  o[1] = static_cast<std::uint8_t>(episode & 0xFF);
  o[2] = static_cast<std::uint8_t>((episode >> 8) & 0xFF);
  o[3] = static_cast<std::uint8_t>(t & 0xFF);
  o[4] = static_cast<std::uint8_t>((t >> 8) & 0xFF);
  return o;
}

Outcome nstep_equivalence() {
  std::string detail;
  bool ok = true;
  for (int n : {1, 2, 3, 5}) {
    const int E = 4, steps = 10000 / E;
    ReplayOptions o;
    o.capacity = 1 << 14;
    o.obs_bytes = 6;
    o.num_envs = E;
    o.n_step = n;
    o.gamma = 0.97;
    PrioritizedReplay r(o);
    std::vector<std::vector<oracle::RawStep>> logs(E);
    std::mt19937_64 rng(900 + static_cast<std::uint64_t>(n));
    std::vector<int> t(E, 0), ep(E, 0);
    for (int step = 0; step < steps; ++step)
      for (int e = 0; e < E; ++e) {
        oracle::RawStep s;
        const auto ei = static_cast<std::size_t>(e);
        s.state = tagged_obs(e, ep[ei], t[ei]);
        s.next = tagged_obs(e, ep[ei], t[ei] + 1);
        s.action = static_cast<int>(rng() % 4);
        s.reward = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
        s.terminal = rng() % 11 == 0;
        s.truncated = !s.terminal && rng() % 17 == 0;
        r.push(e, s.state, s.action, s.reward, s.next, s.terminal, s.truncated);
        ++t[ei];
        if (s.terminal || s.truncated) {
          t[ei] = 0;
          ++ep[ei];
        }
        logs[ei].push_back(std::move(s));
      }
    const auto expect = oracle::nstep_transitions(logs, n, 0.97);
    std::size_t mismatches = expect.size() == r.size() ? 0 : 1;
    for (std::size_t k = 0; k < std::min(expect.size(), r.size()); ++k) {
      const auto got = r.at(k);
      const auto& w = expect[k];
      if (got.state != w.state || got.next_state != w.next || got.action != w.action || got.terminal != w.terminal ||
          got.horizon != w.horizon || std::abs(got.return_n - w.return_n) > 1e-12)
        ++mismatches;
    }
    ok = ok && mismatches == 0;
    detail += fmt("%sn=%d: %zu transitions, %zu mismatches", detail.empty() ? "" : "; ", n, expect.size(), mismatches);
  }
  return {ok, detail};
}

Outcome spectral_norm() {
  double lo = 1e9, hi = 0;
  int inside = 0, count = 0;
  for (int seed = 1; count < 20; ++seed) {
    Network<float> net(NetworkSpec{}, static_cast<std::uint64_t>(seed));
    Rng rng(static_cast<std::uint64_t>(seed) + 100);
    for (auto* conv : net.residual_convs()) {
      if (count == 20) break;
      const auto& w = conv->weight.value;
      const int rows = w.dim(0), cols = static_cast<int>(w.size()) / rows;
      MatRM<double> m(rows, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(w.data[static_cast<std::size_t>(i)]);
      auto state = SpectralState<double>::random(rows, cols, rng);
      MatRM<double> normalized;
      for (int it = 0; it < 50; ++it) normalized = spectral_normalize_step(m, state);
      const double s = Eigen::JacobiSVD<Eigen::MatrixXd>(normalized).singularValues()(0);
      lo = std::min(lo, s);
      hi = std::max(hi, s);
      inside += s >= 0.99 && s <= 1.01;
      ++count;
    }
  }
  return {inside == 20, fmt("%d/20 residual conv matrices in [0.99, 1.01] after 50 iterations (range %.4f..%.4f)", inside, lo, hi)};
}

// ---- training helpers ----------------------------------------------------------

bool finite_row(const MetricsRow& r) {
  for (double v : {r.mean, r.iqm, r.ci_low, r.ci_high, r.loss, r.grad_norm, r.epsilon, r.action_gap, r.churn,
                   r.dormant_pct, r.srank, r.l2_total})
    if (!std::isfinite(v)) return false;
  return true;
}

// Header matches, rows parse, every column is populated, frames increase
// and the last row is the final frame count.
std::string csv_problem(const fs::path& path, std::int64_t final_frames) {
  std::ifstream in(path);
  std::string header;
  if (!in || !std::getline(in, header)) return "missing " + path.string();
  if (header != metrics_header()) return "bad header";
  std::vector<MetricsRow> rows;
  try {
    rows = read_metrics(path.string());
  } catch (const std::exception& e) {
    return e.what();
  }
  if (rows.empty()) return "no rows";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!finite_row(rows[i])) return fmt("row %zu has empty columns", i + 1);
    if (i && rows[i].frame <= rows[i - 1].frame) return "frames not increasing";
  }
  if (rows.back().frame != final_frames) return "last row is not the final frame";
  return "";
}

struct Run {
  TrainResult result;
  fs::path dir;
  double seconds = 0;
};

Run train(AgentConfig cfg, const std::string& name) {
  Run run;
  run.dir = g_runs / name;
  fs::remove_all(run.dir);
  write_manifest(run.dir, cfg);
  TrainOptions o;
  o.run_dir = run.dir.string();
  o.progress = false;
  const auto t0 = std::chrono::steady_clock::now();
  run.result = run_training(cfg, o);
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

// ---- 9, 10, 12: training -----------------------------------------------------

Outcome end_to_end() {
  const AgentConfig base = shipped_config("desk.cfg");
  std::string detail;
  int reached = 0;
  for (std::int64_t seed : {1, 2, 3}) {
    AgentConfig cfg = base;
    cfg.master_seed = seed;
    const Run run = train(cfg, "c09-seed" + std::to_string(seed));
    const auto& r = run.result;
    double best = -1e9;
    std::int64_t at = -1;
    for (const auto& row : r.rows)
      if (row.frame <= cfg.total_frames && row.mean > best) best = row.mean, at = row.frame;
    const bool ok = best >= 0.95 * r.oracle_return;
    reached += ok;
    detail += fmt("seed %lld: best mean %.4f at %lld frames (%.1f%% of oracle %.4f, %.0fs); ", static_cast<long long>(seed),
                  best, static_cast<long long>(at), 100 * best / r.oracle_return, r.oracle_return, run.seconds);
  }
  AgentConfig abl = base;
  abl.master_seed = 1;
  abl.use_impala = false;
  const Run run = train(abl, "c09-no-impala");
  const std::string problem = csv_problem(run.dir / "metrics.csv", run.result.counters.frames);
  double last = run.result.rows.empty() ? std::nan("") : run.result.rows.back().mean;
  detail += fmt("no-impala: %lld frames, last mean %.4f, csv %s (%.0fs)", static_cast<long long>(run.result.counters.frames),
                last, problem.empty() ? "complete" : problem.c_str(), run.seconds);
  return {reached == 3 && problem.empty(), fmt("%d/3 seeds reach 95%% of oracle; ", reached) + detail};
}

Outcome ablation_smoke() {
  const AgentConfig base = shipped_config("smoke.cfg");
  const std::vector<std::pair<std::string, bool AgentConfig::*>> arms{
      {"full", nullptr},
      {"no-munchausen", &AgentConfig::use_munchausen},
      {"no-iqn", &AgentConfig::use_iqn},
      {"no-sn", &AgentConfig::use_spectral_norm},
      {"no-impala", &AgentConfig::use_impala},
      {"no-maxpool", &AgentConfig::use_maxpool},
      {"no-vectorization", &AgentConfig::use_vectorization}};
  int good = 0;
  double total = 0;
  std::string detail;
  for (const auto& [name, flag] : arms) {
    AgentConfig cfg = base;
    if (flag) cfg.*flag = false;
    std::string problem;
    double secs = 0;
    try {
      const Run run = train(cfg, "c10-" + name);
      secs = run.seconds;
      problem = csv_problem(run.dir / "metrics.csv", run.result.counters.frames);
      if (problem.empty() && run.result.counters.frames < cfg.total_frames) problem = "stopped early";
    } catch (const std::exception& e) {
      problem = e.what();
    }
    total += secs;
    good += problem.empty();
    detail += fmt("; %s %s %.0fs", name.c_str(), problem.empty() ? "ok" : problem.c_str(), secs);
  }
  return {good == 7, fmt("%d/7 arms trained 50k frames with complete CSVs in %.1f min", good, total / 60) + detail};
}

Outcome determinism() {
  AgentConfig cfg = shipped_config("smoke.cfg");
  cfg.total_frames = 100000;
  const Run a = train(cfg, "c12-a");
  const Run b = train(cfg, "c12-b");
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const std::string ca = slurp(a.dir / "metrics.csv"), cb = slurp(b.dir / "metrics.csv");
  const bool same = !ca.empty() && ca == cb;
  return {same, fmt("two 100k-frame runs: %zu and %zu bytes, %s (%.1f min total)", ca.size(), cb.size(),
                    same ? "identical" : "DIFFERENT", (a.seconds + b.seconds) / 60)};
}

// ---- 11, 13: analysis and schedule ---------------------------------------------

Outcome analysis_oracles() {
  std::vector<std::string> fails;
  const double q = iqm({1, 2, 3, 4, 5, 6, 7, 8});
  if (q != 4.5) fails.push_back(fmt("iqm %.6f", q));

  Rng rng(11);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd u(40, 3), v(12, 3);
  for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = n01(rng);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = n01(rng);
  const Eigen::MatrixXd uq = Eigen::HouseholderQR<Eigen::MatrixXd>(u).householderQ() * Eigen::MatrixXd::Identity(40, 3);
  const Eigen::MatrixXd vq = Eigen::HouseholderQR<Eigen::MatrixXd>(v).householderQ() * Eigen::MatrixXd::Identity(12, 3);
  const int sr = srank(Eigen::MatrixXd(2.5 * uq * vq.transpose()), 0.01);
  if (sr != 3) fails.push_back(fmt("srank %d", sr));

  EnvOptions env;
  env.height = 16;
  env.width = 16;
  NetworkSpec spec;
  spec.height = 16;
  spec.width = 16;
  spec.num_actions = kGridActions;
  spec.width_scale = 1;
  spec.maxpool_out = 1;
  spec.dueling_hidden = 16;
  spec.cos_embedding = 8;
  const auto probe = collect_probe(load_layout("open8"), env, 100, 5);
  Network<float> net(spec, 9);
  const ProbeEvaluator<float> pe(probe, 8, 2);
  const int width = spec.dueling_hidden, in = net.feature_dim(), k = 3;
  Network<float> killed = net;
  for (auto* p : killed.params()) {
    if (p->name == "head.adv_hidden.weight_mu" || p->name == "head.adv_hidden.weight_sigma")
      for (int j = 0; j < k; ++j) std::fill_n(p->value.data.begin() + static_cast<std::ptrdiff_t>(j) * in, in, 0.0f);
    if (p->name == "head.adv_hidden.bias_mu" || p->name == "head.adv_hidden.bias_sigma")
      for (int j = 0; j < k; ++j) p->value[static_cast<std::size_t>(j)] = 0.0f;
  }
  const auto rec = pe.run(killed, false, true).recorder;
  ActivationRecorder layer;
  for (std::size_t i = 0; i < rec.layers.size(); ++i)
    if (rec.layers[i] == "adv_hidden") {
      layer.layers.push_back(rec.layers[i]);
      layer.sums.push_back(rec.sums[i]);
      layer.counts.push_back(rec.counts[i]);
    }
  const double frac = layer.layers.empty() ? 0.0 : dormant_fraction(layer, 0.025).percent() / 100.0;
  if (frac < static_cast<double>(k) / width) fails.push_back(fmt("dormant %.3f < %.3f", frac, static_cast<double>(k) / width));

  const Network<float> copy = net;
  const double churn = policy_churn(pe.run(net, false, false).greedy, pe.run(copy, false, false).greedy);
  if (churn != 0.0) fails.push_back(fmt("churn %.3f%%", churn));

  double worst_gap = 0;
  for (int t = 0; t < 20; ++t) {
    const int B = 30, A = 2 + t % 6;
    Tensor<double> qt({B, A});
    std::uniform_real_distribution<double> u01(-5, 5);
    for (auto& x : qt.data) x = std::round(u01(rng) * 4) / 4;  // ties included
    double want = 0;
    for (int b = 0; b < B; ++b)
      want += oracle::two_largest_gap(std::vector<double>(qt.data.begin() + b * A, qt.data.begin() + (b + 1) * A));
    worst_gap = std::max(worst_gap, std::abs(action_gap_q(qt) - want / B));
  }
  if (worst_gap > 1e-12) fails.push_back(fmt("action gap off by %.2e", worst_gap));

  std::string detail = fmt("iqm %.2f, srank %d, dormant %.3f (k/width %.3f), churn %.1f%%, action gap max diff %.1e", q, sr,
                           frac, static_cast<double>(k) / width, churn, worst_gap);
  return {fails.empty(), detail};
}

Outcome schedule() {
  const std::int64_t frames[] = {0, 4'000'000, 8'000'000, 99'999'999, 100'000'000};
  const double want[] = {1.0, 0.505, 0.01, 0.01, 0.0};
  bool ok = true;
  std::string got;
  for (double scale : {1.0, 0.01}) {
    AgentConfig cfg;
    cfg.total_frames = static_cast<std::int64_t>(std::llround(2e8 * scale));
    got += scale == 1.0 ? "full:" : " scaled 2M:";
    for (int i = 0; i < 5; ++i) {
      // scaled milestones keep their position; 100M-1 maps to the last frame before the cutoff
      const std::int64_t f = scale == 1.0 ? frames[i]
                                          : (i == 3 ? std::llround(1e8 * scale) - 1 : std::llround(static_cast<double>(frames[i]) * scale));
      const double e = epsilon_at(f, cfg);
      ok = ok && std::abs(e - want[i]) <= 1e-12;
      got += fmt(" %.4g", e);
    }
  }
  return {ok, got + " (want 1 0.505 0.01 0.01 0)"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string tok;
      while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
    } else if (a == "--runs" && i + 1 < argc) {
      g_runs = argv[++i];
    } else {
      std::cerr << "usage: acceptance [--only 1,2,...] [--runs DIR]\n";
      return 2;
    }
  }
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"parameter count", parameter_count},
      {"maxpool parameter share", maxpool_share},
      {"resolution invariance", resolution_invariance},
      {"loss gradient vs finite differences", loss_gradient},
      {"target-rule limits", target_limits},
      {"PER sampling distribution", per_sampling},
      {"n-step oracle equivalence", nstep_equivalence},
      {"spectral norm vs SVD", spectral_norm},
      {"end-to-end learning", end_to_end},
      {"ablation smoke", ablation_smoke},
      {"analysis metric oracles", analysis_oracles},
      {"determinism", determinism},
      {"epsilon schedule", schedule}};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << fmt("criterion %2d %s  %s: ", id, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str()) << o.detail
              << fmt(" [%.1fs]", secs) << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
