#pragma once

#include "btr/config.hpp"
#include "btr/layers.hpp"
#include "btr/tensor.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace btr {

struct NetworkSpec {
  int channels = 4;
  int height = 84;
  int width = 84;
  int num_actions = 18;
  int width_scale = 2;
  int maxpool_out = 6;
  int dueling_hidden = 512;
  int cos_embedding = 64;
  double sigma0 = 0.5;
  bool impala = true;
  bool maxpool = true;
  bool noisy = true;
  bool dueling = true;
  bool iqn = true;
  bool spectral_norm = true;
  bool layer_norm = false;

  bool operator==(const NetworkSpec&) const = default;
};

inline NetworkSpec network_spec(const AgentConfig& cfg, int num_actions) {
  NetworkSpec s;
  s.height = static_cast<int>(cfg.render_height);
  s.width = static_cast<int>(cfg.render_width);
  s.num_actions = num_actions;
  s.width_scale = static_cast<int>(cfg.impala_width);
  s.maxpool_out = static_cast<int>(cfg.maxpool_out);
  s.dueling_hidden = static_cast<int>(cfg.dueling_hidden);
  s.cos_embedding = static_cast<int>(cfg.iqn_cos_embedding);
  s.sigma0 = cfg.noisy_sigma0;
  s.impala = cfg.use_impala;
  s.maxpool = cfg.use_maxpool;
  s.noisy = cfg.use_noisy;
  s.dueling = cfg.use_dueling;
  s.iqn = cfg.use_iqn;
  s.spectral_norm = cfg.use_spectral_norm;
  s.layer_norm = cfg.use_layer_norm;
  return s;
}

inline std::array<int, 3> impala_channels(const NetworkSpec& s) {
  return {16 * s.width_scale, 32 * s.width_scale, 32 * s.width_scale};
}

/// (channels, height, width) of the trunk output before flattening.
inline std::array<int, 3> trunk_output_shape(const NetworkSpec& s) {
  int h = s.height, w = s.width, c = 0;
  if (s.impala) {
    for (int ch : impala_channels(s)) {
      h = (h - 1) / 2 + 1;
      w = (w - 1) / 2 + 1;
      c = ch;
    }
  } else {
    auto conv = [](int n, int k, int st) { return (n - k) / st + 1; };
    h = conv(conv(conv(h, 8, 4), 4, 2), 3, 1);
    w = conv(conv(conv(w, 8, 4), 4, 2), 3, 1);
    c = 64;
  }
  if (h < 1 || w < 1) throw ShapeError("input resolution too small for the trunk");
  if (s.maxpool) {
    if (h < s.maxpool_out || w < s.maxpool_out)
      throw ShapeError("trunk output " + std::to_string(h) + "x" + std::to_string(w) + " smaller than maxpool_out " +
                       std::to_string(s.maxpool_out));
    h = w = s.maxpool_out;
  }
  return {c, h, w};
}

inline int feature_dim(const NetworkSpec& s) {
  const auto [c, h, w] = trunk_output_shape(s);
  return c * h * w;
}

struct ParameterCounts {
  std::int64_t trunk = 0;
  std::int64_t embedding = 0;
  std::int64_t heads_mu = 0;
  std::int64_t heads_sigma = 0;
  std::int64_t total_mu = 0;
  std::int64_t linear_mu = 0;  // embedding + dense head weights/biases
};

/// Closed-form parameter counts by group. Noisy layers contribute their
/// mu weights/biases to heads_mu and their sigma tensors to heads_sigma.
inline ParameterCounts count_parameters(const NetworkSpec& s) {
  using I = std::int64_t;
  ParameterCounts pc;
  auto conv = [](I in, I out, I k) { return in * out * k * k + out; };
  auto dense = [](I in, I out) { return in * out + out; };
  if (s.impala) {
    I in = s.channels;
    for (int ch : impala_channels(s)) {
      pc.trunk += conv(in, ch, 3) + 4 * conv(ch, ch, 3);
      if (s.layer_norm) pc.trunk += 2 * ch;
      in = ch;
    }
  } else {
    pc.trunk = conv(s.channels, 32, 8) + conv(32, 64, 4) + conv(64, 64, 3);
  }
  const I D = feature_dim(s), H = s.dueling_hidden, A = s.num_actions;
  if (s.iqn) pc.embedding = dense(s.cos_embedding, D);
  I linear_heads = dense(D, H) + dense(H, A);
  if (s.dueling) linear_heads += dense(D, H) + dense(H, 1);
  pc.heads_mu = linear_heads;
  if (s.layer_norm) pc.heads_mu += 2 * H * (s.dueling ? 2 : 1);
  pc.heads_sigma = s.noisy ? linear_heads : 0;
  pc.total_mu = pc.trunk + pc.embedding + pc.heads_mu;
  pc.linear_mu = pc.embedding + linear_heads;
  return pc;
}

/// Quantile estimates for a batch: taus [B, N], quantiles [B, N, A].
template <typename T>
struct QuantileOutput {
  Tensor<T> taus;
  Tensor<T> quantiles;

  int batch() const { return quantiles.dim(0); }
  int num_taus() const { return quantiles.dim(1); }
  int num_actions() const { return quantiles.dim(2); }

  /// Mean over the quantile samples: [B, A].
  Tensor<T> q_values() const {
    const int B = batch(), N = num_taus(), A = num_actions();
    Tensor<T> q({B, A});
    for (int b = 0; b < B; ++b)
      for (int n = 0; n < N; ++n)
        for (int a = 0; a < A; ++a)
          q[static_cast<std::size_t>(b) * A + a] += quantiles[(static_cast<std::size_t>(b) * N + n) * A + a];
    for (auto& v : q.data) v /= static_cast<T>(N);
    return q;
  }
};

/// Per-neuron running sums of |activation| for dormancy measurements.
/// Convolutional neurons are channels, averaged over spatial positions.
struct ActivationRecorder {
  std::vector<std::string> layers;
  std::vector<std::vector<double>> sums;
  std::vector<std::size_t> counts;  // samples accumulated per layer

  template <typename T>
  void record_conv(const std::string& name, const Tensor<T>& x) {
    const int C = x.dim(0), B = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    auto& s = slot(name, C, static_cast<std::size_t>(B));
    for (int c = 0; c < C; ++c) {
      double acc = 0;
      const T* p = x.ptr() + static_cast<std::size_t>(c) * B * plane;
      for (std::size_t i = 0; i < static_cast<std::size_t>(B) * plane; ++i) acc += std::abs(static_cast<double>(p[i]));
      s[static_cast<std::size_t>(c)] += acc / static_cast<double>(plane);
    }
  }

  template <typename T>
  void record_dense(const std::string& name, const Tensor<T>& x) {
    const int R = x.dim(0), F = x.dim(1);
    auto& s = slot(name, F, static_cast<std::size_t>(R));
    for (int r = 0; r < R; ++r)
      for (int f = 0; f < F; ++f) s[static_cast<std::size_t>(f)] += std::abs(static_cast<double>(x[static_cast<std::size_t>(r) * F + f]));
  }

  /// Mean |activation| per neuron for layer i.
  std::vector<double> means(std::size_t i) const {
    std::vector<double> m = sums[i];
    for (auto& v : m) v /= static_cast<double>(counts[i]);
    return m;
  }

 private:
  std::vector<double>& slot(const std::string& name, int width, std::size_t samples) {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i] == name) {
        counts[i] += samples;
        return sums[i];
      }
    layers.push_back(name);
    sums.emplace_back(static_cast<std::size_t>(width), 0.0);
    counts.push_back(samples);
    return sums.back();
  }
};

enum class Pass {
  inference,  // no trace, spectral vectors untouched
  train,      // records a trace for backward() and refines spectral vectors once
};

/// cos(pi * i * tau) for i = 0 .. E-1, one row per tau.
template <typename T>
Tensor<T> cosine_features(const Tensor<T>& taus, int embedding) {
  Tensor<T> out({static_cast<int>(taus.size()), embedding});
  for (std::size_t r = 0; r < taus.size(); ++r)
    for (int i = 0; i < embedding; ++i)
      out[r * embedding + i] = static_cast<T>(std::cos(std::numbers::pi * i * static_cast<double>(taus[r])));
  return out;
}

/// Converts uint8 frames [B, C, H, W] to reals in [0, 1].
template <typename T>
Tensor<T> scale_observations(std::span<const std::uint8_t> obs, std::vector<int> shape) {
  Tensor<T> out(std::move(shape));
  if (out.size() != obs.size()) throw ShapeError("observation buffer does not match shape");
  for (std::size_t i = 0; i < obs.size(); ++i) out[i] = static_cast<T>(obs[i]) / T(255);
  return out;
}

template <typename T>
Tensor<T> uniform_taus(int batch, int n, Rng& rng) {
  Tensor<T> taus({batch, n});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& t : taus.data) {
    double x = u(rng);
    while (x <= 0.0) x = u(rng);
    t = static_cast<T>(x);
  }
  return taus;
}

/// Impala (or Nature) trunk, optional adaptive maxpool, IQN cosine
/// embedding and (noisy, dueling) quantile heads.
/// Power iterations run on each normalised weight at construction.
inline constexpr int kSpectralWarmup = 15;

template <typename T>
class Network {
 public:
  Network() = default;

  Network(const NetworkSpec& spec, std::uint64_t seed) : spec_(spec) {
    Rng rng(seed);
    const auto out = trunk_output_shape(spec);  // validates resolution
    if (spec.impala) {
      int in = spec.channels;
      const auto chans = impala_channels(spec);
      for (int b = 0; b < 3; ++b) {
        ImpalaBlock blk;
        const std::string base = "trunk.block" + std::to_string(b);
        blk.stem = Conv2d<T>(base + ".stem", in, chans[b], 3, 1, 1, rng);
        if (spec.layer_norm) blk.norm = LayerNorm<T>(base + ".norm", chans[b], true);
        for (int r = 0; r < 2; ++r) {
          auto& ru = blk.res[r];
          const std::string rb = base + ".res" + std::to_string(r);
          ru.conv1 = Conv2d<T>(rb + ".conv1", chans[b], chans[b], 3, 1, 1, rng);
          ru.conv2 = Conv2d<T>(rb + ".conv2", chans[b], chans[b], 3, 1, 1, rng);
          ru.sn1 = SpectralState<T>::random(chans[b], chans[b] * 9, rng);
          ru.sn2 = SpectralState<T>::random(chans[b], chans[b] * 9, rng);
          for (int it = 0; it < kSpectralWarmup; ++it) {
            power_iteration(ru.conv1.weight.value.ptr(), chans[b], chans[b] * 9, ru.sn1);
            power_iteration(ru.conv2.weight.value.ptr(), chans[b], chans[b] * 9, ru.sn2);
          }
        }
        blocks_.push_back(std::move(blk));
        in = chans[b];
      }
    } else {
      nature_[0] = Conv2d<T>("trunk.conv0", spec.channels, 32, 8, 4, 0, rng);
      nature_[1] = Conv2d<T>("trunk.conv1", 32, 64, 4, 2, 0, rng);
      nature_[2] = Conv2d<T>("trunk.conv2", 64, 64, 3, 1, 0, rng);
    }
    feature_dim_ = out[0] * out[1] * out[2];
    if (spec.iqn) embed_ = Dense<T>("embed", spec.cos_embedding, feature_dim_, false, 0.0, rng);
    const int H = spec.dueling_hidden;
    adv_hidden_ = Dense<T>(spec.dueling ? "head.adv_hidden" : "head.hidden", feature_dim_, H, spec.noisy, spec.sigma0, rng);
    adv_out_ = Dense<T>(spec.dueling ? "head.adv_out" : "head.out", H, spec.num_actions, spec.noisy, spec.sigma0, rng);
    if (spec.dueling) {
      value_hidden_ = Dense<T>("head.value_hidden", feature_dim_, H, spec.noisy, spec.sigma0, rng);
      value_out_ = Dense<T>("head.value_out", H, 1, spec.noisy, spec.sigma0, rng);
    }
    if (spec.layer_norm) {
      adv_norm_ = LayerNorm<T>(spec.dueling ? "head.adv_norm" : "head.norm", H, false);
      if (spec.dueling) value_norm_ = LayerNorm<T>("head.value_norm", H, false);
    }
  }

  const NetworkSpec& spec() const noexcept { return spec_; }
  int feature_dim() const noexcept { return feature_dim_; }
  int num_actions() const noexcept { return spec_.num_actions; }

  /// Every trainable array in a fixed order.
  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> ps;
    auto conv = [&](Conv2d<T>& c) {
      ps.push_back(&c.weight);
      ps.push_back(&c.bias);
    };
    auto dense = [&](Dense<T>& d) {
      ps.push_back(&d.weight_mu);
      ps.push_back(&d.bias_mu);
      if (d.noisy) {
        ps.push_back(&d.weight_sigma);
        ps.push_back(&d.bias_sigma);
      }
    };
    auto norm = [&](LayerNorm<T>& n) {
      ps.push_back(&n.gamma);
      ps.push_back(&n.beta);
    };
    for (auto& blk : blocks_) {
      conv(blk.stem);
      if (spec_.layer_norm) norm(blk.norm);
      for (auto& ru : blk.res) {
        conv(ru.conv1);
        conv(ru.conv2);
      }
    }
    if (!spec_.impala)
      for (auto& c : nature_) conv(c);
    if (spec_.iqn) dense(embed_);
    if (spec_.dueling) {
      dense(value_hidden_);
      if (spec_.layer_norm) norm(value_norm_);
      dense(value_out_);
    }
    dense(adv_hidden_);
    if (spec_.layer_norm) norm(adv_norm_);
    dense(adv_out_);
    return ps;
  }

  std::vector<const Param<T>*> params() const {
    auto ps = const_cast<Network*>(this)->params();
    return {ps.begin(), ps.end()};
  }

  /// Power-iteration state of every spectrally normalised convolution.
  std::vector<SpectralState<T>*> spectral_states() {
    std::vector<SpectralState<T>*> out;
    if (spec_.spectral_norm)
      for (auto& blk : blocks_)
        for (auto& ru : blk.res) {
          out.push_back(&ru.sn1);
          out.push_back(&ru.sn2);
        }
    return out;
  }

  std::vector<const SpectralState<T>*> spectral_states() const {
    auto ss = const_cast<Network*>(this)->spectral_states();
    return {ss.begin(), ss.end()};
  }

  /// Raw weights of the residual-unit convolutions, paired with spectral_states().
  std::vector<Conv2d<T>*> residual_convs() {
    std::vector<Conv2d<T>*> out;
    for (auto& blk : blocks_)
      for (auto& ru : blk.res) {
        out.push_back(&ru.conv1);
        out.push_back(&ru.conv2);
      }
    return out;
  }

  std::vector<Dense<T>*> dense_layers() {
    std::vector<Dense<T>*> out;
    if (spec_.iqn) out.push_back(&embed_);
    if (spec_.dueling) {
      out.push_back(&value_hidden_);
      out.push_back(&value_out_);
    }
    out.push_back(&adv_hidden_);
    out.push_back(&adv_out_);
    return out;
  }

  void sample_noise(Rng& rng) {
    for (auto* d : dense_layers()) d->sample_noise(rng);
  }
  void zero_noise() {
    for (auto* d : dense_layers()) d->zero_noise();
  }

  void zero_grad() {
    for (auto* p : params()) p->grad.zero();
  }

  /// When disabled, Pass::train no longer refines the spectral vectors.
  void set_spectral_updates(bool on) noexcept { spectral_updates_ = on; }

  /// obs: [B, C, H, W] reals in [0, 1]; taus: [B, N] (N must be 1 without IQN).
  QuantileOutput<T> forward(const Tensor<T>& obs, const Tensor<T>& taus, Pass pass = Pass::inference,
                            ActivationRecorder* recorder = nullptr) {
    check_obs(obs);
    const int B = obs.dim(0);
    if (taus.shape.size() != 2 || taus.dim(0) != B) throw ShapeError("taus must be [batch, N]");
    const int N = taus.dim(1);
    if (!spec_.iqn && N != 1) throw ShapeError("without IQN the head takes exactly one tau per state");
    const bool train = pass == Pass::train;
    Trace fresh;
    Trace& tr = train ? (trace_ = Trace{}) : fresh;
    tr.batch = B;
    tr.num_taus = N;

    Tensor<T> phi = trunk(obs, tr, train, recorder);
    const int D = feature_dim_;
    const int R = B * N;
    Tensor<T> h;
    if (spec_.iqn) {
      tr.cos = cosine_features(taus, spec_.cos_embedding);
      tr.psi = embed_.forward(tr.cos);
      relu_inplace(tr.psi);
      if (recorder) recorder->record_dense("embed", tr.psi);
      h = Tensor<T>({R, D});
      for (int b = 0; b < B; ++b)
        for (int n = 0; n < N; ++n) {
          const std::size_t r = static_cast<std::size_t>(b) * N + n;
          h.mat(R, D).row(static_cast<Eigen::Index>(r)) =
              phi.mat(B, D).row(b).cwiseProduct(tr.psi.mat(R, D).row(static_cast<Eigen::Index>(r)));
        }
    } else {
      h = phi;
    }
    tr.phi = std::move(phi);

    const int A = spec_.num_actions;
    Tensor<T> adv = stream(adv_hidden_, adv_norm_, adv_out_, h, tr.adv, recorder, spec_.dueling ? "adv_hidden" : "hidden");
    Tensor<T> q({R, A});
    if (spec_.dueling) {
      Tensor<T> val = stream(value_hidden_, value_norm_, value_out_, h, tr.val, recorder, "value_hidden");
      for (int r = 0; r < R; ++r) {
        T mean = 0;
        for (int a = 0; a < A; ++a) mean += adv[static_cast<std::size_t>(r) * A + a];
        mean /= static_cast<T>(A);
        for (int a = 0; a < A; ++a)
          q[static_cast<std::size_t>(r) * A + a] = val[static_cast<std::size_t>(r)] + adv[static_cast<std::size_t>(r) * A + a] - mean;
      }
    } else {
      q = std::move(adv);
    }
    tr.h = std::move(h);
    q.reshape({B, N, A});
    return {taus, std::move(q)};
  }

  QuantileOutput<T> forward(std::span<const std::uint8_t> obs, int batch, const Tensor<T>& taus,
                            Pass pass = Pass::inference) {
    return forward(scale_observations<T>(obs, {batch, spec_.channels, spec_.height, spec_.width}), taus, pass);
  }

  /// Flattened trunk output (post-maxpool, before the tau embedding): [B, D].
  Tensor<T> features(const Tensor<T>& obs) {
    check_obs(obs);
    Trace tr;
    tr.batch = obs.dim(0);
    return trunk(obs, tr, false, nullptr);
  }

  /// Backpropagates d(loss)/d(quantiles) [B, N, A] through the last
  /// Pass::train forward, accumulating parameter gradients.
  void backward(const Tensor<T>& dq) {
    Trace& tr = trace_;
    if (tr.batch == 0) throw std::logic_error("backward() without a recorded forward pass");
    const int B = tr.batch, N = tr.num_taus, R = B * N, A = spec_.num_actions, D = feature_dim_;
    if (dq.size() != static_cast<std::size_t>(R) * A) throw ShapeError("backward: gradient shape mismatch");

    Tensor<T> dadv({R, A});
    Tensor<T> dh;
    if (spec_.dueling) {
      Tensor<T> dval({R, 1});
      for (int r = 0; r < R; ++r) {
        T sum = 0;
        for (int a = 0; a < A; ++a) sum += dq[static_cast<std::size_t>(r) * A + a];
        dval[static_cast<std::size_t>(r)] = sum;
        for (int a = 0; a < A; ++a)
          dadv[static_cast<std::size_t>(r) * A + a] = dq[static_cast<std::size_t>(r) * A + a] - sum / static_cast<T>(A);
      }
      dh = stream_backward(value_hidden_, value_norm_, value_out_, tr.h, tr.val, dval);
      dh.vec() += stream_backward(adv_hidden_, adv_norm_, adv_out_, tr.h, tr.adv, dadv).vec();
    } else {
      dadv.data = dq.data;
      dh = stream_backward(adv_hidden_, adv_norm_, adv_out_, tr.h, tr.adv, dadv);
    }

    Tensor<T> dphi({B, D});
    if (spec_.iqn) {
      Tensor<T> dpsi({R, D});
      for (int b = 0; b < B; ++b)
        for (int n = 0; n < N; ++n) {
          const auto r = static_cast<Eigen::Index>(b * N + n);
          dphi.mat(B, D).row(b) += dh.mat(R, D).row(r).cwiseProduct(tr.psi.mat(R, D).row(r));
          dpsi.mat(R, D).row(r) = dh.mat(R, D).row(r).cwiseProduct(tr.phi.mat(B, D).row(b));
        }
      relu_backward_inplace(dpsi, tr.psi);
      embed_.backward(tr.cos, dpsi, false);
    } else {
      dphi = std::move(dh);
    }
    trunk_backward(dphi, tr);
    trace_ = Trace{};
  }

 private:
  struct ConvRecord {
    typename Conv2d<T>::Cache cache;
    MatRM<T> w_eff;  // only for spectrally normalised convs
    T sigma = T(1);
  };
  struct ResidualUnit {
    Conv2d<T> conv1, conv2;
    SpectralState<T> sn1, sn2;
  };
  struct ImpalaBlock {
    Conv2d<T> stem;
    LayerNorm<T> norm;
    std::array<ResidualUnit, 2> res;
  };
  struct ResidualTrace {
    Tensor<T> a1, a2;  // post-ReLU inputs of conv1 / conv2
    ConvRecord c1, c2;
  };
  struct BlockTrace {
    ConvRecord stem;
    typename LayerNorm<T>::Cache norm;
    PoolCache pool;
    std::array<ResidualTrace, 2> res;
  };
  struct StreamTrace {
    Tensor<T> hidden;  // post-ReLU
    typename LayerNorm<T>::Cache norm;
  };
  struct Trace {
    int batch = 0, num_taus = 0;
    std::vector<BlockTrace> blocks;
    std::array<ConvRecord, 3> nature;
    std::array<Tensor<T>, 3> nature_out;  // post-ReLU
    Tensor<T> trunk_out;                  // post final ReLU, pre adaptive pool
    PoolCache adaptive;
    std::array<int, 3> pooled_shape{};    // C, h, w after adaptive pool
    Tensor<T> phi, cos, psi, h;
    StreamTrace adv, val;
  };

  void check_obs(const Tensor<T>& obs) const {
    if (obs.shape.size() != 4 || obs.dim(1) != spec_.channels || obs.dim(2) != spec_.height || obs.dim(3) != spec_.width)
      throw ShapeError("observation shape does not match network spec (" + std::to_string(spec_.channels) + "x" +
                       std::to_string(spec_.height) + "x" + std::to_string(spec_.width) + ")");
  }

  // [B, C, H, W] -> [C, B, H, W]
  static Tensor<T> to_channel_major(const Tensor<T>& x) {
    const int B = x.dim(0), C = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor<T> y({C, B, x.dim(2), x.dim(3)});
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        std::copy_n(x.ptr() + (static_cast<std::size_t>(b) * C + c) * plane, plane,
                    y.ptr() + (static_cast<std::size_t>(c) * B + b) * plane);
    return y;
  }

  Tensor<T> apply_conv(Conv2d<T>& conv, SpectralState<T>* sn, const Tensor<T>& x, ConvRecord& rec, bool train) {
    if (sn) {
      const int rows = conv.out_ch, cols = conv.fan_in();
      if (train && spectral_updates_) power_iteration(conv.weight.value.ptr(), rows, cols, *sn);
      rec.sigma = spectral_sigma(conv.weight.value.ptr(), rows, cols, *sn);
      rec.w_eff = conv.weight.value.mat(rows, cols) / rec.sigma;
      return conv.forward(x, rec.w_eff.data(), rec.cache);
    }
    return conv.forward(x, conv.weight.value.ptr(), rec.cache);
  }

  Tensor<T> conv_backward(Conv2d<T>& conv, SpectralState<T>* sn, const Tensor<T>& dy, ConvRecord& rec, bool need_dx) {
    if (!sn) return conv.backward(dy, conv.weight.value.ptr(), rec.cache, conv.weight.grad.ptr(), need_dx);
    const int rows = conv.out_ch, cols = conv.fan_in();
    MatRM<T> g = MatRM<T>::Zero(rows, cols);
    Tensor<T> dx = conv.backward(dy, rec.w_eff.data(), rec.cache, g.data(), need_dx);
    // d(W/sigma)/dW with sigma = u^T W v and (u, v) held constant
    const T inner = (g.array() * rec.w_eff.array()).sum();
    MatRM<T> uv = CVecMap<T>(sn->u.data(), rows) * CVecMap<T>(sn->v.data(), cols).transpose();
    conv.weight.grad.mat(rows, cols) += (g - inner * uv) / rec.sigma;
    return dx;
  }

  Tensor<T> trunk(const Tensor<T>& obs, Trace& tr, bool train, ActivationRecorder* recorder) {
    Tensor<T> x = to_channel_major(obs);
    if (spec_.impala) {
      tr.blocks.resize(blocks_.size());
      for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
        auto& blk = blocks_[bi];
        auto& bt = tr.blocks[bi];
        x = apply_conv(blk.stem, nullptr, x, bt.stem, train);
        if (spec_.layer_norm) x = blk.norm.forward(x, &bt.norm);
        x = maxpool2d(x, 3, 2, 1, &bt.pool);
        for (int r = 0; r < 2; ++r) {
          auto& ru = blk.res[static_cast<std::size_t>(r)];
          auto& rt = bt.res[static_cast<std::size_t>(r)];
          rt.a1 = x;
          relu_inplace(rt.a1);
          Tensor<T> c = apply_conv(ru.conv1, spec_.spectral_norm ? &ru.sn1 : nullptr, rt.a1, rt.c1, train);
          relu_inplace(c);
          rt.a2 = std::move(c);
          Tensor<T> c2 = apply_conv(ru.conv2, spec_.spectral_norm ? &ru.sn2 : nullptr, rt.a2, rt.c2, train);
          x.vec() += c2.vec();
          if (recorder) {
            const std::string nm = "block" + std::to_string(bi) + ".res" + std::to_string(r);
            recorder->record_conv(nm + ".relu1", rt.a1);
            recorder->record_conv(nm + ".relu2", rt.a2);
          }
        }
      }
      relu_inplace(x);
      if (recorder) recorder->record_conv("trunk.out", x);
    } else {
      for (int i = 0; i < 3; ++i) {
        x = apply_conv(nature_[static_cast<std::size_t>(i)], nullptr, x, tr.nature[static_cast<std::size_t>(i)], train);
        relu_inplace(x);
        if (recorder) recorder->record_conv("trunk.conv" + std::to_string(i), x);
        if (train && i < 2) tr.nature_out[static_cast<std::size_t>(i)] = x;
      }
    }
    if (train) tr.trunk_out = x;
    if (spec_.maxpool) x = adaptive_maxpool2d(x, spec_.maxpool_out, spec_.maxpool_out, train ? &tr.adaptive : nullptr);
    tr.pooled_shape = {x.dim(0), x.dim(2), x.dim(3)};
    // [C, B, h, w] -> [B, C*h*w]
    const int C = x.dim(0), B = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor<T> phi({B, static_cast<int>(C * plane)});
    for (int c = 0; c < C; ++c)
      for (int b = 0; b < B; ++b)
        std::copy_n(x.ptr() + (static_cast<std::size_t>(c) * B + b) * plane, plane,
                    phi.ptr() + static_cast<std::size_t>(b) * C * plane + static_cast<std::size_t>(c) * plane);
    return phi;
  }

  void trunk_backward(const Tensor<T>& dphi, Trace& tr) {
    const int B = tr.batch;
    const auto [C, ph, pw] = tr.pooled_shape;
    const std::size_t plane = static_cast<std::size_t>(ph) * pw;
    Tensor<T> dx({C, B, ph, pw});
    for (int c = 0; c < C; ++c)
      for (int b = 0; b < B; ++b)
        std::copy_n(dphi.ptr() + static_cast<std::size_t>(b) * C * plane + static_cast<std::size_t>(c) * plane, plane,
                    dx.ptr() + (static_cast<std::size_t>(c) * B + b) * plane);
    if (spec_.maxpool) dx = pool_backward(dx, tr.adaptive);
    relu_backward_inplace(dx, tr.trunk_out);
    if (spec_.impala) {
      for (int bi = static_cast<int>(blocks_.size()) - 1; bi >= 0; --bi) {
        auto& blk = blocks_[static_cast<std::size_t>(bi)];
        auto& bt = tr.blocks[static_cast<std::size_t>(bi)];
        for (int r = 1; r >= 0; --r) {
          auto& ru = blk.res[static_cast<std::size_t>(r)];
          auto& rt = bt.res[static_cast<std::size_t>(r)];
          Tensor<T> d = conv_backward(ru.conv2, spec_.spectral_norm ? &ru.sn2 : nullptr, dx, rt.c2, true);
          relu_backward_inplace(d, rt.a2);
          d = conv_backward(ru.conv1, spec_.spectral_norm ? &ru.sn1 : nullptr, d, rt.c1, true);
          relu_backward_inplace(d, rt.a1);
          dx.vec() += d.vec();
        }
        dx = pool_backward(dx, bt.pool);
        if (spec_.layer_norm) dx = blk.norm.backward(dx, bt.norm);
        dx = conv_backward(blk.stem, nullptr, dx, bt.stem, bi > 0);
      }
    } else {
      for (int i = 2; i >= 0; --i) {
        if (i < 2) relu_backward_inplace(dx, tr.nature_out[static_cast<std::size_t>(i)]);
        dx = conv_backward(nature_[static_cast<std::size_t>(i)], nullptr, dx, tr.nature[static_cast<std::size_t>(i)], i > 0);
      }
    }
  }

  Tensor<T> stream(Dense<T>& hidden, LayerNorm<T>& norm, Dense<T>& out, const Tensor<T>& h, StreamTrace& st,
                   ActivationRecorder* recorder, const char* name) {
    Tensor<T> z = hidden.forward(h);
    if (spec_.layer_norm) z = norm.forward(z, &st.norm);
    relu_inplace(z);
    if (recorder) recorder->record_dense(name, z);
    Tensor<T> y = out.forward(z);
    st.hidden = std::move(z);
    return y;
  }

  Tensor<T> stream_backward(Dense<T>& hidden, LayerNorm<T>& norm, Dense<T>& out, const Tensor<T>& h, StreamTrace& st,
                            const Tensor<T>& dy) {
    Tensor<T> dz = out.backward(st.hidden, dy, true);
    relu_backward_inplace(dz, st.hidden);
    if (spec_.layer_norm) dz = norm.backward(dz, st.norm);
    return hidden.backward(h, dz, true);
  }

  NetworkSpec spec_;
  int feature_dim_ = 0;
  std::vector<ImpalaBlock> blocks_;
  std::array<Conv2d<T>, 3> nature_;
  Dense<T> embed_;
  Dense<T> value_hidden_, value_out_, adv_hidden_, adv_out_;
  LayerNorm<T> value_norm_, adv_norm_;
  Trace trace_;
  bool spectral_updates_ = true;
};

/// Row-wise argmax with ties broken toward the lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& q) {
  const int B = q.dim(0), A = q.dim(1);
  std::vector<int> out(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    int best = 0;
    for (int a = 1; a < A; ++a)
      if (q[static_cast<std::size_t>(b) * A + a] > q[static_cast<std::size_t>(b) * A + best]) best = a;
    out[static_cast<std::size_t>(b)] = best;
  }
  return out;
}

}  // namespace btr
