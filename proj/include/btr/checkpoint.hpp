#pragma once

#include "btr/config.hpp"
#include "btr/learner.hpp"
#include "btr/network.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

// Versioned binary checkpoints. Layout (little-endian):
//   "BTRCKPT\0" u32 version
//   str config_text, i32 num_actions, i64 counters[6], str rng_state, u64 adam_steps
//   u64 n_arrays, then per array: str name, u32 ndim, i64 dims[ndim],
//   f32 data[prod(dims)], u64 fnv1a(data bytes)
// str = u64 length + bytes. The replay buffer is not stored; a resumed run
// refills it from empty before learning again.

namespace btr {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainCounters {
  std::int64_t frames = 0;
  std::int64_t env_steps = 0;  // vector steps (one decision per env)
  std::int64_t grad_steps = 0;
  std::int64_t since_sync = 0;
  std::int64_t episodes = 0;
  std::int64_t transitions = 0;  // matured transitions written to replay

  bool operator==(const TrainCounters&) const = default;
};

namespace ckpt_detail {

inline constexpr char kMagic[8] = {'B', 'T', 'R', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kVersion = 1;

inline std::uint64_t fnv1a(const void* data, std::size_t n) {
  std::uint64_t h = 1469598103934665603ull;
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

class Writer {
 public:
  template <typename T>
  void pod(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint64_t>(s.size()));
    buf_.append(s);
  }
  void array(const std::string& name, const std::vector<int>& shape, const float* data, std::size_t n) {
    str(name);
    pod(static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) pod(static_cast<std::int64_t>(d));
    buf_.append(reinterpret_cast<const char*>(data), n * sizeof(float));
    pod(fnv1a(data, n * sizeof(float)));
  }
  void raw(const char* p, std::size_t n) { buf_.append(p, n); }
  const std::string& bytes() const noexcept { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string bytes) : buf_(std::move(bytes)) {}

  template <typename T>
  T pod(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(const char* what) {
    const auto n = pod<std::uint64_t>(what);
    need(n, what);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n, const std::string& what) const {
    if (buf_.size() - pos_ < n) throw CheckpointError("checkpoint truncated while reading " + what);
  }
  const char* cursor() const { return buf_.data() + pos_; }
  void skip(std::size_t n) { pos_ += n; }
  bool done() const { return pos_ == buf_.size(); }

 private:
  std::string buf_;
  std::size_t pos_ = 0;
};

struct ArrayData {
  std::vector<int> shape;
  std::vector<float> data;
};

}  // namespace ckpt_detail

/// Serialises learner state; the result is a pure function of its inputs.
inline std::string checkpoint_bytes(const AgentConfig& cfg, int num_actions, const TrainCounters& c,
                                    const Learner& learner) {
  using namespace ckpt_detail;
  Writer w;
  w.raw(kMagic, sizeof(kMagic));
  w.pod(kVersion);
  w.str(serialize_config(cfg));
  w.pod(static_cast<std::int32_t>(num_actions));
  for (std::int64_t v : {c.frames, c.env_steps, c.grad_steps, c.since_sync, c.episodes, c.transitions}) w.pod(v);
  std::ostringstream rng;
  rng << learner.rng();
  w.str(rng.str());
  const auto& adam = learner.optimizer();
  w.pod(static_cast<std::uint64_t>(adam.steps));

  const std::pair<std::string, const Network<float>*> nets[] = {{"online/", &learner.online()},
                                                                {"target/", &learner.target()}};
  std::uint64_t count = 0;
  Writer body;
  for (const auto& [prefix, net] : nets) {
    const auto& n = *net;
    for (const auto* p : n.params()) {
      body.array(prefix + p->name, p->value.shape, p->value.ptr(), p->value.size());
      ++count;
    }
    const auto states = n.spectral_states();
    for (std::size_t i = 0; i < states.size(); ++i) {
      const auto& s = *states[i];
      body.array(prefix + "sn" + std::to_string(i) + "/u", {static_cast<int>(s.u.size())}, s.u.data(), s.u.size());
      body.array(prefix + "sn" + std::to_string(i) + "/v", {static_cast<int>(s.v.size())}, s.v.data(), s.v.size());
      count += 2;
    }
  }
  const auto params = learner.online().params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = *params[k];
    const std::vector<float> zeros(adam.m.empty() ? p.value.size() : 0, 0.0f);
    const float* m = adam.m.empty() ? zeros.data() : adam.m[k].data();
    const float* v = adam.v.empty() ? zeros.data() : adam.v[k].data();
    body.array("adam/m/" + p.name, p.value.shape, m, p.value.size());
    body.array("adam/v/" + p.name, p.value.shape, v, p.value.size());
    count += 2;
  }
  w.pod(count);
  w.raw(body.bytes().data(), body.bytes().size());
  return w.bytes();
}

inline void save_checkpoint(const std::string& path, const AgentConfig& cfg, int num_actions, const TrainCounters& c,
                            const Learner& learner) {
  const std::string bytes = checkpoint_bytes(cfg, num_actions, c, learner);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for checkpoint '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("cannot move checkpoint into '" + path + "'");
}

struct LoadedCheckpoint {
  AgentConfig cfg;
  int num_actions = 0;
  TrainCounters counters;
  std::unique_ptr<Learner> learner;
};

inline LoadedCheckpoint parse_checkpoint(std::string bytes) {
  using namespace ckpt_detail;
  Reader r(std::move(bytes));
  r.need(sizeof(kMagic), "header");
  if (std::memcmp(r.cursor(), kMagic, sizeof(kMagic)) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  r.skip(sizeof(kMagic));
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  LoadedCheckpoint out;
  try {
    out.cfg = parse_config(r.str("config"));
    validate(out.cfg);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }
  out.num_actions = r.pod<std::int32_t>("num_actions");
  if (out.num_actions < 1) throw CheckpointError("checkpoint num_actions invalid");
  auto& c = out.counters;
  for (std::int64_t* v : {&c.frames, &c.env_steps, &c.grad_steps, &c.since_sync, &c.episodes, &c.transitions})
    *v = r.pod<std::int64_t>("counters");
  const std::string rng_state = r.str("rng state");
  const auto adam_steps = r.pod<std::uint64_t>("adam steps");
  const auto count = r.pod<std::uint64_t>("array count");

  std::map<std::string, ArrayData> arrays;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.str("array name");
    const auto ndim = r.pod<std::uint32_t>(name.c_str());
    if (ndim > 8) throw CheckpointError("array '" + name + "': implausible rank " + std::to_string(ndim));
    ArrayData a;
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const auto dim = r.pod<std::int64_t>(name.c_str());
      if (dim < 0 || dim > (1 << 28)) throw CheckpointError("array '" + name + "': implausible dimension");
      a.shape.push_back(static_cast<int>(dim));
      n *= static_cast<std::size_t>(dim);
    }
    r.need(n * sizeof(float) + sizeof(std::uint64_t), "array '" + name + "'");
    a.data.resize(n);
    std::memcpy(a.data.data(), r.cursor(), n * sizeof(float));
    r.skip(n * sizeof(float));
    const auto sum = r.pod<std::uint64_t>(name.c_str());
    if (sum != fnv1a(a.data.data(), n * sizeof(float))) throw CheckpointError("array '" + name + "': checksum mismatch");
    if (!arrays.emplace(name, std::move(a)).second) throw CheckpointError("array '" + name + "' appears twice");
  }
  if (!r.done()) throw CheckpointError("trailing bytes after the last array");

  const NetworkSpec spec = network_spec(out.cfg, out.num_actions);
  out.learner = std::make_unique<Learner>(out.cfg, spec, static_cast<std::uint64_t>(out.cfg.master_seed));
  std::size_t used = 0;
  auto take = [&](const std::string& name, const std::vector<int>& shape, float* dst, std::size_t n) {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw CheckpointError("array '" + name + "' missing");
    if (it->second.shape != shape || it->second.data.size() != n)
      throw CheckpointError("array '" + name + "' has the wrong shape for this network");
    std::copy(it->second.data.begin(), it->second.data.end(), dst);
    ++used;
  };
  Learner& l = *out.learner;
  for (auto [prefix, net] : {std::pair<std::string, Network<float>*>{"online/", &l.online()}, {"target/", &l.target()}}) {
    for (auto* p : net->params()) take(prefix + p->name, p->value.shape, p->value.ptr(), p->value.size());
    const auto states = net->spectral_states();
    for (std::size_t i = 0; i < states.size(); ++i) {
      auto& s = *states[i];
      take(prefix + "sn" + std::to_string(i) + "/u", {static_cast<int>(s.u.size())}, s.u.data(), s.u.size());
      take(prefix + "sn" + std::to_string(i) + "/v", {static_cast<int>(s.v.size())}, s.v.data(), s.v.size());
    }
  }
  auto& adam = l.optimizer();
  const auto params = l.online().params();
  adam.m.assign(params.size(), {});
  adam.v.assign(params.size(), {});
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = *params[k];
    adam.m[k].resize(p.value.size());
    adam.v[k].resize(p.value.size());
    take("adam/m/" + p.name, p.value.shape, adam.m[k].data(), p.value.size());
    take("adam/v/" + p.name, p.value.shape, adam.v[k].data(), p.value.size());
  }
  adam.steps = static_cast<std::int64_t>(adam_steps);
  if (used != arrays.size()) {
    for (const auto& [name, a] : arrays) {
      (void)a;
      bool known = false;
      for (auto* p : params)
        if (name.ends_with(p->name)) known = true;
      if (!known && name.find("/sn") == std::string::npos) throw CheckpointError("unexpected array '" + name + "'");
    }
    throw CheckpointError("checkpoint holds arrays this network does not use");
  }
  std::istringstream rs(rng_state);
  rs >> l.rng();
  if (!rs) throw CheckpointError("checkpoint rng state unreadable");
  l.set_counters(c.grad_steps, c.since_sync);
  return out;
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace btr
