#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// Prioritized n-step replay. Transitions are matured per environment by an
// NStepAccumulator and stored in a ring; sampling is proportional to p^alpha
// through a sum tree. Observation stacks are refcounted so a stack that is
// both the next_state of one transition and the state of another is held once.

namespace btr {

class ReplayError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary tree of partial sums over a power-of-two number of leaves.
class SumTree {
 public:
  explicit SumTree(std::size_t min_leaves) {
    leaves_ = 1;
    while (leaves_ < min_leaves) leaves_ <<= 1;
    nodes_.assign(2 * leaves_, 0.0);
  }

  std::size_t leaves() const noexcept { return leaves_; }
  double total() const noexcept { return nodes_[1]; }
  double leaf(std::size_t i) const { return nodes_.at(leaves_ + i); }
  double node(std::size_t i) const { return nodes_.at(i); }

  void set(std::size_t i, double value) {
    if (i >= leaves_) throw std::out_of_range("SumTree::set index");
    if (!(value >= 0.0)) throw std::invalid_argument("SumTree priorities must be non-negative");
    std::size_t n = leaves_ + i;
    nodes_[n] = value;
    // recompute from children so repeated updates never drift
    for (n >>= 1; n >= 1; n >>= 1) nodes_[n] = nodes_[2 * n] + nodes_[2 * n + 1];
  }

  /// Leaf whose cumulative interval contains `mass`. Never returns a leaf
  /// with zero priority unless the whole tree is empty.
  std::size_t find(double mass) const {
    std::size_t n = 1;
    while (n < leaves_) {
      const double left = nodes_[2 * n];
      const double right = nodes_[2 * n + 1];
      if ((mass < left && left > 0.0) || right <= 0.0) {
        n = 2 * n;
      } else {
        mass -= left;
        n = 2 * n + 1;
      }
    }
    return n - leaves_;
  }

 private:
  std::size_t leaves_ = 1;
  std::vector<double> nodes_;
};

/// One matured n-step transition in terms of an observation handle type.
template <typename Obs>
struct NStepItem {
  Obs state{};
  int action = 0;
  double return_n = 0.0;
  Obs next_state{};
  bool terminal = false;
  int horizon = 1;
};

/// Per-environment windows of pending steps that mature into n-step items.
template <typename Obs>
class NStepAccumulator {
 public:
  struct Pending {
    Obs state;
    int action;
    double reward;
  };

  NStepAccumulator(int num_envs, int n, double gamma)
      : n_(n), gamma_(gamma), pending_(static_cast<std::size_t>(num_envs)) {
    if (n < 1) throw std::invalid_argument("n_step must be >= 1");
  }

  int n() const noexcept { return n_; }
  int num_envs() const noexcept { return static_cast<int>(pending_.size()); }
  const std::deque<Pending>& pending(int env) const { return pending_.at(static_cast<std::size_t>(env)); }

  /// Records s_t, a_t, r_t for `env`; `next` is s_{t+1} (the final
  /// observation when the episode ended). Returns items oldest first.
  std::vector<NStepItem<Obs>> push(int env, Obs state, int action, double reward, Obs next, bool terminal,
                                   bool truncated) {
    if (env < 0 || env >= num_envs()) throw std::out_of_range("env id " + std::to_string(env));
    auto& q = pending_[static_cast<std::size_t>(env)];
    q.push_back({std::move(state), action, reward});
    std::vector<NStepItem<Obs>> out;
    if (terminal || truncated) {
      while (!q.empty()) {
        out.push_back(make_item(q, next, terminal));
        q.pop_front();
      }
    } else if (static_cast<int>(q.size()) == n_) {
      out.push_back(make_item(q, next, false));
      q.pop_front();
    }
    return out;
  }

  /// Drops every pending step (used when environments are reset externally).
  std::vector<Pending> clear() {
    std::vector<Pending> dropped;
    for (auto& q : pending_) {
      for (auto& p : q) dropped.push_back(std::move(p));
      q.clear();
    }
    return dropped;
  }

 private:
  NStepItem<Obs> make_item(const std::deque<Pending>& q, const Obs& next, bool terminal) const {
    NStepItem<Obs> it;
    it.state = q.front().state;
    it.action = q.front().action;
    double g = 1.0;
    for (const auto& p : q) {
      it.return_n += g * p.reward;
      g *= gamma_;
    }
    it.next_state = next;
    it.terminal = terminal;
    it.horizon = static_cast<int>(q.size());
    return it;
  }

  int n_;
  double gamma_;
  std::vector<std::deque<Pending>> pending_;
};

/// Refcounted fixed-size byte records allocated in chunks.
class ObsPool {
 public:
  using Handle = std::uint32_t;
  static constexpr Handle kNone = 0xFFFFFFFFu;

  explicit ObsPool(std::size_t record_bytes) : bytes_(record_bytes) {}

  std::size_t record_bytes() const noexcept { return bytes_; }
  std::size_t live() const noexcept { return refs_.size() - free_.size(); }

  Handle store(std::span<const std::uint8_t> obs) {
    if (obs.size() != bytes_) throw std::invalid_argument("observation size mismatch");
    Handle h;
    if (!free_.empty()) {
      h = free_.back();
      free_.pop_back();
    } else {
      h = static_cast<Handle>(refs_.size());
      refs_.push_back(0);
      if (refs_.size() > chunks_.size() * kChunk) chunks_.push_back(std::make_unique<std::uint8_t[]>(kChunk * bytes_));
    }
    std::memcpy(data(h), obs.data(), bytes_);
    refs_[h] = 1;
    return h;
  }

  void retain(Handle h) { ++refs_.at(h); }
  void release(Handle h) {
    if (h == kNone) return;
    if (--refs_.at(h) == 0) free_.push_back(h);
  }
  std::uint8_t* data(Handle h) { return chunks_[h / kChunk].get() + (h % kChunk) * bytes_; }
  const std::uint8_t* data(Handle h) const { return chunks_[h / kChunk].get() + (h % kChunk) * bytes_; }
  std::span<const std::uint8_t> view(Handle h) const { return {data(h), bytes_}; }

 private:
  static constexpr std::size_t kChunk = 1024;
  std::size_t bytes_;
  std::vector<std::unique_ptr<std::uint8_t[]>> chunks_;
  std::vector<std::uint32_t> refs_;
  std::vector<Handle> free_;
};

struct ReplayOptions {
  std::size_t capacity = 1 << 20;
  std::size_t obs_bytes = 0;
  int num_envs = 1;
  int n_step = 3;
  double gamma = 0.997;
  double alpha = 0.2;
  double priority_epsilon = 1e-6;
  std::size_t min_size = 1;
};

/// A sampled minibatch. `ids` are global insertion ids used to detect
/// slots overwritten between sample and update.
struct ReplayBatch {
  std::vector<std::uint64_t> ids;
  std::vector<std::uint8_t> states;       // [B, obs_bytes]
  std::vector<std::uint8_t> next_states;  // [B, obs_bytes]
  std::vector<int> actions;
  std::vector<double> returns;
  std::vector<std::uint8_t> terminals;
  std::vector<int> horizons;
  std::vector<double> probabilities;
  std::vector<double> is_weights;
  std::size_t size() const noexcept { return ids.size(); }
};

class PrioritizedReplay {
 public:
  using Handle = ObsPool::Handle;

  explicit PrioritizedReplay(const ReplayOptions& opt)
      : opt_(opt),
        tree_(opt.capacity),
        raw_(opt.capacity, 0.0),
        slots_(opt.capacity),
        pool_(opt.obs_bytes),
        acc_(opt.num_envs, opt.n_step, opt.gamma),
        last_next_(static_cast<std::size_t>(opt.num_envs), ObsPool::kNone) {
    if (opt.capacity == 0) throw std::invalid_argument("replay capacity must be positive");
    if (opt.alpha < 0) throw std::invalid_argument("per_alpha must be >= 0");
  }

  PrioritizedReplay(const PrioritizedReplay&) = delete;
  PrioritizedReplay& operator=(const PrioritizedReplay&) = delete;

  ~PrioritizedReplay() = default;

  std::size_t size() const noexcept { return count_; }
  std::size_t capacity() const noexcept { return opt_.capacity; }
  std::uint64_t inserted() const noexcept { return inserted_; }
  double max_priority() const noexcept { return max_priority_; }
  const SumTree& tree() const noexcept { return tree_; }
  const ReplayOptions& options() const noexcept { return opt_; }
  double priority(std::size_t slot) const { return raw_.at(slot); }
  std::size_t live_observations() const noexcept { return pool_.live(); }
  std::uint64_t stale_updates() const noexcept { return stale_updates_; }

  /// Adds one environment step. `next` is the observation after the action
  /// (the final one if the episode ended). Returns the number of matured
  /// transitions written.
  std::size_t push(int env, std::span<const std::uint8_t> state, int action, double reward,
                   std::span<const std::uint8_t> next, bool terminal, bool truncated) {
    if (env < 0 || env >= opt_.num_envs) throw std::out_of_range("env id " + std::to_string(env));
    auto& cached = last_next_[static_cast<std::size_t>(env)];
    Handle s;
    if (cached != ObsPool::kNone && state.size() == opt_.obs_bytes &&
        std::memcmp(pool_.data(cached), state.data(), opt_.obs_bytes) == 0) {
      s = cached;
      pool_.retain(s);
    } else {
      s = pool_.store(state);
    }
    const Handle nx = pool_.store(next);
    pool_.release(cached);
    cached = nx;
    pool_.retain(nx);  // held by the cache; the local reference below goes to items

    auto items = acc_.push(env, s, action, reward, nx, terminal, truncated);
    for (auto& it : items) {
      pool_.retain(it.next_state);
      write(it);
    }
    pool_.release(nx);
    if (terminal || truncated) {
      pool_.release(cached);
      cached = ObsPool::kNone;
    }
    return items.size();
  }

  /// Stratified proportional sampling with importance weights.
  ReplayBatch sample(std::size_t batch, double beta, std::mt19937_64& rng) const {
    if (count_ < opt_.min_size || count_ == 0)
      throw ReplayError("replay holds " + std::to_string(count_) + " transitions, need " +
                        std::to_string(std::max<std::size_t>(opt_.min_size, 1)));
    ReplayBatch b;
    const std::size_t ob = opt_.obs_bytes;
    b.ids.resize(batch);
    b.states.resize(batch * ob);
    b.next_states.resize(batch * ob);
    b.actions.resize(batch);
    b.returns.resize(batch);
    b.terminals.resize(batch);
    b.horizons.resize(batch);
    b.probabilities.resize(batch);
    b.is_weights.resize(batch);
    const double total = tree_.total();
    const double seg = total / static_cast<double>(batch);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    double wmax = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
      const double mass = std::min((static_cast<double>(i) + unif(rng)) * seg, std::nextafter(total, 0.0));
      std::size_t slot = tree_.find(mass);
      if (slot >= count_) slot = count_ - 1;
      const Slot& sl = slots_[slot];
      b.ids[i] = sl.id;
      std::memcpy(b.states.data() + i * ob, pool_.data(sl.state), ob);
      std::memcpy(b.next_states.data() + i * ob, pool_.data(sl.next), ob);
      b.actions[i] = sl.action;
      b.returns[i] = sl.return_n;
      b.terminals[i] = sl.terminal ? 1 : 0;
      b.horizons[i] = sl.horizon;
      const double p = tree_.leaf(slot) / total;
      b.probabilities[i] = p;
      b.is_weights[i] = std::pow(static_cast<double>(count_) * p, -beta);
      wmax = std::max(wmax, b.is_weights[i]);
    }
    for (auto& w : b.is_weights) w /= wmax;
    return b;
  }

  /// Sets priority |td| + epsilon for each id that still refers to a live slot.
  void update_priorities(std::span<const std::uint64_t> ids, std::span<const double> td) {
    if (ids.size() != td.size()) throw std::invalid_argument("ids/td length mismatch");
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!live(ids[i])) {
        ++stale_updates_;
        continue;
      }
      set_priority(static_cast<std::size_t>(ids[i] % opt_.capacity), std::abs(td[i]) + opt_.priority_epsilon);
    }
  }

  bool live(std::uint64_t id) const noexcept { return id < inserted_ && inserted_ - id <= opt_.capacity; }
  std::size_t slot_of(std::uint64_t id) const noexcept { return static_cast<std::size_t>(id % opt_.capacity); }

  /// Stored transition at a ring slot, for inspection and tests.
  NStepItem<std::vector<std::uint8_t>> at(std::size_t slot) const {
    if (slot >= count_) throw std::out_of_range("replay slot");
    const Slot& s = slots_[slot];
    NStepItem<std::vector<std::uint8_t>> it;
    auto sv = pool_.view(s.state);
    auto nv = pool_.view(s.next);
    it.state.assign(sv.begin(), sv.end());
    it.next_state.assign(nv.begin(), nv.end());
    it.action = s.action;
    it.return_n = s.return_n;
    it.terminal = s.terminal;
    it.horizon = s.horizon;
    return it;
  }
  std::uint64_t id_at(std::size_t slot) const { return slots_.at(slot).id; }

 private:
  struct Slot {
    Handle state = ObsPool::kNone;
    Handle next = ObsPool::kNone;
    int action = 0;
    double return_n = 0.0;
    bool terminal = false;
    int horizon = 1;
    std::uint64_t id = 0;
  };

  void set_priority(std::size_t slot, double p) {
    raw_[slot] = p;
    tree_.set(slot, std::pow(p, opt_.alpha));
    max_priority_ = std::max(max_priority_, p);
  }

  void write(const NStepItem<Handle>& it) {
    const std::size_t slot = static_cast<std::size_t>(inserted_ % opt_.capacity);
    Slot& s = slots_[slot];
    if (inserted_ >= opt_.capacity) {
      pool_.release(s.state);
      pool_.release(s.next);
    }
    s.state = it.state;
    s.next = it.next_state;
    s.action = it.action;
    s.return_n = it.return_n;
    s.terminal = it.terminal;
    s.horizon = it.horizon;
    s.id = inserted_;
    set_priority(slot, count_ == 0 ? 1.0 : max_priority_);
    ++inserted_;
    count_ = std::min<std::size_t>(count_ + 1, opt_.capacity);
  }

  ReplayOptions opt_;
  SumTree tree_;
  std::vector<double> raw_;
  std::vector<Slot> slots_;
  ObsPool pool_;
  NStepAccumulator<Handle> acc_;
  std::vector<Handle> last_next_;
  std::size_t count_ = 0;
  std::uint64_t inserted_ = 0;
  std::uint64_t stale_updates_ = 0;
  double max_priority_ = 1.0;
};

/// Linear importance-sampling exponent anneal over the run.
inline double per_beta_at(std::int64_t frame, std::int64_t total_frames, double start, double end) {
  if (total_frames <= 0) return end;
  const double f = std::clamp(static_cast<double>(frame) / static_cast<double>(total_frames), 0.0, 1.0);
  return start + (end - start) * f;
}

}  // namespace btr
