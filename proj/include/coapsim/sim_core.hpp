#pragma once

// Deterministic discrete-event engine and seeded random streams.
//
// Time is an integer tick count (1 tick = 1 us). Events fire in
// non-decreasing time order, ties broken by insertion sequence.
//
// Random draws come from per-component streams. A stream's seed is
// splitmix64(master_seed ^ splitmix64(stream_id)) feeding a std::mt19937_64,
// whose output sequence is fixed by the C++ standard. No std::*_distribution
// is used, so draws are identical across standard libraries:
//
//   u          = (next() >> 11) * 2^-53                    in [0, 1)
//   exponential = llround(-mean_ticks * log1p(-u))
//   uniform{0..m} = rejection sampling on the raw 64-bit output
//   truncated geometric on {0..m}, q = 1 - p:
//                k = floor(log1p(-u * (1 - q^(m+1))) / log1p(-p))

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace coapsim {

struct InvalidParameter : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Programming error inside a run (e.g. scheduling into the past).
struct EngineFault : std::logic_error {
  using std::logic_error::logic_error;
};

/// A point in simulated time or a duration, in microsecond ticks.
class SimTime {
 public:
  constexpr SimTime() = default;
  constexpr explicit SimTime(std::int64_t ticks) : ticks_(ticks) {}

  static constexpr SimTime zero() { return SimTime{0}; }
  static constexpr SimTime max() { return SimTime{std::numeric_limits<std::int64_t>::max()}; }
  static constexpr SimTime micros(std::int64_t us) { return SimTime{us}; }
  static constexpr SimTime millis(std::int64_t ms) { return SimTime{ms * 1000}; }
  static constexpr SimTime whole_seconds(std::int64_t s) { return SimTime{s * 1'000'000}; }
  static SimTime seconds(double s) { return SimTime{std::llround(s * 1e6)}; }

  constexpr std::int64_t ticks() const { return ticks_; }
  constexpr double to_seconds() const { return static_cast<double>(ticks_) * 1e-6; }

  constexpr auto operator<=>(const SimTime&) const = default;

  constexpr SimTime& operator+=(SimTime o) { ticks_ += o.ticks_; return *this; }
  constexpr SimTime& operator-=(SimTime o) { ticks_ -= o.ticks_; return *this; }
  friend constexpr SimTime operator+(SimTime a, SimTime b) { return SimTime{a.ticks_ + b.ticks_}; }
  friend constexpr SimTime operator-(SimTime a, SimTime b) { return SimTime{a.ticks_ - b.ticks_}; }
  friend constexpr SimTime operator*(SimTime a, std::int64_t k) { return SimTime{a.ticks_ * k}; }
  friend constexpr SimTime operator*(std::int64_t k, SimTime a) { return SimTime{a.ticks_ * k}; }

 private:
  std::int64_t ticks_ = 0;
};

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Identifies an independent random stream: a component kind plus an index.
struct StreamId {
  std::uint32_t kind = 0;
  std::uint32_t index = 0;
  constexpr std::uint64_t packed() const { return (std::uint64_t{kind} << 32) | index; }
};

namespace streams {
inline constexpr std::uint32_t kNodeVariable = 1;
inline constexpr std::uint32_t kNodeMac = 2;
inline constexpr std::uint32_t kNodeLeisure = 3;
inline constexpr std::uint32_t kNodeRetx = 4;
inline constexpr std::uint32_t kProxyMac = 10;
inline constexpr std::uint32_t kProxyUplinkStage = 11;
inline constexpr std::uint32_t kProxyDownlinkStage = 12;
inline constexpr std::uint32_t kProxyMisc = 13;
inline constexpr std::uint32_t kTest = 100;
}  // namespace streams

class RngStream {
 public:
  RngStream(std::uint64_t master_seed, StreamId id)
      : id_(id), seed_(splitmix64(master_seed ^ splitmix64(id.packed()))), gen_(seed_) {}

  StreamId id() const { return id_; }
  std::uint64_t seed() const { return seed_; }

  std::uint64_t next() { return gen_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform integer on {0, ..., max}.
  std::uint64_t uniform_int(std::uint64_t max) {
    if (max == std::numeric_limits<std::uint64_t>::max()) return next();
    const std::uint64_t range = max + 1;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % range;
    std::uint64_t x;
    do {
      x = next();
    } while (x >= limit);
    return x % range;
  }

 private:
  StreamId id_;
  std::uint64_t seed_;
  std::mt19937_64 gen_;
};

inline SimTime sample_exponential(RngStream& rng, SimTime mean) {
  if (mean <= SimTime::zero()) throw InvalidParameter("sample_exponential: mean must be > 0");
  const double u = rng.unit();
  const double x = -static_cast<double>(mean.ticks()) * std::log1p(-u);
  return SimTime{std::llround(x)};
}

/// Uniform on {0, ..., max_slots}; max_slots = 0 yields 0.
inline std::int64_t sample_uniform_slots(RngStream& rng, std::int64_t max_slots) {
  if (max_slots <= 0) return 0;
  return static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(max_slots)));
}

/// Geometric(p) on {0, 1, ...} conditioned on the value being <= max_slots.
inline std::int64_t sample_truncated_geometric(RngStream& rng, double p, std::int64_t max_slots) {
  if (!(p > 0.0 && p < 1.0)) throw InvalidParameter("sample_truncated_geometric: p must be in (0,1)");
  if (max_slots <= 0) return 0;
  const double log_q = std::log1p(-p);
  // 1 - q^(m+1)
  const double mass = -std::expm1(static_cast<double>(max_slots + 1) * log_q);
  const double u = rng.unit();
  const double k = std::floor(std::log1p(-u * mass) / log_q);
  if (!(k >= 0.0)) return 0;
  return std::min<std::int64_t>(static_cast<std::int64_t>(k), max_slots);
}

/// Opaque cancellation handle returned by Engine::schedule.
struct EventHandle {
  std::uint64_t seq = 0;
  bool valid() const { return seq != 0; }
};

struct SimEvent {
  SimTime fire_at;
  std::uint64_t seq = 0;
  std::function<void()> action;
};

class Engine {
 public:
  explicit Engine(std::uint64_t master_seed = 0) : master_seed_(master_seed) {}

  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  SimTime now() const { return now_; }
  std::uint64_t master_seed() const { return master_seed_; }
  RngStream stream(StreamId id) const { return RngStream{master_seed_, id}; }

  EventHandle schedule_at(SimTime at, std::function<void()> action) {
    if (at < now_) {
      throw EngineFault("schedule_at: event time " + std::to_string(at.ticks()) +
                        " precedes now " + std::to_string(now_.ticks()));
    }
    const std::uint64_t seq = ++next_seq_;
    heap_.push_back(SimEvent{at, seq, std::move(action)});
    std::push_heap(heap_.begin(), heap_.end(), Later{});
    return EventHandle{seq};
  }

  EventHandle schedule_in(SimTime delay, std::function<void()> action) {
    return schedule_at(now_ + delay, std::move(action));
  }

  void cancel(EventHandle h) {
    if (h.valid()) cancelled_.insert(h.seq);
  }

  /// Processes every event with fire_at <= t_end, then sets now = t_end.
  std::uint64_t run_until(SimTime t_end) {
    std::uint64_t processed = 0;
    while (!heap_.empty() && heap_.front().fire_at <= t_end) {
      std::pop_heap(heap_.begin(), heap_.end(), Later{});
      SimEvent ev = std::move(heap_.back());
      heap_.pop_back();
      if (auto it = cancelled_.find(ev.seq); it != cancelled_.end()) {
        cancelled_.erase(it);
        continue;
      }
      now_ = ev.fire_at;
      if (trace_) trace_(ev);
      ev.action();
      ++processed;
    }
    if (t_end > now_) now_ = t_end;
    return processed;
  }

  /// Called with each event just before it fires.
  void set_trace(std::function<void(const SimEvent&)> trace) { trace_ = std::move(trace); }

 private:
  struct Later {
    bool operator()(const SimEvent& a, const SimEvent& b) const {
      if (a.fire_at != b.fire_at) return a.fire_at > b.fire_at;
      return a.seq > b.seq;
    }
  };

  std::uint64_t master_seed_;
  SimTime now_{};
  std::uint64_t next_seq_ = 0;
  std::vector<SimEvent> heap_;
  std::unordered_set<std::uint64_t> cancelled_;
  std::function<void(const SimEvent&)> trace_;
};

}  // namespace coapsim
