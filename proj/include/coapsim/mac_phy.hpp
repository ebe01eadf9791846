#pragma once

// Single-hop shared channel with unslotted CSMA/CA (IEEE 802.15.4 style),
// MAC acknowledgments, retries and per-radio energy accounting.
//
// Every transmission that overlaps another in time is corrupted (no capture).
// A node's radio is receiving during backoff countdown, CCA, ACK wait and
// while a frame addressed to it is on the air; transmitting while it sends;
// inactive otherwise.

#include <cstdint>
#include <functional>
#include <optional>
#include <unordered_map>
#include <vector>
#include <deque>

#include "coapsim/sim_core.hpp"

namespace coapsim {

using Address = std::uint32_t;
inline constexpr Address kProxyAddress = 0xFFFF'FFFEu;
inline constexpr Address kBroadcast = 0xFFFF'FFFFu;
inline constexpr int kMaxFrameBytes = 127;

struct CsmaParams {
  SimTime backoff_unit = SimTime::micros(320);
  int min_be = 3;
  int max_be = 5;
  int max_csma_backoffs = 4;
  int max_frame_retries = 3;
  std::int64_t data_rate_bps = 250'000;
  // 8 symbols of CCA plus 12 symbols of rx->tx turnaround: one backoff unit.
  SimTime cca_duration = SimTime::micros(128);
  SimTime tx_turnaround = SimTime::micros(192);
  int ack_length_bytes = 11;

  void validate() const {
    if (backoff_unit <= SimTime::zero()) throw InvalidParameter("csma: backoff_unit must be > 0");
    if (data_rate_bps <= 0) throw InvalidParameter("csma: data_rate must be > 0");
    if (min_be < 0 || max_be < 0 || min_be > max_be) throw InvalidParameter("csma: need 0 <= min_be <= max_be");
    if (max_be > 20) throw InvalidParameter("csma: max_be must be <= 20");
    if (max_csma_backoffs < 0 || max_frame_retries < 0) throw InvalidParameter("csma: counts must be >= 0");
    if (cca_duration < SimTime::zero() || tx_turnaround < SimTime::zero())
      throw InvalidParameter("csma: negative cca/turnaround");
    if (ack_length_bytes < 1 || ack_length_bytes > kMaxFrameBytes)
      throw InvalidParameter("csma: ack length out of range");
  }
};

/// On-air time of a frame, rounded up to whole ticks.
inline SimTime frame_airtime(int length_bytes, const CsmaParams& params) {
  if (length_bytes < 1 || length_bytes > kMaxFrameBytes)
    throw InvalidParameter("frame_airtime: length must be in [1, 127], got " + std::to_string(length_bytes));
  const std::int64_t bits_us = std::int64_t{length_bytes} * 8 * 1'000'000;
  return SimTime{(bits_us + params.data_rate_bps - 1) / params.data_rate_bps};
}

template <class Payload>
struct MacFrame {
  Address src = 0;
  Address dst = 0;
  int length_bytes = 1;
  Payload payload{};
  bool requires_ack = true;
  std::uint64_t seq = 0;       // assigned by the sending MAC
  SimTime submitted_at{};

  bool broadcast() const { return dst == kBroadcast; }
};

enum class MacStatus { Delivered, ChannelAccessFailure, RetryExhausted, BroadcastSent };

struct MacOutcome {
  MacStatus status = MacStatus::Delivered;
  int attempts_used = 0;
  SimTime completion_time{};
};

// ---------------------------------------------------------------------------
// Energy

enum class RadioState : std::uint8_t { Inactive = 0, Receiving = 1, Transmitting = 2 };

/// Joules per backoff unit in each radio state (0 dBm transmit).
struct EnergyRates {
  double inactive_j = 18.2e-9;
  double receiving_j = 17.9e-6;
  double transmitting_j = 15.8e-6;
  SimTime unit = SimTime::micros(320);

  double per_unit(RadioState s) const {
    switch (s) {
      case RadioState::Inactive: return inactive_j;
      case RadioState::Receiving: return receiving_j;
      case RadioState::Transmitting: return transmitting_j;
    }
    return 0.0;
  }
};

struct StateChange {
  SimTime at;
  RadioState state;
};

class EnergyMeter {
 public:
  explicit EnergyMeter(EnergyRates rates = {}, SimTime start = SimTime::zero(), bool keep_log = false)
      : rates_(rates), last_(start), keep_log_(keep_log) {
    if (keep_log_) log_.push_back({start, state_});
  }

  RadioState state() const { return state_; }
  const EnergyRates& rates() const { return rates_; }

  void set_state(RadioState s, SimTime at) {
    account(at);
    if (s == state_) return;
    state_ = s;
    if (keep_log_) log_.push_back({at, s});
  }

  /// Accumulated energy including the tail spent in the current state up to `at`.
  double joules_at(SimTime at) const {
    if (at < last_) throw InvalidParameter("energy_report: time precedes last accounted instant");
    std::int64_t ticks[3] = {ticks_[0], ticks_[1], ticks_[2]};
    ticks[static_cast<int>(state_)] += (at - last_).ticks();
    double j = 0.0;
    for (int s = 0; s < 3; ++s)
      j += static_cast<double>(ticks[s]) * rates_.per_unit(static_cast<RadioState>(s));
    return j / static_cast<double>(rates_.unit.ticks());
  }

  std::int64_t ticks_in(RadioState s) const { return ticks_[static_cast<int>(s)]; }
  const std::vector<StateChange>& log() const { return log_; }

 private:
  void account(SimTime at) {
    if (at < last_) throw EngineFault("energy meter: time went backwards");
    ticks_[static_cast<int>(state_)] += (at - last_).ticks();
    last_ = at;
  }

  EnergyRates rates_;
  RadioState state_ = RadioState::Inactive;
  SimTime last_;
  std::int64_t ticks_[3] = {0, 0, 0};
  bool keep_log_;
  std::vector<StateChange> log_;
};

inline double energy_report(const EnergyMeter& meter, SimTime at) { return meter.joules_at(at); }

/// Reference-counted radio holds resolved to a single state; transmit wins.
class Radio {
 public:
  Radio() = default;
  explicit Radio(EnergyMeter meter) : meter_(std::move(meter)) {}

  void begin_rx(SimTime now) { ++rx_; update(now); }
  void end_rx(SimTime now) { --rx_; update(now); }
  void begin_tx(SimTime now) { ++tx_; update(now); }
  void end_tx(SimTime now) { --tx_; update(now); }

  bool transmitting() const { return tx_ > 0; }
  RadioState state() const {
    return tx_ > 0 ? RadioState::Transmitting : rx_ > 0 ? RadioState::Receiving : RadioState::Inactive;
  }
  bool metered() const { return meter_.has_value(); }
  const EnergyMeter& meter() const { return *meter_; }

 private:
  void update(SimTime now) {
    if (meter_) meter_->set_state(state(), now);
  }

  std::optional<EnergyMeter> meter_;
  int rx_ = 0;
  int tx_ = 0;
};

// ---------------------------------------------------------------------------
// Channel and MAC

template <class Payload>
class CsmaMac;

template <class Payload>
class Channel {
 public:
  explicit Channel(Engine& engine) : engine_(engine) {}

  void attach(Address addr, CsmaMac<Payload>* mac) {
    stations_[addr] = mac;
    order_.push_back(addr);
  }

  CsmaMac<Payload>* station(Address addr) const {
    auto it = stations_.find(addr);
    return it == stations_.end() ? nullptr : it->second;
  }

  /// Stations that listen to a frame sent by `src` to `dst`.
  template <class Fn>
  void for_each_receiver(Address src, Address dst, Fn&& fn) const {
    if (dst == kBroadcast) {
      for (Address a : order_)
        if (a != src) fn(*stations_.at(a));
    } else if (auto* m = station(dst)) {
      fn(*m);
    }
  }

  bool busy() const { return !active_.empty(); }

  /// True if nothing was on the air at any point in [since, now].
  bool clear_since(SimTime since) const { return active_.empty() && last_end_ <= since; }

  /// Puts a transmission on the air. `on_end(ok)` fires at its end; ok is
  /// false if anything else overlapped it.
  void transmit(Address src, SimTime airtime, std::function<void(bool)> on_end) {
    const std::uint64_t id = ++next_id_;
    const bool overlap = !active_.empty();
    for (auto& t : active_) t.corrupted = true;
    active_.push_back(Active{id, src, overlap});
    ++transmissions_;
    engine_.schedule_in(airtime, [this, id, cb = std::move(on_end)] {
      bool ok = true;
      for (auto it = active_.begin(); it != active_.end(); ++it) {
        if (it->id == id) {
          ok = !it->corrupted;
          if (!ok) ++collisions_;
          active_.erase(it);
          break;
        }
      }
      last_end_ = engine_.now();
      cb(ok);
    });
  }

  /// Occupies the channel from an external interferer (tests).
  void jam(SimTime duration) { transmit(kBroadcast - 1, duration, [](bool) {}); }

  std::uint64_t transmissions() const { return transmissions_; }
  std::uint64_t corrupted_transmissions() const { return collisions_; }

 private:
  struct Active {
    std::uint64_t id;
    Address src;
    bool corrupted;
  };

  Engine& engine_;
  std::unordered_map<Address, CsmaMac<Payload>*> stations_;
  std::vector<Address> order_;
  std::vector<Active> active_;
  SimTime last_end_ = SimTime{-1};
  std::uint64_t next_id_ = 0;
  std::uint64_t transmissions_ = 0;
  std::uint64_t collisions_ = 0;
};

/// Unslotted CSMA/CA transmitter/receiver for one station. Frames are sent
/// one at a time from a FIFO queue.
template <class Payload>
class CsmaMac {
 public:
  using Frame = MacFrame<Payload>;
  using ReceiveFn = std::function<void(const Frame&)>;
  using CompleteFn = std::function<void(const Frame&, const MacOutcome&)>;
  // (backoff exponent, csma round, attempt) -> backoff units
  using BackoffFn = std::function<std::int64_t(int, int, int)>;

  CsmaMac(Engine& engine, Channel<Payload>& channel, Address self, CsmaParams params, RngStream rng,
          Radio radio = {})
      : engine_(engine), channel_(channel), self_(self), params_(params), rng_(std::move(rng)),
        radio_(std::move(radio)), ack_airtime_(frame_airtime(params.ack_length_bytes, params)) {
    params_.validate();
    channel_.attach(self_, this);
  }

  CsmaMac(const CsmaMac&) = delete;
  CsmaMac& operator=(const CsmaMac&) = delete;

  Address address() const { return self_; }
  const CsmaParams& params() const { return params_; }
  Radio& radio() { return radio_; }
  const Radio& radio() const { return radio_; }
  bool busy() const { return current_.has_value(); }
  std::size_t queue_depth() const { return queue_.size() + (current_ ? 1 : 0); }

  void on_receive(ReceiveFn fn) { receive_ = std::move(fn); }
  void on_complete(CompleteFn fn) { complete_ = std::move(fn); }
  void override_backoff(BackoffFn fn) { backoff_override_ = std::move(fn); }

  void submit(Frame frame) {
    if (frame.length_bytes < 1 || frame.length_bytes > kMaxFrameBytes)
      throw InvalidParameter("mac: frame length out of range");
    frame.src = self_;
    frame.seq = ++next_seq_;
    frame.submitted_at = engine_.now();
    if (frame.broadcast()) frame.requires_ack = false;
    queue_.push_back(std::move(frame));
    if (!current_) start_next();
  }

  // Channel-side entry points.

  void deliver(const Frame& frame) {
    const bool unicast_to_me = frame.dst == self_;
    if (unicast_to_me && frame.requires_ack) send_ack(frame);
    auto [it, fresh] = last_seq_from_.try_emplace(frame.src, frame.seq);
    if (!fresh) {
      if (it->second == frame.seq) {
        ++duplicates_;
        return;
      }
      it->second = frame.seq;
    }
    if (receive_) receive_(frame);
  }

  void ack_received(std::uint64_t seq) {
    if (current_ && current_->frame.seq == seq) current_->acked = true;
  }

  std::uint64_t duplicates_suppressed() const { return duplicates_; }
  std::uint64_t retries() const { return retries_; }

  /// Visits the frame in service (if any) and everything queued behind it.
  template <class Fn>
  void for_each_pending(Fn&& fn) const {
    if (current_) fn(current_->frame);
    for (const auto& f : queue_) fn(f);
  }

 private:
  struct InFlight {
    Frame frame;
    int attempts = 0;
    int nb = 0;
    int be = 0;
    bool acked = false;
  };

  void start_next() {
    if (queue_.empty()) return;
    current_.emplace(InFlight{std::move(queue_.front())});
    queue_.pop_front();
    begin_attempt();
  }

  void begin_attempt() {
    auto& f = *current_;
    ++f.attempts;
    f.nb = 0;
    f.be = params_.min_be;
    f.acked = false;
    radio_.begin_rx(engine_.now());
    backoff();
  }

  void backoff() {
    auto& f = *current_;
    const std::int64_t units = backoff_override_
                                   ? backoff_override_(f.be, f.nb, f.attempts)
                                   : static_cast<std::int64_t>(rng_.uniform_int((std::uint64_t{1} << f.be) - 1));
    const SimTime cca_start = engine_.now() + params_.backoff_unit * units;
    engine_.schedule_at(cca_start + params_.cca_duration, [this, cca_start] { assess_channel(cca_start); });
  }

  void assess_channel(SimTime cca_start) {
    auto& f = *current_;
    if (channel_.clear_since(cca_start)) {
      engine_.schedule_in(params_.tx_turnaround, [this] { transmit(); });
      return;
    }
    ++f.nb;
    f.be = std::min(f.be + 1, params_.max_be);
    if (f.nb > params_.max_csma_backoffs) {
      radio_.end_rx(engine_.now());
      finish(MacStatus::ChannelAccessFailure);
      return;
    }
    backoff();
  }

  void transmit() {
    auto& f = *current_;
    const SimTime now = engine_.now();
    radio_.end_rx(now);
    radio_.begin_tx(now);
    const SimTime airtime = frame_airtime(f.frame.length_bytes, params_);
    channel_.for_each_receiver(self_, f.frame.dst, [&](CsmaMac& rx) { rx.radio_.begin_rx(now); });
    channel_.transmit(self_, airtime, [this](bool ok) { transmit_done(ok); });
  }

  void transmit_done(bool ok) {
    auto& f = *current_;
    const SimTime now = engine_.now();
    radio_.end_tx(now);
    channel_.for_each_receiver(self_, f.frame.dst, [&](CsmaMac& rx) {
      rx.radio_.end_rx(now);
      if (ok) rx.deliver(f.frame);
    });
    if (f.frame.broadcast()) {
      finish(MacStatus::BroadcastSent);
      return;
    }
    radio_.begin_rx(now);
    const SimTime wait = params_.backoff_unit + ack_airtime_ + SimTime{1};
    engine_.schedule_in(wait, [this] { ack_wait_done(); });
  }

  void ack_wait_done() {
    auto& f = *current_;
    radio_.end_rx(engine_.now());
    if (f.acked) {
      finish(MacStatus::Delivered);
    } else if (f.attempts <= params_.max_frame_retries) {
      ++retries_;
      begin_attempt();
    } else {
      finish(MacStatus::RetryExhausted);
    }
  }

  void finish(MacStatus status) {
    InFlight done = std::move(*current_);
    current_.reset();
    const MacOutcome outcome{status, done.attempts, engine_.now()};
    if (complete_) complete_(done.frame, outcome);
    start_next();
  }

  void send_ack(const Frame& frame) {
    const Address to = frame.src;
    const std::uint64_t seq = frame.seq;
    engine_.schedule_in(params_.backoff_unit, [this, to, seq] {
      // Half-duplex: a radio already sending its own frame cannot ACK.
      if (radio_.transmitting()) return;
      const SimTime now = engine_.now();
      radio_.begin_tx(now);
      channel_.transmit(self_, ack_airtime_, [this, to, seq](bool ok) {
        radio_.end_tx(engine_.now());
        if (!ok) return;
        if (auto* m = channel_.station(to)) m->ack_received(seq);
      });
    });
  }

  Engine& engine_;
  Channel<Payload>& channel_;
  Address self_;
  CsmaParams params_;
  RngStream rng_;
  Radio radio_;
  SimTime ack_airtime_;
  std::deque<Frame> queue_;
  std::optional<InFlight> current_;
  std::uint64_t next_seq_ = 0;
  std::uint64_t retries_ = 0;
  std::uint64_t duplicates_ = 0;
  std::unordered_map<Address, std::uint64_t> last_seq_from_;
  ReceiveFn receive_;
  CompleteFn complete_;
  BackoffFn backoff_override_;
};

}  // namespace coapsim
