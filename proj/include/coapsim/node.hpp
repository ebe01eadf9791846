#pragma once

// One constrained CoAP server: a physical variable with exponential
// lifetimes and the scheme-specific transmit logic around it.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <unordered_map>

#include "coapsim/coap.hpp"
#include "coapsim/mac_phy.hpp"
#include "coapsim/metrics.hpp"
#include "coapsim/packet.hpp"
#include "coapsim/sim_core.hpp"

namespace coapsim {

struct PhysicalVariable {
  std::uint32_t resource = 0;
  std::uint64_t version = 0;  // value tag; bumps at each generation instant
  SimTime changed_at{};
  SimTime next_change_at{};
};

// ---------------------------------------------------------------------------
// Leisure

enum class LeisureDistribution { Uniform, TruncatedGeometric };

struct LeisureConfig {
  LeisureDistribution distribution = LeisureDistribution::Uniform;
  SimTime slot = SimTime::micros(320);
  std::int64_t max_slots = 0;
  double p = 0.5;  // truncated geometric only
  double duty_cycle = 0.0;

  SimTime max_leisure() const { return slot * max_slots; }

  double mean_slots() const {
    if (max_slots <= 0) return 0.0;
    if (distribution == LeisureDistribution::Uniform) return static_cast<double>(max_slots) / 2.0;
    const double q = 1.0 - p;
    const double qm = std::pow(q, static_cast<double>(max_slots + 1));
    return q / p - static_cast<double>(max_slots + 1) * qm / (1.0 - qm);
  }

  /// P(leisure > x).
  double tail(SimTime x) const {
    if (x < SimTime::zero()) return 1.0;
    if (max_slots <= 0) return 0.0;
    const std::int64_t j = x.ticks() / slot.ticks();  // leisure > x  <=>  slots > j
    if (j >= max_slots) return 0.0;
    if (distribution == LeisureDistribution::Uniform)
      return static_cast<double>(max_slots - j) / static_cast<double>(max_slots + 1);
    const double q = 1.0 - p;
    const double qm = std::pow(q, static_cast<double>(max_slots + 1));
    return (std::pow(q, static_cast<double>(j + 1)) - qm) / (1.0 - qm);
  }
};

/// Leisure in whole slots.
inline SimTime sample_leisure(const LeisureConfig& cfg, RngStream& rng) {
  const std::int64_t slots = cfg.distribution == LeisureDistribution::Uniform
                                 ? sample_uniform_slots(rng, cfg.max_slots)
                                 : sample_truncated_geometric(rng, cfg.p, cfg.max_slots);
  return cfg.slot * slots;
}

// ---------------------------------------------------------------------------
// Observe

struct ObserveRegistration {
  Token token;
  Address observer = kProxyAddress;
  std::uint32_t next_seq = 0;
  bool active = false;

  /// (Re-)registration from the observer; resets the stream.
  void activate(const Token& t, Address who) {
    token = t;
    observer = who;
    active = true;
  }

  void deactivate() { active = false; }

  /// Sequence number for the next notification.
  std::uint32_t take_seq() {
    const std::uint32_t s = next_seq;
    next_seq = (next_seq + 1) & 0xFFFFFF;
    return s;
  }
};

/// 24-bit serial-number order: true if `v2` is newer than `v1`.
inline bool observe_seq_newer(std::uint32_t v2, std::uint32_t v1) {
  constexpr std::uint32_t kHalf = 1u << 23;
  return (v1 < v2 && v2 - v1 < kHalf) || (v1 > v2 && v1 - v2 > kHalf);
}

// ---------------------------------------------------------------------------
// Node-side congestion gate

struct NodeCongestionState {
  bool enabled = false;
  std::optional<SimTime> last_tx_at;
  SimTime rtt_s_estimate{};
  bool rtt_known = false;

  /// EWMA with gain 1/8; the first sample seeds the estimate.
  void observe_rtt(SimTime sample) {
    if (!rtt_known) {
      rtt_s_estimate = sample;
      rtt_known = true;
    } else {
      rtt_s_estimate = SimTime{(rtt_s_estimate.ticks() * 7 + sample.ticks()) / 8};
    }
  }
};

enum class GateDecision { Allow, Drop };

inline GateDecision congestion_gate(NodeCongestionState& state, SimTime now) {
  if (state.enabled && state.last_tx_at && now - *state.last_tx_at < state.rtt_s_estimate)
    return GateDecision::Drop;
  state.last_tx_at = now;
  return GateDecision::Allow;
}

// ---------------------------------------------------------------------------

struct NodeConfig {
  Scheme scheme = Scheme::PostGet;
  SimTime mean_lifetime = SimTime::whole_seconds(60);
  FrameSizes sizes;
  TransmissionParams coap;
  bool congestion_gate = false;
  // Every k-th notification is confirmable; 0 keeps all of them NON.
  int confirmable_every = 0;
};

struct NodeCounters {
  std::uint64_t generations = 0;
  std::uint64_t posts = 0;
  std::uint64_t notifications = 0;
  std::uint64_t get_replies = 0;
  std::uint64_t mget_replies = 0;
  std::uint64_t not_found = 0;
  std::uint64_t gate_drops = 0;
  std::uint64_t con_retransmissions = 0;
  std::uint64_t con_give_ups = 0;
};

class IotNode {
 public:
  IotNode(Engine& engine, Mac& mac, NodeConfig config, RngStream variable_rng, RngStream leisure_rng,
          MetricsCollector* metrics = nullptr)
      : engine_(engine), mac_(mac), config_(config), variable_rng_(std::move(variable_rng)),
        leisure_rng_(std::move(leisure_rng)), metrics_(metrics),
        mids_(config.coap.exchange_lifetime()), dedup_(config.coap.exchange_lifetime()),
        retx_rng_(engine.stream({streams::kNodeRetx, mac.address()})) {
    variable_.resource = mac.address();
    mac_.on_receive([this](const Frame& f) { handle(f); });
  }

  IotNode(const IotNode&) = delete;
  IotNode& operator=(const IotNode&) = delete;

  Address address() const { return mac_.address(); }
  const PhysicalVariable& variable() const { return variable_; }
  const ObserveRegistration& registration() const { return registration_; }
  const NodeCounters& counters() const { return counters_; }
  NodeCongestionState& congestion() { return gate_; }
  const LeisureConfig& leisure() const { return leisure_; }

  void set_leisure(const LeisureConfig& cfg) { leisure_ = cfg; }

  /// Invoked at every generation instant, before any transmission.
  void on_generation(std::function<void(const PhysicalVariable&)> fn) { generation_hook_ = std::move(fn); }

  void start() {
    gate_.enabled = config_.congestion_gate;
    variable_.changed_at = engine_.now();
    schedule_next_change();
  }

  void handle(const Frame& frame) {
    const CoapMessage& m = frame.payload.msg;
    // ACKs echo our own message IDs; the retransmission table dedups them.
    if (m.type == MessageType::Acknowledgement && m.code == Code::Empty) {
      on_ack(m);
      return;
    }
    if (!dedup_.accept(frame.src, m.message_id, engine_.now())) return;
    switch (m.code) {
      case Code::Get:
        if (frame.broadcast())
          on_mget(frame.payload);
        else
          on_unicast_get(frame.payload);
        break;
      case Code::Created:
        on_created(m);
        break;
      default:
        break;
    }
  }

 private:
  void schedule_next_change() {
    variable_.next_change_at = engine_.now() + sample_exponential(variable_rng_, config_.mean_lifetime);
    engine_.schedule_at(variable_.next_change_at, [this] { on_variable_change(); });
  }

  void on_variable_change() {
    ++variable_.version;
    variable_.changed_at = engine_.now();
    ++counters_.generations;
    if (generation_hook_) generation_hook_(variable_);
    switch (config_.scheme) {
      case Scheme::PostGet: send_post(); break;
      case Scheme::ObserveGet:
        if (registration_.active) send_notification();
        break;
      case Scheme::Mget: break;  // pull only
    }
    schedule_next_change();
  }

  Packet data_packet(Code code, MessageType type, const Token& token) {
    Packet p;
    p.msg.type = type;
    p.msg.code = code;
    p.msg.message_id = mids_.next(engine_.now());
    p.msg.token = token;
    p.msg.options.etag = Opaque::from_uint(variable_.version, 8);
    p.msg.payload_len = 16;
    p.resource = variable_.resource;
    return p;
  }

  void send_post() {
    Packet p = data_packet(Code::Post, MessageType::NonConfirmable, make_token(++token_counter_));
    if (!send_data(p, config_.sizes.data)) return;
    ++counters_.posts;
    open_posts_[p.msg.token.to_uint()] = engine_.now();
    trim_open_posts();
  }

  void send_notification() {
    ++notification_count_;
    const bool con = config_.confirmable_every > 0 && notification_count_ % config_.confirmable_every == 0;
    Packet p = data_packet(Code::Content, con ? MessageType::Confirmable : MessageType::NonConfirmable,
                           registration_.token);
    p.msg.options.observe = registration_.take_seq();
    if (!send_data(p, config_.sizes.data)) return;
    ++counters_.notifications;
    if (con) track_confirmable(p);
  }

  void on_unicast_get(const Packet& req) {
    const CoapMessage& m = req.msg;
    if (req.resource != variable_.resource) {
      Packet p = data_packet(Code::NotFound, MessageType::NonConfirmable, m.token);
      p.msg.options.etag.reset();
      p.msg.payload_len = 0;
      ++counters_.not_found;
      submit(p, config_.sizes.control);
      return;
    }
    Packet p = data_packet(Code::Content, MessageType::NonConfirmable, m.token);
    if (m.options.observe) {
      if (*m.options.observe == 0) {
        registration_.activate(m.token, kProxyAddress);
        p.msg.options.observe = registration_.take_seq();
      } else {
        registration_.deactivate();
      }
    }
    if (send_data(p, config_.sizes.data)) ++counters_.get_replies;
  }

  void on_mget(const Packet& req) {
    const SimTime leisure = sample_leisure(leisure_, leisure_rng_);
    const Token token = req.msg.token;
    engine_.schedule_in(leisure, [this, token, leisure] {
      Packet p = data_packet(Code::Content, MessageType::NonConfirmable, token);
      p.leisure = leisure;
      if (send_data(p, config_.sizes.data)) ++counters_.mget_replies;
    });
  }

  void on_created(const CoapMessage& m) {
    auto it = open_posts_.find(m.token.to_uint());
    if (it == open_posts_.end()) return;
    gate_.observe_rtt(engine_.now() - it->second);
    open_posts_.erase(it);
  }

  // Confirmable path: stop-and-wait retransmission until ACK or give-up.
  void track_confirmable(const Packet& p) {
    const auto sched = retransmission_schedule(config_.coap, retx_rng_);
    Pending pend{p, engine_.now(), RetxState::start(engine_.now(), sched.timeouts.empty() ? sched.give_up_at : sched.timeouts.front(), config_.coap), {}};
    const std::uint16_t mid = p.msg.message_id;
    pend.timer = engine_.schedule_in(pend.retx.current_timeout, [this, mid] { on_retx_timeout(mid); });
    confirmable_[mid] = std::move(pend);
  }

  void on_retx_timeout(std::uint16_t mid) {
    auto it = confirmable_.find(mid);
    if (it == confirmable_.end()) return;
    Pending& pend = it->second;
    if (!pend.retx.on_timeout(config_.coap)) {
      ++counters_.con_give_ups;
      confirmable_.erase(it);
      return;
    }
    ++counters_.con_retransmissions;
    submit(pend.packet, config_.sizes.data);
    pend.timer = engine_.schedule_in(pend.retx.current_timeout, [this, mid] { on_retx_timeout(mid); });
  }

  void on_ack(const CoapMessage& m) {
    auto it = confirmable_.find(m.message_id);
    if (it == confirmable_.end()) return;
    // Karn: only unambiguous exchanges feed the estimate.
    if (it->second.retx.attempts_made == 0) gate_.observe_rtt(engine_.now() - it->second.first_sent);
    engine_.cancel(it->second.timer);
    confirmable_.erase(it);
  }

  bool send_data(const Packet& p, int length) {
    if (congestion_gate(gate_, engine_.now()) == GateDecision::Drop) {
      ++counters_.gate_drops;
      if (metrics_) metrics_->record_gate_drop(engine_.now());
      return false;
    }
    submit(p, length);
    return true;
  }

  void submit(const Packet& p, int length) {
    Frame f;
    f.dst = kProxyAddress;
    f.length_bytes = length;
    f.payload = p;
    f.requires_ack = true;
    if (metrics_) metrics_->record_offered(engine_.now());
    mac_.submit(std::move(f));
  }

  void trim_open_posts() {
    if (open_posts_.size() < 64) return;
    const SimTime horizon = engine_.now() - config_.coap.exchange_lifetime();
    for (auto it = open_posts_.begin(); it != open_posts_.end();)
      it = it->second < horizon ? open_posts_.erase(it) : std::next(it);
  }

  struct Pending {
    Packet packet;
    SimTime first_sent;
    RetxState retx;
    EventHandle timer;
  };

  Engine& engine_;
  Mac& mac_;
  NodeConfig config_;
  RngStream variable_rng_;
  RngStream leisure_rng_;
  MetricsCollector* metrics_;
  MessageIdAllocator mids_;
  DuplicateFilter dedup_;
  RngStream retx_rng_;
  PhysicalVariable variable_;
  LeisureConfig leisure_;
  ObserveRegistration registration_;
  NodeCongestionState gate_;
  NodeCounters counters_;
  std::uint32_t token_counter_ = 0;
  std::uint64_t notification_count_ = 0;
  std::unordered_map<std::uint64_t, SimTime> open_posts_;
  std::unordered_map<std::uint16_t, Pending> confirmable_;
  std::function<void(const PhysicalVariable&)> generation_hook_;
};

}  // namespace coapsim
