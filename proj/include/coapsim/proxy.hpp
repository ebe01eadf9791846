#pragma once

// Caching IoT proxy: staged service pipeline per direction, per-node cache
// records with freshness tracking, inter-arrival estimation with jitter
// removal, and the three proactive maintenance schemes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <unordered_map>
#include <vector>

#include "coapsim/coap.hpp"
#include "coapsim/mac_phy.hpp"
#include "coapsim/metrics.hpp"
#include "coapsim/node.hpp"
#include "coapsim/packet.hpp"
#include "coapsim/sim_core.hpp"

namespace coapsim {

// ---------------------------------------------------------------------------
// Staged pipeline

/// Tandem of FIFO stations with exponential service. Items leave the last
/// stage through `sink`. Stations are work-conserving and never overtake.
template <class Item>
class StagedPipeline {
 public:
  using Sink = std::function<void(Item)>;

  StagedPipeline(Engine& engine, std::vector<RngStream> stage_rngs, SimTime mean_service, Sink sink)
      : engine_(engine), mean_service_(mean_service), sink_(std::move(sink)) {
    if (stage_rngs.empty()) throw InvalidParameter("pipeline: need at least one stage");
    if (mean_service <= SimTime::zero()) throw InvalidParameter("pipeline: mean service must be > 0");
    for (auto& r : stage_rngs) stages_.push_back(Stage{std::move(r), {}, false});
  }

  StagedPipeline(const StagedPipeline&) = delete;
  StagedPipeline& operator=(const StagedPipeline&) = delete;

  std::size_t stage_count() const { return stages_.size(); }
  std::size_t queued(std::size_t stage) const { return stages_[stage].queue.size(); }
  bool stage_idle(std::size_t stage) const { return !stages_[stage].busy; }

  void push(Item item) { arrive(0, std::move(item)); }

 private:
  struct Stage {
    RngStream rng;
    std::deque<Item> queue;
    bool busy;
  };

  void arrive(std::size_t i, Item item) {
    Stage& s = stages_[i];
    s.queue.push_back(std::move(item));
    if (!s.busy) serve(i);
  }

  void serve(std::size_t i) {
    Stage& s = stages_[i];
    s.busy = true;
    engine_.schedule_in(sample_exponential(s.rng, mean_service_), [this, i] { depart(i); });
  }

  void depart(std::size_t i) {
    Stage& s = stages_[i];
    Item item = std::move(s.queue.front());
    s.queue.pop_front();
    if (s.queue.empty())
      s.busy = false;
    else
      serve(i);
    if (i + 1 < stages_.size())
      arrive(i + 1, std::move(item));
    else
      sink_(std::move(item));
  }

  Engine& engine_;
  SimTime mean_service_;
  Sink sink_;
  std::vector<Stage> stages_;
};

// ---------------------------------------------------------------------------
// Freshness estimation

struct EstimatorParams {
  double alpha = 1.0 / 8.0;  // mean gain
  double beta = 1.0 / 4.0;   // deviation gain
  double t = 0.0;            // deviations added to the mean
};

/// EWMA mean/deviation of data inter-arrival times at the proxy.
///
/// Raw inter-arrival samples are corrected for changes in one-way delay:
/// sample_k - (rtt_p(k)/2 - rtt_p(k-1)/2), with rtt_p read at each arrival.
/// A constant transmission delay therefore cancels exactly.
class FreshnessEstimator {
 public:
  explicit FreshnessEstimator(EstimatorParams params = {}) : params_(params) {}

  void on_arrival(SimTime now) {
    const double half_rtt = rtt_p_ ? *rtt_p_ / 2.0 : 0.0;
    if (last_arrival_) {
      const double raw = (now - *last_arrival_).to_seconds();
      add_sample(raw - (half_rtt - half_rtt_at_last_));
    }
    last_arrival_ = now;
    half_rtt_at_last_ = half_rtt;
  }

  /// Feeds one corrected inter-arrival sample (seconds).
  void add_sample(double s) {
    if (samples_ == 0) {
      mean_ = s;
      dev_ = 0.0;
    } else {
      dev_ = (1.0 - params_.beta) * dev_ + params_.beta * std::abs(s - mean_);
      mean_ = (1.0 - params_.alpha) * mean_ + params_.alpha * s;
    }
    ++samples_;
  }

  /// RTT_p update: first sample initializes, then gain 1/8.
  void measure_rtt_p(double sample_s) {
    rtt_p_ = rtt_p_ ? (7.0 / 8.0) * *rtt_p_ + sample_s / 8.0 : sample_s;
  }

  void set_t(double t) { params_.t = t; }
  double t() const { return params_.t; }
  double mean() const { return mean_; }
  double deviation() const { return dev_; }
  std::uint64_t samples() const { return samples_; }
  std::optional<double> rtt_p() const { return rtt_p_; }

  /// mean + t * deviation, in seconds.
  double max_age() const { return mean_ + params_.t * dev_; }

 private:
  EstimatorParams params_;
  double mean_ = 0.0;
  double dev_ = 0.0;
  std::uint64_t samples_ = 0;
  std::optional<double> rtt_p_;
  std::optional<SimTime> last_arrival_;
  double half_rtt_at_last_ = 0.0;
};

enum class StalenessRule {
  Fixed,   // age > freshness_threshold
  MaxAge,  // age > estimator max_age once it has samples
};

struct CacheRecord {
  std::uint32_t resource = 0;
  std::uint64_t version = 0;
  SimTime last_update_at{};
  SimTime threshold{};  // staleness threshold in force since last_update_at
  FreshnessEstimator estimator;
  bool pending_refresh = false;
  SimTime pending_deadline{};
  Token observe_token;
  std::optional<std::uint32_t> last_observe_seq;

  bool stale(SimTime now) const { return now - last_update_at > threshold; }
};

/// Adds the stale part of [from, to] (the record is stale after
/// from + threshold) that falls inside the window.
inline double stale_overlap_s(SimTime last_update, SimTime threshold, SimTime to, const RunWindow& w) {
  const SimTime a = std::max(last_update + threshold, w.warmup);
  const SimTime b = std::min(to, w.duration);
  return b > a ? (b - a).to_seconds() : 0.0;
}

// ---------------------------------------------------------------------------
// Scheme configuration

struct ProxyCongestionControl {
  bool enabled = false;
  double high_water_s = 0.5;  // mean RTT above this raises t
  double low_water_s = 0.1;   // mean RTT below this lowers t
  double t_max = 4.0;
  SimTime period = SimTime::whole_seconds(60);
};

struct SchemeConfig {
  Scheme scheme = Scheme::PostGet;
  SimTime freshness_threshold = SimTime::whole_seconds(60);
  int k = 1;
  SimTime check_interval = SimTime::whole_seconds(1);
  double duty_cycle_coefficient = 0.001;
  LeisureDistribution leisure_distribution = LeisureDistribution::Uniform;
  double epsilon_token = 1e-3;
  bool refresh = true;
  StalenessRule staleness = StalenessRule::Fixed;
  SimTime reply_timeout = SimTime::whole_seconds(2);
};

/// Leisure parameters pushed to the group. Duty cycle = min(1, coefficient * n);
/// the mean leisure is duty cycle times the expected MGET period (one
/// freshness threshold).
inline LeisureConfig configure_leisure(std::size_t n, const SchemeConfig& scheme, SimTime slot) {
  if (n == 0) throw InvalidParameter("configure_leisure: node count must be > 0");
  if (scheme.duty_cycle_coefficient < 0) throw InvalidParameter("configure_leisure: negative coefficient");
  if (slot <= SimTime::zero()) throw InvalidParameter("configure_leisure: slot must be > 0");
  LeisureConfig cfg;
  cfg.distribution = scheme.leisure_distribution;
  cfg.slot = slot;
  cfg.duty_cycle = std::min(1.0, scheme.duty_cycle_coefficient * static_cast<double>(n));
  const double mean_slots =
      cfg.duty_cycle * static_cast<double>(scheme.freshness_threshold.ticks()) / static_cast<double>(slot.ticks());
  if (cfg.distribution == LeisureDistribution::Uniform) {
    cfg.max_slots = std::llround(2.0 * mean_slots);
    return cfg;
  }
  // Truncated geometric: widen the support and solve p for the target mean.
  cfg.max_slots = std::llround(4.0 * mean_slots);
  if (cfg.max_slots <= 0) return cfg;
  double lo = 1e-12, hi = 1.0 - 1e-12;
  for (int i = 0; i < 200; ++i) {
    cfg.p = 0.5 * (lo + hi);
    if (cfg.mean_slots() > mean_slots)
      lo = cfg.p;
    else
      hi = cfg.p;
  }
  cfg.p = 0.5 * (lo + hi);
  return cfg;
}

/// Raises t by one above the high-water mark, lowers it below the low-water
/// mark, clamped to [0, t_max].
inline double adjust_t(double t, double signal, const ProxyCongestionControl& cc) {
  if (!cc.enabled) return t;
  if (signal > cc.high_water_s) return std::min(cc.t_max, t + 1.0);
  if (signal < cc.low_water_s) return std::max(0.0, t - 1.0);
  return t;
}

struct RefreshPlan {
  std::vector<std::size_t> unicast;  // record indices to GET individually
  bool multicast = false;
};

/// Which refresh requests to issue at `now`. Expired pending flags must be
/// cleared beforehand.
inline RefreshPlan plan_refresh(const std::vector<CacheRecord>& records, const SchemeConfig& cfg, SimTime now) {
  RefreshPlan plan;
  if (!cfg.refresh) return plan;
  std::size_t stale = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.pending_refresh || !r.stale(now)) continue;
    ++stale;
    if (cfg.scheme != Scheme::Mget) plan.unicast.push_back(i);
  }
  if (cfg.scheme == Scheme::Mget) plan.multicast = stale >= static_cast<std::size_t>(std::max(1, cfg.k));
  return plan;
}

// ---------------------------------------------------------------------------

struct ProxyConfig {
  SchemeConfig scheme;
  EstimatorParams estimator;
  ProxyCongestionControl congestion;
  FrameSizes sizes;
  TransmissionParams coap;
  std::size_t stage_count = 3;
  SimTime stage_mean = SimTime::millis(5);
  SimTime registration_spacing = SimTime::millis(10);
};

struct ProxyCounters {
  std::uint64_t posts = 0;
  std::uint64_t data_arrivals = 0;
  std::uint64_t validation_gets = 0;
  std::uint64_t registrations = 0;
  std::uint64_t mgets = 0;
  std::uint64_t mget_replies = 0;
  std::uint64_t unmatched_tokens = 0;
  std::uint64_t orphan_responses = 0;
  std::uint64_t refresh_timeouts = 0;
  std::uint64_t out_of_order_notifications = 0;
  std::uint64_t duplicates = 0;
  std::uint64_t not_found = 0;
  std::uint64_t concurrent_refresh_violations = 0;
};

class CachingProxy {
 public:
  /// `n` nodes with addresses 0..n-1, one resource each.
  CachingProxy(Engine& engine, Mac& mac, std::size_t n, ProxyConfig config, MetricsCollector* metrics = nullptr)
      : engine_(engine), mac_(mac), config_(config), metrics_(metrics),
        uplink_(engine, stage_streams(engine, streams::kProxyUplinkStage, config.stage_count), config.stage_mean,
                [this](Inbound in) { on_application(std::move(in)); }),
        downlink_(engine, stage_streams(engine, streams::kProxyDownlinkStage, config.stage_count),
                  config.stage_mean, [this](Frame f) { transmit(std::move(f)); }),
        mids_(config.coap.exchange_lifetime()), dedup_(config.coap.exchange_lifetime()) {
    if (n == 0) throw InvalidParameter("proxy: node count must be > 0");
    config_.sizes.validate();
    records_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      records_[i].resource = static_cast<std::uint32_t>(i);
      records_[i].threshold = config_.scheme.freshness_threshold;
      records_[i].estimator = FreshnessEstimator(config_.estimator);
    }
    mac_.on_receive([this](const Frame& f) { uplink_.push(Inbound{f.src, f.payload}); });
    if (config_.scheme.scheme == Scheme::Mget) {
      leisure_ = configure_leisure(n, config_.scheme, mac.params().backoff_unit);
      release_after_ = compute_release_after();
    }
  }

  CachingProxy(const CachingProxy&) = delete;
  CachingProxy& operator=(const CachingProxy&) = delete;

  const std::vector<CacheRecord>& records() const { return records_; }
  const ProxyCounters& counters() const { return counters_; }
  const LeisureConfig& leisure() const { return leisure_; }
  int token_release_after() const { return release_after_; }
  double current_t() const { return config_.estimator.t; }

  /// Cache contents are considered current at start; observe registrations
  /// are staggered across the nodes.
  void start() {
    const SimTime now = engine_.now();
    for (auto& r : records_) r.last_update_at = now;
    if (config_.scheme.scheme == Scheme::ObserveGet) {
      for (std::size_t i = 0; i < records_.size(); ++i)
        engine_.schedule_in(config_.registration_spacing * static_cast<std::int64_t>(i),
                            [this, i] { send_unicast_get(i, /*observe=*/true); });
    }
    if (config_.scheme.refresh) schedule_check();
    if (config_.congestion.enabled)
      engine_.schedule_in(config_.congestion.period, [this] { congestion_tick(); });
  }

  /// Zero-cost out-of-band update; stands in for the data path when the
  /// MGET scheme runs without refreshes.
  void reference_update(std::uint32_t resource, std::uint64_t version) {
    data_arrival(records_.at(resource), version);
  }

  /// Stale record-seconds inside the window, including still-open intervals.
  double stale_record_seconds(const RunWindow& w) const {
    double total = stale_accum_;
    for (const auto& r : records_) total += stale_overlap_s(r.last_update_at, r.threshold, w.duration, w);
    return total;
  }

  void set_window(RunWindow w) { window_ = w; }

 private:
  struct Inbound {
    Address src;
    Packet packet;
  };

  struct Probe {
    std::size_t record;
    SimTime sent_at;
  };

  static std::vector<RngStream> stage_streams(Engine& e, std::uint32_t kind, std::size_t n) {
    std::vector<RngStream> v;
    for (std::size_t i = 0; i < n; ++i) v.push_back(e.stream({kind, static_cast<std::uint32_t>(i)}));
    return v;
  }

  int compute_release_after() const {
    const auto& s = config_.scheme;
    // A new MGET needs a stale record that is not pending: either one a
    // reply refreshed (fresh for one threshold) or one whose wait expired.
    SimTime min_gap = s.staleness == StalenessRule::Fixed
                          ? std::min(s.freshness_threshold, leisure_.max_leisure() + s.reply_timeout)
                          : s.check_interval;
    min_gap = std::max(min_gap, s.check_interval);
    const SimTime margin = s.reply_timeout;  // MAC and pipeline delay allowance
    const LeisureConfig lc = leisure_;
    return token_release_count([lc, margin](SimTime x) { return lc.tail(x - margin); }, min_gap,
                               s.epsilon_token);
  }

  void schedule_check() {
    engine_.schedule_in(config_.scheme.check_interval, [this] {
      check_freshness();
      schedule_check();
    });
  }

  void check_freshness() {
    const SimTime now = engine_.now();
    for (auto& r : records_) {
      if (r.pending_refresh && now >= r.pending_deadline) {
        r.pending_refresh = false;
        ++counters_.refresh_timeouts;
      }
    }
    purge_probes(now);
    const RefreshPlan plan = plan_refresh(records_, config_.scheme, now);
    for (std::size_t i : plan.unicast) send_unicast_get(i, config_.scheme.scheme == Scheme::ObserveGet);
    if (plan.multicast) send_mget();
  }

  void send_unicast_get(std::size_t i, bool observe) {
    CacheRecord& r = records_[i];
    if (r.pending_refresh) ++counters_.concurrent_refresh_violations;
    Packet p;
    p.msg.type = MessageType::NonConfirmable;
    p.msg.code = Code::Get;
    p.msg.message_id = mids_.next(engine_.now());
    p.msg.token = make_token(++token_counter_);
    p.resource = r.resource;
    if (observe) {
      p.msg.options.observe = 0;
      r.observe_token = p.msg.token;
      r.last_observe_seq.reset();
      ++counters_.registrations;
    } else {
      p.msg.options.etag = Opaque::from_uint(r.version, 8);
      ++counters_.validation_gets;
    }
    r.pending_refresh = true;
    r.pending_deadline = engine_.now() + config_.scheme.reply_timeout;
    probes_[p.msg.token.to_uint()] = Probe{i, engine_.now()};
    send(static_cast<Address>(i), p, config_.sizes.request);
  }

  void send_mget() {
    const SimTime now = engine_.now();
    Packet p;
    p.msg.type = MessageType::NonConfirmable;
    p.msg.code = Code::Get;
    p.msg.message_id = mids_.next(now);
    p.msg.token = make_token(++token_counter_);
    ++mget_seq_;
    ++counters_.mgets;
    tokens_.issue(TokenEntry{p.msg.token, now, mget_seq_, release_after_});
    const SimTime deadline = now + leisure_.max_leisure() + config_.scheme.reply_timeout;
    for (auto& r : records_) {
      r.pending_refresh = true;
      r.pending_deadline = deadline;
    }
    send(kBroadcast, p, config_.sizes.request);
  }

  void send(Address dst, const Packet& p, int length) {
    Frame f;
    f.dst = dst;
    f.length_bytes = length;
    f.payload = p;
    f.requires_ack = dst != kBroadcast;
    downlink_.push(std::move(f));
  }

  void transmit(Frame f) {
    if (metrics_) metrics_->record_offered(engine_.now(), Origin::Proxy);
    mac_.submit(std::move(f));
  }

  void on_application(Inbound in) {
    const SimTime now = engine_.now();
    const CoapMessage& m = in.packet.msg;
    const bool fresh = dedup_.accept(in.src, m.message_id, now);
    if (m.type == MessageType::Confirmable) send_ack(in.src, m.message_id);
    if (!fresh) {
      ++counters_.duplicates;
      return;
    }
    if (in.src >= records_.size()) return;
    CacheRecord& r = records_[in.src];
    const std::uint64_t version = m.options.etag ? m.options.etag->to_uint() : r.version;

    switch (m.code) {
      case Code::Post: {
        ++counters_.posts;
        data_arrival(r, version);
        Packet reply;
        reply.msg.type = MessageType::NonConfirmable;
        reply.msg.code = Code::Created;
        reply.msg.message_id = mids_.next(now);
        reply.msg.token = m.token;
        reply.resource = r.resource;
        send(in.src, reply, config_.sizes.control);
        break;
      }
      case Code::Content:
        on_content(in, r, version);
        break;
      case Code::NotFound:
        ++counters_.not_found;
        probes_.erase(m.token.to_uint());
        r.pending_refresh = false;
        break;
      default:
        break;
    }
  }

  void on_content(const Inbound& in, CacheRecord& r, std::uint64_t version) {
    const SimTime now = engine_.now();
    const CoapMessage& m = in.packet.msg;

    if (auto it = probes_.find(m.token.to_uint()); it != probes_.end()) {
      const Probe probe = it->second;
      probes_.erase(it);
      if (metrics_) metrics_->record_rtt(probe.sent_at, now);
      r.estimator.measure_rtt_p((now - probe.sent_at).to_seconds());
      if (m.options.observe) r.last_observe_seq = *m.options.observe;
      data_arrival(r, version);
      return;
    }

    if (config_.scheme.scheme == Scheme::Mget) {
      ++counters_.mget_replies;
      const TokenMatch match = tokens_.match(m.token);
      if (metrics_) metrics_->record_mget_reply(match == TokenMatch::Matched, now);
      if (match != TokenMatch::Matched) {
        ++counters_.unmatched_tokens;
        return;
      }
      const TokenEntry* entry = tokens_.find(m.token);
      if (metrics_) metrics_->record_rtt(entry->issued_at, now, in.packet.leisure);
      r.estimator.measure_rtt_p((now - entry->issued_at).to_seconds());
      data_arrival(r, version);
      return;
    }

    if (m.options.observe && m.token == r.observe_token) {
      if (r.last_observe_seq && !observe_seq_newer(*m.options.observe, *r.last_observe_seq)) {
        ++counters_.out_of_order_notifications;
        return;
      }
      r.last_observe_seq = *m.options.observe;
      data_arrival(r, version);
      return;
    }
    ++counters_.orphan_responses;
  }

  void data_arrival(CacheRecord& r, std::uint64_t version) {
    const SimTime now = engine_.now();
    if (window_) stale_accum_ += stale_overlap_s(r.last_update_at, r.threshold, now, *window_);
    r.estimator.on_arrival(now);
    r.version = version;
    r.last_update_at = now;
    r.pending_refresh = false;
    if (config_.scheme.staleness == StalenessRule::MaxAge && r.estimator.samples() > 0)
      r.threshold = SimTime::seconds(std::max(0.0, r.estimator.max_age()));
    else
      r.threshold = config_.scheme.freshness_threshold;
    ++counters_.data_arrivals;
  }

  void send_ack(Address to, std::uint16_t mid) {
    Packet ack;
    ack.msg.type = MessageType::Acknowledgement;
    ack.msg.code = Code::Empty;
    ack.msg.message_id = mid;
    send(to, ack, config_.sizes.control);
  }

  void purge_probes(SimTime now) {
    if (probes_.size() < 4 * records_.size() + 64) return;
    const SimTime horizon = now - config_.coap.exchange_lifetime();
    for (auto it = probes_.begin(); it != probes_.end();)
      it = it->second.sent_at < horizon ? probes_.erase(it) : std::next(it);
  }

  void congestion_tick() {
    double sum = 0;
    std::size_t n = 0;
    for (const auto& r : records_)
      if (auto rtt = r.estimator.rtt_p()) {
        sum += *rtt;
        ++n;
      }
    if (n > 0) {
      config_.estimator.t = adjust_t(config_.estimator.t, sum / static_cast<double>(n), config_.congestion);
      for (auto& r : records_) r.estimator.set_t(config_.estimator.t);
    }
    engine_.schedule_in(config_.congestion.period, [this] { congestion_tick(); });
  }

  Engine& engine_;
  Mac& mac_;
  ProxyConfig config_;
  MetricsCollector* metrics_;
  StagedPipeline<Inbound> uplink_;
  StagedPipeline<Frame> downlink_;
  MessageIdAllocator mids_;
  DuplicateFilter dedup_;
  std::vector<CacheRecord> records_;
  std::unordered_map<std::uint64_t, Probe> probes_;
  TokenTable tokens_;
  LeisureConfig leisure_;
  int release_after_ = 1;
  std::uint64_t mget_seq_ = 0;
  std::uint32_t token_counter_ = 0;
  ProxyCounters counters_;
  std::optional<RunWindow> window_;
  double stale_accum_ = 0.0;
};

}  // namespace coapsim
