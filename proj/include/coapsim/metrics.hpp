#pragma once

// Collection of the per-run observables.
//
// Definitions:
//   p_success   first-MAC-attempt deliveries / unicast frames sent by IoT
//               nodes and submitted in the measurement window. Broadcasts
//               carry no ACK and are excluded. p_success_all applies the same
//               ratio to node and proxy frames together.
//   p_eventual  unicast frames delivered on any attempt / unicast frames
//               completed in the window (secondary interpretation).
//   rtt         proxy application stage -> proxy application stage, for
//               validation GETs, re-registration GETs and MGET replies.
//               The node's leisure hold is subtracted; rtt_with_leisure
//               keeps it.
//   energy      node radio energy in the window, per node, scaled to 86400 s.
//   stale_prob  time-average fraction of cache records older than their
//               staleness threshold.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "coapsim/mac_phy.hpp"
#include "coapsim/sim_core.hpp"

namespace coapsim {

struct RunWindow {
  SimTime warmup;
  SimTime duration;

  SimTime length() const { return duration - warmup; }
  bool contains(SimTime t) const { return t >= warmup && t <= duration; }
};

struct MacCounters {
  std::uint64_t offered = 0;  // all frames submitted in the window
  std::uint64_t delivered = 0;
  std::uint64_t retry_exhausted = 0;
  std::uint64_t channel_access_failures = 0;
  std::uint64_t broadcasts = 0;
  std::uint64_t first_attempts = 0;  // unicast frames
  std::uint64_t first_attempt_delivered = 0;

  std::uint64_t completed() const { return delivered + retry_exhausted + channel_access_failures + broadcasts; }
  std::uint64_t in_flight() const { return offered - completed(); }

  MacCounters& operator+=(const MacCounters& o) {
    offered += o.offered;
    delivered += o.delivered;
    retry_exhausted += o.retry_exhausted;
    channel_access_failures += o.channel_access_failures;
    broadcasts += o.broadcasts;
    first_attempts += o.first_attempts;
    first_attempt_delivered += o.first_attempt_delivered;
    return *this;
  }
};

enum class Origin { Node, Proxy };

class MetricsCollector {
 public:
  explicit MetricsCollector(RunWindow window) : window_(window) {}

  const RunWindow& window() const { return window_; }
  bool counts(SimTime t) const { return window_.contains(t); }

  void record_offered(SimTime submitted_at, Origin origin = Origin::Node) {
    if (counts(submitted_at)) ++counters(origin).offered;
  }

  /// Called once per completed frame.
  void record_mac_attempt(const MacOutcome& outcome, SimTime submitted_at, Origin origin = Origin::Node) {
    if (!counts(submitted_at)) return;
    MacCounters& c = counters(origin);
    switch (outcome.status) {
      case MacStatus::BroadcastSent:
        ++c.broadcasts;
        return;
      case MacStatus::Delivered:
        ++c.delivered;
        break;
      case MacStatus::RetryExhausted:
        ++c.retry_exhausted;
        break;
      case MacStatus::ChannelAccessFailure:
        ++c.channel_access_failures;
        break;
    }
    ++c.first_attempts;
    if (outcome.status == MacStatus::Delivered && outcome.attempts_used == 1) ++c.first_attempt_delivered;
  }

  void record_rtt(SimTime sent_at, SimTime arrival, SimTime leisure = SimTime::zero()) {
    if (!counts(arrival)) return;
    const SimTime total = arrival - sent_at;
    rtt_.push_back((total - leisure).to_seconds());
    rtt_with_leisure_sum_ += total.to_seconds();
  }

  void record_mget_reply(bool matched, SimTime at) {
    if (!counts(at)) return;
    ++mget_replies_;
    if (!matched) ++unmatched_tokens_;
  }

  void record_gate_drop(SimTime at) {
    if (counts(at)) ++dropped_by_gate_;
  }

  const MacCounters& node_mac() const { return node_; }
  const MacCounters& proxy_mac() const { return proxy_; }
  MacCounters mac() const {
    MacCounters all = node_;
    all += proxy_;
    return all;
  }
  const std::vector<double>& rtt_samples() const { return rtt_; }
  double rtt_with_leisure_mean() const {
    return rtt_.empty() ? std::numeric_limits<double>::quiet_NaN()
                        : rtt_with_leisure_sum_ / static_cast<double>(rtt_.size());
  }
  std::uint64_t mget_replies() const { return mget_replies_; }
  std::uint64_t unmatched_tokens() const { return unmatched_tokens_; }
  std::uint64_t dropped_by_gate() const { return dropped_by_gate_; }

 private:
  MacCounters& counters(Origin o) { return o == Origin::Node ? node_ : proxy_; }

  RunWindow window_;
  MacCounters node_;
  MacCounters proxy_;
  std::vector<double> rtt_;
  double rtt_with_leisure_sum_ = 0.0;
  std::uint64_t mget_replies_ = 0;
  std::uint64_t unmatched_tokens_ = 0;
  std::uint64_t dropped_by_gate_ = 0;
};

struct MetricsSnapshot {
  std::string scheme;
  std::size_t n_nodes = 0;
  std::uint64_t seed = 0;
  double sim_duration_s = 0;
  double warmup_s = 0;

  double p_success = std::numeric_limits<double>::quiet_NaN();
  double p_eventual = std::numeric_limits<double>::quiet_NaN();
  double p_success_all = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t rtt_samples = 0;
  double rtt_mean_s = std::numeric_limits<double>::quiet_NaN();
  double rtt_p95_s = std::numeric_limits<double>::quiet_NaN();
  double rtt_with_leisure_mean_s = std::numeric_limits<double>::quiet_NaN();
  double energy_daily_j = 0;
  double stale_prob = 0;

  MacCounters mac;  // node and proxy frames together
  MacCounters node_mac;
  std::uint64_t offered_frames = 0;
  std::uint64_t dropped_by_gate = 0;
  std::uint64_t unmatched_tokens = 0;
  std::uint64_t mget_replies = 0;

  bool rtt_empty() const { return rtt_samples == 0; }
};

/// Nearest-rank percentile (q in (0, 1]) of an unsorted sample.
inline double percentile(std::vector<double> xs, double q) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(xs.begin(), xs.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(xs.size())));
  return xs[std::clamp<std::size_t>(rank, 1, xs.size()) - 1];
}

/// Raw per-run totals that finalize() turns into a snapshot.
struct RunTotals {
  double node_energy_j = 0;   // summed over nodes, inside the window
  double stale_record_s = 0;  // summed over records, inside the window
  std::size_t n_nodes = 0;
};

inline MetricsSnapshot finalize(const MetricsCollector& c, const RunTotals& totals, RunWindow window) {
  if (window.duration <= window.warmup) throw InvalidParameter("finalize: run duration must exceed warmup");
  if (totals.n_nodes == 0) throw InvalidParameter("finalize: no nodes");
  MetricsSnapshot s;
  const double window_s = window.length().to_seconds();
  const double n = static_cast<double>(totals.n_nodes);
  s.n_nodes = totals.n_nodes;
  s.sim_duration_s = window.duration.to_seconds();
  s.warmup_s = window.warmup.to_seconds();

  auto ratio = [](std::uint64_t a, std::uint64_t b) {
    return b > 0 ? static_cast<double>(a) / static_cast<double>(b) : std::numeric_limits<double>::quiet_NaN();
  };
  s.mac = c.mac();
  s.node_mac = c.node_mac();
  s.offered_frames = s.mac.offered;
  s.p_success = ratio(s.node_mac.first_attempt_delivered, s.node_mac.first_attempts);
  s.p_eventual = ratio(s.node_mac.delivered, s.node_mac.first_attempts);
  s.p_success_all = ratio(s.mac.first_attempt_delivered, s.mac.first_attempts);

  const auto& rtt = c.rtt_samples();
  s.rtt_samples = rtt.size();
  if (!rtt.empty()) {
    double sum = 0;
    for (double x : rtt) sum += x;
    s.rtt_mean_s = sum / static_cast<double>(rtt.size());
    s.rtt_p95_s = percentile(rtt, 0.95);
    s.rtt_with_leisure_mean_s = c.rtt_with_leisure_mean();
  }

  s.energy_daily_j = totals.node_energy_j / n / window_s * 86400.0;
  s.stale_prob = totals.stale_record_s / (n * window_s);
  s.dropped_by_gate = c.dropped_by_gate();
  s.unmatched_tokens = c.unmatched_tokens();
  s.mget_replies = c.mget_replies();
  return s;
}

}  // namespace coapsim
