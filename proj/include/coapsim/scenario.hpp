#pragma once

// Scenario configuration, assembly of one domain (n nodes + proxy on one
// channel), single runs and multi-seed sweeps with CSV output.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "coapsim/mac_phy.hpp"
#include "coapsim/metrics.hpp"
#include "coapsim/node.hpp"
#include "coapsim/packet.hpp"
#include "coapsim/proxy.hpp"
#include "coapsim/sim_core.hpp"

namespace coapsim {

struct ConfigError : InvalidParameter {
  using InvalidParameter::InvalidParameter;
};

struct ScenarioConfig {
  Scheme scheme = Scheme::PostGet;
  std::size_t n_nodes = 50;
  double sim_duration_s = 36000;
  double warmup_s = 300;
  std::uint64_t seed = 1;

  double mean_lifetime_s = 60;
  double freshness_threshold_s = 60;
  double t = 0;
  int k = 1;
  double check_interval_s = 1;
  double duty_cycle_coefficient = 0.001;
  LeisureDistribution leisure_distribution = LeisureDistribution::Uniform;
  double epsilon_token = 1e-3;
  double reply_timeout_s = 2;
  bool refresh = true;
  StalenessRule staleness_rule = StalenessRule::Fixed;
  bool node_congestion_gate = false;
  bool proxy_congestion_control = false;
  int confirmable_every = 0;

  CsmaParams mac;
  FrameSizes sizes;
  std::size_t proxy_stages = 3;
  double proxy_stage_mean_ms = 5;

  RunWindow window() const { return {SimTime::seconds(warmup_s), SimTime::seconds(sim_duration_s)}; }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  double x = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, x);
  if (ec != std::errc{} || p != end || !std::isfinite(x))
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  return x;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  long long x = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, x);
  if (ec != std::errc{} || p != end) throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw ConfigError("config: '" + key + "' expects a boolean, got '" + v + "'");
}

inline void require(bool ok, const std::string& key, const std::string& bound) {
  if (!ok) throw ConfigError("config: '" + key + "' must be " + bound);
}

}  // namespace detail

/// Applies one `key = value` setting. Unknown keys and out-of-range values
/// raise ConfigError naming the key.
inline void apply_setting(ScenarioConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  const std::string& k = key;
  const std::string& v = value;
  if (k == "scheme") {
    auto s = parse_scheme(v);
    if (!s) throw ConfigError("config: 'scheme' must be one of post-get, mget, observe-get; got '" + v + "'");
    c.scheme = *s;
  } else if (k == "n_nodes") {
    const auto n = parse_int(k, v);
    require(n >= 1 && n <= 65000, k, "in [1, 65000]");
    c.n_nodes = static_cast<std::size_t>(n);
  } else if (k == "sim_duration_s") {
    c.sim_duration_s = parse_double(k, v);
    require(c.sim_duration_s > 0, k, "> 0");
  } else if (k == "warmup_s") {
    c.warmup_s = parse_double(k, v);
    require(c.warmup_s >= 0, k, ">= 0");
  } else if (k == "seed") {
    const auto s = parse_int(k, v);
    require(s >= 0, k, ">= 0");
    c.seed = static_cast<std::uint64_t>(s);
  } else if (k == "mean_lifetime_s") {
    c.mean_lifetime_s = parse_double(k, v);
    require(c.mean_lifetime_s > 0, k, "> 0");
  } else if (k == "freshness_threshold_s") {
    c.freshness_threshold_s = parse_double(k, v);
    require(c.freshness_threshold_s > 0, k, "> 0");
  } else if (k == "t") {
    c.t = parse_double(k, v);
    require(c.t >= 0, k, ">= 0");
  } else if (k == "k") {
    const auto x = parse_int(k, v);
    require(x >= 1, k, ">= 1");
    c.k = static_cast<int>(x);
  } else if (k == "check_interval_s") {
    c.check_interval_s = parse_double(k, v);
    require(c.check_interval_s > 0, k, "> 0");
  } else if (k == "duty_cycle_coefficient") {
    c.duty_cycle_coefficient = parse_double(k, v);
    require(c.duty_cycle_coefficient >= 0 && c.duty_cycle_coefficient <= 1, k, "in [0, 1]");
  } else if (k == "leisure_distribution") {
    if (v == "uniform")
      c.leisure_distribution = LeisureDistribution::Uniform;
    else if (v == "geometric" || v == "truncated_geometric")
      c.leisure_distribution = LeisureDistribution::TruncatedGeometric;
    else
      throw ConfigError("config: 'leisure_distribution' must be uniform or geometric; got '" + v + "'");
  } else if (k == "epsilon_token") {
    c.epsilon_token = parse_double(k, v);
    require(c.epsilon_token > 0 && c.epsilon_token < 1, k, "in (0, 1)");
  } else if (k == "reply_timeout_s") {
    c.reply_timeout_s = parse_double(k, v);
    require(c.reply_timeout_s > 0, k, "> 0");
  } else if (k == "refresh") {
    c.refresh = parse_bool(k, v);
  } else if (k == "staleness_rule") {
    if (v == "fixed")
      c.staleness_rule = StalenessRule::Fixed;
    else if (v == "max_age")
      c.staleness_rule = StalenessRule::MaxAge;
    else
      throw ConfigError("config: 'staleness_rule' must be fixed or max_age; got '" + v + "'");
  } else if (k == "node_congestion_gate") {
    c.node_congestion_gate = parse_bool(k, v);
  } else if (k == "proxy_congestion_control") {
    c.proxy_congestion_control = parse_bool(k, v);
  } else if (k == "confirmable_every") {
    const auto x = parse_int(k, v);
    require(x >= 0, k, ">= 0");
    c.confirmable_every = static_cast<int>(x);
  } else if (k == "mac_min_be" || k == "mac_max_be") {
    const auto x = parse_int(k, v);
    require(x >= 0 && x <= 20, k, "in [0, 20]");
    (k == "mac_min_be" ? c.mac.min_be : c.mac.max_be) = static_cast<int>(x);
  } else if (k == "mac_max_csma_backoffs" || k == "mac_max_frame_retries") {
    const auto x = parse_int(k, v);
    require(x >= 0 && x <= 16, k, "in [0, 16]");
    (k == "mac_max_csma_backoffs" ? c.mac.max_csma_backoffs : c.mac.max_frame_retries) = static_cast<int>(x);
  } else if (k == "data_frame_bytes" || k == "request_frame_bytes" || k == "control_frame_bytes") {
    const auto x = parse_int(k, v);
    require(x >= 1 && x <= kMaxFrameBytes, k, "in [1, 127]");
    int& dst = k == "data_frame_bytes" ? c.sizes.data : k == "request_frame_bytes" ? c.sizes.request : c.sizes.control;
    dst = static_cast<int>(x);
  } else if (k == "proxy_stages") {
    const auto x = parse_int(k, v);
    require(x >= 1 && x <= 64, k, "in [1, 64]");
    c.proxy_stages = static_cast<std::size_t>(x);
  } else if (k == "proxy_stage_mean_ms") {
    c.proxy_stage_mean_ms = parse_double(k, v);
    require(c.proxy_stage_mean_ms > 0, k, "> 0");
  } else {
    throw ConfigError("config: unknown key '" + k + "'");
  }
}

/// Cross-field checks.
inline void validate(const ScenarioConfig& c) {
  if (c.sim_duration_s <= c.warmup_s) throw ConfigError("config: 'sim_duration_s' must exceed 'warmup_s'");
  if (c.mac.min_be > c.mac.max_be) throw ConfigError("config: 'mac_min_be' must be <= 'mac_max_be'");
  if (c.n_nodes == 0) throw ConfigError("config: 'n_nodes' must be >= 1");
}

/// Parses `key = value` lines; '#' starts a comment.
inline ScenarioConfig parse_config(std::istream& in, ScenarioConfig base = {}) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + ": expected key = value");
    apply_setting(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  validate(base);
  return base;
}

inline ScenarioConfig parse_config_string(const std::string& text, ScenarioConfig base = {}) {
  std::istringstream in(text);
  return parse_config(in, base);
}

inline ScenarioConfig load_config(const std::string& path, ScenarioConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  return parse_config(in, base);
}

// ---------------------------------------------------------------------------

/// One fully wired domain. Nodes use addresses 0..n-1.
class Domain {
 public:
  explicit Domain(const ScenarioConfig& cfg)
      : cfg_(cfg), window_(cfg.window()), engine_(cfg.seed), channel_(engine_), metrics_(window_) {
    validate(cfg);
    NodeConfig nc;
    nc.scheme = cfg.scheme;
    nc.mean_lifetime = SimTime::seconds(cfg.mean_lifetime_s);
    nc.sizes = cfg.sizes;
    nc.congestion_gate = cfg.node_congestion_gate;
    nc.confirmable_every = cfg.confirmable_every;

    for (std::size_t i = 0; i < cfg.n_nodes; ++i) {
      const auto a = static_cast<Address>(i);
      node_macs_.push_back(std::make_unique<Mac>(engine_, channel_, a, cfg.mac, engine_.stream({streams::kNodeMac, a}),
                                                 Radio(EnergyMeter(EnergyRates{}, SimTime::zero()))));
      nodes_.push_back(std::make_unique<IotNode>(engine_, *node_macs_.back(), nc,
                                                 engine_.stream({streams::kNodeVariable, a}),
                                                 engine_.stream({streams::kNodeLeisure, a}), &metrics_));
      hook_completion(*node_macs_.back(), Origin::Node);
    }

    ProxyConfig pc;
    pc.scheme.scheme = cfg.scheme;
    pc.scheme.freshness_threshold = SimTime::seconds(cfg.freshness_threshold_s);
    pc.scheme.k = cfg.k;
    pc.scheme.check_interval = SimTime::seconds(cfg.check_interval_s);
    pc.scheme.duty_cycle_coefficient = cfg.duty_cycle_coefficient;
    pc.scheme.leisure_distribution = cfg.leisure_distribution;
    pc.scheme.epsilon_token = cfg.epsilon_token;
    pc.scheme.refresh = cfg.refresh;
    pc.scheme.staleness = cfg.staleness_rule;
    pc.scheme.reply_timeout = SimTime::seconds(cfg.reply_timeout_s);
    pc.estimator.t = cfg.t;
    pc.congestion.enabled = cfg.proxy_congestion_control;
    pc.sizes = cfg.sizes;
    pc.stage_count = cfg.proxy_stages;
    pc.stage_mean = SimTime::seconds(cfg.proxy_stage_mean_ms / 1000.0);

    proxy_mac_ = std::make_unique<Mac>(engine_, channel_, kProxyAddress, cfg.mac, engine_.stream({streams::kProxyMac, 0}));
    hook_completion(*proxy_mac_, Origin::Proxy);
    proxy_ = std::make_unique<CachingProxy>(engine_, *proxy_mac_, cfg.n_nodes, pc, &metrics_);
    proxy_->set_window(window_);

    for (auto& n : nodes_) {
      n->set_leisure(proxy_->leisure());
      // Without refreshes, an MGET cache only learns through this feed.
      if (cfg.scheme == Scheme::Mget && !cfg.refresh)
        n->on_generation([this](const PhysicalVariable& v) { proxy_->reference_update(v.resource, v.version); });
    }
  }

  Domain(const Domain&) = delete;
  Domain& operator=(const Domain&) = delete;

  MetricsSnapshot run() {
    for (auto& n : nodes_) n->start();
    proxy_->start();
    engine_.schedule_at(window_.warmup, [this] { energy_at_warmup_ = total_node_energy(); });
    engine_.run_until(window_.duration);

    RunTotals totals;
    totals.n_nodes = nodes_.size();
    totals.node_energy_j = total_node_energy() - energy_at_warmup_;
    totals.stale_record_s = proxy_->stale_record_seconds(window_);
    MetricsSnapshot s = finalize(metrics_, totals, window_);
    s.scheme = std::string(to_string(cfg_.scheme));
    s.seed = cfg_.seed;
    return s;
  }

  Engine& engine() { return engine_; }
  Medium& channel() { return channel_; }
  CachingProxy& proxy() { return *proxy_; }
  IotNode& node(std::size_t i) { return *nodes_.at(i); }
  Mac& node_mac(std::size_t i) { return *node_macs_.at(i); }
  Mac& proxy_mac() { return *proxy_mac_; }
  const MetricsCollector& metrics() const { return metrics_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  void hook_completion(Mac& mac, Origin origin) {
    mac.on_complete(
        [this, origin](const Frame& f, const MacOutcome& o) { metrics_.record_mac_attempt(o, f.submitted_at, origin); });
  }

  double total_node_energy() const {
    double j = 0;
    for (const auto& m : node_macs_) j += m->radio().meter().joules_at(engine_.now());
    return j;
  }

  ScenarioConfig cfg_;
  RunWindow window_;
  Engine engine_;
  Medium channel_;
  MetricsCollector metrics_;
  std::vector<std::unique_ptr<Mac>> node_macs_;
  std::vector<std::unique_ptr<IotNode>> nodes_;
  std::unique_ptr<Mac> proxy_mac_;
  std::unique_ptr<CachingProxy> proxy_;
  double energy_at_warmup_ = 0;
};

inline MetricsSnapshot run_scenario(const ScenarioConfig& cfg) {
  Domain d(cfg);
  return d.run();
}

// ---------------------------------------------------------------------------
// Sweeps and CSV

struct SweepPlan {
  std::vector<Scheme> schemes;
  std::vector<std::size_t> n_values;
  std::vector<std::uint64_t> seeds;
  unsigned jobs = 1;
};

/// "a:b:step" inclusive, or a comma-separated list.
inline std::vector<std::size_t> parse_n_list(const std::string& text) {
  std::vector<std::size_t> out;
  auto num = [&](const std::string& s) {
    const auto v = detail::parse_int("nodes", detail::trim(s));
    if (v < 1) throw ConfigError("config: 'nodes' values must be >= 1");
    return static_cast<std::size_t>(v);
  };
  if (text.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.size() != 3) throw ConfigError("config: sweep range must be start:stop:step");
    const auto a = num(parts[0]), b = num(parts[1]), step = num(parts[2]);
    for (std::size_t n = a; n <= b; n += step) out.push_back(n);
  } else {
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ',');) out.push_back(num(p));
  }
  if (out.empty()) throw ConfigError("config: empty node list");
  return out;
}

/// Runs every (scheme, n, seed) combination. Results come back in
/// (scheme, n, seed) order regardless of the job count.
inline std::vector<MetricsSnapshot> sweep(const ScenarioConfig& base, const SweepPlan& plan) {
  std::vector<ScenarioConfig> cases;
  for (Scheme s : plan.schemes)
    for (std::size_t n : plan.n_values)
      for (std::uint64_t seed : plan.seeds) {
        ScenarioConfig c = base;
        c.scheme = s;
        c.n_nodes = n;
        c.seed = seed;
        validate(c);
        cases.push_back(c);
      }
  std::vector<MetricsSnapshot> out(cases.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < cases.size();) {
      try {
        out[i] = run_scenario(cases[i]);
      } catch (...) {
        std::lock_guard lk(error_mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  const unsigned jobs = std::max(1u, std::min<unsigned>(plan.jobs, static_cast<unsigned>(cases.size())));
  std::vector<std::thread> pool;
  for (unsigned j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return out;
}

namespace detail {

inline std::string fmt_num(double x) {
  if (std::isnan(x)) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

inline double mean_ignoring_nan(const std::vector<double>& xs) {
  double s = 0;
  std::size_t n = 0;
  for (double x : xs)
    if (!std::isnan(x)) {
      s += x;
      ++n;
    }
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace detail

inline constexpr const char* kCsvHeader =
    "scheme,n_nodes,seed,p_success,rtt_mean_s,rtt_p95_s,energy_daily_j,stale_prob,offered_frames,unmatched_tokens";
inline constexpr const char* kCsvExtendedHeader =
    ",p_eventual,p_success_all,rtt_with_leisure_mean_s,rtt_samples,mget_replies,dropped_by_gate,mac_delivered,"
    "mac_retry_exhausted,mac_channel_access_failures,mac_broadcasts";

/// Writes per-seed rows plus one "mean" row per (scheme, n). Row order is
/// (scheme, n) groups in run order, seeds ascending within a group.
inline void write_csv(std::ostream& os, const std::vector<MetricsSnapshot>& rows, bool extended,
                      const std::vector<std::string>& manifest = {}) {
  using detail::fmt_num;
  for (const auto& m : manifest) os << "# " << m << '\n';
  os << kCsvHeader << (extended ? kCsvExtendedHeader : "") << '\n';

  auto columns = [](const MetricsSnapshot& s) {
    return std::vector<double>{s.p_success,
                               s.rtt_mean_s,
                               s.rtt_p95_s,
                               s.energy_daily_j,
                               s.stale_prob,
                               static_cast<double>(s.offered_frames),
                               static_cast<double>(s.unmatched_tokens),
                               s.p_eventual,
                               s.p_success_all,
                               s.rtt_with_leisure_mean_s,
                               static_cast<double>(s.rtt_samples),
                               static_cast<double>(s.mget_replies),
                               static_cast<double>(s.dropped_by_gate),
                               static_cast<double>(s.mac.delivered),
                               static_cast<double>(s.mac.retry_exhausted),
                               static_cast<double>(s.mac.channel_access_failures),
                               static_cast<double>(s.mac.broadcasts)};
  };
  auto emit = [&](const std::string& scheme, std::size_t n, const std::string& seed, const std::vector<double>& c) {
    os << scheme << ',' << n << ',' << seed;
    const std::size_t count = extended ? c.size() : 7;
    for (std::size_t i = 0; i < count; ++i) os << ',' << fmt_num(c[i]);
    os << '\n';
  };

  for (std::size_t i = 0; i < rows.size();) {
    std::size_t j = i;
    while (j < rows.size() && rows[j].scheme == rows[i].scheme && rows[j].n_nodes == rows[i].n_nodes) ++j;
    std::vector<std::vector<double>> group;
    for (std::size_t r = i; r < j; ++r) {
      group.push_back(columns(rows[r]));
      emit(rows[r].scheme, rows[r].n_nodes, std::to_string(rows[r].seed), group.back());
    }
    std::vector<double> mean(group.front().size());
    for (std::size_t c = 0; c < mean.size(); ++c) {
      std::vector<double> col;
      for (const auto& g : group) col.push_back(g[c]);
      mean[c] = detail::mean_ignoring_nan(col);
    }
    emit(rows[i].scheme, rows[i].n_nodes, "mean", mean);
    i = j;
  }
}

}  // namespace coapsim
