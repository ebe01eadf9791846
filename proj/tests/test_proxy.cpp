#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "coapsim/proxy.hpp"
#include "coapsim/scenario.hpp"

using namespace coapsim;

namespace {

std::vector<RngStream> stage_rngs(Engine& e, std::size_t n) {
  std::vector<RngStream> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(e.stream({streams::kTest, static_cast<std::uint32_t>(i)}));
  return v;
}

struct Probe {
  int id;
  SimTime entered;
};

}  // namespace

TEST(StagedPipeline, EmptyPipelineTraversalIsSumOfStageMeans) {
  Engine e(1);
  double sum = 0;
  int done = 0;
  StagedPipeline<Probe> p(e, stage_rngs(e, 3), SimTime::millis(5), [&](Probe pr) {
    sum += (e.now() - pr.entered).to_seconds();
    ++done;
  });
  const int n = 10000;
  for (int i = 0; i < n; ++i)
    e.schedule_at(SimTime::whole_seconds(1) * i, [&, i] { p.push(Probe{i, e.now()}); });
  e.run_until(SimTime::whole_seconds(n + 1));
  ASSERT_EQ(done, n);
  EXPECT_NEAR(sum / n, 0.015, 0.015 * 0.05);
}

TEST(StagedPipeline, SingleStageMatchesMM1Sojourn) {
  Engine e(2);
  auto arrivals = e.stream({streams::kTest, 50});
  double sum = 0;
  int done = 0;
  StagedPipeline<Probe> p(e, stage_rngs(e, 1), SimTime::millis(5), [&](Probe pr) {
    sum += (e.now() - pr.entered).to_seconds();
    ++done;
  });
  const int n = 50000;
  SimTime t{};
  for (int i = 0; i < n; ++i) {
    t += sample_exponential(arrivals, SimTime::millis(10));
    e.schedule_at(t, [&, i] { p.push(Probe{i, e.now()}); });
  }
  e.run_until(t + SimTime::whole_seconds(10));
  ASSERT_EQ(done, n);
  EXPECT_NEAR(sum / n, 0.010, 0.001);
}

TEST(StagedPipeline, FifoWithoutOvertaking) {
  Engine e(3);
  std::vector<int> order;
  StagedPipeline<Probe> p(e, stage_rngs(e, 3), SimTime::millis(5), [&](Probe pr) { order.push_back(pr.id); });
  for (int i = 0; i < 500; ++i) e.schedule_at(SimTime::micros(100) * i, [&, i] { p.push(Probe{i, e.now()}); });
  e.run_until(SimTime::whole_seconds(100));
  ASSERT_EQ(order.size(), 500u);
  for (int i = 0; i < 500; ++i) EXPECT_EQ(order[i], i);
  for (std::size_t s = 0; s < 3; ++s) {
    EXPECT_TRUE(p.stage_idle(s));
    EXPECT_EQ(p.queued(s), 0u);
  }
}

TEST(StagedPipeline, NoArrivalsNoEvents) {
  Engine e(4);
  StagedPipeline<Probe> p(e, stage_rngs(e, 3), SimTime::millis(5), [](Probe) {});
  EXPECT_EQ(e.run_until(SimTime::whole_seconds(100)), 0u);
}

TEST(FreshnessEstimator, FirstArrivalGivesNoSample) {
  FreshnessEstimator est;
  est.on_arrival(SimTime::whole_seconds(5));
  EXPECT_EQ(est.samples(), 0u);
  est.on_arrival(SimTime::whole_seconds(65));
  EXPECT_EQ(est.samples(), 1u);
  EXPECT_DOUBLE_EQ(est.mean(), 60.0);
  EXPECT_DOUBLE_EQ(est.deviation(), 0.0);
}

TEST(FreshnessEstimator, ConstantSamplesAreAFixedPoint) {
  FreshnessEstimator est;
  est.measure_rtt_p(0.04);
  for (int i = 0; i <= 3; ++i) est.on_arrival(SimTime::whole_seconds(60) * i);
  EXPECT_DOUBLE_EQ(est.mean(), 60.0);
  EXPECT_DOUBLE_EQ(est.deviation(), 0.0);
}

TEST(FreshnessEstimator, EwmaGains) {
  FreshnessEstimator est;
  est.add_sample(60);
  est.add_sample(100);
  // dev = 3/4*0 + 1/4*|100-60| = 10 ; mean = 7/8*60 + 1/8*100 = 65
  EXPECT_DOUBLE_EQ(est.deviation(), 10.0);
  EXPECT_DOUBLE_EQ(est.mean(), 65.0);
  est.set_t(2);
  EXPECT_DOUBLE_EQ(est.max_age(), 85.0);
}

TEST(FreshnessEstimator, MaxAgeMonotoneInT) {
  FreshnessEstimator est;
  for (double s : {50.0, 70.0, 40.0, 90.0}) est.add_sample(s);
  double prev = -1;
  for (double t = 0; t <= 5; t += 0.5) {
    est.set_t(t);
    EXPECT_GE(est.max_age(), prev);
    prev = est.max_age();
  }
}

TEST(FreshnessEstimator, RttPInitialisesThenSmooths) {
  FreshnessEstimator est;
  EXPECT_FALSE(est.rtt_p());
  est.measure_rtt_p(0.040);
  EXPECT_DOUBLE_EQ(*est.rtt_p(), 0.040);
  est.measure_rtt_p(0.080);
  EXPECT_NEAR(*est.rtt_p(), 0.045, 1e-15);
}

TEST(FreshnessEstimator, JitterCorrectionUsesDelayChange) {
  FreshnessEstimator est;
  est.measure_rtt_p(0.040);
  est.on_arrival(SimTime::whole_seconds(0));
  est.measure_rtt_p(0.200);  // rtt_p -> 0.06
  est.on_arrival(SimTime::whole_seconds(60));
  // raw 60 s minus (0.06/2 - 0.04/2)
  EXPECT_NEAR(est.mean(), 60.0 - 0.01, 1e-12);
}

TEST(ConfigureLeisure, DutyCycleScalesWithDomainSize) {
  SchemeConfig s;
  s.scheme = Scheme::Mget;
  const SimTime slot = SimTime::micros(320);
  const auto a = configure_leisure(500, s, slot);
  EXPECT_DOUBLE_EQ(a.duty_cycle, 0.5);
  EXPECT_NEAR(a.mean_slots() * 320e-6, 0.5 * 60, 1e-3);
  EXPECT_DOUBLE_EQ(configure_leisure(2000, s, slot).duty_cycle, 1.0);
  EXPECT_THROW(configure_leisure(0, s, slot), InvalidParameter);
}

TEST(ConfigureLeisure, GeometricHitsTargetMean) {
  SchemeConfig s;
  s.leisure_distribution = LeisureDistribution::TruncatedGeometric;
  const auto c = configure_leisure(100, s, SimTime::micros(320));
  const double target = 0.1 * 60 / 320e-6;
  EXPECT_NEAR(c.mean_slots(), target, target * 1e-6);
  EXPECT_GT(c.p, 0.0);
  EXPECT_LT(c.p, 1.0);
}

TEST(AdjustT, RuleAndBounds) {
  ProxyCongestionControl cc;
  cc.enabled = true;
  cc.t_max = 2;
  EXPECT_EQ(adjust_t(0, 1.0, cc), 1);
  EXPECT_EQ(adjust_t(2, 1.0, cc), 2);
  EXPECT_EQ(adjust_t(1, 0.3, cc), 1);
  EXPECT_EQ(adjust_t(1, 0.01, cc), 0);
  EXPECT_EQ(adjust_t(0, 0.01, cc), 0);
  cc.enabled = false;
  EXPECT_EQ(adjust_t(1, 9.0, cc), 1);
}

namespace {
std::vector<CacheRecord> records(std::size_t n, SimTime updated) {
  std::vector<CacheRecord> v(n);
  for (auto& r : v) {
    r.last_update_at = updated;
    r.threshold = SimTime::whole_seconds(60);
  }
  return v;
}
}  // namespace

TEST(PlanRefresh, Examples) {
  SchemeConfig post;
  post.scheme = Scheme::PostGet;
  auto recs = records(10, SimTime::whole_seconds(100));
  EXPECT_TRUE(plan_refresh(recs, post, SimTime::whole_seconds(150)).unicast.empty());
  for (int i : {1, 4, 7}) recs[i].last_update_at = SimTime::zero();
  auto plan = plan_refresh(recs, post, SimTime::whole_seconds(150));
  EXPECT_EQ(plan.unicast, (std::vector<std::size_t>{1, 4, 7}));
  EXPECT_FALSE(plan.multicast);
  recs[4].pending_refresh = true;
  EXPECT_EQ(plan_refresh(recs, post, SimTime::whole_seconds(150)).unicast.size(), 2u);

  SchemeConfig mget;
  mget.scheme = Scheme::Mget;
  auto big = records(500, SimTime::whole_seconds(100));
  big[17].last_update_at = SimTime::zero();
  plan = plan_refresh(big, mget, SimTime::whole_seconds(150));
  EXPECT_TRUE(plan.multicast);
  EXPECT_TRUE(plan.unicast.empty());
  mget.k = 2;
  EXPECT_FALSE(plan_refresh(big, mget, SimTime::whole_seconds(150)).multicast);
  mget.refresh = false;
  mget.k = 1;
  EXPECT_FALSE(plan_refresh(big, mget, SimTime::whole_seconds(150)).multicast);
}

TEST(PlanRefresh, StalenessIsStrictlyAfterThreshold) {
  CacheRecord r;
  r.threshold = SimTime::whole_seconds(60);
  EXPECT_FALSE(r.stale(SimTime::whole_seconds(60)));
  EXPECT_TRUE(r.stale(SimTime::whole_seconds(60) + SimTime{1}));
}

TEST(StaleOverlap, ClippedToWindow) {
  const RunWindow w{SimTime::whole_seconds(100), SimTime::whole_seconds(1000)};
  EXPECT_DOUBLE_EQ(stale_overlap_s(SimTime::zero(), SimTime::whole_seconds(60), SimTime::whole_seconds(200), w), 100);
  EXPECT_DOUBLE_EQ(stale_overlap_s(SimTime::whole_seconds(500), SimTime::whole_seconds(60),
                                   SimTime::whole_seconds(2000), w),
                   440);
  EXPECT_DOUBLE_EQ(stale_overlap_s(SimTime::whole_seconds(500), SimTime::whole_seconds(60),
                                   SimTime::whole_seconds(550), w),
                   0);
}

// -- end to end through a wired domain --------------------------------------

namespace {
ScenarioConfig small(Scheme s, std::size_t n, double duration) {
  ScenarioConfig c;
  c.scheme = s;
  c.n_nodes = n;
  c.sim_duration_s = duration;
  c.warmup_s = 0;
  return c;
}
}  // namespace

TEST(CachingProxy, OneStaleRecordTriggersOneMulticastAnsweredByAll) {
  Domain d(small(Scheme::Mget, 500, 121.5));  // MGET at 61 s, leisure up to 60 s, next round at 122 s
  d.run();
  const auto& k = d.proxy().counters();
  EXPECT_EQ(k.mgets, 1u);
  EXPECT_GE(k.mget_replies, 495u);
  EXPECT_LE(k.mget_replies, 500u);
  EXPECT_EQ(k.unmatched_tokens, 0u);
}

TEST(CachingProxy, PostsRefreshRecordsAndAreAnswered) {
  Domain d(small(Scheme::PostGet, 5, 1200));
  d.run();
  const auto& k = d.proxy().counters();
  EXPECT_GT(k.posts, 50u);
  std::uint64_t created = 0;
  for (std::size_t i = 0; i < d.size(); ++i) created += d.node(i).counters().posts;
  EXPECT_EQ(k.posts, created);  // no contention losses at n=5 expected
  for (std::size_t i = 0; i < d.size(); ++i)
    EXPECT_EQ(d.proxy().records()[i].version, d.node(i).variable().version);
}

TEST(CachingProxy, ObserveRegistersEveryNodeAtStart) {
  Domain d(small(Scheme::ObserveGet, 20, 30));
  d.run();
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_TRUE(d.node(i).registration().active);
  EXPECT_GE(d.proxy().counters().registrations, 20u);
}

TEST(CachingProxy, NeverTwoOutstandingRefreshesPerRecord) {
  for (Scheme s : {Scheme::PostGet, Scheme::Mget, Scheme::ObserveGet}) {
    Domain d(small(s, 100, 1800));
    d.run();
    EXPECT_EQ(d.proxy().counters().concurrent_refresh_violations, 0u) << to_string(s);
  }
}

TEST(CachingProxy, MaxAgeRuleFollowsEstimator) {
  ScenarioConfig c = small(Scheme::PostGet, 3, 3000);
  c.staleness_rule = StalenessRule::MaxAge;
  c.t = 1;
  Domain d(c);
  d.run();
  for (const auto& r : d.proxy().records()) {
    ASSERT_GT(r.estimator.samples(), 5u);
    EXPECT_NEAR(r.threshold.to_seconds(), std::max(0.0, r.estimator.max_age()), 1e-6);
  }
}
