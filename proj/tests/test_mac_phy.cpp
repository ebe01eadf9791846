#include <gtest/gtest.h>

#include <memory>
#include <vector>

#include "coapsim/mac_phy.hpp"

using namespace coapsim;

namespace {

using TMac = CsmaMac<int>;
using TFrame = MacFrame<int>;

struct Bench {
  Engine engine{7};
  Channel<int> channel{engine};
  std::vector<std::unique_ptr<TMac>> macs;
  std::vector<MacOutcome> outcomes;
  std::vector<std::pair<Address, int>> received;

  TMac& add(Address a, bool metered = true) {
    Radio radio = metered ? Radio(EnergyMeter(EnergyRates{}, SimTime::zero(), true)) : Radio();
    macs.push_back(std::make_unique<TMac>(engine, channel, a, CsmaParams{}, engine.stream({streams::kTest, a}),
                                          std::move(radio)));
    auto& m = *macs.back();
    m.on_complete([this](const TFrame&, const MacOutcome& o) { outcomes.push_back(o); });
    m.on_receive([this, a](const TFrame& f) { received.push_back({a, f.payload}); });
    return m;
  }

  static TFrame frame(Address dst, int len, int payload = 0) {
    TFrame f;
    f.dst = dst;
    f.length_bytes = len;
    f.payload = payload;
    return f;
  }
};

}  // namespace

TEST(FrameAirtime, BytesAtTwoFiftyKbps) {
  CsmaParams p;
  EXPECT_EQ(frame_airtime(127, p), SimTime::micros(4064));
  EXPECT_EQ(frame_airtime(11, p), SimTime::micros(352));
  EXPECT_EQ(frame_airtime(20, p), SimTime::micros(640));
  EXPECT_THROW(frame_airtime(0, p), InvalidParameter);
  EXPECT_THROW(frame_airtime(128, p), InvalidParameter);
}

TEST(CsmaParams, RejectsInconsistentExponents) {
  CsmaParams p;
  p.min_be = 6;
  EXPECT_THROW(p.validate(), InvalidParameter);
}

TEST(CsmaMac, LoneSenderDeliversEveryFrameFirstTime) {
  Bench b;
  auto& tx = b.add(0);
  b.add(1);
  for (int i = 0; i < 1000; ++i)
    b.engine.schedule_at(SimTime::millis(20) * i, [&, i] { tx.submit(Bench::frame(1, 127, i)); });
  b.engine.run_until(SimTime::whole_seconds(30));
  ASSERT_EQ(b.outcomes.size(), 1000u);
  for (const auto& o : b.outcomes) {
    EXPECT_EQ(o.status, MacStatus::Delivered);
    EXPECT_EQ(o.attempts_used, 1);
  }
  EXPECT_EQ(b.received.size(), 1000u);
  EXPECT_EQ(b.channel.corrupted_transmissions(), 0u);
}

TEST(CsmaMac, ZeroContentionTimingIsExact) {
  Bench b;
  auto& tx = b.add(0);
  b.add(1);
  tx.override_backoff([](int, int, int) { return 0; });
  tx.submit(Bench::frame(1, 127));
  b.engine.run_until(SimTime::millis(100));
  ASSERT_EQ(b.outcomes.size(), 1u);
  // CCA + turnaround + airtime + ACK wait (unit + ACK airtime + 1 tick)
  EXPECT_EQ(b.outcomes[0].completion_time, SimTime::micros(128 + 192 + 4064 + 320 + 352 + 1));
}

TEST(CsmaMac, ForcedSimultaneousFirstAttemptsCollideThenRecover) {
  Bench b;
  auto& a = b.add(0);
  auto& c = b.add(1);
  b.add(2);
  // Same backoff on the first attempt; distinct afterwards.
  a.override_backoff([](int, int, int) { return 0; });
  c.override_backoff([](int, int, int attempt) { return attempt == 1 ? 0 : 8; });
  a.submit(Bench::frame(2, 127, 1));
  c.submit(Bench::frame(2, 127, 2));
  b.engine.run_until(SimTime::whole_seconds(1));
  ASSERT_EQ(b.outcomes.size(), 2u);
  for (const auto& o : b.outcomes) {
    EXPECT_EQ(o.status, MacStatus::Delivered);
    EXPECT_GT(o.attempts_used, 1);
  }
  EXPECT_GE(b.channel.corrupted_transmissions(), 2u);
}

TEST(CsmaMac, BroadcastHasNoAckAndReachesEveryone) {
  Bench b;
  auto& tx = b.add(0);
  for (Address a = 1; a <= 5; ++a) b.add(a);
  tx.submit(Bench::frame(kBroadcast, 20, 9));
  b.engine.run_until(SimTime::millis(50));
  ASSERT_EQ(b.outcomes.size(), 1u);
  EXPECT_EQ(b.outcomes[0].status, MacStatus::BroadcastSent);
  EXPECT_EQ(b.received.size(), 5u);
  EXPECT_EQ(b.channel.transmissions(), 1u);  // no ACKs
}

TEST(CsmaMac, BusyChannelEndsInAccessFailure) {
  Bench b;
  auto& tx = b.add(0);
  b.add(1);
  b.channel.jam(SimTime::whole_seconds(10));
  tx.submit(Bench::frame(1, 127));
  b.engine.run_until(SimTime::whole_seconds(11));
  ASSERT_EQ(b.outcomes.size(), 1u);
  EXPECT_EQ(b.outcomes[0].status, MacStatus::ChannelAccessFailure);
  EXPECT_EQ(b.outcomes[0].attempts_used, 1);
}

TEST(CsmaMac, MissingReceiverExhaustsRetries) {
  Bench b;
  auto& tx = b.add(0);
  tx.submit(Bench::frame(99, 127));
  b.engine.run_until(SimTime::whole_seconds(1));
  ASSERT_EQ(b.outcomes.size(), 1u);
  EXPECT_EQ(b.outcomes[0].status, MacStatus::RetryExhausted);
  EXPECT_EQ(b.outcomes[0].attempts_used, 1 + CsmaParams{}.max_frame_retries);
}

TEST(CsmaMac, RetransmissionAfterLostAckIsDeliveredOnce) {
  Bench b;
  auto& tx = b.add(0);
  auto& rx = b.add(1);
  tx.override_backoff([](int, int, int) { return 0; });
  tx.submit(Bench::frame(1, 127, 5));
  // Corrupt the first ACK: it starts 320 us after the data frame ends.
  const SimTime ack_start = SimTime::micros(128 + 192 + 4064 + 320);
  b.engine.schedule_at(ack_start + SimTime::micros(10), [&] { b.channel.jam(SimTime::micros(50)); });
  b.engine.run_until(SimTime::millis(100));
  ASSERT_EQ(b.outcomes.size(), 1u);
  EXPECT_EQ(b.outcomes[0].status, MacStatus::Delivered);
  EXPECT_EQ(b.outcomes[0].attempts_used, 2);
  EXPECT_EQ(b.received.size(), 1u);
  EXPECT_EQ(rx.duplicates_suppressed(), 1u);
}

TEST(Energy, IdleFloorPerDay) {
  EnergyMeter m;
  const double j = energy_report(m, SimTime::whole_seconds(86400));
  EXPECT_NEAR(j, 4.914, 4.914e-6);
}

TEST(Energy, StateTicksMatchActivity) {
  Bench b;
  auto& tx = b.add(0);
  auto& rx = b.add(1);
  tx.override_backoff([](int, int, int) { return 0; });
  tx.submit(Bench::frame(1, 127));
  b.engine.run_until(SimTime::millis(100));
  const SimTime end = b.engine.now();
  // Sender: CCA + turnaround + ACK wait receiving, data airtime transmitting.
  EnergyMeter sender_copy = tx.radio().meter();
  sender_copy.set_state(sender_copy.state(), end);
  EXPECT_EQ(sender_copy.ticks_in(RadioState::Transmitting), 4064);
  EXPECT_EQ(sender_copy.ticks_in(RadioState::Receiving), 128 + 192 + 320 + 352 + 1);
  EnergyMeter receiver_copy = rx.radio().meter();
  receiver_copy.set_state(receiver_copy.state(), end);
  EXPECT_EQ(receiver_copy.ticks_in(RadioState::Receiving), 4064);
  EXPECT_EQ(receiver_copy.ticks_in(RadioState::Transmitting), 352);
}

TEST(Energy, TimeReversalIsRejected) {
  EnergyMeter m;
  m.set_state(RadioState::Receiving, SimTime::millis(5));
  EXPECT_THROW(m.joules_at(SimTime::millis(4)), InvalidParameter);
}

TEST(Channel, OverlapCorruptsBoth) {
  Engine e;
  Channel<int> ch(e);
  std::vector<bool> ok;
  ch.transmit(1, SimTime::millis(4), [&](bool v) { ok.push_back(v); });
  e.schedule_at(SimTime::millis(3), [&] { ch.transmit(2, SimTime::millis(4), [&](bool v) { ok.push_back(v); }); });
  e.schedule_at(SimTime::millis(20), [&] { ch.transmit(3, SimTime::millis(1), [&](bool v) { ok.push_back(v); }); });
  e.run_until(SimTime::millis(30));
  EXPECT_EQ(ok, (std::vector<bool>{false, false, true}));
  EXPECT_EQ(ch.corrupted_transmissions(), 2u);
}
