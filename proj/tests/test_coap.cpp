#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "coapsim/coap.hpp"

using namespace coapsim;

namespace {
std::vector<std::uint8_t> bytes(std::initializer_list<int> v) {
  std::vector<std::uint8_t> out;
  for (int b : v) out.push_back(static_cast<std::uint8_t>(b));
  return out;
}
}  // namespace

TEST(CoapCodec, ConfirmableGetHeaderBytes) {
  CoapMessage m;
  m.type = MessageType::Confirmable;
  m.code = Code::Get;
  m.message_id = 0x1234;
  EXPECT_EQ(encode_header(m), bytes({0x40, 0x01, 0x12, 0x34}));
}

TEST(CoapCodec, TokenAndOptionsLayout) {
  CoapMessage m;
  m.type = MessageType::NonConfirmable;
  m.code = Code::Content;
  m.message_id = 0x0001;
  m.token = make_token(0xA1B2C3D4);
  m.options.etag = Opaque::from_uint(0x07, 1);
  m.options.observe = 5;
  m.options.max_age = 60;
  m.payload_len = 2;
  // ETag (delta 4, len 1), Observe (delta 2, len 1), Max-Age (delta 8, len 1), marker, payload
  EXPECT_EQ(encode(m), bytes({0x54, 0x45, 0x00, 0x01, 0xA1, 0xB2, 0xC3, 0xD4, 0x41, 0x07, 0x21, 0x05, 0x81, 0x3C,
                              0xFF, 0x00, 0x00}));
  EXPECT_EQ(decode(encode(m)), m);
}

TEST(CoapCodec, ObserveZeroIsAnEmptyOptionValue) {
  CoapMessage m;
  m.code = Code::Get;
  m.options.observe = 0;
  const auto enc = encode(m);
  EXPECT_EQ(enc.back(), 0x60);
  EXPECT_EQ(decode(enc).options.observe, 0u);
}

TEST(CoapCodec, RejectsMalformedInput) {
  EXPECT_THROW(decode(bytes({0x40, 0x01, 0x00})), DecodeError);
  EXPECT_THROW(decode(bytes({0x80, 0x01, 0x00, 0x00})), DecodeError);        // version 2
  EXPECT_THROW(decode(bytes({0x42, 0x01, 0x00, 0x00, 0xAA})), DecodeError);  // truncated token
  EXPECT_THROW(decode(bytes({0x40, 0x03, 0x00, 0x00})), DecodeError);        // PUT unsupported
  EXPECT_THROW(decode(bytes({0x40, 0x01, 0x00, 0x00, 0xB0})), DecodeError);  // Uri-Path (11)
  EXPECT_THROW(decode(bytes({0x40, 0x01, 0x00, 0x00, 0xFF})), DecodeError);  // marker, no payload
}

TEST(CoapCodec, TokenLongerThanEightBytesIsInvalid) {
  std::uint8_t raw[9] = {};
  EXPECT_THROW(Opaque(raw, 9), InvalidParameter);
  EXPECT_THROW(Opaque::from_uint(1, 9), InvalidParameter);
}

TEST(Retransmission, FactorOneGivesDoublingOffsets) {
  TransmissionParams p;
  RngStream r(1, {streams::kTest, 0});
  const auto s = retransmission_schedule(p, r, 1.0);
  ASSERT_EQ(s.timeouts.size(), 4u);
  EXPECT_EQ(s.timeouts[0], SimTime::whole_seconds(2));
  EXPECT_EQ(s.timeouts[1], SimTime::whole_seconds(4));
  EXPECT_EQ(s.timeouts[2], SimTime::whole_seconds(8));
  EXPECT_EQ(s.timeouts[3], SimTime::whole_seconds(16));
  EXPECT_EQ(s.span, SimTime::whole_seconds(30));
  EXPECT_EQ(s.give_up_at, SimTime::whole_seconds(62));
}

TEST(Retransmission, MaximumFactorSpansFortyFiveSeconds) {
  TransmissionParams p;
  RngStream r(1, {streams::kTest, 0});
  const auto s = retransmission_schedule(p, r, 1.5);
  EXPECT_EQ(s.timeouts, (std::vector<SimTime>{SimTime::whole_seconds(3), SimTime::whole_seconds(6),
                                               SimTime::whole_seconds(12), SimTime::whole_seconds(24)}));
  EXPECT_EQ(s.span, SimTime::whole_seconds(45));
  EXPECT_EQ(s.span, p.max_transmit_span);
  EXPECT_TRUE(p.consistent());
  EXPECT_EQ(p.exchange_lifetime(), SimTime::whole_seconds(247));
}

TEST(Retransmission, NoRetransmitsMeansEmptySchedule) {
  TransmissionParams p;
  p.max_retransmit = 0;
  RngStream r(1, {streams::kTest, 0});
  const auto s = retransmission_schedule(p, r, 1.0);
  EXPECT_TRUE(s.timeouts.empty());
  EXPECT_EQ(s.give_up_at, SimTime::whole_seconds(2));
}

TEST(Retransmission, RandomInitialTimeoutWithinBounds) {
  TransmissionParams p;
  RngStream r(9, {streams::kTest, 0});
  for (int i = 0; i < 1000; ++i) {
    const auto s = retransmission_schedule(p, r);
    EXPECT_GE(s.timeouts[0], SimTime::whole_seconds(2));
    EXPECT_LE(s.timeouts[0], SimTime::whole_seconds(3));
    EXPECT_EQ(s.timeouts[3], s.timeouts[0] * 8);
  }
}

TEST(RetxState, SpendsExactlyMaxRetransmit) {
  TransmissionParams p;
  auto st = RetxState::start(SimTime::zero(), SimTime::whole_seconds(2), p);
  int retx = 0;
  while (st.on_timeout(p)) ++retx;
  EXPECT_EQ(retx, 4);
  EXPECT_EQ(st.current_timeout, SimTime::whole_seconds(32));
  EXPECT_EQ(st.give_up_at, SimTime::whole_seconds(62));
}

TEST(MessageIds, SequentialWrapAndSkip) {
  MessageIdAllocator fresh(SimTime::whole_seconds(247));
  EXPECT_EQ(fresh.next(SimTime::zero()), 0);
  EXPECT_EQ(fresh.next(SimTime::zero()), 1);
  EXPECT_EQ(fresh.next(SimTime::zero()), 2);

  MessageIdAllocator wrap(SimTime::whole_seconds(247), 65535);
  EXPECT_EQ(wrap.next(SimTime::zero()), 65535);
  EXPECT_EQ(wrap.next(SimTime::zero()), 0);
}

TEST(MessageIds, ExhaustionWithinLifetimeIsBackpressure) {
  MessageIdAllocator a(SimTime::whole_seconds(247));
  for (int i = 0; i < 65536; ++i) a.next(SimTime::zero());
  EXPECT_THROW(a.next(SimTime::whole_seconds(1)), Backpressure);
  EXPECT_EQ(a.next(SimTime::whole_seconds(247)), 0);  // oldest expired
}

TEST(DuplicateFilter, FlagsRepeatsWithinLifetimeOnly) {
  DuplicateFilter f(SimTime::whole_seconds(247));
  EXPECT_TRUE(f.accept(1, 10, SimTime::zero()));
  EXPECT_FALSE(f.accept(1, 10, SimTime::whole_seconds(5)));
  EXPECT_TRUE(f.accept(2, 10, SimTime::whole_seconds(5)));
  EXPECT_TRUE(f.accept(1, 10, SimTime::whole_seconds(300)));
  EXPECT_EQ(f.duplicates(), 1u);
}

TEST(TokenRelease, CeilingRule) {
  EXPECT_EQ(token_release_count(SimTime::whole_seconds(10), SimTime::whole_seconds(5), 1e-3), 2);
  EXPECT_EQ(token_release_count(SimTime::zero(), SimTime::whole_seconds(5), 1e-3), 1);
  EXPECT_EQ(token_release_count(SimTime::whole_seconds(4), SimTime::whole_seconds(5), 1e-3), 1);
  EXPECT_EQ(token_release_count(SimTime::whole_seconds(11), SimTime::whole_seconds(5), 1e-3), 3);
  EXPECT_THROW(token_release_count(SimTime::whole_seconds(4), SimTime::zero(), 1e-3), InvalidParameter);
}

TEST(TokenRelease, TailFormForUnboundedDelay) {
  // Exponential delay, mean 1 s; gap 1 s; eps 1e-3 -> smallest m with e^-m <= 1e-3 is 7.
  auto tail = [](SimTime x) { return std::exp(-x.to_seconds()); };
  EXPECT_EQ(token_release_count(tail, SimTime::whole_seconds(1), 1e-3), 7);
}

TEST(TokenRelease, BoundedLeisureNeverLateInSimulatedRounds) {
  // Leisure uniform on [0, 4 s], MGETs exactly 5 s apart, m = 1.
  const SimTime lmax = SimTime::whole_seconds(4), gap = SimTime::whole_seconds(5);
  const int m = token_release_count(lmax, gap, 1e-3);
  TokenTable table;
  RngStream r(11, {streams::kTest, 0});
  int late = 0;
  const int rounds = 10000;
  struct Reply {
    SimTime at;
    Token token;
  };
  std::vector<Reply> replies;
  for (int k = 0; k < rounds; ++k) {
    const SimTime issued = gap * k;
    // replies arriving before this MGET is issued are matched against the current table
    for (const auto& rep : replies)
      if (rep.at < issued && table.match(rep.token) != TokenMatch::Matched) ++late;
    std::erase_if(replies, [&](const Reply& rep) { return rep.at < issued; });
    const Token t = make_token(static_cast<std::uint32_t>(k + 1));
    table.issue(TokenEntry{t, issued, static_cast<std::uint64_t>(k + 1), m});
    replies.push_back({issued + SimTime{static_cast<std::int64_t>(r.uniform_int(lmax.ticks()))}, t});
  }
  EXPECT_EQ(late, 0);
}

TEST(TokenTable, ReleasedAfterConfiguredCount) {
  TokenTable t;
  t.issue({make_token(1), SimTime::zero(), 1, 2});
  t.issue({make_token(2), SimTime::zero(), 2, 2});
  EXPECT_EQ(t.match(make_token(1)), TokenMatch::Matched);
  t.issue({make_token(3), SimTime::zero(), 3, 2});
  EXPECT_EQ(t.match(make_token(1)), TokenMatch::Released);
  EXPECT_EQ(t.match(make_token(2)), TokenMatch::Matched);
  EXPECT_EQ(t.match(make_token(99)), TokenMatch::Unknown);
}
