#pragma once

// CoAP message model shared by nodes and the proxy.
//
// The codec emits the standard 4-byte header, the token and three options
// (ETag = 4, Observe = 6, Max-Age = 14). Any other option is rejected.

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "coapsim/sim_core.hpp"

namespace coapsim {

struct DecodeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when every message ID is still inside its lifetime window.
struct Backpressure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class MessageType : std::uint8_t { Confirmable = 0, NonConfirmable = 1, Acknowledgement = 2, Reset = 3 };

enum class Code : std::uint8_t {
  Empty = 0x00,
  Get = 0x01,
  Post = 0x02,
  Created = 0x41,   // 2.01
  Content = 0x45,   // 2.05
  NotFound = 0x84,  // 4.04
};

inline bool is_known_code(std::uint8_t c) {
  switch (static_cast<Code>(c)) {
    case Code::Empty: case Code::Get: case Code::Post:
    case Code::Created: case Code::Content: case Code::NotFound:
      return true;
  }
  return false;
}

/// Up to 8 opaque bytes (tokens, ETags).
class Opaque {
 public:
  static constexpr std::size_t kMax = 8;

  Opaque() = default;
  Opaque(const std::uint8_t* data, std::size_t n) {
    if (n > kMax) throw InvalidParameter("opaque value longer than 8 bytes");
    for (std::size_t i = 0; i < n; ++i) bytes_[i] = data[i];
    size_ = static_cast<std::uint8_t>(n);
  }

  /// Big-endian encoding of `v` in exactly `width` bytes.
  static Opaque from_uint(std::uint64_t v, std::size_t width) {
    if (width > kMax) throw InvalidParameter("opaque value longer than 8 bytes");
    Opaque o;
    o.size_ = static_cast<std::uint8_t>(width);
    for (std::size_t i = 0; i < width; ++i) o.bytes_[width - 1 - i] = static_cast<std::uint8_t>(v >> (8 * i));
    return o;
  }

  std::uint64_t to_uint() const {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < size_; ++i) v = (v << 8) | bytes_[i];
    return v;
  }

  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }
  const std::uint8_t* data() const { return bytes_.data(); }

  friend bool operator==(const Opaque& a, const Opaque& b) {
    if (a.size_ != b.size_) return false;
    for (std::size_t i = 0; i < a.size_; ++i)
      if (a.bytes_[i] != b.bytes_[i]) return false;
    return true;
  }

 private:
  std::array<std::uint8_t, kMax> bytes_{};
  std::uint8_t size_ = 0;
};

using Token = Opaque;

/// Tokens are 4-byte big-endian counters.
inline Token make_token(std::uint32_t counter) { return Opaque::from_uint(counter, 4); }

struct CoapOptions {
  std::optional<std::uint32_t> observe;  // 0..2^24-1
  std::optional<std::uint32_t> max_age;  // seconds
  std::optional<Opaque> etag;            // 1..8 bytes

  friend bool operator==(const CoapOptions&, const CoapOptions&) = default;
};

struct CoapMessage {
  MessageType type = MessageType::NonConfirmable;
  Code code = Code::Empty;
  std::uint16_t message_id = 0;
  Token token;
  CoapOptions options;
  std::uint16_t payload_len = 0;

  friend bool operator==(const CoapMessage&, const CoapMessage&) = default;
};

// ---------------------------------------------------------------------------
// Codec

namespace detail {

inline constexpr std::uint16_t kOptEtag = 4;
inline constexpr std::uint16_t kOptObserve = 6;
inline constexpr std::uint16_t kOptMaxAge = 14;

inline void put_option_nibble_ext(std::vector<std::uint8_t>& out, std::uint32_t v) {
  if (v >= 269) {
    const std::uint32_t x = v - 269;
    out.push_back(static_cast<std::uint8_t>(x >> 8));
    out.push_back(static_cast<std::uint8_t>(x));
  } else if (v >= 13) {
    out.push_back(static_cast<std::uint8_t>(v - 13));
  }
}

inline std::uint8_t option_nibble(std::uint32_t v) { return v >= 269 ? 14 : v >= 13 ? 13 : static_cast<std::uint8_t>(v); }

inline void put_option(std::vector<std::uint8_t>& out, std::uint16_t& last, std::uint16_t number,
                       const std::uint8_t* value, std::size_t len) {
  const std::uint32_t delta = number - last;
  last = number;
  out.push_back(static_cast<std::uint8_t>(option_nibble(delta) << 4 | option_nibble(static_cast<std::uint32_t>(len))));
  put_option_nibble_ext(out, delta);
  put_option_nibble_ext(out, static_cast<std::uint32_t>(len));
  out.insert(out.end(), value, value + len);
}

// Minimal-length big-endian unsigned option value (0 encodes as empty).
inline std::vector<std::uint8_t> uint_value(std::uint32_t v) {
  std::vector<std::uint8_t> bytes;
  while (v != 0) {
    bytes.insert(bytes.begin(), static_cast<std::uint8_t>(v & 0xFF));
    v >>= 8;
  }
  return bytes;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const CoapMessage& msg) {
  if (msg.token.size() > 8) throw InvalidParameter("encode: token longer than 8 bytes");
  if (msg.options.observe && *msg.options.observe >= (1u << 24))
    throw InvalidParameter("encode: observe value exceeds 24 bits");
  if (msg.options.etag && (msg.options.etag->empty() || msg.options.etag->size() > 8))
    throw InvalidParameter("encode: etag must be 1..8 bytes");

  std::vector<std::uint8_t> out;
  out.reserve(4 + msg.token.size() + 16 + msg.payload_len);
  out.push_back(static_cast<std::uint8_t>(1u << 6 | static_cast<unsigned>(msg.type) << 4 | msg.token.size()));
  out.push_back(static_cast<std::uint8_t>(msg.code));
  out.push_back(static_cast<std::uint8_t>(msg.message_id >> 8));
  out.push_back(static_cast<std::uint8_t>(msg.message_id & 0xFF));
  out.insert(out.end(), msg.token.data(), msg.token.data() + msg.token.size());

  std::uint16_t last = 0;
  if (msg.options.etag) detail::put_option(out, last, detail::kOptEtag, msg.options.etag->data(), msg.options.etag->size());
  if (msg.options.observe) {
    const auto v = detail::uint_value(*msg.options.observe);
    detail::put_option(out, last, detail::kOptObserve, v.data(), v.size());
  }
  if (msg.options.max_age) {
    const auto v = detail::uint_value(*msg.options.max_age);
    detail::put_option(out, last, detail::kOptMaxAge, v.data(), v.size());
  }
  if (msg.payload_len > 0) {
    out.push_back(0xFF);
    out.insert(out.end(), msg.payload_len, std::uint8_t{0});
  }
  return out;
}

/// The fixed header plus token only.
inline std::vector<std::uint8_t> encode_header(const CoapMessage& msg) {
  auto bytes = encode(msg);
  bytes.resize(4 + msg.token.size());
  return bytes;
}

inline CoapMessage decode(const std::vector<std::uint8_t>& in) {
  if (in.size() < 4) throw DecodeError("decode: shorter than the 4-byte header");
  if ((in[0] >> 6) != 1) throw DecodeError("decode: unsupported version");
  const std::size_t tkl = in[0] & 0x0F;
  if (tkl > 8) throw DecodeError("decode: token length > 8");
  if (!is_known_code(in[1])) throw DecodeError("decode: unsupported code");

  CoapMessage msg;
  msg.type = static_cast<MessageType>((in[0] >> 4) & 0x03);
  msg.code = static_cast<Code>(in[1]);
  msg.message_id = static_cast<std::uint16_t>(in[2] << 8 | in[3]);
  std::size_t pos = 4;
  if (in.size() < pos + tkl) throw DecodeError("decode: truncated token");
  msg.token = Opaque(in.data() + pos, tkl);
  pos += tkl;

  auto read_ext = [&](std::uint8_t nibble) -> std::uint32_t {
    if (nibble < 13) return nibble;
    if (nibble == 13) {
      if (pos >= in.size()) throw DecodeError("decode: truncated option");
      return 13u + in[pos++];
    }
    if (nibble == 14) {
      if (pos + 1 >= in.size()) throw DecodeError("decode: truncated option");
      const std::uint32_t v = 269u + (std::uint32_t{in[pos]} << 8 | in[pos + 1]);
      pos += 2;
      return v;
    }
    throw DecodeError("decode: reserved option nibble");
  };

  std::uint32_t number = 0;
  while (pos < in.size()) {
    const std::uint8_t b = in[pos++];
    if (b == 0xFF) {
      const std::size_t n = in.size() - pos;
      if (n == 0) throw DecodeError("decode: payload marker with empty payload");
      if (n > 0xFFFF) throw DecodeError("decode: payload too large");
      msg.payload_len = static_cast<std::uint16_t>(n);
      break;
    }
    number += read_ext(static_cast<std::uint8_t>(b >> 4));
    const std::uint32_t len = read_ext(static_cast<std::uint8_t>(b & 0x0F));
    if (pos + len > in.size()) throw DecodeError("decode: truncated option value");
    const std::uint8_t* v = in.data() + pos;
    pos += len;
    auto as_uint = [&]() -> std::uint32_t {
      if (len > 4) throw DecodeError("decode: uint option longer than 4 bytes");
      std::uint32_t x = 0;
      for (std::uint32_t i = 0; i < len; ++i) x = (x << 8) | v[i];
      return x;
    };
    switch (number) {
      case detail::kOptEtag:
        if (len < 1 || len > 8) throw DecodeError("decode: etag length");
        msg.options.etag = Opaque(v, len);
        break;
      case detail::kOptObserve:
        if (len > 3) throw DecodeError("decode: observe longer than 3 bytes");
        msg.options.observe = as_uint();
        break;
      case detail::kOptMaxAge:
        msg.options.max_age = as_uint();
        break;
      default:
        throw DecodeError("decode: unsupported option " + std::to_string(number));
    }
  }
  return msg;
}

// ---------------------------------------------------------------------------
// Transmission parameters and confirmable retransmission

struct TransmissionParams {
  SimTime ack_timeout = SimTime::whole_seconds(2);
  double ack_random_factor = 1.5;
  int max_retransmit = 4;
  SimTime default_leisure = SimTime::whole_seconds(5);
  SimTime max_transmit_span = SimTime::whole_seconds(45);
  SimTime processing_delay = SimTime::whole_seconds(2);
  SimTime max_rtt = SimTime::whole_seconds(202);

  /// ack_timeout * ack_random_factor * (2^max_retransmit - 1)
  SimTime derived_transmit_span() const {
    return SimTime::seconds(ack_timeout.to_seconds() * ack_random_factor *
                            static_cast<double>((std::int64_t{1} << max_retransmit) - 1));
  }

  bool consistent() const { return derived_transmit_span() == max_transmit_span; }

  /// Window in which a message ID must not be reused.
  SimTime exchange_lifetime() const { return max_transmit_span + max_rtt; }
};

struct RetransmissionSchedule {
  // Wait before each retransmission, first to last; each doubles the previous.
  std::vector<SimTime> timeouts;
  // Offset of the last retransmission from the first transmission.
  SimTime span;
  // Offset at which the sender stops waiting for an acknowledgment.
  SimTime give_up_at;
};

/// Timeout sequence for one confirmable message. The initial timeout is
/// uniform on [ack_timeout, ack_timeout * ack_random_factor] unless
/// `forced_factor` pins the multiplier.
inline RetransmissionSchedule retransmission_schedule(const TransmissionParams& params, RngStream& rng,
                                                      std::optional<double> forced_factor = std::nullopt) {
  const double factor = forced_factor ? *forced_factor : 1.0 + rng.unit() * (params.ack_random_factor - 1.0);
  SimTime timeout = SimTime::seconds(params.ack_timeout.to_seconds() * factor);
  RetransmissionSchedule s;
  for (int i = 0; i < params.max_retransmit; ++i) {
    s.timeouts.push_back(timeout);
    s.span += timeout;
    timeout = timeout * 2;
  }
  s.give_up_at = s.span + timeout;
  return s;
}

/// Per-message confirmable state: stop-and-wait with doubling timeout.
struct RetxState {
  int attempts_made = 0;  // retransmissions so far
  SimTime current_timeout;
  SimTime give_up_at;

  static RetxState start(SimTime now, SimTime initial_timeout, const TransmissionParams& p) {
    RetxState s;
    s.current_timeout = initial_timeout;
    SimTime total = SimTime::zero();
    SimTime t = initial_timeout;
    for (int i = 0; i <= p.max_retransmit; ++i) {
      total += t;
      t = t * 2;
    }
    s.give_up_at = now + total;
    return s;
  }

  /// Called when the current timeout expires. Returns false once the
  /// retransmission budget is spent.
  bool on_timeout(const TransmissionParams& p) {
    if (attempts_made >= p.max_retransmit) return false;
    ++attempts_made;
    current_timeout = current_timeout * 2;
    return true;
  }
};

// ---------------------------------------------------------------------------
// Message IDs and duplicate detection

class MessageIdAllocator {
 public:
  explicit MessageIdAllocator(SimTime lifetime, std::uint16_t first = 0) : lifetime_(lifetime), next_(first) {}

  std::uint16_t next(SimTime now) {
    expire(now);
    if (in_use_.size() >= 65536) throw Backpressure("message id space exhausted within lifetime window");
    std::uint16_t id = next_;
    while (in_use_.count(id)) ++id;
    next_ = static_cast<std::uint16_t>(id + 1);
    in_use_.insert(id);
    issued_.push_back({now, id});
    return id;
  }

 private:
  void expire(SimTime now) {
    while (!issued_.empty() && now - issued_.front().first >= lifetime_) {
      in_use_.erase(issued_.front().second);
      issued_.pop_front();
    }
  }

  SimTime lifetime_;
  std::uint16_t next_;
  std::unordered_set<std::uint16_t> in_use_;
  std::deque<std::pair<SimTime, std::uint16_t>> issued_;
};

/// Flags a (source, message ID) pair seen again within the lifetime window.
class DuplicateFilter {
 public:
  explicit DuplicateFilter(SimTime lifetime) : lifetime_(lifetime) {}

  /// Returns true if the message is new and should be processed.
  bool accept(std::uint32_t source, std::uint16_t message_id, SimTime now) {
    while (!seen_order_.empty() && now - seen_order_.front().first >= lifetime_) {
      seen_.erase(seen_order_.front().second);
      seen_order_.pop_front();
    }
    const std::uint64_t key = std::uint64_t{source} << 16 | message_id;
    if (!seen_.insert(key).second) {
      ++duplicates_;
      return false;
    }
    seen_order_.push_back({now, key});
    return true;
  }

  std::uint64_t duplicates() const { return duplicates_; }

 private:
  SimTime lifetime_;
  std::unordered_set<std::uint64_t> seen_;
  std::deque<std::pair<SimTime, std::uint64_t>> seen_order_;
  std::uint64_t duplicates_ = 0;
};

// ---------------------------------------------------------------------------
// Multicast tokens

struct TokenEntry {
  Token token;
  SimTime issued_at;
  std::uint64_t mget_seq = 0;
  int release_after = 1;
};

enum class TokenMatch { Matched, Released, Unknown };

/// Tokens of outstanding MGETs. The token of MGET k is released when MGET
/// k + release_after is issued; replies carrying it afterwards are unmatched.
class TokenTable {
 public:
  void issue(const TokenEntry& entry) {
    for (auto it = live_.begin(); it != live_.end();) {
      if (it->second.mget_seq + static_cast<std::uint64_t>(it->second.release_after) <= entry.mget_seq) {
        released_.insert(it->first);
        it = live_.erase(it);
      } else {
        ++it;
      }
    }
    live_[entry.token.to_uint()] = entry;
  }

  TokenMatch match(const Token& token) const {
    const auto key = token.to_uint();
    if (live_.count(key)) return TokenMatch::Matched;
    if (released_.count(key)) return TokenMatch::Released;
    return TokenMatch::Unknown;
  }

  const TokenEntry* find(const Token& token) const {
    auto it = live_.find(token.to_uint());
    return it == live_.end() ? nullptr : &it->second;
  }

  std::size_t live() const { return live_.size(); }

 private:
  std::unordered_map<std::uint64_t, TokenEntry> live_;
  std::unordered_set<std::uint64_t> released_;
};

/// Number of subsequent MGETs after which a token may be released, for a
/// leisure with bounded support [0, leisure_max] and MGETs spaced at least
/// min_mget_gap apart: ceil(leisure_max / min_mget_gap), at least 1.
inline int token_release_count(SimTime leisure_max, SimTime min_mget_gap, double epsilon) {
  if (min_mget_gap <= SimTime::zero()) throw InvalidParameter("token_release_count: min_mget_gap must be > 0");
  if (leisure_max < SimTime::zero()) throw InvalidParameter("token_release_count: leisure_max must be >= 0");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw InvalidParameter("token_release_count: epsilon must be in (0,1)");
  const std::int64_t m = (leisure_max.ticks() + min_mget_gap.ticks() - 1) / min_mget_gap.ticks();
  return static_cast<int>(std::max<std::int64_t>(1, m));
}

/// General form: smallest m >= 1 with P(reply delay > m * min_mget_gap) <= epsilon,
/// where `tail(x)` = P(delay > x).
inline int token_release_count(const std::function<double(SimTime)>& tail, SimTime min_mget_gap, double epsilon,
                               int m_cap = 1 << 20) {
  if (min_mget_gap <= SimTime::zero()) throw InvalidParameter("token_release_count: min_mget_gap must be > 0");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw InvalidParameter("token_release_count: epsilon must be in (0,1)");
  for (int m = 1; m <= m_cap; ++m)
    if (tail(min_mget_gap * m) <= epsilon) return m;
  throw InvalidParameter("token_release_count: tail does not fall below epsilon");
}

}  // namespace coapsim
