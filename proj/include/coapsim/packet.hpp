#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "coapsim/coap.hpp"
#include "coapsim/mac_phy.hpp"

namespace coapsim {

enum class Scheme { PostGet, Mget, ObserveGet };

inline std::string_view to_string(Scheme s) {
  switch (s) {
    case Scheme::PostGet: return "post-get";
    case Scheme::Mget: return "mget";
    case Scheme::ObserveGet: return "observe-get";
  }
  return "?";
}

inline std::optional<Scheme> parse_scheme(std::string_view s) {
  if (s == "post-get") return Scheme::PostGet;
  if (s == "mget") return Scheme::Mget;
  if (s == "observe-get" || s == "observe") return Scheme::ObserveGet;
  return std::nullopt;
}

/// MAC payload: a CoAP message plus simulation bookkeeping that never goes
/// on the wire.
struct Packet {
  CoapMessage msg;
  std::uint32_t resource = 0;  // stands in for the Uri-Path
  SimTime leisure{};           // delay a node held back an MGET reply
};

using Frame = MacFrame<Packet>;
using Mac = CsmaMac<Packet>;
using Medium = Channel<Packet>;

/// Frame lengths on the air, in bytes.
struct FrameSizes {
  int data = 127;     // POST, 2.05 replies, notifications
  int request = 20;   // GET, MGET
  int control = 20;   // 2.01 Created, CoAP ACK

  void validate() const {
    for (int v : {data, request, control})
      if (v < 1 || v > kMaxFrameBytes) throw InvalidParameter("frame sizes must be in [1, 127]");
  }
};

}  // namespace coapsim
