#pragma once

#include "coapsim/sim_core.hpp"
#include "coapsim/mac_phy.hpp"
#include "coapsim/coap.hpp"
#include "coapsim/packet.hpp"
#include "coapsim/metrics.hpp"
#include "coapsim/node.hpp"
#include "coapsim/proxy.hpp"
#include "coapsim/scenario.hpp"
