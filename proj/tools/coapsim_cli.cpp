#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "coapsim/scenario.hpp"

using namespace coapsim;

namespace {

std::vector<Scheme> parse_schemes(const std::string& text) {
  if (text == "all") return {Scheme::PostGet, Scheme::Mget, Scheme::ObserveGet};
  std::vector<Scheme> out;
  std::stringstream ss(text);
  for (std::string s; std::getline(ss, s, ',');) {
    auto sc = parse_scheme(s);
    if (!sc) throw ConfigError("unknown scheme '" + s + "' (expected post-get, mget, observe-get or all)");
    out.push_back(*sc);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discrete-event simulator of a CoAP caching proxy domain"};
  std::string config_path, scheme_text, nodes_text, sweep_text, out_path;
  std::vector<std::string> settings;
  int seeds = 3;
  std::uint64_t first_seed = 1;
  double duration = 0;
  bool extended = false;
  unsigned jobs = std::max(1u, std::thread::hardware_concurrency());

  app.add_option("--config", config_path, "key = value scenario file");
  app.add_option("--scheme", scheme_text, "post-get, mget, observe-get, a comma list, or all");
  app.add_option("--nodes", nodes_text, "node count or comma list");
  app.add_option("--sweep", sweep_text, "node range start:stop:step");
  app.add_option("--seeds", seeds, "independent seeds per point")->check(CLI::Range(1, 1000));
  app.add_option("--first-seed", first_seed, "first seed value");
  app.add_option("--duration", duration, "simulated seconds (overrides config)");
  app.add_option("--set", settings, "extra key=value overrides");
  app.add_option("--out", out_path, "CSV output file (default stdout)");
  app.add_option("--jobs", jobs, "parallel runs")->check(CLI::Range(1u, 1024u));
  app.add_flag("--extended", extended, "append secondary metric columns");
  CLI11_PARSE(app, argc, argv);

  try {
    ScenarioConfig base;
    if (!config_path.empty()) base = load_config(config_path);
    for (const auto& kv : settings) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      apply_setting(base, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    if (duration > 0) base.sim_duration_s = duration;

    SweepPlan plan;
    plan.schemes = scheme_text.empty() ? std::vector<Scheme>{base.scheme} : parse_schemes(scheme_text);
    if (!sweep_text.empty())
      plan.n_values = parse_n_list(sweep_text);
    else if (!nodes_text.empty())
      plan.n_values = parse_n_list(nodes_text);
    else
      plan.n_values = {base.n_nodes};
    for (int i = 0; i < seeds; ++i) plan.seeds.push_back(first_seed + static_cast<std::uint64_t>(i));
    plan.jobs = jobs;

    const auto rows = sweep(base, plan);
    std::vector<std::string> manifest = {
        "coapsim sweep",
        "sim_duration_s=" + detail::fmt_num(base.sim_duration_s) + " warmup_s=" + detail::fmt_num(base.warmup_s),
        "freshness_threshold_s=" + detail::fmt_num(base.freshness_threshold_s) +
            " mean_lifetime_s=" + detail::fmt_num(base.mean_lifetime_s),
        "seeds=" + std::to_string(first_seed) + ".." + std::to_string(first_seed + seeds - 1)};
    if (out_path.empty()) {
      write_csv(std::cout, rows, extended, manifest);
    } else {
      std::ofstream out(out_path);
      if (!out) throw ConfigError("cannot write '" + out_path + "'");
      write_csv(out, rows, extended, manifest);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
