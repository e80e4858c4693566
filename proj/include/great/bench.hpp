// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "great/complexity.hpp"

namespace great {

/// Image sizes (square) and node counts to sweep, with the fixed block shape.
struct BenchSpec {
  std::vector<std::size_t> sizes{16, 32, 64};
  std::vector<std::size_t> nodes{8, 16, 32, 64};
  std::size_t patch = 4;
  std::size_t channels = 32;
  std::size_t graph_depth = 1;
  std::size_t heads = 1;
  std::size_t repetitions = 3;
  std::size_t max_mha_tokens = 4096;  // larger T is reported analytically only

  static BenchSpec from_json(const nlohmann::json& j) {
    BenchSpec s;
    for (const auto& [key, value] : j.items()) {
      if (key == "sizes") s.sizes = value.get<std::vector<std::size_t>>();
      else if (key == "nodes") s.nodes = value.get<std::vector<std::size_t>>();
      else if (key == "patch") s.patch = value.get<std::size_t>();
      else if (key == "channels") s.channels = value.get<std::size_t>();
      else if (key == "graph_depth") s.graph_depth = value.get<std::size_t>();
      else if (key == "heads") s.heads = value.get<std::size_t>();
      else if (key == "repetitions") s.repetitions = value.get<std::size_t>();
      else if (key == "max_mha_tokens") s.max_mha_tokens = value.get<std::size_t>();
      else throw ConfigError("unknown sweep key \"" + key + "\"");
    }
    if (s.sizes.empty() || s.nodes.empty()) throw ConfigError("sweep needs at least one size and one node count");
    return s;
  }
};

struct BenchRow {
  std::size_t size = 0;
  std::uint64_t tokens = 0;
  std::size_t nodes = 0;
  std::uint64_t greab_state = 0;
  std::uint64_t greab_state_measured = 0;
  std::uint64_t mha_state = 0;
  std::uint64_t mha_state_measured = 0;  // 0 when not executed
  std::uint64_t greab_macs = 0;
  std::uint64_t mha_macs = 0;
  double greab_ms = 0.0;
  double diffusion_ms = 0.0;
  double propagation_ms = 0.0;
  double mha_ms = 0.0;

  nlohmann::json to_json() const {
    return {{"size", size},
            {"tokens", tokens},
            {"nodes", nodes},
            {"greab_state", greab_state},
            {"greab_state_measured", greab_state_measured},
            {"mha_state", mha_state},
            {"mha_state_measured", mha_state_measured},
            {"greab_macs", greab_macs},
            {"mha_macs", mha_macs},
            {"greab_ms", greab_ms},
            {"diffusion_ms", diffusion_ms},
            {"propagation_ms", propagation_ms},
            {"mha_ms", mha_ms}};
  }
};

inline std::vector<BenchRow> run_bench(const BenchSpec& spec) {
  std::vector<BenchRow> rows;
  for (std::size_t size : spec.sizes) {
    bool mha_done = false;
    std::uint64_t mha_measured = 0;
    double mha_ms = 0.0;
    for (std::size_t m : spec.nodes) {
      ModelConfig cfg;
      cfg.height = cfg.width = size;
      cfg.patch = spec.patch;
      cfg.channels = spec.channels;
      cfg.nodes = m;
      cfg.graph_depth = spec.graph_depth;
      cfg.heads = spec.heads;
      const CostReport cost = interaction_cost(cfg);
      // Attention does not depend on M: execute it once per image size.
      const bool run_mha = !mha_done && cost.tokens <= spec.max_mha_tokens;
      const InteractionMeasurement meas = measure_interaction(cfg, spec.repetitions, run_mha);
      if (run_mha) {
        mha_done = true;
        mha_measured = meas.mha_state_entries;
        mha_ms = meas.mha_ms;
      }
      BenchRow row;
      row.size = size;
      row.tokens = cost.tokens;
      row.nodes = m;
      row.greab_state = cost.greab_state_entries;
      row.greab_state_measured = meas.greab_state_entries;
      row.mha_state = cost.mha_state_entries;
      row.mha_state_measured = mha_measured;
      row.greab_macs = cost.greab_macs;
      row.mha_macs = cost.mha_macs;
      row.greab_ms = meas.greab_ms;
      row.diffusion_ms = meas.diffusion_ms;
      row.propagation_ms = meas.propagation_ms;
      row.mha_ms = mha_ms;
      rows.push_back(row);
    }
  }
  return rows;
}

/// Least-squares slope of log(y) against log(x).
inline double log_log_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("log_log_slope: need at least two paired points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

inline std::string format_bench_table(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(6) << "size" << std::setw(8) << "T" << std::setw(6) << "M" << std::setw(12)
     << "greab_st" << std::setw(12) << "measured" << std::setw(14) << "mha_st" << std::setw(14) << "measured"
     << std::setw(14) << "greab_macs" << std::setw(16) << "mha_macs" << std::setw(12) << "greab_ms" << std::setw(12)
     << "diff_ms" << "mha_ms\n";
  os << std::fixed;
  for (const auto& r : rows) {
    os << std::setw(6) << r.size << std::setw(8) << r.tokens << std::setw(6) << r.nodes << std::setw(12)
       << r.greab_state << std::setw(12) << r.greab_state_measured << std::setw(14) << r.mha_state << std::setw(14)
       << (r.mha_state_measured ? std::to_string(r.mha_state_measured) : std::string("-")) << std::setw(14)
       << r.greab_macs << std::setw(16) << r.mha_macs << std::setw(12) << std::setprecision(4) << r.greab_ms
       << std::setw(12) << std::setprecision(5) << r.diffusion_ms << std::setprecision(3) << r.mha_ms << '\n';
  }
  os << "analytical only (not executed):\n";
  for (const auto& [name, formula] : analytical_space_rows()) os << "  " << name << ": " << formula << '\n';
  return os.str();
}

inline std::string format_cost_report(const CostReport& r) {
  std::ostringstream os;
  os << "parameters\n";
  for (const auto& item : r.params) os << "  " << std::left << std::setw(14) << item.name << item.count << '\n';
  os << "  " << std::setw(14) << "total" << r.total_params << '\n';
  os << "interaction (T = " << r.tokens << ")\n";
  os << "  greab macs        " << r.greab_macs << " (projection " << r.greab_projection_macs << ", diffusion "
     << r.greab_diffusion_macs << ", mapping " << r.greab_mapping_macs << ")\n";
  os << "  greab state       " << r.greab_state_entries << "  O(M^2)\n";
  os << "  mha macs          " << r.mha_macs << " (scores " << r.mha_score_macs << ")\n";
  os << "  mha state         " << r.mha_state_entries << "  O(H^2 W^2)\n";
  for (const auto& [name, formula] : r.analytical_rows) os << "  " << name << ": " << formula << '\n';
  return os.str();
}

inline nlohmann::json cost_report_json(const CostReport& r) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& item : r.params) params[item.name] = item.count;
  nlohmann::json analytical = nlohmann::json::object();
  for (const auto& [name, formula] : r.analytical_rows) analytical[name] = formula;
  return {{"params", params},
          {"total_params", r.total_params},
          {"tokens", r.tokens},
          {"greab_macs", r.greab_macs},
          {"greab_projection_macs", r.greab_projection_macs},
          {"greab_diffusion_macs", r.greab_diffusion_macs},
          {"greab_mapping_macs", r.greab_mapping_macs},
          {"greab_state_entries", r.greab_state_entries},
          {"mha_macs", r.mha_macs},
          {"mha_score_macs", r.mha_score_macs},
          {"mha_state_entries", r.mha_state_entries},
          {"analytical", analytical}};
}

}  // namespace great
