#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "spnas/autodiff.hpp"
#include "spnas/ops.hpp"
#include "spnas/searchspace.hpp"

namespace spnas {

// Runtimes of the 12 non-skip MBConv types of one layer, in ms.
struct LayerLatency {
  std::array<double, 12> ms{};

  static int index(int kernel, int expansion, double se) {
    return ((kernel == 5 ? 1 : 0) * 2 + (expansion == 6 ? 1 : 0)) * 3 + se_index(se);
  }
  double at(int kernel, int expansion, double se) const { return ms[index(kernel, expansion, se)]; }
  double& at(int kernel, int expansion, double se) { return ms[index(kernel, expansion, se)]; }
  // Relative runtime increase of adding the SE path: R_{k,e,se} / R_{k,e,0}.
  double scale(int kernel, int expansion, double se) const { return at(kernel, expansion, se) / at(kernel, expansion, 0.0); }
  friend bool operator==(const LayerLatency&, const LayerLatency&) = default;
};

struct ScalingFactor {
  int layer = 0, kernel = 3, expansion = 3;
  double se25 = 1.0, se50 = 1.0;
};

class LatencyTable {
 public:
  double fixed_overhead_ms = 0.0;
  std::vector<LayerLatency> layers;

  int num_layers() const { return static_cast<int>(layers.size()); }
  std::size_t entry_count() const { return 12 * layers.size(); }
  double at(int layer, int kernel, int expansion, double se) const;
  // Runtime of a type by direct lookup; 0 for the skip-op.
  double lookup(int layer, const MBConvType& type) const;
  // One record per (layer, k, e) holding both SE factors.
  std::vector<ScalingFactor> scaling_factors() const;
  void require_layers(int n) const;

  nlohmann::json to_json() const;
  friend bool operator==(const LatencyTable&, const LatencyTable&) = default;
};

struct LutIssues {
  std::vector<std::string> warnings;
};

struct IngestOptions {
  bool reject_non_monotone = false;
};

// Validates schema, positivity, completeness and monotonicity. Missing entries
// are a FormatError naming every gap; monotonicity violations are warnings
// unless `reject_non_monotone`.
LatencyTable parse_lut(const nlohmann::json& j, const IngestOptions& opts = {}, LutIssues* issues = nullptr);
LatencyTable ingest_lut(const std::string& path, const IngestOptions& opts = {}, LutIssues* issues = nullptr);
void write_lut(const LatencyTable& table, const std::string& path);

// Analytic multiply-accumulate counts per image.
double mbconv_macs(const LayerSpec& spec, int kernel, int expansion, double se);
double se_path_macs(const LayerSpec& spec, int expansion, double se);
double fixed_macs(const SearchSpaceConfig& cfg);

inline constexpr double kDefaultMsPerMac = 1e-5;

// Synthetic table: ms = alpha * MACs(k, e) * (1 + SE MAC fraction) * (1 + u),
// with u ~ U(-noise, noise) drawn once per (layer, k, e) so every SE factor
// stays the analytic ratio (>= 1).
LatencyTable lutgen(const SearchSpaceConfig& cfg, std::uint64_t seed, double noise,
                    double ms_per_mac = kDefaultMsPerMac);

// How the (k, e) runtime is composed from the indicators.
enum class RuntimeForm {
  // Per-kernel expansion interpolation: exact on every table.
  exact,
  // Expansion interpolation on the 5x5 entries rescaled by R_{3x3,6}/R_{5x5,6},
  // with se = 0.5 folded into the se = 0.25 factor; exact only when the
  // kernel-size ratio is independent of e and s_{.,0.25} == s_{.,0.5}.
  ratio,
};

// Layer runtime as a multilinear function of the five gates. Works for plain
// doubles (hard decisions) and for graph nodes (relaxed, differentiable).
template <class S>
S layer_runtime(const GateSet<S>& g, const LayerLatency& t, RuntimeForm form = RuntimeForm::exact) {
  S r_ke;
  if (form == RuntimeForm::exact) {
    S r_k3 = g.e3 * (t.at(3, 3, 0.0) + g.e6 * (t.at(3, 6, 0.0) - t.at(3, 3, 0.0)));
    S r_k5 = g.e3 * (t.at(5, 3, 0.0) + g.e6 * (t.at(5, 6, 0.0) - t.at(5, 3, 0.0)));
    r_ke = (1.0 - g.k5) * r_k3 + g.k5 * r_k5;
  } else {
    const double ratio = t.at(3, 6, 0.0) / t.at(5, 6, 0.0);
    S r_e = g.e3 * (t.at(5, 3, 0.0) + g.e6 * (t.at(5, 6, 0.0) - t.at(5, 3, 0.0)));
    r_ke = ratio * r_e + r_e * ((1.0 - ratio) * g.k5);
  }
  auto se_factor = [&](double se) {
    S s_e6 = g.k5 * t.scale(5, 6, se) + (1.0 - g.k5) * t.scale(3, 6, se);
    S s_e3 = g.k5 * t.scale(5, 3, se) + (1.0 - g.k5) * t.scale(3, 3, se);
    return g.e6 * s_e6 + (1.0 - g.e6) * s_e3;
  };
  S s = form == RuntimeForm::exact ? (1.0 - g.se50) * se_factor(0.25) + g.se50 * se_factor(0.5) : se_factor(0.25);
  return (1.0 - g.se25) * r_ke + g.se25 * (s * r_ke);
}

// Hard gate values that select `type` (skip: everything off).
GateValues hard_gates(const MBConvType& type);

double layer_runtime(const MBConvType& type, const LayerLatency& t, RuntimeForm form = RuntimeForm::exact);
Var network_runtime(Graph& g, const std::vector<Gates>& gates, const LatencyTable& table,
                    RuntimeForm form = RuntimeForm::exact);
double network_runtime(const Architecture& arch, const LatencyTable& table, RuntimeForm form = RuntimeForm::exact);

// Smallest and largest hard-mode runtime reachable in the search space.
std::pair<double, double> runtime_bounds(const SearchSpaceConfig& cfg, const LatencyTable& table);

}  // namespace spnas
