#include "spnas/latency.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "spnas/error.hpp"

namespace spnas {

namespace {

constexpr int kKernels[] = {3, 5};
constexpr int kExpansions[] = {3, 6};
constexpr double kSes[] = {0.0, 0.25, 0.5};

std::string tuple_str(int layer, int k, int e, double se) {
  std::ostringstream os;
  os << "(layer=" << layer << ", k=" << k << ", e=" << e << ", se=" << se << ")";
  return os.str();
}

}  // namespace

double LatencyTable::at(int layer, int kernel, int expansion, double se) const {
  if (layer < 0 || layer >= num_layers())
    throw ConfigError("latency table has no layer " + std::to_string(layer));
  return layers[layer].at(kernel, expansion, se);
}

double LatencyTable::lookup(int layer, const MBConvType& type) const {
  if (type.skip) return 0.0;
  return at(layer, type.kernel, type.expansion, type.se);
}

std::vector<ScalingFactor> LatencyTable::scaling_factors() const {
  std::vector<ScalingFactor> out;
  for (int i = 0; i < num_layers(); ++i)
    for (int k : kKernels)
      for (int e : kExpansions)
        out.push_back({i, k, e, layers[i].scale(k, e, 0.25), layers[i].scale(k, e, 0.5)});
  return out;
}

void LatencyTable::require_layers(int n) const {
  if (num_layers() != n)
    throw ConfigError("latency table covers " + std::to_string(num_layers()) + " layers, search space has " +
                      std::to_string(n));
}

nlohmann::json LatencyTable::to_json() const {
  nlohmann::json entries = nlohmann::json::array();
  for (int i = 0; i < num_layers(); ++i)
    for (int k : kKernels)
      for (int e : kExpansions)
        for (double se : kSes) entries.push_back({{"layer", i}, {"k", k}, {"e", e}, {"se", se}, {"ms", at(i, k, e, se)}});
  return {{"version", 1}, {"fixed_overhead_ms", fixed_overhead_ms}, {"entries", entries}};
}

LatencyTable parse_lut(const nlohmann::json& j, const IngestOptions& opts, LutIssues* issues) {
  if (!j.is_object()) throw FormatError("LUT: top level must be an object");
  if (!j.contains("version") || j["version"] != 1) throw FormatError("LUT: unsupported or missing version (expected 1)");
  if (!j.contains("fixed_overhead_ms") || !j["fixed_overhead_ms"].is_number())
    throw FormatError("LUT: missing numeric fixed_overhead_ms");
  if (!j.contains("entries") || !j["entries"].is_array()) throw FormatError("LUT: missing entries array");

  LatencyTable t;
  t.fixed_overhead_ms = j["fixed_overhead_ms"].get<double>();
  if (!(t.fixed_overhead_ms >= 0.0) || !std::isfinite(t.fixed_overhead_ms))
    throw FormatError("LUT: fixed_overhead_ms must be finite and >= 0");

  std::vector<std::array<bool, 12>> seen;
  std::size_t idx = 0;
  for (const auto& entry : j["entries"]) {
    const std::string where = "LUT entry " + std::to_string(idx++);
    for (const char* key : {"layer", "k", "e", "se", "ms"})
      if (!entry.contains(key) || !entry[key].is_number()) throw FormatError(where + ": missing numeric '" + key + "'");
    if (!entry["layer"].is_number_integer() || !entry["k"].is_number_integer() || !entry["e"].is_number_integer())
      throw FormatError(where + ": layer, k and e must be integers");
    const int layer = entry["layer"].get<int>();
    const int k = entry["k"].get<int>();
    const int e = entry["e"].get<int>();
    const double se = entry["se"].get<double>();
    const double ms = entry["ms"].get<double>();
    if (layer < 0 || layer > 4096) throw FormatError(where + ": layer out of range");
    if (k != 3 && k != 5) throw FormatError(where + ": k must be 3 or 5");
    if (e != 3 && e != 6) throw FormatError(where + ": e must be 3 or 6");
    if (se != 0.0 && se != 0.25 && se != 0.5) throw FormatError(where + ": se must be 0, 0.25 or 0.5");
    if (!(ms > 0.0) || !std::isfinite(ms)) throw FormatError(where + ": runtime must be finite and > 0");
    if (layer >= t.num_layers()) {
      t.layers.resize(layer + 1);
      seen.resize(layer + 1);
    }
    const int slot = LayerLatency::index(k, e, se);
    if (seen[layer][slot]) throw FormatError("LUT: duplicate entry " + tuple_str(layer, k, e, se));
    seen[layer][slot] = true;
    t.layers[layer].ms[slot] = ms;
  }
  if (t.layers.empty()) throw FormatError("LUT: no entries");

  std::vector<std::string> missing;
  for (int i = 0; i < t.num_layers(); ++i)
    for (int k : kKernels)
      for (int e : kExpansions)
        for (double se : kSes)
          if (!seen[i][LayerLatency::index(k, e, se)]) missing.push_back(tuple_str(i, k, e, se));
  if (!missing.empty()) {
    std::string msg = "LUT incomplete, missing";
    for (const auto& m : missing) msg += " " + m;
    throw FormatError(msg);
  }

  std::vector<std::string> violations;
  auto check = [&](int i, int k1, int e1, double s1, int k2, int e2, double s2) {
    if (t.at(i, k2, e2, s2) < t.at(i, k1, e1, s1))
      violations.push_back(tuple_str(i, k2, e2, s2) + " < " + tuple_str(i, k1, e1, s1));
  };
  for (int i = 0; i < t.num_layers(); ++i)
    for (double se : kSes) {
      for (int e : kExpansions) check(i, 3, e, se, 5, e, se);
      for (int k : kKernels) check(i, k, 3, se, k, 6, se);
    }
  for (int i = 0; i < t.num_layers(); ++i)
    for (int k : kKernels)
      for (int e : kExpansions) {
        check(i, k, e, 0.0, k, e, 0.25);
        check(i, k, e, 0.25, k, e, 0.5);
      }
  if (!violations.empty()) {
    if (opts.reject_non_monotone) throw FormatError("LUT not monotone: " + violations.front());
    if (issues)
      for (auto& v : violations) issues->warnings.push_back("LUT not monotone: " + v);
  }
  return t;
}

LatencyTable ingest_lut(const std::string& path, const IngestOptions& opts, LutIssues* issues) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open LUT file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("LUT '" + path + "': " + e.what());
  }
  return parse_lut(j, opts, issues);
}

void write_lut(const LatencyTable& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write LUT file '" + path + "'");
  out << table.to_json().dump(2) << "\n";
}

double mbconv_macs(const LayerSpec& s, int kernel, int expansion, double se) {
  const double e_ch = s.expanded_channels(expansion);
  const double in_px = static_cast<double>(s.in_size) * s.in_size;
  const double out_px = static_cast<double>(s.out_size()) * s.out_size();
  const double main = in_px * s.in_channels * e_ch + out_px * e_ch * kernel * kernel + out_px * e_ch * s.out_channels;
  return main + se_path_macs(s, expansion, se);
}

double se_path_macs(const LayerSpec& s, int expansion, double se) {
  if (se == 0.0) return 0.0;
  const double e_ch = s.expanded_channels(expansion);
  const double out_px = static_cast<double>(s.out_size()) * s.out_size();
  // pooling + channel scaling, then squeeze and expand matrix products
  return 2.0 * out_px * e_ch + 2.0 * e_ch * s.squeeze_channels(se);
}

double fixed_macs(const SearchSpaceConfig& cfg) {
  const double stem_px = static_cast<double>(cfg.stem_out_size()) * cfg.stem_out_size();
  double macs = stem_px * cfg.in_channels * cfg.stem_channels * 9.0;
  const auto specs = cfg.layer_specs();
  const int last_ch = specs.empty() ? cfg.stem_channels : specs.back().out_channels;
  const double last_px = specs.empty() ? stem_px : static_cast<double>(specs.back().out_size()) * specs.back().out_size();
  macs += last_px * last_ch * cfg.head_channels + static_cast<double>(cfg.head_channels) * cfg.classes;
  return macs;
}

LatencyTable lutgen(const SearchSpaceConfig& cfg, std::uint64_t seed, double noise, double ms_per_mac) {
  cfg.validate();
  if (!(noise >= 0.0 && noise <= 0.2)) throw ConfigError("lutgen noise must be in [0, 0.2]");
  if (!(ms_per_mac > 0.0)) throw ConfigError("lutgen ms_per_mac must be > 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  LatencyTable t;
  t.fixed_overhead_ms = ms_per_mac * fixed_macs(cfg);
  for (const LayerSpec& s : cfg.layer_specs()) {
    LayerLatency layer;
    for (int k : kKernels)
      for (int e : kExpansions) {
        const double u = noise * unit(rng);
        for (double se : kSes) layer.at(k, e, se) = ms_per_mac * mbconv_macs(s, k, e, se) * (1.0 + u);
      }
    t.layers.push_back(layer);
  }
  return t;
}

GateValues hard_gates(const MBConvType& type) {
  GateValues g;
  if (type.skip) return g;
  g.e3 = 1.0;
  g.k5 = type.kernel == 5 ? 1.0 : 0.0;
  g.e6 = type.expansion == 6 ? 1.0 : 0.0;
  g.se25 = type.se > 0.0 ? 1.0 : 0.0;
  g.se50 = type.se == 0.5 ? 1.0 : 0.0;
  return g;
}

double layer_runtime(const MBConvType& type, const LayerLatency& t, RuntimeForm form) {
  return layer_runtime<double>(hard_gates(type), t, form);
}

Var network_runtime(Graph& g, const std::vector<Gates>& gates, const LatencyTable& table, RuntimeForm form) {
  table.require_layers(static_cast<int>(gates.size()));
  Var total = g.scalar(table.fixed_overhead_ms);
  for (std::size_t i = 0; i < gates.size(); ++i) total = total + layer_runtime<Var>(gates[i], table.layers[i], form);
  return total;
}

double network_runtime(const Architecture& arch, const LatencyTable& table, RuntimeForm form) {
  table.require_layers(static_cast<int>(arch.size()));
  double total = table.fixed_overhead_ms;
  for (std::size_t i = 0; i < arch.size(); ++i) total += layer_runtime(arch[i], table.layers[i], form);
  return total;
}

std::pair<double, double> runtime_bounds(const SearchSpaceConfig& cfg, const LatencyTable& table) {
  const auto specs = cfg.layer_specs();
  table.require_layers(static_cast<int>(specs.size()));
  double lo = table.fixed_overhead_ms, hi = table.fixed_overhead_ms;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    double mn = std::numeric_limits<double>::infinity(), mx = 0.0;
    for (const MBConvType& type : MBConvType::candidates(specs[i].skippable())) {
      const double r = layer_runtime(type, table.layers[i]);
      mn = std::min(mn, r);
      mx = std::max(mx, r);
    }
    lo += mn;
    hi += mx;
  }
  return {lo, hi};
}

}  // namespace spnas
