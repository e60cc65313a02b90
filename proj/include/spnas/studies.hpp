#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "spnas/config.hpp"
#include "spnas/datasets.hpp"
#include "spnas/latency.hpp"
#include "spnas/search.hpp"

namespace spnas {

struct RuntimeWindow {
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
  bool contains(double r) const { return r >= lo && r <= hi; }
};

// Uniform architectures (each layer uniform over its candidate types) kept
// only when their hard-mode runtime falls inside the window.
class RejectionSampler {
 public:
  RejectionSampler(const SearchSpaceConfig& space, const LatencyTable& lut, RuntimeWindow window, std::uint64_t seed,
                   std::size_t max_attempts = 100000);

  Architecture draw_uniform();
  bool accepts(const Architecture& arch) const;
  // InfeasibleError naming the achievable runtime range when the window
  // misses it or no draw lands inside within max_attempts.
  Architecture sample();

  std::size_t attempts() const { return attempts_; }
  std::size_t accepted() const { return accepted_; }

 private:
  [[noreturn]] void infeasible(const std::string& why) const;

  std::vector<std::vector<MBConvType>> candidates_;
  const LatencyTable& lut_;
  RuntimeWindow window_;
  std::pair<double, double> bounds_;
  std::size_t max_attempts_;
  std::mt19937_64 rng_;
  std::size_t attempts_ = 0, accepted_ = 0;
};

// Hard-mode runtimes of every architecture in the space, ascending. The space
// must hold at most `limit` architectures.
std::vector<double> enumerate_runtimes(const SearchSpaceConfig& space, const LatencyTable& lut,
                                       std::size_t limit = 20'000'000);
// Nearest-rank quantile q in [0, 1] of the enumerated runtimes.
double runtime_quantile(const SearchSpaceConfig& space, const LatencyTable& lut, double q);

struct Summary {
  std::size_t n = 0;
  double mean = 0.0, var = 0.0;  // sample variance (n - 1); 0 for n < 2
  double stddev() const;
};
Summary summarize(const std::vector<double>& xs);

struct ArchitectureRun {
  std::uint64_t seed = 0;
  Architecture architecture;
  double runtime_ms = 0.0;
  double accuracy = 0.0;
  TypeDistribution distribution;  // softmax variants
};
nlohmann::json to_json(const ArchitectureRun& r);

struct RandomSearchReport {
  std::vector<ArchitectureRun> samples;
  std::size_t best = 0;
  Summary accuracy, runtime;
  std::size_t attempts = 0, accepted = 0;
  double acceptance_rate() const { return attempts ? static_cast<double>(accepted) / attempts : 0.0; }
  nlohmann::json to_json() const;
};

// Sample j is drawn by a sampler seeded with seed + j and proxy-trained with
// seed + j.
ArchitectureRun random_sample(const ExperimentConfig& cfg, RuntimeWindow window, const Dataset& data,
                              const LatencyTable& lut, std::uint64_t seed, std::size_t* attempts = nullptr);
RandomSearchReport random_search(const ExperimentConfig& cfg, int n_samples, RuntimeWindow window, const Dataset& data,
                                 const LatencyTable& lut, std::uint64_t seed, int workers = 1);

struct VarianceOptions {
  std::vector<std::uint64_t> seeds;  // empty: 0 .. n_runs - 1
  int n_runs = 20;
  int intra_samples = 20;
  int workers = 1;
  RuntimeWindow window;  // random variant only
};

struct VarianceCell {
  Variant variant = Variant::single_sigmoid;
  std::string kind;  // "inter" or "intra"
  std::vector<ArchitectureRun> runs;
  Summary accuracy, runtime;
};

struct VarianceReport {
  std::vector<VarianceCell> cells;
  nlohmann::json to_json() const;
  const VarianceCell* find(Variant v, const std::string& kind) const;
};

// One search per (variant, seed); softmax variants additionally proxy-train
// architectures sampled from the best run's learned distribution. Runs are
// independent and keyed by seed, so the report does not depend on `workers`.
VarianceReport variance_study(const ExperimentConfig& cfg, const std::vector<Variant>& variants,
                              const VarianceOptions& opts, const Dataset& data, const LatencyTable& lut);

// Draws an architecture layer by layer from a learned type distribution.
Architecture sample_distribution(const TypeDistribution& d, std::mt19937_64& rng);

struct AblationRow {
  std::string name;
  double accuracy = 0.0;
};

struct AblationReport {
  std::vector<AblationRow> rows;  // standalone 3x3, standalone 5x5, shared 3x3 subset, shared 5x5
  nlohmann::json to_json() const;
};

// Forward of the supernet restricted to MBConv-k-6-0 in every layer via fixed
// external gates (k5 = 0 selects the inner 3x3 subset).
Var shared_forward(Supernet& net, Graph& g, Var x, bool k5, bool training);

// Two standalone networks, and one superkernel network trained on the sum of
// both subsets' losses per batch.
AblationReport shared_subset_ablation(const ExperimentConfig& cfg, const Dataset& data, std::uint64_t seed);

// Runs jobs 0..n-1 on `workers` threads; the first failing job's exception
// (by index) is rethrown after all threads finish.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& job);

}  // namespace spnas
