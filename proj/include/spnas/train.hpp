#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "spnas/config.hpp"
#include "spnas/datasets.hpp"
#include "spnas/searchspace.hpp"

namespace spnas {

// Endless minibatches over a fixed index set, reshuffled every epoch. A final
// batch of one sample is folded away (batchnorm needs two).
class BatchStream {
 public:
  BatchStream(std::vector<int> indices, int batch, std::uint64_t seed);

  std::span<const int> next();
  std::size_t batches_per_epoch() const { return bounds_.size(); }

 private:
  void reshuffle();

  std::vector<int> base_, order_;
  std::vector<std::pair<std::size_t, std::size_t>> bounds_;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
};

std::size_t batches_per_epoch(std::size_t n, int batch);

using ForwardFn = std::function<Var(Graph&, Var x, bool training)>;

// Eval-mode top-1 accuracy over `indices`.
double evaluate(const ForwardFn& forward, const Dataset& data, std::span<const int> indices, int batch = 256);

// Resets running statistics and re-estimates them with training-mode forward
// passes over `indices` (no parameter updates).
void recalibrate_batchnorm(const std::vector<BatchNorm*>& bns, const ForwardFn& forward, const Dataset& data,
                           std::span<const int> indices, int batch, std::uint64_t seed);

struct TrainResult {
  double accuracy = 0.0;
  std::size_t steps = 0;
  double final_ce = 0.0;
  std::vector<double> step_seconds;
};

// Plain supervised training of a compact network on the train split; reports
// valid accuracy.
TrainResult train_network(FixedNetwork& net, const Dataset& data, const TrainConfig& cfg, std::uint64_t seed);
TrainResult train_fixed(const SearchSpaceConfig& space, const Architecture& arch, const Dataset& data,
                        const TrainConfig& cfg, std::uint64_t seed);

}  // namespace spnas
