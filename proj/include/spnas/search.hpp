#pragma once

#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "spnas/checkpoint.hpp"
#include "spnas/config.hpp"
#include "spnas/datasets.hpp"
#include "spnas/latency.hpp"
#include "spnas/searchspace.hpp"

namespace spnas {

// CE + lambda * log(R). R <= 0 is a NumericError.
double search_loss(double ce, double runtime_ms, double lambda);
Var search_loss(Var ce, Var runtime_ms, double lambda);

struct StepLog {
  std::size_t step = 0;
  double ce = 0.0, runtime_ms = 0.0, loss = 0.0, lr = 0.0, dropout_p = 0.0;
};

// Per layer: every candidate type with its probability under the learned
// architecture distribution (softmax variants only).
using TypeDistribution = std::vector<std::vector<std::pair<MBConvType, double>>>;

struct SearchReport {
  Variant variant = Variant::single_sigmoid;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  std::vector<StepLog> log;
  Architecture architecture;
  double runtime_ms = 0.0;  // hard-mode runtime of `architecture`
  std::optional<double> proxy_accuracy;
  // Step audit: optimizer.step() calls, updates that touched the weights and
  // the architecture parameters, and how often a frozen group got a gradient.
  std::size_t optimizer_steps = 0, weight_steps = 0, arch_steps = 0, frozen_grad_violations = 0;
  TypeDistribution distribution;
  double wall_clock_s = 0.0;
  std::vector<double> step_seconds;

  // Wall-clock time is left out unless asked for so that reports are
  // byte-reproducible.
  nlohmann::json to_json(bool include_wall_clock = false) const;
  std::string log_csv() const;
};

struct ForwardContext {
  bool training = true;
  std::vector<SubsetKeep> keeps;  // empty: keep everything
  std::mt19937_64* noise_rng = nullptr;
  double gumbel_temperature = 0.0;
  const LatencyTable* lut = nullptr;
  RuntimeForm form = RuntimeForm::exact;
};

struct ModelOutput {
  Var logits;
  Var runtime_ms;  // invalid when no LUT was supplied
};

// Architecture logits of one layer for the softmax single-path variant:
// kernel {3, 5}, expansion {skip, 3, 6} ({3, 6} when the layer cannot skip)
// and SE ratio {0, 0.25, 0.5}.
struct SoftmaxParams {
  Parameter kernel, expansion, se;
  bool skippable = true;

  SoftmaxParams() = default;
  SoftmaxParams(const std::string& name, bool skippable);

  // Expected subset gates: k5 = p5, e3 = P(not skip), e6 = P(e=6 | not skip),
  // se25 = P(se > 0), se50 = P(se = 0.5 | se > 0).
  Gates gates(Graph& g, std::mt19937_64* noise_rng = nullptr, double gumbel_temperature = 0.0);
  std::vector<std::pair<MBConvType, double>> distribution() const;
  // Argmax per decision group; ties go to the first (smaller) option.
  MBConvType decode() const;
  void collect(ParamList& out) { out.insert(out.end(), {&kernel, &expansion, &se}); }
};

// Multi-path layer: one independent block per candidate type, outputs mixed
// by softmax path weights.
class MultiPathLayer {
 public:
  MultiPathLayer(const std::string& name, const LayerSpec& spec, std::vector<MBConvType> types, std::uint64_t seed);

  Var path_weights(Graph& g, std::mt19937_64* noise_rng = nullptr, double gumbel_temperature = 0.0);
  Var forward(Graph& g, Var x, Var weights, bool training);
  Var runtime(Graph& g, Var weights, const LayerLatency& t, RuntimeForm form) const;
  MBConvType decode() const;
  std::vector<std::pair<MBConvType, double>> distribution() const;

  ParamList weight_params();
  std::vector<BatchNorm*> batchnorms();
  const std::vector<MBConvType>& types() const { return types_; }

  Parameter logits;
  std::vector<FixedBlock> paths;

 private:
  std::vector<MBConvType> types_;
};

// What a search variant trains: weights plus architecture parameters
// (thresholds or logits).
class SearchModel {
 public:
  virtual ~SearchModel() = default;
  virtual ModelOutput forward(Graph& g, Var x, const ForwardContext& ctx) = 0;
  virtual ParamList weight_params() = 0;
  virtual ParamList arch_params() = 0;
  virtual std::vector<BatchNorm*> batchnorms() = 0;
  virtual Architecture decode() const = 0;
  virtual TypeDistribution distribution() const { return {}; }

  // Every parameter value and batchnorm running statistic, by name.
  std::vector<std::pair<std::string, Tensor*>> state();
};

std::unique_ptr<SearchModel> make_search_model(const SearchSpaceConfig& space, Variant variant, std::uint64_t seed,
                                               double beta = 5.0);

// Concrete models, exposed for tests.
class SinglePathModel : public SearchModel {
 public:
  SinglePathModel(const SearchSpaceConfig& space, IndicatorMode mode, double beta, std::uint64_t seed);
  ModelOutput forward(Graph& g, Var x, const ForwardContext& ctx) override;
  ParamList weight_params() override { return net.weight_params(); }
  ParamList arch_params() override { return net.threshold_params(); }
  std::vector<BatchNorm*> batchnorms() override { return net.batchnorms(); }
  Architecture decode() const override { return net.decode(); }

  Supernet net;
  IndicatorMode mode;
  double beta;
};

class SoftmaxModel : public SearchModel {
 public:
  SoftmaxModel(const SearchSpaceConfig& space, std::uint64_t seed);
  ModelOutput forward(Graph& g, Var x, const ForwardContext& ctx) override;
  ParamList weight_params() override { return net.weight_params(); }
  ParamList arch_params() override;
  std::vector<BatchNorm*> batchnorms() override { return net.batchnorms(); }
  Architecture decode() const override;
  TypeDistribution distribution() const override;

  Supernet net;
  std::vector<SoftmaxParams> logits;
};

class MultiPathModel : public SearchModel {
 public:
  MultiPathModel(const SearchSpaceConfig& space, std::uint64_t seed);
  ModelOutput forward(Graph& g, Var x, const ForwardContext& ctx) override;
  ParamList weight_params() override;
  ParamList arch_params() override;
  std::vector<BatchNorm*> batchnorms() override;
  Architecture decode() const override;
  TypeDistribution distribution() const override;

  Stem stem;
  std::vector<MultiPathLayer> layers;
  Head head;
};

Checkpoint model_checkpoint(SearchModel& model, const ExperimentConfig& cfg, std::size_t step);
void restore_model(SearchModel& model, const Checkpoint& ckpt);
// Rebuilds the model recorded in a checkpoint and decodes its architecture.
Architecture decode_checkpoint(const Checkpoint& ckpt);

// Single-path search: one SGD step per batch over weights and thresholds
// together, subset dropout during warmup.
SearchReport search(const ExperimentConfig& cfg, const Dataset& data, const LatencyTable& lut);
// Softmax variants: weight steps on the train part and architecture steps on a
// held-out part of the train split, alternating.
SearchReport search_bilevel(const ExperimentConfig& cfg, const Dataset& data, const LatencyTable& lut);
// Dispatches on cfg.search.variant (random is handled by random_search).
SearchReport run_search(const ExperimentConfig& cfg, const Dataset& data, const LatencyTable& lut);

// Proxy accuracy of a decoded architecture: a short training run from scratch.
double proxy_accuracy(const ExperimentConfig& cfg, const Architecture& arch, const Dataset& data, std::uint64_t seed);

}  // namespace spnas
