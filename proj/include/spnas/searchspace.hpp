#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "spnas/autodiff.hpp"
#include "spnas/nn.hpp"
#include "spnas/ops.hpp"

namespace spnas {

// One candidate operation of a searchable layer: MBConv-k-e-se or the skip-op.
struct MBConvType {
  int kernel = 3;      // 3 or 5
  int expansion = 3;   // 3 or 6
  double se = 0.0;     // 0, 0.25 or 0.5
  bool skip = false;

  static MBConvType skip_op() { return {3, 3, 0.0, true}; }
  static MBConvType max_type() { return {5, 6, 0.5, false}; }
  static MBConvType min_type() { return {3, 3, 0.0, false}; }
  // The 12 non-skip combinations followed by SKIP.
  static const std::vector<MBConvType>& all();
  // Types a layer may take: SKIP only for skippable layers.
  static std::vector<MBConvType> candidates(bool skippable);

  std::string name() const;
  bool valid() const;

  friend bool operator==(const MBConvType& a, const MBConvType& b) {
    if (a.skip || b.skip) return a.skip == b.skip;
    return a.kernel == b.kernel && a.expansion == b.expansion && a.se == b.se;
  }
};

using Architecture = std::vector<MBConvType>;

// 0, 1, 2 for se = 0, 0.25, 0.5.
int se_index(double se);
double se_value(int index);

struct LayerSpec {
  int in_channels = 8;
  int out_channels = 8;
  int stride = 1;
  int in_size = 16;  // spatial size of the layer input (square)

  bool skippable() const { return stride == 1 && in_channels == out_channels; }
  int expanded_channels(int expansion = 6) const { return expansion * in_channels; }
  int squeeze_channels(double se = 0.5) const { return static_cast<int>(se * in_channels); }
  int out_size() const { return (in_size + stride - 1) / stride; }
};

struct LayerConfig {
  int out_channels = 8;
  int stride = 1;
};

// Fixed backbone around the searchable layers.
struct SearchSpaceConfig {
  int image_size = 16;
  int in_channels = 1;
  int classes = 4;
  int stem_channels = 8;
  int stem_stride = 1;
  int head_channels = 32;
  std::vector<LayerConfig> layers;

  int num_layers() const { return static_cast<int>(layers.size()); }
  std::vector<LayerSpec> layer_specs() const;
  int stem_out_size() const { return (image_size + stem_stride - 1) / stem_stride; }
  void validate() const;

  // B = 5 desk-scale backbone: 8 -> 8 -> 16(s2) -> 16 -> 24(s2) -> 24.
  static SearchSpaceConfig desk_default();
};

// Values of the five subset decisions, either relaxed nodes or plain numbers.
template <class S>
struct GateSet {
  S k5{}, e3{}, e6{}, se25{}, se50{};
};
using Gates = GateSet<Var>;
using GateValues = GateSet<double>;

// Group-Lasso importance per subset, each divided by its element count.
using SubsetNorms = GateSet<double>;

// Hard decision rule: strict > per subset, with the expansion and SE choices
// nested as in the superkernel composition. Ties select "not used".
MBConvType decode_type(const SubsetNorms& norms, const SubsetNorms& thresholds, bool skippable);

// Trainable thresholds of one layer.
struct ThresholdSet {
  Parameter k5, e3, e6, se25, se50;

  ThresholdSet() = default;
  explicit ThresholdSet(const std::string& prefix);
  void collect(ParamList& out) { out.insert(out.end(), {&k5, &e3, &e6, &se25, &se50}); }
  SubsetNorms values() const;
  void set(const SubsetNorms& t);
};

// Multipliers applied to the decision gates of optional subsets; 0 drops the
// subset for one forward pass.
struct SubsetKeep {
  double k5 = 1.0, e6 = 1.0, se25 = 1.0, se50 = 1.0;
};

// Drop probability decays linearly from p0 to 0 over the first
// `warmup_fraction` of the search.
struct DropoutSchedule {
  double p0 = 0.3;
  double warmup_fraction = 0.75;
  double at(std::size_t step, std::size_t total_steps) const;
  void validate() const;
};

// Independently drops each optional subset (5x5 shell, second expansion half,
// both SE halves) of every layer with probability p.
std::vector<SubsetKeep> draw_subset_keeps(std::size_t layers, double p, std::mt19937_64& rng);

struct LayerGating {
  IndicatorMode mode = IndicatorMode::sigmoid;
  double beta = 5.0;
  std::optional<Gates> external;  // bypasses the thresholds (softmax variants, ablation)
  SubsetKeep keep;
};

struct LayerOutput {
  Var y;
  Gates gates;  // decision gates before subset dropout
};

// Masked superkernel MBConv layer: every candidate type is a subset of one set
// of weights sized for MBConv-5x5-6-0.5.
class SuperkernelLayer {
 public:
  SuperkernelLayer(const std::string& name, const LayerSpec& spec, std::uint64_t seed);

  LayerOutput forward(Graph& g, Var x, const LayerGating& gating, bool training);

  // Effective kernels given gate nodes (both recorded on `g`).
  Var effective_depthwise_kernel(Graph& g, Var dw, const Gates& gates) const;
  Var effective_se_kernel(Graph& g, Var squeeze, const Gates& gates) const;

  // Normalized norms with the kernel-size decision taken hard (as decode does).
  SubsetNorms hard_norms() const;
  MBConvType decode() const;
  // Sets thresholds so that hard decoding selects `type`.
  void force(const MBConvType& type);
  // Thresholds start at the relaxed norms, i.e. every sigmoid gate at 0.5.
  void init_thresholds();

  const LayerSpec& spec() const { return spec_; }
  const std::string& name() const { return name_; }
  ParamList weight_params();
  ParamList threshold_params();

  Parameter pw_in;       // [E, Cin, 1, 1], E = 6*Cin
  BatchNorm bn_expand;
  Parameter dw;          // [E, 1, 5, 5]
  BatchNorm bn_dw;
  Parameter se_squeeze;  // [Cin/2, E]
  Parameter se_expand;   // [E, Cin/2]
  Parameter pw_out;      // [Cout, E, 1, 1]
  BatchNorm bn_project;
  ThresholdSet thresholds;

  // Subset masks over dw / se_squeeze.
  Tensor inner_mask, outer_mask, first_half_mask, second_half_mask;
  Tensor se_first_mask, se_second_mask;

 private:
  Gates indicator_gates(Graph& g, Var dw, Var squeeze, const LayerGating& gating, Var& w_k);

  std::string name_;
  LayerSpec spec_;
};

// Stand-alone MBConv block of one fixed type (or the skip-op).
class FixedBlock {
 public:
  FixedBlock(const std::string& name, const LayerSpec& spec, const MBConvType& type, std::uint64_t seed);

  Var forward(Graph& g, Var x, bool training);
  // Copies the weight subsets this type occupies inside a superkernel layer.
  void copy_from(const SuperkernelLayer& layer);
  ParamList params();

  const MBConvType& type() const { return type_; }
  const LayerSpec& spec() const { return spec_; }

  Parameter pw_in, dw, se_squeeze, se_expand, pw_out;
  BatchNorm bn_expand, bn_dw, bn_project;

 private:
  std::string name_;
  LayerSpec spec_;
  MBConvType type_;
};

struct Stem {
  Parameter conv;  // [stem, in, 3, 3]
  BatchNorm bn;
  int stride = 1;
  Stem() = default;
  Stem(const SearchSpaceConfig& cfg, std::uint64_t seed);
  Var forward(Graph& g, Var x, bool training);
  void collect(ParamList& out) { out.push_back(&conv); bn.collect(out); }
};

struct Head {
  Parameter conv;  // [head, last, 1, 1]
  BatchNorm bn;
  Parameter fc;    // [classes, head]
  Parameter fc_bias;
  Head() = default;
  Head(const SearchSpaceConfig& cfg, std::uint64_t seed);
  Var forward(Graph& g, Var x, bool training);
  void collect(ParamList& out);
};

class Supernet {
 public:
  Supernet(const SearchSpaceConfig& cfg, std::uint64_t seed);

  struct Output {
    Var logits;
    std::vector<Gates> gates;
  };
  // `gating` holds one entry per layer.
  Output forward(Graph& g, Var x, const std::vector<LayerGating>& gating, bool training);
  Output forward(Graph& g, Var x, IndicatorMode mode, double beta, bool training);

  Architecture decode() const;
  void force(const Architecture& arch);

  ParamList weight_params();
  ParamList threshold_params();
  ParamList all_params();
  std::size_t trainable_count();

  const SearchSpaceConfig& config() const { return cfg_; }
  std::vector<SuperkernelLayer>& layers() { return layers_; }
  const std::vector<SuperkernelLayer>& layers() const { return layers_; }
  Stem& stem() { return stem_; }
  const Stem& stem() const { return stem_; }
  Head& head() { return head_; }
  const Head& head() const { return head_; }
  std::vector<BatchNorm*> batchnorms();

 private:
  SearchSpaceConfig cfg_;
  Stem stem_;
  std::vector<SuperkernelLayer> layers_;
  Head head_;
};

class FixedNetwork {
 public:
  FixedNetwork(const SearchSpaceConfig& cfg, const Architecture& arch, std::uint64_t seed);

  Var forward(Graph& g, Var x, bool training);
  // Copies stem, head and every block's weight subset out of a supernet.
  void copy_from(const Supernet& net);
  ParamList params();
  std::size_t trainable_count();
  std::vector<BatchNorm*> batchnorms();

  const Architecture& architecture() const { return arch_; }
  std::vector<FixedBlock>& blocks() { return blocks_; }
  Stem& stem() { return stem_; }
  Head& head() { return head_; }

 private:
  SearchSpaceConfig cfg_;
  Architecture arch_;
  Stem stem_;
  std::vector<FixedBlock> blocks_;
  Head head_;
};

}  // namespace spnas
