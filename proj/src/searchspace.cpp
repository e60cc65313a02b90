#include "spnas/searchspace.hpp"

#include <cmath>
#include <cstdio>

#include "spnas/error.hpp"

namespace spnas {

namespace {

constexpr double kOn = -1.0;   // below any squared norm
constexpr double kOff = 1e9;   // above any squared norm

int count_nonzero(const Tensor& m) {
  int n = 0;
  for (double v : m.vec()) n += v != 0.0;
  return n;
}

Var normalized_norm(Var x, const Tensor& mask) {
  return affine(group_lasso_sq_norm(x, mask), 1.0 / count_nonzero(mask), 0.0);
}

double normalized_norm(const Tensor& x, const Tensor& mask) {
  double acc = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (mask[i] == 0.0) continue;
    acc += x[i] * x[i];
    ++n;
  }
  return acc / n;
}

Var keep_gate(Var gate, double keep) { return keep == 1.0 ? gate : affine(gate, keep, 0.0); }

}  // namespace

const std::vector<MBConvType>& MBConvType::all() {
  static const std::vector<MBConvType> types = [] {
    std::vector<MBConvType> t;
    for (int k : {3, 5})
      for (int e : {3, 6})
        for (double se : {0.0, 0.25, 0.5}) t.push_back({k, e, se, false});
    t.push_back(skip_op());
    return t;
  }();
  return types;
}

std::vector<MBConvType> MBConvType::candidates(bool skippable) {
  std::vector<MBConvType> t = all();
  if (!skippable) t.pop_back();
  return t;
}

std::string MBConvType::name() const {
  if (skip) return "skip";
  char buf[64];
  std::snprintf(buf, sizeof buf, "MBConv-%dx%d-%d-%g", kernel, kernel, expansion, se);
  return buf;
}

bool MBConvType::valid() const {
  if (skip) return true;
  return (kernel == 3 || kernel == 5) && (expansion == 3 || expansion == 6) && (se == 0.0 || se == 0.25 || se == 0.5);
}

int se_index(double se) {
  if (se == 0.0) return 0;
  if (se == 0.25) return 1;
  if (se == 0.5) return 2;
  throw ConfigError("se ratio must be 0, 0.25 or 0.5, got " + std::to_string(se));
}

double se_value(int index) {
  static constexpr double values[] = {0.0, 0.25, 0.5};
  if (index < 0 || index > 2) throw ConfigError("se index out of range");
  return values[index];
}

std::vector<LayerSpec> SearchSpaceConfig::layer_specs() const {
  std::vector<LayerSpec> specs;
  int in = stem_channels;
  int size = stem_out_size();
  for (const LayerConfig& l : layers) {
    LayerSpec s{in, l.out_channels, l.stride, size};
    specs.push_back(s);
    in = l.out_channels;
    size = s.out_size();
  }
  return specs;
}

void SearchSpaceConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("search space: " + m); };
  if (layers.empty()) fail("at least one searchable layer is required");
  if (image_size < 1) fail("image_size must be positive");
  if (in_channels < 1) fail("in_channels must be positive");
  if (classes < 2) fail("classes must be >= 2");
  if (head_channels < 1) fail("head_channels must be positive");
  if (stem_stride != 1 && stem_stride != 2) fail("stem_stride must be 1 or 2");
  if (stem_channels < 4 || stem_channels % 4 != 0) fail("stem_channels must be a positive multiple of 4");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.stride != 1 && l.stride != 2) fail("layer " + std::to_string(i) + ": stride must be 1 or 2");
    if (l.out_channels < 4 || l.out_channels % 4 != 0) {
      fail("layer " + std::to_string(i) + ": out_channels must be a positive multiple of 4");
    }
  }
}

SearchSpaceConfig SearchSpaceConfig::desk_default() {
  SearchSpaceConfig c;
  c.image_size = 28;
  c.in_channels = 1;
  c.classes = 4;
  c.stem_channels = 8;
  c.stem_stride = 2;
  c.head_channels = 32;
  c.layers = {{8, 1}, {16, 2}, {16, 1}, {24, 2}, {24, 1}};
  return c;
}

MBConvType decode_type(const SubsetNorms& n, const SubsetNorms& t, bool skippable) {
  const bool e3 = !skippable || n.e3 > t.e3;
  if (!e3) return MBConvType::skip_op();
  const bool k5 = n.k5 > t.k5;
  const bool e6 = n.e6 > t.e6;
  const bool s25 = n.se25 > t.se25;
  const bool s50 = n.se50 > t.se50;
  return {k5 ? 5 : 3, e6 ? 6 : 3, s25 ? (s50 ? 0.5 : 0.25) : 0.0, false};
}

double DropoutSchedule::at(std::size_t step, std::size_t total_steps) const {
  const double end = warmup_fraction * static_cast<double>(total_steps);
  if (end <= 0.0 || static_cast<double>(step) >= end) return 0.0;
  return p0 * (1.0 - static_cast<double>(step) / end);
}

void DropoutSchedule::validate() const {
  if (!(p0 >= 0.0 && p0 <= 1.0)) throw ConfigError("dropout probability must be in [0, 1]");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("dropout warmup fraction must be in [0, 1]");
}

std::vector<SubsetKeep> draw_subset_keeps(std::size_t layers, double p, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("dropout probability must be in [0, 1], got " + std::to_string(p));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto keep = [&] { return u(rng) < p ? 0.0 : 1.0; };
  std::vector<SubsetKeep> out(layers);
  for (auto& k : out) {
    k.k5 = keep();
    k.e6 = keep();
    k.se25 = keep();
    k.se50 = keep();
  }
  return out;
}

ThresholdSet::ThresholdSet(const std::string& prefix)
    : k5(prefix + ".t_k5", Tensor::scalar(0.0)),
      e3(prefix + ".t_e3", Tensor::scalar(0.0)),
      e6(prefix + ".t_e6", Tensor::scalar(0.0)),
      se25(prefix + ".t_se25", Tensor::scalar(0.0)),
      se50(prefix + ".t_se50", Tensor::scalar(0.0)) {}

SubsetNorms ThresholdSet::values() const {
  return {k5.value.item(), e3.value.item(), e6.value.item(), se25.value.item(), se50.value.item()};
}

void ThresholdSet::set(const SubsetNorms& t) {
  k5.value[0] = t.k5;
  e3.value[0] = t.e3;
  e6.value[0] = t.e6;
  se25.value[0] = t.se25;
  se50.value[0] = t.se50;
}

SuperkernelLayer::SuperkernelLayer(const std::string& name, const LayerSpec& spec, std::uint64_t seed)
    : name_(name), spec_(spec) {
  const int cin = spec.in_channels, E = spec.expanded_channels(), S = spec.squeeze_channels();
  pw_in = Parameter(name + ".pw_in", he_normal(name + ".pw_in", {E, cin, 1, 1}, cin, seed));
  bn_expand = BatchNorm(name + ".bn_expand", E);
  dw = Parameter(name + ".dw", he_normal(name + ".dw", {E, 1, 5, 5}, 25, seed));
  bn_dw = BatchNorm(name + ".bn_dw", E);
  se_squeeze = Parameter(name + ".se_squeeze", he_normal(name + ".se_squeeze", {S, E}, E, seed));
  se_expand = Parameter(name + ".se_expand", he_normal(name + ".se_expand", {E, S}, S, seed));
  pw_out = Parameter(name + ".pw_out", he_normal(name + ".pw_out", {spec.out_channels, E, 1, 1}, E, seed));
  bn_project = BatchNorm(name + ".bn_project", spec.out_channels);
  thresholds = ThresholdSet(name);

  inner_mask = Tensor({E, 1, 5, 5});
  first_half_mask = Tensor({E, 1, 5, 5});
  for (int c = 0; c < E; ++c)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) {
        const std::size_t i = (static_cast<std::size_t>(c) * 5 + y) * 5 + x;
        inner_mask[i] = (y >= 1 && y <= 3 && x >= 1 && x <= 3) ? 1.0 : 0.0;
        first_half_mask[i] = c < E / 2 ? 1.0 : 0.0;
      }
  outer_mask = inner_mask;
  second_half_mask = first_half_mask;
  for (std::size_t i = 0; i < outer_mask.numel(); ++i) {
    outer_mask[i] = 1.0 - inner_mask[i];
    second_half_mask[i] = 1.0 - first_half_mask[i];
  }
  se_first_mask = Tensor({S, E});
  for (int r = 0; r < S; ++r)
    for (int c = 0; c < E; ++c) se_first_mask[static_cast<std::size_t>(r) * E + c] = r < S / 2 ? 1.0 : 0.0;
  se_second_mask = se_first_mask;
  for (double& v : se_second_mask.vec()) v = 1.0 - v;

  init_thresholds();
}

Var SuperkernelLayer::effective_depthwise_kernel(Graph&, Var w, const Gates& gates) const {
  Var w_k = mask(w, inner_mask) + scale(mask(w, outer_mask), gates.k5);
  return scale(mask(w_k, first_half_mask) + scale(mask(w_k, second_half_mask), gates.e6), gates.e3);
}

Var SuperkernelLayer::effective_se_kernel(Graph&, Var squeeze, const Gates& gates) const {
  return scale(mask(squeeze, se_first_mask) + scale(mask(squeeze, se_second_mask), gates.se50), gates.se25);
}

Gates SuperkernelLayer::indicator_gates(Graph& g, Var w, Var squeeze, const LayerGating& gating, Var& w_k) {
  Gates gates;
  gates.k5 = indicator(normalized_norm(w, outer_mask), g.parameter(thresholds.k5), gating.mode, gating.beta);
  w_k = mask(w, inner_mask) + scale(mask(w, outer_mask), gates.k5);
  gates.e3 = spec_.skippable()
                 ? indicator(normalized_norm(w_k, first_half_mask), g.parameter(thresholds.e3), gating.mode,
                             gating.beta)
                 : g.scalar(1.0);
  gates.e6 = indicator(normalized_norm(w_k, second_half_mask), g.parameter(thresholds.e6), gating.mode,
                       gating.beta);
  gates.se25 = indicator(normalized_norm(squeeze, se_first_mask), g.parameter(thresholds.se25), gating.mode,
                         gating.beta);
  gates.se50 = indicator(normalized_norm(squeeze, se_second_mask), g.parameter(thresholds.se50), gating.mode,
                         gating.beta);
  return gates;
}

LayerOutput SuperkernelLayer::forward(Graph& g, Var x, const LayerGating& gating, bool training) {
  const Shape& xs = x.shape();
  if (xs.size() != 4 || xs[1] != spec_.in_channels) {
    throw ShapeError(name_ + ": expected input with " + std::to_string(spec_.in_channels) + " channels, got " +
                     shape_str(xs));
  }
  const int E = spec_.expanded_channels();
  Var w = g.parameter(dw);
  Var squeeze = g.parameter(se_squeeze);

  Gates decision;
  Var w_k;
  if (gating.external) {
    decision = *gating.external;
    if (!spec_.skippable()) decision.e3 = g.scalar(1.0);
  } else {
    decision = indicator_gates(g, w, squeeze, gating, w_k);
  }
  Gates eff = decision;
  eff.k5 = keep_gate(decision.k5, gating.keep.k5);
  eff.e6 = keep_gate(decision.e6, gating.keep.e6);
  eff.se25 = keep_gate(decision.se25, gating.keep.se25);
  eff.se50 = keep_gate(decision.se50, gating.keep.se50);

  Var w_dw;
  if (w_k.valid() && gating.keep.k5 == 1.0) {
    w_dw = scale(mask(w_k, first_half_mask) + scale(mask(w_k, second_half_mask), eff.e6), eff.e3);
  } else {
    w_dw = effective_depthwise_kernel(g, w, eff);
  }
  Var w_se = effective_se_kernel(g, squeeze, eff);

  Var h = relu6(bn_expand(g, conv2d(x, g.parameter(pw_in), 1, Padding::same), training));
  Var d = relu6(bn_dw(g, depthwise_conv2d(h, w_dw, spec_.stride, Padding::same), training));
  d = channel_mul(d, halves(eff.e3, eff.e3 * eff.e6, E));

  Var pooled = global_avg_pool(d);
  Var z = relu6(linear(pooled, w_se));
  Var s = sigmoid(linear(z, g.parameter(se_expand)));
  Var passthrough = g.constant(Tensor(s.shape(), 1.0));
  Var gate = scale(s, eff.se25) + scale(passthrough, 1.0 - eff.se25);
  d = excite(d, gate);

  Var y = bn_project(g, conv2d(d, g.parameter(pw_out), 1, Padding::same), training);
  if (spec_.skippable()) y = x + scale(y, eff.e3);
  return {y, decision};
}

SubsetNorms SuperkernelLayer::hard_norms() const {
  SubsetNorms n;
  const SubsetNorms t = thresholds.values();
  n.k5 = normalized_norm(dw.value, outer_mask);
  const double k5 = n.k5 > t.k5 ? 1.0 : 0.0;
  // w_k = inner + k5 * outer; inner and outer are disjoint, so a masked norm of
  // w_k equals the masked norm of w with the outer shell scaled by k5.
  Tensor w_k = dw.value;
  for (std::size_t i = 0; i < w_k.numel(); ++i) w_k[i] *= inner_mask[i] + k5 * outer_mask[i];
  n.e3 = normalized_norm(w_k, first_half_mask);
  n.e6 = normalized_norm(w_k, second_half_mask);
  n.se25 = normalized_norm(se_squeeze.value, se_first_mask);
  n.se50 = normalized_norm(se_squeeze.value, se_second_mask);
  return n;
}

MBConvType SuperkernelLayer::decode() const { return decode_type(hard_norms(), thresholds.values(), spec_.skippable()); }

void SuperkernelLayer::force(const MBConvType& type) {
  if (!type.valid()) throw ConfigError(name_ + ": invalid MBConv type");
  if (type.skip && !spec_.skippable()) throw ConfigError(name_ + ": skip-op requires a stride-1, channel-preserving layer");
  SubsetNorms t;
  t.e3 = type.skip ? kOff : kOn;
  t.k5 = !type.skip && type.kernel == 5 ? kOn : kOff;
  t.e6 = !type.skip && type.expansion == 6 ? kOn : kOff;
  t.se25 = !type.skip && type.se > 0.0 ? kOn : kOff;
  t.se50 = !type.skip && type.se == 0.5 ? kOn : kOff;
  thresholds.set(t);
}

void SuperkernelLayer::init_thresholds() {
  SubsetNorms t;
  t.k5 = normalized_norm(dw.value, outer_mask);
  // Relaxed kernel: inner + 0.5 * outer, since the k5 gate starts at 0.5.
  Tensor w_k = dw.value;
  for (std::size_t i = 0; i < w_k.numel(); ++i) w_k[i] *= inner_mask[i] + 0.5 * outer_mask[i];
  t.e3 = normalized_norm(w_k, first_half_mask);
  t.e6 = normalized_norm(w_k, second_half_mask);
  t.se25 = normalized_norm(se_squeeze.value, se_first_mask);
  t.se50 = normalized_norm(se_squeeze.value, se_second_mask);
  thresholds.set(t);
}

ParamList SuperkernelLayer::weight_params() {
  ParamList p{&pw_in};
  bn_expand.collect(p);
  p.push_back(&dw);
  bn_dw.collect(p);
  p.insert(p.end(), {&se_squeeze, &se_expand, &pw_out});
  bn_project.collect(p);
  return p;
}

ParamList SuperkernelLayer::threshold_params() {
  ParamList p;
  thresholds.collect(p);
  return p;
}

FixedBlock::FixedBlock(const std::string& name, const LayerSpec& spec, const MBConvType& type, std::uint64_t seed)
    : name_(name), spec_(spec), type_(type) {
  if (!type.valid()) throw ConfigError(name + ": invalid MBConv type");
  if (type.skip) {
    if (!spec.skippable()) throw ConfigError(name + ": skip-op requires a stride-1, channel-preserving layer");
    return;
  }
  const int cin = spec.in_channels, E = spec.expanded_channels(type.expansion), k = type.kernel;
  pw_in = Parameter(name + ".pw_in", he_normal(name + ".pw_in", {E, cin, 1, 1}, cin, seed));
  bn_expand = BatchNorm(name + ".bn_expand", E);
  dw = Parameter(name + ".dw", he_normal(name + ".dw", {E, 1, k, k}, k * k, seed));
  bn_dw = BatchNorm(name + ".bn_dw", E);
  if (type.se > 0.0) {
    const int S = spec.squeeze_channels(type.se);
    se_squeeze = Parameter(name + ".se_squeeze", he_normal(name + ".se_squeeze", {S, E}, E, seed));
    se_expand = Parameter(name + ".se_expand", he_normal(name + ".se_expand", {E, S}, S, seed));
  }
  pw_out = Parameter(name + ".pw_out", he_normal(name + ".pw_out", {spec.out_channels, E, 1, 1}, E, seed));
  bn_project = BatchNorm(name + ".bn_project", spec.out_channels);
}

Var FixedBlock::forward(Graph& g, Var x, bool training) {
  if (type_.skip) return x;
  const Shape& xs = x.shape();
  if (xs.size() != 4 || xs[1] != spec_.in_channels) {
    throw ShapeError(name_ + ": expected input with " + std::to_string(spec_.in_channels) + " channels, got " +
                     shape_str(xs));
  }
  Var h = relu6(bn_expand(g, conv2d(x, g.parameter(pw_in), 1, Padding::same), training));
  Var d = relu6(bn_dw(g, depthwise_conv2d(h, g.parameter(dw), spec_.stride, Padding::same), training));
  if (type_.se > 0.0) {
    Var z = relu6(linear(global_avg_pool(d), g.parameter(se_squeeze)));
    d = excite(d, sigmoid(linear(z, g.parameter(se_expand))));
  }
  Var y = bn_project(g, conv2d(d, g.parameter(pw_out), 1, Padding::same), training);
  return spec_.skippable() ? x + y : y;
}

namespace {

void copy_bn_prefix(BatchNorm& dst, const BatchNorm& src) {
  const int n = dst.channels();
  for (int c = 0; c < n; ++c) {
    dst.gamma.value[c] = src.gamma.value[c];
    dst.beta.value[c] = src.beta.value[c];
    dst.running.mean[c] = src.running.mean[c];
    dst.running.var[c] = src.running.var[c];
  }
}

}  // namespace

void FixedBlock::copy_from(const SuperkernelLayer& layer) {
  if (type_.skip) return;
  const int cin = spec_.in_channels, E = spec_.expanded_channels(type_.expansion), k = type_.kernel;
  const int Emax = layer.spec().expanded_channels();
  const int Smax = layer.spec().squeeze_channels();
  const int cout = spec_.out_channels;
  // Expanded channels are row-major prefixes of the superkernel tensors.
  for (int i = 0; i < E * cin; ++i) pw_in.value[i] = layer.pw_in.value[i];
  copy_bn_prefix(bn_expand, layer.bn_expand);
  const int off = (5 - k) / 2;
  for (int c = 0; c < E; ++c)
    for (int y = 0; y < k; ++y)
      for (int x = 0; x < k; ++x)
        dw.value[(static_cast<std::size_t>(c) * k + y) * k + x] =
            layer.dw.value[(static_cast<std::size_t>(c) * 5 + y + off) * 5 + x + off];
  copy_bn_prefix(bn_dw, layer.bn_dw);
  if (type_.se > 0.0) {
    const int S = spec_.squeeze_channels(type_.se);
    for (int r = 0; r < S; ++r)
      for (int c = 0; c < E; ++c)
        se_squeeze.value[static_cast<std::size_t>(r) * E + c] = layer.se_squeeze.value[static_cast<std::size_t>(r) * Emax + c];
    for (int r = 0; r < E; ++r)
      for (int c = 0; c < S; ++c)
        se_expand.value[static_cast<std::size_t>(r) * S + c] = layer.se_expand.value[static_cast<std::size_t>(r) * Smax + c];
  }
  for (int o = 0; o < cout; ++o)
    for (int c = 0; c < E; ++c)
      pw_out.value[static_cast<std::size_t>(o) * E + c] = layer.pw_out.value[static_cast<std::size_t>(o) * Emax + c];
  copy_bn_prefix(bn_project, layer.bn_project);
}

ParamList FixedBlock::params() {
  ParamList p;
  if (type_.skip) return p;
  p.push_back(&pw_in);
  bn_expand.collect(p);
  p.push_back(&dw);
  bn_dw.collect(p);
  if (type_.se > 0.0) p.insert(p.end(), {&se_squeeze, &se_expand});
  p.push_back(&pw_out);
  bn_project.collect(p);
  return p;
}

Stem::Stem(const SearchSpaceConfig& cfg, std::uint64_t seed)
    : conv("stem.conv", he_normal("stem.conv", {cfg.stem_channels, cfg.in_channels, 3, 3}, 9 * cfg.in_channels, seed)),
      bn("stem.bn", cfg.stem_channels),
      stride(cfg.stem_stride) {}

Var Stem::forward(Graph& g, Var x, bool training) {
  return relu6(bn(g, conv2d(x, g.parameter(conv), stride, Padding::same), training));
}

Head::Head(const SearchSpaceConfig& cfg, std::uint64_t seed) {
  const int last = cfg.layers.empty() ? cfg.stem_channels : cfg.layers.back().out_channels;
  conv = Parameter("head.conv", he_normal("head.conv", {cfg.head_channels, last, 1, 1}, last, seed));
  bn = BatchNorm("head.bn", cfg.head_channels);
  fc = Parameter("head.fc", he_normal("head.fc", {cfg.classes, cfg.head_channels}, cfg.head_channels, seed));
  fc_bias = Parameter("head.fc_bias", Tensor(Shape{cfg.classes}, 0.0));
}

Var Head::forward(Graph& g, Var x, bool training) {
  Var h = relu6(bn(g, conv2d(x, g.parameter(conv), 1, Padding::same), training));
  return bias_add(linear(global_avg_pool(h), g.parameter(fc)), g.parameter(fc_bias));
}

void Head::collect(ParamList& out) {
  out.push_back(&conv);
  bn.collect(out);
  out.push_back(&fc);
  out.push_back(&fc_bias);
}

Supernet::Supernet(const SearchSpaceConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  stem_ = Stem(cfg_, seed);
  const auto specs = cfg_.layer_specs();
  layers_.reserve(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) layers_.emplace_back("layer" + std::to_string(i), specs[i], seed);
  head_ = Head(cfg_, seed);
}

Supernet::Output Supernet::forward(Graph& g, Var x, const std::vector<LayerGating>& gating, bool training) {
  if (gating.size() != layers_.size()) throw ConfigError("supernet forward: one gating entry per layer required");
  Output out;
  Var h = stem_.forward(g, x, training);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    LayerOutput lo = layers_[i].forward(g, h, gating[i], training);
    h = lo.y;
    out.gates.push_back(lo.gates);
  }
  out.logits = head_.forward(g, h, training);
  return out;
}

Supernet::Output Supernet::forward(Graph& g, Var x, IndicatorMode mode, double beta, bool training) {
  LayerGating lg;
  lg.mode = mode;
  lg.beta = beta;
  return forward(g, x, std::vector<LayerGating>(layers_.size(), lg), training);
}

Architecture Supernet::decode() const {
  Architecture arch;
  for (const auto& l : layers_) arch.push_back(l.decode());
  return arch;
}

void Supernet::force(const Architecture& arch) {
  if (arch.size() != layers_.size()) throw ConfigError("architecture length does not match the number of layers");
  for (std::size_t i = 0; i < arch.size(); ++i) layers_[i].force(arch[i]);
}

ParamList Supernet::weight_params() {
  ParamList p;
  stem_.collect(p);
  for (auto& l : layers_) {
    auto lp = l.weight_params();
    p.insert(p.end(), lp.begin(), lp.end());
  }
  head_.collect(p);
  return p;
}

ParamList Supernet::threshold_params() {
  ParamList p;
  for (auto& l : layers_) l.thresholds.collect(p);
  return p;
}

ParamList Supernet::all_params() {
  ParamList p = weight_params();
  ParamList t = threshold_params();
  p.insert(p.end(), t.begin(), t.end());
  return p;
}

std::size_t Supernet::trainable_count() { return count_params(all_params()); }

std::vector<BatchNorm*> Supernet::batchnorms() {
  std::vector<BatchNorm*> b{&stem_.bn};
  for (auto& l : layers_) b.insert(b.end(), {&l.bn_expand, &l.bn_dw, &l.bn_project});
  b.push_back(&head_.bn);
  return b;
}

FixedNetwork::FixedNetwork(const SearchSpaceConfig& cfg, const Architecture& arch, std::uint64_t seed)
    : cfg_(cfg), arch_(arch) {
  cfg_.validate();
  if (arch.size() != cfg_.layers.size()) {
    throw ConfigError("architecture has " + std::to_string(arch.size()) + " layers, search space has " +
                      std::to_string(cfg_.layers.size()));
  }
  stem_ = Stem(cfg_, seed);
  const auto specs = cfg_.layer_specs();
  blocks_.reserve(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) blocks_.emplace_back("layer" + std::to_string(i), specs[i], arch[i], seed);
  head_ = Head(cfg_, seed);
}

Var FixedNetwork::forward(Graph& g, Var x, bool training) {
  Var h = stem_.forward(g, x, training);
  for (auto& b : blocks_) h = b.forward(g, h, training);
  return head_.forward(g, h, training);
}

void FixedNetwork::copy_from(const Supernet& net) {
  stem_ = net.stem();
  head_ = net.head();
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].copy_from(net.layers()[i]);
}

ParamList FixedNetwork::params() {
  ParamList p;
  stem_.collect(p);
  for (auto& b : blocks_) {
    auto bp = b.params();
    p.insert(p.end(), bp.begin(), bp.end());
  }
  head_.collect(p);
  return p;
}

std::size_t FixedNetwork::trainable_count() { return count_params(params()); }

std::vector<BatchNorm*> FixedNetwork::batchnorms() {
  std::vector<BatchNorm*> b{&stem_.bn};
  for (auto& blk : blocks_) {
    if (blk.type().skip) continue;
    b.insert(b.end(), {&blk.bn_expand, &blk.bn_dw, &blk.bn_project});
  }
  b.push_back(&head_.bn);
  return b;
}

}  // namespace spnas
