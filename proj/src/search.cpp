#include "spnas/search.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

#include "spnas/error.hpp"
#include "spnas/train.hpp"

namespace spnas {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Keeps the conditional-probability gates defined when the conditioning
// event has probability exactly 0 (one-hot logits).
constexpr double kTiny = 1e-300;

Var softmax_of(Graph& g, Parameter& p, std::mt19937_64* rng, double temperature) {
  Var l = g.parameter(p);
  if (rng && temperature > 0.0) {
    std::uniform_real_distribution<double> u(std::numeric_limits<double>::min(), 1.0);
    Tensor noise(p.value.shape());
    for (std::size_t i = 0; i < noise.numel(); ++i) noise[i] = -std::log(-std::log(u(*rng)));
    l = (l + g.constant(std::move(noise))) * (1.0 / temperature);
  }
  return softmax(l);
}

std::vector<double> softmax_values(const Tensor& logits) {
  double mx = logits[0];
  for (std::size_t i = 1; i < logits.numel(); ++i) mx = std::max(mx, logits[i]);
  std::vector<double> p(logits.numel());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(logits[i] - mx);
  for (double& v : p) v /= z;
  return p;
}

std::size_t argmax_first(const Tensor& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.numel(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

void set_requires_grad(const ParamList& params, bool on) {
  for (Parameter* p : params) p->requires_grad = on;
}

bool any_grad(const ParamList& params) {
  for (const Parameter* p : params)
    for (double v : p->grad.vec())
      if (v != 0.0) return true;
  return false;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

[[noreturn]] void diverged(std::size_t step, const NumericError& e, const std::string& last_good) {
  throw NumericError("search diverged at step " + std::to_string(step) + ": " + e.what() +
                     "; last good checkpoint: " + last_good);
}

}  // namespace

double search_loss(double ce, double runtime_ms, double lambda) {
  if (!(runtime_ms > 0.0)) throw NumericError("log: runtime must be > 0 ms, got " + fmt(runtime_ms));
  return ce + lambda * std::log(runtime_ms);
}

Var search_loss(Var ce, Var runtime_ms, double lambda) {
  if (!(runtime_ms.item() > 0.0)) throw NumericError("log: runtime must be > 0 ms, got " + fmt(runtime_ms.item()));
  return ce + lambda * log(runtime_ms);
}

nlohmann::json SearchReport::to_json(bool include_wall_clock) const {
  nlohmann::json names = nlohmann::json::array();
  for (const auto& t : architecture) names.push_back(t.name());
  nlohmann::json j{{"variant", variant_name(variant)},
                   {"lambda", lambda},
                   {"seed", seed},
                   {"architecture", architecture_to_json(architecture)["layers"]},
                   {"architecture_names", names},
                   {"runtime_ms", runtime_ms},
                   {"proxy_accuracy", proxy_accuracy ? nlohmann::json(*proxy_accuracy) : nlohmann::json(nullptr)},
                   {"audit",
                    {{"optimizer_steps", optimizer_steps},
                     {"weight_steps", weight_steps},
                     {"arch_steps", arch_steps},
                     {"frozen_grad_violations", frozen_grad_violations}}}};
  if (!distribution.empty()) {
    nlohmann::json d = nlohmann::json::array();
    for (const auto& layer : distribution) {
      nlohmann::json l = nlohmann::json::array();
      for (const auto& [t, p] : layer) l.push_back({{"type", t.name()}, {"p", p}});
      d.push_back(l);
    }
    j["distribution"] = d;
  }
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : log)
    steps.push_back({{"step", s.step}, {"ce", s.ce}, {"runtime_ms", s.runtime_ms}, {"loss", s.loss}, {"lr", s.lr},
                     {"dropout_p", s.dropout_p}});
  j["log"] = steps;
  if (include_wall_clock) j["wall_clock_s"] = wall_clock_s;
  return j;
}

std::string SearchReport::log_csv() const {
  std::string out = "step,ce,runtime_ms,loss,lr,dropout_p\n";
  for (const auto& s : log)
    out += std::to_string(s.step) + "," + fmt(s.ce) + "," + fmt(s.runtime_ms) + "," + fmt(s.loss) + "," + fmt(s.lr) +
           "," + fmt(s.dropout_p) + "\n";
  return out;
}

SoftmaxParams::SoftmaxParams(const std::string& name, bool skippable_)
    : kernel(name + ".tau_kernel", Tensor(Shape{2}, 0.0)),
      expansion(name + ".tau_expansion", Tensor(Shape{skippable_ ? 3 : 2}, 0.0)),
      se(name + ".tau_se", Tensor(Shape{3}, 0.0)),
      skippable(skippable_) {}

Gates SoftmaxParams::gates(Graph& g, std::mt19937_64* rng, double temperature) {
  Gates out;
  out.k5 = pick(softmax_of(g, kernel, rng, temperature), 1);
  Var pe = softmax_of(g, expansion, rng, temperature);
  if (skippable) {
    Var p6 = pick(pe, 2);
    out.e3 = pick(pe, 1) + p6;
    out.e6 = p6 / (out.e3 + kTiny);
  } else {
    out.e3 = g.scalar(1.0);
    out.e6 = pick(pe, 1);
  }
  Var ps = softmax_of(g, se, rng, temperature);
  Var p50 = pick(ps, 2);
  out.se25 = pick(ps, 1) + p50;
  out.se50 = p50 / (out.se25 + kTiny);
  return out;
}

std::vector<std::pair<MBConvType, double>> SoftmaxParams::distribution() const {
  const auto pk = softmax_values(kernel.value);
  const auto pe = softmax_values(expansion.value);
  const auto ps = softmax_values(se.value);
  const int e_off = skippable ? 1 : 0;
  std::vector<std::pair<MBConvType, double>> out;
  for (int k = 0; k < 2; ++k)
    for (int e = 0; e < 2; ++e)
      for (int s = 0; s < 3; ++s)
        out.push_back({MBConvType{k ? 5 : 3, e ? 6 : 3, se_value(s), false}, pk[k] * pe[e + e_off] * ps[s]});
  if (skippable) out.push_back({MBConvType::skip_op(), pe[0]});
  return out;
}

MBConvType SoftmaxParams::decode() const {
  const std::size_t e = argmax_first(expansion.value);
  if (skippable && e == 0) return MBConvType::skip_op();
  const int expansion_choice = skippable ? static_cast<int>(e) - 1 : static_cast<int>(e);
  return {argmax_first(kernel.value) == 1 ? 5 : 3, expansion_choice == 1 ? 6 : 3,
          se_value(static_cast<int>(argmax_first(se.value))), false};
}

MultiPathLayer::MultiPathLayer(const std::string& name, const LayerSpec& spec, std::vector<MBConvType> types,
                               std::uint64_t seed)
    : logits(name + ".alpha", Tensor(Shape{static_cast<int>(types.size())}, 0.0)), types_(std::move(types)) {
  if (types_.empty()) throw ConfigError(name + ": multi-path layer needs at least one candidate");
  paths.reserve(types_.size());
  for (const auto& t : types_) paths.emplace_back(name + "/" + t.name(), spec, t, seed);
}

Var MultiPathLayer::path_weights(Graph& g, std::mt19937_64* rng, double temperature) {
  return softmax_of(g, logits, rng, temperature);
}

Var MultiPathLayer::forward(Graph& g, Var x, Var weights, bool training) {
  Var y;
  for (std::size_t j = 0; j < paths.size(); ++j) {
    Var term = scale(paths[j].forward(g, x, training), pick(weights, static_cast<int>(j)));
    y = j == 0 ? term : y + term;
  }
  return y;
}

Var MultiPathLayer::runtime(Graph& g, Var weights, const LayerLatency& t, RuntimeForm form) const {
  Var total = g.scalar(0.0);
  for (std::size_t j = 0; j < types_.size(); ++j)
    total = total + pick(weights, static_cast<int>(j)) * layer_runtime(types_[j], t, form);
  return total;
}

MBConvType MultiPathLayer::decode() const { return types_[argmax_first(logits.value)]; }

std::vector<std::pair<MBConvType, double>> MultiPathLayer::distribution() const {
  const auto p = softmax_values(logits.value);
  std::vector<std::pair<MBConvType, double>> out;
  for (std::size_t j = 0; j < types_.size(); ++j) out.push_back({types_[j], p[j]});
  return out;
}

ParamList MultiPathLayer::weight_params() {
  ParamList out;
  for (auto& p : paths) {
    ParamList q = p.params();
    out.insert(out.end(), q.begin(), q.end());
  }
  return out;
}

std::vector<BatchNorm*> MultiPathLayer::batchnorms() {
  std::vector<BatchNorm*> out;
  for (auto& p : paths)
    if (!p.type().skip) out.insert(out.end(), {&p.bn_expand, &p.bn_dw, &p.bn_project});
  return out;
}

std::vector<std::pair<std::string, Tensor*>> SearchModel::state() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (ParamList list : {weight_params(), arch_params()})
    for (Parameter* p : list) out.emplace_back(p->name, &p->value);
  for (BatchNorm* bn : batchnorms()) {
    out.emplace_back(bn->gamma.name + ".running_mean", &bn->running.mean);
    out.emplace_back(bn->gamma.name + ".running_var", &bn->running.var);
  }
  return out;
}

SinglePathModel::SinglePathModel(const SearchSpaceConfig& space, IndicatorMode mode_, double beta_, std::uint64_t seed)
    : net(space, seed), mode(mode_), beta(beta_) {}

ModelOutput SinglePathModel::forward(Graph& g, Var x, const ForwardContext& ctx) {
  std::vector<LayerGating> gating(net.layers().size());
  for (std::size_t i = 0; i < gating.size(); ++i) {
    gating[i].mode = mode;
    gating[i].beta = beta;
    if (!ctx.keeps.empty()) gating[i].keep = ctx.keeps.at(i);
  }
  Supernet::Output out = net.forward(g, x, gating, ctx.training);
  ModelOutput m{out.logits, {}};
  if (ctx.lut) m.runtime_ms = network_runtime(g, out.gates, *ctx.lut, ctx.form);
  return m;
}

SoftmaxModel::SoftmaxModel(const SearchSpaceConfig& space, std::uint64_t seed) : net(space, seed) {
  for (const auto& l : net.layers()) logits.emplace_back(l.name(), l.spec().skippable());
}

ModelOutput SoftmaxModel::forward(Graph& g, Var x, const ForwardContext& ctx) {
  std::vector<LayerGating> gating(net.layers().size());
  for (std::size_t i = 0; i < gating.size(); ++i) {
    gating[i].external = logits[i].gates(g, ctx.noise_rng, ctx.gumbel_temperature);
    if (!ctx.keeps.empty()) gating[i].keep = ctx.keeps.at(i);
  }
  Supernet::Output out = net.forward(g, x, gating, ctx.training);
  ModelOutput m{out.logits, {}};
  if (ctx.lut) m.runtime_ms = network_runtime(g, out.gates, *ctx.lut, ctx.form);
  return m;
}

ParamList SoftmaxModel::arch_params() {
  ParamList out;
  for (auto& l : logits) l.collect(out);
  return out;
}

Architecture SoftmaxModel::decode() const {
  Architecture arch;
  for (const auto& l : logits) arch.push_back(l.decode());
  return arch;
}

TypeDistribution SoftmaxModel::distribution() const {
  TypeDistribution d;
  for (const auto& l : logits) d.push_back(l.distribution());
  return d;
}

MultiPathModel::MultiPathModel(const SearchSpaceConfig& space, std::uint64_t seed)
    : stem(space, seed), head(space, seed) {
  space.validate();
  const auto specs = space.layer_specs();
  layers.reserve(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i)
    layers.emplace_back("layer" + std::to_string(i), specs[i], MBConvType::candidates(specs[i].skippable()), seed);
}

ModelOutput MultiPathModel::forward(Graph& g, Var x, const ForwardContext& ctx) {
  Var h = stem.forward(g, x, ctx.training);
  Var runtime;
  if (ctx.lut) {
    ctx.lut->require_layers(static_cast<int>(layers.size()));
    runtime = g.scalar(ctx.lut->fixed_overhead_ms);
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Var w = layers[i].path_weights(g, ctx.noise_rng, ctx.gumbel_temperature);
    h = layers[i].forward(g, h, w, ctx.training);
    if (ctx.lut) runtime = runtime + layers[i].runtime(g, w, ctx.lut->layers[i], ctx.form);
  }
  return {head.forward(g, h, ctx.training), runtime};
}

ParamList MultiPathModel::weight_params() {
  ParamList out;
  stem.collect(out);
  for (auto& l : layers) {
    ParamList q = l.weight_params();
    out.insert(out.end(), q.begin(), q.end());
  }
  head.collect(out);
  return out;
}

ParamList MultiPathModel::arch_params() {
  ParamList out;
  for (auto& l : layers) out.push_back(&l.logits);
  return out;
}

std::vector<BatchNorm*> MultiPathModel::batchnorms() {
  std::vector<BatchNorm*> out{&stem.bn};
  for (auto& l : layers) {
    auto b = l.batchnorms();
    out.insert(out.end(), b.begin(), b.end());
  }
  out.push_back(&head.bn);
  return out;
}

Architecture MultiPathModel::decode() const {
  Architecture arch;
  for (const auto& l : layers) arch.push_back(l.decode());
  return arch;
}

TypeDistribution MultiPathModel::distribution() const {
  TypeDistribution d;
  for (const auto& l : layers) d.push_back(l.distribution());
  return d;
}

std::unique_ptr<SearchModel> make_search_model(const SearchSpaceConfig& space, Variant variant, std::uint64_t seed,
                                               double beta) {
  switch (variant) {
    case Variant::single_sigmoid: return std::make_unique<SinglePathModel>(space, IndicatorMode::sigmoid, beta, seed);
    case Variant::single_ste: return std::make_unique<SinglePathModel>(space, IndicatorMode::ste, beta, seed);
    case Variant::single_softmax: return std::make_unique<SoftmaxModel>(space, seed);
    case Variant::multi_path_softmax: return std::make_unique<MultiPathModel>(space, seed);
    case Variant::random: break;
  }
  throw ConfigError("variant '" + variant_name(variant) + "' has no trainable search model");
}

Checkpoint model_checkpoint(SearchModel& model, const ExperimentConfig& cfg, std::size_t step) {
  Checkpoint ckpt;
  ckpt.meta = {{"config", to_json(cfg)}, {"variant", variant_name(cfg.search.variant)}, {"step", step}};
  for (auto& [name, t] : model.state()) ckpt.arrays.push_back({name, *t});
  return ckpt;
}

void restore_model(SearchModel& model, const Checkpoint& ckpt) {
  for (auto& [name, t] : model.state()) {
    const Tensor* src = ckpt.find(name);
    if (!src) throw FormatError("checkpoint has no array '" + name + "'");
    if (src->shape() != t->shape()) throw FormatError("checkpoint array '" + name + "' has the wrong shape");
    *t = *src;
  }
}

Architecture decode_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("config") || !ckpt.meta.contains("variant"))
    throw FormatError("checkpoint manifest lacks config/variant metadata");
  const ExperimentConfig cfg = config_from_json(ckpt.meta.at("config"));
  auto model = make_search_model(cfg.space, parse_variant(ckpt.meta.at("variant").get<std::string>()), 0,
                                 cfg.search.beta);
  restore_model(*model, ckpt);
  return model->decode();
}

double proxy_accuracy(const ExperimentConfig& cfg, const Architecture& arch, const Dataset& data, std::uint64_t seed) {
  TrainConfig t = cfg.train;
  t.epochs = cfg.search.proxy_epochs;
  t.max_steps = -1;
  return train_fixed(cfg.space, arch, data, t, seed).accuracy;
}

namespace {

void finish_report(SearchReport& r, SearchModel& model, const ExperimentConfig& cfg, const Dataset& data,
                   const LatencyTable& lut, Clock::time_point t0) {
  r.architecture = model.decode();
  r.runtime_ms = network_runtime(r.architecture, lut);
  r.distribution = model.distribution();
  if (cfg.search.proxy_epochs > 0) r.proxy_accuracy = proxy_accuracy(cfg, r.architecture, data, cfg.search.seed);
  r.wall_clock_s = seconds_since(t0);
}

void save_if_configured(SearchModel& model, const ExperimentConfig& cfg, std::size_t step, std::string& last_good) {
  if (cfg.search.checkpoint.empty()) return;
  save_checkpoint(model_checkpoint(model, cfg, step), cfg.search.checkpoint);
  last_good = cfg.search.checkpoint;
}

}  // namespace

SearchReport search(const ExperimentConfig& cfg, const Dataset& data, const LatencyTable& lut) {
  cfg.validate();
  const SearchConfig& s = cfg.search;
  if (s.variant != Variant::single_sigmoid && s.variant != Variant::single_ste)
    throw ConfigError("search: variant '" + variant_name(s.variant) + "' is not a single-path variant");
  lut.require_layers(cfg.space.num_layers());
  const auto t0 = Clock::now();

  SinglePathModel model(cfg.space, s.variant == Variant::single_ste ? IndicatorMode::ste : IndicatorMode::sigmoid,
                        s.beta, s.seed);
  Sgd opt(s.momentum);
  opt.add_group({model.weight_params(), 1.0, s.weight_decay});
  opt.add_group({model.arch_params(), s.threshold_lr_scale, 0.0});

  BatchStream stream(data.train, s.batch, s.seed);
  const std::size_t per_epoch = stream.batches_per_epoch();
  const std::size_t total = s.steps >= 0 ? static_cast<std::size_t>(s.steps) : s.epochs * per_epoch;
  const auto warmup = static_cast<std::size_t>(s.warmup_fraction * static_cast<double>(total));
  const auto runtime_from =
      s.delay_runtime_term ? static_cast<std::size_t>(std::ceil(s.dropout.warmup_fraction * total)) : 0;
  std::mt19937_64 drop_rng(s.seed ^ 0x9e3779b97f4a7c15ull);

  SearchReport r;
  r.variant = s.variant;
  r.lambda = s.lambda;
  r.seed = s.seed;
  r.log.reserve(total);
  r.step_seconds.reserve(total);
  std::string last_good = "none";
  ForwardContext ctx;
  ctx.lut = &lut;
  ctx.form = s.runtime_form;

  for (std::size_t step = 0; step < total; ++step) {
    const auto ts = Clock::now();
    const double p = s.dropout.at(step, total);
    ctx.keeps = draw_subset_keeps(model.net.layers().size(), p, drop_rng);
    const auto idx = stream.next();
    const double lr = warmup_cosine_lr(s.lr, step, total, warmup);
    const double lambda = step >= runtime_from ? s.lambda : 0.0;
    try {
      Graph g;
      ModelOutput out = model.forward(g, g.constant(data.batch_images(idx)), ctx);
      Var ce = cross_entropy(out.logits, data.batch_labels(idx));
      Var loss = search_loss(ce, out.runtime_ms, lambda);
      opt.zero_grad();
      g.backward(loss);
      opt.step(lr);
      r.log.push_back({step, ce.item(), out.runtime_ms.item(), loss.item(), lr, p});
    } catch (const NumericError& e) {
      diverged(step, e, last_good);
    }
    ++r.weight_steps;
    ++r.arch_steps;
    r.step_seconds.push_back(seconds_since(ts));
    if ((step + 1) % per_epoch == 0 || step + 1 == total) save_if_configured(model, cfg, step + 1, last_good);
  }
  if (total == 0) save_if_configured(model, cfg, 0, last_good);
  r.optimizer_steps = opt.steps();
  finish_report(r, model, cfg, data, lut, t0);
  return r;
}

SearchReport search_bilevel(const ExperimentConfig& cfg, const Dataset& data, const LatencyTable& lut) {
  cfg.validate();
  const SearchConfig& s = cfg.search;
  if (!is_softmax_variant(s.variant))
    throw ConfigError("search_bilevel: variant '" + variant_name(s.variant) + "' is not a softmax variant");
  lut.require_layers(cfg.space.num_layers());
  const auto t0 = Clock::now();

  std::mt19937_64 split_rng(s.seed ^ 0x2545f4914f6cdd1dull);
  const std::vector<int> order = shuffled(data.train, split_rng);
  const auto n_arch = static_cast<std::size_t>(std::floor(s.arch_valid_fraction * order.size()));
  if (n_arch < 2 || order.size() - n_arch < 2)
    throw ConfigError("search_bilevel: train split too small for a held-out architecture part");
  std::vector<int> arch_part(order.begin(), order.begin() + n_arch), weight_part(order.begin() + n_arch, order.end());

  auto model = make_search_model(cfg.space, s.variant, s.seed, s.beta);
  const ParamList weights = model->weight_params(), arch = model->arch_params();
  Sgd wopt(s.momentum), aopt(s.momentum);
  wopt.add_group({weights, 1.0, s.weight_decay});
  aopt.add_group({arch, 1.0, 0.0});

  BatchStream wstream(weight_part, s.batch, s.seed), astream(arch_part, s.batch, s.seed + 1);
  const std::size_t per_epoch = wstream.batches_per_epoch();
  const std::size_t total = s.steps >= 0 ? static_cast<std::size_t>(s.steps) : s.epochs * per_epoch;
  const auto warmup = static_cast<std::size_t>(s.warmup_fraction * static_cast<double>(total));
  std::mt19937_64 noise_rng(s.seed ^ 0xbf58476d1ce4e5b9ull);

  SearchReport r;
  r.variant = s.variant;
  r.lambda = s.lambda;
  r.seed = s.seed;
  std::string last_good = "none";
  ForwardContext ctx;
  ctx.lut = &lut;
  ctx.form = s.runtime_form;
  ctx.noise_rng = &noise_rng;
  ctx.gumbel_temperature = s.gumbel_temperature;

  auto phase = [&](std::size_t step, std::span<const int> idx, Sgd& opt, double lr, const ParamList& frozen) {
    try {
      Graph g;
      ModelOutput out = model->forward(g, g.constant(data.batch_images(idx)), ctx);
      Var ce = cross_entropy(out.logits, data.batch_labels(idx));
      Var loss = search_loss(ce, out.runtime_ms, s.lambda);
      wopt.zero_grad();
      aopt.zero_grad();
      g.backward(loss);
      if (any_grad(frozen)) ++r.frozen_grad_violations;
      opt.step(lr);
      r.log.push_back({step, ce.item(), out.runtime_ms.item(), loss.item(), lr, 0.0});
    } catch (const NumericError& e) {
      set_requires_grad(weights, true);
      set_requires_grad(arch, true);
      diverged(step, e, last_good);
    }
  };

  for (std::size_t it = 0; it < total; ++it) {
    const auto ts = Clock::now();
    set_requires_grad(weights, true);
    set_requires_grad(arch, false);
    phase(2 * it, wstream.next(), wopt, warmup_cosine_lr(s.lr, it, total, warmup), arch);
    ++r.weight_steps;

    set_requires_grad(weights, false);
    set_requires_grad(arch, true);
    phase(2 * it + 1, astream.next(), aopt, s.arch_lr, weights);
    ++r.arch_steps;
    r.step_seconds.push_back(seconds_since(ts));

    set_requires_grad(weights, true);
    if ((it + 1) % per_epoch == 0 || it + 1 == total) save_if_configured(*model, cfg, it + 1, last_good);
  }
  set_requires_grad(weights, true);
  set_requires_grad(arch, true);
  if (total == 0) save_if_configured(*model, cfg, 0, last_good);
  r.optimizer_steps = wopt.steps() + aopt.steps();
  finish_report(r, *model, cfg, data, lut, t0);
  return r;
}

SearchReport run_search(const ExperimentConfig& cfg, const Dataset& data, const LatencyTable& lut) {
  switch (cfg.search.variant) {
    case Variant::single_sigmoid:
    case Variant::single_ste: return search(cfg, data, lut);
    case Variant::single_softmax:
    case Variant::multi_path_softmax: return search_bilevel(cfg, data, lut);
    case Variant::random: break;
  }
  throw ConfigError("the random variant samples architectures; use random_search");
}

}  // namespace spnas
