#include "spnas/studies.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <sstream>
#include <thread>

#include "spnas/error.hpp"
#include "spnas/train.hpp"

namespace spnas {

namespace {

std::string ms_str(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

nlohmann::json summary_json(const Summary& s) { return {{"n", s.n}, {"mean", s.mean}, {"var", s.var}}; }

}  // namespace

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& job) {
  std::vector<std::exception_ptr> errors(n);
  const std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

RejectionSampler::RejectionSampler(const SearchSpaceConfig& space, const LatencyTable& lut, RuntimeWindow window,
                                   std::uint64_t seed, std::size_t max_attempts)
    : lut_(lut), window_(window), bounds_(runtime_bounds(space, lut)), max_attempts_(max_attempts), rng_(seed) {
  for (const auto& s : space.layer_specs()) candidates_.push_back(MBConvType::candidates(s.skippable()));
  if (!(window.lo <= window.hi)) infeasible("empty window");
}

void RejectionSampler::infeasible(const std::string& why) const {
  throw InfeasibleError("no architecture with runtime in [" + ms_str(window_.lo) + ", " + ms_str(window_.hi) +
                        "] ms (" + why + "); achievable runtimes span [" + ms_str(bounds_.first) + ", " +
                        ms_str(bounds_.second) + "] ms");
}

Architecture RejectionSampler::draw_uniform() {
  Architecture arch;
  for (const auto& c : candidates_) {
    std::uniform_int_distribution<std::size_t> pick(0, c.size() - 1);
    arch.push_back(c[pick(rng_)]);
  }
  return arch;
}

bool RejectionSampler::accepts(const Architecture& arch) const { return window_.contains(network_runtime(arch, lut_)); }

Architecture RejectionSampler::sample() {
  if (window_.hi < bounds_.first || window_.lo > bounds_.second) infeasible("window outside the search space");
  for (std::size_t i = 0; i < max_attempts_; ++i) {
    Architecture arch = draw_uniform();
    ++attempts_;
    if (accepts(arch)) {
      ++accepted_;
      return arch;
    }
  }
  infeasible(std::to_string(max_attempts_) + " draws rejected");
}

std::vector<double> enumerate_runtimes(const SearchSpaceConfig& space, const LatencyTable& lut, std::size_t limit) {
  const auto specs = space.layer_specs();
  lut.require_layers(static_cast<int>(specs.size()));
  // Per-layer runtimes are summed over the cartesian product, layer by layer.
  std::vector<double> sums{lut.fixed_overhead_ms};
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto cands = MBConvType::candidates(specs[i].skippable());
    if (sums.size() * cands.size() > limit)
      throw ConfigError("search space has more than " + std::to_string(limit) + " architectures to enumerate");
    std::vector<double> next;
    next.reserve(sums.size() * cands.size());
    for (double s : sums)
      for (const MBConvType& t : cands) next.push_back(s + layer_runtime(t, lut.layers[i]));
    sums = std::move(next);
  }
  std::sort(sums.begin(), sums.end());
  return sums;
}

double runtime_quantile(const SearchSpaceConfig& space, const LatencyTable& lut, double q) {
  if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("runtime quantile must lie in [0, 1]");
  const auto rs = enumerate_runtimes(space, lut);
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(rs.size())));
  return rs[rank == 0 ? 0 : rank - 1];
}

double Summary::stddev() const { return std::sqrt(var); }

Summary summarize(const std::vector<double>& xs) {
  Summary s;
  s.n = xs.size();
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() >= 2) {
    for (double x : xs) s.var += (x - s.mean) * (x - s.mean);
    s.var /= static_cast<double>(xs.size() - 1);
  }
  return s;
}

nlohmann::json to_json(const ArchitectureRun& r) {
  nlohmann::json names = nlohmann::json::array();
  for (const auto& t : r.architecture) names.push_back(t.name());
  return {{"seed", r.seed}, {"architecture", names}, {"runtime_ms", r.runtime_ms}, {"accuracy", r.accuracy}};
}

nlohmann::json RandomSearchReport::to_json() const {
  nlohmann::json s = nlohmann::json::array();
  for (const auto& r : samples) s.push_back(spnas::to_json(r));
  return {{"samples", s},
          {"best", samples.empty() ? nlohmann::json(nullptr) : spnas::to_json(samples[best])},
          {"accuracy", summary_json(accuracy)},
          {"runtime_ms", summary_json(runtime)},
          {"attempts", attempts},
          {"accepted", accepted},
          {"acceptance_rate", acceptance_rate()}};
}

ArchitectureRun random_sample(const ExperimentConfig& cfg, RuntimeWindow window, const Dataset& data,
                              const LatencyTable& lut, std::uint64_t seed, std::size_t* attempts) {
  RejectionSampler sampler(cfg.space, lut, window, seed);
  ArchitectureRun r;
  r.seed = seed;
  r.architecture = sampler.sample();
  r.runtime_ms = network_runtime(r.architecture, lut);
  r.accuracy = proxy_accuracy(cfg, r.architecture, data, seed);
  if (attempts) *attempts = sampler.attempts();
  return r;
}

RandomSearchReport random_search(const ExperimentConfig& cfg, int n_samples, RuntimeWindow window, const Dataset& data,
                                 const LatencyTable& lut, std::uint64_t seed, int workers) {
  if (n_samples < 1) throw ConfigError("random search needs at least one sample");
  lut.require_layers(cfg.space.num_layers());
  RandomSearchReport rep;
  rep.samples.resize(n_samples);
  std::vector<std::size_t> attempts(n_samples, 0);
  parallel_for(n_samples, workers,
               [&](std::size_t j) { rep.samples[j] = random_sample(cfg, window, data, lut, seed + j, &attempts[j]); });
  std::vector<double> acc, rt;
  for (std::size_t j = 0; j < rep.samples.size(); ++j) {
    acc.push_back(rep.samples[j].accuracy);
    rt.push_back(rep.samples[j].runtime_ms);
    if (rep.samples[j].accuracy > rep.samples[rep.best].accuracy) rep.best = j;
    rep.attempts += attempts[j];
  }
  rep.accepted = rep.samples.size();
  rep.accuracy = summarize(acc);
  rep.runtime = summarize(rt);
  return rep;
}

Architecture sample_distribution(const TypeDistribution& d, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Architecture arch;
  for (const auto& layer : d) {
    double total = 0.0;
    for (const auto& [t, p] : layer) total += p;
    const double x = u(rng) * total;
    double acc = 0.0;
    MBConvType chosen = layer.back().first;
    for (const auto& [t, p] : layer) {
      acc += p;
      if (x < acc) {
        chosen = t;
        break;
      }
    }
    arch.push_back(chosen);
  }
  return arch;
}

nlohmann::json VarianceReport::to_json() const {
  nlohmann::json out{{"cells", nlohmann::json::array()}};
  for (const auto& c : cells) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : c.runs) runs.push_back(spnas::to_json(r));
    out["cells"].push_back({{"variant", variant_name(c.variant)},
                            {"kind", c.kind},
                            {"accuracy", summary_json(c.accuracy)},
                            {"runtime_ms", summary_json(c.runtime)},
                            {"runs", runs}});
  }
  // Reported, not asserted: single-path sigmoid variance across seeds against
  // the spread of architectures sampled from one softmax run.
  const VarianceCell* sig = find(Variant::single_sigmoid, "inter");
  const VarianceCell* soft = find(Variant::single_softmax, "intra");
  if (sig && soft)
    out["observations"] = {{"single_sigmoid_inter_accuracy_var", sig->accuracy.var},
                           {"single_softmax_intra_accuracy_var", soft->accuracy.var},
                           {"sigmoid_var_le_softmax_intra_var", sig->accuracy.var <= soft->accuracy.var}};
  return out;
}

const VarianceCell* VarianceReport::find(Variant v, const std::string& kind) const {
  for (const auto& c : cells)
    if (c.variant == v && c.kind == kind) return &c;
  return nullptr;
}

VarianceReport variance_study(const ExperimentConfig& cfg, const std::vector<Variant>& variants,
                              const VarianceOptions& opts, const Dataset& data, const LatencyTable& lut) {
  std::vector<std::uint64_t> seeds = opts.seeds;
  if (seeds.empty())
    for (int i = 0; i < opts.n_runs; ++i) seeds.push_back(static_cast<std::uint64_t>(i));
  if (seeds.size() < 2) throw ConfigError("variance study needs at least 2 runs");
  if (variants.empty()) throw ConfigError("variance study needs at least one variant");
  if (opts.intra_samples < 2) throw ConfigError("variance study needs at least 2 intra-run samples");

  const std::size_t runs = seeds.size();
  std::vector<ArchitectureRun> results(variants.size() * runs);
  parallel_for(results.size(), opts.workers, [&](std::size_t job) {
    const Variant v = variants[job / runs];
    const std::uint64_t seed = seeds[job % runs];
    if (v == Variant::random) {
      results[job] = random_sample(cfg, opts.window, data, lut, seed);
      return;
    }
    ExperimentConfig c = cfg;
    c.search.variant = v;
    c.search.seed = seed;
    c.search.checkpoint.clear();
    const SearchReport rep = run_search(c, data, lut);
    ArchitectureRun& r = results[job];
    r.seed = seed;
    r.architecture = rep.architecture;
    r.runtime_ms = rep.runtime_ms;
    r.accuracy = rep.proxy_accuracy ? *rep.proxy_accuracy : proxy_accuracy(c, rep.architecture, data, seed);
    r.distribution = rep.distribution;
  });

  VarianceReport report;
  auto make_cell = [](Variant v, const char* kind, std::vector<ArchitectureRun> rs) {
    VarianceCell cell{v, kind, std::move(rs), {}, {}};
    std::vector<double> acc, rt;
    for (const auto& r : cell.runs) {
      acc.push_back(r.accuracy);
      rt.push_back(r.runtime_ms);
    }
    cell.accuracy = summarize(acc);
    cell.runtime = summarize(rt);
    return cell;
  };
  for (std::size_t vi = 0; vi < variants.size(); ++vi)
    report.cells.push_back(make_cell(variants[vi], "inter",
                                     {results.begin() + vi * runs, results.begin() + (vi + 1) * runs}));

  // Intra-run spread: architectures drawn from the best run's distribution,
  // all proxy-trained with that run's seed so only the architecture varies.
  for (std::size_t vi = 0; vi < variants.size(); ++vi) {
    if (!is_softmax_variant(variants[vi])) continue;
    const auto& inter = report.cells[vi].runs;
    std::size_t best = 0;
    for (std::size_t i = 1; i < inter.size(); ++i)
      if (inter[i].accuracy > inter[best].accuracy) best = i;
    std::mt19937_64 rng(inter[best].seed ^ 0x94d049bb133111ebull);
    std::vector<ArchitectureRun> samples(opts.intra_samples);
    for (auto& s : samples) {
      s.seed = inter[best].seed;
      s.architecture = sample_distribution(inter[best].distribution, rng);
      s.runtime_ms = network_runtime(s.architecture, lut);
    }
    parallel_for(samples.size(), opts.workers, [&](std::size_t i) {
      samples[i].accuracy = proxy_accuracy(cfg, samples[i].architecture, data, samples[i].seed);
    });
    report.cells.push_back(make_cell(variants[vi], "intra", std::move(samples)));
  }
  return report;
}

nlohmann::json AblationReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) rows_json.push_back({{"name", r.name}, {"accuracy", r.accuracy}});
  return {{"rows", rows_json}};
}

Var shared_forward(Supernet& net, Graph& g, Var x, bool k5, bool training) {
  Gates gates;
  gates.k5 = g.scalar(k5 ? 1.0 : 0.0);
  gates.e3 = g.scalar(1.0);
  gates.e6 = g.scalar(1.0);
  gates.se25 = g.scalar(0.0);
  gates.se50 = g.scalar(0.0);
  std::vector<LayerGating> gating(net.layers().size());
  for (auto& lg : gating) lg.external = gates;
  return net.forward(g, x, gating, training).logits;
}

AblationReport shared_subset_ablation(const ExperimentConfig& cfg, const Dataset& data, std::uint64_t seed) {
  cfg.validate();
  const TrainConfig& t = cfg.train;
  const int L = cfg.space.num_layers();
  AblationReport rep;

  rep.rows.push_back(
      {"standalone MBConv-3x3-6", train_fixed(cfg.space, Architecture(L, {3, 6, 0.0, false}), data, t, seed).accuracy});
  rep.rows.push_back(
      {"standalone MBConv-5x5-6", train_fixed(cfg.space, Architecture(L, {5, 6, 0.0, false}), data, t, seed).accuracy});

  // Switchable training: both subsets see every batch and their gradients
  // accumulate into the shared superkernel.
  Supernet net(cfg.space, seed);
  Sgd opt(t.momentum);
  opt.add_group({net.weight_params(), 1.0, t.weight_decay});
  BatchStream stream(data.train, t.batch, seed);
  const std::size_t total = t.max_steps >= 0 ? static_cast<std::size_t>(t.max_steps) : t.epochs * stream.batches_per_epoch();
  const auto warmup = static_cast<std::size_t>(t.warmup_fraction * static_cast<double>(total));
  for (std::size_t step = 0; step < total; ++step) {
    const auto idx = stream.next();
    const auto labels = data.batch_labels(idx);
    Graph g;
    Var x = g.constant(data.batch_images(idx));
    Var loss = cross_entropy(shared_forward(net, g, x, false, true), labels) +
               cross_entropy(shared_forward(net, g, x, true, true), labels);
    opt.zero_grad();
    g.backward(loss);
    opt.step(warmup_cosine_lr(t.lr, step, total, warmup));
  }

  // The shared batchnorm statistics mix both subsets; each is re-estimated
  // before its own evaluation.
  for (bool k5 : {false, true}) {
    const ForwardFn fwd = [&](Graph& g, Var x, bool training) { return shared_forward(net, g, x, k5, training); };
    recalibrate_batchnorm(net.batchnorms(), fwd, data, data.train, t.batch, seed);
    rep.rows.push_back({k5 ? "shared superkernel, full 5x5" : "shared superkernel, inner 3x3", evaluate(fwd, data, data.valid)});
  }
  return rep;
}

}  // namespace spnas
