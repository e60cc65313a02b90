#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "spnas/checkpoint.hpp"
#include "spnas/config.hpp"
#include "spnas/error.hpp"
#include "spnas/hypertune.hpp"
#include "spnas/search.hpp"
#include "spnas/studies.hpp"
#include "spnas/train.hpp"

using namespace spnas;

namespace {

struct Common {
  std::string config, lut, out;
  std::uint64_t seed = 0;
  // Dataset split and synthesized LUT; kept apart from --seed so that runs
  // with different seeds see the same data and hardware.
  std::uint64_t data_seed = 0;
};

void add_common(CLI::App* cmd, Common& c, bool with_lut = true) {
  cmd->add_option("--config", c.config, "experiment config JSON (defaults when omitted)");
  cmd->add_option("--seed", c.seed, "run seed");
  cmd->add_option("--data-seed", c.data_seed, "seed of the dataset split and synthesized LUT");
  cmd->add_option("--out", c.out, "machine-readable output file");
  if (with_lut) cmd->add_option("--lut", c.lut, "latency table JSON (overrides the config)");
}

ExperimentConfig config_of(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  if (!c.lut.empty()) cfg.lut.path = c.lut;
  cfg.search.seed = c.seed;
  cfg.validate();
  return cfg;
}

void write_text(const std::string& text, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write '" + path + "'");
  f << text;
}

void write_json(const nlohmann::json& j, const std::string& path) {
  if (!path.empty()) write_json_file(j, path);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-path NAS on desk-scale data"};
  app.require_subcommand(1);

  Common c;
  double noise = 0.1, ms_per_mac = kDefaultMsPerMac;
  auto* lutgen_cmd = app.add_subcommand("lutgen", "synthesize a latency table for the config's search space");
  add_common(lutgen_cmd, c, false);
  lutgen_cmd->add_option("--noise", noise, "relative per-entry noise");
  lutgen_cmd->add_option("--ms-per-mac", ms_per_mac, "milliseconds per multiply-accumulate");

  double lambda = -1.0;
  long steps = -2;
  int epochs = -1;
  std::string variant, checkpoint, log_path;
  auto* search_cmd = app.add_subcommand("search", "run an architecture search");
  add_common(search_cmd, c);
  search_cmd->add_option("--lambda", lambda, "runtime trade-off coefficient");
  search_cmd->add_option("--steps", steps, "optimizer steps (overrides epochs)");
  search_cmd->add_option("--epochs", epochs, "search epochs");
  search_cmd->add_option("--variant", variant, "single_sigmoid|single_ste|single_softmax|multi_path_softmax");
  search_cmd->add_option("--checkpoint", checkpoint, "checkpoint written every epoch and at the end");
  search_cmd->add_option("--log", log_path, "per-step CSV log");

  auto* derive_cmd = app.add_subcommand("derive", "decode the architecture stored in a search checkpoint");
  add_common(derive_cmd, c, false);
  derive_cmd->add_option("--checkpoint", checkpoint, "search checkpoint")->required();

  std::string arch_path;
  auto* train_cmd = app.add_subcommand("train", "train a fixed architecture and report validation accuracy");
  add_common(train_cmd, c, false);
  train_cmd->add_option("--arch", arch_path, "architecture JSON")->required();
  train_cmd->add_option("--epochs", epochs, "training epochs");

  auto* latency_cmd = app.add_subcommand("latency", "hard-mode runtime of an architecture");
  add_common(latency_cmd, c);
  latency_cmd->add_option("--arch", arch_path, "architecture JSON")->required();

  int n_samples = 10;
  double window_lo = 0.0, window_hi = std::numeric_limits<double>::infinity();
  auto* random_cmd = app.add_subcommand("random-search", "proxy-train rejection-sampled architectures");
  add_common(random_cmd, c);
  random_cmd->add_option("--n", n_samples, "number of architectures");
  random_cmd->add_option("--window-lo", window_lo, "lower runtime bound (ms)");
  random_cmd->add_option("--window-hi", window_hi, "upper runtime bound (ms)");

  std::vector<std::string> variants{"single_sigmoid", "single_ste", "single_softmax", "multi_path_softmax", "random"};
  int runs = 20, intra = 20, workers = 1;
  auto* variance_cmd = app.add_subcommand("variance-study", "inter- and intra-run variance of the search variants");
  add_common(variance_cmd, c);
  variance_cmd->add_option("--variants", variants, "variants to run")->delimiter(',');
  variance_cmd->add_option("--runs", runs, "seeds seed .. seed + runs - 1");
  variance_cmd->add_option("--intra", intra, "architectures sampled from the best softmax run");
  variance_cmd->add_option("--lambda", lambda, "runtime trade-off coefficient");
  variance_cmd->add_option("--window-lo", window_lo, "random variant: lower runtime bound (ms)");
  variance_cmd->add_option("--window-hi", window_hi, "random variant: upper runtime bound (ms)");
  variance_cmd->add_option("--workers", workers, "parallel runs");

  auto* ablation_cmd = app.add_subcommand("ablation", "standalone vs shared-superkernel subset accuracy");
  add_common(ablation_cmd, c, false);
  ablation_cmd->add_option("--epochs", epochs, "training epochs for every row");

  std::string method = "bo", backend = "synthetic";
  double target_ms = -1.0, target_quantile = -1.0;
  int total_budget = 120, eval_budget = 8;
  std::vector<int> budgets{2, 3, 4, 5, 6, 7, 8};
  double lambda_lo = 1e-3, lambda_hi = 1e2;
  auto* hyper_cmd = app.add_subcommand("hypertune", "search lambda for a target runtime");
  add_common(hyper_cmd, c);
  hyper_cmd->add_option("--method", method, "bo|mf|random");
  hyper_cmd->add_option("--target-ms", target_ms, "target runtime R_T (ms)");
  hyper_cmd->add_option("--target-quantile", target_quantile, "R_T as a quantile of all architectures' runtimes");
  hyper_cmd->add_option("--budget-epochs", total_budget, "total epoch budget");
  hyper_cmd->add_option("--eval-epochs", eval_budget, "epochs per evaluation (bo, random)");
  hyper_cmd->add_option("--budgets", budgets, "fidelities in epochs (mf)")->delimiter(',');
  hyper_cmd->add_option("--backend", backend, "real|synthetic");
  hyper_cmd->add_option("--lambda-lo", lambda_lo, "lower lambda bound");
  hyper_cmd->add_option("--lambda-hi", lambda_hi, "upper lambda bound");
  hyper_cmd->add_option("--workers", workers, "evaluations per round");

  std::vector<double> lambdas{0.001, 0.01, 0.1, 1.0, 10.0};
  auto* grid_cmd = app.add_subcommand("grid-study", "reward over a lambda x budget grid, as CSV");
  add_common(grid_cmd, c);
  grid_cmd->add_option("--lambdas", lambdas, "lambda grid")->delimiter(',');
  grid_cmd->add_option("--budgets", budgets, "budget grid in epochs")->delimiter(',');
  grid_cmd->add_option("--target-ms", target_ms, "target runtime R_T (ms)");
  grid_cmd->add_option("--target-quantile", target_quantile, "R_T as a quantile of all architectures' runtimes");
  grid_cmd->add_option("--backend", backend, "real|synthetic");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    ExperimentConfig cfg = config_of(c);
    auto resolve_target = [&](const LatencyTable& lut) {
      if (target_ms > 0.0) return target_ms;
      if (target_quantile >= 0.0) return runtime_quantile(cfg.space, lut, target_quantile);
      throw ConfigError("give --target-ms or --target-quantile");
    };
    auto objective_of = [&](const Dataset* data, const LatencyTable& lut) {
      if (backend == "synthetic") {
        const double t = target_ms > 0.0 ? target_ms : 80.0;
        return HyperObjective{t, synthetic_backend(t)};
      }
      if (backend != "real") throw ConfigError("unknown backend '" + backend + "' (real|synthetic)");
      return HyperObjective{resolve_target(lut), search_backend(cfg, *data, lut)};
    };

    if (app.got_subcommand(lutgen_cmd)) {
      const LatencyTable lut = lutgen(cfg.space, c.seed, noise, ms_per_mac);
      if (!c.out.empty()) write_lut(lut, c.out);
      const auto [lo, hi] = runtime_bounds(cfg.space, lut);
      std::cout << "layers " << lut.layers.size() << ", fixed_overhead_ms " << fmt(lut.fixed_overhead_ms)
                << ", runtime range [" << fmt(lo) << ", " << fmt(hi) << "] ms\n";
    } else if (app.got_subcommand(search_cmd)) {
      if (lambda >= 0.0) cfg.search.lambda = lambda;
      if (steps >= -1) cfg.search.steps = steps;
      if (epochs >= 1) cfg.search.epochs = epochs;
      if (!variant.empty()) cfg.search.variant = parse_variant(variant);
      if (!checkpoint.empty()) cfg.search.checkpoint = checkpoint;
      cfg.validate();
      const Dataset data = make_dataset(cfg.data, c.data_seed);
      const LatencyTable lut = make_lut(cfg, c.data_seed);
      const SearchReport r = run_search(cfg, data, lut);
      write_json(r.to_json(), c.out);
      if (!log_path.empty()) write_text(r.log_csv(), log_path);
      std::cout << variant_name(r.variant) << " lambda " << fmt(r.lambda) << ": " << architecture_str(r.architecture)
                << "\nruntime " << fmt(r.runtime_ms) << " ms";
      if (r.proxy_accuracy) std::cout << ", proxy accuracy " << fmt(*r.proxy_accuracy);
      std::cout << ", " << r.optimizer_steps << " optimizer steps, " << fmt(r.wall_clock_s) << " s\n";
    } else if (app.got_subcommand(derive_cmd)) {
      const Architecture arch = decode_checkpoint(load_checkpoint(checkpoint));
      write_json(architecture_to_json(arch), c.out);
      std::cout << architecture_str(arch) << "\n";
    } else if (app.got_subcommand(train_cmd)) {
      if (epochs >= 0) cfg.train.epochs = epochs;
      cfg.validate();
      const Architecture arch = architecture_from_json(read_json_file(arch_path));
      const Dataset data = make_dataset(cfg.data, c.data_seed);
      const TrainResult r = train_fixed(cfg.space, arch, data, cfg.train, c.seed);
      write_json({{"architecture", architecture_to_json(arch)},
                  {"accuracy", r.accuracy},
                  {"steps", r.steps},
                  {"final_ce", r.final_ce},
                  {"seed", c.seed}},
                 c.out);
      std::cout << "accuracy " << fmt(r.accuracy) << " after " << r.steps << " steps\n";
    } else if (app.got_subcommand(latency_cmd)) {
      const Architecture arch = architecture_from_json(read_json_file(arch_path));
      // A given table only has to cover the architecture, not the config's space.
      const LatencyTable lut = cfg.lut.path.empty() ? make_lut(cfg, c.data_seed)
                                                    : ingest_lut(cfg.lut.path, {cfg.lut.reject_non_monotone});
      const double r = network_runtime(arch, lut);
      write_json({{"architecture", architecture_to_json(arch)}, {"runtime_ms", r}}, c.out);
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", r);
      std::cout << buf << "\n";
    } else if (app.got_subcommand(random_cmd)) {
      const Dataset data = make_dataset(cfg.data, c.data_seed);
      const LatencyTable lut = make_lut(cfg, c.data_seed);
      const RandomSearchReport r = random_search(cfg, n_samples, {window_lo, window_hi}, data, lut, c.seed);
      write_json(r.to_json(), c.out);
      std::cout << r.samples.size() << " samples, accuracy mean " << fmt(r.accuracy.mean) << " sd "
                << fmt(r.accuracy.stddev()) << ", runtime mean " << fmt(r.runtime.mean) << " ms, acceptance "
                << fmt(r.acceptance_rate()) << "\n";
    } else if (app.got_subcommand(variance_cmd)) {
      if (lambda >= 0.0) cfg.search.lambda = lambda;
      std::vector<Variant> vs;
      for (const auto& v : variants) vs.push_back(parse_variant(v));
      VarianceOptions o;
      for (int i = 0; i < runs; ++i) o.seeds.push_back(c.seed + static_cast<std::uint64_t>(i));
      o.intra_samples = intra;
      o.workers = workers;
      o.window = {window_lo, window_hi};
      const Dataset data = make_dataset(cfg.data, c.data_seed);
      const LatencyTable lut = make_lut(cfg, c.data_seed);
      const VarianceReport r = variance_study(cfg, vs, o, data, lut);
      write_json(r.to_json(), c.out);
      for (const auto& cell : r.cells)
        std::cout << variant_name(cell.variant) << " " << cell.kind << ": accuracy " << fmt(cell.accuracy.mean)
                  << " var " << fmt(cell.accuracy.var) << ", runtime " << fmt(cell.runtime.mean) << " var "
                  << fmt(cell.runtime.var) << "\n";
    } else if (app.got_subcommand(ablation_cmd)) {
      if (epochs >= 0) cfg.train.epochs = epochs;
      const Dataset data = make_dataset(cfg.data, c.data_seed);
      const AblationReport r = shared_subset_ablation(cfg, data, c.seed);
      write_json(r.to_json(), c.out);
      for (const auto& row : r.rows) std::cout << row.name << ": " << fmt(row.accuracy) << "\n";
    } else if (app.got_subcommand(hyper_cmd)) {
      HypertuneOptions o;
      o.method = parse_method(method);
      o.total_budget = total_budget;
      o.budget = eval_budget;
      o.budgets = budgets;
      o.bounds = {lambda_lo, lambda_hi};
      o.seed = c.seed;
      o.workers = workers;
      std::optional<Dataset> data;
      const LatencyTable lut = make_lut(cfg, c.data_seed);
      if (backend == "real") data = make_dataset(cfg.data, c.data_seed);
      const HyperObjective obj = objective_of(data ? &*data : nullptr, lut);
      const HypertuneTrace t = hypertune(o, obj);
      write_json(t.to_json(), c.out);
      const auto& best = t.samples[t.best];
      std::cout << method_name(t.method) << ": " << t.samples.size() << " evaluations, " << t.used_budget
                << " epochs; best lambda " << fmt(best.lambda) << " reward " << fmt(best.reward) << " (accuracy "
                << fmt(best.accuracy) << ", runtime " << fmt(best.runtime_ms) << " ms, target " << fmt(t.target_ms)
                << " ms)\n";
    } else if (app.got_subcommand(grid_cmd)) {
      std::optional<Dataset> data;
      const LatencyTable lut = make_lut(cfg, c.data_seed);
      if (backend == "real") data = make_dataset(cfg.data, c.data_seed);
      const GridStudy g = grid_study(lambdas, budgets, objective_of(data ? &*data : nullptr, lut), c.seed);
      if (!c.out.empty()) write_text(g.to_csv(), c.out);
      const auto argmax = g.row_argmax();
      for (std::size_t i = 0; i < g.lambdas.size(); ++i)
        std::cout << "lambda " << fmt(g.lambdas[i]) << ": best budget " << g.budgets[argmax[i]] << " reward "
                  << fmt(g.rewards[i][argmax[i]]) << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << e.what() << "\n";
    return 3;
  } catch (const InfeasibleError& e) {
    std::cerr << e.what() << "\n";
    return 4;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  return 0;
}
