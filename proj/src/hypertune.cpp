#include "spnas/hypertune.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "spnas/error.hpp"
#include "spnas/search.hpp"
#include "spnas/studies.hpp"

namespace spnas {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double unit_draw(std::mt19937_64& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

double reward(double accuracy, double runtime_ms, double target_ms) {
  if (runtime_ms <= target_ms) return accuracy;
  return accuracy * (target_ms / runtime_ms);
}

double GaussianProcess::kernel(const std::vector<double>& a, const std::vector<double>& b) const {
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = (a[i] - b[i]) / hyper_.lengthscales[i];
    d2 += d * d;
  }
  return hyper_.signal_var * std::exp(-0.5 * d2);
}

void GaussianProcess::factor() {
  const std::size_t n = x_.size();
  Eigen::MatrixXd k(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) k(i, j) = k(j, i) = kernel(x_[i], x_[j]);
  k.diagonal().array() += hyper_.noise_var;

  Eigen::LLT<Eigen::MatrixXd> llt;
  jitter_ = 0.0;
  for (double jitter = 0.0;; jitter = jitter == 0.0 ? 1e-10 : jitter * 10.0) {
    if (jitter > 1e-4 * (1.0 + 1e-9)) throw NumericError("GP covariance not positive definite after jitter 1e-4");
    Eigen::MatrixXd kj = k;
    kj.diagonal().array() += jitter;
    llt.compute(kj);
    if (llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().allFinite()) {
      jitter_ = jitter;
      break;
    }
  }
  const Eigen::MatrixXd l = llt.matrixL();
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(y_.data(), n);
  const Eigen::VectorXd alpha = llt.solve(y);
  alpha_.assign(alpha.data(), alpha.data() + n);
  chol_.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) chol_[i * n + j] = l(i, j);
  double logdet = 0.0;
  for (std::size_t i = 0; i < n; ++i) logdet += std::log(l(i, i));
  lml_ = -0.5 * y.dot(alpha) - logdet - 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
}

void GaussianProcess::fit_fixed(const std::vector<std::vector<double>>& x, const std::vector<double>& y,
                                const GpHyper& hyper) {
  if (x.empty() || x.size() != y.size()) throw ConfigError("GP fit needs matching, non-empty inputs and targets");
  for (const auto& xi : x)
    if (xi.size() != hyper.lengthscales.size()) throw ConfigError("GP input dimension does not match lengthscales");
  for (double v : y)
    if (!std::isfinite(v)) throw NumericError("GP target is not finite");
  x_ = x;
  y_mean_ = 0.0;
  for (double v : y) y_mean_ += v;
  y_mean_ /= static_cast<double>(y.size());
  double var = 0.0;
  for (double v : y) var += (v - y_mean_) * (v - y_mean_);
  var /= static_cast<double>(y.size());
  y_scale_ = var > 1e-24 ? std::sqrt(var) : 1.0;
  y_.clear();
  for (double v : y) y_.push_back((v - y_mean_) / y_scale_);
  hyper_ = hyper;
  factor();
}

void GaussianProcess::fit(const std::vector<std::vector<double>>& x, const std::vector<double>& y, const GpGrid& grid) {
  if (x.empty()) throw ConfigError("GP fit needs at least one observation");
  for (double v : y)
    if (!std::isfinite(v)) throw NumericError("GP target is not finite");
  const std::size_t d = x.front().size();
  std::size_t combos = 1;
  for (std::size_t i = 0; i < d; ++i) combos *= grid.lengthscales.size();

  GpHyper best;
  double best_lml = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t c = 0; c < combos; ++c) {
    GpHyper h;
    std::size_t rest = c;
    for (std::size_t i = 0; i < d; ++i) {
      h.lengthscales.push_back(grid.lengthscales[rest % grid.lengthscales.size()]);
      rest /= grid.lengthscales.size();
    }
    for (double s : grid.signal_vars)
      for (double nv : grid.noise_vars) {
        h.signal_var = s;
        h.noise_var = nv;
        try {
          fit_fixed(x, y, h);
        } catch (const NumericError&) {
          continue;
        }
        if (lml_ > best_lml) {
          best_lml = lml_;
          best = h;
          any = true;
        }
      }
  }
  if (!any) throw NumericError("GP covariance not positive definite for any grid hyperparameters");
  fit_fixed(x, y, best);
}

GaussianProcess::Prediction GaussianProcess::predict(const std::vector<double>& x) const {
  const std::size_t n = x_.size();
  if (n == 0) throw ConfigError("GP predict before fit");
  std::vector<double> ks(n);
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ks[i] = kernel(x, x_[i]);
    mean += ks[i] * alpha_[i];
  }
  // v = L^{-1} k*, var = k(x, x) - v'v
  std::vector<double> v(n);
  double vv = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = ks[i];
    for (std::size_t j = 0; j < i; ++j) s -= chol_[i * n + j] * v[j];
    v[i] = s / chol_[i * n + i];
    vv += v[i] * v[i];
  }
  const double var = std::max(0.0, hyper_.signal_var - vv);
  return {y_mean_ + y_scale_ * mean, y_scale_ * y_scale_ * var};
}

double expected_improvement(double mean, double var, double best) {
  const double sd = std::sqrt(std::max(var, 0.0));
  if (sd < 1e-300) return std::max(mean - best, 0.0);
  const double z = (mean - best) / sd;
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  return std::max(0.0, (mean - best) * cdf + sd * pdf);
}

std::vector<double> van_der_corput(std::size_t n, double shift) {
  std::vector<double> out;
  out.reserve(n);
  for (std::size_t i = 1; i <= n; ++i) {
    double v = 0.0, f = 0.5;
    for (std::size_t k = i; k; k >>= 1, f *= 0.5)
      if (k & 1) v += f;
    v += shift;
    out.push_back(v - std::floor(v));
  }
  return out;
}

void LambdaBounds::validate() const {
  if (!(lo > 0.0 && hi > lo && std::isfinite(hi))) throw ConfigError("lambda bounds must satisfy 0 < lo < hi");
}

double LambdaBounds::to_unit(double lambda) const { return (std::log(lambda) - std::log(lo)) / (std::log(hi) - std::log(lo)); }

double LambdaBounds::from_unit(double u) const { return std::exp(std::log(lo) + u * (std::log(hi) - std::log(lo))); }

double bo_suggest(const std::vector<Observation>& obs, const LambdaBounds& bounds, std::uint64_t seed) {
  bounds.validate();
  std::mt19937_64 rng(seed);
  const double u0 = unit_draw(rng);
  if (obs.empty()) return bounds.from_unit(u0);

  std::vector<std::vector<double>> x;
  std::vector<double> y;
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& o : obs) {
    x.push_back({bounds.to_unit(o.lambda)});
    y.push_back(o.reward);
    best = std::max(best, o.reward);
  }
  GaussianProcess gp;
  gp.fit(x, y);
  double best_u = 0.0, best_ei = -1.0;
  for (double u : van_der_corput(kAcquisitionGrid, u0)) {
    const auto p = gp.predict({u});
    const double ei = expected_improvement(p.mean, p.var, best);
    if (ei > best_ei) {
      best_ei = ei;
      best_u = u;
    }
  }
  return bounds.from_unit(best_u);
}

std::pair<double, int> multifidelity_suggest(const std::vector<Observation>& obs, const LambdaBounds& bounds,
                                             const std::vector<int>& budgets, std::uint64_t seed) {
  bounds.validate();
  if (budgets.empty()) throw ConfigError("multi-fidelity search needs at least one budget");
  std::vector<int> bs = budgets;
  std::sort(bs.begin(), bs.end());
  if (bs.front() < 1) throw ConfigError("budgets must be >= 1 epoch");
  std::mt19937_64 rng(seed);
  const double u0 = unit_draw(rng);
  if (obs.empty()) return {bounds.from_unit(u0), bs.front()};

  const int top = bs.back();
  const double span = top > bs.front() ? static_cast<double>(top - bs.front()) : 1.0;
  auto budget_coord = [&](int b) { return static_cast<double>(b - bs.front()) / span; };

  std::vector<std::vector<double>> x;
  std::vector<double> y;
  double best_top = -std::numeric_limits<double>::infinity(), best_any = best_top;
  for (const auto& o : obs) {
    x.push_back({bounds.to_unit(o.lambda), budget_coord(o.budget)});
    y.push_back(o.reward);
    best_any = std::max(best_any, o.reward);
    if (o.budget == top) best_top = std::max(best_top, o.reward);
  }
  // Improvement is measured against top-fidelity results once there are any.
  const double best = std::isfinite(best_top) ? best_top : best_any;
  GaussianProcess gp;
  gp.fit(x, y);
  const double lb = gp.hyper().lengthscales[1];

  double best_score = -1.0, best_u = 0.0;
  int best_b = bs.front();
  for (double u : van_der_corput(kAcquisitionGrid, u0)) {
    const auto p = gp.predict({u, 1.0});
    const double ei = expected_improvement(p.mean, p.var, best);
    for (int b : bs) {
      const double d = (budget_coord(b) - 1.0) / lb;
      const double score = ei * std::exp(-0.5 * d * d) / b;
      if (score > best_score) {
        best_score = score;
        best_u = u;
        best_b = b;
      }
    }
  }
  return {bounds.from_unit(best_u), best_b};
}

HyperMethod parse_method(const std::string& s) {
  if (s == "bo") return HyperMethod::bo;
  if (s == "mf") return HyperMethod::mf;
  if (s == "random") return HyperMethod::random;
  throw ConfigError("unknown hypertune method '" + s + "' (expected bo, mf or random)");
}

std::string method_name(HyperMethod m) {
  switch (m) {
    case HyperMethod::bo: return "bo";
    case HyperMethod::mf: return "mf";
    case HyperMethod::random: return "random";
  }
  return "?";
}

nlohmann::json HypertuneTrace::to_json(bool include_wall_clock) const {
  nlohmann::json s = nlohmann::json::array();
  for (const auto& t : samples) {
    nlohmann::json names = nlohmann::json::array();
    for (const auto& a : t.architecture) names.push_back(a.name());
    nlohmann::json j{{"order", t.order},       {"lambda", t.lambda},   {"budget", t.budget},
                     {"accuracy", t.accuracy}, {"runtime_ms", t.runtime_ms}, {"reward", t.reward},
                     {"failed", t.failed},     {"architecture", names}};
    if (t.failed) j["error"] = t.error;
    if (include_wall_clock) j["wall_clock_s"] = t.wall_clock_s;
    s.push_back(j);
  }
  return {{"method", method_name(method)},
          {"target_ms", target_ms},
          {"used_budget", used_budget},
          {"samples", s},
          {"incumbent", incumbent},
          {"best", samples.empty() ? nlohmann::json(nullptr) : s[best]}};
}

namespace {

// GP mean at `at` with the inputs each method uses for its own model.
double posterior_mean(const std::vector<Observation>& obs, const HypertuneOptions& opts, const std::vector<int>& budgets,
                      const Observation& at) {
  const bool mf = opts.method == HyperMethod::mf;
  const double lo = mf ? budgets.front() : 0.0;
  const double span = mf && budgets.back() > budgets.front() ? budgets.back() - lo : 1.0;
  auto input = [&](const Observation& o) {
    std::vector<double> x{opts.bounds.to_unit(o.lambda)};
    if (mf) x.push_back((o.budget - lo) / span);
    return x;
  };
  std::vector<std::vector<double>> x;
  std::vector<double> y;
  for (const auto& o : obs) {
    x.push_back(input(o));
    y.push_back(o.reward);
  }
  GaussianProcess gp;
  gp.fit(x, y);
  return gp.predict(input(at)).mean;
}

}  // namespace

HypertuneTrace hypertune(const HypertuneOptions& opts, const HyperObjective& objective) {
  opts.bounds.validate();
  if (!(objective.target_ms > 0.0)) throw ConfigError("hypertune: target runtime must be > 0 ms");
  if (!objective.backend) throw ConfigError("hypertune: no evaluation backend");
  if (opts.total_budget < 0) throw ConfigError("hypertune: total budget must be >= 0");
  if (opts.budget < 1) throw ConfigError("hypertune: per-evaluation budget must be >= 1 epoch");
  std::vector<int> budgets = opts.budgets;
  std::sort(budgets.begin(), budgets.end());
  if (opts.method == HyperMethod::mf && (budgets.empty() || budgets.front() < 1))
    throw ConfigError("hypertune: multi-fidelity budgets must be >= 1 epoch");

  HypertuneTrace trace;
  trace.method = opts.method;
  trace.target_ms = objective.target_ms;
  std::vector<Observation> obs;
  std::mt19937_64 random_rng(opts.seed);
  const int workers = std::max(1, opts.workers);

  for (;;) {
    std::vector<Observation> pending;
    std::vector<Observation> believed = obs;
    for (int w = 0; w < workers; ++w) {
      const std::uint64_t sseed = opts.seed * 1000003ull + trace.samples.size() + pending.size();
      Observation o;
      if (opts.method == HyperMethod::random) {
        o.lambda = opts.bounds.from_unit(unit_draw(random_rng));
        o.budget = opts.budget;
      } else if (opts.method == HyperMethod::bo) {
        o.lambda = bo_suggest(believed, opts.bounds, sseed);
        o.budget = opts.budget;
      } else {
        std::tie(o.lambda, o.budget) = multifidelity_suggest(believed, opts.bounds, budgets, sseed);
        // Shrink to the largest budget that still fits.
        const int remaining = opts.total_budget - trace.used_budget;
        if (o.budget > remaining) {
          int fit = 0;
          for (int b : budgets)
            if (b <= remaining) fit = b;
          if (fit) o.budget = fit;
        }
      }
      if (trace.used_budget + o.budget > opts.total_budget) break;
      trace.used_budget += o.budget;
      pending.push_back(o);
      // Pending results are stood in for by the GP mean.
      if (w + 1 < workers && opts.method != HyperMethod::random) {
        Observation b = o;
        if (!believed.empty()) b.reward = posterior_mean(believed, opts, budgets, o);
        believed.push_back(b);
      }
    }
    if (pending.empty()) break;

    const std::size_t first = trace.samples.size();
    std::vector<TradeoffSample> results(pending.size());
    parallel_for(pending.size(), workers, [&](std::size_t k) {
      TradeoffSample& t = results[k];
      t.order = first + k;
      t.lambda = pending[k].lambda;
      t.budget = pending[k].budget;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        Evaluation e = objective.backend(t.lambda, t.budget, opts.seed + t.order);
        t.accuracy = e.accuracy;
        t.runtime_ms = e.runtime_ms;
        t.architecture = std::move(e.architecture);
        t.reward = reward(t.accuracy, t.runtime_ms, objective.target_ms);
      } catch (const std::exception& ex) {
        t.failed = true;
        t.error = ex.what();
        t.reward = 0.0;
      }
      t.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    });
    for (auto& t : results) {
      obs.push_back({t.lambda, t.budget, t.reward});
      const double prev = trace.incumbent.empty() ? -std::numeric_limits<double>::infinity() : trace.incumbent.back();
      if (trace.incumbent.empty() || t.reward > prev) trace.best = trace.samples.size();
      trace.incumbent.push_back(std::max(prev, t.reward));
      trace.samples.push_back(std::move(t));
    }
  }
  if (trace.samples.empty()) {
    const int need = opts.method == HyperMethod::mf ? budgets.front() : opts.budget;
    throw ConfigError("hypertune: total budget of " + std::to_string(opts.total_budget) +
                      " epochs is smaller than one evaluation (" + std::to_string(need) + " epochs); trace is empty");
  }
  return trace;
}

Backend synthetic_backend(double target_ms, double noise) {
  return [target_ms, noise](double lambda, int budget, std::uint64_t seed) {
    const double x = std::log(lambda);
    const double shift = 1.5 * (8.0 - budget) / 6.0;
    Evaluation e;
    e.runtime_ms = target_ms * (0.5 + sigmoid(-1.5 * (x + shift)));
    e.accuracy = (0.6 + 0.35 * sigmoid(-0.8 * x)) * (1.0 - 0.25 * std::exp(-(budget - 2.0) / 2.0));
    if (noise > 0.0) {
      std::mt19937_64 rng(seed);
      e.accuracy += noise * std::normal_distribution<double>(0.0, 1.0)(rng);
    }
    e.accuracy = std::clamp(e.accuracy, 0.0, 1.0);
    return e;
  };
}

Backend search_backend(const ExperimentConfig& cfg, const Dataset& data, const LatencyTable& lut) {
  return [cfg, &data, &lut](double lambda, int budget, std::uint64_t seed) {
    ExperimentConfig c = cfg;
    c.search.lambda = lambda;
    c.search.epochs = budget;
    c.search.steps = -1;
    c.search.seed = seed;
    c.search.checkpoint.clear();
    if (c.search.proxy_epochs < 1) c.search.proxy_epochs = 1;
    const SearchReport r = run_search(c, data, lut);
    return Evaluation{*r.proxy_accuracy, r.runtime_ms, r.architecture};
  };
}

std::string GridStudy::to_csv() const {
  std::string out = "lambda";
  for (int b : budgets) out += ",budget_" + std::to_string(b);
  out += "\n";
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    out += fmt(lambdas[i]);
    for (double r : rewards[i]) out += "," + fmt(r);
    out += "\n";
  }
  return out;
}

std::vector<std::size_t> GridStudy::row_argmax() const {
  std::vector<std::size_t> out;
  for (const auto& row : rewards) out.push_back(std::max_element(row.begin(), row.end()) - row.begin());
  return out;
}

GridStudy grid_study(const std::vector<double>& lambdas, const std::vector<int>& budgets,
                     const HyperObjective& objective, std::uint64_t seed, int workers) {
  if (lambdas.empty() || budgets.empty()) throw ConfigError("grid study needs non-empty lambda and budget grids");
  for (double l : lambdas)
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("grid study lambdas must be finite and >= 0");
  for (int b : budgets)
    if (b < 1) throw ConfigError("grid study budgets must be >= 1 epoch");
  GridStudy g;
  g.lambdas = lambdas;
  g.budgets = budgets;
  g.rewards.assign(lambdas.size(), std::vector<double>(budgets.size(), 0.0));
  g.cells.assign(lambdas.size(), std::vector<TradeoffSample>(budgets.size()));
  const std::size_t nb = budgets.size();
  parallel_for(lambdas.size() * nb, workers, [&](std::size_t k) {
    const std::size_t i = k / nb, j = k % nb;
    TradeoffSample& t = g.cells[i][j];
    t.order = k;
    t.lambda = lambdas[i];
    t.budget = budgets[j];
    Evaluation e = objective.backend(t.lambda, t.budget, seed + k);
    t.accuracy = e.accuracy;
    t.runtime_ms = e.runtime_ms;
    t.architecture = std::move(e.architecture);
    t.reward = reward(t.accuracy, t.runtime_ms, objective.target_ms);
    g.rewards[i][j] = t.reward;
  });
  return g;
}

}  // namespace spnas
