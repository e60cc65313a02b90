#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spnas/config.hpp"
#include "spnas/datasets.hpp"
#include "spnas/latency.hpp"
#include "spnas/searchspace.hpp"

namespace spnas {

// acc * (R / R_T)^w with w = 0 when R <= R_T and w = -1 otherwise.
double reward(double accuracy, double runtime_ms, double target_ms);

// Squared-exponential ARD kernel hyperparameters.
struct GpHyper {
  std::vector<double> lengthscales;
  double signal_var = 1.0;
  double noise_var = 1e-6;
};

struct GpGrid {
  std::vector<double> lengthscales{0.05, 0.1, 0.2, 0.4, 0.8, 1.6};
  std::vector<double> signal_vars{0.25, 1.0, 4.0};
  std::vector<double> noise_vars{1e-6, 1e-4, 1e-2, 1e-1};
};

// Exact GP regression on targets centred at their mean and scaled by their
// standard deviation (when non-zero); the prior mean is the sample mean.
class GaussianProcess {
 public:
  struct Prediction {
    double mean = 0.0, var = 0.0;
  };

  // Hyperparameters by maximum marginal likelihood over the grid.
  void fit(const std::vector<std::vector<double>>& x, const std::vector<double>& y, const GpGrid& grid = {});
  void fit_fixed(const std::vector<std::vector<double>>& x, const std::vector<double>& y, const GpHyper& hyper);

  Prediction predict(const std::vector<double>& x) const;
  double kernel(const std::vector<double>& a, const std::vector<double>& b) const;
  double log_marginal_likelihood() const { return lml_; }
  const GpHyper& hyper() const { return hyper_; }
  // Jitter added to the diagonal to obtain a Cholesky factor.
  double jitter() const { return jitter_; }
  double y_mean() const { return y_mean_; }
  double y_scale() const { return y_scale_; }
  std::size_t size() const { return x_.size(); }

 private:
  void factor();

  std::vector<std::vector<double>> x_;
  std::vector<double> y_;  // standardized
  double y_mean_ = 0.0, y_scale_ = 1.0;
  GpHyper hyper_;
  std::vector<double> alpha_;
  std::vector<double> chol_;  // lower-triangular, row-major n x n
  double lml_ = 0.0, jitter_ = 0.0;
};

double expected_improvement(double mean, double var, double best);

// Points of the base-2 van der Corput sequence starting at index 1, shifted
// by `shift` modulo 1.
std::vector<double> van_der_corput(std::size_t n, double shift);

struct LambdaBounds {
  double lo = 1e-3, hi = 1e2;
  void validate() const;
  double to_unit(double lambda) const;
  double from_unit(double u) const;
};

struct Observation {
  double lambda = 1.0;
  int budget = 1;
  double reward = 0.0;
};

inline constexpr std::size_t kAcquisitionGrid = 1024;

// Vanilla BO over ln(lambda): EI maximized on a seeded quasi-random grid;
// with no observations a seeded uniform draw in ln(lambda).
double bo_suggest(const std::vector<Observation>& obs, const LambdaBounds& bounds, std::uint64_t seed);

// GP over (ln lambda, budget). A candidate (lambda, b) scores
// EI at the top budget * corr(b, top) / b, where corr is the kernel's budget
// correlation. With no observations: seeded lambda at the lowest budget.
std::pair<double, int> multifidelity_suggest(const std::vector<Observation>& obs, const LambdaBounds& bounds,
                                             const std::vector<int>& budgets, std::uint64_t seed);

struct Evaluation {
  double accuracy = 0.0;
  double runtime_ms = 0.0;
  Architecture architecture;
};

using Backend = std::function<Evaluation(double lambda, int budget, std::uint64_t seed)>;

struct HyperObjective {
  double target_ms = 1.0;
  Backend backend;
};

struct TradeoffSample {
  std::size_t order = 0;  // position in which the result entered the model
  double lambda = 1.0;
  int budget = 1;
  double accuracy = 0.0, runtime_ms = 0.0, reward = 0.0;
  double wall_clock_s = 0.0;
  bool failed = false;
  std::string error;
  Architecture architecture;
};

enum class HyperMethod { bo, mf, random };
HyperMethod parse_method(const std::string& s);
std::string method_name(HyperMethod m);

struct HypertuneOptions {
  HyperMethod method = HyperMethod::bo;
  int total_budget = 120;
  int budget = 8;  // per evaluation for bo and random
  std::vector<int> budgets{2, 3, 4, 5, 6, 7, 8};  // mf
  LambdaBounds bounds;
  std::uint64_t seed = 0;
  // Evaluations per round. Rounds are filled with the GP mean standing in for
  // pending results and incorporated in suggestion order.
  int workers = 1;
};

struct HypertuneTrace {
  HyperMethod method = HyperMethod::bo;
  double target_ms = 1.0;
  std::vector<TradeoffSample> samples;
  std::vector<double> incumbent;  // best reward after each sample
  std::size_t best = 0;
  int used_budget = 0;

  nlohmann::json to_json(bool include_wall_clock = false) const;
};

HypertuneTrace hypertune(const HypertuneOptions& opts, const HyperObjective& objective);

// Analytic stand-in for a NAS run: runtime falls and accuracy rises with the
// budget; at low budgets the runtime curve is shifted towards small lambda,
// so low-fidelity optima overshoot the top-fidelity one.
Backend synthetic_backend(double target_ms = 80.0, double noise = 0.0);

// Real backend: a search at (lambda, budget epochs) reporting proxy accuracy
// and hard-mode runtime.
Backend search_backend(const ExperimentConfig& cfg, const Dataset& data, const LatencyTable& lut);

struct GridStudy {
  std::vector<double> lambdas;
  std::vector<int> budgets;
  std::vector<std::vector<double>> rewards;  // [lambda][budget]
  std::vector<std::vector<TradeoffSample>> cells;

  std::string to_csv() const;
  std::vector<std::size_t> row_argmax() const;
};

GridStudy grid_study(const std::vector<double>& lambdas, const std::vector<int>& budgets,
                     const HyperObjective& objective, std::uint64_t seed, int workers = 1);

}  // namespace spnas
