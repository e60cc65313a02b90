#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spnas/autodiff.hpp"
#include "spnas/ops.hpp"

namespace spnas {

using ParamList = std::vector<Parameter*>;

// He-normal tensor drawn from an RNG keyed by (seed, name): a parameter's
// initial value depends only on its name and shape, never on construction order.
Tensor he_normal(const std::string& name, const Shape& shape, int fan_in, std::uint64_t seed);
std::uint64_t name_hash(const std::string& s);

struct BatchNorm {
  Parameter gamma;
  Parameter beta;

  BatchNorm() = default;
  BatchNorm(const std::string& name, int channels);

  Var operator()(Graph& g, Var x, bool training);
  void collect(ParamList& out) { out.push_back(&gamma); out.push_back(&beta); }
  // Reset running statistics (used before recalibration passes).
  void reset_stats();
  int channels() const { return gamma.value.dim(0); }

  BatchNormStats running;
};

// SGD with momentum: v = momentum*v + grad + decay*w; w -= lr*v.
class Sgd {
 public:
  struct Group {
    ParamList params;
    double lr_scale = 1.0;
    double weight_decay = 0.0;
  };

  explicit Sgd(double momentum = 0.9) : momentum_(momentum) {}
  void add_group(Group group);
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return steps_; }

 private:
  double momentum_;
  std::vector<Group> groups_;
  std::vector<std::vector<Tensor>> velocity_;
  std::size_t steps_ = 0;
};

// Linear warmup to base_lr over `warmup_steps`, then cosine decay to 0.
double warmup_cosine_lr(double base_lr, std::size_t step, std::size_t total_steps, std::size_t warmup_steps);

std::size_t count_params(const ParamList& params);

}  // namespace spnas
