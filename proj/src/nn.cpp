#include "spnas/nn.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "spnas/error.hpp"

namespace spnas {

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Tensor he_normal(const std::string& name, const Shape& shape, int fan_in, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ name_hash(name));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / std::max(fan_in, 1)));
  Tensor t(shape);
  for (double& v : t.vec()) v = dist(rng);
  return t;
}

BatchNorm::BatchNorm(const std::string& name, int channels)
    : gamma(name + ".gamma", Tensor(Shape{channels}, 1.0)),
      beta(name + ".beta", Tensor(Shape{channels}, 0.0)),
      running(channels) {}

Var BatchNorm::operator()(Graph& g, Var x, bool training) {
  return batchnorm(x, g.parameter(gamma), g.parameter(beta), running, training);
}

void BatchNorm::reset_stats() { running = BatchNormStats(channels()); }

void Sgd::add_group(Group group) {
  std::vector<Tensor> v;
  v.reserve(group.params.size());
  for (Parameter* p : group.params) v.push_back(Tensor::zeros_like(p->value));
  velocity_.push_back(std::move(v));
  groups_.push_back(std::move(group));
}

void Sgd::step(double lr) {
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    const Group& group = groups_[gi];
    for (std::size_t pi = 0; pi < group.params.size(); ++pi) {
      Parameter& p = *group.params[pi];
      if (!p.requires_grad) continue;
      Tensor& v = velocity_[gi][pi];
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        v[i] = momentum_ * v[i] + p.grad[i] + group.weight_decay * p.value[i];
        p.value[i] -= lr * group.lr_scale * v[i];
      }
      if (!p.value.all_finite()) throw NumericError("optimizer step made '" + p.name + "' non-finite");
    }
  }
  ++steps_;
}

void Sgd::zero_grad() {
  for (auto& group : groups_)
    for (Parameter* p : group.params) p->zero_grad();
}

double warmup_cosine_lr(double base_lr, std::size_t step, std::size_t total_steps, std::size_t warmup_steps) {
  if (total_steps == 0) return base_lr;
  if (step < warmup_steps) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  const double span = static_cast<double>(std::max<std::size_t>(total_steps - warmup_steps, 1));
  const double progress = static_cast<double>(step - warmup_steps) / span;
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

std::size_t count_params(const ParamList& params) {
  std::size_t n = 0;
  for (const Parameter* p : params) n += p->numel();
  return n;
}

}  // namespace spnas
