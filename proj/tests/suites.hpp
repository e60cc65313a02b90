#pragma once

// Oracle suites shared by the unit tests and the acceptance binary.

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "spnas/nn.hpp"
#include "spnas/ops.hpp"
#include "spnas/searchspace.hpp"
#include "test_util.hpp"

namespace suites {

using namespace spnas;
using testutil::check_gradients;
using testutil::random_tensor;

struct Dims {
  int n, c, h, w;
};

inline Dims random_dims(std::uint64_t seed, int max_c = 4, int max_hw = 6) {
  std::mt19937_64 rng(seed * 7919 + 1);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  return {pick(1, 4), pick(1, max_c), pick(3, max_hw), pick(3, max_hw)};
}

inline Shape shape4(const Dims& d) { return {d.n, d.c, d.h, d.w}; }

using Errors = std::vector<std::pair<std::string, double>>;

// Relative finite-difference error of every autodiff primitive on random
// shapes and values drawn from `seed`.
inline Errors primitive_gradient_errors(std::uint64_t seed) {
  Errors errors;
  auto expect_grad_ok = [&](const std::string& what, const testutil::GraphFn& f, std::vector<Tensor> inputs,
                            std::uint64_t s) { errors.emplace_back(what, check_gradients(f, std::move(inputs), s).max_rel_err); };
  const Dims d = random_dims(seed, 8, 8);
  const Shape s4 = shape4(d);
  auto r = [&](const Shape& s, std::uint64_t k, double lo = -1.0, double hi = 1.0) {
    return random_tensor(s, seed * 1000 + k, lo, hi);
  };

  expect_grad_ok("add", [](Graph&, const auto& v) { return add(v[0], v[1]); }, {r(s4, 1), r(s4, 2)}, seed);
  expect_grad_ok("sub", [](Graph&, const auto& v) { return sub(v[0], v[1]); }, {r(s4, 1), r(s4, 2)}, seed);
  expect_grad_ok("mul", [](Graph&, const auto& v) { return mul(v[0], v[1]); }, {r(s4, 1), r(s4, 2)}, seed);
  expect_grad_ok("div", [](Graph&, const auto& v) { return div(v[0], v[1]); }, {r(s4, 1), r(s4, 2, 0.5, 1.5)},
                 seed);
  expect_grad_ok("log", [](Graph&, const auto& v) { return log(v[0]); }, {r(s4, 3, 0.5, 2.0)}, seed);
  expect_grad_ok("affine", [](Graph&, const auto& v) { return affine(v[0], -1.7, 0.3); }, {r(s4, 4)}, seed);
  expect_grad_ok("scale", [](Graph&, const auto& v) { return scale(v[0], v[1]); }, {r(s4, 5), r({1}, 6)}, seed);
  Tensor m = r(s4, 7, 0.0, 1.0);
  for (double& x : m.vec()) x = x < 0.5 ? 0.0 : 1.0;
  expect_grad_ok("mask", [m](Graph&, const auto& v) { return mask(v[0], m); }, {r(s4, 8)}, seed);
  expect_grad_ok("sum", [](Graph&, const auto& v) { return sum(v[0]); }, {r(s4, 9)}, seed);
  expect_grad_ok("mean", [](Graph&, const auto& v) { return mean(v[0]); }, {r(s4, 10)}, seed);

  const int rows = d.n + 1, inner = d.c + 2, cols = d.h;
  expect_grad_ok("matmul", [](Graph&, const auto& v) { return matmul(v[0], v[1]); },
                 {r({rows, inner}, 11), r({inner, cols}, 12)}, seed);
  expect_grad_ok("linear", [](Graph&, const auto& v) { return linear(v[0], v[1]); },
                 {r({rows, inner}, 13), r({cols, inner}, 14)}, seed);
  expect_grad_ok("bias_add 2d", [](Graph&, const auto& v) { return bias_add(v[0], v[1]); },
                 {r({rows, inner}, 15), r({inner}, 16)}, seed);
  expect_grad_ok("bias_add 4d", [](Graph&, const auto& v) { return bias_add(v[0], v[1]); },
                 {r(s4, 17), r({d.c}, 18)}, seed);
  expect_grad_ok("relu6", [](Graph&, const auto& v) { return relu6(v[0]); }, {r(s4, 19, -3.0, 9.0)}, seed);
  expect_grad_ok("sigmoid", [](Graph&, const auto& v) { return sigmoid(v[0]); }, {r(s4, 20, -4.0, 4.0)}, seed);

  for (int stride : {1, 2})
    for (int k : {1, 3, 5}) {
      expect_grad_ok("conv2d same k" + std::to_string(k) + " s" + std::to_string(stride),
                     [stride](Graph&, const auto& v) { return conv2d(v[0], v[1], stride, Padding::same); },
                     {r(s4, 21), r({2, d.c, k, k}, 22)}, seed);
      if (k <= std::min(d.h, d.w))
        expect_grad_ok("conv2d valid", [stride](Graph&, const auto& v) { return conv2d(v[0], v[1], stride, Padding::valid); },
                       {r(s4, 23), r({2, d.c, k, k}, 24)}, seed);
    }
  for (int stride : {1, 2})
    for (int k : {3, 5})
      expect_grad_ok("depthwise k" + std::to_string(k) + " s" + std::to_string(stride),
                     [stride](Graph&, const auto& v) { return depthwise_conv2d(v[0], v[1], stride, Padding::same); },
                     {r(s4, 25), r({d.c, 1, k, k}, 26)}, seed);

  expect_grad_ok("global_avg_pool", [](Graph&, const auto& v) { return global_avg_pool(v[0]); }, {r(s4, 27)}, seed);
  expect_grad_ok("channel_mul", [](Graph&, const auto& v) { return channel_mul(v[0], v[1]); },
                 {r(s4, 28), r({d.c}, 29)}, seed);
  expect_grad_ok("excite", [](Graph&, const auto& v) { return excite(v[0], v[1]); },
                 {r(s4, 30), r({d.n, d.c}, 31)}, seed);

  const Shape bn_shape{d.n + 1, d.c, d.h, d.w};
  expect_grad_ok("batchnorm train",
                 [c = d.c](Graph&, const auto& v) {
                   BatchNormStats stats(c);
                   return batchnorm(v[0], v[1], v[2], stats, true);
                 },
                 {r(bn_shape, 32), r({d.c}, 33, 0.5, 1.5), r({d.c}, 34)}, seed);
  expect_grad_ok("batchnorm eval",
                 [c = d.c](Graph&, const auto& v) {
                   BatchNormStats stats(c);
                   for (int i = 0; i < c; ++i) stats.var[i] = 0.5 + 0.1 * i;
                   return batchnorm(v[0], v[1], v[2], stats, false);
                 },
                 {r(bn_shape, 35), r({d.c}, 36), r({d.c}, 37)}, seed);

  expect_grad_ok("group_lasso_sq_norm", [m](Graph&, const auto& v) { return group_lasso_sq_norm(v[0], m); },
                 {r(s4, 38)}, seed);
  std::vector<int> labels(rows);
  for (int i = 0; i < rows; ++i) labels[i] = static_cast<int>((seed + i) % inner);
  expect_grad_ok("cross_entropy", [labels](Graph&, const auto& v) { return cross_entropy(v[0], labels); },
                 {r({rows, inner}, 39, -3.0, 3.0)}, seed);
  expect_grad_ok("softmax", [](Graph&, const auto& v) { return softmax(v[0]); }, {r({inner}, 40, -2.0, 2.0)}, seed);
  expect_grad_ok("pick", [](Graph&, const auto& v) { return pick(v[0], 1); }, {r({inner}, 41)}, seed);
  expect_grad_ok("halves", [](Graph&, const auto& v) { return halves(v[0], v[1], 6); }, {r({1}, 42), r({1}, 43)},
                 seed);
  return errors;
}

// The sigmoid indicator against finite differences of itself; the STE
// indicator's backward against finite differences of its straight-through
// surrogate (norm - threshold), plus its forward value.
inline Errors indicator_gradient_errors(std::uint64_t seed) {
  Errors errors;
  Tensor norm = random_tensor({1}, seed, 0.0, 2.0);
  Tensor thr = random_tensor({1}, seed + 77, 0.0, 2.0);
  for (double beta : {1.0, 5.0, 20.0})
    errors.emplace_back("indicator sigmoid beta " + std::to_string(static_cast<int>(beta)),
                        check_gradients([beta](Graph&, const auto& v) { return indicator(v[0], v[1], IndicatorMode::sigmoid, beta); },
                                        {norm, thr}, seed)
                            .max_rel_err);

  Parameter n("n", norm), t("t", thr);
  Graph g;
  Var y = indicator(g.parameter(n), g.parameter(t), IndicatorMode::ste, 5.0);
  g.backward(y);
  const double h = 1e-5;
  const double dn = ((norm[0] + h - thr[0]) - (norm[0] - h - thr[0])) / (2 * h);
  const double dt = ((norm[0] - thr[0] - h) - (norm[0] - thr[0] + h)) / (2 * h);
  errors.emplace_back("indicator ste d/dnorm", std::abs(n.grad[0] - dn) / std::abs(dn));
  errors.emplace_back("indicator ste d/dthreshold", std::abs(t.grad[0] - dt) / std::abs(dt));
  errors.emplace_back("indicator ste forward", y.item() == (norm[0] > thr[0] ? 1.0 : 0.0) ? 0.0 : 1.0);
  return errors;
}

inline LayerGating hard_gating() { return {IndicatorMode::hard, 5.0, std::nullopt, {}}; }

// Output of a forced superkernel layer and of the standalone block holding the
// same weight subsets, in training mode and then in eval mode after a
// statistics-updating pass.
inline std::pair<double, double> subset_gap(const LayerSpec& spec, const MBConvType& type, std::uint64_t seed) {
  SuperkernelLayer layer("L", spec, seed);
  layer.force(type);
  Tensor x = random_tensor({3, spec.in_channels, spec.in_size, spec.in_size}, seed + 1000);

  Graph g1;
  Var ys = layer.forward(g1, g1.constant(x), hard_gating(), true).y;
  FixedBlock block("B", spec, type, seed + 1);
  block.copy_from(layer);
  Var yb = block.forward(g1, g1.constant(x), true);
  const double train_gap = max_abs_diff(ys.value(), yb.value());

  Graph g2;
  Tensor x2 = random_tensor(x.shape(), seed + 2000);
  Var es = layer.forward(g2, g2.constant(x2), hard_gating(), false).y;
  block.copy_from(layer);
  Var eb = block.forward(g2, g2.constant(x2), false);
  return {train_gap, max_abs_diff(es.value(), eb.value())};
}

}  // namespace suites
