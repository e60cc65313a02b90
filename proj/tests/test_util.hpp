#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "spnas/autodiff.hpp"
#include "spnas/ops.hpp"
#include "spnas/tensor.hpp"

namespace testutil {

using spnas::Graph;
using spnas::Parameter;
using spnas::Shape;
using spnas::Tensor;
using spnas::Var;

inline Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(shape);
  for (double& v : t.vec()) v = d(rng);
  return t;
}

// Builds the scalar loss sum(w * f(inputs)) with a fixed random w.
using GraphFn = std::function<Var(Graph&, const std::vector<Var>&)>;

struct GradCheck {
  double max_rel_err = 0.0;
  double max_abs_grad = 0.0;
};

// Analytic gradients of every input against central differences.
// Relative error per input = max |analytic - numeric| / max |numeric|.
inline GradCheck check_gradients(const GraphFn& f, std::vector<Tensor> inputs, std::uint64_t seed, double h = 1e-5) {
  std::vector<Parameter> params;
  params.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) params.emplace_back("in" + std::to_string(i), inputs[i]);

  Tensor weight;
  auto loss_of = [&](Graph& g) {
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(g.parameter(p));
    Var y = f(g, vars);
    if (weight.empty()) weight = random_tensor(y.shape(), seed ^ 0x9e3779b97f4a7c15ULL, 0.5, 1.5);
    return spnas::sum(spnas::mask(y, weight));
  };

  {
    Graph g(seed);
    Var l = loss_of(g);
    g.backward(l);
  }
  GradCheck out;
  for (auto& p : params) {
    Tensor analytic = p.grad;
    Tensor numeric = Tensor::zeros_like(p.value);
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      Graph gp(seed);
      const double fp = loss_of(gp).item();
      p.value[i] = orig - h;
      Graph gm(seed);
      const double fm = loss_of(gm).item();
      p.value[i] = orig;
      numeric[i] = (fp - fm) / (2.0 * h);
    }
    const double scale = std::max(numeric.abs_max(), 1e-8);
    out.max_rel_err = std::max(out.max_rel_err, spnas::max_abs_diff(analytic, numeric) / scale);
    out.max_abs_grad = std::max(out.max_abs_grad, analytic.abs_max());
  }
  return out;
}

// Leading zero padding of one axis: symmetric, odd pixel at the end.
inline int pad_before(int in, int k, int stride, bool same) {
  if (!same) return 0;
  const int out = (in + stride - 1) / stride;
  const int total = std::max((out - 1) * stride + k - in, 0);
  return total / 2;
}

inline int out_size(int in, int k, int stride, bool same) {
  return same ? (in + stride - 1) / stride : (in - k) / stride + 1;
}

// Direct cross-correlation with explicit loops over every index.
inline Tensor conv2d_loops(const Tensor& x, const Tensor& w, int stride, bool same) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int OH = out_size(H, KH, stride, same), OW = out_size(W, KW, stride, same);
  const int ph = pad_before(H, KH, stride, same), pw = pad_before(W, KW, stride, same);
  Tensor y({N, O, OH, OW});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          double acc = 0.0;
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < KH; ++ky)
              for (int kx = 0; kx < KW; ++kx) {
                const int iy = oy * stride + ky - ph, ix = ox * stride + kx - pw;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x.at(n, c, iy, ix) * w.at(o, c, ky, kx);
              }
          y.at(n, o, oy, ox) = acc;
        }
  return y;
}

inline Tensor depthwise_loops(const Tensor& x, const Tensor& w, int stride, bool same) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int KH = w.dim(2), KW = w.dim(3);
  const int OH = out_size(H, KH, stride, same), OW = out_size(W, KW, stride, same);
  const int ph = pad_before(H, KH, stride, same), pw = pad_before(W, KW, stride, same);
  Tensor y({N, C, OH, OW});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          double acc = 0.0;
          for (int ky = 0; ky < KH; ++ky)
            for (int kx = 0; kx < KW; ++kx) {
              const int iy = oy * stride + ky - ph, ix = ox * stride + kx - pw;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              acc += x.at(n, c, iy, ix) * w.at(c, 0, ky, kx);
            }
          y.at(n, c, oy, ox) = acc;
        }
  return y;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.vec().begin(), a.vec().end(), b.vec().begin());
}

}  // namespace testutil
