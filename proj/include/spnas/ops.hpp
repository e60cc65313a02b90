#pragma once

#include <span>
#include <vector>

#include "spnas/autodiff.hpp"
#include "spnas/tensor.hpp"

namespace spnas {

enum class Padding { same, valid };

// Output size and leading pad along one spatial axis. `same` pads
// symmetrically, putting the odd pixel on the bottom/right.
struct ConvGeometry {
  int out = 0;
  int pad_before = 0;
};
ConvGeometry conv_geometry(int in, int kernel, int stride, Padding padding);

// Elementwise, identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var log(Var x);
// a*x + b with constants.
Var affine(Var x, double a, double b);
// Tensor times a scalar node of shape [1].
Var scale(Var x, Var s);
// Elementwise product with a constant (0/1 masks, dropout keeps).
Var mask(Var x, const Tensor& m);

Var sum(Var x);
Var mean(Var x);

Var matmul(Var a, Var b);         // [m,k] x [k,n]
Var linear(Var x, Var weight);    // [N,in] x [out,in]^T -> [N,out]
Var bias_add(Var x, Var bias);    // bias [C] over dim 1 of [N,C] or [N,C,H,W]

Var relu6(Var x);
Var sigmoid(Var x);

Var conv2d(Var input, Var kernel, int stride, Padding padding);
Var depthwise_conv2d(Var input, Var kernel, int stride, Padding padding);
Var global_avg_pool(Var x);                     // [N,C,H,W] -> [N,C]
Var channel_mul(Var x, Var gate);               // [N,C,H,W] * [C]
Var excite(Var x, Var gate);                    // [N,C,H,W] * [N,C]

// Running statistics live outside the graph.
struct BatchNormStats {
  Tensor mean;
  Tensor var;
  explicit BatchNormStats(int channels = 0)
      : mean(Shape{channels > 0 ? channels : 1}, 0.0), var(Shape{channels > 0 ? channels : 1}, 1.0) {}
};
// Training mode normalizes with batch statistics and updates `stats` with
// stats = momentum*stats + (1-momentum)*batch; eval mode uses `stats`.
Var batchnorm(Var x, Var gamma, Var beta, BatchNormStats& stats, bool training, double momentum = 0.9,
              double eps = 1e-5);

// Squared L2 norm over the entries where mask != 0.
Var group_lasso_sq_norm(Var x, const Tensor& mask);

// Mean cross-entropy of [N,K] logits against integer labels.
Var cross_entropy(Var logits, std::span<const int> labels);

Var softmax(Var logits);                        // rank-1
Var pick(Var v, int index);                     // element of a rank-1 node as a scalar
// Rank-1 node of length n: first n/2 entries copy `first`, the rest copy `second`.
Var halves(Var first, Var second, int n);

enum class IndicatorMode { hard, sigmoid, ste };
// Relaxed 1(norm_sq > threshold): hard is the strict step with no gradient;
// sigmoid is sigmoid(beta*(norm_sq - threshold)) both ways; ste is the hard
// step forward with slope +1/-1 backward.
Var indicator(Var norm_sq, Var threshold, IndicatorMode mode, double beta);

// Operator sugar for scalar algebra (also used by the runtime model).
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
Var operator*(Var a, Var b);  // same shape, or one side of shape [1]
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator*(double a, Var x) { return affine(x, a, 0.0); }
inline Var operator*(Var x, double a) { return affine(x, a, 0.0); }
inline Var operator+(double b, Var x) { return affine(x, 1.0, b); }
inline Var operator+(Var x, double b) { return affine(x, 1.0, b); }
inline Var operator-(double b, Var x) { return affine(x, -1.0, b); }

}  // namespace spnas
