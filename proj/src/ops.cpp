#include "spnas/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "spnas/error.hpp"

namespace spnas {
namespace {

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must be rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

void require_scalar(const char* op, const Tensor& t) {
  if (t.numel() != 1) throw ShapeError(std::string(op) + ": expected a scalar, got " + shape_str(t.shape()));
}

// Accumulates into an input only if it takes part in differentiation.
template <class F>
void accumulate(Graph& g, Var v, F&& f) {
  if (g.needs_grad(v)) f(g.grad_accumulator(v));
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

ConvGeometry conv_geometry(int in, int kernel, int stride, Padding padding) {
  if (stride != 1 && stride != 2) throw ConfigError("convolution stride must be 1 or 2, got " + std::to_string(stride));
  if (padding == Padding::valid) {
    if (in < kernel) throw ShapeError("valid convolution: input " + std::to_string(in) + " smaller than kernel");
    return {(in - kernel) / stride + 1, 0};
  }
  const int out = (in + stride - 1) / stride;
  const int total = std::max((out - 1) * stride + kernel - in, 0);
  return {out, total / 2};
}

Var add(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_same("add", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + y[i];
  return a.graph()->record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& go) {
    accumulate(g, a, [&](Tensor& ga) { for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i]; });
    accumulate(g, b, [&](Tensor& gb) { for (std::size_t i = 0; i < go.numel(); ++i) gb[i] += go[i]; });
  }, "add");
}

Var sub(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_same("sub", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] - y[i];
  return a.graph()->record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& go) {
    accumulate(g, a, [&](Tensor& ga) { for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i]; });
    accumulate(g, b, [&](Tensor& gb) { for (std::size_t i = 0; i < go.numel(); ++i) gb[i] -= go[i]; });
  }, "sub");
}

Var mul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_same("mul", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * y[i];
  return a.graph()->record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& go) {
    const Tensor& x = g.value(a);
    const Tensor& y = g.value(b);
    accumulate(g, a, [&](Tensor& ga) { for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * y[i]; });
    accumulate(g, b, [&](Tensor& gb) { for (std::size_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * x[i]; });
  }, "mul");
}

Var div(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_same("div", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] / y[i];
  return a.graph()->record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& go) {
    const Tensor& x = g.value(a);
    const Tensor& y = g.value(b);
    accumulate(g, a, [&](Tensor& ga) { for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] / y[i]; });
    accumulate(g, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < go.numel(); ++i) gb[i] -= go[i] * x[i] / (y[i] * y[i]);
    });
  }, "div");
}

Var log(Var x) {
  const Tensor& v = x.value();
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) {
    if (!(v[i] > 0.0)) throw NumericError("primitive 'log' received a non-positive value " + std::to_string(v[i]));
    out[i] = std::log(v[i]);
  }
  return x.graph()->record(std::move(out), {x}, [x](Graph& g, const Tensor& go) {
    const Tensor& v = g.value(x);
    accumulate(g, x, [&](Tensor& gx) { for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i] / v[i]; });
  }, "log");
}

Var affine(Var x, double a, double b) {
  const Tensor& v = x.value();
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) out[i] = a * v[i] + b;
  return x.graph()->record(std::move(out), {x}, [x, a](Graph& g, const Tensor& go) {
    accumulate(g, x, [&](Tensor& gx) { for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += a * go[i]; });
  }, "affine");
}

Var scale(Var x, Var s) {
  require_scalar("scale", s.value());
  const Tensor& v = x.value();
  const double k = s.item();
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) out[i] = v[i] * k;
  return x.graph()->record(std::move(out), {x, s}, [x, s](Graph& g, const Tensor& go) {
    const Tensor& v = g.value(x);
    const double k = g.value(s).item();
    accumulate(g, x, [&](Tensor& gx) { for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * k; });
    accumulate(g, s, [&](Tensor& gs) {
      double acc = 0.0;
      for (std::size_t i = 0; i < go.numel(); ++i) acc += go[i] * v[i];
      gs[0] += acc;
    });
  }, "scale");
}

Var operator*(Var a, Var b) {
  if (a.shape() == b.shape()) return mul(a, b);
  if (b.value().numel() == 1) return scale(a, b);
  if (a.value().numel() == 1) return scale(b, a);
  throw ShapeError("operator*: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Var mask(Var x, const Tensor& m) {
  const Tensor& v = x.value();
  require_same("mask", v, m);
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) out[i] = v[i] * m[i];
  return x.graph()->record(std::move(out), {x}, [x, m](Graph& g, const Tensor& go) {
    accumulate(g, x, [&](Tensor& gx) { for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * m[i]; });
  }, "mask");
}

Var sum(Var x) {
  double acc = 0.0;
  for (double v : x.value().vec()) acc += v;
  return x.graph()->record(Tensor::scalar(acc), {x}, [x](Graph& g, const Tensor& go) {
    accumulate(g, x, [&](Tensor& gx) { for (double& v : gx.vec()) v += go[0]; });
  }, "sum");
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().numel());
  double acc = 0.0;
  for (double v : x.value().vec()) acc += v;
  return x.graph()->record(Tensor::scalar(acc / n), {x}, [x, n](Graph& g, const Tensor& go) {
    accumulate(g, x, [&](Tensor& gx) { for (double& v : gx.vec()) v += go[0] / n; });
  }, "mean");
}

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_rank("matmul", A, 2, "lhs");
  require_rank("matmul", B, 2, "rhs");
  const int m = A.dim(0), k = A.dim(1), n = B.dim(1);
  if (B.dim(0) != k) throw ShapeError("matmul: inner dimensions " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      for (int j = 0; j < n; ++j) out[i * n + j] += av * B[p * n + j];
    }
  }
  return a.graph()->record(std::move(out), {a, b}, [a, b, m, k, n](Graph& g, const Tensor& go) {
    const Tensor& A = g.value(a);
    const Tensor& B = g.value(b);
    accumulate(g, a, [&](Tensor& ga) {
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += go[i * n + j] * B[p * n + j];
          ga[i * k + p] += acc;
        }
    });
    accumulate(g, b, [&](Tensor& gb) {
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          for (int j = 0; j < n; ++j) gb[p * n + j] += av * go[i * n + j];
        }
    });
  }, "matmul");
}

Var linear(Var x, Var weight) {
  const Tensor& X = x.value();
  const Tensor& W = weight.value();
  require_rank("linear", X, 2, "input");
  require_rank("linear", W, 2, "weight");
  const int N = X.dim(0), in = X.dim(1), outc = W.dim(0);
  if (W.dim(1) != in) throw ShapeError("linear: input " + shape_str(X.shape()) + " vs weight " + shape_str(W.shape()));
  Tensor out({N, outc});
  for (int n = 0; n < N; ++n) {
    const double* xr = X.data() + static_cast<std::size_t>(n) * in;
    for (int o = 0; o < outc; ++o) {
      const double* wr = W.data() + static_cast<std::size_t>(o) * in;
      double acc = 0.0;
      for (int i = 0; i < in; ++i) acc += xr[i] * wr[i];
      out[static_cast<std::size_t>(n) * outc + o] = acc;
    }
  }
  return x.graph()->record(std::move(out), {x, weight}, [x, weight, N, in, outc](Graph& g, const Tensor& go) {
    const Tensor& X = g.value(x);
    const Tensor& W = g.value(weight);
    accumulate(g, x, [&](Tensor& gx) {
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < outc; ++o) {
          const double d = go[static_cast<std::size_t>(n) * outc + o];
          for (int i = 0; i < in; ++i) gx[static_cast<std::size_t>(n) * in + i] += d * W[static_cast<std::size_t>(o) * in + i];
        }
    });
    accumulate(g, weight, [&](Tensor& gw) {
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < outc; ++o) {
          const double d = go[static_cast<std::size_t>(n) * outc + o];
          for (int i = 0; i < in; ++i) gw[static_cast<std::size_t>(o) * in + i] += d * X[static_cast<std::size_t>(n) * in + i];
        }
    });
  }, "linear");
}

Var bias_add(Var x, Var bias) {
  const Tensor& X = x.value();
  const Tensor& b = bias.value();
  if (X.rank() != 2 && X.rank() != 4) throw ShapeError("bias_add: input must be rank 2 or 4, got " + shape_str(X.shape()));
  require_rank("bias_add", b, 1, "bias");
  const int N = X.dim(0), C = X.dim(1);
  if (b.dim(0) != C) throw ShapeError("bias_add: bias " + shape_str(b.shape()) + " vs channels of " + shape_str(X.shape()));
  const std::size_t inner = X.numel() / (static_cast<std::size_t>(N) * C);
  Tensor out = X;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double* p = out.data() + (static_cast<std::size_t>(n) * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += b[c];
    }
  return x.graph()->record(std::move(out), {x, bias}, [x, bias, N, C, inner](Graph& g, const Tensor& go) {
    accumulate(g, x, [&](Tensor& gx) { for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i]; });
    accumulate(g, bias, [&](Tensor& gb) {
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const double* p = go.data() + (static_cast<std::size_t>(n) * C + c) * inner;
          double acc = 0.0;
          for (std::size_t i = 0; i < inner; ++i) acc += p[i];
          gb[c] += acc;
        }
    });
  }, "bias_add");
}

Var relu6(Var x) {
  const Tensor& v = x.value();
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) out[i] = std::min(std::max(v[i], 0.0), 6.0);
  return x.graph()->record(std::move(out), {x}, [x](Graph& g, const Tensor& go) {
    const Tensor& v = g.value(x);
    accumulate(g, x, [&](Tensor& gx) {
      for (std::size_t i = 0; i < go.numel(); ++i)
        if (v[i] > 0.0 && v[i] < 6.0) gx[i] += go[i];
    });
  }, "relu6");
}

Var sigmoid(Var x) {
  const Tensor& v = x.value();
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) out[i] = sigmoid_scalar(v[i]);
  Tensor s = out;
  return x.graph()->record(std::move(out), {x}, [x, s = std::move(s)](Graph& g, const Tensor& go) {
    accumulate(g, x, [&](Tensor& gx) {
      for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * s[i] * (1.0 - s[i]);
    });
  }, "sigmoid");
}

namespace {

struct ConvDims {
  int N, Ci, H, W, Co, kh, kw, Ho, Wo, top, left, stride;
};

// Range of output columns whose input column ox*stride - left + kx lies in [0, W).
inline void valid_cols(const ConvDims& d, int kx, int& lo, int& hi) {
  const int off = kx - d.left;
  lo = off >= 0 ? 0 : (-off + d.stride - 1) / d.stride;
  hi = (d.W - 1 - off) >= 0 ? (d.W - 1 - off) / d.stride + 1 : 0;
  hi = std::min(hi, d.Wo);
}

// out[n, oc] += k * in[n, ic] over the spatial footprint of tap (ky, kx).
inline void tap_forward(const ConvDims& d, const double* in, double* out, double k, int ky, int kx) {
  for (int oy = 0; oy < d.Ho; ++oy) {
    const int iy = oy * d.stride - d.top + ky;
    if (iy < 0 || iy >= d.H) continue;
    int lo, hi;
    valid_cols(d, kx, lo, hi);
    const double* irow = in + static_cast<std::size_t>(iy) * d.W;
    double* orow = out + static_cast<std::size_t>(oy) * d.Wo;
    if (d.stride == 1) {
      const double* ip = irow + (kx - d.left);
      for (int ox = lo; ox < hi; ++ox) orow[ox] += k * ip[ox];
    } else {
      for (int ox = lo; ox < hi; ++ox) orow[ox] += k * irow[ox * d.stride - d.left + kx];
    }
  }
}

// Returns sum over the footprint of gout * in, and scatters k * gout into gin.
inline double tap_backward(const ConvDims& d, const double* in, double* gin, const double* gout, double k, int ky,
                           int kx) {
  double acc = 0.0;
  for (int oy = 0; oy < d.Ho; ++oy) {
    const int iy = oy * d.stride - d.top + ky;
    if (iy < 0 || iy >= d.H) continue;
    int lo, hi;
    valid_cols(d, kx, lo, hi);
    const std::size_t irow = static_cast<std::size_t>(iy) * d.W;
    const double* grow = gout + static_cast<std::size_t>(oy) * d.Wo;
    for (int ox = lo; ox < hi; ++ox) {
      const std::size_t ii = irow + ox * d.stride - d.left + kx;
      acc += grow[ox] * in[ii];
      if (gin != nullptr) gin[ii] += k * grow[ox];
    }
  }
  return acc;
}

ConvDims make_dims(const char* op, const Tensor& x, const Tensor& w, int stride, Padding padding, bool depthwise) {
  require_rank(op, x, 4, "input");
  require_rank(op, w, 4, "kernel");
  ConvDims d{};
  d.N = x.dim(0);
  d.Ci = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.Co = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = stride;
  if (depthwise) {
    if (w.dim(0) != d.Ci || w.dim(1) != 1) {
      throw ShapeError(std::string(op) + ": kernel " + shape_str(w.shape()) + " incompatible with input " +
                       shape_str(x.shape()) + " (expected [" + std::to_string(d.Ci) + "x1xKxK])");
    }
  } else if (w.dim(1) != d.Ci) {
    throw ShapeError(std::string(op) + ": kernel in-channels " + std::to_string(w.dim(1)) +
                     " do not match input channels " + std::to_string(d.Ci));
  }
  const ConvGeometry gy = conv_geometry(d.H, d.kh, stride, padding);
  const ConvGeometry gx = conv_geometry(d.W, d.kw, stride, padding);
  d.Ho = gy.out;
  d.Wo = gx.out;
  d.top = gy.pad_before;
  d.left = gx.pad_before;
  return d;
}

}  // namespace

Var conv2d(Var input, Var kernel, int stride, Padding padding) {
  const Tensor& X = input.value();
  const Tensor& K = kernel.value();
  const ConvDims d = make_dims("conv2d", X, K, stride, padding, false);
  const std::size_t in_plane = static_cast<std::size_t>(d.H) * d.W;
  const std::size_t out_plane = static_cast<std::size_t>(d.Ho) * d.Wo;
  Tensor out({d.N, d.Co, d.Ho, d.Wo});
  for (int n = 0; n < d.N; ++n)
    for (int co = 0; co < d.Co; ++co) {
      double* op = out.data() + (static_cast<std::size_t>(n) * d.Co + co) * out_plane;
      for (int ci = 0; ci < d.Ci; ++ci) {
        const double* ip = X.data() + (static_cast<std::size_t>(n) * d.Ci + ci) * in_plane;
        const double* kp = K.data() + (static_cast<std::size_t>(co) * d.Ci + ci) * d.kh * d.kw;
        for (int ky = 0; ky < d.kh; ++ky)
          for (int kx = 0; kx < d.kw; ++kx) tap_forward(d, ip, op, kp[ky * d.kw + kx], ky, kx);
      }
    }
  return input.graph()->record(std::move(out), {input, kernel}, [input, kernel, d, in_plane, out_plane](
                                                                    Graph& g, const Tensor& go) {
    const Tensor& X = g.value(input);
    const Tensor& K = g.value(kernel);
    double* gx = g.needs_grad(input) ? g.grad_accumulator(input).data() : nullptr;
    double* gk = g.needs_grad(kernel) ? g.grad_accumulator(kernel).data() : nullptr;
    for (int n = 0; n < d.N; ++n)
      for (int co = 0; co < d.Co; ++co) {
        const double* gp = go.data() + (static_cast<std::size_t>(n) * d.Co + co) * out_plane;
        for (int ci = 0; ci < d.Ci; ++ci) {
          const std::size_t ioff = (static_cast<std::size_t>(n) * d.Ci + ci) * in_plane;
          const std::size_t koff = (static_cast<std::size_t>(co) * d.Ci + ci) * d.kh * d.kw;
          for (int ky = 0; ky < d.kh; ++ky)
            for (int kx = 0; kx < d.kw; ++kx) {
              const double acc = tap_backward(d, X.data() + ioff, gx ? gx + ioff : nullptr, gp,
                                              K[koff + ky * d.kw + kx], ky, kx);
              if (gk) gk[koff + ky * d.kw + kx] += acc;
            }
        }
      }
  }, "conv2d");
}

Var depthwise_conv2d(Var input, Var kernel, int stride, Padding padding) {
  const Tensor& X = input.value();
  const Tensor& K = kernel.value();
  const ConvDims d = make_dims("depthwise_conv2d", X, K, stride, padding, true);
  const std::size_t in_plane = static_cast<std::size_t>(d.H) * d.W;
  const std::size_t out_plane = static_cast<std::size_t>(d.Ho) * d.Wo;
  Tensor out({d.N, d.Ci, d.Ho, d.Wo});
  for (int n = 0; n < d.N; ++n)
    for (int c = 0; c < d.Ci; ++c) {
      const double* ip = X.data() + (static_cast<std::size_t>(n) * d.Ci + c) * in_plane;
      double* op = out.data() + (static_cast<std::size_t>(n) * d.Ci + c) * out_plane;
      const double* kp = K.data() + static_cast<std::size_t>(c) * d.kh * d.kw;
      for (int ky = 0; ky < d.kh; ++ky)
        for (int kx = 0; kx < d.kw; ++kx) {
          const double k = kp[ky * d.kw + kx];
          if (k != 0.0) tap_forward(d, ip, op, k, ky, kx);
        }
    }
  return input.graph()->record(std::move(out), {input, kernel}, [input, kernel, d, in_plane, out_plane](
                                                                    Graph& g, const Tensor& go) {
    const Tensor& X = g.value(input);
    const Tensor& K = g.value(kernel);
    double* gx = g.needs_grad(input) ? g.grad_accumulator(input).data() : nullptr;
    double* gk = g.needs_grad(kernel) ? g.grad_accumulator(kernel).data() : nullptr;
    for (int n = 0; n < d.N; ++n)
      for (int c = 0; c < d.Ci; ++c) {
        const std::size_t ioff = (static_cast<std::size_t>(n) * d.Ci + c) * in_plane;
        const double* gp = go.data() + (static_cast<std::size_t>(n) * d.Ci + c) * out_plane;
        const std::size_t koff = static_cast<std::size_t>(c) * d.kh * d.kw;
        for (int ky = 0; ky < d.kh; ++ky)
          for (int kx = 0; kx < d.kw; ++kx) {
            const double acc =
                tap_backward(d, X.data() + ioff, gx ? gx + ioff : nullptr, gp, K[koff + ky * d.kw + kx], ky, kx);
            if (gk) gk[koff + ky * d.kw + kx] += acc;
          }
      }
  }, "depthwise_conv2d");
}

Var global_avg_pool(Var x) {
  const Tensor& X = x.value();
  require_rank("global_avg_pool", X, 4, "input");
  const int N = X.dim(0), C = X.dim(1);
  const std::size_t plane = static_cast<std::size_t>(X.dim(2)) * X.dim(3);
  Tensor out({N, C});
  for (std::size_t nc = 0; nc < static_cast<std::size_t>(N) * C; ++nc) {
    const double* p = X.data() + nc * plane;
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += p[i];
    out[nc] = acc / static_cast<double>(plane);
  }
  return x.graph()->record(std::move(out), {x}, [x, N, C, plane](Graph& g, const Tensor& go) {
    accumulate(g, x, [&](Tensor& gx) {
      for (std::size_t nc = 0; nc < static_cast<std::size_t>(N) * C; ++nc) {
        const double v = go[nc] / static_cast<double>(plane);
        double* p = gx.data() + nc * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += v;
      }
    });
  }, "global_avg_pool");
}

Var channel_mul(Var x, Var gate) {
  const Tensor& X = x.value();
  const Tensor& G = gate.value();
  require_rank("channel_mul", X, 4, "input");
  require_rank("channel_mul", G, 1, "gate");
  const int N = X.dim(0), C = X.dim(1);
  if (G.dim(0) != C) throw ShapeError("channel_mul: gate " + shape_str(G.shape()) + " vs input " + shape_str(X.shape()));
  const std::size_t plane = static_cast<std::size_t>(X.dim(2)) * X.dim(3);
  Tensor out(X.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) out[off + i] = X[off + i] * G[c];
    }
  return x.graph()->record(std::move(out), {x, gate}, [x, gate, N, C, plane](Graph& g, const Tensor& go) {
    const Tensor& X = g.value(x);
    const Tensor& G = g.value(gate);
    accumulate(g, x, [&](Tensor& gx) {
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const std::size_t off = (static_cast<std::size_t>(n) * C + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) gx[off + i] += go[off + i] * G[c];
        }
    });
    accumulate(g, gate, [&](Tensor& gg) {
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const std::size_t off = (static_cast<std::size_t>(n) * C + c) * plane;
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += go[off + i] * X[off + i];
          gg[c] += acc;
        }
    });
  }, "channel_mul");
}

Var excite(Var x, Var gate) {
  const Tensor& X = x.value();
  const Tensor& G = gate.value();
  require_rank("excite", X, 4, "input");
  require_rank("excite", G, 2, "gate");
  const int N = X.dim(0), C = X.dim(1);
  if (G.dim(0) != N || G.dim(1) != C) {
    throw ShapeError("excite: gate " + shape_str(G.shape()) + " vs input " + shape_str(X.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(X.dim(2)) * X.dim(3);
  Tensor out(X.shape());
  for (std::size_t nc = 0; nc < static_cast<std::size_t>(N) * C; ++nc)
    for (std::size_t i = 0; i < plane; ++i) out[nc * plane + i] = X[nc * plane + i] * G[nc];
  return x.graph()->record(std::move(out), {x, gate}, [x, gate, N, C, plane](Graph& g, const Tensor& go) {
    const Tensor& X = g.value(x);
    const Tensor& G = g.value(gate);
    accumulate(g, x, [&](Tensor& gx) {
      for (std::size_t nc = 0; nc < static_cast<std::size_t>(N) * C; ++nc)
        for (std::size_t i = 0; i < plane; ++i) gx[nc * plane + i] += go[nc * plane + i] * G[nc];
    });
    accumulate(g, gate, [&](Tensor& gg) {
      for (std::size_t nc = 0; nc < static_cast<std::size_t>(N) * C; ++nc) {
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) acc += go[nc * plane + i] * X[nc * plane + i];
        gg[nc] += acc;
      }
    });
  }, "excite");
}

Var batchnorm(Var x, Var gamma, Var beta, BatchNormStats& stats, bool training, double momentum, double eps) {
  const Tensor& X = x.value();
  if (X.rank() != 2 && X.rank() != 4) throw ShapeError("batchnorm: input must be rank 2 or 4, got " + shape_str(X.shape()));
  const int N = X.dim(0), C = X.dim(1);
  const std::size_t plane = X.numel() / (static_cast<std::size_t>(N) * C);
  const Tensor& G = gamma.value();
  const Tensor& B = beta.value();
  if (G.shape() != Shape{C} || B.shape() != Shape{C} || stats.mean.shape() != Shape{C}) {
    throw ShapeError("batchnorm: affine/statistics size does not match " + std::to_string(C) + " channels");
  }
  const double M = static_cast<double>(N) * static_cast<double>(plane);
  Tensor mu(Shape{C}), invstd(Shape{C});
  if (training) {
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = X.data() + (static_cast<std::size_t>(n) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      const double m = acc / M;
      double sq = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = X.data() + (static_cast<std::size_t>(n) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - m) * (p[i] - m);
      }
      const double var = sq / M;
      mu[c] = m;
      invstd[c] = 1.0 / std::sqrt(var + eps);
      const double unbiased = M > 1 ? sq / (M - 1.0) : var;
      stats.mean[c] = momentum * stats.mean[c] + (1.0 - momentum) * m;
      stats.var[c] = momentum * stats.var[c] + (1.0 - momentum) * unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mu[c] = stats.mean[c];
      invstd[c] = 1.0 / std::sqrt(stats.var[c] + eps);
    }
  }
  Tensor out(X.shape());
  Tensor xhat(X.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double h = (X[off + i] - mu[c]) * invstd[c];
        xhat[off + i] = h;
        out[off + i] = G[c] * h + B[c];
      }
    }
  return x.graph()->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), invstd, N, C, plane, M, training](Graph& g, const Tensor& go) {
        const Tensor& G = g.value(gamma);
        Tensor dg(Shape{C}), db(Shape{C});
        for (int c = 0; c < C; ++c) {
          double sg = 0.0, sb = 0.0;
          for (int n = 0; n < N; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sg += go[off + i] * xhat[off + i];
              sb += go[off + i];
            }
          }
          dg[c] = sg;
          db[c] = sb;
        }
        accumulate(g, gamma, [&](Tensor& t) { for (int c = 0; c < C; ++c) t[c] += dg[c]; });
        accumulate(g, beta, [&](Tensor& t) { for (int c = 0; c < C; ++c) t[c] += db[c]; });
        accumulate(g, x, [&](Tensor& gx) {
          for (int c = 0; c < C; ++c) {
            const double k = G[c] * invstd[c];
            for (int n = 0; n < N; ++n) {
              const std::size_t off = (static_cast<std::size_t>(n) * C + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) {
                if (training) {
                  gx[off + i] += k * (go[off + i] - db[c] / M - xhat[off + i] * dg[c] / M);
                } else {
                  gx[off + i] += k * go[off + i];
                }
              }
            }
          }
        });
      },
      "batchnorm");
}

Var group_lasso_sq_norm(Var x, const Tensor& m) {
  const Tensor& v = x.value();
  require_same("group_lasso_sq_norm", v, m);
  double acc = 0.0;
  for (std::size_t i = 0; i < v.numel(); ++i)
    if (m[i] != 0.0) acc += v[i] * v[i];
  return x.graph()->record(Tensor::scalar(acc), {x}, [x, m](Graph& g, const Tensor& go) {
    const Tensor& v = g.value(x);
    accumulate(g, x, [&](Tensor& gx) {
      for (std::size_t i = 0; i < v.numel(); ++i)
        if (m[i] != 0.0) gx[i] += 2.0 * v[i] * go[0];
    });
  }, "group_lasso_sq_norm");
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& L = logits.value();
  require_rank("cross_entropy", L, 2, "logits");
  const int N = L.dim(0), K = L.dim(1);
  if (static_cast<int>(labels.size()) != N) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(N) + " rows");
  }
  Tensor probs(L.shape());
  std::vector<int> y(labels.begin(), labels.end());
  double loss = 0.0;
  for (int n = 0; n < N; ++n) {
    if (y[n] < 0 || y[n] >= K) throw ConfigError("cross_entropy: label " + std::to_string(y[n]) + " out of range");
    const double* row = L.data() + static_cast<std::size_t>(n) * K;
    double mx = row[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    for (int k = 0; k < K; ++k) probs[static_cast<std::size_t>(n) * K + k] = std::exp(row[k] - mx) / z;
    loss += -(row[y[n]] - mx - std::log(z));
  }
  loss /= N;
  return logits.graph()->record(Tensor::scalar(loss), {logits},
                                [logits, probs = std::move(probs), y = std::move(y), N, K](Graph& g, const Tensor& go) {
                                  accumulate(g, logits, [&](Tensor& gl) {
                                    const double s = go[0] / N;
                                    for (int n = 0; n < N; ++n)
                                      for (int k = 0; k < K; ++k) {
                                        const std::size_t i = static_cast<std::size_t>(n) * K + k;
                                        gl[i] += s * (probs[i] - (k == y[n] ? 1.0 : 0.0));
                                      }
                                  });
                                },
                                "cross_entropy");
}

Var softmax(Var logits) {
  const Tensor& L = logits.value();
  require_rank("softmax", L, 1, "logits");
  const int K = L.dim(0);
  double mx = L[0];
  for (int k = 1; k < K; ++k) mx = std::max(mx, L[k]);
  Tensor p(L.shape());
  double z = 0.0;
  for (int k = 0; k < K; ++k) z += (p[k] = std::exp(L[k] - mx));
  for (int k = 0; k < K; ++k) p[k] /= z;
  Tensor saved = p;
  return logits.graph()->record(std::move(p), {logits}, [logits, saved, K](Graph& g, const Tensor& go) {
    double dot = 0.0;
    for (int k = 0; k < K; ++k) dot += go[k] * saved[k];
    accumulate(g, logits, [&](Tensor& gl) { for (int k = 0; k < K; ++k) gl[k] += saved[k] * (go[k] - dot); });
  }, "softmax");
}

Var pick(Var v, int index) {
  const Tensor& V = v.value();
  if (index < 0 || static_cast<std::size_t>(index) >= V.numel()) {
    throw ShapeError("pick: index " + std::to_string(index) + " out of range for " + shape_str(V.shape()));
  }
  return v.graph()->record(Tensor::scalar(V[index]), {v}, [v, index](Graph& g, const Tensor& go) {
    accumulate(g, v, [&](Tensor& gv) { gv[index] += go[0]; });
  }, "pick");
}

Var halves(Var first, Var second, int n) {
  require_scalar("halves", first.value());
  require_scalar("halves", second.value());
  if (n < 2 || n % 2 != 0) throw ShapeError("halves: length must be even and >= 2, got " + std::to_string(n));
  Tensor out(Shape{n});
  const int h = n / 2;
  for (int i = 0; i < n; ++i) out[i] = i < h ? first.item() : second.item();
  return first.graph()->record(std::move(out), {first, second}, [first, second, n, h](Graph& g, const Tensor& go) {
    accumulate(g, first, [&](Tensor& t) { for (int i = 0; i < h; ++i) t[0] += go[i]; });
    accumulate(g, second, [&](Tensor& t) { for (int i = h; i < n; ++i) t[0] += go[i]; });
  }, "halves");
}

Var indicator(Var norm_sq, Var threshold, IndicatorMode mode, double beta) {
  require_scalar("indicator", norm_sq.value());
  require_scalar("indicator", threshold.value());
  if (!(beta > 0.0)) throw ConfigError("indicator: beta must be positive");
  const double x = norm_sq.item(), t = threshold.item();
  Graph* g = norm_sq.graph();
  switch (mode) {
    case IndicatorMode::hard:
      return g->record(Tensor::scalar(x > t ? 1.0 : 0.0), {norm_sq, threshold}, [](Graph&, const Tensor&) {},
                       "indicator_hard");
    case IndicatorMode::ste:
      return g->record(Tensor::scalar(x > t ? 1.0 : 0.0), {norm_sq, threshold},
                       [norm_sq, threshold](Graph& gr, const Tensor& go) {
                         accumulate(gr, norm_sq, [&](Tensor& t) { t[0] += go[0]; });
                         accumulate(gr, threshold, [&](Tensor& t) { t[0] -= go[0]; });
                       },
                       "indicator_ste");
    case IndicatorMode::sigmoid:
    default: {
      const double s = sigmoid_scalar(beta * (x - t));
      return g->record(Tensor::scalar(s), {norm_sq, threshold},
                       [norm_sq, threshold, s, beta](Graph& gr, const Tensor& go) {
                         const double d = go[0] * beta * s * (1.0 - s);
                         accumulate(gr, norm_sq, [&](Tensor& t) { t[0] += d; });
                         accumulate(gr, threshold, [&](Tensor& t) { t[0] -= d; });
                       },
                       "indicator_sigmoid");
    }
  }
}

}  // namespace spnas
