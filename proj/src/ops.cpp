#include "mpgat/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace mpgat {

namespace {

using NodePtr = std::shared_ptr<TensorNode>;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

bool grad_wanted(std::initializer_list<const Tensor*> ins) {
  if (!active_tape()) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

// Marks `out` differentiable and registers the backward rule.
void trace(std::initializer_list<const Tensor*> ins, Tensor& out, std::function<void()> fn) {
  for (const Tensor* t : ins)
    if (t->requires_grad()) t->ensure_grad();
  out.set_requires_grad(true);
  out.ensure_grad();
  active_tape()->record(out.node(), std::move(fn));
}

// Collapses a shape into (outer, axis_len, inner) around `axis`.
void axis_split(const Shape& s, int64_t axis, int64_t& outer, int64_t& len, int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  len = s[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name,
                          double (*fwd)(double, double),
                          void (*bwd)(double a, double b, double dy, double& da, double& db)) {
  require(a.shape() == b.shape(), std::string(name) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  if (grad_wanted({&a, &b})) {
    NodePtr an = a.node(), bn = b.node(), on = out.node();
    Tensor o = out;
    trace({&a, &b}, o, [an, bn, on, n, bwd] {
      const double* dy = on->grad.data();
      const double* av = an->value.data();
      const double* bv = bn->value.data();
      double* da = an->requires_grad ? an->grad.data() : nullptr;
      double* db = bn->requires_grad ? bn->grad.data() : nullptr;
      for (int64_t i = 0; i < n; ++i) {
        double ga = 0, gb = 0;
        bwd(av[i], bv[i], dy[i], ga, gb);
        if (da) da[i] += ga;
        if (db) db[i] += gb;
      }
    });
  }
  return out;
}

Tensor elementwise_unary(const Tensor& x, const char* /*name*/, double (*fwd)(double),
                         double (*dslope_from_in_out)(double x, double y)) {
  Tensor out(x.shape());
  const double* px = x.data();
  double* po = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
  if (grad_wanted({&x})) {
    NodePtr xn = x.node(), on = out.node();
    Tensor o = out;
    trace({&x}, o, [xn, on, n, dslope_from_in_out] {
      const double* dy = on->grad.data();
      const double* xv = xn->value.data();
      const double* yv = on->value.data();
      double* dx = xn->grad.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * dslope_from_in_out(xv[i], yv[i]);
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double dy, double& da, double& db) {
        da = dy;
        db = dy;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double dy, double& da, double& db) {
        da = dy;
        db = -dy;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double dy, double& da, double& db) {
        da = dy * y;
        db = dy * x;
      });
}

Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  if (grad_wanted({&a})) {
    NodePtr an = a.node(), on = out.node();
    trace({&a}, out, [an, on, n, c] {
      const double* dy = on->grad.data();
      double* da = an->grad.data();
      for (int64_t i = 0; i < n; ++i) da[i] += dy[i] * c;
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + c;
  if (grad_wanted({&a})) {
    NodePtr an = a.node(), on = out.node();
    trace({&a}, out, [an, on, n] {
      const double* dy = on->grad.data();
      double* da = an->grad.data();
      for (int64_t i = 0; i < n; ++i) da[i] += dy[i];
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  return elementwise_unary(
      x, "relu", [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  require(slope > 0.0 && slope < 1.0, "leaky_relu: slope must lie in (0,1)");
  Tensor out(x.shape());
  const double* px = x.data();
  double* po = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = px[i] >= 0 ? px[i] : slope * px[i];
  if (grad_wanted({&x})) {
    NodePtr xn = x.node(), on = out.node();
    trace({&x}, out, [xn, on, n, slope] {
      const double* dy = on->grad.data();
      const double* xv = xn->value.data();
      double* dx = xn->grad.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * (xv[i] >= 0 ? 1.0 : slope);
    });
  }
  return out;
}

Tensor tanh_t(const Tensor& x) {
  return elementwise_unary(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid_t(const Tensor& x) {
  return elementwise_unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor abs_t(const Tensor& x) {
  return elementwise_unary(
      x, "abs", [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor masked_fill(const Tensor& x, const Tensor& mask, double fill) {
  require(mask.shape() == x.shape(), "masked_fill: mask shape " + shape_str(mask.shape()) +
                                         " != input shape " + shape_str(x.shape()));
  require(!mask.requires_grad(), "masked_fill: mask must not require grad");
  Tensor out(x.shape());
  const double* px = x.data();
  const double* pm = mask.data();
  double* po = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pm[i] != 0.0 ? fill : px[i];
  if (grad_wanted({&x})) {
    NodePtr xn = x.node(), mn = mask.node(), on = out.node();
    trace({&x}, out, [xn, mn, on, n] {
      const double* dy = on->grad.data();
      const double* mv = mn->value.data();
      double* dx = xn->grad.data();
      for (int64_t i = 0; i < n; ++i)
        if (mv[i] == 0.0) dx[i] += dy[i];
    });
  }
  return out;
}

Tensor softmax_lastdim(const Tensor& x) {
  require(x.rank() >= 1 && x.shape().back() >= 1, "softmax_lastdim: empty last dimension");
  const int64_t len = x.shape().back();
  const int64_t rows = x.numel() / len;
  Tensor out(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = px + r * len;
    double* o = po + r * len;
    double mx = in[0];
    for (int64_t i = 1; i < len; ++i) mx = std::max(mx, in[i]);
    double sum = 0.0;
    for (int64_t i = 0; i < len; ++i) {
      o[i] = std::exp(in[i] - mx);
      sum += o[i];
    }
    for (int64_t i = 0; i < len; ++i) o[i] /= sum;
  }
  if (grad_wanted({&x})) {
    NodePtr xn = x.node(), on = out.node();
    trace({&x}, out, [xn, on, rows, len] {
      const double* dy = on->grad.data();
      const double* y = on->value.data();
      double* dx = xn->grad.data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* dyr = dy + r * len;
        const double* yr = y + r * len;
        double* dxr = dx + r * len;
        double dot = 0.0;
        for (int64_t i = 0; i < len; ++i) dot += dyr[i] * yr[i];
        for (int64_t i = 0; i < len; ++i) dxr[i] += yr[i] * (dyr[i] - dot);
      }
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul: expects rank-2 operands");
  require(a.dim(1) == b.dim(0), "matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  Tensor out(Shape{m, p});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < m; ++i) {
    double* orow = po + i * p;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      const double* brow = pb + kk * p;
      for (int64_t j = 0; j < p; ++j) orow[j] += av * brow[j];
    }
  }
  if (grad_wanted({&a, &b})) {
    NodePtr an = a.node(), bn = b.node(), on = out.node();
    trace({&a, &b}, out, [an, bn, on, m, k, p] {
      const double* dy = on->grad.data();
      if (an->requires_grad) {
        double* da = an->grad.data();
        const double* bv = bn->value.data();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t kk = 0; kk < k; ++kk) {
            double s = 0.0;
            const double* dyrow = dy + i * p;
            const double* brow = bv + kk * p;
            for (int64_t j = 0; j < p; ++j) s += dyrow[j] * brow[j];
            da[i * k + kk] += s;
          }
      }
      if (bn->requires_grad) {
        double* db = bn->grad.data();
        const double* av = an->value.data();
        for (int64_t kk = 0; kk < k; ++kk)
          for (int64_t i = 0; i < m; ++i) {
            const double avv = av[i * k + kk];
            const double* dyrow = dy + i * p;
            double* dbrow = db + kk * p;
            for (int64_t j = 0; j < p; ++j) dbrow[j] += avv * dyrow[j];
          }
      }
    });
  }
  return out;
}

Tensor batch_matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() >= 2 && b.rank() >= 2 && a.rank() == b.rank(),
          "batch_matmul: rank mismatch");
  const size_t ra = static_cast<size_t>(a.rank());
  for (size_t i = 0; i + 2 < ra; ++i)
    require(a.shape()[i] == b.shape()[i], "batch_matmul: leading dims differ");
  const int64_t r = a.shape()[ra - 2], c = a.shape()[ra - 1];
  const int64_t c2 = b.shape()[ra - 2], q = b.shape()[ra - 1];
  require(c == c2, "batch_matmul: inner dimensions disagree");
  int64_t batch = 1;
  for (size_t i = 0; i + 2 < ra; ++i) batch *= a.shape()[i];
  Shape os(a.shape());
  os[ra - 2] = r;
  os[ra - 1] = q;
  Tensor out(os);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int64_t bi = 0; bi < batch; ++bi) {
    const double* A = pa + bi * r * c;
    const double* B = pb + bi * c * q;
    double* O = po + bi * r * q;
    for (int64_t i = 0; i < r; ++i)
      for (int64_t kk = 0; kk < c; ++kk) {
        const double av = A[i * c + kk];
        const double* brow = B + kk * q;
        double* orow = O + i * q;
        for (int64_t j = 0; j < q; ++j) orow[j] += av * brow[j];
      }
  }
  if (grad_wanted({&a, &b})) {
    NodePtr an = a.node(), bn = b.node(), on = out.node();
    trace({&a, &b}, out, [an, bn, on, batch, r, c, q] {
      const double* dy = on->grad.data();
      for (int64_t bi = 0; bi < batch; ++bi) {
        const double* dY = dy + bi * r * q;
        if (an->requires_grad) {
          double* dA = an->grad.data() + bi * r * c;
          const double* B = bn->value.data() + bi * c * q;
          for (int64_t i = 0; i < r; ++i)
            for (int64_t kk = 0; kk < c; ++kk) {
              double s = 0.0;
              for (int64_t j = 0; j < q; ++j) s += dY[i * q + j] * B[kk * q + j];
              dA[i * c + kk] += s;
            }
        }
        if (bn->requires_grad) {
          double* dB = bn->grad.data() + bi * c * q;
          const double* A = an->value.data() + bi * r * c;
          for (int64_t kk = 0; kk < c; ++kk)
            for (int64_t i = 0; i < r; ++i) {
              const double av = A[i * c + kk];
              const double* dyrow = dY + i * q;
              double* dbrow = dB + kk * q;
              for (int64_t j = 0; j < q; ++j) dbrow[j] += av * dyrow[j];
            }
        }
      }
    });
  }
  return out;
}

Tensor linear_lastdim(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require(w.rank() == 2, "linear_lastdim: weight must be rank-2");
  require(x.rank() >= 1 && x.shape().back() == w.dim(0),
          "linear_lastdim: input last dim " + shape_str(x.shape()) + " != weight rows " +
              shape_str(w.shape()));
  const int64_t din = w.dim(0), dout = w.dim(1);
  const int64_t rows = x.numel() / din;
  const bool has_bias = bias.defined();
  if (has_bias)
    require(bias.rank() == 1 && bias.dim(0) == dout, "linear_lastdim: bias shape mismatch");
  Shape os(x.shape());
  os.back() = dout;
  Tensor out(os);
  const double* px = x.data();
  const double* pw = w.data();
  double* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = px + r * din;
    double* orow = po + r * dout;
    if (has_bias) std::memcpy(orow, bias.data(), sizeof(double) * static_cast<size_t>(dout));
    for (int64_t i = 0; i < din; ++i) {
      const double xv = xr[i];
      const double* wrow = pw + i * dout;
      for (int64_t j = 0; j < dout; ++j) orow[j] += xv * wrow[j];
    }
  }
  const Tensor* bias_in = has_bias ? &bias : &x;  // placeholder when absent
  if (has_bias ? grad_wanted({&x, &w, &bias}) : grad_wanted({&x, &w})) {
    NodePtr xn = x.node(), wn = w.node(), on = out.node();
    NodePtr biasn = has_bias ? bias.node() : nullptr;
    if (has_bias && bias.requires_grad()) bias.ensure_grad();
    trace({&x, &w, bias_in}, out, [xn, wn, biasn, on, rows, din, dout] {
      const double* dy = on->grad.data();
      if (xn->requires_grad) {
        double* dx = xn->grad.data();
        const double* wv = wn->value.data();
        for (int64_t r = 0; r < rows; ++r) {
          const double* dyrow = dy + r * dout;
          double* dxr = dx + r * din;
          for (int64_t i = 0; i < din; ++i) {
            double s = 0.0;
            const double* wrow = wv + i * dout;
            for (int64_t j = 0; j < dout; ++j) s += dyrow[j] * wrow[j];
            dxr[i] += s;
          }
        }
      }
      if (wn->requires_grad) {
        double* dw = wn->grad.data();
        const double* xv = xn->value.data();
        for (int64_t r = 0; r < rows; ++r) {
          const double* dyrow = dy + r * dout;
          const double* xr = xv + r * din;
          for (int64_t i = 0; i < din; ++i) {
            const double xvv = xr[i];
            double* dwrow = dw + i * dout;
            for (int64_t j = 0; j < dout; ++j) dwrow[j] += xvv * dyrow[j];
          }
        }
      }
      if (biasn && biasn->requires_grad) {
        double* db = biasn->grad.data();
        for (int64_t r = 0; r < rows; ++r) {
          const double* dyrow = dy + r * dout;
          for (int64_t j = 0; j < dout; ++j) db[j] += dyrow[j];
        }
      }
    });
  }
  return out;
}

Tensor channel_linear(const Tensor& x, const Tensor& w) {
  require(x.rank() >= 2, "channel_linear: input must have at least [C, T] dims");
  require(w.rank() == 2, "channel_linear: weight must be rank-2 [Cout, Cin]");
  const size_t rx = static_cast<size_t>(x.rank());
  const int64_t cin = x.shape()[rx - 2], t = x.shape()[rx - 1];
  require(w.dim(1) == cin, "channel_linear: weight Cin " + shape_str(w.shape()) +
                               " != input channels " + shape_str(x.shape()));
  const int64_t cout = w.dim(0);
  const int64_t batch = x.numel() / (cin * t);
  Shape os(x.shape());
  os[rx - 2] = cout;
  Tensor out(os);
  const double* px = x.data();
  const double* pw = w.data();
  double* po = out.data();
  for (int64_t b = 0; b < batch; ++b) {
    const double* X = px + b * cin * t;
    double* O = po + b * cout * t;
    for (int64_t co = 0; co < cout; ++co) {
      double* orow = O + co * t;
      for (int64_t ci = 0; ci < cin; ++ci) {
        const double wv = pw[co * cin + ci];
        const double* xrow = X + ci * t;
        for (int64_t i = 0; i < t; ++i) orow[i] += wv * xrow[i];
      }
    }
  }
  if (grad_wanted({&x, &w})) {
    NodePtr xn = x.node(), wn = w.node(), on = out.node();
    trace({&x, &w}, out, [xn, wn, on, batch, cin, cout, t] {
      const double* dy = on->grad.data();
      for (int64_t b = 0; b < batch; ++b) {
        const double* dY = dy + b * cout * t;
        if (xn->requires_grad) {
          double* dX = xn->grad.data() + b * cin * t;
          const double* wv = wn->value.data();
          for (int64_t co = 0; co < cout; ++co) {
            const double* dyrow = dY + co * t;
            for (int64_t ci = 0; ci < cin; ++ci) {
              const double wvv = wv[co * cin + ci];
              double* dxrow = dX + ci * t;
              for (int64_t i = 0; i < t; ++i) dxrow[i] += wvv * dyrow[i];
            }
          }
        }
        if (wn->requires_grad) {
          double* dw = wn->grad.data();
          const double* X = xn->value.data() + b * cin * t;
          for (int64_t co = 0; co < cout; ++co) {
            const double* dyrow = dY + co * t;
            for (int64_t ci = 0; ci < cin; ++ci) {
              const double* xrow = X + ci * t;
              double s = 0.0;
              for (int64_t i = 0; i < t; ++i) s += dyrow[i] * xrow[i];
              dw[co * cin + ci] += s;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor dilated_causal_conv1d(const Tensor& x, const Tensor& w, int64_t dilation) {
  require(dilation >= 1, "dilated_causal_conv1d: dilation must be >= 1");
  require(w.rank() == 3, "dilated_causal_conv1d: weight must be [Cout, Cin, K]");
  require(x.rank() >= 2, "dilated_causal_conv1d: input must have [Cin, T] trailing dims");
  const size_t rx = static_cast<size_t>(x.rank());
  const int64_t cin = x.shape()[rx - 2], t = x.shape()[rx - 1];
  const int64_t cout = w.dim(0), k = w.dim(2);
  require(w.dim(1) == cin, "dilated_causal_conv1d: weight Cin != input channels");
  require(k >= 1, "dilated_causal_conv1d: kernel must be >= 1");
  const int64_t batch = x.numel() / (cin * t);
  Shape os(x.shape());
  os[rx - 2] = cout;
  Tensor out(os);
  const double* px = x.data();
  const double* pw = w.data();
  double* po = out.data();
  for (int64_t b = 0; b < batch; ++b) {
    const double* X = px + b * cin * t;
    double* O = po + b * cout * t;
    for (int64_t co = 0; co < cout; ++co) {
      double* orow = O + co * t;
      for (int64_t ci = 0; ci < cin; ++ci) {
        const double* xrow = X + ci * t;
        const double* wrow = pw + (co * cin + ci) * k;
        for (int64_t kk = 0; kk < k; ++kk) {
          const double wv = wrow[kk];
          const int64_t shift = kk * dilation;
          for (int64_t i = shift; i < t; ++i) orow[i] += wv * xrow[i - shift];
        }
      }
    }
  }
  if (grad_wanted({&x, &w})) {
    NodePtr xn = x.node(), wn = w.node(), on = out.node();
    trace({&x, &w}, out, [xn, wn, on, batch, cin, cout, t, k, dilation] {
      const double* dy = on->grad.data();
      for (int64_t b = 0; b < batch; ++b) {
        const double* dY = dy + b * cout * t;
        if (xn->requires_grad) {
          double* dX = xn->grad.data() + b * cin * t;
          const double* wv = wn->value.data();
          for (int64_t co = 0; co < cout; ++co) {
            const double* dyrow = dY + co * t;
            for (int64_t ci = 0; ci < cin; ++ci) {
              double* dxrow = dX + ci * t;
              const double* wrow = wv + (co * cin + ci) * k;
              for (int64_t kk = 0; kk < k; ++kk) {
                const double wvv = wrow[kk];
                const int64_t shift = kk * dilation;
                for (int64_t i = shift; i < t; ++i) dxrow[i - shift] += wvv * dyrow[i];
              }
            }
          }
        }
        if (wn->requires_grad) {
          double* dw = wn->grad.data();
          const double* X = xn->value.data() + b * cin * t;
          for (int64_t co = 0; co < cout; ++co) {
            const double* dyrow = dY + co * t;
            for (int64_t ci = 0; ci < cin; ++ci) {
              const double* xrow = X + ci * t;
              double* dwrow = dw + (co * cin + ci) * k;
              for (int64_t kk = 0; kk < k; ++kk) {
                const int64_t shift = kk * dilation;
                double s = 0.0;
                for (int64_t i = shift; i < t; ++i) s += dyrow[i] * xrow[i - shift];
                dwrow[kk] += s;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor pairwise_add(const Tensor& s1, const Tensor& s2) {
  require(s1.shape() == s2.shape(), "pairwise_add: operands must share shape");
  require(s1.rank() >= 1, "pairwise_add: operands must have at least one dim");
  const int64_t f = s1.shape().back();
  const int64_t rows = s1.numel() / f;
  Shape os(s1.shape());
  os.push_back(f);
  Tensor out(os);
  const double* p1 = s1.data();
  const double* p2 = s2.data();
  double* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* a = p1 + r * f;
    const double* b = p2 + r * f;
    double* o = po + r * f * f;
    for (int64_t i = 0; i < f; ++i)
      for (int64_t j = 0; j < f; ++j) o[i * f + j] = a[i] + b[j];
  }
  if (grad_wanted({&s1, &s2})) {
    NodePtr n1 = s1.node(), n2 = s2.node(), on = out.node();
    trace({&s1, &s2}, out, [n1, n2, on, rows, f] {
      const double* dy = on->grad.data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* d = dy + r * f * f;
        if (n1->requires_grad) {
          double* d1 = n1->grad.data() + r * f;
          for (int64_t i = 0; i < f; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < f; ++j) s += d[i * f + j];
            d1[i] += s;
          }
        }
        if (n2->requires_grad) {
          double* d2 = n2->grad.data() + r * f;
          for (int64_t j = 0; j < f; ++j) {
            double s = 0.0;
            for (int64_t i = 0; i < f; ++i) s += d[i * f + j];
            d2[j] += s;
          }
        }
      }
    });
  }
  return out;
}

Tensor feature_lift(const Tensor& x, const Tensor& w) {
  require(x.rank() == 4, "feature_lift: input must be [B, F, N, T]");
  require(w.rank() == 2 && w.dim(0) == x.dim(1), "feature_lift: weight must be [F, D]");
  const int64_t b = x.dim(0), f = x.dim(1), n = x.dim(2), t = x.dim(3), d = w.dim(1);
  Tensor out(Shape{b, f, n, t, d});
  const double* px = x.data();
  const double* pw = w.data();
  double* po = out.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t fi = 0; fi < f; ++fi) {
      const double* wrow = pw + fi * d;
      const double* xp = px + (bi * f + fi) * n * t;
      double* op = po + ((bi * f + fi) * n * t) * d;
      for (int64_t p = 0; p < n * t; ++p) {
        const double xv = xp[p];
        double* orow = op + p * d;
        for (int64_t di = 0; di < d; ++di) orow[di] = xv * wrow[di];
      }
    }
  if (grad_wanted({&x, &w})) {
    NodePtr xn = x.node(), wn = w.node(), on = out.node();
    trace({&x, &w}, out, [xn, wn, on, b, f, n, t, d] {
      const double* dy = on->grad.data();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t fi = 0; fi < f; ++fi) {
          const double* dyp = dy + ((bi * f + fi) * n * t) * d;
          if (xn->requires_grad) {
            double* dxp = xn->grad.data() + (bi * f + fi) * n * t;
            const double* wrow = wn->value.data() + fi * d;
            for (int64_t p = 0; p < n * t; ++p) {
              double s = 0.0;
              const double* dyrow = dyp + p * d;
              for (int64_t di = 0; di < d; ++di) s += dyrow[di] * wrow[di];
              dxp[p] += s;
            }
          }
          if (wn->requires_grad) {
            double* dwrow = wn->grad.data() + fi * d;
            const double* xp = xn->value.data() + (bi * f + fi) * n * t;
            for (int64_t p = 0; p < n * t; ++p) {
              const double xv = xp[p];
              const double* dyrow = dyp + p * d;
              for (int64_t di = 0; di < d; ++di) dwrow[di] += xv * dyrow[di];
            }
          }
        }
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& xs, int64_t axis) {
  require(!xs.empty(), "concat: empty input list");
  const Shape& s0 = xs[0].shape();
  require(axis >= 0 && axis < static_cast<int64_t>(s0.size()), "concat: axis out of range");
  int64_t total = 0;
  for (const Tensor& x : xs) {
    require(x.rank() == static_cast<int64_t>(s0.size()), "concat: rank mismatch");
    for (size_t i = 0; i < s0.size(); ++i)
      if (static_cast<int64_t>(i) != axis)
        require(x.shape()[i] == s0[i], "concat: shapes differ off-axis, " + shape_str(x.shape()) +
                                           " vs " + shape_str(s0));
    total += x.shape()[static_cast<size_t>(axis)];
  }
  Shape os(s0);
  os[static_cast<size_t>(axis)] = total;
  Tensor out(os);
  int64_t outer, len_total, inner;
  axis_split(os, axis, outer, len_total, inner);
  double* po = out.data();
  int64_t offset = 0;
  struct Piece {
    NodePtr node;
    int64_t len, offset;
    bool rg;
  };
  std::vector<Piece> pieces;
  bool any_grad = false;
  for (const Tensor& x : xs) {
    const int64_t len = x.shape()[static_cast<size_t>(axis)];
    const double* px = x.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(po + (o * len_total + offset) * inner, px + o * len * inner,
                  sizeof(double) * static_cast<size_t>(len * inner));
    pieces.push_back({x.node(), len, offset, x.requires_grad()});
    any_grad = any_grad || x.requires_grad();
    offset += len;
  }
  if (active_tape() && any_grad) {
    for (const Tensor& x : xs)
      if (x.requires_grad()) x.ensure_grad();
    out.set_requires_grad(true);
    out.ensure_grad();
    NodePtr on = out.node();
    active_tape()->record(on, [on, pieces, outer, len_total, inner] {
      const double* dy = on->grad.data();
      for (const Piece& p : pieces) {
        if (!p.rg) continue;
        double* dx = p.node->grad.data();
        for (int64_t o = 0; o < outer; ++o) {
          const double* src = dy + (o * len_total + p.offset) * inner;
          double* dst = dx + o * p.len * inner;
          for (int64_t i = 0; i < p.len * inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

Tensor select_axis(const Tensor& x, int64_t axis, int64_t index) {
  require(axis >= 0 && axis < x.rank(), "select_axis: axis out of range");
  require(index >= 0 && index < x.dim(axis), "select_axis: index out of range");
  int64_t outer, len, inner;
  axis_split(x.shape(), axis, outer, len, inner);
  Shape os;
  for (int64_t i = 0; i < x.rank(); ++i)
    if (i != axis) os.push_back(x.dim(i));
  if (os.empty()) os.push_back(1);
  Tensor out(os);
  const double* px = x.data();
  double* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(po + o * inner, px + (o * len + index) * inner,
                sizeof(double) * static_cast<size_t>(inner));
  if (grad_wanted({&x})) {
    NodePtr xn = x.node(), on = out.node();
    trace({&x}, out, [xn, on, outer, len, inner, index] {
      const double* dy = on->grad.data();
      double* dx = xn->grad.data();
      for (int64_t o = 0; o < outer; ++o) {
        const double* src = dy + o * inner;
        double* dst = dx + (o * len + index) * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

Tensor slice_axis0(const Tensor& x, int64_t begin, int64_t end) {
  require(x.rank() >= 1, "slice_axis0: rank must be >= 1");
  require(0 <= begin && begin < end && end <= x.dim(0), "slice_axis0: bad range");
  const int64_t inner = x.numel() / x.dim(0);
  Shape os(x.shape());
  os[0] = end - begin;
  Tensor out(os);
  std::memcpy(out.data(), x.data() + begin * inner,
              sizeof(double) * static_cast<size_t>((end - begin) * inner));
  if (grad_wanted({&x})) {
    NodePtr xn = x.node(), on = out.node();
    const int64_t count = (end - begin) * inner;
    trace({&x}, out, [xn, on, begin, inner, count] {
      const double* dy = on->grad.data();
      double* dx = xn->grad.data() + begin * inner;
      for (int64_t i = 0; i < count; ++i) dx[i] += dy[i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  require(numel_of(new_shape) == x.numel(), "reshape: element count mismatch, " +
                                                shape_str(x.shape()) + " -> " + shape_str(new_shape));
  Tensor out(std::move(new_shape), x.values());
  if (grad_wanted({&x})) {
    NodePtr xn = x.node(), on = out.node();
    const int64_t n = x.numel();
    trace({&x}, out, [xn, on, n] {
      const double* dy = on->grad.data();
      double* dx = xn->grad.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += dy[i];
    });
  }
  return out;
}

Tensor permute(const Tensor& x, const std::vector<int64_t>& perm) {
  require(static_cast<int64_t>(perm.size()) == x.rank(), "permute: perm rank mismatch");
  std::vector<bool> seen(perm.size(), false);
  for (int64_t p : perm) {
    require(p >= 0 && p < x.rank() && !seen[static_cast<size_t>(p)], "permute: invalid permutation");
    seen[static_cast<size_t>(p)] = true;
  }
  Shape os(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) os[i] = x.dim(perm[i]);
  Tensor out(os);
  const auto in_strides = row_major_strides(x.shape());
  std::vector<int64_t> stride_for_out(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) stride_for_out[i] = in_strides[static_cast<size_t>(perm[i])];
  const int64_t n = x.numel();
  const double* px = x.data();
  double* po = out.data();
  std::vector<int64_t> idx(perm.size(), 0);
  int64_t in_off = 0;
  for (int64_t lin = 0; lin < n; ++lin) {
    po[lin] = px[in_off];
    for (int64_t d = static_cast<int64_t>(perm.size()) - 1; d >= 0; --d) {
      idx[static_cast<size_t>(d)]++;
      in_off += stride_for_out[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < os[static_cast<size_t>(d)]) break;
      in_off -= stride_for_out[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }
  if (grad_wanted({&x})) {
    NodePtr xn = x.node(), on = out.node();
    trace({&x}, out, [xn, on, stride_for_out, os, n] {
      const double* dy = on->grad.data();
      double* dx = xn->grad.data();
      std::vector<int64_t> idx2(os.size(), 0);
      int64_t in_off2 = 0;
      for (int64_t lin = 0; lin < n; ++lin) {
        dx[in_off2] += dy[lin];
        for (int64_t d = static_cast<int64_t>(os.size()) - 1; d >= 0; --d) {
          idx2[static_cast<size_t>(d)]++;
          in_off2 += stride_for_out[static_cast<size_t>(d)];
          if (idx2[static_cast<size_t>(d)] < os[static_cast<size_t>(d)]) break;
          in_off2 -= stride_for_out[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
          idx2[static_cast<size_t>(d)] = 0;
        }
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor out = Tensor::scalar(s);
  if (grad_wanted({&x})) {
    NodePtr xn = x.node(), on = out.node();
    const int64_t n = x.numel();
    trace({&x}, out, [xn, on, n] {
      const double dy = on->grad[0];
      double* dx = xn->grad.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += dy;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  const int64_t n = x.numel();
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  if (grad_wanted({&x})) {
    NodePtr xn = x.node(), on = out.node();
    trace({&x}, out, [xn, on, n] {
      const double dy = on->grad[0] / static_cast<double>(n);
      double* dx = xn->grad.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += dy;
    });
  }
  return out;
}

Tensor mean_lastdim(const Tensor& x) {
  require(x.rank() >= 2, "mean_lastdim: rank must be >= 2");
  const int64_t len = x.shape().back();
  const int64_t rows = x.numel() / len;
  Shape os(x.shape());
  os.pop_back();
  Tensor out(os);
  const double* px = x.data();
  double* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    const double* xr = px + r * len;
    for (int64_t i = 0; i < len; ++i) s += xr[i];
    po[r] = s / static_cast<double>(len);
  }
  if (grad_wanted({&x})) {
    NodePtr xn = x.node(), on = out.node();
    trace({&x}, out, [xn, on, rows, len] {
      const double* dy = on->grad.data();
      double* dx = xn->grad.data();
      for (int64_t r = 0; r < rows; ++r) {
        const double g = dy[r] / static_cast<double>(len);
        double* dxr = dx + r * len;
        for (int64_t i = 0; i < len; ++i) dxr[i] += g;
      }
    });
  }
  return out;
}

Tensor repeat_leading(const Tensor& x, int64_t times) {
  require(times >= 1, "repeat_leading: times must be >= 1");
  Shape os;
  os.push_back(times);
  for (int64_t d : x.shape()) os.push_back(d);
  Tensor out(os);
  const int64_t n = x.numel();
  for (int64_t i = 0; i < times; ++i)
    std::memcpy(out.data() + i * n, x.data(), sizeof(double) * static_cast<size_t>(n));
  return out;
}

bool all_finite(const Tensor& x) {
  for (double v : x.values())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace mpgat
