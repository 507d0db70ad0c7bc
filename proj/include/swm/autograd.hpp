#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "swm/gemm.hpp"
#include "swm/tensor.hpp"

namespace swm {

/// Reverse-mode tape.  Nodes are created in topological order by the op
/// builders below; backward() replays them once in reverse.  The tape owns
/// every intermediate value, so clear it (or discard it) between steps.
template <class S>
class TapeT {
 public:
  struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
  };

  TapeT() = default;

  void set_check_finite(bool on) { check_finite_ = on; }
  size_t size() const { return nodes_.size(); }
  void clear() {
    nodes_.clear();
    grads_.clear();
  }

  Var leaf(TensorT<S> value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, nullptr, "leaf");
  }
  Var constant(TensorT<S> value) { return push(std::move(value), false, nullptr, "constant"); }

  const TensorT<S>& value(Var v) const { return node(v).value; }

  /// Gradient of the last backward() target with respect to v.  Zero tensor
  /// if nothing flowed.
  TensorT<S> grad(Var v) const {
    const auto& n = node(v);
    const auto& g = grads_.at(static_cast<size_t>(v.id));
    if (g.data.empty()) return TensorT<S>::zeros(n.value.shape);
    return g;
  }

  bool wants_grad(Var v) const { return node(v).needs_grad; }

  // --- elementwise -----------------------------------------------------------

  Var add(Var a, Var b) {
    require_same_shape("add", a, b);
    TensorT<S> out = value(a);
    const auto& bv = value(b);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
    return binary_ew(std::move(out), a, b, "add",
                     [](TapeT& t, Var a2, Var b2, const TensorT<S>& g) {
                       t.accum(a2, [&](TensorT<S>& d) {
                         for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i];
                       });
                       t.accum(b2, [&](TensorT<S>& d) {
                         for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i];
                       });
                     });
  }

  Var sub(Var a, Var b) {
    require_same_shape("sub", a, b);
    TensorT<S> out = value(a);
    const auto& bv = value(b);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
    return binary_ew(std::move(out), a, b, "sub",
                     [](TapeT& t, Var a2, Var b2, const TensorT<S>& g) {
                       t.accum(a2, [&](TensorT<S>& d) {
                         for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i];
                       });
                       t.accum(b2, [&](TensorT<S>& d) {
                         for (size_t i = 0; i < g.data.size(); ++i) d.data[i] -= g.data[i];
                       });
                     });
  }

  Var mul(Var a, Var b) {
    require_same_shape("mul", a, b);
    TensorT<S> out = value(a);
    const auto& bv = value(b);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    Var o = push_op(std::move(out), {a, b}, "mul");
    attach(o, [this, a, b, o]() {
      const TensorT<S>& g = out_grad(o);
      accum(a, [&](TensorT<S>& d) {
        const auto& bv2 = value(b);
        for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i] * bv2.data[i];
      });
      accum(b, [&](TensorT<S>& d) {
        const auto& av2 = value(a);
        for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i] * av2.data[i];
      });
    });
    return o;
  }

  Var scale(Var a, double c) {
    TensorT<S> out = value(a);
    for (auto& v : out.data) v = static_cast<S>(v * c);
    Var o = push_op(std::move(out), {a}, "scale");
    attach(o, [this, a, o, c]() {
      const TensorT<S>& g = out_grad(o);
      accum(a, [&](TensorT<S>& d) {
        for (size_t i = 0; i < g.data.size(); ++i)
          d.data[i] += static_cast<S>(g.data[i] * c);
      });
    });
    return o;
  }

  Var add_scalar(Var a, double c) {
    TensorT<S> out = value(a);
    for (auto& v : out.data) v = static_cast<S>(v + c);
    Var o = push_op(std::move(out), {a}, "add_scalar");
    attach(o, [this, a, o]() {
      const TensorT<S>& g = out_grad(o);
      accum(a, [&](TensorT<S>& d) {
        for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i];
      });
    });
    return o;
  }

  Var silu(Var a) {
    TensorT<S> out = value(a);
    for (auto& v : out.data) {
      double x = static_cast<double>(v);
      v = static_cast<S>(x / (1.0 + std::exp(-x)));
    }
    Var o = push_op(std::move(out), {a}, "silu");
    attach(o, [this, a, o]() {
      const TensorT<S>& g = out_grad(o);
      accum(a, [&](TensorT<S>& d) {
        const auto& av = value(a);
        for (size_t i = 0; i < g.data.size(); ++i) {
          double x = static_cast<double>(av.data[i]);
          double s = 1.0 / (1.0 + std::exp(-x));
          d.data[i] += static_cast<S>(static_cast<double>(g.data[i]) * (s * (1.0 + x * (1.0 - s))));
        }
      });
    });
    return o;
  }

  Var tanh_act(Var a) {
    TensorT<S> out = value(a);
    for (auto& v : out.data) v = static_cast<S>(std::tanh(static_cast<double>(v)));
    Var o = push_op(std::move(out), {a}, "tanh");
    attach(o, [this, a, o]() {
      const TensorT<S>& g = out_grad(o);
      accum(a, [&](TensorT<S>& d) {
        const auto& y = value(o);
        for (size_t i = 0; i < g.data.size(); ++i) {
          double t = static_cast<double>(y.data[i]);
          d.data[i] += static_cast<S>(static_cast<double>(g.data[i]) * (1.0 - t * t));
        }
      });
    });
    return o;
  }

  // --- matrix products ---------------------------------------------------------

  Var matmul(Var a, Var b) {
    const auto& av = value(a);
    const auto& bv = value(b);
    if (av.ndim() != 2 || bv.ndim() != 2)
      throw ShapeError("matmul: expected rank-2 operands, got " + av.shape_str() + " and " +
                       bv.shape_str());
    if (av.dim(1) != bv.dim(0))
      throw ShapeError("matmul: inner axis mismatch, lhs axis 1 is " + std::to_string(av.dim(1)) +
                       " but rhs axis 0 is " + std::to_string(bv.dim(0)));
    int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    TensorT<S> out({m, n});
    gemm(av.ptr(), bv.ptr(), out.ptr(), m, k, n);
    Var o = push_op(std::move(out), {a, b}, "matmul");
    attach(o, [this, a, b, o, m, k, n]() {
      const TensorT<S>& g = out_grad(o);
      accum(a, [&](TensorT<S>& d) {
        gemm_bt_acc(g.ptr(), value(b).ptr(), d.ptr(), m, n, k);  // dA = g * B^T
      });
      accum(b, [&](TensorT<S>& d) {
        gemm_at_acc(value(a).ptr(), g.ptr(), d.ptr(), k, m, n);  // dB = A^T * g
      });
    });
    return o;
  }

  Var bmm(Var a, Var b) {
    const auto& av = value(a);
    const auto& bv = value(b);
    if (av.ndim() != 3 || bv.ndim() != 3)
      throw ShapeError("bmm: expected rank-3 operands, got " + av.shape_str() + " and " +
                       bv.shape_str());
    if (av.dim(0) != bv.dim(0))
      throw ShapeError("bmm: batch axis 0 mismatch, " + std::to_string(av.dim(0)) + " vs " +
                       std::to_string(bv.dim(0)));
    if (av.dim(2) != bv.dim(1))
      throw ShapeError("bmm: inner axis mismatch, lhs axis 2 is " + std::to_string(av.dim(2)) +
                       " but rhs axis 1 is " + std::to_string(bv.dim(1)));
    int64_t batch = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
    TensorT<S> out({batch, m, n});
    for (int64_t i = 0; i < batch; ++i)
      gemm(av.ptr() + i * m * k, bv.ptr() + i * k * n, out.ptr() + i * m * n, m, k, n);
    Var o = push_op(std::move(out), {a, b}, "bmm");
    attach(o, [this, a, b, o, batch, m, k, n]() {
      const TensorT<S>& g = out_grad(o);
      accum(a, [&](TensorT<S>& d) {
        for (int64_t i = 0; i < batch; ++i)
          gemm_bt_acc(g.ptr() + i * m * n, value(b).ptr() + i * k * n, d.ptr() + i * m * k, m, n,
                      k);
      });
      accum(b, [&](TensorT<S>& d) {
        for (int64_t i = 0; i < batch; ++i)
          gemm_at_acc(value(a).ptr() + i * m * k, g.ptr() + i * m * n, d.ptr() + i * k * n, k, m,
                      n);
      });
    });
    return o;
  }

  /// y = x * w + b with x [N,K], w [K,M], b [M] (b optional: pass invalid Var).
  Var linear(Var x, Var w, Var b) {
    const auto& xv = value(x);
    const auto& wv = value(w);
    if (xv.ndim() != 2 || wv.ndim() != 2)
      throw ShapeError("linear: expected rank-2 input and weight, got " + xv.shape_str() +
                       " and " + wv.shape_str());
    if (xv.dim(1) != wv.dim(0))
      throw ShapeError("linear: input axis 1 is " + std::to_string(xv.dim(1)) +
                       " but weight axis 0 is " + std::to_string(wv.dim(0)));
    int64_t n = xv.dim(0), k = xv.dim(1), m = wv.dim(1);
    TensorT<S> out({n, m});
    gemm(xv.ptr(), wv.ptr(), out.ptr(), n, k, m);
    std::vector<Var> ins = {x, w};
    if (b.valid()) {
      const auto& bias = value(b);
      if (bias.ndim() != 1 || bias.dim(0) != m)
        throw ShapeError("linear: bias axis 0 must be " + std::to_string(m) + ", got " +
                         bias.shape_str());
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) out.ptr()[i * m + j] += bias.ptr()[j];
      ins.push_back(b);
    }
    Var o = push_op(std::move(out), ins, "linear");
    attach(o, [this, x, w, b, o, n, k, m]() {
      const TensorT<S>& g = out_grad(o);
      accum(x, [&](TensorT<S>& d) { gemm_bt_acc(g.ptr(), value(w).ptr(), d.ptr(), n, m, k); });
      accum(w, [&](TensorT<S>& d) { gemm_at_acc(value(x).ptr(), g.ptr(), d.ptr(), k, n, m); });
      if (b.valid())
        accum(b, [&](TensorT<S>& d) {
          for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < m; ++j) d.ptr()[j] += g.ptr()[i * m + j];
        });
    });
    return o;
  }

  // --- convolution ---------------------------------------------------------

  /// x [N,Cin,H,W], w [Cout,Cin,kh,kw], bias [Cout] or invalid.
  Var conv2d(Var x, Var w, Var b, int sh = 1, int sw = 1, int ph = 0, int pw = 0) {
    const auto& xv = value(x);
    const auto& wv = value(w);
    if (xv.ndim() != 4)
      throw ShapeError("conv2d: input must be rank 4, got " + xv.shape_str());
    if (wv.ndim() != 4)
      throw ShapeError("conv2d: weight must be rank 4, got " + wv.shape_str());
    if (xv.dim(1) != wv.dim(1))
      throw ShapeError("conv2d: input channel axis 1 is " + std::to_string(xv.dim(1)) +
                       " but weight expects " + std::to_string(wv.dim(1)));
    if (sh < 1 || sw < 1) throw ValueError("conv2d: stride must be >= 1");
    int64_t n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
    int64_t cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    int64_t ho = (h + 2 * ph - kh) / sh + 1;
    int64_t wo = (wd + 2 * pw - kw) / sw + 1;
    if (ho <= 0 || wo <= 0)
      throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                       " does not fit input " + xv.shape_str() + " with padding " +
                       std::to_string(ph) + "," + std::to_string(pw));
    if (b.valid()) {
      const auto& bias = value(b);
      if (bias.ndim() != 1 || bias.dim(0) != cout)
        throw ShapeError("conv2d: bias axis 0 must be " + std::to_string(cout) + ", got " +
                         bias.shape_str());
    }
    int64_t k2 = cin * kh * kw, patches = ho * wo;
    TensorT<S> out({n, cout, ho, wo});
    std::vector<S> col(static_cast<size_t>(k2 * patches));
    for (int64_t i = 0; i < n; ++i) {
      im2col(xv.ptr() + i * cin * h * wd, col.data(), cin, h, wd, kh, kw, sh, sw, ph, pw, ho, wo);
      gemm(wv.ptr(), col.data(), out.ptr() + i * cout * patches, cout, k2, patches);
      if (b.valid()) {
        const S* bias = value(b).ptr();
        S* orow = out.ptr() + i * cout * patches;
        for (int64_t c = 0; c < cout; ++c)
          for (int64_t p = 0; p < patches; ++p) orow[c * patches + p] += bias[c];
      }
    }
    std::vector<Var> ins = {x, w};
    if (b.valid()) ins.push_back(b);
    Var o = push_op(std::move(out), ins, "conv2d");
    attach(o, [this, x, w, b, o, sh, sw, ph, pw]() {
      const TensorT<S>& g = out_grad(o);
      const auto& xv2 = value(x);
      const auto& wv2 = value(w);
      int64_t n2 = xv2.dim(0), cin2 = xv2.dim(1), h2 = xv2.dim(2), w2 = xv2.dim(3);
      int64_t cout2 = wv2.dim(0), kh2 = wv2.dim(2), kw2 = wv2.dim(3);
      int64_t ho2 = g.dim(2), wo2 = g.dim(3);
      int64_t k2 = cin2 * kh2 * kw2, patches = ho2 * wo2;
      std::vector<S> col(static_cast<size_t>(k2 * patches));
      bool need_x = wants_grad(x), need_w = wants_grad(w);
      if (need_w) {
        accum_touch(w);
        TensorT<S>& dw = grads_[static_cast<size_t>(w.id)];
        for (int64_t i = 0; i < n2; ++i) {
          im2col(xv2.ptr() + i * cin2 * h2 * w2, col.data(), cin2, h2, w2, kh2, kw2, sh, sw, ph,
                 pw, ho2, wo2);
          gemm_bt_acc(g.ptr() + i * cout2 * patches, col.data(), dw.ptr(), cout2, patches, k2);
        }
      }
      if (need_x) {
        accum_touch(x);
        TensorT<S>& dx = grads_[static_cast<size_t>(x.id)];
        for (int64_t i = 0; i < n2; ++i) {
          std::fill(col.begin(), col.end(), S(0));
          gemm_at_acc(wv2.ptr(), g.ptr() + i * cout2 * patches, col.data(), k2, cout2, patches);
          col2im(col.data(), dx.ptr() + i * cin2 * h2 * w2, cin2, h2, w2, kh2, kw2, sh, sw, ph,
                 pw, ho2, wo2);
        }
      }
      if (b.valid())
        accum(b, [&](TensorT<S>& db) {
          for (int64_t i = 0; i < n2; ++i)
            for (int64_t c = 0; c < cout2; ++c) {
              const S* row = g.ptr() + (i * cout2 + c) * patches;
              S acc = 0;
              for (int64_t p = 0; p < patches; ++p) acc += row[p];
              db.ptr()[c] += acc;
            }
        });
    });
    return o;
  }

  // --- reductions / loss ---------------------------------------------------

  Var sum_all(Var a) {
    const auto& av = value(a);
    double acc = 0;
    for (S v : av.data) acc += static_cast<double>(v);
    Var o = push_op(TensorT<S>::scalar(static_cast<S>(acc)), {a}, "sum");
    attach(o, [this, a, o]() {
      S g = out_grad(o).data[0];
      accum(a, [&](TensorT<S>& d) {
        for (auto& v : d.data) v += g;
      });
    });
    return o;
  }

  Var mean_all(Var a) {
    const auto& av = value(a);
    double acc = 0;
    for (S v : av.data) acc += static_cast<double>(v);
    double inv = 1.0 / static_cast<double>(av.numel());
    Var o = push_op(TensorT<S>::scalar(static_cast<S>(acc * inv)), {a}, "mean");
    attach(o, [this, a, o, inv]() {
      double g = static_cast<double>(out_grad(o).data[0]) * inv;
      accum(a, [&](TensorT<S>& d) {
        for (auto& v : d.data) v += static_cast<S>(g);
      });
    });
    return o;
  }

  /// Mean squared error between same-shape tensors.
  Var mse(Var a, Var b) {
    require_same_shape("mse", a, b);
    const auto& av = value(a);
    const auto& bv = value(b);
    double acc = 0;
    for (size_t i = 0; i < av.data.size(); ++i) {
      double d = static_cast<double>(av.data[i]) - static_cast<double>(bv.data[i]);
      acc += d * d;
    }
    double inv = 1.0 / static_cast<double>(av.numel());
    Var o = push_op(TensorT<S>::scalar(static_cast<S>(acc * inv)), {a, b}, "mse");
    attach(o, [this, a, b, o, inv]() {
      double g = static_cast<double>(out_grad(o).data[0]) * 2.0 * inv;
      const auto& av2 = value(a);
      const auto& bv2 = value(b);
      accum(a, [&](TensorT<S>& d) {
        for (size_t i = 0; i < d.data.size(); ++i)
          d.data[i] += static_cast<S>(g * (static_cast<double>(av2.data[i]) -
                                           static_cast<double>(bv2.data[i])));
      });
      accum(b, [&](TensorT<S>& d) {
        for (size_t i = 0; i < d.data.size(); ++i)
          d.data[i] -= static_cast<S>(g * (static_cast<double>(av2.data[i]) -
                                           static_cast<double>(bv2.data[i])));
      });
    });
    return o;
  }

  // --- softmax / normalization ----------------------------------------------

  /// Numerically stable softmax along `axis`.
  Var softmax(Var a, int axis) {
    const auto& av = value(a);
    axis = norm_axis("softmax", axis, av.ndim());
    int64_t len = av.dim(axis);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= av.dim(i);
    for (int i = axis + 1; i < av.ndim(); ++i) inner *= av.dim(i);
    TensorT<S> out = av;
    for (int64_t ot = 0; ot < outer; ++ot)
      for (int64_t in = 0; in < inner; ++in) {
        S* base = out.ptr() + ot * len * inner + in;
        double mx = -1e300;
        for (int64_t l = 0; l < len; ++l)
          mx = std::max(mx, static_cast<double>(base[l * inner]));
        double z = 0;
        for (int64_t l = 0; l < len; ++l) {
          double e = std::exp(static_cast<double>(base[l * inner]) - mx);
          base[l * inner] = static_cast<S>(e);
          z += e;
        }
        double invz = 1.0 / z;
        for (int64_t l = 0; l < len; ++l)
          base[l * inner] = static_cast<S>(static_cast<double>(base[l * inner]) * invz);
      }
    Var o = push_op(std::move(out), {a}, "softmax");
    attach(o, [this, a, o, outer, inner, len]() {
      const TensorT<S>& g = out_grad(o);
      const TensorT<S>& y = value(o);
      accum(a, [&](TensorT<S>& d) {
        for (int64_t ot = 0; ot < outer; ++ot)
          for (int64_t in = 0; in < inner; ++in) {
            const S* yb = y.ptr() + ot * len * inner + in;
            const S* gb = g.ptr() + ot * len * inner + in;
            S* db = d.ptr() + ot * len * inner + in;
            double dot = 0;
            for (int64_t l = 0; l < len; ++l)
              dot += static_cast<double>(gb[l * inner]) * static_cast<double>(yb[l * inner]);
            for (int64_t l = 0; l < len; ++l)
              db[l * inner] += static_cast<S>(static_cast<double>(yb[l * inner]) *
                                              (static_cast<double>(gb[l * inner]) - dot));
          }
      });
    });
    return o;
  }

  /// Group normalization over [N,C,...] with per-channel affine.
  Var group_norm(Var x, Var gamma, Var beta, int groups, double eps = 1e-5) {
    const auto& xv = value(x);
    if (xv.ndim() < 2)
      throw ShapeError("group_norm: input must have rank >= 2, got " + xv.shape_str());
    int64_t n = xv.dim(0), c = xv.dim(1);
    int64_t sp = 1;
    for (int i = 2; i < xv.ndim(); ++i) sp *= xv.dim(i);
    if (groups < 1 || c % groups != 0)
      throw ShapeError("group_norm: channel axis 1 (" + std::to_string(c) +
                       ") not divisible by groups (" + std::to_string(groups) + ")");
    const auto& gv = value(gamma);
    const auto& bv = value(beta);
    if (gv.numel() != c || bv.numel() != c)
      throw ShapeError("group_norm: gamma/beta must have " + std::to_string(c) + " elements");
    int64_t cg = c / groups, gsz = cg * sp;
    TensorT<S> out(xv.shape);
    auto stats = std::make_shared<std::vector<double>>(
        static_cast<size_t>(n * groups * 2));  // mean, inv per (n,g)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t g = 0; g < groups; ++g) {
        const S* src = xv.ptr() + (i * c + g * cg) * sp;
        double mean = 0;
        for (int64_t e = 0; e < gsz; ++e) mean += static_cast<double>(src[e]);
        mean /= static_cast<double>(gsz);
        double var = 0;
        for (int64_t e = 0; e < gsz; ++e) {
          double d = static_cast<double>(src[e]) - mean;
          var += d * d;
        }
        var /= static_cast<double>(gsz);
        double inv = 1.0 / std::sqrt(var + eps);
        (*stats)[static_cast<size_t>((i * groups + g) * 2)] = mean;
        (*stats)[static_cast<size_t>((i * groups + g) * 2 + 1)] = inv;
        S* dst = out.ptr() + (i * c + g * cg) * sp;
        for (int64_t ch = 0; ch < cg; ++ch) {
          double ga = static_cast<double>(gv.ptr()[g * cg + ch]);
          double be = static_cast<double>(bv.ptr()[g * cg + ch]);
          for (int64_t e = 0; e < sp; ++e) {
            double xh = (static_cast<double>(src[ch * sp + e]) - mean) * inv;
            dst[ch * sp + e] = static_cast<S>(ga * xh + be);
          }
        }
      }
    Var o = push_op(std::move(out), {x, gamma, beta}, "group_norm");
    attach(o, [this, x, gamma, beta, o, groups, stats, n, c, sp, cg, gsz]() {
      const TensorT<S>& g = out_grad(o);
      const auto& xv2 = value(x);
      const auto& gv2 = value(gamma);
      bool need_x = wants_grad(x);
      bool need_g = wants_grad(gamma);
      bool need_b = wants_grad(beta);
      if (need_g) accum_touch(gamma);
      if (need_b) accum_touch(beta);
      if (need_x) accum_touch(x);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t gr = 0; gr < groups; ++gr) {
          double mean = (*stats)[static_cast<size_t>((i * groups + gr) * 2)];
          double inv = (*stats)[static_cast<size_t>((i * groups + gr) * 2 + 1)];
          const S* xs = xv2.ptr() + (i * c + gr * cg) * sp;
          const S* gs = g.ptr() + (i * c + gr * cg) * sp;
          if (need_g || need_b) {
            TensorT<S>& dga = grads_[static_cast<size_t>(gamma.id)];
            TensorT<S>& dbe = grads_[static_cast<size_t>(beta.id)];
            for (int64_t ch = 0; ch < cg; ++ch) {
              double sg = 0, sgx = 0;
              for (int64_t e = 0; e < sp; ++e) {
                double gg = static_cast<double>(gs[ch * sp + e]);
                double xh = (static_cast<double>(xs[ch * sp + e]) - mean) * inv;
                sg += gg;
                sgx += gg * xh;
              }
              if (need_g) dga.ptr()[gr * cg + ch] += static_cast<S>(sgx);
              if (need_b) dbe.ptr()[gr * cg + ch] += static_cast<S>(sg);
            }
          }
          if (need_x) {
            TensorT<S>& dx = grads_[static_cast<size_t>(x.id)];
            S* dxs = dx.ptr() + (i * c + gr * cg) * sp;
            // dxhat = g * gamma; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
            double s1 = 0, s2 = 0;
            for (int64_t ch = 0; ch < cg; ++ch) {
              double ga = static_cast<double>(gv2.ptr()[gr * cg + ch]);
              for (int64_t e = 0; e < sp; ++e) {
                double dxh = static_cast<double>(gs[ch * sp + e]) * ga;
                double xh = (static_cast<double>(xs[ch * sp + e]) - mean) * inv;
                s1 += dxh;
                s2 += dxh * xh;
              }
            }
            double m1 = s1 / static_cast<double>(gsz);
            double m2 = s2 / static_cast<double>(gsz);
            for (int64_t ch = 0; ch < cg; ++ch) {
              double ga = static_cast<double>(gv2.ptr()[gr * cg + ch]);
              for (int64_t e = 0; e < sp; ++e) {
                double dxh = static_cast<double>(gs[ch * sp + e]) * ga;
                double xh = (static_cast<double>(xs[ch * sp + e]) - mean) * inv;
                dxs[ch * sp + e] += static_cast<S>(inv * (dxh - m1 - xh * m2));
              }
            }
          }
        }
    });
    return o;
  }

  // --- shape ops --------------------------------------------------------------

  Var reshape(Var a, std::vector<int64_t> dims) {
    const auto& av = value(a);
    if (TensorT<S>::count(dims) != av.numel())
      throw ShapeError("reshape: cannot view " + av.shape_str() + " as " +
                       TensorT<S>::shape_str(dims) + " (element count differs)");
    TensorT<S> out;
    out.shape = std::move(dims);
    out.data = av.data;
    Var o = push_op(std::move(out), {a}, "reshape");
    attach(o, [this, a, o]() {
      const TensorT<S>& g = out_grad(o);
      accum(a, [&](TensorT<S>& d) {
        for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i];
      });
    });
    return o;
  }

  Var permute(Var a, std::vector<int> axes) {
    const auto& av = value(a);
    int nd = av.ndim();
    if (static_cast<int>(axes.size()) != nd)
      throw ShapeError("permute: got " + std::to_string(axes.size()) + " axes for rank " +
                       std::to_string(nd));
    std::vector<bool> seen(static_cast<size_t>(nd), false);
    for (int ax : axes) {
      if (ax < 0 || ax >= nd || seen[static_cast<size_t>(ax)])
        throw ShapeError("permute: invalid or repeated axis " + std::to_string(ax));
      seen[static_cast<size_t>(ax)] = true;
    }
    TensorT<S> out(permuted_dims(av.shape, axes));
    permute_copy(av, out, axes);
    Var o = push_op(std::move(out), {a}, "permute");
    std::vector<int> inv(axes.size());
    for (int i = 0; i < nd; ++i) inv[static_cast<size_t>(axes[static_cast<size_t>(i)])] = i;
    attach(o, [this, a, o, inv]() {
      const TensorT<S>& g = out_grad(o);
      accum(a, [&](TensorT<S>& d) {
        TensorT<S> tmp(d.shape);
        permute_copy(g, tmp, inv);
        for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += tmp.data[i];
      });
    });
    return o;
  }

  Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw ValueError("concat: no inputs");
    const auto& first = value(parts[0]);
    axis = norm_axis("concat", axis, first.ndim());
    std::vector<int64_t> dims = first.shape;
    int64_t total = 0;
    for (Var p : parts) {
      const auto& pv = value(p);
      if (pv.ndim() != first.ndim())
        throw ShapeError("concat: rank mismatch between inputs");
      for (int i = 0; i < first.ndim(); ++i)
        if (i != axis && pv.dim(i) != first.dim(i))
          throw ShapeError("concat: axis " + std::to_string(i) + " mismatch, " +
                           std::to_string(pv.dim(i)) + " vs " + std::to_string(first.dim(i)));
      total += pv.dim(axis);
    }
    dims[static_cast<size_t>(axis)] = total;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= first.dim(i);
    for (int i = axis + 1; i < first.ndim(); ++i) inner *= first.dim(i);
    TensorT<S> out(dims);
    int64_t off = 0;
    for (Var p : parts) {
      const auto& pv = value(p);
      int64_t len = pv.dim(axis);
      for (int64_t ot = 0; ot < outer; ++ot)
        std::memcpy(out.ptr() + (ot * total + off) * inner, pv.ptr() + ot * len * inner,
                    static_cast<size_t>(len * inner) * sizeof(S));
      off += len;
    }
    Var o = push_op(std::move(out), parts, "concat");
    attach(o, [this, parts, o, axis, outer, inner, total]() {
      const TensorT<S>& g = out_grad(o);
      int64_t off2 = 0;
      for (Var p : parts) {
        int64_t len = value(p).dim(axis);
        accum(p, [&](TensorT<S>& d) {
          for (int64_t ot = 0; ot < outer; ++ot) {
            const S* src = g.ptr() + (ot * total + off2) * inner;
            S* dst = d.ptr() + ot * len * inner;
            for (int64_t e = 0; e < len * inner; ++e) dst[e] += src[e];
          }
        });
        off2 += len;
      }
    });
    return o;
  }

  Var slice(Var a, int axis, int64_t start, int64_t len) {
    const auto& av = value(a);
    axis = norm_axis("slice", axis, av.ndim());
    if (start < 0 || len <= 0 || start + len > av.dim(axis))
      throw ShapeError("slice: range [" + std::to_string(start) + "," +
                       std::to_string(start + len) + ") out of bounds on axis " +
                       std::to_string(axis) + " (extent " + std::to_string(av.dim(axis)) + ")");
    std::vector<int64_t> dims = av.shape;
    dims[static_cast<size_t>(axis)] = len;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= av.dim(i);
    for (int i = axis + 1; i < av.ndim(); ++i) inner *= av.dim(i);
    int64_t full = av.dim(axis);
    TensorT<S> out(dims);
    for (int64_t ot = 0; ot < outer; ++ot)
      std::memcpy(out.ptr() + ot * len * inner, av.ptr() + (ot * full + start) * inner,
                  static_cast<size_t>(len * inner) * sizeof(S));
    Var o = push_op(std::move(out), {a}, "slice");
    attach(o, [this, a, o, outer, inner, full, start, len]() {
      const TensorT<S>& g = out_grad(o);
      accum(a, [&](TensorT<S>& d) {
        for (int64_t ot = 0; ot < outer; ++ot) {
          const S* src = g.ptr() + ot * len * inner;
          S* dst = d.ptr() + (ot * full + start) * inner;
          for (int64_t e = 0; e < len * inner; ++e) dst[e] += src[e];
        }
      });
    });
    return o;
  }

  /// Nearest-neighbour upsampling of [N,C,H,W] by integer factor.
  Var upsample_nn(Var a, int factor) {
    const auto& av = value(a);
    if (av.ndim() != 4) throw ShapeError("upsample_nn: input must be rank 4, got " + av.shape_str());
    if (factor < 1) throw ValueError("upsample_nn: factor must be >= 1");
    int64_t n = av.dim(0), c = av.dim(1), h = av.dim(2), w = av.dim(3);
    TensorT<S> out({n, c, h * factor, w * factor});
    for (int64_t nc = 0; nc < n * c; ++nc) {
      const S* src = av.ptr() + nc * h * w;
      S* dst = out.ptr() + nc * h * factor * w * factor;
      for (int64_t y = 0; y < h * factor; ++y)
        for (int64_t x = 0; x < w * factor; ++x)
          dst[y * w * factor + x] = src[(y / factor) * w + (x / factor)];
    }
    Var o = push_op(std::move(out), {a}, "upsample_nn");
    attach(o, [this, a, o, factor, n, c, h, w]() {
      const TensorT<S>& g = out_grad(o);
      accum(a, [&](TensorT<S>& d) {
        for (int64_t nc = 0; nc < n * c; ++nc) {
          const S* src = g.ptr() + nc * h * factor * w * factor;
          S* dst = d.ptr() + nc * h * w;
          for (int64_t y = 0; y < h * factor; ++y)
            for (int64_t x = 0; x < w * factor; ++x)
              dst[(y / factor) * w + (x / factor)] += src[y * w * factor + x];
        }
      });
    });
    return o;
  }

  /// Average pooling of [N,C,H,W] by integer factor (extents must divide).
  Var avgpool(Var a, int factor) {
    const auto& av = value(a);
    if (av.ndim() != 4) throw ShapeError("avgpool: input must be rank 4, got " + av.shape_str());
    int64_t n = av.dim(0), c = av.dim(1), h = av.dim(2), w = av.dim(3);
    if (factor < 1 || h % factor != 0 || w % factor != 0)
      throw ShapeError("avgpool: factor " + std::to_string(factor) +
                       " must divide spatial axes 2,3 of " + av.shape_str());
    int64_t ho = h / factor, wo = w / factor;
    double inv = 1.0 / static_cast<double>(factor * factor);
    TensorT<S> out({n, c, ho, wo});
    for (int64_t nc = 0; nc < n * c; ++nc) {
      const S* src = av.ptr() + nc * h * w;
      S* dst = out.ptr() + nc * ho * wo;
      for (int64_t y = 0; y < ho; ++y)
        for (int64_t x = 0; x < wo; ++x) {
          double acc = 0;
          for (int64_t dy = 0; dy < factor; ++dy)
            for (int64_t dx = 0; dx < factor; ++dx)
              acc += static_cast<double>(src[(y * factor + dy) * w + x * factor + dx]);
          dst[y * wo + x] = static_cast<S>(acc * inv);
        }
    }
    Var o = push_op(std::move(out), {a}, "avgpool");
    attach(o, [this, a, o, factor, n, c, h, w, ho, wo, inv]() {
      const TensorT<S>& g = out_grad(o);
      accum(a, [&](TensorT<S>& d) {
        for (int64_t nc = 0; nc < n * c; ++nc) {
          const S* src = g.ptr() + nc * ho * wo;
          S* dst = d.ptr() + nc * h * w;
          for (int64_t y = 0; y < ho; ++y)
            for (int64_t x = 0; x < wo; ++x) {
              S gv = static_cast<S>(static_cast<double>(src[y * wo + x]) * inv);
              for (int64_t dy = 0; dy < factor; ++dy)
                for (int64_t dx = 0; dx < factor; ++dx)
                  dst[(y * factor + dy) * w + x * factor + dx] += gv;
            }
        }
      });
    });
    return o;
  }

  // --- broadcast helpers -------------------------------------------------------

  /// Gather rows of table [V,d] by constant indices -> [n,d].
  Var rows_lookup(Var table, const std::vector<int64_t>& ids) {
    const auto& tv = value(table);
    if (tv.ndim() != 2)
      throw ShapeError("rows_lookup: table must be rank 2, got " + tv.shape_str());
    int64_t v = tv.dim(0), d = tv.dim(1);
    for (int64_t id : ids)
      if (id < 0 || id >= v)
        throw ShapeError("rows_lookup: row index " + std::to_string(id) +
                         " out of range on axis 0 (extent " + std::to_string(v) + ")");
    TensorT<S> out({static_cast<int64_t>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i)
      std::memcpy(out.ptr() + static_cast<int64_t>(i) * d, tv.ptr() + ids[i] * d,
                  static_cast<size_t>(d) * sizeof(S));
    Var o = push_op(std::move(out), {table}, "rows_lookup");
    attach(o, [this, table, o, ids, d]() {
      const TensorT<S>& g = out_grad(o);
      accum(table, [&](TensorT<S>& dt) {
        for (size_t i = 0; i < ids.size(); ++i) {
          const S* src = g.ptr() + static_cast<int64_t>(i) * d;
          S* dst = dt.ptr() + ids[i] * d;
          for (int64_t e = 0; e < d; ++e) dst[e] += src[e];
        }
      });
    });
    return o;
  }

  /// x [N,R,C] + p [R,C] broadcast over axis 0.
  Var bias_rows(Var x, Var p) {
    const auto& xv = value(x);
    const auto& pv = value(p);
    if (xv.ndim() != 3 || pv.ndim() != 2 || xv.dim(1) != pv.dim(0) || xv.dim(2) != pv.dim(1))
      throw ShapeError("bias_rows: expected x [N,R,C] and p [R,C], got " + xv.shape_str() +
                       " and " + pv.shape_str());
    int64_t n = xv.dim(0), rc = pv.numel();
    TensorT<S> out = xv;
    for (int64_t i = 0; i < n; ++i) {
      S* dst = out.ptr() + i * rc;
      for (int64_t e = 0; e < rc; ++e) dst[e] += pv.ptr()[e];
    }
    Var o = push_op(std::move(out), {x, p}, "bias_rows");
    attach(o, [this, x, p, o, n, rc]() {
      const TensorT<S>& g = out_grad(o);
      accum(x, [&](TensorT<S>& d) {
        for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i];
      });
      accum(p, [&](TensorT<S>& d) {
        for (int64_t i = 0; i < n; ++i) {
          const S* src = g.ptr() + i * rc;
          for (int64_t e = 0; e < rc; ++e) d.ptr()[e] += src[e];
        }
      });
    });
    return o;
  }

  /// Repeat along a new inner position of axis 0: out[b*times + t, ...] = x[b, ...].
  Var repeat_leading(Var x, int64_t times) {
    const auto& xv = value(x);
    if (xv.ndim() < 1) throw ShapeError("repeat_leading: input must have rank >= 1");
    if (times < 1) throw ValueError("repeat_leading: times must be >= 1");
    int64_t b = xv.dim(0), c = xv.numel() / b;
    std::vector<int64_t> dims = xv.shape;
    dims[0] = b * times;
    TensorT<S> out(dims);
    for (int64_t i = 0; i < b; ++i)
      for (int64_t t = 0; t < times; ++t)
        std::memcpy(out.ptr() + (i * times + t) * c, xv.ptr() + i * c,
                    static_cast<size_t>(c) * sizeof(S));
    Var o = push_op(std::move(out), {x}, "repeat_leading");
    attach(o, [this, x, o, b, c, times]() {
      const TensorT<S>& g = out_grad(o);
      accum(x, [&](TensorT<S>& d) {
        for (int64_t i = 0; i < b; ++i)
          for (int64_t t = 0; t < times; ++t) {
            const S* src = g.ptr() + (i * times + t) * c;
            S* dst = d.ptr() + i * c;
            for (int64_t e = 0; e < c; ++e) dst[e] += src[e];
          }
      });
    });
    return o;
  }

  /// x [N,C,H,W] + e [N,C] broadcast over spatial axes.
  Var add_nc(Var x, Var e) {
    const auto& xv = value(x);
    const auto& ev = value(e);
    if (xv.ndim() != 4 || ev.ndim() != 2 || xv.dim(0) != ev.dim(0) || xv.dim(1) != ev.dim(1))
      throw ShapeError("add_nc: expected x [N,C,H,W] and e [N,C], got " + xv.shape_str() +
                       " and " + ev.shape_str());
    int64_t n = xv.dim(0), c = xv.dim(1), sp = xv.dim(2) * xv.dim(3);
    TensorT<S> out = xv;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t ch = 0; ch < c; ++ch) {
        S b = ev.ptr()[i * c + ch];
        S* dst = out.ptr() + (i * c + ch) * sp;
        for (int64_t p = 0; p < sp; ++p) dst[p] += b;
      }
    Var o = push_op(std::move(out), {x, e}, "add_nc");
    attach(o, [this, x, e, o, n, c, sp]() {
      const TensorT<S>& g = out_grad(o);
      accum(x, [&](TensorT<S>& d) {
        for (size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i];
      });
      accum(e, [&](TensorT<S>& d) {
        for (int64_t i = 0; i < n; ++i)
          for (int64_t ch = 0; ch < c; ++ch) {
            const S* src = g.ptr() + (i * c + ch) * sp;
            S acc = 0;
            for (int64_t p = 0; p < sp; ++p) acc += src[p];
            d.ptr()[i * c + ch] += acc;
          }
      });
    });
    return o;
  }

  /// x [N,C,H,W] * e [N,C] broadcast over spatial axes.
  Var mul_nc(Var x, Var e) {
    const auto& xv = value(x);
    const auto& ev = value(e);
    if (xv.ndim() != 4 || ev.ndim() != 2 || xv.dim(0) != ev.dim(0) || xv.dim(1) != ev.dim(1))
      throw ShapeError("mul_nc: expected x [N,C,H,W] and e [N,C], got " + xv.shape_str() +
                       " and " + ev.shape_str());
    int64_t n = xv.dim(0), c = xv.dim(1), sp = xv.dim(2) * xv.dim(3);
    TensorT<S> out = xv;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t ch = 0; ch < c; ++ch) {
        S b = ev.ptr()[i * c + ch];
        S* dst = out.ptr() + (i * c + ch) * sp;
        for (int64_t p = 0; p < sp; ++p) dst[p] *= b;
      }
    Var o = push_op(std::move(out), {x, e}, "mul_nc");
    attach(o, [this, x, e, o, n, c, sp]() {
      const TensorT<S>& g = out_grad(o);
      const auto& xv2 = value(x);
      const auto& ev2 = value(e);
      accum(x, [&](TensorT<S>& d) {
        for (int64_t i = 0; i < n; ++i)
          for (int64_t ch = 0; ch < c; ++ch) {
            S b = ev2.ptr()[i * c + ch];
            const S* src = g.ptr() + (i * c + ch) * sp;
            S* dst = d.ptr() + (i * c + ch) * sp;
            for (int64_t p = 0; p < sp; ++p) dst[p] += src[p] * b;
          }
      });
      accum(e, [&](TensorT<S>& d) {
        for (int64_t i = 0; i < n; ++i)
          for (int64_t ch = 0; ch < c; ++ch) {
            const S* src = g.ptr() + (i * c + ch) * sp;
            const S* xs = xv2.ptr() + (i * c + ch) * sp;
            S acc = 0;
            for (int64_t p = 0; p < sp; ++p) acc += src[p] * xs[p];
            d.ptr()[i * c + ch] += acc;
          }
      });
    });
    return o;
  }

  /// x [N,C,H,W] * s [N,1,H,W] broadcast over the channel axis.
  Var mul_chan_bcast(Var x, Var s) {
    const auto& xv = value(x);
    const auto& sv = value(s);
    if (xv.ndim() != 4 || sv.ndim() != 4 || sv.dim(1) != 1 || xv.dim(0) != sv.dim(0) ||
        xv.dim(2) != sv.dim(2) || xv.dim(3) != sv.dim(3))
      throw ShapeError("mul_chan_bcast: expected x [N,C,H,W] and s [N,1,H,W], got " +
                       xv.shape_str() + " and " + sv.shape_str());
    int64_t n = xv.dim(0), c = xv.dim(1), sp = xv.dim(2) * xv.dim(3);
    TensorT<S> out = xv;
    for (int64_t i = 0; i < n; ++i) {
      const S* sc = sv.ptr() + i * sp;
      for (int64_t ch = 0; ch < c; ++ch) {
        S* dst = out.ptr() + (i * c + ch) * sp;
        for (int64_t p = 0; p < sp; ++p) dst[p] *= sc[p];
      }
    }
    Var o = push_op(std::move(out), {x, s}, "mul_chan_bcast");
    attach(o, [this, x, s, o, n, c, sp]() {
      const TensorT<S>& g = out_grad(o);
      const auto& xv2 = value(x);
      const auto& sv2 = value(s);
      accum(x, [&](TensorT<S>& d) {
        for (int64_t i = 0; i < n; ++i) {
          const S* sc = sv2.ptr() + i * sp;
          for (int64_t ch = 0; ch < c; ++ch) {
            const S* src = g.ptr() + (i * c + ch) * sp;
            S* dst = d.ptr() + (i * c + ch) * sp;
            for (int64_t p = 0; p < sp; ++p) dst[p] += src[p] * sc[p];
          }
        }
      });
      accum(s, [&](TensorT<S>& d) {
        for (int64_t i = 0; i < n; ++i) {
          S* dst = d.ptr() + i * sp;
          for (int64_t ch = 0; ch < c; ++ch) {
            const S* src = g.ptr() + (i * c + ch) * sp;
            const S* xs = xv2.ptr() + (i * c + ch) * sp;
            for (int64_t p = 0; p < sp; ++p) dst[p] += src[p] * xs[p];
          }
        }
      });
    });
    return o;
  }

  // --- backward ---------------------------------------------------------------

  void backward(Var loss) {
    const auto& lv = value(loss);
    if (lv.numel() != 1)
      throw ShapeError("backward: target must be scalar, got " + lv.shape_str());
    grads_.assign(nodes_.size(), TensorT<S>());
    accum_touch(loss);
    grads_[static_cast<size_t>(loss.id)].data[0] = S(1);
    for (int32_t i = loss.id; i >= 0; --i) {
      auto& nd = nodes_[static_cast<size_t>(i)];
      if (!nd.needs_grad || !nd.backprop) continue;
      if (grads_[static_cast<size_t>(i)].data.empty()) continue;
      nd.backprop();
      if (check_finite_ && !grads_[static_cast<size_t>(i)].all_finite())
        throw NumericError(std::string("backward: non-finite gradient flowing out of ") +
                           nd.opname);
    }
  }

 private:
  struct Node {
    TensorT<S> value;
    bool needs_grad = false;
    const char* opname = "";
    std::function<void()> backprop;
  };

  std::deque<Node> nodes_;
  std::vector<TensorT<S>> grads_;
  bool check_finite_ = true;

  const Node& node(Var v) const {
    if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
      throw ValueError("tape: invalid variable handle");
    return nodes_[static_cast<size_t>(v.id)];
  }

  Var push(TensorT<S> value, bool needs_grad, std::function<void()> fn, const char* opname) {
    if (check_finite_ && !value.all_finite())
      throw NumericError(std::string("tape: non-finite value produced by ") + opname);
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.opname = opname;
    n.backprop = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
  }

  Var push_op(TensorT<S> value, const std::vector<Var>& ins, const char* opname) {
    bool needs = false;
    for (Var v : ins) needs = needs || node(v).needs_grad;
    return push(std::move(value), needs, nullptr, opname);
  }

  void attach(Var v, std::function<void()> fn) {
    nodes_[static_cast<size_t>(v.id)].backprop = std::move(fn);
  }

  const TensorT<S>& out_grad(Var v) const { return grads_[static_cast<size_t>(v.id)]; }

  void accum_touch(Var v) {
    auto& g = grads_[static_cast<size_t>(v.id)];
    if (g.data.empty()) g = TensorT<S>::zeros(node(v).value.shape);
  }

  template <class Fn>
  void accum(Var v, Fn&& fn) {
    if (!node(v).needs_grad) return;
    accum_touch(v);
    fn(grads_[static_cast<size_t>(v.id)]);
  }

  template <class Fn>
  Var binary_ew(TensorT<S> out, Var a, Var b, const char* opname, Fn&& bw) {
    Var o = push_op(std::move(out), {a, b}, opname);
    attach(o, [this, a, b, o, bw]() { bw(*this, a, b, out_grad(o)); });
    return o;
  }

  void require_same_shape(const char* opname, Var a, Var b) const {
    const auto& av = node(a).value;
    const auto& bv = node(b).value;
    if (!av.same_shape(bv)) {
      int nd = std::max(av.ndim(), bv.ndim());
      for (int i = 0; i < nd; ++i) {
        int64_t da = i < av.ndim() ? av.dim(i) : -1;
        int64_t db = i < bv.ndim() ? bv.dim(i) : -1;
        if (da != db)
          throw ShapeError(std::string(opname) + ": axis " + std::to_string(i) + " mismatch, " +
                           av.shape_str() + " vs " + bv.shape_str());
      }
      throw ShapeError(std::string(opname) + ": shape mismatch, " + av.shape_str() + " vs " +
                       bv.shape_str());
    }
  }

  static int norm_axis(const char* opname, int axis, int ndim) {
    int ax = axis < 0 ? axis + ndim : axis;
    if (ax < 0 || ax >= ndim)
      throw ShapeError(std::string(opname) + ": axis " + std::to_string(axis) +
                       " out of range for rank " + std::to_string(ndim));
    return ax;
  }

  static std::vector<int64_t> permuted_dims(const std::vector<int64_t>& dims,
                                            const std::vector<int>& axes) {
    std::vector<int64_t> out(dims.size());
    for (size_t i = 0; i < axes.size(); ++i) out[i] = dims[static_cast<size_t>(axes[i])];
    return out;
  }

  static void permute_copy(const TensorT<S>& src, TensorT<S>& dst, const std::vector<int>& axes) {
    int nd = src.ndim();
    std::vector<int64_t> sstride(static_cast<size_t>(nd), 1);
    for (int i = nd - 2; i >= 0; --i)
      sstride[static_cast<size_t>(i)] = sstride[static_cast<size_t>(i + 1)] * src.dim(i + 1);
    std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
    int64_t n = src.numel();
    for (int64_t e = 0; e < n; ++e) {
      int64_t soff = 0;
      for (int i = 0; i < nd; ++i)
        soff += idx[static_cast<size_t>(i)] * sstride[static_cast<size_t>(axes[static_cast<size_t>(i)])];
      dst.data[static_cast<size_t>(e)] = src.data[static_cast<size_t>(soff)];
      for (int i = nd - 1; i >= 0; --i) {
        if (++idx[static_cast<size_t>(i)] < dst.dim(i)) break;
        idx[static_cast<size_t>(i)] = 0;
      }
    }
  }

  static void im2col(const S* x, S* col, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw,
                     int sh, int sw, int ph, int pw, int64_t ho, int64_t wo) {
    int64_t patches = ho * wo;
    for (int64_t c = 0; c < cin; ++c)
      for (int64_t ky = 0; ky < kh; ++ky)
        for (int64_t kx = 0; kx < kw; ++kx) {
          S* crow = col + ((c * kh + ky) * kw + kx) * patches;
          for (int64_t oy = 0; oy < ho; ++oy) {
            int64_t iy = oy * sh + ky - ph;
            if (iy < 0 || iy >= h) {
              std::fill(crow + oy * wo, crow + (oy + 1) * wo, S(0));
              continue;
            }
            const S* xrow = x + (c * h + iy) * w;
            for (int64_t ox = 0; ox < wo; ++ox) {
              int64_t ix = ox * sw + kx - pw;
              crow[oy * wo + ox] = (ix < 0 || ix >= w) ? S(0) : xrow[ix];
            }
          }
        }
  }

  static void col2im(const S* col, S* dx, int64_t cin, int64_t h, int64_t w, int64_t kh,
                     int64_t kw, int sh, int sw, int ph, int pw, int64_t ho, int64_t wo) {
    int64_t patches = ho * wo;
    for (int64_t c = 0; c < cin; ++c)
      for (int64_t ky = 0; ky < kh; ++ky)
        for (int64_t kx = 0; kx < kw; ++kx) {
          const S* crow = col + ((c * kh + ky) * kw + kx) * patches;
          for (int64_t oy = 0; oy < ho; ++oy) {
            int64_t iy = oy * sh + ky - ph;
            if (iy < 0 || iy >= h) continue;
            S* xrow = dx + (c * h + iy) * w;
            for (int64_t ox = 0; ox < wo; ++ox) {
              int64_t ix = ox * sw + kx - pw;
              if (ix >= 0 && ix < w) xrow[ix] += crow[oy * wo + ox];
            }
          }
        }
  }
};

using Tape = TapeT<float>;
using Tape64 = TapeT<double>;

/// Scaled dot-product attention, batched: q [B,Nq,D], k [B,Nk,D], v [B,Nk,Dv].
template <class S>
typename TapeT<S>::Var attention(TapeT<S>& tape, typename TapeT<S>::Var q,
                                 typename TapeT<S>::Var k, typename TapeT<S>::Var v) {
  const auto& qv = tape.value(q);
  const auto& kv = tape.value(k);
  if (qv.ndim() != 3 || kv.ndim() != 3)
    throw ShapeError("attention: expected rank-3 q and k, got " + qv.shape_str() + " and " +
                     kv.shape_str());
  if (qv.dim(2) != kv.dim(2))
    throw ShapeError("attention: key dim axis 2 mismatch, " + std::to_string(qv.dim(2)) + " vs " +
                     std::to_string(kv.dim(2)));
  auto kt = tape.permute(k, {0, 2, 1});
  auto scores = tape.scale(tape.bmm(q, kt), 1.0 / std::sqrt(static_cast<double>(qv.dim(2))));
  auto attn = tape.softmax(scores, 2);
  return tape.bmm(attn, v);
}

}  // namespace swm
