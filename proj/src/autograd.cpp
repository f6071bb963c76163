#include "fsrn/autograd.hpp"

#include <Eigen/Core>
#include <memory>

#include "fsrn/error.hpp"

namespace fsrn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

Graph::Var Graph::constant(Tensor t) {
  nodes_.push_back(Node{std::move(t), {}, {}, nullptr, false});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Graph::Var Graph::variable(Tensor t) {
  nodes_.push_back(Node{std::move(t), {}, {}, nullptr, true});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Graph::Var Graph::leaf(Parameter& p) {
  nodes_.push_back(Node{p.value, {}, {}, &p, true});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tensor* Graph::grad_buffer(Var v) {
  Node& n = nodes_[v.id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
  return &n.grad;
}

Graph::Var Graph::emplace(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  bool rg = false;
  for (Var in : inputs) rg = rg || nodes_[in.id].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, rg ? std::move(fn) : BackwardFn{}, nullptr, rg});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Graph::Var Graph::emplace(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
  bool rg = false;
  for (Var in : inputs) rg = rg || nodes_[in.id].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, rg ? std::move(fn) : BackwardFn{}, nullptr, rg});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Graph::backward(Var root) {
  if (nodes_[root.id].value.size() != 1) throw ShapeError("backward() root must be a scalar");
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[root.id].requires_grad) return;
  grad_buffer(root)->fill(1.0);
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.fn) n.fn(*this, Var{i});
    if (n.param != nullptr) nodes_[i].param->grad.add_(nodes_[i].grad);
  }
}

namespace ops {

namespace {

// Unfolds (Cin,H,W) sample `n` into columns [col_offset, col_offset+Ho*Wo)
// of a (Cin*k*k, total_cols) row-major matrix.
void im2col(const double* x, int cin, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* col, std::size_t total_cols, std::size_t col_offset) {
  for (int c = 0; c < cin; ++c) {
    const double* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = col + (static_cast<std::size_t>((c * k + ky) * k + kx)) * total_cols + col_offset;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          double* out = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < wo; ++ox) out[ox] = 0.0;
            continue;
          }
          const double* xrow = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            out[ox] = (ix >= 0 && ix < w) ? xrow[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* col, int cin, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* dx, std::size_t total_cols, std::size_t col_offset) {
  for (int c = 0; c < cin; ++c) {
    double* dxc = dx + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row =
            col + (static_cast<std::size_t>((c * k + ky) * k + kx)) * total_cols + col_offset;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const double* in = row + static_cast<std::size_t>(oy) * wo;
          double* dxrow = dxc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dxrow[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Graph& g, Var x, Var weight, Var bias, int stride, int pad) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(weight);
  const Shape xs = xv.shape();
  const Shape ws = wv.shape();
  if (ws.c != xs.c || ws.h != ws.w) {
    throw ShapeError("conv2d: input " + xs.str() + " incompatible with weight " + ws.str());
  }
  if (g.value(bias).size() != static_cast<std::size_t>(ws.n)) {
    throw ShapeError("conv2d: bias size mismatch");
  }
  const int k = ws.h;
  const int ho = (xs.h + 2 * pad - k) / stride + 1;
  const int wo = (xs.w + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: input " + xs.str() + " too small");
  const int cout = ws.n;
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  const std::size_t cols = plane * xs.n;
  const int kdim = xs.c * k * k;

  auto col = std::make_shared<RowMat>(kdim, static_cast<Eigen::Index>(cols));
  for (int n = 0; n < xs.n; ++n) {
    im2col(xv.data() + xs.sample_size() * n, xs.c, xs.h, xs.w, k, stride, pad, ho, wo, col->data(),
           cols, plane * n);
  }
  ConstMatMap wm(wv.data(), cout, kdim);
  RowMat out = wm * (*col);
  const Tensor& bv = g.value(bias);

  Tensor y(Shape{xs.n, cout, ho, wo});
  for (int n = 0; n < xs.n; ++n) {
    for (int co = 0; co < cout; ++co) {
      const double* src = out.data() + static_cast<std::size_t>(co) * cols + plane * n;
      double* dst = y.data() + (static_cast<std::size_t>(n) * cout + co) * plane;
      const double b = bv[co];
      for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] + b;
    }
  }

  return g.emplace(std::move(y), {x, weight, bias},
                   [x, weight, bias, col, stride, pad, k, ho, wo, cout, plane, cols, kdim](Graph& gr,
                                                                                        Var self) {
                     const Tensor& gy = gr.grad(self);
                     const Shape xs2 = gr.value(x).shape();
                     RowMat gm(cout, static_cast<Eigen::Index>(cols));
                     for (int n = 0; n < xs2.n; ++n) {
                       for (int co = 0; co < cout; ++co) {
                         const double* src = gy.data() + (static_cast<std::size_t>(n) * cout + co) * plane;
                         double* dst = gm.data() + static_cast<std::size_t>(co) * cols + plane * n;
                         for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i];
                       }
                     }
                     if (Tensor* gw = gr.grad_buffer(weight)) {
                       MatMap gwm(gw->data(), cout, kdim);
                       gwm.noalias() += gm * col->transpose();
                     }
                     if (Tensor* gb = gr.grad_buffer(bias)) {
                       for (int co = 0; co < cout; ++co) (*gb)[co] += gm.row(co).sum();
                     }
                     if (Tensor* gx = gr.grad_buffer(x)) {
                       ConstMatMap wm2(gr.value(weight).data(), cout, kdim);
                       RowMat gcol = wm2.transpose() * gm;
                       for (int n = 0; n < xs2.n; ++n) {
                         col2im(gcol.data(), xs2.c, xs2.h, xs2.w, k, stride, pad, ho, wo,
                                gx->data() + xs2.sample_size() * n, cols, plane * n);
                       }
                     }
                   });
}

Var relu(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  Tensor y(xv.shape());
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool on = xv[i] > 0.0;
    y[i] = on ? xv[i] : 0.0;
    word = (word << 1) | static_cast<std::uint64_t>(on);
    if (i % 64 == 63) {
      g.note_branches(word);
      word = 0;
    }
  }
  g.note_branches(word);
  return g.emplace(std::move(y), {x}, [x](Graph& gr, Var self) {
    Tensor* gx = gr.grad_buffer(x);
    const Tensor& gy = gr.grad(self);
    const Tensor& xv2 = gr.value(x);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      if (xv2[i] > 0.0) (*gx)[i] += gy[i];
    }
  });
}

Var add(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (av.shape() != bv.shape()) {
    throw ShapeError("add: " + av.shape().str() + " vs " + bv.shape().str());
  }
  Tensor y = av;
  y.add_(bv);
  return g.emplace(std::move(y), {a, b}, [a, b](Graph& gr, Var self) {
    const Tensor& gy = gr.grad(self);
    if (Tensor* ga = gr.grad_buffer(a)) ga->add_(gy);
    if (Tensor* gb = gr.grad_buffer(b)) gb->add_(gy);
  });
}

Var upsample2x(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  const Shape s = xv.shape();
  Tensor y(Shape{s.n, s.c, s.h * 2, s.w * 2});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int yy = 0; yy < s.h * 2; ++yy)
        for (int xx = 0; xx < s.w * 2; ++xx) y.at(n, c, yy, xx) = xv.at(n, c, yy / 2, xx / 2);
  return g.emplace(std::move(y), {x}, [x](Graph& gr, Var self) {
    Tensor* gx = gr.grad_buffer(x);
    const Tensor& gy = gr.grad(self);
    const Shape s2 = gx->shape();
    for (int n = 0; n < s2.n; ++n)
      for (int c = 0; c < s2.c; ++c)
        for (int yy = 0; yy < s2.h * 2; ++yy)
          for (int xx = 0; xx < s2.w * 2; ++xx) gx->at(n, c, yy / 2, xx / 2) += gy.at(n, c, yy, xx);
  });
}

Var channel_scale(Graph& g, Var x, Var s) {
  const Tensor& xv = g.value(x);
  const Tensor& sv = g.value(s);
  const Shape xs = xv.shape();
  const Shape ss = sv.shape();
  if (ss.c != xs.c || ss.h != 1 || ss.w != 1) {
    throw ShapeError("channel_scale: scale " + ss.str() + " does not match features " + xs.str());
  }
  if (!(xs.n == ss.n || xs.n == 1 || ss.n == 1)) {
    throw ShapeError("channel_scale: batch sizes " + std::to_string(xs.n) + " and " +
                     std::to_string(ss.n) + " do not broadcast");
  }
  const int n_out = std::max(xs.n, ss.n);
  Tensor y(Shape{n_out, xs.c, xs.h, xs.w});
  const std::size_t plane = xs.plane();
  for (int n = 0; n < n_out; ++n) {
    const int nx = xs.n == 1 ? 0 : n;
    const int ns = ss.n == 1 ? 0 : n;
    for (int c = 0; c < xs.c; ++c) {
      const double f = sv[static_cast<std::size_t>(ns) * ss.c + c];
      const double* src = xv.data() + (static_cast<std::size_t>(nx) * xs.c + c) * plane;
      double* dst = y.data() + (static_cast<std::size_t>(n) * xs.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] * f;
    }
  }
  return g.emplace(std::move(y), {x, s}, [x, s, n_out, plane](Graph& gr, Var self) {
    const Tensor& gy = gr.grad(self);
    const Tensor& xv2 = gr.value(x);
    const Tensor& sv2 = gr.value(s);
    const Shape xs2 = xv2.shape();
    const Shape ss2 = sv2.shape();
    Tensor* gx = gr.grad_buffer(x);
    Tensor* gs = gr.grad_buffer(s);
    for (int n = 0; n < n_out; ++n) {
      const int nx = xs2.n == 1 ? 0 : n;
      const int ns = ss2.n == 1 ? 0 : n;
      for (int c = 0; c < xs2.c; ++c) {
        const std::size_t si = static_cast<std::size_t>(ns) * ss2.c + c;
        const double f = sv2[si];
        const double* gyp = gy.data() + (static_cast<std::size_t>(n) * xs2.c + c) * plane;
        const std::size_t xo = (static_cast<std::size_t>(nx) * xs2.c + c) * plane;
        if (gx != nullptr) {
          double* gxp = gx->data() + xo;
          for (std::size_t i = 0; i < plane; ++i) gxp[i] += gyp[i] * f;
        }
        if (gs != nullptr) {
          const double* xp = xv2.data() + xo;
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += gyp[i] * xp[i];
          (*gs)[si] += acc;
        }
      }
    }
  });
}

Var global_avg_pool(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  const Shape s = xv.shape();
  const std::size_t plane = s.plane();
  Tensor y(Shape{s.n, s.c, 1, 1});
  for (int i = 0; i < s.n * s.c; ++i) {
    const double* p = xv.data() + static_cast<std::size_t>(i) * plane;
    double acc = 0.0;
    for (std::size_t j = 0; j < plane; ++j) acc += p[j];
    y[i] = acc / static_cast<double>(plane);
  }
  return g.emplace(std::move(y), {x}, [x, plane](Graph& gr, Var self) {
    Tensor* gx = gr.grad_buffer(x);
    const Tensor& gy = gr.grad(self);
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      double* p = gx->data() + i * plane;
      const double v = gy[i] * inv;
      for (std::size_t j = 0; j < plane; ++j) p[j] += v;
    }
  });
}

Var take(Graph& g, Var x, int i) {
  Tensor y = g.value(x).sample(i);
  return g.emplace(std::move(y), {x}, [x, i](Graph& gr, Var self) {
    Tensor* gx = gr.grad_buffer(x);
    const Tensor& gy = gr.grad(self);
    double* dst = gx->data() + gy.size() * static_cast<std::size_t>(i);
    for (std::size_t j = 0; j < gy.size(); ++j) dst[j] += gy[j];
  });
}

Var concat(Graph& g, const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const Shape s0 = g.value(xs[0]).shape();
  std::vector<double> data;
  data.reserve(s0.sample_size() * xs.size());
  for (Var v : xs) {
    const Tensor& t = g.value(v);
    if (t.shape() != s0 || s0.n != 1) throw ShapeError("concat: mismatched shapes");
    data.insert(data.end(), t.values().begin(), t.values().end());
  }
  Tensor y(Shape{static_cast<int>(xs.size()), s0.c, s0.h, s0.w}, std::move(data));
  return g.emplace(std::move(y), xs, [xs](Graph& gr, Var self) {
    const Tensor& gy = gr.grad(self);
    const std::size_t stride = gy.shape().sample_size();
    for (std::size_t k = 0; k < xs.size(); ++k) {
      if (Tensor* gx = gr.grad_buffer(xs[k])) {
        for (std::size_t j = 0; j < stride; ++j) (*gx)[j] += gy[k * stride + j];
      }
    }
  });
}

Var mean(Graph& g, const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("mean of zero tensors");
  Tensor y(g.value(xs[0]).shape());
  for (Var v : xs) {
    if (g.value(v).shape() != y.shape()) throw ShapeError("mean: mismatched shapes");
    y.add_(g.value(v));
  }
  const double inv = 1.0 / static_cast<double>(xs.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= inv;
  return g.emplace(std::move(y), xs, [xs, inv](Graph& gr, Var self) {
    const Tensor& gy = gr.grad(self);
    for (Var v : xs) {
      if (Tensor* gx = gr.grad_buffer(v)) {
        for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i] * inv;
      }
    }
  });
}

Var add_constant(Graph& g, Var x, const Tensor& c) {
  Tensor y = g.value(x);
  y.add_(c);
  return g.emplace(std::move(y), {x}, [x](Graph& gr, Var self) {
    if (Tensor* gx = gr.grad_buffer(x)) gx->add_(gr.grad(self));
  });
}

Var weighted_sum(Graph& g, const std::vector<Var>& scalars, const std::vector<double>& weights) {
  if (scalars.size() != weights.size()) throw ShapeError("weighted_sum: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) acc += weights[i] * g.value(scalars[i]).item();
  return g.emplace(Tensor::scalar(acc), scalars, [scalars, weights](Graph& gr, Var self) {
    const double gy = gr.grad(self).item();
    for (std::size_t i = 0; i < scalars.size(); ++i) {
      if (Tensor* gx = gr.grad_buffer(scalars[i])) (*gx)[0] += gy * weights[i];
    }
  });
}

}  // namespace ops
}  // namespace fsrn
