#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "fsrn/autograd.hpp"
#include "fsrn/network.hpp"

namespace fsrn::testing {

inline Tensor random_tensor(Shape s, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Tensor t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = nd(rng);
  return t;
}

/// sum_i w_i * x_i with fixed weights; reduces any tensor to a scalar.
inline Graph::Var dot(Graph& g, Graph::Var x, const Tensor& w) {
  const Tensor& xv = g.value(x);
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i] * w[i];
  return g.emplace(Tensor::scalar(acc), {x}, [x, w](Graph& gr, Graph::Var self) {
    const double gy = gr.grad(self).item();
    if (Tensor* gx = gr.grad_buffer(x))
      for (std::size_t i = 0; i < w.size(); ++i) (*gx)[i] += gy * w[i];
  });
}

/// Largest relative error between analytic and central-difference gradients
/// of f over every entry of every input. `f` builds the scalar from the
/// given input variables.
inline double gradient_check(std::vector<Tensor> inputs,
                             const std::function<Graph::Var(Graph&, const std::vector<Graph::Var>&)>& f,
                             double step = 1e-3, double floor = 1e-6) {
  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Graph::Var> vars;
    for (const auto& t : inputs) vars.push_back(g.variable(t));
    g.backward(f(g, vars));
    for (std::size_t i = 0; i < vars.size(); ++i) {
      Tensor gr = g.grad(vars[i]);
      if (gr.shape() != inputs[i].shape()) gr = Tensor(inputs[i].shape());
      analytic.push_back(gr);
    }
  }
  auto eval = [&](const std::vector<Tensor>& in) {
    Graph g;
    std::vector<Graph::Var> vars;
    for (const auto& t : in) vars.push_back(g.constant(t));
    return g.value(f(g, vars)).item();
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double orig = inputs[i][j];
      inputs[i][j] = orig + step;
      const double up = eval(inputs);
      inputs[i][j] = orig - step;
      const double down = eval(inputs);
      inputs[i][j] = orig;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic[i][j];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

/// A detector small enough for finite differences.
inline NetworkConfig tiny_network(int post_fusion_layers = 2) {
  NetworkConfig cfg;
  cfg.backbone.channels = {2, 3, 3, 4};
  cfg.backbone.fpn_channels = 3;
  cfg.subnet.n_conv_layers = 2;
  cfg.subnet.n_channels = 3;
  cfg.subnet.n_anchors_per_pixel = 3;
  cfg.subnet.post_fusion_layers = post_fusion_layers;
  cfg.init_seed = 11;
  return cfg;
}

}  // namespace fsrn::testing
