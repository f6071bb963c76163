#include "fsrn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fsrn/error.hpp"

namespace fsrn {

namespace {

void check_label(int p_t) {
  if (p_t != 0 && p_t != 1) throw DomainError("focal loss label must be 0 or 1, got " + std::to_string(p_t));
}

double clamp_prob(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("focal loss probability outside [0, 1]: " + std::to_string(p));
  return std::clamp(p, kProbClamp, 1.0 - kProbClamp);
}

// d focal / d logit, with p = sigmoid(logit) already clamped.
double focal_logit_grad(double p, int p_t, const FocalParams& fp) {
  if (p_t == 1) return fp.alpha * std::pow(1.0 - p, fp.gamma) * (fp.gamma * p * std::log(p) - (1.0 - p));
  return (1.0 - fp.alpha) * std::pow(p, fp.gamma) * (p - fp.gamma * (1.0 - p) * std::log(1.0 - p));
}

double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// Index of the class whose mean sits closest to class i's mean.
std::size_t nearest_class(const std::vector<std::vector<std::vector<double>>>& vectors, std::size_t i) {
  auto mean = [&](std::size_t c) {
    std::vector<double> m(vectors[c][0].size(), 0.0);
    for (const auto& v : vectors[c])
      for (std::size_t d = 0; d < m.size(); ++d) m[d] += v[d];
    for (double& x : m) x /= static_cast<double>(vectors[c].size());
    return m;
  };
  const auto mi = mean(i);
  double best = std::numeric_limits<double>::infinity();
  std::size_t arg = i;
  for (std::size_t j = 0; j < vectors.size(); ++j) {
    if (j == i) continue;
    const auto mj = mean(j);
    double dist = 0.0;
    for (std::size_t d = 0; d < mi.size(); ++d) dist += (mi[d] - mj[d]) * (mi[d] - mj[d]);
    if (dist < best) {
      best = dist;
      arg = j;
    }
  }
  return arg;
}

}  // namespace

double focal_loss(double p, int p_t, const FocalParams& fp) {
  check_label(p_t);
  p = clamp_prob(p);
  const double pos = fp.alpha * p_t * std::pow(1.0 - p, fp.gamma) * std::log(p);
  const double neg = (1.0 - fp.alpha) * (1 - p_t) * std::pow(p, fp.gamma) * std::log(1.0 - p);
  return -(pos + neg);
}

double focal_loss_grad(double p, int p_t, const FocalParams& fp) {
  check_label(p_t);
  p = clamp_prob(p);
  return focal_logit_grad(p, p_t, fp) / (p * (1.0 - p));
}

MaxMarginResult max_margin_loss(const std::vector<std::vector<std::vector<double>>>& vectors) {
  const std::size_t n_classes = vectors.size();
  if (n_classes < 2) throw UsageError("max-margin loss needs at least two classes");
  const std::size_t dim = vectors[0].empty() ? 0 : vectors[0][0].size();
  std::vector<std::vector<double>> means(n_classes, std::vector<double>(dim, 0.0));
  double numer = 0.0;
  for (std::size_t i = 0; i < n_classes; ++i) {
    if (vectors[i].empty()) throw UsageError("max-margin loss: class without shot vectors");
    for (const auto& v : vectors[i]) {
      if (v.size() != dim) throw ShapeError("max-margin loss: vectors differ in length");
      for (std::size_t d = 0; d < dim; ++d) means[i][d] += v[d];
    }
    for (double& m : means[i]) m /= static_cast<double>(vectors[i].size());
    double scatter = 0.0;
    for (const auto& v : vectors[i])
      for (std::size_t d = 0; d < dim; ++d) scatter += (v[d] - means[i][d]) * (v[d] - means[i][d]);
    numer += scatter / static_cast<double>(vectors[i].size());
  }
  double denom = 0.0;
  for (std::size_t i = 0; i < n_classes; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n_classes; ++j) {
      if (j == i) continue;
      double dist = 0.0;
      for (std::size_t d = 0; d < dim; ++d) dist += (means[i][d] - means[j][d]) * (means[i][d] - means[j][d]);
      best = std::min(best, dist);
    }
    denom += best;
  }
  return {numer / (denom + kMarginEpsilon), denom == 0.0};
}

std::vector<std::vector<std::vector<double>>> max_margin_grad(
    const std::vector<std::vector<std::vector<double>>>& vectors) {
  const std::size_t n_classes = vectors.size();
  if (n_classes < 2) throw UsageError("max-margin loss needs at least two classes");
  const std::size_t dim = vectors[0][0].size();
  std::vector<std::vector<double>> means(n_classes, std::vector<double>(dim, 0.0));
  for (std::size_t i = 0; i < n_classes; ++i) {
    for (const auto& v : vectors[i])
      for (std::size_t d = 0; d < dim; ++d) means[i][d] += v[d];
    for (double& m : means[i]) m /= static_cast<double>(vectors[i].size());
  }
  double numer = 0.0;
  for (std::size_t i = 0; i < n_classes; ++i) {
    double scatter = 0.0;
    for (const auto& v : vectors[i])
      for (std::size_t d = 0; d < dim; ++d) scatter += (v[d] - means[i][d]) * (v[d] - means[i][d]);
    numer += scatter / static_cast<double>(vectors[i].size());
  }
  // d denom / d mean_i, accumulated through each class's nearest neighbour.
  std::vector<std::vector<double>> dmean(n_classes, std::vector<double>(dim, 0.0));
  double denom = 0.0;
  for (std::size_t i = 0; i < n_classes; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = i;
    for (std::size_t j = 0; j < n_classes; ++j) {
      if (j == i) continue;
      double dist = 0.0;
      for (std::size_t d = 0; d < dim; ++d) dist += (means[i][d] - means[j][d]) * (means[i][d] - means[j][d]);
      if (dist < best) {
        best = dist;
        arg = j;
      }
    }
    denom += best;
    for (std::size_t d = 0; d < dim; ++d) {
      const double diff = 2.0 * (means[i][d] - means[arg][d]);
      dmean[i][d] += diff;
      dmean[arg][d] -= diff;
    }
  }
  const double b = denom + kMarginEpsilon;
  auto grads = vectors;
  for (std::size_t i = 0; i < n_classes; ++i) {
    const double k = static_cast<double>(vectors[i].size());
    for (std::size_t s = 0; s < vectors[i].size(); ++s) {
      for (std::size_t d = 0; d < dim; ++d) {
        const double dnum = 2.0 / k * (vectors[i][s][d] - means[i][d]);
        const double dden = dmean[i][d] / k;
        grads[i][s][d] = (dnum * b - numer * dden) / (b * b);
      }
    }
  }
  return grads;
}

double smooth_l1(double x, double beta) {
  const double a = std::abs(x);
  return a < beta ? 0.5 * x * x / beta : a - 0.5 * beta;
}

double smooth_l1_grad(double x, double beta) {
  if (std::abs(x) < beta) return x / beta;
  return x > 0.0 ? 1.0 : -1.0;
}

SmoothL1Result smooth_l1_loss(std::span<const Deltas> pred, std::span<const Deltas> target) {
  if (pred.size() != target.size()) throw ShapeError("smooth_l1_loss: prediction/target count mismatch");
  if (pred.empty()) return {0.0, true};
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (int j = 0; j < 4; ++j) s += smooth_l1(pred[i][j] - target[i][j]);
  return {s / static_cast<double>(pred.size()), false};
}

LossBreakdown total_loss(double focal, double loc, double max_margin, double lambda) {
  const std::pair<const char*, double> parts[] = {
      {"focal", focal}, {"loc", loc}, {"max_margin", max_margin}, {"lambda", lambda}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) throw TrainingError(std::string("non-finite loss component: ") + name);
  }
  return {focal, loc, max_margin, lambda, focal + loc + lambda * max_margin};
}

namespace ops {

Var sigmoid_focal_sum(Graph& g, Var logits, std::span<const std::int8_t> labels, const FocalParams& params) {
  const Tensor& x = g.value(logits);
  if (labels.size() != x.size()) throw ShapeError("sigmoid_focal_sum: label count does not match logits");
  double sum = 0.0;
  auto grad = std::make_shared<std::vector<double>>(x.size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (labels[i] < 0) continue;
    const double raw = sigmoid(x[i]);
    const double p = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
    if (p != raw) g.note_branches(i);
    sum += focal_loss(p, labels[i], params);
    (*grad)[i] = focal_logit_grad(p, labels[i], params);
  }
  return g.emplace(Tensor::scalar(sum), {logits}, [logits, grad](Graph& gr, Var self) {
    const double gy = gr.grad(self).item();
    Tensor* gx = gr.grad_buffer(logits);
    for (std::size_t i = 0; i < grad->size(); ++i) (*gx)[i] += gy * (*grad)[i];
  });
}

Var smooth_l1_sum(Graph& g, Var pred, std::span<const std::size_t> indices, std::span<const double> targets,
                  double beta) {
  if (indices.size() != targets.size()) throw ShapeError("smooth_l1_sum: index/target count mismatch");
  const Tensor& x = g.value(pred);
  double sum = 0.0;
  std::vector<std::pair<std::size_t, double>> grads;
  grads.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const double d = x[indices[i]] - targets[i];
    if (std::abs(d) < beta) g.note_branches(indices[i]);
    sum += smooth_l1(d, beta);
    grads.emplace_back(indices[i], smooth_l1_grad(d, beta));
  }
  return g.emplace(Tensor::scalar(sum), {pred}, [pred, grads = std::move(grads)](Graph& gr, Var self) {
    const double gy = gr.grad(self).item();
    Tensor* gx = gr.grad_buffer(pred);
    for (const auto& [idx, gv] : grads) (*gx)[idx] += gy * gv;
  });
}

Var max_margin(Graph& g, Var shots, const std::vector<int>& class_of_row) {
  const Tensor& x = g.value(shots);
  const Shape s = x.shape();
  if (static_cast<std::size_t>(s.n) != class_of_row.size()) throw ShapeError("max_margin: row/class mismatch");
  const int n_classes = *std::max_element(class_of_row.begin(), class_of_row.end()) + 1;
  const std::size_t dim = s.sample_size();
  std::vector<std::vector<std::vector<double>>> grouped(n_classes);
  std::vector<std::pair<int, int>> slot(s.n);
  for (int r = 0; r < s.n; ++r) {
    const int c = class_of_row[r];
    slot[r] = {c, static_cast<int>(grouped[c].size())};
    grouped[c].emplace_back(x.data() + dim * r, x.data() + dim * (r + 1));
  }
  const MaxMarginResult res = max_margin_loss(grouped);
  for (std::size_t i = 0; i < grouped.size(); ++i) g.note_branches(nearest_class(grouped, i));
  return g.emplace(Tensor::scalar(res.value), {shots}, [shots, grouped, slot, dim](Graph& gr, Var self) {
    const double gy = gr.grad(self).item();
    const auto grads = max_margin_grad(grouped);
    Tensor* gx = gr.grad_buffer(shots);
    for (std::size_t r = 0; r < slot.size(); ++r) {
      const auto& gv = grads[slot[r].first][slot[r].second];
      for (std::size_t d = 0; d < dim; ++d) (*gx)[r * dim + d] += gy * gv[d];
    }
  });
}

}  // namespace ops
}  // namespace fsrn
