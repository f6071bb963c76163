#include "fsrn/adaptation.hpp"

#include <cmath>

#include "fsrn/error.hpp"

namespace fsrn {

void MsdaConfig::validate() const {
  if (!(log_range > 0.0)) throw ConfigError("msda.log_range must be positive");
  if (!(alpha_train > 0.0 && alpha_train < 1.0)) throw ConfigError("focal alpha must lie in (0, 1)");
}

ScaledImage scale_image(const Image& img, const std::vector<Box>& boxes, double log2_scale) {
  const double s = std::exp2(log2_scale);
  const int w = std::max(1, static_cast<int>(std::lround(img.width * s)));
  const int h = std::max(1, static_cast<int>(std::lround(img.height * s)));
  ScaledImage out;
  out.log2_scale = log2_scale;
  out.scale_x = static_cast<double>(w) / img.width;
  out.scale_y = static_cast<double>(h) / img.height;
  out.image = (w == img.width && h == img.height) ? img : resize(img, w, h);
  out.boxes.reserve(boxes.size());
  for (const Box& b : boxes) {
    out.boxes.push_back(Box{b.x * out.scale_x, b.y * out.scale_y, b.w * out.scale_x, b.h * out.scale_y});
  }
  return out;
}

ScaledImage msda_scale(const Image& img, const std::vector<Box>& boxes, const MsdaConfig& cfg, std::mt19937_64& rng,
                       int min_size) {
  cfg.validate();
  if (img.empty()) throw UsageError("msda_scale: empty image");
  const double top = std::exp2(cfg.log_range);
  if (img.width * top < min_size || img.height * top < min_size) {
    throw UsageError("msda_scale: image cannot reach the minimum input size");
  }
  std::uniform_real_distribution<double> u(-cfg.log_range, cfg.log_range);
  for (;;) {
    const double e = u(rng);
    const double s = std::exp2(e);
    if (std::lround(img.width * s) >= min_size && std::lround(img.height * s) >= min_size) {
      return scale_image(img, boxes, e);
    }
  }
}

double metatest_alpha(double alpha_train) {
  if (!(alpha_train > 0.0 && alpha_train < 1.0)) {
    throw DomainError("metatest_alpha expects alpha in (0, 1), got " + std::to_string(alpha_train));
  }
  return (alpha_train + 1.0) / 2.0;
}

GaussianPrototypeStats prototype_stats(const std::vector<std::vector<double>>& shots) {
  if (shots.empty()) throw UsageError("Gaussian prototype needs at least one shot");
  const std::size_t dim = shots[0].size();
  GaussianPrototypeStats st;
  st.mean.assign(dim, 0.0);
  for (const auto& v : shots) {
    if (v.size() != dim) throw ShapeError("shot vectors differ in length");
    for (std::size_t d = 0; d < dim; ++d) st.mean[d] += v[d];
  }
  // Same arithmetic as ops::mean so a zero deviation reproduces it bitwise.
  const double inv = 1.0 / static_cast<double>(shots.size());
  for (double& m : st.mean) m *= inv;
  st.std.assign(dim, 0.0);
  if (shots.size() > 1) {
    for (std::size_t d = 0; d < dim; ++d) {
      // Identical shots must give exactly zero, whatever the mean rounded to.
      bool spread = false;
      for (const auto& v : shots) spread = spread || v[d] != shots[0][d];
      if (!spread) continue;
      double acc = 0.0;
      for (const auto& v : shots) acc += (v[d] - st.mean[d]) * (v[d] - st.mean[d]);
      st.std[d] = std::sqrt(acc * inv);
    }
  }
  return st;
}

std::vector<double> gaussian_prototype(const GaussianPrototypeStats& stats, std::mt19937_64& rng) {
  if (stats.mean.size() != stats.std.size()) throw ShapeError("Gaussian prototype: mean/std length mismatch");
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> z(stats.mean.size());
  for (std::size_t d = 0; d < z.size(); ++d) {
    const double n = nd(rng);
    z[d] = stats.std[d] > 0.0 ? stats.mean[d] + stats.std[d] * n : stats.mean[d];
  }
  return z;
}

std::vector<double> gaussian_prototype(const std::vector<std::vector<double>>& shots, std::mt19937_64& rng) {
  return gaussian_prototype(prototype_stats(shots), rng);
}

namespace ops {

Var gaussian_perturb(Graph& g, Var prototype, const std::vector<Var>& shots, std::mt19937_64& rng) {
  std::vector<std::vector<double>> vecs;
  vecs.reserve(shots.size());
  for (Var s : shots) vecs.push_back(g.value(s).values());
  const GaussianPrototypeStats st = prototype_stats(vecs);
  const Tensor& proto = g.value(prototype);
  if (proto.size() != st.mean.size()) throw ShapeError("gaussian_perturb: prototype/shot length mismatch");
  const std::vector<double> z = gaussian_prototype(st, rng);
  Tensor offset(proto.shape());
  bool any = false;
  for (std::size_t d = 0; d < z.size(); ++d) {
    offset[d] = z[d] - st.mean[d];
    any = any || st.std[d] > 0.0;
  }
  return any ? add_constant(g, prototype, offset) : prototype;
}

}  // namespace ops
}  // namespace fsrn
