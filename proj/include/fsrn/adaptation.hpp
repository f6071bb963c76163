#pragma once

#include <random>
#include <vector>

#include "fsrn/autograd.hpp"
#include "fsrn/image.hpp"

namespace fsrn {

struct MsdaConfig {
  /// Scales are 2^u with u uniform in [-log_range, log_range].
  double log_range = 1.0;
  double alpha_train = 0.25;

  void validate() const;
};

struct ScaledImage {
  Image image;
  std::vector<Box> boxes;
  double log2_scale = 0.0;  // the drawn exponent u
  double scale_x = 1.0;     // realised factors after rounding to whole pixels
  double scale_y = 1.0;
};

/// Rescales by s = 2^u, u ~ U(-r, r). Draws again whenever the result would
/// be smaller than `min_size` on either side.
ScaledImage msda_scale(const Image& img, const std::vector<Box>& boxes, const MsdaConfig& cfg, std::mt19937_64& rng,
                       int min_size = 32);
/// Deterministic variant for a given exponent.
ScaledImage scale_image(const Image& img, const std::vector<Box>& boxes, double log2_scale);

/// Focal alpha used while adapting at meta-test: (alpha + 1) / 2.
double metatest_alpha(double alpha_train);

struct GaussianPrototypeStats {
  std::vector<double> mean;
  std::vector<double> std;  // population deviation; 0 for a single shot
};

GaussianPrototypeStats prototype_stats(const std::vector<std::vector<double>>& shots);

/// One draw z ~ N(mean, std^2), independent per channel. Channels with zero
/// deviation return the mean unchanged.
std::vector<double> gaussian_prototype(const GaussianPrototypeStats& stats, std::mt19937_64& rng);
std::vector<double> gaussian_prototype(const std::vector<std::vector<double>>& shots, std::mt19937_64& rng);

namespace ops {
/// Gaussian prototype inside a graph: `prototype` (the shot mean) plus a
/// sampled offset std * n. Gradients pass to the mean unchanged.
Var gaussian_perturb(Graph& g, Var prototype, const std::vector<Var>& shots, std::mt19937_64& rng);
}  // namespace ops

}  // namespace fsrn
