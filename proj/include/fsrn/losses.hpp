#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fsrn/anchors.hpp"
#include "fsrn/autograd.hpp"

namespace fsrn {

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

/// Probabilities are clamped to [kProbClamp, 1 - kProbClamp] before logs.
inline constexpr double kProbClamp = 1e-7;
/// Added to the max-margin denominator.
inline constexpr double kMarginEpsilon = 1e-8;

/// Two-term focal loss of one prediction p against label p_t in {0, 1}.
double focal_loss(double p, int p_t, const FocalParams& params);
/// d focal_loss / d p.
double focal_loss_grad(double p, int p_t, const FocalParams& params);

struct MaxMarginResult {
  double value = 0.0;
  bool degenerate = false;  // every class mean coincided
};

/// Intra-class scatter over the summed nearest-other-class mean distances.
/// `vectors[i]` holds the K_i shot vectors of class i.
MaxMarginResult max_margin_loss(const std::vector<std::vector<std::vector<double>>>& vectors);
/// Gradient with the same nesting as the input.
std::vector<std::vector<std::vector<double>>> max_margin_grad(
    const std::vector<std::vector<std::vector<double>>>& vectors);

/// 0.5 x^2 for |x| < beta (divided by beta), |x| - 0.5 beta otherwise.
double smooth_l1(double x, double beta = 1.0);
double smooth_l1_grad(double x, double beta = 1.0);

struct SmoothL1Result {
  double value = 0.0;
  bool no_foreground = false;
};
/// Mean over foreground anchors of the summed per-coordinate smooth-L1.
SmoothL1Result smooth_l1_loss(std::span<const Deltas> pred, std::span<const Deltas> target);

struct LossBreakdown {
  double focal = 0.0;
  double loc = 0.0;
  double max_margin = 0.0;
  double lambda = 0.0;
  double total = 0.0;
};

/// focal + loc + lambda * max_margin; throws TrainingError naming the first
/// non-finite component.
LossBreakdown total_loss(double focal, double loc, double max_margin, double lambda);

namespace ops {

/// Sum of focal losses of sigmoid(logits) against per-element labels
/// (1 foreground, 0 background, -1 ignored).
Var sigmoid_focal_sum(Graph& g, Var logits, std::span<const std::int8_t> labels, const FocalParams& params);

/// Sum of smooth-L1 over the listed elements of `pred`.
Var smooth_l1_sum(Graph& g, Var pred, std::span<const std::size_t> indices, std::span<const double> targets,
                  double beta = 1.0);

/// Max-margin loss over the rows of `shots` (M, C, 1, 1); `class_of_row`
/// assigns each row to a class index in [0, n_classes).
Var max_margin(Graph& g, Var shots, const std::vector<int>& class_of_row);

}  // namespace ops
}  // namespace fsrn
