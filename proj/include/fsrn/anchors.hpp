#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "fsrn/image.hpp"

namespace fsrn {

/// Spatial extent of one pyramid level.
struct LevelShape {
  int stride = 8;
  int height = 0;
  int width = 0;
};

/// Level shapes for an input of the given size; throws ShapeError when the
/// size is not divisible by the largest stride.
std::vector<LevelShape> pyramid_level_shapes(int image_height, int image_width, const std::vector<int>& strides);

struct AnchorLevel {
  LevelShape shape;
  /// Ordered (anchor type, y, x) so that index a*H*W + y*W + x lines up with
  /// channel a of a dense (A, H, W) prediction map.
  std::vector<Box> anchors;
};

struct AnchorSet {
  int per_pixel = 15;
  std::vector<AnchorLevel> levels;

  [[nodiscard]] std::size_t size() const;
  /// Offset of the first anchor of `level` in the flattened index space.
  [[nodiscard]] std::size_t offset(std::size_t level) const;
  [[nodiscard]] const Box& at(std::size_t flat_index) const;
  /// Largest anchor side divided by the level stride, over all levels.
  [[nodiscard]] double max_extent_cells() const;
};

/// Anchor side length at scale 1 is `size_factor * stride`.
inline constexpr double kAnchorSizeFactor = 4.0;

/// Scales and aspect ratios for `per_pixel` anchors: three ratios
/// (1:2, 1:1, 2:1) times per_pixel/3 octave-subdividing scales. 9 gives the
/// classic 3x3 pattern, 15 gives 5 scales x 3 ratios.
struct AnchorPattern {
  std::vector<double> scales;
  std::vector<double> ratios;  // h / w
};
AnchorPattern anchor_pattern(int per_pixel);

AnchorSet generate_anchors(const std::vector<LevelShape>& levels, int per_pixel);

/// Pyramid level an object of side sqrt(w*h) is routed to: the level whose
/// scale-1 anchor is the largest not exceeding the object, clamped.
int level_for_size(double object_size, const std::vector<int>& strides);

double iou(const Box& a, const Box& b);

struct MatchConfig {
  double fg_threshold = 0.5;
  double bg_threshold = 0.4;
};

enum class AnchorLabel : std::int8_t { ignore = -1, background = 0, foreground = 1 };

using Deltas = std::array<double, 4>;

struct MatchResult {
  int class_id = 0;
  std::vector<AnchorLabel> labels;
  std::vector<int> matched_gt;  // -1 when unmatched
  std::vector<Deltas> targets;  // meaningful for foreground anchors
  [[nodiscard]] std::size_t foreground_count() const;
};

/// Assigns anchors to the boxes of one class. Every gt keeps its best anchor
/// as foreground even below the foreground threshold.
MatchResult match_anchors(const AnchorSet& anchors, const std::vector<Box>& gts, int class_id = 0,
                          const MatchConfig& cfg = {});

/// (dx, dy, log dw, log dh) relative to the anchor.
Deltas encode_box(const Box& anchor, const Box& gt);
Box decode_box(const Box& anchor, const Deltas& d);

}  // namespace fsrn
