#include "fsrn/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "fsrn/error.hpp"

namespace fsrn {

std::vector<LevelShape> pyramid_level_shapes(int image_height, int image_width, const std::vector<int>& strides) {
  if (strides.empty()) throw ShapeError("no pyramid strides configured");
  const int largest = *std::max_element(strides.begin(), strides.end());
  if (image_height <= 0 || image_width <= 0 || image_height % largest != 0 || image_width % largest != 0) {
    throw ShapeError("input " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                     " is not divisible by the largest stride " + std::to_string(largest));
  }
  std::vector<LevelShape> out;
  for (int s : strides) out.push_back(LevelShape{s, image_height / s, image_width / s});
  return out;
}

std::size_t AnchorSet::size() const {
  std::size_t n = 0;
  for (const auto& l : levels) n += l.anchors.size();
  return n;
}

std::size_t AnchorSet::offset(std::size_t level) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < level; ++i) n += levels[i].anchors.size();
  return n;
}

const Box& AnchorSet::at(std::size_t flat_index) const {
  for (const auto& l : levels) {
    if (flat_index < l.anchors.size()) return l.anchors[flat_index];
    flat_index -= l.anchors.size();
  }
  throw UsageError("anchor index out of range");
}

double AnchorSet::max_extent_cells() const {
  double m = 0.0;
  for (const auto& l : levels)
    for (const auto& a : l.anchors) m = std::max({m, a.w / l.shape.stride, a.h / l.shape.stride});
  return m;
}

AnchorPattern anchor_pattern(int per_pixel) {
  if (per_pixel < 3 || per_pixel % 3 != 0) {
    throw ConfigError("anchors per pixel must be a positive multiple of 3, got " + std::to_string(per_pixel));
  }
  const int n_scales = per_pixel / 3;
  AnchorPattern p;
  for (int k = 0; k < n_scales; ++k) p.scales.push_back(std::pow(2.0, static_cast<double>(k) / n_scales));
  p.ratios = {0.5, 1.0, 2.0};
  return p;
}

AnchorSet generate_anchors(const std::vector<LevelShape>& levels, int per_pixel) {
  const AnchorPattern pat = anchor_pattern(per_pixel);
  AnchorSet set;
  set.per_pixel = per_pixel;
  for (const auto& ls : levels) {
    AnchorLevel level{ls, {}};
    level.anchors.reserve(static_cast<std::size_t>(per_pixel) * ls.height * ls.width);
    for (double ratio : pat.ratios) {
      for (double scale : pat.scales) {
        const double side = kAnchorSizeFactor * ls.stride * scale;
        const double w = side / std::sqrt(ratio);
        const double h = side * std::sqrt(ratio);
        for (int y = 0; y < ls.height; ++y)
          for (int x = 0; x < ls.width; ++x)
            level.anchors.push_back(Box::from_center((x + 0.5) * ls.stride, (y + 0.5) * ls.stride, w, h));
      }
    }
    set.levels.push_back(std::move(level));
  }
  return set;
}

int level_for_size(double object_size, const std::vector<int>& strides) {
  if (strides.empty()) throw ShapeError("no pyramid strides configured");
  const double base = kAnchorSizeFactor * strides.front();
  const int lvl = static_cast<int>(std::floor(std::log2(std::max(object_size, 1e-9) / base)));
  return std::clamp(lvl, 0, static_cast<int>(strides.size()) - 1);
}

double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::size_t MatchResult::foreground_count() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), AnchorLabel::foreground));
}

namespace {

// Strict order used to break IoU ties independently of gt order.
bool box_less(const Box& a, const Box& b) {
  return std::tie(a.x, a.y, a.w, a.h) < std::tie(b.x, b.y, b.w, b.h);
}

bool better(double iou_a, const Box& a, double iou_b, const Box& b) {
  if (iou_a != iou_b) return iou_a > iou_b;
  return box_less(a, b);
}

}  // namespace

MatchResult match_anchors(const AnchorSet& anchors, const std::vector<Box>& gts, int class_id,
                          const MatchConfig& cfg) {
  const std::size_t n = anchors.size();
  MatchResult m;
  m.class_id = class_id;
  m.labels.assign(n, AnchorLabel::background);
  m.matched_gt.assign(n, -1);
  m.targets.assign(n, Deltas{0, 0, 0, 0});
  if (gts.empty()) return m;

  std::vector<double> best_iou(n, 0.0);
  std::vector<int> best_gt(n, -1);
  std::vector<double> gt_best_iou(gts.size(), 0.0);
  std::vector<std::size_t> gt_best_anchor(gts.size(), n);

  std::size_t idx = 0;
  for (const auto& level : anchors.levels) {
    for (const auto& a : level.anchors) {
      for (std::size_t g = 0; g < gts.size(); ++g) {
        const double v = iou(a, gts[g]);
        if (v > 0.0 && (best_gt[idx] < 0 || better(v, gts[g], best_iou[idx], gts[best_gt[idx]]))) {
          best_iou[idx] = v;
          best_gt[idx] = static_cast<int>(g);
        }
        if (v > gt_best_iou[g]) {  // first anchor wins ties: anchor order is fixed
          gt_best_iou[g] = v;
          gt_best_anchor[g] = idx;
        }
      }
      ++idx;
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (best_iou[i] >= cfg.fg_threshold) {
      m.labels[i] = AnchorLabel::foreground;
      m.matched_gt[i] = best_gt[i];
    } else if (best_iou[i] >= cfg.bg_threshold) {
      m.labels[i] = AnchorLabel::ignore;
    }
  }

  // Forced matches. When two gts claim the same anchor the better one wins,
  // which keeps the result independent of gt order.
  std::vector<int> forced(n, -1);
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const std::size_t a = gt_best_anchor[g];
    if (a == n) continue;
    const int cur = forced[a];
    if (cur < 0 || better(gt_best_iou[g], gts[g], gt_best_iou[cur], gts[cur])) forced[a] = static_cast<int>(g);
  }
  for (std::size_t a = 0; a < n; ++a) {
    if (forced[a] < 0 || m.labels[a] == AnchorLabel::foreground) continue;
    m.labels[a] = AnchorLabel::foreground;
    m.matched_gt[a] = forced[a];
  }

  for (std::size_t a = 0; a < n; ++a) {
    if (m.labels[a] == AnchorLabel::foreground) m.targets[a] = encode_box(anchors.at(a), gts[m.matched_gt[a]]);
  }
  return m;
}

Deltas encode_box(const Box& anchor, const Box& gt) {
  if (!anchor.valid() || !gt.valid()) throw DomainError("encode_box: boxes must have positive size");
  return {(gt.cx() - anchor.cx()) / anchor.w, (gt.cy() - anchor.cy()) / anchor.h, std::log(gt.w / anchor.w),
          std::log(gt.h / anchor.h)};
}

Box decode_box(const Box& anchor, const Deltas& d) {
  if (!anchor.valid()) throw DomainError("decode_box: anchor must have positive size");
  const double cx = anchor.cx() + d[0] * anchor.w;
  const double cy = anchor.cy() + d[1] * anchor.h;
  // Bound the size ratio so untrained regressors cannot overflow.
  const double clamp = std::log(1000.0 / 16.0);
  const double w = anchor.w * std::exp(std::min(d[2], clamp));
  const double h = anchor.h * std::exp(std::min(d[3], clamp));
  return Box::from_center(cx, cy, w, h);
}

}  // namespace fsrn
