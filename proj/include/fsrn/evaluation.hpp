#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fsrn/anchors.hpp"
#include "fsrn/datamodel.hpp"
#include "fsrn/tensor.hpp"

namespace fsrn {

struct Detection {
  int image_id = 0;
  int class_id = 0;
  Box bbox;
  double score = 0.0;
};

struct EvalConfig {
  std::vector<double> iou_thresholds{0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};
  int max_detections = 100;  // per image and class
};

/// Single-class AP at one IoU threshold together with the reached recall.
struct ApPoint {
  double ap = 0.0;
  double recall = 0.0;
  std::vector<double> precision;  // 101 interpolated samples, recall 0..1
};
ApPoint class_average_precision(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                                double iou_threshold, int max_detections = 100);

struct ClassMetrics {
  int class_id = 0;
  int n_gt = 0;
  double ap = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ar = 0.0;
  std::vector<double> precision50;
};

struct SplitMetrics {
  double ap = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ar = 0.0;
  std::vector<ClassMetrics> per_class;  // classes with ground truth only
  std::vector<int> skipped;             // requested classes without ground truth
  /// Mean interpolated precision at IoU 0.5 over classes, recall 0..1.
  std::vector<double> pr_curve50;
};

/// COCO-style AP/AR over `classes`. Detections and annotations of other
/// classes are ignored.
SplitMetrics evaluate(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                      const std::vector<int>& classes, const EvalConfig& cfg = {});

struct Transferability {
  std::optional<double> pt;
  std::optional<double> pt50;
  std::optional<double> pt75;
  std::optional<double> rt;
};

struct ApAr {
  double ap = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ar = 0.0;
};
ApAr summary(const SplitMetrics& m);

/// Novel over base ratios; a zero base value leaves the ratio unset.
Transferability transferability(const ApAr& base, const ApAr& novel);

struct EvalReport {
  SplitMetrics base;
  SplitMetrics novel;
  Transferability transfer;
};
EvalReport make_report(SplitMetrics base, SplitMetrics novel);
/// Table with the columns bAP bAP50 bAP75 bAR nAP nAP50 nAP75 nAR PT PT50 PT75 RT.
std::string format_report(const EvalReport& r, const std::string& label = "");
std::string report_json(const EvalReport& r);

// ---------------------------------------------------------------------------
// Post-processing.

struct PostprocessConfig {
  double score_floor = 0.05;
  double nms_iou = 0.5;
  int max_per_image = 100;
  int pre_nms_top_k = 1000;  // per class and level
};

/// Scores and decoded boxes of one class. `logits[l]` is (1, A, H, W) and
/// `deltas[l]` is (1, 4A, H, W) with channel 4a+j holding coordinate j of
/// anchor type a. Boxes are clipped to the image.
std::vector<Detection> decode_class(const AnchorSet& anchors, const std::vector<const Tensor*>& logits,
                                    const std::vector<const Tensor*>& deltas, int image_id, int class_id,
                                    int image_width, int image_height, const PostprocessConfig& cfg = {});

/// Greedy NMS within one class, highest score first.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold);

/// Class-wise NMS then keeps the top `max_per_image` of the image.
std::vector<Detection> postprocess(const std::vector<Detection>& dets, const PostprocessConfig& cfg = {});

// ---------------------------------------------------------------------------
// JSON lines: {"image_id":..,"class_id":..,"bbox":[x,y,w,h],"score":..}

void write_detections(const std::filesystem::path& path, const std::vector<Detection>& dets);
std::vector<Detection> read_detections(const std::filesystem::path& path);

}  // namespace fsrn
