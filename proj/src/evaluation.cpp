#include "fsrn/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "fsrn/error.hpp"
#include "json.hpp"

namespace fsrn {

namespace {

constexpr int kRecallSamples = 101;

// Indices of `dets` sorted by descending score; ties keep input order.
std::vector<std::size_t> by_score(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

ApPoint class_average_precision(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                                double iou_threshold, int max_detections) {
  if (gts.empty()) throw UsageError("average precision of a class without ground truth");
  std::map<int, std::vector<const Annotation*>> gt_by_image;
  for (const auto& a : gts) gt_by_image[a.image_id].push_back(&a);

  std::map<int, std::vector<Detection>> det_by_image;
  for (const auto& d : dets) det_by_image[d.image_id].push_back(d);

  // (score, is_tp) for every kept detection, in per-image rank order.
  std::vector<Detection> kept;
  std::vector<char> tp_flag;
  for (auto& [image_id, list] : det_by_image) {
    const auto order = by_score(list);
    const auto git = gt_by_image.find(image_id);
    std::vector<char> used(git == gt_by_image.end() ? 0 : git->second.size(), 0);
    const std::size_t n = std::min<std::size_t>(order.size(), static_cast<std::size_t>(max_detections));
    for (std::size_t r = 0; r < n; ++r) {
      const Detection& d = list[order[r]];
      int best = -1;
      double best_iou = iou_threshold;
      if (git != gt_by_image.end()) {
        for (std::size_t gi = 0; gi < git->second.size(); ++gi) {
          if (used[gi]) continue;
          const double v = iou(d.bbox, git->second[gi]->bbox);
          if (v >= best_iou) {
            best_iou = v;
            best = static_cast<int>(gi);
          }
        }
      }
      if (best >= 0) used[best] = 1;
      kept.push_back(d);
      tp_flag.push_back(best >= 0 ? 1 : 0);
    }
  }

  const auto order = by_score(kept);
  const double n_gt = static_cast<double>(gts.size());
  std::vector<double> precision(order.size());
  std::vector<double> recall(order.size());
  double tp = 0.0;
  double fp = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (tp_flag[order[i]]) {
      tp += 1.0;
    } else {
      fp += 1.0;
    }
    precision[i] = tp / (tp + fp);
    recall[i] = tp / n_gt;
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  ApPoint out;
  out.recall = recall.empty() ? 0.0 : recall.back();
  out.precision.assign(kRecallSamples, 0.0);
  double sum = 0.0;
  for (int k = 0; k < kRecallSamples; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) out.precision[k] = precision[static_cast<std::size_t>(it - recall.begin())];
    sum += out.precision[k];
  }
  out.ap = sum / kRecallSamples;
  return out;
}

SplitMetrics evaluate(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                      const std::vector<int>& classes, const EvalConfig& cfg) {
  if (cfg.iou_thresholds.empty()) throw UsageError("evaluate: no IoU thresholds");
  std::map<int, std::vector<Annotation>> gt_by_class;
  std::map<int, std::vector<Detection>> det_by_class;
  for (const auto& a : gts) gt_by_class[a.class_id].push_back(a);
  for (const auto& d : dets) det_by_class[d.class_id].push_back(d);

  auto nearest = [&](double t) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < cfg.iou_thresholds.size(); ++i)
      if (std::abs(cfg.iou_thresholds[i] - t) < std::abs(cfg.iou_thresholds[best] - t)) best = i;
    return best;
  };
  const std::size_t i50 = nearest(0.50);
  const std::size_t i75 = nearest(0.75);

  SplitMetrics m;
  m.pr_curve50.assign(kRecallSamples, 0.0);
  for (int c : classes) {
    const auto git = gt_by_class.find(c);
    if (git == gt_by_class.end()) {
      m.skipped.push_back(c);
      continue;
    }
    static const std::vector<Detection> kNone;
    const auto dit = det_by_class.find(c);
    const auto& cd = dit == det_by_class.end() ? kNone : dit->second;
    ClassMetrics cm;
    cm.class_id = c;
    cm.n_gt = static_cast<int>(git->second.size());
    for (std::size_t t = 0; t < cfg.iou_thresholds.size(); ++t) {
      const ApPoint p = class_average_precision(cd, git->second, cfg.iou_thresholds[t], cfg.max_detections);
      cm.ap += p.ap;
      cm.ar += p.recall;
      if (t == i50) {
        cm.ap50 = p.ap;
        cm.precision50 = p.precision;
      }
      if (t == i75) cm.ap75 = p.ap;
    }
    cm.ap /= static_cast<double>(cfg.iou_thresholds.size());
    cm.ar /= static_cast<double>(cfg.iou_thresholds.size());
    m.per_class.push_back(std::move(cm));
  }
  if (!m.per_class.empty()) {
    const double n = static_cast<double>(m.per_class.size());
    for (const auto& cm : m.per_class) {
      m.ap += cm.ap / n;
      m.ap50 += cm.ap50 / n;
      m.ap75 += cm.ap75 / n;
      m.ar += cm.ar / n;
      for (int k = 0; k < kRecallSamples; ++k) m.pr_curve50[k] += cm.precision50[k] / n;
    }
  }
  return m;
}

ApAr summary(const SplitMetrics& m) { return {m.ap, m.ap50, m.ap75, m.ar}; }

Transferability transferability(const ApAr& base, const ApAr& novel) {
  auto ratio = [](double num, double den) -> std::optional<double> {
    if (den == 0.0) return std::nullopt;
    return num / den;
  };
  return {ratio(novel.ap, base.ap), ratio(novel.ap50, base.ap50), ratio(novel.ap75, base.ap75),
          ratio(novel.ar, base.ar)};
}

EvalReport make_report(SplitMetrics base, SplitMetrics novel) {
  EvalReport r;
  r.transfer = transferability(summary(base), summary(novel));
  r.base = std::move(base);
  r.novel = std::move(novel);
  return r;
}

std::string format_report(const EvalReport& r, const std::string& label) {
  auto pct = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%7.2f", 100.0 * v);
    return std::string(buf);
  };
  auto rat = [](const std::optional<double>& v) {
    if (!v) return std::string("    n/a");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%7.2f", *v);
    return std::string(buf);
  };
  std::ostringstream os;
  char head[64];
  std::snprintf(head, sizeof(head), "%-12s", label.empty() ? "run" : label.c_str());
  os << head << "    bAP  bAP50  bAP75    bAR    nAP  nAP50  nAP75    nAR     PT   PT50   PT75     RT\n";
  std::snprintf(head, sizeof(head), "%-12s", label.empty() ? "" : label.c_str());
  os << head << pct(r.base.ap) << pct(r.base.ap50) << pct(r.base.ap75) << pct(r.base.ar) << pct(r.novel.ap)
     << pct(r.novel.ap50) << pct(r.novel.ap75) << pct(r.novel.ar) << rat(r.transfer.pt) << rat(r.transfer.pt50)
     << rat(r.transfer.pt75) << rat(r.transfer.rt) << "\n";
  return os.str();
}

std::string report_json(const EvalReport& r) {
  auto split = [](const SplitMetrics& m) {
    nlohmann::json j{{"ap", m.ap}, {"ap50", m.ap50}, {"ap75", m.ap75}, {"ar", m.ar}, {"skipped", m.skipped}};
    nlohmann::json pc = nlohmann::json::array();
    for (const auto& c : m.per_class) {
      pc.push_back({{"class_id", c.class_id}, {"n_gt", c.n_gt}, {"ap", c.ap}, {"ap50", c.ap50},
                    {"ap75", c.ap75}, {"ar", c.ar}});
    }
    j["per_class"] = pc;
    j["pr_curve50"] = m.pr_curve50;
    return j;
  };
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j{{"base", split(r.base)},
                   {"novel", split(r.novel)},
                   {"transfer",
                    {{"pt", opt(r.transfer.pt)},
                     {"pt50", opt(r.transfer.pt50)},
                     {"pt75", opt(r.transfer.pt75)},
                     {"rt", opt(r.transfer.rt)}}}};
  return j.dump();
}

std::vector<Detection> decode_class(const AnchorSet& anchors, const std::vector<const Tensor*>& logits,
                                    const std::vector<const Tensor*>& deltas, int image_id, int class_id,
                                    int image_width, int image_height, const PostprocessConfig& cfg) {
  if (logits.size() != anchors.levels.size() || deltas.size() != anchors.levels.size()) {
    throw ShapeError("decode_class: one logit and one delta map per pyramid level expected");
  }
  std::vector<Detection> out;
  const int a_count = anchors.per_pixel;
  for (std::size_t l = 0; l < anchors.levels.size(); ++l) {
    const LevelShape& ls = anchors.levels[l].shape;
    const std::size_t plane = static_cast<std::size_t>(ls.height) * ls.width;
    const Tensor& lg = *logits[l];
    const Tensor& dt = *deltas[l];
    if (lg.size() != a_count * plane || dt.size() != 4 * a_count * plane) {
      throw ShapeError("decode_class: level " + std::to_string(l) + " maps do not match the anchors");
    }
    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t i = 0; i < lg.size(); ++i) {
      const double s = sigmoid(lg[i]);
      if (s > cfg.score_floor) cand.emplace_back(s, i);
    }
    const std::size_t k = std::min<std::size_t>(cand.size(), static_cast<std::size_t>(cfg.pre_nms_top_k));
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(),
                      [](const auto& x, const auto& y) { return x.first > y.first || (x.first == y.first && x.second < y.second); });
    for (std::size_t r = 0; r < k; ++r) {
      const std::size_t i = cand[r].second;
      const std::size_t a = i / plane;
      const std::size_t pix = i % plane;
      Deltas d;
      for (int j = 0; j < 4; ++j) d[j] = dt[(4 * a + j) * plane + pix];
      Box b = decode_box(anchors.levels[l].anchors[i], d);
      const double x0 = std::clamp(b.x, 0.0, static_cast<double>(image_width));
      const double y0 = std::clamp(b.y, 0.0, static_cast<double>(image_height));
      const double x1 = std::clamp(b.x + b.w, 0.0, static_cast<double>(image_width));
      const double y1 = std::clamp(b.y + b.h, 0.0, static_cast<double>(image_height));
      b = Box{x0, y0, x1 - x0, y1 - y0};
      if (!b.valid()) continue;
      out.push_back(Detection{image_id, class_id, b, cand[r].first});
    }
  }
  return out;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  const auto order = by_score(dets);
  std::vector<Detection> keep;
  for (std::size_t i : order) {
    bool suppressed = false;
    for (const auto& k : keep) {
      if (k.class_id == dets[i].class_id && k.image_id == dets[i].image_id && iou(k.bbox, dets[i].bbox) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) keep.push_back(dets[i]);
  }
  return keep;
}

std::vector<Detection> postprocess(const std::vector<Detection>& dets, const PostprocessConfig& cfg) {
  std::map<std::pair<int, int>, std::vector<Detection>> groups;
  for (const auto& d : dets)
    if (d.score >= cfg.score_floor) groups[{d.image_id, d.class_id}].push_back(d);
  std::map<int, std::vector<Detection>> per_image;
  for (auto& [key, list] : groups) {
    auto kept = nms(std::move(list), cfg.nms_iou);
    auto& dst = per_image[key.first];
    dst.insert(dst.end(), kept.begin(), kept.end());
  }
  std::vector<Detection> out;
  for (auto& [image_id, list] : per_image) {
    const auto order = by_score(list);
    const std::size_t n = std::min<std::size_t>(order.size(), static_cast<std::size_t>(cfg.max_per_image));
    for (std::size_t r = 0; r < n; ++r) out.push_back(list[order[r]]);
  }
  return out;
}

void write_detections(const std::filesystem::path& path, const std::vector<Detection>& dets) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  for (const auto& d : dets) {
    nlohmann::json j{{"image_id", d.image_id},
                     {"class_id", d.class_id},
                     {"bbox", {d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h}},
                     {"score", d.score}};
    os << j.dump() << "\n";
  }
}

std::vector<Detection> read_detections(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open " + path.string());
  std::vector<Detection> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where + ": " + e.what());
    }
    try {
      Detection d;
      d.image_id = j.at("image_id").get<int>();
      d.class_id = j.at("class_id").get<int>();
      const auto& b = j.at("bbox");
      if (!b.is_array() || b.size() != 4) throw ParseError(where + ": bbox must have four numbers");
      d.bbox = Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
      d.score = j.at("score").get<double>();
      if (!d.bbox.valid()) throw ValidationError(where + ": degenerate bbox");
      if (!std::isfinite(d.score)) throw ValidationError(where + ": non-finite score");
      out.push_back(d);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
  }
  return out;
}

}  // namespace fsrn
