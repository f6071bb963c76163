#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "fsrn/error.hpp"
#include "fsrn/harness.hpp"

namespace fsrn {

using nlohmann::json;

EpisodeSettings finetune_settings(const RunConfig& cfg, const std::vector<int>& all_classes) {
  EpisodeSettings es = meta_train_settings(cfg);
  es.sampler.negative_pool = all_classes;
  es.gp = cfg.toggles.gp;
  es.msda = cfg.toggles.msda;
  es.msda_cfg = cfg.msda;
  es.msda_cfg.alpha_train = cfg.focal.alpha;
  if (cfg.toggles.msda) es.focal.alpha = metatest_alpha(cfg.focal.alpha);
  return es;
}

Detector trained_detector(const RunConfig& cfg, const Benchmark& bench, bool verbose) {
  const auto dir = std::filesystem::path(cfg.output_dir) / "cache" / cfg.training_hash();
  TrainOptions opts;
  opts.out_dir = dir;
  opts.verbose = verbose;
  if (std::filesystem::exists(dir / "checkpoint.json")) {
    RunState st = load_checkpoint(cfg, dir);
    if (st.episode >= cfg.meta_train_episodes) return std::move(st.detector);
    opts.resume_from = dir;
  }
  return meta_train(cfg, bench.train, opts).detector;
}

std::map<int, Tensor> class_prototypes(Detector& det, const DetectionDataset& shots, const std::vector<int>& classes,
                                       int crop_size) {
  std::map<int, Tensor> out;
  for (int c : classes) {
    const auto& refs = shots.instances_of(c);
    if (refs.empty()) throw ConfigError("no support shots for class " + std::to_string(c));
    std::vector<SupportCrop> crops;
    std::vector<const Image*> imgs;
    std::vector<int> idx;
    std::vector<int> levels;
    crops.reserve(refs.size());
    for (const auto& [ri, ai] : refs) {
      const ImageRecord& rec = shots.records()[ri];
      crops.push_back(extract_support_crop(rec, rec.annotations[ai], crop_size));
    }
    for (std::size_t i = 0; i < crops.size(); ++i) {
      imgs.push_back(&crops[i].pixels);
      idx.push_back(static_cast<int>(i));
      levels.push_back(level_for_size(std::sqrt(crops[i].source_box.area()), det.config().backbone.strides));
    }
    Graph g;
    const Detector::Bound p = det.bind(g, false);
    const FeaturePyramid pyr = det.backbone_fpn(g, p, g.constant(to_batch(imgs)));
    out.emplace(c, g.value(pool_support_prototype(g, pyr, idx, levels).prototype));
  }
  return out;
}

std::vector<Detection> detect(Detector& det, const DetectionDataset& test, const std::map<int, Tensor>& prototypes,
                              const std::vector<int>& classes, const PostprocessConfig& pp) {
  if (classes.empty()) return {};
  std::vector<double> stacked;
  Shape ps{};
  for (int c : classes) {
    const auto it = prototypes.find(c);
    if (it == prototypes.end()) throw UsageError("no prototype for class " + std::to_string(c));
    ps = it->second.shape();
    stacked.insert(stacked.end(), it->second.values().begin(), it->second.values().end());
  }
  const Tensor protos(Shape{static_cast<int>(classes.size()), ps.c, 1, 1}, std::move(stacked));
  const NetworkConfig& net = det.config();

  std::vector<Detection> out;
  for (const auto& rec : test.records()) {
    if (rec.image.empty()) throw UsageError("test image " + std::to_string(rec.id) + " has no pixels loaded");
    const int h = (rec.image.height + 31) / 32 * 32;
    const int w = (rec.image.width + 31) / 32 * 32;
    const Image img = (h == rec.image.height && w == rec.image.width) ? rec.image : pad_to(rec.image, h, w);
    Graph g;
    const Detector::Bound p = det.bind(g, false);
    const FeaturePyramid pyr = det.backbone_fpn(g, p, g.constant(to_tensor(img)));
    const auto cls = det.classification_subnet(g, p, pyr, g.constant(protos));
    const auto loc = det.localization_subnet(g, p, pyr);
    const AnchorSet anchors =
        generate_anchors(pyramid_level_shapes(h, w, net.backbone.strides), net.subnet.n_anchors_per_pixel);
    std::vector<Tensor> class_maps(cls.size());
    std::vector<const Tensor*> deltas;
    for (auto v : loc) deltas.push_back(&g.value(v));
    std::vector<Detection> image_dets;
    for (std::size_t n = 0; n < classes.size(); ++n) {
      std::vector<const Tensor*> logits;
      for (std::size_t l = 0; l < cls.size(); ++l) {
        class_maps[l] = g.value(cls[l]).sample(static_cast<int>(n));
        logits.push_back(&class_maps[l]);
      }
      auto d = decode_class(anchors, logits, deltas, rec.id, classes[n], rec.width, rec.height, pp);
      image_dets.insert(image_dets.end(), d.begin(), d.end());
    }
    const auto kept = postprocess(image_dets, pp);
    out.insert(out.end(), kept.begin(), kept.end());
  }
  return out;
}

namespace {

std::vector<Annotation> all_annotations(const DetectionDataset& ds) {
  std::vector<Annotation> out;
  for (const auto& r : ds.records()) out.insert(out.end(), r.annotations.begin(), r.annotations.end());
  return out;
}

}  // namespace

MetaTestResult meta_test(const Detector& trained, const RunConfig& cfg, const Benchmark& bench) {
  cfg.validate();
  const std::vector<int> base = bench.test.class_ids(Split::base);
  const std::vector<int> novel = bench.test.class_ids(Split::novel);
  std::vector<int> all = base;
  all.insert(all.end(), novel.begin(), novel.end());
  std::sort(all.begin(), all.end());
  for (int c : novel) {
    const auto n = bench.finetune.classes().contains(c) ? bench.finetune.instances_of(c).size() : 0;
    if (static_cast<int>(n) < cfg.sampler.k_shots) {
      throw ConfigError("novel class " + std::to_string(c) + " has " + std::to_string(n) + " support shots, " +
                        std::to_string(cfg.sampler.k_shots) + " required");
    }
  }
  const auto gts = all_annotations(bench.test);
  MetaTestResult res;

  // Base metrics come from the frozen meta-trained weights.
  Detector frozen = trained;
  const auto base_protos = class_prototypes(frozen, bench.finetune, base, cfg.sampler.crop_size);
  res.base_detections = detect(frozen, bench.test, base_protos, base);
  SplitMetrics bm = evaluate(res.base_detections, gts, base);

  Detector tuned = trained;
  for (auto& p : tuned.parameters()) p.momentum.fill(0.0);
  const EpisodeSettings es = finetune_settings(cfg, all);
  std::mt19937_64 rng(cfg.seed ^ 0xf17e7a1ef17e7a1eULL);
  for (int e = 0; e < cfg.finetune_episodes; ++e) {
    const double lr = learning_rate(cfg.finetune_optim, e, cfg.finetune_episodes);
    LossRecord rec = train_episode(tuned, bench.finetune, es, cfg.finetune_optim, lr, rng);
    rec.episode = e;
    res.finetune_history.push_back(rec);
  }
  const auto novel_protos = class_prototypes(tuned, bench.finetune, novel, cfg.sampler.crop_size);
  res.novel_detections = detect(tuned, bench.test, novel_protos, novel);
  SplitMetrics nm = evaluate(res.novel_detections, gts, novel);
  res.report = make_report(std::move(bm), std::move(nm));
  return res;
}

// ---------------------------------------------------------------------------

namespace {

void finish_row(AblationRow& row) {
  const double n = static_cast<double>(row.runs.size());
  for (const auto& r : row.runs) {
    const ApAr b = summary(r.base);
    const ApAr v = summary(r.novel);
    row.base.ap += b.ap / n;
    row.base.ap50 += b.ap50 / n;
    row.base.ap75 += b.ap75 / n;
    row.base.ar += b.ar / n;
    row.novel.ap += v.ap / n;
    row.novel.ap50 += v.ap50 / n;
    row.novel.ap75 += v.ap75 / n;
    row.novel.ar += v.ar / n;
  }
  row.transfer = transferability(row.base, row.novel);
}

}  // namespace

AblationReport run_ablation(const std::vector<char>& presets, const RunConfig& base,
                            const std::vector<std::uint64_t>& seeds, bool verbose) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  const Benchmark bench = build_benchmark(base);
  AblationReport rep;
  for (char p : presets) {
    AblationRow row;
    row.name = preset_label(p);
    for (std::uint64_t s : seeds) {
      RunConfig cfg = preset(p, base);
      cfg.seed = s;
      row.receptive_field = receptive_field(cfg.effective_network().subnet.post_fusion_layers);
      if (verbose) std::cerr << row.name << " seed " << s << "\n";
      const Detector det = trained_detector(cfg, bench, verbose);
      row.runs.push_back(meta_test(det, cfg, bench).report);
      if (verbose) std::cerr << format_report(row.runs.back(), row.name);
    }
    finish_row(row);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

AblationReport run_rf_sweep(const RunConfig& base, const std::vector<std::uint64_t>& seeds, bool verbose) {
  if (seeds.empty()) throw ConfigError("RF sweep needs at least one seed");
  const Benchmark bench = build_benchmark(base);
  AblationReport rep;
  for (const RfConfig& rf : rf_sweep_configs()) {
    AblationRow row;
    row.receptive_field = rf.receptive_field();
    row.name = "RF " + std::to_string(row.receptive_field);
    for (std::uint64_t s : seeds) {
      RunConfig cfg = preset('C', base);
      cfg.seed = s;
      cfg.network.subnet.n_conv_layers = rf.n_conv_layers;
      cfg.post_fusion_layers = rf.post_fusion_layers;
      if (verbose) std::cerr << row.name << " seed " << s << "\n";
      const Detector det = trained_detector(cfg, bench, verbose);
      row.runs.push_back(meta_test(det, cfg, bench).report);
      if (verbose) std::cerr << format_report(row.runs.back(), row.name);
    }
    finish_row(row);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

std::string AblationReport::table() const {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-14s %3s %7s %7s %7s %7s %7s %7s %7s %7s %7s\n", "row", "RF", "bAP", "bAP50",
                "bAR", "nAP", "nAP50", "nAR", "PT", "PT50", "RT");
  os << buf;
  auto rat = [](const std::optional<double>& v) {
    char b[16];
    if (!v) return std::string("    n/a");
    std::snprintf(b, sizeof(b), "%7.2f", *v);
    return std::string(b);
  };
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-14s %3d %7.2f %7.2f %7.2f %7.2f %7.2f %7.2f", r.name.c_str(),
                  r.receptive_field, 100 * r.base.ap, 100 * r.base.ap50, 100 * r.base.ar, 100 * r.novel.ap,
                  100 * r.novel.ap50, 100 * r.novel.ar);
    os << buf << " " << rat(r.transfer.pt) << " " << rat(r.transfer.pt50) << " " << rat(r.transfer.rt) << "\n";
  }
  return os.str();
}

json AblationReport::to_json() const {
  json rows_j = json::array();
  auto apar = [](const ApAr& a) { return json{{"ap", a.ap}, {"ap50", a.ap50}, {"ap75", a.ap75}, {"ar", a.ar}}; };
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  for (const auto& r : rows) {
    json runs = json::array();
    for (const auto& e : r.runs) runs.push_back(json::parse(report_json(e)));
    rows_j.push_back({{"name", r.name},
                      {"receptive_field", r.receptive_field},
                      {"base", apar(r.base)},
                      {"novel", apar(r.novel)},
                      {"pt", opt(r.transfer.pt)},
                      {"pt50", opt(r.transfer.pt50)},
                      {"rt", opt(r.transfer.rt)},
                      {"runs", runs}});
  }
  return json{{"rows", rows_j}};
}

// ---------------------------------------------------------------------------

namespace {

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double kW = 640, kH = 400, kL = 60, kR = 20, kT = 30, kB = 50;
  [[nodiscard]] double px(double x) const { return kL + (x - x0) / (x1 - x0) * (kW - kL - kR); }
  [[nodiscard]] double py(double y) const { return kH - kB - (y - y0) / (y1 - y0) * (kH - kT - kB); }
};

const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

void svg_axes(std::ostream& os, const Frame& f, const std::string& title, const std::string& xl, const std::string& yl) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << Frame::kW << "\" height=\"" << Frame::kH
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << Frame::kW / 2 << "\" y=\"18\" text-anchor=\"middle\">" << title << "</text>\n"
     << "<line x1=\"" << Frame::kL << "\" y1=\"" << f.py(f.y0) << "\" x2=\"" << Frame::kW - Frame::kR << "\" y2=\""
     << f.py(f.y0) << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << Frame::kL << "\" y1=\"" << f.py(f.y0) << "\" x2=\"" << Frame::kL << "\" y2=\"" << Frame::kT
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0;
    const double yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    char b[32];
    std::snprintf(b, sizeof(b), "%.3g", xv);
    os << "<text x=\"" << f.px(xv) << "\" y=\"" << f.py(f.y0) + 16 << "\" text-anchor=\"middle\">" << b << "</text>\n";
    std::snprintf(b, sizeof(b), "%.3g", yv);
    os << "<text x=\"" << Frame::kL - 6 << "\" y=\"" << f.py(yv) + 4 << "\" text-anchor=\"end\">" << b << "</text>\n";
  }
  os << "<text x=\"" << Frame::kW / 2 << "\" y=\"" << Frame::kH - 12 << "\" text-anchor=\"middle\">" << xl
     << "</text>\n"
     << "<text x=\"14\" y=\"" << Frame::kH / 2 << "\" transform=\"rotate(-90 14 " << Frame::kH / 2
     << ")\" text-anchor=\"middle\">" << yl << "</text>\n";
}

void svg_line(std::ostream& os, const Frame& f, const std::vector<std::pair<double, double>>& pts, const char* color,
              const std::string& label, int index) {
  if (pts.empty()) return;
  os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
  for (const auto& [x, y] : pts) os << f.px(x) << "," << f.py(y) << " ";
  os << "\"/>\n";
  const double ly = Frame::kT + 14 + 16 * index;
  os << "<line x1=\"" << Frame::kW - 170 << "\" y1=\"" << ly - 4 << "\" x2=\"" << Frame::kW - 150 << "\" y2=\""
     << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
     << "<text x=\"" << Frame::kW - 145 << "\" y=\"" << ly << "\">" << label << "</text>\n";
}

}  // namespace

void plot_loss_svg(const std::vector<LossRecord>& history, const std::filesystem::path& path, int smooth) {
  std::vector<const LossRecord*> used;
  for (const auto& r : history)
    if (!r.skipped) used.push_back(&r);
  if (used.empty()) throw UsageError("loss history has no trained episodes");
  smooth = std::max(1, smooth);
  auto series = [&](auto get) {
    std::vector<std::pair<double, double>> pts;
    double acc = 0.0;
    for (std::size_t i = 0; i < used.size(); ++i) {
      acc += get(*used[i]);
      if (i >= static_cast<std::size_t>(smooth)) acc -= get(*used[i - smooth]);
      const double n = static_cast<double>(std::min<std::size_t>(i + 1, smooth));
      pts.emplace_back(used[i]->episode, acc / n);
    }
    return pts;
  };
  const auto total = series([](const LossRecord& r) { return r.total; });
  const auto focal = series([](const LossRecord& r) { return r.focal; });
  const auto loc = series([](const LossRecord& r) { return r.loc; });
  const auto mm = series([](const LossRecord& r) { return r.mm; });
  double ymax = 0.0;
  for (const auto& pt : total) ymax = std::max(ymax, pt.second);
  Frame f{total.front().first, std::max(total.back().first, total.front().first + 1.0), 0.0,
          ymax > 0.0 ? ymax * 1.05 : 1.0};
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  svg_axes(os, f, "training loss (moving average of " + std::to_string(smooth) + ")", "episode", "loss");
  svg_line(os, f, total, kColors[0], "total", 0);
  svg_line(os, f, focal, kColors[1], "focal", 1);
  svg_line(os, f, loc, kColors[2], "smooth-L1", 2);
  svg_line(os, f, mm, kColors[3], "max-margin", 3);
  os << "</svg>\n";
}

void plot_pr_svg(const std::vector<std::pair<std::string, std::vector<double>>>& curves,
                 const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  Frame f{0.0, 1.0, 0.0, 1.0};
  svg_axes(os, f, "precision-recall at IoU 0.5", "recall", "precision");
  int i = 0;
  for (const auto& [name, prec] : curves) {
    std::vector<std::pair<double, double>> pts;
    const double n = prec.size() > 1 ? static_cast<double>(prec.size() - 1) : 1.0;
    for (std::size_t k = 0; k < prec.size(); ++k) pts.emplace_back(k / n, prec[k]);
    svg_line(os, f, pts, kColors[i % 8], name, i);
    ++i;
  }
  os << "</svg>\n";
}

}  // namespace fsrn
