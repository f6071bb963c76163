#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>

#include "fsrn/error.hpp"
#include "fsrn/harness.hpp"

namespace fsrn {

using nlohmann::json;

namespace {

const AnchorSet& anchors_for(int height, int width, const NetworkConfig& net) {
  static std::mutex mu;
  static std::map<std::tuple<int, int, int>, AnchorSet> cache;
  std::lock_guard lock(mu);
  const auto key = std::make_tuple(height, width, net.subnet.n_anchors_per_pixel);
  auto it = cache.find(key);
  if (it == cache.end()) {
    it = cache
             .emplace(key, generate_anchors(pyramid_level_shapes(height, width, net.backbone.strides),
                                            net.subnet.n_anchors_per_pixel))
             .first;
  }
  return it->second;
}

int round_up(int v, int m) { return (v + m - 1) / m * m; }

void sgd_step(Detector& det, const OptimConfig& opt, double lr) {
  double sq = 0.0;
  for (const auto& p : det.parameters())
    for (std::size_t i = 0; i < p.grad.size(); ++i) sq += p.grad[i] * p.grad[i];
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw TrainingError("non-finite gradient norm");
  const double scale = norm > opt.grad_clip ? opt.grad_clip / norm : 1.0;
  for (auto& p : det.parameters()) {
    const bool is_weight = p.name.ends_with(".weight");
    const double wd = is_weight ? opt.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double d = p.grad[i] * scale + wd * p.value[i];
      p.momentum[i] = opt.momentum * p.momentum[i] + d;
      p.value[i] -= lr * p.momentum[i];
    }
  }
}

}  // namespace

double learning_rate(const OptimConfig& opt, int episode, int total_episodes) {
  double lr = opt.lr;
  if (opt.warmup > 0 && episode < opt.warmup) lr *= 0.1 + 0.9 * static_cast<double>(episode) / opt.warmup;
  for (double s : opt.steps)
    if (episode >= s * total_episodes) lr *= opt.decay;
  return lr;
}

TaskLoss task_loss(Graph& g, Detector& det, const Detector::Bound& p, const EpisodeTask& task,
                   const EpisodeSettings& es, std::mt19937_64* gp_rng, double support_scale) {
  const NetworkConfig& net = det.config();
  if (task.support.empty()) throw UsageError("task without support classes");

  // Support crops, batched in class order.
  std::vector<const Image*> crops;
  std::vector<int> levels;
  std::vector<int> class_of_row;
  int n = 0;
  for (const auto& [cid, shots] : task.support) {
    if (shots.empty()) throw UsageError("support class " + std::to_string(cid) + " has no shots");
    for (const auto& s : shots) {
      if (s.pixels.empty()) throw UsageError("support crop without pixels");
      crops.push_back(&s.pixels);
      levels.push_back(level_for_size(std::sqrt(s.source_box.area()) * support_scale, net.backbone.strides));
      class_of_row.push_back(n);
    }
    ++n;
  }
  const FeaturePyramid spyr = det.backbone_fpn(g, p, g.constant(to_batch(crops)));

  std::vector<Graph::Var> protos;
  std::vector<Graph::Var> all_shots;
  std::size_t row = 0;
  for (const auto& [cid, shots] : task.support) {
    std::vector<int> idx;
    std::vector<int> lv;
    for (std::size_t k = 0; k < shots.size(); ++k, ++row) {
      idx.push_back(static_cast<int>(row));
      lv.push_back(levels[row]);
    }
    PrototypeVars pv = pool_support_prototype(g, spyr, idx, lv);
    Graph::Var proto = pv.prototype;
    if (es.gp) {
      if (gp_rng == nullptr) throw UsageError("Gaussian prototyping needs an rng");
      proto = ops::gaussian_perturb(g, proto, pv.shots, *gp_rng);
    }
    protos.push_back(proto);
    all_shots.insert(all_shots.end(), pv.shots.begin(), pv.shots.end());
  }

  const Image& q = task.query.image;
  const FeaturePyramid qpyr = det.backbone_fpn(g, p, g.constant(to_tensor(q)));
  const std::vector<Graph::Var> cls = det.classification_subnet(g, p, qpyr, ops::concat(g, protos));
  const std::vector<Graph::Var> loc = det.localization_subnet(g, p, qpyr);
  const AnchorSet& anchors = anchors_for(q.height, q.width, net);
  const int a_count = anchors.per_pixel;

  std::vector<MatchResult> matches;
  int nfg = 0;
  for (const auto& [cid, shots] : task.support) {
    std::vector<Box> gts;
    for (const auto& a : task.query.annotations)
      if (a.class_id == cid) gts.push_back(a.bbox);
    matches.push_back(match_anchors(anchors, gts, cid));
    nfg += static_cast<int>(matches.back().foreground_count());
  }

  std::vector<Graph::Var> terms;
  std::vector<double> weights;
  const double norm = 1.0 / std::max(1, nfg);
  double focal_v = 0.0;
  double loc_v = 0.0;
  for (std::size_t l = 0; l < anchors.levels.size(); ++l) {
    const std::size_t per_class = anchors.levels[l].anchors.size();
    const std::size_t plane = per_class / a_count;
    const std::size_t off = anchors.offset(l);
    std::vector<std::int8_t> labels(per_class * matches.size());
    std::vector<std::size_t> loc_idx;
    std::vector<double> loc_tgt;
    for (std::size_t c = 0; c < matches.size(); ++c) {
      const MatchResult& m = matches[c];
      for (std::size_t j = 0; j < per_class; ++j) {
        const AnchorLabel lab = m.labels[off + j];
        labels[c * per_class + j] = static_cast<std::int8_t>(lab);
        if (lab != AnchorLabel::foreground) continue;
        const std::size_t a = j / plane;
        const std::size_t pix = j % plane;
        for (std::size_t k = 0; k < 4; ++k) {
          loc_idx.push_back((4 * a + k) * plane + pix);
          loc_tgt.push_back(m.targets[off + j][k]);
        }
      }
    }
    Graph::Var f = ops::sigmoid_focal_sum(g, cls[l], labels, es.focal);
    focal_v += g.value(f).item();
    terms.push_back(f);
    weights.push_back(norm);
    if (!loc_idx.empty()) {
      Graph::Var s = ops::smooth_l1_sum(g, loc[l], loc_idx, loc_tgt);
      loc_v += g.value(s).item();
      terms.push_back(s);
      weights.push_back(norm);
    }
  }
  double mm_v = 0.0;
  if (es.mm && matches.size() >= 2 && es.lambda_mm > 0.0) {
    Graph::Var mm = ops::max_margin(g, ops::concat(g, all_shots), class_of_row);
    mm_v = g.value(mm).item();
    terms.push_back(mm);
    weights.push_back(es.lambda_mm);
  }
  TaskLoss out;
  out.parts = total_loss(focal_v * norm, loc_v * norm, mm_v, es.mm ? es.lambda_mm : 0.0);
  out.total = ops::weighted_sum(g, terms, weights);
  out.n_foreground = nfg;
  return out;
}

LossRecord train_episode(Detector& det, const DetectionDataset& ds, const EpisodeSettings& es,
                         const OptimConfig& opt, double lr, std::mt19937_64& rng) {
  std::vector<std::size_t> queries;
  for (std::size_t i = 0; i < ds.records().size(); ++i)
    if (!ds.records()[i].annotations.empty()) queries.push_back(i);
  if (queries.empty()) throw UsageError("no annotated query images");
  const ImageRecord& qrec = ds.records()[queries[std::uniform_int_distribution<std::size_t>(0, queries.size() - 1)(rng)]];

  SamplerConfig sc = es.sampler;
  double log2_scale = 0.0;
  if (es.msda) {
    es.msda_cfg.validate();
    // One exponent per episode, redrawn while the query would shrink below 64.
    if (std::lround(std::min(qrec.width, qrec.height) * std::exp2(es.msda_cfg.log_range)) < 64) {
      throw UsageError("query image " + std::to_string(qrec.id) + " cannot be scaled to 64 pixels");
    }
    std::uniform_real_distribution<double> u(-es.msda_cfg.log_range, es.msda_cfg.log_range);
    do {
      log2_scale = u(rng);
    } while (std::lround(std::min(qrec.width, qrec.height) * std::exp2(log2_scale)) < 64);
    const int crop = static_cast<int>(std::lround(sc.crop_size * std::exp2(log2_scale) / 32.0)) * 32;
    sc.crop_size = std::clamp(crop, 32, 128);
  }

  std::optional<EpisodeTask> task;
  if (es.multiway) {
    task = sample_episode(ds, qrec, sc, rng);
  } else {
    const auto classes = qrec.classes();
    const int c = classes[std::uniform_int_distribution<std::size_t>(0, classes.size() - 1)(rng)];
    task = sample_binary_episode(ds, qrec, c, sc.k_shots, rng, sc);
  }
  LossRecord rec;
  rec.lr = lr;
  if (!task) {
    rec.skipped = true;
    return rec;
  }

  if (std::bernoulli_distribution(es.flip_prob)(rng)) {
    task->query.image = flip_horizontal(task->query.image);
    for (auto& a : task->query.annotations) a.bbox.x = task->query.image.width - a.bbox.x - a.bbox.w;
  }
  if (es.msda) {
    std::vector<Box> boxes;
    for (const auto& a : task->query.annotations) boxes.push_back(a.bbox);
    ScaledImage si = scale_image(task->query.image, boxes, log2_scale);
    const int h = round_up(si.image.height, 32);
    const int w = round_up(si.image.width, 32);
    task->query.image = pad_to(si.image, h, w);
    task->query.height = h;
    task->query.width = w;
    for (std::size_t i = 0; i < boxes.size(); ++i) task->query.annotations[i].bbox = si.boxes[i];
  }

  Graph g;
  const Detector::Bound p = det.bind(g, true);
  det.zero_grad();
  const TaskLoss tl = task_loss(g, det, p, *task, es, &rng, std::exp2(log2_scale));
  g.backward(tl.total);
  sgd_step(det, opt, lr);
  rec.focal = tl.parts.focal;
  rec.loc = tl.parts.loc;
  rec.mm = tl.parts.max_margin;
  rec.total = tl.parts.total;
  rec.n_foreground = tl.n_foreground;
  return rec;
}

json to_json(const LossRecord& r) {
  return json{{"episode", r.episode}, {"skipped", r.skipped}, {"focal", r.focal}, {"loc", r.loc},
              {"mm", r.mm},           {"total", r.total},     {"n_fg", r.n_foreground}, {"lr", r.lr}};
}

LossRecord loss_record_from_json(const json& j) {
  try {
    LossRecord r;
    r.episode = j.at("episode").get<int>();
    r.skipped = j.at("skipped").get<bool>();
    r.focal = j.at("focal").get<double>();
    r.loc = j.at("loc").get<double>();
    r.mm = j.at("mm").get<double>();
    r.total = j.at("total").get<double>();
    r.n_foreground = j.at("n_fg").get<int>();
    r.lr = j.at("lr").get<double>();
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("loss record: ") + e.what());
  }
}

std::vector<LossRecord> read_loss_log(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open " + path.string());
  std::vector<LossRecord> out;
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(loss_record_from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw ParseError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

RunState initial_state(const RunConfig& cfg) {
  cfg.validate();
  return RunState{Detector(cfg.effective_network()), 0, std::mt19937_64(cfg.seed ^ 0x5eed5eed5eed5eedULL), {}};
}

void save_checkpoint(const RunState& st, const RunConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto weights_tmp = dir / "checkpoint.bin.tmp";
  const auto meta_tmp = dir / "checkpoint.json.tmp";
  st.detector.save(weights_tmp);
  std::ostringstream rng;
  rng << st.rng;
  const json meta{{"config_hash", cfg.training_hash()}, {"episode", st.episode}, {"rng", rng.str()}};
  {
    std::ofstream os(meta_tmp);
    if (!os) throw Error("cannot write " + meta_tmp.string());
    os << meta.dump(2) << "\n";
  }
  std::filesystem::rename(weights_tmp, dir / "checkpoint.bin");
  std::filesystem::rename(meta_tmp, dir / "checkpoint.json");
}

RunState load_checkpoint(const RunConfig& cfg, const std::filesystem::path& dir) {
  std::ifstream is(dir / "checkpoint.json");
  if (!is) throw ConfigError("no checkpoint in " + dir.string());
  json meta;
  try {
    meta = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ParseError((dir / "checkpoint.json").string() + ": " + e.what());
  }
  if (meta.value("config_hash", "") != cfg.training_hash()) {
    throw ConfigError("checkpoint in " + dir.string() + " was written under a different training configuration");
  }
  RunState st = initial_state(cfg);
  st.detector.load(dir / "checkpoint.bin");
  st.episode = meta.at("episode").get<int>();
  std::istringstream rs(meta.at("rng").get<std::string>());
  rs >> st.rng;
  if (!rs) throw ParseError("corrupt rng state in " + dir.string());
  return st;
}

EpisodeSettings meta_train_settings(const RunConfig& cfg) {
  EpisodeSettings es;
  es.sampler = cfg.sampler;
  es.multiway = cfg.toggles.mwst;
  es.focal = cfg.focal;
  es.lambda_mm = cfg.lambda_mm;
  es.mm = cfg.toggles.mm;
  es.gp = false;
  es.msda = false;
  es.flip_prob = cfg.flip_prob;
  return es;
}

RunState meta_train(const RunConfig& cfg, const DetectionDataset& train, const TrainOptions& opts) {
  cfg.validate();
  if (train.class_ids(Split::base).empty()) throw ConfigError("meta-training needs base classes");
  RunState st = opts.resume_from.empty() ? initial_state(cfg) : load_checkpoint(cfg, opts.resume_from);
  const int total = cfg.meta_train_episodes;
  const int end = std::min(total, opts.stop_after.value_or(total));
  const EpisodeSettings es = meta_train_settings(cfg);

  std::ofstream log;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    const auto log_path = opts.out_dir / "loss.jsonl";
    std::vector<LossRecord> kept;
    if (!opts.resume_from.empty() && std::filesystem::exists(log_path)) {
      for (const auto& r : read_loss_log(log_path))
        if (r.episode < st.episode) kept.push_back(r);
    }
    log.open(log_path, std::ios::trunc);
    if (!log) throw Error("cannot write " + log_path.string());
    for (const auto& r : kept) log << to_json(r).dump() << "\n";
  }

  while (st.episode < end) {
    const double lr = learning_rate(cfg.optim, st.episode, total);
    LossRecord rec;
    try {
      rec = train_episode(st.detector, train, es, cfg.optim, lr, st.rng);
    } catch (const TrainingError& e) {
      throw TrainingError("episode " + std::to_string(st.episode) + ": " + e.what());
    }
    rec.episode = st.episode;
    st.history.push_back(rec);
    if (log.is_open()) log << to_json(rec).dump() << "\n";
    ++st.episode;
    if (opts.verbose && st.episode % 100 == 0) {
      double acc = 0.0;
      int n = 0;
      for (auto it = st.history.rbegin(); it != st.history.rend() && n < 100; ++it) {
        if (it->skipped) continue;
        acc += it->total;
        ++n;
      }
      std::cerr << "episode " << st.episode << "/" << total << " loss " << (n ? acc / n : 0.0) << " lr " << lr
                << "\n";
    }
    if (!opts.out_dir.empty() && cfg.checkpoint_every > 0 && st.episode % cfg.checkpoint_every == 0) {
      log.flush();
      save_checkpoint(st, cfg, opts.out_dir);
    }
  }
  if (!opts.out_dir.empty()) save_checkpoint(st, cfg, opts.out_dir);
  return st;
}

}  // namespace fsrn
