// Acceptance checks, one per criterion. Prints one PASS/FAIL line each.
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "fsrn/error.hpp"
#include "fsrn/harness.hpp"
#include "support.hpp"

using namespace fsrn;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

Outcome loss_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  // Independent transcription of the two-term focal loss.
  auto ref = [](double p, int t, double a, double g) {
    return -(a * t * std::pow(1 - p, g) * std::log(p) + (1 - a) * (1 - t) * std::pow(p, g) * std::log(1 - p));
  };
  double worst = 0;
  int n = 0;
  for (int i = 0; i < 10; ++i) {
    const double p = 0.05 + 0.1 * i;
    for (int j = 0; j < 10; ++j) {
      const double a = 0.05 + 0.1 * j;
      for (int t : {0, 1})
        for (double g : {0.0, 1.0, 2.0}) {
          worst = std::max(worst, std::abs(focal_loss(p, t, FocalParams{a, g}) - ref(p, t, a, g)));
          ++n;
        }
    }
  }
  double bce_gap = 0;
  for (int i = 1; i < 100; ++i) {
    const double p = i / 100.0;
    for (int t : {0, 1}) {
      const double bce = -(t * std::log(p) + (1 - t) * std::log(1 - p));
      bce_gap = std::max(bce_gap, std::abs(focal_loss(p, t, FocalParams{0.5, 0.0}) - 0.5 * bce));
    }
  }
  const double mm = max_margin_loss({{{0, 0}, {2, 0}}, {{0, 4}, {0, 6}}}).value;
  const double mm_zero = max_margin_loss({{{1, 2}, {1, 2}}, {{5, 0}, {5, 0}}}).value;
  const double secs = seconds_since(t0);
  const bool ok = worst < 1e-9 && bce_gap < 1e-9 && std::abs(mm - 1.0 / 26.0) < 1e-9 && mm_zero == 0.0 && secs < 1.0;
  return {ok, fmt("focal max err %.2e over %d points, 0.5*BCE gap %.2e, MM %.6f (1/26=%.6f), zero-variance MM %g, %.3fs",
                  worst, n, bce_gap, mm, 1.0 / 26.0, mm_zero, secs)};
}

Outcome gradient_checks() {
  using fsrn::testing::gradient_check;
  using fsrn::testing::random_tensor;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  const FocalParams fp{0.25, 2.0};
  const std::vector<std::int8_t> labels{1, 0, 0, -1, 1, 0, 1, 0, 0, 0};
  const double e_focal = gradient_check({random_tensor(Shape{1, 10, 1, 1}, rng)},
                                        [&](Graph& g, const std::vector<Graph::Var>& v) {
                                          return ops::sigmoid_focal_sum(g, v[0], labels, fp);
                                        });
  const double e_mm = gradient_check({random_tensor(Shape{6, 4, 1, 1}, rng)},
                                     [&](Graph& g, const std::vector<Graph::Var>& v) {
                                       return ops::max_margin(g, v[0], {0, 0, 1, 1, 2, 2});
                                     });
  const std::vector<std::size_t> idx{1, 4, 6, 9};
  const std::vector<double> tgt{0.3, -1.7, 0.05, 2.5};
  const double e_l1 = gradient_check({random_tensor(Shape{1, 10, 1, 1}, rng)},
                                     [&](Graph& g, const std::vector<Graph::Var>& v) {
                                       return ops::smooth_l1_sum(g, v[0], idx, tgt);
                                     });

  // Whole objective on a tiny detector: analytic weight gradients against
  // central differences.
  ShapesConfig sc;
  sc.class_pool = {1, 2, 3};
  sc.classes_per_image_weights = {1.0};
  sc.max_instances = 2;
  sc.min_object_size = 12;
  sc.max_object_size = 28;
  auto specs = default_class_specs();
  const auto ds = generate_shapes_dataset(5, 16, specs, 64, sc);
  SamplerConfig samp;
  samp.n_ways = 2;
  samp.k_shots = 2;
  samp.dropout_prob = 0.0;
  samp.crop_size = 32;
  samp.negative_pool = {1, 2, 3};
  std::optional<EpisodeTask> task;
  std::mt19937_64 srng(3);
  for (const auto& r : ds.records()) {
    if (r.classes().size() != 1) continue;
    task = sample_episode(ds, r, samp, srng);
    if (task) break;
  }
  if (!task) return {false, "no single-class query for the end-to-end check"};
  EpisodeSettings es;
  es.sampler = samp;
  es.lambda_mm = 0.1;
  Detector det(fsrn::testing::tiny_network());
  // Value plus the branch signature: relu masks, clamps and nearest-mean picks.
  auto objective = [&]() {
    Graph g;
    auto p = det.bind(g, false);
    const double v = g.value(task_loss(g, det, p, *task, es, nullptr).total).item();
    return std::pair{v, g.branch_signature()};
  };
  const std::uint64_t base_sig = objective().second;
  det.zero_grad();
  {
    Graph g;
    auto p = det.bind(g, true);
    g.backward(task_loss(g, det, p, *task, es, nullptr).total);
  }
  const double h = 1e-5;
  double e_total = 0;
  std::size_t checked = 0;
  std::size_t kinked = 0;
  for (auto& prm : det.parameters()) {
    for (std::size_t i = 0; i < prm.value.size(); ++i) {
      const double orig = prm.value[i];
      prm.value[i] = orig + h;
      const auto [up, sig_up] = objective();
      prm.value[i] = orig - h;
      const auto [down, sig_down] = objective();
      prm.value[i] = orig;
      // A step that crosses a kink measures a different piece; the central
      // difference says nothing about the derivative there.
      if (sig_up != base_sig || sig_down != base_sig) {
        ++kinked;
        continue;
      }
      const double num = (up - down) / (2 * h);
      const double ana = prm.grad[i];
      e_total = std::max(e_total, std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-4}));
      ++checked;
    }
  }
  const double secs = seconds_since(t0);
  // Kink skips must stay a small minority or the check proves little.
  const bool enough = checked > 0 && kinked * 10 < checked + kinked;
  const bool ok = e_focal < 1e-3 && e_mm < 1e-3 && e_l1 < 1e-3 && e_total < 1e-3 && enough && secs < 60;
  return {ok, fmt("rel err focal %.1e, max-margin %.1e, smooth-L1 %.1e, total objective %.1e over %zu weights "
                  "(%zu skipped at kinks), %.1fs",
                  e_focal, e_mm, e_l1, e_total, checked, kinked, secs)};
}

Outcome receptive_fields() {
  std::vector<int> got;
  for (const auto& c : rf_sweep_configs()) got.push_back(c.receptive_field());
  const std::vector<int> direct{receptive_field(1), receptive_field(3), receptive_field(5), receptive_field(6)};
  const std::vector<int> want{3, 7, 11, 13};
  std::string s;
  for (int v : got) s += std::to_string(v) + " ";
  return {got == want && direct == want, "sweep receptive fields " + s};
}

Outcome transfer_table() {
  struct Row {
    const char* name;
    ApAr base, novel;
    double pt, pt50, pt75, rt;  // NaN where the table has no entry
  };
  const double na = std::nan("");
  const Row rows[] = {
      {"MetaYOLO", {13.8, 0, 0, 15.5}, {5.6, 0, 0, 14.4}, 0.40, na, na, 0.93},
      {"FSOD-RPN (RPN only)", {5.54, 13.35, 3.65, 21.23}, {0.98, 3.40, 0.31, 11.84}, 0.18, 0.25, 0.08, 0.55},
      {"FSOD-RPN", {24.26, 38.04, 26.44, 40.56}, {11.95, 22.37, 11.79, 30.84}, 0.49, 0.59, 0.45, 0.76},
  };
  int checked = 0;
  int ok = 0;
  double worst = 0;
  for (const auto& r : rows) {
    const Transferability t = transferability(r.base, r.novel);
    const std::pair<std::optional<double>, double> pairs[] = {{t.pt, r.pt}, {t.pt50, r.pt50}, {t.pt75, r.pt75}, {t.rt, r.rt}};
    for (const auto& [got, want] : pairs) {
      if (std::isnan(want)) continue;
      ++checked;
      if (!got) continue;
      const double d = std::abs(*got - want);
      worst = std::max(worst, d);
      if (d <= 0.01) ++ok;
    }
  }
  return {ok == checked && checked >= 8, fmt("%d of %d published ratios within 0.01, worst gap %.4f", ok, checked, worst)};
}

Outcome sampler_properties() {
  RunConfig cfg;
  const Benchmark bench = build_benchmark(cfg);
  const auto& ds = bench.train;
  SamplerConfig sc = cfg.sampler;
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::size_t> pick(0, ds.records().size() - 1);
  const int n_episodes = 10000;
  long presented = 0;
  long retained = 0;
  int skips = 0;
  int wrong_skips = 0;
  int violations = 0;
  for (int e = 0; e < n_episodes; ++e) {
    const ImageRecord& q = ds.records()[pick(rng)];
    const auto present = q.classes();
    const auto t = sample_episode(ds, q, sc, rng);
    presented += static_cast<long>(present.size());
    if (!t) {
      ++skips;
      continue;
    }
    if (t->positive_classes.empty()) ++wrong_skips;
    retained += static_cast<long>(t->positive_classes.size());
    if (static_cast<int>(t->support.size()) != sc.n_ways) ++violations;
    for (const auto& [c, shots] : t->support) {
      if (static_cast<int>(shots.size()) != sc.k_shots) ++violations;
      for (const auto& s : shots)
        if (s.class_id != c || s.pixels.width != sc.crop_size) ++violations;
    }
    for (int z : t->negative_classes)
      if (std::find(present.begin(), present.end(), z) != present.end()) ++violations;
    for (const auto& a : t->query.annotations)
      if (std::find(t->positive_classes.begin(), t->positive_classes.end(), a.class_id) == t->positive_classes.end())
        ++violations;
  }
  // Images carry at most N classes here, so only dropout removes positives.
  const double rate = static_cast<double>(retained) / presented;
  const double expect = 1.0 - sc.dropout_prob;
  const double sigma = std::sqrt(expect * (1 - expect) / presented);
  const bool within = std::abs(rate - expect) <= 3 * sigma;

  // Skip: a one-class query is skipped exactly when its class is dropped.
  const ImageRecord* single = nullptr;
  for (const auto& r : ds.records())
    if (r.classes().size() == 1) {
      single = &r;
      break;
    }
  int single_skips = 0;
  const int n_single = 4000;
  SamplerConfig fast = sc;
  fast.extract_crops = false;
  for (int e = 0; e < n_single && single; ++e)
    if (!sample_episode(ds, *single, fast, rng)) ++single_skips;
  const double sr = static_cast<double>(single_skips) / n_single;
  const double ss = std::sqrt(sc.dropout_prob * (1 - sc.dropout_prob) / n_single);
  const bool skip_ok = single && std::abs(sr - sc.dropout_prob) <= 3 * ss && skips > 0 && wrong_skips == 0;
  return {violations == 0 && within && skip_ok,
          fmt("%d episodes, %d structure violations, retention %.4f vs %.2f (3 sigma %.4f), skips %d, single-class "
              "skip rate %.3f",
              n_episodes, violations, rate, expect, 3 * sigma, skips, sr)};
}

Outcome foreground_yield_check() {
  RunConfig cfg;
  const Benchmark bench = build_benchmark(cfg);
  const auto st = dataset_statistics(bench.train);
  SamplerConfig sc = cfg.sampler;
  sc.dropout_prob = 0.5;
  const double multi = foreground_yield(bench.train, SamplingMode::multiway, sc, 4000);
  const double binary = foreground_yield(bench.train, SamplingMode::binary, sc, 4000);
  const double half = st.mean_annotations / 2;
  const double ratio = st.mean_annotations / st.mean_classes;
  const bool ok = std::abs(multi - half) <= 0.1 * half && multi > ratio;
  return {ok, fmt("m=%.3f c=%.3f: multi-way yield %.3f vs m/2 %.3f, binary estimate m/c %.3f (Monte-Carlo %.3f)",
                  st.mean_annotations, st.mean_classes, multi, half, ratio, binary)};
}

Outcome fusion_identities() {
  RunConfig cfg;
  Detector det(cfg.effective_network());
  std::mt19937_64 rng(7);
  const Tensor img = fsrn::testing::random_tensor(Shape{1, 3, 128, 128}, rng, 0.3);
  Graph g;
  auto p = det.bind(g, false);
  const auto pyr = det.backbone_fpn(g, p, g.constant(img));
  const int c = cfg.network.backbone.fpn_channels;

  bool ones = true;
  const auto fused = fuse(g, pyr, g.constant(Tensor(Shape{1, c, 1, 1}, 1.0)));
  for (std::size_t l = 0; l < pyr.levels.size(); ++l) ones = ones && same_bits(g.value(fused.levels[l]), g.value(pyr.levels[l]));

  const Tensor crop = fsrn::testing::random_tensor(Shape{1, 3, 64, 64}, rng, 0.3);
  const auto spyr = det.backbone_fpn(g, p, g.constant(crop));
  const auto k1 = pool_support_prototype(g, spyr, {0}, {0});
  const bool single = same_bits(g.value(k1.prototype), g.value(ops::global_avg_pool(g, spyr.levels[0])));

  // Five identical shots: zero spread, so the Gaussian draw is the mean.
  std::vector<Graph::Var> shots(5, k1.shots[0]);
  auto mean = ops::mean(g, shots);
  auto drawn = ops::gaussian_perturb(g, mean, shots, rng);
  const bool gp = same_bits(g.value(drawn), g.value(mean));

  const auto loc_a = det.localization_subnet(g, p, pyr);
  det.classification_subnet(g, p, pyr, g.constant(fsrn::testing::random_tensor(Shape{1, c, 1, 1}, rng)));
  Graph g2;
  auto p2 = det.bind(g2, false);
  const auto pyr2 = det.backbone_fpn(g2, p2, g2.constant(img));
  det.classification_subnet(g2, p2, pyr2, g2.constant(fsrn::testing::random_tensor(Shape{3, c, 1, 1}, rng)));
  const auto loc_b = det.localization_subnet(g2, p2, pyr2);
  bool loc = true;
  for (std::size_t l = 0; l < loc_a.size(); ++l) loc = loc && same_bits(g.value(loc_a[l]), g2.value(loc_b[l]));
  auto yn = [](bool b) { return b ? "yes" : "no"; };
  return {ones && single && gp && loc,
          fmt("ones-fusion identity %s, K=1 prototype equals GAP %s, zero-spread Gaussian equals mean %s, "
              "box deltas support-invariant %s",
              yn(ones), yn(single), yn(gp), yn(loc))};
}

Outcome end_to_end(const fs::path& work) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg;
  cfg.output_dir = (work / "shared").string();
  const Benchmark bench = build_benchmark(cfg);
  const Detector det = trained_detector(cfg, bench, true);
  const auto res = meta_test(det, cfg, bench);
  std::cerr << format_report(res.report, "FSRN");
  const double b50 = res.report.base.ap50;
  const double n50 = res.report.novel.ap50;
  const double pt50 = res.report.transfer.pt50.value_or(0.0);
  const double secs = seconds_since(t0);
  return {b50 >= 0.5 && n50 >= 0.2 && pt50 >= 0.25,
          fmt("bAP50 %.3f (>= 0.50), nAP50 %.3f (>= 0.20), PT50 %.3f (>= 0.25), %.0fs including any cached training",
              b50, n50, pt50, secs)};
}

Outcome ablation_direction(const fs::path& work) {
  RunConfig base;
  base.output_dir = (work / "shared").string();
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  const AblationReport abl = run_ablation({'A', 'B', 'C', 'D', 'E'}, base, seeds, true);
  std::cerr << abl.table();
  const auto& r = abl.rows;
  const double nA = r[0].novel.ap, nB = r[1].novel.ap, nC = r[2].novel.ap;
  bool frozen = true;
  for (std::size_t s = 0; s < seeds.size(); ++s)
    for (int row : {3, 4}) {
      frozen = frozen && r[row].runs[s].base.ap == r[2].runs[s].base.ap;
    }
  const AblationReport rf = run_rf_sweep(base, seeds, true);
  std::cerr << rf.table();
  // Largest anchor spans just under ten cells.
  const double extent =
      generate_anchors(pyramid_level_shapes(128, 128, base.network.backbone.strides), base.network.subnet.n_anchors_per_pixel)
          .max_extent_cells();
  std::size_t peak = 0;
  for (std::size_t i = 1; i < rf.rows.size(); ++i)
    if (rf.rows[i].novel.ap > rf.rows[peak].novel.ap) peak = i;
  const bool peak_ok = rf.rows[peak].receptive_field >= extent;
  const bool rf3_worse = rf.rows[0].novel.ap < rf.rows[peak].novel.ap;
  std::string sweep;
  for (const auto& row : rf.rows) sweep += fmt("RF%d=%.2f ", row.receptive_field, 100 * row.novel.ap);
  const bool ok = nB > nA && nC >= nB && frozen && peak_ok && rf3_worse;
  return {ok, fmt("nAP A %.2f, B %.2f, C %.2f; D/E bAP equal to C %s; sweep nAP %s(anchor extent %.2f)", 100 * nA,
                  100 * nB, 100 * nC, frozen ? "yes" : "no", sweep.c_str(), extent)};
}

Outcome determinism(const fs::path& work) {
  RunConfig cfg;
  cfg.meta_train_episodes = 100;
  cfg.checkpoint_every = 50;
  const Benchmark bench = build_benchmark(cfg);
  auto run = [&](const std::string& name, std::optional<int> stop, bool resume) {
    TrainOptions o;
    o.out_dir = work / name;
    if (!resume) fs::remove_all(o.out_dir);
    o.stop_after = stop;
    if (resume) o.resume_from = o.out_dir;
    return meta_train(cfg, bench.train, o);
  };
  const RunState a = run("det_a", std::nullopt, false);
  const RunState b = run("det_b", std::nullopt, false);
  const bool logs = slurp(work / "det_a" / "loss.jsonl") == slurp(work / "det_b" / "loss.jsonl") &&
                    !slurp(work / "det_a" / "loss.jsonl").empty();
  run("det_c", 50, false);
  const RunState c = run("det_c", std::nullopt, true);
  bool weights = c.episode == 100;
  for (std::size_t i = 0; i < a.detector.parameters().size(); ++i)
    weights = weights && same_bits(a.detector.parameters()[i].value, c.detector.parameters()[i].value);
  const bool resumed_log = slurp(work / "det_c" / "loss.jsonl") == slurp(work / "det_a" / "loss.jsonl");
  const bool blobs = slurp(work / "det_c" / "checkpoint.bin") == slurp(work / "det_a" / "checkpoint.bin");
  auto yn = [](bool v) { return v ? "yes" : "no"; };
  return {logs && weights && resumed_log && blobs,
          fmt("identical loss logs %s, 50+50 resume matches 100 in weights %s, loss log %s, checkpoint blob %s",
              yn(logs), yn(weights), yn(resumed_log), yn(blobs))};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  int only = 0;
  std::string work = "acceptance_runs";
  app.add_option("--criterion", only, "run a single criterion (1-10); all when omitted")->check(CLI::Range(1, 10));
  app.add_option("--work-dir", work, "directory for training caches and scratch runs");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  const std::vector<std::pair<int, std::function<Outcome()>>> checks{
      {1, loss_oracles},
      {2, gradient_checks},
      {3, receptive_fields},
      {4, transfer_table},
      {5, sampler_properties},
      {6, foreground_yield_check},
      {7, fusion_identities},
      {8, [&] { return end_to_end(work); }},
      {9, [&] { return ablation_direction(work); }},
      {10, [&] { return determinism(work); }},
  };
  int failed = 0;
  for (const auto& [id, fn] : checks) {
    if (only != 0 && id != only) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << " | " << o.detail << std::endl;
    if (!o.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
