#include <chrono>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "fsrn/error.hpp"
#include "fsrn/harness.hpp"

using namespace fsrn;
namespace fs = std::filesystem;

namespace {

RunConfig config_or_default(const std::string& path) {
  if (!path.empty()) return load_config(path);
  RunConfig cfg;
  apply_seed_override(cfg);
  return cfg;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stoull(item, &pos));
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("bad seed list entry '" + item + "'");
    }
  }
  if (out.empty()) throw UsageError("empty seed list");
  return out;
}

int cmd_gen_shapes(const std::string& out, std::uint64_t seed, int n, int size, const std::string& pool) {
  const auto specs = default_class_specs();
  ShapesConfig cfg;
  if (pool != "all") {
    const Split want = split_from_string(pool);
    for (const auto& [id, info] : class_table(specs))
      if (info.split == want) cfg.class_pool.push_back(id);
  }
  const auto ds = generate_shapes_dataset(seed, n, specs, size, cfg);
  save_dataset(ds, out);
  const auto st = dataset_statistics(ds);
  std::cout << "wrote " << ds.records().size() << " images, " << ds.annotation_count() << " annotations to " << out
            << " (m=" << st.mean_annotations << ", c=" << st.mean_classes << ")\n";
  return 0;
}

int cmd_episodes(const DetectionDataset& ds, int n, const SamplerConfig& sc, bool binary, bool yield) {
  SamplerConfig cfg = sc;
  cfg.extract_crops = false;
  if (yield) {
    const auto st = dataset_statistics(ds);
    const double multi = foreground_yield(ds, SamplingMode::multiway, cfg, n);
    const double bin = foreground_yield(ds, SamplingMode::binary, cfg, n);
    std::cout << "m=" << st.mean_annotations << " c=" << st.mean_classes << "\n"
              << "multiway yield " << multi << " (m/2 = " << st.mean_annotations / 2 << ")\n"
              << "binary yield " << bin << " (m/c = " << st.mean_annotations / st.mean_classes << ")\n";
    return 0;
  }
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, ds.records().size() - 1);
  for (int e = 0; e < n; ++e) {
    const ImageRecord& q = ds.records()[pick(rng)];
    if (q.annotations.empty()) continue;
    std::optional<EpisodeTask> task;
    if (binary) {
      const auto cls = q.classes();
      task = sample_binary_episode(ds, q, cls[std::uniform_int_distribution<std::size_t>(0, cls.size() - 1)(rng)],
                                   cfg.k_shots, rng, cfg);
    } else {
      task = sample_episode(ds, q, cfg, rng);
    }
    nlohmann::json j{{"query", q.id}};
    if (!task) {
      j["skip"] = true;
    } else {
      nlohmann::json sup = nlohmann::json::object();
      for (const auto& [c, shots] : task->support) {
        std::vector<int> ids;
        for (const auto& s : shots) ids.push_back(s.annotation_id);
        sup[std::to_string(c)] = ids;
      }
      j["support"] = sup;
      j["positive"] = task->positive_classes;
      j["negative"] = task->negative_classes;
      j["background"] = task->background_classes;
      j["targets"] = task->query.annotations.size();
    }
    std::cout << j.dump() << "\n";
  }
  return 0;
}

int cmd_train(const std::string& config, std::optional<int> episodes, const std::string& resume, std::string out) {
  RunConfig cfg = config_or_default(config);
  if (episodes) cfg.meta_train_episodes = *episodes;
  if (out.empty()) out = (fs::path(cfg.output_dir) / "train").string();
  const Benchmark bench = build_benchmark(cfg);
  TrainOptions opts;
  opts.out_dir = out;
  opts.resume_from = resume;
  opts.verbose = true;
  const auto t0 = std::chrono::steady_clock::now();
  const RunState st = meta_train(cfg, bench.train, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  {
    std::ofstream os(fs::path(out) / "config.json");
    os << config_to_json(cfg).dump(2) << "\n";
  }
  std::cout << "trained " << st.episode << " episodes in " << secs << " s; checkpoint in " << out << "\n";
  return 0;
}

int cmd_test(const std::string& checkpoint, const std::string& config, std::string out) {
  RunConfig cfg = config_or_default(config);
  if (out.empty()) out = (fs::path(cfg.output_dir) / "test").string();
  fs::create_directories(out);
  const Benchmark bench = build_benchmark(cfg);
  const RunState st = load_checkpoint(cfg, checkpoint);
  const MetaTestResult res = meta_test(st.detector, cfg, bench);
  write_detections(fs::path(out) / "base.jsonl", res.base_detections);
  write_detections(fs::path(out) / "novel.jsonl", res.novel_detections);
  {
    std::ofstream os(fs::path(out) / "report.json");
    os << report_json(res.report) << "\n";
  }
  {
    std::ofstream os(fs::path(out) / "finetune.jsonl");
    for (const auto& r : res.finetune_history) os << to_json(r).dump() << "\n";
  }
  save_dataset(bench.test, fs::path(out) / "gt");
  for (const auto* m : {&res.report.base, &res.report.novel})
    for (int c : m->skipped) std::cerr << "warning: class " << c << " has no ground truth and is excluded\n";
  std::cout << format_report(res.report, "FSRN");
  return 0;
}

int cmd_ablate(const std::vector<std::string>& presets, const std::string& config, const std::string& seeds,
               bool rf_sweep, const std::string& out) {
  RunConfig cfg = config_or_default(config);
  const auto seed_list = parse_seeds(seeds);
  AblationReport rep;
  if (rf_sweep) {
    rep = run_rf_sweep(cfg, seed_list, true);
  } else {
    std::vector<char> names;
    for (const auto& p : presets) {
      if (p == "all") {
        names = {'A', 'B', 'C', 'D', 'E'};
        break;
      }
      if (p.size() != 1) throw UsageError("preset must be one of A-E or all, got " + p);
      names.push_back(p[0]);
    }
    rep = run_ablation(names, cfg, seed_list, true);
  }
  if (!out.empty()) {
    std::ofstream os(out);
    if (!os) throw Error("cannot write " + out);
    os << rep.to_json().dump(2) << "\n";
  }
  std::cout << rep.table();
  return 0;
}

int cmd_metrics(const std::string& base, const std::string& novel, const std::string& gt) {
  const auto ds = load_dataset(gt, {}, LoadOptions{false});
  std::vector<Annotation> gts;
  for (const auto& r : ds.records()) gts.insert(gts.end(), r.annotations.begin(), r.annotations.end());
  const SplitMetrics bm = evaluate(read_detections(base), gts, ds.class_ids(Split::base));
  const SplitMetrics nm = evaluate(read_detections(novel), gts, ds.class_ids(Split::novel));
  for (const auto* m : {&bm, &nm})
    for (int c : m->skipped) std::cerr << "warning: class " << c << " has no ground truth and is excluded\n";
  const EvalReport rep = make_report(bm, nm);
  if (!rep.transfer.pt || !rep.transfer.rt) std::cerr << "warning: zero base metric, ratio reported as n/a\n";
  std::cout << format_report(rep, "detections");
  return 0;
}

int cmd_plot(const std::string& log, const std::string& out, const std::string& report) {
  fs::create_directories(out);
  const auto hist = read_loss_log(log);
  plot_loss_svg(hist, fs::path(out) / "loss.svg");
  std::cout << "wrote " << (fs::path(out) / "loss.svg").string() << "\n";
  if (!report.empty()) {
    std::ifstream is(report);
    if (!is) throw ParseError("cannot open " + report);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(report + ": " + e.what());
    }
    std::vector<std::pair<std::string, std::vector<double>>> curves;
    for (const char* split : {"base", "novel"}) {
      if (j.contains(split) && j[split].contains("pr_curve50")) {
        curves.emplace_back(split, j[split]["pr_curve50"].get<std::vector<double>>());
      }
    }
    plot_pr_svg(curves, fs::path(out) / "pr.svg");
    std::cout << "wrote " << (fs::path(out) / "pr.svg").string() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"few-shot dense detector: data generation, meta-training, meta-testing and evaluation"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-shapes", "render the synthetic shapes benchmark");
  std::string gen_out;
  std::uint64_t gen_seed = 7;
  int gen_n = 200;
  int gen_size = 128;
  std::string gen_pool = "all";
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--n-images,--n", gen_n, "number of images");
  gen->add_option("--size", gen_size, "image side in pixels");
  gen->add_option("--classes", gen_pool, "all, base or novel")->check(CLI::IsMember({"all", "base", "novel"}));

  auto* epi = app.add_subcommand("episodes", "sample episodes or measure foreground yield");
  std::string epi_data;
  std::string epi_config;
  int epi_n = 10;
  std::optional<int> epi_ways;
  std::optional<int> epi_shots;
  std::optional<double> epi_dropout;
  std::optional<std::uint64_t> epi_seed;
  bool epi_binary = false;
  bool epi_yield = false;
  auto* epi_data_opt = epi->add_option("--data", epi_data, "annotation file (default: the config's train split)");
  epi->add_option("--config", epi_config, "JSON config supplying sampler settings and the benchmark");
  epi->add_option("--dry-run,--n", epi_n, "number of episodes to dump");
  epi->add_option("--ways", epi_ways, "N");
  epi->add_option("--shots", epi_shots, "K");
  epi->add_option("--dropout", epi_dropout, "class dropout probability");
  epi->add_option("--seed", epi_seed, "sampler seed");
  epi->add_flag("--binary", epi_binary, "single-class episodes");
  epi->add_flag("--yield", epi_yield, "print mean foreground annotations per episode");

  auto* train = app.add_subcommand("train", "meta-train on the base classes");
  std::string train_cfg;
  std::optional<int> train_episodes;
  std::string train_resume;
  std::string train_out;
  train->add_option("--config", train_cfg, "JSON config");
  train->add_option("--episodes", train_episodes, "override episodes.meta_train");
  train->add_option("--resume", train_resume, "checkpoint directory to resume from");
  train->add_option("--out", train_out, "output directory (default <output_dir>/train)");

  auto* test = app.add_subcommand("test", "adapt to the novel classes and evaluate");
  std::string test_ckpt;
  std::string test_cfg;
  std::string test_out;
  test->add_option("--checkpoint", test_ckpt, "checkpoint directory")->required();
  test->add_option("--config", test_cfg, "JSON config");
  test->add_option("--out", test_out, "output directory (default <output_dir>/test)");

  auto* abl = app.add_subcommand("ablate", "run ablation presets A-E or the receptive-field sweep");
  std::vector<std::string> abl_presets{"C"};
  std::string abl_cfg;
  std::string abl_seeds = "0";
  bool abl_rf = false;
  std::string abl_out;
  abl->add_option("--preset", abl_presets, "A, B, C, D, E or all (repeatable)");
  abl->add_option("--config", abl_cfg, "JSON config");
  abl->add_option("--seeds", abl_seeds, "comma separated training seeds");
  abl->add_flag("--rf-sweep", abl_rf, "sweep post-fusion receptive fields 3, 7, 11, 13");
  abl->add_option("--out", abl_out, "write the report as JSON");

  auto* met = app.add_subcommand("metrics", "evaluate detection files against ground truth");
  std::string met_base;
  std::string met_novel;
  std::string met_gt;
  met->add_option("--base", met_base, "base-class detections (JSON lines)")->required();
  met->add_option("--novel", met_novel, "novel-class detections (JSON lines)")->required();
  met->add_option("--gt", met_gt, "annotation file")->required();

  auto* plot = app.add_subcommand("plot", "render loss and precision-recall curves as SVG");
  std::string plot_log;
  std::string plot_out;
  std::string plot_report;
  plot->add_option("--log", plot_log, "loss log (JSON lines)")->required();
  plot->add_option("--out", plot_out, "output directory")->required();
  plot->add_option("--report", plot_report, "report.json from `test` for PR curves");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_shapes(gen_out, gen_seed, gen_n, gen_size, gen_pool);
    if (*epi) {
      const RunConfig cfg = config_or_default(epi_config);
      SamplerConfig sc = cfg.sampler;
      if (epi_ways) sc.n_ways = *epi_ways;
      if (epi_shots) sc.k_shots = *epi_shots;
      if (epi_dropout) sc.dropout_prob = *epi_dropout;
      if (epi_seed) sc.seed = *epi_seed;
      const DetectionDataset ds = epi_data_opt->count() ? load_dataset(epi_data, {}, LoadOptions{false})
                                                         : build_benchmark(cfg).train;
      return cmd_episodes(ds, epi_n, sc, epi_binary, epi_yield);
    }
    if (*train) return cmd_train(train_cfg, train_episodes, train_resume, train_out);
    if (*test) return cmd_test(test_ckpt, test_cfg, test_out);
    if (*abl) return cmd_ablate(abl_presets, abl_cfg, abl_seeds, abl_rf, abl_out);
    if (*met) return cmd_metrics(met_base, met_novel, met_gt);
    if (*plot) return cmd_plot(plot_log, plot_out, plot_report);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
