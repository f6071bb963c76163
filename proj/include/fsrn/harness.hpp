#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fsrn/adaptation.hpp"
#include "fsrn/datamodel.hpp"
#include "fsrn/evaluation.hpp"
#include "fsrn/losses.hpp"
#include "fsrn/network.hpp"
#include "fsrn/sampler.hpp"
#include "json.hpp"

namespace fsrn {

struct DataConfig {
  /// Annotation files; when `train` is empty the synthetic benchmark is
  /// generated from `seed` instead.
  std::string train;
  std::string finetune;
  std::string test;
  std::uint64_t seed = 7;
  int image_size = 128;
  int n_train = 600;
  int n_finetune_pool = 400;
  int n_test = 120;
};

struct OptimConfig {
  double lr = 0.03;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  /// Fractions of the run after which the rate is multiplied by `decay`.
  std::vector<double> steps{0.75, 0.9};
  double decay = 0.1;
  int warmup = 100;
  double grad_clip = 0.5;  // global norm; loose clipping let single spikes kill the relus
};

struct Toggles {
  bool mwst = true;       // multi-way episodes with class dropout, else binary
  bool early_msf = true;  // fuse before the whole classification subnet
  bool msda = true;
  bool gp = true;
  bool mm = true;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  DataConfig data;
  SamplerConfig sampler;
  NetworkConfig network;
  /// Explicit fusion depth; otherwise derived from toggles.early_msf.
  std::optional<int> post_fusion_layers;
  FocalParams focal;
  double lambda_mm = 0.1;
  OptimConfig optim;
  OptimConfig finetune_optim{0.002, 0.9, 1e-4, {0.8}, 0.1, 20, 10.0};
  int meta_train_episodes = 2000;
  int finetune_episodes = 500;
  int checkpoint_every = 500;
  double flip_prob = 0.5;
  MsdaConfig msda;
  Toggles toggles;

  void validate() const;
  /// Network with the fusion depth resolved.
  [[nodiscard]] NetworkConfig effective_network() const;
  /// Hash over every field that influences meta-training.
  [[nodiscard]] std::string training_hash() const;
};

RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& cfg);
/// Reads a JSON config; FSRN_SEED in the environment overrides `seed`.
RunConfig load_config(const std::filesystem::path& path);
void apply_seed_override(RunConfig& cfg);

/// Incremental ablation rows: A vanilla, B +MWST, C +early MSF, D +MSDA, E +GP.
RunConfig preset(char name, RunConfig base = {});
std::string preset_label(char name);

struct RfConfig {
  int n_conv_layers = 5;
  int post_fusion_layers = 5;
  [[nodiscard]] int receptive_field() const;
};
/// Subnet depths giving post-fusion receptive fields 3, 7, 11 and 13.
std::vector<RfConfig> rf_sweep_configs();

// ---------------------------------------------------------------------------

struct Benchmark {
  DetectionDataset train;     // base classes only
  DetectionDataset finetune;  // K annotations of every class
  DetectionDataset test;
};
Benchmark build_benchmark(const RunConfig& cfg);

struct LossRecord {
  int episode = 0;
  bool skipped = false;
  double focal = 0.0;
  double loc = 0.0;
  double mm = 0.0;
  double total = 0.0;
  int n_foreground = 0;
  double lr = 0.0;
};
nlohmann::json to_json(const LossRecord& r);
LossRecord loss_record_from_json(const nlohmann::json& j);
std::vector<LossRecord> read_loss_log(const std::filesystem::path& path);

struct RunState {
  Detector detector;
  int episode = 0;
  std::mt19937_64 rng;
  std::vector<LossRecord> history;
};

struct TrainOptions {
  /// Stop once this many episodes are done in total (checkpointing first).
  std::optional<int> stop_after;
  /// Checkpoint directory to resume from.
  std::filesystem::path resume_from;
  /// Checkpoints and the loss log are written here when non-empty.
  std::filesystem::path out_dir;
  bool verbose = false;
};

RunState initial_state(const RunConfig& cfg);
RunState meta_train(const RunConfig& cfg, const DetectionDataset& train, const TrainOptions& opts = {});

void save_checkpoint(const RunState& st, const RunConfig& cfg, const std::filesystem::path& dir);
/// Restores weights, episode counter and rng; throws ConfigError when the
/// checkpoint was written under a different training configuration.
RunState load_checkpoint(const RunConfig& cfg, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------

struct EpisodeSettings {
  SamplerConfig sampler;
  bool multiway = true;
  FocalParams focal;
  double lambda_mm = 0.1;
  bool mm = true;
  bool gp = false;
  bool msda = false;
  MsdaConfig msda_cfg;
  double flip_prob = 0.5;
};

/// One episode: samples a task, runs forward/backward and applies an SGD
/// step at `lr`. Returns a skipped record when the task is a Skip.
LossRecord train_episode(Detector& det, const DetectionDataset& ds, const EpisodeSettings& es,
                         const OptimConfig& opt, double lr, std::mt19937_64& rng);

/// Loss of one fixed task without updating anything; used by gradient checks.
struct TaskLoss {
  Graph::Var total;
  LossBreakdown parts;
  int n_foreground = 0;
};
/// `support_scale` multiplies support box sizes before pyramid level routing.
TaskLoss task_loss(Graph& g, Detector& det, const Detector::Bound& p, const EpisodeTask& task,
                   const EpisodeSettings& es, std::mt19937_64* gp_rng, double support_scale = 1.0);

EpisodeSettings meta_train_settings(const RunConfig& cfg);
/// Meta-test adaptation: every class may serve as negative, MSDA and GP as
/// toggled, focal alpha raised when MSDA is on.
EpisodeSettings finetune_settings(const RunConfig& cfg, const std::vector<int>& all_classes);

double learning_rate(const OptimConfig& opt, int episode, int total_episodes);

/// Meta-trained detector for `cfg`, reusing or resuming a checkpoint under
/// `<output_dir>/cache/<training hash>` when one exists.
Detector trained_detector(const RunConfig& cfg, const Benchmark& bench, bool verbose = false);

// ---------------------------------------------------------------------------

/// Prototype of every class from the K shots in `shots`.
std::map<int, Tensor> class_prototypes(Detector& det, const DetectionDataset& shots, const std::vector<int>& classes,
                                       int crop_size = 64);
/// Detections of `classes` on every test image.
std::vector<Detection> detect(Detector& det, const DetectionDataset& test, const std::map<int, Tensor>& prototypes,
                              const std::vector<int>& classes, const PostprocessConfig& pp = {});

struct MetaTestResult {
  EvalReport report;
  std::vector<Detection> base_detections;
  std::vector<Detection> novel_detections;
  std::vector<LossRecord> finetune_history;
};
MetaTestResult meta_test(const Detector& trained, const RunConfig& cfg, const Benchmark& bench);

// ---------------------------------------------------------------------------

struct AblationRow {
  std::string name;
  int receptive_field = 0;
  std::vector<EvalReport> runs;  // one per seed
  ApAr base;                     // means over seeds
  ApAr novel;
  Transferability transfer;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  [[nodiscard]] std::string table() const;
  [[nodiscard]] nlohmann::json to_json() const;
};

/// Runs the listed presets for every seed. Rows that share a training
/// configuration reuse one meta-trained detector.
AblationReport run_ablation(const std::vector<char>& presets, const RunConfig& base,
                            const std::vector<std::uint64_t>& seeds, bool verbose = false);
/// Early-fusion runs at the receptive fields of rf_sweep_configs().
AblationReport run_rf_sweep(const RunConfig& base, const std::vector<std::uint64_t>& seeds, bool verbose = false);

// ---------------------------------------------------------------------------

void plot_loss_svg(const std::vector<LossRecord>& history, const std::filesystem::path& path, int smooth = 50);
void plot_pr_svg(const std::vector<std::pair<std::string, std::vector<double>>>& curves,
                 const std::filesystem::path& path);

}  // namespace fsrn
