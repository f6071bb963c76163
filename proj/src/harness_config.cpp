#include <cstdlib>
#include <fstream>
#include <set>

#include "fsrn/error.hpp"
#include "fsrn/harness.hpp"

namespace fsrn {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.contains(k)) throw ConfigError("unknown config key " + where + "." + k);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

json optim_json(const OptimConfig& o) {
  return {{"lr", o.lr},           {"momentum", o.momentum}, {"weight_decay", o.weight_decay}, {"steps", o.steps},
          {"decay", o.decay},     {"warmup", o.warmup},     {"grad_clip", o.grad_clip}};
}

OptimConfig optim_from(const json& j, OptimConfig o, const std::string& where) {
  check_keys(j, {"lr", "momentum", "weight_decay", "steps", "decay", "warmup", "grad_clip"}, where);
  read(j, "lr", o.lr, where);
  read(j, "momentum", o.momentum, where);
  read(j, "weight_decay", o.weight_decay, where);
  read(j, "steps", o.steps, where);
  read(j, "decay", o.decay, where);
  read(j, "warmup", o.warmup, where);
  read(j, "grad_clip", o.grad_clip, where);
  return o;
}

void validate_optim(const OptimConfig& o, const std::string& where) {
  if (!(o.lr > 0.0)) throw ConfigError(where + ".lr must be positive");
  if (!(o.momentum >= 0.0 && o.momentum < 1.0)) throw ConfigError(where + ".momentum must lie in [0, 1)");
  if (o.weight_decay < 0.0) throw ConfigError(where + ".weight_decay must be >= 0");
  if (!(o.decay > 0.0 && o.decay <= 1.0)) throw ConfigError(where + ".decay must lie in (0, 1]");
  if (o.warmup < 0) throw ConfigError(where + ".warmup must be >= 0");
  if (!(o.grad_clip > 0.0)) throw ConfigError(where + ".grad_clip must be positive");
  for (double s : o.steps)
    if (!(s > 0.0 && s < 1.0)) throw ConfigError(where + ".steps entries must lie in (0, 1)");
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

void RunConfig::validate() const {
  sampler.validate();
  effective_network().validate();
  msda.validate();
  validate_optim(optim, "optim");
  validate_optim(finetune_optim, "finetune_optim");
  if (!(focal.alpha > 0.0 && focal.alpha < 1.0)) throw ConfigError("focal.alpha must lie in (0, 1)");
  if (focal.gamma < 0.0) throw ConfigError("focal.gamma must be >= 0");
  if (lambda_mm < 0.0) throw ConfigError("lambda_mm must be >= 0");
  if (meta_train_episodes < 0 || finetune_episodes < 0) throw ConfigError("episode counts must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("flip_prob must lie in [0, 1]");
  if (data.image_size % 32 != 0 || data.image_size < 64) {
    throw ConfigError("data.image_size must be a multiple of 32 and at least 64");
  }
  if (data.train.empty() && (data.n_train < 1 || data.n_test < 1 || data.n_finetune_pool < 1)) {
    throw ConfigError("synthetic image counts must be positive");
  }
}

NetworkConfig RunConfig::effective_network() const {
  NetworkConfig net = network;
  net.subnet.post_fusion_layers =
      post_fusion_layers.value_or(toggles.early_msf ? net.subnet.n_conv_layers : 1);
  net.init_seed = seed;
  return net;
}

std::string RunConfig::training_hash() const {
  json j = config_to_json(*this);
  // Meta-test settings do not influence the meta-trained weights.
  j.erase("output_dir");
  j.erase("finetune_optim");
  j.erase("msda");
  j.erase("gp");
  j["episodes"].erase("finetune");
  j["episodes"].erase("checkpoint_every");
  j["network"]["post_fusion_layers"] = effective_network().subnet.post_fusion_layers;
  j["toggles"].erase("early_msf");
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

json config_to_json(const RunConfig& c) {
  const auto& n = c.network;
  json net{{"channels", n.backbone.channels},
           {"fpn_channels", n.backbone.fpn_channels},
           {"subnet_layers", n.subnet.n_conv_layers},
           {"subnet_channels", n.subnet.n_channels},
           {"kernel_size", n.subnet.kernel_size},
           {"anchors", n.subnet.n_anchors_per_pixel},
           {"prior", n.prior_probability},
           {"post_fusion_layers", c.post_fusion_layers ? json(*c.post_fusion_layers) : json(nullptr)}};
  return json{
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"data",
       {{"train", c.data.train},
        {"finetune", c.data.finetune},
        {"test", c.data.test},
        {"seed", c.data.seed},
        {"image_size", c.data.image_size},
        {"n_train", c.data.n_train},
        {"n_finetune_pool", c.data.n_finetune_pool},
        {"n_test", c.data.n_test}}},
      {"sampler",
       {{"n_ways", c.sampler.n_ways},
        {"k_shots", c.sampler.k_shots},
        {"dropout", c.sampler.dropout_prob},
        {"crop_size", c.sampler.crop_size}}},
      {"network", net},
      {"focal", {{"alpha", c.focal.alpha}, {"gamma", c.focal.gamma}}},
      {"lambda_mm", c.lambda_mm},
      {"optim", optim_json(c.optim)},
      {"finetune_optim", optim_json(c.finetune_optim)},
      {"episodes",
       {{"meta_train", c.meta_train_episodes},
        {"finetune", c.finetune_episodes},
        {"checkpoint_every", c.checkpoint_every}}},
      {"flip_prob", c.flip_prob},
      {"msda", {{"enabled", c.toggles.msda}, {"log_range", c.msda.log_range}}},
      {"gp", {{"enabled", c.toggles.gp}}},
      {"toggles", {{"mwst", c.toggles.mwst}, {"early_msf", c.toggles.early_msf}, {"mm", c.toggles.mm}}}};
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  check_keys(j, {"seed", "output_dir", "data", "sampler", "network", "focal", "lambda_mm", "optim", "finetune_optim",
                 "episodes", "flip_prob", "msda", "gp", "toggles"},
             "config");
  read(j, "seed", c.seed, "config");
  read(j, "output_dir", c.output_dir, "config");
  read(j, "lambda_mm", c.lambda_mm, "config");
  read(j, "flip_prob", c.flip_prob, "config");
  if (j.contains("data")) {
    const json& d = j["data"];
    check_keys(d, {"train", "finetune", "test", "seed", "image_size", "n_train", "n_finetune_pool", "n_test"}, "data");
    read(d, "train", c.data.train, "data");
    read(d, "finetune", c.data.finetune, "data");
    read(d, "test", c.data.test, "data");
    read(d, "seed", c.data.seed, "data");
    read(d, "image_size", c.data.image_size, "data");
    read(d, "n_train", c.data.n_train, "data");
    read(d, "n_finetune_pool", c.data.n_finetune_pool, "data");
    read(d, "n_test", c.data.n_test, "data");
  }
  if (j.contains("sampler")) {
    const json& s = j["sampler"];
    check_keys(s, {"n_ways", "k_shots", "dropout", "crop_size"}, "sampler");
    read(s, "n_ways", c.sampler.n_ways, "sampler");
    read(s, "k_shots", c.sampler.k_shots, "sampler");
    read(s, "dropout", c.sampler.dropout_prob, "sampler");
    read(s, "crop_size", c.sampler.crop_size, "sampler");
  }
  if (j.contains("network")) {
    const json& n = j["network"];
    check_keys(n, {"channels", "fpn_channels", "subnet_layers", "subnet_channels", "kernel_size", "anchors", "prior",
                   "post_fusion_layers"},
               "network");
    read(n, "channels", c.network.backbone.channels, "network");
    read(n, "fpn_channels", c.network.backbone.fpn_channels, "network");
    read(n, "subnet_layers", c.network.subnet.n_conv_layers, "network");
    read(n, "subnet_channels", c.network.subnet.n_channels, "network");
    read(n, "kernel_size", c.network.subnet.kernel_size, "network");
    read(n, "anchors", c.network.subnet.n_anchors_per_pixel, "network");
    read(n, "prior", c.network.prior_probability, "network");
    if (n.contains("post_fusion_layers") && !n["post_fusion_layers"].is_null()) {
      int v = 0;
      read(n, "post_fusion_layers", v, "network");
      c.post_fusion_layers = v;
    }
  }
  if (j.contains("focal")) {
    check_keys(j["focal"], {"alpha", "gamma"}, "focal");
    read(j["focal"], "alpha", c.focal.alpha, "focal");
    read(j["focal"], "gamma", c.focal.gamma, "focal");
  }
  if (j.contains("optim")) c.optim = optim_from(j["optim"], c.optim, "optim");
  if (j.contains("finetune_optim")) c.finetune_optim = optim_from(j["finetune_optim"], c.finetune_optim, "finetune_optim");
  if (j.contains("episodes")) {
    const json& e = j["episodes"];
    check_keys(e, {"meta_train", "finetune", "checkpoint_every"}, "episodes");
    read(e, "meta_train", c.meta_train_episodes, "episodes");
    read(e, "finetune", c.finetune_episodes, "episodes");
    read(e, "checkpoint_every", c.checkpoint_every, "episodes");
  }
  if (j.contains("msda")) {
    check_keys(j["msda"], {"enabled", "log_range"}, "msda");
    read(j["msda"], "enabled", c.toggles.msda, "msda");
    read(j["msda"], "log_range", c.msda.log_range, "msda");
  }
  if (j.contains("gp")) {
    check_keys(j["gp"], {"enabled"}, "gp");
    read(j["gp"], "enabled", c.toggles.gp, "gp");
  }
  if (j.contains("toggles")) {
    check_keys(j["toggles"], {"mwst", "early_msf", "mm"}, "toggles");
    read(j["toggles"], "mwst", c.toggles.mwst, "toggles");
    read(j["toggles"], "early_msf", c.toggles.early_msf, "toggles");
    read(j["toggles"], "mm", c.toggles.mm, "toggles");
  }
  c.msda.alpha_train = c.focal.alpha;
  c.validate();
  return c;
}

void apply_seed_override(RunConfig& cfg) {
  const char* env = std::getenv("FSRN_SEED");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0') throw ConfigError(std::string("FSRN_SEED is not an unsigned integer: ") + env);
  cfg.seed = v;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  RunConfig cfg = config_from_json(j);
  apply_seed_override(cfg);
  return cfg;
}

RunConfig preset(char name, RunConfig base) {
  Toggles& t = base.toggles;
  base.post_fusion_layers.reset();
  switch (name) {
    case 'A':
      t = Toggles{false, false, false, false, t.mm};
      break;
    case 'B':
      t = Toggles{true, false, false, false, t.mm};
      break;
    case 'C':
      t = Toggles{true, true, false, false, t.mm};
      break;
    case 'D':
      t = Toggles{true, true, true, false, t.mm};
      break;
    case 'E':
      t = Toggles{true, true, true, true, t.mm};
      break;
    default:
      throw ConfigError(std::string("unknown preset '") + name + "', expected one of A-E");
  }
  return base;
}

std::string preset_label(char name) {
  switch (name) {
    case 'A':
      return "A vanilla";
    case 'B':
      return "B +MWST";
    case 'C':
      return "C +early MSF";
    case 'D':
      return "D +MSDA";
    case 'E':
      return "E +GP";
    default:
      throw ConfigError(std::string("unknown preset '") + name + "'");
  }
}

int RfConfig::receptive_field() const { return fsrn::receptive_field(post_fusion_layers); }

std::vector<RfConfig> rf_sweep_configs() { return {{5, 1}, {5, 3}, {5, 5}, {6, 6}}; }

Benchmark build_benchmark(const RunConfig& cfg) {
  const auto specs = default_class_specs();
  if (!cfg.data.train.empty()) {
    if (cfg.data.finetune.empty() || cfg.data.test.empty()) {
      throw ConfigError("data.train requires data.finetune and data.test as well");
    }
    Benchmark b{load_dataset(cfg.data.train), load_dataset(cfg.data.finetune), load_dataset(cfg.data.test)};
    return b;
  }
  const int size = cfg.data.image_size;
  const auto table = class_table(specs);
  std::vector<int> base_ids;
  for (const auto& [id, info] : table)
    if (info.split == Split::base) base_ids.push_back(id);
  std::vector<int> all_ids;
  for (const auto& [id, info] : table) all_ids.push_back(id);

  ShapesConfig train_cfg;
  train_cfg.class_pool = base_ids;
  Benchmark b;
  b.train = generate_shapes_dataset(cfg.data.seed, cfg.data.n_train, specs, size, train_cfg, 1);

  // Sparse scenes make it possible to hit exactly K annotations per class.
  ShapesConfig pool_cfg;
  pool_cfg.classes_per_image_weights = {0.6, 0.3, 0.1};
  pool_cfg.max_instances = 3;
  const int pool_first = 100000;
  const DetectionDataset pool =
      generate_shapes_dataset(cfg.data.seed + 1, cfg.data.n_finetune_pool, specs, size, pool_cfg, pool_first);
  b.finetune = make_k_shot(pool, cfg.sampler.k_shots, all_ids, cfg.data.seed + 2);

  b.test = generate_shapes_dataset(cfg.data.seed + 3, cfg.data.n_test, specs, size, ShapesConfig{}, 200000);
  return b;
}

}  // namespace fsrn
