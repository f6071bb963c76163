#include <cstdlib>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fsrn/error.hpp"
#include "fsrn/harness.hpp"

using namespace fsrn;
namespace fs = std::filesystem;

namespace {

RunConfig small_config() {
  RunConfig cfg;
  cfg.data.image_size = 64;
  cfg.data.n_train = 40;
  cfg.network.backbone.channels = {4, 6, 8, 8};
  cfg.network.backbone.fpn_channels = 6;
  cfg.network.subnet.n_channels = 6;
  cfg.network.subnet.n_conv_layers = 2;
  cfg.network.subnet.post_fusion_layers = 2;
  cfg.sampler.k_shots = 2;
  cfg.sampler.crop_size = 32;
  return cfg;
}

DetectionDataset small_train(const RunConfig& cfg) {
  ShapesConfig sc;
  sc.class_pool = {1, 2, 3, 4, 5, 6, 7, 8};
  sc.min_object_size = 12;
  sc.max_object_size = 24;
  sc.max_instances = 3;
  return generate_shapes_dataset(cfg.data.seed, cfg.data.n_train, default_class_specs(), cfg.data.image_size, sc);
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fsrn_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool same_weights(const Detector& a, const Detector& b) {
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const Tensor& x = a.parameters()[i].value;
    const Tensor& y = b.parameters()[i].value;
    for (std::size_t k = 0; k < x.size(); ++k)
      if (std::bit_cast<std::uint64_t>(x[k]) != std::bit_cast<std::uint64_t>(y[k])) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("config json round trip") {
    RunConfig cfg = small_config();
    cfg.seed = 17;
    cfg.lambda_mm = 0.3;
    cfg.toggles.gp = false;
    cfg.optim.steps = {0.5};
    const auto j = config_to_json(cfg);
    const RunConfig back = config_from_json(j);
    CHECK(config_to_json(back) == j);
    CHECK(back.seed == 17);
    CHECK(back.toggles.gp == false);
    CHECK(back.network.backbone.channels[1] == 6);

    auto bad = j;
    bad["optim"]["learning_rate"] = 0.1;
    CHECK_THROWS_WITH_AS(config_from_json(bad), doctest::Contains("learning_rate"), ConfigError);
    bad = j;
    bad["sampler"]["dropout"] = 1.5;
    CHECK_THROWS_AS(config_from_json(bad).validate(), ConfigError);
  }

  TEST_CASE("seed override from the environment") {
    const auto dir = scratch("seed");
    std::ofstream(dir / "cfg.json") << R"({"seed": 3})";
    ::setenv("FSRN_SEED", "11", 1);
    CHECK(load_config(dir / "cfg.json").seed == 11);
    ::setenv("FSRN_SEED", "eleven", 1);
    CHECK_THROWS_AS(load_config(dir / "cfg.json"), ConfigError);
    ::unsetenv("FSRN_SEED");
    CHECK(load_config(dir / "cfg.json").seed == 3);
  }

  TEST_CASE("presets and the training hash") {
    const RunConfig a = preset('A');
    CHECK(!a.toggles.mwst);
    CHECK(!a.toggles.early_msf);
    CHECK(preset('B').toggles.mwst);
    CHECK(preset('C').toggles.early_msf);
    CHECK(!preset('C').toggles.msda);
    CHECK(preset('E').toggles.gp);
    CHECK(preset('C').training_hash() == preset('D').training_hash());
    CHECK(preset('C').training_hash() == preset('E').training_hash());
    CHECK(preset('B').training_hash() != preset('C').training_hash());
    RunConfig other = preset('C');
    other.output_dir = "elsewhere";
    CHECK(other.training_hash() == preset('C').training_hash());
    other.seed = 1;
    CHECK(other.training_hash() != preset('C').training_hash());
    CHECK_THROWS_AS(preset('Z'), ConfigError);

    std::vector<int> rf;
    for (const auto& c : rf_sweep_configs()) rf.push_back(c.receptive_field());
    CHECK(rf == std::vector<int>{3, 7, 11, 13});
  }

  TEST_CASE("learning rate schedule") {
    OptimConfig o;
    o.lr = 0.01;
    CHECK(learning_rate(o, 0, 1000) == doctest::Approx(0.001));
    CHECK(learning_rate(o, 50, 1000) == doctest::Approx(0.0055));
    CHECK(learning_rate(o, 100, 1000) == doctest::Approx(0.01));
    CHECK(learning_rate(o, 749, 1000) == doctest::Approx(0.01));
    CHECK(learning_rate(o, 750, 1000) == doctest::Approx(0.001));
    CHECK(learning_rate(o, 950, 1000) == doctest::Approx(0.0001));
  }

  TEST_CASE("zero episodes leave the initial weights") {
    RunConfig cfg = small_config();
    cfg.meta_train_episodes = 0;
    const auto train = small_train(cfg);
    const RunState st = meta_train(cfg, train);
    CHECK(st.episode == 0);
    CHECK(st.history.empty());
    CHECK(same_weights(st.detector, initial_state(cfg).detector));
  }

  TEST_CASE("training is deterministic and resumable") {
    RunConfig cfg = small_config();
    cfg.meta_train_episodes = 12;
    cfg.checkpoint_every = 4;
    cfg.optim.warmup = 2;
    const auto train = small_train(cfg);

    const RunState a = meta_train(cfg, train);
    const RunState b = meta_train(cfg, train);
    REQUIRE(a.history.size() == 12);
    CHECK(same_weights(a.detector, b.detector));
    for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(to_json(a.history[i]) == to_json(b.history[i]));

    const auto dir = scratch("resume");
    TrainOptions first;
    first.out_dir = dir;
    first.stop_after = 6;
    const RunState half = meta_train(cfg, train, first);
    CHECK(half.episode == 6);
    TrainOptions second;
    second.out_dir = dir;
    second.resume_from = dir;
    const RunState done = meta_train(cfg, train, second);
    CHECK(done.episode == 12);
    CHECK(same_weights(done.detector, a.detector));
    const auto log = read_loss_log(dir / "loss.jsonl");
    REQUIRE(log.size() == 12);
    for (std::size_t i = 0; i < log.size(); ++i) CHECK(log[i].total == a.history[i].total);

    RunConfig changed = cfg;
    changed.lambda_mm = 0.5;
    CHECK_THROWS_AS(load_checkpoint(changed, dir), ConfigError);
  }

  TEST_CASE("loss log parsing errors") {
    const auto dir = scratch("log");
    std::ofstream(dir / "loss.jsonl") << R"({"episode":0,"skipped":false,"focal":1,"loc":0,"mm":0,"total":1,"n_fg":1,"lr":0.1})"
                                      << "\nnot json\n";
    CHECK_THROWS_AS(read_loss_log(dir / "loss.jsonl"), ParseError);
  }
}
