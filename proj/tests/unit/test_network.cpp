#include <bit>
#include <cstdint>

#include "doctest.h"
#include "fsrn/error.hpp"
#include "fsrn/network.hpp"
#include "support.hpp"

using namespace fsrn;
using fsrn::testing::random_tensor;
using fsrn::testing::tiny_network;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

}  // namespace

TEST_SUITE("network") {
  TEST_CASE("pyramid level shapes for a 128 input") {
    Detector det(tiny_network());
    Graph g;
    std::mt19937_64 rng(1);
    auto p = det.bind(g, false);
    const auto pyr = det.backbone_fpn(g, p, g.constant(random_tensor(Shape{1, 3, 128, 128}, rng)));
    REQUIRE(pyr.levels.size() == 3);
    CHECK(pyr.strides == std::vector<int>{8, 16, 32});
    const int expect[] = {16, 8, 4};
    for (int l = 0; l < 3; ++l) {
      const Shape s = g.value(pyr.levels[l]).shape();
      CHECK(s.h == expect[l]);
      CHECK(s.w == expect[l]);
      CHECK(s.c == 3);
    }
    CHECK_THROWS_AS(det.backbone_fpn(g, p, g.constant(Tensor(Shape{1, 3, 100, 128}))), ShapeError);
  }

  TEST_CASE("zero input through a bias-free graph gives a zero pyramid") {
    Detector det(tiny_network());
    for (auto& prm : det.parameters())
      if (prm.name.ends_with(".bias")) prm.value.fill(0.0);
    Graph g;
    auto p = det.bind(g, false);
    const auto pyr = det.backbone_fpn(g, p, g.constant(Tensor(Shape{1, 3, 64, 64})));
    for (auto v : pyr.levels)
      for (std::size_t i = 0; i < g.value(v).size(); ++i) CHECK(g.value(v)[i] == 0.0);
  }

  TEST_CASE("fusion identities") {
    std::mt19937_64 rng(2);
    Graph g;
    FeaturePyramid q;
    q.strides = {8, 16};
    q.levels = {g.constant(random_tensor(Shape{1, 2, 2, 2}, rng)), g.constant(random_tensor(Shape{1, 2, 1, 1}, rng))};
    SUBCASE("ones is the identity") {
      const auto out = fuse(g, q, g.constant(Tensor(Shape{1, 2, 1, 1}, 1.0)));
      for (std::size_t l = 0; l < 2; ++l) CHECK(bitwise_equal(g.value(out.levels[l]), g.value(q.levels[l])));
    }
    SUBCASE("zeros annihilate") {
      const auto out = fuse(g, q, g.constant(Tensor(Shape{1, 2, 1, 1}, 0.0)));
      for (auto v : out.levels)
        for (std::size_t i = 0; i < g.value(v).size(); ++i) CHECK(g.value(v)[i] == 0.0);
    }
    SUBCASE("per-channel scaling (2, 0.5)") {
      Tensor mu(Shape{1, 2, 1, 1});
      mu[0] = 2.0;
      mu[1] = 0.5;
      const auto out = fuse(g, q, g.constant(mu));
      const Tensor& x = g.value(q.levels[0]);
      const Tensor& y = g.value(out.levels[0]);
      for (int yy = 0; yy < 2; ++yy)
        for (int xx = 0; xx < 2; ++xx) {
          CHECK(y.at(0, 0, yy, xx) == 2.0 * x.at(0, 0, yy, xx));
          CHECK(y.at(0, 1, yy, xx) == 0.5 * x.at(0, 1, yy, xx));
        }
    }
    SUBCASE("channel mismatch") { CHECK_THROWS_AS(fuse(g, q, g.constant(Tensor(Shape{1, 3, 1, 1}))), ShapeError); }
  }

  TEST_CASE("support prototypes") {
    Graph g;
    FeaturePyramid s;
    s.strides = {8, 16};
    // Shot 0 on level 0 pools to (1, 2); shot 1 on level 1 pools to (3, 4).
    Tensor l0(Shape{2, 2, 2, 2});
    Tensor l1(Shape{2, 2, 1, 1});
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) {
        l0.at(0, 0, y, x) = (y == 0 ? 0.5 : 1.5);
        l0.at(0, 1, y, x) = 2.0;
      }
    l1.at(1, 0, 0, 0) = 3.0;
    l1.at(1, 1, 0, 0) = 4.0;
    s.levels = {g.constant(l0), g.constant(l1)};
    const auto pv = pool_support_prototype(g, s, {0, 1}, {0, 1});
    const Tensor& mu = g.value(pv.prototype);
    CHECK(mu[0] == 2.0);
    CHECK(mu[1] == 3.0);

    const auto one = pool_support_prototype(g, s, {0}, {0});
    CHECK(bitwise_equal(g.value(one.prototype), g.value(ops::global_avg_pool(g, ops::take(g, s.levels[0], 0)))));

    Tensor c(Shape{1, 2, 3, 3});
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) {
        c.at(0, 0, y, x) = 0.75;
        c.at(0, 1, y, x) = -1.25;
      }
    FeaturePyramid cs{{g.constant(c)}, {8}};
    const auto cp = pool_support_prototype(g, cs, {0}, {0});
    CHECK(g.value(cp.prototype)[0] == 0.75);
    CHECK(g.value(cp.prototype)[1] == -1.25);
    CHECK_THROWS_AS(pool_support_prototype(g, s, {}, {}), UsageError);
    CHECK_THROWS_AS(pool_support_prototype(g, s, {0, 1}, {0}), UsageError);
  }

  TEST_CASE("subnet outputs") {
    std::mt19937_64 rng(4);
    Detector det(tiny_network());
    Graph g;
    auto p = det.bind(g, false);
    const auto q = det.backbone_fpn(g, p, g.constant(random_tensor(Shape{1, 3, 64, 64}, rng)));
    const Tensor protos = random_tensor(Shape{2, 3, 1, 1}, rng);
    const auto logits = det.classification_subnet(g, p, q, g.constant(protos));
    const auto deltas = det.localization_subnet(g, p, q);
    for (std::size_t l = 0; l < 3; ++l) {
      const Shape ls = g.value(q.levels[l]).shape();
      CHECK(g.value(logits[l]).shape() == Shape{2, 3, ls.h, ls.w});
      CHECK(g.value(deltas[l]).shape() == Shape{1, 12, ls.h, ls.w});
    }
  }

  TEST_CASE("box deltas are bitwise independent of the support class") {
    std::mt19937_64 rng(5);
    Detector det(tiny_network());
    const Tensor img = random_tensor(Shape{1, 3, 64, 64}, rng);
    std::vector<Tensor> runs;
    for (int rep = 0; rep < 2; ++rep) {
      Graph g;
      auto p = det.bind(g, true);
      const auto q = det.backbone_fpn(g, p, g.constant(img));
      det.classification_subnet(g, p, q, g.constant(random_tensor(Shape{1, 3, 1, 1}, rng)));
      runs.push_back(g.value(det.localization_subnet(g, p, q)[0]));
    }
    CHECK(bitwise_equal(runs[0], runs[1]));
  }

  TEST_CASE("zero weights and bias b give constant logits") {
    Detector det(tiny_network());
    for (auto& prm : det.parameters()) {
      if (!prm.name.starts_with("cls.pred")) continue;
      prm.value.fill(prm.name.ends_with(".bias") ? -1.75 : 0.0);
    }
    std::mt19937_64 rng(6);
    Graph g;
    auto p = det.bind(g, false);
    const auto q = det.backbone_fpn(g, p, g.constant(random_tensor(Shape{1, 3, 64, 64}, rng)));
    for (auto v : det.classification_subnet(g, p, q, g.constant(random_tensor(Shape{1, 3, 1, 1}, rng))))
      for (std::size_t i = 0; i < g.value(v).size(); ++i) CHECK(g.value(v)[i] == -1.75);
  }

  TEST_CASE("receptive field") {
    CHECK(receptive_field(1) == 3);
    CHECK(receptive_field(3) == 7);
    CHECK(receptive_field(5) == 11);
    CHECK(receptive_field(6) == 13);
    CHECK(receptive_field(0) == 1);
    CHECK(receptive_field(2, 5) == 9);
    CHECK_THROWS_AS(receptive_field(-1), UsageError);
  }

  TEST_CASE("configuration errors") {
    auto cfg = tiny_network();
    cfg.subnet.post_fusion_layers = 3;
    CHECK_THROWS_AS(Detector{cfg}, ConfigError);
    cfg = tiny_network();
    cfg.subnet.kernel_size = 2;
    CHECK_THROWS_AS(Detector{cfg}, ConfigError);
    cfg = tiny_network();
    cfg.backbone.strides = {4, 8, 16};
    CHECK_THROWS_AS(Detector{cfg}, ConfigError);
  }

  TEST_CASE("weights survive save and load") {
    Detector a(tiny_network());
    auto cfg = tiny_network();
    cfg.init_seed = 99;
    Detector b(cfg);
    const auto path = std::filesystem::temp_directory_path() / "fsrn_test_weights.bin";
    a.save(path);
    b.load(path);
    for (std::size_t i = 0; i < a.parameters().size(); ++i)
      CHECK(bitwise_equal(a.parameters()[i].value, b.parameters()[i].value));
    Detector c(tiny_network(1));
    c.load(path);  // same tensor shapes, different fusion depth
    auto big = tiny_network();
    big.backbone.fpn_channels = 4;
    Detector d(big);
    CHECK_THROWS(d.load(path));
  }
}
