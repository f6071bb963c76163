#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "fsrn/error.hpp"
#include "fsrn/evaluation.hpp"

using namespace fsrn;

namespace {

double box_iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  return ix * iy / (a.area() + b.area() - ix * iy);
}

// 101-point interpolated AP for one class, written from the definition:
// interpolated precision at r is the best precision at any recall >= r.
double oracle_ap(std::vector<Detection> dets, const std::vector<Annotation>& gts, double thr) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<bool> used(gts.size(), false);
  std::vector<double> prec, rec;
  int tp = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    int best = -1;
    double bv = thr;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (used[j] || gts[j].image_id != dets[i].image_id) continue;
      const double v = box_iou(dets[i].bbox, gts[j].bbox);
      if (v >= bv) {
        bv = v;
        best = static_cast<int>(j);
      }
    }
    if (best >= 0) {
      used[best] = true;
      ++tp;
    }
    prec.push_back(static_cast<double>(tp) / (i + 1));
    rec.push_back(static_cast<double>(tp) / gts.size());
  }
  double s = 0;
  for (int k = 0; k <= 100; ++k) {
    double p = 0;
    for (std::size_t i = 0; i < prec.size(); ++i)
      if (rec[i] >= k / 100.0 - 1e-12) p = std::max(p, prec[i]);
    s += p;
  }
  return s / 101;
}

std::vector<Annotation> grid_gts(int images, int per_image, int cls) {
  std::vector<Annotation> out;
  int id = 1;
  for (int im = 0; im < images; ++im)
    for (int k = 0; k < per_image; ++k) out.push_back(Annotation{id++, im, cls, Box{30.0 * k, 10, 20, 20}});
  return out;
}

}  // namespace

TEST_SUITE("evaluation") {
  TEST_CASE("perfect detector scores one") {
    const auto gts = grid_gts(3, 3, 1);
    std::vector<Detection> dets;
    for (const auto& g : gts) dets.push_back(Detection{g.image_id, 1, g.bbox, 0.9});
    const auto m = evaluate(dets, gts, {1});
    CHECK(m.ap == doctest::Approx(1.0));
    CHECK(m.ap50 == doctest::Approx(1.0));
    CHECK(m.ar == doctest::Approx(1.0));
  }

  TEST_CASE("no detections score zero, missing classes are skipped") {
    const auto gts = grid_gts(2, 2, 1);
    const auto m = evaluate({}, gts, {1, 4});
    CHECK(m.ap == 0.0);
    CHECK(m.ar == 0.0);
    CHECK(m.skipped == std::vector<int>{4});
    REQUIRE(m.per_class.size() == 1);
    CHECK_THROWS_AS(class_average_precision({}, {}, 0.5), UsageError);
  }

  TEST_CASE("average precision agrees with a direct oracle") {
    std::mt19937_64 rng(21);
    std::normal_distribution<double> jitter(0, 4);
    std::uniform_real_distribution<double> u(0, 1);
    for (int trial = 0; trial < 30; ++trial) {
      const auto gts = grid_gts(4, 3, 1);
      std::vector<Detection> dets;
      for (const auto& g : gts) {
        if (u(rng) < 0.2) continue;
        Box b = g.bbox;
        b.x += jitter(rng);
        b.y += jitter(rng);
        dets.push_back(Detection{g.image_id, 1, b, u(rng)});
        if (u(rng) < 0.3) dets.push_back(Detection{g.image_id, 1, b, u(rng)});  // duplicate
      }
      for (int k = 0; k < 5; ++k) dets.push_back(Detection{k % 4, 1, Box{100 * u(rng), 60, 15, 15}, u(rng)});
      for (double thr : {0.5, 0.75}) {
        const auto ap = class_average_precision(dets, gts, thr);
        CHECK(ap.ap == doctest::Approx(oracle_ap(dets, gts, thr)).epsilon(1e-12));
        CHECK(ap.precision.size() == 101);
      }
    }
  }

  TEST_CASE("monotone rescaling of scores changes nothing") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    const auto gts = grid_gts(3, 3, 2);
    std::vector<Detection> dets;
    for (const auto& g : gts) {
      Box b = g.bbox;
      b.x += 6 * u(rng) - 3;
      dets.push_back(Detection{g.image_id, 2, b, u(rng)});
      dets.push_back(Detection{g.image_id, 2, Box{b.x + 9, b.y, 20, 20}, u(rng)});
    }
    auto scaled = dets;
    for (auto& d : scaled) d.score = 1 / (1 + std::exp(-10 * d.score + 3));
    const auto a = evaluate(dets, gts, {2});
    const auto b = evaluate(scaled, gts, {2});
    CHECK(a.ap == b.ap);
    CHECK(a.ar == b.ar);
  }

  TEST_CASE("transferability ratios") {
    const ApAr base{0.4, 0.6, 0.3, 0.5};
    const ApAr novel{0.1, 0.3, 0.06, 0.25};
    const auto t = transferability(base, novel);
    CHECK(*t.pt == doctest::Approx(0.25));
    CHECK(*t.pt50 == doctest::Approx(0.5));
    CHECK(*t.pt75 == doctest::Approx(0.2));
    CHECK(*t.rt == doctest::Approx(0.5));
    const auto z = transferability(ApAr{}, novel);
    CHECK(!z.pt.has_value());
    CHECK(!z.rt.has_value());
    CHECK(format_report(make_report({}, {})).find("n/a") != std::string::npos);
  }

  TEST_CASE("non-maximum suppression") {
    std::vector<Detection> d{{1, 1, Box{0, 0, 10, 10}, 0.9},
                             {1, 1, Box{1, 0, 10, 10}, 0.8},
                             {1, 1, Box{30, 0, 10, 10}, 0.7},
                             {1, 2, Box{1, 0, 10, 10}, 0.6}};
    const auto kept = nms(d, 0.5);
    CHECK(kept.size() == 3);
    const auto pp = postprocess(d);
    CHECK(pp.size() == 3);
    PostprocessConfig tight;
    tight.max_per_image = 1;
    CHECK(postprocess(d, tight).size() == 1);
  }

  TEST_CASE("decoding dense outputs") {
    const auto anchors = generate_anchors({LevelShape{8, 2, 2}}, 3);
    Tensor logits(Shape{1, 3, 2, 2}, -20.0);
    Tensor deltas(Shape{1, 12, 2, 2});
    logits.at(0, 1, 1, 0) = 3.0;  // anchor type 1 at (y=1, x=0)
    deltas.at(0, 4 * 1 + 0, 1, 0) = 0.25;
    const auto dets = decode_class(anchors, {&logits}, {&deltas}, 7, 5, 16, 16);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].score == doctest::Approx(1 / (1 + std::exp(-3.0))));
    CHECK(dets[0].class_id == 5);
    const Box a = anchors.levels[0].anchors[1 * 4 + 1 * 2 + 0];
    const Box expect = decode_box(a, Deltas{0.25, 0, 0, 0});
    const double x0 = std::max(0.0, expect.x);
    CHECK(dets[0].bbox.x == doctest::Approx(x0));
    CHECK(dets[0].bbox.x + dets[0].bbox.w <= 16.0 + 1e-9);
  }

  TEST_CASE("detections round trip through json lines") {
    const auto p = std::filesystem::temp_directory_path() / "fsrn_test_dets.jsonl";
    const std::vector<Detection> d{{3, 1, Box{1.5, 2, 3, 4}, 0.125}, {4, 2, Box{0, 0, 1, 1}, 0.5}};
    write_detections(p, d);
    const auto back = read_detections(p);
    REQUIRE(back.size() == 2);
    CHECK(back[0].bbox == d[0].bbox);
    CHECK(back[1].score == 0.5);
    std::ofstream(p, std::ios::app) << "{\"image_id\": 1}\n";
    CHECK_THROWS_WITH_AS(read_detections(p), doctest::Contains(":3"), ParseError);
  }
}
