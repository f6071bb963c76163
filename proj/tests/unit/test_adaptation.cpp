#include <algorithm>
#include <cmath>
#include <bit>
#include <cstdint>

#include "doctest.h"
#include "fsrn/adaptation.hpp"
#include "fsrn/error.hpp"
#include "support.hpp"

using namespace fsrn;

TEST_SUITE("adaptation") {
  TEST_CASE("scale exponents are uniform on [-r, r]") {
    Image img(32, 32);
    MsdaConfig cfg;
    std::mt19937_64 rng(12);
    std::vector<double> u;
    for (int i = 0; i < 2000; ++i) u.push_back(msda_scale(img, {}, cfg, rng, 1).log2_scale);
    std::sort(u.begin(), u.end());
    double d = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      const double cdf = (u[i] + 1.0) / 2.0;
      d = std::max({d, std::abs(cdf - static_cast<double>(i) / u.size()),
                    std::abs(cdf - static_cast<double>(i + 1) / u.size())});
    }
    // Kolmogorov-Smirnov critical value at alpha = 0.01.
    CHECK(d < 1.63 / std::sqrt(2000.0));
    CHECK(u.front() >= -1.0);
    CHECK(u.back() <= 1.0);
  }

  TEST_CASE("scaled boxes follow the realised factors") {
    Image img(40, 60);
    const auto s = scale_image(img, {Box{10, 4, 20, 8}}, 1.0);
    CHECK(s.image.width == 120);
    CHECK(s.image.height == 80);
    CHECK(s.boxes[0] == Box{20, 8, 40, 16});
    const auto t = scale_image(img, {Box{10, 4, 20, 8}}, -1.5);
    CHECK(t.image.width == std::lround(60 * std::pow(2.0, -1.5)));
    CHECK(t.scale_x == doctest::Approx(static_cast<double>(t.image.width) / 60));
  }

  TEST_CASE("minimum size is honoured or refused") {
    Image img(48, 48);
    std::mt19937_64 rng(1);
    for (int i = 0; i < 200; ++i) {
      const auto s = msda_scale(img, {}, MsdaConfig{}, rng, 40);
      CHECK(s.image.width >= 40);
    }
    CHECK_THROWS_AS(msda_scale(Image(8, 8), {}, MsdaConfig{}, rng, 64), UsageError);
  }

  TEST_CASE("meta-test alpha") {
    CHECK(metatest_alpha(0.25) == 0.625);
    CHECK(metatest_alpha(0.5) == 0.75);
    CHECK_THROWS_AS(metatest_alpha(0.0), DomainError);
    CHECK_THROWS_AS(metatest_alpha(1.0), DomainError);
  }

  TEST_CASE("identical shots give the mean back bit for bit") {
    const std::vector<std::vector<double>> shots(5, std::vector<double>{0.1, -2.3, 7.7});
    std::mt19937_64 rng(2);
    const auto z = gaussian_prototype(shots, rng);
    CHECK(z == prototype_stats(shots).mean);

    Graph g;
    std::vector<Graph::Var> vars;
    Tensor t(Shape{1, 3, 1, 1});
    for (int c = 0; c < 3; ++c) t[c] = shots[0][c];
    for (int k = 0; k < 5; ++k) vars.push_back(g.constant(t));
    auto mean = ops::mean(g, vars);
    auto out = ops::gaussian_perturb(g, mean, vars, rng);
    for (int c = 0; c < 3; ++c) CHECK(std::bit_cast<std::uint64_t>(g.value(out)[c]) == std::bit_cast<std::uint64_t>(g.value(mean)[c]));
  }

  TEST_CASE("gaussian draws have the fitted moments") {
    const std::vector<std::vector<double>> shots{{0, 10}, {2, 10}, {4, 13}};
    const auto st = prototype_stats(shots);
    CHECK(st.mean[0] == 2.0);
    CHECK(st.mean[1] == 11.0);
    CHECK(st.std[0] == doctest::Approx(std::sqrt(8.0 / 3)));
    CHECK(st.std[1] == doctest::Approx(std::sqrt(6.0 / 3)));
    std::mt19937_64 rng(3);
    const int n = 20000;
    double s0 = 0, q0 = 0, s1 = 0;
    for (int i = 0; i < n; ++i) {
      const auto z = gaussian_prototype(st, rng);
      s0 += z[0];
      q0 += (z[0] - 2.0) * (z[0] - 2.0);
      s1 += z[1];
    }
    CHECK(std::abs(s0 / n - 2.0) < 4 * st.std[0] / std::sqrt(n));
    CHECK(std::abs(s1 / n - 11.0) < 4 * st.std[1] / std::sqrt(n));
    CHECK(q0 / n == doctest::Approx(8.0 / 3).epsilon(0.05));
    const auto one = prototype_stats({{1.0, 2.0}});
    CHECK(one.std == std::vector<double>{0.0, 0.0});
  }

  TEST_CASE("perturbation passes gradients to the mean") {
    std::mt19937_64 rng(5);
    const Tensor proj = fsrn::testing::random_tensor(Shape{1, 3, 1, 1}, rng);
    const Tensor a = fsrn::testing::random_tensor(Shape{1, 3, 1, 1}, rng);
    const Tensor b = fsrn::testing::random_tensor(Shape{1, 3, 1, 1}, rng);
    auto grads = [&](bool perturb) {
      Graph g;
      auto va = g.variable(a);
      auto vb = g.variable(b);
      auto m = ops::mean(g, {va, vb});
      if (perturb) m = ops::gaussian_perturb(g, m, {va, vb}, rng);
      g.backward(fsrn::testing::dot(g, m, proj));
      return std::pair{g.grad(va), g.grad(vb)};
    };
    const auto plain = grads(false);
    const auto pert = grads(true);
    for (int c = 0; c < 3; ++c) {
      CHECK(plain.first[c] == pert.first[c]);
      CHECK(plain.second[c] == pert.second[c]);
    }
  }
}
