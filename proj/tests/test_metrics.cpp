#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "fmbff/metrics.hpp"

using namespace fmbff;

namespace {

Tensor<float> masks(Shape shape, std::vector<float> v) { return Tensor<float>(std::move(shape), std::move(v)); }

// Brute-force oracle: counts by set membership over pixel indices and forms
// each ratio from scratch.
struct Oracle {
  double acc, sn, sp, j, d;
};

Oracle brute(const std::vector<int>& p, const std::vector<int>& g) {
  std::vector<std::size_t> pos_p, pos_g, both, either;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i]) pos_p.push_back(i);
    if (g[i]) pos_g.push_back(i);
    if (p[i] && g[i]) both.push_back(i);
    if (p[i] || g[i]) either.push_back(i);
  }
  const double n = double(p.size());
  const double inter = double(both.size()), uni = double(either.size());
  const double neg_g = n - double(pos_g.size());
  const double agree = n - (uni - inter);
  const double true_neg = n - uni;
  auto safe = [](double a, double b) { return b == 0 ? 1.0 : a / b; };
  return {agree / n, safe(inter, double(pos_g.size())), safe(true_neg, neg_g), safe(inter, uni),
          safe(2 * inter, double(pos_p.size() + pos_g.size()))};
}

}  // namespace

TEST_CASE("confusion on the small examples") {
  auto ones = masks({1, 1, 2, 2}, {1, 1, 1, 1});
  auto zeros = masks({1, 1, 2, 2}, {0, 0, 0, 0});
  Confusion c = confusion(ones, ones)[0];
  CHECK(c.tp == 4);
  CHECK(c.tn + c.fp + c.fn == 0);
  c = confusion(zeros, ones)[0];
  CHECK(c.fn == 4);
  c = confusion(masks({1, 1, 2, 2}, {1, 1, 0, 0}), masks({1, 1, 2, 2}, {1, 0, 1, 0}))[0];
  CHECK(c.tp == 1);
  CHECK(c.fp == 1);
  CHECK(c.fn == 1);
  CHECK(c.tn == 1);
  const Metrics m = metrics_from(c);
  CHECK(m.j == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK(m.d == 0.5);
  CHECK(m.acc == 0.5);
  CHECK(m.sn == 0.5);
  CHECK(m.sp == 0.5);
}

TEST_CASE("threshold is inclusive and counts are per image") {
  auto p = masks({2, 1, 1, 2}, {0.5f, 0.49f, 0.9f, 0.1f});
  auto g = masks({2, 1, 1, 2}, {1, 1, 0, 0});
  const auto cs = confusion(p, g);
  REQUIRE(cs.size() == 2);
  CHECK(cs[0].tp == 1);
  CHECK(cs[0].fn == 1);
  CHECK(cs[1].fp == 1);
  CHECK(cs[1].tn == 1);
  CHECK_THROWS_AS(confusion(p, masks({1, 1, 2, 2}, {0, 0, 0, 0})), DimensionError);
}

TEST_CASE("perfect and vacuous predictions score 1") {
  for (const Confusion& c : {Confusion{5, 7, 0, 0}, Confusion{0, 9, 0, 0}, Confusion{9, 0, 0, 0}, Confusion{}}) {
    for (double v : metrics_from(c).values()) CHECK(v == 1.0);
  }
  // Missing every positive.
  const Metrics m = metrics_from({0, 5, 0, 3});
  CHECK(m.sn == 0.0);
  CHECK(m.j == 0.0);
  CHECK(m.d == 0.0);
  CHECK(m.sp == 1.0);
  CHECK(m.pr == 1.0);
}

TEST_CASE("metrics_from agrees exactly with brute force on 1000 random masks") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const Index h = 1 + Index(rng() % 6), w = 1 + Index(rng() % 6);
    const double density = (rng() % 100) / 100.0;
    std::vector<int> p(h * w), g(h * w);
    std::vector<float> pf(h * w), gf(h * w);
    for (Index i = 0; i < h * w; ++i) {
      p[i] = (rng() % 1000) < density * 1000;
      g[i] = (rng() % 1000) < density * 1000;
      pf[i] = p[i] ? 0.5f + 0.5f * float(rng() % 100) / 100 : 0.49f * float(rng() % 100) / 100;
      gf[i] = float(g[i]);
    }
    const Confusion c = confusion(masks({1, 1, h, w}, pf), masks({1, 1, h, w}, gf))[0];
    CHECK(c.total() == h * w);
    const Metrics m = metrics_from(c);
    const Oracle o = brute(p, g);
    CHECK(m.acc == o.acc);
    CHECK(m.sn == o.sn);
    CHECK(m.sp == o.sp);
    CHECK(m.j == o.j);
    CHECK(m.d == o.d);
    CHECK(m.acc == double(c.tp + c.tn) / double(c.total()));
  }
}

TEST_CASE("Dice and Jaccard satisfy D = 2J/(1+J) for random confusions") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10000; ++trial) {
    const Confusion c{std::int64_t(rng() % 5000), std::int64_t(rng() % 5000), std::int64_t(rng() % 5000),
                      std::int64_t(rng() % 5000)};
    if (c.tp + c.fp + c.fn == 0) continue;
    const Metrics m = metrics_from(c);
    CHECK(std::abs(m.d - 2 * m.j / (1 + m.j)) <= 1e-12);
    for (double v : m.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("aggregate: mean and population std") {
  Metrics a, b;
  a.j = 0.2;
  b.j = 0.4;
  const MetricsReport r = aggregate({"a", "b"}, {a, b});
  CHECK(r.aggregate.mean.j == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(r.aggregate.std.j == doctest::Approx(0.1).epsilon(1e-12));

  const Metrics one = metrics_from({3, 4, 1, 2});
  const MetricsReport single = aggregate({"x"}, {one});
  for (double v : single.aggregate.std.values()) CHECK(v == 0.0);
  const MetricsReport same = aggregate({"x", "y", "z"}, {one, one, one});
  CHECK(same.aggregate.mean.values() == one.values());

  CHECK_THROWS_AS(aggregate({}, {}), UsageError);
}

TEST_CASE("per-fold summaries") {
  Metrics lo, hi;
  lo.d = 0.5;
  hi.d = 1.0;
  const MetricsReport r = aggregate({"a", "b", "c", "d"}, {lo, lo, hi, hi}, {0, 0, 1, 1});
  REQUIRE(r.folds.size() == 2);
  CHECK(r.folds[0].mean.d == 0.5);
  CHECK(r.folds[1].mean.d == 1.0);
  CHECK(r.folds[1].std.d == 0.0);
  CHECK(r.aggregate.mean.d == 0.75);
}

TEST_CASE("CSV and table emission") {
  const MetricsReport r = aggregate({"img1"}, {metrics_from({1, 1, 1, 1})});
  const std::string csv = report_csv(r, false);
  CHECK(csv == "id,acc,sn,sp,j,d\nimg1,0.500000,0.500000,0.500000,0.333333,0.500000\n");
  CHECK(report_csv(r, true).rfind("id,acc,sn,sp,j,d,pr\n", 0) == 0);
  const std::string table = report_table(r, true);
  CHECK(table.find("pr") != std::string::npos);
  CHECK(table.find("0.3333 +- 0.0000") != std::string::npos);
}
