#include "stemnet/metrics.hpp"

#include "doctest.h"
#include "oracles.hpp"
#include "stemnet/rng.hpp"

using namespace stemnet;

TEST_CASE("dsc: hand cases from the definition") {
  std::vector<bool> x(10, false), y(10, false);
  SUBCASE("identical nonempty masks") {
    x[1] = x[2] = y[1] = y[2] = true;
    CHECK(dsc(x, y) == 1.0);
  }
  SUBCASE("disjoint nonempty masks") {
    x[0] = x[1] = true;
    y[5] = y[6] = true;
    CHECK(dsc(x, y) == 0.0);
  }
  SUBCASE("|X|=4, |Y|=6, |X n Y|=3") {
    for (int i : {0, 1, 2, 3}) x[static_cast<std::size_t>(i)] = true;
    for (int i : {1, 2, 3, 6, 7, 8}) y[static_cast<std::size_t>(i)] = true;
    CHECK(dsc(x, y) == doctest::Approx(0.6).epsilon(1e-15));
  }
  SUBCASE("both empty is perfect agreement") { CHECK(dsc(x, y) == 1.0); }
  SUBCASE("extent mismatch") {
    std::vector<bool> z(9, false);
    CHECK_THROWS_AS(dsc(x, z), ShapeError);
  }
}

TEST_CASE("dsc: symmetry and identity on random masks") {
  Rng rng(47);
  std::vector<bool> x(200), y(200);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = rng.uniform() < 0.3;
    y[i] = rng.uniform() < 0.6;
  }
  CHECK(dsc(x, y) == dsc(y, x));
  CHECK(dsc(x, x) == 1.0);
}

TEST_CASE("per_class_dsc: matches the brute-force counting oracle") {
  Rng rng(53);
  LabelVolume a, b;
  a.extents = b.extents = {5, 6, 4};
  a.labels.resize(120);
  b.labels.resize(120);
  for (std::size_t i = 0; i < 120; ++i) {
    a.labels[i] = static_cast<std::uint8_t>(rng.uniform_index(5));
    b.labels[i] = static_cast<std::uint8_t>(rng.uniform_index(5));
  }
  auto r = per_class_dsc(a, b);
  for (int c = 0; c < kNumClasses; ++c)
    CHECK(r.dsc[c] ==
          doctest::Approx(oracle::naive_dsc(a.labels, b.labels, static_cast<std::uint8_t>(c)))
              .epsilon(1e-15));

  auto perfect = per_class_dsc(a, a);
  for (int c = 0; c < kNumClasses; ++c) CHECK(perfect.dsc[c] == 1.0);

  LabelVolume bg = a;
  bg.labels.assign(120, kBackground);
  auto vs_bg = per_class_dsc(bg, a);
  CHECK(vs_bg.dsc[kPons] == 0.0);
}

TEST_CASE("per_class_dsc: empty-pair classes flagged and scored 1") {
  LabelVolume a, b;
  a.extents = b.extents = {2, 2, 2};
  a.labels.assign(8, kBackground);
  b.labels.assign(8, kBackground);
  a.labels[0] = kPons;
  b.labels[0] = kPons;
  auto r = per_class_dsc(a, b);
  CHECK(r.dsc[kScp] == 1.0);
  CHECK(r.empty_pair[kScp]);
  CHECK(!r.empty_pair[kPons]);
}

TEST_CASE("cohort_summary: hand-checkable mean and sample std") {
  std::array<double, kNumClasses> row1{}, row2{}, row3{};
  row1.fill(0.90);
  row2.fill(0.93);
  row3.fill(0.96);
  auto s = cohort_summary({row1, row2, row3});
  CHECK(s.subjects == 3);
  for (int c = 0; c < kNumClasses; ++c) {
    CHECK(s.mean[c] == doctest::Approx(0.93).epsilon(1e-12));
    CHECK(s.stddev[c] == doctest::Approx(0.03).epsilon(1e-12));
  }

  auto single = cohort_summary({row1});
  CHECK(single.stddev[0] == 0.0);
  auto identical = cohort_summary({row2, row2, row2, row2});
  CHECK(identical.stddev[0] == doctest::Approx(0.0));
}

TEST_CASE("structure_volumes: counts times spacing product") {
  LabelVolume lv;
  lv.extents = {10, 10, 10};
  lv.spacing = {1, 1, 1};
  lv.labels.assign(1000, kBackground);
  // A 500-voxel pons block (half the volume is background).
  for (std::size_t i = 0; i < 500; ++i) lv.labels[i] = kPons;
  auto v = structure_volumes(lv);
  CHECK(v[kPons] == doctest::Approx(500.0));
  CHECK(v[kBackground] == doctest::Approx(500.0));
  CHECK(v[kScp] == 0.0);

  lv.spacing = {0.5, 0.5, 0.5};
  auto v2 = structure_volumes(lv);
  CHECK(v2[kPons] == doctest::Approx(500.0 * 0.125));
}

TEST_CASE("mp_area_ratio: constructed slice areas, translation invariance") {
  LabelVolume lv;
  lv.extents = {30, 30, 21};
  lv.spacing = {1, 1, 1};
  lv.labels.assign(static_cast<std::size_t>(lv.numel()), kBackground);
  // All labels on slice w = 10: 100 midbrain voxels and 400 pons voxels.
  for (std::int64_t d = 0; d < 10; ++d)
    for (std::int64_t h = 0; h < 10; ++h) lv.at(d, h, 10) = kMidbrain;
  for (std::int64_t d = 10; d < 30; ++d)
    for (std::int64_t h = 0; h < 20; ++h) lv.at(d, h, 10) = kPons;
  CHECK(mp_area_ratio(lv) == doctest::Approx(0.25).epsilon(1e-12));

  // An in-bounds translation leaves the ratio unchanged (centroid rule).
  LabelVolume moved;
  moved.extents = lv.extents;
  moved.spacing = lv.spacing;
  moved.labels.assign(lv.labels.size(), kBackground);
  for (std::int64_t d = 0; d < 30; ++d)
    for (std::int64_t h = 0; h < 27; ++h)
      for (std::int64_t w = 0; w < 17; ++w)
        if (lv.at(d, h, w) != kBackground) moved.at(d, h + 3, w + 4) = lv.at(d, h, w);
  CHECK(mp_area_ratio(moved) == doctest::Approx(0.25).epsilon(1e-12));

  SUBCASE("midbrain absent on the slice gives 0") {
    LabelVolume pons_only = lv;
    for (auto& code : pons_only.labels)
      if (code == kMidbrain) code = kBackground;
    CHECK(mp_area_ratio(pons_only) == 0.0);
  }
  SUBCASE("pons absent on the slice is an error") {
    LabelVolume mid_only = lv;
    for (auto& code : mid_only.labels)
      if (code == kPons) code = kBackground;
    CHECK_THROWS_AS(mp_area_ratio(mid_only), ValueError);
  }
}

TEST_CASE("time_inference: positive and monotone in work") {
  UNetConfig small;
  small.levels = 2;
  small.base_channels = 2;
  small.input_extent = 8;
  auto params = UNetParams<float>::init(small, 1);
  Tensor<float> x({1, 1, 8, 8, 8});
  const double t_small = time_inference(params, x);
  CHECK(t_small > 0.0);

  UNetConfig big = small;
  big.input_extent = 16;
  auto params_big = UNetParams<float>::init(big, 1);
  Tensor<float> xb({1, 1, 16, 16, 16});
  const double t_big = time_inference(params_big, xb);
  CHECK(t_big > t_small);
}

TEST_CASE("metrics report: json and table render") {
  MetricsReport report;
  SubjectMetrics s;
  s.id = "s000";
  s.has_ref = true;
  s.dsc.dsc = {0.99, 0.95, 0.92, 0.91, 0.70};
  s.volumes_mm3 = {100000, 5000, 2000, 1000, 80};
  s.mp_ratio = 0.4;
  s.inference_seconds = 0.12;
  report.subjects.push_back(s);
  s.id = "s001";
  s.dsc.dsc = {0.98, 0.93, 0.90, 0.89, 0.66};
  report.subjects.push_back(s);
  report.finalize();

  CHECK(report.cohort.subjects == 2);
  CHECK(report.cohort.mean[1] == doctest::Approx(0.94));
  const std::string json = report.to_json();
  CHECK(json.find("\"cohort\"") != std::string::npos);
  const std::string table = report.to_table();
  CHECK(table.find("s001") != std::string::npos);
  CHECK(table.find("cohort") != std::string::npos);
}
