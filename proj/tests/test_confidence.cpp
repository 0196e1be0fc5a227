#include <gtest/gtest.h>

#include <algorithm>
#include <vector>

#include "cgpo/confidence.hpp"
#include "cgpo/rng.hpp"

using namespace cgpo;

TEST(Quantile, Examples) {
  const std::vector<double> sorted{0.1, 0.3, 0.5, 0.7, 0.9};
  EXPECT_EQ(calibrate_threshold(sorted, 0.5), 0.5);
  const std::vector<double> shuffled{0.5, 0.1, 0.9, 0.3, 0.7};
  EXPECT_EQ(calibrate_threshold(shuffled, 0.2), 0.1);  // floor(0.2 * 4) = 0
  EXPECT_EQ(calibrate_threshold(shuffled, 0.99), 0.7);  // floor(0.99 * 4) = 3
  const std::vector<double> one{0.42};
  EXPECT_EQ(calibrate_threshold(one, 0.02), 0.42);
}

TEST(Quantile, Errors) {
  const std::vector<double> none;
  try {
    calibrate_threshold(none, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyCalibrationSet);
  }
  const std::vector<double> v{0.5};
  EXPECT_THROW(calibrate_threshold(v, 0.0), Error);
  EXPECT_THROW(calibrate_threshold(v, 1.0), Error);
}

TEST(Quantile, MemberAndCountBound) {
  Rng rng(17);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 1 + rng.below(300);
    std::vector<double> v(n);
    // Coarse values force plenty of duplicates.
    for (auto& x : v) x = static_cast<double>(1 + rng.below(20)) / 20.0;
    for (double q : {0.02, 0.05, 0.5}) {
      const double tau = calibrate_threshold(v, q);
      EXPECT_NE(std::find(v.begin(), v.end(), tau), v.end());
      const auto below = std::count_if(v.begin(), v.end(), [&](double c) { return c < tau; });
      EXPECT_LE(static_cast<double>(below), q * static_cast<double>(n));
    }
  }
}

TEST(Quantile, CalibrateFillsBothThresholds) {
  std::vector<double> v;
  for (int i = 1; i <= 101; ++i) v.push_back(i / 101.0);
  const Thresholds t = calibrate(v, 0.02, 0.5);
  EXPECT_EQ(t.tau_split, v[2]);
  EXPECT_EQ(t.tau_stop, v[50]);
  EXPECT_EQ(t.calibration_size, 101u);
}

TEST(Segmentation, Examples) {
  const std::vector<double> trace{0.9, 0.3, 0.95, 0.2, 0.8};
  EXPECT_EQ(segment_steps(trace, 0.35).step_starts, (std::vector<std::size_t>{0, 1, 3}));
  EXPECT_EQ(segment_steps(trace, 0.1).step_starts, (std::vector<std::size_t>{0}));
  EXPECT_EQ(segment_steps(trace, 1.0).step_starts, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  // Strict inequality: a value equal to tau does not split.
  EXPECT_EQ(segment_steps(trace, 0.3).step_starts, (std::vector<std::size_t>{0, 3}));
  EXPECT_TRUE(segment_steps(std::vector<double>{}, 0.5).step_starts.empty());
}

TEST(Segmentation, CharacterizationOnRandomTraces) {
  Rng rng(3);
  for (int rep = 0; rep < 2000; ++rep) {
    const std::size_t n = 1 + rng.below(200);
    std::vector<double> trace(n);
    for (auto& c : trace) c = 1.0 - rng.uniform();  // (0, 1]
    const double tau = rng.uniform();
    const auto seg = segment_steps(trace, tau);
    ASSERT_FALSE(seg.step_starts.empty());
    ASSERT_EQ(seg.step_starts.front(), 0u);
    std::vector<bool> is_start(n, false);
    for (std::size_t i = 0; i < seg.step_starts.size(); ++i) {
      if (i > 0) ASSERT_LT(seg.step_starts[i - 1], seg.step_starts[i]);
      ASSERT_LT(seg.step_starts[i], n);
      is_start[seg.step_starts[i]] = true;
    }
    for (std::size_t t = 1; t < n; ++t) ASSERT_EQ(is_start[t], trace[t] < tau);
    for (std::size_t t = 0; t < n; ++t) ASSERT_LT(step_of(seg, t), seg.num_steps());
  }
}

TEST(MinConfidence, Examples) {
  EXPECT_EQ(min_confidence_index(std::vector<double>{0.9, 0.2, 0.2, 0.8}), 1u);
  EXPECT_EQ(min_confidence_index(std::vector<double>{0.5}), 0u);
  std::vector<double> dec;
  for (int i = 0; i < 12; ++i) dec.push_back(1.0 - i * 0.05);
  EXPECT_EQ(min_confidence_index(dec), 11u);
  EXPECT_THROW(min_confidence_index(std::vector<double>{}), Error);
}

TEST(MinConfidence, LiesInStepHoldingGlobalMinimum) {
  Rng rng(9);
  for (int rep = 0; rep < 500; ++rep) {
    const std::size_t n = 1 + rng.below(60);
    std::vector<double> trace(n);
    for (auto& c : trace) c = 1.0 - rng.uniform();
    const auto seg = segment_steps(trace, rng.uniform());
    const std::size_t m = min_confidence_index(trace);
    const std::size_t step = step_of(seg, m);
    const std::size_t lo = seg.step_starts[step];
    const std::size_t hi = step + 1 < seg.num_steps() ? seg.step_starts[step + 1] : n;
    const double step_min = *std::min_element(trace.begin() + static_cast<std::ptrdiff_t>(lo),
                                              trace.begin() + static_cast<std::ptrdiff_t>(hi));
    EXPECT_EQ(step_min, *std::min_element(trace.begin(), trace.end()));
  }
}

TEST(Calibration, ReportRoundTrip) {
  Thresholds t{0.02, 0.04, 0.125, 0.25, 1000};
  const auto j = calibration_report(t, "abc");
  EXPECT_EQ(j.at("model_id"), "abc");
  const auto back = thresholds_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.q_split, 0.02);
  EXPECT_EQ(back.q_stop, 0.04);
  EXPECT_EQ(back.tau_split, 0.125);
  EXPECT_EQ(back.tau_stop, 0.25);
  EXPECT_EQ(back.calibration_size, 1000u);
}
