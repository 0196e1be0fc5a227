#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"

namespace cgpo {

/// Lower empirical quantile: the element at index floor(q * (N - 1)) of the
/// ascending sort. No interpolation, so the result is always a member of the
/// input.
inline double calibrate_threshold(std::span<const double> values, double q) {
  require(!values.empty(), ErrorKind::EmptyCalibrationSet, "calibration set is empty");
  require(q > 0.0 && q < 1.0, ErrorKind::Config, "quantile must be in (0, 1)");
  std::vector<double> sorted(values.begin(), values.end());
  const auto k = static_cast<std::size_t>(std::floor(q * static_cast<double>(sorted.size() - 1)));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end());
  return sorted[k];
}

struct Thresholds {
  double q_split = 0.02;
  double q_stop = 0.02;
  double tau_split = 0.0;
  double tau_stop = 0.0;
  std::size_t calibration_size = 0;
};

inline Thresholds calibrate(std::span<const double> confidences, double q_split, double q_stop) {
  Thresholds t;
  t.q_split = q_split;
  t.q_stop = q_stop;
  t.tau_split = calibrate_threshold(confidences, q_split);
  t.tau_stop = calibrate_threshold(confidences, q_stop);
  t.calibration_size = confidences.size();
  return t;
}

struct StepSegmentation {
  std::vector<std::size_t> step_starts;  // strictly increasing, first = 0

  std::size_t num_steps() const { return step_starts.size(); }
};

/// A step begins at index 0 and at every token whose confidence is strictly
/// below tau; that token is the head of its step.
inline StepSegmentation segment_steps(std::span<const double> trace, double tau) {
  StepSegmentation seg;
  if (trace.empty()) return seg;
  seg.step_starts.push_back(0);
  for (std::size_t t = 1; t < trace.size(); ++t) {
    if (trace[t] < tau) seg.step_starts.push_back(t);
  }
  return seg;
}

/// Earliest index attaining the minimum confidence.
inline std::size_t min_confidence_index(std::span<const double> trace) {
  require(!trace.empty(), ErrorKind::Config, "confidence trace is empty");
  std::size_t best = 0;
  for (std::size_t t = 1; t < trace.size(); ++t) {
    if (trace[t] < trace[best]) best = t;
  }
  return best;
}

/// Index of the step containing token t.
inline std::size_t step_of(const StepSegmentation& seg, std::size_t t) {
  auto it = std::upper_bound(seg.step_starts.begin(), seg.step_starts.end(), t);
  return static_cast<std::size_t>(it - seg.step_starts.begin()) - 1;
}

inline nlohmann::ordered_json calibration_report(const Thresholds& t, const std::string& model_id) {
  nlohmann::ordered_json j;
  j["q_split"] = t.q_split;
  j["q_stop"] = t.q_stop;
  j["tau_split"] = t.tau_split;
  j["tau_stop"] = t.tau_stop;
  j["calibration_size"] = t.calibration_size;
  j["model_id"] = model_id;
  return j;
}

inline Thresholds thresholds_from_json(const nlohmann::json& j) {
  Thresholds t;
  t.q_split = j.at("q_split").get<double>();
  t.q_stop = j.at("q_stop").get<double>();
  t.tau_split = j.at("tau_split").get<double>();
  t.tau_stop = j.at("tau_stop").get<double>();
  t.calibration_size = j.at("calibration_size").get<std::size_t>();
  return t;
}

}  // namespace cgpo
