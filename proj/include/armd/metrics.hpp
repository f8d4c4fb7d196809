#pragma once

#include <cstddef>
#include <span>

namespace armd {

// Malicious is the positive class.
struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;

  void add(int truth, int predicted) {
    if (truth == 1) {
      ++(predicted == 1 ? tp : fn);
    } else {
      ++(predicted == 1 ? fp : tn);
    }
  }

  std::size_t total() const { return tp + fp + tn + fn; }

  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct DetectionMetrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Ratios with an empty denominator are reported as 0.
inline DetectionMetrics compute_metrics(const ConfusionCounts& c) {
  auto ratio = [](std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  DetectionMetrics m;
  m.accuracy = ratio(c.tp + c.tn, c.total());
  m.precision = ratio(c.tp, c.tp + c.fp);
  m.recall = ratio(c.tp, c.tp + c.fn);
  m.f1 = (m.precision + m.recall) == 0.0 ? 0.0 : 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

inline ConfusionCounts confusion(std::span<const int> truth, std::span<const int> predicted) {
  ConfusionCounts c;
  for (std::size_t i = 0; i < truth.size(); ++i) c.add(truth[i], predicted[i]);
  return c;
}

}  // namespace armd
