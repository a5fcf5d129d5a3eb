#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "shadowpool/matrix.hpp"
#include "shadowpool/scores.hpp"

namespace shadowpool {

// ROC curve from a descending-score threshold sweep; tied scores collapse
// onto one threshold. Points run from (0,0) to (1,1).
struct RocCurve {
  struct Point {
    double fpr = 0.0;
    double tpr = 0.0;
    double threshold = 0.0;
  };
  std::vector<Point> points;
};

struct ScoredLabel {
  double score = 0.0;
  bool positive = false;
};

// AUC equals the trapezoid area and the Mann-Whitney statistic with ties
// counted one half.
inline std::pair<RocCurve, double> roc_and_auc(std::vector<ScoredLabel> scores) {
  size_t positives = 0;
  for (const auto& s : scores) positives += s.positive ? 1 : 0;
  const size_t negatives = scores.size() - positives;
  if (positives == 0 || negatives == 0) {
    throw InputError("roc_and_auc: both labels must be present");
  }
  std::sort(scores.begin(), scores.end(), [](const ScoredLabel& a, const ScoredLabel& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.positive < b.positive;  // deterministic tie order; grouping hides it
  });

  RocCurve curve;
  curve.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  double auc = 0.0;
  size_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < scores.size()) {
    const double threshold = scores[i].score;
    size_t tied_pos = 0, tied_neg = 0;
    while (i < scores.size() && scores[i].score == threshold) {
      if (scores[i].positive) {
        ++tied_pos;
      } else {
        ++tied_neg;
      }
      ++i;
    }
    const double prev_fpr = static_cast<double>(fp) / static_cast<double>(negatives);
    const double prev_tpr = static_cast<double>(tp) / static_cast<double>(positives);
    tp += tied_pos;
    fp += tied_neg;
    const double fpr = static_cast<double>(fp) / static_cast<double>(negatives);
    const double tpr = static_cast<double>(tp) / static_cast<double>(positives);
    auc += (fpr - prev_fpr) * (prev_tpr + tpr) * 0.5;
    curve.points.push_back({fpr, tpr, threshold});
  }
  return {std::move(curve), auc};
}

// TPR at the largest achieved FPR <= target (step interpolation, never
// inflates low-FPR claims).
inline double tpr_at_fpr(const RocCurve& curve, double fpr_target) {
  double best = 0.0;
  for (const auto& p : curve.points) {
    if (p.fpr <= fpr_target) best = std::max(best, p.tpr);
  }
  return best;
}

// Bhattacharyya coefficient between two Gaussians, in (0, 1].
inline double bhattacharyya(const GaussianModel& g1, const GaussianModel& g2) {
  if (g1.std <= 0.0 || g2.std <= 0.0) throw InputError("bhattacharyya: stds must be positive");
  const double v1 = g1.std * g1.std;
  const double v2 = g2.std * g2.std;
  const double diff = g1.mean - g2.mean;
  const double distance =
      0.25 * diff * diff / (v1 + v2) + 0.5 * std::log((v1 + v2) / (2.0 * g1.std * g2.std));
  return std::exp(-distance);
}

inline double shannon_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

// Ensemble diversity over a probe set: D(S) is the mean (over probe
// examples) entropy of the ensemble-mean probability vector; the series
// reports D(S_k) - D(S_4) for nested prefixes. Duplicated models add no
// gain by construction.
struct EntropyGain {
  size_t k = 0;
  double diversity = 0.0;
  double gain = 0.0;
};

inline std::vector<EntropyGain> entropy_diversity(
    const std::vector<Matrix>& model_probs,  // one probs matrix (probe×C) per model
    std::span<const size_t> subset_sizes) {
  if (model_probs.size() < 4) throw InputError("entropy_diversity: need at least 4 models");
  const size_t probe = model_probs.front().rows;
  const size_t classes = model_probs.front().cols;
  for (const Matrix& m : model_probs) {
    if (m.rows != probe || m.cols != classes) {
      throw ShapeError("entropy_diversity: probe grids differ across models");
    }
  }
  auto diversity_of = [&](size_t k) {
    Matrix mean(probe, classes);
    for (size_t m = 0; m < k; ++m) {
      for (size_t t = 0; t < mean.values.size(); ++t) {
        mean.values[t] += model_probs[m].values[t];
      }
    }
    for (double& v : mean.values) v /= static_cast<double>(k);
    double total = 0.0;
    for (size_t i = 0; i < probe; ++i) total += shannon_entropy(mean.row(i));
    return total / static_cast<double>(probe);
  };

  const double base = diversity_of(4);
  std::vector<EntropyGain> series;
  for (size_t k : subset_sizes) {
    if (k < 4 || k > model_probs.size()) {
      throw InputError("entropy_diversity: subset size out of range");
    }
    const double d = diversity_of(k);
    series.push_back({k, d, d - base});
  }
  return series;
}

}  // namespace shadowpool
