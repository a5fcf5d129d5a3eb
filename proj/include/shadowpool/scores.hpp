#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "shadowpool/common.hpp"

namespace shadowpool {

inline constexpr double kStdFloor = 1e-6;

// Gaussian fit with a floored standard deviation.
struct GaussianModel {
  double mean = 0.0;
  double std = kStdFloor;

  static GaussianModel fit(std::span<const double> samples) {
    if (samples.empty()) throw InputError("GaussianModel::fit: no samples");
    double mean = 0.0;
    for (double v : samples) mean += v;
    mean /= static_cast<double>(samples.size());
    double var = 0.0;
    for (double v : samples) var += (v - mean) * (v - mean);
    var = samples.size() > 1 ? var / static_cast<double>(samples.size() - 1) : 0.0;
    GaussianModel g;
    g.mean = mean;
    g.std = std::max(std::sqrt(var), kStdFloor);
    return g;
  }

  double log_pdf(double x) const {
    const double z = (x - mean) / std;
    return -0.5 * z * z - std::log(std) - 0.5 * std::log(2.0 * std::numbers::pi);
  }

  // P(X <= x)
  double cdf(double x) const {
    const double z = (x - mean) / std;
    return 0.5 * std::erfc(-z / std::sqrt(2.0));
  }
};

// Complete (model × query) grid of class probabilities, logits, and
// per-cell membership ground truth.
struct ScoreTable {
  size_t n_models = 0;
  size_t n_queries = 0;
  size_t n_classes = 0;
  std::vector<std::string> model_ids;   // n_models
  std::vector<int64_t> query_ids;       // n_queries
  std::vector<int> labels;              // n_queries, true class
  std::vector<double> probs;            // [model][query][class]
  std::vector<double> logits;           // [model][query][class]
  std::vector<uint8_t> member;          // [model][query]

  static ScoreTable make(size_t models, size_t queries, size_t classes) {
    ScoreTable t;
    t.n_models = models;
    t.n_queries = queries;
    t.n_classes = classes;
    t.model_ids.resize(models);
    t.query_ids.assign(queries, 0);
    t.labels.assign(queries, 0);
    t.probs.assign(models * queries * classes, 0.0);
    t.logits.assign(models * queries * classes, 0.0);
    t.member.assign(models * queries, 0);
    return t;
  }

  size_t cell(size_t m, size_t q) const { return m * n_queries + q; }
  size_t cell(size_t m, size_t q, size_t c) const { return (m * n_queries + q) * n_classes + c; }

  std::span<const double> prob_row(size_t m, size_t q) const {
    return {probs.data() + cell(m, q, 0), n_classes};
  }
  std::span<double> prob_row(size_t m, size_t q) {
    return {probs.data() + cell(m, q, 0), n_classes};
  }
  std::span<const double> logit_row(size_t m, size_t q) const {
    return {logits.data() + cell(m, q, 0), n_classes};
  }
  std::span<double> logit_row(size_t m, size_t q) {
    return {logits.data() + cell(m, q, 0), n_classes};
  }

  void validate() const {
    if (probs.size() != n_models * n_queries * n_classes ||
        logits.size() != probs.size() || member.size() != n_models * n_queries ||
        query_ids.size() != n_queries || labels.size() != n_queries ||
        model_ids.size() != n_models) {
      throw ShapeError("ScoreTable: inconsistent grid");
    }
  }

  // Appends another table over the same query axis (new models).
  void append_models(const ScoreTable& other) {
    if (other.n_queries != n_queries || other.n_classes != n_classes) {
      throw ShapeError("ScoreTable::append_models: query grid mismatch");
    }
    model_ids.insert(model_ids.end(), other.model_ids.begin(), other.model_ids.end());
    probs.insert(probs.end(), other.probs.begin(), other.probs.end());
    logits.insert(logits.end(), other.logits.begin(), other.logits.end());
    member.insert(member.end(), other.member.begin(), other.member.end());
    n_models += other.n_models;
  }
};

}  // namespace shadowpool
