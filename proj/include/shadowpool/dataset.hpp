#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <unordered_set>
#include <vector>

#include "shadowpool/matrix.hpp"
#include "shadowpool/rng.hpp"

namespace shadowpool {

// Labeled feature table with stable integer ids. property_flags is only
// populated for property-inference fixtures.
struct Dataset {
  Matrix features;                     // N×d
  std::vector<int> labels;             // N, in [0, classes)
  std::vector<int64_t> ids;            // N, unique
  std::vector<uint8_t> property_flags; // empty or N

  size_t size() const { return ids.size(); }
  size_t dim() const { return features.cols; }

  int num_classes() const {
    int c = 0;
    for (int y : labels) c = std::max(c, y + 1);
    return c;
  }

  Dataset subset(std::span<const size_t> indices) const {
    Dataset out;
    out.features = Matrix(indices.size(), features.cols);
    out.labels.reserve(indices.size());
    out.ids.reserve(indices.size());
    for (size_t row = 0; row < indices.size(); ++row) {
      const size_t i = indices[row];
      for (size_t j = 0; j < features.cols; ++j) out.features.at(row, j) = features.at(i, j);
      out.labels.push_back(labels[i]);
      out.ids.push_back(ids[i]);
      if (!property_flags.empty()) out.property_flags.push_back(property_flags[i]);
    }
    return out;
  }

  Dataset subset_by_ids(std::span<const int64_t> wanted) const {
    std::unordered_set<int64_t> set(wanted.begin(), wanted.end());
    std::vector<size_t> indices;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (set.count(ids[i])) indices.push_back(i);
    }
    return subset(indices);
  }

  void validate() const {
    if (labels.size() != size() || features.rows != size()) {
      throw ShapeError("Dataset: column lengths differ");
    }
    if (!property_flags.empty() && property_flags.size() != size()) {
      throw ShapeError("Dataset: property flag length differs");
    }
    std::unordered_set<int64_t> seen;
    for (int64_t id : ids) {
      if (!seen.insert(id).second) throw InputError("Dataset: duplicate id");
    }
  }
};

// Gaussian class clusters: one mean per class sampled on the unit sphere,
// per-coordinate standard deviation = spread.
inline Dataset gen_blobs(uint64_t seed, size_t n_per_class, size_t n_classes, size_t dim,
                         double spread) {
  if (n_classes < 2) throw InputError("gen_blobs: need at least 2 classes");
  if (dim < 1) throw InputError("gen_blobs: dim must be >= 1");
  if (spread < 0.0) throw InputError("gen_blobs: spread must be >= 0");
  RandomSource rng = RandomSource(seed).stream("blobs");

  Matrix means(n_classes, dim);
  for (size_t c = 0; c < n_classes; ++c) {
    double norm = 0.0;
    for (size_t j = 0; j < dim; ++j) {
      means.at(c, j) = rng.normal();
      norm += means.at(c, j) * means.at(c, j);
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) norm = 1.0;
    for (size_t j = 0; j < dim; ++j) means.at(c, j) /= norm;
  }

  const size_t n = n_per_class * n_classes;
  Dataset ds;
  ds.features = Matrix(n, dim);
  ds.labels.resize(n);
  ds.ids.resize(n);
  size_t row = 0;
  for (size_t c = 0; c < n_classes; ++c) {
    for (size_t k = 0; k < n_per_class; ++k, ++row) {
      for (size_t j = 0; j < dim; ++j) {
        ds.features.at(row, j) = means.at(c, j) + spread * rng.normal();
      }
      ds.labels[row] = static_cast<int>(c);
      ds.ids[row] = static_cast<int64_t>(row);
    }
  }
  return ds;
}

// Binary-label tabular data where a hidden binary property shifts the
// feature distribution. Exactly round(ratio*n) rows carry the property.
// Flagged rows are shifted by +shift along the normalized all-ones
// direction, and the label is the flag with a fixed flip noise: the label
// posterior then depends on the flag prior, so the property ratio is
// statistically visible in trained-model outputs.
inline Dataset gen_property_tabular(uint64_t seed, size_t n, size_t dim, double ratio,
                                    double shift = 2.0, double label_noise = 0.15) {
  if (ratio < 0.0 || ratio > 1.0) throw InputError("gen_property_tabular: ratio must be in [0,1]");
  if (dim < 1) throw InputError("gen_property_tabular: dim must be >= 1");
  RandomSource rng = RandomSource(seed).stream("property-tabular");

  const size_t flagged = static_cast<size_t>(std::llround(ratio * static_cast<double>(n)));
  std::vector<uint8_t> flags(n, 0);
  for (size_t i = 0; i < flagged; ++i) flags[i] = 1;
  rng.shuffle(flags);

  const double unit = 1.0 / std::sqrt(static_cast<double>(dim));
  Dataset ds;
  ds.features = Matrix(n, dim);
  ds.labels.resize(n);
  ds.ids.resize(n);
  ds.property_flags = flags;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < dim; ++j) {
      double v = rng.normal();
      if (flags[i]) v += shift * unit;
      ds.features.at(i, j) = v;
    }
    const bool flip = rng.uniform() < label_noise;
    ds.labels[i] = (flags[i] != 0) != flip ? 1 : 0;
    ds.ids[i] = static_cast<int64_t>(i);
  }
  return ds;
}

// s training subsets drawn independently, each uniform without replacement.
// Subsets are distinct draws, not disjoint sets.
struct SplitPlan {
  uint64_t seed = 0;
  std::vector<std::vector<size_t>> subsets;  // row indices into the source dataset
};

inline SplitPlan split_auxiliary(const Dataset& dataset, size_t s, size_t subset_size,
                                 RandomSource& rng) {
  if (s < 1) throw InputError("split_auxiliary: need at least one subset");
  if (subset_size > dataset.size()) {
    throw InputError("split_auxiliary: subset size exceeds dataset size");
  }
  SplitPlan plan;
  plan.seed = rng.seed();
  plan.subsets.reserve(s);
  for (size_t i = 0; i < s; ++i) {
    plan.subsets.push_back(rng.sample_without_replacement(dataset.size(), subset_size));
  }
  return plan;
}

// Uniform subsample of round(fraction*N) examples, without replacement.
inline Dataset sample_dq(const Dataset& d_tr, double fraction, RandomSource& rng) {
  if (fraction <= 0.0 || fraction > 1.0) throw InputError("sample_dq: fraction must be in (0,1]");
  const size_t k = static_cast<size_t>(std::llround(fraction * static_cast<double>(d_tr.size())));
  auto indices = rng.sample_without_replacement(d_tr.size(), k);
  std::sort(indices.begin(), indices.end());
  return d_tr.subset(indices);
}

}  // namespace shadowpool
