#pragma once

#include <algorithm>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "shadowpool/dataset.hpp"

namespace shadowpool {

// Fixed data-to-pathway assignment: each training example updates exactly
// one pathway. This is the one-hot-per-row binary matrix stored sparsely.
struct MappingMatrix {
  size_t n_examples = 0;
  size_t n_pathways = 0;
  std::unordered_map<int64_t, size_t> assignment;    // id -> pathway index
  std::vector<std::vector<int64_t>> pathway_ids;     // pathway index -> member ids

  bool contains(int64_t id) const { return assignment.count(id) > 0; }

  size_t pathway_of(int64_t id) const {
    auto it = assignment.find(id);
    if (it == assignment.end()) throw StateError("MappingMatrix: unmapped example id");
    return it->second;
  }
};

// Uniformly random partition of D_tr into M^L near-equal subsets
// (sizes differ by at most one).
inline MappingMatrix build_mapping(const Dataset& d_tr, size_t experts_per_layer,
                                   size_t expert_layers, RandomSource& rng) {
  size_t n_pathways = 1;
  for (size_t l = 0; l < expert_layers; ++l) n_pathways *= experts_per_layer;
  if (d_tr.size() < n_pathways) {
    throw InputError("build_mapping: training set smaller than pathway count");
  }

  std::vector<int64_t> ids = d_tr.ids;
  rng.shuffle(ids);

  MappingMatrix mapping;
  mapping.n_examples = ids.size();
  mapping.n_pathways = n_pathways;
  mapping.pathway_ids.resize(n_pathways);
  const size_t base = ids.size() / n_pathways;
  const size_t remainder = ids.size() % n_pathways;
  size_t cursor = 0;
  for (size_t w = 0; w < n_pathways; ++w) {
    const size_t count = base + (w < remainder ? 1 : 0);
    for (size_t k = 0; k < count; ++k) {
      const int64_t id = ids[cursor++];
      mapping.assignment.emplace(id, w);
      mapping.pathway_ids[w].push_back(id);
    }
    std::sort(mapping.pathway_ids[w].begin(), mapping.pathway_ids[w].end());
  }
  return mapping;
}

}  // namespace shadowpool
