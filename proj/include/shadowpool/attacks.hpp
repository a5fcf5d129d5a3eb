#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "shadowpool/pool.hpp"
#include "shadowpool/scores.hpp"
#include "shadowpool/shadow.hpp"

namespace shadowpool {

// A query example with its membership bit relative to the target model.
struct QueryRecord {
  int64_t id = 0;
  bool member = false;
};

// ln(p_y / (1 - p_y)) with p_y clamped away from {0, 1}.
inline double scaled_logit(std::span<const double> probs, int label) {
  if (label < 0 || static_cast<size_t>(label) >= probs.size()) {
    throw InputError("scaled_logit: label out of range");
  }
  double p = probs[static_cast<size_t>(label)];
  p = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return std::log(p / (1.0 - p));
}

// One-sided probability that an OUT model scores below the target.
inline double lira_offline(std::span<const double> out_scores, double target_score) {
  if (out_scores.size() < 2) {
    throw InsufficientModelsError("lira_offline: need at least 2 OUT scores");
  }
  const GaussianModel out = GaussianModel::fit(out_scores);
  return out.cdf(target_score);
}

// Log likelihood ratio between the IN and OUT Gaussian fits; higher means
// more likely a member.
inline double lira_online(std::span<const double> in_scores, std::span<const double> out_scores,
                          double target_score) {
  if (in_scores.size() < 2) {
    throw InsufficientModelsError("lira_online: need at least 2 IN scores");
  }
  if (out_scores.size() < 2) {
    throw InsufficientModelsError("lira_online: need at least 2 OUT scores");
  }
  const GaussianModel in = GaussianModel::fit(in_scores);
  const GaussianModel out = GaussianModel::fit(out_scores);
  return in.log_pdf(target_score) - out.log_pdf(target_score);
}

enum class RmiaMode { kOffline, kOnline };

struct RmiaConfig {
  RmiaMode mode = RmiaMode::kOffline;
  double gamma = 1.0;
  double a = 0.3;  // offline interpolation coefficient, in [0,1]
};

// Pairwise likelihood-ratio score against population samples:
// score = |{z : LR(x, z) >= gamma}| / |population| with
// LR(x, z) = (P_T(x) / Pbar(x)) / (P_T(z) / Pbar(z)).
// Pbar is the true-class probability averaged over reference models; in
// offline mode Pbar(x) is rescaled as 0.5*((1+a)*Pbar_out(x) + (1-a)).
//
inline double rmia_score_one(double target_x, double ref_x, std::span<const double> target_z,
                             std::span<const double> ref_z, const RmiaConfig& cfg) {
  if (target_z.empty()) throw InputError("rmia_score: empty population");
  double pbar_x = ref_x;
  if (cfg.mode == RmiaMode::kOffline) {
    pbar_x = 0.5 * ((1.0 + cfg.a) * ref_x + (1.0 - cfg.a));
  }
  pbar_x = std::max(pbar_x, kProbClamp);
  const double ratio_x = target_x / pbar_x;
  size_t count = 0;
  for (size_t i = 0; i < target_z.size(); ++i) {
    const double ratio_z = target_z[i] / std::max(ref_z[i], kProbClamp);
    const double lr = ratio_x / std::max(ratio_z, kProbClamp);
    if (lr >= cfg.gamma) ++count;
  }
  return static_cast<double>(count) / static_cast<double>(target_z.size());
}

namespace detail {

inline double true_class_prob(const ScoreTable& t, size_t model, size_t query) {
  return t.probs[t.cell(model, query, static_cast<size_t>(t.labels[query]))];
}

inline double mean_true_class_prob(const ScoreTable& t, size_t query, bool out_only) {
  double sum = 0.0;
  size_t n = 0;
  for (size_t m = 0; m < t.n_models; ++m) {
    if (out_only && t.member[t.cell(m, query)]) continue;
    sum += true_class_prob(t, m, query);
    ++n;
  }
  if (n < 2) throw InsufficientModelsError("rmia: need at least 2 reference models per query");
  return sum / static_cast<double>(n);
}

}  // namespace detail

// RMIA over full score tables. reference_queries/reference_population hold
// the reference models' scores on the query set and on the population;
// target_* are single-model tables (n_models == 1). Population ids must be
// disjoint from query ids.
inline std::vector<double> rmia_scores(const ScoreTable& target_queries,
                                       const ScoreTable& reference_queries,
                                       const ScoreTable& target_population,
                                       const ScoreTable& reference_population,
                                       const RmiaConfig& cfg) {
  if (target_queries.n_models != 1 || target_population.n_models != 1) {
    throw InputError("rmia_scores: target tables must hold exactly one model");
  }
  if (reference_queries.n_models < 2) {
    throw InsufficientModelsError("rmia_scores: need at least 2 reference models");
  }
  if (target_population.n_queries == 0) throw InputError("rmia_scores: empty population");
  {
    std::unordered_map<int64_t, bool> qids;
    for (int64_t id : target_queries.query_ids) qids.emplace(id, true);
    for (int64_t id : target_population.query_ids) {
      if (qids.count(id)) throw InputError("rmia_scores: population overlaps query ids");
    }
  }
  const bool out_only = cfg.mode == RmiaMode::kOffline;

  std::vector<double> target_z(target_population.n_queries);
  std::vector<double> ref_z(target_population.n_queries);
  for (size_t z = 0; z < target_population.n_queries; ++z) {
    target_z[z] = detail::true_class_prob(target_population, 0, z);
    ref_z[z] = detail::mean_true_class_prob(reference_population, z, /*out_only=*/false);
  }

  std::vector<double> scores(target_queries.n_queries);
  for (size_t q = 0; q < target_queries.n_queries; ++q) {
    const double target_x = detail::true_class_prob(target_queries, 0, q);
    const double ref_x = detail::mean_true_class_prob(reference_queries, q, out_only);
    scores[q] = rmia_score_one(target_x, ref_x, target_z, ref_z, cfg);
  }
  return scores;
}

// Merges per-source score tables into one labeled attack grid. Sources are
// interchangeable: shared-model tables carry member_of-derived bits,
// independent-model tables carry subset-id bits.
inline ScoreTable build_attack_dataset(std::span<const ScoreTable* const> sources) {
  if (sources.empty()) throw InputError("build_attack_dataset: no sources");
  ScoreTable merged = *sources.front();
  merged.validate();
  for (size_t s = 1; s < sources.size(); ++s) {
    const ScoreTable& t = *sources[s];
    t.validate();
    if (t.query_ids != merged.query_ids) {
      throw InputError("build_attack_dataset: sources disagree on the query axis");
    }
    merged.append_models(t);
  }
  return merged;
}

// Per-query LiRA over a merged attack table: IN/OUT score sets are the
// member/non-member cells of each query column.
struct LiraResult {
  std::vector<double> scores;  // one per query, higher = member
};

inline LiraResult lira_attack(const ScoreTable& attack_table,
                              const ScoreTable& target_table, bool online) {
  if (target_table.n_models != 1) throw InputError("lira_attack: target table must hold one model");
  if (attack_table.query_ids != target_table.query_ids) {
    throw InputError("lira_attack: query axes differ");
  }
  LiraResult result;
  result.scores.resize(attack_table.n_queries);
  for (size_t q = 0; q < attack_table.n_queries; ++q) {
    const int label = attack_table.labels[q];
    std::vector<double> in_scores, out_scores;
    for (size_t m = 0; m < attack_table.n_models; ++m) {
      const double s = scaled_logit(attack_table.prob_row(m, q), label);
      if (attack_table.member[attack_table.cell(m, q)]) {
        in_scores.push_back(s);
      } else {
        out_scores.push_back(s);
      }
    }
    const double target_score = scaled_logit(target_table.prob_row(0, q), label);
    result.scores[q] = online ? lira_online(in_scores, out_scores, target_score)
                              : lira_offline(out_scores, target_score);
  }
  return result;
}

// Property inference per the two-pool protocol: fit per-coordinate
// Gaussians over sampled-pathway confidences from each pool, score the
// target's confidences under both, return the better-explained ratio.
// Ties resolve toward t0.
struct PiaResult {
  double inferred = 0.0;
  double loglik_t0 = 0.0;
  double loglik_t1 = 0.0;
};

inline PiaResult pia_infer(double t0, double t1, std::span<const Pool* const> pools_t0,
                           std::span<const Pool* const> pools_t1, const ShadowModel& target,
                           const Dataset& attack_data, size_t pathway_sample,
                           RandomSource& rng) {
  if (pools_t0.empty() || pools_t1.empty()) throw InputError("pia_infer: no pools");
  for (auto group : {pools_t0, pools_t1}) {
    for (const Pool* pool : group) {
      if (pool->training_log.empty()) throw StateError("pia_infer: pools must be trained");
    }
  }
  if (attack_data.size() == 0) throw InputError("pia_infer: empty attack data");

  // confidences: one row per sampled pathway (across all pools of one
  // ratio), |attack|*C columns
  auto collect = [&](std::span<const Pool* const> pools, RandomSource& stream) {
    const size_t classes = pools.front()->arch.classes;
    std::vector<std::vector<double>> rows;
    for (const Pool* pool : pools) {
      if (pool->arch.classes != classes) {
        throw ShapeError("pia_infer: pools disagree on the class count");
      }
      const size_t total = pool->arch.pathway_count();
      const size_t n = std::min(pathway_sample, total);
      std::vector<size_t> picked = stream.sample_without_replacement(total, n);
      for (size_t i = 0; i < n; ++i) {
        const Pathway p = pathway_from_index(picked[i], pool->arch.experts_per_layer,
                                             pool->arch.expert_layers);
        const PathwayOutput out = pathway_forward(*pool, p, attack_data.features);
        rows.push_back(out.probabilities.values);
      }
    }
    Matrix m(rows.size(), attack_data.size() * classes);
    for (size_t i = 0; i < rows.size(); ++i) {
      for (size_t k = 0; k < rows[i].size(); ++k) m.at(i, k) = rows[i][k];
    }
    return m;
  };

  RandomSource rng0 = rng.stream("pia-sample-t0");
  RandomSource rng1 = rng.stream("pia-sample-t1");
  const Matrix c0 = collect(pools_t0, rng0);
  const Matrix c1 = collect(pools_t1, rng1);
  if (c0.cols != c1.cols) throw ShapeError("pia_infer: pools disagree on the class count");

  Matrix target_probs = target.predict_probs(attack_data.features);

  // Per-coordinate Gaussians with a pooled standard deviation: a handful
  // of pathway samples underestimates sigma badly, and a single
  // near-degenerate coordinate would otherwise dominate both sums.
  PiaResult result;
  for (size_t j = 0; j < c0.cols; ++j) {
    std::vector<double> col0(c0.rows), col1(c1.rows);
    for (size_t i = 0; i < c0.rows; ++i) col0[i] = c0.at(i, j);
    for (size_t i = 0; i < c1.rows; ++i) col1[i] = c1.at(i, j);
    GaussianModel g0 = GaussianModel::fit(col0);
    GaussianModel g1 = GaussianModel::fit(col1);
    const double pooled = std::max(std::sqrt(0.5 * (g0.std * g0.std + g1.std * g1.std)),
                                   kStdFloor);
    g0.std = pooled;
    g1.std = pooled;
    result.loglik_t0 += g0.log_pdf(target_probs.values[j]);
    result.loglik_t1 += g1.log_pdf(target_probs.values[j]);
  }
  result.inferred = result.loglik_t0 >= result.loglik_t1 ? t0 : t1;
  return result;
}

inline PiaResult pia_infer(double t0, double t1, const Pool& pool_t0, const Pool& pool_t1,
                           const ShadowModel& target, const Dataset& attack_data,
                           size_t pathway_sample, RandomSource& rng) {
  const Pool* p0 = &pool_t0;
  const Pool* p1 = &pool_t1;
  return pia_infer(t0, t1, std::span<const Pool* const>(&p0, 1),
                   std::span<const Pool* const>(&p1, 1), target, attack_data, pathway_sample,
                   rng);
}

}  // namespace shadowpool
