#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "shadowpool/attacks.hpp"
#include "shadowpool/config.hpp"
#include "shadowpool/io.hpp"
#include "shadowpool/metrics.hpp"
#include "shadowpool/validation.hpp"

namespace shadowpool::pipeline {

namespace fs = std::filesystem;

struct StageResult {
  bool skipped = false;
  std::string message;
};

// ---------------------------------------------------------------------------
// Output layout under config.output_dir
// ---------------------------------------------------------------------------

struct Paths {
  fs::path root;

  explicit Paths(const ExperimentConfig& cfg) : root(cfg.output_dir) {}

  fs::path data() const { return root / "data"; }
  fs::path universe() const { return data() / "universe.csv"; }
  fs::path splits() const { return data() / "splits.json"; }
  fs::path pia_csv(const std::string& which) const { return data() / ("pia_" + which + ".csv"); }

  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path target() const { return checkpoints() / "target"; }
  fs::path shadow(size_t i) const { return checkpoints() / ("shadow_" + std::to_string(i)); }
  fs::path augmented(size_t shadow, size_t mask) const {
    return checkpoints() / ("augmented_" + std::to_string(shadow) + "_" + std::to_string(mask));
  }
  fs::path pool_raw(const std::string& tag) const { return checkpoints() / ("pool_raw_" + tag); }
  fs::path pool_aligned(const std::string& tag) const { return checkpoints() / ("pool_" + tag); }

  fs::path cost() const { return root / "cost"; }
  fs::path cost_csv(const std::string& stage) const { return cost() / (stage + ".csv"); }

  fs::path stamps() const { return root / "stamps"; }
  fs::path stamp(const std::string& stage) const { return stamps() / (stage + ".stamp"); }

  fs::path report() const { return root / "report.json"; }
  fs::path roc_csv() const { return root / "roc.csv"; }
  fs::path scores_csv() const { return root / "scores.csv"; }
  fs::path scoretable_csv() const { return root / "scoretable.csv"; }
  fs::path diagnostics() const { return root / "diagnostics.json"; }
  fs::path entropy_csv() const { return root / "entropy_gain.csv"; }
  fs::path gradcheck() const { return root / "gradcheck.json"; }
};

// ---------------------------------------------------------------------------
// Resume stamps: a stage is a no-op when its config and input files are
// unchanged and its outputs still exist.
// ---------------------------------------------------------------------------

namespace detail {

inline uint64_t bytes_digest(uint64_t h, const char* data, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t file_digest(uint64_t h, const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("missing input file: " + path.string());
  char buf[1 << 14];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    h = bytes_digest(h, buf, static_cast<size_t>(in.gcount()));
  }
  return h;
}

inline uint64_t dir_digest(uint64_t h, const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DependencyError("missing checkpoint: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const std::string name = f.string();
    h = bytes_digest(h, name.data(), name.size());
    h = file_digest(h, f);
  }
  return h;
}

struct StageGate {
  fs::path stamp_path;
  uint64_t digest = 0xcbf29ce484222325ULL;
  std::vector<fs::path> outputs;

  StageGate(const Paths& paths, const std::string& stage, const ExperimentConfig& cfg)
      : stamp_path(paths.stamp(stage)) {
    const std::string dump = cfg.to_json().dump();
    digest = bytes_digest(digest, dump.data(), dump.size());
  }

  void input_file(const fs::path& p, const std::string& producer = {}) {
    try {
      digest = file_digest(digest, p);
    } catch (const DependencyError& e) {
      throw DependencyError(producer.empty()
                                ? std::string(e.what())
                                : std::string(e.what()) + "; run the '" + producer +
                                      "' stage first");
    }
  }
  void input_dir(const fs::path& p, const std::string& producer = {}) {
    try {
      digest = dir_digest(digest, p);
    } catch (const DependencyError& e) {
      throw DependencyError(producer.empty()
                                ? std::string(e.what())
                                : std::string(e.what()) + "; run the '" + producer +
                                      "' stage first");
    }
  }
  void output(const fs::path& p) { outputs.push_back(p); }

  bool can_skip() const {
    std::ifstream in(stamp_path);
    if (!in) return false;
    std::string stored;
    in >> stored;
    if (stored != std::to_string(digest)) return false;
    for (const auto& out : outputs) {
      if (!fs::exists(out)) return false;
    }
    return true;
  }

  void commit() const {
    fs::create_directories(stamp_path.parent_path());
    std::ofstream out(stamp_path);
    out << digest << "\n";
  }
};

inline void require(bool ok, const std::string& stage_needed, const std::string& what) {
  if (!ok) {
    throw DependencyError("missing " + what + "; run the '" + stage_needed + "' stage first");
  }
}

// Wall-clock capture, active only when report.timing is on.
struct StageTimer {
  CostLedger* ledger;
  std::string run_id;
  bool enabled;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  StageTimer(CostLedger* l, std::string id, bool on)
      : ledger(l), run_id(std::move(id)), enabled(on) {}
  ~StageTimer() {
    if (ledger && enabled) {
      const auto end = std::chrono::steady_clock::now();
      ledger->add_wallclock(run_id, std::chrono::duration<double>(end - start).count());
    }
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// The audit plan: target split, query set, population.
// ---------------------------------------------------------------------------

struct AuditPlan {
  std::vector<int64_t> target_train_ids;
  std::vector<QueryRecord> queries;
  std::vector<int64_t> population_ids;
};

inline void save_plan(const AuditPlan& plan, const fs::path& path) {
  nlohmann::ordered_json queries = nlohmann::ordered_json::array();
  for (const auto& q : plan.queries) {
    queries.push_back({{"id", q.id}, {"member", q.member}});
  }
  nlohmann::ordered_json j{{"format_version", kFormatVersion},
                           {"target_train_ids", plan.target_train_ids},
                           {"queries", queries},
                           {"population_ids", plan.population_ids}};
  std::ofstream out(path);
  if (!out) throw InputError("save_plan: cannot open " + path.string());
  out << j.dump(2) << "\n";
}

inline AuditPlan load_plan(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing split plan: " + path.string() + "; run 'gen-data' first");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ParseError("split plan " + path.string() + ": " + e.what());
  }
  if (j.value("format_version", -1) != kFormatVersion) {
    throw FormatVersionError("split plan " + path.string() + ": unsupported format version");
  }
  AuditPlan plan;
  plan.target_train_ids = j.at("target_train_ids").get<std::vector<int64_t>>();
  for (const auto& q : j.at("queries")) {
    plan.queries.push_back({q.at("id").get<int64_t>(), q.at("member").get<bool>()});
  }
  plan.population_ids = j.at("population_ids").get<std::vector<int64_t>>();
  return plan;
}

namespace detail {

inline std::vector<int64_t> pick_ids(const std::vector<int64_t>& from, size_t k,
                                     RandomSource& rng) {
  if (k > from.size()) throw InputError("pick_ids: not enough candidates");
  auto idx = rng.sample_without_replacement(from.size(), k);
  std::vector<int64_t> out(k);
  for (size_t i = 0; i < k; ++i) out[i] = from[idx[i]];
  return out;
}

// Query rows in plan order, so score vectors line up with the plan's
// membership bits.
inline Dataset query_dataset(const Dataset& universe, const AuditPlan& plan) {
  std::unordered_map<int64_t, size_t> row_of;
  row_of.reserve(universe.size());
  for (size_t i = 0; i < universe.size(); ++i) row_of.emplace(universe.ids[i], i);
  std::vector<size_t> rows;
  rows.reserve(plan.queries.size());
  for (const auto& q : plan.queries) {
    auto it = row_of.find(q.id);
    if (it == row_of.end()) throw StateError("query id missing from the universe");
    rows.push_back(it->second);
  }
  return universe.subset(rows);
}

// The id domain shadow/pool construction may draw fillers from.
inline std::vector<int64_t> auxiliary_ids(const ExperimentConfig& cfg, const Dataset& universe,
                                          const AuditPlan& plan) {
  if (cfg.dataset.overlap_auxiliary_target) return universe.ids;
  std::unordered_set<int64_t> target(plan.target_train_ids.begin(), plan.target_train_ids.end());
  std::vector<int64_t> out;
  for (int64_t id : universe.ids) {
    if (!target.count(id)) out.push_back(id);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

inline StageResult run_gen_data(const ExperimentConfig& cfg) {
  const Paths paths(cfg);
  detail::StageGate gate(paths, "gen-data", cfg);
  if (cfg.dataset.kind == "csv") gate.input_file(cfg.dataset.csv_path);
  if (cfg.attack.method == "pia") {
    for (size_t j = 0; j < cfg.pool.pool_count; ++j) {
      gate.output(paths.pia_csv("t0_" + std::to_string(j)));
      gate.output(paths.pia_csv("t1_" + std::to_string(j)));
    }
    gate.output(paths.pia_csv("target"));
    gate.output(paths.pia_csv("attack"));
  } else {
    gate.output(paths.universe());
    gate.output(paths.splits());
  }
  if (gate.can_skip()) return {true, "gen-data: up to date"};
  fs::create_directories(paths.data());

  RandomSource root(cfg.seed);
  if (cfg.attack.method == "pia") {
    if (cfg.dataset.kind != "property") {
      throw ConfigError("config field dataset.kind: must be 'property' when attack.method is 'pia'");
    }
    const auto& ds = cfg.dataset;
    // one independently sampled ratio-conditioned dataset per pool
    for (size_t j = 0; j < cfg.pool.pool_count; ++j) {
      const std::string sj = std::to_string(j);
      save_dataset_csv(
          gen_property_tabular(root.stream("pia-t0-" + sj).seed(), ds.property_n,
                               ds.property_dim, cfg.attack.pia_t0, ds.property_shift),
          paths.pia_csv("t0_" + sj));
      save_dataset_csv(
          gen_property_tabular(root.stream("pia-t1-" + sj).seed(), ds.property_n,
                               ds.property_dim, cfg.attack.pia_t1, ds.property_shift),
          paths.pia_csv("t1_" + sj));
    }
    save_dataset_csv(
        gen_property_tabular(root.stream("pia-target").seed(), ds.property_n, ds.property_dim,
                             cfg.attack.pia_target_ratio, ds.property_shift),
        paths.pia_csv("target"));
    save_dataset_csv(
        gen_property_tabular(root.stream("pia-attack").seed(), ds.property_attack_size,
                             ds.property_dim, 0.5, ds.property_shift),
        paths.pia_csv("attack"));
    gate.commit();
    return {false, "gen-data: wrote property-inference fixtures"};
  }

  Dataset universe;
  if (cfg.dataset.kind == "blobs") {
    universe = gen_blobs(root.stream("universe").seed(), cfg.dataset.n_per_class,
                         cfg.dataset.classes, cfg.dataset.dim, cfg.dataset.spread);
  } else {
    universe = load_dataset_csv(cfg.dataset.csv_path);
    if (universe.dim() != cfg.architecture.input_dim) {
      throw ConfigError("config field architecture.input_dim: csv dataset has dim " +
                        std::to_string(universe.dim()));
    }
  }

  AuditPlan plan;
  {
    RandomSource rng = root.stream("target-train");
    plan.target_train_ids = detail::pick_ids(universe.ids, cfg.dataset.target_train_size, rng);
  }
  {
    RandomSource rng = root.stream("queries");
    const size_t members = cfg.dataset.query_count / 2;
    const size_t non_members = cfg.dataset.query_count - members;
    auto member_ids = detail::pick_ids(plan.target_train_ids, members, rng);
    std::unordered_set<int64_t> in_target(plan.target_train_ids.begin(),
                                          plan.target_train_ids.end());
    std::vector<int64_t> outside;
    for (int64_t id : universe.ids) {
      if (!in_target.count(id)) outside.push_back(id);
    }
    auto non_member_ids = detail::pick_ids(outside, non_members, rng);
    for (int64_t id : member_ids) plan.queries.push_back({id, true});
    for (int64_t id : non_member_ids) plan.queries.push_back({id, false});
  }
  {
    RandomSource rng = root.stream("population");
    std::unordered_set<int64_t> query_ids;
    for (const auto& q : plan.queries) query_ids.insert(q.id);
    std::vector<int64_t> candidates;
    for (int64_t id : universe.ids) {
      if (!query_ids.count(id)) candidates.push_back(id);
    }
    plan.population_ids = detail::pick_ids(candidates, cfg.dataset.population_size, rng);
  }

  save_dataset_csv(universe, paths.universe());
  save_plan(plan, paths.splits());
  gate.commit();
  return {false, "gen-data: universe of " + std::to_string(universe.size()) + " examples"};
}

inline StageResult run_train_target(const ExperimentConfig& cfg) {
  const Paths paths(cfg);
  detail::StageGate gate(paths, "train-target", cfg);
  const bool pia = cfg.attack.method == "pia";
  const fs::path data_path = pia ? paths.pia_csv("target") : paths.universe();
  gate.input_file(data_path, "gen-data");
  if (!pia) gate.input_file(paths.splits(), "gen-data");
  gate.output(paths.target() / "manifest.json");
  gate.output(paths.cost_csv("train-target"));
  if (gate.can_skip()) return {true, "train-target: up to date"};

  Dataset train;
  PoolArchitecture arch = cfg.architecture;
  if (pia) {
    train = load_dataset_csv(data_path);
    arch.input_dim = train.dim();
    arch.classes = static_cast<size_t>(std::max(train.num_classes(), 2));
  } else {
    const Dataset universe = load_dataset_csv(paths.universe());
    const AuditPlan plan = load_plan(paths.splits());
    train = universe.subset_by_ids(plan.target_train_ids);
  }

  CostLedger ledger;
  detail::StageTimer timer(&ledger, "target", cfg.report.timing);
  RandomSource root(cfg.seed);
  ShadowModel target = build_shadow_model(arch, root.stream("target-init").seed());
  TrainConfig tc;
  tc.epochs = cfg.training.epochs;
  tc.batch_size = cfg.training.batch_size;
  tc.sgd = cfg.sgd();
  tc.seed = root.stream("target-train").seed();
  train_independent(target, train, tc, &ledger, "target");

  fs::create_directories(paths.cost());
  save_model(target, paths.target(), cfg.to_json());
  save_ledger_csv(ledger, paths.cost_csv("train-target"));
  gate.commit();
  return {false, "train-target: trained on " + std::to_string(train.size()) + " examples"};
}

inline StageResult run_train_shadows(const ExperimentConfig& cfg) {
  const Paths paths(cfg);
  if (cfg.attack.method == "pia") {
    return {true, "train-shadows: not used for property inference"};
  }
  detail::StageGate gate(paths, "train-shadows", cfg);
  gate.input_file(paths.universe(), "gen-data");
  gate.input_file(paths.splits(), "gen-data");
  for (size_t i = 0; i < cfg.baselines.shadow_count; ++i) {
    gate.output(paths.shadow(i) / "manifest.json");
  }
  gate.output(paths.cost_csv("train-shadows"));
  if (gate.can_skip()) return {true, "train-shadows: up to date"};

  const Dataset universe = load_dataset_csv(paths.universe());
  const AuditPlan plan = load_plan(paths.splits());
  const std::vector<int64_t> aux_ids = detail::auxiliary_ids(cfg, universe, plan);
  std::unordered_set<int64_t> query_ids;
  for (const auto& q : plan.queries) query_ids.insert(q.id);

  const size_t subset_size = cfg.shadow_subset_size();
  const size_t n_shadows = cfg.baselines.shadow_count;
  RandomSource root(cfg.seed);

  // Online attacks place each audited query in exactly half of the shadow
  // training sets; offline attacks keep every query OUT of every shadow.
  std::vector<std::vector<int64_t>> forced(n_shadows);
  if (cfg.attack.mode == "online") {
    RandomSource rng = root.stream("shadow-placement");
    for (const auto& q : plan.queries) {
      auto chosen = rng.sample_without_replacement(n_shadows, n_shadows / 2);
      for (size_t s : chosen) forced[s].push_back(q.id);
    }
  }
  std::vector<int64_t> filler_domain;
  for (int64_t id : aux_ids) {
    if (!query_ids.count(id)) filler_domain.push_back(id);
  }

  CostLedger ledger;
  detail::StageTimer timer(&ledger, "shadows", cfg.report.timing);
  for (size_t i = 0; i < n_shadows; ++i) {
    RandomSource rng = root.stream("shadow-subset-" + std::to_string(i));
    std::vector<int64_t> ids = forced[i];
    if (ids.size() > subset_size) {
      throw ConfigError("config field baselines.shadow_count: subset size too small for the "
                        "forced query placement");
    }
    auto filler = detail::pick_ids(filler_domain, subset_size - ids.size(), rng);
    ids.insert(ids.end(), filler.begin(), filler.end());
    Dataset subset = universe.subset_by_ids(ids);

    ShadowModel model =
        build_shadow_model(cfg.architecture, root.stream("shadow-init-" + std::to_string(i)).seed());
    TrainConfig tc;
    tc.epochs = cfg.training.epochs;
    tc.batch_size = cfg.training.batch_size;
    tc.sgd = cfg.sgd();
    tc.seed = root.stream("shadow-train-" + std::to_string(i)).seed();
    train_independent(model, subset, tc, &ledger, "shadows");
    save_model(model, paths.shadow(i), cfg.to_json());
  }
  fs::create_directories(paths.cost());
  save_ledger_csv(ledger, paths.cost_csv("train-shadows"));
  gate.commit();
  return {false, "train-shadows: trained " + std::to_string(n_shadows) + " models"};
}

inline StageResult run_augment(const ExperimentConfig& cfg) {
  const Paths paths(cfg);
  if (cfg.attack.method == "pia") {
    return {true, "augment: not used for property inference"};
  }
  detail::StageGate gate(paths, "augment", cfg);
  gate.input_file(paths.universe(), "gen-data");
  gate.input_file(paths.splits(), "gen-data");
  for (size_t i = 0; i < cfg.baselines.shadow_count; ++i) gate.input_dir(paths.shadow(i), "train-shadows");
  for (size_t i = 0; i < cfg.baselines.shadow_count; ++i) {
    for (size_t k = 0; k < cfg.baselines.masks.size(); ++k) {
      gate.output(paths.augmented(i, k) / "manifest.json");
    }
  }
  if (gate.can_skip()) return {true, "augment: up to date"};

  const Dataset universe = load_dataset_csv(paths.universe());
  const AuditPlan plan = load_plan(paths.splits());
  const Dataset guard_set = universe.subset_by_ids(plan.population_ids);

  RandomSource root(cfg.seed);
  size_t made = 0;
  for (size_t i = 0; i < cfg.baselines.shadow_count; ++i) {
    detail::require(fs::exists(paths.shadow(i) / "manifest.json"), "train-shadows",
                    "shadow checkpoint " + std::to_string(i));
    ShadowModel base = load_model(paths.shadow(i));
    for (size_t k = 0; k < cfg.baselines.masks.size(); ++k) {
      MaskSpec spec = cfg.baselines.masks[k];
      spec.seed = root.stream("mask-" + std::to_string(i) + "-" + std::to_string(k)).seed();
      ShadowModel augmented = augment_model(base, spec);
      if (!augmentation_within_guardrail(base, augmented, guard_set)) {
        throw InputError("augment: mask " + std::to_string(k) + " (scope " +
                         mask_scope_name(spec.scope) + ", p=" +
                         std::to_string(spec.prune_probability) +
                         ") drops test accuracy by more than 10 points");
      }
      save_model(augmented, paths.augmented(i, k), cfg.to_json());
      ++made;
    }
  }
  gate.commit();
  return {false, "augment: wrote " + std::to_string(made) + " augmented models"};
}

inline StageResult run_train_pool(const ExperimentConfig& cfg) {
  const Paths paths(cfg);
  const bool pia = cfg.attack.method == "pia";
  detail::StageGate gate(paths, "train-pool", cfg);
  std::vector<std::string> tags;
  if (pia) {
    for (size_t j = 0; j < cfg.pool.pool_count; ++j) {
      tags.push_back("t0_" + std::to_string(j));
      tags.push_back("t1_" + std::to_string(j));
    }
    for (const auto& tag : tags) gate.input_file(paths.pia_csv(tag), "gen-data");
  } else {
    gate.input_file(paths.universe(), "gen-data");
    gate.input_file(paths.splits(), "gen-data");
    for (size_t j = 0; j < cfg.pool.pool_count; ++j) tags.push_back(std::to_string(j));
  }
  for (const auto& tag : tags) gate.output(paths.pool_raw(tag) / "manifest.json");
  gate.output(paths.cost_csv("train-pool"));
  if (gate.can_skip()) return {true, "train-pool: up to date"};

  CostLedger ledger;
  detail::StageTimer timer(&ledger, "pool", cfg.report.timing);
  RandomSource root(cfg.seed);

  auto train_one = [&](const std::string& tag, const Dataset& d_tr,
                       const PoolArchitecture& arch) {
    Pool pool = build_pool(arch, root.stream("pool-init-" + tag).seed());
    RandomSource map_rng = root.stream("pool-mapping-" + tag);
    pool.mapping = build_mapping(d_tr, arch.experts_per_layer, arch.expert_layers, map_rng);
    PoolTrainConfig pc;
    pc.alpha = cfg.pool.alpha;
    pc.beta = cfg.pool.beta;
    pc.epochs = cfg.training.epochs;
    pc.batch_size = cfg.training.batch_size;
    pc.sgd = cfg.sgd();
    pc.seed = root.stream("pool-train-" + tag).seed();
    train_pool(pool, d_tr, pc, &ledger, "pool");
    save_pool(pool, paths.pool_raw(tag), cfg.to_json());
  };

  if (pia) {
    for (const auto& tag : tags) {
      Dataset data = load_dataset_csv(paths.pia_csv(tag));
      PoolArchitecture arch = cfg.architecture;
      arch.input_dim = data.dim();
      arch.classes = static_cast<size_t>(std::max(data.num_classes(), 2));
      train_one(tag, data, arch);
    }
  } else {
    const Dataset universe = load_dataset_csv(paths.universe());
    const AuditPlan plan = load_plan(paths.splits());
    const std::vector<int64_t> aux_ids = detail::auxiliary_ids(cfg, universe, plan);
    std::unordered_set<int64_t> query_ids;
    for (const auto& q : plan.queries) query_ids.insert(q.id);
    std::vector<int64_t> filler_domain;
    for (int64_t id : aux_ids) {
      if (!query_ids.count(id)) filler_domain.push_back(id);
    }

    for (const auto& tag : tags) {
      RandomSource rng = root.stream("pool-dtr-" + tag);
      std::vector<int64_t> ids;
      if (cfg.attack.mode == "online") {
        // all audited queries live in the pool's training set
        for (const auto& q : plan.queries) ids.push_back(q.id);
        if (ids.size() > cfg.pool.train_size) {
          throw ConfigError("config field pool.train_size: smaller than the query set");
        }
      }
      auto filler = detail::pick_ids(filler_domain, cfg.pool.train_size - ids.size(), rng);
      ids.insert(ids.end(), filler.begin(), filler.end());
      train_one(tag, universe.subset_by_ids(ids), cfg.architecture);
    }
  }
  fs::create_directories(paths.cost());
  save_ledger_csv(ledger, paths.cost_csv("train-pool"));
  gate.commit();
  return {false, "train-pool: trained " + std::to_string(tags.size()) + " pool(s)"};
}

inline StageResult run_align(const ExperimentConfig& cfg) {
  const Paths paths(cfg);
  if (cfg.attack.method == "pia") {
    return {true, "align: not used for property inference (pathways are sampled directly)"};
  }
  detail::StageGate gate(paths, "align", cfg);
  gate.input_file(paths.universe(), "gen-data");
  gate.input_file(paths.splits(), "gen-data");
  for (size_t j = 0; j < cfg.pool.pool_count; ++j) {
    gate.input_dir(paths.pool_raw(std::to_string(j)), "train-pool");
  }
  for (size_t j = 0; j < cfg.pool.pool_count; ++j) {
    gate.output(paths.pool_aligned(std::to_string(j)) / "manifest.json");
  }
  gate.output(paths.cost_csv("align"));
  if (gate.can_skip()) return {true, "align: up to date"};

  const Dataset universe = load_dataset_csv(paths.universe());
  const AuditPlan plan = load_plan(paths.splits());
  CostLedger ledger;
  detail::StageTimer timer(&ledger, "align", cfg.report.timing);
  RandomSource root(cfg.seed);

  // For online attacks with several pools, each query enters D_q of half the
  // pools, giving every query both IN and OUT shared models downstream.
  std::vector<std::vector<int64_t>> dq_forced(cfg.pool.pool_count);
  if (cfg.attack.mode == "online") {
    if (cfg.pool.pool_count == 1) {
      for (const auto& q : plan.queries) dq_forced[0].push_back(q.id);
    } else {
      RandomSource rng = root.stream("dq-placement");
      const size_t half = (cfg.pool.pool_count + 1) / 2;
      for (const auto& q : plan.queries) {
        auto chosen = rng.sample_without_replacement(cfg.pool.pool_count, half);
        for (size_t p : chosen) dq_forced[p].push_back(q.id);
      }
    }
  }

  for (size_t j = 0; j < cfg.pool.pool_count; ++j) {
    const std::string tag = std::to_string(j);
    detail::require(fs::exists(paths.pool_raw(tag) / "manifest.json"), "train-pool",
                    "pool checkpoint " + tag);
    Pool pool = load_pool(paths.pool_raw(tag));

    std::vector<int64_t> d_tr_ids;
    d_tr_ids.reserve(pool.mapping.n_examples);
    for (const auto& subset : pool.mapping.pathway_ids) {
      d_tr_ids.insert(d_tr_ids.end(), subset.begin(), subset.end());
    }
    std::sort(d_tr_ids.begin(), d_tr_ids.end());
    const size_t dq_size = std::max<size_t>(
        1, static_cast<size_t>(std::llround(cfg.pool.dq_fraction *
                                            static_cast<double>(d_tr_ids.size()))));

    std::vector<int64_t> dq_ids = dq_forced[j];
    for (int64_t id : dq_ids) {
      if (!pool.mapping.contains(id)) {
        throw StateError("align: query " + std::to_string(id) + " missing from pool " + tag +
                         " training set");
      }
    }
    if (dq_ids.size() < dq_size) {
      RandomSource rng = root.stream("dq-fill-" + tag);
      std::unordered_set<int64_t> taken(dq_ids.begin(), dq_ids.end());
      std::vector<int64_t> rest;
      for (int64_t id : d_tr_ids) {
        if (!taken.count(id)) rest.push_back(id);
      }
      auto filler = detail::pick_ids(rest, dq_size - dq_ids.size(), rng);
      dq_ids.insert(dq_ids.end(), filler.begin(), filler.end());
    }
    Dataset dq = universe.subset_by_ids(dq_ids);

    SgdConfig ft = cfg.sgd();
    ft.learning_rate *= cfg.pool.finetune_lr_scale;
    RandomSource align_rng = root.stream("align-" + tag);
    align_pathways(pool, dq, cfg.pool.shared_models, cfg.pool.finetune_epochs, ft,
                   cfg.training.batch_size, align_rng, &ledger, "align");
    save_pool(pool, paths.pool_aligned(tag), cfg.to_json());
  }
  fs::create_directories(paths.cost());
  save_ledger_csv(ledger, paths.cost_csv("align"));
  gate.commit();
  return {false, "align: aligned " + std::to_string(cfg.pool.shared_models) +
                     " pathways per pool"};
}

// ---------------------------------------------------------------------------
// Attack stage
// ---------------------------------------------------------------------------

namespace detail {

inline void write_roc_csv(const RocCurve& curve, const fs::path& path) {
  std::ofstream out(path);
  char buf[40];
  out << "fpr,tpr,threshold\n";
  for (const auto& p : curve.points) {
    std::snprintf(buf, sizeof(buf), "%.17g", p.fpr);
    out << buf << ",";
    std::snprintf(buf, sizeof(buf), "%.17g", p.tpr);
    out << buf << ",";
    std::snprintf(buf, sizeof(buf), "%.17g", p.threshold);
    out << buf << "\n";
  }
}

inline void write_scores_csv(const std::vector<QueryRecord>& queries,
                             const std::vector<double>& scores, const fs::path& path) {
  std::ofstream out(path);
  char buf[40];
  out << "query_id,member,score\n";
  for (size_t i = 0; i < queries.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", scores[i]);
    out << queries[i].id << "," << (queries[i].member ? 1 : 0) << "," << buf << "\n";
  }
}

inline void write_scoretable_csv(const ScoreTable& table, const fs::path& path) {
  std::ofstream out(path);
  char buf[40];
  out << "model_id,query_id,label,score,membership\n";
  for (size_t m = 0; m < table.n_models; ++m) {
    for (size_t q = 0; q < table.n_queries; ++q) {
      const double score = scaled_logit(table.prob_row(m, q), table.labels[q]);
      std::snprintf(buf, sizeof(buf), "%.17g", score);
      out << table.model_ids[m] << "," << table.query_ids[q] << "," << table.labels[q] << ","
          << buf << "," << static_cast<int>(table.member[table.cell(m, q)]) << "\n";
    }
  }
}

struct SourceTables {
  ScoreTable queries;          // merged reference/shadow grid on the query set
  ScoreTable population;       // same models on the population (rmia only)
  uint64_t cost_evaluations = 0;
  double cost_wallclock_s = 0.0;
};

inline SourceTables load_source_tables(const ExperimentConfig& cfg, const Paths& paths,
                                       const Dataset& queries, const Dataset& population,
                                       bool need_population) {
  SourceTables out;
  std::vector<ScoreTable> query_tables;
  std::vector<ScoreTable> population_tables;
  CostLedger ledger;

  if (cfg.attack.source == "pool") {
    RandomSource root(cfg.seed);
    for (size_t j = 0; j < cfg.pool.pool_count; ++j) {
      const std::string tag = std::to_string(j);
      require(fs::exists(paths.pool_aligned(tag) / "manifest.json"), "align",
              "aligned pool checkpoint " + tag);
      Pool pool = load_pool(paths.pool_aligned(tag));
      std::vector<size_t> served = pool.aligned_set;
      if (cfg.attack.mode == "online" && cfg.pool.pool_count == 1) {
        // a single pool cannot give a query OUT models through its aligned
        // set (the whole query set sits in D_q); serve extra never-aligned
        // pathways as the OUT references
        RandomSource rng = root.stream("out-pathways-" + tag);
        std::set<size_t> aligned(pool.aligned_set.begin(), pool.aligned_set.end());
        std::vector<size_t> rest;
        for (size_t w = 0; w < pool.arch.pathway_count(); ++w) {
          if (!aligned.count(w)) rest.push_back(w);
        }
        const size_t extra = std::min(cfg.pool.reference_pathways, rest.size());
        auto picked = rng.sample_without_replacement(rest.size(), extra);
        for (size_t p : picked) served.push_back(rest[p]);
      }
      ScoreTable t = query_shared_models(pool, served, queries);
      for (auto& id : t.model_ids) id = "pool" + tag + ":" + id;
      query_tables.push_back(std::move(t));
      if (need_population) {
        ScoreTable tp = query_shared_models(pool, served, population);
        for (auto& id : tp.model_ids) id = "pool" + tag + ":" + id;
        population_tables.push_back(std::move(tp));
      }
    }
    ledger.merge(load_ledger_csv(paths.cost_csv("train-pool")));
    ledger.merge(load_ledger_csv(paths.cost_csv("align")));
    for (const char* run : {"pool", "align"}) {
      if (!ledger.has_run(run)) continue;  // zero-epoch stages record nothing
      out.cost_evaluations += ledger.run(run).total_evals();
      out.cost_wallclock_s += ledger.run(run).wallclock_s;
    }
  } else {
    std::vector<ShadowModel> models;
    for (size_t i = 0; i < cfg.baselines.shadow_count; ++i) {
      require(fs::exists(paths.shadow(i) / "manifest.json"), "train-shadows",
              "shadow checkpoint " + std::to_string(i));
      models.push_back(load_model(paths.shadow(i)));
    }
    if (cfg.attack.source == "augmented") {
      for (size_t i = 0; i < cfg.baselines.shadow_count; ++i) {
        for (size_t k = 0; k < cfg.baselines.masks.size(); ++k) {
          require(fs::exists(paths.augmented(i, k) / "manifest.json"), "augment",
                  "augmented checkpoint " + std::to_string(i) + "/" + std::to_string(k));
          models.push_back(load_model(paths.augmented(i, k)));
        }
      }
    }
    std::vector<const ShadowModel*> ptrs;
    for (const auto& m : models) ptrs.push_back(&m);
    ScoreTable t = query_models(ptrs, queries);
    for (size_t m = 0; m < t.model_ids.size(); ++m) {
      t.model_ids[m] = (m < cfg.baselines.shadow_count ? "shadow:" : "augmented:") +
                       std::to_string(m);
    }
    query_tables.push_back(std::move(t));
    if (need_population) {
      ScoreTable tp = query_models(ptrs, population);
      for (size_t m = 0; m < tp.model_ids.size(); ++m) {
        tp.model_ids[m] = (m < cfg.baselines.shadow_count ? "shadow:" : "augmented:") +
                          std::to_string(m);
      }
      population_tables.push_back(std::move(tp));
    }
    ledger.merge(load_ledger_csv(paths.cost_csv("train-shadows")));
    if (ledger.has_run("shadows")) {
      out.cost_evaluations = ledger.run("shadows").total_evals();
      out.cost_wallclock_s = ledger.run("shadows").wallclock_s;
    }
  }

  std::vector<const ScoreTable*> q_ptrs;
  for (const auto& t : query_tables) q_ptrs.push_back(&t);
  out.queries = build_attack_dataset(q_ptrs);
  if (need_population) {
    std::vector<const ScoreTable*> p_ptrs;
    for (const auto& t : population_tables) p_ptrs.push_back(&t);
    out.population = build_attack_dataset(p_ptrs);
  }
  return out;
}

}  // namespace detail

inline StageResult run_attack(const ExperimentConfig& cfg) {
  const Paths paths(cfg);
  detail::StageGate gate(paths, "attack", cfg);
  const bool pia = cfg.attack.method == "pia";
  if (pia) {
    gate.input_file(paths.pia_csv("attack"), "gen-data");
    for (size_t j = 0; j < cfg.pool.pool_count; ++j) {
      gate.input_dir(paths.pool_raw("t0_" + std::to_string(j)), "train-pool");
      gate.input_dir(paths.pool_raw("t1_" + std::to_string(j)), "train-pool");
    }
    gate.input_dir(paths.target(), "train-target");
  } else {
    gate.input_file(paths.universe(), "gen-data");
    gate.input_file(paths.splits(), "gen-data");
    gate.input_dir(paths.target(), "train-target");
    if (cfg.attack.source == "pool") {
      for (size_t j = 0; j < cfg.pool.pool_count; ++j) {
        gate.input_dir(paths.pool_aligned(std::to_string(j)), "align");
      }
    } else {
      for (size_t i = 0; i < cfg.baselines.shadow_count; ++i) gate.input_dir(paths.shadow(i), "train-shadows");
      if (cfg.attack.source == "augmented") {
        for (size_t i = 0; i < cfg.baselines.shadow_count; ++i) {
          for (size_t k = 0; k < cfg.baselines.masks.size(); ++k) {
            gate.input_dir(paths.augmented(i, k), "augment");
          }
        }
      }
    }
  }
  gate.output(paths.report());
  if (gate.can_skip()) return {true, "attack: up to date"};

  nlohmann::ordered_json report{{"format_version", kFormatVersion},
                                {"attack", cfg.attack.method},
                                {"mode", cfg.attack.mode},
                                {"source", cfg.attack.source},
                                {"seed", cfg.seed},
                                {"query_count", nullptr},
                                {"auc", nullptr},
                                {"tf1", nullptr},
                                {"tf01", nullptr},
                                {"cost_evaluations", nullptr},
                                {"cost_wallclock_s", nullptr},
                                {"pia_inferred", nullptr},
                                {"pia_true_ratio", nullptr},
                                {"pia_correct", nullptr},
                                {"pia_loglik_t0", nullptr},
                                {"pia_loglik_t1", nullptr}};

  if (pia) {
    detail::require(fs::exists(paths.target() / "manifest.json"), "train-target",
                    "target checkpoint");
    ShadowModel target = load_model(paths.target());
    std::vector<Pool> pools_t0, pools_t1;
    for (size_t j = 0; j < cfg.pool.pool_count; ++j) {
      pools_t0.push_back(load_pool(paths.pool_raw("t0_" + std::to_string(j))));
      pools_t1.push_back(load_pool(paths.pool_raw("t1_" + std::to_string(j))));
    }
    std::vector<const Pool*> p0, p1;
    for (const auto& p : pools_t0) p0.push_back(&p);
    for (const auto& p : pools_t1) p1.push_back(&p);
    Dataset attack_data = load_dataset_csv(paths.pia_csv("attack"));
    RandomSource rng = RandomSource(cfg.seed).stream("pia-infer");
    PiaResult result = pia_infer(cfg.attack.pia_t0, cfg.attack.pia_t1, p0, p1, target,
                                 attack_data, cfg.attack.pia_pathway_sample, rng);
    CostLedger ledger = load_ledger_csv(paths.cost_csv("train-pool"));
    report["query_count"] = attack_data.size();
    report["pia_inferred"] = result.inferred;
    report["pia_true_ratio"] = cfg.attack.pia_target_ratio;
    report["pia_correct"] = result.inferred == cfg.attack.pia_target_ratio;
    report["pia_loglik_t0"] = result.loglik_t0;
    report["pia_loglik_t1"] = result.loglik_t1;
    report["cost_evaluations"] = ledger.has_run("pool") ? ledger.run("pool").total_evals() : 0;
    report["cost_wallclock_s"] =
        cfg.report.timing && ledger.has_run("pool") ? ledger.run("pool").wallclock_s : 0.0;
  } else {
    const Dataset universe = load_dataset_csv(paths.universe());
    const AuditPlan plan = load_plan(paths.splits());
    detail::require(fs::exists(paths.target() / "manifest.json"), "train-target",
                    "target checkpoint");
    ShadowModel target = load_model(paths.target());

    Dataset queries = detail::query_dataset(universe, plan);
    Dataset population = universe.subset_by_ids(plan.population_ids);
    const bool need_population = cfg.attack.method == "rmia";

    detail::SourceTables sources =
        detail::load_source_tables(cfg, paths, queries, population, need_population);

    std::vector<const ShadowModel*> target_ptr{&target};
    ScoreTable target_table = query_models(target_ptr, queries);
    target_table.model_ids[0] = "target";

    std::vector<double> scores;
    if (cfg.attack.method == "lira") {
      scores = lira_attack(sources.queries, target_table, cfg.attack.mode == "online").scores;
    } else {
      ScoreTable target_pop = query_models(target_ptr, population);
      target_pop.model_ids[0] = "target";
      RmiaConfig rc;
      rc.mode = cfg.attack.mode == "online" ? RmiaMode::kOnline : RmiaMode::kOffline;
      rc.gamma = cfg.attack.gamma;
      rc.a = cfg.attack.a;
      scores = rmia_scores(target_table, sources.queries, target_pop, sources.population, rc);
    }

    std::vector<ScoredLabel> labeled(plan.queries.size());
    for (size_t i = 0; i < plan.queries.size(); ++i) {
      labeled[i] = {scores[i], plan.queries[i].member};
    }
    auto [curve, auc] = roc_and_auc(labeled);

    report["query_count"] = plan.queries.size();
    report["auc"] = auc;
    report["tf1"] = tpr_at_fpr(curve, 0.01);
    report["tf01"] = tpr_at_fpr(curve, 0.001);
    report["cost_evaluations"] = sources.cost_evaluations;
    report["cost_wallclock_s"] = cfg.report.timing ? sources.cost_wallclock_s : 0.0;

    detail::write_roc_csv(curve, paths.roc_csv());
    detail::write_scores_csv(plan.queries, scores, paths.scores_csv());
    detail::write_scoretable_csv(sources.queries, paths.scoretable_csv());
  }

  std::ofstream out(paths.report());
  out << report.dump(2) << "\n";
  gate.commit();
  return {false, "attack: wrote " + paths.report().string()};
}

// ---------------------------------------------------------------------------
// Diagnostics (consistency and diversity factors)
// ---------------------------------------------------------------------------

inline StageResult run_diagnose(const ExperimentConfig& cfg) {
  const Paths paths(cfg);
  if (cfg.attack.method == "pia") {
    return {true, "diagnose: not used for property inference"};
  }
  detail::StageGate gate(paths, "diagnose", cfg);
  gate.input_file(paths.universe(), "gen-data");
  gate.input_file(paths.splits(), "gen-data");
  gate.input_dir(paths.target(), "train-target");
  if (cfg.attack.source == "pool") {
    for (size_t j = 0; j < cfg.pool.pool_count; ++j) {
      gate.input_dir(paths.pool_aligned(std::to_string(j)), "align");
    }
  } else {
    for (size_t i = 0; i < cfg.baselines.shadow_count; ++i) gate.input_dir(paths.shadow(i), "train-shadows");
  }
  gate.output(paths.diagnostics());
  gate.output(paths.entropy_csv());
  if (gate.can_skip()) return {true, "diagnose: up to date"};

  const Dataset universe = load_dataset_csv(paths.universe());
  const AuditPlan plan = load_plan(paths.splits());
  ShadowModel target = load_model(paths.target());
  const Dataset probe = universe.subset_by_ids(plan.population_ids);

  // each source model with its member id set
  struct SourceModel {
    ShadowModel model;
    std::vector<int64_t> member_ids;
  };
  std::vector<SourceModel> models;
  if (cfg.attack.source == "pool") {
    for (size_t j = 0; j < cfg.pool.pool_count; ++j) {
      Pool pool = load_pool(paths.pool_aligned(std::to_string(j)));
      for (size_t w : pool.aligned_set) {
        const Pathway pathway =
            pathway_from_index(w, pool.arch.experts_per_layer, pool.arch.expert_layers);
        SourceModel sm;
        sm.model = transplant_pathway(pool, pathway);
        sm.member_ids = pool.mapping.pathway_ids[w];
        sm.member_ids.insert(sm.member_ids.end(), pool.dq_ids.begin(), pool.dq_ids.end());
        std::sort(sm.member_ids.begin(), sm.member_ids.end());
        sm.member_ids.erase(std::unique(sm.member_ids.begin(), sm.member_ids.end()),
                            sm.member_ids.end());
        models.push_back(std::move(sm));
      }
    }
  } else {
    for (size_t i = 0; i < cfg.baselines.shadow_count; ++i) {
      SourceModel sm;
      sm.model = load_model(paths.shadow(i));
      sm.member_ids = sm.model.train_ids;
      models.push_back(std::move(sm));
    }
  }
  if (models.size() < 4) {
    throw InputError("diagnose: need at least 4 source models for the diversity factor");
  }

  // Factor 1: member scaled-logit overlap with the target
  auto member_scores = [&universe](const ShadowModel& model,
                                   const std::vector<int64_t>& member_ids) {
    Dataset members = universe.subset_by_ids(member_ids);
    Matrix probs = model.predict_probs(members.features);
    std::vector<double> scores(members.size());
    for (size_t i = 0; i < members.size(); ++i) {
      scores[i] = scaled_logit(probs.row(i), members.labels[i]);
    }
    return scores;
  };
  std::vector<double> pooled;
  for (const auto& sm : models) {
    auto scores = member_scores(sm.model, sm.member_ids);
    pooled.insert(pooled.end(), scores.begin(), scores.end());
  }
  const GaussianModel source_fit = GaussianModel::fit(pooled);
  const GaussianModel target_fit =
      GaussianModel::fit(member_scores(target, target.train_ids));
  const double consistency = bhattacharyya(source_fit, target_fit);

  // Factor 2: entropy gain over nested model prefixes
  std::vector<Matrix> probs;
  probs.reserve(models.size());
  for (const auto& sm : models) probs.push_back(sm.model.predict_probs(probe.features));
  std::vector<size_t> sizes;
  for (size_t k = 4; k < models.size(); k *= 2) sizes.push_back(k);
  if (sizes.empty() || sizes.back() != models.size()) sizes.push_back(models.size());
  const auto gains = entropy_diversity(probs, sizes);

  nlohmann::ordered_json gain_json = nlohmann::ordered_json::array();
  {
    std::ofstream csv(paths.entropy_csv());
    csv << "k,diversity,gain\n";
    char buf[40];
    for (const auto& g : gains) {
      gain_json.push_back({{"k", g.k}, {"diversity", g.diversity}, {"gain", g.gain}});
      std::snprintf(buf, sizeof(buf), "%.17g", g.diversity);
      csv << g.k << "," << buf << ",";
      std::snprintf(buf, sizeof(buf), "%.17g", g.gain);
      csv << buf << "\n";
    }
  }
  nlohmann::ordered_json diag{{"format_version", kFormatVersion},
                              {"source", cfg.attack.source},
                              {"model_count", models.size()},
                              {"bhattacharyya_consistency", consistency},
                              {"member_logit_mean", source_fit.mean},
                              {"member_logit_std", source_fit.std},
                              {"target_logit_mean", target_fit.mean},
                              {"target_logit_std", target_fit.std},
                              {"entropy_probe_size", probe.size()},
                              {"entropy_gain", gain_json}};
  std::ofstream out(paths.diagnostics());
  out << diag.dump(2) << "\n";
  gate.commit();
  return {false, "diagnose: consistency " + std::to_string(consistency)};
}

inline StageResult run_gradcheck(const ExperimentConfig& cfg) {
  const Paths paths(cfg);
  fs::create_directories(paths.root);
  const GradSuiteReport report = run_pool_grad_suite(20, 1e-4, cfg.seed);
  nlohmann::ordered_json j{{"format_version", kFormatVersion},
                           {"pools", report.pools},
                           {"tolerance", report.tolerance},
                           {"max_relative_error_ce", report.max_ce},
                           {"max_relative_error_sr", report.max_sr},
                           {"max_relative_error_or", report.max_or},
                           {"max_relative_error_composite", report.max_composite},
                           {"pass", report.passes()}};
  std::ofstream out(paths.gradcheck());
  out << j.dump(2) << "\n";
  if (!report.passes()) {
    throw NumericError("gradcheck: max relative error " + std::to_string(report.worst()) +
                       " exceeds tolerance");
  }
  return {false, "gradcheck: max relative error " + std::to_string(report.worst())};
}

// ---------------------------------------------------------------------------
// Delta report between a baseline run and another run (Table-style output).
// ---------------------------------------------------------------------------

inline std::string format_delta(double delta, double equal_threshold = 0.02) {
  if (std::fabs(delta) < equal_threshold) return "=";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%+.2f", delta);
  return buf;
}

inline nlohmann::ordered_json make_delta_report(const nlohmann::json& base,
                                                const nlohmann::json& other) {
  auto metric = [](const nlohmann::json& j, const char* key) -> std::optional<double> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
  };
  nlohmann::ordered_json out{{"format_version", kFormatVersion},
                             {"base", base},
                             {"other", other}};
  for (const char* key : {"auc", "tf1", "tf01"}) {
    const auto b = metric(base, key);
    const auto o = metric(other, key);
    if (b && o) {
      const double delta = *o - *b;
      out[std::string("delta_") + key] = delta;
      out[std::string("delta_") + key + "_display"] = format_delta(delta);
    } else {
      out[std::string("delta_") + key] = nullptr;
      out[std::string("delta_") + key + "_display"] = "-";
    }
  }
  const auto bc = metric(base, "cost_evaluations");
  const auto oc = metric(other, "cost_evaluations");
  if (bc && oc && *bc > 0) {
    const double pct = 100.0 * (1.0 - *oc / *bc);
    out["cost_reduction_pct"] = pct;
    out["cost_reduction_display"] = format_reduction_pct(pct);
  } else {
    out["cost_reduction_pct"] = nullptr;
    out["cost_reduction_display"] = "-";
  }
  const auto bw = metric(base, "cost_wallclock_s");
  const auto ow = metric(other, "cost_wallclock_s");
  if (bw && ow && *bw > 0) {
    out["wallclock_reduction_pct"] = 100.0 * (1.0 - *ow / *bw);
  } else {
    out["wallclock_reduction_pct"] = nullptr;
  }
  return out;
}

inline std::string render_delta_table(const nlohmann::ordered_json& delta) {
  auto cell = [](const nlohmann::json& j, const char* key) -> std::string {
    if (!j.contains(key) || j.at(key).is_null()) return "-";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4g", j.at(key).get<double>());
    return buf;
  };
  const auto& base = delta.at("base");
  const auto& other = delta.at("other");
  std::string table;
  table += "metric            base       other      delta\n";
  auto row = [&](const char* name, const char* key, const std::string& d) {
    char line[128];
    std::snprintf(line, sizeof(line), "%-17s %-10s %-10s %s\n", name, cell(base, key).c_str(),
                  cell(other, key).c_str(), d.c_str());
    table += line;
  };
  row("auc", "auc", delta.at("delta_auc_display").get<std::string>());
  row("tf1", "tf1", delta.at("delta_tf1_display").get<std::string>());
  row("tf01", "tf01", delta.at("delta_tf01_display").get<std::string>());
  row("cost_evaluations", "cost_evaluations",
      delta.at("cost_reduction_display").get<std::string>());
  return table;
}

inline nlohmann::ordered_json run_report(const fs::path& base_report,
                                         const fs::path& other_report, const fs::path& out_dir) {
  auto read = [](const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw DependencyError("missing report: " + p.string() + "; run 'attack' first");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw ParseError("report " + p.string() + ": " + e.what());
    }
    return j;
  };
  const nlohmann::ordered_json delta = make_delta_report(read(base_report), read(other_report));
  fs::create_directories(out_dir);
  {
    std::ofstream out(out_dir / "summary.json");
    out << delta.dump(2) << "\n";
  }
  {
    std::ofstream out(out_dir / "summary.txt");
    out << render_delta_table(delta);
  }
  return delta;
}

// ---------------------------------------------------------------------------
// Whole-pipeline helpers
// ---------------------------------------------------------------------------

inline std::vector<StageResult> run_through_attack(const ExperimentConfig& cfg) {
  std::vector<StageResult> results;
  results.push_back(run_gen_data(cfg));
  results.push_back(run_train_target(cfg));
  if (cfg.attack.method != "pia") {
    if (cfg.attack.source == "pool") {
      results.push_back(run_train_pool(cfg));
      results.push_back(run_align(cfg));
    } else {
      results.push_back(run_train_shadows(cfg));
      if (cfg.attack.source == "augmented") results.push_back(run_augment(cfg));
    }
  } else {
    results.push_back(run_train_pool(cfg));
  }
  results.push_back(run_attack(cfg));
  return results;
}

// Five-seed protocol: run the chain for seeds 0..4 in per-seed directories
// and report the mean metrics.
inline nlohmann::ordered_json run_five_seeds(const ExperimentConfig& base_cfg) {
  nlohmann::ordered_json per_seed = nlohmann::ordered_json::array();
  double auc_sum = 0, tf1_sum = 0, tf01_sum = 0, cost_sum = 0;
  size_t metric_runs = 0;
  for (uint64_t s = 0; s < 5; ++s) {
    ExperimentConfig cfg = base_cfg;
    cfg.seed = s;
    cfg.output_dir = base_cfg.output_dir / ("seed_" + std::to_string(s));
    run_through_attack(cfg);
    std::ifstream in(Paths(cfg).report());
    nlohmann::ordered_json r;
    in >> r;
    per_seed.push_back(r);
    if (!r.at("auc").is_null()) {
      auc_sum += r.at("auc").get<double>();
      tf1_sum += r.at("tf1").get<double>();
      tf01_sum += r.at("tf01").get<double>();
      cost_sum += r.at("cost_evaluations").get<double>();
      ++metric_runs;
    }
  }
  nlohmann::ordered_json summary{{"format_version", kFormatVersion},
                                 {"seeds", {0, 1, 2, 3, 4}},
                                 {"auc", nullptr},
                                 {"tf1", nullptr},
                                 {"tf01", nullptr},
                                 {"cost_evaluations", nullptr},
                                 {"per_seed", per_seed}};
  if (metric_runs > 0) {
    summary["auc"] = auc_sum / metric_runs;
    summary["tf1"] = tf1_sum / metric_runs;
    summary["tf01"] = tf01_sum / metric_runs;
    summary["cost_evaluations"] = cost_sum / metric_runs;
  }
  fs::create_directories(base_cfg.output_dir);
  std::ofstream out(base_cfg.output_dir / "report.json");
  out << summary.dump(2) << "\n";
  return summary;
}

}  // namespace shadowpool::pipeline
