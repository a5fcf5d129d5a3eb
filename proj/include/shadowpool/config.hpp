#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "shadowpool/common.hpp"
#include "shadowpool/json_util.hpp"
#include "shadowpool/pool.hpp"
#include "shadowpool/shadow.hpp"

namespace shadowpool {

// One config file = one reproducible experiment. Every field has a default;
// a minimal file is {"version": 1}.
struct ExperimentConfig {
  int version = kFormatVersion;
  uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/default";

  struct DatasetSpec {
    std::string kind = "blobs";  // blobs | property | csv
    std::string csv_path;
    size_t n_per_class = 600;
    size_t classes = 10;
    size_t dim = 16;
    double spread = 2.0;
    size_t target_train_size = 2000;
    size_t query_count = 200;
    size_t population_size = 500;
    bool overlap_auxiliary_target = true;
    // property-inference fixture
    size_t property_n = 2000;
    size_t property_dim = 8;
    double property_shift = 2.0;
    size_t property_attack_size = 40;
  } dataset;

  PoolArchitecture architecture = [] {
    PoolArchitecture a;
    a.input_dim = 16;
    a.stem_widths = {48};
    a.expert_layers = 3;
    a.experts_per_layer = 3;
    a.expert_widths = {48};
    a.head_widths = {};
    a.classes = 10;
    return a;
  }();

  struct TrainingSpec {
    size_t epochs = 100;
    size_t batch_size = 32;
    double learning_rate = 0.02;
    double momentum = 0.9;
    double weight_decay = 5e-4;
  } training;

  struct PoolSpec {
    std::string preset = "online";  // online | offline | custom
    double alpha = 0.05;
    double beta = 0.01;
    size_t shared_models = 8;  // n
    double dq_fraction = 0.1;
    size_t finetune_epochs = 10;
    double finetune_lr_scale = 0.1;
    size_t pool_count = 1;
    size_t train_size = 4000;
    size_t reference_pathways = 8;  // extra OUT models served by a single online pool
    size_t enumeration_cap = kDefaultPathwayCap;
  } pool;

  struct BaselineSpec {
    size_t shadow_count = 4;
    double subset_ratio = 1.2;  // pool train size over one shadow subset size
    std::vector<MaskSpec> masks = {{MaskScope::kFullyConnected, 0.1, 0}};
  } baselines;

  struct AttackSpec {
    std::string method = "lira";  // lira | rmia | pia
    std::string mode = "online";  // online | offline
    std::string source = "pool";  // pool | shadows | augmented
    double gamma = 1.0;
    double a = 0.3;
    double pia_t0 = 0.3;
    double pia_t1 = 0.5;
    double pia_target_ratio = 0.3;
    size_t pia_pathway_sample = 8;
  } attack;

  struct ReportSpec {
    bool timing = false;  // keep reports byte-stable by default
  } report;

  size_t shadow_subset_size() const {
    return static_cast<size_t>(static_cast<double>(pool.train_size) / baselines.subset_ratio);
  }

  SgdConfig sgd() const {
    SgdConfig cfg;
    cfg.learning_rate = training.learning_rate;
    cfg.momentum = training.momentum;
    cfg.weight_decay = training.weight_decay;
    return cfg;
  }

  void validate() const;
  nlohmann::ordered_json to_json() const;
};

namespace detail {

// Typed field reads that carry the config path in error messages.
template <typename T>
T cfg_get(const nlohmann::json& j, const std::string& path, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config field " + (path.empty() ? key : path + "." + key) +
                      ": wrong type or value");
  }
}

inline void cfg_known_keys(const nlohmann::json& j, const std::string& path,
                           const std::vector<std::string>& known) {
  if (!j.is_object()) throw ConfigError("config section " + path + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool found = false;
    for (const auto& k : known) {
      if (it.key() == k) {
        found = true;
        break;
      }
    }
    if (!found) {
      throw ConfigError("config field " + (path.empty() ? it.key() : path + "." + it.key()) +
                        ": unknown key");
    }
  }
}

}  // namespace detail

inline MaskSpec mask_from_json(const nlohmann::json& j, const std::string& path) {
  detail::cfg_known_keys(j, path, {"scope", "prune_probability", "seed"});
  MaskSpec spec;
  const std::string scope = detail::cfg_get<std::string>(j, path, "scope", "fc");
  if (scope == "fc") {
    spec.scope = MaskScope::kFullyConnected;
  } else if (scope == "conv") {
    spec.scope = MaskScope::kConvAnalog;
  } else {
    throw ConfigError("config field " + path + ".scope: must be 'fc' or 'conv'");
  }
  spec.prune_probability = detail::cfg_get<double>(j, path, "prune_probability", 0.1);
  spec.seed = detail::cfg_get<uint64_t>(j, path, "seed", 0);
  return spec;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  detail::cfg_known_keys(j, "", {"version", "seed", "output_dir", "dataset", "architecture",
                                 "training", "pool", "baselines", "attack", "report"});
  cfg.version = detail::cfg_get<int>(j, "", "version", -1);
  if (cfg.version != kFormatVersion) {
    throw ConfigError("config field version: must be " + std::to_string(kFormatVersion));
  }
  cfg.seed = detail::cfg_get<uint64_t>(j, "", "seed", cfg.seed);
  cfg.output_dir = detail::cfg_get<std::string>(j, "", "output_dir", cfg.output_dir.string());

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    detail::cfg_known_keys(
        d, "dataset",
        {"kind", "csv_path", "n_per_class", "classes", "dim", "spread", "target_train_size",
         "query_count", "population_size", "overlap_auxiliary_target", "property_n",
         "property_dim", "property_shift", "property_attack_size"});
    auto& ds = cfg.dataset;
    ds.kind = detail::cfg_get<std::string>(d, "dataset", "kind", ds.kind);
    ds.csv_path = detail::cfg_get<std::string>(d, "dataset", "csv_path", ds.csv_path);
    ds.n_per_class = detail::cfg_get<size_t>(d, "dataset", "n_per_class", ds.n_per_class);
    ds.classes = detail::cfg_get<size_t>(d, "dataset", "classes", ds.classes);
    ds.dim = detail::cfg_get<size_t>(d, "dataset", "dim", ds.dim);
    ds.spread = detail::cfg_get<double>(d, "dataset", "spread", ds.spread);
    ds.target_train_size =
        detail::cfg_get<size_t>(d, "dataset", "target_train_size", ds.target_train_size);
    ds.query_count = detail::cfg_get<size_t>(d, "dataset", "query_count", ds.query_count);
    ds.population_size =
        detail::cfg_get<size_t>(d, "dataset", "population_size", ds.population_size);
    ds.overlap_auxiliary_target = detail::cfg_get<bool>(d, "dataset", "overlap_auxiliary_target",
                                                        ds.overlap_auxiliary_target);
    ds.property_n = detail::cfg_get<size_t>(d, "dataset", "property_n", ds.property_n);
    ds.property_dim = detail::cfg_get<size_t>(d, "dataset", "property_dim", ds.property_dim);
    ds.property_shift =
        detail::cfg_get<double>(d, "dataset", "property_shift", ds.property_shift);
    ds.property_attack_size =
        detail::cfg_get<size_t>(d, "dataset", "property_attack_size", ds.property_attack_size);
  }

  if (j.contains("architecture")) {
    const auto& a = j.at("architecture");
    detail::cfg_known_keys(a, "architecture",
                           {"input_dim", "stem_widths", "expert_layers", "experts_per_layer",
                            "expert_widths", "head_widths", "classes"});
    auto& arch = cfg.architecture;
    arch.input_dim = detail::cfg_get<size_t>(a, "architecture", "input_dim", arch.input_dim);
    arch.stem_widths =
        detail::cfg_get<std::vector<size_t>>(a, "architecture", "stem_widths", arch.stem_widths);
    arch.expert_layers =
        detail::cfg_get<size_t>(a, "architecture", "expert_layers", arch.expert_layers);
    arch.experts_per_layer =
        detail::cfg_get<size_t>(a, "architecture", "experts_per_layer", arch.experts_per_layer);
    arch.expert_widths = detail::cfg_get<std::vector<size_t>>(a, "architecture", "expert_widths",
                                                              arch.expert_widths);
    arch.head_widths =
        detail::cfg_get<std::vector<size_t>>(a, "architecture", "head_widths", arch.head_widths);
    arch.classes = detail::cfg_get<size_t>(a, "architecture", "classes", arch.classes);
  }

  if (j.contains("training")) {
    const auto& t = j.at("training");
    detail::cfg_known_keys(t, "training",
                           {"epochs", "batch_size", "learning_rate", "momentum", "weight_decay"});
    auto& tr = cfg.training;
    tr.epochs = detail::cfg_get<size_t>(t, "training", "epochs", tr.epochs);
    tr.batch_size = detail::cfg_get<size_t>(t, "training", "batch_size", tr.batch_size);
    tr.learning_rate = detail::cfg_get<double>(t, "training", "learning_rate", tr.learning_rate);
    tr.momentum = detail::cfg_get<double>(t, "training", "momentum", tr.momentum);
    tr.weight_decay = detail::cfg_get<double>(t, "training", "weight_decay", tr.weight_decay);
  }

  if (j.contains("pool")) {
    const auto& p = j.at("pool");
    detail::cfg_known_keys(p, "pool",
                           {"preset", "alpha", "beta", "shared_models", "dq_fraction",
                            "finetune_epochs", "finetune_lr_scale", "pool_count", "train_size",
                            "reference_pathways", "enumeration_cap"});
    auto& pl = cfg.pool;
    pl.preset = detail::cfg_get<std::string>(p, "pool", "preset", pl.preset);
    // presets fix the regularization and fine-tuning profile; explicit
    // fields still win
    if (pl.preset == "offline") {
      pl.alpha = 0.0;
      pl.beta = 0.0;
      pl.finetune_epochs = 3;
    } else if (pl.preset == "online") {
      pl.alpha = 0.05;
      pl.beta = 0.01;
      pl.finetune_epochs = 10;
    } else if (pl.preset != "custom") {
      throw ConfigError("config field pool.preset: must be 'online', 'offline', or 'custom'");
    }
    pl.alpha = detail::cfg_get<double>(p, "pool", "alpha", pl.alpha);
    pl.beta = detail::cfg_get<double>(p, "pool", "beta", pl.beta);
    pl.shared_models = detail::cfg_get<size_t>(p, "pool", "shared_models", pl.shared_models);
    pl.dq_fraction = detail::cfg_get<double>(p, "pool", "dq_fraction", pl.dq_fraction);
    pl.finetune_epochs = detail::cfg_get<size_t>(p, "pool", "finetune_epochs", pl.finetune_epochs);
    pl.finetune_lr_scale =
        detail::cfg_get<double>(p, "pool", "finetune_lr_scale", pl.finetune_lr_scale);
    pl.pool_count = detail::cfg_get<size_t>(p, "pool", "pool_count", pl.pool_count);
    pl.train_size = detail::cfg_get<size_t>(p, "pool", "train_size", pl.train_size);
    pl.reference_pathways =
        detail::cfg_get<size_t>(p, "pool", "reference_pathways", pl.reference_pathways);
    pl.enumeration_cap =
        detail::cfg_get<size_t>(p, "pool", "enumeration_cap", pl.enumeration_cap);
  }

  if (j.contains("baselines")) {
    const auto& b = j.at("baselines");
    detail::cfg_known_keys(b, "baselines", {"shadow_count", "subset_ratio", "masks"});
    auto& bl = cfg.baselines;
    bl.shadow_count = detail::cfg_get<size_t>(b, "baselines", "shadow_count", bl.shadow_count);
    bl.subset_ratio = detail::cfg_get<double>(b, "baselines", "subset_ratio", bl.subset_ratio);
    if (b.contains("masks")) {
      if (!b.at("masks").is_array()) {
        throw ConfigError("config field baselines.masks: expected an array");
      }
      bl.masks.clear();
      size_t idx = 0;
      for (const auto& m : b.at("masks")) {
        bl.masks.push_back(mask_from_json(m, "baselines.masks[" + std::to_string(idx) + "]"));
        ++idx;
      }
    }
  }

  if (j.contains("attack")) {
    const auto& a = j.at("attack");
    detail::cfg_known_keys(a, "attack",
                           {"method", "mode", "source", "gamma", "a", "pia_t0", "pia_t1",
                            "pia_target_ratio", "pia_pathway_sample"});
    auto& at = cfg.attack;
    at.method = detail::cfg_get<std::string>(a, "attack", "method", at.method);
    at.mode = detail::cfg_get<std::string>(a, "attack", "mode", at.mode);
    at.source = detail::cfg_get<std::string>(a, "attack", "source", at.source);
    at.gamma = detail::cfg_get<double>(a, "attack", "gamma", at.gamma);
    at.a = detail::cfg_get<double>(a, "attack", "a", at.a);
    at.pia_t0 = detail::cfg_get<double>(a, "attack", "pia_t0", at.pia_t0);
    at.pia_t1 = detail::cfg_get<double>(a, "attack", "pia_t1", at.pia_t1);
    at.pia_target_ratio =
        detail::cfg_get<double>(a, "attack", "pia_target_ratio", at.pia_t0);
    at.pia_pathway_sample =
        detail::cfg_get<size_t>(a, "attack", "pia_pathway_sample", at.pia_pathway_sample);
  }

  if (j.contains("report")) {
    const auto& r = j.at("report");
    detail::cfg_known_keys(r, "report", {"timing"});
    cfg.report.timing = detail::cfg_get<bool>(r, "report", "timing", cfg.report.timing);
  }

  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

inline void ExperimentConfig::validate() const {
  if (dataset.kind != "blobs" && dataset.kind != "property" && dataset.kind != "csv") {
    throw ConfigError("config field dataset.kind: must be 'blobs', 'property', or 'csv'");
  }
  if (dataset.kind == "csv" && dataset.csv_path.empty()) {
    throw ConfigError("config field dataset.csv_path: required when dataset.kind is 'csv'");
  }
  if (dataset.kind == "blobs" && dataset.dim != architecture.input_dim) {
    throw ConfigError("config field architecture.input_dim: must equal dataset.dim");
  }
  if (dataset.kind == "blobs" && dataset.classes != architecture.classes) {
    throw ConfigError("config field architecture.classes: must equal dataset.classes");
  }
  try {
    architecture.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config section architecture: ") + e.what());
  }
  if (architecture.experts_per_layer < 2) {
    throw ConfigError("config field architecture.experts_per_layer: must be >= 2");
  }
  size_t pathways = 1;
  bool capped = false;
  for (size_t l = 0; l < architecture.expert_layers; ++l) {
    pathways *= architecture.experts_per_layer;
    if (pathways > pool.enumeration_cap) {
      capped = true;
      break;
    }
  }
  if (capped) {
    throw ConfigError("config field pool.enumeration_cap: M^L exceeds the cap");
  }
  if (pool.shared_models > pathways) {
    throw ConfigError("config field pool.shared_models: must be <= M^L");
  }
  if (pool.train_size < pathways) {
    throw ConfigError("config field pool.train_size: must be >= M^L");
  }
  if (pool.alpha < 0 || pool.beta < 0) {
    throw ConfigError("config field pool.alpha/beta: must be >= 0");
  }
  if (pool.dq_fraction <= 0.0 || pool.dq_fraction > 1.0) {
    throw ConfigError("config field pool.dq_fraction: must be in (0,1]");
  }
  if (pool.pool_count < 1) throw ConfigError("config field pool.pool_count: must be >= 1");
  if (training.batch_size < 1) throw ConfigError("config field training.batch_size: must be >= 1");
  if (training.momentum < 0 || training.momentum >= 1 || training.weight_decay < 0 ||
      training.weight_decay >= 1) {
    throw ConfigError("config field training.momentum/weight_decay: must lie in [0,1)");
  }
  if (baselines.subset_ratio < 1.0) {
    throw ConfigError("config field baselines.subset_ratio: must be >= 1");
  }
  for (size_t i = 0; i < baselines.masks.size(); ++i) {
    if (baselines.masks[i].prune_probability < 0 || baselines.masks[i].prune_probability > 1) {
      throw ConfigError("config field baselines.masks[" + std::to_string(i) +
                        "].prune_probability: must be in [0,1]");
    }
  }
  if (attack.method != "lira" && attack.method != "rmia" && attack.method != "pia") {
    throw ConfigError("config field attack.method: must be 'lira', 'rmia', or 'pia'");
  }
  if (attack.mode != "online" && attack.mode != "offline") {
    throw ConfigError("config field attack.mode: must be 'online' or 'offline'");
  }
  if (attack.source != "pool" && attack.source != "shadows" && attack.source != "augmented") {
    throw ConfigError("config field attack.source: must be 'pool', 'shadows', or 'augmented'");
  }
  if (attack.a < 0.0 || attack.a > 1.0) {
    throw ConfigError("config field attack.a: must be in [0,1]");
  }
  if (attack.method != "pia" && dataset.kind == "blobs") {
    const size_t universe = dataset.n_per_class * dataset.classes;
    if (dataset.query_count > universe) {
      throw ConfigError("config field dataset.query_count: exceeds the universe size");
    }
    const size_t non_members = dataset.query_count - dataset.query_count / 2;
    if (dataset.target_train_size + non_members > universe) {
      throw ConfigError(
          "config field dataset.target_train_size: universe too small for the target split "
          "plus non-member queries");
    }
    if (dataset.query_count / 2 > dataset.target_train_size) {
      throw ConfigError("config field dataset.query_count: more member queries than the "
                        "target training set holds");
    }
  }
}

inline nlohmann::ordered_json ExperimentConfig::to_json() const {
  nlohmann::ordered_json masks = nlohmann::ordered_json::array();
  for (const auto& m : baselines.masks) {
    masks.push_back({{"scope", mask_scope_name(m.scope)},
                     {"prune_probability", m.prune_probability},
                     {"seed", m.seed}});
  }
  return nlohmann::ordered_json{
      {"version", version},
      {"seed", seed},
      {"output_dir", output_dir.string()},
      {"dataset",
       {{"kind", dataset.kind},
        {"csv_path", dataset.csv_path},
        {"n_per_class", dataset.n_per_class},
        {"classes", dataset.classes},
        {"dim", dataset.dim},
        {"spread", dataset.spread},
        {"target_train_size", dataset.target_train_size},
        {"query_count", dataset.query_count},
        {"population_size", dataset.population_size},
        {"overlap_auxiliary_target", dataset.overlap_auxiliary_target},
        {"property_n", dataset.property_n},
        {"property_dim", dataset.property_dim},
        {"property_shift", dataset.property_shift},
        {"property_attack_size", dataset.property_attack_size}}},
      {"architecture", architecture_to_json(architecture)},
      {"training",
       {{"epochs", training.epochs},
        {"batch_size", training.batch_size},
        {"learning_rate", training.learning_rate},
        {"momentum", training.momentum},
        {"weight_decay", training.weight_decay}}},
      {"pool",
       {{"preset", pool.preset},
        {"alpha", pool.alpha},
        {"beta", pool.beta},
        {"shared_models", pool.shared_models},
        {"dq_fraction", pool.dq_fraction},
        {"finetune_epochs", pool.finetune_epochs},
        {"finetune_lr_scale", pool.finetune_lr_scale},
        {"pool_count", pool.pool_count},
        {"train_size", pool.train_size},
        {"reference_pathways", pool.reference_pathways},
        {"enumeration_cap", pool.enumeration_cap}}},
      {"baselines",
       {{"shadow_count", baselines.shadow_count},
        {"subset_ratio", baselines.subset_ratio},
        {"masks", masks}}},
      {"attack",
       {{"method", attack.method},
        {"mode", attack.mode},
        {"source", attack.source},
        {"gamma", attack.gamma},
        {"a", attack.a},
        {"pia_t0", attack.pia_t0},
        {"pia_t1", attack.pia_t1},
        {"pia_target_ratio", attack.pia_target_ratio},
        {"pia_pathway_sample", attack.pia_pathway_sample}}},
      {"report", {{"timing", report.timing}}}};
}

}  // namespace shadowpool
