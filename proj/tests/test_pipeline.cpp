#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "shadowpool/pipeline.hpp"

using namespace shadowpool;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("shadowpool_pipe_" + name);
  fs::remove_all(dir);
  return dir;
}

// small, fast experiment for pipeline plumbing tests
ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig cfg;
  cfg.seed = 0;
  cfg.output_dir = out;
  cfg.dataset.n_per_class = 60;
  cfg.dataset.classes = 4;
  cfg.dataset.dim = 8;
  cfg.dataset.spread = 2.0;
  cfg.dataset.target_train_size = 80;
  cfg.dataset.query_count = 40;
  cfg.dataset.population_size = 60;
  cfg.architecture.input_dim = 8;
  cfg.architecture.stem_widths = {12};
  cfg.architecture.expert_layers = 2;
  cfg.architecture.experts_per_layer = 3;
  cfg.architecture.expert_widths = {12};
  cfg.architecture.classes = 4;
  cfg.training.epochs = 4;
  cfg.training.batch_size = 16;
  cfg.pool.shared_models = 4;
  cfg.pool.train_size = 120;
  cfg.pool.reference_pathways = 4;
  cfg.baselines.shadow_count = 4;
  cfg.validate();
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config: defaults load from a minimal document and bad fields carry paths") {
  ExperimentConfig cfg = config_from_json(nlohmann::json{{"version", 1}});
  CHECK(cfg.seed == 0);
  CHECK(cfg.pool.alpha == 0.05);  // online preset

  CHECK_THROWS_WITH_AS(config_from_json(nlohmann::json{{"version", 2}}),
                       doctest::Contains("version"), ConfigError);
  CHECK_THROWS_WITH_AS(
      config_from_json(nlohmann::json{{"version", 1}, {"pool", {{"alpha", "x"}}}}),
      doctest::Contains("pool.alpha"), ConfigError);
  CHECK_THROWS_WITH_AS(
      config_from_json(nlohmann::json{{"version", 1}, {"pool", {{"alhpa", 0.1}}}}),
      doctest::Contains("pool.alhpa"), ConfigError);
  CHECK_THROWS_WITH_AS(
      config_from_json(nlohmann::json{
          {"version", 1}, {"architecture", {{"experts_per_layer", 1}}}}),
      doctest::Contains("experts_per_layer"), ConfigError);
  // n > M^L
  CHECK_THROWS_WITH_AS(
      config_from_json(nlohmann::json{{"version", 1},
                                      {"pool", {{"shared_models", 1000}}}}),
      doctest::Contains("shared_models"), ConfigError);
}

TEST_CASE("config: presets fill regularization profiles, explicit keys win") {
  auto offline = config_from_json(nlohmann::json{
      {"version", 1}, {"pool", {{"preset", "offline"}}}, {"attack", {{"mode", "offline"}}}});
  CHECK(offline.pool.alpha == 0.0);
  CHECK(offline.pool.beta == 0.0);
  CHECK(offline.pool.finetune_epochs == 3);

  auto mixed = config_from_json(nlohmann::json{
      {"version", 1}, {"pool", {{"preset", "offline"}, {"finetune_epochs", 7}}}});
  CHECK(mixed.pool.finetune_epochs == 7);
  CHECK(mixed.pool.alpha == 0.0);
}

TEST_CASE("pipeline: attack without upstream checkpoints names the missing stage") {
  ExperimentConfig cfg = tiny_config(fresh_dir("deps"));
  CHECK_THROWS_WITH_AS(pipeline::run_attack(cfg), doctest::Contains("gen-data"),
                       DependencyError);
  pipeline::run_gen_data(cfg);
  CHECK_THROWS_WITH_AS(pipeline::run_attack(cfg), doctest::Contains("train-target"),
                       DependencyError);
  pipeline::run_train_target(cfg);
  // pool source still missing
  CHECK_THROWS_AS(pipeline::run_attack(cfg), DependencyError);
  CHECK_THROWS_WITH_AS(pipeline::run_align(cfg), doctest::Contains("train-pool"),
                       DependencyError);
}

TEST_CASE("pipeline: smoke run emits a valid report and resumes as a no-op") {
  ExperimentConfig cfg = tiny_config(fresh_dir("smoke"));
  auto results = pipeline::run_through_attack(cfg);
  for (const auto& r : results) CHECK_FALSE(r.skipped);

  pipeline::Paths paths(cfg);
  nlohmann::json report;
  {
    std::ifstream in(paths.report());
    REQUIRE(in.good());
    in >> report;
  }
  const double auc = report.at("auc").get<double>();
  CHECK(auc >= 0.0);
  CHECK(auc <= 1.0);
  CHECK(report.at("cost_evaluations").get<uint64_t>() > 0);
  CHECK(fs::exists(paths.roc_csv()));
  CHECK(fs::exists(paths.scores_csv()));
  CHECK(fs::exists(paths.scoretable_csv()));

  // rerunning with unchanged inputs skips every stage and rewrites nothing
  const std::string before = slurp(paths.report());
  auto again = pipeline::run_through_attack(cfg);
  for (const auto& r : again) CHECK(r.skipped);
  CHECK(slurp(paths.report()) == before);

  // diagnose over the pool source
  auto diag = pipeline::run_diagnose(cfg);
  CHECK_FALSE(diag.skipped);
  nlohmann::json d;
  {
    std::ifstream in(paths.diagnostics());
    in >> d;
  }
  CHECK(d.at("bhattacharyya_consistency").get<double>() > 0.0);
  CHECK(d.at("bhattacharyya_consistency").get<double>() <= 1.0);
}

TEST_CASE("pipeline: byte-identical outputs for identical config and seed") {
  ExperimentConfig a = tiny_config(fresh_dir("det_a"));
  ExperimentConfig b = tiny_config(fresh_dir("det_b"));
  pipeline::run_through_attack(a);
  pipeline::run_through_attack(b);
  pipeline::Paths pa(a), pb(b);
  CHECK(slurp(pa.report()) == slurp(pb.report()));
  CHECK(slurp(pa.roc_csv()) == slurp(pb.roc_csv()));
  CHECK(slurp(pa.scores_csv()) == slurp(pb.scores_csv()));
  CHECK(slurp(pa.universe()) == slurp(pb.universe()));
}

TEST_CASE("pipeline: changing the seed invalidates stamps and changes outputs") {
  ExperimentConfig cfg = tiny_config(fresh_dir("reseed"));
  pipeline::run_through_attack(cfg);
  pipeline::Paths paths(cfg);
  const std::string before = slurp(paths.report());

  cfg.seed = 1;
  auto results = pipeline::run_through_attack(cfg);
  for (const auto& r : results) CHECK_FALSE(r.skipped);
  CHECK(slurp(paths.report()) != before);
}

TEST_CASE("pipeline: shadows + augmented sources run end to end") {
  ExperimentConfig cfg = tiny_config(fresh_dir("shadows"));
  cfg.attack.source = "shadows";
  cfg.attack.mode = "offline";
  cfg.pool.preset = "offline";
  cfg.pool.alpha = 0.0;
  cfg.pool.beta = 0.0;
  cfg.pool.finetune_epochs = 3;
  auto results = pipeline::run_through_attack(cfg);
  CHECK(results.size() == 4);  // gen, target, shadows, attack

  pipeline::Paths paths(cfg);
  nlohmann::json report;
  {
    std::ifstream in(paths.report());
    in >> report;
  }
  CHECK(report.at("source") == "shadows");

  // augmented source reuses the shadows
  cfg.attack.source = "augmented";
  pipeline::run_augment(cfg);
  pipeline::run_attack(cfg);
  {
    std::ifstream in(paths.report());
    in >> report;
  }
  CHECK(report.at("source") == "augmented");
}

TEST_CASE("pipeline: property-inference chain reports the inferred ratio") {
  ExperimentConfig cfg = tiny_config(fresh_dir("pia"));
  cfg.dataset.kind = "property";
  cfg.dataset.property_n = 120;
  cfg.dataset.property_dim = 6;
  cfg.dataset.property_attack_size = 20;
  cfg.architecture.input_dim = 6;  // overridden by the property dim at train time
  cfg.attack.method = "pia";
  cfg.pool.pool_count = 1;
  cfg.pool.train_size = 120;
  cfg.training.epochs = 5;
  auto results = pipeline::run_through_attack(cfg);
  CHECK(results.size() == 4);  // gen-data, train-target, train-pool, attack

  pipeline::Paths paths(cfg);
  nlohmann::json report;
  {
    std::ifstream in(paths.report());
    in >> report;
  }
  CHECK(report.at("auc").is_null());
  const double inferred = report.at("pia_inferred").get<double>();
  CHECK((inferred == 0.3 || inferred == 0.5));
  CHECK(report.at("pia_loglik_t0").is_number());
}

TEST_CASE("pipeline: two online pools split each query's shared models half IN, half OUT") {
  ExperimentConfig cfg = tiny_config(fresh_dir("twopool"));
  cfg.pool.pool_count = 2;
  pipeline::run_through_attack(cfg);

  pipeline::Paths paths(cfg);
  const Dataset universe = load_dataset_csv(paths.universe());
  const auto plan = pipeline::load_plan(paths.splits());
  Dataset queries = pipeline::detail::query_dataset(universe, plan);

  Pool a = load_pool(paths.pool_aligned("0"));
  Pool b = load_pool(paths.pool_aligned("1"));
  ScoreTable ta = query_shared_models(a, a.aligned_set, queries);
  ScoreTable tb = query_shared_models(b, b.aligned_set, queries);
  for (size_t q = 0; q < queries.size(); ++q) {
    size_t in_a = 0, in_b = 0;
    for (size_t m = 0; m < ta.n_models; ++m) in_a += ta.member[ta.cell(m, q)];
    for (size_t m = 0; m < tb.n_models; ++m) in_b += tb.member[tb.cell(m, q)];
    // every query sits in exactly one pool's D_q: all aligned models of
    // that pool are IN, the other pool's aligned models are OUT except a
    // possible mapped coincidence
    const size_t aligned = ta.n_models;
    CHECK(((in_a == aligned && in_b <= 1) || (in_b == aligned && in_a <= 1)));
  }
}

TEST_CASE("pipeline: delta report formats small changes as '='") {
  const fs::path dir = fresh_dir("report");
  fs::create_directories(dir);
  auto write = [&](const std::string& name, double auc, double tf1, double cost) {
    nlohmann::ordered_json j{{"auc", auc},        {"tf1", tf1},
                             {"tf01", tf1 / 2},   {"cost_evaluations", cost},
                             {"cost_wallclock_s", 0.0}};
    std::ofstream out(dir / name);
    out << j.dump(2);
  };
  write("base.json", 0.73, 0.22, 100000);
  write("other.json", 0.82, 0.23, 12000);

  auto delta = pipeline::run_report(dir / "base.json", dir / "other.json", dir / "out");
  CHECK(delta.at("delta_auc").get<double>() == doctest::Approx(0.09));
  CHECK(delta.at("delta_auc_display") == "+0.09");
  CHECK(delta.at("delta_tf1_display") == "=");  // |0.01| < 0.02
  CHECK(delta.at("cost_reduction_pct").get<double>() == doctest::Approx(88.0));
  CHECK(delta.at("cost_reduction_display").get<std::string>().find("88") != std::string::npos);
  CHECK(fs::exists(dir / "out" / "summary.json"));
  CHECK(fs::exists(dir / "out" / "summary.txt"));

  CHECK_THROWS_AS(pipeline::run_report(dir / "missing.json", dir / "other.json", dir / "out"),
                  DependencyError);
}

TEST_CASE("pipeline: gradcheck stage writes its report") {
  ExperimentConfig cfg = tiny_config(fresh_dir("gradcheck"));
  auto result = pipeline::run_gradcheck(cfg);
  CHECK_FALSE(result.skipped);
  nlohmann::json j;
  {
    std::ifstream in(pipeline::Paths(cfg).gradcheck());
    in >> j;
  }
  CHECK(j.at("pass").get<bool>());
  CHECK(j.at("max_relative_error_composite").get<double>() < 1e-4);
}
