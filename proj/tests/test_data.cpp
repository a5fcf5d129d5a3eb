#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "doctest.h"
#include "shadowpool/dataset.hpp"
#include "shadowpool/io.hpp"
#include "shadowpool/mapping.hpp"

using namespace shadowpool;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("shadowpool_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("gen_blobs: zero spread collapses points onto class means") {
  Dataset ds = gen_blobs(1, 50, 3, 4, 0.0);
  REQUIRE(ds.size() == 150);
  // every point of a class equals the first point of that class
  for (int c = 0; c < 3; ++c) {
    size_t first = static_cast<size_t>(c) * 50;
    for (size_t i = first; i < first + 50; ++i) {
      for (size_t j = 0; j < 4; ++j) {
        CHECK(ds.features.at(i, j) == ds.features.at(first, j));
      }
    }
  }
  // 1-NN against class means classifies perfectly: means differ
  for (size_t j = 0; j < 4; ++j) {
    CHECK(ds.features.at(0, j) == ds.features.at(0, j));  // finite
  }
  CHECK(ds.features.at(0, 0) != ds.features.at(50, 0));
}

TEST_CASE("gen_blobs: deterministic per seed") {
  Dataset a = gen_blobs(7, 20, 2, 5, 1.5);
  Dataset b = gen_blobs(7, 20, 2, 5, 1.5);
  CHECK(a.features.values == b.features.values);
  CHECK(a.labels == b.labels);
  Dataset c = gen_blobs(8, 20, 2, 5, 1.5);
  CHECK(a.features.values != c.features.values);
}

TEST_CASE("gen_blobs: empirical class means match configured means") {
  const size_t n_per_class = 4000;
  const double spread = 3.0;
  Dataset ds = gen_blobs(11, n_per_class, 2, 8, spread);
  Dataset tight = gen_blobs(11, 1, 2, 8, 0.0);  // same seed -> same means
  const double tol = 3.0 * spread / std::sqrt(static_cast<double>(n_per_class));
  for (int c = 0; c < 2; ++c) {
    for (size_t j = 0; j < 8; ++j) {
      double mean = 0.0;
      for (size_t i = 0; i < n_per_class; ++i) {
        mean += ds.features.at(static_cast<size_t>(c) * n_per_class + i, j);
      }
      mean /= static_cast<double>(n_per_class);
      CHECK(std::fabs(mean - tight.features.at(static_cast<size_t>(c), j)) < tol);
    }
  }
}

TEST_CASE("gen_property_tabular: exact flag counts and conditional shift") {
  Dataset none = gen_property_tabular(3, 80, 6, 0.0);
  for (uint8_t f : none.property_flags) CHECK(f == 0);

  Dataset half = gen_property_tabular(3, 100, 6, 0.5);
  size_t ones = 0;
  for (uint8_t f : half.property_flags) ones += f;
  CHECK(ones == 50);

  // flag-conditional feature means differ by about shift/sqrt(dim) per axis
  const double shift = 2.0;
  Dataset big = gen_property_tabular(5, 20000, 4, 0.5, shift);
  double mean1 = 0.0, mean0 = 0.0;
  size_t n1 = 0, n0 = 0;
  for (size_t i = 0; i < big.size(); ++i) {
    if (big.property_flags[i]) {
      mean1 += big.features.at(i, 0);
      ++n1;
    } else {
      mean0 += big.features.at(i, 0);
      ++n0;
    }
  }
  mean1 /= static_cast<double>(n1);
  mean0 /= static_cast<double>(n0);
  const double expected = shift / std::sqrt(4.0);
  CHECK(mean1 - mean0 == doctest::Approx(expected).epsilon(0.05));
}

TEST_CASE("split_auxiliary: basic contracts") {
  Dataset ds = gen_blobs(2, 30, 2, 3, 1.0);
  RandomSource rng(4);

  SplitPlan one = split_auxiliary(ds, 1, 10, rng);
  REQUIRE(one.subsets.size() == 1);
  CHECK(one.subsets[0].size() == 10);
  std::set<size_t> unique(one.subsets[0].begin(), one.subsets[0].end());
  CHECK(unique.size() == 10);

  SplitPlan full = split_auxiliary(ds, 2, ds.size(), rng);
  for (const auto& subset : full.subsets) {
    std::set<size_t> s(subset.begin(), subset.end());
    CHECK(s.size() == ds.size());
  }

  CHECK_THROWS_AS(split_auxiliary(ds, 1, ds.size() + 1, rng), InputError);
}

TEST_CASE("split_auxiliary: per-id inclusion frequency matches subset_size/N") {
  Dataset ds = gen_blobs(6, 25, 2, 2, 1.0);  // N = 50
  const size_t subset_size = 20;
  const size_t draws = 10000;
  RandomSource rng(99);
  std::vector<size_t> hits(ds.size(), 0);
  SplitPlan plan = split_auxiliary(ds, draws, subset_size, rng);
  for (const auto& subset : plan.subsets) {
    for (size_t idx : subset) ++hits[idx];
  }
  const double p = static_cast<double>(subset_size) / static_cast<double>(ds.size());
  const double sigma = std::sqrt(p * (1 - p) * static_cast<double>(draws));
  for (size_t hit : hits) {
    CHECK(std::fabs(static_cast<double>(hit) - p * draws) < 3.0 * sigma + 1.0);
  }
}

TEST_CASE("build_mapping: exact partition for M=2, L=2, 8 examples") {
  Dataset ds = gen_blobs(10, 4, 2, 3, 1.0);  // 8 examples
  RandomSource rng(1);
  MappingMatrix mapping = build_mapping(ds, 2, 2, rng);
  REQUIRE(mapping.n_pathways == 4);
  std::set<int64_t> seen;
  for (const auto& subset : mapping.pathway_ids) {
    CHECK(subset.size() == 2);
    for (int64_t id : subset) CHECK(seen.insert(id).second);  // pairwise disjoint
  }
  CHECK(seen.size() == 8);  // covers D_tr
  // one-hot per row
  for (int64_t id : ds.ids) CHECK(mapping.pathway_of(id) < 4);
}

TEST_CASE("build_mapping: M=4, L=4 yields 256 subsets") {
  Dataset ds = gen_blobs(12, 200, 2, 3, 1.0);  // 400 examples
  RandomSource rng(2);
  MappingMatrix mapping = build_mapping(ds, 4, 4, rng);
  CHECK(mapping.n_pathways == 256);
  size_t total = 0;
  for (const auto& subset : mapping.pathway_ids) {
    total += subset.size();
    CHECK(subset.size() >= 400 / 256);
    CHECK(subset.size() <= 400 / 256 + 1);
  }
  CHECK(total == 400);
}

TEST_CASE("build_mapping: expert-level data share is 1/M up to rounding") {
  Dataset ds = gen_blobs(13, 500, 2, 3, 1.0);  // 1000 examples
  RandomSource rng(3);
  const size_t M = 2, L = 2;
  MappingMatrix mapping = build_mapping(ds, M, L, rng);
  // ids reaching expert (l=1, m=0): pathways whose second digit is 0
  auto pathways = enumerate_pathways(M, L);
  size_t count = 0;
  for (size_t w = 0; w < pathways.size(); ++w) {
    if (pathways[w].experts[1] == 0) count += mapping.pathway_ids[w].size();
  }
  // |D_tr|/M with slack for the size-1 rounding across M^{L-1} subsets
  CHECK(std::llabs(static_cast<long long>(count) - 500) <=
        static_cast<long long>(mapping.n_pathways));
}

TEST_CASE("build_mapping: rejects training sets smaller than the pathway grid") {
  Dataset ds = gen_blobs(14, 3, 2, 3, 1.0);  // 6 examples
  RandomSource rng(4);
  CHECK_THROWS_AS(build_mapping(ds, 3, 2, rng), InputError);  // needs 9
}

TEST_CASE("build_mapping: assignment frequency is uniform across seeds") {
  Dataset ds = gen_blobs(15, 8, 2, 2, 1.0);  // 16 examples
  const size_t M = 2, L = 2;                 // 4 pathways
  const size_t trials = 4000;
  std::vector<size_t> counts(4, 0);
  const int64_t probe_id = ds.ids[5];
  for (size_t t = 0; t < trials; ++t) {
    RandomSource rng(1000 + t);
    MappingMatrix mapping = build_mapping(ds, M, L, rng);
    ++counts[mapping.pathway_of(probe_id)];
  }
  const double expected = static_cast<double>(trials) / 4.0;
  const double sigma = std::sqrt(trials * 0.25 * 0.75);
  for (size_t c : counts) {
    CHECK(std::fabs(static_cast<double>(c) - expected) < 4.0 * sigma);
  }
}

TEST_CASE("sample_dq: exact rounding and subset-by-id") {
  Dataset ds = gen_blobs(16, 2000, 2, 3, 1.0);  // 4000 examples
  RandomSource rng(5);
  Dataset all = sample_dq(ds, 1.0, rng);
  CHECK(all.size() == ds.size());

  Dataset tenth = sample_dq(ds, 0.1, rng);
  CHECK(tenth.size() == 400);
  std::set<int64_t> source(ds.ids.begin(), ds.ids.end());
  for (int64_t id : tenth.ids) CHECK(source.count(id) == 1);

  CHECK_THROWS_AS(sample_dq(ds, 0.0, rng), InputError);
}

TEST_CASE("sample_dq: matches the smallest ablated fraction") {
  Dataset ds = gen_blobs(17, 20000, 2, 2, 1.0);  // 40000 examples
  RandomSource rng(6);
  Dataset dq = sample_dq(ds, 0.025, rng);
  CHECK(dq.size() == 1000);
}

TEST_CASE("dataset csv: bit-exact round trip including property flags") {
  Dataset ds = gen_property_tabular(21, 64, 5, 0.4);
  // throw in exactly representable extremes
  ds.features.at(0, 0) = 1.0 / 3.0;
  ds.features.at(1, 1) = -1e-300;
  ds.features.at(2, 2) = 12345678.87654321;
  const fs::path dir = temp_dir("csv");
  save_dataset_csv(ds, dir / "data.csv");
  Dataset loaded = load_dataset_csv(dir / "data.csv");
  CHECK(loaded.features.values == ds.features.values);
  CHECK(loaded.labels == ds.labels);
  CHECK(loaded.ids == ds.ids);
  CHECK(loaded.property_flags == ds.property_flags);
}

TEST_CASE("dataset csv: malformed input is a parse error with position") {
  const fs::path dir = temp_dir("csv_bad");
  {
    std::ofstream out(dir / "bad.csv");
    out << "id,f0,f1,label\n";
    out << "0,1.5,2.5,1\n";
    out << "1,oops,2.5,0\n";
  }
  CHECK_THROWS_WITH_AS(load_dataset_csv(dir / "bad.csv"), doctest::Contains("line 3"),
                       ParseError);

  {
    std::ofstream out(dir / "trunc.csv");
    out << "id,f0,f1,label\n";
    out << "0,1.5\n";
  }
  CHECK_THROWS_AS(load_dataset_csv(dir / "trunc.csv"), ParseError);
}

TEST_CASE("model checkpoint: identical forward outputs on a probe batch") {
  PoolArchitecture arch;
  arch.input_dim = 4;
  arch.stem_widths = {6};
  arch.expert_layers = 2;
  arch.experts_per_layer = 2;
  arch.expert_widths = {6};
  arch.head_widths = {};
  arch.classes = 3;

  ShadowModel model = build_shadow_model(arch, 77);
  Dataset data = gen_blobs(22, 30, 3, 4, 1.0);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.seed = 5;
  train_independent(model, data, cfg);

  const fs::path dir = temp_dir("model_ckpt");
  save_model(model, dir / "m");
  ShadowModel loaded = load_model(dir / "m");
  CHECK(loaded.train_ids == model.train_ids);

  Matrix probe(5, 4);
  RandomSource rng(1);
  for (double& v : probe.values) v = rng.uniform(-1.0, 1.0);
  Matrix a = model.forward(probe);
  Matrix b = loaded.forward(probe);
  CHECK(a.values == b.values);  // bit-exact persistence
}

TEST_CASE("pool checkpoint: mapping, aligned set, dq ids survive round trip") {
  PoolArchitecture arch;
  arch.input_dim = 3;
  arch.stem_widths = {5};
  arch.expert_layers = 2;
  arch.experts_per_layer = 2;
  arch.expert_widths = {5};
  arch.head_widths = {};
  arch.classes = 2;

  Pool pool = build_pool(arch, 123);
  Dataset data = gen_blobs(23, 20, 2, 3, 1.0);
  RandomSource rng(9);
  pool.mapping = build_mapping(data, 2, 2, rng);
  PoolTrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 3;
  train_pool(pool, data, cfg);
  RandomSource align_rng(10);
  Dataset dq = sample_dq(data, 0.2, align_rng);
  align_pathways(pool, dq, 2, 1, cfg.sgd, 8, align_rng);

  const fs::path dir = temp_dir("pool_ckpt");
  save_pool(pool, dir / "p");
  Pool loaded = load_pool(dir / "p");

  CHECK(loaded.aligned_set == pool.aligned_set);
  CHECK(loaded.dq_ids == pool.dq_ids);
  CHECK(loaded.mapping.n_pathways == pool.mapping.n_pathways);
  for (int64_t id : data.ids) {
    CHECK(loaded.mapping.pathway_of(id) == pool.mapping.pathway_of(id));
  }

  Matrix probe(4, 3);
  RandomSource prng(2);
  for (double& v : probe.values) v = prng.uniform(-1.0, 1.0);
  Pathway p{{1, 0}};
  Matrix a = pathway_forward(pool, p, probe).probabilities;
  Matrix b = pathway_forward(loaded, p, probe).probabilities;
  CHECK(a.values == b.values);
}

TEST_CASE("checkpoint: truncated tensor file and version mismatch") {
  PoolArchitecture arch;
  arch.input_dim = 2;
  arch.stem_widths = {3};
  arch.expert_layers = 1;
  arch.experts_per_layer = 2;
  arch.expert_widths = {3};
  arch.head_widths = {};
  arch.classes = 2;
  ShadowModel model = build_shadow_model(arch, 1);
  const fs::path dir = temp_dir("bad_ckpt");
  save_model(model, dir / "m");

  // truncate the first tensor file
  fs::resize_file(dir / "m" / "t0000.bin", 8);
  CHECK_THROWS_AS(load_model(dir / "m"), ParseError);

  // bump format version
  save_model(model, dir / "v");
  {
    std::ifstream in(dir / "v" / "manifest.json");
    nlohmann::json manifest;
    in >> manifest;
    manifest["format_version"] = 999;
    std::ofstream out(dir / "v" / "manifest.json");
    out << manifest.dump(2);
  }
  CHECK_THROWS_AS(load_model(dir / "v"), FormatVersionError);
}

TEST_CASE("ledger csv round trip") {
  CostLedger ledger;
  ledger.add_forward("a", 5, 100);
  ledger.add_backward("a", 5, 100);
  ledger.add_update("a", 7);
  ledger.add_wallclock("a", 1.25);
  ledger.add_forward("b", 3, 10);
  const fs::path dir = temp_dir("ledger");
  save_ledger_csv(ledger, dir / "ledger.csv");
  CostLedger loaded = load_ledger_csv(dir / "ledger.csv");
  CHECK(loaded.run("a").forward_evals == 500);
  CHECK(loaded.run("a").backward_evals == 500);
  CHECK(loaded.run("a").update_steps == 7);
  CHECK(loaded.run("a").wallclock_s == 1.25);
  CHECK(loaded.run("b").forward_evals == 30);
}
