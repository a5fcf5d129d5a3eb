#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "shadowpool/dataset.hpp"
#include "shadowpool/json_util.hpp"
#include "shadowpool/pool.hpp"
#include "shadowpool/shadow.hpp"

namespace shadowpool {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts are unsupported");

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Dataset CSV: header "id,f0..f{d-1},label[,property]", '.' decimal,
// comma separator, 17 significant digits so doubles round-trip exactly.
// ---------------------------------------------------------------------------

inline void save_dataset_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("save_dataset_csv: cannot open " + path.string());
  out << "id";
  for (size_t j = 0; j < ds.dim(); ++j) out << ",f" << j;
  out << ",label";
  const bool has_property = !ds.property_flags.empty();
  if (has_property) out << ",property";
  out << "\n";
  char buf[40];
  for (size_t i = 0; i < ds.size(); ++i) {
    out << ds.ids[i];
    for (size_t j = 0; j < ds.dim(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", ds.features.at(i, j));
      out << ',' << buf;
    }
    out << ',' << ds.labels[i];
    if (has_property) out << ',' << static_cast<int>(ds.property_flags[i]);
    out << "\n";
  }
  if (!out) throw InputError("save_dataset_csv: write failed for " + path.string());
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string current;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(current);
      current.clear();
    } else if (c != '\r') {
      current.push_back(c);
    }
  }
  fields.push_back(current);
  return fields;
}

inline double parse_double_field(const std::string& s, size_t line, size_t field) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ParseError("csv line " + std::to_string(line) + ", field " + std::to_string(field) +
                     ": not a number: '" + s + "'");
  }
  return v;
}

inline long long parse_int_field(const std::string& s, size_t line, size_t field) {
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ParseError("csv line " + std::to_string(line) + ", field " + std::to_string(field) +
                     ": not an integer: '" + s + "'");
  }
  return v;
}

}  // namespace detail

inline Dataset load_dataset_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("load_dataset_csv: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError("csv line 1: missing header");
  const auto header = detail::split_csv_line(line);
  if (header.size() < 3 || header[0] != "id") {
    throw ParseError("csv line 1: expected header id,f0..,label[,property]");
  }
  bool has_property = header.back() == "property";
  const size_t dim = header.size() - 2 - (has_property ? 1 : 0);
  for (size_t j = 0; j < dim; ++j) {
    if (header[1 + j] != "f" + std::to_string(j)) {
      throw ParseError("csv line 1, field " + std::to_string(2 + j) +
                       ": expected f" + std::to_string(j));
    }
  }
  if (header[1 + dim] != "label") {
    throw ParseError("csv line 1, field " + std::to_string(2 + dim) + ": expected label");
  }

  std::vector<std::vector<double>> rows;
  Dataset ds;
  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size()) {
      throw ParseError("csv line " + std::to_string(line_no) + ": expected " +
                       std::to_string(header.size()) + " fields, got " +
                       std::to_string(fields.size()));
    }
    ds.ids.push_back(detail::parse_int_field(fields[0], line_no, 1));
    std::vector<double> row(dim);
    for (size_t j = 0; j < dim; ++j) {
      row[j] = detail::parse_double_field(fields[1 + j], line_no, 2 + j);
    }
    rows.push_back(std::move(row));
    ds.labels.push_back(static_cast<int>(detail::parse_int_field(fields[1 + dim], line_no, 2 + dim)));
    if (has_property) {
      const long long flag = detail::parse_int_field(fields[2 + dim], line_no, 3 + dim);
      if (flag != 0 && flag != 1) {
        throw ParseError("csv line " + std::to_string(line_no) + ": property must be 0 or 1");
      }
      ds.property_flags.push_back(static_cast<uint8_t>(flag));
    }
  }
  ds.features = Matrix(rows.size(), dim);
  for (size_t i = 0; i < rows.size(); ++i) {
    for (size_t j = 0; j < dim; ++j) ds.features.at(i, j) = rows[i][j];
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory holding manifest.json plus raw little-endian
// float64 tensor files, row-major. Field names are frozen in
// docs/formats.md.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_tensor_file(const std::filesystem::path& path,
                              const std::vector<double>& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("write_tensor_file: cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!out) throw InputError("write_tensor_file: write failed for " + path.string());
}

inline std::vector<double> read_tensor_file(const std::filesystem::path& path, size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("read_tensor_file: cannot open " + path.string());
  std::vector<double> values(count);
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (static_cast<size_t>(in.gcount()) != count * sizeof(double)) {
    throw ParseError("read_tensor_file: " + path.string() + " truncated");
  }
  return values;
}

struct TensorWriter {
  const std::filesystem::path& dir;
  json records = json::array();
  size_t counter = 0;

  void add(const std::string& name, size_t rows, size_t cols, const std::vector<double>& values) {
    char file[32];
    std::snprintf(file, sizeof(file), "t%04zu.bin", counter++);
    write_tensor_file(dir / file, values);
    records.push_back({{"name", name}, {"rows", rows}, {"cols", cols}, {"file", file}});
  }

  void add_layer(const std::string& prefix, const LinearLayer& layer) {
    add(prefix + ".weight", layer.weight.rows, layer.weight.cols, layer.weight.values);
    add(prefix + ".bias", 1, layer.bias.size(), layer.bias);
  }
};

struct TensorReader {
  const std::filesystem::path& dir;
  std::map<std::string, json> records;

  explicit TensorReader(const std::filesystem::path& d, const json& manifest) : dir(d) {
    for (const auto& rec : manifest.at("tensors")) {
      records.emplace(rec.at("name").get<std::string>(), rec);
    }
  }

  std::vector<double> read(const std::string& name, size_t rows, size_t cols) const {
    auto it = records.find(name);
    if (it == records.end()) throw ParseError("checkpoint: missing tensor " + name);
    if (it->second.at("rows").get<size_t>() != rows ||
        it->second.at("cols").get<size_t>() != cols) {
      throw ParseError("checkpoint: tensor " + name + " has unexpected shape");
    }
    return read_tensor_file(dir / it->second.at("file").get<std::string>(), rows * cols);
  }

  void read_layer(const std::string& prefix, LinearLayer& layer) const {
    layer.weight.values = read(prefix + ".weight", layer.weight.rows, layer.weight.cols);
    layer.bias = read(prefix + ".bias", 1, layer.bias.size());
  }
};

}  // namespace detail

namespace detail {

inline void write_manifest(const std::filesystem::path& dir, const json& manifest) {
  std::ofstream out(dir / "manifest.json");
  if (!out) throw InputError("write_manifest: cannot open " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

inline json read_manifest(const std::filesystem::path& dir, const std::string& expected_kind) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw DependencyError("checkpoint missing: " + path.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const std::exception& e) {
    throw ParseError("manifest " + path.string() + ": " + e.what());
  }
  const int version = manifest.value("format_version", -1);
  if (version != kFormatVersion) {
    throw FormatVersionError("manifest " + path.string() + ": format version " +
                             std::to_string(version) + " unsupported (expected " +
                             std::to_string(kFormatVersion) + ")");
  }
  if (manifest.value("kind", "") != expected_kind) {
    throw ParseError("manifest " + path.string() + ": kind '" + manifest.value("kind", "") +
                     "' (expected '" + expected_kind + "')");
  }
  return manifest;
}

}  // namespace detail

inline void save_model(const ShadowModel& model, const std::filesystem::path& dir,
                       const json& config_echo = json::object()) {
  std::filesystem::create_directories(dir);
  detail::TensorWriter writer{dir};
  for (size_t i = 0; i < model.stem.size(); ++i) {
    writer.add_layer("stem." + std::to_string(i), model.stem[i]);
  }
  for (size_t i = 0; i < model.middle.size(); ++i) {
    writer.add_layer("middle." + std::to_string(i), model.middle[i]);
  }
  for (size_t i = 0; i < model.head.size(); ++i) {
    writer.add_layer("head." + std::to_string(i), model.head[i]);
  }
  json manifest{{"format_version", kFormatVersion},
                {"kind", "model"},
                {"seed", model.seed},
                {"architecture", architecture_to_json(model.arch)},
                {"train_ids", model.train_ids},
                {"config", config_echo},
                {"tensors", writer.records}};
  detail::write_manifest(dir, manifest);
}

inline ShadowModel load_model(const std::filesystem::path& dir) {
  const json manifest = detail::read_manifest(dir, "model");
  ShadowModel model = build_shadow_model(architecture_from_json(manifest.at("architecture")),
                                         manifest.at("seed").get<uint64_t>());
  model.train_ids = manifest.at("train_ids").get<std::vector<int64_t>>();
  detail::TensorReader reader(dir, manifest);
  for (size_t i = 0; i < model.stem.size(); ++i) {
    reader.read_layer("stem." + std::to_string(i), model.stem[i]);
  }
  for (size_t i = 0; i < model.middle.size(); ++i) {
    reader.read_layer("middle." + std::to_string(i), model.middle[i]);
  }
  for (size_t i = 0; i < model.head.size(); ++i) {
    reader.read_layer("head." + std::to_string(i), model.head[i]);
  }
  return model;
}

inline void save_pool(const Pool& pool, const std::filesystem::path& dir,
                      const json& config_echo = json::object()) {
  std::filesystem::create_directories(dir);
  detail::TensorWriter writer{dir};
  for (size_t i = 0; i < pool.stem.size(); ++i) {
    writer.add_layer("stem." + std::to_string(i), pool.stem[i]);
  }
  for (size_t l = 0; l < pool.experts.size(); ++l) {
    for (size_t m = 0; m < pool.experts[l].size(); ++m) {
      for (size_t i = 0; i < pool.experts[l][m].size(); ++i) {
        writer.add_layer("expert." + std::to_string(l) + "." + std::to_string(m) + "." +
                             std::to_string(i),
                         pool.experts[l][m][i]);
      }
    }
  }
  for (size_t i = 0; i < pool.head.size(); ++i) {
    writer.add_layer("head." + std::to_string(i), pool.head[i]);
  }

  json mapping_ids = json::array();
  json mapping_pathways = json::array();
  for (size_t w = 0; w < pool.mapping.pathway_ids.size(); ++w) {
    for (int64_t id : pool.mapping.pathway_ids[w]) {
      mapping_ids.push_back(id);
      mapping_pathways.push_back(w);
    }
  }
  json log = json::array();
  for (const EpochLog& e : pool.training_log) {
    log.push_back({{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"mean_ce", e.mean_ce}});
  }
  json manifest{{"format_version", kFormatVersion},
                {"kind", "pool"},
                {"seed", pool.init_seed},
                {"architecture", architecture_to_json(pool.arch)},
                {"mapping",
                 {{"n_examples", pool.mapping.n_examples},
                  {"n_pathways", pool.mapping.n_pathways},
                  {"ids", mapping_ids},
                  {"pathway", mapping_pathways}}},
                {"aligned_set", pool.aligned_set},
                {"dq_ids", pool.dq_ids},
                {"training_log", log},
                {"config", config_echo},
                {"tensors", writer.records}};
  detail::write_manifest(dir, manifest);
}

inline Pool load_pool(const std::filesystem::path& dir) {
  const json manifest = detail::read_manifest(dir, "pool");
  Pool pool = build_pool(architecture_from_json(manifest.at("architecture")),
                         manifest.at("seed").get<uint64_t>());
  detail::TensorReader reader(dir, manifest);
  for (size_t i = 0; i < pool.stem.size(); ++i) {
    reader.read_layer("stem." + std::to_string(i), pool.stem[i]);
  }
  for (size_t l = 0; l < pool.experts.size(); ++l) {
    for (size_t m = 0; m < pool.experts[l].size(); ++m) {
      for (size_t i = 0; i < pool.experts[l][m].size(); ++i) {
        reader.read_layer(
            "expert." + std::to_string(l) + "." + std::to_string(m) + "." + std::to_string(i),
            pool.experts[l][m][i]);
      }
    }
  }
  for (size_t i = 0; i < pool.head.size(); ++i) {
    reader.read_layer("head." + std::to_string(i), pool.head[i]);
  }

  const json& m = manifest.at("mapping");
  pool.mapping.n_examples = m.at("n_examples").get<size_t>();
  pool.mapping.n_pathways = m.at("n_pathways").get<size_t>();
  pool.mapping.pathway_ids.assign(pool.mapping.n_pathways, {});
  const auto ids = m.at("ids").get<std::vector<int64_t>>();
  const auto pathways = m.at("pathway").get<std::vector<size_t>>();
  if (ids.size() != pathways.size()) throw ParseError("pool manifest: mapping arrays differ");
  for (size_t i = 0; i < ids.size(); ++i) {
    pool.mapping.assignment.emplace(ids[i], pathways[i]);
    pool.mapping.pathway_ids[pathways[i]].push_back(ids[i]);
  }
  for (auto& list : pool.mapping.pathway_ids) std::sort(list.begin(), list.end());

  pool.aligned_set = manifest.at("aligned_set").get<std::vector<size_t>>();
  pool.dq_ids = manifest.at("dq_ids").get<std::vector<int64_t>>();
  for (const auto& e : manifest.at("training_log")) {
    pool.training_log.push_back({e.at("epoch").get<size_t>(), e.at("mean_loss").get<double>(),
                                 e.at("mean_ce").get<double>()});
  }
  return pool;
}

// Ledger rows as flat CSV: run_id,metric,value.
inline void save_ledger_csv(const CostLedger& ledger, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("save_ledger_csv: cannot open " + path.string());
  out << "run_id,metric,value\n";
  char buf[40];
  for (const auto& [id, c] : ledger.runs()) {
    out << id << ",forward_evals," << c.forward_evals << "\n";
    out << id << ",backward_evals," << c.backward_evals << "\n";
    out << id << ",update_steps," << c.update_steps << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", c.wallclock_s);
    out << id << ",wallclock_s," << buf << "\n";
  }
}

inline CostLedger load_ledger_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("ledger missing: " + path.string());
  CostLedger ledger;
  std::string line;
  if (!std::getline(in, line)) throw ParseError("ledger csv line 1: missing header");
  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != 3) {
      throw ParseError("ledger csv line " + std::to_string(line_no) + ": expected 3 fields");
    }
    const std::string& id = fields[0];
    const std::string& metric = fields[1];
    if (metric == "forward_evals") {
      ledger.add_forward(id, 1, detail::parse_int_field(fields[2], line_no, 3));
    } else if (metric == "backward_evals") {
      ledger.add_backward(id, 1, detail::parse_int_field(fields[2], line_no, 3));
    } else if (metric == "update_steps") {
      ledger.add_update(id, detail::parse_int_field(fields[2], line_no, 3));
    } else if (metric == "wallclock_s") {
      ledger.add_wallclock(id, detail::parse_double_field(fields[2], line_no, 3));
    } else {
      throw ParseError("ledger csv line " + std::to_string(line_no) + ": unknown metric '" +
                       metric + "'");
    }
  }
  return ledger;
}

}  // namespace shadowpool
