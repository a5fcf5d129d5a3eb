// Pipeline driver: every stage is a subcommand reading one experiment
// config and an output directory of prior-stage checkpoints.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "shadowpool/pipeline.hpp"

namespace {

using shadowpool::ExperimentConfig;
namespace pipeline = shadowpool::pipeline;

int run_stage(const std::string& name, const ExperimentConfig& cfg) {
  pipeline::StageResult result;
  if (name == "gen-data") {
    result = pipeline::run_gen_data(cfg);
  } else if (name == "train-target") {
    result = pipeline::run_train_target(cfg);
  } else if (name == "train-shadows") {
    result = pipeline::run_train_shadows(cfg);
  } else if (name == "augment") {
    result = pipeline::run_augment(cfg);
  } else if (name == "train-pool") {
    result = pipeline::run_train_pool(cfg);
  } else if (name == "align") {
    result = pipeline::run_align(cfg);
  } else if (name == "attack") {
    result = pipeline::run_attack(cfg);
  } else if (name == "diagnose") {
    result = pipeline::run_diagnose(cfg);
  } else if (name == "gradcheck") {
    result = pipeline::run_gradcheck(cfg);
  }
  std::cout << result.message << (result.skipped ? " (skipped)" : "") << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"shadow-pool privacy auditing pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  bool five_seeds = false;
  std::string base_report, other_report, report_out;

  const std::vector<std::string> stages = {"gen-data",  "train-target", "train-shadows",
                                           "augment",   "train-pool",   "align",
                                           "attack",    "diagnose",     "gradcheck"};
  const std::vector<std::string> descriptions = {
      "generate datasets and the audit split plan",
      "train the target model",
      "train independent shadow models",
      "apply neural-masking augmentation to the shadow models",
      "train the shadow pool(s)",
      "select and fine-tune the served pathways",
      "run the configured inference attack and write the results report",
      "write consistency and diversity diagnostics",
      "verify analytic gradients against finite differences"};
  for (size_t i = 0; i < stages.size(); ++i) {
    CLI::App* sub = app.add_subcommand(stages[i], descriptions[i]);
    sub->add_option("--config", config_path, "experiment config file (JSON)")->required();
    if (stages[i] == "attack") {
      sub->add_flag("--five-seeds", five_seeds,
                    "run the full chain for seeds 0..4 and report the means");
    }
  }
  CLI::App* report_cmd =
      app.add_subcommand("report", "delta summary between a baseline run and another run");
  report_cmd->add_option("--base", base_report, "baseline run report.json")->required();
  report_cmd->add_option("--other", other_report, "comparison run report.json")->required();
  report_cmd->add_option("--out", report_out, "output directory (default: alongside --other)");

  CLI11_PARSE(app, argc, argv);

  try {
    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "report") {
      std::filesystem::path out_dir =
          report_out.empty() ? std::filesystem::path(other_report).parent_path()
                             : std::filesystem::path(report_out);
      auto delta = pipeline::run_report(base_report, other_report, out_dir);
      std::cout << pipeline::render_delta_table(delta);
      return 0;
    }
    ExperimentConfig cfg = shadowpool::load_config(config_path);
    if (name == "attack" && five_seeds) {
      auto summary = pipeline::run_five_seeds(cfg);
      std::cout << "five-seed mean auc: "
                << (summary.at("auc").is_null() ? std::string("n/a")
                                                : std::to_string(summary.at("auc").get<double>()))
                << "\n";
      return 0;
    }
    return run_stage(name, cfg);
  } catch (const shadowpool::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const shadowpool::FormatVersionError& e) {
    std::cerr << "format version error: " << e.what() << "\n";
    return 11;
  } catch (const shadowpool::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 6;
  } catch (const shadowpool::DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return 7;
  } catch (const shadowpool::InsufficientModelsError& e) {
    std::cerr << "insufficient models: " << e.what() << "\n";
    return 10;
  } catch (const shadowpool::ResourceError& e) {
    std::cerr << "resource error: " << e.what() << "\n";
    return 8;
  } catch (const shadowpool::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 9;
  } catch (const shadowpool::StateError& e) {
    std::cerr << "state error: " << e.what() << "\n";
    return 5;
  } catch (const shadowpool::ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return 4;
  } catch (const shadowpool::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
