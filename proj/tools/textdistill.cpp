// SPDX-License-Identifier: Apache-2.0
//
// textdistill <subcommand> --config <path> [--seed N] [--out DIR] [--sweep a,b,c]
//
// Exit codes: 0 ok, 1 internal error, 2 invalid config or input data,
// 3 distillation diverged, 4 artifact does not match the config,
// 5 corrupt artifact.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "textdistill/artifact.hpp"
#include "textdistill/config.hpp"
#include "textdistill/distill.hpp"
#include "textdistill/eval.hpp"
#include "textdistill/synthetic.hpp"

namespace fs = std::filesystem;
namespace td = textdistill;

namespace {

enum Exit : int { kOk = 0, kInternal = 1, kConfig = 2, kDiverged = 3, kMismatch = 4, kCorrupt = 5 };

int exit_code(td::Errc code) {
  switch (code) {
    case td::Errc::InvalidConfig:
    case td::Errc::MalformedRow:
    case td::Errc::LabelOutOfDeclaredRange:
    case td::Errc::DimMismatch:
    case td::Errc::UnparseableFloat:
    case td::Errc::EmptyDataset:
    case td::Errc::EmptySource:
    case td::Errc::ClassTooSmall:
    case td::Errc::RealSampleModeNeedsDataset:
      return kConfig;
    case td::Errc::NonFiniteGradient: return kDiverged;
    case td::Errc::ArtifactMismatch: return kMismatch;
    case td::Errc::CorruptArtifact: return kCorrupt;
    default: return kInternal;
  }
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::size_t> sweep;
  std::string artifact;
  std::string output;
};

td::RunConfig load_config(const Options& o, const std::string& command) {
  td::RunConfig cfg;
  if (!o.config.empty()) {
    cfg = td::RunConfig::load(o.config);
  } else if (command != "export") {
    throw td::Error(td::Errc::InvalidConfig, "--config is required");
  }
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.distill.seed = *o.seed;
  }
  if (!o.out.empty()) cfg.out = o.out;
  if (!o.sweep.empty()) cfg.eval.sweep = o.sweep;
  return cfg;
}

/// Records the resolved config, seeds and content hashes of inputs and outputs.
void write_manifest(const td::RunConfig& cfg, const std::string& command, const std::vector<fs::path>& inputs,
                    const std::vector<fs::path>& outputs) {
  nlohmann::json in = nlohmann::json::array(), out = nlohmann::json::array();
  for (const auto& p : inputs) in.push_back({{"path", p.string()}, {"fnv1a", td::hex64(td::file_hash(p))}});
  for (const auto& p : outputs) out.push_back({{"file", p.filename().string()}, {"fnv1a", td::hex64(td::file_hash(p))}});
  nlohmann::json manifest = {{"command", command}, {"seed", cfg.seed},   {"config", cfg.to_json()},
                             {"inputs", in},       {"outputs", out}};
  td::write_file_atomic(cfg.out / "run_manifest.json", manifest.dump(2) + "\n");
}

struct Prepared {
  td::RunConfig cfg;
  td::RunData data;
};

Prepared prepare(const Options& o, const std::string& command) {
  auto cfg = load_config(o, command);
  cfg.validate();
  auto data = td::load_run_data(cfg);
  cfg.resolve(data.train.num_classes);
  return {std::move(cfg), std::move(data)};
}

int cmd_distill(const Options& o) {
  auto [cfg, data] = prepare(o, "distill");
  td::TextCnn model(cfg.model);
  std::string metrics = "step,outer_loss,grad_norm\n";
  auto dset = td::run_distillation<float>(model, data.train, data.table, cfg.distill, [&](const td::StepMetrics& m) {
    char line[96];
    std::snprintf(line, sizeof line, "%llu,%.9g,%.9g\n", static_cast<unsigned long long>(m.step), m.outer_loss,
                  m.grad_norm);
    metrics += line;
  });
  dset.config = {{"model", cfg.model.to_json()}, {"distill", cfg.distill.to_json()}};
  fs::create_directories(cfg.out);
  const auto artifact = cfg.out / "distilled.ddtc";
  const auto metrics_path = cfg.out / "distill_metrics.csv";
  td::save_artifact(artifact, dset);
  td::write_file_atomic(metrics_path, metrics);
  write_manifest(cfg, "distill", data.inputs, {artifact, metrics_path});
  std::cerr << "wrote " << artifact.string() << " (M=" << dset.size() << ")\n";
  return kOk;
}

int cmd_eval(const Options& o) {
  auto [cfg, data] = prepare(o, "eval");
  const fs::path artifact_path = o.artifact.empty() ? cfg.out / "distilled.ddtc" : fs::path(o.artifact);
  const auto dset = td::load_artifact(artifact_path);
  if (dset.max_len() != cfg.data.max_len || dset.dim() != cfg.embeddings.dim ||
      dset.num_classes != data.train.num_classes) {
    throw td::Error(td::Errc::ArtifactMismatch, "artifact shape does not match the config");
  }
  if (dset.embedding_hash != data.table.hash()) {
    throw td::Error(td::Errc::ArtifactMismatch, "artifact was distilled against different embeddings");
  }
  td::TextCnn model(cfg.model);
  auto comparison = td::compare_protocol<float>(model, data.train, data.test, data.table, {dset}, cfg.eval, cfg.seed);
  fs::create_directories(cfg.out);
  std::vector<fs::path> outputs{cfg.out / "comparison.csv", cfg.out / "curves.csv"};
  td::write_file_atomic(outputs[0], td::comparison_csv(comparison.rows));
  td::write_file_atomic(outputs[1], td::curves_csv(td::epoch_curves(comparison.reports)));
  if (!cfg.eval.sweep.empty()) {
    auto distill = [&](std::size_t m, std::uint64_t seed) {
      if (m == dset.per_class && seed == cfg.seed) return dset;
      auto dcfg = cfg.distill;
      dcfg.per_class = m;
      dcfg.seed = seed;
      return td::run_distillation<float>(model, data.train, data.table, dcfg);
    };
    auto rows = td::size_sweep<float>(model, data.test, data.table, cfg.eval.sweep, cfg.eval, cfg.seed, distill);
    outputs.push_back(cfg.out / "sweep.csv");
    td::write_file_atomic(outputs.back(), td::sweep_csv(rows));
  }
  auto inputs = data.inputs;
  inputs.push_back(artifact_path);
  write_manifest(cfg, "eval", inputs, outputs);
  for (const auto& s : comparison.summary()) {
    std::cerr << s.source << ": " << s.mean << " +- " << s.stddev;
    if (s.relative_pct) std::cerr << " (" << *s.relative_pct << "% of full)";
    std::cerr << "\n";
  }
  return kOk;
}

/// DDTC input produces a JSON export; anything else is read as an export and
/// converted back to DDTC.
int cmd_export(const Options& o) {
  auto cfg = load_config(o, "export");
  if (o.artifact.empty()) throw td::Error(td::Errc::InvalidConfig, "--artifact is required");
  const fs::path input = o.artifact;
  const std::string bytes = td::read_file(input);
  const bool is_ddtc = bytes.rfind("DDTC", 0) == 0;
  fs::path output = o.output;
  if (output.empty()) output = cfg.out / input.filename().replace_extension(is_ddtc ? ".json" : ".ddtc");
  std::string result;
  if (is_ddtc) {
    result = td::export_json(td::parse_artifact(bytes)).dump(1) + "\n";
  } else {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(bytes);
    } catch (const nlohmann::json::exception& e) {
      throw td::Error(td::Errc::CorruptArtifact, std::string("not a DDTC file or export: ") + e.what());
    }
    result = td::serialize_artifact(td::import_json(j));
  }
  if (output.has_parent_path()) fs::create_directories(output.parent_path());
  td::write_file_atomic(output, result);
  std::cerr << "wrote " << output.string() << "\n";
  return kOk;
}

int cmd_gen_synthetic(const Options& o) {
  auto cfg = load_config(o, "gen-synthetic");
  if (o.seed) cfg.synthetic.seed = *o.seed;
  const auto corpus = td::generate_synthetic(cfg.synthetic);
  fs::create_directories(cfg.out);
  std::vector<fs::path> outputs{cfg.out / "train.csv", cfg.out / "test.csv"};
  td::write_file_atomic(outputs[0], td::to_csv(corpus.train));
  td::write_file_atomic(outputs[1], td::to_csv(corpus.test));
  write_manifest(cfg, "gen-synthetic", {}, outputs);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text dataset distillation"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Run configuration (JSON)");
    sub->add_option("--seed", o.seed, "Run seed; overrides the config");
    sub->add_option("--out", o.out, "Output directory; overrides the config");
    sub->add_option("--sweep", o.sweep, "Distilled sizes m for the size sweep")->delimiter(',');
  };
  auto* distill = app.add_subcommand("distill", "Distill the training set into an artifact");
  auto* eval = app.add_subcommand("eval", "Compare full, random and distilled training");
  auto* exp = app.add_subcommand("export", "Convert an artifact to JSON or back");
  auto* gen = app.add_subcommand("gen-synthetic", "Write the synthetic keyword corpus as CSV");
  for (auto* sub : {distill, eval, exp, gen}) add_common(sub);
  eval->add_option("--artifact", o.artifact, "Distilled artifact (default: <out>/distilled.ddtc)");
  exp->add_option("--artifact", o.artifact, "DDTC artifact or JSON export")->required();
  exp->add_option("--output", o.output, "Output file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*distill) return cmd_distill(o);
    if (*eval) return cmd_eval(o);
    if (*exp) return cmd_export(o);
    if (*gen) return cmd_gen_synthetic(o);
  } catch (const td::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kInternal;
}
