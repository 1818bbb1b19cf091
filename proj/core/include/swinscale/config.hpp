#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "swinscale/dataset_io.hpp"
#include "swinscale/emulator.hpp"
#include "swinscale/evaluation.hpp"
#include "swinscale/training.hpp"

namespace swinscale {

// Relative paths in configs resolve against this variable when it is set,
// otherwise against the working directory.
inline constexpr const char* kOutputRootEnv = "SWINSCALE_OUTPUT_ROOT";

std::filesystem::path output_root();
std::filesystem::path resolve_path(const std::filesystem::path& p);

struct DatasetSection {
  std::filesystem::path path;  // as written; resolve_path() before use
  // Generation parameters; only gen-data needs them; other commands read the
  // manifest stored with the data.
  std::optional<DatasetManifest> generation;
};

struct SweepSection {
  std::vector<double> budgets;  // training FLOPs, strictly increasing
  std::vector<LossSpec> branch_losses{LossSpec{}};
  double lr_ref_params = 0.0;
};

struct CooldownSection {
  std::filesystem::path checkpoint;
  long total_iters = 0;
  double frac = 0.05;
  std::optional<LossSpec> loss;
};

struct EvalSection {
  std::filesystem::path checkpoint;
  int steps = 6;
  int ic_stride = 1;
  std::string split = "test";  // val | test
  RmseAggregation aggregation = RmseAggregation::mean_of_rmse;
  std::vector<int> spectrum_leads;
};

struct FitSection {
  std::filesystem::path input;  // sweep rows CSV, or (budget, optimum) CSV
  std::string loss = "mse";
  std::string metric = "val_1step";  // or val_6step
};

struct ExperimentConfig {
  std::filesystem::path output_dir = "run";
  std::optional<DatasetSection> dataset;
  std::vector<ModelConfig> models;
  TrainConfig train;
  LRScheduleSpec schedule;
  std::uint64_t init_seed = 0;
  long checkpoint_every = 0;  // 0: only at the cooldown start and the end
  SweepSection sweep;
  CooldownSection cooldown;
  EvalSection eval;
  FitSection fit;

  const ModelConfig& model() const;
  // Canonical JSON of every field; the config hash is taken over this text.
  std::string to_json() const;
  std::string hash() const;
};

// Parses a config document. Overrides are "dotted.path=value" strings applied
// to the document first; the value is read as JSON when it parses, else as a
// string. Errors name the offending field path.
ExperimentConfig parse_config(const std::string& text, const std::vector<std::string>& overrides = {});
ExperimentConfig load_config(const std::filesystem::path& file,
                             const std::vector<std::string>& overrides = {});

// Per-run bookkeeping. Artifacts are only ever appended; the file is
// replaced atomically on every update.
struct RunManifest {
  std::string run_id;
  std::string command;
  std::string config_hash;
  std::string code_version;
  std::string status = "running";  // running | complete | failed
  std::vector<std::string> artifacts;  // paths relative to the run directory
  std::string created;
  std::string updated;
};

std::string code_version();
void write_run_manifest(const std::filesystem::path& dir, RunManifest& m);
std::optional<RunManifest> read_run_manifest(const std::filesystem::path& dir);
void add_artifact(RunManifest& m, const std::string& relative_path);

}  // namespace swinscale
