#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ctflab/ctf/ctf.hpp"
#include "ctflab/ssod/mean_teacher.hpp"
#include "ctflab/synth/dataset.hpp"

namespace ctflab::cli {

struct RunConfig {
  std::filesystem::path output_dir = "runs/default";
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  std::size_t checkpoint_interval = 0;  // 0: final checkpoint only
};

struct EvalConfig {
  std::size_t interval = 100;
  double score_threshold = 0.001;
  double gap_band = 0.0;
  std::size_t last_n = 10;
};

struct ConsistencyConfig {
  std::size_t windows = 100;
  std::size_t window_length = 100;
  double stability_threshold = 0.3;
};

// Cutout passes of one pipeline; every pass uses the same parameters.
struct CutoutSettings {
  std::size_t passes = 0;
  synth::CutoutSpec params;
};

// Everything an experiment needs. The master seed and the optimizer are held
// once here and copied into the nested training structs by sync(), which
// also expands the cutout settings into the augmentation specs.
struct ExperimentConfig {
  synth::DatasetConfig dataset;
  det::DetectorConfig detector;
  ssod::BurnInConfig burnin;
  ctf::CtfConfig ctf;
  numerics::OptimConfig optim;
  RunConfig run;
  EvalConfig eval;
  ConsistencyConfig consistency;
  CutoutSettings labeled_cutout, weak_cutout, strong_cutout;

  ExperimentConfig();
  void sync();
  void validate() const;
};

// Sectioned key-value text:
//   # comment
//   [section]
//   key = value
// A key may also be written fully qualified ("ctf.beta = 2") outside any
// section. Lists are comma separated. Every key not listed by config_keys()
// is an error, as is a repeated key. Errors name the line.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);

// Canonical text of every key in registry order; parse_config of the result
// reproduces the config.
std::string to_config_text(const ExperimentConfig& cfg);

// 64-bit FNV-1a of the canonical text, excluding run.output_dir and
// run.threads, which do not affect results.
std::uint64_t config_hash(const ExperimentConfig& cfg);

// Applies "key=value" assignments on top of `cfg`; later ones win. Leaves
// `cfg` untouched on error.
void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& assignments);

std::vector<std::string> config_keys();

// CTFLAB_OUTPUT_DIR and CTFLAB_THREADS, when set, replace run.output_dir and
// run.threads.
void apply_environment(ExperimentConfig& cfg);

}  // namespace ctflab::cli
