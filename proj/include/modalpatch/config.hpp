#pragma once

// Flat "key = value" run configuration shared by every CLI subcommand.
// Unknown keys are rejected so typos fail loudly instead of silently
// running defaults.

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "modalpatch/detector.hpp"
#include "modalpatch/eval.hpp"
#include "modalpatch/hfp.hpp"
#include "modalpatch/streams.hpp"
#include "modalpatch/trainer.hpp"
#include "modalpatch/ucf.hpp"

namespace modalpatch::config {

// Bad key, bad value, or an inconsistent combination. CLI exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A required upstream artifact (checkpoint, report) is absent. Exit code 3.
struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  streams::StreamConfig stream;

  int train_streams = 64;
  int val_streams = 16;
  uint64_t corpus_seed = 7;

  int tau = 6;   // memory-bank depth / history window
  int k = 4;     // sampling points per attention query
  int d_h = 32;  // detector hidden width

  trainer::TrainConfig train;

  uint64_t eval_seed = 900;
  int heatmap_frames = 0;
  bool timing = false;
  bool uncertainty_scaling = true;
  std::vector<double> rates = {0.0, 0.1, 0.3, 0.5};
  double rate = 0.5;            // single-rate eval subcommand
  std::string policy = "hfp_ucf";

  // ---- conversions into the module configs ----
  hfp::HfpConfig hfp_cfg(streams::Modality m) const;
  ucf::UcfConfig ucf_cfg() const;  // throws unless d_img == d_pts and even
  detector::DetectorConfig det_cfg() const;
  eval::EvalSetup eval_setup() const;
  eval::SweepOptions sweep_options() const;  // heatmap_dir left empty
};

// All recognized keys, in registry order.
std::vector<std::string> config_keys();

// Applies one "key" / "value" pair; throws ConfigError naming the key.
void apply(RunConfig& cfg, const std::string& key, const std::string& value);

// Parses a config file ('#' comments, blank lines, "key = value") when
// `path` is non-empty, then `overrides` entries of the form "key=value",
// then validates the result.
RunConfig load_config(const std::string& path,
                      const std::vector<std::string>& overrides);

// Range/consistency checks; throws ConfigError naming the offending key.
void validate(const RunConfig& cfg);

// Current value of every key, for manifests and report echoes.
std::map<std::string, std::string> config_items(const RunConfig& cfg);

}  // namespace modalpatch::config
