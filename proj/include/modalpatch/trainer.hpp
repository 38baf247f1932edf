#pragma once

// Three-stage optimization: stage 0 pretrains the toy detector on clean
// features and freezes it; stage 1 trains the history-based predictors
// against prediction MSE plus detection loss; stage 2 trains the variance
// heads and fusion layers with the predictors frozen (their outputs enter
// the stage-2 graph as plain data, so no gradient can reach them).

#include <map>
#include <string>
#include <vector>

#include "modalpatch/detector.hpp"
#include "modalpatch/graph.hpp"
#include "modalpatch/hfp.hpp"
#include "modalpatch/streams.hpp"
#include "modalpatch/ucf.hpp"

namespace modalpatch::trainer {

struct TrainConfig {
  double lr = 2e-4;
  int epochs = 8;
  double weight_decay = 0.01;
  int batch_size = 4;           // streams per optimizer step
  int samples_per_stream = 16;  // target frames drawn per stream per epoch
  double clip_norm = 1.0;       // global gradient-norm ceiling
  uint64_t seed = 42;
  // Stage 0 has its own epoch budget: the frozen detector must be trained to
  // saturation (its loss gradient at clean features then stays small, which
  // keeps the detection term from distorting the later stages), and that
  // takes more passes than the prediction/fusion stages need.
  int pretrain_epochs = 12;
  double pretrain_target_f1 = 0.9;  // early-stop threshold for stage 0
  double pretrain_abort_f1 = 0.6;   // below this after stage 0 -> abort
};

// Decoupled-weight-decay Adam over a fixed set of parameter names; every
// other entry in the bindings it steps is left untouched (freeze contract).
class AdamW {
 public:
  AdamW(std::vector<std::string> names, const TrainConfig& cfg);

  // One update from (already batch-averaged) gradients. Gradients are first
  // jointly rescaled so their global l2 norm does not exceed clip_norm.
  void step(ad::Bindings& params, const std::map<std::string, Array>& grads);

  int64_t steps_taken() const { return t_; }

 private:
  std::vector<std::string> names_;
  std::map<std::string, Array> m_, v_;
  double lr_, wd_, clip_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  int64_t t_ = 0;
};

struct Corpus {
  std::vector<streams::Scene> train;
  std::vector<streams::Scene> val;
};

// Deterministic scene corpora; scene i's seed mixes (tag, seed, i).
Corpus build_corpus(const streams::StreamConfig& cfg, int n_train, int n_val,
                    int frames, uint64_t seed);

struct StageResult {
  ad::Bindings params;  // full parameter set the stage ran with
  std::vector<double> epoch_losses;
  std::map<std::string, double> val_metrics;
};

// Stage 0: trains "det.*" from scratch on clean rendered features. Stops
// early once validation F1 reaches pretrain_target_f1; throws if the final
// F1 is below pretrain_abort_f1.
StageResult pretrain_detector(const streams::StreamConfig& scfg,
                              const detector::DetectorConfig& dcfg,
                              const TrainConfig& tcfg, const Corpus& corpus);

// Stage 1: trains "hfp.*" with prediction MSE on both modalities plus the
// frozen detector's loss, where one randomly chosen modality per sample
// feeds its predicted feature to the detector (the other feeds ground truth).
StageResult train_stage1(const streams::StreamConfig& scfg,
                         const hfp::HfpConfig& icfg, const hfp::HfpConfig& pcfg,
                         const detector::DetectorConfig& dcfg,
                         const TrainConfig& tcfg, const Corpus& corpus,
                         const ad::Bindings& det_params);

// Stage 2: trains "ucf.*" with NLL + fusion MSE + frozen-detector loss on
// fused features; predictor outputs are computed without gradients.
StageResult train_stage2(const streams::StreamConfig& scfg,
                         const hfp::HfpConfig& icfg, const hfp::HfpConfig& pcfg,
                         const ucf::UcfConfig& ucfg,
                         const detector::DetectorConfig& dcfg,
                         const TrainConfig& tcfg, const Corpus& corpus,
                         const ad::Bindings& stage1_params);

// Run manifest: config echo, seed, per-epoch losses, validation metrics,
// checkpoint path, and input-artifact hashes.
void write_manifest(const std::string& path, const std::string& stage,
                    const std::map<std::string, std::string>& config_echo,
                    const StageResult& result, const std::string& checkpoint,
                    const std::map<std::string, std::string>& input_hashes);

}  // namespace modalpatch::trainer
