#pragma once

// Streaming inference under drop schedules, compensation-policy baselines,
// feature/detection metrics, and the sweep report across drop rates.

#include <functional>
#include <string>
#include <vector>

#include "modalpatch/detector.hpp"
#include "modalpatch/graph.hpp"
#include "modalpatch/hfp.hpp"
#include "modalpatch/membank.hpp"
#include "modalpatch/streams.hpp"
#include "modalpatch/ucf.hpp"

namespace modalpatch::eval {

enum class Policy { ZeroFill, CopyLast, Kalman, Hfp, HfpUcf };

const char* policy_name(Policy p);
Policy policy_from_name(const std::string& name);  // throws on unknown name
inline constexpr Policy kAllPolicies[] = {Policy::ZeroFill, Policy::CopyLast,
                                          Policy::Kalman, Policy::Hfp,
                                          Policy::HfpUcf};

// Module configurations bundled for evaluation runs.
struct EvalSetup {
  streams::StreamConfig stream;
  hfp::HfpConfig hfp_img;
  hfp::HfpConfig hfp_pts;
  ucf::UcfConfig ucf;
  detector::DetectorConfig det;
  bool uncertainty_scaling = true;  // false: fusion keeps raw attention weights
};

// Independent per-cell constant-velocity Kalman filters over a feature map.
// All cells share one covariance recursion because availability is per-map,
// so the gain is identical everywhere; the per-cell state is [value, rate].
class KalmanBank {
 public:
  explicit KalmanBank(int64_t cells, double q = 1e-3, double r = 4e-4);

  void predict();                     // advance the motion model one frame
  void update(const Array& observed); // measurement update on every cell
  // Current per-cell value estimates, shaped like the feature map.
  Array estimate(const std::vector<int>& shape) const;

 private:
  std::vector<double> x0_, x1_;      // per-cell value and rate
  double p00_ = 1.0, p01_ = 0.0, p11_ = 1.0;
  double q_, r_;
};

struct MseResult {
  double scalar = 0.0;
  Array map;  // (1,H,W) channel-mean squared difference
};
MseResult feature_mse(const Array& predicted, const Array& ground_truth);

struct FrameResult {
  bool img_available = true;
  bool pts_available = true;
  Array img_used;  // feature the detector consumed for each modality
  Array pts_used;
  detector::Detection detection;
  double f1 = 0.0;
  // valid only where the modality was missing this frame
  double mse_img = 0.0, mse_pts = 0.0;
  Array mse_map_img, mse_map_pts;
  Array uncert_img, uncert_pts;  // HFP+UCF on fusion frames only (1,H,W)
};

struct StreamEval {
  std::vector<FrameResult> frames;
};

// Per-frame inspection hook (memory-bank state after the frame's updates).
using BankProbe = std::function<void(int t, const membank::MemoryBank& img,
                                     const membank::MemoryBank& pts)>;

// Walks one stream under a drop schedule. Available frames feed extracted
// features straight through (and into the banks); missing frames feed the
// policy's compensated feature. HFP+UCF additionally fuses the two
// compensated/extracted features whenever at least one modality is missing
// and hands the fused pair to the detector; its banks still receive the
// pre-fusion predictions. Learned policies require their parameters in
// `params` and throw when they are absent.
StreamEval run_inference(const EvalSetup& setup, const streams::Scene& scene,
                         const streams::DropSchedule& schedule, Policy policy,
                         const ad::Bindings& params,
                         const BankProbe& probe = nullptr);

struct SweepRow {
  Policy policy;
  double rate = 0.0;
  double mse_img = 0.0;   // mean over missing img frames (0 when none)
  double mse_pts = 0.0;
  double f1 = 0.0;        // mean per-frame F1 over all frames
  double f1_bothdrop = 0.0;  // over frames with both modalities missing
  double seconds = 0.0;   // 0 unless timing was requested
};

struct SweepReport {
  std::vector<SweepRow> rows;  // policy-major, rates ascending within policy
};

struct SweepOptions {
  std::vector<Policy> policies{std::begin(kAllPolicies), std::end(kAllPolicies)};
  std::vector<double> rates = {0.0, 0.1, 0.3, 0.5};
  uint64_t schedule_seed = 900;  // per-stream seeds mix this with the stream id
  std::string heatmap_dir;       // empty: no heatmaps
  int heatmap_frames = 0;        // missing frames per stream to export
  bool timing = false;           // false keeps the seconds column at 0 (byte-stable reports)
};

// Evaluates every policy at every rate over the validation scenes. Drop
// schedules depend only on (schedule_seed, stream id), so every policy sees
// identical schedules and higher rates drop supersets of lower rates.
SweepReport sweep(const EvalSetup& setup, const std::vector<streams::Scene>& val,
                  const ad::Bindings& params, const SweepOptions& opts);

void write_report_csv(const SweepReport& report, const std::string& path);
void write_report_json(const SweepReport& report,
                       const std::map<std::string, std::string>& config_echo,
                       const std::string& path);

// 8-bit binary PGM, linearly scaled so the map maximum hits 255; the maximum
// itself lands in "<path>.json" alongside.
void write_pgm(const Array& map, const std::string& path);

// Spearman rank correlation (average ranks on ties).
double spearman(std::vector<double> a, std::vector<double> b);

// Rank correlation between predicted variance and observed squared residual
// of the stage-1 predictor over held-out frames (every `frame_stride`-th).
double calibration_spearman(const EvalSetup& setup,
                            const std::vector<streams::Scene>& val,
                            const ad::Bindings& params, int frame_stride = 4);

}  // namespace modalpatch::eval
