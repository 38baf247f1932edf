#pragma once

// Toy detection head: concatenates both modalities' feature maps, projects,
// runs two 3x3 convolutions, and emits per-cell occupancy logits plus
// sub-cell center offsets.  Pretrained once on clean features and then kept
// frozen while the compensation modules train against it.

#include <string>

#include "modalpatch/graph.hpp"
#include "modalpatch/streams.hpp"

namespace modalpatch::detector {

struct DetectorConfig {
  int d_img = 16;
  int d_pts = 16;
  int d_h = 32;  // hidden channels
  int h = 32;
  int w = 32;
};

struct Detection {
  Array logits;   // (1,H,W)
  Array offsets;  // (2,H,W)
};

// Parameter names (prefix "det."):
//   proj.weight / .bias    (D_h, D_img+D_pts) / (D_h)
//   conv1.weight / .bias   (D_h, D_h, 3, 3) / (D_h)
//   conv2.weight / .bias   (D_h, D_h, 3, 3) / (D_h)
//   cls.weight / .bias     (1, D_h) / (1)
//   reg.weight / .bias     (2, D_h) / (2)
ad::Bindings init_params(const DetectorConfig& cfg, uint64_t seed);

// Declares the "det.*" parameter inputs and wires the head on two feature
// nodes. Returns the logits and offsets node ids.
struct DetectNodes {
  ad::NodeId logits;
  ad::NodeId offsets;
};
DetectNodes build_detect(ad::Graph& g, ad::NodeId f_img, ad::NodeId f_pts,
                         const DetectorConfig& cfg, bool trainable);

// Declares target inputs "target.occupancy" (1,H,W), "target.offsets"
// (2,H,W) and "target.n_occ" (scalar, max(1, occupied-cell count)) and wires
// the detection loss: mean binary cross-entropy over cells plus the mean
// over occupied cells of the squared offset error (both components summed).
ad::NodeId build_det_loss(ad::Graph& g, const DetectNodes& det,
                          const DetectorConfig& cfg);

// Binds the three target inputs for one DetectionTarget.
void bind_target(const streams::DetectionTarget& target, ad::Bindings& into);

// ---- plain (non-graph) counterparts ----

Detection detect(const DetectorConfig& cfg, const ad::Bindings& params,
                 const Array& f_img, const Array& f_pts);

double det_loss(const Detection& pred, const streams::DetectionTarget& target);

// Cell-level F1 of sigmoid(logits) > threshold against occupancy; defined as
// 1.0 when neither prediction nor target marks any cell.
double det_f1(const Detection& pred, const streams::DetectionTarget& target,
              double threshold = 0.5);

}  // namespace modalpatch::detector
