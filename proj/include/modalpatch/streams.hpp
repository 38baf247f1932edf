#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "modalpatch/array.hpp"

namespace modalpatch::streams {

enum class Modality { Img = 0, Pts = 1 };
enum class Source { Extracted, Compensated, Fused };

const char* modality_name(Modality m);
const char* source_name(Source s);

struct SceneObject {
  double x = 0.0, y = 0.0;    // initial position, grid units
  double vx = 0.0, vy = 0.0;  // grid units per frame, magnitude <= 1.5
  int cls = 0;                // {0, 1}
  double appearance = 0.0;    // [0, 1]
};

struct Scene {
  uint64_t seed = 0;
  int T = 0;
  double motion_noise = 0.0;
  std::vector<SceneObject> objects;
  // positions[obj][t]: constant-velocity track + jitter, reflected at borders
  std::vector<std::vector<std::pair<double, double>>> positions;
};

struct FeatureMap {
  Modality modality = Modality::Img;
  int time_index = 0;
  Array data;  // (D, H, W)
  Source source = Source::Extracted;
};

struct DropSchedule {
  int T = 0;
  double rate_img = 0.0, rate_pts = 0.0;
  uint64_t seed = 0;
  std::vector<std::array<bool, 2>> available;  // [t][modality]
};

struct DetectionTarget {
  Array occupancy;  // (1, H, W), 0/1
  Array offsets;    // (2, H, W): dx, dy in [-0.5, 0.5] where occupied
};

struct StreamConfig {
  int h = 32, w = 32;
  int d_img = 16, d_pts = 16;
  int n_objects = 6;
  int frames = 40;
  double motion_noise = 0.05;
  double speed_min = 0.3, speed_max = 1.2;
  double appearance_min = 0.3, appearance_max = 1.0;
  double range_img = 11.0;   // camera range limit, cells from grid center
  double noise_std = 0.02;
  double blob_std = 1.5;

  int channels(Modality m) const { return m == Modality::Img ? d_img : d_pts; }
};

Scene gen_scene(const StreamConfig& cfg, uint64_t seed, int n_objects, int T);

FeatureMap render_features(const StreamConfig& cfg, const Scene& scene, int t,
                           Modality modality);

DetectionTarget render_targets(const StreamConfig& cfg, const Scene& scene, int t);

DropSchedule gen_drop_schedule(uint64_t seed, int T, double rate_img,
                               double rate_pts);

bool available(const DropSchedule& s, int t, Modality m);

// Directory layout: <dir>/meta.json, <dir>/img_<t>.bin, <dir>/pts_<t>.bin
// (raw little-endian doubles).
void write_stream_dir(const StreamConfig& cfg, const Scene& scene,
                      const std::string& dir);
void write_schedule(const DropSchedule& s, const std::string& path);

// Lazily rendered ground-truth features and targets for one scene. Holds the
// scene by reference; callers keep the scene alive.
class FrameCache {
 public:
  FrameCache(const StreamConfig& cfg, const Scene& scene);
  const FeatureMap& feature(int t, Modality m);
  const DetectionTarget& target(int t);
  const Scene& scene() const { return scene_; }

 private:
  const StreamConfig& cfg_;
  const Scene& scene_;
  std::vector<std::vector<FeatureMap>> features_;  // [t][modality]
  std::vector<DetectionTarget> targets_;
  std::vector<std::vector<bool>> have_feature_;
  std::vector<bool> have_target_;
};

}  // namespace modalpatch::streams
