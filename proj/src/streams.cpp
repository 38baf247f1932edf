#include "modalpatch/streams.hpp"

#include <cfenv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "modalpatch/rng.hpp"

namespace modalpatch::streams {

namespace {

constexpr uint64_t kSceneTag = 0x5343454eULL;     // scene stream
constexpr uint64_t kRenderTag = 0x52454e44ULL;    // render noise stream
constexpr uint64_t kScheduleTag = 0x44524f50ULL;  // drop schedule stream

// Fold into [0, L-1] as a triangle wave (border reflection).
double reflect(double p, double len) {
  const double span = 2.0 * (len - 1.0);
  double m = std::fmod(p, span);
  if (m < 0.0) m += span;
  return m <= len - 1.0 ? m : span - m;
}

// Fixed per-channel gain in [0.5, 1.0], derived from (modality, channel).
double channel_gain(Modality m, int c) {
  uint64_t s = mix_seed({0x4741494eULL, static_cast<uint64_t>(m), static_cast<uint64_t>(c)});
  return 0.5 + 0.5 * (static_cast<double>(s >> 11) * 0x1.0p-53);
}

void splat_blob(Array& map, int c, double ox, double oy, double amp, double blob_std) {
  const int H = map.shape[1], W = map.shape[2];
  const double inv2s2 = 1.0 / (2.0 * blob_std * blob_std);
  const int r = static_cast<int>(std::ceil(4.0 * blob_std));
  const int x0 = std::max(0, static_cast<int>(std::floor(ox)) - r);
  const int x1 = std::min(W - 1, static_cast<int>(std::ceil(ox)) + r);
  const int y0 = std::max(0, static_cast<int>(std::floor(oy)) - r);
  const int y1 = std::min(H - 1, static_cast<int>(std::ceil(oy)) + r);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - ox, dy = y - oy;
      map.at(c, y, x) += amp * std::exp(-(dx * dx + dy * dy) * inv2s2);
    }
}

}  // namespace

const char* modality_name(Modality m) { return m == Modality::Img ? "img" : "pts"; }

const char* source_name(Source s) {
  switch (s) {
    case Source::Extracted: return "extracted";
    case Source::Compensated: return "compensated";
    case Source::Fused: return "fused";
  }
  return "?";
}

Scene gen_scene(const StreamConfig& cfg, uint64_t seed, int n_objects, int T) {
  if (n_objects < 1) throw std::runtime_error("gen_scene: n_objects must be >= 1");
  if (T < 2) throw std::runtime_error("gen_scene: T must be >= 2");
  if (cfg.speed_max > 1.5) throw std::runtime_error("gen_scene: speed_max exceeds 1.5");

  Scene scene;
  scene.seed = seed;
  scene.T = T;
  scene.motion_noise = cfg.motion_noise;

  Rng rng(mix_seed({kSceneTag, seed}));
  for (int i = 0; i < n_objects; ++i) {
    SceneObject o;
    o.x = rng.uniform(0.0, cfg.w - 1.0);
    o.y = rng.uniform(0.0, cfg.h - 1.0);
    const double speed = rng.uniform(cfg.speed_min, cfg.speed_max);
    const double angle = rng.uniform(0.0, 6.283185307179586);
    o.vx = speed * std::cos(angle);
    o.vy = speed * std::sin(angle);
    o.cls = rng.uniform_int(2);
    o.appearance = rng.uniform(cfg.appearance_min, cfg.appearance_max);
    scene.objects.push_back(o);
  }

  scene.positions.resize(scene.objects.size());
  for (size_t i = 0; i < scene.objects.size(); ++i) {
    const SceneObject& o = scene.objects[i];
    Rng jitter(mix_seed({kSceneTag, seed, 0x4a49545441ULL, static_cast<uint64_t>(i)}));
    auto& track = scene.positions[i];
    track.resize(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
      double jx = 0.0, jy = 0.0;
      if (t > 0 && cfg.motion_noise > 0.0) {
        jx = jitter.normal(0.0, cfg.motion_noise);
        jy = jitter.normal(0.0, cfg.motion_noise);
      }
      track[static_cast<size_t>(t)] = {reflect(o.x + t * o.vx + jx, cfg.w),
                                       reflect(o.y + t * o.vy + jy, cfg.h)};
    }
  }
  return scene;
}

FeatureMap render_features(const StreamConfig& cfg, const Scene& scene, int t,
                           Modality modality) {
  if (t < 0 || t >= scene.T) throw std::runtime_error("render_features: t out of range");
  const int D = cfg.channels(modality);
  FeatureMap fm;
  fm.modality = modality;
  fm.time_index = t;
  fm.source = Source::Extracted;
  fm.data = Array({D, cfg.h, cfg.w});

  const double cx = (cfg.w - 1.0) / 2.0;
  const double cy = (cfg.h - 1.0) / 2.0;
  const int half = D / 2;

  for (size_t i = 0; i < scene.objects.size(); ++i) {
    const SceneObject& o = scene.objects[i];
    const auto [ox, oy] = scene.positions[i][static_cast<size_t>(t)];
    const double r = std::hypot(ox - cx, oy - cy);
    if (modality == Modality::Img) {
      // class one-hot x appearance; far objects attenuated (camera range)
      const double att = r <= cfg.range_img ? 1.0 : 0.1;
      const int c0 = o.cls == 0 ? 0 : half;
      const int c1 = o.cls == 0 ? half : D;
      for (int c = c0; c < c1; ++c)
        splat_blob(fm.data, c, ox, oy, channel_gain(modality, c) * o.appearance * att,
                   cfg.blob_std);
    } else {
      // geometry only: occupancy intensity + radial-distance encoding
      for (int c = 0; c < half; ++c)
        splat_blob(fm.data, c, ox, oy, channel_gain(modality, c), cfg.blob_std);
      const double rmax = std::hypot(cx, cy);
      const int bins = D - half;
      const double spacing = rmax / std::max(1, bins - 1);
      for (int c = half; c < D; ++c) {
        const double mu = spacing * (c - half);
        const double z = (r - mu) / spacing;
        splat_blob(fm.data, c, ox, oy,
                   channel_gain(modality, c) * std::exp(-0.5 * z * z), cfg.blob_std);
      }
    }
  }

  if (cfg.noise_std > 0.0) {
    Rng noise(mix_seed({kRenderTag, scene.seed, static_cast<uint64_t>(t),
                        static_cast<uint64_t>(modality)}));
    for (double& v : fm.data.data) v += noise.normal(0.0, cfg.noise_std);
  }
  return fm;
}

DetectionTarget render_targets(const StreamConfig& cfg, const Scene& scene, int t) {
  if (t < 0 || t >= scene.T) throw std::runtime_error("render_targets: t out of range");
  DetectionTarget tgt;
  tgt.occupancy = Array({1, cfg.h, cfg.w});
  tgt.offsets = Array({2, cfg.h, cfg.w});
  for (size_t i = 0; i < scene.objects.size(); ++i) {
    const auto [ox, oy] = scene.positions[i][static_cast<size_t>(t)];
    // nearbyint under FE_TONEAREST = round half to even
    const int gx = static_cast<int>(std::nearbyint(ox));
    const int gy = static_cast<int>(std::nearbyint(oy));
    if (gx < 0 || gx >= cfg.w || gy < 0 || gy >= cfg.h) continue;
    if (tgt.occupancy.at(0, gy, gx) != 0.0) continue;  // first object keeps the cell
    tgt.occupancy.at(0, gy, gx) = 1.0;
    tgt.offsets.at(0, gy, gx) = ox - gx;
    tgt.offsets.at(1, gy, gx) = oy - gy;
  }
  return tgt;
}

DropSchedule gen_drop_schedule(uint64_t seed, int T, double rate_img,
                               double rate_pts) {
  if (rate_img < 0.0 || rate_img > 1.0 || rate_pts < 0.0 || rate_pts > 1.0)
    throw std::runtime_error("gen_drop_schedule: rates must lie in [0,1]");
  DropSchedule s;
  s.T = T;
  s.rate_img = rate_img;
  s.rate_pts = rate_pts;
  s.seed = seed;
  s.available.resize(static_cast<size_t>(T));
  Rng rng(mix_seed({kScheduleTag, seed}));
  for (int t = 0; t < T; ++t) {
    s.available[static_cast<size_t>(t)][0] = rng.uniform() >= rate_img;
    s.available[static_cast<size_t>(t)][1] = rng.uniform() >= rate_pts;
  }
  return s;
}

bool available(const DropSchedule& s, int t, Modality m) {
  return s.available[static_cast<size_t>(t)][static_cast<size_t>(m)];
}

void write_stream_dir(const StreamConfig& cfg, const Scene& scene,
                      const std::string& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["seed"] = scene.seed;
  meta["frames"] = scene.T;
  meta["motion_noise"] = scene.motion_noise;
  meta["grid"] = {cfg.h, cfg.w};
  meta["d_img"] = cfg.d_img;
  meta["d_pts"] = cfg.d_pts;
  meta["objects"] = nlohmann::json::array();
  for (const auto& o : scene.objects)
    meta["objects"].push_back({{"x", o.x},
                               {"y", o.y},
                               {"vx", o.vx},
                               {"vy", o.vy},
                               {"class", o.cls},
                               {"appearance", o.appearance}});
  std::ofstream mf(dir + "/meta.json", std::ios::trunc);
  mf << meta.dump(2) << "\n";

  for (int t = 0; t < scene.T; ++t) {
    for (Modality m : {Modality::Img, Modality::Pts}) {
      const FeatureMap fm = render_features(cfg, scene, t, m);
      const std::string path =
          dir + "/" + modality_name(m) + "_" + std::to_string(t) + ".bin";
      std::ofstream f(path, std::ios::binary | std::ios::trunc);
      f.write(reinterpret_cast<const char*>(fm.data.data.data()),
              static_cast<std::streamsize>(fm.data.data.size() * sizeof(double)));
    }
  }
}

FrameCache::FrameCache(const StreamConfig& cfg, const Scene& scene)
    : cfg_(cfg),
      scene_(scene),
      features_(static_cast<size_t>(scene.T), std::vector<FeatureMap>(2)),
      targets_(static_cast<size_t>(scene.T)),
      have_feature_(static_cast<size_t>(scene.T), std::vector<bool>(2, false)),
      have_target_(static_cast<size_t>(scene.T), false) {}

const FeatureMap& FrameCache::feature(int t, Modality m) {
  const size_t ti = static_cast<size_t>(t), mi = static_cast<size_t>(m);
  if (!have_feature_[ti][mi]) {
    features_[ti][mi] = render_features(cfg_, scene_, t, m);
    have_feature_[ti][mi] = true;
  }
  return features_[ti][mi];
}

const DetectionTarget& FrameCache::target(int t) {
  const size_t ti = static_cast<size_t>(t);
  if (!have_target_[ti]) {
    targets_[ti] = render_targets(cfg_, scene_, t);
    have_target_[ti] = true;
  }
  return targets_[ti];
}

void write_schedule(const DropSchedule& s, const std::string& path) {
  nlohmann::json j;
  j["frames"] = s.T;
  j["rate_img"] = s.rate_img;
  j["rate_pts"] = s.rate_pts;
  j["seed"] = s.seed;
  auto avail = nlohmann::json::array();
  for (int t = 0; t < s.T; ++t)
    avail.push_back({s.available[static_cast<size_t>(t)][0],
                     s.available[static_cast<size_t>(t)][1]});
  j["available"] = avail;
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::trunc);
  f << j.dump() << "\n";
}

}  // namespace modalpatch::streams
