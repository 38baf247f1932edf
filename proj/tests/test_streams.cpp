#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "modalpatch/streams.hpp"

using namespace modalpatch;
namespace fs = std::filesystem;

namespace {

// one hand-built object so every rendered value has a closed form
streams::Scene manual_scene(double x, double y, int cls, double appearance,
                            int T, uint64_t seed = 1) {
  streams::Scene s;
  s.seed = seed;
  s.T = T;
  streams::SceneObject o;
  o.x = x;
  o.y = y;
  o.cls = cls;
  o.appearance = appearance;
  s.objects.push_back(o);
  s.positions.push_back(
      std::vector<std::pair<double, double>>(static_cast<size_t>(T), {x, y}));
  return s;
}

bool bitwise_equal(const Array& a, const Array& b) {
  REQUIRE(a.data.size() == b.data.size());
  return std::memcmp(a.data.data(), b.data.data(),
                     a.data.size() * sizeof(double)) == 0;
}

double map_mse(const Array& a, const Array& b) {
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

}  // namespace

TEST_CASE("scene generation validates its arguments") {
  streams::StreamConfig cfg;
  CHECK_THROWS_AS(streams::gen_scene(cfg, 1, 0, 10), std::runtime_error);
  CHECK_THROWS_AS(streams::gen_scene(cfg, 1, 3, 1), std::runtime_error);
  streams::StreamConfig fast = cfg;
  fast.speed_max = 2.0;
  CHECK_THROWS_AS(streams::gen_scene(fast, 1, 3, 10), std::runtime_error);
}

TEST_CASE("scenes are deterministic in the seed and sensitive to it") {
  streams::StreamConfig cfg;
  const streams::Scene a = streams::gen_scene(cfg, 42, 6, 20);
  const streams::Scene b = streams::gen_scene(cfg, 42, 6, 20);
  const streams::Scene c = streams::gen_scene(cfg, 43, 6, 20);
  REQUIRE(a.objects.size() == 6);
  for (size_t i = 0; i < a.objects.size(); ++i) {
    CHECK(a.objects[i].x == b.objects[i].x);
    CHECK(a.objects[i].vx == b.objects[i].vx);
    CHECK(a.objects[i].cls == b.objects[i].cls);
  }
  CHECK(a.positions == b.positions);
  CHECK(a.positions != c.positions);
}

TEST_CASE("object draws respect the configured ranges") {
  streams::StreamConfig cfg;
  const streams::Scene s = streams::gen_scene(cfg, 7, 50, 5);
  for (const streams::SceneObject& o : s.objects) {
    CHECK(o.x >= 0.0);
    CHECK(o.x <= cfg.w - 1.0);
    CHECK(o.y >= 0.0);
    CHECK(o.y <= cfg.h - 1.0);
    const double speed = std::hypot(o.vx, o.vy);
    CHECK(speed >= cfg.speed_min - 1e-12);
    CHECK(speed <= cfg.speed_max + 1e-12);
    CHECK((o.cls == 0 || o.cls == 1));
    CHECK(o.appearance >= cfg.appearance_min);
    CHECK(o.appearance <= cfg.appearance_max);
  }
}

TEST_CASE("tracks start exactly at the initial position (no jitter at t=0)") {
  streams::StreamConfig cfg;
  const streams::Scene s = streams::gen_scene(cfg, 11, 8, 30);
  for (size_t i = 0; i < s.objects.size(); ++i) {
    CHECK(s.positions[i][0].first == s.objects[i].x);
    CHECK(s.positions[i][0].second == s.objects[i].y);
  }
}

TEST_CASE("noiseless tracks are constant-velocity while away from borders") {
  streams::StreamConfig cfg;
  cfg.motion_noise = 0.0;
  const streams::Scene s = streams::gen_scene(cfg, 3, 12, 12);
  int verified = 0;
  for (size_t i = 0; i < s.objects.size(); ++i) {
    // only tracks whose unreflected path never leaves the grid are linear;
    // a reflected track can land back in the interior, so test the raw path
    bool in_bounds = true;
    for (int t = 0; t < s.T; ++t) {
      const double lx = s.objects[i].x + t * s.objects[i].vx;
      const double ly = s.objects[i].y + t * s.objects[i].vy;
      in_bounds &= lx >= 0.0 && lx <= cfg.w - 1.0 && ly >= 0.0 && ly <= cfg.h - 1.0;
    }
    if (!in_bounds) continue;
    ++verified;
    for (int t = 0; t < s.T; ++t) {
      CHECK(s.positions[i][static_cast<size_t>(t)].first ==
            doctest::Approx(s.objects[i].x + t * s.objects[i].vx).epsilon(1e-12));
      CHECK(s.positions[i][static_cast<size_t>(t)].second ==
            doctest::Approx(s.objects[i].y + t * s.objects[i].vy).epsilon(1e-12));
    }
  }
  CHECK(verified > 0);  // 12 objects on a 32-grid: some track stays in bounds
}

TEST_CASE("tracks never leave the grid even at maximum speed") {
  streams::StreamConfig cfg;
  cfg.speed_min = 1.4;
  cfg.speed_max = 1.5;
  const streams::Scene s = streams::gen_scene(cfg, 5, 10, 200);
  for (const auto& track : s.positions)
    for (const auto& [x, y] : track) {
      CHECK(x >= 0.0);
      CHECK(x <= cfg.w - 1.0);
      CHECK(y >= 0.0);
      CHECK(y <= cfg.h - 1.0);
    }
}

TEST_CASE("rendered features are deterministic per (seed, frame, modality)") {
  streams::StreamConfig cfg;
  const streams::Scene s = streams::gen_scene(cfg, 21, 6, 8);
  const streams::FeatureMap a = streams::render_features(cfg, s, 3, streams::Modality::Img);
  const streams::FeatureMap b = streams::render_features(cfg, s, 3, streams::Modality::Img);
  CHECK(bitwise_equal(a.data, b.data));
  CHECK(a.modality == streams::Modality::Img);
  CHECK(a.time_index == 3);
  CHECK(a.source == streams::Source::Extracted);

  const streams::FeatureMap c = streams::render_features(cfg, s, 4, streams::Modality::Img);
  const streams::FeatureMap d = streams::render_features(cfg, s, 3, streams::Modality::Pts);
  CHECK(!bitwise_equal(a.data, c.data));
  CHECK(a.data.shape == std::vector<int>{cfg.d_img, cfg.h, cfg.w});
  CHECK(d.data.shape == std::vector<int>{cfg.d_pts, cfg.h, cfg.w});
}

TEST_CASE("empty scene renders pure sensor noise with the configured std") {
  streams::StreamConfig cfg;  // noise_std = 0.02
  streams::Scene s;
  s.seed = 9;
  s.T = 2;
  const streams::FeatureMap fm = streams::render_features(cfg, s, 0, streams::Modality::Img);
  double sum = 0.0, sq = 0.0;
  const double n = static_cast<double>(fm.data.numel());
  for (double v : fm.data.data) {
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  const double stdev = std::sqrt(sq / n - mean * mean);
  CHECK(std::abs(mean) < 5.0 * cfg.noise_std / std::sqrt(n));
  CHECK(stdev == doctest::Approx(cfg.noise_std).epsilon(0.05));
}

TEST_CASE("img blobs peak at the object cell with class/appearance amplitude") {
  streams::StreamConfig cfg;
  cfg.noise_std = 0.0;
  const streams::Scene s = manual_scene(16.0, 12.0, 0, 0.8, 2);
  const streams::FeatureMap fm = streams::render_features(cfg, s, 0, streams::Modality::Img);
  const int half = cfg.d_img / 2;

  // class-0 channels carry the blob, class-1 channels stay empty
  double active_peak = 0.0;
  for (int c = 0; c < half; ++c) {
    // argmax over the grid must be the object cell
    int best = 0;
    for (int i = 1; i < cfg.h * cfg.w; ++i)
      if (fm.data[c * cfg.h * cfg.w + i] > fm.data[c * cfg.h * cfg.w + best]) best = i;
    CHECK(best == 12 * cfg.w + 16);
    active_peak = std::max(active_peak, fm.data.at(c, 12, 16));
  }
  CHECK(active_peak > 0.3);  // gain in [0.5,1] times appearance 0.8
  CHECK(active_peak <= 0.8 + 1e-12);
  for (int c = half; c < cfg.d_img; ++c)
    for (int i = 0; i < cfg.h * cfg.w; ++i)
      CHECK(fm.data[c * cfg.h * cfg.w + i] == 0.0);
}

TEST_CASE("objects outside camera range are attenuated to a tenth") {
  streams::StreamConfig cfg;
  cfg.noise_std = 0.0;
  // same class and appearance; (16,16) is near the grid center, (2,2) is
  // ~19 cells away, beyond the default range of 11
  const streams::Scene near = manual_scene(16.0, 16.0, 0, 1.0, 2);
  const streams::Scene far = manual_scene(2.0, 2.0, 0, 1.0, 2);
  const streams::FeatureMap fn = streams::render_features(cfg, near, 0, streams::Modality::Img);
  const streams::FeatureMap ff = streams::render_features(cfg, far, 0, streams::Modality::Img);
  for (int c = 0; c < cfg.d_img / 2; ++c)
    CHECK(ff.data.at(c, 2, 2) == doctest::Approx(0.1 * fn.data.at(c, 16, 16)).epsilon(1e-12));

  // geometry modality has no camera-range attenuation
  const streams::FeatureMap pn = streams::render_features(cfg, near, 0, streams::Modality::Pts);
  const streams::FeatureMap pf = streams::render_features(cfg, far, 0, streams::Modality::Pts);
  for (int c = 0; c < cfg.d_pts / 2; ++c)
    CHECK(pf.data.at(c, 2, 2) == doctest::Approx(pn.data.at(c, 16, 16)).epsilon(1e-12));
}

TEST_CASE("modalities are complementary: class flips img only, geometry holds") {
  streams::StreamConfig cfg;
  const streams::Scene cls0 = manual_scene(10.0, 20.0, 0, 0.9, 2, /*seed=*/77);
  const streams::Scene cls1 = manual_scene(10.0, 20.0, 1, 0.9, 2, /*seed=*/77);

  const streams::FeatureMap i0 = streams::render_features(cfg, cls0, 0, streams::Modality::Img);
  const streams::FeatureMap i1 = streams::render_features(cfg, cls1, 0, streams::Modality::Img);
  CHECK(!bitwise_equal(i0.data, i1.data));  // class one-hot moves the blob

  // identical seed -> identical noise; geometry ignores class entirely
  const streams::FeatureMap p0 = streams::render_features(cfg, cls0, 0, streams::Modality::Pts);
  const streams::FeatureMap p1 = streams::render_features(cfg, cls1, 0, streams::Modality::Pts);
  CHECK(bitwise_equal(p0.data, p1.data));
}

TEST_CASE("consecutive frames are closer than distant frames (smoothness)") {
  streams::StreamConfig cfg;
  cfg.noise_std = 0.0;
  cfg.motion_noise = 0.0;
  const streams::Scene s = streams::gen_scene(cfg, 31, 6, 10);
  const streams::FeatureMap f0 = streams::render_features(cfg, s, 0, streams::Modality::Img);
  const streams::FeatureMap f1 = streams::render_features(cfg, s, 1, streams::Modality::Img);
  const streams::FeatureMap f5 = streams::render_features(cfg, s, 5, streams::Modality::Img);
  CHECK(map_mse(f0.data, f1.data) < map_mse(f0.data, f5.data));
}

TEST_CASE("targets round half to even and keep the first claimant per cell") {
  streams::StreamConfig cfg;
  streams::Scene s = manual_scene(2.5, 3.5, 0, 1.0, 2);
  streams::SceneObject o2;  // lands on the same cell as the first object
  o2.x = 2.1;
  o2.y = 4.1;
  s.objects.push_back(o2);
  s.positions.push_back({{2.1, 4.1}, {2.1, 4.1}});

  const streams::DetectionTarget tgt = streams::render_targets(cfg, s, 0);
  // 2.5 -> 2 and 3.5 -> 4 under round-half-even
  CHECK(tgt.occupancy.at(0, 4, 2) == 1.0);
  double occupied = 0.0;
  for (double v : tgt.occupancy.data) occupied += v;
  CHECK(occupied == 1.0);  // second object collided and was dropped
  // offsets store the sub-cell remainder of the FIRST object
  CHECK(tgt.offsets.at(0, 4, 2) == doctest::Approx(0.5));
  CHECK(tgt.offsets.at(1, 4, 2) == doctest::Approx(-0.5));
}

TEST_CASE("drop schedules: rate endpoints, determinism, validation") {
  CHECK_THROWS_AS(streams::gen_drop_schedule(1, 10, -0.1, 0.5), std::runtime_error);
  CHECK_THROWS_AS(streams::gen_drop_schedule(1, 10, 0.5, 1.1), std::runtime_error);

  const streams::DropSchedule none = streams::gen_drop_schedule(5, 50, 0.0, 0.0);
  const streams::DropSchedule all = streams::gen_drop_schedule(5, 50, 1.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    CHECK(streams::available(none, t, streams::Modality::Img));
    CHECK(streams::available(none, t, streams::Modality::Pts));
    CHECK(!streams::available(all, t, streams::Modality::Img));
    CHECK(!streams::available(all, t, streams::Modality::Pts));
  }

  const streams::DropSchedule a = streams::gen_drop_schedule(9, 40, 0.3, 0.6);
  const streams::DropSchedule b = streams::gen_drop_schedule(9, 40, 0.3, 0.6);
  CHECK(a.available == b.available);
}

TEST_CASE("empirical drop rate matches the configured rate at T = 10000") {
  const int T = 10000;
  const streams::DropSchedule s = streams::gen_drop_schedule(17, T, 0.5, 0.5);
  int img = 0, pts = 0;
  for (int t = 0; t < T; ++t) {
    img += streams::available(s, t, streams::Modality::Img);
    pts += streams::available(s, t, streams::Modality::Pts);
  }
  CHECK(img > static_cast<int>(0.48 * T));
  CHECK(img < static_cast<int>(0.52 * T));
  CHECK(pts > static_cast<int>(0.48 * T));
  CHECK(pts < static_cast<int>(0.52 * T));
}

TEST_CASE("img and pts drops are statistically independent") {
  const int T = 10000;
  const streams::DropSchedule s = streams::gen_drop_schedule(23, T, 0.5, 0.5);
  // 2x2 contingency table chi-square with 1 dof; critical value at alpha=0.01
  double n[2][2] = {{0, 0}, {0, 0}};
  for (int t = 0; t < T; ++t)
    ++n[streams::available(s, t, streams::Modality::Img) ? 1 : 0]
       [streams::available(s, t, streams::Modality::Pts) ? 1 : 0];
  const double r0 = n[0][0] + n[0][1], r1 = n[1][0] + n[1][1];
  const double c0 = n[0][0] + n[1][0], c1 = n[0][1] + n[1][1];
  double chi2 = 0.0;
  const double rows[2] = {r0, r1}, cols[2] = {c0, c1};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      const double expect = rows[i] * cols[j] / T;
      chi2 += (n[i][j] - expect) * (n[i][j] - expect) / expect;
    }
  CHECK(chi2 < 6.634896601);
}

TEST_CASE("frame cache returns the same bits as direct rendering") {
  streams::StreamConfig cfg;
  const streams::Scene s = streams::gen_scene(cfg, 41, 4, 6);
  streams::FrameCache cache(cfg, s);
  const streams::FeatureMap direct = streams::render_features(cfg, s, 2, streams::Modality::Pts);
  CHECK(bitwise_equal(cache.feature(2, streams::Modality::Pts).data, direct.data));
  // repeated access returns the identical object
  const streams::FeatureMap* p1 = &cache.feature(2, streams::Modality::Pts);
  const streams::FeatureMap* p2 = &cache.feature(2, streams::Modality::Pts);
  CHECK(p1 == p2);
  const streams::DetectionTarget direct_t = streams::render_targets(cfg, s, 2);
  CHECK(bitwise_equal(cache.target(2).occupancy, direct_t.occupancy));
}

TEST_CASE("stream export round-trips and is byte-identical across runs") {
  streams::StreamConfig cfg;
  cfg.frames = 3;
  const streams::Scene s = streams::gen_scene(cfg, 51, 3, 3);
  const fs::path dir1 = fs::temp_directory_path() / "mp_stream_a";
  const fs::path dir2 = fs::temp_directory_path() / "mp_stream_b";
  fs::remove_all(dir1);
  fs::remove_all(dir2);
  streams::write_stream_dir(cfg, s, dir1.string());
  streams::write_stream_dir(cfg, s, dir2.string());

  REQUIRE(fs::exists(dir1 / "meta.json"));
  for (const char* name : {"meta.json", "img_0.bin", "pts_2.bin"}) {
    std::ifstream a(dir1 / name, std::ios::binary);
    std::ifstream b(dir2 / name, std::ios::binary);
    REQUIRE(a);
    REQUIRE(b);
    const std::string sa((std::istreambuf_iterator<char>(a)), {});
    const std::string sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(sa == sb);
    CHECK(!sa.empty());
  }

  // the binary payload is the rendered map verbatim
  const streams::FeatureMap fm = streams::render_features(cfg, s, 0, streams::Modality::Img);
  std::ifstream f(dir1 / "img_0.bin", std::ios::binary);
  std::vector<double> payload(static_cast<size_t>(fm.data.numel()));
  f.read(reinterpret_cast<char*>(payload.data()),
         static_cast<std::streamsize>(payload.size() * sizeof(double)));
  CHECK(std::memcmp(payload.data(), fm.data.data.data(),
                    payload.size() * sizeof(double)) == 0);
  fs::remove_all(dir1);
  fs::remove_all(dir2);
}

TEST_CASE("schedule export writes the full availability table") {
  const streams::DropSchedule s = streams::gen_drop_schedule(3, 8, 0.4, 0.2);
  const fs::path path = fs::temp_directory_path() / "mp_schedule.json";
  streams::write_schedule(s, path.string());
  std::ifstream f(path);
  const std::string text((std::istreambuf_iterator<char>(f)), {});
  CHECK(text.find("\"rate_img\":0.4") != std::string::npos);
  CHECK(text.find("\"available\"") != std::string::npos);
  fs::remove(path);
}
