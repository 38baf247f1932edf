#include "modalpatch/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "modalpatch/rng.hpp"

namespace modalpatch::eval {

namespace {

ad::Bindings filter_prefix(const ad::Bindings& params,
                           std::initializer_list<const char*> prefixes) {
  ad::Bindings out;
  for (const auto& [name, a] : params)
    for (const char* p : prefixes)
      if (name.rfind(p, 0) == 0) {
        out[name] = a;
        break;
      }
  return out;
}

void require_params(const ad::Bindings& params, const char* probe,
                    const char* what) {
  if (!params.count(probe))
    throw std::runtime_error(std::string("run_inference: ") + what +
                             " parameters missing (no '" + probe + "')");
}

// Reusable evaluation graphs; built once per inference run.
struct Graphs {
  ad::Graph predict_img, predict_pts;
  ad::NodeId fhat_img = -1, fhat_pts = -1;

  // fusion graph: fhat pair in, enhanced pair + uncertainty pair out
  ad::Graph fuse;
  ad::NodeId f_enh_img = -1, f_enh_pts = -1, u_img = -1, u_pts = -1;

  ad::Graph detect;
  detector::DetectNodes det_nodes{};

  // persistent bindings, data slots rewritten every frame
  ad::Bindings bind_predict_img, bind_predict_pts, bind_fuse, bind_detect;
};

Graphs build_graphs(const EvalSetup& setup, Policy policy,
                    const ad::Bindings& params) {
  Graphs g;

  const ad::NodeId fi = g.detect.input("f_img", {setup.det.d_img, setup.det.h, setup.det.w});
  const ad::NodeId fp = g.detect.input("f_pts", {setup.det.d_pts, setup.det.h, setup.det.w});
  g.det_nodes = detector::build_detect(g.detect, fi, fp, setup.det, false);
  g.bind_detect = filter_prefix(params, {"det."});

  if (policy == Policy::Hfp || policy == Policy::HfpUcf) {
    g.fhat_img = hfp::build_predict(g.predict_img, setup.hfp_img, streams::Modality::Img, false);
    g.fhat_pts = hfp::build_predict(g.predict_pts, setup.hfp_pts, streams::Modality::Pts, false);
    g.bind_predict_img = filter_prefix(params, {"hfp.img."});
    g.bind_predict_pts = filter_prefix(params, {"hfp.pts."});
  }
  if (policy == Policy::HfpUcf) {
    ad::Graph& f = g.fuse;
    const ad::NodeId a = f.input("fhat.img", {setup.ucf.d, setup.ucf.h, setup.ucf.w});
    const ad::NodeId b = f.input("fhat.pts", {setup.ucf.d, setup.ucf.h, setup.ucf.w});
    const ad::NodeId s2i = ucf::build_variance(f, a, streams::Modality::Img, setup.ucf.d, false);
    const ad::NodeId s2p = ucf::build_variance(f, b, streams::Modality::Pts, setup.ucf.d, false);
    g.u_img = f.sqrt(s2i);
    g.u_pts = f.sqrt(s2p);
    g.f_enh_img = ucf::build_fuse(f, a, b, g.u_pts, streams::Modality::Img, setup.ucf,
                                  false, setup.uncertainty_scaling);
    g.f_enh_pts = ucf::build_fuse(f, b, a, g.u_img, streams::Modality::Pts, setup.ucf,
                                  false, setup.uncertainty_scaling);
    g.bind_fuse = filter_prefix(params, {"ucf."});
  }
  return g;
}

}  // namespace

const char* policy_name(Policy p) {
  switch (p) {
    case Policy::ZeroFill: return "zero_fill";
    case Policy::CopyLast: return "copy_last";
    case Policy::Kalman: return "kalman";
    case Policy::Hfp: return "hfp";
    case Policy::HfpUcf: return "hfp_ucf";
  }
  return "?";
}

Policy policy_from_name(const std::string& name) {
  for (Policy p : kAllPolicies)
    if (name == policy_name(p)) return p;
  throw std::runtime_error("unknown policy '" + name +
                           "' (expected zero_fill, copy_last, kalman, hfp, hfp_ucf)");
}

// ------------------------------------------------------------------- kalman

KalmanBank::KalmanBank(int64_t cells, double q, double r)
    : x0_(static_cast<size_t>(cells), 0.0),
      x1_(static_cast<size_t>(cells), 0.0),
      q_(q),
      r_(r) {
  if (cells <= 0) throw std::runtime_error("KalmanBank: cells must be positive");
}

void KalmanBank::predict() {
  for (size_t i = 0; i < x0_.size(); ++i) x0_[i] += x1_[i];
  const double p00 = p00_ + 2.0 * p01_ + p11_ + q_;
  const double p01 = p01_ + p11_;
  const double p11 = p11_ + q_;
  p00_ = p00;
  p01_ = p01;
  p11_ = p11;
}

void KalmanBank::update(const Array& observed) {
  if (observed.data.size() != x0_.size())
    throw std::runtime_error("KalmanBank: observation size mismatch");
  const double s = p00_ + r_;
  const double k0 = p00_ / s;
  const double k1 = p01_ / s;
  for (size_t i = 0; i < x0_.size(); ++i) {
    const double y = observed.data[i] - x0_[i];
    x0_[i] += k0 * y;
    x1_[i] += k1 * y;
  }
  p00_ = (1.0 - k0) * p00_;
  p11_ = p11_ - k1 * p01_;
  p01_ = (1.0 - k0) * p01_;
}

Array KalmanBank::estimate(const std::vector<int>& shape) const {
  if (numel_of(shape) != static_cast<int64_t>(x0_.size()))
    throw std::runtime_error("KalmanBank: shape does not cover the cell count");
  Array out(shape);
  out.data = x0_;
  return out;
}

// ------------------------------------------------------------------ metrics

MseResult feature_mse(const Array& predicted, const Array& ground_truth) {
  if (!same_shape(predicted, ground_truth))
    throw std::runtime_error("feature_mse: shape mismatch");
  const int D = predicted.shape[0];
  const int64_t hw = static_cast<int64_t>(predicted.shape[1]) * predicted.shape[2];
  MseResult res;
  res.map = Array({1, predicted.shape[1], predicted.shape[2]});
  for (int64_t i = 0; i < hw; ++i) {
    double acc = 0.0;
    for (int d = 0; d < D; ++d) {
      const double r = predicted[d * hw + i] - ground_truth[d * hw + i];
      acc += r * r;
    }
    res.map[i] = acc / D;
  }
  for (int64_t i = 0; i < hw; ++i) res.scalar += res.map[i];
  res.scalar /= static_cast<double>(hw);
  return res;
}

// ---------------------------------------------------------------- inference

StreamEval run_inference(const EvalSetup& setup, const streams::Scene& scene,
                         const streams::DropSchedule& schedule, Policy policy,
                         const ad::Bindings& params, const BankProbe& probe) {
  if (schedule.T != scene.T)
    throw std::runtime_error("run_inference: schedule length != stream length");
  if (setup.hfp_img.tau != setup.hfp_pts.tau)
    throw std::runtime_error("run_inference: modalities must share tau");

  require_params(params, "det.proj.weight", "detector");
  if (policy == Policy::Hfp || policy == Policy::HfpUcf)
    require_params(params, "hfp.img.query", "predictor");
  if (policy == Policy::HfpUcf)
    require_params(params, "ucf.img.var.l1.weight", "fusion");

  Graphs g = build_graphs(setup, policy, params);
  streams::FrameCache cache(setup.stream, scene);
  const int tau = setup.hfp_img.tau;
  membank::MemoryBank banks[2] = {membank::MemoryBank(tau), membank::MemoryBank(tau)};

  const int64_t cells_img = static_cast<int64_t>(setup.stream.d_img) *
                            setup.stream.h * setup.stream.w;
  const int64_t cells_pts = static_cast<int64_t>(setup.stream.d_pts) *
                            setup.stream.h * setup.stream.w;
  KalmanBank kf[2] = {KalmanBank(cells_img), KalmanBank(cells_pts)};

  const auto compensate = [&](streams::Modality m, int t) -> streams::FeatureMap {
    const int mi = static_cast<int>(m);
    streams::FeatureMap fm;
    fm.modality = m;
    fm.time_index = t;
    fm.source = streams::Source::Compensated;
    const std::vector<int> shape = {setup.stream.channels(m), setup.stream.h,
                                    setup.stream.w};
    switch (policy) {
      case Policy::ZeroFill:
        fm.data = Array(shape);
        break;
      case Policy::CopyLast:
        fm.data = banks[mi].empty() ? Array(shape) : banks[mi].back().data;
        break;
      case Policy::Kalman:
        fm.data = kf[mi].estimate(shape);
        break;
      case Policy::Hfp:
      case Policy::HfpUcf: {
        if (banks[mi].empty()) {
          fm.data = Array(shape);  // nothing to predict from yet
          break;
        }
        ad::Graph& gp = m == streams::Modality::Img ? g.predict_img : g.predict_pts;
        ad::Bindings& bind = m == streams::Modality::Img ? g.bind_predict_img
                                                         : g.bind_predict_pts;
        const hfp::HfpConfig& hc = m == streams::Modality::Img ? setup.hfp_img
                                                               : setup.hfp_pts;
        hfp::bind_window(hc, m, banks[mi].history(), bind);
        fm.data = ad::evaluate(gp, bind).value(
            m == streams::Modality::Img ? g.fhat_img : g.fhat_pts);
        break;
      }
    }
    return fm;
  };

  StreamEval out;
  out.frames.reserve(static_cast<size_t>(scene.T));

  for (int t = 0; t < scene.T; ++t) {
    FrameResult fr;
    fr.img_available = streams::available(schedule, t, streams::Modality::Img);
    fr.pts_available = streams::available(schedule, t, streams::Modality::Pts);

    if (policy == Policy::Kalman) {
      kf[0].predict();
      kf[1].predict();
    }

    streams::FeatureMap used[2];
    for (streams::Modality m : {streams::Modality::Img, streams::Modality::Pts}) {
      const int mi = static_cast<int>(m);
      const bool avail = mi == 0 ? fr.img_available : fr.pts_available;
      if (avail) {
        used[mi] = cache.feature(t, m);
        banks[mi].push(used[mi]);
        if (policy == Policy::Kalman) kf[mi].update(used[mi].data);
      } else {
        used[mi] = compensate(m, t);
        banks[mi].push(used[mi]);
      }
    }

    // Fusion path: only when at least one modality is missing. The live
    // modality's extracted feature plays the role of its own (perfect)
    // compensation; the banks already hold the pre-fusion features.
    if (policy == Policy::HfpUcf && (!fr.img_available || !fr.pts_available)) {
      g.bind_fuse["fhat.img"] = used[0].data;
      g.bind_fuse["fhat.pts"] = used[1].data;
      const ad::Evaluation ev = ad::evaluate(g.fuse, g.bind_fuse);
      used[0].data = ev.value(g.f_enh_img);
      used[0].source = streams::Source::Fused;
      used[1].data = ev.value(g.f_enh_pts);
      used[1].source = streams::Source::Fused;
      fr.uncert_img = ev.value(g.u_img);
      fr.uncert_pts = ev.value(g.u_pts);
    }

    if (!fr.img_available) {
      MseResult m = feature_mse(used[0].data, cache.feature(t, streams::Modality::Img).data);
      fr.mse_img = m.scalar;
      fr.mse_map_img = std::move(m.map);
    }
    if (!fr.pts_available) {
      MseResult m = feature_mse(used[1].data, cache.feature(t, streams::Modality::Pts).data);
      fr.mse_pts = m.scalar;
      fr.mse_map_pts = std::move(m.map);
    }

    g.bind_detect["f_img"] = used[0].data;
    g.bind_detect["f_pts"] = used[1].data;
    const ad::Evaluation ev = ad::evaluate(g.detect, g.bind_detect);
    fr.detection.logits = ev.value(g.det_nodes.logits);
    fr.detection.offsets = ev.value(g.det_nodes.offsets);
    fr.f1 = detector::det_f1(fr.detection, cache.target(t));
    fr.img_used = std::move(used[0].data);
    fr.pts_used = std::move(used[1].data);

    if (probe) probe(t, banks[0], banks[1]);
    out.frames.push_back(std::move(fr));
  }
  return out;
}

// -------------------------------------------------------------------- sweep

SweepReport sweep(const EvalSetup& setup, const std::vector<streams::Scene>& val,
                  const ad::Bindings& params, const SweepOptions& opts) {
  if (val.empty()) throw std::runtime_error("sweep: no validation scenes");
  SweepReport report;

  for (Policy policy : opts.policies) {
    for (double rate : opts.rates) {
      const auto started = std::chrono::steady_clock::now();
      SweepRow row;
      row.policy = policy;
      row.rate = rate;
      double mse_img_sum = 0.0, mse_pts_sum = 0.0, f1_sum = 0.0, f1_both_sum = 0.0;
      int64_t miss_img = 0, miss_pts = 0, frames = 0, both = 0;

      for (size_t si = 0; si < val.size(); ++si) {
        const streams::Scene& scene = val[si];
        const streams::DropSchedule schedule = streams::gen_drop_schedule(
            mix_seed({opts.schedule_seed, static_cast<uint64_t>(si)}), scene.T,
            rate, rate);
        const StreamEval se = run_inference(setup, scene, schedule, policy, params);

        int exported = 0;
        for (int t = 0; t < scene.T; ++t) {
          const FrameResult& fr = se.frames[static_cast<size_t>(t)];
          f1_sum += fr.f1;
          ++frames;
          if (!fr.img_available) {
            mse_img_sum += fr.mse_img;
            ++miss_img;
          }
          if (!fr.pts_available) {
            mse_pts_sum += fr.mse_pts;
            ++miss_pts;
          }
          if (!fr.img_available && !fr.pts_available) {
            f1_both_sum += fr.f1;
            ++both;
          }

          if (!opts.heatmap_dir.empty() && exported < opts.heatmap_frames &&
              (!fr.img_available || !fr.pts_available)) {
            const std::string stem = opts.heatmap_dir + "/" + std::to_string(si) +
                                     "_" + std::to_string(t) + "_";
            const std::string tail = std::string("_") + policy_name(policy) + ".pgm";
            if (!fr.img_available) write_pgm(fr.mse_map_img, stem + "img" + tail);
            if (!fr.pts_available) write_pgm(fr.mse_map_pts, stem + "pts" + tail);
            if (fr.uncert_img.numel() > 0)
              write_pgm(fr.uncert_img, stem + "img_uncert" + tail);
            if (fr.uncert_pts.numel() > 0)
              write_pgm(fr.uncert_pts, stem + "pts_uncert" + tail);
            ++exported;
          }
        }
      }

      row.mse_img = miss_img ? mse_img_sum / miss_img : 0.0;
      row.mse_pts = miss_pts ? mse_pts_sum / miss_pts : 0.0;
      row.f1 = frames ? f1_sum / frames : 0.0;
      row.f1_bothdrop = both ? f1_both_sum / both : 1.0;  // vacuously perfect
      if (opts.timing)
        row.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started)
                .count();
      report.rows.push_back(row);
    }
  }
  return report;
}

void write_report_csv(const SweepReport& report, const std::string& path) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("write_report_csv: cannot open " + path);
  f << "policy,drop_rate,mse_img,mse_pts,f1,f1_bothdrop,seconds\n";
  char line[256];
  for (const SweepRow& r : report.rows) {
    std::snprintf(line, sizeof(line), "%s,%.2f,%.6f,%.6f,%.6f,%.6f,%.3f\n",
                  policy_name(r.policy), r.rate, r.mse_img, r.mse_pts, r.f1,
                  r.f1_bothdrop, r.seconds);
    f << line;
  }
}

void write_report_json(const SweepReport& report,
                       const std::map<std::string, std::string>& config_echo,
                       const std::string& path) {
  nlohmann::json j;
  j["config"] = config_echo;
  j["rows"] = nlohmann::json::array();
  for (const SweepRow& r : report.rows)
    j["rows"].push_back({{"policy", policy_name(r.policy)},
                         {"drop_rate", r.rate},
                         {"mse_img", r.mse_img},
                         {"mse_pts", r.mse_pts},
                         {"f1", r.f1},
                         {"f1_bothdrop", r.f1_bothdrop},
                         {"seconds", r.seconds}});
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("write_report_json: cannot open " + path);
  f << j.dump(2) << "\n";
}

void write_pgm(const Array& map, const std::string& path) {
  if (map.shape.size() != 3 || map.shape[0] != 1)
    throw std::runtime_error("write_pgm: map must be (1,H,W)");
  const int h = map.shape[1], w = map.shape[2];
  double mx = 0.0;
  for (double v : map.data) mx = std::max(mx, v);

  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_pgm: cannot open " + path);
  f << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(w));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double v = mx > 0.0 ? map.at(0, y, x) / mx : 0.0;
      row[static_cast<size_t>(x)] =
          static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
    f.write(reinterpret_cast<const char*>(row.data()), w);
  }
  f.close();

  nlohmann::json meta;
  meta["max"] = mx;
  std::ofstream mf(path + ".json", std::ios::trunc);
  mf << meta.dump() << "\n";
}

// ----------------------------------------------------------------- spearman

namespace {

std::vector<double> ranks_of(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double mean_rank = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[idx[k]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::vector<double> a, std::vector<double> b) {
  if (a.size() != b.size() || a.size() < 2)
    throw std::runtime_error("spearman: need two equally sized samples");
  const std::vector<double> ra = ranks_of(a), rb = ranks_of(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double da = ra[i] - ma, db = rb[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0)
    throw std::runtime_error("spearman: constant sample has no rank ordering");
  return cov / std::sqrt(va * vb);
}

double calibration_spearman(const EvalSetup& setup,
                            const std::vector<streams::Scene>& val,
                            const ad::Bindings& params, int frame_stride) {
  if (frame_stride < 1) throw std::runtime_error("calibration_spearman: bad stride");
  std::vector<double> sigma2, residual2;

  ad::Graph gp[2];
  const ad::NodeId fhat[2] = {
      hfp::build_predict(gp[0], setup.hfp_img, streams::Modality::Img, false),
      hfp::build_predict(gp[1], setup.hfp_pts, streams::Modality::Pts, false)};

  for (const streams::Scene& scene : val) {
    streams::FrameCache cache(setup.stream, scene);
    for (int t0 = 1; t0 < scene.T; t0 += frame_stride) {
      for (streams::Modality m : {streams::Modality::Img, streams::Modality::Pts}) {
        const int mi = static_cast<int>(m);
        const hfp::HfpConfig& hc = mi == 0 ? setup.hfp_img : setup.hfp_pts;
        std::vector<const streams::FeatureMap*> window;
        for (int i = 0; i < hc.tau; ++i)
          window.push_back(&cache.feature(std::max(0, t0 - hc.tau + i), m));
        ad::Bindings bind = filter_prefix(params, {"hfp."});
        hfp::bind_window(hc, m, window, bind);
        const Array fh = ad::evaluate(gp[mi], bind).value(fhat[mi]);
        const Array s2 = ucf::estimate_variance(setup.ucf, m, params, fh);
        const Array& gt = cache.feature(t0, m).data;

        const int64_t hw = static_cast<int64_t>(hc.h) * hc.w;
        for (int64_t i = 0; i < hw; ++i) {
          double acc = 0.0;
          for (int d = 0; d < hc.d; ++d) {
            const double r = fh[d * hw + i] - gt[d * hw + i];
            acc += r * r;
          }
          sigma2.push_back(s2[i]);
          residual2.push_back(acc);
        }
      }
    }
  }
  return spearman(std::move(sigma2), std::move(residual2));
}

}  // namespace modalpatch::eval
