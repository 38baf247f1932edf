#include "modalpatch/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "modalpatch/rng.hpp"

namespace modalpatch::trainer {

namespace {

constexpr uint64_t kTrainSceneTag = 0x54524e53ULL;
constexpr uint64_t kValSceneTag = 0x56414c53ULL;
constexpr uint64_t kStage0Tag = 0x53544730ULL;
constexpr uint64_t kStage1Tag = 0x53544731ULL;
constexpr uint64_t kStage2Tag = 0x53544732ULL;

void accumulate(std::map<std::string, Array>& acc,
                const std::map<std::string, Array>& grads) {
  for (const auto& [name, g] : grads) {
    auto it = acc.find(name);
    if (it == acc.end()) {
      acc[name] = g;
    } else {
      for (size_t i = 0; i < g.data.size(); ++i) it->second.data[i] += g.data[i];
    }
  }
}

void scale_all(std::map<std::string, Array>& grads, double s) {
  for (auto& [name, g] : grads)
    for (double& v : g.data) v *= s;
}

// History window ending just before t0: frames [t0-tau, t0-1], with the
// oldest existing frame repeated while t0 < tau (cold-start padding).
std::vector<const streams::FeatureMap*> window_before(streams::FrameCache& cache, int t0,
                                                      int tau,
                                                      streams::Modality m) {
  std::vector<const streams::FeatureMap*> w;
  w.reserve(static_cast<size_t>(tau));
  for (int i = 0; i < tau; ++i)
    w.push_back(&cache.feature(std::max(0, t0 - tau + i), m));
  return w;
}

// Frames used for per-epoch validation probes.
std::vector<int> probe_frames(int T) {
  return {T / 8, T / 2, (7 * T) / 8};
}

void check_finite(double loss, const char* stage, int epoch, int step) {
  if (std::isfinite(loss)) return;
  throw std::runtime_error(std::string(stage) + ": non-finite loss at epoch " +
                           std::to_string(epoch) + ", batch " + std::to_string(step));
}

}  // namespace

// ---------------------------------------------------------------- optimizer

AdamW::AdamW(std::vector<std::string> names, const TrainConfig& cfg)
    : names_(std::move(names)),
      lr_(cfg.lr),
      wd_(cfg.weight_decay),
      clip_(cfg.clip_norm) {
  if (lr_ <= 0.0) throw std::runtime_error("AdamW: learning rate must be positive");
}

void AdamW::step(ad::Bindings& params, const std::map<std::string, Array>& grads) {
  double norm2 = 0.0;
  for (const std::string& name : names_) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    for (double v : it->second.data) norm2 += v * v;
  }
  const double norm = std::sqrt(norm2);
  const double gscale = (clip_ > 0.0 && norm > clip_) ? clip_ / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));

  for (const std::string& name : names_) {
    auto pit = params.find(name);
    if (pit == params.end())
      throw std::runtime_error("AdamW: missing parameter " + name);
    Array& p = pit->second;
    Array& m = m_.try_emplace(name, Array(p.shape)).first->second;
    Array& v = v_.try_emplace(name, Array(p.shape)).first->second;
    const auto git = grads.find(name);
    for (size_t i = 0; i < p.data.size(); ++i) {
      const double g = git == grads.end() ? 0.0 : git->second.data[i] * gscale;
      m.data[i] = beta1_ * m.data[i] + (1.0 - beta1_) * g;
      v.data[i] = beta2_ * v.data[i] + (1.0 - beta2_) * g * g;
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      p.data[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p.data[i]);
    }
  }
}

// ------------------------------------------------------------------- corpus

Corpus build_corpus(const streams::StreamConfig& cfg, int n_train, int n_val,
                    int frames, uint64_t seed) {
  Corpus c;
  c.train.reserve(static_cast<size_t>(n_train));
  c.val.reserve(static_cast<size_t>(n_val));
  for (int i = 0; i < n_train; ++i)
    c.train.push_back(streams::gen_scene(
        cfg, mix_seed({kTrainSceneTag, seed, static_cast<uint64_t>(i)}),
        cfg.n_objects, frames));
  for (int i = 0; i < n_val; ++i)
    c.val.push_back(streams::gen_scene(
        cfg, mix_seed({kValSceneTag, seed, static_cast<uint64_t>(i)}),
        cfg.n_objects, frames));
  return c;
}

// ------------------------------------------------------------------ stage 0

StageResult pretrain_detector(const streams::StreamConfig& scfg,
                              const detector::DetectorConfig& dcfg,
                              const TrainConfig& tcfg, const Corpus& corpus) {
  if (corpus.train.empty() || corpus.val.empty())
    throw std::runtime_error("pretrain_detector: empty corpus");
  const int T = corpus.train.front().T;

  ad::Graph g;
  const ad::NodeId f_img = g.input("f_img", {dcfg.d_img, dcfg.h, dcfg.w});
  const ad::NodeId f_pts = g.input("f_pts", {dcfg.d_pts, dcfg.h, dcfg.w});
  const detector::DetectNodes det = detector::build_detect(g, f_img, f_pts, dcfg,
                                                           /*trainable=*/true);
  const ad::NodeId loss = detector::build_det_loss(g, det, dcfg);
  g.mark_output("loss", loss);

  StageResult res;
  res.params = detector::init_params(dcfg, tcfg.seed);
  std::vector<std::string> names;
  for (const auto& [name, a] : res.params) names.push_back(name);
  // the configured rate is tuned for the prediction/fusion stages; the
  // detector warm-up is plain supervised learning and takes a faster one
  TrainConfig t0cfg = tcfg;
  t0cfg.lr = 50.0 * tcfg.lr;
  AdamW opt(names, t0cfg);

  Rng rng(mix_seed({kStage0Tag, tcfg.seed}));
  const int n = static_cast<int>(corpus.train.size());
  double val_f1 = 0.0;

  for (int epoch = 0; epoch < tcfg.pretrain_epochs; ++epoch) {
    double epoch_loss = 0.0;
    int steps = 0;
    for (int b0 = 0; b0 < n; b0 += tcfg.batch_size) {
      const int b1 = std::min(n, b0 + tcfg.batch_size);
      std::vector<streams::FrameCache> caches;
      caches.reserve(static_cast<size_t>(b1 - b0));
      for (int s = b0; s < b1; ++s) caches.emplace_back(scfg, corpus.train[static_cast<size_t>(s)]);

      for (int pass = 0; pass < tcfg.samples_per_stream; ++pass) {
        std::map<std::string, Array> grads;
        double batch_loss = 0.0;
        for (auto& cache : caches) {
          const int t0 = rng.uniform_int(T);
          ad::Bindings bind = res.params;
          bind["f_img"] = cache.feature(t0, streams::Modality::Img).data;
          bind["f_pts"] = cache.feature(t0, streams::Modality::Pts).data;
          detector::bind_target(cache.target(t0), bind);
          const ad::Evaluation ev = ad::evaluate(g, bind);
          batch_loss += ev.value(loss)[0];
          accumulate(grads, ad::backward(g, ev, loss));
        }
        const double inv = 1.0 / static_cast<double>(caches.size());
        batch_loss *= inv;
        scale_all(grads, inv);
        check_finite(batch_loss, "stage 0", epoch, steps);
        opt.step(res.params, grads);
        epoch_loss += batch_loss;
        ++steps;
      }
    }
    res.epoch_losses.push_back(epoch_loss / std::max(1, steps));

    // validation probe: mean F1 over a fixed frame subset of the val scenes
    double f1_sum = 0.0;
    int f1_n = 0;
    for (const auto& scene : corpus.val) {
      streams::FrameCache cache(scfg, scene);
      for (int t : probe_frames(scene.T)) {
        const detector::Detection d =
            detector::detect(dcfg, res.params,
                             cache.feature(t, streams::Modality::Img).data,
                             cache.feature(t, streams::Modality::Pts).data);
        f1_sum += detector::det_f1(d, cache.target(t));
        ++f1_n;
      }
    }
    val_f1 = f1_sum / f1_n;
    if (val_f1 >= tcfg.pretrain_target_f1) break;  // good enough, freeze here
  }

  if (val_f1 < tcfg.pretrain_abort_f1)
    throw std::runtime_error(
        "pretrain_detector: validation F1 " + std::to_string(val_f1) +
        " below " + std::to_string(tcfg.pretrain_abort_f1) +
        " (scene generator or detector misconfigured)");
  res.val_metrics["val_f1"] = val_f1;
  return res;
}

// ------------------------------------------------------------------ stage 1

StageResult train_stage1(const streams::StreamConfig& scfg,
                         const hfp::HfpConfig& icfg, const hfp::HfpConfig& pcfg,
                         const detector::DetectorConfig& dcfg,
                         const TrainConfig& tcfg, const Corpus& corpus,
                         const ad::Bindings& det_params) {
  if (corpus.train.empty()) throw std::runtime_error("train_stage1: empty corpus");
  const int T = corpus.train.front().T;

  // Two graph variants: the detector sees the predicted feature for exactly
  // one modality (ground truth for the other); prediction MSE covers both.
  ad::Graph graphs[2];
  ad::NodeId losses[2];
  for (int comp = 0; comp < 2; ++comp) {
    ad::Graph& g = graphs[comp];
    const ad::NodeId fhat_img = hfp::build_predict(g, icfg, streams::Modality::Img, true);
    const ad::NodeId fhat_pts = hfp::build_predict(g, pcfg, streams::Modality::Pts, true);
    const ad::NodeId t_img = g.input("target.img", {icfg.d, icfg.h, icfg.w});
    const ad::NodeId t_pts = g.input("target.pts", {pcfg.d, pcfg.h, pcfg.w});
    const ad::NodeId l_pred = g.add(g.mse(fhat_img, t_img), g.mse(fhat_pts, t_pts));
    const detector::DetectNodes det = detector::build_detect(
        g, comp == 0 ? fhat_img : t_img, comp == 1 ? fhat_pts : t_pts, dcfg,
        /*trainable=*/false);
    losses[comp] = g.add(l_pred, detector::build_det_loss(g, det, dcfg));
    g.mark_output("loss", losses[comp]);
  }

  StageResult res;
  res.params = det_params;
  const ad::Bindings img_init = hfp::init_params(icfg, streams::Modality::Img, tcfg.seed);
  const ad::Bindings pts_init = hfp::init_params(pcfg, streams::Modality::Pts, tcfg.seed);
  res.params.insert(img_init.begin(), img_init.end());
  res.params.insert(pts_init.begin(), pts_init.end());

  std::vector<std::string> names;
  for (const auto& [name, a] : res.params)
    if (name.rfind("hfp.", 0) == 0) names.push_back(name);
  AdamW opt(names, tcfg);

  Rng rng(mix_seed({kStage1Tag, tcfg.seed}));
  const int n = static_cast<int>(corpus.train.size());

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    int steps = 0;
    for (int b0 = 0; b0 < n; b0 += tcfg.batch_size) {
      const int b1 = std::min(n, b0 + tcfg.batch_size);
      std::vector<streams::FrameCache> caches;
      caches.reserve(static_cast<size_t>(b1 - b0));
      for (int s = b0; s < b1; ++s) caches.emplace_back(scfg, corpus.train[static_cast<size_t>(s)]);

      for (int pass = 0; pass < tcfg.samples_per_stream; ++pass) {
        std::map<std::string, Array> grads;
        double batch_loss = 0.0;
        for (auto& cache : caches) {
          const int t0 = 1 + rng.uniform_int(T - 1);  // needs >= 1 history frame
          const int comp = rng.uniform_int(2);
          ad::Bindings bind = res.params;
          hfp::bind_window(icfg, streams::Modality::Img,
                           window_before(cache, t0, icfg.tau, streams::Modality::Img), bind);
          hfp::bind_window(pcfg, streams::Modality::Pts,
                           window_before(cache, t0, pcfg.tau, streams::Modality::Pts), bind);
          bind["target.img"] = cache.feature(t0, streams::Modality::Img).data;
          bind["target.pts"] = cache.feature(t0, streams::Modality::Pts).data;
          detector::bind_target(cache.target(t0), bind);
          const ad::Evaluation ev = ad::evaluate(graphs[comp], bind);
          batch_loss += ev.value(losses[comp])[0];
          accumulate(grads, ad::backward(graphs[comp], ev, losses[comp]));
        }
        const double inv = 1.0 / static_cast<double>(caches.size());
        batch_loss *= inv;
        scale_all(grads, inv);
        check_finite(batch_loss, "stage 1", epoch, steps);
        opt.step(res.params, grads);
        epoch_loss += batch_loss;
        ++steps;
      }
    }
    res.epoch_losses.push_back(epoch_loss / std::max(1, steps));
  }

  // validation probe: prediction MSE on held-out frames
  double mse_img = 0.0, mse_pts = 0.0;
  int probes = 0;
  for (const auto& scene : corpus.val) {
    streams::FrameCache cache(scfg, scene);
    for (int t0 : probe_frames(scene.T)) {
      if (t0 < 1) continue;
      const auto fi = hfp::predict(icfg, streams::Modality::Img, res.params,
                                   window_before(cache, t0, icfg.tau, streams::Modality::Img));
      const auto fp = hfp::predict(pcfg, streams::Modality::Pts, res.params,
                                   window_before(cache, t0, pcfg.tau, streams::Modality::Pts));
      mse_img += hfp::tempred_loss(fi.data, cache.feature(t0, streams::Modality::Img).data);
      mse_pts += hfp::tempred_loss(fp.data, cache.feature(t0, streams::Modality::Pts).data);
      ++probes;
    }
  }
  res.val_metrics["val_mse_img"] = mse_img / std::max(1, probes);
  res.val_metrics["val_mse_pts"] = mse_pts / std::max(1, probes);
  return res;
}

// ------------------------------------------------------------------ stage 2

StageResult train_stage2(const streams::StreamConfig& scfg,
                         const hfp::HfpConfig& icfg, const hfp::HfpConfig& pcfg,
                         const ucf::UcfConfig& ucfg,
                         const detector::DetectorConfig& dcfg,
                         const TrainConfig& tcfg, const Corpus& corpus,
                         const ad::Bindings& stage1_params) {
  if (corpus.train.empty()) throw std::runtime_error("train_stage2: empty corpus");
  const int T = corpus.train.front().T;

  // Predictor graphs used to produce the (frozen) compensated features; no
  // backward pass ever runs on these, and the loss graph below has no
  // "hfp.*" inputs at all, so the freeze is structural.
  ad::Graph gp_img, gp_pts;
  const ad::NodeId fhat_img_node = hfp::build_predict(gp_img, icfg, streams::Modality::Img, false);
  const ad::NodeId fhat_pts_node = hfp::build_predict(gp_pts, pcfg, streams::Modality::Pts, false);
  gp_img.mark_output("fhat", fhat_img_node);
  gp_pts.mark_output("fhat", fhat_pts_node);

  ad::Graph g;
  const ad::NodeId fhat_img = g.input("fhat.img", {icfg.d, icfg.h, icfg.w});
  const ad::NodeId fhat_pts = g.input("fhat.pts", {pcfg.d, pcfg.h, pcfg.w});
  const ad::NodeId t_img = g.input("target.img", {icfg.d, icfg.h, icfg.w});
  const ad::NodeId t_pts = g.input("target.pts", {pcfg.d, pcfg.h, pcfg.w});
  const ad::NodeId s2_img = ucf::build_variance(g, fhat_img, streams::Modality::Img, ucfg.d, true);
  const ad::NodeId s2_pts = ucf::build_variance(g, fhat_pts, streams::Modality::Pts, ucfg.d, true);
  const ad::NodeId l_unc = g.add(ucf::build_uncert_loss(g, fhat_img, t_img, s2_img),
                                 ucf::build_uncert_loss(g, fhat_pts, t_pts, s2_pts));
  const ad::NodeId f_enh_img = ucf::build_fuse(g, fhat_img, fhat_pts, g.sqrt(s2_pts),
                                               streams::Modality::Img, ucfg, true);
  const ad::NodeId f_enh_pts = ucf::build_fuse(g, fhat_pts, fhat_img, g.sqrt(s2_img),
                                               streams::Modality::Pts, ucfg, true);
  const ad::NodeId l_fuse = g.add(g.mse(f_enh_img, t_img), g.mse(f_enh_pts, t_pts));
  const detector::DetectNodes det = detector::build_detect(g, f_enh_img, f_enh_pts, dcfg, false);
  const ad::NodeId loss = g.add(g.add(l_unc, l_fuse), detector::build_det_loss(g, det, dcfg));
  g.mark_output("loss", loss);

  StageResult res;
  res.params = stage1_params;
  const ad::Bindings img_init = ucf::init_params(ucfg, streams::Modality::Img, tcfg.seed);
  const ad::Bindings pts_init = ucf::init_params(ucfg, streams::Modality::Pts, tcfg.seed);
  res.params.insert(img_init.begin(), img_init.end());
  res.params.insert(pts_init.begin(), pts_init.end());

  std::vector<std::string> names;
  for (const auto& [name, a] : res.params)
    if (name.rfind("ucf.", 0) == 0) names.push_back(name);
  AdamW opt(names, tcfg);

  Rng rng(mix_seed({kStage2Tag, tcfg.seed}));
  const int n = static_cast<int>(corpus.train.size());

  const auto predict_fhat = [&](ad::Graph& gp, ad::NodeId node, const hfp::HfpConfig& cfg,
                                streams::Modality m, streams::FrameCache& cache, int t0) {
    ad::Bindings bind = res.params;
    hfp::bind_window(cfg, m, window_before(cache, t0, cfg.tau, m), bind);
    return ad::evaluate(gp, bind).value(node);
  };

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    int steps = 0;
    for (int b0 = 0; b0 < n; b0 += tcfg.batch_size) {
      const int b1 = std::min(n, b0 + tcfg.batch_size);
      std::vector<streams::FrameCache> caches;
      caches.reserve(static_cast<size_t>(b1 - b0));
      for (int s = b0; s < b1; ++s) caches.emplace_back(scfg, corpus.train[static_cast<size_t>(s)]);

      for (int pass = 0; pass < tcfg.samples_per_stream; ++pass) {
        std::map<std::string, Array> grads;
        double batch_loss = 0.0;
        for (auto& cache : caches) {
          const int t0 = 1 + rng.uniform_int(T - 1);
          ad::Bindings bind = res.params;
          bind["fhat.img"] = predict_fhat(gp_img, fhat_img_node, icfg,
                                          streams::Modality::Img, cache, t0);
          bind["fhat.pts"] = predict_fhat(gp_pts, fhat_pts_node, pcfg,
                                          streams::Modality::Pts, cache, t0);
          bind["target.img"] = cache.feature(t0, streams::Modality::Img).data;
          bind["target.pts"] = cache.feature(t0, streams::Modality::Pts).data;
          detector::bind_target(cache.target(t0), bind);
          const ad::Evaluation ev = ad::evaluate(g, bind);
          batch_loss += ev.value(loss)[0];
          accumulate(grads, ad::backward(g, ev, loss));
        }
        const double inv = 1.0 / static_cast<double>(caches.size());
        batch_loss *= inv;
        scale_all(grads, inv);
        check_finite(batch_loss, "stage 2", epoch, steps);
        opt.step(res.params, grads);
        epoch_loss += batch_loss;
        ++steps;
      }
    }
    res.epoch_losses.push_back(epoch_loss / std::max(1, steps));
  }

  // validation probe: fused-feature MSE on held-out frames
  double mse_img = 0.0, mse_pts = 0.0;
  int probes = 0;
  for (const auto& scene : corpus.val) {
    streams::FrameCache cache(scfg, scene);
    for (int t0 : probe_frames(scene.T)) {
      if (t0 < 1) continue;
      streams::FeatureMap fi, fp;
      fi.modality = streams::Modality::Img;
      fp.modality = streams::Modality::Pts;
      fi.time_index = fp.time_index = t0;
      fi.source = fp.source = streams::Source::Compensated;
      fi.data = predict_fhat(gp_img, fhat_img_node, icfg, streams::Modality::Img, cache, t0);
      fp.data = predict_fhat(gp_pts, fhat_pts_node, pcfg, streams::Modality::Pts, cache, t0);
      const Array u_img = ucf::uncertainty_map(
          ucf::estimate_variance(ucfg, streams::Modality::Img, res.params, fi.data));
      const Array u_pts = ucf::uncertainty_map(
          ucf::estimate_variance(ucfg, streams::Modality::Pts, res.params, fp.data));
      const auto enh_img = ucf::fuse(ucfg, fi, fp, u_pts, res.params);
      const auto enh_pts = ucf::fuse(ucfg, fp, fi, u_img, res.params);
      mse_img += hfp::tempred_loss(enh_img.data, cache.feature(t0, streams::Modality::Img).data);
      mse_pts += hfp::tempred_loss(enh_pts.data, cache.feature(t0, streams::Modality::Pts).data);
      ++probes;
    }
  }
  res.val_metrics["val_mse_enh_img"] = mse_img / std::max(1, probes);
  res.val_metrics["val_mse_enh_pts"] = mse_pts / std::max(1, probes);
  return res;
}

// ----------------------------------------------------------------- manifest

void write_manifest(const std::string& path, const std::string& stage,
                    const std::map<std::string, std::string>& config_echo,
                    const StageResult& result, const std::string& checkpoint,
                    const std::map<std::string, std::string>& input_hashes) {
  nlohmann::json j;
  j["stage"] = stage;
  j["config"] = config_echo;
  j["epoch_losses"] = result.epoch_losses;
  j["val_metrics"] = result.val_metrics;
  j["checkpoint"] = checkpoint;
  j["inputs"] = input_hashes;
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("write_manifest: cannot open " + path);
  f << j.dump(2) << "\n";
}

}  // namespace modalpatch::trainer
