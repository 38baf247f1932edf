#include "modalpatch/detector.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "modalpatch/rng.hpp"

namespace modalpatch::detector {

namespace {

constexpr uint64_t kInitTag = 0x44455431ULL;

double xavier_bound(int fan_in, int fan_out) {
  return std::sqrt(6.0 / (fan_in + fan_out));
}

void fill_uniform(Array& a, Rng& rng, double bound) {
  for (double& v : a.data) v = rng.uniform(-bound, bound);
}

}  // namespace

ad::Bindings init_params(const DetectorConfig& cfg, uint64_t seed) {
  const int din = cfg.d_img + cfg.d_pts;
  Rng rng(mix_seed({kInitTag, seed}));
  ad::Bindings p;
  p["det.proj.weight"] = Array({cfg.d_h, din});
  fill_uniform(p["det.proj.weight"], rng, xavier_bound(din, cfg.d_h));
  p["det.proj.bias"] = Array({cfg.d_h});
  for (const char* name : {"det.conv1.", "det.conv2."}) {
    p[std::string(name) + "weight"] = Array({cfg.d_h, cfg.d_h, 3, 3});
    fill_uniform(p[std::string(name) + "weight"], rng,
                 xavier_bound(9 * cfg.d_h, 9 * cfg.d_h));
    p[std::string(name) + "bias"] = Array({cfg.d_h});
  }
  p["det.cls.weight"] = Array({1, cfg.d_h});
  fill_uniform(p["det.cls.weight"], rng, xavier_bound(cfg.d_h, 1));
  // rare-positive prior (~1% occupied cells) so the classification head
  // starts calibrated instead of spending steps pushing the bias down
  p["det.cls.bias"] = Array({1}, std::log(0.01 / 0.99));
  p["det.reg.weight"] = Array({2, cfg.d_h});
  fill_uniform(p["det.reg.weight"], rng, xavier_bound(cfg.d_h, 2));
  p["det.reg.bias"] = Array({2});
  return p;
}

DetectNodes build_detect(ad::Graph& g, ad::NodeId f_img, ad::NodeId f_pts,
                         const DetectorConfig& cfg, bool trainable) {
  const int din = cfg.d_img + cfg.d_pts;
  const auto param = [&](const std::string& name, std::vector<int> shape) {
    return g.input("det." + name, std::move(shape), trainable);
  };
  const ad::NodeId x = g.concat({f_img, f_pts});
  const ad::NodeId h0 = g.relu(g.conv1x1(x, param("proj.weight", {cfg.d_h, din}),
                                         param("proj.bias", {cfg.d_h})));
  const ad::NodeId h1 =
      g.relu(g.conv3x3(h0, param("conv1.weight", {cfg.d_h, cfg.d_h, 3, 3}),
                       param("conv1.bias", {cfg.d_h})));
  const ad::NodeId h2 =
      g.relu(g.conv3x3(h1, param("conv2.weight", {cfg.d_h, cfg.d_h, 3, 3}),
                       param("conv2.bias", {cfg.d_h})));
  DetectNodes out;
  out.logits = g.conv1x1(h2, param("cls.weight", {1, cfg.d_h}),
                         param("cls.bias", {1}));
  out.offsets = g.conv1x1(h2, param("reg.weight", {2, cfg.d_h}),
                          param("reg.bias", {2}));
  return out;
}

ad::NodeId build_det_loss(ad::Graph& g, const DetectNodes& det,
                          const DetectorConfig& cfg) {
  const ad::NodeId occ = g.input("target.occupancy", {1, cfg.h, cfg.w});
  const ad::NodeId offs = g.input("target.offsets", {2, cfg.h, cfg.w});
  const ad::NodeId n_occ = g.input("target.n_occ", {1});

  const ad::NodeId bce = g.bce_logits(det.logits, occ);
  // squared offset error, masked to occupied cells, averaged per cell
  const ad::NodeId mask2 = g.concat({occ, occ});
  const ad::NodeId r = g.mul(g.sub(det.offsets, offs), mask2);
  const ad::NodeId reg = g.div(g.sum(g.mul(r, r)), n_occ);
  return g.add(bce, reg);
}

void bind_target(const streams::DetectionTarget& target, ad::Bindings& into) {
  into["target.occupancy"] = target.occupancy;
  into["target.offsets"] = target.offsets;
  double n = 0.0;
  for (double v : target.occupancy.data) n += v;
  into["target.n_occ"] = Array::from({1}, {std::max(1.0, n)});
}

Detection detect(const DetectorConfig& cfg, const ad::Bindings& params,
                 const Array& f_img, const Array& f_pts) {
  if (f_img.shape != std::vector<int>{cfg.d_img, cfg.h, cfg.w} ||
      f_pts.shape != std::vector<int>{cfg.d_pts, cfg.h, cfg.w})
    throw std::runtime_error("detect: feature shape mismatch");
  ad::Graph g;
  const ad::NodeId a = g.input("f_img", {cfg.d_img, cfg.h, cfg.w});
  const ad::NodeId b = g.input("f_pts", {cfg.d_pts, cfg.h, cfg.w});
  const DetectNodes nodes = build_detect(g, a, b, cfg, /*trainable=*/false);
  ad::Bindings bind = params;
  bind["f_img"] = f_img;
  bind["f_pts"] = f_pts;
  const ad::Evaluation ev = ad::evaluate(g, bind);
  return Detection{ev.value(nodes.logits), ev.value(nodes.offsets)};
}

double det_loss(const Detection& pred, const streams::DetectionTarget& target) {
  if (!same_shape(pred.logits, target.occupancy) ||
      !same_shape(pred.offsets, target.offsets))
    throw std::runtime_error("det_loss: shape mismatch");
  const int64_t n = pred.logits.numel();
  double bce = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    // stable -[t*log s(z) + (1-t)*log(1-s(z))] = max(z,0) - z*t + log1p(e^-|z|)
    const double z = pred.logits[i], t = target.occupancy[i];
    bce += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  bce /= static_cast<double>(n);

  double reg = 0.0, occ_count = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    if (target.occupancy[i] == 0.0) continue;
    occ_count += 1.0;
    const double dx = pred.offsets[i] - target.offsets[i];
    const double dy = pred.offsets[n + i] - target.offsets[n + i];
    reg += dx * dx + dy * dy;
  }
  if (occ_count > 0.0) reg /= occ_count;
  return bce + reg;
}

double det_f1(const Detection& pred, const streams::DetectionTarget& target,
              double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw std::runtime_error("det_f1: threshold must lie in (0,1)");
  // sigmoid(z) > thr  <=>  z > logit(thr)
  const double zthr = std::log(threshold / (1.0 - threshold));
  int64_t tp = 0, fp = 0, fn = 0;
  for (int64_t i = 0; i < pred.logits.numel(); ++i) {
    const bool hit = pred.logits[i] > zthr;
    const bool occ = target.occupancy[i] != 0.0;
    tp += hit && occ;
    fp += hit && !occ;
    fn += !hit && occ;
  }
  if (tp + fp + fn == 0) return 1.0;  // nothing predicted, nothing expected
  return 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
}

}  // namespace modalpatch::detector
