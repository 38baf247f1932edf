#include "modalpatch/ucf.hpp"

#include <cmath>
#include <stdexcept>

#include "modalpatch/rng.hpp"

namespace modalpatch::ucf {

namespace {

constexpr uint64_t kInitTag = 0x55434631ULL;
constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)

double xavier_bound(int fan_in, int fan_out) {
  return std::sqrt(6.0 / (fan_in + fan_out));
}

void fill_uniform(Array& a, Rng& rng, double bound) {
  for (double& v : a.data) v = rng.uniform(-bound, bound);
}

}  // namespace

ad::Bindings init_params(const UcfConfig& cfg, streams::Modality m, uint64_t seed) {
  if (cfg.d < 2) throw std::runtime_error("ucf::init_params: d must be >= 2");
  const std::string p = std::string("ucf.") + streams::modality_name(m) + ".";
  const int dh = cfg.d / 2;
  Rng rng(mix_seed({kInitTag, seed, static_cast<uint64_t>(m)}));

  ad::Bindings params;
  params[p + "var.l1.weight"] = Array({dh, cfg.d});
  fill_uniform(params[p + "var.l1.weight"], rng, xavier_bound(cfg.d, dh));
  params[p + "var.l1.bias"] = Array({dh});
  params[p + "var.l2.weight"] = Array({1, dh});
  fill_uniform(params[p + "var.l2.weight"], rng, xavier_bound(dh, 1));
  // prior bias: start sigma^2 = exp(-4) ~ 0.018, the scale of typical
  // prediction residuals, so the likelihood term starts near its basin
  // instead of swamping the first epochs with a sigma^2 = 1 transient
  params[p + "var.l2.bias"] = Array({1});
  params[p + "var.l2.bias"].data[0] = -4.0;

  const std::string fp = p + "fuse.";
  params[fp + "offset.weight"] = Array({2 * cfg.k, cfg.d});
  fill_uniform(params[fp + "offset.weight"], rng, xavier_bound(cfg.d, 2 * cfg.k));
  params[fp + "offset.bias"] = Array({2 * cfg.k});
  params[fp + "attn.weight"] = Array({cfg.k, cfg.d});
  fill_uniform(params[fp + "attn.weight"], rng, xavier_bound(cfg.d, cfg.k));
  params[fp + "attn.bias"] = Array({cfg.k});
  params[fp + "value.weight"] = Array({cfg.d, cfg.d});
  fill_uniform(params[fp + "value.weight"], rng, xavier_bound(cfg.d, cfg.d));
  params[fp + "value.bias"] = Array({cfg.d});
  params[fp + "out.weight"] = Array({cfg.d, cfg.d});
  // near-zero final projection: fusion starts as a passthrough of the query
  // feature and only adds cross-modal content where it helps
  fill_uniform(params[fp + "out.weight"], rng, 1e-3 * xavier_bound(cfg.d, cfg.d));
  params[fp + "out.bias"] = Array({cfg.d});
  return params;
}

ad::NodeId build_variance(ad::Graph& g, ad::NodeId fhat, streams::Modality m,
                          int d, bool trainable) {
  if (d < 2) throw std::runtime_error("build_variance: d must be >= 2");
  const std::string p = std::string("ucf.") + streams::modality_name(m) + ".var.";
  const int dh = d / 2;
  const ad::NodeId w1 = g.input(p + "l1.weight", {dh, d}, trainable);
  const ad::NodeId b1 = g.input(p + "l1.bias", {dh}, trainable);
  const ad::NodeId w2 = g.input(p + "l2.weight", {1, dh}, trainable);
  const ad::NodeId b2 = g.input(p + "l2.bias", {1}, trainable);
  const ad::NodeId hidden = g.relu(g.conv1x1(fhat, w1, b1));
  const ad::NodeId logvar = g.conv1x1(hidden, w2, b2);
  return g.exp(g.clamp(logvar, kLogVarLo, kLogVarHi));
}

ad::NodeId build_uncert_loss(ad::Graph& g, ad::NodeId fhat, ad::NodeId target,
                             ad::NodeId sigma2) {
  const ad::NodeId r = g.sub(fhat, target);
  const ad::NodeId sq = g.sum_channels(g.mul(r, r));           // (1,H,W)
  const ad::NodeId per_loc = g.add(g.div(sq, sigma2), g.log(sigma2));
  const ad::NodeId mean = g.mean(per_loc);
  return g.scale(g.add(mean, g.constant(Array::from({1}, {kLog2Pi}))), 0.5);
}

ad::NodeId build_fuse(ad::Graph& g, ad::NodeId fhat_q, ad::NodeId fhat_kv,
                      ad::NodeId u_kv, streams::Modality query_m,
                      const UcfConfig& cfg, bool trainable,
                      bool uncertainty_scaling) {
  const std::string prefix =
      std::string("ucf.") + streams::modality_name(query_m) + ".fuse";
  ad::NodeId smap = -1;
  if (uncertainty_scaling) smap = g.softmax_spatial(u_kv);
  const ad::NodeId attn =
      hfp::deform_attn_layer(g, fhat_q, fhat_kv, prefix, cfg.d, cfg.k, trainable, smap);
  return g.add(fhat_q, attn);
}

Array estimate_variance(const UcfConfig& cfg, streams::Modality m,
                        const ad::Bindings& params, const Array& fhat) {
  if (fhat.shape != std::vector<int>{cfg.d, cfg.h, cfg.w})
    throw std::runtime_error("estimate_variance: feature shape mismatch");
  ad::Graph g;
  const ad::NodeId in = g.input("fhat", {cfg.d, cfg.h, cfg.w});
  const ad::NodeId sigma2 = build_variance(g, in, m, cfg.d, /*trainable=*/false);
  g.mark_output("sigma2", sigma2);
  ad::Bindings bind = params;
  bind["fhat"] = fhat;
  return ad::evaluate(g, bind).value(sigma2);
}

double uncert_loss(const Array& fhat, const Array& target, const Array& sigma2) {
  if (!same_shape(fhat, target)) throw std::runtime_error("uncert_loss: shape mismatch");
  if (fhat.shape.size() != 3 || sigma2.shape.size() != 3 || sigma2.shape[0] != 1 ||
      sigma2.shape[1] != fhat.shape[1] || sigma2.shape[2] != fhat.shape[2])
    throw std::runtime_error("uncert_loss: sigma2 must be (1,H,W) matching features");
  const int D = fhat.shape[0];
  const int64_t hw = static_cast<int64_t>(fhat.shape[1]) * fhat.shape[2];
  double acc = 0.0;
  for (int64_t i = 0; i < hw; ++i) {
    const double s2 = sigma2[i];
    if (!(s2 > 0.0)) throw std::runtime_error("uncert_loss: non-positive sigma2");
    double sq = 0.0;
    for (int d = 0; d < D; ++d) {
      const double r = fhat[d * hw + i] - target[d * hw + i];
      sq += r * r;
    }
    acc += 0.5 * (sq / s2 + std::log(s2) + kLog2Pi);
  }
  return acc / static_cast<double>(hw);
}

Array uncertainty_map(const Array& sigma2) {
  Array u = sigma2;
  for (double& v : u.data) {
    if (!(v > 0.0)) throw std::runtime_error("uncertainty_map: non-positive sigma2");
    v = std::sqrt(v);
  }
  return u;
}

streams::FeatureMap fuse(const UcfConfig& cfg, const streams::FeatureMap& fhat_q,
                         const streams::FeatureMap& fhat_kv, const Array& u_kv,
                         const ad::Bindings& params, bool uncertainty_scaling) {
  ad::Graph g;
  const ad::NodeId q = g.input("fhat_q", {cfg.d, cfg.h, cfg.w});
  const ad::NodeId kv = g.input("fhat_kv", {cfg.d, cfg.h, cfg.w});
  const ad::NodeId u = g.input("u_kv", {1, cfg.h, cfg.w});
  const ad::NodeId f_enh = build_fuse(g, q, kv, u, fhat_q.modality, cfg,
                                      /*trainable=*/false, uncertainty_scaling);
  g.mark_output("f_enh", f_enh);
  ad::Bindings bind = params;
  bind["fhat_q"] = fhat_q.data;
  bind["fhat_kv"] = fhat_kv.data;
  bind["u_kv"] = u_kv;
  streams::FeatureMap out;
  out.modality = fhat_q.modality;
  out.time_index = fhat_q.time_index;
  out.source = streams::Source::Fused;
  out.data = ad::evaluate(g, bind).value(f_enh);
  return out;
}

double fuse_loss(const Array& f_enh_img, const Array& f_enh_pts,
                 const Array& f_img, const Array& f_pts) {
  return hfp::tempred_loss(f_enh_img, f_img) + hfp::tempred_loss(f_enh_pts, f_pts);
}

}  // namespace modalpatch::ucf
