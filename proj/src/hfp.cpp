#include "modalpatch/hfp.hpp"

#include <cmath>
#include <stdexcept>

#include "modalpatch/rng.hpp"

namespace modalpatch::hfp {

namespace {

constexpr uint64_t kInitTag = 0x48465031ULL;

// Xavier-uniform bound for a (fan_out, fan_in) linear map.
double xavier_bound(int fan_in, int fan_out) {
  return std::sqrt(6.0 / (fan_in + fan_out));
}

void fill_uniform(Array& a, Rng& rng, double bound) {
  for (double& v : a.data) v = rng.uniform(-bound, bound);
}

// (2K,H,W) constant holding each position's own coordinates, repeated per
// sampling point: channel 2k is x, channel 2k+1 is y.
Array base_grid(int k, int h, int w) {
  Array g({2 * k, h, w});
  for (int i = 0; i < k; ++i)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        g.at(2 * i, y, x) = static_cast<double>(x);
        g.at(2 * i + 1, y, x) = static_cast<double>(y);
      }
  return g;
}

}  // namespace

ad::Bindings init_params(const HfpConfig& cfg, streams::Modality m, uint64_t seed) {
  if (cfg.d < 1 || cfg.tau < 1 || cfg.k < 1)
    throw std::runtime_error("hfp::init_params: d, tau, k must be >= 1");
  const std::string p = std::string("hfp.") + streams::modality_name(m) + ".";
  Rng rng(mix_seed({kInitTag, seed, static_cast<uint64_t>(m)}));

  ad::Bindings params;
  params[p + "query"] = Array({cfg.d, cfg.h, cfg.w});
  for (double& v : params[p + "query"].data) v = rng.normal(0.0, 0.02);

  params[p + "hist.weight"] = Array({cfg.d, cfg.tau * cfg.d});
  fill_uniform(params[p + "hist.weight"], rng, xavier_bound(cfg.tau * cfg.d, cfg.d));
  params[p + "hist.bias"] = Array({cfg.d});

  for (const char* layer : {"l1.", "l2."}) {
    const std::string lp = p + layer;
    params[lp + "offset.weight"] = Array({2 * cfg.k, cfg.d});
    fill_uniform(params[lp + "offset.weight"], rng, xavier_bound(cfg.d, 2 * cfg.k));
    params[lp + "offset.bias"] = Array({2 * cfg.k});
    params[lp + "attn.weight"] = Array({cfg.k, cfg.d});
    fill_uniform(params[lp + "attn.weight"], rng, xavier_bound(cfg.d, cfg.k));
    params[lp + "attn.bias"] = Array({cfg.k});
    params[lp + "value.weight"] = Array({cfg.d, cfg.d});
    fill_uniform(params[lp + "value.weight"], rng, xavier_bound(cfg.d, cfg.d));
    params[lp + "value.bias"] = Array({cfg.d});
    params[lp + "out.weight"] = Array({cfg.d, cfg.d});
    // the final projection starts near zero: the predictor then begins as an
    // exact copy of the newest history frame (a stable identity) and the
    // optimizer only grows dynamics that actually reduce the loss
    const double out_scale = std::string(layer) == "l2." ? 1e-3 : 1.0;
    fill_uniform(params[lp + "out.weight"], rng,
                 out_scale * xavier_bound(cfg.d, cfg.d));
    params[lp + "out.bias"] = Array({cfg.d});
  }
  return params;
}

ad::NodeId deform_attn_layer(ad::Graph& g, ad::NodeId query, ad::NodeId kv,
                             const std::string& prefix, int d, int k,
                             bool trainable, ad::NodeId smap) {
  const auto& qshape = g.node(query).shape;
  const int h = qshape[1], w = qshape[2];

  const auto param = [&](const std::string& name, std::vector<int> shape) {
    return g.input(prefix + "." + name, std::move(shape), trainable);
  };
  const ad::NodeId off_w = param("offset.weight", {2 * k, d});
  const ad::NodeId off_b = param("offset.bias", {2 * k});
  const ad::NodeId att_w = param("attn.weight", {k, d});
  const ad::NodeId att_b = param("attn.bias", {k});
  const ad::NodeId val_w = param("value.weight", {d, d});
  const ad::NodeId val_b = param("value.bias", {d});
  const ad::NodeId out_w = param("out.weight", {d, d});
  const ad::NodeId out_b = param("out.bias", {d});

  const ad::NodeId offsets = g.conv1x1(query, off_w, off_b);         // (2K,H,W)
  ad::NodeId weights = g.softmax(g.conv1x1(query, att_w, att_b));    // (K,H,W)
  const ad::NodeId values = g.conv1x1(kv, val_w, val_b);             // (D,H,W)
  const ad::NodeId coords = g.add(offsets, g.constant(base_grid(k, h, w)));
  const ad::NodeId sampled = g.bilinear(values, coords);             // (K*D,H,W)

  if (smap >= 0) {
    // down-weight each point by the uncertainty mass at its sample location
    const ad::NodeId s_at = g.bilinear(smap, coords);                // (K,H,W)
    weights = g.mul(weights, g.sub(g.constant(Array({k, h, w}, 1.0)), s_at));
  }

  const ad::NodeId agg = g.group_sum(g.group_scale(sampled, weights), k);
  return g.conv1x1(agg, out_w, out_b);
}

ad::NodeId build_predict(ad::Graph& g, const HfpConfig& cfg, streams::Modality m,
                         bool trainable) {
  const std::string mod = streams::modality_name(m);
  const std::string p = "hfp." + mod + ".";

  std::vector<ad::NodeId> hist;
  hist.reserve(static_cast<size_t>(cfg.tau));
  for (int i = 0; i < cfg.tau; ++i)
    hist.push_back(g.input(mod + ".hist." + std::to_string(i), {cfg.d, cfg.h, cfg.w}));

  const ad::NodeId hist_w = g.input(p + "hist.weight", {cfg.d, cfg.tau * cfg.d}, trainable);
  const ad::NodeId hist_b = g.input(p + "hist.bias", {cfg.d}, trainable);
  const ad::NodeId kv = g.conv1x1(g.concat(hist), hist_w, hist_b);

  const ad::NodeId query = g.input(p + "query", {cfg.d, cfg.h, cfg.w}, trainable);
  const ad::NodeId a1 = deform_attn_layer(g, query, kv, p + "l1", cfg.d, cfg.k, trainable);
  const ad::NodeId a2 = deform_attn_layer(g, a1, kv, p + "l2", cfg.d, cfg.k, trainable);

  return g.add(hist.back(), a2);  // newest frame + predicted delta
}

void bind_window(const HfpConfig& cfg, streams::Modality m,
                 const std::vector<const streams::FeatureMap*>& window,
                 ad::Bindings& into) {
  if (static_cast<int>(window.size()) != cfg.tau)
    throw std::runtime_error("hfp: window length must equal tau");
  const std::string mod = streams::modality_name(m);
  for (int i = 0; i < cfg.tau; ++i)
    into[mod + ".hist." + std::to_string(i)] = window[static_cast<size_t>(i)]->data;
}

streams::FeatureMap predict(const HfpConfig& cfg, streams::Modality m,
                            const ad::Bindings& params,
                            const std::vector<const streams::FeatureMap*>& window) {
  ad::Graph g;
  const ad::NodeId fhat = build_predict(g, cfg, m, /*trainable=*/false);
  g.mark_output("fhat", fhat);

  ad::Bindings bind = params;
  bind_window(cfg, m, window, bind);
  const ad::Evaluation ev = ad::evaluate(g, bind);

  streams::FeatureMap out;
  out.modality = m;
  out.time_index = window.back()->time_index + 1;
  out.source = streams::Source::Compensated;
  out.data = ev.value(fhat);
  return out;
}

double tempred_loss(const Array& fhat, const Array& f) {
  if (!same_shape(fhat, f)) throw std::runtime_error("tempred_loss: shape mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < fhat.data.size(); ++i) {
    const double d = fhat.data[i] - f.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(fhat.data.size());
}

}  // namespace modalpatch::hfp
