#pragma once

// Uncertainty estimation and uncertainty-guided cross-modality fusion.  A
// small pointwise head regresses a per-location log-variance for each
// compensated feature map; the implied standard deviation drives a
// deformable cross-attention whose point weights are damped where the key
// modality is uncertain.

#include <string>

#include "modalpatch/graph.hpp"
#include "modalpatch/hfp.hpp"
#include "modalpatch/streams.hpp"

namespace modalpatch::ucf {

struct UcfConfig {
  int d = 16;  // channels per modality (both modalities share D here)
  int h = 32;
  int w = 32;
  int k = 4;   // sampling points per query position in the fusion layer
};

// Log-variance clamp bounds: sigma^2 is confined to [e^-10, e^10].
inline constexpr double kLogVarLo = -10.0;
inline constexpr double kLogVarHi = 10.0;

// Parameter names for one modality (prefix "ucf.<modality>."):
//   var.l1.weight / .bias   (D/2, D) / (D/2)   variance head, hidden layer
//   var.l2.weight / .bias   (1, D/2) / (1)     variance head, log-var output
//   fuse.{offset,attn,value,out}.{weight,bias}  cross-attention layer whose
//     QUERY is this modality (keys/values come from the other one)
ad::Bindings init_params(const UcfConfig& cfg, streams::Modality m, uint64_t seed);

// Declares "ucf.<modality>.var.*" inputs and wires the variance head on
// `fhat`: conv1x1 D->D/2, relu, conv1x1 D/2->1, clamp to [-10,10], exp.
// Returns the (1,H,W) sigma^2 node (strictly positive by construction).
ad::NodeId build_variance(ad::Graph& g, ad::NodeId fhat, streams::Modality m,
                          int d, bool trainable);

// Gaussian negative log-likelihood with one scalar variance per location:
// mean over locations i of 0.5*(sum_c r_ic^2 / s2_i + log s2_i + log 2*pi).
// Returns the scalar loss node. `sigma2` must be (1,H,W).
ad::NodeId build_uncert_loss(ad::Graph& g, ad::NodeId fhat, ad::NodeId target,
                             ad::NodeId sigma2);

// Declares "ucf.<query modality>.fuse.*" inputs and wires the fusion block:
//   s     = spatial softmax of U_kv (mass over all H*W locations)
//   attn  = deformable attention, query fhat_q into kv fhat_kv, each point's
//           weight scaled by (1 - s at its sample coordinate), NO
//           renormalization afterwards
//   f_enh = fhat_q + attn
// `u_kv` must be the (1,H,W) standard-deviation map of the kv modality.
ad::NodeId build_fuse(ad::Graph& g, ad::NodeId fhat_q, ad::NodeId fhat_kv,
                      ad::NodeId u_kv, streams::Modality query_m,
                      const UcfConfig& cfg, bool trainable,
                      bool uncertainty_scaling = true);

// ---- plain (non-graph) counterparts used by evaluation and tests ----

// sigma^2 of one feature map; throws on shape mismatch with cfg.
Array estimate_variance(const UcfConfig& cfg, streams::Modality m,
                        const ad::Bindings& params, const Array& fhat);

// NLL as defined above; throws on non-positive sigma2 or shape mismatch.
double uncert_loss(const Array& fhat, const Array& target, const Array& sigma2);

// Elementwise square root of sigma2 (the uncertainty map U).
Array uncertainty_map(const Array& sigma2);

// One-shot fusion of a query/key pair of compensated features. `u_kv` is the
// key modality's uncertainty map. Returns a FeatureMap tagged Fused.
streams::FeatureMap fuse(const UcfConfig& cfg, const streams::FeatureMap& fhat_q,
                         const streams::FeatureMap& fhat_kv, const Array& u_kv,
                         const ad::Bindings& params,
                         bool uncertainty_scaling = true);

// MSE(f_enh_img, f_img) + MSE(f_enh_pts, f_pts).
double fuse_loss(const Array& f_enh_img, const Array& f_enh_pts,
                 const Array& f_img, const Array& f_pts);

}  // namespace modalpatch::ucf
