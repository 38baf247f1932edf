#pragma once

// History-based feature prediction: a learnable query map attends twice into
// a projection of the recent feature history (deformable sampling), and the
// result is added to the newest history frame to form the compensated
// feature for the current step.

#include <string>
#include <vector>

#include "modalpatch/graph.hpp"
#include "modalpatch/streams.hpp"

namespace modalpatch::hfp {

struct HfpConfig {
  int d = 16;   // channels of this modality's feature maps
  int h = 32;
  int w = 32;
  int tau = 6;  // history window length
  int k = 4;    // sampling points per query position
};

// Parameter names for one modality (prefix "hfp.<modality>."):
//   query                  (D,H,W)   learnable query embedding
//   hist.weight / .bias    (D, tau*D) / (D)   history projection
//   l{1,2}.offset.weight / .bias   (2K, D) / (2K)
//   l{1,2}.attn.weight   / .bias   (K, D)  / (K)
//   l{1,2}.value.weight  / .bias   (D, D)  / (D)
//   l{1,2}.out.weight    / .bias   (D, D)  / (D)
ad::Bindings init_params(const HfpConfig& cfg, streams::Modality m, uint64_t seed);

// Declares the four projection heads of one deformable-attention layer as
// graph inputs "<prefix>.{offset,attn,value,out}.{weight,bias}" and wires the
// layer: per query position, K offsets and K softmax weights come from the
// query vector, values are bilinear samples of the value-projected kv map at
// position+offset (zero padding outside), and the weighted sum is output-
// projected. If smap >= 0 it must be a (1,H,W) node of spatial-softmax mass;
// each point's weight is scaled by (1 - mass sampled at its coordinate).
ad::NodeId deform_attn_layer(ad::Graph& g, ad::NodeId query, ad::NodeId kv,
                             const std::string& prefix, int d, int k,
                             bool trainable, ad::NodeId smap = -1);

// Full prediction block for one modality. Declares data inputs
// "<modality>.hist.<i>" for i in [0, tau) (oldest first) and the parameter
// inputs above, and returns the node computing
//   fhat = hist.<tau-1> + layer2(layer1(query, kv), kv),
// where kv is the 1x1-projected channel concatenation of the history window.
ad::NodeId build_predict(ad::Graph& g, const HfpConfig& cfg, streams::Modality m,
                         bool trainable);

// Convenience one-shot prediction over a history window (oldest first, length
// tau). Returns a FeatureMap tagged Compensated at time latest+1.
streams::FeatureMap predict(const HfpConfig& cfg, streams::Modality m,
                            const ad::Bindings& params,
                            const std::vector<const streams::FeatureMap*>& window);

// Binds "<modality>.hist.<i>" entries for a window into `into`.
void bind_window(const HfpConfig& cfg, streams::Modality m,
                 const std::vector<const streams::FeatureMap*>& window,
                 ad::Bindings& into);

// Mean squared elementwise difference (the temporal prediction loss).
double tempred_loss(const Array& fhat, const Array& f);

}  // namespace modalpatch::hfp
