#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "modalpatch/array.hpp"

namespace modalpatch::ad {

using NodeId = int32_t;

enum class OpKind {
  Input,
  Const,
  Add,
  Sub,
  Mul,
  Div,
  Scale,        // a0 * x
  Matmul,       // rank-2 only
  Conv1x1,      // x (Ci,H,W), w (Co,Ci), b (Co)
  Conv3x3,      // x (Ci,H,W), w (Co,Ci,3,3), b (Co), zero padded
  Softmax,      // over channel axis, per spatial position
  SoftmaxSpatial,  // over H*W, per channel
  Exp,
  Log,
  Sqrt,
  Relu,
  Clamp,        // [a0, a1], zero gradient outside
  Concat,       // along channel axis
  Bilinear,     // map (D,H,W), coords (2K,H,W) -> (K*D,H,W), zero padded
  GroupScale,   // x (K*D,H,W) scaled blockwise by w (K,H,W)
  GroupSum,     // x (K*D,H,W) -> (D,H,W), i0 = K
  Sum,          // all elements -> scalar
  Mean,         // all elements -> scalar
  SumChannels,  // (C,H,W) -> (1,H,W)
  BceLogits,    // mean binary cross-entropy, logits vs targets
};

const char* op_name(OpKind k);

struct Node {
  OpKind op;
  std::vector<NodeId> inputs;
  std::vector<int> shape;
  double a0 = 0.0;
  double a1 = 0.0;
  int i0 = 0;
  bool requires_grad = false;  // Input nodes only
  std::string name;            // Input nodes only
  Array value;                 // Const nodes only
};

// Computation graph. Nodes are appended in construction order, so node ids
// are already a topological order: every input id is smaller than the id of
// the node consuming it. Immutable once built; evaluations share it freely.
class Graph {
 public:
  NodeId input(const std::string& name, std::vector<int> shape,
               bool requires_grad = false);
  NodeId constant(Array value);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId div(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId matmul(NodeId a, NodeId b);
  NodeId conv1x1(NodeId x, NodeId w, NodeId b);
  NodeId conv3x3(NodeId x, NodeId w, NodeId b);
  NodeId softmax(NodeId a);
  NodeId softmax_spatial(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId sqrt(NodeId a);
  NodeId relu(NodeId a);
  NodeId clamp(NodeId a, double lo, double hi);
  NodeId concat(const std::vector<NodeId>& parts);
  NodeId bilinear(NodeId map, NodeId coords);
  NodeId group_scale(NodeId x, NodeId w);
  NodeId group_sum(NodeId x, int groups);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId sum_channels(NodeId a);
  NodeId bce_logits(NodeId logits, NodeId targets);

  // mean((a - b)^2) over all elements
  NodeId mse(NodeId a, NodeId b);

  void mark_output(const std::string& name, NodeId id);

  const Node& node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
  size_t size() const { return nodes_.size(); }
  const std::map<std::string, NodeId>& inputs() const { return inputs_by_name_; }
  const std::map<std::string, NodeId>& outputs() const { return outputs_; }

 private:
  NodeId push(Node n);
  const std::vector<int>& shape_of(NodeId id) const;

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> inputs_by_name_;
  std::map<std::string, NodeId> outputs_;
};

using Bindings = std::map<std::string, Array>;

// Forward values for every node; values[id] is valid once evaluate() returns.
struct Evaluation {
  std::vector<Array> values;
  const Array& value(NodeId id) const { return values[static_cast<size_t>(id)]; }
};

Evaluation evaluate(const Graph& g, const Bindings& bindings);

// Named outputs of a finished evaluation.
std::map<std::string, Array> fetch_outputs(const Graph& g, const Evaluation& ev);

// Reverse pass from a scalar node. Visits nodes in reverse topological order
// exactly once and returns gradients for every requires_grad Input node.
std::map<std::string, Array> backward(const Graph& g, const Evaluation& ev,
                                      NodeId loss);

// Central finite differences against the backward pass for every element of
// every requires_grad input. Returns the worst relative error, denominator
// max(|analytic|, |numeric|, 1e-8).
double grad_check(const Graph& g, const Bindings& bindings, NodeId loss,
                  double eps = 1e-5);

// Standalone bilinear interpolation with zero padding outside the grid;
// same kernel the Bilinear graph op uses. Returns one D-vector per point.
std::vector<std::vector<double>> bilinear_sample(
    const Array& map, const std::vector<std::pair<double, double>>& points);

}  // namespace modalpatch::ad
