#include "modalpatch/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace modalpatch::ad {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void require_rank3(const char* op, const std::vector<int>& s) {
  if (s.size() != 3) fail(std::string("op ") + op + ": expected rank-3 shape, got " + shape_str(s));
}

double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Shared bilinear kernel: value of `map` channel d at continuous (x, y),
// zero outside [0, W-1] x [0, H-1]. Corner weights returned for reuse.
struct BilinearTap {
  int x0, y0;
  double fx, fy;  // fractional parts
};

inline BilinearTap bilinear_tap(double x, double y) {
  BilinearTap t;
  const double fx0 = std::floor(x);
  const double fy0 = std::floor(y);
  t.x0 = static_cast<int>(fx0);
  t.y0 = static_cast<int>(fy0);
  t.fx = x - fx0;
  t.fy = y - fy0;
  return t;
}

inline bool in_grid(int x, int y, int W, int H) {
  return x >= 0 && x < W && y >= 0 && y < H;
}

}  // namespace

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Input: return "input";
    case OpKind::Const: return "const";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Scale: return "scale";
    case OpKind::Matmul: return "matmul";
    case OpKind::Conv1x1: return "conv1x1";
    case OpKind::Conv3x3: return "conv3x3";
    case OpKind::Softmax: return "softmax";
    case OpKind::SoftmaxSpatial: return "softmax_spatial";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Relu: return "relu";
    case OpKind::Clamp: return "clamp";
    case OpKind::Concat: return "concat";
    case OpKind::Bilinear: return "bilinear";
    case OpKind::GroupScale: return "group_scale";
    case OpKind::GroupSum: return "group_sum";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::SumChannels: return "sum_channels";
    case OpKind::BceLogits: return "bce_logits";
  }
  return "?";
}

NodeId Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

const std::vector<int>& Graph::shape_of(NodeId id) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
    fail("graph: node id out of range");
  return nodes_[static_cast<size_t>(id)].shape;
}

NodeId Graph::input(const std::string& name, std::vector<int> shape,
                    bool requires_grad) {
  if (inputs_by_name_.count(name)) fail("graph: duplicate input '" + name + "'");
  numel_of(shape);
  Node n;
  n.op = OpKind::Input;
  n.shape = std::move(shape);
  n.requires_grad = requires_grad;
  n.name = name;
  NodeId id = push(std::move(n));
  inputs_by_name_[name] = id;
  return id;
}

NodeId Graph::constant(Array value) {
  Node n;
  n.op = OpKind::Const;
  n.shape = value.shape;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  if (shape_of(a) != shape_of(b))
    fail("op add: shape mismatch " + shape_str(shape_of(a)) + " vs " + shape_str(shape_of(b)));
  return push({OpKind::Add, {a, b}, shape_of(a)});
}

NodeId Graph::sub(NodeId a, NodeId b) {
  if (shape_of(a) != shape_of(b))
    fail("op sub: shape mismatch " + shape_str(shape_of(a)) + " vs " + shape_str(shape_of(b)));
  return push({OpKind::Sub, {a, b}, shape_of(a)});
}

NodeId Graph::mul(NodeId a, NodeId b) {
  if (shape_of(a) != shape_of(b))
    fail("op mul: shape mismatch " + shape_str(shape_of(a)) + " vs " + shape_str(shape_of(b)));
  return push({OpKind::Mul, {a, b}, shape_of(a)});
}

NodeId Graph::div(NodeId a, NodeId b) {
  if (shape_of(a) != shape_of(b))
    fail("op div: shape mismatch " + shape_str(shape_of(a)) + " vs " + shape_str(shape_of(b)));
  return push({OpKind::Div, {a, b}, shape_of(a)});
}

NodeId Graph::scale(NodeId a, double c) {
  Node n{OpKind::Scale, {a}, shape_of(a)};
  n.a0 = c;
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const auto& sa = shape_of(a);
  const auto& sb = shape_of(b);
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    fail("op matmul: incompatible shapes " + shape_str(sa) + " vs " + shape_str(sb));
  return push({OpKind::Matmul, {a, b}, {sa[0], sb[1]}});
}

NodeId Graph::conv1x1(NodeId x, NodeId w, NodeId b) {
  const auto& sx = shape_of(x);
  const auto& sw = shape_of(w);
  const auto& sb = shape_of(b);
  require_rank3("conv1x1", sx);
  if (sw.size() != 2 || sw[1] != sx[0])
    fail("op conv1x1: weight " + shape_str(sw) + " does not match input " + shape_str(sx));
  if (sb.size() != 1 || sb[0] != sw[0])
    fail("op conv1x1: bias " + shape_str(sb) + " does not match weight " + shape_str(sw));
  return push({OpKind::Conv1x1, {x, w, b}, {sw[0], sx[1], sx[2]}});
}

NodeId Graph::conv3x3(NodeId x, NodeId w, NodeId b) {
  const auto& sx = shape_of(x);
  const auto& sw = shape_of(w);
  const auto& sb = shape_of(b);
  require_rank3("conv3x3", sx);
  if (sw.size() != 4 || sw[1] != sx[0] || sw[2] != 3 || sw[3] != 3)
    fail("op conv3x3: weight " + shape_str(sw) + " does not match input " + shape_str(sx));
  if (sb.size() != 1 || sb[0] != sw[0])
    fail("op conv3x3: bias " + shape_str(sb) + " does not match weight " + shape_str(sw));
  return push({OpKind::Conv3x3, {x, w, b}, {sw[0], sx[1], sx[2]}});
}

NodeId Graph::softmax(NodeId a) {
  const auto& s = shape_of(a);
  if (s.size() != 3 && s.size() != 1)
    fail("op softmax: expected rank-1 or rank-3 shape, got " + shape_str(s));
  return push({OpKind::Softmax, {a}, s});
}

NodeId Graph::softmax_spatial(NodeId a) {
  require_rank3("softmax_spatial", shape_of(a));
  return push({OpKind::SoftmaxSpatial, {a}, shape_of(a)});
}

NodeId Graph::exp(NodeId a) { return push({OpKind::Exp, {a}, shape_of(a)}); }
NodeId Graph::log(NodeId a) { return push({OpKind::Log, {a}, shape_of(a)}); }
NodeId Graph::sqrt(NodeId a) { return push({OpKind::Sqrt, {a}, shape_of(a)}); }
NodeId Graph::relu(NodeId a) { return push({OpKind::Relu, {a}, shape_of(a)}); }

NodeId Graph::clamp(NodeId a, double lo, double hi) {
  if (!(lo <= hi)) fail("op clamp: lo > hi");
  Node n{OpKind::Clamp, {a}, shape_of(a)};
  n.a0 = lo;
  n.a1 = hi;
  return push(std::move(n));
}

NodeId Graph::concat(const std::vector<NodeId>& parts) {
  if (parts.empty()) fail("op concat: no inputs");
  const auto& s0 = shape_of(parts[0]);
  require_rank3("concat", s0);
  int c = 0;
  for (NodeId p : parts) {
    const auto& s = shape_of(p);
    require_rank3("concat", s);
    if (s[1] != s0[1] || s[2] != s0[2])
      fail("op concat: spatial mismatch " + shape_str(s) + " vs " + shape_str(s0));
    c += s[0];
  }
  return push({OpKind::Concat, parts, {c, s0[1], s0[2]}});
}

NodeId Graph::bilinear(NodeId map, NodeId coords) {
  const auto& sm = shape_of(map);
  const auto& sc = shape_of(coords);
  require_rank3("bilinear", sm);
  require_rank3("bilinear", sc);
  if (sc[0] % 2 != 0)
    fail("op bilinear: coords channels must be 2K, got " + shape_str(sc));
  if (sc[1] != sm[1] || sc[2] != sm[2])
    fail("op bilinear: spatial mismatch " + shape_str(sc) + " vs " + shape_str(sm));
  const int K = sc[0] / 2;
  Node n{OpKind::Bilinear, {map, coords}, {K * sm[0], sm[1], sm[2]}};
  n.i0 = K;
  return push(std::move(n));
}

NodeId Graph::group_scale(NodeId x, NodeId w) {
  const auto& sx = shape_of(x);
  const auto& sw = shape_of(w);
  require_rank3("group_scale", sx);
  require_rank3("group_scale", sw);
  if (sx[1] != sw[1] || sx[2] != sw[2] || sx[0] % sw[0] != 0)
    fail("op group_scale: shapes " + shape_str(sx) + " vs " + shape_str(sw));
  Node n{OpKind::GroupScale, {x, w}, sx};
  n.i0 = sw[0];
  return push(std::move(n));
}

NodeId Graph::group_sum(NodeId x, int groups) {
  const auto& sx = shape_of(x);
  require_rank3("group_sum", sx);
  if (groups <= 0 || sx[0] % groups != 0)
    fail("op group_sum: groups " + std::to_string(groups) + " does not divide " + shape_str(sx));
  Node n{OpKind::GroupSum, {x}, {sx[0] / groups, sx[1], sx[2]}};
  n.i0 = groups;
  return push(std::move(n));
}

NodeId Graph::sum(NodeId a) { return push({OpKind::Sum, {a}, {1}}); }
NodeId Graph::mean(NodeId a) { return push({OpKind::Mean, {a}, {1}}); }

NodeId Graph::sum_channels(NodeId a) {
  const auto& s = shape_of(a);
  require_rank3("sum_channels", s);
  return push({OpKind::SumChannels, {a}, {1, s[1], s[2]}});
}

NodeId Graph::bce_logits(NodeId logits, NodeId targets) {
  if (shape_of(logits) != shape_of(targets))
    fail("op bce_logits: shape mismatch " + shape_str(shape_of(logits)) + " vs " +
         shape_str(shape_of(targets)));
  return push({OpKind::BceLogits, {logits, targets}, {1}});
}

NodeId Graph::mse(NodeId a, NodeId b) {
  NodeId d = sub(a, b);
  return mean(mul(d, d));
}

void Graph::mark_output(const std::string& name, NodeId id) {
  shape_of(id);
  outputs_[name] = id;
}

// ---------------------------------------------------------------- forward

namespace {

void forward_node(const Graph& g, NodeId id, const Bindings& bindings,
                  std::vector<Array>& vals) {
  const Node& n = g.node(id);
  const auto in = [&](int i) -> const Array& {
    return vals[static_cast<size_t>(n.inputs[static_cast<size_t>(i)])];
  };
  Array out;

  switch (n.op) {
    case OpKind::Input: {
      auto it = bindings.find(n.name);
      if (it == bindings.end()) fail("evaluate: unbound input '" + n.name + "'");
      if (it->second.shape != n.shape)
        fail("evaluate: input '" + n.name + "' bound with shape " +
             shape_str(it->second.shape) + ", declared " + shape_str(n.shape));
      out = it->second;
      break;
    }
    case OpKind::Const:
      out = n.value;
      break;
    case OpKind::Add: {
      out = in(0);
      const Array& b = in(1);
      for (int64_t i = 0; i < out.numel(); ++i) out[i] += b[i];
      break;
    }
    case OpKind::Sub: {
      out = in(0);
      const Array& b = in(1);
      for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
      break;
    }
    case OpKind::Mul: {
      out = in(0);
      const Array& b = in(1);
      for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
      break;
    }
    case OpKind::Div: {
      out = in(0);
      const Array& b = in(1);
      for (int64_t i = 0; i < out.numel(); ++i) {
        if (b[i] == 0.0) fail("op div: division by zero");
        out[i] /= b[i];
      }
      break;
    }
    case OpKind::Scale: {
      out = in(0);
      for (double& v : out.data) v *= n.a0;
      break;
    }
    case OpKind::Matmul: {
      const Array& a = in(0);
      const Array& b = in(1);
      const int m = a.shape[0], k = a.shape[1], p = b.shape[1];
      out = Array(n.shape);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j) {
          const double av = a[i * k + j];
          for (int c = 0; c < p; ++c) out[i * p + c] += av * b[j * p + c];
        }
      break;
    }
    case OpKind::Conv1x1: {
      const Array& x = in(0);
      const Array& w = in(1);
      const Array& b = in(2);
      const int ci = x.shape[0];
      const int co = w.shape[0];
      const int64_t hw = static_cast<int64_t>(x.shape[1]) * x.shape[2];
      out = Array(n.shape);
      for (int o = 0; o < co; ++o) {
        double* op_ = &out.data[o * hw];
        for (int64_t p = 0; p < hw; ++p) op_[p] = b[o];
        for (int i = 0; i < ci; ++i) {
          const double wv = w[o * ci + i];
          const double* xp = &x.data[i * hw];
          for (int64_t p = 0; p < hw; ++p) op_[p] += wv * xp[p];
        }
      }
      break;
    }
    case OpKind::Conv3x3: {
      const Array& x = in(0);
      const Array& w = in(1);
      const Array& b = in(2);
      const int ci = x.shape[0], H = x.shape[1], W = x.shape[2];
      const int co = w.shape[0];
      out = Array(n.shape);
      for (int o = 0; o < co; ++o) {
        double* op_ = &out.data[static_cast<size_t>(o) * H * W];
        for (int64_t p = 0; p < static_cast<int64_t>(H) * W; ++p) op_[p] = b[o];
        for (int i = 0; i < ci; ++i) {
          const double* xp = &x.data[static_cast<size_t>(i) * H * W];
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const double wv = w[((o * ci + i) * 3 + ky) * 3 + kx];
              const int y0 = std::max(0, 1 - ky), y1 = std::min(H, H + 1 - ky);
              const int x0 = std::max(0, 1 - kx), x1 = std::min(W, W + 1 - kx);
              for (int y = y0; y < y1; ++y) {
                double* orow = op_ + static_cast<size_t>(y) * W;
                const double* xrow = xp + static_cast<size_t>(y + ky - 1) * W + (kx - 1);
                for (int xx = x0; xx < x1; ++xx) orow[xx] += wv * xrow[xx];
              }
            }
        }
      }
      break;
    }
    case OpKind::Softmax: {
      const Array& x = in(0);
      out = Array(n.shape);
      const bool vec = x.shape.size() == 1;
      const int C = x.shape[0];
      const int64_t hw = vec ? 1 : static_cast<int64_t>(x.shape[1]) * x.shape[2];
      for (int64_t p = 0; p < hw; ++p) {
        double mx = -1e300;
        for (int c = 0; c < C; ++c) mx = std::max(mx, x[c * hw + p]);
        double z = 0.0;
        for (int c = 0; c < C; ++c) z += std::exp(x[c * hw + p] - mx);
        for (int c = 0; c < C; ++c) out[c * hw + p] = std::exp(x[c * hw + p] - mx) / z;
      }
      break;
    }
    case OpKind::SoftmaxSpatial: {
      const Array& x = in(0);
      out = Array(n.shape);
      const int C = x.shape[0];
      const int64_t hw = static_cast<int64_t>(x.shape[1]) * x.shape[2];
      for (int c = 0; c < C; ++c) {
        const double* xp = &x.data[c * hw];
        double* op_ = &out.data[c * hw];
        double mx = -1e300;
        for (int64_t p = 0; p < hw; ++p) mx = std::max(mx, xp[p]);
        double z = 0.0;
        for (int64_t p = 0; p < hw; ++p) z += std::exp(xp[p] - mx);
        for (int64_t p = 0; p < hw; ++p) op_[p] = std::exp(xp[p] - mx) / z;
      }
      break;
    }
    case OpKind::Exp: {
      out = in(0);
      for (double& v : out.data) v = std::exp(v);
      break;
    }
    case OpKind::Log: {
      out = in(0);
      for (double& v : out.data) {
        if (v <= 0.0) fail("op log: non-positive input");
        v = std::log(v);
      }
      break;
    }
    case OpKind::Sqrt: {
      out = in(0);
      for (double& v : out.data) {
        if (v < 0.0) fail("op sqrt: negative input");
        v = std::sqrt(v);
      }
      break;
    }
    case OpKind::Relu: {
      out = in(0);
      for (double& v : out.data) v = std::max(v, 0.0);
      break;
    }
    case OpKind::Clamp: {
      out = in(0);
      for (double& v : out.data) v = std::min(std::max(v, n.a0), n.a1);
      break;
    }
    case OpKind::Concat: {
      out = Array(n.shape);
      int64_t off = 0;
      for (size_t i = 0; i < n.inputs.size(); ++i) {
        const Array& part = vals[static_cast<size_t>(n.inputs[i])];
        std::copy(part.data.begin(), part.data.end(), out.data.begin() + off);
        off += part.numel();
      }
      break;
    }
    case OpKind::Bilinear: {
      const Array& map = in(0);
      const Array& coords = in(1);
      const int D = map.shape[0], H = map.shape[1], W = map.shape[2];
      const int K = n.i0;
      const int64_t hw = static_cast<int64_t>(H) * W;
      out = Array(n.shape);
      for (int k = 0; k < K; ++k) {
        const double* cx = &coords.data[(2 * k) * hw];
        const double* cy = &coords.data[(2 * k + 1) * hw];
        for (int64_t p = 0; p < hw; ++p) {
          const BilinearTap t = bilinear_tap(cx[p], cy[p]);
          const double w00 = (1 - t.fy) * (1 - t.fx), w01 = (1 - t.fy) * t.fx;
          const double w10 = t.fy * (1 - t.fx), w11 = t.fy * t.fx;
          const bool i00 = in_grid(t.x0, t.y0, W, H), i01 = in_grid(t.x0 + 1, t.y0, W, H);
          const bool i10 = in_grid(t.x0, t.y0 + 1, W, H), i11 = in_grid(t.x0 + 1, t.y0 + 1, W, H);
          for (int d = 0; d < D; ++d) {
            const double* mp = &map.data[d * hw];
            double v = 0.0;
            if (i00) v += w00 * mp[t.y0 * W + t.x0];
            if (i01) v += w01 * mp[t.y0 * W + t.x0 + 1];
            if (i10) v += w10 * mp[(t.y0 + 1) * W + t.x0];
            if (i11) v += w11 * mp[(t.y0 + 1) * W + t.x0 + 1];
            out[(static_cast<int64_t>(k) * D + d) * hw + p] = v;
          }
        }
      }
      break;
    }
    case OpKind::GroupScale: {
      const Array& x = in(0);
      const Array& w = in(1);
      const int K = n.i0;
      const int D = x.shape[0] / K;
      const int64_t hw = static_cast<int64_t>(x.shape[1]) * x.shape[2];
      out = x;
      for (int k = 0; k < K; ++k) {
        const double* wp = &w.data[k * hw];
        for (int d = 0; d < D; ++d) {
          double* op_ = &out.data[(static_cast<int64_t>(k) * D + d) * hw];
          for (int64_t p = 0; p < hw; ++p) op_[p] *= wp[p];
        }
      }
      break;
    }
    case OpKind::GroupSum: {
      const Array& x = in(0);
      const int K = n.i0;
      const int D = n.shape[0];
      const int64_t hw = static_cast<int64_t>(x.shape[1]) * x.shape[2];
      out = Array(n.shape);
      for (int k = 0; k < K; ++k)
        for (int d = 0; d < D; ++d) {
          const double* xp = &x.data[(static_cast<int64_t>(k) * D + d) * hw];
          double* op_ = &out.data[d * hw];
          for (int64_t p = 0; p < hw; ++p) op_[p] += xp[p];
        }
      break;
    }
    case OpKind::Sum: {
      double s = 0.0;
      for (double v : in(0).data) s += v;
      out = Array({1});
      out[0] = s;
      break;
    }
    case OpKind::Mean: {
      double s = 0.0;
      for (double v : in(0).data) s += v;
      out = Array({1});
      out[0] = s / static_cast<double>(in(0).numel());
      break;
    }
    case OpKind::SumChannels: {
      const Array& x = in(0);
      const int C = x.shape[0];
      const int64_t hw = static_cast<int64_t>(x.shape[1]) * x.shape[2];
      out = Array(n.shape);
      for (int c = 0; c < C; ++c) {
        const double* xp = &x.data[c * hw];
        for (int64_t p = 0; p < hw; ++p) out[p] += xp[p];
      }
      break;
    }
    case OpKind::BceLogits: {
      const Array& z = in(0);
      const Array& t = in(1);
      double s = 0.0;
      for (int64_t i = 0; i < z.numel(); ++i) s += softplus(z[i]) - z[i] * t[i];
      out = Array({1});
      out[0] = s / static_cast<double>(z.numel());
      break;
    }
  }
  vals[static_cast<size_t>(id)] = std::move(out);
}

}  // namespace

Evaluation evaluate(const Graph& g, const Bindings& bindings) {
  Evaluation ev;
  ev.values.resize(g.size());
  for (NodeId id = 0; id < static_cast<NodeId>(g.size()); ++id)
    forward_node(g, id, bindings, ev.values);
  return ev;
}

std::map<std::string, Array> fetch_outputs(const Graph& g, const Evaluation& ev) {
  std::map<std::string, Array> out;
  for (const auto& [name, id] : g.outputs()) out[name] = ev.value(id);
  return out;
}

// ---------------------------------------------------------------- backward

std::map<std::string, Array> backward(const Graph& g, const Evaluation& ev,
                                      NodeId loss) {
  const Node& ln = g.node(loss);
  if (numel_of(ln.shape) != 1) fail("backward: loss node is not scalar");

  std::vector<Array> adj(g.size());
  std::vector<char> live(g.size(), 0);
  adj[static_cast<size_t>(loss)] = Array(ln.shape, 1.0);
  live[static_cast<size_t>(loss)] = 1;

  const auto grad_of = [&](NodeId id) -> Array& {
    auto& a = adj[static_cast<size_t>(id)];
    if (!live[static_cast<size_t>(id)]) {
      a = Array(g.node(id).shape);
      live[static_cast<size_t>(id)] = 1;
    }
    return a;
  };

  for (NodeId id = loss; id >= 0; --id) {
    if (!live[static_cast<size_t>(id)]) continue;
    const Node& n = g.node(id);
    if (n.op == OpKind::Input || n.op == OpKind::Const) continue;
    const Array& go = adj[static_cast<size_t>(id)];
    const auto val = [&](int i) -> const Array& {
      return ev.values[static_cast<size_t>(n.inputs[static_cast<size_t>(i)])];
    };
    const auto gin = [&](int i) -> Array& { return grad_of(n.inputs[static_cast<size_t>(i)]); };

    switch (n.op) {
      case OpKind::Input:
      case OpKind::Const:
        break;
      case OpKind::Add: {
        Array& ga = gin(0);
        Array& gb = gin(1);
        for (int64_t i = 0; i < go.numel(); ++i) {
          ga[i] += go[i];
          gb[i] += go[i];
        }
        break;
      }
      case OpKind::Sub: {
        Array& ga = gin(0);
        Array& gb = gin(1);
        for (int64_t i = 0; i < go.numel(); ++i) {
          ga[i] += go[i];
          gb[i] -= go[i];
        }
        break;
      }
      case OpKind::Mul: {
        const Array& a = val(0);
        const Array& b = val(1);
        Array& ga = gin(0);
        Array& gb = gin(1);
        for (int64_t i = 0; i < go.numel(); ++i) {
          ga[i] += go[i] * b[i];
          gb[i] += go[i] * a[i];
        }
        break;
      }
      case OpKind::Div: {
        const Array& a = val(0);
        const Array& b = val(1);
        Array& ga = gin(0);
        Array& gb = gin(1);
        for (int64_t i = 0; i < go.numel(); ++i) {
          ga[i] += go[i] / b[i];
          gb[i] -= go[i] * a[i] / (b[i] * b[i]);
        }
        break;
      }
      case OpKind::Scale: {
        Array& ga = gin(0);
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += n.a0 * go[i];
        break;
      }
      case OpKind::Matmul: {
        const Array& a = val(0);
        const Array& b = val(1);
        Array& ga = gin(0);
        Array& gb = gin(1);
        const int m = a.shape[0], k = a.shape[1], p = b.shape[1];
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < k; ++j) {
            double s = 0.0;
            for (int c = 0; c < p; ++c) s += go[i * p + c] * b[j * p + c];
            ga[i * k + j] += s;
          }
        for (int j = 0; j < k; ++j)
          for (int c = 0; c < p; ++c) {
            double s = 0.0;
            for (int i = 0; i < m; ++i) s += a[i * k + j] * go[i * p + c];
            gb[j * p + c] += s;
          }
        break;
      }
      case OpKind::Conv1x1: {
        const Array& x = val(0);
        const Array& w = val(1);
        Array& gx = gin(0);
        Array& gw = gin(1);
        Array& gb = gin(2);
        const int ci = x.shape[0];
        const int co = w.shape[0];
        const int64_t hw = static_cast<int64_t>(x.shape[1]) * x.shape[2];
        for (int o = 0; o < co; ++o) {
          const double* gop = &go.data[o * hw];
          double s = 0.0;
          for (int64_t p = 0; p < hw; ++p) s += gop[p];
          gb[o] += s;
          for (int i = 0; i < ci; ++i) {
            const double wv = w[o * ci + i];
            const double* xp = &x.data[i * hw];
            double* gxp = &gx.data[i * hw];
            double sw = 0.0;
            for (int64_t p = 0; p < hw; ++p) {
              gxp[p] += wv * gop[p];
              sw += gop[p] * xp[p];
            }
            gw[o * ci + i] += sw;
          }
        }
        break;
      }
      case OpKind::Conv3x3: {
        const Array& x = val(0);
        const Array& w = val(1);
        Array& gx = gin(0);
        Array& gw = gin(1);
        Array& gb = gin(2);
        const int ci = x.shape[0], H = x.shape[1], W = x.shape[2];
        const int co = w.shape[0];
        for (int o = 0; o < co; ++o) {
          const double* gop = &go.data[static_cast<size_t>(o) * H * W];
          double s = 0.0;
          for (int64_t p = 0; p < static_cast<int64_t>(H) * W; ++p) s += gop[p];
          gb[o] += s;
          for (int i = 0; i < ci; ++i) {
            const double* xp = &x.data[static_cast<size_t>(i) * H * W];
            double* gxp = &gx.data[static_cast<size_t>(i) * H * W];
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const double wv = w[((o * ci + i) * 3 + ky) * 3 + kx];
                double gwv = 0.0;
                const int y0 = std::max(0, 1 - ky), y1 = std::min(H, H + 1 - ky);
                const int x0 = std::max(0, 1 - kx), x1 = std::min(W, W + 1 - kx);
                for (int y = y0; y < y1; ++y) {
                  const double* grow = gop + static_cast<size_t>(y) * W;
                  const double* xrow = xp + static_cast<size_t>(y + ky - 1) * W + (kx - 1);
                  double* gxrow = gxp + static_cast<size_t>(y + ky - 1) * W + (kx - 1);
                  for (int xx = x0; xx < x1; ++xx) {
                    gwv += grow[xx] * xrow[xx];
                    gxrow[xx] += wv * grow[xx];
                  }
                }
                gw[((o * ci + i) * 3 + ky) * 3 + kx] += gwv;
              }
          }
        }
        break;
      }
      case OpKind::Softmax: {
        const Array& y = ev.values[static_cast<size_t>(id)];
        Array& gx = gin(0);
        const bool vec = y.shape.size() == 1;
        const int C = y.shape[0];
        const int64_t hw = vec ? 1 : static_cast<int64_t>(y.shape[1]) * y.shape[2];
        for (int64_t p = 0; p < hw; ++p) {
          double dot = 0.0;
          for (int c = 0; c < C; ++c) dot += go[c * hw + p] * y[c * hw + p];
          for (int c = 0; c < C; ++c)
            gx[c * hw + p] += y[c * hw + p] * (go[c * hw + p] - dot);
        }
        break;
      }
      case OpKind::SoftmaxSpatial: {
        const Array& y = ev.values[static_cast<size_t>(id)];
        Array& gx = gin(0);
        const int C = y.shape[0];
        const int64_t hw = static_cast<int64_t>(y.shape[1]) * y.shape[2];
        for (int c = 0; c < C; ++c) {
          const double* yp = &y.data[c * hw];
          const double* gop = &go.data[c * hw];
          double* gxp = &gx.data[c * hw];
          double dot = 0.0;
          for (int64_t p = 0; p < hw; ++p) dot += gop[p] * yp[p];
          for (int64_t p = 0; p < hw; ++p) gxp[p] += yp[p] * (gop[p] - dot);
        }
        break;
      }
      case OpKind::Exp: {
        const Array& y = ev.values[static_cast<size_t>(id)];
        Array& gx = gin(0);
        for (int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * y[i];
        break;
      }
      case OpKind::Log: {
        const Array& x = val(0);
        Array& gx = gin(0);
        for (int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i] / x[i];
        break;
      }
      case OpKind::Sqrt: {
        const Array& y = ev.values[static_cast<size_t>(id)];
        Array& gx = gin(0);
        for (int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * 0.5 / y[i];
        break;
      }
      case OpKind::Relu: {
        const Array& x = val(0);
        Array& gx = gin(0);
        for (int64_t i = 0; i < go.numel(); ++i)
          if (x[i] > 0.0) gx[i] += go[i];
        break;
      }
      case OpKind::Clamp: {
        const Array& x = val(0);
        Array& gx = gin(0);
        for (int64_t i = 0; i < go.numel(); ++i)
          if (x[i] >= n.a0 && x[i] <= n.a1) gx[i] += go[i];
        break;
      }
      case OpKind::Concat: {
        int64_t off = 0;
        for (size_t i = 0; i < n.inputs.size(); ++i) {
          Array& gp = grad_of(n.inputs[i]);
          for (int64_t j = 0; j < gp.numel(); ++j) gp[j] += go[off + j];
          off += gp.numel();
        }
        break;
      }
      case OpKind::Bilinear: {
        const Array& map = val(0);
        const Array& coords = val(1);
        Array& gmap = gin(0);
        Array& gcoords = gin(1);
        const int D = map.shape[0], H = map.shape[1], W = map.shape[2];
        const int K = n.i0;
        const int64_t hw = static_cast<int64_t>(H) * W;
        for (int k = 0; k < K; ++k) {
          const double* cx = &coords.data[(2 * k) * hw];
          const double* cy = &coords.data[(2 * k + 1) * hw];
          for (int64_t p = 0; p < hw; ++p) {
            const BilinearTap t = bilinear_tap(cx[p], cy[p]);
            const bool i00 = in_grid(t.x0, t.y0, W, H), i01 = in_grid(t.x0 + 1, t.y0, W, H);
            const bool i10 = in_grid(t.x0, t.y0 + 1, W, H), i11 = in_grid(t.x0 + 1, t.y0 + 1, W, H);
            const double w00 = (1 - t.fy) * (1 - t.fx), w01 = (1 - t.fy) * t.fx;
            const double w10 = t.fy * (1 - t.fx), w11 = t.fy * t.fx;
            double gx_acc = 0.0, gy_acc = 0.0;
            for (int d = 0; d < D; ++d) {
              const double gv = go[(static_cast<int64_t>(k) * D + d) * hw + p];
              if (gv == 0.0) continue;
              const double* mp = &map.data[d * hw];
              double* gmp = &gmap.data[d * hw];
              const double v00 = i00 ? mp[t.y0 * W + t.x0] : 0.0;
              const double v01 = i01 ? mp[t.y0 * W + t.x0 + 1] : 0.0;
              const double v10 = i10 ? mp[(t.y0 + 1) * W + t.x0] : 0.0;
              const double v11 = i11 ? mp[(t.y0 + 1) * W + t.x0 + 1] : 0.0;
              if (i00) gmp[t.y0 * W + t.x0] += gv * w00;
              if (i01) gmp[t.y0 * W + t.x0 + 1] += gv * w01;
              if (i10) gmp[(t.y0 + 1) * W + t.x0] += gv * w10;
              if (i11) gmp[(t.y0 + 1) * W + t.x0 + 1] += gv * w11;
              gx_acc += gv * ((1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
              gy_acc += gv * ((1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
            }
            gcoords[(2 * k) * hw + p] += gx_acc;
            gcoords[(2 * k + 1) * hw + p] += gy_acc;
          }
        }
        break;
      }
      case OpKind::GroupScale: {
        const Array& x = val(0);
        const Array& w = val(1);
        Array& gx = gin(0);
        Array& gw = gin(1);
        const int K = n.i0;
        const int D = x.shape[0] / K;
        const int64_t hw = static_cast<int64_t>(x.shape[1]) * x.shape[2];
        for (int k = 0; k < K; ++k) {
          const double* wp = &w.data[k * hw];
          double* gwp = &gw.data[k * hw];
          for (int d = 0; d < D; ++d) {
            const int64_t base = (static_cast<int64_t>(k) * D + d) * hw;
            for (int64_t p = 0; p < hw; ++p) {
              gx[base + p] += go[base + p] * wp[p];
              gwp[p] += go[base + p] * x[base + p];
            }
          }
        }
        break;
      }
      case OpKind::GroupSum: {
        Array& gx = gin(0);
        const int K = n.i0;
        const int D = n.shape[0];
        const int64_t hw = static_cast<int64_t>(n.shape[1]) * n.shape[2];
        for (int k = 0; k < K; ++k)
          for (int d = 0; d < D; ++d) {
            const int64_t base = (static_cast<int64_t>(k) * D + d) * hw;
            for (int64_t p = 0; p < hw; ++p) gx[base + p] += go[d * hw + p];
          }
        break;
      }
      case OpKind::Sum: {
        Array& gx = gin(0);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += go[0];
        break;
      }
      case OpKind::Mean: {
        Array& gx = gin(0);
        const double gv = go[0] / static_cast<double>(gx.numel());
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += gv;
        break;
      }
      case OpKind::SumChannels: {
        Array& gx = gin(0);
        const int C = gx.shape[0];
        const int64_t hw = static_cast<int64_t>(gx.shape[1]) * gx.shape[2];
        for (int c = 0; c < C; ++c)
          for (int64_t p = 0; p < hw; ++p) gx[c * hw + p] += go[p];
        break;
      }
      case OpKind::BceLogits: {
        const Array& z = val(0);
        const Array& t = val(1);
        Array& gz = gin(0);
        const double gv = go[0] / static_cast<double>(z.numel());
        for (int64_t i = 0; i < z.numel(); ++i)
          gz[i] += gv * (sigmoid(z[i]) - t[i]);
        // targets treated as constants; no gradient propagated
        break;
      }
    }
  }

  std::map<std::string, Array> grads;
  for (const auto& [name, id] : g.inputs()) {
    const Node& n = g.node(id);
    if (!n.requires_grad) continue;
    if (live[static_cast<size_t>(id)])
      grads[name] = adj[static_cast<size_t>(id)];
    else
      grads[name] = Array(n.shape);
  }
  return grads;
}

double grad_check(const Graph& g, const Bindings& bindings, NodeId loss,
                  double eps) {
  if (numel_of(g.node(loss).shape) != 1) fail("grad_check: non-scalar output");
  if (!(eps > 0.0 && eps <= 1e-3)) fail("grad_check: eps out of range");

  Evaluation ev = evaluate(g, bindings);
  const auto grads = backward(g, ev, loss);

  double worst = 0.0;
  Bindings work = bindings;
  for (const auto& [name, id] : g.inputs()) {
    const Node& n = g.node(id);
    if (!n.requires_grad) continue;
    const Array& analytic = grads.at(name);
    Array& x = work[name];
    for (int64_t i = 0; i < x.numel(); ++i) {
      const double orig = x[i];
      x[i] = orig + eps;
      const double fp = evaluate(g, work).value(loss)[0];
      x[i] = orig - eps;
      const double fm = evaluate(g, work).value(loss)[0];
      x[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

std::vector<std::vector<double>> bilinear_sample(
    const Array& map, const std::vector<std::pair<double, double>>& points) {
  if (map.shape.size() != 3) fail("bilinear_sample: map must be rank-3");
  const int D = map.shape[0], H = map.shape[1], W = map.shape[2];
  const int64_t hw = static_cast<int64_t>(H) * W;
  std::vector<std::vector<double>> out;
  out.reserve(points.size());
  for (const auto& [x, y] : points) {
    const BilinearTap t = bilinear_tap(x, y);
    const double w00 = (1 - t.fy) * (1 - t.fx), w01 = (1 - t.fy) * t.fx;
    const double w10 = t.fy * (1 - t.fx), w11 = t.fy * t.fx;
    const bool i00 = in_grid(t.x0, t.y0, W, H), i01 = in_grid(t.x0 + 1, t.y0, W, H);
    const bool i10 = in_grid(t.x0, t.y0 + 1, W, H), i11 = in_grid(t.x0 + 1, t.y0 + 1, W, H);
    std::vector<double> v(static_cast<size_t>(D), 0.0);
    for (int d = 0; d < D; ++d) {
      const double* mp = &map.data[d * hw];
      double s = 0.0;
      if (i00) s += w00 * mp[t.y0 * W + t.x0];
      if (i01) s += w01 * mp[t.y0 * W + t.x0 + 1];
      if (i10) s += w10 * mp[(t.y0 + 1) * W + t.x0];
      if (i11) s += w11 * mp[(t.y0 + 1) * W + t.x0 + 1];
      v[static_cast<size_t>(d)] = s;
    }
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace modalpatch::ad
