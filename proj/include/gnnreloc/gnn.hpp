#pragma once

// Graph network for relative pose regression: edge initialization from node
// pairs, R rounds of message passing with a residual non-local attention block
// and mean aggregation, and a linear relative-pose head on every directed edge.
// Also hosts the pair regressor used for the no-GNN ablation.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gnnreloc/error.hpp"
#include "gnnreloc/pose_math.hpp"
#include "gnnreloc/retrieval.hpp"
#include "gnnreloc/tensor.hpp"

namespace gnnreloc {

struct ModelConfig {
  std::size_t width = 32;            // C: node and edge feature width
  std::size_t attention_factor = 4;  // n: attention down-sampling factor
  std::size_t rounds = 2;            // R: message-passing rounds (shared weights)
  std::size_t hidden = 0;            // hidden width of the 2-layer MLPs; 0 means C

  std::size_t hidden_width() const { return hidden == 0 ? width : hidden; }
  std::size_t reduced_width() const { return width / attention_factor; }

  void validate() const {
    require(width >= 1, "ModelConfig: width must be positive");
    require(attention_factor >= 1 && width % attention_factor == 0,
            "ModelConfig: width must be divisible by the attention factor");
    require(rounds >= 1, "ModelConfig: rounds must be >= 1");
  }
  bool operator==(const ModelConfig&) const = default;
};

enum class ModelKind : std::uint32_t {
  Gnn = 0,
  PairRegressor = 1,  // fully connected layers over [x_i, x_j], no message passing
};

inline const char* to_string(ModelKind k) { return k == ModelKind::Gnn ? "gnn" : "pair_regressor"; }

struct Model {
  ModelKind kind = ModelKind::Gnn;
  ModelConfig config;
  ParameterSet params;
  bool operator==(const Model&) const = default;
};

// Directed edge (from, to). Its prediction regresses relative_target(pose_from, pose_to).
struct OrderedEdge {
  std::size_t from = 0;
  std::size_t to = 0;
  bool operator==(const OrderedEdge&) const = default;
};

// Symmetric activity mask over the undirected pairs of a fully connected graph.
class EdgeMask {
 public:
  EdgeMask() = default;
  explicit EdgeMask(std::size_t nodes, bool active = true) : nodes_(nodes), bits_(nodes * nodes, active ? 1 : 0) {
    for (std::size_t i = 0; i < nodes; ++i) bits_[i * nodes + i] = 0;
  }

  std::size_t nodes() const { return nodes_; }
  bool active(std::size_t i, std::size_t j) const { return bits_[i * nodes_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool on) {
    require(i != j && i < nodes_ && j < nodes_, "EdgeMask::set: invalid pair");
    bits_[i * nodes_ + j] = bits_[j * nodes_ + i] = on ? 1 : 0;
  }

  std::size_t active_pair_count() const { return active_ordered_count() / 2; }
  std::size_t active_ordered_count() const {
    std::size_t n = 0;
    for (auto b : bits_) n += b;
    return n;
  }
  // Row-major over (from, to).
  std::vector<OrderedEdge> active_ordered() const {
    std::vector<OrderedEdge> out;
    for (std::size_t i = 0; i < nodes_; ++i)
      for (std::size_t j = 0; j < nodes_; ++j)
        if (active(i, j)) out.push_back({i, j});
    return out;
  }
  bool operator==(const EdgeMask&) const = default;

 private:
  std::size_t nodes_ = 0;
  std::vector<std::uint8_t> bits_;
};

namespace param_names {
inline constexpr const char* kBeta = "loss.beta";
inline constexpr const char* kGamma = "loss.gamma";
}  // namespace param_names

namespace detail {

inline void add_layer(ParameterSet& ps, const std::string& prefix, std::size_t out, std::size_t in, Rng& rng,
                      double weight_scale = 1.0, bool zero_bias = false) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Matrix w = uniform_matrix(out, in, bound, rng);
  for (auto& v : w.data) v *= weight_scale;
  ps.add(prefix + ".W", std::move(w));
  ps.add(prefix + ".b", zero_bias ? Matrix(out, 1) : uniform_matrix(out, 1, bound, rng));
}

inline void add_loss_weights(ParameterSet& ps) {
  ps.add(param_names::kBeta, Matrix(1, 1, 0.0));
  ps.add(param_names::kGamma, Matrix(1, 1, -3.0));
}

}  // namespace detail

// Weights uniform(+-1/sqrt(fan_in)); W_g zero so attention starts as the
// identity residual; pose head scaled by 0.01 with zero bias; beta = 0,
// gamma = -3.
inline Model init_gnn(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t C = cfg.width;
  const std::size_t H = cfg.hidden_width();
  const std::size_t r = cfg.reduced_width();
  Model m{ModelKind::Gnn, cfg, {}};
  auto& ps = m.params;
  detail::add_layer(ps, "f_proj", C, 2 * C, rng);
  detail::add_layer(ps, "f_edge.1", H, 3 * C, rng);
  detail::add_layer(ps, "f_edge.2", C, H, rng);
  detail::add_layer(ps, "f_msg.1", H, 2 * C, rng);
  detail::add_layer(ps, "f_msg.2", C, H, rng);
  detail::add_layer(ps, "f_upd.1", H, 2 * C, rng);
  detail::add_layer(ps, "f_upd.2", C, H, rng);
  const double att_bound = 1.0 / std::sqrt(static_cast<double>(C));
  ps.add("att.W_theta", uniform_matrix(r, C, att_bound, rng));
  ps.add("att.W_phi", uniform_matrix(r, C, att_bound, rng));
  ps.add("att.W_f", uniform_matrix(r, C, att_bound, rng));
  ps.add("att.W_g", Matrix(C, r));
  detail::add_layer(ps, "pose", 6, C, rng, 0.01, true);
  detail::add_loss_weights(ps);
  return m;
}

// Three hidden layers of widths 2C, C, C with ReLU, then a 6-wide linear head.
inline Model init_pair_regressor(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t C = cfg.width;
  Model m{ModelKind::PairRegressor, cfg, {}};
  auto& ps = m.params;
  detail::add_layer(ps, "pair.1", 2 * C, 2 * C, rng);
  detail::add_layer(ps, "pair.2", C, 2 * C, rng);
  detail::add_layer(ps, "pair.3", C, C, rng);
  detail::add_layer(ps, "pose", 6, C, rng, 0.01, true);
  detail::add_loss_weights(ps);
  return m;
}

inline Model init_model(ModelKind kind, const ModelConfig& cfg, Rng& rng) {
  return kind == ModelKind::Gnn ? init_gnn(cfg, rng) : init_pair_regressor(cfg, rng);
}

struct LayerVars {
  Var W;
  Var b;
};

// Binding a const ParameterSet yields frozen (non-differentiable) handles.
template <typename Params>
LayerVars bind_layer(Tape& t, Params& ps, const std::string& prefix) {
  return {t.param(ps.at(prefix + ".W")), t.param(ps.at(prefix + ".b"))};
}

inline Var dense(Tape& t, Var x, const LayerVars& l) { return linear(t, x, l.W, l.b); }
inline Var dense_relu(Tape& t, Var x, const LayerVars& l) { return relu(t, linear(t, x, l.W, l.b)); }

// Tape handles for every GNN parameter block.
struct GnnVars {
  LayerVars proj, edge1, edge2, msg1, msg2, upd1, upd2, pose;
  Var W_theta, W_phi, W_f, W_g;

  template <typename Params>
  static GnnVars bind(Tape& t, Params& ps) {
    GnnVars v;
    v.proj = bind_layer(t, ps, "f_proj");
    v.edge1 = bind_layer(t, ps, "f_edge.1");
    v.edge2 = bind_layer(t, ps, "f_edge.2");
    v.msg1 = bind_layer(t, ps, "f_msg.1");
    v.msg2 = bind_layer(t, ps, "f_msg.2");
    v.upd1 = bind_layer(t, ps, "f_upd.1");
    v.upd2 = bind_layer(t, ps, "f_upd.2");
    v.W_theta = t.param(ps.at("att.W_theta"));
    v.W_phi = t.param(ps.at("att.W_phi"));
    v.W_f = t.param(ps.at("att.W_f"));
    v.W_g = t.param(ps.at("att.W_g"));
    v.pose = bind_layer(t, ps, "pose");
    return v;
  }
};

// Node features X and directed edge features E[i * N + j] (diagonal unused).
struct GraphState {
  std::size_t nodes = 0;
  std::vector<Var> x;
  std::vector<Var> e;

  Var& edge(std::size_t i, std::size_t j) { return e[i * nodes + j]; }
  Var edge(std::size_t i, std::size_t j) const { return e[i * nodes + j]; }
};

// e_ij = relu(W [x_i, x_j] + b) for every ordered pair.
inline GraphState init_graph_state(Tape& t, const GnnVars& v, std::span<const std::vector<double>> features,
                                   std::size_t width) {
  require(features.size() >= 2, "init_graph_state: need at least 2 nodes");
  GraphState s;
  s.nodes = features.size();
  s.x.reserve(s.nodes);
  for (const auto& f : features) {
    if (f.size() != width)
      throw DimensionMismatchError("init_graph_state: feature width " + std::to_string(f.size()) +
                                   " does not match model width " + std::to_string(width));
    s.x.push_back(t.constant(Matrix::column(f)));
  }
  s.e.resize(s.nodes * s.nodes);
  for (std::size_t i = 0; i < s.nodes; ++i)
    for (std::size_t j = 0; j < s.nodes; ++j)
      if (i != j) s.edge(i, j) = dense_relu(t, concat(t, {s.x[i], s.x[j]}), v.proj);
  return s;
}

// m + W_g softmax_rows((W_theta m)(W_phi m)^T) W_f m
inline Var attention(Tape& t, const GnnVars& v, Var m) {
  const Var theta = matvec(t, v.W_theta, m);
  const Var phi = matvec(t, v.W_phi, m);
  const Var attn = softmax_rows(t, outer(t, theta, phi));
  const Var reduced = matvec(t, v.W_f, m);
  const Var a = matvec(t, v.W_g, matvec(t, attn, reduced));
  return add(t, m, a);
}

// One synchronous round. Edges and messages read pre-round node features;
// the new edge features feed this round's messages. Inactive edges keep
// their features and send nothing; a node with no active edge aggregates zero.
inline GraphState message_passing_round(Tape& t, const GnnVars& v, const GraphState& in, const EdgeMask& active) {
  require(active.nodes() == in.nodes, "message_passing_round: mask size mismatch");
  GraphState out = in;
  const std::size_t N = in.nodes;
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j)
      if (active.active(i, j))
        out.edge(i, j) = dense_relu(t, dense_relu(t, concat(t, {in.edge(i, j), in.x[i], in.x[j]}), v.edge1), v.edge2);

  const std::size_t C = t.value(in.x[0]).rows;
  std::vector<Var> incoming;
  for (std::size_t i = 0; i < N; ++i) {
    incoming.clear();
    for (std::size_t j = 0; j < N; ++j) {
      if (!active.active(i, j)) continue;
      const Var msg = dense_relu(t, dense_relu(t, concat(t, {out.edge(i, j), in.x[j]}), v.msg1), v.msg2);
      incoming.push_back(attention(t, v, msg));
    }
    const Var agg = incoming.empty() ? t.constant(Matrix(C, 1)) : mean(t, incoming);
    out.x[i] = dense_relu(t, dense_relu(t, concat(t, {in.x[i], agg}), v.upd1), v.upd2);
  }
  return out;
}

struct EdgePredictions {
  std::vector<OrderedEdge> edges;
  std::vector<Var> pose;  // 6x1: (dt, dw)
};

inline EdgePredictions gnn_forward(Tape& t, const GnnVars& v, std::span<const std::vector<double>> features,
                                   const EdgeMask& active, std::size_t width, std::size_t rounds) {
  require(rounds >= 1, "gnn_forward: rounds must be >= 1");
  GraphState s = init_graph_state(t, v, features, width);
  for (std::size_t r = 0; r < rounds; ++r) s = message_passing_round(t, v, s, active);
  EdgePredictions p;
  p.edges = active.active_ordered();
  p.pose.reserve(p.edges.size());
  for (const auto& e : p.edges) p.pose.push_back(dense(t, s.edge(e.from, e.to), v.pose));
  return p;
}

struct PairVars {
  LayerVars l1, l2, l3, pose;
  template <typename Params>
  static PairVars bind(Tape& t, Params& ps) {
    return {bind_layer(t, ps, "pair.1"), bind_layer(t, ps, "pair.2"), bind_layer(t, ps, "pair.3"),
            bind_layer(t, ps, "pose")};
  }
};

inline Var baseline1_forward(Tape& t, const PairVars& v, Var x_i, Var x_j) {
  Var h = dense_relu(t, concat(t, {x_i, x_j}), v.l1);
  h = dense_relu(t, h, v.l2);
  h = dense_relu(t, h, v.l3);
  return dense(t, h, v.pose);
}

// Predictions on every active directed edge, whichever model kind.
// `rounds` is ignored by the pair regressor.
// A const model is evaluated without gradient bookkeeping.
template <typename ModelT>
EdgePredictions model_forward(Tape& t, ModelT& model, std::span<const std::vector<double>> features,
                              const EdgeMask& active, std::size_t rounds) {
  if (model.kind == ModelKind::Gnn) {
    const GnnVars v = GnnVars::bind(t, model.params);
    return gnn_forward(t, v, features, active, model.config.width, rounds);
  }
  const PairVars v = PairVars::bind(t, model.params);
  std::vector<Var> x;
  for (const auto& f : features) {
    if (f.size() != model.config.width) throw DimensionMismatchError("model_forward: feature width mismatch");
    x.push_back(t.constant(Matrix::column(f)));
  }
  EdgePredictions p;
  p.edges = active.active_ordered();
  for (const auto& e : p.edges) p.pose.push_back(baseline1_forward(t, v, x[e.from], x[e.to]));
  return p;
}

inline RelPoseTarget to_rel_pose(const Matrix& m) {
  require(m.size() == 6, "to_rel_pose: expected a 6-vector");
  return {{m[0], m[1], m[2]}, {m[3], m[4], m[5]}};
}

// Node features in graph order; the query record supplies node 0 of a query graph.
inline std::vector<std::vector<double>> gather_features(const GraphSpec& g, const EmbeddingDatabase& db,
                                                        const ImageRecord* query = nullptr) {
  std::vector<std::vector<double>> f;
  f.reserve(g.node_count());
  for (std::size_t n = 0; n < g.node_count(); ++n) {
    if (g.db_index[n] == GraphSpec::kNotInDatabase) {
      require(query != nullptr, "gather_features: query graph needs the query record");
      f.push_back(query->feature_vector);
    } else {
      f.push_back(db[g.db_index[n]].feature_vector);
    }
  }
  return f;
}

}  // namespace gnnreloc
