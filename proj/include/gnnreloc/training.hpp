#pragma once

// Relative pose loss with learned balance weights, edge dropout, learning-rate
// schedule and checkpoint persistence.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "gnnreloc/binary_io.hpp"
#include "gnnreloc/error.hpp"
#include "gnnreloc/gnn.hpp"
#include "gnnreloc/pose_math.hpp"
#include "gnnreloc/tensor.hpp"

namespace gnnreloc {

enum class GraphMode : std::uint32_t {
  Retrieval = 0,  // strided nearest neighbours in embedding space
  Random = 1,     // uniformly sampled database images
};

inline const char* to_string(GraphMode m) { return m == GraphMode::Retrieval ? "retrieval" : "random"; }

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  double lr0 = 5e-5;
  std::size_t lr_decay_every = 20;
  double lr_decay_factor = 10.0;
  double weight_decay = 5e-4;
  double edge_dropout = 0.5;
  std::size_t nodes = 8;   // N
  std::size_t stride = 5;  // K
  std::size_t patience = 10;
  ModelConfig model;
  ModelKind kind = ModelKind::Gnn;
  GraphMode graph_mode = GraphMode::Retrieval;
  std::uint64_t seed = 0;

  void validate() const {
    model.validate();
    require(batch_size >= 1, "TrainConfig: batch size must be positive");
    require(lr0 > 0.0 && lr_decay_factor > 0.0 && lr_decay_every >= 1, "TrainConfig: invalid learning-rate schedule");
    require(weight_decay >= 0.0, "TrainConfig: weight decay must be >= 0");
    require(edge_dropout >= 0.0 && edge_dropout < 1.0, "TrainConfig: edge dropout must lie in [0, 1)");
    require(nodes >= 2 && stride >= 1, "TrainConfig: need N >= 2 and K >= 1");
    require(patience >= 1, "TrainConfig: patience must be positive");
  }
};

// lr0 / factor^floor(epoch / every)
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  return cfg.lr0 / std::pow(cfg.lr_decay_factor, static_cast<double>(epoch / cfg.lr_decay_every));
}

// ||dt_hat - dt||_1 e^-beta + beta + ||dw_hat - dw||_1 e^-gamma + gamma
inline double edge_loss(const RelPoseTarget& pred, const RelPoseTarget& target, double beta, double gamma) {
  double lt = 0.0, lr = 0.0;
  for (int k = 0; k < 3; ++k) {
    lt += std::abs(pred.dt[k] - target.dt[k]);
    lr += std::abs(pred.dw[k] - target.dw[k]);
  }
  return lt * std::exp(-beta) + beta + lr * std::exp(-gamma) + gamma;
}

inline Var edge_loss(Tape& t, Var pred, const RelPoseTarget& target, Var beta, Var gamma) {
  const Matrix& p = t.value(pred);
  require(p.size() == 6, "edge_loss: prediction must be a 6-vector");
  const double b = t.value(beta)[0];
  const double g = t.value(gamma)[0];
  const double target6[6] = {target.dt[0], target.dt[1], target.dt[2], target.dw[0], target.dw[1], target.dw[2]};
  double lt = 0.0, lr = 0.0;
  for (int k = 0; k < 3; ++k) {
    lt += std::abs(p[k] - target6[k]);
    lr += std::abs(p[k + 3] - target6[k + 3]);
  }
  Matrix out(1, 1, lt * std::exp(-b) + b + lr * std::exp(-g) + g);
  std::array<double, 6> tgt{};
  std::copy(std::begin(target6), std::end(target6), tgt.begin());
  return t.record(std::move(out), {pred, beta, gamma},
                  [pred, beta, gamma, tgt, lt, lr](Tape& tp, const Matrix& gout) {
                    const double go = gout[0];
                    const double eb = std::exp(-tp.value(beta)[0]);
                    const double eg = std::exp(-tp.value(gamma)[0]);
                    if (tp.needs_grad(pred)) {
                      const Matrix& p = tp.value(pred);
                      Matrix& gp = tp.grad(pred);
                      for (int k = 0; k < 6; ++k) {
                        const double d = p[k] - tgt[k];
                        const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                        gp[k] += go * s * (k < 3 ? eb : eg);
                      }
                    }
                    if (tp.needs_grad(beta)) tp.grad(beta)[0] += go * (1.0 - lt * eb);
                    if (tp.needs_grad(gamma)) tp.grad(gamma)[0] += go * (1.0 - lr * eg);
                  });
}

// Mean of edge_loss over the given (active, directed) edges.
inline double graph_loss(std::span<const RelPoseTarget> preds, std::span<const RelPoseTarget> targets, double beta,
                         double gamma) {
  require(preds.size() == targets.size(), "graph_loss: predictions and targets differ in length");
  if (preds.empty()) throw ContractViolation("graph_loss: no active edges");
  double sum = 0.0;
  for (std::size_t k = 0; k < preds.size(); ++k) sum += edge_loss(preds[k], targets[k], beta, gamma);
  return sum / static_cast<double>(preds.size());
}

inline Var graph_loss(Tape& t, std::span<const Var> preds, std::span<const RelPoseTarget> targets, Var beta,
                      Var gamma) {
  require(preds.size() == targets.size(), "graph_loss: predictions and targets differ in length");
  if (preds.empty()) throw ContractViolation("graph_loss: no active edges");
  std::vector<Var> terms;
  terms.reserve(preds.size());
  for (std::size_t k = 0; k < preds.size(); ++k) terms.push_back(edge_loss(t, preds[k], targets[k], beta, gamma));
  return mean(t, terms);
}

// Keeps each undirected pair with probability 1 - p; both directions share
// the decision. If every pair is dropped one uniformly chosen pair is restored.
inline EdgeMask apply_edge_dropout(std::size_t nodes, double p, Rng& rng) {
  require(p >= 0.0 && p < 1.0, "apply_edge_dropout: p must lie in [0, 1)");
  EdgeMask mask(nodes, false);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (std::size_t i = 0; i < nodes; ++i)
    for (std::size_t j = i + 1; j < nodes; ++j)
      if (uni(rng) >= p) mask.set(i, j, true);
  if (mask.active_pair_count() == 0 && nodes >= 2) {
    std::size_t pick = std::uniform_int_distribution<std::size_t>(0, nodes * (nodes - 1) / 2 - 1)(rng);
    for (std::size_t i = 0; i < nodes; ++i)
      for (std::size_t j = i + 1; j < nodes; ++j)
        if (pick-- == 0) mask.set(i, j, true);
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  Model model;
  TrainConfig train;  // graph construction settings travel with the weights
  std::uint64_t epoch = 0;
  std::string rng_state;
  bool operator==(const Checkpoint& o) const {
    return model == o.model && epoch == o.epoch && rng_state == o.rng_state;
  }
};

inline std::string rng_state(const Rng& rng) {
  std::ostringstream s;
  s << rng;
  return s.str();
}

inline Rng rng_from_state(const std::string& state) {
  Rng rng;
  std::istringstream s(state);
  s >> rng;
  if (!s) throw CorruptFileError("checkpoint: invalid rng state");
  return rng;
}

// Layout (little-endian):
//   "GNNRCKPT" | u32 version | u32 model kind | u32 graph mode
//   | u64 C, n, R, hidden | u64 N, K | u64 epochs, batch, decay_every, patience
//   | f64 lr0, decay_factor, weight_decay, edge_dropout | u64 seed | u64 epoch
//   | u64 block count | per block: name, u64 rows, u64 cols, value, adam_m,
//     adam_v (f64 each, row-major), i64 step count | rng state string
inline constexpr char kCheckpointMagic[8] = {'G', 'N', 'N', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const Checkpoint& ck) {
  io::Writer w;
  w.bytes(std::string_view(kCheckpointMagic, 8));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.model.kind));
  w.u32(static_cast<std::uint32_t>(ck.train.graph_mode));
  const auto& mc = ck.model.config;
  for (auto v : {mc.width, mc.attention_factor, mc.rounds, mc.hidden}) w.u64(v);
  const auto& tc = ck.train;
  for (auto v : {tc.nodes, tc.stride, tc.epochs, tc.batch_size, tc.lr_decay_every, tc.patience}) w.u64(v);
  for (auto v : {tc.lr0, tc.lr_decay_factor, tc.weight_decay, tc.edge_dropout}) w.f64(v);
  w.u64(tc.seed);
  w.u64(ck.epoch);
  w.u64(ck.model.params.size());
  for (const auto& p : ck.model.params) {
    w.str(p.name);
    w.u64(p.value.rows);
    w.u64(p.value.cols);
    for (const Matrix* m : {&p.value, &p.adam_m, &p.adam_v})
      for (double v : m->data) w.f64(v);
    w.i64(p.step_count);
  }
  w.str(ck.rng_state);
  return w.buffer();
}

// `expected` (when given) must match the stored model configuration exactly.
inline Checkpoint decode_checkpoint(std::string_view bytes, const ModelConfig* expected = nullptr) {
  io::Reader r(bytes);
  if (r.remaining() < 8 || r.bytes(8) != std::string_view(kCheckpointMagic, 8))
    throw CorruptFileError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionMismatchError("checkpoint: version " + std::to_string(version) + ", expected " +
                               std::to_string(kCheckpointVersion));
  Checkpoint ck;
  const std::uint32_t kind = r.u32();
  const std::uint32_t mode = r.u32();
  if (kind > 1 || mode > 1) throw CorruptFileError("checkpoint: unknown model kind or graph mode");
  ck.model.kind = static_cast<ModelKind>(kind);
  ck.train.graph_mode = static_cast<GraphMode>(mode);
  auto& mc = ck.model.config;
  mc.width = r.u64();
  mc.attention_factor = r.u64();
  mc.rounds = r.u64();
  mc.hidden = r.u64();
  auto& tc = ck.train;
  tc.nodes = r.u64();
  tc.stride = r.u64();
  tc.epochs = r.u64();
  tc.batch_size = r.u64();
  tc.lr_decay_every = r.u64();
  tc.patience = r.u64();
  tc.lr0 = r.f64();
  tc.lr_decay_factor = r.f64();
  tc.weight_decay = r.f64();
  tc.edge_dropout = r.f64();
  tc.seed = r.u64();
  tc.kind = ck.model.kind;
  tc.model = mc;
  ck.epoch = r.u64();

  try {
    mc.validate();
  } catch (const ContractViolation& e) {
    throw CorruptFileError(std::string("checkpoint: invalid model configuration: ") + e.what());
  }
  if (expected != nullptr && !(*expected == mc))
    throw ConfigMismatchError("checkpoint: stored model configuration (C=" + std::to_string(mc.width) +
                              ", n=" + std::to_string(mc.attention_factor) + ", R=" + std::to_string(mc.rounds) +
                              ") differs from the requested one (C=" + std::to_string(expected->width) +
                              ", n=" + std::to_string(expected->attention_factor) +
                              ", R=" + std::to_string(expected->rounds) + ")");

  // The block layout is fully determined by kind and configuration.
  Rng scratch(0);
  Model reference = init_model(ck.model.kind, mc, scratch);
  const std::uint64_t blocks = r.u64();
  if (blocks != reference.params.size()) throw CorruptFileError("checkpoint: unexpected parameter block count");
  for (auto& p : reference.params) {
    const std::string name = r.str();
    const std::uint64_t rows = r.u64();
    const std::uint64_t cols = r.u64();
    if (name != p.name || rows != p.value.rows || cols != p.value.cols)
      throw CorruptFileError("checkpoint: parameter block '" + name + "' does not match the stored configuration");
    for (Matrix* m : {&p.value, &p.adam_m, &p.adam_v})
      for (auto& v : m->data) v = r.f64();
    p.step_count = r.i64();
    p.zero_grad();
  }
  ck.model.params = std::move(reference.params);
  ck.rng_state = r.str();
  if (!r.at_end()) throw CorruptFileError("checkpoint: trailing bytes");
  rng_from_state(ck.rng_state);
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  io::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr) {
  return decode_checkpoint(io::read_file(path), expected);
}

}  // namespace gnnreloc
