#pragma once

// Optimization loop and the ablation runner built on top of it.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "gnnreloc/error.hpp"
#include "gnnreloc/gnn.hpp"
#include "gnnreloc/inference.hpp"
#include "gnnreloc/retrieval.hpp"
#include "gnnreloc/training.hpp"

namespace gnnreloc {

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<double> val_median_translation_m;
  std::optional<double> val_median_rotation_deg;
};

struct FitResult {
  Checkpoint checkpoint;
  std::vector<EpochMetrics> log;
  bool stopped_early = false;
};

inline std::vector<RelPoseTarget> edge_targets(const std::vector<OrderedEdge>& edges, std::span<const Pose> poses) {
  std::vector<RelPoseTarget> out;
  out.reserve(edges.size());
  for (const auto& e : edges) out.push_back(relative_target(poses[e.from], poses[e.to]));
  return out;
}

// Loss of one graph on a fresh tape; accumulates gradients scaled by
// `grad_scale` into the model when grad_scale != 0.
inline double graph_step(Model& model, std::span<const std::vector<double>> features, std::span<const Pose> poses,
                         const EdgeMask& mask, double grad_scale) {
  Tape tape;
  const auto preds = model_forward(tape, model, features, mask, model.config.rounds);
  const auto targets = edge_targets(preds.edges, poses);
  const Var beta = tape.param(model.params.at(param_names::kBeta));
  const Var gamma = tape.param(model.params.at(param_names::kGamma));
  const Var loss = graph_loss(tape, preds.pose, targets, beta, gamma);
  const double value = tape.value(loss)[0];
  if (!std::isfinite(value)) throw NonFiniteLossError("non-finite training loss");
  if (grad_scale != 0.0) tape.backward(loss, grad_scale);
  return value;
}

// Mean query-graph loss over records with poses; every edge active.
inline double validation_loss(const std::vector<ImageRecord>& records, const EmbeddingDatabase& db,
                              const Checkpoint& ck) {
  double sum = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& q = records[i];
    const GraphSpec g = query_graph_for(q, db, ck.train, {}, i);
    const auto features = gather_features(g, db, &q);
    std::vector<Pose> poses{q.pose};
    for (std::size_t n = 1; n < g.node_count(); ++n) poses.push_back(db[g.db_index[n]].pose);
    Tape tape;
    const Model& model = ck.model;
    const auto preds = model_forward(tape, model, features, EdgeMask(g.node_count(), true), model.config.rounds);
    std::vector<RelPoseTarget> p;
    for (const Var v : preds.pose) p.push_back(to_rel_pose(tape.value(v)));
    sum += graph_loss(p, edge_targets(preds.edges, poses), model.params.at(param_names::kBeta).value[0],
                      model.params.at(param_names::kGamma).value[0]);
  }
  return sum / static_cast<double>(records.size());
}

// Anchors are shuffled every epoch; each anchor yields one training graph with
// a freshly drawn stride offset and dropout mask. The batch loss is the mean of
// its graph losses. With a validation set, training stops after `patience`
// epochs without validation-loss improvement and the best weights are returned.
inline FitResult fit(const EmbeddingDatabase& db, const TrainConfig& cfg,
                     const std::vector<ImageRecord>* validation = nullptr,
                     const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  cfg.validate();
  if (db.feature_dim() != cfg.model.width)
    throw DimensionMismatchError("fit: dataset feature width " + std::to_string(db.feature_dim()) +
                                 " does not match model width " + std::to_string(cfg.model.width));
  require(db.size() >= cfg.nodes, "fit: database smaller than the graph size");
  for (const auto& r : db.records()) require(r.has_pose, "fit: training record '" + r.id + "' has no pose");

  Rng rng(cfg.seed);
  FitResult result;
  Checkpoint& ck = result.checkpoint;
  ck.train = cfg;
  ck.train.kind = cfg.kind;
  ck.model = init_model(cfg.kind, cfg.model, rng);

  std::vector<std::size_t> order(db.size());
  std::iota(order.begin(), order.end(), 0);
  std::optional<Checkpoint> best;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  std::vector<std::vector<double>> features;
  std::vector<Pose> poses;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(stop - start);
      for (std::size_t b = start; b < stop; ++b) {
        const GraphSpec g = cfg.graph_mode == GraphMode::Random
                                ? build_random_graph(db, order[b], cfg.nodes, rng)
                                : build_training_graph(db, order[b], cfg.nodes, cfg.stride, rng);
        const EdgeMask mask = apply_edge_dropout(g.node_count(), cfg.edge_dropout, rng);
        features = gather_features(g, db);
        poses.clear();
        for (const std::size_t n : g.db_index) poses.push_back(db[n].pose);
        loss_sum += graph_step(ck.model, features, poses, mask, scale);
      }
      adam_step(ck.model.params, lr, cfg.weight_decay);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = loss_sum / static_cast<double>(order.size());
    ck.epoch = epoch + 1;
    ck.rng_state = rng_state(rng);

    bool stop = false;
    if (validation != nullptr && !validation->empty()) {
      m.val_loss = validation_loss(*validation, db, ck);
      const EvalReport rep = evaluate(*validation, db, ck);
      m.val_median_translation_m = rep.median_translation_m;
      m.val_median_rotation_deg = rep.median_rotation_deg;
      if (*m.val_loss < best_val) {
        best_val = *m.val_loss;
        best = ck;
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        stop = true;
      }
    }
    result.log.push_back(m);
    if (on_epoch) on_epoch(m);
    if (stop) {
      result.stopped_early = true;
      break;
    }
  }
  if (best) ck = *best;
  ck.rng_state = ck.rng_state.empty() ? rng_state(rng) : ck.rng_state;
  return result;
}

// ---------------------------------------------------------------------------
// Ablation

enum class AblationMode { Full, Baseline1, Baseline2 };

inline const char* to_string(AblationMode m) {
  switch (m) {
    case AblationMode::Full:
      return "full";
    case AblationMode::Baseline1:
      return "baseline1";
    case AblationMode::Baseline2:
      return "baseline2";
  }
  return "?";
}

inline AblationMode parse_ablation_mode(const std::string& s) {
  if (s == "full") return AblationMode::Full;
  if (s == "baseline1") return AblationMode::Baseline1;
  if (s == "baseline2") return AblationMode::Baseline2;
  throw ContractViolation("unknown ablation mode '" + s + "' (expected full, baseline1 or baseline2)");
}

// Full: the retrieval GNN. Baseline1: pair regressor on the same
// retrieval-built training graphs (no message passing). Baseline2: the GNN
// with uniformly random graphs at train and test time.
inline TrainConfig ablation_config(AblationMode mode, TrainConfig base) {
  base.kind = mode == AblationMode::Baseline1 ? ModelKind::PairRegressor : ModelKind::Gnn;
  base.graph_mode = mode == AblationMode::Baseline2 ? GraphMode::Random : GraphMode::Retrieval;
  return base;
}

struct AblationEntry {
  AblationMode mode = AblationMode::Full;
  std::uint64_t seed = 0;
  EvalReport report;
};

struct AblationReport {
  std::vector<AblationEntry> entries;  // mode-major, then seed
};

inline AblationReport run_ablation(const std::vector<AblationMode>& modes, const EmbeddingDatabase& train_db,
                                   const std::vector<ImageRecord>& test_records, const TrainConfig& base,
                                   const std::vector<std::uint64_t>& seeds,
                                   const std::function<void(const AblationEntry&)>& on_entry = {}) {
  require(!modes.empty() && !seeds.empty(), "run_ablation: need at least one mode and one seed");
  AblationReport out;
  for (const auto mode : modes) {
    for (const auto seed : seeds) {
      TrainConfig cfg = ablation_config(mode, base);
      cfg.seed = seed;
      const FitResult fr = fit(train_db, cfg);
      AblationEntry e{mode, seed, evaluate(test_records, train_db, fr.checkpoint)};
      if (on_entry) on_entry(e);
      out.entries.push_back(std::move(e));
    }
  }
  return out;
}

inline std::string format_ablation(const AblationReport& r) {
  std::ostringstream s;
  s << "report=ablation\n";
  for (const auto& e : r.entries)
    s << "run mode=" << to_string(e.mode) << " seed=" << e.seed
      << " median_translation_m=" << format_double(e.report.median_translation_m)
      << " median_rotation_deg=" << format_double(e.report.median_rotation_deg) << '\n';
  // Per-mode summary: median over seeds of the per-seed medians.
  std::vector<AblationMode> seen;
  for (const auto& e : r.entries)
    if (std::find(seen.begin(), seen.end(), e.mode) == seen.end()) seen.push_back(e.mode);
  for (const auto mode : seen) {
    std::vector<double> t, q;
    for (const auto& e : r.entries)
      if (e.mode == mode) {
        t.push_back(e.report.median_translation_m);
        q.push_back(e.report.median_rotation_deg);
      }
    s << "mode name=" << to_string(mode) << " seeds=" << t.size()
      << " median_translation_m=" << format_double(lower_median(t))
      << " median_rotation_deg=" << format_double(lower_median(q)) << '\n';
  }
  return s.str();
}

}  // namespace gnnreloc
