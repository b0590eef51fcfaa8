#pragma once

// Query localization and median-error evaluation.

#include <algorithm>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gnnreloc/error.hpp"
#include "gnnreloc/gnn.hpp"
#include "gnnreloc/pose_math.hpp"
#include "gnnreloc/retrieval.hpp"
#include "gnnreloc/training.hpp"

namespace gnnreloc {

struct LocalizeOptions {
  bool use_geometric_averaging = false;
  std::optional<std::size_t> nodes;   // default: checkpoint N
  std::optional<std::size_t> stride;  // default: checkpoint K
  // Evaluating with a round count other than the trained one is only done on
  // explicit request; it is known to degrade accuracy badly.
  std::optional<std::size_t> rounds_override;
};

struct Localization {
  Pose pose;
  std::vector<Pose> estimates;  // one per database node, in graph order (node 1 first)
  GraphSpec graph;
};

// Graph for a query under the checkpoint's construction mode. Random graphs are
// seeded from the checkpoint seed and the query index so runs are repeatable.
inline GraphSpec query_graph_for(const ImageRecord& query, const EmbeddingDatabase& db, const TrainConfig& tc,
                                 const LocalizeOptions& opt, std::size_t query_index) {
  const std::size_t N = opt.nodes.value_or(tc.nodes);
  const std::size_t K = opt.stride.value_or(tc.stride);
  if (tc.graph_mode == GraphMode::Random) {
    Rng rng(tc.seed * 1000003ULL + query_index + 17);
    return build_random_query_graph(db, N, rng, query.id);
  }
  return build_query_graph(db, query.retrieval_embedding, N, K, query.id);
}

// The prediction on the directed edge (database node i -> query) is the
// query's pose relative to node i. Without averaging the most similar
// neighbour (node 1) decides; with averaging, all N-1 estimates are fused.
inline Localization localize(const ImageRecord& query, const EmbeddingDatabase& db, const Checkpoint& ck,
                             const LocalizeOptions& opt = {}, std::size_t query_index = 0) {
  require(!db.empty(), "localize: empty database");
  require(query.feature_vector.size() == ck.model.config.width, "localize: query feature width mismatch");
  Localization out;
  out.graph = query_graph_for(query, db, ck.train, opt, query_index);
  const std::size_t N = out.graph.node_count();
  const auto features = gather_features(out.graph, db, &query);

  Tape tape;
  const Model& model = ck.model;
  const EdgeMask all(N, true);
  const auto preds = model_forward(tape, model, features, all, opt.rounds_override.value_or(model.config.rounds));

  out.estimates.reserve(N - 1);
  for (std::size_t i = 1; i < N; ++i) {
    // Row-major enumeration of a full mask: edge (i, 0) sits at i * (N - 1).
    const std::size_t k = i * (N - 1);
    const RelPoseTarget rel = to_rel_pose(tape.value(preds.pose[k]));
    out.estimates.push_back(recover_absolute(db[out.graph.db_index[i]].pose, rel));
  }

  if (!opt.use_geometric_averaging) {
    out.pose = out.estimates.front();
    return out;
  }
  std::vector<Vec3> ts;
  std::vector<UnitQuaternion> qs;
  for (const auto& e : out.estimates) {
    ts.push_back(e.t);
    qs.push_back(e.q);
  }
  out.pose = {weiszfeld_median(ts), quaternion_mean(qs)};
  return out;
}

struct QueryError {
  std::string id;
  double translation_m = 0.0;
  double rotation_deg = 0.0;
};

struct EvalReport {
  std::vector<QueryError> per_query;
  double median_translation_m = 0.0;
  double median_rotation_deg = 0.0;
  std::size_t query_count = 0;
  bool geometric_averaging = false;
};

// Lower of the two middle order statistics for even counts.
inline double lower_median(std::vector<double> v) {
  require(!v.empty(), "lower_median: empty input");
  const std::size_t k = (v.size() - 1) / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  return v[k];
}

inline EvalReport evaluate(const std::vector<ImageRecord>& queries, const EmbeddingDatabase& db, const Checkpoint& ck,
                           const LocalizeOptions& opt = {}) {
  if (queries.empty()) throw ContractViolation("evaluate: empty test set");
  EvalReport rep;
  rep.geometric_averaging = opt.use_geometric_averaging;
  rep.query_count = queries.size();
  std::vector<double> terr, rerr;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto& q = queries[i];
    if (!q.has_pose) throw ContractViolation("evaluate: query '" + q.id + "' has no ground-truth pose");
    const Pose est = localize(q, db, ck, opt, i).pose;
    QueryError e{q.id, translation_error_m(est.t, q.pose.t), rotation_error_deg(est.q, q.pose.q)};
    terr.push_back(e.translation_m);
    rerr.push_back(e.rotation_deg);
    rep.per_query.push_back(std::move(e));
  }
  rep.median_translation_m = lower_median(terr);
  rep.median_rotation_deg = lower_median(rerr);
  return rep;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// Line-delimited key=value document; per-query rows follow the summary.
inline std::string format_report(const EvalReport& r) {
  std::ostringstream s;
  s << "report=eval\n";
  s << "queries=" << r.query_count << '\n';
  s << "geometric_averaging=" << (r.geometric_averaging ? 1 : 0) << '\n';
  s << "median_translation_m=" << format_double(r.median_translation_m) << '\n';
  s << "median_rotation_deg=" << format_double(r.median_rotation_deg) << '\n';
  for (std::size_t i = 0; i < r.per_query.size(); ++i) {
    const auto& q = r.per_query[i];
    s << "query index=" << i << " id=" << q.id << " translation_m=" << format_double(q.translation_m)
      << " rotation_deg=" << format_double(q.rotation_deg) << '\n';
  }
  return s.str();
}

}  // namespace gnnreloc
