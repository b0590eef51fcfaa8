#pragma once

// Embedding database, cosine nearest-neighbour retrieval, strided neighbour
// subsampling and fully connected graph construction.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gnnreloc/error.hpp"
#include "gnnreloc/pose_math.hpp"
#include "gnnreloc/tensor.hpp"

namespace gnnreloc {

struct ImageRecord {
  std::string id;
  std::vector<double> retrieval_embedding;  // unit L2 norm
  std::vector<double> feature_vector;       // node initialization
  Pose pose;
  bool has_pose = true;

  bool operator==(const ImageRecord&) const = default;
};

// Immutable after construction; safe to share across threads.
class EmbeddingDatabase {
 public:
  EmbeddingDatabase() = default;
  explicit EmbeddingDatabase(std::vector<ImageRecord> records) : records_(std::move(records)) {
    for (std::size_t i = 0; i < records_.size(); ++i) {
      const auto& r = records_[i];
      if (i == 0) {
        emb_dim_ = r.retrieval_embedding.size();
        feat_dim_ = r.feature_vector.size();
      }
      if (r.retrieval_embedding.size() != emb_dim_ || r.feature_vector.size() != feat_dim_)
        throw DimensionMismatchError("EmbeddingDatabase: record '" + r.id + "' has inconsistent dimensions");
      double n2 = 0.0;
      for (double v : r.retrieval_embedding) n2 += v * v;
      if (std::abs(std::sqrt(n2) - 1.0) > 1e-6)
        throw ContractViolation("EmbeddingDatabase: retrieval embedding of '" + r.id + "' is not unit norm");
      if (!index_.emplace(r.id, i).second) throw ContractViolation("EmbeddingDatabase: duplicate id '" + r.id + "'");
    }
  }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const ImageRecord& operator[](std::size_t i) const { return records_[i]; }
  const std::vector<ImageRecord>& records() const { return records_; }
  std::size_t embedding_dim() const { return emb_dim_; }
  std::size_t feature_dim() const { return feat_dim_; }

  std::optional<std::size_t> index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::vector<ImageRecord> records_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t emb_dim_ = 0;
  std::size_t feat_dim_ = 0;
};

// Node 0 is the anchor (training) or the query (test time).
struct GraphSpec {
  static constexpr std::size_t kNotInDatabase = std::numeric_limits<std::size_t>::max();

  std::vector<std::string> node_ids;
  std::vector<std::size_t> db_index;  // kNotInDatabase for a query node
  bool is_query_graph = false;

  std::size_t node_count() const { return node_ids.size(); }
  static constexpr std::size_t anchor_index() { return 0; }
  bool operator==(const GraphSpec&) const = default;
};

// Database indices sorted by descending cosine similarity to `query`, ties by
// ascending index. `exclude` (a database index) is never returned.
inline std::vector<std::size_t> knn(const EmbeddingDatabase& db, std::span<const double> query, std::size_t count,
                                    std::optional<std::size_t> exclude = std::nullopt) {
  if (query.size() != db.embedding_dim())
    throw DimensionMismatchError("knn: query has dimension " + std::to_string(query.size()) + ", database has " +
                                 std::to_string(db.embedding_dim()));
  const std::size_t usable = db.size() - (exclude && *exclude < db.size() ? 1 : 0);
  if (count > usable)
    throw ContractViolation("knn: requested " + std::to_string(count) + " neighbours but only " +
                            std::to_string(usable) + " records are available");

  double qn = 0.0;
  for (double v : query) qn += v * v;
  qn = qn > 0.0 ? 1.0 / std::sqrt(qn) : 0.0;

  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(db.size());
  for (std::size_t i = 0; i < db.size(); ++i) {
    if (exclude && *exclude == i) continue;
    const auto& e = db[i].retrieval_embedding;
    double s = 0.0;
    for (std::size_t d = 0; d < e.size(); ++d) s += e[d] * query[d];
    scored.emplace_back(s * qn, i);
  }
  auto by_similarity = [](const auto& a, const auto& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(count), scored.end(),
                    by_similarity);
  std::vector<std::size_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = scored[i].second;
  return out;
}

// Elements k, k+K, ..., k+(N-2)K of a sorted pool. When the pool is shorter
// than (N-1)K the stride shrinks to max(1, |pool| / (N-1)) and k wraps to it.
template <typename T>
std::vector<T> strided_subsample(std::span<const T> sorted, std::size_t nodes, std::size_t stride,
                                 std::size_t offset) {
  require(nodes >= 2, "strided_subsample: need at least 2 nodes");
  require(stride >= 1 && offset < stride, "strided_subsample: need 0 <= offset < stride");
  const std::size_t picks = nodes - 1;
  if (sorted.size() < picks)
    throw ContractViolation("strided_subsample: pool of " + std::to_string(sorted.size()) +
                            " cannot supply " + std::to_string(picks) + " neighbours");
  if (sorted.size() < picks * stride) {
    stride = std::max<std::size_t>(1, sorted.size() / picks);
    offset %= stride;
  }
  std::vector<T> out;
  out.reserve(picks);
  for (std::size_t m = 0; m < picks; ++m) out.push_back(sorted[offset + m * stride]);
  return out;
}

namespace detail {

inline GraphSpec make_graph(const EmbeddingDatabase& db, std::string first_id, std::size_t first_index,
                            std::span<const std::size_t> neighbours, bool query) {
  GraphSpec g;
  g.is_query_graph = query;
  g.node_ids.reserve(neighbours.size() + 1);
  g.node_ids.push_back(std::move(first_id));
  g.db_index.push_back(first_index);
  for (const std::size_t n : neighbours) {
    g.node_ids.push_back(db[n].id);
    g.db_index.push_back(n);
  }
  return g;
}

inline std::size_t pool_size(std::size_t available, std::size_t nodes, std::size_t stride) {
  if (available < nodes - 1)
    throw ContractViolation("graph construction: database has " + std::to_string(available) +
                            " usable records, need at least " + std::to_string(nodes - 1));
  return std::min((nodes - 1) * stride, available);
}

}  // namespace detail

// Retrieves (N-1)K neighbours of the anchor and keeps every K-th starting at
// an offset drawn uniformly from [0, K).
inline GraphSpec build_training_graph(const EmbeddingDatabase& db, std::size_t anchor, std::size_t nodes,
                                      std::size_t stride, Rng& rng) {
  require(anchor < db.size(), "build_training_graph: anchor out of range");
  require(nodes >= 2 && stride >= 1, "build_training_graph: need N >= 2 and K >= 1");
  const std::size_t offset = std::uniform_int_distribution<std::size_t>(0, stride - 1)(rng);
  const std::size_t pool = detail::pool_size(db.size() - 1, nodes, stride);
  const auto sorted = knn(db, db[anchor].retrieval_embedding, pool, anchor);
  const auto picked = strided_subsample<std::size_t>(sorted, nodes, stride, offset);
  return detail::make_graph(db, db[anchor].id, anchor, picked, false);
}

// Test-time construction: same retrieval, offset fixed at 0.
inline GraphSpec build_query_graph(const EmbeddingDatabase& db, std::span<const double> query_embedding,
                                   std::size_t nodes, std::size_t stride, std::string query_id = "query") {
  require(nodes >= 2 && stride >= 1, "build_query_graph: need N >= 2 and K >= 1");
  const std::size_t pool = detail::pool_size(db.size(), nodes, stride);
  const auto sorted = knn(db, query_embedding, pool);
  const auto picked = strided_subsample<std::size_t>(sorted, nodes, stride, 0);
  return detail::make_graph(db, std::move(query_id), GraphSpec::kNotInDatabase, picked, true);
}

namespace detail {

inline std::vector<std::size_t> sample_without_replacement(std::size_t universe, std::size_t count,
                                                           std::optional<std::size_t> exclude, Rng& rng) {
  std::vector<std::size_t> pool;
  pool.reserve(universe);
  for (std::size_t i = 0; i < universe; ++i)
    if (!exclude || *exclude != i) pool.push_back(i);
  for (std::size_t m = 0; m < count; ++m) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(m, pool.size() - 1)(rng);
    std::swap(pool[m], pool[j]);
  }
  pool.resize(count);
  return pool;
}

}  // namespace detail

// N-1 distinct neighbours drawn uniformly, anchor excluded.
inline GraphSpec build_random_graph(const EmbeddingDatabase& db, std::size_t anchor, std::size_t nodes, Rng& rng) {
  require(anchor < db.size(), "build_random_graph: anchor out of range");
  require(nodes >= 2, "build_random_graph: need N >= 2");
  if (db.size() < nodes)
    throw ContractViolation("build_random_graph: database of " + std::to_string(db.size()) +
                            " records is smaller than N = " + std::to_string(nodes));
  const auto picked = detail::sample_without_replacement(db.size(), nodes - 1, anchor, rng);
  return detail::make_graph(db, db[anchor].id, anchor, picked, false);
}

// Query graph whose N-1 database nodes are drawn uniformly at random.
inline GraphSpec build_random_query_graph(const EmbeddingDatabase& db, std::size_t nodes, Rng& rng,
                                          std::string query_id = "query") {
  require(nodes >= 2, "build_random_query_graph: need N >= 2");
  if (db.size() < nodes - 1)
    throw ContractViolation("build_random_query_graph: database too small");
  const auto picked = detail::sample_without_replacement(db.size(), nodes - 1, std::nullopt, rng);
  return detail::make_graph(db, std::move(query_id), GraphSpec::kNotInDatabase, picked, true);
}

// Number of undirected pairs in a fully connected graph.
inline constexpr std::size_t undirected_edge_count(std::size_t nodes) { return nodes * (nodes - 1) / 2; }
inline constexpr std::size_t ordered_edge_count(std::size_t nodes) { return nodes * (nodes - 1); }

}  // namespace gnnreloc
