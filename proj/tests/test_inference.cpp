#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "gnnreloc/fit.hpp"
#include "gnnreloc/synth.hpp"

using namespace gnnreloc;

namespace {

SceneConfig small_scene() {
  SceneConfig s;
  s.train_count = 60;
  s.test_count = 12;
  s.embedding_dim = 16;
  s.feature_dim = 8;
  return s;
}

TrainConfig small_train(std::size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.model = {8, 2, 2, 0};
  c.nodes = 5;
  c.stride = 3;
  c.lr0 = 1e-3;
  return c;
}

// Untrained checkpoint whose pose head outputs exactly zero.
Checkpoint zero_head_checkpoint(const TrainConfig& c) {
  Checkpoint ck;
  ck.train = c;
  Rng rng(c.seed);
  ck.model = init_model(c.kind, c.model, rng);
  ck.model.params.at("pose.W").value.fill(0.0);
  ck.model.params.at("pose.b").value.fill(0.0);
  return ck;
}

std::vector<ImageRecord> as_queries(const std::vector<ImageRecord>& recs) {
  std::vector<ImageRecord> q = recs;
  for (auto& r : q) r.id = "q_" + r.id;
  return q;
}

}  // namespace

TEST(LowerMedian, Convention) {
  EXPECT_EQ(lower_median({1.0, 2.0, 3.0, 4.0}), 2.0);
  EXPECT_EQ(lower_median({4.0, 1.0, 3.0, 2.0}), 2.0);
  EXPECT_EQ(lower_median({5.0, 1.0, 3.0}), 3.0);
  EXPECT_EQ(lower_median({7.0}), 7.0);
  EXPECT_THROW(lower_median({}), ContractViolation);
}

TEST(Localize, ZeroPredictionOnExactMatchReturnsThatPose) {
  const Scene s = generate_scene(small_scene());
  const auto db = to_database(s.train);
  const Checkpoint ck = zero_head_checkpoint(small_train(0));
  const auto queries = as_queries({s.train.records.begin(), s.train.records.begin() + 10});
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const Localization loc = localize(queries[i], db, ck, {}, i);
    EXPECT_EQ(loc.graph.db_index[1], i);
    EXPECT_EQ(loc.pose.t, db[i].pose.t);
    EXPECT_NEAR(rotation_error_deg(loc.pose.q, db[i].pose.q), 0.0, 1e-9);  // exp(log q) is q to rounding
  }
  const EvalReport rep = evaluate(queries, db, ck);
  EXPECT_EQ(rep.median_translation_m, 0.0);
  EXPECT_NEAR(rep.median_rotation_deg, 0.0, 1e-9);
  EXPECT_EQ(rep.query_count, 10u);
}

TEST(Localize, EstimatesUseTheDatabaseToQueryEdge) {
  const Scene s = generate_scene(small_scene());
  const auto db = to_database(s.train);
  const Checkpoint ck = fit(db, small_train(2)).checkpoint;
  const ImageRecord& q = s.test.records[3];
  const Localization loc = localize(q, db, ck);
  const std::size_t N = loc.graph.node_count();
  ASSERT_EQ(loc.estimates.size(), N - 1);

  // Independent evaluation of the query graph; pick edge (i -> 0) by search.
  Tape t;
  const auto preds = model_forward(t, ck.model, gather_features(loc.graph, db, &q), EdgeMask(N), 2);
  for (std::size_t i = 1; i < N; ++i) {
    const auto it = std::find(preds.edges.begin(), preds.edges.end(), OrderedEdge{i, 0});
    ASSERT_NE(it, preds.edges.end());
    const RelPoseTarget rel = to_rel_pose(t.value(preds.pose[static_cast<std::size_t>(it - preds.edges.begin())]));
    EXPECT_EQ(loc.estimates[i - 1], recover_absolute(db[loc.graph.db_index[i]].pose, rel));
  }
  EXPECT_EQ(loc.pose, loc.estimates.front());
}

TEST(Localize, AveragingOfIdenticalEstimatesIsTheDefaultPose) {
  // Every database image shares one pose, so all estimates coincide.
  Rng rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  const Pose shared{{0.5, 1.0, -0.25}, quat_exp({0.1, -0.2, 0.05})};
  std::vector<ImageRecord> recs;
  for (int i = 0; i < 20; ++i) {
    ImageRecord r;
    r.id = "r" + std::to_string(i);
    std::vector<double> e(6);
    double nn = 0.0;
    for (auto& v : e) {
      v = n(rng);
      nn += v * v;
    }
    for (auto& v : e) v /= std::sqrt(nn);
    r.retrieval_embedding = e;
    r.feature_vector.assign(8, 0.0);
    for (auto& v : r.feature_vector) v = n(rng);
    r.pose = shared;
    recs.push_back(r);
  }
  const EmbeddingDatabase db(recs);
  Checkpoint ck = zero_head_checkpoint(small_train(0));
  ck.model.params.at("pose.b").value = Matrix::column({0.1, -0.2, 0.3, 0.01, 0.02, -0.01});
  ImageRecord q = recs[4];
  q.id = "query";
  const Pose plain = localize(q, db, ck).pose;
  LocalizeOptions ga;
  ga.use_geometric_averaging = true;
  const Pose avg = localize(q, db, ck, ga).pose;
  EXPECT_NEAR(translation_error_m(plain.t, avg.t), 0.0, 1e-12);
  EXPECT_NEAR(rotation_error_deg(plain.q, avg.q), 0.0, 1e-5);
}

TEST(Localize, GeometricAveragingFusesAllEstimates) {
  const Scene s = generate_scene(small_scene());
  const auto db = to_database(s.train);
  const Checkpoint ck = fit(db, small_train(2)).checkpoint;
  LocalizeOptions ga;
  ga.use_geometric_averaging = true;
  const Localization loc = localize(s.test.records[0], db, ck, ga);
  std::vector<Vec3> ts;
  std::vector<UnitQuaternion> qs;
  for (const auto& e : loc.estimates) {
    ts.push_back(e.t);
    qs.push_back(e.q);
  }
  EXPECT_EQ(loc.pose.t, weiszfeld_median(ts));
  EXPECT_EQ(loc.pose.q, quaternion_mean(qs));
}

TEST(Localize, DoesNotMutateCheckpoint) {
  const Scene s = generate_scene(small_scene());
  const auto db = to_database(s.train);
  const Checkpoint ck = fit(db, small_train(1)).checkpoint;
  const Checkpoint copy = ck;
  (void)evaluate(s.test.records, db, ck);
  EXPECT_EQ(encode_checkpoint(ck), encode_checkpoint(copy));
}

TEST(Localize, RoundOverrideChangesPrediction) {
  const Scene s = generate_scene(small_scene());
  const auto db = to_database(s.train);
  const Checkpoint ck = fit(db, small_train(2)).checkpoint;
  LocalizeOptions one;
  one.rounds_override = 1;
  EXPECT_NE(localize(s.test.records[0], db, ck).pose, localize(s.test.records[0], db, ck, one).pose);
}

TEST(Evaluate, ErrorsAndDeterminism) {
  const Scene s = generate_scene(small_scene());
  const auto db = to_database(s.train);
  const Checkpoint ck = fit(db, small_train(1)).checkpoint;
  EXPECT_THROW(evaluate({}, db, ck), ContractViolation);
  auto no_pose = s.test.records;
  no_pose[2].has_pose = false;
  EXPECT_THROW(evaluate(no_pose, db, ck), ContractViolation);

  const std::string a = format_report(evaluate(s.test.records, db, ck));
  const std::string b = format_report(evaluate(s.test.records, db, ck));
  EXPECT_EQ(a, b);
  EXPECT_NE(a.find("median_translation_m="), std::string::npos);
  EXPECT_NE(a.find("query index=11 id=test_00011"), std::string::npos);
}

TEST(Evaluate, MediansArePermutationInvariant) {
  const Scene s = generate_scene(small_scene());
  const auto db = to_database(s.train);
  const Checkpoint ck = fit(db, small_train(2)).checkpoint;
  auto rev = s.test.records;
  std::reverse(rev.begin(), rev.end());
  const EvalReport a = evaluate(s.test.records, db, ck);
  const EvalReport b = evaluate(rev, db, ck);
  EXPECT_EQ(a.median_translation_m, b.median_translation_m);
  EXPECT_EQ(a.median_rotation_deg, b.median_rotation_deg);
}

TEST(Ablation, FullModeEqualsStandaloneRun) {
  const Scene s = generate_scene(small_scene());
  const auto db = to_database(s.train);
  TrainConfig c = small_train(2);
  c.seed = 5;
  const AblationReport rep = run_ablation({AblationMode::Full}, db, s.test.records, c, {5});
  const EvalReport direct = evaluate(s.test.records, db, fit(db, c).checkpoint);
  ASSERT_EQ(rep.entries.size(), 1u);
  EXPECT_EQ(format_report(rep.entries[0].report), format_report(direct));
}

TEST(Ablation, ReportShape) {
  const Scene s = generate_scene(small_scene());
  const auto db = to_database(s.train);
  const AblationReport rep = run_ablation({AblationMode::Baseline1, AblationMode::Baseline2}, db, s.test.records,
                                          small_train(1), {0, 1});
  ASSERT_EQ(rep.entries.size(), 4u);
  EXPECT_EQ(rep.entries[0].mode, AblationMode::Baseline1);
  EXPECT_EQ(rep.entries[3].mode, AblationMode::Baseline2);
  EXPECT_EQ(rep.entries[3].seed, 1u);
  const std::string text = format_ablation(rep);
  EXPECT_NE(text.find("mode name=baseline1 seeds=2 median_translation_m="), std::string::npos);
  EXPECT_NE(text.find("mode name=baseline2 seeds=2 median_translation_m="), std::string::npos);
  EXPECT_EQ(text.find("mode name=full"), std::string::npos);
  EXPECT_NE(text.find("median_rotation_deg="), std::string::npos);
}

TEST(Ablation, ModeParsing) {
  EXPECT_EQ(parse_ablation_mode("baseline2"), AblationMode::Baseline2);
  EXPECT_THROW(parse_ablation_mode("baseline3"), ContractViolation);
  EXPECT_EQ(ablation_config(AblationMode::Baseline1, {}).kind, ModelKind::PairRegressor);
  EXPECT_EQ(ablation_config(AblationMode::Baseline2, {}).graph_mode, GraphMode::Random);
}

TEST(RandomGraphMode, QueryGraphsAreRepeatable) {
  const Scene s = generate_scene(small_scene());
  const auto db = to_database(s.train);
  TrainConfig c = small_train(0);
  c.graph_mode = GraphMode::Random;
  const Checkpoint ck = fit(db, c).checkpoint;
  const auto g1 = localize(s.test.records[0], db, ck, {}, 0).graph;
  const auto g2 = localize(s.test.records[0], db, ck, {}, 0).graph;
  const auto g3 = localize(s.test.records[0], db, ck, {}, 1).graph;
  EXPECT_EQ(g1, g2);
  EXPECT_NE(g1, g3);
}
