// Command-line driver: generate | train | eval | localize | ablate | gradcheck.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gnnreloc/gnnreloc.hpp"
#include "gnnreloc/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace gnnreloc;

namespace {

enum class LogLevel { Quiet = 0, Info = 1, Debug = 2 };

LogLevel log_level() {
  const char* env = std::getenv("GNNRELOC_LOG");
  if (env == nullptr) return LogLevel::Info;
  const std::string v(env);
  if (v == "quiet" || v == "0") return LogLevel::Quiet;
  if (v == "debug" || v == "2") return LogLevel::Debug;
  return LogLevel::Info;
}

void print_config(const std::vector<std::pair<std::string, std::string>>& kv) {
  for (const auto& [k, v] : kv) std::cout << "config." << k << '=' << v << '\n';
  std::cout.flush();
}

std::string num(double v) { return format_double(v); }
std::string num(std::size_t v) { return std::to_string(v); }
std::string num(std::uint64_t v, int) { return std::to_string(v); }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw Error("failed writing '" + path + "'");
}

std::string train_path(const std::string& dir) { return (fs::path(dir) / "train.gnnr").string(); }
std::string test_path(const std::string& dir) { return (fs::path(dir) / "test.gnnr").string(); }

// Binary dataset, or the plain-text import format for *.txt.
Dataset load_any_dataset(const std::string& path) {
  if (fs::path(path).extension() == ".txt") return read_text_dataset(path);
  return read_dataset(path);
}

struct TrainFlags {
  std::size_t epochs = 50;
  std::size_t batch = 8;
  double lr = 5e-5;
  double wd = 5e-4;
  double edge_dropout = 0.5;
  std::size_t nodes = 8;
  std::size_t stride = 5;
  std::size_t rounds = 2;
  std::size_t width = 0;  // 0: dataset feature width
  std::size_t attention_factor = 4;
  std::size_t hidden = 0;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--epochs", f.epochs, "training epochs")->capture_default_str();
  cmd->add_option("--batch", f.batch, "graphs per optimizer step")->capture_default_str();
  cmd->add_option("--lr", f.lr, "initial learning rate (divided by 10 every 20 epochs)")->capture_default_str();
  cmd->add_option("--wd", f.wd, "weight decay")->capture_default_str();
  cmd->add_option("--edge-dropout", f.edge_dropout, "edge dropout probability")->capture_default_str();
  cmd->add_option("--nodes", f.nodes, "graph size N")->capture_default_str();
  cmd->add_option("--stride", f.stride, "retrieval stride K")->capture_default_str();
  cmd->add_option("--rounds", f.rounds, "message-passing rounds R")->capture_default_str();
  cmd->add_option("--width", f.width, "feature width C (default: dataset feature width)");
  cmd->add_option("--attention-factor", f.attention_factor, "attention down-sampling factor n")
      ->capture_default_str();
  cmd->add_option("--hidden", f.hidden, "MLP hidden width (0 = C)")->capture_default_str();
  cmd->add_option("--patience", f.patience, "early-stopping patience (with --val)")->capture_default_str();
  cmd->add_option("--seed", f.seed, "random seed")->capture_default_str();
}

TrainConfig to_train_config(const TrainFlags& f, std::size_t dataset_width) {
  TrainConfig c;
  c.epochs = f.epochs;
  c.batch_size = f.batch;
  c.lr0 = f.lr;
  c.weight_decay = f.wd;
  c.edge_dropout = f.edge_dropout;
  c.nodes = f.nodes;
  c.stride = f.stride;
  c.patience = f.patience;
  c.model.width = f.width == 0 ? dataset_width : f.width;
  c.model.attention_factor = f.attention_factor;
  c.model.rounds = f.rounds;
  c.model.hidden = f.hidden;
  c.seed = f.seed;
  return c;
}

std::vector<std::pair<std::string, std::string>> describe(const TrainConfig& c) {
  return {{"epochs", num(c.epochs)},
          {"batch", num(c.batch_size)},
          {"lr", num(c.lr0)},
          {"lr_decay_every", num(c.lr_decay_every)},
          {"lr_decay_factor", num(c.lr_decay_factor)},
          {"weight_decay", num(c.weight_decay)},
          {"edge_dropout", num(c.edge_dropout)},
          {"nodes", num(c.nodes)},
          {"stride", num(c.stride)},
          {"rounds", num(c.model.rounds)},
          {"width", num(c.model.width)},
          {"attention_factor", num(c.model.attention_factor)},
          {"hidden", num(c.model.hidden_width())},
          {"patience", num(c.patience)},
          {"model", to_string(c.kind)},
          {"graph_mode", to_string(c.graph_mode)},
          {"seed", num(c.seed, 0)}};
}

nlohmann::json metrics_json(const EpochMetrics& m) {
  nlohmann::json j;
  j["epoch"] = m.epoch;
  j["lr"] = m.lr;
  j["train_loss"] = m.train_loss;
  j["val_loss"] = m.val_loss ? nlohmann::json(*m.val_loss) : nlohmann::json(nullptr);
  j["val_median_translation_m"] =
      m.val_median_translation_m ? nlohmann::json(*m.val_median_translation_m) : nlohmann::json(nullptr);
  j["val_median_rotation_deg"] =
      m.val_median_rotation_deg ? nlohmann::json(*m.val_median_rotation_deg) : nlohmann::json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------

struct GenerateFlags {
  std::string out;
  SceneConfig scene;
  double box_size = 2.0;
  std::string trajectory = "loops";
};

int run_generate(const GenerateFlags& f) {
  SceneConfig sc = f.scene;
  sc.box_min = {0.0, 0.0, 0.0};
  sc.box_max = {f.box_size, f.box_size, f.box_size};
  if (f.trajectory == "random_walk") {
    sc.trajectory = TrajectoryKind::RandomWalk;
  } else if (f.trajectory == "loops") {
    sc.trajectory = TrajectoryKind::Loops;
  } else {
    throw ContractViolation("unknown trajectory kind '" + f.trajectory + "'");
  }
  sc.validate();
  print_config({{"command", "generate"},
                {"out", f.out},
                {"seed", num(sc.seed, 0)},
                {"train_count", num(sc.train_count)},
                {"test_count", num(sc.test_count)},
                {"box_size", num(f.box_size)},
                {"trajectory", to_string(sc.trajectory)},
                {"embedding_dim", num(sc.embedding_dim)},
                {"feature_dim", num(sc.feature_dim)},
                {"feature_noise", num(sc.feature_noise)},
                {"rff_count", num(sc.rff_count)}});
  const Scene scene = generate_scene(sc);
  fs::create_directories(f.out);
  write_dataset(scene.train, train_path(f.out));
  write_dataset(scene.test, test_path(f.out));
  nlohmann::json manifest = {{"seed", sc.seed},
                             {"train_count", sc.train_count},
                             {"test_count", sc.test_count},
                             {"box_min", sc.box_min},
                             {"box_max", sc.box_max},
                             {"trajectory", to_string(sc.trajectory)},
                             {"embedding_dim", sc.embedding_dim},
                             {"feature_dim", sc.feature_dim},
                             {"feature_noise", sc.feature_noise},
                             {"rff_count", sc.rff_count},
                             {"train_file", "train.gnnr"},
                             {"test_file", "test.gnnr"}};
  write_text((fs::path(f.out) / "manifest.json").string(), manifest.dump(2) + "\n");
  std::cout << "wrote " << scene.train.records.size() << " training and " << scene.test.records.size()
            << " test records to " << f.out << '\n';
  return 0;
}

struct TrainCmd {
  std::string data;
  std::string train_file;
  std::string val_file;
  std::string out;
  std::string metrics;
  std::string model = "gnn";
  std::string graph = "retrieval";
  TrainFlags flags;
};

int run_train(const TrainCmd& c) {
  const std::string tpath = !c.train_file.empty() ? c.train_file : train_path(c.data);
  const Dataset train = load_any_dataset(tpath);
  TrainConfig cfg = to_train_config(c.flags, train.feature_dim);
  if (c.model == "gnn") {
    cfg.kind = ModelKind::Gnn;
  } else if (c.model == "pair") {
    cfg.kind = ModelKind::PairRegressor;
  } else {
    throw ContractViolation("unknown model '" + c.model + "' (expected gnn or pair)");
  }
  if (c.graph == "retrieval") {
    cfg.graph_mode = GraphMode::Retrieval;
  } else if (c.graph == "random") {
    cfg.graph_mode = GraphMode::Random;
  } else {
    throw ContractViolation("unknown graph mode '" + c.graph + "' (expected retrieval or random)");
  }
  const std::string metrics_path = c.metrics.empty() ? c.out + ".metrics.jsonl" : c.metrics;
  auto kv = describe(cfg);
  kv.insert(kv.begin(), {{"command", "train"}, {"train", tpath}, {"val", c.val_file}, {"out", c.out},
                         {"metrics", metrics_path}});
  print_config(kv);
  if (train.feature_dim != cfg.model.width)
    throw DimensionMismatchError("dataset feature width " + std::to_string(train.feature_dim) +
                                 " does not match --width " + std::to_string(cfg.model.width));

  const EmbeddingDatabase db = to_database(train);
  std::vector<ImageRecord> val;
  if (!c.val_file.empty()) val = load_any_dataset(c.val_file).records;

  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw Error("cannot open '" + metrics_path + "' for writing");
  const LogLevel level = log_level();
  const auto t0 = std::chrono::steady_clock::now();
  const FitResult fr = fit(db, cfg, val.empty() ? nullptr : &val, [&](const EpochMetrics& m) {
    metrics << metrics_json(m).dump() << '\n';
    metrics.flush();
    if (level >= LogLevel::Info) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "epoch " << m.epoch << " lr=" << num(m.lr) << " train_loss=" << num(m.train_loss);
      if (m.val_loss) std::cerr << " val_loss=" << num(*m.val_loss);
      std::cerr << " elapsed_s=" << num(secs) << '\n';
    }
  });
  save_checkpoint(fr.checkpoint, c.out);
  std::cout << "saved checkpoint " << c.out << " after " << fr.checkpoint.epoch << " epochs"
            << (fr.stopped_early ? " (early stop)" : "") << '\n';
  return 0;
}

struct EvalCmd {
  std::string ckpt;
  std::string db;
  std::string queries;
  std::string out;
  bool geom_avg = false;
  std::size_t rounds = 0;
  bool force_rounds = false;
};

LocalizeOptions eval_options(const EvalCmd& c, const Checkpoint& ck) {
  LocalizeOptions opt;
  opt.use_geometric_averaging = c.geom_avg;
  if (c.rounds != 0 && c.rounds != ck.model.config.rounds) {
    if (!c.force_rounds)
      throw ConfigMismatchError("checkpoint was trained with R=" + std::to_string(ck.model.config.rounds) +
                                "; refusing --rounds " + std::to_string(c.rounds) +
                                " (pass --force-rounds to override)");
    opt.rounds_override = c.rounds;
  }
  return opt;
}

int run_eval(const EvalCmd& c) {
  const Checkpoint ck = load_checkpoint(c.ckpt);
  const LocalizeOptions opt = eval_options(c, ck);
  print_config({{"command", "eval"},
                {"ckpt", c.ckpt},
                {"db", c.db},
                {"queries", c.queries},
                {"out", c.out},
                {"geom_avg", c.geom_avg ? "1" : "0"},
                {"rounds", num(opt.rounds_override.value_or(ck.model.config.rounds))},
                {"nodes", num(ck.train.nodes)},
                {"stride", num(ck.train.stride)},
                {"model", to_string(ck.model.kind)},
                {"graph_mode", to_string(ck.train.graph_mode)}});
  const Dataset dbset = load_any_dataset(c.db);
  const Dataset qset = load_any_dataset(c.queries);
  for (const auto& q : qset.records)
    if (!q.has_pose) throw ContractViolation("query '" + q.id + "' has no ground-truth pose");
  const EvalReport rep = evaluate(qset.records, to_database(dbset), ck, opt);
  const std::string text = format_report(rep);
  std::cout << text;
  if (!c.out.empty()) write_text(c.out, text);
  return 0;
}

int run_localize(const EvalCmd& c) {
  const Checkpoint ck = load_checkpoint(c.ckpt);
  const LocalizeOptions opt = eval_options(c, ck);
  print_config({{"command", "localize"},
                {"ckpt", c.ckpt},
                {"db", c.db},
                {"queries", c.queries},
                {"out", c.out},
                {"geom_avg", c.geom_avg ? "1" : "0"},
                {"rounds", num(opt.rounds_override.value_or(ck.model.config.rounds))}});
  const Dataset dbset = load_any_dataset(c.db);
  const Dataset qset = load_any_dataset(c.queries);
  const EmbeddingDatabase db = to_database(dbset);
  std::ostringstream s;
  s << "report=localize\n";
  for (std::size_t i = 0; i < qset.records.size(); ++i) {
    const Pose p = localize(qset.records[i], db, ck, opt, i).pose;
    s << "pose index=" << i << " id=" << qset.records[i].id << " t=" << num(p.t[0]) << ',' << num(p.t[1]) << ','
      << num(p.t[2]) << " q=" << num(p.q.w) << ',' << num(p.q.x) << ',' << num(p.q.y) << ',' << num(p.q.z) << '\n';
  }
  std::cout << s.str();
  if (!c.out.empty()) write_text(c.out, s.str());
  return 0;
}

struct AblateCmd {
  std::string data;
  std::string modes = "full,baseline1,baseline2";
  std::size_t seeds = 3;
  std::string out;
  TrainFlags flags;
};

int run_ablate(const AblateCmd& c) {
  std::vector<AblationMode> modes;
  std::stringstream ss(c.modes);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) modes.push_back(parse_ablation_mode(item));
  require(!modes.empty(), "ablate: no modes given");
  require(c.seeds >= 1, "ablate: --seeds must be >= 1");
  const Dataset train = read_dataset(train_path(c.data));
  const Dataset test = read_dataset(test_path(c.data));
  const TrainConfig base = to_train_config(c.flags, train.feature_dim);
  std::vector<std::uint64_t> seeds;
  for (std::size_t s = 0; s < c.seeds; ++s) seeds.push_back(c.flags.seed + s);

  auto kv = describe(base);
  kv.insert(kv.begin(), {{"command", "ablate"}, {"data", c.data}, {"modes", c.modes}, {"seeds", num(c.seeds)},
                         {"out", c.out}});
  print_config(kv);
  const LogLevel level = log_level();
  const AblationReport rep =
      run_ablation(modes, to_database(train), test.records, base, seeds, [&](const AblationEntry& e) {
        if (level >= LogLevel::Info)
          std::cerr << "finished mode=" << to_string(e.mode) << " seed=" << e.seed << '\n';
      });
  const std::string text = format_ablation(rep);
  std::cout << text;
  if (!c.out.empty()) write_text(c.out, text);
  return 0;
}

struct GradcheckCmd {
  GradCheckSetup setup;
};

int run_gradcheck(const GradcheckCmd& c) {
  const auto& s = c.setup;
  print_config({{"command", "gradcheck"},
                {"width", num(s.model.width)},
                {"attention_factor", num(s.model.attention_factor)},
                {"rounds", num(s.model.rounds)},
                {"nodes", num(s.nodes)},
                {"seed", num(s.seed, 0)},
                {"h", num(s.h)},
                {"samples_per_block", num(s.samples_per_block)},
                {"inject_bug", s.inject_bug ? "1" : "0"},
                {"threshold", num(kGradCheckThreshold)}});
  const auto t0 = std::chrono::steady_clock::now();
  const GradCheckReport rep = run_gnn_gradcheck(s);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& b : rep.blocks)
    std::cout << "block name=" << b.name << " entries=" << b.entries_checked
              << " max_rel_error=" << num(b.max_rel_error) << '\n';
  const bool ok = rep.max_rel_error < kGradCheckThreshold;
  std::cout << "max_rel_error=" << num(rep.max_rel_error) << '\n';
  std::cout << "elapsed_s=" << num(secs) << '\n';
  std::cout << "result=" << (ok ? "pass" : "fail") << '\n';
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph-network relative pose regression for camera re-localization"};
  app.require_subcommand(1);

  GenerateFlags gen;
  auto* g = app.add_subcommand("generate", "generate a synthetic scene (train/test datasets + manifest)");
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--seed", gen.scene.seed, "scene seed")->capture_default_str();
  g->add_option("--train-count", gen.scene.train_count, "training images")->capture_default_str();
  g->add_option("--test-count", gen.scene.test_count, "test images")->capture_default_str();
  g->add_option("--box-size", gen.box_size, "edge length of the cubic scene volume (m)")->capture_default_str();
  g->add_option("--trajectory", gen.trajectory, "random_walk or loops")->capture_default_str();
  g->add_option("--emb-dim", gen.scene.embedding_dim, "retrieval embedding dimension D")->capture_default_str();
  g->add_option("--feat-dim", gen.scene.feature_dim, "node feature dimension C")->capture_default_str();
  g->add_option("--noise", gen.scene.feature_noise, "feature noise sigma")->capture_default_str();
  g->add_option("--rff-count", gen.scene.rff_count, "random Fourier features behind the node features")
      ->capture_default_str();

  TrainCmd tr;
  auto* t = app.add_subcommand("train", "train a model");
  t->add_option("--data", tr.data, "scene directory containing train.gnnr");
  t->add_option("--train", tr.train_file, "training dataset file (overrides --data)");
  t->add_option("--val", tr.val_file, "validation dataset for early stopping");
  t->add_option("--out", tr.out, "checkpoint path")->required();
  t->add_option("--metrics", tr.metrics, "metrics log path (default: <out>.metrics.jsonl)");
  t->add_option("--model", tr.model, "gnn or pair")->capture_default_str();
  t->add_option("--graph", tr.graph, "retrieval or random")->capture_default_str();
  add_train_flags(t, tr.flags);

  EvalCmd ev;
  auto* e = app.add_subcommand("eval", "evaluate median errors on posed queries");
  e->add_option("--ckpt", ev.ckpt, "checkpoint")->required();
  e->add_option("--db", ev.db, "database (training) dataset")->required();
  e->add_option("--queries", ev.queries, "query dataset with ground-truth poses")->required();
  e->add_option("--out", ev.out, "also write the report here");
  e->add_flag("--geom-avg", ev.geom_avg, "fuse all N-1 estimates (Weiszfeld + quaternion mean)");
  e->add_option("--rounds", ev.rounds, "message-passing rounds (must match the checkpoint)");
  e->add_flag("--force-rounds", ev.force_rounds, "allow --rounds to differ from the checkpoint");

  EvalCmd lo;
  auto* l = app.add_subcommand("localize", "estimate absolute poses of query images");
  l->add_option("--ckpt", lo.ckpt, "checkpoint")->required();
  l->add_option("--db", lo.db, "database (training) dataset")->required();
  l->add_option("--queries", lo.queries, "query dataset (poses optional)")->required();
  l->add_option("--out", lo.out, "also write the poses here");
  l->add_flag("--geom-avg", lo.geom_avg, "fuse all N-1 estimates");
  l->add_option("--rounds", lo.rounds, "message-passing rounds (must match the checkpoint)");
  l->add_flag("--force-rounds", lo.force_rounds, "allow --rounds to differ from the checkpoint");

  AblateCmd ab;
  auto* a = app.add_subcommand("ablate", "train and compare ablation modes over several seeds");
  a->add_option("--data", ab.data, "scene directory")->required();
  a->add_option("--modes", ab.modes, "comma-separated: full, baseline1, baseline2")->capture_default_str();
  a->add_option("--seeds", ab.seeds, "number of seeds (starting at --seed)")->capture_default_str();
  a->add_option("--out", ab.out, "also write the table here");
  add_train_flags(a, ab.flags);

  GradcheckCmd gc;
  auto* c = app.add_subcommand("gradcheck", "finite-difference check of every GNN parameter block");
  c->add_option("--width", gc.setup.model.width, "feature width C")->capture_default_str();
  c->add_option("--attention-factor", gc.setup.model.attention_factor, "attention factor n")->capture_default_str();
  c->add_option("--nodes", gc.setup.nodes, "graph size N")->capture_default_str();
  c->add_option("--rounds", gc.setup.model.rounds, "message-passing rounds R")->capture_default_str();
  c->add_option("--seed", gc.setup.seed, "random seed")->capture_default_str();
  c->add_option("--step", gc.setup.h, "finite-difference step")->capture_default_str();
  c->add_option("--samples", gc.setup.samples_per_block, "entries checked per block")->capture_default_str();
  c->add_flag("--inject-bug", gc.setup.inject_bug, "flip the sign of one backward rule (checker self-test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? 0 : 2;  // --help is not a failure
  }

  try {
    if (g->parsed()) return run_generate(gen);
    if (t->parsed()) {
      if (tr.data.empty() && tr.train_file.empty()) throw ContractViolation("train: need --data or --train");
      return run_train(tr);
    }
    if (e->parsed()) return run_eval(ev);
    if (l->parsed()) return run_localize(lo);
    if (a->parsed()) return run_ablate(ab);
    if (c->parsed()) return run_gradcheck(gc);
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 4;
  }
  return 0;
}
