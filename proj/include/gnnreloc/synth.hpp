#pragma once

// Synthetic scenes and the dataset file formats.
//
// A scene is a set of smooth camera trajectories inside an axis-aligned box.
// Each image is represented only by two fixed random-Fourier-feature maps of
// its 6-D pose coordinates (translation, quaternion log): a narrow-bandwidth
// map for the retrieval embedding and a broad one for the node features.
// Test images come from trajectories that are generated separately from the
// training ones.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gnnreloc/binary_io.hpp"
#include "gnnreloc/error.hpp"
#include "gnnreloc/pose_math.hpp"
#include "gnnreloc/retrieval.hpp"
#include "gnnreloc/tensor.hpp"

namespace gnnreloc {

enum class TrajectoryKind { RandomWalk, Loops };

inline const char* to_string(TrajectoryKind k) { return k == TrajectoryKind::RandomWalk ? "random_walk" : "loops"; }

struct SceneConfig {
  std::size_t train_count = 500;
  std::size_t test_count = 100;
  Vec3 box_min{0.0, 0.0, 0.0};
  Vec3 box_max{2.0, 2.0, 2.0};
  TrajectoryKind trajectory = TrajectoryKind::Loops;
  std::size_t embedding_dim = 32;  // D
  std::size_t feature_dim = 32;    // C
  double feature_noise = 0.05;     // sigma, per component on unit-variance features
  std::size_t rff_count = 64;      // frequencies of the node-feature basis before projection to C
  std::uint64_t seed = 0;

  std::size_t frames_per_trajectory = 50;
  double step_length = 0.1;               // meters per frame
  double max_rotation_step = 0.02;        // bound on the per-frame change of the jitter log
  double jitter_limit = 0.01;             // bound on each jitter log component (half-angle)
  double rotation_scale = 1.0;            // meters per radian of log q in the pose coordinates
  double retrieval_bandwidth_frac = 0.2;  // kernel length scale / scene diameter
  double feature_bandwidth_frac = 0.4;
  double focus_distance = 0.5;  // distance of the focus point beyond the +y face, in box depths
  double feature_scale = 3.0;  // standard deviation of a node-feature component before noise

  double diameter() const { return norm(box_max - box_min); }

  void validate() const {
    require(train_count > 0, "SceneConfig: train_count must be positive");
    require(test_count > 0, "SceneConfig: test_count must be positive");
    require(embedding_dim > 0 && feature_dim > 0 && rff_count > 0, "SceneConfig: dimensions must be positive");
    require(feature_noise >= 0.0, "SceneConfig: feature noise must be >= 0");
    require(frames_per_trajectory > 0, "SceneConfig: frames_per_trajectory must be positive");
    require(step_length > 0.0 && max_rotation_step >= 0.0 && jitter_limit >= 0.0,
            "SceneConfig: trajectory step and jitter bounds must be non-negative");
    require(rotation_scale > 0.0 && retrieval_bandwidth_frac > 0.0 && feature_bandwidth_frac > 0.0 &&
                feature_scale > 0.0,
            "SceneConfig: scales and bandwidths must be positive");
    for (int a = 0; a < 3; ++a) require(box_max[a] > box_min[a], "SceneConfig: empty box");
  }
};

struct Dataset {
  std::size_t embedding_dim = 0;
  std::size_t feature_dim = 0;
  std::vector<ImageRecord> records;
  bool operator==(const Dataset&) const = default;
};

struct Scene {
  Dataset train;
  Dataset test;
};

namespace detail {

// Fixed random Fourier feature map sqrt(2) cos(Omega z + b), z in R^6.
// Frequencies are drawn as orthogonal random features: blocks of six
// orthonormalized Gaussian directions, each rescaled to the length of an
// independent Gaussian vector. Same kernel in expectation as i.i.d. draws,
// with a markedly lower approximation error at a few dozen features.
struct FourierMap {
  Matrix omega;
  std::vector<double> phase;

  FourierMap(std::size_t count, double length_scale, Rng& rng) : omega(count, 6), phase(count) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> uni(0.0, 2.0 * std::numbers::pi);
    for (std::size_t start = 0; start < count; start += 6) {
      std::array<std::array<double, 6>, 6> block{};
      for (auto& row : block)
        for (auto& v : row) v = gauss(rng);
      for (std::size_t r = 0; r < 6; ++r) {
        for (std::size_t q = 0; q < r; ++q) {
          double d = 0.0;
          for (std::size_t c = 0; c < 6; ++c) d += block[r][c] * block[q][c];
          for (std::size_t c = 0; c < 6; ++c) block[r][c] -= d * block[q][c];
        }
        double n = 0.0;
        for (const double v : block[r]) n += v * v;
        n = std::sqrt(n);
        for (auto& v : block[r]) v /= n;
      }
      for (std::size_t r = 0; r < 6 && start + r < count; ++r) {
        double len = 0.0;
        for (int k = 0; k < 6; ++k) {
          const double g = gauss(rng);
          len += g * g;
        }
        len = std::sqrt(len) / length_scale;
        for (std::size_t c = 0; c < 6; ++c) omega(start + r, c) = len * block[r][c];
      }
    }
    for (auto& p : phase) p = uni(rng);
  }

  std::vector<double> operator()(const std::array<double, 6>& z) const {
    std::vector<double> out(omega.rows);
    for (std::size_t r = 0; r < omega.rows; ++r) {
      double a = phase[r];
      for (std::size_t c = 0; c < 6; ++c) a += omega(r, c) * z[c];
      out[r] = std::sqrt(2.0) * std::cos(a);
    }
    return out;
  }
};

struct SceneBasis {
  FourierMap retrieval;
  FourierMap features;
  Matrix projection;  // C x rff_count

  SceneBasis(const SceneConfig& cfg, Rng& rng)
      : retrieval(cfg.embedding_dim, cfg.retrieval_bandwidth_frac * cfg.diameter(), rng),
        features(cfg.rff_count, cfg.feature_bandwidth_frac * cfg.diameter(), rng),
        projection(cfg.feature_dim, cfg.rff_count) {
    std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(cfg.rff_count)));
    for (auto& v : projection.data) v = gauss(rng);
  }
};

inline double reflect(double v, double lo, double hi, double& velocity) {
  if (v < lo) {
    velocity = std::abs(velocity);
    return lo + (lo - v);
  }
  if (v > hi) {
    velocity = -std::abs(velocity);
    return hi - (v - hi);
  }
  return v;
}

// Cameras face a focus point beyond the +y face of the volume, slightly
// below mid-height, so the viewing direction is a smooth function of position.
// A smooth bounded jitter is added on top, as from a hand-held camera.
inline Vec3 focus_point(const SceneConfig& cfg) {
  const Vec3 size = cfg.box_max - cfg.box_min;
  return {0.5 * (cfg.box_min[0] + cfg.box_max[0]), cfg.box_max[1] + cfg.focus_distance * size[1],
          cfg.box_min[2] + 0.25 * size[2]};
}

inline UnitQuaternion viewing_rotation(const SceneConfig& cfg, const Vec3& t, const Vec3& jitter) {
  const Vec3 d = focus_point(cfg) - t;
  const double yaw = std::atan2(d[0], d[1]);
  const double pitch = std::atan2(d[2], std::hypot(d[0], d[1]));
  return canonicalize(quat_exp({0.5 * pitch + jitter[0], jitter[1], 0.5 * yaw + jitter[2]}));
}

class Jitter {
 public:
  Jitter(const SceneConfig& cfg, Rng& rng) : cfg_(cfg) {
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    for (auto& v : w_) v = cfg.jitter_limit * uni(rng);
  }
  const Vec3& value() const { return w_; }
  void advance(Rng& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    if (cfg_.jitter_limit <= 0.0) return;
    for (auto& v : vel_) v = 0.8 * v + 0.2 * cfg_.max_rotation_step * gauss(rng);
    const double n = norm(vel_);
    if (n > cfg_.max_rotation_step) vel_ = (cfg_.max_rotation_step / n) * vel_;
    for (int a = 0; a < 3; ++a) w_[a] = reflect(w_[a] + vel_[a], -cfg_.jitter_limit, cfg_.jitter_limit, vel_[a]);
  }

 private:
  const SceneConfig& cfg_;
  Vec3 w_{};
  Vec3 vel_{};
};

inline std::vector<Pose> random_walk(const SceneConfig& cfg, std::size_t frames, Rng& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double margin = 0.1;
  Vec3 t{};
  for (int a = 0; a < 3; ++a) {
    const double lo = cfg.box_min[a] + margin, hi = cfg.box_max[a] - margin;
    t[a] = lo + (hi - lo) * uni(rng);
  }
  Vec3 dir{gauss(rng), gauss(rng), gauss(rng)};
  dir = (1.0 / std::max(norm(dir), 1e-12)) * dir;
  Jitter jitter(cfg, rng);

  std::vector<Pose> out;
  out.reserve(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    out.push_back({t, viewing_rotation(cfg, t, jitter.value())});
    Vec3 turn{gauss(rng), gauss(rng), gauss(rng)};
    dir = dir + 0.3 * turn;
    dir = (1.0 / std::max(norm(dir), 1e-12)) * dir;
    for (int a = 0; a < 3; ++a) {
      double v = dir[a];
      t[a] = reflect(t[a] + cfg.step_length * v, cfg.box_min[a], cfg.box_max[a], v);
      dir[a] = v;
    }
    jitter.advance(rng);
  }
  return out;
}

// Closed elliptical circuits around the vertical axis of the volume.
inline std::vector<Pose> loop(const SceneConfig& cfg, std::size_t frames, Rng& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const Vec3 centre = 0.5 * (cfg.box_min + cfg.box_max);
  const Vec3 half = 0.5 * (cfg.box_max - cfg.box_min);
  const double rx = half[0] * (0.3 + 0.6 * uni(rng));
  const double ry = half[1] * (0.3 + 0.6 * uni(rng));
  const double z0 = centre[2] + half[2] * (1.6 * uni(rng) - 0.8);
  const double zamp = half[2] * 0.15 * uni(rng);
  const double phase0 = 2.0 * std::numbers::pi * uni(rng);
  const double perimeter = 2.0 * std::numbers::pi * std::sqrt(0.5 * (rx * rx + ry * ry));
  const double dphi = 2.0 * std::numbers::pi * cfg.step_length / perimeter;
  Jitter jitter(cfg, rng);

  std::vector<Pose> out;
  out.reserve(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    const double phi = phase0 + dphi * static_cast<double>(f);
    const Vec3 t{centre[0] + rx * std::cos(phi), centre[1] + ry * std::sin(phi), z0 + zamp * std::sin(2.0 * phi)};
    out.push_back({t, viewing_rotation(cfg, t, jitter.value())});
    jitter.advance(rng);
  }
  return out;
}

inline std::vector<Pose> trajectories(const SceneConfig& cfg, std::size_t count, Rng& rng) {
  std::vector<Pose> poses;
  poses.reserve(count);
  while (poses.size() < count) {
    const std::size_t frames = std::min(cfg.frames_per_trajectory, count - poses.size());
    auto seg = cfg.trajectory == TrajectoryKind::RandomWalk ? random_walk(cfg, frames, rng) : loop(cfg, frames, rng);
    poses.insert(poses.end(), seg.begin(), seg.end());
  }
  return poses;
}

inline std::array<double, 6> pose_coordinates(const Pose& p, double rotation_scale) {
  const RotVec w = quat_log(p.q);
  return {p.t[0], p.t[1], p.t[2], rotation_scale * w[0], rotation_scale * w[1], rotation_scale * w[2]};
}

inline ImageRecord make_record(const SceneBasis& basis, const SceneConfig& cfg, std::string id, const Pose& pose,
                               Rng& noise_rng) {
  std::normal_distribution<double> noise(0.0, 1.0);
  const auto z = pose_coordinates(pose, cfg.rotation_scale);
  ImageRecord r;
  r.id = std::move(id);
  r.pose = pose;
  r.has_pose = true;

  r.retrieval_embedding = basis.retrieval(z);
  double n2 = 0.0;
  for (auto& v : r.retrieval_embedding) {
    v += cfg.feature_noise * noise(noise_rng);
    n2 += v * v;
  }
  const double inv = 1.0 / std::sqrt(n2);
  for (auto& v : r.retrieval_embedding) v *= inv;

  const auto psi = basis.features(z);
  r.feature_vector.assign(cfg.feature_dim, 0.0);
  for (std::size_t c = 0; c < cfg.feature_dim; ++c) {
    double acc = 0.0;
    for (std::size_t k = 0; k < psi.size(); ++k) acc += basis.projection(c, k) * psi[k];
    r.feature_vector[c] = cfg.feature_scale * acc + cfg.feature_noise * noise(noise_rng);
  }
  return r;
}

inline std::string numbered(const char* prefix, std::size_t i) {
  std::ostringstream s;
  s << prefix << '_';
  s.width(5);
  s.fill('0');
  s << i;
  return s.str();
}

}  // namespace detail

inline Scene generate_scene(const SceneConfig& cfg) {
  cfg.validate();
  // Independent streams so that e.g. changing test_count leaves the training set intact.
  Rng basis_rng(cfg.seed * 4 + 1);
  Rng train_rng(cfg.seed * 4 + 2);
  Rng test_rng(cfg.seed * 4 + 3);
  Rng noise_rng(cfg.seed * 4 + 4);
  const detail::SceneBasis basis(cfg, basis_rng);

  Scene s;
  s.train.embedding_dim = s.test.embedding_dim = cfg.embedding_dim;
  s.train.feature_dim = s.test.feature_dim = cfg.feature_dim;
  const auto train_poses = detail::trajectories(cfg, cfg.train_count, train_rng);
  const auto test_poses = detail::trajectories(cfg, cfg.test_count, test_rng);
  for (std::size_t i = 0; i < train_poses.size(); ++i)
    s.train.records.push_back(detail::make_record(basis, cfg, detail::numbered("train", i), train_poses[i], noise_rng));
  for (std::size_t i = 0; i < test_poses.size(); ++i)
    s.test.records.push_back(detail::make_record(basis, cfg, detail::numbered("test", i), test_poses[i], noise_rng));
  return s;
}

// ---------------------------------------------------------------------------
// Binary dataset format (little-endian):
//   "GNNRDSET" | u32 version | u64 count | u64 D | u64 C
//   per record: u64 id_len, id bytes | D x f64 | C x f64 | u8 has_pose |
//               3 x f64 t | 4 x f64 q (w, x, y, z)

inline constexpr char kDatasetMagic[8] = {'G', 'N', 'N', 'R', 'D', 'S', 'E', 'T'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::string encode_dataset(const Dataset& ds) {
  io::Writer w;
  w.bytes(std::string_view(kDatasetMagic, 8));
  w.u32(kDatasetVersion);
  w.u64(ds.records.size());
  w.u64(ds.embedding_dim);
  w.u64(ds.feature_dim);
  for (const auto& r : ds.records) {
    if (r.retrieval_embedding.size() != ds.embedding_dim || r.feature_vector.size() != ds.feature_dim)
      throw DimensionMismatchError("write_dataset: record '" + r.id + "' does not match the dataset dimensions");
    w.str(r.id);
    for (double v : r.retrieval_embedding) w.f64(v);
    for (double v : r.feature_vector) w.f64(v);
    w.u8(r.has_pose ? 1 : 0);
    // Sign flip only, so a stored quaternion re-encodes to the same bytes.
    Pose p = r.has_pose ? r.pose : Pose{};
    if (!(std::abs(norm(p.q) - 1.0) <= 1e-6))
      throw QuaternionError("write_dataset: record '" + r.id + "' has a non-unit quaternion");
    if (p.q.w < 0.0) p.q = -p.q;
    for (double v : p.t) w.f64(v);
    for (double v : {p.q.w, p.q.x, p.q.y, p.q.z}) w.f64(v);
  }
  return w.buffer();
}

inline Dataset decode_dataset(std::string_view bytes) {
  io::Reader r(bytes);
  if (r.remaining() < 8 || r.bytes(8) != std::string_view(kDatasetMagic, 8))
    throw CorruptFileError("dataset: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion)
    throw VersionMismatchError("dataset: version " + std::to_string(version) + ", expected " +
                               std::to_string(kDatasetVersion));
  const std::uint64_t count = r.u64();
  Dataset ds;
  ds.embedding_dim = r.u64();
  ds.feature_dim = r.u64();
  const std::uint64_t min_record = 8 + 8 * (ds.embedding_dim + ds.feature_dim) + 1 + 7 * 8;
  if (min_record == 0 || count > r.remaining() / min_record) throw CorruptFileError("dataset: record count exceeds file size");
  ds.records.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    ImageRecord rec;
    rec.id = r.str();
    rec.retrieval_embedding.resize(ds.embedding_dim);
    for (auto& v : rec.retrieval_embedding) v = r.f64();
    rec.feature_vector.resize(ds.feature_dim);
    for (auto& v : rec.feature_vector) v = r.f64();
    const std::uint8_t hp = r.u8();
    if (hp > 1) throw CorruptFileError("dataset: invalid has_pose flag");
    rec.has_pose = hp == 1;
    for (auto& v : rec.pose.t) v = r.f64();
    rec.pose.q.w = r.f64();
    rec.pose.q.x = r.f64();
    rec.pose.q.y = r.f64();
    rec.pose.q.z = r.f64();
    if (!(std::abs(norm(rec.pose.q) - 1.0) <= 1e-6))
      throw QuaternionError("dataset: record '" + rec.id + "' has a non-unit quaternion (norm " +
                            std::to_string(norm(rec.pose.q)) + ")");
    ds.records.push_back(std::move(rec));
  }
  if (!r.at_end()) throw CorruptFileError("dataset: trailing bytes after last record");
  return ds;
}

inline void write_dataset(const Dataset& ds, const std::string& path) { io::write_file(path, encode_dataset(ds)); }
inline Dataset read_dataset(const std::string& path) { return decode_dataset(io::read_file(path)); }

// ---------------------------------------------------------------------------
// Plain-text import format for externally computed embeddings:
//   dims <D> <C>
//   <id> <D embedding values> <C feature values> <has_pose> tx ty tz qw qx qy qz
// '#' starts a comment line. Embeddings are L2-normalized and quaternions
// canonicalized on import; values already unit length to within 1e-12 only
// have their sign fixed, so an export re-imports bit for bit.

inline Dataset parse_text_dataset(std::istream& in) {
  Dataset ds;
  bool have_dims = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    auto fail = [&](const std::string& what) {
      return CorruptFileError("text dataset line " + std::to_string(lineno) + ": " + what);
    };
    if (!have_dims) {
      std::string kw;
      if (!(ls >> kw >> ds.embedding_dim >> ds.feature_dim) || kw != "dims") throw fail("expected 'dims D C'");
      have_dims = true;
      continue;
    }
    ImageRecord rec;
    if (!(ls >> rec.id)) throw fail("missing id");
    rec.retrieval_embedding.resize(ds.embedding_dim);
    rec.feature_vector.resize(ds.feature_dim);
    for (auto& v : rec.retrieval_embedding)
      if (!(ls >> v)) throw fail("too few embedding values");
    for (auto& v : rec.feature_vector)
      if (!(ls >> v)) throw fail("too few feature values");
    int hp = 0;
    if (!(ls >> hp) || (hp != 0 && hp != 1)) throw fail("has_pose must be 0 or 1");
    rec.has_pose = hp == 1;
    double q[4];
    if (!(ls >> rec.pose.t[0] >> rec.pose.t[1] >> rec.pose.t[2] >> q[0] >> q[1] >> q[2] >> q[3]))
      throw fail("incomplete pose");
    std::string extra;
    if (ls >> extra) throw fail("unexpected trailing values");
    constexpr double kUnitTol = 1e-12;
    const UnitQuaternion qin{q[0], q[1], q[2], q[3]};
    if (!rec.has_pose)
      rec.pose.q = UnitQuaternion::identity();
    else if (std::abs(norm(qin) - 1.0) <= kUnitTol)
      rec.pose.q = qin.w < 0.0 ? -qin : qin;
    else
      rec.pose.q = canonicalize(qin);
    double n2 = 0.0;
    for (double v : rec.retrieval_embedding) n2 += v * v;
    if (!(n2 > 0.0)) throw fail("zero retrieval embedding");
    if (std::abs(std::sqrt(n2) - 1.0) > kUnitTol)
      for (auto& v : rec.retrieval_embedding) v /= std::sqrt(n2);
    ds.records.push_back(std::move(rec));
  }
  if (!have_dims) throw CorruptFileError("text dataset: missing 'dims D C' header");
  return ds;
}

inline Dataset read_text_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  return parse_text_dataset(in);
}

inline void write_text_dataset(const Dataset& ds, std::ostream& out) {
  out.precision(17);
  out << "dims " << ds.embedding_dim << ' ' << ds.feature_dim << '\n';
  for (const auto& r : ds.records) {
    out << r.id;
    for (double v : r.retrieval_embedding) out << ' ' << v;
    for (double v : r.feature_vector) out << ' ' << v;
    const Pose p = r.has_pose ? r.pose : Pose{};
    out << ' ' << (r.has_pose ? 1 : 0) << ' ' << p.t[0] << ' ' << p.t[1] << ' ' << p.t[2] << ' ' << p.q.w << ' '
        << p.q.x << ' ' << p.q.y << ' ' << p.q.z << '\n';
  }
}

inline EmbeddingDatabase to_database(const Dataset& ds) { return EmbeddingDatabase(ds.records); }

}  // namespace gnnreloc
