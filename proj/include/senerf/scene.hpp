#pragma once

// Analytic scene oracle (opaque spheres and boxes), spherical camera poses,
// NeRF-Synthetic style dataset I/O and the one-sided few-view split.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "senerf/camera.hpp"
#include "senerf/image.hpp"

namespace senerf::scene {

enum class SolidKind { kSphere, kBox };

struct Solid {
  SolidKind kind = SolidKind::kSphere;
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Ones();  // sphere: size.x() is the radius; box: half extents
  Vec3 albedo = Vec3(0.5, 0.5, 0.5);
  bool lambertian = false;
};

struct SceneSpec {
  std::vector<Solid> solids;
  Vec3 background = Vec3::Ones();
  Vec3 light_dir = Vec3(0.4, 0.3, 0.866).normalized();

  void validate() const {
    for (std::size_t i = 0; i < solids.size(); ++i) {
      const auto& s = solids[i];
      const Vec3 ext = s.kind == SolidKind::kSphere ? Vec3::Constant(s.size.x()) : s.size;
      if ((s.center - ext).minCoeff() < -1.0 - 1e-9 || (s.center + ext).maxCoeff() > 1.0 + 1e-9)
        throw std::invalid_argument("scene: solid " + std::to_string(i) + " leaves the unit box");
      if (s.albedo.minCoeff() < 0.0 || s.albedo.maxCoeff() > 1.0)
        throw std::invalid_argument("scene: albedo of solid " + std::to_string(i) + " outside [0,1]");
      if (s.size.minCoeff() <= 0.0 && s.kind == SolidKind::kBox)
        throw std::invalid_argument("scene: box " + std::to_string(i) + " has non-positive extent");
    }
  }
};

/// Two spheres and a slab-shaped box with distinct albedos on white.
inline SceneSpec default_scene() {
  SceneSpec s;
  s.solids.push_back({SolidKind::kSphere, Vec3(0.35, -0.30, 0.05), Vec3(0.45, 0, 0),
                      Vec3(230, 51, 51) / 255.0, false});
  s.solids.push_back({SolidKind::kSphere, Vec3(-0.40, 0.35, 0.15), Vec3(0.35, 0, 0),
                      Vec3(51, 102, 230) / 255.0, false});
  s.solids.push_back({SolidKind::kBox, Vec3(0.0, 0.0, -0.55), Vec3(0.6, 0.6, 0.15),
                      Vec3(77, 204, 77) / 255.0, false});
  return s;
}

inline nlohmann::json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }
inline Vec3 json_vec(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

inline nlohmann::json to_json(const SceneSpec& s) {
  nlohmann::json j;
  j["background"] = vec_json(s.background);
  j["light_dir"] = vec_json(s.light_dir);
  auto& arr = j["solids"] = nlohmann::json::array();
  for (const auto& o : s.solids) {
    nlohmann::json e{{"type", o.kind == SolidKind::kSphere ? "sphere" : "box"},
                     {"center", vec_json(o.center)},
                     {"albedo", vec_json(o.albedo)},
                     {"lambertian", o.lambertian}};
    if (o.kind == SolidKind::kSphere)
      e["radius"] = o.size.x();
    else
      e["half_size"] = vec_json(o.size);
    arr.push_back(std::move(e));
  }
  return j;
}

inline SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  try {
    if (j.contains("background")) s.background = json_vec(j["background"]);
    if (j.contains("light_dir")) s.light_dir = json_vec(j["light_dir"]).normalized();
    for (const auto& e : j.at("solids")) {
      Solid o;
      const auto type = e.at("type").get<std::string>();
      if (type == "sphere") {
        o.kind = SolidKind::kSphere;
        o.size = Vec3(e.at("radius").get<double>(), 0, 0);
      } else if (type == "box") {
        o.kind = SolidKind::kBox;
        o.size = json_vec(e.at("half_size"));
      } else {
        throw std::invalid_argument("unknown solid type '" + type + "'");
      }
      o.center = json_vec(e.at("center"));
      o.albedo = json_vec(e.at("albedo"));
      o.lambertian = e.value("lambertian", false);
      s.solids.push_back(o);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("scene spec: ") + e.what());
  }
  s.validate();
  return s;
}

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  int solid = -1;
  Vec3 normal = Vec3::Zero();
};

inline std::optional<Hit> intersect(const Solid& s, const Vec3& o, const Vec3& d) {
  if (s.kind == SolidKind::kSphere) {
    const double r = s.size.x();
    const Vec3 oc = o - s.center;
    const double b = oc.dot(d);
    const double c = oc.squaredNorm() - r * r;
    const double disc = b * b - c;
    if (disc < 0) return std::nullopt;
    const double sq = std::sqrt(disc);
    double t = -b - sq;
    if (t <= 1e-9) t = -b + sq;
    if (t <= 1e-9) return std::nullopt;
    Hit h;
    h.t = t;
    h.normal = (o + t * d - s.center).normalized();
    return h;
  }
  double tmin = -std::numeric_limits<double>::infinity(), tmax = std::numeric_limits<double>::infinity();
  int axis_in = 0;
  double sign_in = 1.0;
  for (int a = 0; a < 3; ++a) {
    const double lo = s.center[a] - s.size[a], hi = s.center[a] + s.size[a];
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < lo || o[a] > hi) return std::nullopt;
      continue;
    }
    double t0 = (lo - o[a]) / d[a], t1 = (hi - o[a]) / d[a];
    double sgn = -1.0;
    if (t0 > t1) {
      std::swap(t0, t1);
      sgn = 1.0;
    }
    if (t0 > tmin) {
      tmin = t0;
      axis_in = a;
      sign_in = sgn;
    }
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return std::nullopt;
  }
  if (tmin <= 1e-9) return std::nullopt;  // camera inside the box is not supported
  Hit h;
  h.t = tmin;
  h.normal = Vec3::Zero();
  h.normal[axis_in] = sign_in;
  return h;
}

/// Nearest hit along a unit-direction ray.
inline std::optional<Hit> trace(const SceneSpec& scene, const Vec3& o, const Vec3& d) {
  std::optional<Hit> best;
  for (std::size_t i = 0; i < scene.solids.size(); ++i) {
    auto h = intersect(scene.solids[i], o, d);
    if (h && (!best || h->t < best->t)) {
      h->solid = static_cast<int>(i);
      best = h;
    }
  }
  return best;
}

inline Vec3 shade(const SceneSpec& scene, const Hit& h) {
  const auto& s = scene.solids[static_cast<std::size_t>(h.solid)];
  if (!s.lambertian) return s.albedo;
  const double k = 0.3 + 0.7 * std::max(0.0, h.normal.dot(scene.light_dir));
  return s.albedo * k;
}

/// Oracle color along an arbitrary ray (background on miss).
inline Vec3 trace_color(const SceneSpec& scene, const Vec3& o, const Vec3& d) {
  const auto h = trace(scene, o, d);
  return h ? shade(scene, *h) : scene.background;
}

struct OracleView {
  Image image;  // H x W x 3
  Image depth;  // hit distance along the unit ray; +inf on miss
  Image mask;   // 1 where a solid is hit
};

inline OracleView oracle_render(const SceneSpec& scene, const Camera& cam) {
  OracleView v{Image(cam.width, cam.height, 3), Image(cam.width, cam.height, 1), Image(cam.width, cam.height, 1)};
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const Vec3 d = cam.pixel_direction(x, y);
      const auto h = trace(scene, cam.center, d);
      const Vec3 c = h ? shade(scene, *h) : scene.background;
      for (int k = 0; k < 3; ++k) v.image.at(x, y, k) = static_cast<float>(c[k]);
      v.depth.at(x, y) = h ? static_cast<float>(h->t) : std::numeric_limits<float>::infinity();
      v.mask.at(x, y) = h ? 1.0f : 0.0f;
    }
  return v;
}

// -- poses ---------------------------------------------------------------------

struct PoseSpec {
  double phi_deg = 0;
  double theta_deg = 0;
  double radius = 4.0;
};

struct CameraModel {
  int width = 64;
  int height = 64;
  double fov_x_deg = 40.0;
  double radius = 4.0;

  [[nodiscard]] double near() const { return radius - std::sqrt(3.0); }
  [[nodiscard]] double far() const { return radius + std::sqrt(3.0); }
};

inline Camera make_camera(const PoseSpec& p, const CameraModel& m) {
  return spherical_pose(p.phi_deg, p.theta_deg, p.radius, m.width, m.height, m.fov_x_deg,
                        p.radius - std::sqrt(3.0), p.radius + std::sqrt(3.0));
}

inline PoseSpec pose_of(const Camera& cam) {
  const auto s = to_spherical(cam.center);
  return {s.phi_deg, s.theta_deg, s.radius};
}

/// Pose pool: azimuth uniform in [0, 360), elevation uniform in [-30, 60].
inline std::vector<PoseSpec> random_poses(std::size_t count, double radius, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phi(0.0, 360.0), theta(-30.0, 60.0);
  std::vector<PoseSpec> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double p = phi(rng);
    const double t = theta(rng);
    out.push_back({p, t, radius});
  }
  return out;
}

// -- dataset -------------------------------------------------------------------

struct Frame {
  std::string file_path;  // as written in transforms.json
  Camera camera;
  Image image;
  Image depth;  // optional (empty when absent)
};

struct Dataset {
  double camera_angle_x = 0;
  std::vector<Frame> frames;

  [[nodiscard]] bool empty() const { return frames.empty(); }
  [[nodiscard]] std::size_t size() const { return frames.size(); }
};

/// World-from-camera 4x4 in the NeRF / OpenGL convention (camera looks down -z, +y up).
inline nlohmann::json transform_matrix(const Camera& cam) {
  Mat3 gl = cam.rotation;
  gl.col(1) = -cam.rotation.col(1);
  gl.col(2) = -cam.rotation.col(2);
  nlohmann::json m = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) m.push_back({gl(r, 0), gl(r, 1), gl(r, 2), cam.center[r]});
  m.push_back({0.0, 0.0, 0.0, 1.0});
  return m;
}

inline void camera_from_matrix(const nlohmann::json& m, Camera& cam) {
  Mat3 gl;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) gl(r, c) = m.at(r).at(c).get<double>();
    cam.center[r] = m.at(r).at(3).get<double>();
  }
  cam.rotation = gl;
  cam.rotation.col(1) = -gl.col(1);
  cam.rotation.col(2) = -gl.col(2);
}

inline Dataset make_dataset(const SceneSpec& scene, const std::vector<PoseSpec>& poses, const CameraModel& model,
                            bool with_depth = true) {
  Dataset ds;
  ds.camera_angle_x = deg2rad(model.fov_x_deg);
  for (std::size_t i = 0; i < poses.size(); ++i) {
    Frame f;
    char name[32];
    std::snprintf(name, sizeof(name), "./images/r_%03zu", i);
    f.file_path = name;
    f.camera = make_camera(poses[i], model);
    auto ov = oracle_render(scene, f.camera);
    f.image = std::move(ov.image);
    if (with_depth) f.depth = std::move(ov.depth);
    ds.frames.push_back(std::move(f));
  }
  return ds;
}

/// Writes images/<name>.png, optional depth/<name>.pfm and transforms.json.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  nlohmann::json j;
  j["camera_angle_x"] = ds.camera_angle_x;
  auto& frames = j["frames"] = nlohmann::json::array();
  for (const auto& f : ds.frames) {
    nlohmann::json e;
    e["file_path"] = f.file_path;
    e["transform_matrix"] = transform_matrix(f.camera);
    e["width"] = f.camera.width;
    e["height"] = f.camera.height;
    e["near"] = f.camera.near;
    e["far"] = f.camera.far;
    io::write_png(dir / (f.file_path + ".png"), f.image);
    if (!f.depth.empty()) {
      const fs::path rel = fs::path(f.file_path).filename().string() + "_depth.pfm";
      fs::create_directories(dir / "depth");
      io::write_pfm(dir / "depth" / rel, f.depth);
      e["depth_path"] = "./depth/" + rel.string();
    }
    frames.push_back(std::move(e));
  }
  io::write_text_atomic(dir / "transforms.json", j.dump(2));
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "transforms.json";
  const nlohmann::json j = io::read_json(path);
  Dataset ds;
  try {
    ds.camera_angle_x = j.at("camera_angle_x").get<double>();
    for (const auto& e : j.at("frames")) {
      Frame f;
      f.file_path = e.at("file_path").get<std::string>();
      auto img_path = dir / f.file_path;
      if (!img_path.has_extension()) img_path += ".png";
      if (!std::filesystem::exists(img_path))
        throw IoError("read_dataset: missing image " + img_path.string() + " referenced by " + path.string());
      f.image = io::read_png(img_path);
      camera_from_matrix(e.at("transform_matrix"), f.camera);
      f.camera.width = e.value("width", f.image.width);
      f.camera.height = e.value("height", f.image.height);
      f.camera.fx = f.camera.fy = focal_from_angle_x(ds.camera_angle_x, f.camera.width);
      f.camera.cx = 0.5 * f.camera.width;
      f.camera.cy = 0.5 * f.camera.height;
      const double r = f.camera.center.norm();
      f.camera.near = e.value("near", r - std::sqrt(3.0));
      f.camera.far = e.value("far", r + std::sqrt(3.0));
      if (e.contains("depth_path")) f.depth = io::read_pfm(dir / e["depth_path"].get<std::string>());
      ds.frames.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("read_dataset: malformed " + path.string() + ": " + e.what());
  }
  return ds;
}

// -- few-view split ------------------------------------------------------------

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Picks three views whose pairwise viewing angles are all below `bound_deg`;
/// every other pose becomes a held-out view.
inline Split make_extreme_split(const std::vector<PoseSpec>& poses, std::uint64_t seed, double bound_deg = 40.0) {
  if (poses.size() < 20)
    throw std::invalid_argument("make_extreme_split: need at least 20 candidate poses, got " +
                                std::to_string(poses.size()));
  std::vector<Vec3> dirs;
  for (const auto& p : poses) {
    const double ph = deg2rad(p.phi_deg), th = deg2rad(p.theta_deg);
    dirs.emplace_back(std::cos(th) * std::cos(ph), std::cos(th) * std::sin(ph), std::sin(th));
  }
  std::vector<std::size_t> order(poses.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t anchor : order) {
    std::vector<std::pair<double, std::size_t>> near;
    for (std::size_t j = 0; j < poses.size(); ++j)
      if (j != anchor) near.emplace_back(view_angle_deg(dirs[anchor], dirs[j]), j);
    std::sort(near.begin(), near.end());
    // Widest feasible trio around this anchor (largest minimum pairwise angle).
    double best = -1.0;
    std::size_t best_a = 0, best_b = 0;
    for (std::size_t a = 0; a < near.size() && near[a].first < bound_deg; ++a)
      for (std::size_t b = a + 1; b < near.size() && near[b].first < bound_deg; ++b) {
        const double ab = view_angle_deg(dirs[near[a].second], dirs[near[b].second]);
        if (ab >= bound_deg) continue;
        const double spread = std::min({near[a].first, near[b].first, ab});
        if (spread > best) {
          best = spread;
          best_a = near[a].second;
          best_b = near[b].second;
        }
      }
    if (best >= 0.0) {
      Split s;
      s.train = {anchor, best_a, best_b};
      for (std::size_t i = 0; i < poses.size(); ++i)
        if (std::find(s.train.begin(), s.train.end(), i) == s.train.end()) s.test.push_back(i);
      return s;
    }
  }
  throw std::invalid_argument("make_extreme_split: no three poses lie within " + std::to_string(bound_deg) +
                              " degrees of each other; supply a larger pose pool");
}

}  // namespace senerf::scene
