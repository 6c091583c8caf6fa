#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>

namespace senerf {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Pinhole camera. Camera axes: +x right, +y down, +z forward. `rotation`
/// maps camera axes to world axes; `center` is the camera position.
struct Camera {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 center = Vec3::Zero();
  int width = 1;
  int height = 1;
  double near = 0.1;
  double far = 10.0;

  void validate() const {
    if (!(fx > 0 && fy > 0)) throw std::invalid_argument("camera: focal lengths must be positive");
    if (!(near > 0 && near < far)) throw std::invalid_argument("camera: require 0 < near < far");
    if (width <= 0 || height <= 0) throw std::invalid_argument("camera: empty image");
    const Mat3 rtr = rotation.transpose() * rotation;
    if (!rtr.isApprox(Mat3::Identity(), 1e-6) || std::abs(rotation.determinant() - 1.0) > 1e-6)
      throw std::invalid_argument("camera: rotation must be orthonormal with det +1");
  }

  [[nodiscard]] Vec3 forward() const { return rotation.col(2); }

  /// Camera-space direction (not normalized, z = 1) through continuous pixel p.
  [[nodiscard]] Vec3 unproject(double u, double v) const {
    return {(u - cx) / fx, (v - cy) / fy, 1.0};
  }

  [[nodiscard]] Vec3 world_to_camera(const Vec3& x) const {
    return rotation.transpose() * (x - center);
  }
  [[nodiscard]] Vec3 camera_to_world(const Vec3& x) const { return rotation * x + center; }

  /// Unit world-space direction through the center of pixel (px, py).
  [[nodiscard]] Vec3 pixel_direction(int px, int py) const {
    return (rotation * unproject(px + 0.5, py + 0.5)).normalized();
  }

  /// Horizontal field of view in radians.
  [[nodiscard]] double angle_x() const { return 2.0 * std::atan(0.5 * width / fx); }
};

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

/// fx from a horizontal field of view: fx = 0.5 W / tan(0.5 angle_x).
inline double focal_from_angle_x(double angle_x, int width) {
  return 0.5 * width / std::tan(0.5 * angle_x);
}

/// Camera at azimuth phi / elevation theta (degrees) on a sphere of `radius`,
/// looking at the origin with +z as world up. The right axis is taken from
/// the azimuth, which stays defined at the poles.
inline Camera spherical_pose(double phi_deg, double theta_deg, double radius, int width, int height,
                             double fov_x_deg, double near, double far) {
  if (!(radius > 0)) throw std::invalid_argument("spherical_pose: radius must be positive");
  const double phi = deg2rad(phi_deg), theta = deg2rad(theta_deg);
  const Vec3 pos = radius * Vec3(std::cos(theta) * std::cos(phi), std::cos(theta) * std::sin(phi),
                                 std::sin(theta));
  const Vec3 fwd = -pos.normalized();
  const Vec3 right(-std::sin(phi), std::cos(phi), 0.0);
  const Vec3 down = fwd.cross(right).normalized();
  Camera cam;
  cam.rotation.col(0) = right;
  cam.rotation.col(1) = down;
  cam.rotation.col(2) = fwd;
  cam.center = pos;
  cam.width = width;
  cam.height = height;
  cam.fx = cam.fy = focal_from_angle_x(deg2rad(fov_x_deg), width);
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.near = near;
  cam.far = far;
  return cam;
}

struct SphericalCoords {
  double phi_deg = 0;
  double theta_deg = 0;
  double radius = 0;
};

inline SphericalCoords to_spherical(const Vec3& p) {
  SphericalCoords s;
  s.radius = p.norm();
  s.phi_deg = rad2deg(std::atan2(p.y(), p.x()));
  s.theta_deg = rad2deg(std::asin(std::clamp(p.z() / std::max(s.radius, 1e-300), -1.0, 1.0)));
  return s;
}

/// Great-circle angle in degrees between two viewing positions.
inline double view_angle_deg(const Vec3& a, const Vec3& b) {
  const double c = std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0);
  return rad2deg(std::acos(c));
}

/// SplitMix64; used as a counter-keyed generator so every ray has an
/// independent, schedule-free stream.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;
  explicit SplitMix64(std::uint64_t seed = 0) : state_(seed) {}
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type(0); }
  result_type operator()() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

 private:
  std::uint64_t state_;
};

inline std::uint64_t mix_key(std::uint64_t a, std::uint64_t b) {
  SplitMix64 g(a ^ (b * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL));
  return g();
}

inline std::uint64_t ray_key(std::uint64_t seed, std::uint64_t view, std::uint64_t pixel) {
  return mix_key(mix_key(seed, view), pixel);
}

}  // namespace senerf
