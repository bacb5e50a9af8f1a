#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace strata {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kPi = 3.14159265358979323846;

//! Bad configuration (unknown keys, out-of-range values, malformed config files).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

//! Missing or corrupt input data (scene dirs, images, checkpoints, meshes).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

//! Irrecoverable numerical failure.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Process exit codes used by the CLI for the error classes above.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumerical = 4;

struct Aabb {
  Vec3 lo = Vec3::Constant(kInf);
  Vec3 hi = Vec3::Constant(-kInf);

  bool empty() const { return (lo.array() > hi.array()).any(); }
  Vec3 center() const { return 0.5 * (lo + hi); }
  Vec3 extent() const { return hi - lo; }

  void expand(const Vec3& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  void expand(const Aabb& b) {
    lo = lo.cwiseMin(b.lo);
    hi = hi.cwiseMax(b.hi);
  }
  void pad(double m) {
    lo.array() -= m;
    hi.array() += m;
  }
  bool contains(const Vec3& p, double tol = 0.0) const {
    return (p.array() >= lo.array() - tol).all() && (p.array() <= hi.array() + tol).all();
  }
  static Aabb of_points(const std::vector<Vec3>& pts) {
    Aabb b;
    for (const auto& p : pts) b.expand(p);
    return b;
  }
};

//! Oriented box: world point x lies inside iff R^T (x - center) is within [-half, half].
struct Obb {
  Vec3 center = Vec3::Zero();
  Mat3 rot = Mat3::Identity();  // columns are box axes in world coordinates
  Vec3 half = Vec3::Zero();

  bool contains(const Vec3& p, double tol = 0.0) const {
    Vec3 local = rot.transpose() * (p - center);
    return (local.array().abs() <= half.array() + tol).all();
  }
};

inline bool approx_eq(double a, double b, double tol) { return std::abs(a - b) <= tol; }

}  // namespace strata
