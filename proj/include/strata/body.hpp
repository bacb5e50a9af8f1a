#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "strata/common.hpp"

namespace strata {

//! Global translation plus one axis-angle rotation per joint.
struct PoseParams {
  Vec3 trans = Vec3::Zero();
  std::vector<Vec3> joint_rot;  // axis-angle, magnitude < 2*pi

  explicit PoseParams(int joints = 0) : joint_rot(joints, Vec3::Zero()) {}

  int joints() const { return static_cast<int>(joint_rot.size()); }

  //! Flat layout used by the optimizer and checkpoints: [trans, rot_0, rot_1, ...].
  VecX flatten() const {
    VecX v(3 + 3 * joints());
    v.segment<3>(0) = trans;
    for (int j = 0; j < joints(); ++j) v.segment<3>(3 + 3 * j) = joint_rot[j];
    return v;
  }
  static PoseParams unflatten(const VecX& v) {
    PoseParams p(static_cast<int>((v.size() - 3) / 3));
    p.trans = v.segment<3>(0);
    for (int j = 0; j < p.joints(); ++j) p.joint_rot[j] = v.segment<3>(3 + 3 * j);
    return p;
  }
};

inline void validate_pose(const PoseParams& p) {
  for (const auto& r : p.joint_rot)
    if (!(r.norm() < 2.0 * kPi)) throw ConfigError("pose: axis-angle magnitude must be < 2*pi");
}

//! Low-dimensional shape coefficients. Only the first entry has an effect:
//! it scales the whole template (and rest skeleton) by 1 + 0.1 * beta[0].
struct ShapeParams {
  VecX beta = VecX::Zero(10);
};

//! Capsule-skeleton body: a joint tree with one capsule per (parent, child) bone,
//! a point template sampled on the capsule surfaces, and skinning weights tying
//! template points to joints.
struct ParamBody {
  int joints = 0;
  std::vector<std::string> names;
  std::vector<int> parents;       // parents[0] == -1; parents[j] < j
  std::vector<Vec3> rest;         // rest-pose joint positions
  std::vector<double> radius;     // capsule radius of bone (parents[j] -> j); [0] unused
  std::vector<Vec3> verts;        // template surface points (canonical pose)
  MatX weights;                   // verts x joints, rows sum to 1
  std::vector<int> keypoints;     // joint indices used as segmentation prompts
};

inline void validate_body(const ParamBody& b) {
  if (b.joints <= 0) throw DataError("body: needs at least one joint");
  if (b.parents.size() != static_cast<size_t>(b.joints) ||
      b.rest.size() != static_cast<size_t>(b.joints))
    throw DataError("body: joint array size mismatch");
  if (b.parents[0] != -1) throw DataError("body: joint 0 must be the root");
  for (int j = 1; j < b.joints; ++j)
    if (b.parents[j] < 0 || b.parents[j] >= j)
      throw DataError("body: parents must form a tree with parents[j] < j");
  if (b.weights.rows() != static_cast<Eigen::Index>(b.verts.size()) ||
      b.weights.cols() != b.joints)
    throw DataError("body: skinning weight shape mismatch");
  for (Eigen::Index i = 0; i < b.weights.rows(); ++i) {
    if ((b.weights.row(i).array() < -1e-12).any())
      throw DataError("body: skinning weights must be non-negative");
    if (std::abs(b.weights.row(i).sum() - 1.0) > 1e-6)
      throw DataError("body: skinning weight rows must sum to 1");
  }
  for (int k : b.keypoints)
    if (k < 0 || k >= b.joints) throw DataError("body: keypoint index out of range");
}

//! Rotation matrix from an axis-angle vector, stable near zero.
inline Mat3 rot_from_axis_angle(const Vec3& w) {
  double th2 = w.squaredNorm();
  Mat3 K;
  K << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  double a, b;
  if (th2 > 1e-12) {
    double th = std::sqrt(th2);
    a = std::sin(th) / th;
    b = (1.0 - std::cos(th)) / th2;
  } else {
    a = 1.0 - th2 / 6.0;
    b = 0.5 - th2 / 24.0;
  }
  return Mat3::Identity() + a * K + b * (K * K);
}

//! World affine transform per joint: x_world = R[j] * x + t[j] for points rigidly
//! attached to joint j's frame.
struct JointTransforms {
  std::vector<Mat3> R;
  std::vector<Vec3> t;

  Vec3 apply(int j, const Vec3& x) const { return R[j] * x + t[j]; }
};

//! Forward kinematics. Each joint rotates about its rest position; the chain is
//! composed root-to-leaf, and the global translation rides on the root.
inline JointTransforms fk(const ParamBody& body, const PoseParams& pose) {
  if (pose.joints() != body.joints) throw DataError("fk: pose joint count mismatch");
  JointTransforms T;
  T.R.resize(body.joints);
  T.t.resize(body.joints);
  for (int j = 0; j < body.joints; ++j) {
    Mat3 Rl = rot_from_axis_angle(pose.joint_rot[j]);
    // Local map: rotate about rest[j], i.e. x -> Rl * (x - rest[j]) + rest[j].
    Mat3 Rp = Mat3::Identity();
    Vec3 tp = Vec3::Zero();
    if (j == 0) {
      tp = pose.trans;
    } else {
      Rp = T.R[body.parents[j]];
      tp = T.t[body.parents[j]];
    }
    T.R[j] = Rp * Rl;
    T.t[j] = tp + Rp * (body.rest[j] - Rl * body.rest[j]);
  }
  return T;
}

//! World position of every joint under a pose.
inline std::vector<Vec3> joint_positions(const ParamBody& body, const PoseParams& pose) {
  JointTransforms T = fk(body, pose);
  std::vector<Vec3> out(body.joints);
  for (int j = 0; j < body.joints; ++j) out[j] = T.apply(j, body.rest[j]);
  return out;
}

inline double point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  Vec3 ab = b - a;
  double len2 = ab.squaredNorm();
  double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
  t = std::min(1.0, std::max(0.0, t));
  return (p - (a + t * ab)).norm();
}

//! Signed distance to the union of the body's bone capsules in the rest pose.
inline double capsule_union_sdf(const ParamBody& body, const Vec3& p) {
  double best = kInf;
  for (int j = 1; j < body.joints; ++j) {
    double d = point_segment_distance(p, body.rest[body.parents[j]], body.rest[j]) - body.radius[j];
    best = std::min(best, d);
  }
  return best;
}

namespace detail {

inline void capsule_frame(const Vec3& a, const Vec3& b, Vec3& u, Vec3& v, Vec3& w) {
  w = (b - a).normalized();
  Vec3 pick = std::abs(w.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  u = w.cross(pick).normalized();
  v = w.cross(u);
}

}  // namespace detail

//! Samples the template point set on the capsule surfaces and derives skinning
//! weights: inverse fourth-power distance to each bone, credited to the bone's
//! parent joint, normalized, with entries below 1% snapped to zero so points in
//! the middle of a limb bind rigidly.
inline void build_template(ParamBody& body, int radial = 8, double ring_spacing = 0.02) {
  body.verts.clear();
  std::vector<Vec3> pts;
  std::vector<bool> has_child(body.joints, false);
  for (int j = 1; j < body.joints; ++j) has_child[body.parents[j]] = true;
  for (int j = 1; j < body.joints; ++j) {
    Vec3 a = body.rest[body.parents[j]];
    Vec3 b = body.rest[j];
    double r = body.radius[j];
    Vec3 u, v, w;
    detail::capsule_frame(a, b, u, v, w);
    double len = (b - a).norm();
    int rings = std::max(2, static_cast<int>(std::ceil(len / ring_spacing)) + 1);
    for (int i = 0; i < rings; ++i) {
      double t = rings == 1 ? 0.5 : static_cast<double>(i) / (rings - 1);
      Vec3 c = a + t * (b - a);
      for (int k = 0; k < radial; ++k) {
        double ang = 2.0 * kPi * (k + 0.5 * (i % 2)) / radial;
        pts.push_back(c + r * (std::cos(ang) * u + std::sin(ang) * v));
      }
    }
    // Cap apex only at free bone ends; at interior joints an apex point would
    // sit inside the neighbouring capsule and confuse nearest-point lookups.
    if (!has_child[j]) pts.push_back(b + r * w);
  }
  body.verts = std::move(pts);

  const int n = static_cast<int>(body.verts.size());
  body.weights = MatX::Zero(n, body.joints);
  // Inverse-squared distance to each bone, faded out smoothly by surface
  // clearance: bones more than 6 cm of clearance away contribute nothing, so
  // weights blend across touching capsules (joint regions) but never across
  // limbs, and points along the middle of a limb bind rigidly.
  const double c_max = 0.06;
  for (int i = 0; i < n; ++i) {
    for (int j = 1; j < body.joints; ++j) {
      double d = point_segment_distance(body.verts[i], body.rest[body.parents[j]], body.rest[j]);
      double c = d - body.radius[j];
      if (c >= c_max) continue;
      double fade = c <= 0.0 ? 1.0 : (1.0 - c / c_max) * (1.0 - c / c_max);
      body.weights(i, body.parents[j]) += fade / std::pow(d + 1e-3, 2);
    }
    body.weights.row(i) /= body.weights.row(i).sum();
    for (int j = 0; j < body.joints; ++j)
      if (body.weights(i, j) < 0.01) body.weights(i, j) = 0.0;
    body.weights.row(i) /= body.weights.row(i).sum();
  }
}

//! Applies shape coefficients: beta[0] scales the rest skeleton, capsule radii
//! and template uniformly about the root.
inline ParamBody apply_shape(const ParamBody& body, const ShapeParams& shape) {
  double s = 1.0 + 0.1 * (shape.beta.size() > 0 ? shape.beta[0] : 0.0);
  if (s == 1.0) return body;
  ParamBody out = body;
  Vec3 origin = body.rest[0];
  for (auto& r : out.rest) r = origin + s * (r - origin);
  for (auto& rad : out.radius) rad *= s;
  for (auto& v : out.verts) v = origin + s * (v - origin);
  return out;
}

//! The built-in 20-joint figure (pelvis-rooted torso/head chain plus two arms
//! and two legs), standing along +y and facing +z.
inline ParamBody default_body() {
  ParamBody b;
  struct J {
    const char* name;
    int parent;
    double x, y, z, r;
  };
  static const J js[] = {
      {"pelvis", -1, 0.00, 0.00, 0.00, 0.00},  {"spine", 0, 0.00, 0.18, 0.00, 0.11},
      {"chest", 1, 0.00, 0.36, 0.00, 0.11},    {"neck", 2, 0.00, 0.52, 0.00, 0.06},
      {"head", 3, 0.00, 0.60, 0.00, 0.09},     {"l_shoulder", 2, 0.18, 0.48, 0.00, 0.06},
      {"l_elbow", 5, 0.44, 0.48, 0.00, 0.05},  {"l_wrist", 6, 0.68, 0.48, 0.00, 0.045},
      {"r_shoulder", 2, -0.18, 0.48, 0.00, 0.06}, {"r_elbow", 8, -0.44, 0.48, 0.00, 0.05},
      {"r_wrist", 9, -0.68, 0.48, 0.00, 0.045}, {"l_hip", 0, 0.09, -0.05, 0.00, 0.07},
      {"l_knee", 11, 0.09, -0.48, 0.00, 0.065}, {"l_ankle", 12, 0.09, -0.90, 0.00, 0.055},
      {"l_foot", 13, 0.09, -0.95, 0.10, 0.045}, {"r_hip", 0, -0.09, -0.05, 0.00, 0.07},
      {"r_knee", 15, -0.09, -0.48, 0.00, 0.065}, {"r_ankle", 16, -0.09, -0.90, 0.00, 0.055},
      {"r_foot", 17, -0.09, -0.95, 0.10, 0.045}, {"head_top", 4, 0.00, 0.76, 0.00, 0.08},
  };
  b.joints = static_cast<int>(std::size(js));
  for (const auto& j : js) {
    b.names.push_back(j.name);
    b.parents.push_back(j.parent);
    b.rest.emplace_back(j.x, j.y, j.z);
    b.radius.push_back(j.r);
  }
  for (int j = 0; j < b.joints; ++j) b.keypoints.push_back(j);
  build_template(b);
  validate_body(b);
  return b;
}

// ---------------------------------------------------------------------------
// Body definition file: plain text, '#' comments.
//   joints <J>
//   <id> <name> <parent> <x> <y> <z> <radius>   (J lines)
//   keypoints <k0> <k1> ...                      (optional; defaults to all)
// Template points and skinning weights are derived, not stored.
// ---------------------------------------------------------------------------

inline void save_body(const std::string& path, const ParamBody& body) {
  std::ofstream f(path);
  if (!f) throw DataError("save_body: cannot open " + path);
  f << "# strata body v1\n";
  f << "joints " << body.joints << "\n";
  for (int j = 0; j < body.joints; ++j)
    f << j << " " << body.names[j] << " " << body.parents[j] << " " << body.rest[j].x() << " "
      << body.rest[j].y() << " " << body.rest[j].z() << " " << body.radius[j] << "\n";
  f << "keypoints";
  for (int k : body.keypoints) f << " " << k;
  f << "\n";
  if (!f) throw DataError("save_body: write failed for " + path);
}

inline ParamBody load_body(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("load_body: cannot open " + path);
  ParamBody b;
  std::string line;
  int lineno = 0;
  int expected = -1;
  auto fail = [&](const std::string& why) {
    throw DataError("load_body: " + path + ":" + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(f, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::string tok;
    if (!(ss >> tok)) continue;
    if (tok == "joints") {
      if (!(ss >> expected) || expected <= 0) fail("bad joint count");
    } else if (tok == "keypoints") {
      int k;
      while (ss >> k) b.keypoints.push_back(k);
    } else {
      int id = 0, parent = 0;
      std::string name;
      double x, y, z, r;
      try {
        id = std::stoi(tok);
      } catch (...) {
        fail("unexpected token '" + tok + "'");
      }
      if (!(ss >> name >> parent >> x >> y >> z >> r)) fail("malformed joint line");
      if (id != b.joints) fail("joint ids must be consecutive from 0");
      b.names.push_back(name);
      b.parents.push_back(parent);
      b.rest.emplace_back(x, y, z);
      b.radius.push_back(r);
      b.joints++;
    }
  }
  if (expected < 0) throw DataError("load_body: " + path + ": missing 'joints' header");
  if (b.joints != expected)
    throw DataError("load_body: " + path + ": expected " + std::to_string(expected) +
                    " joints, found " + std::to_string(b.joints));
  if (b.keypoints.empty())
    for (int j = 0; j < b.joints; ++j) b.keypoints.push_back(j);
  build_template(b);
  validate_body(b);
  return b;
}

}  // namespace strata
