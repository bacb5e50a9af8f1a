#pragma once

#include <unordered_map>

#include "strata/body.hpp"
#include "strata/camera.hpp"
#include "strata/common.hpp"

namespace strata {

//! Uniform hash grid over a fixed point set with exact nearest-point queries.
class PointGrid {
 public:
  PointGrid() = default;

  void build(const std::vector<Vec3>& pts, double cell) {
    pts_ = pts;
    cell_ = cell;
    cells_.clear();
    for (int i = 0; i < static_cast<int>(pts_.size()); ++i)
      cells_[key(coord(pts_[i]))].push_back(i);
  }

  bool empty() const { return pts_.empty(); }
  const std::vector<Vec3>& points() const { return pts_; }

  //! Index of the nearest stored point; ties break toward the lower index.
  int nearest(const Vec3& p) const {
    if (pts_.empty()) throw DataError("PointGrid::nearest on empty grid");
    Eigen::Vector3i c = coord(p);
    double best_d2 = kInf;
    int best = -1;
    for (int ring = 0;; ++ring) {
      scan_ring(p, c, ring, best_d2, best);
      if (best >= 0) {
        double reach = static_cast<double>(ring) * cell_;
        if (best_d2 <= reach * reach) return best;
      }
      if (ring > 4096) {  // grid span exhausted; fall back to brute force
        for (int i = 0; i < static_cast<int>(pts_.size()); ++i) {
          double d2 = (pts_[i] - p).squaredNorm();
          if (d2 < best_d2) {
            best_d2 = d2;
            best = i;
          }
        }
        return best;
      }
    }
  }

  //! Up to k nearest stored points, ordered by ascending distance (ties break
  //! toward the lower index).
  std::vector<int> knearest(const Vec3& p, int k) const {
    if (pts_.empty()) throw DataError("PointGrid::knearest on empty grid");
    k = std::min(k, static_cast<int>(pts_.size()));
    Eigen::Vector3i c = coord(p);
    std::vector<std::pair<double, int>> found;
    auto order = [](const std::pair<double, int>& a, const std::pair<double, int>& b) {
      return a.first != b.first ? a.first < b.first : a.second < b.second;
    };
    for (int ring = 0;; ++ring) {
      for (int dx = -ring; dx <= ring; ++dx)
        for (int dy = -ring; dy <= ring; ++dy)
          for (int dz = -ring; dz <= ring; ++dz) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
            auto it = cells_.find(key(Eigen::Vector3i(c.x() + dx, c.y() + dy, c.z() + dz)));
            if (it == cells_.end()) continue;
            for (int i : it->second) found.emplace_back((pts_[i] - p).squaredNorm(), i);
          }
      bool exhausted = ring > 4096;
      if (exhausted)
        for (int i = 0; i < static_cast<int>(pts_.size()); ++i)
          found.emplace_back((pts_[i] - p).squaredNorm(), i);
      if (static_cast<int>(found.size()) >= k) {
        std::sort(found.begin(), found.end(), order);
        double reach = static_cast<double>(ring) * cell_;
        if (exhausted || found[static_cast<size_t>(k) - 1].first <= reach * reach) {
          std::vector<int> out(static_cast<size_t>(k));
          for (int i = 0; i < k; ++i) out[static_cast<size_t>(i)] = found[static_cast<size_t>(i)].second;
          return out;
        }
      }
    }
  }

 private:
  std::vector<Vec3> pts_;
  double cell_ = 0.1;
  std::unordered_map<uint64_t, std::vector<int>> cells_;

  Eigen::Vector3i coord(const Vec3& p) const {
    return Eigen::Vector3i(static_cast<int>(std::floor(p.x() / cell_)),
                           static_cast<int>(std::floor(p.y() / cell_)),
                           static_cast<int>(std::floor(p.z() / cell_)));
  }
  static uint64_t key(const Eigen::Vector3i& c) {
    auto enc = [](int v) { return static_cast<uint64_t>(v + (1 << 20)) & 0x1FFFFFull; };
    return enc(c.x()) | (enc(c.y()) << 21) | (enc(c.z()) << 42);
  }

  void scan_ring(const Vec3& p, const Eigen::Vector3i& c, int ring, double& best_d2,
                 int& best) const {
    for (int dx = -ring; dx <= ring; ++dx)
      for (int dy = -ring; dy <= ring; ++dy)
        for (int dz = -ring; dz <= ring; ++dz) {
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
          auto it = cells_.find(key(Eigen::Vector3i(c.x() + dx, c.y() + dy, c.z() + dz)));
          if (it == cells_.end()) continue;
          for (int i : it->second) {
            double d2 = (pts_[i] - p).squaredNorm();
            if (d2 < best_d2 - 1e-18 || (std::abs(d2 - best_d2) <= 1e-18 && i < best)) {
              best_d2 = d2;
              best = i;
            }
          }
        }
  }
};

//! Linear blend of joint transforms for one weight row.
inline void blend_transform(const JointTransforms& T, const Eigen::Ref<const Eigen::RowVectorXd>& w,
                            Mat3& A, Vec3& t) {
  A.setZero();
  t.setZero();
  for (int j = 0; j < static_cast<int>(w.size()); ++j) {
    if (w[j] == 0.0) continue;
    A += w[j] * T.R[j];
    t += w[j] * T.t[j];
  }
}

//! Forward linear-blend skinning of canonical points with explicit weight rows.
inline std::vector<Vec3> lbs_forward(const ParamBody& body, const PoseParams& pose,
                                     const std::vector<Vec3>& points, const MatX& weight_rows) {
  if (weight_rows.rows() != static_cast<Eigen::Index>(points.size()) ||
      weight_rows.cols() != body.joints)
    throw DataError("lbs_forward: weight shape mismatch");
  for (Eigen::Index i = 0; i < weight_rows.rows(); ++i)
    if (std::abs(weight_rows.row(i).sum() - 1.0) > 1e-5)
      throw DataError("lbs_forward: weight row does not sum to 1");
  JointTransforms T = fk(body, pose);
  std::vector<Vec3> out(points.size());
  Mat3 A;
  Vec3 t;
  for (size_t i = 0; i < points.size(); ++i) {
    blend_transform(T, weight_rows.row(static_cast<Eigen::Index>(i)), A, t);
    out[i] = A * points[i] + t;
  }
  return out;
}

//! Template deformed by a pose (each template point uses its own weight row).
inline std::vector<Vec3> deform_template(const ParamBody& body, const PoseParams& pose) {
  return lbs_forward(body, pose, body.verts, body.weights);
}

//! Per-pose state for the inverse warp: deformed template points indexed by a
//! spatial grid, so each deformed-space query point can borrow the skinning
//! weights of its nearest template point.
struct DeformContext {
  JointTransforms T;
  std::vector<Vec3> deformed;
  PointGrid grid;        // deformed template points
  PointGrid canon_grid;  // canonical template points
};

inline DeformContext make_deform_context(const ParamBody& body, const PoseParams& pose,
                                         double cell = 0.1) {
  DeformContext ctx;
  ctx.T = fk(body, pose);
  ctx.deformed.resize(body.verts.size());
  Mat3 A;
  Vec3 t;
  for (size_t i = 0; i < body.verts.size(); ++i) {
    blend_transform(ctx.T, body.weights.row(static_cast<Eigen::Index>(i)), A, t);
    ctx.deformed[i] = A * body.verts[i] + t;
  }
  ctx.grid.build(ctx.deformed, cell);
  ctx.canon_grid.build(body.verts, cell);
  return ctx;
}

struct InverseWarpResult {
  Vec3 x_c;
  int nn_vertex;  // template point whose weights were used (frozen by callers per step)
};

//! Maps a deformed-space point back to canonical space by inverting a blended
//! template transform. Near joints the weight field changes quickly, so a
//! single nearest-neighbour seed can settle on a weight row whose inverse does
//! not actually explain the query point. Several nearby template points are
//! therefore tried as seeds, each refined until its weight row is consistent
//! with the canonical location of its result, and the candidate whose forward
//! deformation best reproduces the query point wins (earlier, closer seeds win
//! exact ties).
inline InverseWarpResult lbs_inverse(const ParamBody& body, const DeformContext& ctx,
                                     const Vec3& x_d) {
  std::vector<int> seeds = ctx.grid.knearest(x_d, 8);
  Mat3 A;
  Vec3 t;
  InverseWarpResult best;
  best.nn_vertex = -1;
  double best_res = kInf;
  std::vector<int> tried;
  for (int seed : seeds) {
    bool duplicate = false;
    for (int e : tried)
      if ((body.weights.row(seed).array() == body.weights.row(e).array()).all()) {
        duplicate = true;
        break;
      }
    if (duplicate) continue;
    tried.push_back(seed);
    int idx = seed;
    Vec3 x_c = Vec3::Zero();
    for (int sweep = 0;; ++sweep) {
      blend_transform(ctx.T, body.weights.row(idx), A, t);
      if (std::abs(A.determinant()) < 1e-9) {
        idx = -1;  // degenerate blend for this seed; try the next one
        break;
      }
      x_c = A.inverse() * (x_d - t);
      if (sweep >= 3) break;
      int idx2 = ctx.canon_grid.nearest(x_c);
      if (idx2 == idx) break;
      idx = idx2;
    }
    if (idx < 0) continue;
    int row_vertex = ctx.canon_grid.nearest(x_c);
    blend_transform(ctx.T, body.weights.row(row_vertex), A, t);
    double res = (A * x_c + t - x_d).norm();
    if (res < best_res) {
      best_res = res;
      best.x_c = x_c;
      best.nn_vertex = row_vertex;
    }
    if (best_res < 1e-12) break;
  }
  if (best.nn_vertex < 0)
    throw NumericalError("lbs_inverse: every candidate blend transform is singular");
  return best;
}

//! Weight rows for arbitrary canonical points: each copies the weights of its
//! nearest canonical template point.
inline MatX weights_for_canonical_points(const ParamBody& body, const std::vector<Vec3>& pts) {
  PointGrid grid;
  grid.build(body.verts, 0.1);
  MatX W(static_cast<Eigen::Index>(pts.size()), body.joints);
  for (size_t i = 0; i < pts.size(); ++i)
    W.row(static_cast<Eigen::Index>(i)) = body.weights.row(grid.nearest(pts[i]));
  return W;
}

//! Canonical mesh/point deformation into world space under a pose.
inline std::vector<Vec3> deform_points(const ParamBody& body, const PoseParams& pose,
                                       const std::vector<Vec3>& pts) {
  return lbs_forward(body, pose, pts, weights_for_canonical_points(body, pts));
}

//! Oriented bounding box of the deformed template, framed by the root rotation
//! and grown by `pad` metres on every side.
inline Obb posed_bounding_box(const ParamBody& body, const PoseParams& pose, double pad = 0.1) {
  DeformContext ctx = make_deform_context(body, pose);
  Obb box;
  box.rot = ctx.T.R[0];
  Vec3 lo = Vec3::Constant(kInf), hi = Vec3::Constant(-kInf);
  for (const auto& p : ctx.deformed) {
    Vec3 local = box.rot.transpose() * p;
    lo = lo.cwiseMin(local);
    hi = hi.cwiseMax(local);
  }
  Vec3 c_local = 0.5 * (lo + hi);
  box.center = box.rot * c_local;
  box.half = 0.5 * (hi - lo) + Vec3::Constant(pad);
  return box;
}

struct Keypoint2d {
  Vec2 px = Vec2::Zero();
  bool valid = false;  // in front of the camera and inside the image
};

//! Projected joint keypoints; occlusion is decided later against rendered depth.
inline std::vector<Keypoint2d> keypoints_2d(const Camera& cam, const ParamBody& body,
                                            const PoseParams& pose) {
  std::vector<Vec3> jp = joint_positions(body, pose);
  std::vector<Keypoint2d> out;
  for (int k : body.keypoints) {
    Keypoint2d kp;
    if (camera_depth(cam, jp[k]) > 1e-9) {
      Vec2 px = project_point(cam, jp[k]);
      if (px.x() >= 0 && px.y() >= 0 && px.x() <= cam.width - 1 && px.y() <= cam.height - 1) {
        kp.px = px;
        kp.valid = true;
      }
    }
    out.push_back(kp);
  }
  return out;
}

//! Ray / oriented-box intersection; false when the box is missed or lies behind
//! the origin. On success t0 < t1 bound the overlap (t0 clamped to a small
//! positive value).
inline bool ray_obb_intersect(const Ray& ray, const Obb& box, double& t0, double& t1) {
  Vec3 o = box.rot.transpose() * (ray.origin - box.center);
  Vec3 d = box.rot.transpose() * ray.dir;
  double lo = -kInf, hi = kInf;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-12) {
      if (std::abs(o[a]) > box.half[a]) return false;
      continue;
    }
    double ta = (-box.half[a] - o[a]) / d[a];
    double tb = (box.half[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    lo = std::max(lo, ta);
    hi = std::min(hi, tb);
  }
  lo = std::max(lo, 1e-4);
  if (lo >= hi) return false;
  t0 = lo;
  t1 = hi;
  return true;
}

}  // namespace strata
