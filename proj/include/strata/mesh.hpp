#pragma once
// Triangle meshes: iso-surface extraction from signed-distance samples,
// watertightness checks, inside/outside classification by ray parity, closest
// point-to-surface distances, and ASCII export.
//
// Extraction marches the six-tetrahedra decomposition of each grid cell. The
// decomposition is translation-consistent (neighbouring cells induce the same
// diagonal on their shared face), and every surface vertex is created once per
// grid edge and shared through a map, so the result is closed and 2-manifold
// by construction whenever the level set stays inside the sampling box; the
// outermost sample layer is clamped to "outside" so a field leaking through
// the box is capped rather than left open.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "strata/common.hpp"
#include "strata/field.hpp"
#include "strata/rng.hpp"

namespace strata {

struct TriMesh {
  std::vector<Vec3> verts;
  std::vector<std::array<int, 3>> faces;
  std::vector<Vec3> normals;  // optional, per vertex

  bool empty() const { return faces.empty(); }
};

inline void validate_mesh(const TriMesh& m) {
  const int n = static_cast<int>(m.verts.size());
  for (const auto& f : m.faces)
    for (int k = 0; k < 3; ++k)
      if (f[static_cast<size_t>(k)] < 0 || f[static_cast<size_t>(k)] >= n)
        throw DataError("mesh face index out of range");
  if (!m.normals.empty() && m.normals.size() != m.verts.size())
    throw DataError("mesh normals must match vertex count");
}

//! Every undirected edge shared by exactly two faces, and no degenerate faces.
inline bool is_closed_two_manifold(const TriMesh& m) {
  std::unordered_map<uint64_t, int> edge_count;
  edge_count.reserve(m.faces.size() * 3);
  for (const auto& f : m.faces) {
    if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) return false;
    for (int k = 0; k < 3; ++k) {
      int a = f[static_cast<size_t>(k)], b = f[static_cast<size_t>((k + 1) % 3)];
      uint64_t key = (static_cast<uint64_t>(std::min(a, b)) << 32) | static_cast<uint32_t>(std::max(a, b));
      ++edge_count[key];
    }
  }
  for (const auto& [key, count] : edge_count)
    if (count != 2) return false;
  return !m.faces.empty();
}

inline Vec3 face_normal(const TriMesh& m, int face) {
  const auto& f = m.faces[static_cast<size_t>(face)];
  return (m.verts[static_cast<size_t>(f[1])] - m.verts[static_cast<size_t>(f[0])])
      .cross(m.verts[static_cast<size_t>(f[2])] - m.verts[static_cast<size_t>(f[0])]);
}

//! Area-weighted per-vertex normals (zero-area faces contribute nothing).
inline void compute_vertex_normals(TriMesh& m) {
  m.normals.assign(m.verts.size(), Vec3::Zero());
  for (int i = 0; i < static_cast<int>(m.faces.size()); ++i) {
    Vec3 n = face_normal(m, i);
    for (int k = 0; k < 3; ++k) m.normals[static_cast<size_t>(m.faces[static_cast<size_t>(i)][static_cast<size_t>(k)])] += n;
  }
  for (auto& n : m.normals) {
    double len = n.norm();
    if (len > 1e-20) n /= len;
  }
}

// ---------------------------------------------------------------------------
// Iso-surface extraction
// ---------------------------------------------------------------------------

namespace detail {

// The six tetrahedra of a cell, as local corner ids (bit 0 = +x, 1 = +y,
// 2 = +z). Each follows an axis-order path from corner 0 to corner 7.
inline constexpr std::array<std::array<int, 4>, 6> kCellTets = {{
    {0, 1, 3, 7},
    {0, 1, 5, 7},
    {0, 2, 3, 7},
    {0, 2, 6, 7},
    {0, 4, 5, 7},
    {0, 4, 6, 7},
}};

}  // namespace detail

//! Marches the zero level set of `sdf` sampled on a (res+1)^3 grid over `box`.
//! Negative values are inside. An all-positive field yields an explicit empty
//! mesh. Faces are wound so normals point toward positive values.
template <class SdfFn>
TriMesh extract_iso_mesh(SdfFn&& sdf, const Aabb& box, int res) {
  if (res < 2) throw ConfigError("extract_iso_mesh: resolution must be at least 2");
  const int nv = res + 1;
  const Vec3 extent = box.hi - box.lo;
  const Vec3 step = extent / res;
  auto vid = [nv](int i, int j, int k) { return (k * nv + j) * nv + i; };
  auto vpos = [&](int i, int j, int k) {
    return Vec3(box.lo + Vec3(i * step.x(), j * step.y(), k * step.z()));
  };

  std::vector<double> val(static_cast<size_t>(nv) * nv * nv);
  for (int k = 0; k < nv; ++k)
    for (int j = 0; j < nv; ++j)
      for (int i = 0; i < nv; ++i) {
        double s = sdf(vpos(i, j, k));
        if (!std::isfinite(s)) throw NumericalError("extract_iso_mesh: non-finite field sample");
        if (s == 0.0) s = 1e-12;  // a single global sign convention keeps faces consistent
        bool boundary = i == 0 || j == 0 || k == 0 || i == nv - 1 || j == nv - 1 || k == nv - 1;
        if (boundary) s = std::max(s, 1e-9);  // cap anything leaking out of the box
        val[static_cast<size_t>(vid(i, j, k))] = s;
      }

  TriMesh mesh;
  std::unordered_map<uint64_t, int> edge_vertex;
  auto corner_of = [&](int base_i, int base_j, int base_k, int local, int& i, int& j, int& k) {
    i = base_i + (local & 1);
    j = base_j + ((local >> 1) & 1);
    k = base_k + ((local >> 2) & 1);
  };
  auto edge_point = [&](int ga, int gb, const Vec3& pa, const Vec3& pb, double sa, double sb) {
    int lo = std::min(ga, gb), hi = std::max(ga, gb);
    uint64_t key = (static_cast<uint64_t>(lo) << 32) | static_cast<uint32_t>(hi);
    auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;
    // Interpolate in canonical (lo, hi) order so shared vertices match exactly.
    const Vec3& plo = ga < gb ? pa : pb;
    const Vec3& phi = ga < gb ? pb : pa;
    double slo = ga < gb ? sa : sb;
    double shi = ga < gb ? sb : sa;
    double t = slo / (slo - shi);
    Vec3 p = plo + t * (phi - plo);
    int id = static_cast<int>(mesh.verts.size());
    mesh.verts.push_back(p);
    edge_vertex.emplace(key, id);
    return id;
  };

  for (int k = 0; k < res; ++k)
    for (int j = 0; j < res; ++j)
      for (int i = 0; i < res; ++i) {
        int gi[8], gj[8], gk[8], gid[8];
        double s[8];
        Vec3 p[8];
        for (int c = 0; c < 8; ++c) {
          corner_of(i, j, k, c, gi[c], gj[c], gk[c]);
          gid[c] = vid(gi[c], gj[c], gk[c]);
          s[c] = val[static_cast<size_t>(gid[c])];
          p[c] = vpos(gi[c], gj[c], gk[c]);
        }
        for (const auto& tet : detail::kCellTets) {
          int inside[4], outside[4];
          int ni = 0, no = 0;
          for (int c : tet) {
            if (s[c] < 0.0)
              inside[ni++] = c;
            else
              outside[no++] = c;
          }
          if (ni == 0 || ni == 4) continue;
          Vec3 in_pt = Vec3::Zero(), out_pt = Vec3::Zero();
          for (int c = 0; c < ni; ++c) in_pt += p[inside[c]];
          for (int c = 0; c < no; ++c) out_pt += p[outside[c]];
          in_pt /= ni;
          out_pt /= no;
          auto emit = [&](int a, int b, int c) {
            Vec3 n = (mesh.verts[static_cast<size_t>(b)] - mesh.verts[static_cast<size_t>(a)])
                         .cross(mesh.verts[static_cast<size_t>(c)] - mesh.verts[static_cast<size_t>(a)]);
            if (n.dot(out_pt - in_pt) >= 0.0)
              mesh.faces.push_back({a, b, c});
            else
              mesh.faces.push_back({a, c, b});
          };
          auto ep = [&](int ca, int cb) { return edge_point(gid[ca], gid[cb], p[ca], p[cb], s[ca], s[cb]); };
          if (ni == 1) {
            int v0 = ep(inside[0], outside[0]);
            int v1 = ep(inside[0], outside[1]);
            int v2 = ep(inside[0], outside[2]);
            emit(v0, v1, v2);
          } else if (ni == 3) {
            int v0 = ep(outside[0], inside[0]);
            int v1 = ep(outside[0], inside[1]);
            int v2 = ep(outside[0], inside[2]);
            emit(v0, v1, v2);
          } else {  // two in, two out: a quad split into two triangles
            int q0 = ep(inside[0], outside[0]);
            int q1 = ep(inside[0], outside[1]);
            int q2 = ep(inside[1], outside[1]);
            int q3 = ep(inside[1], outside[0]);
            emit(q0, q1, q2);
            emit(q0, q2, q3);
          }
        }
      }
  return mesh;
}

//! Zero-level-set mesh of a canonical field at a pose. The sampling box is a
//! cube enclosing the field's initialization sphere unless overridden; field
//! evaluation is batched per grid slab.
inline TriMesh extract_canonical_mesh(const CanonicalField& field, const PoseParams& pose,
                                      int res, const Aabb* box_override = nullptr) {
  Aabb box;
  if (box_override) {
    box = *box_override;
  } else {
    double r = field.sphere_radius + 0.15;
    box.lo = Vec3::Constant(-r);
    box.hi = Vec3::Constant(r);
  }
  const int nv = res + 1;
  VecX pose_vec = pose.flatten();
  std::vector<double> val(static_cast<size_t>(nv) * nv * nv);
  const Vec3 step = (box.hi - box.lo) / res;
  MatX pts(nv * nv, 3);
  for (int k = 0; k < nv; ++k) {
    for (int j = 0; j < nv; ++j)
      for (int i = 0; i < nv; ++i)
        pts.row(j * nv + i) =
            (box.lo + Vec3(i * step.x(), j * step.y(), k * step.z())).transpose();
    VecX s;
    eval_field_batch(field, pts, pose_vec, &s, nullptr, nullptr);
    for (int n = 0; n < nv * nv; ++n)
      val[static_cast<size_t>(k) * nv * nv + static_cast<size_t>(n)] = s[n];
  }
  auto lookup = [&](const Vec3& x) {
    // Recover the grid index from the position; extraction only queries grid
    // points, so the rounded index is exact.
    Vec3 rel = (x - box.lo).cwiseQuotient(step);
    int i = static_cast<int>(std::lround(rel.x()));
    int j = static_cast<int>(std::lround(rel.y()));
    int k = static_cast<int>(std::lround(rel.z()));
    return val[(static_cast<size_t>(k) * nv + static_cast<size_t>(j)) * nv + static_cast<size_t>(i)];
  };
  return extract_iso_mesh(lookup, box, res);
}

// ---------------------------------------------------------------------------
// Ray parity containment
// ---------------------------------------------------------------------------

namespace detail {

enum class RayHit { kMiss, kHit, kDegenerate };

inline RayHit ray_triangle(const Vec3& orig, const Vec3& dir, const Vec3& a, const Vec3& b,
                           const Vec3& c) {
  const double eps_det = 1e-12, eps_bary = 1e-9;
  Vec3 e1 = b - a, e2 = c - a;
  Vec3 pv = dir.cross(e2);
  double det = e1.dot(pv);
  double scale = std::max({e1.norm() * e2.norm(), 1e-30});
  if (std::abs(det) < eps_det * scale) return RayHit::kMiss;  // parallel or degenerate triangle
  double inv = 1.0 / det;
  Vec3 tv = orig - a;
  double u = tv.dot(pv) * inv;
  if (u < -eps_bary || u > 1.0 + eps_bary) return RayHit::kMiss;
  Vec3 qv = tv.cross(e1);
  double v = dir.dot(qv) * inv;
  if (v < -eps_bary || v + u > 1.0 + eps_bary) return RayHit::kMiss;
  double t = e2.dot(qv) * inv;
  if (t < -eps_bary) return RayHit::kMiss;
  bool edge = u < eps_bary || v < eps_bary || u + v > 1.0 - eps_bary || t < eps_bary;
  if (edge) return RayHit::kDegenerate;  // grazing a vertex/edge or starting on the surface
  return RayHit::kHit;
}

}  // namespace detail

//! Bins triangles by their (y, z) bounding rectangle so that near-axis +x rays
//! only test triangles whose slab the ray passes through.
class MeshRayAccel {
 public:
  MeshRayAccel() = default;
  explicit MeshRayAccel(const TriMesh& mesh, int bins = 64) { build(mesh, bins); }

  void build(const TriMesh& mesh, int bins = 64) {
    mesh_ = &mesh;
    bins_ = std::max(1, bins);
    lists_.assign(static_cast<size_t>(bins_) * bins_, {});
    lo_ = Eigen::Vector2d(kInf, kInf);
    hi_ = Eigen::Vector2d(-kInf, -kInf);
    for (const auto& v : mesh.verts) {
      lo_ = lo_.cwiseMin(Eigen::Vector2d(v.y(), v.z()));
      hi_ = hi_.cwiseMax(Eigen::Vector2d(v.y(), v.z()));
    }
    if (mesh.verts.empty()) return;
    // Margin absorbs the small direction perturbations used on retries.
    Eigen::Vector2d span = (hi_ - lo_).cwiseMax(1e-9);
    lo_ -= 0.02 * span;
    hi_ += 0.02 * span;
    span = hi_ - lo_;
    for (int f = 0; f < static_cast<int>(mesh.faces.size()); ++f) {
      Eigen::Vector2d tlo(kInf, kInf), thi(-kInf, -kInf);
      for (int k = 0; k < 3; ++k) {
        const Vec3& v = mesh.verts[static_cast<size_t>(mesh.faces[static_cast<size_t>(f)][static_cast<size_t>(k)])];
        tlo = tlo.cwiseMin(Eigen::Vector2d(v.y(), v.z()));
        thi = thi.cwiseMax(Eigen::Vector2d(v.y(), v.z()));
      }
      int y0 = bin_index((tlo.x() - lo_.x()) / span.x());
      int y1 = bin_index((thi.x() - lo_.x()) / span.x());
      int z0 = bin_index((tlo.y() - lo_.y()) / span.y());
      int z1 = bin_index((thi.y() - lo_.y()) / span.y());
      for (int zz = z0; zz <= z1; ++zz)
        for (int yy = y0; yy <= y1; ++yy)
          lists_[static_cast<size_t>(zz) * bins_ + static_cast<size_t>(yy)].push_back(f);
    }
  }

  //! Triangles whose slab contains (y, z); nullptr when outside all bins.
  const std::vector<int>* candidates(double y, double z) const {
    if (!mesh_ || mesh_->verts.empty()) return nullptr;
    if (y < lo_.x() || y > hi_.x() || z < lo_.y() || z > hi_.y()) return nullptr;
    int yy = bin_index((y - lo_.x()) / (hi_.x() - lo_.x()));
    int zz = bin_index((z - lo_.y()) / (hi_.y() - lo_.y()));
    return &lists_[static_cast<size_t>(zz) * bins_ + static_cast<size_t>(yy)];
  }

 private:
  const TriMesh* mesh_ = nullptr;
  int bins_ = 64;
  Eigen::Vector2d lo_, hi_;
  std::vector<std::vector<int>> lists_;

  int bin_index(double frac) const {
    return std::clamp(static_cast<int>(frac * bins_), 0, bins_ - 1);
  }
};

//! True iff a +x ray from `x` crosses the closed surface an odd number of
//! times. Rays that graze an edge, vertex, or the starting surface are retried
//! with a deterministic pseudorandom tilt; persistent degeneracy throws.
inline bool point_inside_by_parity(const Vec3& x, const TriMesh& mesh,
                                   const MeshRayAccel* accel = nullptr, uint64_t salt = 0) {
  if (mesh.faces.empty()) return false;
  for (int attempt = 0; attempt < 32; ++attempt) {
    Vec3 dir(1, 0, 0);
    if (attempt > 0) {
      KeyedRng rng(salt, {0x9A71ULL, static_cast<uint64_t>(attempt)});
      double tilt = 1e-3 * attempt;
      dir = Vec3(1.0, tilt * (rng.uniform() - 0.5), tilt * (rng.uniform() - 0.5)).normalized();
    }
    int crossings = 0;
    bool degenerate = false;
    auto test = [&](int f) {
      const auto& face = mesh.faces[static_cast<size_t>(f)];
      detail::RayHit h = detail::ray_triangle(x, dir, mesh.verts[static_cast<size_t>(face[0])],
                                              mesh.verts[static_cast<size_t>(face[1])],
                                              mesh.verts[static_cast<size_t>(face[2])]);
      if (h == detail::RayHit::kHit) ++crossings;
      if (h == detail::RayHit::kDegenerate) degenerate = true;
    };
    if (accel && attempt == 0) {
      const std::vector<int>* cand = accel->candidates(x.y(), x.z());
      if (!cand) return false;
      for (int f : *cand) {
        test(f);
        if (degenerate) break;
      }
    } else {
      for (int f = 0; f < static_cast<int>(mesh.faces.size()); ++f) {
        test(f);
        if (degenerate) break;
      }
    }
    if (!degenerate) return (crossings % 2) == 1;
  }
  throw NumericalError("point_inside_by_parity: ray degenerate after 32 perturbed retries");
}

// ---------------------------------------------------------------------------
// Point-to-surface distance
// ---------------------------------------------------------------------------

//! Closest point on a triangle (Ericson's region classification).
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  Vec3 ab = b - a, ac = c - a, ap = p - a;
  double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return a;
  Vec3 bp = p - b;
  double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return b;
  double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) return a + (d1 / (d1 - d3)) * ab;
  Vec3 cp = p - c;
  double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return c;
  double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) return a + (d2 / (d2 - d6)) * ac;
  double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0)
    return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);
  double denom = va + vb + vc;
  if (std::abs(denom) < 1e-30) return a;  // degenerate sliver: any corner is as close
  double v = vb / denom, w = vc / denom;
  return a + v * ab + w * ac;
}

//! Uniform grid over triangle bounding boxes with an expanding-ring nearest
//! query, mirroring the point-grid used for skinning.
class TriangleGrid {
 public:
  TriangleGrid() = default;
  TriangleGrid(const TriMesh& mesh, double cell) { build(mesh, cell); }

  void build(const TriMesh& mesh, double cell) {
    mesh_ = &mesh;
    cell_ = cell;
    cells_.clear();
    Vec3 glo = Vec3::Constant(kInf), ghi = Vec3::Constant(-kInf);
    for (int f = 0; f < static_cast<int>(mesh.faces.size()); ++f) {
      Vec3 lo = Vec3::Constant(kInf), hi = Vec3::Constant(-kInf);
      for (int k = 0; k < 3; ++k) {
        const Vec3& v = mesh.verts[static_cast<size_t>(mesh.faces[static_cast<size_t>(f)][static_cast<size_t>(k)])];
        lo = lo.cwiseMin(v);
        hi = hi.cwiseMax(v);
      }
      glo = glo.cwiseMin(lo);
      ghi = ghi.cwiseMax(hi);
      Eigen::Vector3i c0 = coord(lo), c1 = coord(hi);
      for (int z = c0.z(); z <= c1.z(); ++z)
        for (int y = c0.y(); y <= c1.y(); ++y)
          for (int x = c0.x(); x <= c1.x(); ++x)
            cells_[key(Eigen::Vector3i(x, y, z))].push_back(f);
    }
    if (!mesh.faces.empty()) {
      glo_ = coord(glo);
      ghi_ = coord(ghi);
    }
  }

  //! Distance from p to the mesh surface; also reports the closest triangle.
  //! The ring expansion starts from the query's cell clamped into the grid
  //! bounds, so any cell at Chebyshev ring r still lies at least (r-1) cells
  //! from the query and far-away queries stay cheap: once every grid cell has
  //! been scanned the exact minimum is in hand.
  double distance(const Vec3& p, int* tri_out = nullptr) const {
    if (!mesh_ || mesh_->faces.empty()) throw DataError("TriangleGrid::distance on empty mesh");
    Eigen::Vector3i c = coord(p).cwiseMax(glo_).cwiseMin(ghi_);
    const int span = (ghi_ - glo_).maxCoeff();
    double best = kInf;
    int best_tri = -1;
    for (int ring = 0;; ++ring) {
      scan_ring(p, c, ring, best, best_tri);
      if (best_tri >= 0 && best <= static_cast<double>(ring) * cell_) break;
      if (ring >= span) break;
    }
    if (tri_out) *tri_out = best_tri;
    return best;
  }

 private:
  const TriMesh* mesh_ = nullptr;
  double cell_ = 0.1;
  Eigen::Vector3i glo_ = Eigen::Vector3i::Zero(), ghi_ = Eigen::Vector3i::Zero();
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
  void test(const Vec3& p, int f, double& best, int& best_tri) const {
    const auto& face = mesh_->faces[static_cast<size_t>(f)];
    Vec3 q = closest_point_on_triangle(p, mesh_->verts[static_cast<size_t>(face[0])],
                                       mesh_->verts[static_cast<size_t>(face[1])],
                                       mesh_->verts[static_cast<size_t>(face[2])]);
    double d = (q - p).norm();
    if (d < best || (d == best && f < best_tri)) {
      best = d;
      best_tri = f;
    }
  }
  void scan_ring(const Vec3& p, const Eigen::Vector3i& c, int ring, double& best,
                 int& best_tri) const {
    for (int dx = -ring; dx <= ring; ++dx)
      for (int dy = -ring; dy <= ring; ++dy)
        for (int dz = -ring; dz <= ring; ++dz) {
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
          auto it = cells_.find(key(Eigen::Vector3i(c.x() + dx, c.y() + dy, c.z() + dz)));
          if (it == cells_.end()) continue;
          for (int f : it->second) test(p, f, best, best_tri);
        }
  }
};

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

inline void save_obj(const TriMesh& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("save_obj: cannot open " + path);
  out << std::setprecision(17);  // decimal round-trips reproduce the doubles exactly
  out << "# strata mesh\n";
  for (const auto& v : m.verts) out << "v " << v.x() << " " << v.y() << " " << v.z() << "\n";
  if (!m.normals.empty())
    for (const auto& n : m.normals) out << "vn " << n.x() << " " << n.y() << " " << n.z() << "\n";
  for (const auto& f : m.faces) out << "f " << f[0] + 1 << " " << f[1] + 1 << " " << f[2] + 1 << "\n";
  if (!out) throw DataError("save_obj: write failed for " + path);
}

//! Reads meshes written by save_obj (and plain v/vn/f OBJ files generally;
//! face corners may carry /texture/normal suffixes, which are ignored).
inline TriMesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_obj: cannot open " + path);
  TriMesh m;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      double x, y, z;
      if (!(ss >> x >> y >> z))
        throw DataError("load_obj: bad vertex at " + path + ":" + std::to_string(lineno));
      m.verts.emplace_back(x, y, z);
    } else if (tag == "vn") {
      double x, y, z;
      if (!(ss >> x >> y >> z))
        throw DataError("load_obj: bad normal at " + path + ":" + std::to_string(lineno));
      m.normals.emplace_back(x, y, z);
    } else if (tag == "f") {
      std::array<int, 3> f{};
      for (int k = 0; k < 3; ++k) {
        std::string tok;
        if (!(ss >> tok))
          throw DataError("load_obj: face needs three corners at " + path + ":" +
                          std::to_string(lineno));
        try {
          f[static_cast<size_t>(k)] = std::stoi(tok.substr(0, tok.find('/'))) - 1;
        } catch (...) {
          throw DataError("load_obj: bad face index at " + path + ":" + std::to_string(lineno));
        }
      }
      m.faces.push_back(f);
    }
  }
  if (m.normals.size() != m.verts.size()) m.normals.clear();
  validate_mesh(m);
  return m;
}

inline void save_ply(const TriMesh& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("save_ply: cannot open " + path);
  out << "ply\nformat ascii 1.0\n";
  out << "element vertex " << m.verts.size() << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  out << "element face " << m.faces.size() << "\n";
  out << "property list uchar int vertex_indices\nend_header\n";
  for (const auto& v : m.verts) out << v.x() << " " << v.y() << " " << v.z() << "\n";
  for (const auto& f : m.faces) out << "3 " << f[0] << " " << f[1] << " " << f[2] << "\n";
  if (!out) throw DataError("save_ply: write failed for " + path);
}

}  // namespace strata
