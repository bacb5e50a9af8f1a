#pragma once
// Training objectives: photometric and mask data terms, the unit-gradient
// regulariser on the signed-distance field, the depth-ordering penalty on
// pixels where the predicted masks and the rendered meshes disagree about who
// is in front, and the mesh interpenetration penalty. Each loss comes in a
// plain value form (for oracles and monitoring) and a tape form (for
// gradients); the tape forms operate on frozen sample/assignment choices so a
// step differentiates exactly the function it evaluated. Also hosts the
// frame-confidence split that gates which frames may update shared state.

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "strata/body.hpp"
#include "strata/camera.hpp"
#include "strata/field.hpp"
#include "strata/mesh.hpp"
#include "strata/pose_tape.hpp"
#include "strata/raster.hpp"
#include "strata/rng.hpp"
#include "strata/segment.hpp"
#include "strata/skinning.hpp"
#include "strata/tape.hpp"

namespace strata {

// ---------------------------------------------------------------------------
// Loss weights
// ---------------------------------------------------------------------------

struct LossWeights {
  double rgb = 1.0;
  double mask = 0.5;
  double eikonal = 0.1;
  double depth_order = 0.01;
  double interpenetration = 0.01;
};

inline void validate_weights(const LossWeights& w) {
  for (double v : {w.rgb, w.mask, w.eikonal, w.depth_order, w.interpenetration})
    if (!std::isfinite(v) || v < 0.0) throw ConfigError("loss weights must be finite and >= 0");
}

// ---------------------------------------------------------------------------
// Photometric and mask data terms
// ---------------------------------------------------------------------------

//! Mean absolute colour error: mean over rays of the mean over channels.
inline double loss_rgb_value(const MatX& pred, const MatX& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols())
    throw DataError("loss_rgb_value: shape mismatch");
  if (pred.size() == 0) return 0.0;
  return (pred - gt).cwiseAbs().mean();
}

inline Var loss_rgb_tape(Tape& t, Var pred, const MatX& gt) {
  if (t.value(pred).rows() != gt.rows() || t.value(pred).cols() != gt.cols())
    throw DataError("loss_rgb_tape: shape mismatch");
  return t.mean_all(t.abs(pred - t.constant(gt)));
}

//! Mask data term: mean over rays of the summed per-person absolute error
//! between predicted per-person opacity and the target instance masks.
inline double loss_mask_value(const MatX& opacity, const MatX& target) {
  if (opacity.rows() != target.rows() || opacity.cols() != target.cols())
    throw DataError("loss_mask_value: shape mismatch");
  if (opacity.rows() == 0) return 0.0;
  return (opacity - target).cwiseAbs().rowwise().sum().mean();
}

inline Var loss_mask_tape(Tape& t, Var opacity, const MatX& target) {
  if (t.value(opacity).rows() != target.rows() || t.value(opacity).cols() != target.cols())
    throw DataError("loss_mask_tape: shape mismatch");
  return t.mean_all(t.row_sum(t.abs(opacity - t.constant(target))));
}

// ---------------------------------------------------------------------------
// Unit-gradient (signed-distance) regulariser
// ---------------------------------------------------------------------------

//! Mean squared deviation of the spatial gradient norm from one, given the
//! N x 3 gradient node of a field evaluation.
inline Var eikonal_from_grad(Tape& t, Var grad) {
  if (t.value(grad).cols() != 3) throw DataError("eikonal_from_grad: gradient must be N x 3");
  Var norm = ad::sqrt_safe(t.row_sum(t.square(grad)));
  return t.mean_all(t.square(norm - 1.0));
}

//! Canonical-space probe points for the regulariser: a uniform draw inside
//! the field's bounding sphere mixed with Gaussian perturbations of template
//! surface points, so the constraint is enforced both broadly and near the
//! surface where rendering reads the field.
inline MatX eikonal_sample_points(const ParamBody& body, double radius, int n_uniform,
                                  int n_surface, double sigma, KeyedRng& rng) {
  if (n_uniform < 0 || n_surface < 0) throw ConfigError("eikonal_sample_points: negative count");
  MatX pts(n_uniform + n_surface, 3);
  for (int i = 0; i < n_uniform; ++i) {
    Vec3 dir(rng.normal(), rng.normal(), rng.normal());
    double len = dir.norm();
    if (len < 1e-12) dir = Vec3(1, 0, 0); else dir /= len;
    double r = radius * std::cbrt(rng.uniform());
    pts.row(i) = (r * dir).transpose();
  }
  const int nv = static_cast<int>(body.verts.size());
  if (n_surface > 0 && nv == 0) throw DataError("eikonal_sample_points: body has no template points");
  for (int i = 0; i < n_surface; ++i) {
    const Vec3& v = body.verts[rng.below(static_cast<uint64_t>(nv))];
    Vec3 noise(rng.normal(), rng.normal(), rng.normal());
    pts.row(n_uniform + i) = (v + sigma * noise).transpose();
  }
  return pts;
}

// ---------------------------------------------------------------------------
// Depth-ordering penalty
// ---------------------------------------------------------------------------

//! One contested pixel: the instance mask assigns it to person `p`, yet person
//! `q`'s rendered mesh also covers it. The penalty pushes p's surface in
//! front of q's there. Triangle ids and barycentrics are frozen from the
//! rasterisation, so the depths stay differentiable in the poses alone.
struct DisputedPixel {
  int frame = -1;
  int x = 0, y = 0;
  int p = 0, q = 0;
  std::array<int, 3> tri_p{}, tri_q{};
  Vec3 bar_p = Vec3::Zero(), bar_q = Vec3::Zero();
};

//! Scans a frame's rasterisation against its instance masks and lists every
//! (pixel, p, q) with p != q where mask p claims the pixel and mesh q covers
//! it. Mesh p must also cover the pixel so its own depth is defined; mask
//! claims outside the claimant's silhouette carry no usable depth pair and
//! are skipped. If more than `max_items` qualify, a seeded partial shuffle
//! keeps a uniform subset (max_items == 0 keeps everything).
inline std::vector<DisputedPixel> find_disputed_pixels(const RasterOutput& raster,
                                                       const std::vector<const Mask*>& m_sam,
                                                       const std::vector<TriMesh>& meshes,
                                                       int frame, size_t max_items,
                                                       uint64_t seed) {
  const int P = static_cast<int>(meshes.size());
  if (static_cast<int>(m_sam.size()) != P || static_cast<int>(raster.covered.size()) != P)
    throw DataError("find_disputed_pixels: person count mismatch");
  std::vector<DisputedPixel> items;
  for (int y = 0; y < raster.height; ++y)
    for (int x = 0; x < raster.width; ++x)
      for (int p = 0; p < P; ++p) {
        if (!m_sam[static_cast<size_t>(p)] || !m_sam[static_cast<size_t>(p)]->at(x, y)) continue;
        if (!raster.covered[static_cast<size_t>(p)].at(x, y)) continue;
        for (int q = 0; q < P; ++q) {
          if (q == p || !raster.covered[static_cast<size_t>(q)].at(x, y)) continue;
          DisputedPixel d;
          d.frame = frame;
          d.x = x;
          d.y = y;
          d.p = p;
          d.q = q;
          const PixelAssignment& ap = raster.at(p, x, y);
          const PixelAssignment& aq = raster.at(q, x, y);
          if (ap.tri < 0 || aq.tri < 0) continue;
          d.tri_p = meshes[static_cast<size_t>(p)].faces[static_cast<size_t>(ap.tri)];
          d.tri_q = meshes[static_cast<size_t>(q)].faces[static_cast<size_t>(aq.tri)];
          d.bar_p = Vec3(ap.b0, ap.b1, ap.b2);
          d.bar_q = Vec3(aq.b0, aq.b1, aq.b2);
          items.push_back(d);
        }
      }
  if (max_items > 0 && items.size() > max_items) {
    KeyedRng rng(seed, {0xD15BULL, static_cast<uint64_t>(frame)});
    for (size_t i = 0; i < max_items; ++i) {
      size_t j = i + rng.below(static_cast<uint64_t>(items.size() - i));
      std::swap(items[i], items[j]);
    }
    items.resize(max_items);
  }
  return items;
}

namespace detail {

inline double bary_depth(const Camera& cam, const TriMesh& mesh, const std::array<int, 3>& tri,
                         const Vec3& bar) {
  double d = 0.0;
  for (int k = 0; k < 3; ++k)
    d += bar[k] * cam.rot.col(2).dot(mesh.verts[static_cast<size_t>(tri[static_cast<size_t>(k)])] - cam.pos);
  return d;
}

}  // namespace detail

//! Plain value of the ordering penalty: sum over contested pixels of
//! log(1 + exp(D_p - D_q)), which decays to zero once the claimant is
//! clearly in front and grows linearly the deeper it sinks behind.
inline double loss_depth_order_value(const Camera& cam, const std::vector<TriMesh>& meshes,
                                     const std::vector<DisputedPixel>& items) {
  double total = 0.0;
  for (const DisputedPixel& d : items) {
    double dp = detail::bary_depth(cam, meshes[static_cast<size_t>(d.p)], d.tri_p, d.bar_p);
    double dq = detail::bary_depth(cam, meshes[static_cast<size_t>(d.q)], d.tri_q, d.bar_q);
    total += softplus_stable(dp - dq, 1.0);
  }
  return total;
}

//! Tape form over per-person posed vertex nodes (n_verts x 3 each).
inline Var loss_depth_order_tape(Tape& t, const Camera& cam, const std::vector<Var>& posed_verts,
                                 const std::vector<DisputedPixel>& items) {
  Var axis = t.constant(MatX(cam.rot.col(2)));          // 3 x 1
  MatX pos_row = cam.pos.transpose();                   // 1 x 3
  Var loss = t.constant_scalar(0.0);
  auto side_depth = [&](int person, const std::array<int, 3>& tri, const Vec3& bar) {
    Var rows = t.gather_rows(posed_verts[static_cast<size_t>(person)],
                             {tri[0], tri[1], tri[2]});
    Var rel = rows - t.constant(MatX(pos_row.replicate(3, 1)));
    Var bar_row = t.constant(MatX(bar.transpose()));
    return t.matmul(bar_row, t.matmul(rel, axis));      // 1 x 1
  };
  for (const DisputedPixel& d : items) {
    Var diff = side_depth(d.p, d.tri_p, d.bar_p) - side_depth(d.q, d.tri_q, d.bar_q);
    loss = loss + t.softplus(diff, 1.0);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Interpenetration penalty
// ---------------------------------------------------------------------------

//! A vertex of person p's posed mesh found inside person q's posed mesh,
//! paired with its nearest vertex on q. Correspondences are frozen when
//! found; the penalty then differentiates the distance through both poses.
struct InterPair {
  int p = 0, vp = 0;
  int q = 0, vq = 0;
};

//! Lists offending vertices by an exact inside test against each other
//! closed mesh, taking every `stride`-th vertex of the probing mesh. Open or
//! empty meshes contribute nothing as probes in either role.
inline std::vector<InterPair> find_interpenetration_pairs(const std::vector<TriMesh>& meshes,
                                                          int stride = 1) {
  if (stride < 1) throw ConfigError("find_interpenetration_pairs: stride must be >= 1");
  const int P = static_cast<int>(meshes.size());
  std::vector<InterPair> out;
  std::vector<MeshRayAccel> accel(static_cast<size_t>(P));
  std::vector<PointGrid> grids(static_cast<size_t>(P));
  for (int q = 0; q < P; ++q) {
    if (meshes[static_cast<size_t>(q)].empty()) continue;
    accel[static_cast<size_t>(q)].build(meshes[static_cast<size_t>(q)]);
    grids[static_cast<size_t>(q)].build(meshes[static_cast<size_t>(q)].verts, 0.1);
  }
  for (int p = 0; p < P; ++p)
    for (int q = 0; q < P; ++q) {
      if (p == q) continue;
      const TriMesh& probe = meshes[static_cast<size_t>(p)];
      const TriMesh& host = meshes[static_cast<size_t>(q)];
      if (probe.empty() || host.empty() || !is_closed_two_manifold(host)) continue;
      for (int vi = 0; vi < static_cast<int>(probe.verts.size()); vi += stride) {
        const Vec3& x = probe.verts[static_cast<size_t>(vi)];
        if (!point_inside_by_parity(x, host, &accel[static_cast<size_t>(q)])) continue;
        InterPair pair;
        pair.p = p;
        pair.vp = vi;
        pair.q = q;
        pair.vq = grids[static_cast<size_t>(q)].nearest(x);
        out.push_back(pair);
      }
    }
  return out;
}

//! Plain value: sum of Euclidean distances between each offending vertex and
//! its frozen nearest counterpart.
inline double loss_interpenetration_value(const std::vector<TriMesh>& meshes,
                                          const std::vector<InterPair>& pairs) {
  double total = 0.0;
  for (const InterPair& pr : pairs)
    total += (meshes[static_cast<size_t>(pr.p)].verts[static_cast<size_t>(pr.vp)] -
              meshes[static_cast<size_t>(pr.q)].verts[static_cast<size_t>(pr.vq)])
                 .norm();
  return total;
}

inline Var loss_interpenetration_tape(Tape& t, const std::vector<Var>& posed_verts,
                                      const std::vector<InterPair>& pairs) {
  Var loss = t.constant_scalar(0.0);
  for (const InterPair& pr : pairs) {
    Var vp = t.gather_rows(posed_verts[static_cast<size_t>(pr.p)], {pr.vp});
    Var vq = t.gather_rows(posed_verts[static_cast<size_t>(pr.q)], {pr.vq});
    loss = loss + ad::sqrt_safe(t.row_sum(t.square(vp - vq)));
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Frame confidence split
// ---------------------------------------------------------------------------

//! Per-frame agreement between the posed-template silhouettes and the
//! instance masks, thresholded at the median so at least half the frames
//! always qualify as reliable.
struct ConfidenceSplit {
  std::vector<double> scores;  // per frame: mean over persons of mask IoU
  double alpha = 0.0;          // median score (midpoint of the middle two when even)
  std::vector<char> reliable;  // scores[f] >= alpha
  size_t reliable_count() const {
    return static_cast<size_t>(std::count(reliable.begin(), reliable.end(), char(1)));
  }
};

inline ConfidenceSplit compute_confidence_split(const MaskStore& store) {
  if (store.frames == 0 || store.persons == 0)
    throw DataError("compute_confidence_split: empty mask store");
  ConfidenceSplit out;
  out.scores.resize(static_cast<size_t>(store.frames));
  for (int f = 0; f < store.frames; ++f) {
    double acc = 0.0;
    for (int p = 0; p < store.persons; ++p) {
      const MaskEntry& e = store.at(f, p);
      acc += mask_iou(e.m_mesh, e.m_sam);
    }
    out.scores[static_cast<size_t>(f)] = acc / store.persons;
  }
  std::vector<double> sorted = out.scores;
  std::sort(sorted.begin(), sorted.end());
  const size_t n = sorted.size();
  out.alpha = (n % 2 == 1) ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  out.reliable.resize(n);
  for (size_t f = 0; f < n; ++f) out.reliable[f] = out.scores[f] >= out.alpha ? 1 : 0;
  return out;
}

}  // namespace strata
