#pragma once

// Reconstruction, pose, mask and image evaluation metrics: volumetric IoU by
// column-parity voxelisation, Chamfer / point-to-surface distances with exact
// point-to-triangle queries, normal consistency, joint and vertex errors,
// inter-person depth-relation accuracy, contact distance, and PSNR/SSIM.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "strata/body.hpp"
#include "strata/camera.hpp"
#include "strata/common.hpp"
#include "strata/image.hpp"
#include "strata/mesh.hpp"
#include "strata/rng.hpp"
#include "strata/skinning.hpp"

namespace strata {

// ---------------------------------------------------------------------------
// Nearest-triangle index configuration
// ---------------------------------------------------------------------------

namespace detail {

//! Grid cell size for nearest-triangle queries: the mean triangle bounding
//! box diagonal, floored so the mesh spans at most ~64 cells per axis.
inline double suggested_grid_cell(const TriMesh& mesh) {
  Vec3 lo = Vec3::Constant(kInf), hi = Vec3::Constant(-kInf);
  double tri_diag = 0.0;
  for (const auto& f : mesh.faces) {
    Vec3 tlo = Vec3::Constant(kInf), thi = Vec3::Constant(-kInf);
    for (int k = 0; k < 3; ++k) {
      const Vec3& v = mesh.verts[static_cast<size_t>(f[static_cast<size_t>(k)])];
      tlo = tlo.cwiseMin(v);
      thi = thi.cwiseMax(v);
    }
    lo = lo.cwiseMin(tlo);
    hi = hi.cwiseMax(thi);
    tri_diag += (thi - tlo).norm();
  }
  tri_diag /= static_cast<double>(mesh.faces.size());
  return std::max({tri_diag, (hi - lo).norm() / 64.0, 1e-9});
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Surface sampling
// ---------------------------------------------------------------------------

struct SurfaceSamples {
  MatX points;            // n x 3
  std::vector<int> tri;   // source triangle per sample
};

//! Area-weighted uniform surface samples (deterministic in the rng).
inline SurfaceSamples sample_surface(const TriMesh& mesh, int n, KeyedRng& rng) {
  if (n <= 0) throw ConfigError("sample_surface: sample count must be positive");
  if (mesh.faces.empty()) throw DataError("sample_surface: mesh has no faces");
  std::vector<double> cum(mesh.faces.size());
  double total = 0.0;
  for (size_t i = 0; i < mesh.faces.size(); ++i) {
    const auto& f = mesh.faces[i];
    const Vec3 &a = mesh.verts[static_cast<size_t>(f[0])], &b = mesh.verts[static_cast<size_t>(f[1])],
               &c = mesh.verts[static_cast<size_t>(f[2])];
    total += 0.5 * (b - a).cross(c - a).norm();
    cum[i] = total;
  }
  if (!(total > 0.0)) throw DataError("sample_surface: mesh has zero surface area");
  SurfaceSamples out;
  out.points.resize(n, 3);
  out.tri.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform() * total;
    size_t fi = static_cast<size_t>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin());
    if (fi >= cum.size()) fi = cum.size() - 1;
    const auto& f = mesh.faces[fi];
    double r1 = std::sqrt(rng.uniform()), r2 = rng.uniform();
    Vec3 p = (1.0 - r1) * mesh.verts[static_cast<size_t>(f[0])] +
             r1 * (1.0 - r2) * mesh.verts[static_cast<size_t>(f[1])] +
             r1 * r2 * mesh.verts[static_cast<size_t>(f[2])];
    out.points.row(i) = p.transpose();
    out.tri[static_cast<size_t>(i)] = static_cast<int>(fi);
  }
  return out;
}

namespace detail {

//! Mean nearest-surface distance and normal cosine, directed src -> dst.
inline void directed_surface_stats(const TriMesh& src, const TriMesh& dst,
                                   const TriangleGrid& dst_grid, int samples, KeyedRng& rng,
                                   double& mean_dist, double& mean_cos) {
  SurfaceSamples s = sample_surface(src, samples, rng);
  auto unit_normal = [](const TriMesh& m, int fi) {
    Vec3 n = face_normal(m, fi);
    double len = n.norm();
    return len > 1e-30 ? Vec3(n / len) : Vec3::Zero();
  };
  double dist_acc = 0.0, cos_acc = 0.0;
  for (int i = 0; i < s.points.rows(); ++i) {
    int tri = -1;
    double d = dst_grid.distance(Vec3(s.points.row(i).transpose()), &tri);
    dist_acc += d;
    cos_acc += unit_normal(src, s.tri[static_cast<size_t>(i)]).dot(unit_normal(dst, tri));
  }
  mean_dist = dist_acc / static_cast<double>(s.points.rows());
  mean_cos = cos_acc / static_cast<double>(s.points.rows());
}

//! Column-parity voxel occupancy of a closed mesh on a fixed grid: one
//! axis-aligned line per (x, y) voxel column, crossings sorted, voxel centres
//! between odd/even crossings marked inside. Degenerate edge hits are
//! defeated by a deterministic sub-cell jitter with retries.
inline std::vector<uint8_t> voxelize_parity(const TriMesh& mesh, const Vec3& lo, const Vec3& cell,
                                            int res) {
  std::vector<uint8_t> occ(static_cast<size_t>(res) * res * res, 0);
  // Per-column triangle prefilter.
  std::vector<std::vector<int>> columns(static_cast<size_t>(res) * res);
  for (size_t fi = 0; fi < mesh.faces.size(); ++fi) {
    const auto& f = mesh.faces[fi];
    double x0 = kInf, x1 = -kInf, y0 = kInf, y1 = -kInf;
    for (int k = 0; k < 3; ++k) {
      const Vec3& v = mesh.verts[static_cast<size_t>(f[static_cast<size_t>(k)])];
      x0 = std::min(x0, v.x());
      x1 = std::max(x1, v.x());
      y0 = std::min(y0, v.y());
      y1 = std::max(y1, v.y());
    }
    int ix0 = std::max(0, static_cast<int>(std::floor((x0 - lo.x()) / cell.x() - 0.5)));
    int ix1 = std::min(res - 1, static_cast<int>(std::ceil((x1 - lo.x()) / cell.x())));
    int iy0 = std::max(0, static_cast<int>(std::floor((y0 - lo.y()) / cell.y() - 0.5)));
    int iy1 = std::min(res - 1, static_cast<int>(std::ceil((y1 - lo.y()) / cell.y())));
    for (int iy = iy0; iy <= iy1; ++iy)
      for (int ix = ix0; ix <= ix1; ++ix)
        columns[static_cast<size_t>(iy) * res + ix].push_back(static_cast<int>(fi));
  }
  for (int iy = 0; iy < res; ++iy)
    for (int ix = 0; ix < res; ++ix) {
      const auto& tris = columns[static_cast<size_t>(iy) * res + ix];
      if (tris.empty()) continue;
      std::vector<double> zs;
      bool ok = false;
      for (int attempt = 0; attempt < 8 && !ok; ++attempt) {
        double jx = (0.12345 + 0.31 * attempt) * 1e-3 * cell.x();
        double jy = (0.54321 + 0.23 * attempt) * 1e-3 * cell.y();
        double px = lo.x() + (ix + 0.5) * cell.x() + jx;
        double py = lo.y() + (iy + 0.5) * cell.y() + jy;
        zs.clear();
        bool degenerate = false;
        for (int fi : tris) {
          const auto& f = mesh.faces[static_cast<size_t>(fi)];
          const Vec3 &a = mesh.verts[static_cast<size_t>(f[0])],
                     &b = mesh.verts[static_cast<size_t>(f[1])],
                     &c = mesh.verts[static_cast<size_t>(f[2])];
          double d00 = b.x() - a.x(), d01 = c.x() - a.x();
          double d10 = b.y() - a.y(), d11 = c.y() - a.y();
          double det = d00 * d11 - d01 * d10;
          if (std::abs(det) < 1e-18) continue;  // edge-on in projection
          double rx = px - a.x(), ry = py - a.y();
          double u = (rx * d11 - ry * d01) / det;
          double v = (-rx * d10 + ry * d00) / det;
          double w = 1.0 - u - v;
          double eps = 1e-10;
          if (u < -eps || v < -eps || w < -eps) continue;
          if (u < eps || v < eps || w < eps) {
            degenerate = true;  // grazing an edge: retry with a new jitter
            break;
          }
          zs.push_back(w * a.z() + u * b.z() + v * c.z());
        }
        if (!degenerate && zs.size() % 2 == 0) ok = true;
      }
      if (!ok)
        throw NumericalError("voxelize_parity: degenerate column after retries");
      std::sort(zs.begin(), zs.end());
      for (size_t k = 0; k + 1 < zs.size(); k += 2) {
        int iz0 = std::max(0, static_cast<int>(std::ceil((zs[k] - lo.z()) / cell.z() - 0.5)));
        int iz1 = std::min(res - 1,
                           static_cast<int>(std::floor((zs[k + 1] - lo.z()) / cell.z() - 0.5)));
        for (int iz = iz0; iz <= iz1; ++iz)
          occ[(static_cast<size_t>(iz) * res + iy) * res + ix] = 1;
      }
    }
  return occ;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Geometry metrics
// ---------------------------------------------------------------------------

struct GeometryMetrics {
  double v_iou = 0.0;       // volumetric IoU (valid only when both meshes closed)
  double chamfer_cm = 0.0;  // sum of the two directed mean surface distances, cm
  double p2s_cm = 0.0;      // directed pred -> gt mean surface distance, cm
  double nc = 0.0;          // mean cosine of nearest-surface normals, both ways
  bool v_iou_valid = false;
};

//! Compares a predicted closed surface against ground truth. Chamfer is the
//! sum of the two directed means (each sampled point measured to the exact
//! nearest triangle of the other mesh); P2S is the pred->gt direction alone.
//! Volumetric IoU voxelises both meshes on a shared grid by column parity
//! and is reported only when both meshes are closed 2-manifolds.
inline GeometryMetrics geometry_metrics(const TriMesh& pred, const TriMesh& gt, int samples = 10000,
                                        uint64_t seed = 0, int viou_res = 128) {
  if (pred.faces.empty() || gt.faces.empty())
    throw DataError("geometry_metrics: empty mesh");
  if (viou_res < 2) throw ConfigError("geometry_metrics: voxel resolution too small");
  GeometryMetrics out;
  TriangleGrid pred_grid(pred, detail::suggested_grid_cell(pred));
  TriangleGrid gt_grid(gt, detail::suggested_grid_cell(gt));
  KeyedRng rng_a(seed, {0x5A3DULL, 1ULL});
  KeyedRng rng_b(seed, {0x5A3DULL, 2ULL});
  double d_pg = 0.0, c_pg = 0.0, d_gp = 0.0, c_gp = 0.0;
  detail::directed_surface_stats(pred, gt, gt_grid, samples, rng_a, d_pg, c_pg);
  detail::directed_surface_stats(gt, pred, pred_grid, samples, rng_b, d_gp, c_gp);
  out.chamfer_cm = 100.0 * (d_pg + d_gp);
  out.p2s_cm = 100.0 * d_pg;
  out.nc = 0.5 * (c_pg + c_gp);

  if (is_closed_two_manifold(pred) && is_closed_two_manifold(gt)) {
    Vec3 lo = Vec3::Constant(kInf), hi = Vec3::Constant(-kInf);
    for (const auto& v : pred.verts) {
      lo = lo.cwiseMin(v);
      hi = hi.cwiseMax(v);
    }
    for (const auto& v : gt.verts) {
      lo = lo.cwiseMin(v);
      hi = hi.cwiseMax(v);
    }
    Vec3 span = hi - lo;
    Vec3 cell = (span / static_cast<double>(viou_res)).cwiseMax(1e-9);
    lo -= 1.5 * cell;
    cell = ((hi + 1.5 * cell - lo) / static_cast<double>(viou_res)).cwiseMax(1e-9);
    auto occ_p = detail::voxelize_parity(pred, lo, cell, viou_res);
    auto occ_g = detail::voxelize_parity(gt, lo, cell, viou_res);
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < occ_p.size(); ++i) {
      inter += (occ_p[i] & occ_g[i]);
      uni += (occ_p[i] | occ_g[i]);
    }
    out.v_iou = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
    out.v_iou_valid = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pose metrics
// ---------------------------------------------------------------------------

struct PoseMetrics {
  double mpjpe_mm = 0.0;  // mean per-joint position error
  double mve_mm = 0.0;    // mean template-vertex position error
  double cd_mm = std::numeric_limits<double>::quiet_NaN();  // contact distance
  double pcdr = 1.0;      // fraction of correct inter-person depth relations
  bool cd_valid = false;
  int depth_pairs = 0;    // relations counted (diagnostics)
  int contact_pairs = 0;  // GT contact pairs found
};

namespace detail {

inline std::vector<Vec3> posed_joint_positions(const ParamBody& body, const PoseParams& pose) {
  JointTransforms T = fk(body, pose);
  std::vector<Vec3> out(static_cast<size_t>(body.joints));
  for (int j = 0; j < body.joints; ++j)
    out[static_cast<size_t>(j)] = T.R[static_cast<size_t>(j)] * body.rest[static_cast<size_t>(j)] +
                                  T.t[static_cast<size_t>(j)];
  return out;
}

}  // namespace detail

//! Joint, vertex, contact and depth-relation accuracy of predicted poses
//! against ground truth over all frames. Depth relations compare every
//! inter-person joint pair's camera-depth order; pairs whose ground-truth
//! depth gap is below `depth_thresh` (metres) count as always correct.
//! Contact distance averages the predicted distances of ground-truth vertex
//! pairs closer than `contact_thresh`; absent such pairs it is invalid.
inline PoseMetrics pose_metrics(const std::vector<ParamBody>& bodies,
                                const std::vector<std::vector<PoseParams>>& pred,
                                const std::vector<std::vector<PoseParams>>& gt, const Camera& cam,
                                double contact_thresh = 0.01, double depth_thresh = 0.15) {
  const size_t F = gt.size();
  const size_t P = bodies.size();
  if (pred.size() != F) throw DataError("pose_metrics: frame count mismatch");
  if (F == 0 || P == 0) throw DataError("pose_metrics: empty input");
  PoseMetrics out;
  double joint_acc = 0.0, vert_acc = 0.0, cd_acc = 0.0;
  int64_t joint_n = 0, vert_n = 0;
  int64_t depth_total = 0, depth_correct = 0;
  int cd_n = 0;
  for (size_t f = 0; f < F; ++f) {
    if (pred[f].size() != P || gt[f].size() != P)
      throw DataError("pose_metrics: person count mismatch");
    std::vector<std::vector<Vec3>> jp(P), jg(P);
    std::vector<std::vector<Vec3>> vp(P), vg(P);
    for (size_t p = 0; p < P; ++p) {
      jp[p] = detail::posed_joint_positions(bodies[p], pred[f][p]);
      jg[p] = detail::posed_joint_positions(bodies[p], gt[f][p]);
      vp[p] = lbs_forward(bodies[p], pred[f][p], bodies[p].verts, bodies[p].weights);
      vg[p] = lbs_forward(bodies[p], gt[f][p], bodies[p].verts, bodies[p].weights);
      for (size_t j = 0; j < jp[p].size(); ++j) {
        joint_acc += (jp[p][j] - jg[p][j]).norm();
        ++joint_n;
      }
      for (size_t v = 0; v < vp[p].size(); ++v) {
        vert_acc += (vp[p][v] - vg[p][v]).norm();
        ++vert_n;
      }
    }
    auto depth = [&](const Vec3& x) { return cam.rot.col(2).dot(x - cam.pos); };
    for (size_t p = 0; p < P; ++p)
      for (size_t q = p + 1; q < P; ++q) {
        for (size_t ja = 0; ja < jg[p].size(); ++ja)
          for (size_t jb = 0; jb < jg[q].size(); ++jb) {
            double dz_gt = depth(jg[p][ja]) - depth(jg[q][jb]);
            ++depth_total;
            if (std::abs(dz_gt) < depth_thresh) {
              ++depth_correct;
              continue;
            }
            double dz_pred = depth(jp[p][ja]) - depth(jp[q][jb]);
            if ((dz_gt > 0.0) == (dz_pred > 0.0)) ++depth_correct;
          }
        // Ground-truth contact pairs, evaluated at predicted geometry.
        for (size_t va = 0; va < vg[p].size(); ++va)
          for (size_t vb = 0; vb < vg[q].size(); ++vb)
            if ((vg[p][va] - vg[q][vb]).norm() < contact_thresh) {
              cd_acc += (vp[p][va] - vp[q][vb]).norm();
              ++cd_n;
            }
      }
  }
  out.mpjpe_mm = 1000.0 * joint_acc / static_cast<double>(joint_n);
  out.mve_mm = 1000.0 * vert_acc / static_cast<double>(vert_n);
  out.depth_pairs = static_cast<int>(depth_total);
  out.pcdr = depth_total > 0 ? static_cast<double>(depth_correct) / static_cast<double>(depth_total)
                             : 1.0;
  out.contact_pairs = cd_n;
  if (cd_n > 0) {
    out.cd_mm = 1000.0 * cd_acc / static_cast<double>(cd_n);
    out.cd_valid = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mask metrics
// ---------------------------------------------------------------------------

struct MaskMetrics {
  double iou = 0.0, recall = 0.0, f1 = 0.0;
};

inline MaskMetrics mask_metrics(const Mask& pred, const Mask& gt) {
  if (pred.w != gt.w || pred.h != gt.h) throw DataError("mask_metrics: resolution mismatch");
  int64_t inter = 0, pred_n = 0, gt_n = 0;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    bool a = pred.v[i] != 0, b = gt.v[i] != 0;
    inter += (a && b);
    pred_n += a;
    gt_n += b;
  }
  MaskMetrics m;
  if (gt_n == 0) {
    m.iou = m.recall = m.f1 = (pred_n == 0) ? 1.0 : 0.0;
    return m;
  }
  int64_t uni = pred_n + gt_n - inter;
  m.iou = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
  m.recall = static_cast<double>(inter) / static_cast<double>(gt_n);
  double precision = pred_n > 0 ? static_cast<double>(inter) / static_cast<double>(pred_n) : 0.0;
  m.f1 = (precision + m.recall) > 0.0 ? 2.0 * precision * m.recall / (precision + m.recall) : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Image metrics
// ---------------------------------------------------------------------------

struct ImageMetrics {
  double psnr = 0.0;  // +inf for identical images
  double ssim = 0.0;
};

//! PSNR over full-image MSE (unit dynamic range) and mean SSIM with an
//! 11 x 11 Gaussian window (sigma 1.5), standard constants, channels
//! averaged, windows fully inside the image.
inline ImageMetrics image_metrics(const Image& pred, const Image& gt) {
  if (pred.w != gt.w || pred.h != gt.h || pred.c != gt.c)
    throw DataError("image_metrics: resolution mismatch");
  constexpr int kWin = 11;
  if (pred.w < kWin || pred.h < kWin)
    throw ConfigError("image_metrics: image smaller than the SSIM window");
  ImageMetrics out;
  double mse = 0.0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    double d = pred.data[i] - gt.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(pred.data.size());
  out.psnr = mse > 0.0 ? 10.0 * std::log10(1.0 / mse) : kInf;

  double kernel[kWin][kWin];
  {
    const double sigma = 1.5;
    double sum = 0.0;
    for (int j = 0; j < kWin; ++j)
      for (int i = 0; i < kWin; ++i) {
        double dx = i - (kWin - 1) / 2.0, dy = j - (kWin - 1) / 2.0;
        kernel[j][i] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        sum += kernel[j][i];
      }
    for (auto& row : kernel)
      for (double& k : row) k /= sum;
  }
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double ssim_acc = 0.0;
  int64_t windows = 0;
  for (int ch = 0; ch < pred.c; ++ch)
    for (int y = 0; y + kWin <= pred.h; ++y)
      for (int x = 0; x + kWin <= pred.w; ++x) {
        double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
        for (int j = 0; j < kWin; ++j)
          for (int i = 0; i < kWin; ++i) {
            double kw = kernel[j][i];
            double a = pred.at(x + i, y + j, ch);
            double b = gt.at(x + i, y + j, ch);
            mx += kw * a;
            my += kw * b;
            mxx += kw * a * a;
            myy += kw * b * b;
            mxy += kw * a * b;
          }
        double vx = mxx - mx * mx, vy = myy - my * my, cxy = mxy - mx * my;
        ssim_acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) /
                    ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++windows;
      }
  out.ssim = ssim_acc / static_cast<double>(windows);
  return out;
}

}  // namespace strata
