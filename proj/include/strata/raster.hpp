#pragma once
// Instance rasterization: projects each person's triangle mesh through a
// pinhole camera, z-buffers per person, and labels every pixel with the
// nearest person. Depth at a pixel is the screen-space barycentric
// interpolation of the camera-space vertex depths of the assigned triangle;
// that (triangle, barycentric) assignment is recorded per pixel so losses can
// differentiate depth with the assignment held fixed (no soft silhouettes:
// gradients flow through depth only, never through coverage boundaries).

#include <cmath>
#include <vector>

#include "strata/camera.hpp"
#include "strata/common.hpp"
#include "strata/image.hpp"
#include "strata/mesh.hpp"

namespace strata {

struct PixelAssignment {
  int tri = -1;  // -1: pixel not covered by this person
  double b0 = 0.0, b1 = 0.0, b2 = 0.0;  // screen-space barycentrics
};

struct RasterOutput {
  int width = 0, height = 0;
  Eigen::MatrixXi label;                          // H x W; 0 = none, else person index + 1
  std::vector<Mask> mask;                         // per person: visible (nearest) pixels
  std::vector<Mask> covered;                      // per person: coverage ignoring occlusion
  std::vector<MatX> depth;                        // per person: own nearest depth, +inf outside coverage
  std::vector<std::vector<PixelAssignment>> assign;  // per person, row-major H x W

  const PixelAssignment& at(int person, int x, int y) const {
    return assign[static_cast<size_t>(person)][static_cast<size_t>(y) * width + static_cast<size_t>(x)];
  }
};

//! Rasterizes every mesh; meshes are in world space. Triangles with any
//! vertex behind the camera and zero-area screen triangles are skipped.
inline RasterOutput rasterize_instances(const std::vector<TriMesh>& meshes, const Camera& cam) {
  RasterOutput out;
  out.width = cam.width;
  out.height = cam.height;
  const int P = static_cast<int>(meshes.size());
  out.label = Eigen::MatrixXi::Zero(cam.height, cam.width);
  out.mask.assign(static_cast<size_t>(P), Mask(cam.width, cam.height));
  out.covered.assign(static_cast<size_t>(P), Mask(cam.width, cam.height));
  out.depth.assign(static_cast<size_t>(P), MatX::Constant(cam.height, cam.width, kInf));
  out.assign.assign(static_cast<size_t>(P),
                    std::vector<PixelAssignment>(static_cast<size_t>(cam.width) * cam.height));

  for (int p = 0; p < P; ++p) {
    const TriMesh& mesh = meshes[static_cast<size_t>(p)];
    validate_mesh(mesh);
    // Pre-transform vertices to camera space.
    std::vector<Vec3> cam_pts(mesh.verts.size());
    std::vector<Vec2> px(mesh.verts.size());
    std::vector<bool> front(mesh.verts.size());
    for (size_t i = 0; i < mesh.verts.size(); ++i) {
      Vec3 xc = cam.rot.transpose() * (mesh.verts[i] - cam.pos);
      cam_pts[i] = xc;
      front[i] = xc.z() > 1e-6;
      if (front[i])
        px[i] = Vec2(cam.fx * xc.x() / xc.z() + cam.cx, cam.fy * xc.y() / xc.z() + cam.cy);
    }
    for (int f = 0; f < static_cast<int>(mesh.faces.size()); ++f) {
      const auto& face = mesh.faces[static_cast<size_t>(f)];
      size_t i0 = static_cast<size_t>(face[0]), i1 = static_cast<size_t>(face[1]),
             i2 = static_cast<size_t>(face[2]);
      if (!front[i0] || !front[i1] || !front[i2]) continue;
      const Vec2 &a = px[i0], &b = px[i1], &c = px[i2];
      double area = (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
      if (std::abs(area) < 1e-12) continue;  // degenerate in screen space
      int x0 = std::max(0, static_cast<int>(std::ceil(std::min({a.x(), b.x(), c.x()}))));
      int x1 = std::min(cam.width - 1, static_cast<int>(std::floor(std::max({a.x(), b.x(), c.x()}))));
      int y0 = std::max(0, static_cast<int>(std::ceil(std::min({a.y(), b.y(), c.y()}))));
      int y1 = std::min(cam.height - 1, static_cast<int>(std::floor(std::max({a.y(), b.y(), c.y()}))));
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          double w0 = ((b.x() - x) * (c.y() - y) - (b.y() - y) * (c.x() - x)) / area;
          double w1 = ((c.x() - x) * (a.y() - y) - (c.y() - y) * (a.x() - x)) / area;
          double w2 = 1.0 - w0 - w1;
          if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0) continue;
          double z = w0 * cam_pts[i0].z() + w1 * cam_pts[i1].z() + w2 * cam_pts[i2].z();
          MatX& depth = out.depth[static_cast<size_t>(p)];
          if (z < depth(y, x)) {
            depth(y, x) = z;
            out.covered[static_cast<size_t>(p)].at(x, y) = 1;
            PixelAssignment& pa = out.assign[static_cast<size_t>(p)][static_cast<size_t>(y) * cam.width + static_cast<size_t>(x)];
            pa.tri = f;
            pa.b0 = w0;
            pa.b1 = w1;
            pa.b2 = w2;
          }
        }
    }
  }
  // Label pass: nearest person wins; ties break toward the lower index.
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      double best = kInf;
      int who = 0;
      for (int p = 0; p < P; ++p) {
        double d = out.depth[static_cast<size_t>(p)](y, x);
        if (d < best) {
          best = d;
          who = p + 1;
        }
      }
      out.label(y, x) = who;
      if (who > 0) out.mask[static_cast<size_t>(who - 1)].at(x, y) = 1;
    }
  return out;
}

//! Depth of one recorded pixel assignment, recomputed from (possibly moved)
//! world vertices with the assignment frozen. This is the value whose
//! derivative with respect to vertices the losses use.
inline double assigned_depth(const Camera& cam, const TriMesh& mesh, const PixelAssignment& pa) {
  if (pa.tri < 0) return kInf;
  const auto& f = mesh.faces[static_cast<size_t>(pa.tri)];
  auto depth_of = [&](int vi) {
    return cam.rot.col(2).dot(mesh.verts[static_cast<size_t>(vi)] - cam.pos);
  };
  return pa.b0 * depth_of(f[0]) + pa.b1 * depth_of(f[1]) + pa.b2 * depth_of(f[2]);
}

}  // namespace strata
