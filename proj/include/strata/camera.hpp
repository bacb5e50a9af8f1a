#pragma once

#include <cmath>

#include "strata/common.hpp"

namespace strata {

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 dir = Vec3::UnitZ();  // unit length
};

//! Pinhole camera; `rot`/`pos` map camera coordinates into the world
//! (x_world = rot * x_cam + pos), with the optical axis along +z in camera space.
struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
  Mat3 rot = Mat3::Identity();
  Vec3 pos = Vec3::Zero();
};

inline Camera make_camera(double fx, double fy, double cx, double cy, int width, int height,
                          const Mat3& rot = Mat3::Identity(), const Vec3& pos = Vec3::Zero()) {
  if (!(fx > 0.0) || !(fy > 0.0)) throw ConfigError("make_camera: focal lengths must be positive");
  if (width <= 0 || height <= 0) throw ConfigError("make_camera: image size must be positive");
  if (((rot * rot.transpose()) - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6)
    throw ConfigError("make_camera: rotation is not orthonormal");
  Camera c;
  c.fx = fx;
  c.fy = fy;
  c.cx = cx;
  c.cy = cy;
  c.width = width;
  c.height = height;
  c.rot = rot;
  c.pos = pos;
  return c;
}

//! Projects a world point to continuous pixel coordinates. Throws when the point
//! is at or behind the camera plane.
inline Vec2 project_point(const Camera& cam, const Vec3& x_world) {
  Vec3 x_cam = cam.rot.transpose() * (x_world - cam.pos);
  if (!(x_cam.z() > 0.0)) throw NumericalError("project_point: point behind camera");
  return Vec2(cam.fx * x_cam.x() / x_cam.z() + cam.cx, cam.fy * x_cam.y() / x_cam.z() + cam.cy);
}

//! Depth of a world point along the optical axis (camera-space z).
inline double camera_depth(const Camera& cam, const Vec3& x_world) {
  return (cam.rot.transpose() * (x_world - cam.pos)).z();
}

//! Ray through one continuous pixel coordinate; direction is unit length.
inline Ray make_ray(const Camera& cam, double u, double v) {
  if (u < 0.0 || v < 0.0 || u > cam.width - 1.0 || v > cam.height - 1.0)
    throw ConfigError("make_ray: pixel outside image bounds");
  Vec3 d_cam((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
  Ray r;
  r.origin = cam.pos;
  r.dir = (cam.rot * d_cam).normalized();
  return r;
}

inline std::vector<Ray> make_rays(const Camera& cam, const std::vector<Vec2>& pixels) {
  std::vector<Ray> out;
  out.reserve(pixels.size());
  for (const auto& px : pixels) out.push_back(make_ray(cam, px.x(), px.y()));
  return out;
}

}  // namespace strata
