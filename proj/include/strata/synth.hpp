#pragma once

// Synthetic multi-person scenes with exact ground truth. People are the
// built-in capsule skeleton animated by smooth joint curves; every frame
// carries ground-truth poses, per-person surface meshes, instance masks and
// depth maps rendered from exactly those meshes, and an analytically shaded
// RGB image of the same capsule geometry. A scene serialises to a documented
// directory layout and reloads bit-exactly (images are quantised to their
// 8-bit files).
//
// Directory layout written by save_scene:
//   scene.txt                 header: magic, preset, seed, sizes
//   camera.txt                one line per frame: fx fy cx cy w h pos rot
//   body_p<p>.txt             skeleton of person p
//   poses.txt                 one line per (frame, person): translation + axis-angles
//   frames/frame_%04d.png     RGB frame
//   masks/mask_%04d_p%d.png   visible instance mask of person p
//   depths/depth_%04d_p%d.pfm per-person depth, +inf outside coverage
//   meshes/mesh_%04d_p%d.obj  posed ground-truth surface of person p

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "strata/body.hpp"
#include "strata/camera.hpp"
#include "strata/common.hpp"
#include "strata/image.hpp"
#include "strata/mesh.hpp"
#include "strata/raster.hpp"
#include "strata/rng.hpp"

namespace strata {

struct SyntheticScene {
  std::string preset;
  std::uint64_t seed = 0;
  int persons = 0, frames = 0, width = 0, height = 0;
  std::vector<ParamBody> bodies;                  // one skeleton per person
  std::vector<Camera> cams;                       // camera per frame
  std::vector<std::vector<PoseParams>> gt_poses;  // [frame][person]
  std::vector<std::vector<TriMesh>> gt_meshes;    // [frame][person], world space
  std::vector<std::vector<Mask>> gt_masks;        // [frame][person], visible pixels
  std::vector<std::vector<MatX>> gt_depths;       // [frame][person], +inf off-person
  std::vector<Image> images;                      // [frame], RGB in [0,1]
};

// ---------------------------------------------------------------------------
// Capsule surfaces
// ---------------------------------------------------------------------------

namespace detail {

inline void append_mesh(TriMesh& dst, const TriMesh& src) {
  const int base = static_cast<int>(dst.verts.size());
  dst.verts.insert(dst.verts.end(), src.verts.begin(), src.verts.end());
  for (const auto& f : src.faces) dst.faces.push_back({f[0] + base, f[1] + base, f[2] + base});
}

}  // namespace detail

//! Closed, outward-oriented triangle mesh of the capsule with axis a..b and
//! radius r: a tube of stacked rings with spherical caps closed by pole fans.
inline TriMesh capsule_mesh(const Vec3& a, const Vec3& b, double r, int n_radial = 10,
                            double ring_spacing = 0.05, int n_cap = 3) {
  if (!(r > 0.0)) throw ConfigError("capsule_mesh: radius must be positive");
  if (n_radial < 3 || n_cap < 1) throw ConfigError("capsule_mesh: too few subdivisions");
  Vec3 axis = b - a;
  double len = axis.norm();
  Vec3 u, v, w;
  detail::capsule_frame(a, len > 1e-12 ? b : Vec3(a + Vec3(0, 0, 1)), u, v, w);

  // Ring stations from the bottom cap through the tube to the top cap; each
  // entry is (centre, radius). Equator rings double as tube end rings.
  std::vector<std::pair<Vec3, double>> rings;
  for (int k = 1; k <= n_cap; ++k) {
    double s = 0.5 * kPi * k / n_cap;
    rings.emplace_back(a - r * std::cos(s) * w, r * std::sin(s));
  }
  int n_tube = std::max(1, static_cast<int>(std::ceil(len / ring_spacing)));
  for (int j = 1; j <= n_tube; ++j)
    rings.emplace_back(a + (static_cast<double>(j) / n_tube) * axis, r);
  for (int k = 1; k < n_cap; ++k) {
    double s = 0.5 * kPi * k / n_cap;
    rings.emplace_back(b + r * std::sin(s) * w, r * std::cos(s));
  }

  TriMesh m;
  m.verts.push_back(a - r * w);  // bottom pole
  for (const auto& [c, rho] : rings)
    for (int i = 0; i < n_radial; ++i) {
      double ang = 2.0 * kPi * i / n_radial;
      m.verts.push_back(c + rho * (std::cos(ang) * u + std::sin(ang) * v));
    }
  m.verts.push_back(b + r * w);  // top pole

  auto ring_vert = [&](int ring, int i) { return 1 + ring * n_radial + (i % n_radial); };
  for (int i = 0; i < n_radial; ++i) m.faces.push_back({0, ring_vert(0, i + 1), ring_vert(0, i)});
  for (int ring = 0; ring + 1 < static_cast<int>(rings.size()); ++ring)
    for (int i = 0; i < n_radial; ++i) {
      int a0 = ring_vert(ring, i), a1 = ring_vert(ring, i + 1);
      int b0 = ring_vert(ring + 1, i), b1 = ring_vert(ring + 1, i + 1);
      m.faces.push_back({a0, a1, b1});
      m.faces.push_back({a0, b1, b0});
    }
  int top = static_cast<int>(m.verts.size()) - 1;
  int last = static_cast<int>(rings.size()) - 1;
  for (int i = 0; i < n_radial; ++i)
    m.faces.push_back({top, ring_vert(last, i), ring_vert(last, i + 1)});
  return m;
}

//! World-space posed joint positions of a body.
inline std::vector<Vec3> posed_joints(const ParamBody& body, const PoseParams& pose) {
  JointTransforms T = fk(body, pose);
  std::vector<Vec3> out(static_cast<size_t>(body.joints));
  for (int j = 0; j < body.joints; ++j)
    out[static_cast<size_t>(j)] = T.R[static_cast<size_t>(j)] * body.rest[static_cast<size_t>(j)] +
                                  T.t[static_cast<size_t>(j)];
  return out;
}

//! Ground-truth surface of a posed person: one closed capsule per bone,
//! rigidly carried by its joints (a capsule is symmetric about its axis, so
//! posing the endpoints poses the surface).
inline TriMesh posed_capsule_surface(const ParamBody& body, const PoseParams& pose,
                                     int n_radial = 10, double ring_spacing = 0.05) {
  std::vector<Vec3> jw = posed_joints(body, pose);
  TriMesh out;
  for (int j = 1; j < body.joints; ++j) {
    if (!(body.radius[static_cast<size_t>(j)] > 0.0)) continue;
    detail::append_mesh(out, capsule_mesh(jw[static_cast<size_t>(body.parents[static_cast<size_t>(j)])],
                                          jw[static_cast<size_t>(j)],
                                          body.radius[static_cast<size_t>(j)], n_radial,
                                          ring_spacing));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Analytic capsule rendering
// ---------------------------------------------------------------------------

namespace detail {

inline double ray_sphere_entry(const Vec3& o, const Vec3& d, const Vec3& c, double r) {
  Vec3 oc = o - c;
  double b = d.dot(oc);
  double disc = b * b - (oc.squaredNorm() - r * r);
  if (disc < 0.0) return kInf;
  double s = -b - std::sqrt(disc);
  return s >= 0.0 ? s : kInf;
}

//! First intersection of a ray (origin outside) with the capsule a..b radius r.
inline double ray_capsule_entry(const Vec3& o, const Vec3& d, const Vec3& a, const Vec3& b,
                                double r) {
  Vec3 ab = b - a;
  double len2 = ab.squaredNorm();
  double best = std::min(ray_sphere_entry(o, d, a, r), ray_sphere_entry(o, d, b, r));
  if (len2 < 1e-24) return best;
  Vec3 u = ab / std::sqrt(len2);
  Vec3 oa = o - a;
  Vec3 dp = d - d.dot(u) * u;
  Vec3 op = oa - oa.dot(u) * u;
  double A = dp.squaredNorm();
  if (A > 1e-18) {
    double B = 2.0 * dp.dot(op);
    double C = op.squaredNorm() - r * r;
    double disc = B * B - 4.0 * A * C;
    if (disc >= 0.0) {
      double s = (-B - std::sqrt(disc)) / (2.0 * A);
      if (s >= 0.0) {
        double axial = (oa + s * d).dot(u);
        if (axial >= 0.0 && axial <= std::sqrt(len2)) best = std::min(best, s);
      }
    }
  }
  return best;
}

//! Outward surface normal of the capsule at a surface point p.
inline Vec3 capsule_normal(const Vec3& p, const Vec3& a, const Vec3& b) {
  Vec3 ab = b - a;
  double len2 = ab.squaredNorm();
  Vec3 c = a;
  if (len2 > 1e-24) {
    double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
    c = a + t * ab;
  }
  Vec3 n = p - c;
  double nn = n.norm();
  return nn > 1e-12 ? Vec3(n / nn) : Vec3(0, 0, -1);
}

inline Vec3 background_shade(const Vec3& dir) {
  double t = std::clamp(0.5 + 0.9 * dir.y(), 0.0, 1.0);  // world +y is up
  Vec3 top(0.78, 0.84, 0.92), bottom(0.34, 0.37, 0.43);
  Vec3 c = bottom + t * (top - bottom) + Vec3(0.04, 0.03, 0.02) * dir.x();
  return c.cwiseMax(0.0).cwiseMin(1.0);
}

}  // namespace detail

//! Per-bone albedo palette for a person: a distinct base colour scaled by a
//! seeded per-bone shade, giving each limb a recognisable texture.
inline std::vector<Vec3> person_palette(std::uint64_t seed, int person, int joints) {
  static const Vec3 bases[4] = {Vec3(0.78, 0.33, 0.27), Vec3(0.27, 0.45, 0.80),
                                Vec3(0.33, 0.68, 0.38), Vec3(0.85, 0.72, 0.25)};
  KeyedRng rng(seed, {0xA1B0ULL, static_cast<std::uint64_t>(person)});
  std::vector<Vec3> out(static_cast<size_t>(joints));
  for (auto& c : out)
    c = (bases[person % 4] * rng.uniform(0.72, 1.08)).cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

//! Analytic lambert-shaded render of the posed capsule people; exact
//! cross-person occlusion by nearest hit, gradient background elsewhere.
inline Image render_capsule_scene(const std::vector<ParamBody>& bodies,
                                  const std::vector<PoseParams>& poses,
                                  const std::vector<std::vector<Vec3>>& palettes,
                                  const Camera& cam) {
  const int P = static_cast<int>(bodies.size());
  std::vector<std::vector<Vec3>> joints(static_cast<size_t>(P));
  for (int p = 0; p < P; ++p) joints[static_cast<size_t>(p)] = posed_joints(bodies[static_cast<size_t>(p)], poses[static_cast<size_t>(p)]);
  const Vec3 light = Vec3(0.3, -0.9, -0.28).normalized();  // image-up is -y
  Image img(cam.width, cam.height, 3);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      Ray ray = make_ray(cam, x, y);
      double best = kInf;
      int best_p = -1, best_j = -1;
      for (int p = 0; p < P; ++p) {
        const ParamBody& body = bodies[static_cast<size_t>(p)];
        for (int j = 1; j < body.joints; ++j) {
          double r = body.radius[static_cast<size_t>(j)];
          if (!(r > 0.0)) continue;
          double s = detail::ray_capsule_entry(
              ray.origin, ray.dir, joints[static_cast<size_t>(p)][static_cast<size_t>(body.parents[static_cast<size_t>(j)])],
              joints[static_cast<size_t>(p)][static_cast<size_t>(j)], r);
          if (s < best) {
            best = s;
            best_p = p;
            best_j = j;
          }
        }
      }
      Vec3 c;
      if (best_p >= 0) {
        const ParamBody& body = bodies[static_cast<size_t>(best_p)];
        Vec3 hit = ray.origin + best * ray.dir;
        Vec3 n = detail::capsule_normal(
            hit, joints[static_cast<size_t>(best_p)][static_cast<size_t>(body.parents[static_cast<size_t>(best_j)])],
            joints[static_cast<size_t>(best_p)][static_cast<size_t>(best_j)],
            body.radius[static_cast<size_t>(best_j)]);
        double diffuse = std::max(0.0, n.dot(light));
        c = palettes[static_cast<size_t>(best_p)][static_cast<size_t>(best_j)] * (0.34 + 0.66 * diffuse);
      } else {
        c = detail::background_shade(ray.dir);
      }
      for (int ch = 0; ch < 3; ++ch) img.at(x, y, ch) = std::clamp(c[ch], 0.0, 1.0);
    }
  return img;
}

// ---------------------------------------------------------------------------
// Motion presets
// ---------------------------------------------------------------------------

namespace detail {

struct JointIds {
  int spine, l_shoulder, l_elbow, r_shoulder, r_elbow, l_hip, l_knee, r_hip, r_knee, l_ankle,
      r_ankle, head;
};

inline int joint_index(const ParamBody& body, const std::string& name) {
  for (int j = 0; j < body.joints; ++j)
    if (body.names[static_cast<size_t>(j)] == name) return j;
  throw DataError("synthetic scene: body is missing joint " + name);
}

inline JointIds find_joints(const ParamBody& body) {
  JointIds id{};
  id.spine = joint_index(body, "spine");
  id.l_shoulder = joint_index(body, "l_shoulder");
  id.l_elbow = joint_index(body, "l_elbow");
  id.r_shoulder = joint_index(body, "r_shoulder");
  id.r_elbow = joint_index(body, "r_elbow");
  id.l_hip = joint_index(body, "l_hip");
  id.l_knee = joint_index(body, "l_knee");
  id.r_hip = joint_index(body, "r_hip");
  id.r_knee = joint_index(body, "r_knee");
  id.l_ankle = joint_index(body, "l_ankle");
  id.r_ankle = joint_index(body, "r_ankle");
  id.head = joint_index(body, "head");
  return id;
}

//! Drops the rest pose's sideways arms to hang near the torso.
inline void arms_down(PoseParams& pose, const JointIds& id, double amount = 1.15) {
  pose.joint_rot[static_cast<size_t>(id.l_shoulder)].z() = -amount;
  pose.joint_rot[static_cast<size_t>(id.r_shoulder)].z() = amount;
}

//! Walking-style limb curves: sinusoidal hip/arm counter-swing with knees
//! flexing on alternate half-cycles. `phase` individualises a person.
inline void apply_gait(PoseParams& pose, const JointIds& id, double t, double cycles, double phase,
                       double amp) {
  double w = 2.0 * kPi * cycles * t + phase;
  double s = std::sin(w);
  pose.joint_rot[static_cast<size_t>(id.l_hip)].x() = 0.45 * amp * s;
  pose.joint_rot[static_cast<size_t>(id.r_hip)].x() = -0.45 * amp * s;
  pose.joint_rot[static_cast<size_t>(id.l_knee)].x() = 0.30 * amp * (1.0 + std::sin(w - 0.7));
  pose.joint_rot[static_cast<size_t>(id.r_knee)].x() = 0.30 * amp * (1.0 - std::sin(w + 0.7));
  pose.joint_rot[static_cast<size_t>(id.l_ankle)].x() = 0.12 * amp * s;
  pose.joint_rot[static_cast<size_t>(id.r_ankle)].x() = -0.12 * amp * s;
  arms_down(pose, id, 1.05);
  pose.joint_rot[static_cast<size_t>(id.l_shoulder)].x() = -0.30 * amp * s;
  pose.joint_rot[static_cast<size_t>(id.r_shoulder)].x() = 0.30 * amp * s;
  pose.joint_rot[static_cast<size_t>(id.l_elbow)].x() = -0.18 * amp * (1.0 + s);
  pose.joint_rot[static_cast<size_t>(id.r_elbow)].x() = 0.18 * amp * (1.0 - s);
  pose.joint_rot[static_cast<size_t>(id.spine)].y() = 0.05 * amp * std::sin(2.0 * w);
}

inline double smoothstep01(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

}  // namespace detail

inline const std::vector<std::string>& synthetic_presets() {
  static const std::vector<std::string> names = {"static", "pass-by", "occluding-cross",
                                                 "close-contact"};
  return names;
}

//! Ground-truth pose of person `p` at clip position t in [0, 1] under a
//! motion preset. Deterministic in (seed, preset, p).
inline PoseParams synthetic_pose(const std::string& preset, std::uint64_t seed, int persons, int p,
                                 double t, const ParamBody& body) {
  detail::JointIds id = detail::find_joints(body);
  KeyedRng rng(seed, {0x9A17ULL, static_cast<std::uint64_t>(p)});
  double phase = rng.uniform(0.0, 2.0 * kPi);
  double amp = rng.uniform(0.85, 1.1);
  double head_tilt = rng.uniform(-0.12, 0.12);

  PoseParams pose(body.joints);
  pose.joint_rot[static_cast<size_t>(id.head)].z() = head_tilt;
  double lane = (p - 0.5 * (persons - 1));
  int dir = (p % 2 == 0) ? 1 : -1;

  if (preset == "static") {
    pose.trans = Vec3(0.8 * lane, 0.0, 3.1 + 0.3 * p);
    detail::arms_down(pose, id);
    pose.joint_rot[static_cast<size_t>(id.spine)].z() = 0.05 * std::sin(phase);
  } else if (preset == "pass-by") {
    // Parallel lanes, opposite directions, no crossing in depth.
    pose.trans = Vec3(dir * (-1.1 + 2.2 * t), 0.0, 3.0 + 0.4 * p);
    pose.joint_rot[0].y() = dir * 0.5 * kPi;
    detail::apply_gait(pose, id, t, 1.6, phase, amp);
  } else if (preset == "occluding-cross") {
    // Opposite walkers on near/far lanes crossing mid-clip, so the nearer
    // person deeply occludes the farther one around t = 0.5.
    double z = 3.0 + 0.8 * (p % 2) + 0.4 * (p / 2);
    pose.trans = Vec3(dir * (-0.85 + 1.7 * t), 0.0, z);
    pose.joint_rot[0].y() = dir * 0.5 * kPi;
    detail::apply_gait(pose, id, t, 1.4, phase, amp);
  } else if (preset == "close-contact") {
    // The first two people approach until their shoulders nearly touch and
    // hold; extra people idle behind.
    if (p < 2 && persons >= 2) {
      double g = 0.75 - (0.75 - 0.2375) * detail::smoothstep01(t / 0.7);
      pose.trans = Vec3((p == 0 ? -g : g), 0.0, 3.2 + 0.001 * p);
      detail::arms_down(pose, id);
      pose.joint_rot[static_cast<size_t>(id.spine)].z() =
          (p == 0 ? 1.0 : -1.0) * 0.05 * detail::smoothstep01(t / 0.7);
    } else {
      pose.trans = Vec3(0.7 * (p - (persons >= 2 ? 2.5 : 0.0)), 0.0, persons >= 2 ? 3.9 : 3.2);
      detail::arms_down(pose, id);
      pose.joint_rot[static_cast<size_t>(id.spine)].z() = 0.04 * std::sin(2.0 * kPi * t + phase);
    }
  } else {
    throw ConfigError("unknown scene preset: " + preset);
  }
  validate_pose(pose);
  return pose;
}

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

//! Builds a complete synthetic scene: bodies, ground-truth poses and surface
//! meshes, instance masks and depth maps rasterised from exactly those
//! meshes, and analytically rendered RGB frames. Deterministic in the seed:
//! the same call produces byte-identical artifacts.
inline SyntheticScene generate_synthetic_scene(int persons, const std::string& preset,
                                               int resolution, int frames, std::uint64_t seed) {
  if (persons < 1 || persons > 4)
    throw ConfigError("generate_synthetic_scene: person count must be in [1, 4]");
  if (frames < 1) throw ConfigError("generate_synthetic_scene: need at least one frame");
  if (resolution < 16) throw ConfigError("generate_synthetic_scene: resolution must be >= 16");
  const auto& presets = synthetic_presets();
  if (std::find(presets.begin(), presets.end(), preset) == presets.end())
    throw ConfigError("unknown scene preset: " + preset);

  SyntheticScene scene;
  scene.preset = preset;
  scene.seed = seed;
  scene.persons = persons;
  scene.frames = frames;
  scene.width = scene.height = resolution;

  for (int p = 0; p < persons; ++p) scene.bodies.push_back(default_body());
  std::vector<std::vector<Vec3>> palettes;
  for (int p = 0; p < persons; ++p)
    palettes.push_back(person_palette(seed, p, scene.bodies[static_cast<size_t>(p)].joints));

  double f = 0.95 * resolution;
  double c = 0.5 * (resolution - 1);
  Camera cam = make_camera(f, f, c, c, resolution, resolution);

  scene.cams.assign(static_cast<size_t>(frames), cam);
  scene.gt_poses.resize(static_cast<size_t>(frames));
  scene.gt_meshes.resize(static_cast<size_t>(frames));
  scene.gt_masks.resize(static_cast<size_t>(frames));
  scene.gt_depths.resize(static_cast<size_t>(frames));
  scene.images.resize(static_cast<size_t>(frames));

  for (int fi = 0; fi < frames; ++fi) {
    double t = frames > 1 ? static_cast<double>(fi) / (frames - 1) : 0.0;
    auto& poses = scene.gt_poses[static_cast<size_t>(fi)];
    auto& meshes = scene.gt_meshes[static_cast<size_t>(fi)];
    for (int p = 0; p < persons; ++p) {
      poses.push_back(synthetic_pose(preset, seed, persons, p, t, scene.bodies[static_cast<size_t>(p)]));
      meshes.push_back(posed_capsule_surface(scene.bodies[static_cast<size_t>(p)], poses.back()));
    }
    RasterOutput raster = rasterize_instances(meshes, cam);
    scene.gt_masks[static_cast<size_t>(fi)] = raster.mask;
    scene.gt_depths[static_cast<size_t>(fi)] = raster.depth;
    scene.images[static_cast<size_t>(fi)] = render_capsule_scene(scene.bodies, poses, palettes, cam);
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Serialisation
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string frame_tag(int f) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", f);
  return buf;
}

}  // namespace detail

inline void save_scene(const SyntheticScene& scene, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (const char* sub : {"frames", "masks", "depths", "meshes"})
    fs::create_directories(fs::path(dir) / sub);

  {
    std::ofstream out(fs::path(dir) / "scene.txt");
    if (!out) throw DataError("save_scene: cannot open scene.txt");
    out << "strata-scene 1\n";
    out << "preset " << scene.preset << "\n";
    out << "seed " << scene.seed << "\n";
    out << "persons " << scene.persons << "\n";
    out << "frames " << scene.frames << "\n";
    out << "width " << scene.width << "\n";
    out << "height " << scene.height << "\n";
  }
  {
    std::ofstream out(fs::path(dir) / "camera.txt");
    if (!out) throw DataError("save_scene: cannot open camera.txt");
    for (const Camera& cam : scene.cams) {
      out << detail::fmt_double(cam.fx) << " " << detail::fmt_double(cam.fy) << " "
          << detail::fmt_double(cam.cx) << " " << detail::fmt_double(cam.cy) << " " << cam.width
          << " " << cam.height;
      for (int i = 0; i < 3; ++i) out << " " << detail::fmt_double(cam.pos[i]);
      for (int r = 0; r < 3; ++r)
        for (int cc = 0; cc < 3; ++cc) out << " " << detail::fmt_double(cam.rot(r, cc));
      out << "\n";
    }
  }
  for (int p = 0; p < scene.persons; ++p)
    save_body((fs::path(dir) / ("body_p" + std::to_string(p) + ".txt")).string(),
              scene.bodies[static_cast<size_t>(p)]);
  {
    std::ofstream out(fs::path(dir) / "poses.txt");
    if (!out) throw DataError("save_scene: cannot open poses.txt");
    for (int f = 0; f < scene.frames; ++f)
      for (int p = 0; p < scene.persons; ++p) {
        const PoseParams& pose = scene.gt_poses[static_cast<size_t>(f)][static_cast<size_t>(p)];
        out << f << " " << p;
        for (int i = 0; i < 3; ++i) out << " " << detail::fmt_double(pose.trans[i]);
        for (const Vec3& r : pose.joint_rot)
          for (int i = 0; i < 3; ++i) out << " " << detail::fmt_double(r[i]);
        out << "\n";
      }
  }
  for (int f = 0; f < scene.frames; ++f) {
    std::string tag = detail::frame_tag(f);
    write_png((std::filesystem::path(dir) / "frames" / ("frame_" + tag + ".png")).string(),
              scene.images[static_cast<size_t>(f)]);
    for (int p = 0; p < scene.persons; ++p) {
      std::string suffix = tag + "_p" + std::to_string(p);
      write_mask_png((std::filesystem::path(dir) / "masks" / ("mask_" + suffix + ".png")).string(),
                     scene.gt_masks[static_cast<size_t>(f)][static_cast<size_t>(p)]);
      Image depth(scene.width, scene.height, 1);
      const MatX& d = scene.gt_depths[static_cast<size_t>(f)][static_cast<size_t>(p)];
      for (int y = 0; y < scene.height; ++y)
        for (int x = 0; x < scene.width; ++x) depth.at(x, y) = d(y, x);
      write_pfm((std::filesystem::path(dir) / "depths" / ("depth_" + suffix + ".pfm")).string(),
                depth);
      save_obj(scene.gt_meshes[static_cast<size_t>(f)][static_cast<size_t>(p)],
               (std::filesystem::path(dir) / "meshes" / ("mesh_" + suffix + ".obj")).string());
    }
  }
}

inline SyntheticScene load_scene(const std::string& dir) {
  namespace fs = std::filesystem;
  SyntheticScene scene;
  {
    std::ifstream in(fs::path(dir) / "scene.txt");
    if (!in) throw DataError("load_scene: cannot open " + dir + "/scene.txt");
    std::string magic;
    int version = 0;
    in >> magic >> version;
    if (magic != "strata-scene" || version != 1)
      throw DataError("load_scene: unrecognised scene header in " + dir);
    std::string key;
    while (in >> key) {
      if (key == "preset")
        in >> scene.preset;
      else if (key == "seed")
        in >> scene.seed;
      else if (key == "persons")
        in >> scene.persons;
      else if (key == "frames")
        in >> scene.frames;
      else if (key == "width")
        in >> scene.width;
      else if (key == "height")
        in >> scene.height;
      else
        throw DataError("load_scene: unknown scene.txt key " + key);
      if (!in) throw DataError("load_scene: malformed scene.txt value for " + key);
    }
    if (scene.persons < 1 || scene.frames < 1 || scene.width < 1 || scene.height < 1)
      throw DataError("load_scene: incomplete scene.txt");
  }
  {
    std::ifstream in(fs::path(dir) / "camera.txt");
    if (!in) throw DataError("load_scene: cannot open camera.txt");
    for (int f = 0; f < scene.frames; ++f) {
      double fx, fy, cx, cy;
      int w, h;
      Vec3 pos;
      Mat3 rot;
      in >> fx >> fy >> cx >> cy >> w >> h;
      for (int i = 0; i < 3; ++i) in >> pos[i];
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) in >> rot(r, c);
      if (!in) throw DataError("load_scene: camera.txt needs one line per frame");
      scene.cams.push_back(make_camera(fx, fy, cx, cy, w, h, rot, pos));
    }
  }
  for (int p = 0; p < scene.persons; ++p)
    scene.bodies.push_back(
        load_body((fs::path(dir) / ("body_p" + std::to_string(p) + ".txt")).string()));
  {
    std::ifstream in(fs::path(dir) / "poses.txt");
    if (!in) throw DataError("load_scene: cannot open poses.txt");
    scene.gt_poses.assign(static_cast<size_t>(scene.frames),
                          std::vector<PoseParams>(static_cast<size_t>(scene.persons)));
    for (int line = 0; line < scene.frames * scene.persons; ++line) {
      int f, p;
      in >> f >> p;
      if (!in || f < 0 || f >= scene.frames || p < 0 || p >= scene.persons)
        throw DataError("load_scene: poses.txt is truncated or indices are out of range");
      PoseParams pose(scene.bodies[static_cast<size_t>(p)].joints);
      for (int i = 0; i < 3; ++i) in >> pose.trans[i];
      for (auto& r : pose.joint_rot)
        for (int i = 0; i < 3; ++i) in >> r[i];
      if (!in) throw DataError("load_scene: malformed pose line");
      validate_pose(pose);
      scene.gt_poses[static_cast<size_t>(f)][static_cast<size_t>(p)] = pose;
    }
  }
  scene.gt_meshes.resize(static_cast<size_t>(scene.frames));
  scene.gt_masks.resize(static_cast<size_t>(scene.frames));
  scene.gt_depths.resize(static_cast<size_t>(scene.frames));
  scene.images.resize(static_cast<size_t>(scene.frames));
  for (int f = 0; f < scene.frames; ++f) {
    std::string tag = detail::frame_tag(f);
    scene.images[static_cast<size_t>(f)] =
        read_png((fs::path(dir) / "frames" / ("frame_" + tag + ".png")).string());
    for (int p = 0; p < scene.persons; ++p) {
      std::string suffix = tag + "_p" + std::to_string(p);
      scene.gt_masks[static_cast<size_t>(f)].push_back(
          read_mask_png((fs::path(dir) / "masks" / ("mask_" + suffix + ".png")).string()));
      Image depth = read_pfm((fs::path(dir) / "depths" / ("depth_" + suffix + ".pfm")).string());
      if (depth.w != scene.width || depth.h != scene.height)
        throw DataError("load_scene: depth map size mismatch");
      MatX d(scene.height, scene.width);
      for (int y = 0; y < scene.height; ++y)
        for (int x = 0; x < scene.width; ++x) d(y, x) = depth.at(x, y);
      scene.gt_depths[static_cast<size_t>(f)].push_back(std::move(d));
      scene.gt_meshes[static_cast<size_t>(f)].push_back(
          load_obj((fs::path(dir) / "meshes" / ("mesh_" + suffix + ".obj")).string()));
    }
  }
  return scene;
}

//! Fraction of person `p`'s full silhouette hidden behind other people in
//! frame `f` (computed from the ground-truth meshes).
inline double occluded_fraction(const SyntheticScene& scene, int f, int p) {
  RasterOutput raster =
      rasterize_instances(scene.gt_meshes[static_cast<size_t>(f)], scene.cams[static_cast<size_t>(f)]);
  const Mask& covered = raster.covered[static_cast<size_t>(p)];
  const Mask& visible = raster.mask[static_cast<size_t>(p)];
  size_t total = covered.count();
  if (total == 0) return 0.0;
  size_t hidden = 0;
  for (size_t i = 0; i < covered.v.size(); ++i) hidden += (covered.v[i] != 0 && visible.v[i] == 0);
  return static_cast<double>(hidden) / static_cast<double>(total);
}

}  // namespace strata
