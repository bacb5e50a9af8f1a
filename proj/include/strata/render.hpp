#pragma once
// Occlusion-aware layered volume rendering. Each person is sampled inside
// their own posed bounding box (stratified pass plus one importance pass on
// the first pass's density), samples are warped to canonical space and turned
// into occupancies, and all persons' samples are composited front-to-back in
// one merged depth order: every sample is attenuated by the transmittance of
// all strictly nearer samples of all persons (ties resolved by person index,
// then sample index, so rendering is a total order and deterministic).
//
// The tape-side composite reproduces the plain sequential loop operation for
// operation (exclusive running products and ordered accumulation), so a
// single-person render and the layered path agree bit for bit.

#include <algorithm>
#include <cmath>
#include <memory>
#include <utility>
#include <vector>

#include "strata/camera.hpp"
#include "strata/common.hpp"
#include "strata/field.hpp"
#include "strata/image.hpp"
#include "strata/rng.hpp"
#include "strata/skinning.hpp"

namespace strata {

//! Floor added to importance weights so no bin starves entirely.
constexpr double kImportanceFloor = 1e-4;

//! One subject ready to render: a canonical field (network or analytic) and,
//! when the subject articulates, the body/pose pair that warps world-space
//! samples back to canonical space.
struct PersonModel {
  const CanonicalField* field = nullptr;
  const AnalyticField* analytic = nullptr;  // oracle path; canonical == world
  const ParamBody* body = nullptr;
  PoseParams pose;
  std::shared_ptr<DeformContext> ctx;
  Obb box;
};

inline PersonModel make_person_model(const CanonicalField& field, const ParamBody& body,
                                     const PoseParams& pose, double pad = 0.1) {
  PersonModel pm;
  pm.field = &field;
  pm.body = &body;
  pm.pose = pose;
  pm.ctx = std::make_shared<DeformContext>(make_deform_context(body, pose));
  pm.box = posed_bounding_box(body, pose, pad);
  return pm;
}

inline PersonModel make_analytic_person(const AnalyticField& field, const Obb& box) {
  PersonModel pm;
  pm.analytic = &field;
  pm.box = box;
  return pm;
}

//! Canonical-space evaluation of a batch of world points for one person.
inline void eval_person_points(const PersonModel& pm, const MatX& x_d, VecX* s, MatX* c,
                               MatX* x_c_out, std::vector<int>* nn_out) {
  const Eigen::Index n = x_d.rows();
  if (pm.analytic) {
    if (s) s->resize(n);
    if (c) c->resize(n, 3);
    if (x_c_out) *x_c_out = x_d;
    if (nn_out) nn_out->assign(static_cast<size_t>(n), -1);
    for (Eigen::Index i = 0; i < n; ++i) {
      FieldSample fs = pm.analytic->eval(x_d.row(i).transpose());
      if (s) (*s)[i] = fs.s;
      if (c) c->row(i) = fs.c.transpose();
    }
    return;
  }
  if (!pm.field) throw ConfigError("eval_person_points: person has no field");
  MatX X;
  std::vector<int> nn(static_cast<size_t>(n), -1);
  if (pm.body) {
    if (!pm.ctx) throw ConfigError("eval_person_points: articulated person lacks a deform context");
    X.resize(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) {
      InverseWarpResult inv = lbs_inverse(*pm.body, *pm.ctx, x_d.row(i).transpose());
      X.row(i) = inv.x_c.transpose();
      nn[static_cast<size_t>(i)] = inv.nn_vertex;
    }
  } else {
    X = x_d;
  }
  VecX pose_vec = pm.pose.joint_rot.empty() ? VecX::Zero(pm.field->pose_dim()) : pm.pose.flatten();
  eval_field_batch(*pm.field, X, pose_vec, s, c, nullptr);
  if (x_c_out) *x_c_out = std::move(X);
  if (nn_out) *nn_out = std::move(nn);
}

// ---------------------------------------------------------------------------
// Ray sampling
// ---------------------------------------------------------------------------

struct PersonSamples {
  bool hit = false;
  double t0 = 0.0, t1 = 0.0;  // box interval along the ray
  VecX z;                     // ascending depths of the union of both passes
  VecX z_importance;          // second-pass depths alone (diagnostics/tests)
  VecX delta;                 // interval widths, last one runs to t1
  MatX x_d, x_c;              // world and canonical sample points
  std::vector<int> nn_vertex; // frozen warp vertex per sample (-1 when unwarped)
  VecX s, sigma, o;           // signed distance, density, occupancy
  MatX c;                     // radiance
};

struct RaySampleSet {
  std::vector<PersonSamples> person;
};

namespace detail {

inline VecX stratified_depths(double t0, double t1, int n, KeyedRng& rng) {
  VecX z(n);
  double step = (t1 - t0) / n;
  for (int i = 0; i < n; ++i) z[i] = t0 + (i + rng.uniform()) * step;
  return z;
}

//! Draws n2 depths from the piecewise-constant weight profile of the first
//! pass: per-bin transmittance times occupancy, floored so nothing starves.
inline VecX importance_depths(double t0, double t1, const VecX& sigma1, int n2, KeyedRng& rng) {
  const int n1 = static_cast<int>(sigma1.size());
  double step = (t1 - t0) / n1;
  VecX w(n1);
  double trans = 1.0;
  for (int i = 0; i < n1; ++i) {
    double o = 1.0 - std::exp(-sigma1[i] * step);
    w[i] = trans * o + kImportanceFloor;
    trans *= 1.0 - o;
  }
  double total = w.sum();
  VecX z(n2);
  for (int i = 0; i < n2; ++i) {
    double u = (i + rng.uniform()) / n2 * total;
    int bin = 0;
    double acc = 0.0;
    while (bin < n1 - 1 && acc + w[bin] < u) acc += w[bin++];
    double frac = std::clamp((u - acc) / w[bin], 0.0, 1.0);
    z[i] = t0 + (bin + frac) * step;
  }
  return z;
}

}  // namespace detail

//! Samples every person's box interval along one ray and evaluates their
//! fields at the union of both passes. `ray_id` keys the random stream, so a
//! fixed (seed, frame, ray_id) reproduces the samples exactly.
inline RaySampleSet sample_points_on_ray(const Ray& ray, const std::vector<PersonModel>& persons,
                                         const DensityParams& dp, int n, uint64_t seed,
                                         int frame, uint64_t ray_id) {
  if (n < 2) throw ConfigError("sample_points_on_ray: need at least two samples per person");
  RaySampleSet set;
  set.person.resize(persons.size());
  const int n1 = n / 2, n2 = n - n / 2;
  for (size_t p = 0; p < persons.size(); ++p) {
    PersonSamples& ps = set.person[p];
    double t0, t1;
    if (!ray_obb_intersect(ray, persons[p].box, t0, t1) || t1 <= t0) continue;
    ps.hit = true;
    ps.t0 = t0;
    ps.t1 = t1;

    KeyedRng rng1(seed, {0x5A3Eull, static_cast<uint64_t>(frame), ray_id, static_cast<uint64_t>(p), 0});
    VecX z1 = detail::stratified_depths(t0, t1, n1, rng1);
    MatX pts1(n1, 3);
    for (int i = 0; i < n1; ++i) pts1.row(i) = (ray.origin + z1[i] * ray.dir).transpose();
    VecX s1;
    eval_person_points(persons[p], pts1, &s1, nullptr, nullptr, nullptr);
    VecX sigma1 = sdf_to_density(s1, dp);

    KeyedRng rng2(seed, {0x5A3Eull, static_cast<uint64_t>(frame), ray_id, static_cast<uint64_t>(p), 1});
    VecX z2 = detail::importance_depths(t0, t1, sigma1, n2, rng2);
    ps.z_importance = z2;

    ps.z.resize(n);
    ps.z.head(n1) = z1;
    ps.z.tail(n2) = z2;
    std::sort(ps.z.data(), ps.z.data() + ps.z.size());
    ps.delta.resize(n);
    for (int i = 0; i + 1 < n; ++i) ps.delta[i] = ps.z[i + 1] - ps.z[i];
    ps.delta[n - 1] = std::max(0.0, t1 - ps.z[n - 1]);

    ps.x_d.resize(n, 3);
    for (int i = 0; i < n; ++i) ps.x_d.row(i) = (ray.origin + ps.z[i] * ray.dir).transpose();
    eval_person_points(persons[p], ps.x_d, &ps.s, &ps.c, &ps.x_c, &ps.nn_vertex);
    ps.sigma = sdf_to_density(ps.s, dp);
    ps.o.resize(n);
    for (int i = 0; i < n; ++i) ps.o[i] = 1.0 - std::exp(-ps.sigma[i] * ps.delta[i]);
  }
  return set;
}

// ---------------------------------------------------------------------------
// Compositing
// ---------------------------------------------------------------------------

//! The total order in which samples of all persons are composited: ascending
//! depth, ties by person then sample index.
struct MergedOrder {
  std::vector<std::pair<int, int>> entries;  // (person, sample)
};

inline MergedOrder merged_order(const RaySampleSet& set) {
  MergedOrder order;
  for (int p = 0; p < static_cast<int>(set.person.size()); ++p)
    for (int i = 0; i < static_cast<int>(set.person[static_cast<size_t>(p)].z.size()); ++i)
      order.entries.emplace_back(p, i);
  std::sort(order.entries.begin(), order.entries.end(),
            [&set](const std::pair<int, int>& a, const std::pair<int, int>& b) {
              double za = set.person[static_cast<size_t>(a.first)].z[a.second];
              double zb = set.person[static_cast<size_t>(b.first)].z[b.second];
              if (za != zb) return za < zb;
              return a < b;
            });
  return order;
}

struct CompositeResult {
  Vec3 c_h = Vec3::Zero();  // accumulated human color
  VecX opacity;             // per-person rendered opacity
  double t_end = 1.0;       // residual transmittance
};

//! Front-to-back compositing over the merged order (one sequential loop; the
//! per-sample attenuation is exactly the product over all strictly nearer
//! samples of every person).
inline CompositeResult composite_human_color(const RaySampleSet& set) {
  CompositeResult out;
  out.opacity = VecX::Zero(static_cast<Eigen::Index>(set.person.size()));
  MergedOrder order = merged_order(set);
  double trans = 1.0;
  for (const auto& [p, i] : order.entries) {
    const PersonSamples& ps = set.person[static_cast<size_t>(p)];
    double w = trans * ps.o[i];
    out.c_h += w * ps.c.row(i).transpose();
    out.opacity[p] += w;
    trans *= 1.0 - ps.o[i];
  }
  out.t_end = trans;
  return out;
}

inline double render_person_opacity(const RaySampleSet& set, int p) {
  if (p < 0 || p >= static_cast<int>(set.person.size()))
    throw ConfigError("render_person_opacity: person index out of range");
  return composite_human_color(set).opacity[p];
}

inline Vec3 composite_with_background(const Vec3& c_h, double t_end, const Ray& ray,
                                      const BackgroundField* bg, int frame) {
  Vec3 cb = bg ? eval_background(*bg, ray.dir, frame) : Vec3::Zero();
  return c_h + t_end * cb;
}

// ---------------------------------------------------------------------------
// Whole-image rendering
// ---------------------------------------------------------------------------

struct RenderConfig {
  int samples_per_person = 64;
  uint64_t seed = 0;
  int frame = 0;
};

struct RenderResult {
  Image color;                 // H x W x 3
  std::vector<MatX> opacity;   // per person H x W
  MatX t_end;                  // H x W residual transmittance
};

inline RenderResult render_image(const Camera& cam, const std::vector<PersonModel>& persons,
                                 const DensityParams& dp, const BackgroundField* bg,
                                 const RenderConfig& cfg) {
  RenderResult out;
  out.color = Image(cam.width, cam.height, 3);
  out.opacity.assign(persons.size(), MatX::Zero(cam.height, cam.width));
  out.t_end = MatX::Ones(cam.height, cam.width);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      Ray ray = make_ray(cam, x, y);
      uint64_t ray_id = static_cast<uint64_t>(y) * static_cast<uint64_t>(cam.width) +
                        static_cast<uint64_t>(x);
      RaySampleSet set = sample_points_on_ray(ray, persons, dp, cfg.samples_per_person, cfg.seed,
                                              cfg.frame, ray_id);
      CompositeResult comp = composite_human_color(set);
      Vec3 c = composite_with_background(comp.c_h, comp.t_end, ray, bg, cfg.frame);
      for (int ch = 0; ch < 3; ++ch) out.color.at(x, y, ch) = std::clamp(c[ch], 0.0, 1.0);
      for (size_t p = 0; p < persons.size(); ++p) out.opacity[p](y, x) = comp.opacity[static_cast<Eigen::Index>(p)];
      out.t_end(y, x) = comp.t_end;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Tape-side compositing
// ---------------------------------------------------------------------------

struct RayCompositeTape {
  Var c_h;      // 1 x 3
  Var opacity;  // P x 1
  Var t_end;    // 1 x 1
};

//! Composites one ray on the tape from per-person occupancy and radiance
//! nodes, following a frozen merged order. The running products and ordered
//! accumulations use the same operation sequence as the plain loop, so values
//! match it bit for bit.
inline RayCompositeTape composite_ray_tape(Tape& t, const std::vector<Var>& o,
                                           const std::vector<Var>& c, const MergedOrder& order) {
  const int P = static_cast<int>(o.size());
  if (static_cast<int>(c.size()) != P) throw ConfigError("composite_ray_tape: o/c person count mismatch");
  std::vector<int> offset(static_cast<size_t>(P) + 1, 0);
  for (int p = 0; p < P; ++p)
    offset[static_cast<size_t>(p) + 1] =
        offset[static_cast<size_t>(p)] + (o[static_cast<size_t>(p)].valid()
                                              ? static_cast<int>(t.value(o[static_cast<size_t>(p)]).rows())
                                              : 0);
  const int M = static_cast<int>(order.entries.size());
  if (offset[static_cast<size_t>(P)] != M)
    throw ConfigError("composite_ray_tape: merged order does not cover the samples");

  std::vector<Var> o_parts, c_parts;
  for (int p = 0; p < P; ++p)
    if (o[static_cast<size_t>(p)].valid()) {
      o_parts.push_back(o[static_cast<size_t>(p)]);
      c_parts.push_back(c[static_cast<size_t>(p)]);
    }
  RayCompositeTape out;
  if (M == 0) {
    out.c_h = t.constant(Arr(Arr::Zero(1, 3)));
    out.opacity = t.constant(Arr(Arr::Zero(P, 1)));
    out.t_end = t.constant_scalar(1.0);
    return out;
  }
  Var o_all = o_parts.size() == 1 ? o_parts[0] : t.concat_rows(o_parts);
  Var c_all = c_parts.size() == 1 ? c_parts[0] : t.concat_rows(c_parts);
  std::vector<int> perm(static_cast<size_t>(M));
  for (int k = 0; k < M; ++k) {
    const auto& [p, i] = order.entries[static_cast<size_t>(k)];
    perm[static_cast<size_t>(k)] = offset[static_cast<size_t>(p)] + i;
  }
  Var o_m = t.gather_rows(o_all, perm);
  Var c_m = t.gather_rows(c_all, perm);
  Var survive = t.add_scalar(t.neg(o_m), 1.0);        // 1 - o, merged order
  Var prods = t.cumprod_excl(survive);                // M+1 running products
  Var trans = t.rows(prods, 0, M);
  Var w = t.mul(o_m, trans);
  out.c_h = t.seq_weighted_sum(c_m, w);
  out.t_end = t.rows(prods, M, 1);
  std::vector<Var> per_person(static_cast<size_t>(P));
  for (int p = 0; p < P; ++p) {
    std::vector<int> own;
    for (int k = 0; k < M; ++k)
      if (order.entries[static_cast<size_t>(k)].first == p) own.push_back(k);
    if (own.empty()) {
      per_person[static_cast<size_t>(p)] = t.constant(Arr(Arr::Zero(1, 1)));
    } else {
      per_person[static_cast<size_t>(p)] = t.seq_sum(t.gather_rows(w, own));
    }
  }
  out.opacity = P == 1 ? per_person[0] : t.concat_rows(per_person);
  return out;
}

}  // namespace strata
