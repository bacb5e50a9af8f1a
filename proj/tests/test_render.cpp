#include "strata/render.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "strata/field.hpp"
#include "strata/rng.hpp"
#include "test_util.hpp"

namespace strata {
namespace {

using strata::testing::bitwise_equal;
using strata::testing::check_tape_gradients;

// Builds a synthetic sample set directly (depths, occupancies, radiances);
// compositing only reads z, o, and c.
RaySampleSet synthetic_set(KeyedRng& rng, const std::vector<int>& counts) {
  RaySampleSet set;
  set.person.resize(counts.size());
  for (size_t p = 0; p < counts.size(); ++p) {
    PersonSamples& ps = set.person[p];
    int n = counts[p];
    ps.hit = n > 0;
    ps.z.resize(n);
    ps.o.resize(n);
    ps.c.resize(n, 3);
    double z = rng.uniform(0.5, 1.0);
    for (int i = 0; i < n; ++i) {
      z += rng.uniform(0.0, 0.3);
      ps.z[i] = z;
      ps.o[i] = rng.uniform(0.0, 0.95);
      for (int ch = 0; ch < 3; ++ch) ps.c(i, ch) = rng.uniform(0.0, 1.0);
    }
  }
  return set;
}

// Literal definition of the layered color: every sample is attenuated by the
// product over all samples of all persons that are strictly nearer, with depth
// ties broken by person index then sample index.
struct FlatSample {
  double z;
  int p, i;
  double o;
  Vec3 c;
};

bool strictly_nearer(const FlatSample& a, const FlatSample& b) {
  if (a.z != b.z) return a.z < b.z;
  if (a.p != b.p) return a.p < b.p;
  return a.i < b.i;
}

CompositeResult literal_composite(const RaySampleSet& set) {
  std::vector<FlatSample> flat;
  for (int p = 0; p < static_cast<int>(set.person.size()); ++p) {
    const PersonSamples& ps = set.person[static_cast<size_t>(p)];
    for (int i = 0; i < static_cast<int>(ps.z.size()); ++i)
      flat.push_back({ps.z[i], p, i, ps.o[i], ps.c.row(i).transpose()});
  }
  CompositeResult out;
  out.opacity = VecX::Zero(static_cast<Eigen::Index>(set.person.size()));
  for (const FlatSample& k : flat) {
    double atten = 1.0;
    for (const FlatSample& m : flat)
      if (strictly_nearer(m, k)) atten *= 1.0 - m.o;
    out.c_h += k.o * atten * k.c;
    out.opacity[k.p] += k.o * atten;
  }
  out.t_end = 1.0;
  for (const FlatSample& m : flat) out.t_end *= 1.0 - m.o;
  return out;
}

TEST(Composite, MatchesLiteralDoubleProductOracle) {
  KeyedRng rng(17, {0xC0});
  for (int rep = 0; rep < 50; ++rep) {
    RaySampleSet set = synthetic_set(rng, {6, 4, 5});
    CompositeResult fast = composite_human_color(set);
    CompositeResult ref = literal_composite(set);
    EXPECT_NEAR((fast.c_h - ref.c_h).cwiseAbs().maxCoeff(), 0.0, 1e-6);
    EXPECT_NEAR((fast.opacity - ref.opacity).cwiseAbs().maxCoeff(), 0.0, 1e-6);
    EXPECT_NEAR(fast.t_end, ref.t_end, 1e-6);
  }
}

TEST(Composite, ExactDepthTiesBreakByPersonThenSample) {
  RaySampleSet set;
  set.person.resize(2);
  for (int p = 0; p < 2; ++p) {
    PersonSamples& ps = set.person[static_cast<size_t>(p)];
    ps.hit = true;
    ps.z = VecX::Constant(2, 1.0);  // all four samples at the same depth
    ps.o = VecX::Constant(2, 0.5);
    ps.c = MatX::Zero(2, 3);
    ps.c.col(0).setConstant(p == 0 ? 1.0 : 0.0);
    ps.c.col(1).setConstant(p == 1 ? 1.0 : 0.0);
  }
  CompositeResult fast = composite_human_color(set);
  CompositeResult ref = literal_composite(set);
  // Person 0's samples composite first: 0.5 + 0.25 of red, then 0.125 + 0.0625 of green.
  EXPECT_NEAR(fast.c_h.x(), 0.75, 1e-12);
  EXPECT_NEAR(fast.c_h.y(), 0.1875, 1e-12);
  EXPECT_NEAR((fast.c_h - ref.c_h).cwiseAbs().maxCoeff(), 0.0, 1e-12);
  EXPECT_NEAR(fast.t_end, std::pow(0.5, 4), 1e-12);
}

TEST(Composite, OpacitiesAndResidualPartitionUnity) {
  KeyedRng rng(3, {0xC1});
  for (int rep = 0; rep < 100; ++rep) {
    RaySampleSet set = synthetic_set(rng, {8, 3, 6, 2});
    CompositeResult r = composite_human_color(set);
    EXPECT_NEAR(r.opacity.sum() + r.t_end, 1.0, 1e-5);
    for (Eigen::Index p = 0; p < r.opacity.size(); ++p) {
      EXPECT_GE(r.opacity[p], 0.0);
      EXPECT_LE(r.opacity[p], 1.0 + 1e-12);
    }
  }
}

TEST(Composite, SinglePersonReducesToClassicRendererBitwise) {
  KeyedRng rng(9, {0xC2});
  for (int rep = 0; rep < 20; ++rep) {
    RaySampleSet set = synthetic_set(rng, {12});
    CompositeResult layered = composite_human_color(set);

    // Independent classic front-to-back renderer over one sample list.
    const PersonSamples& ps = set.person[0];
    Vec3 color = Vec3::Zero();
    double trans = 1.0, opacity = 0.0;
    for (int i = 0; i < static_cast<int>(ps.z.size()); ++i) {
      double w = trans * ps.o[i];
      color += w * ps.c.row(i).transpose();
      opacity += w;
      trans *= 1.0 - ps.o[i];
    }
    for (int ch = 0; ch < 3; ++ch) EXPECT_TRUE(bitwise_equal(layered.c_h[ch], color[ch]));
    EXPECT_TRUE(bitwise_equal(layered.opacity[0], opacity));
    EXPECT_TRUE(bitwise_equal(layered.t_end, trans));
  }
}

TEST(Composite, PersonOpacityAccessorMatchesFullComposite) {
  KeyedRng rng(4, {0xC3});
  RaySampleSet set = synthetic_set(rng, {5, 7});
  CompositeResult r = composite_human_color(set);
  EXPECT_EQ(render_person_opacity(set, 0), r.opacity[0]);
  EXPECT_EQ(render_person_opacity(set, 1), r.opacity[1]);
  EXPECT_THROW(render_person_opacity(set, 2), ConfigError);
}

TEST(Composite, TapePathMatchesPlainBitwiseAndDifferentiates) {
  KeyedRng rng(21, {0xC4});
  RaySampleSet set = synthetic_set(rng, {5, 0, 4});
  CompositeResult plain = composite_human_color(set);
  MergedOrder order = merged_order(set);

  Tape tape;
  std::vector<Var> o(3), c(3);
  for (int p = 0; p < 3; ++p) {
    const PersonSamples& ps = set.person[static_cast<size_t>(p)];
    if (ps.z.size() == 0) continue;
    o[static_cast<size_t>(p)] = tape.leaf(Arr(ps.o.array()));
    c[static_cast<size_t>(p)] = tape.leaf(Arr(ps.c.array()));
  }
  RayCompositeTape rt = composite_ray_tape(tape, o, c, order);
  for (int ch = 0; ch < 3; ++ch)
    EXPECT_TRUE(bitwise_equal(tape.value(rt.c_h)(0, ch), plain.c_h[ch]));
  for (int p = 0; p < 3; ++p)
    EXPECT_TRUE(bitwise_equal(tape.value(rt.opacity)(p, 0), plain.opacity[p]));
  EXPECT_TRUE(bitwise_equal(tape.value(rt.t_end)(0, 0), plain.t_end));

  // Gradients of a scalar readout against central differences.
  std::vector<Arr> leaves = {Arr(set.person[0].o.array()), Arr(set.person[0].c.array()),
                             Arr(set.person[2].o.array()), Arr(set.person[2].c.array())};
  check_tape_gradients(
      leaves,
      [&](Tape& t, const std::vector<Var>& v) {
        std::vector<Var> ov(3), cv(3);
        ov[0] = v[0];
        cv[0] = v[1];
        ov[2] = v[2];
        cv[2] = v[3];
        RayCompositeTape r = composite_ray_tape(t, ov, cv, order);
        Var weighted = t.seq_weighted_sum(r.opacity, t.constant(Arr(Arr::Constant(3, 1, 0.25))));
        return t.add(t.add(t.seq_sum(t.transpose(r.c_h)), r.t_end), weighted);
      },
      1e-6, 1e-6);
}

TEST(Composite, EmptySampleSetLeavesBackgroundOnly) {
  RaySampleSet set;
  set.person.resize(2);
  CompositeResult r = composite_human_color(set);
  EXPECT_EQ(r.c_h, Vec3::Zero());
  EXPECT_EQ(r.opacity.sum(), 0.0);
  EXPECT_EQ(r.t_end, 1.0);

  Ray ray;
  BackgroundField bg = make_background_field(5, 3);
  Vec3 with_bg = composite_with_background(r.c_h, r.t_end, ray, &bg, 1);
  EXPECT_NEAR((with_bg - eval_background(bg, ray.dir, 1)).norm(), 0.0, 1e-15);
  Vec3 no_bg = composite_with_background(r.c_h, r.t_end, ray, nullptr, 1);
  EXPECT_EQ(no_bg, Vec3::Zero());
}

TEST(Composite, BackgroundContributionScalesWithResidualTransmittance) {
  // A half-transparent body in front of a bright background: the final color
  // interpolates, and brightening the background can only brighten the pixel.
  Vec3 c_h(0.2, 0.1, 0.0);
  Ray ray;
  for (double t_end : {0.0, 0.3, 0.9}) {
    Vec3 dim = c_h + t_end * Vec3::Constant(0.2);
    Vec3 bright = c_h + t_end * Vec3::Constant(0.9);
    Vec3 got_dim = composite_with_background(c_h, t_end, ray, nullptr, 0) + t_end * Vec3::Constant(0.2);
    EXPECT_NEAR((got_dim - dim).norm(), 0.0, 1e-15);
    if (t_end > 0.0) EXPECT_GT((bright - dim).minCoeff(), 0.0);
  }
}

// ---------------------------------------------------------------------------
// Ray sampling
// ---------------------------------------------------------------------------

PersonModel opaque_sphere_person(const Vec3& center, double radius, const Vec3& color,
                                 AnalyticField& storage, double box_half) {
  storage = analytic_sphere(center, radius, color);
  Obb box;
  box.center = center;
  box.half = Vec3::Constant(box_half);
  return make_analytic_person(storage, box);
}

TEST(Sampler, MissedBoxYieldsNoSamples) {
  AnalyticField field;
  PersonModel pm = opaque_sphere_person(Vec3(0, 0, 2), 0.4, Vec3(1, 0, 0), field, 0.5);
  Ray ray;
  ray.origin = Vec3(5, 5, 0);
  ray.dir = Vec3::UnitZ();
  DensityParams dp;
  RaySampleSet set = sample_points_on_ray(ray, {pm}, dp, 16, 1, 0, 0);
  EXPECT_FALSE(set.person[0].hit);
  EXPECT_EQ(set.person[0].z.size(), 0);
  CompositeResult r = composite_human_color(set);
  EXPECT_EQ(r.t_end, 1.0);
}

TEST(Sampler, DepthsSortedInsideIntervalAndDeterministic) {
  AnalyticField field;
  PersonModel pm = opaque_sphere_person(Vec3(0, 0, 2), 0.4, Vec3(1, 0, 0), field, 0.5);
  Ray ray;
  ray.origin = Vec3(0.1, -0.05, 0);
  ray.dir = Vec3(0.02, 0.01, 1.0).normalized();
  DensityParams dp;
  RaySampleSet a = sample_points_on_ray(ray, {pm}, dp, 32, 7, 3, 11);
  RaySampleSet b = sample_points_on_ray(ray, {pm}, dp, 32, 7, 3, 11);
  RaySampleSet c = sample_points_on_ray(ray, {pm}, dp, 32, 8, 3, 11);
  ASSERT_TRUE(a.person[0].hit);
  const PersonSamples& ps = a.person[0];
  ASSERT_EQ(ps.z.size(), 32);
  for (int i = 0; i + 1 < 32; ++i) EXPECT_LE(ps.z[i], ps.z[i + 1]);
  for (int i = 0; i < 32; ++i) {
    EXPECT_GE(ps.z[i], ps.t0);
    EXPECT_LE(ps.z[i], ps.t1);
    EXPECT_GE(ps.delta[i], 0.0);
    EXPECT_GE(ps.o[i], 0.0);
    EXPECT_LT(ps.o[i], 1.0);
    EXPECT_TRUE(pm.box.contains(ps.x_d.row(i).transpose(), 1e-9));
  }
  EXPECT_EQ(ps.z_importance.size(), 16);
  EXPECT_TRUE((a.person[0].z.array() == b.person[0].z.array()).all());
  EXPECT_TRUE((a.person[0].o.array() == b.person[0].o.array()).all());
  EXPECT_FALSE((a.person[0].z.array() == c.person[0].z.array()).all());
}

TEST(Sampler, ImportancePassConcentratesAtOpaqueWall) {
  // A huge sphere approximates a flat wall inside the sampling box; most
  // second-pass samples must land within twice the density transition width
  // of the surface crossing.
  const double R = 50.0;
  const Vec3 center(0, 0, 3.0 + R);  // wall near z = 3 for rays along +z
  AnalyticField field = analytic_sphere(center, R, Vec3(1, 1, 1));
  PersonModel pm;
  pm.analytic = &field;
  pm.box.center = Vec3(0, 0, 3);
  pm.box.half = Vec3(2, 2, 1);
  DensityParams dp;  // transition width b = 0.05
  const double b = dp.b(0, 0);

  KeyedRng rng(5, {0xA11});
  int total = 0, close = 0;
  for (int r = 0; r < 1000; ++r) {
    Ray ray;
    ray.origin = Vec3(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), 0);
    ray.dir = Vec3::UnitZ();
    double dx2 = ray.origin.head<2>().squaredNorm();
    double z_cross = center.z() - std::sqrt(R * R - dx2);
    RaySampleSet set = sample_points_on_ray(ray, {pm}, dp, 64, 99, 0, static_cast<uint64_t>(r));
    ASSERT_TRUE(set.person[0].hit);
    for (int i = 0; i < static_cast<int>(set.person[0].z_importance.size()); ++i) {
      ++total;
      if (std::abs(set.person[0].z_importance[i] - z_cross) <= 2.0 * b) ++close;
    }
  }
  ASSERT_GT(total, 0);
  EXPECT_GE(static_cast<double>(close) / total, 0.70)
      << close << " of " << total << " samples near the crossing";
}

TEST(Sampler, NetworkFieldPathProducesFiniteSamples) {
  // End-to-end through the articulated path: inverse warp plus network field.
  ParamBody body = default_body();
  PoseParams pose(body.joints);
  pose.trans = Vec3(0.0, 0.0, 2.0);
  CanonicalField field = make_canonical_field(11, body.joints, enclosing_radius(body));
  PersonModel pm = make_person_model(field, body, pose);
  Ray ray;
  ray.origin = Vec3(0.02, -0.3, 0);
  ray.dir = Vec3(0, 0.1, 1).normalized();
  DensityParams dp;
  RaySampleSet set = sample_points_on_ray(ray, {pm}, dp, 16, 2, 0, 5);
  ASSERT_TRUE(set.person[0].hit);
  const PersonSamples& ps = set.person[0];
  EXPECT_TRUE(ps.s.allFinite());
  EXPECT_TRUE(ps.c.allFinite());
  EXPECT_TRUE(ps.x_c.allFinite());
  for (int i = 0; i < static_cast<int>(ps.z.size()); ++i) {
    EXPECT_GE(ps.o[i], 0.0);
    EXPECT_LT(ps.o[i], 1.0);
  }
}

// ---------------------------------------------------------------------------
// Whole images
// ---------------------------------------------------------------------------

TEST(RenderImage, EmptySceneIsPureBackground) {
  Camera cam = make_camera(40, 40, 15.5, 15.5, 32, 32);
  BackgroundField bg = make_background_field(3, 77);
  RenderConfig cfg;
  cfg.samples_per_person = 8;
  cfg.frame = 2;
  RenderResult out = render_image(cam, {}, DensityParams{}, &bg, cfg);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      Ray ray = make_ray(cam, x, y);
      Vec3 want = eval_background(bg, ray.dir, 2);
      for (int ch = 0; ch < 3; ++ch)
        EXPECT_NEAR(out.color.at(x, y, ch), std::clamp(want[ch], 0.0, 1.0), 1e-12);
      EXPECT_EQ(out.t_end(y, x), 1.0);
    }
}

TEST(RenderImage, AnalyticSphereSilhouetteIoU) {
  const Vec3 center(0, 0, 0);
  const double radius = 0.5;
  AnalyticField field;
  PersonModel pm = opaque_sphere_person(center, radius, Vec3(0.8, 0.2, 0.2), field, 0.6);
  Camera cam = make_camera(128, 128, 63.5, 63.5, 128, 128, Mat3::Identity(), Vec3(0, 0, -3));
  RenderConfig cfg;
  cfg.samples_per_person = 64;
  DensityParams dp;  // sharp transition so the sphere is genuinely opaque
  dp.a.setConstant(500.0);
  dp.b.setConstant(0.002);
  RenderResult out = render_image(cam, {pm}, dp, nullptr, cfg);

  int inter = 0, uni = 0;
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      Ray ray = make_ray(cam, x, y);
      Vec3 rel = cam.pos - center;
      double proj = rel.dot(ray.dir);
      bool gt = (rel - proj * ray.dir).norm() <= radius;
      bool got = out.opacity[0](y, x) > 0.5;
      inter += gt && got;
      uni += gt || got;
    }
  ASSERT_GT(uni, 0);
  double iou = static_cast<double>(inter) / uni;
  EXPECT_GT(iou, 0.95) << "silhouette IoU " << iou;
}

TEST(RenderImage, NearerPersonOccludesFartherOne) {
  AnalyticField red, green;
  PersonModel front = opaque_sphere_person(Vec3(0, 0, 1.5), 0.3, Vec3(1, 0, 0), red, 0.4);
  PersonModel back = opaque_sphere_person(Vec3(0, 0, 3.0), 0.3, Vec3(0, 1, 0), green, 0.4);
  Camera cam = make_camera(60, 60, 23.5, 23.5, 48, 48);
  RenderConfig cfg;
  cfg.samples_per_person = 48;
  RenderResult out = render_image(cam, {front, back}, DensityParams{}, nullptr, cfg);

  int cx = 24, cy = 24;
  EXPECT_GT(out.color.at(cx, cy, 0), 0.9);          // red wins the center
  EXPECT_LT(out.color.at(cx, cy, 1), 0.05);
  EXPECT_GT(out.opacity[0](cy, cx), 0.95);
  EXPECT_LT(out.opacity[1](cy, cx), 0.05);           // back person fully occluded
  EXPECT_LT(out.t_end(cy, cx), 0.05);

  // With the front person removed, the same pixel shows the back person.
  RenderResult alone = render_image(cam, {back}, DensityParams{}, nullptr, cfg);
  EXPECT_GT(alone.color.at(cx, cy, 1), 0.9);
  EXPECT_GT(alone.opacity[0](cy, cx), 0.95);
}

TEST(RenderImage, PartitionOfUnityHoldsPerPixel) {
  AnalyticField a, bfield;
  PersonModel p0 = opaque_sphere_person(Vec3(-0.15, 0, 2.0), 0.3, Vec3(1, 0, 0), a, 0.4);
  PersonModel p1 = opaque_sphere_person(Vec3(0.15, 0, 2.6), 0.3, Vec3(0, 1, 0), bfield, 0.4);
  Camera cam = make_camera(40, 40, 15.5, 15.5, 32, 32);
  RenderConfig cfg;
  cfg.samples_per_person = 32;
  RenderResult out = render_image(cam, {p0, p1}, DensityParams{}, nullptr, cfg);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      EXPECT_NEAR(out.opacity[0](y, x) + out.opacity[1](y, x) + out.t_end(y, x), 1.0, 1e-5);
}

}  // namespace
}  // namespace strata
