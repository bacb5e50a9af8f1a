#include <gtest/gtest.h>

#include <cmath>

#include "strata/body.hpp"
#include "strata/field.hpp"
#include "strata/rng.hpp"
#include "test_util.hpp"

using namespace strata;
using strata::testing::check_tape_gradients;

namespace {

PoseParams sample_pose(int joints, uint64_t seed) {
  KeyedRng rng(seed, {77});
  PoseParams pose(joints);
  pose.trans = 0.1 * rng.normal3();
  for (auto& r : pose.joint_rot) r = 0.2 * rng.normal3();
  return pose;
}

}  // namespace

TEST(Density, LaplaceCdfLandmarks) {
  DensityParams dp;
  dp.a = MatX::Constant(1, 1, 3.0);
  dp.b = MatX::Constant(1, 1, 0.05);
  EXPECT_DOUBLE_EQ(sdf_to_density(0.0, dp), 1.5);  // exactly a/2 at the surface
  EXPECT_NEAR(sdf_to_density(1e6 * dp.scale(), dp), 0.0, 1e-12);
  EXPECT_NEAR(sdf_to_density(-1e6 * dp.scale(), dp), 3.0, 1e-12);

  DensityParams unit;
  unit.a = MatX::Constant(1, 1, 1.0);
  unit.b = MatX::Constant(1, 1, 0.2);
  // Closed-form Laplace CDF one scale inside the surface.
  double expect = 1.0 - 0.5 * std::exp(-1.0);
  EXPECT_NEAR(sdf_to_density(-unit.scale(), unit), expect, 1e-15);
  EXPECT_NEAR(expect, 0.8161, 1e-4);
}

TEST(Density, ContinuousAtZeroAndStrictlyDecreasing) {
  DensityParams dp;
  dp.a = MatX::Constant(1, 1, 7.0);
  dp.b = MatX::Constant(1, 1, 0.03);
  EXPECT_NEAR(sdf_to_density(1e-15, dp), sdf_to_density(-1e-15, dp), 1e-12);
  KeyedRng rng(3, {1});
  for (int i = 0; i < 1000; ++i) {
    double s1 = (rng.uniform() - 0.5) * 2.0;
    double s2 = s1 + 1e-6 + rng.uniform();
    EXPECT_GT(sdf_to_density(s1, dp), sdf_to_density(s2, dp));
  }
}

TEST(Density, TapeMatchesPlainAndGradients) {
  KeyedRng rng(4, {2});
  Arr s_vals(16, 1);
  for (Eigen::Index i = 0; i < s_vals.size(); ++i) s_vals(i) = (rng.uniform() - 0.5) * 0.4;
  Arr a0 = Arr::Constant(1, 1, 12.0), b0 = Arr::Constant(1, 1, 0.05);

  Tape t;
  Var s = t.leaf(s_vals), a = t.leaf(a0), b = t.leaf(b0);
  Var sigma = sdf_to_density_tape(t, s, a, b);
  DensityParams dp;
  dp.a = MatX(a0.matrix());
  dp.b = MatX(b0.matrix());
  for (Eigen::Index i = 0; i < s_vals.size(); ++i)
    EXPECT_NEAR(t.value(sigma)(i), sdf_to_density(s_vals(i), dp), 1e-12);

  check_tape_gradients({s_vals, a0, b0}, [](Tape& tape, const std::vector<Var>& leaves) {
    Var sig = sdf_to_density_tape(tape, leaves[0], leaves[1], leaves[2]);
    return tape.sum_all(tape.square(sig));
  });
}

TEST(Field, DeterministicInitAndSphereStart) {
  ParamBody body = default_body();
  double r = enclosing_radius(body);
  EXPECT_GT(r, 0.5);
  CanonicalField f1 = make_canonical_field(11, body.joints, r);
  CanonicalField f2 = make_canonical_field(11, body.joints, r);
  EXPECT_TRUE(f1.W0 == f2.W0 && f1.W3 == f2.W3 && f1.Wc == f2.Wc);

  PoseParams rest(body.joints);
  FieldSample center = eval_field(f1, Vec3::Zero(), rest);
  EXPECT_LT(center.s, 0.0);  // template interior starts inside the field
  FieldSample far = eval_field(f1, Vec3(0, 0, 5), rest);
  EXPECT_GT(far.s, 0.0);
  EXPECT_NEAR(center.s, -r, 1e-6);  // zeroed head leaves exactly the sphere term
  EXPECT_NEAR(far.s, 5.0 - r, 1e-6);
  // A fresh field ignores pose entirely.
  PoseParams bent = sample_pose(body.joints, 5);
  FieldSample center_bent = eval_field(f1, Vec3::Zero(), bent);
  EXPECT_DOUBLE_EQ(center.s, center_bent.s);

  for (int i = 0; i < 50; ++i) {
    KeyedRng rng(20, {static_cast<uint64_t>(i)});
    FieldSample smp = eval_field(f1, rng.normal3(), rest);
    EXPECT_GE(smp.c.minCoeff(), 0.0);
    EXPECT_LE(smp.c.maxCoeff(), 1.0);
  }
}

TEST(Field, SpatialGradientMatchesFiniteDifferences) {
  ParamBody body = default_body();
  CanonicalField f = make_canonical_field(13, body.joints, enclosing_radius(body));
  // Give the network real spatial behaviour before checking the gradient.
  KeyedRng wr(14, {9});
  for (Eigen::Index i = 0; i < f.Ws.size(); ++i) f.Ws(i) = 0.3 * wr.normal();
  f.bs(0, 0) = 0.05;
  PoseParams pose = sample_pose(body.joints, 6);

  KeyedRng rng(15, {3});
  double h = 1e-5;
  for (int trial = 0; trial < 20; ++trial) {
    Vec3 x = rng.normal3() * 0.5;
    Vec3 g = field_spatial_gradient(f, x, pose);
    for (int d = 0; d < 3; ++d) {
      Vec3 xp = x, xm = x;
      xp[d] += h;
      xm[d] -= h;
      double fd = (eval_field(f, xp, pose).s - eval_field(f, xm, pose).s) / (2 * h);
      double scale = std::max({1.0, std::abs(fd), std::abs(g[d])});
      EXPECT_NEAR(g[d], fd, 1e-4 * scale) << "trial " << trial << " dim " << d;
    }
  }
}

TEST(Field, TapeMatchesPlainEvaluation) {
  ParamBody body = default_body();
  CanonicalField f = make_canonical_field(17, body.joints, enclosing_radius(body));
  KeyedRng wr(18, {9});
  for (Eigen::Index i = 0; i < f.Ws.size(); ++i) f.Ws(i) = 0.3 * wr.normal();
  PoseParams pose = sample_pose(body.joints, 7);

  KeyedRng rng(19, {4});
  MatX X(32, 3);
  for (Eigen::Index i = 0; i < X.rows(); ++i) X.row(i) = (rng.normal3() * 0.5).transpose();
  VecX s_plain;
  MatX c_plain, g_plain;
  eval_field_batch(f, X, pose.flatten(), &s_plain, &c_plain, &g_plain);

  Tape t;
  FieldVars v = field_leaves(t, f, "p0");
  Var Xv = t.constant(X);
  Var pose_row = t.constant(MatX(pose.flatten().transpose()));
  FieldTapeEval out = field_forward_tape(t, v, f, Xv, pose_row, true, true);
  for (Eigen::Index i = 0; i < s_plain.size(); ++i) {
    EXPECT_NEAR(t.value(out.s)(i, 0), s_plain[i], 1e-10);
    for (int d = 0; d < 3; ++d) {
      EXPECT_NEAR(t.value(out.c)(i, d), c_plain(i, d), 1e-10);
      EXPECT_NEAR(t.value(out.grad)(i, d), g_plain(i, d), 1e-8);
    }
  }
}

TEST(Field, ParameterGradientsThroughSdfAndSpatialGradient) {
  ParamBody body = default_body();
  CanonicalField f = make_canonical_field(23, body.joints, enclosing_radius(body), 8, 2);
  KeyedRng wr(24, {9});
  for (Eigen::Index i = 0; i < f.Ws.size(); ++i) f.Ws(i) = 0.3 * wr.normal();
  PoseParams pose = sample_pose(body.joints, 8);
  KeyedRng rng(25, {4});
  MatX X(6, 3);
  for (Eigen::Index i = 0; i < X.rows(); ++i) X.row(i) = (rng.normal3() * 0.4).transpose();
  MatX pose_row = MatX(pose.flatten().transpose());

  // Leaves: one weight block, one bias, the sdf head, and the input points
  // (standing in for warped samples that depend on pose).
  check_tape_gradients(
      {Arr(f.W1.array()), Arr(f.b2.array()), Arr(f.Ws.array()), Arr(X.array())},
      [&](Tape& tape, const std::vector<Var>& leaves) {
        CanonicalField local = f;
        FieldVars v;
        v.W0 = tape.leaf(local.W0);
        v.b0 = tape.leaf(local.b0);
        v.W1 = leaves[0];
        v.b1 = tape.leaf(local.b1);
        v.W2 = tape.leaf(local.W2);
        v.b2 = leaves[1];
        v.W3 = tape.leaf(local.W3);
        v.b3 = tape.leaf(local.b3);
        v.Ws = leaves[2];
        v.bs = tape.leaf(local.bs);
        v.Wc = tape.leaf(local.Wc);
        v.bc = tape.leaf(local.bc);
        Var pr = tape.constant(pose_row);
        FieldTapeEval out = field_forward_tape(tape, v, local, leaves[3], pr, true, true);
        // Touch every output head: sdf, color, and an eikonal-style penalty on
        // the spatial gradient (the hardest differentiation path).
        Var norm2 = tape.row_sum(tape.square(out.grad));
        Var eik = tape.square(tape.add_scalar(tape.sqrt(tape.add_scalar(norm2, 1e-12)), -1.0));
        Var loss = tape.add(tape.add(tape.mean_all(tape.square(out.s)), tape.mean_all(out.c)),
                            tape.mean_all(eik));
        return loss;
      },
      1e-6, 2e-4);
}

TEST(Field, AnalyticSphereOracle) {
  AnalyticField f = analytic_sphere(Vec3::Zero(), 1.0, Vec3(1, 0, 0));
  EXPECT_DOUBLE_EQ(f.eval(Vec3(2, 0, 0)).s, 1.0);
  EXPECT_DOUBLE_EQ(f.eval(Vec3::Zero()).s, -1.0);
  EXPECT_EQ(f.eval(Vec3(2, 0, 0)).c, Vec3(1, 0, 0));

  KeyedRng rng(31, {5});
  for (int i = 0; i < 1000; ++i) {
    Vec3 x = rng.normal3();
    if (x.norm() < 1e-3) continue;
    Vec3 g = f.gradient(x);
    EXPECT_LT((g - x / x.norm()).norm(), 1e-6);
    EXPECT_NEAR(g.norm(), 1.0, 1e-6);  // eikonal residual of the exact field
  }
}

TEST(Field, AnalyticUnionIsMinOfParts) {
  AnalyticField a = analytic_sphere(Vec3(-0.5, 0, 0), 0.7);
  AnalyticField b = analytic_sphere(Vec3(0.8, 0.2, 0), 0.4);
  AnalyticField u;
  u.spheres = {a.spheres[0], b.spheres[0]};
  KeyedRng rng(32, {6});
  for (int i = 0; i < 1000; ++i) {
    Vec3 x = rng.normal3() * 1.5;
    EXPECT_DOUBLE_EQ(u.eval(x).s, std::min(a.eval(x).s, b.eval(x).s));
  }
}

TEST(Field, AnalyticBodyCapsulesMatchUnionSdf) {
  ParamBody body = default_body();
  AnalyticField f = analytic_body_capsules(body);
  KeyedRng rng(33, {7});
  for (int i = 0; i < 500; ++i) {
    Vec3 x = rng.normal3() * 0.6;
    EXPECT_NEAR(f.eval(x).s, capsule_union_sdf(body, x), 1e-12);
  }
}

TEST(Background, DirectionalColorAndFrameBias) {
  BackgroundField bg = make_background_field(41, 3);
  Vec3 d1 = Vec3(0, 0, 1), d2 = Vec3(1, 0, 0).normalized();
  Vec3 c1 = eval_background(bg, d1, 0);
  Vec3 c2 = eval_background(bg, d2, 0);
  EXPECT_GE(std::min(c1.minCoeff(), c2.minCoeff()), 0.0);
  EXPECT_LE(std::max(c1.maxCoeff(), c2.maxCoeff()), 1.0);
  EXPECT_GT((c1 - c2).norm(), 1e-6);  // genuinely directional

  // Frame bias shifts one frame's colors and leaves the others alone.
  Vec3 before_f1 = eval_background(bg, d1, 1);
  Vec3 before_f2 = eval_background(bg, d1, 2);
  bg.frame_bias(1, 0) = 0.8;
  EXPECT_GT((eval_background(bg, d1, 1) - before_f1).norm(), 1e-4);
  EXPECT_EQ(eval_background(bg, d1, 2), before_f2);

  EXPECT_THROW(eval_background(bg, d1, 3), DataError);
  EXPECT_THROW(eval_background(bg, d1, -1), DataError);
}

TEST(Background, TapeMatchesPlainAndGradients) {
  BackgroundField bg = make_background_field(43, 2);
  bg.frame_bias(1, 2) = 0.3;
  KeyedRng rng(44, {8});
  MatX dirs(12, 3);
  for (Eigen::Index i = 0; i < dirs.rows(); ++i) {
    Vec3 d = rng.normal3();
    dirs.row(i) = (d / d.norm()).transpose();
  }
  MatX plain = eval_background_batch(bg, dirs, 1);
  Tape t;
  BgVars v = background_leaves(t, bg, "bg");
  Var out = background_tape(t, v, bg, t.constant(dirs), 1);
  for (Eigen::Index i = 0; i < plain.size(); ++i) EXPECT_NEAR(t.value(out)(i), plain(i), 1e-12);

  check_tape_gradients(
      {Arr(bg.W2.array()), Arr(bg.frame_bias.array())},
      [&](Tape& tape, const std::vector<Var>& leaves) {
        BgVars vars;
        vars.W1 = tape.leaf(bg.W1);
        vars.b1 = tape.leaf(bg.b1);
        vars.W2 = leaves[0];
        vars.b2 = tape.leaf(bg.b2);
        vars.frame_bias = leaves[1];
        Var c = background_tape(tape, vars, bg, tape.constant(dirs), 1);
        return tape.mean_all(tape.square(c));
      },
      1e-6, 2e-5);
}

TEST(Field, ValidationRejectsNonFinite) {
  ParamBody body = default_body();
  CanonicalField f = make_canonical_field(51, body.joints, 1.0);
  validate_field(f);
  f.W2(3, 3) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(validate_field(f), NumericalError);
}
