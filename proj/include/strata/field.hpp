#pragma once
// Canonical per-person implicit field: a small fully-connected network mapping
// a positionally encoded canonical-space point plus a raw pose vector to a
// signed distance and an RGB radiance, the signed-distance-to-density
// conversion used by the volume renderer, a low-capacity per-direction
// background color model, and exact analytic fields used as test oracles.
//
// Every model here has two evaluation paths that compute the same numbers:
// a plain Eigen path (sampling, mesh extraction, metrics) and a tape path
// (training). Spatial gradients are built as explicit closed-form expressions
// on both paths, so gradient-based losses differentiate through them without
// any second differentiation pass.

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "strata/body.hpp"
#include "strata/common.hpp"
#include "strata/rng.hpp"
#include "strata/tape.hpp"

namespace strata {

using ad::Arr;
using ad::Tape;
using ad::Var;

//! Sharpness of the smooth-rectifier activation used by all field networks.
constexpr double kActivationBeta = 100.0;

inline double softplus_stable(double x, double beta = kActivationBeta) {
  double z = beta * x;
  return z > 0.0 ? x + std::log1p(std::exp(-z)) / beta : std::log1p(std::exp(z)) / beta;
}

inline double sigmoid_stable(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

inline bool all_finite(const MatX& m) { return m.allFinite(); }

struct FieldSample {
  double s = 0.0;  // signed distance, metres
  Vec3 c = Vec3::Zero();  // radiance, each channel in [0,1]
};

// ---------------------------------------------------------------------------
// Canonical per-person field network
// ---------------------------------------------------------------------------

//! Four hidden layers of width 64 with smooth-rectifier activations. Input is
//! the positional encoding of the canonical point (per-axis sin/cos at
//! octave-spaced frequencies) concatenated with the raw pose vector. The
//! signed-distance head adds a fixed sphere term, so a freshly initialized
//! field (zeroed head) starts as an exact sphere enclosing the body template.
struct CanonicalField {
  int freqs = 6;
  int joints = 20;
  int width = 64;
  double sphere_radius = 1.0;
  MatX W0, W1, W2, W3;  // hidden weights, rows = outputs
  MatX b0, b1, b2, b3;  // hidden biases, column vectors
  MatX Ws, bs;          // signed-distance head (1 x width), (1 x 1)
  MatX Wc, bc;          // radiance head (3 x width), (3 x 1)

  int pose_dim() const { return 3 + 3 * joints; }
  int enc_dim() const { return 3 + 6 * freqs; }
  int in_dim() const { return enc_dim() + pose_dim(); }
};

//! Visits every learnable block as (name, matrix).
template <class Fn>
void for_each_param(CanonicalField& f, Fn&& fn) {
  fn("W0", f.W0);
  fn("b0", f.b0);
  fn("W1", f.W1);
  fn("b1", f.b1);
  fn("W2", f.W2);
  fn("b2", f.b2);
  fn("W3", f.W3);
  fn("b3", f.b3);
  fn("Ws", f.Ws);
  fn("bs", f.bs);
  fn("Wc", f.Wc);
  fn("bc", f.bc);
}

inline void validate_field(const CanonicalField& f) {
  auto check = [](const char* name, const MatX& m) {
    if (!all_finite(m)) throw NumericalError(std::string("field parameter block not finite: ") + name);
  };
  for_each_param(const_cast<CanonicalField&>(f), check);
}

//! Radius of a sphere comfortably enclosing the canonical template surface.
inline double enclosing_radius(const ParamBody& body) {
  double r = 0.0;
  for (const auto& v : body.verts) r = std::max(r, v.norm());
  return 1.05 * r;
}

inline CanonicalField make_canonical_field(uint64_t seed, int joints, double sphere_radius,
                                           int width = 64, int freqs = 6) {
  CanonicalField f;
  f.freqs = freqs;
  f.joints = joints;
  f.width = width;
  f.sphere_radius = sphere_radius;
  KeyedRng rng(seed, {0x0F1E1DULL});
  auto init = [&rng](MatX& m, int rows, int cols, double sd) {
    m = MatX(rows, cols);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = sd * rng.normal();
  };
  init(f.W0, width, f.in_dim(), std::sqrt(2.0 / f.in_dim()));
  // A fresh field is pose-independent (the zero-level set is a clean sphere
  // for every pose); sensitivity to pose grows only through training.
  f.W0.rightCols(f.pose_dim()).setZero();
  init(f.W1, width, width, std::sqrt(2.0 / width));
  init(f.W2, width, width, std::sqrt(2.0 / width));
  init(f.W3, width, width, std::sqrt(2.0 / width));
  f.b0 = MatX::Zero(width, 1);
  f.b1 = MatX::Zero(width, 1);
  f.b2 = MatX::Zero(width, 1);
  f.b3 = MatX::Zero(width, 1);
  f.Ws = MatX::Zero(1, width);
  f.bs = MatX::Zero(1, 1);
  init(f.Wc, 3, width, 0.1);
  f.bc = MatX::Zero(3, 1);
  return f;
}

//! Per-axis sin/cos encoding at octave-spaced frequencies, identity features
//! first: [x, sin(w_0 x), cos(w_0 x), ..., sin(w_{K-1} x), cos(w_{K-1} x)].
inline MatX positional_encoding(const MatX& X, int freqs) {
  MatX out(X.rows(), 3 + 6 * freqs);
  out.leftCols(3) = X;
  for (int k = 0; k < freqs; ++k) {
    double w = kPi * std::pow(2.0, k);
    out.middleCols(3 + 6 * k, 3) = (X.array() * w).sin();
    out.middleCols(6 + 6 * k, 3) = (X.array() * w).cos();
  }
  return out;
}

//! Plain forward pass over a batch of canonical points; any of the outputs may
//! be skipped by passing nullptr. The spatial gradient is the closed-form
//! chain through the network (not finite differences).
inline void eval_field_batch(const CanonicalField& f, const MatX& X, const VecX& pose_vec,
                             VecX* s_out, MatX* c_out, MatX* grad_out) {
  if (X.cols() != 3) throw DataError("eval_field_batch: points must be N x 3");
  if (pose_vec.size() != f.pose_dim()) throw DataError("eval_field_batch: pose vector length mismatch");
  const Eigen::Index n = X.rows();
  const double beta = kActivationBeta;
  MatX in(n, f.in_dim());
  in.leftCols(f.enc_dim()) = positional_encoding(X, f.freqs);
  in.rightCols(f.pose_dim()) = pose_vec.transpose().replicate(n, 1);

  auto affine = [](const MatX& h, const MatX& W, const MatX& b) -> MatX {
    return (h * W.transpose()).rowwise() + b.col(0).transpose();
  };
  auto act = [beta](const MatX& z) -> MatX {
    MatX out(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.size(); ++i) out(i) = softplus_stable(z(i), beta);
    return out;
  };
  MatX Z0 = affine(in, f.W0, f.b0), H0 = act(Z0);
  MatX Z1 = affine(H0, f.W1, f.b1), H1 = act(Z1);
  MatX Z2 = affine(H1, f.W2, f.b2), H2 = act(Z2);
  MatX Z3 = affine(H2, f.W3, f.b3), H3 = act(Z3);

  VecX norm = (X.array().square().rowwise().sum() + 1e-12).sqrt();
  if (s_out) {
    *s_out = (H3 * f.Ws.transpose()).col(0);
    s_out->array() += f.bs(0, 0);
    s_out->array() += norm.array() - f.sphere_radius;
  }
  if (c_out) {
    MatX zc = affine(H3, f.Wc, f.bc);
    c_out->resize(n, 3);
    for (Eigen::Index i = 0; i < zc.size(); ++i) (*c_out)(i) = sigmoid_stable(zc(i));
  }
  if (grad_out) {
    auto act_grad = [beta](const MatX& z) -> MatX {
      MatX out(z.rows(), z.cols());
      for (Eigen::Index i = 0; i < z.size(); ++i) out(i) = sigmoid_stable(beta * z(i));
      return out;
    };
    MatX U = f.Ws.replicate(n, 1);  // d s / d H3
    U = (U.array() * act_grad(Z3).array()).matrix() * f.W3;
    U = (U.array() * act_grad(Z2).array()).matrix() * f.W2;
    U = (U.array() * act_grad(Z1).array()).matrix() * f.W1;
    U = (U.array() * act_grad(Z0).array()).matrix() * f.W0;  // d s / d input, N x in_dim
    MatX g = U.leftCols(3);
    for (int k = 0; k < f.freqs; ++k) {
      double w = kPi * std::pow(2.0, k);
      MatX gs = U.middleCols(3 + 6 * k, 3), gc = U.middleCols(6 + 6 * k, 3);
      g.array() += w * (gs.array() * (X.array() * w).cos() - gc.array() * (X.array() * w).sin());
    }
    g.array() += X.array() / norm.replicate(1, 3).array();
    *grad_out = g;
  }
}

inline FieldSample eval_field(const CanonicalField& f, const Vec3& x_c, const PoseParams& pose) {
  MatX X(1, 3);
  X.row(0) = x_c.transpose();
  VecX s;
  MatX c;
  eval_field_batch(f, X, pose.flatten(), &s, &c, nullptr);
  FieldSample out;
  out.s = s[0];
  out.c = c.row(0).transpose();
  return out;
}

inline Vec3 field_spatial_gradient(const CanonicalField& f, const Vec3& x_c, const PoseParams& pose) {
  MatX X(1, 3);
  X.row(0) = x_c.transpose();
  MatX g;
  eval_field_batch(f, X, pose.flatten(), nullptr, nullptr, &g);
  return g.row(0).transpose();
}

// ---------------------------------------------------------------------------
// Tape path for the canonical field
// ---------------------------------------------------------------------------

struct FieldVars {
  Var W0, b0, W1, b1, W2, b2, W3, b3, Ws, bs, Wc, bc;
  std::vector<std::pair<std::string, Var>> named;
};

inline FieldVars field_leaves(Tape& t, const CanonicalField& f, const std::string& prefix) {
  FieldVars v;
  auto mk = [&](const char* name, const MatX& m) {
    Var var = t.leaf(m);
    v.named.emplace_back(prefix + "." + name, var);
    return var;
  };
  v.W0 = mk("W0", f.W0);
  v.b0 = mk("b0", f.b0);
  v.W1 = mk("W1", f.W1);
  v.b1 = mk("b1", f.b1);
  v.W2 = mk("W2", f.W2);
  v.b2 = mk("b2", f.b2);
  v.W3 = mk("W3", f.W3);
  v.b3 = mk("b3", f.b3);
  v.Ws = mk("Ws", f.Ws);
  v.bs = mk("bs", f.bs);
  v.Wc = mk("Wc", f.Wc);
  v.bc = mk("bc", f.bc);
  return v;
}

struct FieldTapeEval {
  Var s;     // N x 1 signed distance
  Var c;     // N x 3 radiance (invalid unless requested)
  Var grad;  // N x 3 spatial gradient (invalid unless requested)
};

//! Tape forward pass. `X` is an N x 3 node of canonical points (may itself
//! depend on pose through the inverse warp); `pose_row` is 1 x pose_dim. The
//! spatial gradient is assembled from tape operations, so losses on it
//! backpropagate into both network and pose parameters.
inline FieldTapeEval field_forward_tape(Tape& t, const FieldVars& v, const CanonicalField& cfg,
                                        Var X, Var pose_row, bool want_color, bool want_grad) {
  const int n = static_cast<int>(t.value(X).rows());
  if (t.value(X).cols() != 3) throw DataError("field_forward_tape: points must be N x 3");
  if (t.value(pose_row).rows() != 1 || t.value(pose_row).cols() != cfg.pose_dim())
    throw DataError("field_forward_tape: pose row shape mismatch");
  std::vector<Var> parts{X};
  std::vector<Var> sins(static_cast<size_t>(cfg.freqs)), coss(static_cast<size_t>(cfg.freqs));
  for (int k = 0; k < cfg.freqs; ++k) {
    double w = kPi * std::pow(2.0, k);
    Var xs = t.scale(X, w);
    sins[static_cast<size_t>(k)] = t.sin(xs);
    coss[static_cast<size_t>(k)] = t.cos(xs);
    parts.push_back(sins[static_cast<size_t>(k)]);
    parts.push_back(coss[static_cast<size_t>(k)]);
  }
  Var enc = t.concat_cols(parts);
  Var in = t.concat_cols({enc, t.repeat_rows(pose_row, n)});

  auto affine = [&](Var h, Var W, Var b) { return t.add(t.matmul(h, t.transpose(W)), t.transpose(b)); };
  Var Z0 = affine(in, v.W0, v.b0), H0 = t.softplus(Z0, kActivationBeta);
  Var Z1 = affine(H0, v.W1, v.b1), H1 = t.softplus(Z1, kActivationBeta);
  Var Z2 = affine(H1, v.W2, v.b2), H2 = t.softplus(Z2, kActivationBeta);
  Var Z3 = affine(H2, v.W3, v.b3), H3 = t.softplus(Z3, kActivationBeta);

  Var norm = t.sqrt(t.add_scalar(t.row_sum(t.square(X)), 1e-12));
  FieldTapeEval out;
  out.s = t.add(affine(H3, v.Ws, v.bs), t.add_scalar(norm, -cfg.sphere_radius));
  if (want_color) out.c = t.sigmoid(affine(H3, v.Wc, v.bc));
  if (want_grad) {
    auto act_grad = [&](Var Z) { return t.sigmoid(t.scale(Z, kActivationBeta)); };
    Var U = t.repeat_rows(v.Ws, n);
    U = t.matmul(t.mul(U, act_grad(Z3)), v.W3);
    U = t.matmul(t.mul(U, act_grad(Z2)), v.W2);
    U = t.matmul(t.mul(U, act_grad(Z1)), v.W1);
    U = t.matmul(t.mul(U, act_grad(Z0)), v.W0);
    Var g = t.cols(U, 0, 3);
    for (int k = 0; k < cfg.freqs; ++k) {
      double w = kPi * std::pow(2.0, k);
      Var gs = t.cols(U, 3 + 6 * k, 3);
      Var gc = t.cols(U, 6 + 6 * k, 3);
      g = t.add(g, t.scale(t.sub(t.mul(gs, coss[static_cast<size_t>(k)]),
                                 t.mul(gc, sins[static_cast<size_t>(k)])),
                           w));
    }
    out.grad = t.add(g, t.div(X, norm));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Signed distance to volume density
// ---------------------------------------------------------------------------

//! Scaled Laplace-CDF density conversion: density(s) = a * Psi_b(-s), where
//! Psi_b is the CDF of a zero-mean Laplace distribution with scale b. Inside
//! the surface (s < 0) density saturates toward a; outside it decays to zero
//! over a skin of thickness ~b.
struct DensityParams {
  MatX a = MatX::Constant(1, 1, 20.0);  // magnitude, 1/metres
  MatX b = MatX::Constant(1, 1, 0.05);  // Laplace scale, metres

  double mag() const { return a(0, 0); }
  double scale() const { return b(0, 0); }
};

template <class Fn>
void for_each_param(DensityParams& d, Fn&& fn) {
  fn("a", d.a);
  fn("b", d.b);
}

constexpr double kDensityScaleFloor = 1e-4;

inline double sdf_to_density(double s, const DensityParams& dp) {
  double b = std::max(dp.scale(), kDensityScaleFloor);
  double t = -s;
  double psi = t <= 0.0 ? 0.5 * std::exp(t / b) : 1.0 - 0.5 * std::exp(-t / b);
  return dp.mag() * psi;
}

inline VecX sdf_to_density(const VecX& s, const DensityParams& dp) {
  VecX out(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) out[i] = sdf_to_density(s[i], dp);
  return out;
}

//! Tape version. The piecewise CDF is expressed as one smooth formula with the
//! branch sign frozen from the current values, so both branches and their
//! derivatives with respect to s, a and b are exact wherever s != 0.
inline Var sdf_to_density_tape(Tape& t, Var s, Var a, Var b) {
  const Arr& sv = t.value(s);
  Arr sign(sv.rows(), sv.cols());
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    double ti = -sv(i);
    sign(i) = ti > 0.0 ? 1.0 : (ti < 0.0 ? -1.0 : 0.0);
  }
  Var sg = t.constant(sign);
  Var tt = t.neg(s);
  Var abs_t = t.mul(tt, sg);
  Var bc = t.max_scalar(b, kDensityScaleFloor);
  Var decay = t.exp(t.neg(t.div(abs_t, bc)));
  Var psi = t.add_scalar(t.scale(t.mul(sg, t.sub(t.constant_scalar(1.0), decay)), 0.5), 0.5);
  return t.mul(a, psi);
}

// ---------------------------------------------------------------------------
// Background color model
// ---------------------------------------------------------------------------

//! Low-capacity per-direction color: one hidden layer over the positional
//! encoding of the (unit) view direction, plus a learned per-frame color bias
//! applied before the squashing nonlinearity.
struct BackgroundField {
  int freqs = 4;
  int width = 32;
  MatX W1, b1;        // width x enc, width x 1
  MatX W2, b2;        // 3 x width, 3 x 1
  MatX frame_bias;    // frames x 3

  int enc_dim() const { return 3 + 6 * freqs; }
  int frames() const { return static_cast<int>(frame_bias.rows()); }
};

template <class Fn>
void for_each_param(BackgroundField& f, Fn&& fn) {
  fn("W1", f.W1);
  fn("b1", f.b1);
  fn("W2", f.W2);
  fn("b2", f.b2);
  fn("frame_bias", f.frame_bias);
}

inline BackgroundField make_background_field(uint64_t seed, int frames, int width = 32,
                                             int freqs = 4) {
  if (frames <= 0) throw ConfigError("make_background_field: frame count must be positive");
  BackgroundField f;
  f.freqs = freqs;
  f.width = width;
  KeyedRng rng(seed, {0xBA6ULL});
  auto init = [&rng](MatX& m, int rows, int cols, double sd) {
    m = MatX(rows, cols);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = sd * rng.normal();
  };
  init(f.W1, width, f.enc_dim(), std::sqrt(2.0 / f.enc_dim()));
  f.b1 = MatX::Zero(width, 1);
  init(f.W2, 3, width, 0.1);
  f.b2 = MatX::Zero(3, 1);
  f.frame_bias = MatX::Zero(frames, 3);
  return f;
}

inline MatX eval_background_batch(const BackgroundField& f, const MatX& dirs, int frame) {
  if (dirs.cols() != 3) throw DataError("eval_background_batch: directions must be N x 3");
  if (frame < 0 || frame >= f.frames()) throw DataError("eval_background_batch: frame index out of range");
  MatX enc = positional_encoding(dirs, f.freqs);
  MatX Z1 = (enc * f.W1.transpose()).rowwise() + f.b1.col(0).transpose();
  for (Eigen::Index i = 0; i < Z1.size(); ++i) Z1(i) = softplus_stable(Z1(i), kActivationBeta);
  MatX Z2 = (Z1 * f.W2.transpose()).rowwise() + f.b2.col(0).transpose();
  Z2.rowwise() += f.frame_bias.row(frame);
  for (Eigen::Index i = 0; i < Z2.size(); ++i) Z2(i) = sigmoid_stable(Z2(i));
  return Z2;
}

inline Vec3 eval_background(const BackgroundField& f, const Vec3& dir, int frame) {
  MatX d(1, 3);
  d.row(0) = dir.transpose();
  return eval_background_batch(f, d, frame).row(0).transpose();
}

struct BgVars {
  Var W1, b1, W2, b2, frame_bias;
  std::vector<std::pair<std::string, Var>> named;
};

inline BgVars background_leaves(Tape& t, const BackgroundField& f, const std::string& prefix) {
  BgVars v;
  auto mk = [&](const char* name, const MatX& m) {
    Var var = t.leaf(m);
    v.named.emplace_back(prefix + "." + name, var);
    return var;
  };
  v.W1 = mk("W1", f.W1);
  v.b1 = mk("b1", f.b1);
  v.W2 = mk("W2", f.W2);
  v.b2 = mk("b2", f.b2);
  v.frame_bias = mk("frame_bias", f.frame_bias);
  return v;
}

inline Var background_tape(Tape& t, const BgVars& v, const BackgroundField& cfg, Var dirs,
                           int frame) {
  const int n = static_cast<int>(t.value(dirs).rows());
  if (t.value(dirs).cols() != 3) throw DataError("background_tape: directions must be N x 3");
  if (frame < 0 || frame >= static_cast<int>(t.value(v.frame_bias).rows()))
    throw DataError("background_tape: frame index out of range");
  std::vector<Var> parts{dirs};
  for (int k = 0; k < cfg.freqs; ++k) {
    double w = kPi * std::pow(2.0, k);
    Var xs = t.scale(dirs, w);
    parts.push_back(t.sin(xs));
    parts.push_back(t.cos(xs));
  }
  Var enc = t.concat_cols(parts);
  Var h = t.softplus(t.add(t.matmul(enc, t.transpose(v.W1)), t.transpose(v.b1)), kActivationBeta);
  Var z = t.add(t.matmul(h, t.transpose(v.W2)), t.transpose(v.b2));
  z = t.add(z, t.gather_rows(v.frame_bias, {frame}));
  (void)n;
  return t.sigmoid(z);
}

// ---------------------------------------------------------------------------
// Analytic oracle fields
// ---------------------------------------------------------------------------

//! Exact union-of-primitives signed distance with per-primitive colors; the
//! color and gradient come from whichever primitive is closest. Gradients are
//! exact unit vectors away from the medial axis.
struct AnalyticField {
  struct Sphere {
    Vec3 center = Vec3::Zero();
    double radius = 1.0;
    Vec3 color = Vec3::Constant(0.5);
  };
  struct Capsule {
    Vec3 p0 = Vec3::Zero(), p1 = Vec3::UnitY();
    double radius = 0.1;
    Vec3 color = Vec3::Constant(0.5);
  };
  std::vector<Sphere> spheres;
  std::vector<Capsule> capsules;

  FieldSample eval(const Vec3& x) const {
    FieldSample out;
    out.s = kInf;
    for (const auto& sp : spheres) {
      double d = (x - sp.center).norm() - sp.radius;
      if (d < out.s) {
        out.s = d;
        out.c = sp.color;
      }
    }
    for (const auto& cp : capsules) {
      double d = point_segment_distance(x, cp.p0, cp.p1) - cp.radius;
      if (d < out.s) {
        out.s = d;
        out.c = cp.color;
      }
    }
    if (!std::isfinite(out.s)) throw DataError("AnalyticField::eval: field has no primitives");
    return out;
  }

  Vec3 gradient(const Vec3& x) const {
    double best = kInf;
    Vec3 g = Vec3::UnitZ();
    for (const auto& sp : spheres) {
      double d = (x - sp.center).norm() - sp.radius;
      if (d < best) {
        best = d;
        Vec3 v = x - sp.center;
        g = v.norm() > 1e-12 ? Vec3(v / v.norm()) : Vec3::UnitZ();
      }
    }
    for (const auto& cp : capsules) {
      double d = point_segment_distance(x, cp.p0, cp.p1) - cp.radius;
      if (d < best) {
        best = d;
        Vec3 ab = cp.p1 - cp.p0;
        double denom = ab.squaredNorm();
        double tt = denom > 0.0 ? std::clamp((x - cp.p0).dot(ab) / denom, 0.0, 1.0) : 0.0;
        Vec3 v = x - (cp.p0 + tt * ab);
        g = v.norm() > 1e-12 ? Vec3(v / v.norm()) : Vec3::UnitZ();
      }
    }
    if (!std::isfinite(best)) throw DataError("AnalyticField::gradient: field has no primitives");
    return g;
  }
};

inline AnalyticField analytic_sphere(const Vec3& center, double radius,
                                     const Vec3& color = Vec3::Constant(0.5)) {
  AnalyticField f;
  f.spheres.push_back({center, radius, color});
  return f;
}

//! Capsule field matching a body's rest-pose skeleton, one capsule per bone.
inline AnalyticField analytic_body_capsules(const ParamBody& body,
                                            const std::vector<Vec3>& bone_colors = {}) {
  AnalyticField f;
  int bone = 0;
  for (int j = 1; j < body.joints; ++j, ++bone) {
    AnalyticField::Capsule c;
    c.p0 = body.rest[body.parents[j]];
    c.p1 = body.rest[j];
    c.radius = body.radius[j];
    c.color = bone_colors.empty() ? Vec3::Constant(0.5)
                                  : bone_colors[static_cast<size_t>(bone) % bone_colors.size()];
    f.capsules.push_back(c);
  }
  return f;
}

}  // namespace strata
