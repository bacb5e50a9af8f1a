#pragma once
// Pose-differentiable kinematics on the tape: axis-angle rotations, the
// root-to-leaf joint chain, linear blend skinning of frozen weight rows, and
// the inverse blend that carries world-space ray samples into canonical space
// as a function of the pose. Mirrors the plain fk()/blend_transform() math so
// values agree with the untracked path to floating-point roundoff.

#include <vector>

#include "strata/body.hpp"
#include "strata/tape.hpp"

namespace strata {

using ad::Arr;
using ad::Tape;
using ad::Var;

//! 3x3 rotation node from a 1x3 axis-angle node, using the same small-angle
//! switch as the plain implementation (Taylor branch below 1e-12 squared
//! angle; the branch is chosen from the recorded value, as with any other
//! data-dependent control flow on a tape).
inline Var rodrigues_tape(Tape& t, Var r) {
  if (t.value(r).rows() != 1 || t.value(r).cols() != 3)
    throw DataError("rodrigues_tape: expected a 1x3 axis-angle row");
  Var x = t.cols(r, 0, 1), y = t.cols(r, 1, 1), z = t.cols(r, 2, 1);
  Var zero = t.constant_scalar(0.0);
  Var K = t.concat_rows({t.concat_cols({zero, -z, y}),
                         t.concat_cols({z, zero, -x}),
                         t.concat_cols({-y, x, zero})});
  Var th2 = t.sum_all(t.square(r));
  Var a, b;
  if (t.value(th2)(0, 0) > 1e-12) {
    Var th = t.sqrt(th2);
    a = t.sin(th) / th;
    b = (1.0 - t.cos(th)) / th2;
  } else {
    a = 1.0 + t.scale(th2, -1.0 / 6.0);
    b = 0.5 + t.scale(th2, -1.0 / 24.0);
  }
  Mat3 eye = Mat3::Identity();
  return t.constant(Arr(eye.array())) + a * K + b * t.matmul(K, K);
}

//! Per-joint world transforms as tape nodes, plus the packed (joints x 12)
//! matrix used for weight blending: each row is the column-major flattening
//! of R followed by t.
struct FkTape {
  std::vector<Var> R;  // 3x3 per joint
  std::vector<Var> t;  // 3x1 per joint
  Var rt;              // joints x 12, rows [R col-major | t]
};

inline FkTape fk_tape(Tape& t, const ParamBody& body, Var pose_row) {
  if (t.value(pose_row).rows() != 1 ||
      t.value(pose_row).cols() != 3 + 3 * body.joints)
    throw DataError("fk_tape: pose row shape mismatch");
  FkTape out;
  out.R.resize(static_cast<size_t>(body.joints));
  out.t.resize(static_cast<size_t>(body.joints));
  Var trans = t.transpose(t.cols(pose_row, 0, 3));  // 3x1
  std::vector<Var> packed(static_cast<size_t>(body.joints));
  for (int j = 0; j < body.joints; ++j) {
    Var Rl = rodrigues_tape(t, t.cols(pose_row, 3 + 3 * j, 3));
    Var rest = t.constant(Arr(body.rest[static_cast<size_t>(j)].array()));  // 3x1
    Var local_t = rest - t.matmul(Rl, rest);                                // rest - Rl*rest
    if (j == 0) {
      out.R[0] = Rl;
      out.t[0] = trans + local_t;
    } else {
      const size_t par = static_cast<size_t>(body.parents[static_cast<size_t>(j)]);
      out.R[static_cast<size_t>(j)] = t.matmul(out.R[par], Rl);
      out.t[static_cast<size_t>(j)] = out.t[par] + t.matmul(out.R[par], local_t);
    }
    packed[static_cast<size_t>(j)] =
        t.concat_cols({t.reshape(out.R[static_cast<size_t>(j)], 1, 9),
                       t.transpose(out.t[static_cast<size_t>(j)])});
  }
  out.rt = t.concat_rows(packed);
  return out;
}

//! Blended per-point rigid transforms: weight_rows (n x joints, frozen) times
//! the packed joint transforms -> n x 12 rows [R col-major | t].
inline Var blend_rigid_tape(Tape& t, const FkTape& fk, const MatX& weight_rows) {
  if (weight_rows.cols() != t.value(fk.rt).rows())
    throw DataError("blend_rigid_tape: weight/joint count mismatch");
  return t.matmul(t.constant(weight_rows), fk.rt);
}

//! Applies blended transforms to fixed canonical points: world = R * x + t.
//! `points` is n x 3 (a constant matrix; the pose dependence is in `blend`).
inline Var lbs_apply_tape(Tape& t, Var blend, const MatX& points) {
  if (points.cols() != 3 || t.value(blend).rows() != points.rows())
    throw DataError("lbs_apply_tape: point/blend shape mismatch");
  Var P = t.constant(points);
  Var xc = t.cols(P, 0, 1), yc = t.cols(P, 1, 1), zc = t.cols(P, 2, 1);
  auto col = [&](int c) { return t.cols(blend, c, 1); };
  Var wx = col(0) * xc + col(3) * yc + col(6) * zc + col(9);
  Var wy = col(1) * xc + col(4) * yc + col(7) * zc + col(10);
  Var wz = col(2) * xc + col(5) * yc + col(8) * zc + col(11);
  return t.concat_cols({wx, wy, wz});
}

namespace detail {

//! Determinant of n stacked 3x3 matrices given their columns (each argument
//! is an n x 1 node): det[a b c] per row.
inline Var det3_cols_tape(Tape& t, Var ax, Var ay, Var az, Var bx, Var by, Var bz, Var cx, Var cy,
                          Var cz) {
  (void)t;
  return ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx);
}

}  // namespace detail

//! Canonical points from world-space sample points under frozen weight rows:
//! x_c = R^-1 (x_d - t) per row, solved by Cramer's rule so the whole map
//! stays differentiable in the pose. `x_d` is n x 3 and constant (ray sample
//! positions are frozen within a step); `blend` is the matching n x 12 node.
inline Var inverse_blend_tape(Tape& t, Var blend, const MatX& x_d) {
  if (x_d.cols() != 3 || t.value(blend).rows() != x_d.rows())
    throw DataError("inverse_blend_tape: point/blend shape mismatch");
  Var Xd = t.constant(x_d);
  auto col = [&](int c) { return t.cols(blend, c, 1); };
  // Matrix columns (column-major packing): c0 = rows of R's first column, etc.
  Var m00 = col(0), m10 = col(1), m20 = col(2);
  Var m01 = col(3), m11 = col(4), m21 = col(5);
  Var m02 = col(6), m12 = col(7), m22 = col(8);
  Var dx = t.cols(Xd, 0, 1) - col(9);
  Var dy = t.cols(Xd, 1, 1) - col(10);
  Var dz = t.cols(Xd, 2, 1) - col(11);
  Var det = detail::det3_cols_tape(t, m00, m10, m20, m01, m11, m21, m02, m12, m22);
  Var x = detail::det3_cols_tape(t, dx, dy, dz, m01, m11, m21, m02, m12, m22) / det;
  Var y = detail::det3_cols_tape(t, m00, m10, m20, dx, dy, dz, m02, m12, m22) / det;
  Var z = detail::det3_cols_tape(t, m00, m10, m20, m01, m11, m21, dx, dy, dz) / det;
  return t.concat_cols({x, y, z});
}

}  // namespace strata
