#pragma once

// Shared mesh fixtures for the test suites: closed analytic shapes whose
// exact surface properties (area, volume, normals) are known in closed form.

#include <array>
#include <cmath>
#include <vector>

#include "strata/common.hpp"
#include "strata/mesh.hpp"

namespace strata::testutil {

//! Closed latitude/longitude sphere; poles are triangle fans, bands are quad
//! strips. Outward-oriented.
inline TriMesh make_uv_sphere(const Vec3& center, double radius, int n_lat = 24, int n_lon = 32) {
  TriMesh m;
  m.verts.push_back(center + Vec3(0, 0, radius));  // north pole
  for (int i = 1; i < n_lat; ++i) {
    double phi = kPi * i / n_lat;
    for (int j = 0; j < n_lon; ++j) {
      double theta = 2.0 * kPi * j / n_lon;
      m.verts.push_back(center + radius * Vec3(std::sin(phi) * std::cos(theta),
                                               std::sin(phi) * std::sin(theta), std::cos(phi)));
    }
  }
  m.verts.push_back(center + Vec3(0, 0, -radius));  // south pole
  auto ring = [&](int i, int j) { return 1 + (i - 1) * n_lon + (j % n_lon); };
  for (int j = 0; j < n_lon; ++j) m.faces.push_back({0, ring(1, j), ring(1, j + 1)});
  for (int i = 1; i + 1 < n_lat; ++i)
    for (int j = 0; j < n_lon; ++j) {
      int a = ring(i, j), b = ring(i, j + 1), c = ring(i + 1, j), d = ring(i + 1, j + 1);
      m.faces.push_back({a, c, d});
      m.faces.push_back({a, d, b});
    }
  int south = static_cast<int>(m.verts.size()) - 1;
  for (int j = 0; j < n_lon; ++j)
    m.faces.push_back({south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)});
  return m;
}

//! Closed axis-aligned box of 12 triangles, outward-oriented.
inline TriMesh make_box(const Vec3& lo, const Vec3& hi) {
  TriMesh m;
  for (int i = 0; i < 8; ++i)
    m.verts.push_back(Vec3(i & 1 ? hi.x() : lo.x(), i & 2 ? hi.y() : lo.y(),
                           i & 4 ? hi.z() : lo.z()));
  const std::array<std::array<int, 4>, 6> quads = {{
      {0, 2, 3, 1},  // z = lo (normal -z)
      {4, 5, 7, 6},  // z = hi (normal +z)
      {0, 1, 5, 4},  // y = lo (normal -y)
      {2, 6, 7, 3},  // y = hi (normal +y)
      {0, 4, 6, 2},  // x = lo (normal -x)
      {1, 3, 7, 5},  // x = hi (normal +x)
  }};
  for (const auto& q : quads) {
    m.faces.push_back({q[0], q[1], q[2]});
    m.faces.push_back({q[0], q[2], q[3]});
  }
  return m;
}

}  // namespace strata::testutil
