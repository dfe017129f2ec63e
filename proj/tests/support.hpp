#pragma once

// Shared generators and independent oracles for the test suites.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "articfeed/geometry.hpp"
#include "articfeed/models.hpp"

namespace testsupport {

using articfeed::geometry::Mesh;
using articfeed::geometry::RigidTransform;
using articfeed::geometry::Vec3;

inline Vec3 random_point(std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  return {u(rng), u(rng), u(rng)};
}

inline std::vector<Vec3> random_points(std::mt19937_64& rng, int count, double scale) {
  std::vector<Vec3> pts;
  for (int i = 0; i < count; ++i) pts.push_back(random_point(rng, scale));
  return pts;
}

inline Eigen::Quaterniond random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized();
}

inline RigidTransform random_transform(std::mt19937_64& rng, double translation_scale = 50.0) {
  return {random_rotation(rng), random_point(rng, translation_scale)};
}

inline double rms_residual(const RigidTransform& t, const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  double sum = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) sum += (t(src[i]) - dst[i]).squaredNorm();
  return std::sqrt(sum / static_cast<double>(src.size()));
}

// Closest point on a segment by clamped projection.
inline Vec3 segment_closest(const Vec3& q, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0 ? std::clamp((q - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return a + t * ab;
}

// Plane projection + 2x2 barycentric solve; falls back to the three edges.
inline Vec3 triangle_closest_oracle(const Vec3& q, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 e0 = b - a;
  const Vec3 e1 = c - a;
  Eigen::Matrix2d gram;
  gram << e0.dot(e0), e0.dot(e1), e0.dot(e1), e1.dot(e1);
  const Eigen::Vector2d rhs(e0.dot(q - a), e1.dot(q - a));
  const Eigen::Vector2d st = gram.ldlt().solve(rhs);
  if (st[0] >= 0 && st[1] >= 0 && st[0] + st[1] <= 1) return a + st[0] * e0 + st[1] * e1;
  Vec3 best = segment_closest(q, a, b);
  for (const Vec3& cand : {segment_closest(q, b, c), segment_closest(q, c, a)}) {
    if ((cand - q).norm() < (best - q).norm()) best = cand;
  }
  return best;
}

struct OracleHit {
  int face = -1;
  double distance = std::numeric_limits<double>::infinity();
};

inline OracleHit mesh_closest_oracle(const Vec3& q, const Mesh& mesh) {
  OracleHit best;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& face = mesh.faces[f];
    const Vec3 p = triangle_closest_oracle(q, mesh.vertices[face[0]], mesh.vertices[face[1]], mesh.vertices[face[2]]);
    const double d = (p - q).norm();
    if (d < best.distance) best = {static_cast<int>(f), d};
  }
  return best;
}

inline double oracle_distance_to_face(const Vec3& q, const Mesh& mesh, int f) {
  const auto& face = mesh.faces[static_cast<std::size_t>(f)];
  return (triangle_closest_oracle(q, mesh.vertices[face[0]], mesh.vertices[face[1]], mesh.vertices[face[2]]) - q).norm();
}

// Per-vertex summation, no matrix products.
inline std::vector<Vec3> pca_oracle(const articfeed::models::PcaModel& model, const Eigen::VectorXd& x) {
  std::vector<Vec3> out;
  for (int v = 0; v < model.vertex_count(); ++v) {
    Vec3 p(model.mean[3 * v], model.mean[3 * v + 1], model.mean[3 * v + 2]);
    for (int k = 0; k < x.size(); ++k) {
      for (int a = 0; a < 3; ++a) p[a] += model.basis(3 * v + a, k) * x[k];
    }
    out.push_back(p);
  }
  return out;
}

inline std::vector<Vec3> multilinear_oracle(const articfeed::models::MultilinearModel& model, const Eigen::VectorXd& x,
                                            const Eigen::VectorXd& y) {
  std::vector<Vec3> out;
  for (int v = 0; v < model.vertex_count(); ++v) {
    Vec3 p(model.mean[3 * v], model.mean[3 * v + 1], model.mean[3 * v + 2]);
    for (int i = 0; i < model.n; ++i) {
      for (int j = 0; j < model.m; ++j) {
        for (int a = 0; a < 3; ++a) p[a] += x[i] * y[j] * model.core(3 * v + a, i * model.m + j);
      }
    }
    out.push_back(p);
  }
  return out;
}

inline Eigen::VectorXd random_vector(std::mt19937_64& rng, Eigen::Index size, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Eigen::VectorXd v(size);
  for (Eigen::Index i = 0; i < size; ++i) v[i] = n(rng);
  return v;
}

}  // namespace testsupport

namespace testsupport {

// Tip, blade and dorsum vertices on the centre line of a synthetic grid model.
inline std::vector<articfeed::models::Correspondence> grid_correspondences(int grid) {
  const int c = grid / 2;
  return {{"tt", (grid - 2) * grid + c}, {"tb", (grid / 2) * grid + c}, {"td", (grid / 4) * grid + c}};
}

// Smooth pose trajectory near the neutral pose.
inline Eigen::VectorXd pose_at(const articfeed::models::MultilinearModel& model, int frame, double amplitude = 0.3,
                               double rate = 100.0) {
  Eigen::VectorXd y = model.neutral_y;
  const double t = frame / rate;
  for (int j = 0; j < model.m; ++j) {
    y[j] += amplitude * std::sin(2.0 * M_PI * (0.4 + 0.13 * j) * t + 0.7 * j);
  }
  return y;
}

}  // namespace testsupport
