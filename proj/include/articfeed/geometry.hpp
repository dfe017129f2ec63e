#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "articfeed/error.hpp"

namespace articfeed::geometry {

using Vec3 = Eigen::Vector3d;
using Face = std::array<int, 3>;

/// Triangle mesh in millimetres. Canonical axes: +x subject-left,
/// +y anterior, +z superior (toward the palate), origin at the incisor point.
struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;

  /// Throws FormatError when a face index is out of range or repeated.
  void validate() const;
};

class RigidTransform {
 public:
  RigidTransform() = default;
  /// The quaternion is normalized on construction.
  RigidTransform(const Eigen::Quaterniond& rotation, const Vec3& translation);

  static RigidTransform identity() { return {}; }
  static RigidTransform from_matrix(const Eigen::Matrix3d& rotation, const Vec3& translation);

  const Eigen::Quaterniond& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }
  Eigen::Matrix3d rotation_matrix() const { return rotation_.toRotationMatrix(); }

  Vec3 operator()(const Vec3& p) const { return rotation_ * p + translation_; }

  /// (a * b)(p) == a(b(p))
  RigidTransform operator*(const RigidTransform& rhs) const;
  RigidTransform inverse() const;

 private:
  Eigen::Quaterniond rotation_ = Eigen::Quaterniond::Identity();
  Vec3 translation_ = Vec3::Zero();
};

struct SurfaceHit {
  Vec3 point = Vec3::Zero();
  int face_index = -1;
  double distance = 0.0;
  std::array<double, 3> barycentric{1.0, 0.0, 0.0};
};

Vec3 apply_transform(const RigidTransform& t, const Vec3& p);

/// Least-squares rigid transform T minimizing sum |T(source_i) - target_i|^2.
/// Always a proper rotation. Throws LengthMismatch, CollinearPoints.
RigidTransform rigid_align(std::span<const Vec3> source, std::span<const Vec3> target);

/// Maps measurement coordinates into the canonical bite-plane frame:
/// origin -> 0, bite plane -> z = const, +y toward `front`, +x = y cross z.
/// z points to the side of `origin` when it is off the plane; otherwise
/// z = (left - right) x (front - molar midpoint), which makes +x the subject's left.
RigidTransform bite_plane_frame(const Vec3& left_molar, const Vec3& right_molar, const Vec3& front,
                                const Vec3& origin);

/// Closest point on triangle (a, b, c) with barycentric coordinates of the result.
SurfaceHit closest_point_on_triangle(const Vec3& q, const Vec3& a, const Vec3& b, const Vec3& c);

/// Exhaustive nearest point over every face. Throws EmptyMesh.
SurfaceHit closest_point_on_mesh(const Vec3& q, const Mesh& mesh);

/// OBJ subset: `v` and `f` lines only. Polygons are fan-triangulated; `f`
/// tokens may carry `/vt/vn` suffixes, which are ignored.
Mesh read_obj(const std::filesystem::path& path);
void write_obj(const std::filesystem::path& path, const Mesh& mesh);

}  // namespace articfeed::geometry
