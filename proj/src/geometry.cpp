#include "articfeed/geometry.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include <Eigen/SVD>

namespace articfeed {

const char* to_string(Errc code) noexcept {
  switch (code) {
    case Errc::CollinearPoints: return "CollinearPoints";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::EmptyMesh: return "EmptyMesh";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::FormatError: return "FormatError";
    case Errc::IoError: return "IoError";
    case Errc::NonFiniteObjective: return "NonFiniteObjective";
    case Errc::EmptyTrace: return "EmptyTrace";
    case Errc::DegenerateModel: return "DegenerateModel";
    case Errc::NoVisibleCoils: return "NoVisibleCoils";
    case Errc::ConnectionLost: return "ConnectionLost";
    case Errc::ProtocolError: return "ProtocolError";
    case Errc::InsufficientReference: return "InsufficientReference";
    case Errc::BiteCoilsMissing: return "BiteCoilsMissing";
    case Errc::NoBitePlane: return "NoBitePlane";
    case Errc::NoReferencePose: return "NoReferencePose";
    case Errc::OriginMissing: return "OriginMissing";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::InvalidState: return "InvalidState";
  }
  return "Unknown";
}

}  // namespace articfeed

namespace articfeed::geometry {

void Mesh::validate() const {
  const auto count = static_cast<long>(vertices.size());
  for (std::size_t f = 0; f < faces.size(); ++f) {
    const auto& face = faces[f];
    for (int idx : face) {
      if (idx < 0 || idx >= count) {
        throw Error(Errc::FormatError, "face " + std::to_string(f) + " references vertex " +
                                           std::to_string(idx) + " of " + std::to_string(count));
      }
    }
    if (face[0] == face[1] || face[1] == face[2] || face[0] == face[2]) {
      throw Error(Errc::FormatError, "face " + std::to_string(f) + " repeats a vertex index");
    }
  }
}

RigidTransform::RigidTransform(const Eigen::Quaterniond& rotation, const Vec3& translation)
    : rotation_(rotation.normalized()), translation_(translation) {}

RigidTransform RigidTransform::from_matrix(const Eigen::Matrix3d& rotation, const Vec3& translation) {
  return {Eigen::Quaterniond(rotation), translation};
}

RigidTransform RigidTransform::operator*(const RigidTransform& rhs) const {
  return {rotation_ * rhs.rotation_, rotation_ * rhs.translation_ + translation_};
}

RigidTransform RigidTransform::inverse() const {
  const Eigen::Quaterniond inv = rotation_.conjugate();
  return {inv, -(inv * translation_)};
}

Vec3 apply_transform(const RigidTransform& t, const Vec3& p) { return t(p); }

RigidTransform rigid_align(std::span<const Vec3> source, std::span<const Vec3> target) {
  if (source.size() != target.size()) {
    throw Error(Errc::LengthMismatch, "rigid_align: " + std::to_string(source.size()) + " source vs " +
                                          std::to_string(target.size()) + " target points");
  }
  if (source.size() < 3) {
    throw Error(Errc::CollinearPoints, "rigid_align needs at least 3 points");
  }
  const auto n = static_cast<Eigen::Index>(source.size());
  Vec3 src_centroid = Vec3::Zero();
  Vec3 dst_centroid = Vec3::Zero();
  for (Eigen::Index i = 0; i < n; ++i) {
    src_centroid += source[i];
    dst_centroid += target[i];
  }
  src_centroid /= static_cast<double>(n);
  dst_centroid /= static_cast<double>(n);

  Eigen::MatrixX3d src(n, 3);
  Eigen::Matrix3d covariance = Eigen::Matrix3d::Zero();
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3 s = source[i] - src_centroid;
    src.row(i) = s.transpose();
    covariance += (target[i] - dst_centroid) * s.transpose();
  }

  const Eigen::Vector3d spread = Eigen::JacobiSVD<Eigen::MatrixX3d>(src).singularValues();
  if (!(spread[0] > 0.0) || spread[1] <= 1e-10 * spread[0]) {
    throw Error(Errc::CollinearPoints, "rigid_align: source points are collinear");
  }

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(covariance, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d fix = Eigen::Matrix3d::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) {
    fix(2, 2) = -1.0;  // reflection correction
  }
  const Eigen::Matrix3d rotation = svd.matrixU() * fix * svd.matrixV().transpose();
  return RigidTransform::from_matrix(rotation, dst_centroid - rotation * src_centroid);
}

RigidTransform bite_plane_frame(const Vec3& left_molar, const Vec3& right_molar, const Vec3& front,
                                const Vec3& origin) {
  const Vec3 across = left_molar - right_molar;
  const Vec3 midpoint = 0.5 * (left_molar + right_molar);
  const Vec3 forward = front - midpoint;
  const Vec3 normal = across.cross(forward);
  const double scale = across.norm() * forward.norm();
  if (!(scale > 0.0) || normal.norm() <= 1e-12 * scale) {
    throw Error(Errc::CollinearPoints, "bite_plane_frame: bite points are collinear");
  }

  Vec3 z = normal.normalized();
  const double offset = z.dot(origin - midpoint);
  const double length_scale = std::max({1.0, across.norm(), forward.norm()});
  if (std::abs(offset) > 1e-9 * length_scale && offset < 0.0) {
    z = -z;
  }
  const Vec3 y = (forward - z.dot(forward) * z).normalized();
  const Vec3 x = y.cross(z);

  Eigen::Matrix3d rotation;
  rotation.row(0) = x.transpose();
  rotation.row(1) = y.transpose();
  rotation.row(2) = z.transpose();
  return RigidTransform::from_matrix(rotation, -(rotation * origin));
}

SurfaceHit closest_point_on_triangle(const Vec3& q, const Vec3& a, const Vec3& b, const Vec3& c) {
  // Voronoi-region walk over vertices, edges, then the interior.
  const Vec3 ab = b - a;
  const Vec3 ac = c - a;
  const Vec3 ap = q - a;
  auto hit = [&](double u, double v, double w) {
    SurfaceHit h;
    h.barycentric = {u, v, w};
    h.point = u * a + v * b + w * c;
    h.distance = (q - h.point).norm();
    return h;
  };

  const double d1 = ab.dot(ap);
  const double d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return hit(1, 0, 0);

  const Vec3 bp = q - b;
  const double d3 = ab.dot(bp);
  const double d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return hit(0, 1, 0);

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double v = d1 / (d1 - d3);
    return hit(1 - v, v, 0);
  }

  const Vec3 cp = q - c;
  const double d5 = ab.dot(cp);
  const double d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return hit(0, 0, 1);

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double w = d2 / (d2 - d6);
    return hit(1 - w, 0, w);
  }

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return hit(0, 1 - w, w);
  }

  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom;
  const double w = vc * denom;
  return hit(1 - v - w, v, w);
}

SurfaceHit closest_point_on_mesh(const Vec3& q, const Mesh& mesh) {
  if (mesh.faces.empty()) {
    throw Error(Errc::EmptyMesh, "closest_point_on_mesh: mesh has no faces");
  }
  SurfaceHit best;
  best.distance = std::numeric_limits<double>::infinity();
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& face = mesh.faces[f];
    SurfaceHit h = closest_point_on_triangle(q, mesh.vertices[face[0]], mesh.vertices[face[1]],
                                             mesh.vertices[face[2]]);
    if (h.distance < best.distance) {
      best = h;
      best.face_index = static_cast<int>(f);
    }
  }
  return best;
}

namespace {

int parse_face_index(const std::string& token, std::size_t vertex_count, std::size_t line_no) {
  const std::string head = token.substr(0, token.find('/'));
  long value = 0;
  const auto [ptr, ec] = std::from_chars(head.data(), head.data() + head.size(), value);
  if (ec != std::errc() || ptr != head.data() + head.size() || value == 0) {
    throw Error(Errc::FormatError, "line " + std::to_string(line_no) + ": bad face index '" + token + "'");
  }
  // Negative indices are relative to the end of the current vertex list.
  const long resolved = value > 0 ? value - 1 : static_cast<long>(vertex_count) + value;
  return static_cast<int>(resolved);
}

}  // namespace

Mesh read_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(Errc::IoError, "cannot open " + path.string());
  }
  Mesh mesh;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream tokens(line);
    std::string tag;
    if (!(tokens >> tag)) continue;
    if (tag == "v") {
      Vec3 p;
      if (!(tokens >> p.x() >> p.y() >> p.z())) {
        throw Error(Errc::FormatError, "line " + std::to_string(line_no) + ": bad vertex");
      }
      mesh.vertices.push_back(p);
    } else if (tag == "f") {
      std::vector<int> polygon;
      std::string token;
      while (tokens >> token) {
        polygon.push_back(parse_face_index(token, mesh.vertices.size(), line_no));
      }
      if (polygon.size() < 3) {
        throw Error(Errc::FormatError, "line " + std::to_string(line_no) + ": face with fewer than 3 vertices");
      }
      for (std::size_t k = 1; k + 1 < polygon.size(); ++k) {
        mesh.faces.push_back({polygon[0], polygon[k], polygon[k + 1]});
      }
    }
  }
  mesh.validate();
  return mesh;
}

void write_obj(const std::filesystem::path& path, const Mesh& mesh) {
  std::FILE* file = std::fopen(path.string().c_str(), "w");
  if (file == nullptr) {
    throw Error(Errc::IoError, "cannot write " + path.string());
  }
  for (const auto& v : mesh.vertices) {
    std::fprintf(file, "v %.9g %.9g %.9g\n", v.x(), v.y(), v.z());
  }
  for (const auto& f : mesh.faces) {
    std::fprintf(file, "f %d %d %d\n", f[0] + 1, f[1] + 1, f[2] + 1);
  }
  const bool failed = std::ferror(file) != 0;
  if (std::fclose(file) != 0 || failed) {
    throw Error(Errc::IoError, "write failed: " + path.string());
  }
}

}  // namespace articfeed::geometry
