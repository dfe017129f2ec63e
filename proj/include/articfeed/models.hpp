#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "articfeed/geometry.hpp"

namespace articfeed::models {

using geometry::Face;
using geometry::Mesh;
using geometry::Vec3;

/// Palate model: vertices(x) = mean + basis * x.
struct PcaModel {
  Eigen::VectorXd mean;   // 3V, xyz interleaved
  Eigen::MatrixXd basis;  // 3V x n
  Eigen::VectorXd sigmas; // n
  std::vector<Face> faces;

  int vertex_count() const { return static_cast<int>(mean.size() / 3); }
  int dims() const { return static_cast<int>(basis.cols()); }
  void validate() const;
};

/// Tongue model: vertices(x, y) = mean + sum_ij x_i y_j c_ij, with x the
/// anatomy weights and y the pose weights.
struct MultilinearModel {
  Eigen::VectorXd mean;  // 3V
  Eigen::MatrixXd core;  // 3V x (n*m); column i*m + j holds c_ij
  int n = 0;
  int m = 0;
  Eigen::VectorXd neutral_x;
  Eigen::VectorXd neutral_y;
  Eigen::VectorXd sigmas_x;
  Eigen::VectorXd sigmas_y;
  std::vector<Face> faces;

  int vertex_count() const { return static_cast<int>(mean.size() / 3); }
  Eigen::Ref<const Eigen::VectorXd> mode(int i, int j) const { return core.col(i * m + j); }
  void validate() const;
};

struct Correspondence {
  std::string coil_id;
  int vertex_index = 0;
};

/// Throws DimensionMismatch or FormatError on bad indices or repeated coil ids.
void validate_correspondences(const std::vector<Correspondence>& corr, int vertex_count);

Eigen::VectorXd reconstruct_pca_flat(const PcaModel& model, const Eigen::VectorXd& x);
Mesh reconstruct_pca(const PcaModel& model, const Eigen::VectorXd& x);

Eigen::VectorXd reconstruct_multilinear_flat(const MultilinearModel& model, const Eigen::VectorXd& x,
                                             const Eigen::VectorXd& y);
Mesh reconstruct_multilinear(const MultilinearModel& model, const Eigen::VectorXd& x,
                             const Eigen::VectorXd& y);

/// Regular grid x grid triangulation, 2 (grid-1)^2 faces.
std::vector<Face> grid_faces(int grid);

/// Deterministic synthetic tongue model on a grid x grid height field.
/// Mode fields are smooth and the weights are in unit-variance units. The
/// neutral weights are non-zero, and the core is projected so that the
/// neutral reconstruction equals the mean.
MultilinearModel generate_synthetic_model(std::uint64_t seed, int n, int m, int grid);

/// Tongue coils "tt", "tb", "td" (tip, blade, dorsum) on the centre column of
/// a synthetic grid model.
std::vector<Correspondence> synthetic_correspondences(int grid);

/// Deterministic synthetic palate model (vault-shaped mean, smooth modes).
PcaModel generate_synthetic_palate(std::uint64_t seed, int n, int grid);

using AnyModel = std::variant<PcaModel, MultilinearModel>;

void save_model(const std::filesystem::path& path, const PcaModel& model);
void save_model(const std::filesystem::path& path, const MultilinearModel& model);
AnyModel load_model(const std::filesystem::path& path);
PcaModel load_pca_model(const std::filesystem::path& path);
MultilinearModel load_multilinear_model(const std::filesystem::path& path);

std::string model_to_json(const PcaModel& model);
std::string model_to_json(const MultilinearModel& model);
AnyModel model_from_json(const std::string& text);

}  // namespace articfeed::models
