#include "articfeed/models.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

namespace articfeed::models {

using nlohmann::json;

namespace {

void check_faces(const std::vector<Face>& faces, int vertex_count) {
  Mesh probe;
  probe.vertices.resize(static_cast<std::size_t>(vertex_count));
  probe.faces = faces;
  probe.validate();
}

Mesh to_mesh(const Eigen::VectorXd& flat, const std::vector<Face>& faces) {
  Mesh mesh;
  const auto count = flat.size() / 3;
  mesh.vertices.reserve(static_cast<std::size_t>(count));
  for (Eigen::Index v = 0; v < count; ++v) {
    mesh.vertices.emplace_back(flat[3 * v], flat[3 * v + 1], flat[3 * v + 2]);
  }
  mesh.faces = faces;
  return mesh;
}

void require_positive(const Eigen::VectorXd& values, const char* what) {
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (!(values[i] > 0.0) || !std::isfinite(values[i])) {
      throw Error(Errc::FormatError, std::string(what) + " must be positive and finite");
    }
  }
}

}  // namespace

void PcaModel::validate() const {
  if (mean.size() % 3 != 0) {
    throw Error(Errc::FormatError, "mean length is not a multiple of 3");
  }
  if (basis.rows() != mean.size()) {
    throw Error(Errc::FormatError, "basis row count differs from mean length");
  }
  if (sigmas.size() != basis.cols()) {
    throw Error(Errc::FormatError, "sigma count differs from basis column count");
  }
  require_positive(sigmas, "sigmas");
  check_faces(faces, vertex_count());
}

void MultilinearModel::validate() const {
  if (mean.size() % 3 != 0) {
    throw Error(Errc::FormatError, "mean length is not a multiple of 3");
  }
  if (n < 1 || m < 1) {
    throw Error(Errc::FormatError, "multilinear model needs n >= 1 and m >= 1");
  }
  if (core.rows() != mean.size() || core.cols() != static_cast<Eigen::Index>(n) * m) {
    throw Error(Errc::FormatError, "core dimensions inconsistent with (n, m, 3V)");
  }
  if (neutral_x.size() != n || sigmas_x.size() != n || neutral_y.size() != m || sigmas_y.size() != m) {
    throw Error(Errc::FormatError, "weight vector dimensions inconsistent with (n, m)");
  }
  if (!neutral_x.allFinite() || !neutral_y.allFinite()) {
    throw Error(Errc::FormatError, "neutral weights must be finite");
  }
  require_positive(sigmas_x, "sigmas_x");
  require_positive(sigmas_y, "sigmas_y");
  check_faces(faces, vertex_count());
}

void validate_correspondences(const std::vector<Correspondence>& corr, int vertex_count) {
  std::set<std::string> seen;
  for (const auto& c : corr) {
    if (c.vertex_index < 0 || c.vertex_index >= vertex_count) {
      throw Error(Errc::DimensionMismatch, "coil '" + c.coil_id + "' maps to vertex " +
                                               std::to_string(c.vertex_index) + " of " +
                                               std::to_string(vertex_count));
    }
    if (!seen.insert(c.coil_id).second) {
      throw Error(Errc::InvalidArgument, "coil '" + c.coil_id + "' has two correspondences");
    }
  }
}

Eigen::VectorXd reconstruct_pca_flat(const PcaModel& model, const Eigen::VectorXd& x) {
  if (x.size() != model.basis.cols()) {
    throw Error(Errc::DimensionMismatch, "palate weights have " + std::to_string(x.size()) +
                                             " entries, model has " + std::to_string(model.basis.cols()));
  }
  return model.mean + model.basis * x;
}

Mesh reconstruct_pca(const PcaModel& model, const Eigen::VectorXd& x) {
  return to_mesh(reconstruct_pca_flat(model, x), model.faces);
}

Eigen::VectorXd reconstruct_multilinear_flat(const MultilinearModel& model, const Eigen::VectorXd& x,
                                             const Eigen::VectorXd& y) {
  if (x.size() != model.n || y.size() != model.m) {
    throw Error(Errc::DimensionMismatch, "tongue weights (" + std::to_string(x.size()) + ", " +
                                             std::to_string(y.size()) + ") vs model (" +
                                             std::to_string(model.n) + ", " + std::to_string(model.m) + ")");
  }
  Eigen::VectorXd outer(static_cast<Eigen::Index>(model.n) * model.m);
  for (int i = 0; i < model.n; ++i) {
    outer.segment(static_cast<Eigen::Index>(i) * model.m, model.m) = x[i] * y;
  }
  return model.mean + model.core * outer;
}

Mesh reconstruct_multilinear(const MultilinearModel& model, const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  return to_mesh(reconstruct_multilinear_flat(model, x, y), model.faces);
}

std::vector<Face> grid_faces(int grid) {
  std::vector<Face> faces;
  faces.reserve(static_cast<std::size_t>(2 * (grid - 1) * (grid - 1)));
  for (int r = 0; r + 1 < grid; ++r) {
    for (int c = 0; c + 1 < grid; ++c) {
      const int a = r * grid + c;
      const int b = a + 1;
      const int d = a + grid;
      const int e = d + 1;
      faces.push_back({a, b, e});
      faces.push_back({a, e, d});
    }
  }
  return faces;
}

namespace {

// Sum of a few Gaussian bumps plus a linear ramp over the unit square,
// one independent field per coordinate, scaled to the requested RMS.
class SmoothField {
 public:
  SmoothField(std::mt19937_64& rng, int grid, double rms) : values_(3 * grid * grid) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> width(0.2, 0.5);
    for (int axis = 0; axis < 3; ++axis) {
      struct Bump {
        double cu, cv, s, amp;
      };
      Bump bumps[4];
      for (auto& b : bumps) b = {unit(rng), unit(rng), width(rng), normal(rng)};
      const double ramp_u = 0.5 * normal(rng);
      const double ramp_v = 0.5 * normal(rng);
      for (int r = 0; r < grid; ++r) {
        for (int c = 0; c < grid; ++c) {
          const double u = static_cast<double>(c) / (grid - 1);
          const double v = static_cast<double>(r) / (grid - 1);
          double value = ramp_u * (u - 0.5) + ramp_v * (v - 0.5);
          for (const auto& b : bumps) {
            const double d2 = (u - b.cu) * (u - b.cu) + (v - b.cv) * (v - b.cv);
            value += b.amp * std::exp(-d2 / (2 * b.s * b.s));
          }
          values_[3 * (r * grid + c) + axis] = value;
        }
      }
    }
    const double current = std::sqrt(values_.squaredNorm() / (grid * grid));
    if (current > 0.0) values_ *= rms / current;
  }

  const Eigen::VectorXd& values() const { return values_; }

 private:
  Eigen::VectorXd values_;
};

double signed_unit(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> magnitude(0.5, 1.5);
  std::bernoulli_distribution flip(0.5);
  const double value = magnitude(rng);
  return flip(rng) ? -value : value;
}

}  // namespace

std::vector<Correspondence> synthetic_correspondences(int grid) {
  if (grid < 4) throw Error(Errc::InvalidArgument, "grid must be at least 4");
  const int c = grid / 2;
  return {{"tt", (grid - 2) * grid + c}, {"tb", (grid / 2) * grid + c}, {"td", (grid / 4) * grid + c}};
}

MultilinearModel generate_synthetic_model(std::uint64_t seed, int n, int m, int grid) {
  if (n < 1 || m < 1 || grid < 2) {
    throw Error(Errc::InvalidArgument, "synthetic model needs n, m >= 1 and grid >= 2");
  }
  std::mt19937_64 rng(seed);
  MultilinearModel model;
  model.n = n;
  model.m = m;
  const int vertices = grid * grid;

  // Tongue dorsum behind and below the incisor origin.
  model.mean.resize(3 * vertices);
  for (int r = 0; r < grid; ++r) {
    for (int c = 0; c < grid; ++c) {
      const double u = static_cast<double>(c) / (grid - 1);
      const double v = static_cast<double>(r) / (grid - 1);
      const int k = r * grid + c;
      model.mean[3 * k] = -22.0 + 44.0 * u;
      model.mean[3 * k + 1] = -60.0 + 55.0 * v;
      model.mean[3 * k + 2] =
          -28.0 + 16.0 * std::sin(std::numbers::pi * u) * std::sin(std::numbers::pi * (0.1 + 0.8 * v));
    }
  }

  model.core.resize(3 * vertices, static_cast<Eigen::Index>(n) * m);
  for (int col = 0; col < n * m; ++col) {
    model.core.col(col) = SmoothField(rng, grid, 2.0).values();
  }

  model.neutral_x.resize(n);
  model.neutral_y.resize(m);
  for (int i = 0; i < n; ++i) model.neutral_x[i] = signed_unit(rng);
  for (int j = 0; j < m; ++j) model.neutral_y[j] = signed_unit(rng);

  // Remove the neutral contraction so that vertices(neutral) == mean.
  Eigen::VectorXd contraction = Eigen::VectorXd::Zero(3 * vertices);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      contraction += model.neutral_x[i] * model.neutral_y[j] * model.mode(i, j);
    }
  }
  const double norm2 = model.neutral_x.squaredNorm() * model.neutral_y.squaredNorm();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      model.core.col(i * m + j) -= (model.neutral_x[i] * model.neutral_y[j] / norm2) * contraction;
    }
  }

  model.sigmas_x = Eigen::VectorXd::Ones(n);
  model.sigmas_y = Eigen::VectorXd::Ones(m);
  model.faces = grid_faces(grid);
  return model;
}

PcaModel generate_synthetic_palate(std::uint64_t seed, int n, int grid) {
  if (n < 1 || grid < 2) {
    throw Error(Errc::InvalidArgument, "synthetic palate needs n >= 1 and grid >= 2");
  }
  std::mt19937_64 rng(seed);
  PcaModel model;
  const int vertices = grid * grid;
  model.mean.resize(3 * vertices);
  for (int r = 0; r < grid; ++r) {
    for (int c = 0; c < grid; ++c) {
      const double u = static_cast<double>(c) / (grid - 1);
      const double v = static_cast<double>(r) / (grid - 1);
      const int k = r * grid + c;
      model.mean[3 * k] = -20.0 + 40.0 * u;
      model.mean[3 * k + 1] = -45.0 + 40.0 * v;
      model.mean[3 * k + 2] =
          2.0 + 12.0 * std::sin(std::numbers::pi * u) * std::sin(std::numbers::pi * (0.15 + 0.7 * v));
    }
  }
  model.basis.resize(3 * vertices, n);
  for (int k = 0; k < n; ++k) {
    model.basis.col(k) = SmoothField(rng, grid, 1.5).values();
  }
  model.sigmas = Eigen::VectorXd::Ones(n);
  model.faces = grid_faces(grid);
  return model;
}

// ---------------------------------------------------------------------------
// JSON model files

namespace {

constexpr const char* kFormat = "articfeed-model";
constexpr int kVersion = 1;

json to_array(const Eigen::VectorXd& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

json header(const char* kind, const std::vector<Face>& faces, const Eigen::VectorXd& mean) {
  json doc;
  doc["format"] = kFormat;
  doc["version"] = kVersion;
  doc["kind"] = kind;
  doc["vertices"] = mean.size() / 3;
  doc["faces"] = faces;
  doc["mean"] = to_array(mean);
  doc["units"] = "mm";
  doc["axes"] = "+x left,+y anterior,+z superior";
  return doc;
}

Eigen::VectorXd read_vector(const json& doc, const char* key, Eigen::Index expected) {
  if (!doc.contains(key) || !doc[key].is_array()) {
    throw Error(Errc::FormatError, std::string("missing array '") + key + "'");
  }
  const auto values = doc[key].get<std::vector<double>>();
  if (expected >= 0 && static_cast<Eigen::Index>(values.size()) != expected) {
    throw Error(Errc::FormatError, std::string("'") + key + "' has " + std::to_string(values.size()) +
                                       " entries, expected " + std::to_string(expected));
  }
  return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

void read_block(const json& block, Eigen::Ref<Eigen::VectorXd> out, const std::string& where) {
  if (!block.is_array() || static_cast<Eigen::Index>(block.size()) != out.size()) {
    throw Error(Errc::FormatError, where + " has wrong length (expected " + std::to_string(out.size()) + ")");
  }
  for (Eigen::Index k = 0; k < out.size(); ++k) out[k] = block[static_cast<std::size_t>(k)].get<double>();
}

int read_dim(const json& doc, const char* key) {
  if (!doc.contains(key) || !doc[key].is_number_integer() || doc[key].get<long>() < 1) {
    throw Error(Errc::FormatError, std::string("'") + key + "' must be a positive integer");
  }
  return doc[key].get<int>();
}

AnyModel parse_model(const json& doc) {
  if (!doc.is_object() || doc.value("format", "") != kFormat) {
    throw Error(Errc::FormatError, "bad magic: not an articfeed-model document");
  }
  if (doc.value("version", 0) != kVersion) {
    throw Error(Errc::FormatError, "unsupported model version");
  }
  const int vertex_count = read_dim(doc, "vertices");
  const Eigen::Index flat = 3 * static_cast<Eigen::Index>(vertex_count);
  const auto faces = doc.at("faces").get<std::vector<Face>>();
  const Eigen::VectorXd mean = read_vector(doc, "mean", flat);
  const std::string kind = doc.value("kind", "");
  const int n = read_dim(doc, "n");

  if (kind == "pca") {
    PcaModel model;
    model.mean = mean;
    model.faces = faces;
    const auto& basis = doc.at("basis");
    if (!basis.is_array() || static_cast<int>(basis.size()) != n) {
      throw Error(Errc::FormatError, "'basis' must hold n arrays");
    }
    model.basis.resize(flat, n);
    for (int k = 0; k < n; ++k) read_block(basis[k], model.basis.col(k), "basis[" + std::to_string(k) + "]");
    model.sigmas = read_vector(doc, "sigmas", n);
    model.validate();
    return model;
  }
  if (kind == "multilinear") {
    MultilinearModel model;
    model.mean = mean;
    model.faces = faces;
    model.n = n;
    model.m = read_dim(doc, "m");
    const auto& core = doc.at("core");
    if (!core.is_array() || static_cast<int>(core.size()) != n) {
      throw Error(Errc::FormatError, "'core' must hold n rows");
    }
    model.core.resize(flat, static_cast<Eigen::Index>(n) * model.m);
    for (int i = 0; i < n; ++i) {
      if (!core[i].is_array() || static_cast<int>(core[i].size()) != model.m) {
        throw Error(Errc::FormatError, "core row " + std::to_string(i) + " must hold m blocks");
      }
      for (int j = 0; j < model.m; ++j) {
        read_block(core[i][j], model.core.col(i * model.m + j),
                   "core[" + std::to_string(i) + "][" + std::to_string(j) + "]");
      }
    }
    model.neutral_x = read_vector(doc, "neutral_x", n);
    model.neutral_y = read_vector(doc, "neutral_y", model.m);
    model.sigmas_x = read_vector(doc, "sigmas_x", n);
    model.sigmas_y = read_vector(doc, "sigmas_y", model.m);
    model.validate();
    return model;
  }
  throw Error(Errc::FormatError, "unknown model kind '" + kind + "'");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out << text;
  out.flush();
  if (!out) throw Error(Errc::IoError, "write failed: " + path.string());
}

}  // namespace

std::string model_to_json(const PcaModel& model) {
  model.validate();
  json doc = header("pca", model.faces, model.mean);
  doc["n"] = model.dims();
  json basis = json::array();
  for (int k = 0; k < model.dims(); ++k) basis.push_back(to_array(model.basis.col(k)));
  doc["basis"] = std::move(basis);
  doc["sigmas"] = to_array(model.sigmas);
  return doc.dump();
}

std::string model_to_json(const MultilinearModel& model) {
  model.validate();
  json doc = header("multilinear", model.faces, model.mean);
  doc["n"] = model.n;
  doc["m"] = model.m;
  json core = json::array();
  for (int i = 0; i < model.n; ++i) {
    json row = json::array();
    for (int j = 0; j < model.m; ++j) row.push_back(to_array(model.mode(i, j)));
    core.push_back(std::move(row));
  }
  doc["core"] = std::move(core);
  doc["neutral_x"] = to_array(model.neutral_x);
  doc["neutral_y"] = to_array(model.neutral_y);
  doc["sigmas_x"] = to_array(model.sigmas_x);
  doc["sigmas_y"] = to_array(model.sigmas_y);
  return doc.dump();
}

AnyModel model_from_json(const std::string& text) {
  try {
    return parse_model(json::parse(text));
  } catch (const json::exception& e) {
    throw Error(Errc::FormatError, e.what());
  }
}

void save_model(const std::filesystem::path& path, const PcaModel& model) {
  write_text(path, model_to_json(model));
}

void save_model(const std::filesystem::path& path, const MultilinearModel& model) {
  write_text(path, model_to_json(model));
}

AnyModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return model_from_json(buffer.str());
}

PcaModel load_pca_model(const std::filesystem::path& path) {
  auto model = load_model(path);
  if (auto* pca = std::get_if<PcaModel>(&model)) return std::move(*pca);
  throw Error(Errc::FormatError, path.string() + " is not a pca model");
}

MultilinearModel load_multilinear_model(const std::filesystem::path& path) {
  auto model = load_model(path);
  if (auto* ml = std::get_if<MultilinearModel>(&model)) return std::move(*ml);
  throw Error(Errc::FormatError, path.string() + " is not a multilinear model");
}

}  // namespace articfeed::models
