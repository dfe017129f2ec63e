#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "articfeed/fitting.hpp"
#include "articfeed/geometry.hpp"
#include "articfeed/models.hpp"
#include "articfeed/pipeline.hpp"
#include "articfeed/stream.hpp"

namespace py = pybind11;
using namespace articfeed;
using geometry::Vec3;

namespace {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Faces = Eigen::Matrix<int, Eigen::Dynamic, 3, Eigen::RowMajor>;

std::vector<Vec3> to_points(const Points& p) {
  std::vector<Vec3> out;
  out.reserve(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) out.emplace_back(p.row(i).transpose());
  return out;
}

Points from_flat(const Eigen::VectorXd& flat) {
  return Eigen::Map<const Points>(flat.data(), flat.size() / 3, 3);
}

Faces from_faces(const std::vector<geometry::Face>& faces) {
  Faces out(static_cast<Eigen::Index>(faces.size()), 3);
  for (std::size_t f = 0; f < faces.size(); ++f) {
    for (int k = 0; k < 3; ++k) out(static_cast<Eigen::Index>(f), k) = faces[f][k];
  }
  return out;
}

std::vector<geometry::Face> to_faces(const Faces& faces) {
  std::vector<geometry::Face> out;
  for (Eigen::Index f = 0; f < faces.rows(); ++f) out.push_back({faces(f, 0), faces(f, 1), faces(f, 2)});
  return out;
}

py::dict sweep_to_dict(const stream::Sweep& sweep) {
  const auto& ids = sweep.header.coil_ids;
  const auto frames = static_cast<py::ssize_t>(sweep.frames.size());
  const auto coils = static_cast<py::ssize_t>(ids.size());
  py::array_t<double> t(frames);
  py::array_t<double> pos({frames, coils, py::ssize_t{3}});
  py::array_t<bool> ok({frames, coils});
  auto tv = t.mutable_unchecked<1>();
  auto pv = pos.mutable_unchecked<3>();
  auto ov = ok.mutable_unchecked<2>();
  for (py::ssize_t k = 0; k < frames; ++k) {
    const auto& f = sweep.frames[static_cast<std::size_t>(k)];
    tv(k) = f.t;
    for (py::ssize_t c = 0; c < coils; ++c) {
      const auto* s = f.find(ids[static_cast<std::size_t>(c)]);
      ov(k, c) = s != nullptr && s->ok;
      for (int a = 0; a < 3; ++a) pv(k, c, a) = s != nullptr ? s->pos[a] : 0.0;
    }
  }
  py::dict d;
  d["rate"] = sweep.header.rate;
  d["coil_ids"] = ids;
  d["t"] = t;
  d["positions"] = pos;
  d["ok"] = ok;
  return d;
}

void write_sweep_arrays(const std::filesystem::path& path, double rate, const std::vector<std::string>& ids,
                        const py::array_t<double>& t, const py::array_t<double>& positions,
                        std::optional<py::array_t<bool>> ok) {
  const auto tv = t.unchecked<1>();
  const auto pv = positions.unchecked<3>();
  if (pv.shape(0) != tv.shape(0) || pv.shape(1) != static_cast<py::ssize_t>(ids.size()) || pv.shape(2) != 3) {
    throw Error(Errc::DimensionMismatch, "positions must have shape (frames, coils, 3)");
  }
  stream::SweepHeader header{rate, ids};
  std::vector<stream::CoilFrame> frames;
  for (py::ssize_t k = 0; k < tv.shape(0); ++k) {
    stream::CoilFrame f;
    f.seq = static_cast<std::uint64_t>(k);
    f.t = tv(k);
    for (std::size_t c = 0; c < ids.size(); ++c) {
      const auto ci = static_cast<py::ssize_t>(c);
      const bool visible = ok ? ok->unchecked<2>()(k, ci) : true;
      f.coils.push_back({ids[c], Vec3(pv(k, ci, 0), pv(k, ci, 1), pv(k, ci, 2)), std::nullopt, visible});
    }
    frames.push_back(std::move(f));
  }
  stream::write_sweep(path, header, frames);
}

// Stateful tongue tracker for scripting.
class Tracker {
 public:
  Tracker(models::MultilinearModel model, std::map<std::string, int> coils, double alpha, double beta, int freeze_after)
      : model_(std::move(model)) {
    model_.validate();
    for (const auto& [id, v] : coils) cfg_.correspondences.push_back({id, v});
    cfg_.alpha_prior = alpha;
    cfg_.beta_temporal = beta;
    cfg_.freeze_after = freeze_after;
    cfg_.validate();
    models::validate_correspondences(cfg_.correspondences, model_.vertex_count());
    state_ = fitting::TrackerState::neutral(model_);
  }

  py::dict step(const std::map<std::string, std::optional<Vec3>>& coils) {
    fitting::CoilPositions positions(coils.begin(), coils.end());
    const auto fit = fitting::track_frame(state_, model_, cfg_, positions);
    state_ = fit.state;
    py::dict d;
    d["x"] = state_.x;
    d["y"] = state_.y;
    d["vertices"] = from_flat(fit.vertices);
    d["residual_rms"] = fit.diagnostics.residual_rms;
    d["residual_max"] = fit.diagnostics.residual_max;
    d["iterations"] = fit.diagnostics.iterations;
    d["frozen"] = state_.frozen;
    return d;
  }

  const fitting::TrackerState& state() const { return state_; }

 private:
  models::MultilinearModel model_;
  fitting::TrackerConfig cfg_;
  fitting::TrackerState state_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "articfeed core bindings";
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

  // geometry
  m.def(
      "rigid_align",
      [](const Points& source, const Points& target) {
        const auto t = geometry::rigid_align(to_points(source), to_points(target));
        return py::make_tuple(t.rotation_matrix(), t.translation());
      },
      py::arg("source"), py::arg("target"), "Least-squares rotation R and translation t with R @ s + t ~ target.");
  m.def(
      "bite_plane_frame",
      [](const Vec3& left, const Vec3& right, const Vec3& front, const Vec3& origin) {
        const auto t = geometry::bite_plane_frame(left, right, front, origin);
        return py::make_tuple(t.rotation_matrix(), t.translation());
      },
      py::arg("left"), py::arg("right"), py::arg("front"), py::arg("origin"));
  m.def(
      "closest_point",
      [](const Vec3& q, const Points& vertices, const Faces& faces) {
        geometry::Mesh mesh{to_points(vertices), to_faces(faces)};
        const auto hit = geometry::closest_point_on_mesh(q, mesh);
        return py::make_tuple(hit.point, hit.face_index, hit.distance);
      },
      py::arg("q"), py::arg("vertices"), py::arg("faces"));
  m.def(
      "read_obj",
      [](const std::filesystem::path& path) {
        const auto mesh = geometry::read_obj(path);
        Points v(static_cast<Eigen::Index>(mesh.vertices.size()), 3);
        for (std::size_t i = 0; i < mesh.vertices.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = mesh.vertices[i];
        return py::make_tuple(v, from_faces(mesh.faces));
      },
      py::arg("path"));
  m.def(
      "write_obj",
      [](const std::filesystem::path& path, const Points& vertices, const Faces& faces) {
        geometry::write_obj(path, {to_points(vertices), to_faces(faces)});
      },
      py::arg("path"), py::arg("vertices"), py::arg("faces"));

  // models
  py::class_<models::MultilinearModel>(m, "MultilinearModel")
      .def_readonly("n", &models::MultilinearModel::n)
      .def_readonly("m", &models::MultilinearModel::m)
      .def_readonly("neutral_x", &models::MultilinearModel::neutral_x)
      .def_readonly("neutral_y", &models::MultilinearModel::neutral_y)
      .def_readonly("sigmas_x", &models::MultilinearModel::sigmas_x)
      .def_readonly("sigmas_y", &models::MultilinearModel::sigmas_y)
      .def_property_readonly("vertex_count", &models::MultilinearModel::vertex_count)
      .def_property_readonly("faces", [](const models::MultilinearModel& mm) { return from_faces(mm.faces); })
      .def(
          "reconstruct",
          [](const models::MultilinearModel& mm, const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
            return from_flat(models::reconstruct_multilinear_flat(mm, x, y));
          },
          py::arg("x"), py::arg("y"))
      .def("save", [](const models::MultilinearModel& mm, const std::filesystem::path& p) { models::save_model(p, mm); });
  py::class_<models::PcaModel>(m, "PcaModel")
      .def_property_readonly("dims", &models::PcaModel::dims)
      .def_readonly("sigmas", &models::PcaModel::sigmas)
      .def_property_readonly("vertex_count", &models::PcaModel::vertex_count)
      .def_property_readonly("faces", [](const models::PcaModel& pm) { return from_faces(pm.faces); })
      .def(
          "reconstruct",
          [](const models::PcaModel& pm, const Eigen::VectorXd& x) { return from_flat(models::reconstruct_pca_flat(pm, x)); },
          py::arg("x"))
      .def("save", [](const models::PcaModel& pm, const std::filesystem::path& p) { models::save_model(p, pm); });
  m.def("generate_synthetic_model", &models::generate_synthetic_model, py::arg("seed"), py::arg("n"), py::arg("m"),
        py::arg("grid"));
  m.def("generate_synthetic_palate", &models::generate_synthetic_palate, py::arg("seed"), py::arg("n"), py::arg("grid"));
  m.def("synthetic_correspondences", [](int grid) {
    std::map<std::string, int> out;
    for (const auto& c : models::synthetic_correspondences(grid)) out[c.coil_id] = c.vertex_index;
    return out;
  });
  m.def(
      "load_model", [](const std::filesystem::path& p) -> py::object {
        return std::visit([](auto&& model) { return py::cast(std::move(model)); }, models::load_model(p));
      },
      py::arg("path"));

  // fitting
  m.def(
      "fit_palate",
      [](const models::PcaModel& pm, const Points& trace, double prior, int iterations) {
        const auto fit = fitting::fit_palate(pm, to_points(trace), prior, iterations);
        py::dict d;
        d["weights"] = fit.x;
        d["mean_residual"] = fit.mean_residual;
        d["residual_history"] = fit.residual_history;
        d["outer_iterations"] = fit.outer_iterations;
        return d;
      },
      py::arg("model"), py::arg("trace"), py::arg("prior_weight") = 1e-4, py::arg("outer_iterations") = 10);
  py::class_<Tracker>(m, "Tracker")
      .def(py::init<models::MultilinearModel, std::map<std::string, int>, double, double, int>(), py::arg("model"),
           py::arg("coils"), py::arg("alpha_prior") = 0.1, py::arg("beta_temporal") = 1.0, py::arg("freeze_after") = 200)
      .def("step", &Tracker::step, py::arg("coils"), "coils: {id: (x, y, z) or None}")
      .def_property_readonly("x", [](const Tracker& t) { return t.state().x; })
      .def_property_readonly("y", [](const Tracker& t) { return t.state().y; })
      .def_property_readonly("frozen", [](const Tracker& t) { return t.state().frozen; });

  // stream
  m.def("read_sweep", [](const std::filesystem::path& p) { return sweep_to_dict(stream::read_sweep(p)); },
        py::arg("path"), "Returns {rate, coil_ids, t[F], positions[F, C, 3], ok[F, C]}.");
  m.def("write_sweep", &write_sweep_arrays, py::arg("path"), py::arg("rate"), py::arg("coil_ids"), py::arg("t"),
        py::arg("positions"), py::arg("ok") = py::none());
  m.def(
      "encode_frame",
      [](const std::string& frame_json) {
        const auto frame = stream::decode_frame(frame_json);
        const std::string packet = stream::make_packet(stream::encode_frame(frame));
        return py::bytes(packet);
      },
      py::arg("frame_json"), "Validates a frame JSON object and returns the length-prefixed packet.");
  m.def(
      "decode_packet",
      [](const py::bytes& packet) {
        const std::string raw = packet;
        if (raw.size() < 4) throw Error(Errc::ProtocolError, "packet shorter than its length prefix");
        const std::uint32_t len = (std::uint32_t(std::uint8_t(raw[0])) << 24) | (std::uint32_t(std::uint8_t(raw[1])) << 16) |
                                  (std::uint32_t(std::uint8_t(raw[2])) << 8) | std::uint32_t(std::uint8_t(raw[3]));
        if (raw.size() != 4 + static_cast<std::size_t>(len)) throw Error(Errc::ProtocolError, "length prefix mismatch");
        return stream::encode_frame(stream::decode_frame(raw.substr(4)));
      },
      py::arg("packet"));

  // pipeline
  m.def(
      "validate_session", [](const std::string& text) { return pipeline::session_to_json(pipeline::session_from_json(text)); },
      py::arg("text"), "Parses, validates and re-serializes a session configuration.");
  m.attr("PROTOCOL_VERSION") = std::string(stream::kProtocolVersion);
}
