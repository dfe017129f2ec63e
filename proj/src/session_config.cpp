#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "articfeed/pipeline.hpp"

namespace articfeed::pipeline {

using nlohmann::json;

std::string CoilRoles::trace_coil() const {
  if (trace) return *trace;
  if (tongue.empty()) throw Error(Errc::InvalidArgument, "no trace coil: roles have no tongue coils");
  return tongue.front().coil_id;
}

void CoilRoles::validate() const {
  auto bad = [](const std::string& what) { throw Error(Errc::InvalidArgument, "roles: " + what); };
  if (reference.size() < 3) bad("at least 3 reference coils are required");
  std::set<std::string> ref(reference.begin(), reference.end());
  if (ref.size() != reference.size()) bad("reference coils repeat");
  if (ref.count("")) bad("empty reference coil id");

  std::set<std::string> tongue_ids;
  for (const auto& c : tongue) {
    if (c.coil_id.empty()) bad("empty tongue coil id");
    if (c.vertex_index < 0) bad("negative vertex index for '" + c.coil_id + "'");
    if (!tongue_ids.insert(c.coil_id).second) bad("tongue coil '" + c.coil_id + "' repeats");
    if (ref.count(c.coil_id)) bad("coil '" + c.coil_id + "' is both reference and tongue");
  }
  for (const std::string* id : {&bite_left, &bite_right, &bite_front}) {
    if (id->empty()) bad("bite coil ids must be set");
    if (ref.count(*id)) bad("coil '" + *id + "' is both reference and bite");
    if (tongue_ids.count(*id)) bad("coil '" + *id + "' is both tongue and bite");
  }
  if (bite_left == bite_right || bite_left == bite_front || bite_right == bite_front) bad("bite coils must differ");
  if (origin.empty()) bad("origin must be a coil id or \"recorded\"");
  if (!origin_is_recorded() && ref.count(origin)) bad("origin coil cannot be a reference coil");
  for (const auto* opt : {&jaw, &upper_lip, &lower_lip}) {
    if (*opt && ref.count(**opt)) bad("coil '" + **opt + "' is both reference and articulator");
  }
  if (trace && trace->empty()) bad("empty trace coil id");
  if (trace && ref.count(*trace)) bad("trace coil cannot be a reference coil");
}

CoilRoles synthetic_roles(std::vector<models::Correspondence> tongue) {
  using L = stream::SyntheticLayout;
  CoilRoles r;
  r.reference = {L::kReference[0], L::kReference[1], L::kReference[2]};
  r.tongue = std::move(tongue);
  r.bite_left = L::kBiteLeft;
  r.bite_right = L::kBiteRight;
  r.bite_front = L::kBiteFront;
  r.origin = L::kOrigin;
  return r;
}

namespace {

json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }
json vec3_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 parse_vec3(const json& j) {
  if (!j.is_array() || j.size() != 3) throw Error(Errc::FormatError, "expected [x, y, z]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

Eigen::VectorXd parse_vector(const json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

json optional_id(const std::optional<std::string>& id) { return id ? json(*id) : json(nullptr); }

std::optional<std::string> parse_optional_id(const json& doc, const char* key) {
  if (!doc.contains(key) || doc[key].is_null()) return std::nullopt;
  return doc[key].get<std::string>();
}

json roles_json(const CoilRoles& r) {
  json tongue = json::array();
  for (const auto& c : r.tongue) tongue.push_back({{"coil", c.coil_id}, {"vertex", c.vertex_index}});
  return {{"reference", r.reference},   {"tongue", tongue},           {"bite_left", r.bite_left},
          {"bite_right", r.bite_right}, {"bite_front", r.bite_front}, {"origin", r.origin},
          {"jaw", optional_id(r.jaw)},  {"upper_lip", optional_id(r.upper_lip)},
          {"lower_lip", optional_id(r.lower_lip)}, {"trace", optional_id(r.trace)}};
}

CoilRoles parse_roles(const json& doc) {
  CoilRoles r;
  r.reference = doc.at("reference").get<std::vector<std::string>>();
  for (const auto& c : doc.at("tongue")) r.tongue.push_back({c.at("coil").get<std::string>(), c.at("vertex").get<int>()});
  r.bite_left = doc.at("bite_left").get<std::string>();
  r.bite_right = doc.at("bite_right").get<std::string>();
  r.bite_front = doc.at("bite_front").get<std::string>();
  r.origin = doc.value("origin", std::string(kRecordedOrigin));
  r.jaw = parse_optional_id(doc, "jaw");
  r.upper_lip = parse_optional_id(doc, "upper_lip");
  r.lower_lip = parse_optional_id(doc, "lower_lip");
  r.trace = parse_optional_id(doc, "trace");
  return r;
}

}  // namespace

std::string roles_to_json(const CoilRoles& roles) { return roles_json(roles).dump(); }

CoilRoles roles_from_json(const std::string& text) {
  try {
    return parse_roles(json::parse(text));
  } catch (const json::exception& e) {
    throw Error(Errc::FormatError, std::string("roles: ") + e.what());
  }
}

void SessionConfig::validate() const {
  roles.validate();
  if (smoothing_window < 1 || smoothing_window % 2 == 0) {
    throw Error(Errc::InvalidArgument, "smoothing_window must be an odd integer >= 1");
  }
  if (!std::isfinite(delay) || delay < 0.0) throw Error(Errc::InvalidArgument, "delay must be >= 0 seconds");
  if (!reference_pose.empty()) {
    for (const auto& id : roles.reference) {
      if (!reference_pose.count(id)) throw Error(Errc::InvalidArgument, "reference pose lacks coil '" + id + "'");
    }
  }
  if (bite_transform && reference_pose.empty()) {
    throw Error(Errc::InvalidArgument, "bite_transform requires a reference pose");
  }
  if (transform) {
    if (!transform->allFinite() || transform->row(3) != Eigen::RowVector4d(0, 0, 0, 1)) {
      throw Error(Errc::InvalidArgument, "transform must be a finite affine 4x4 matrix");
    }
  }
  if (!(tracker.alpha_prior >= 0.0) || !(tracker.beta_temporal >= 0.0) || tracker.freeze_after < 0) {
    throw Error(Errc::InvalidArgument, "tracker settings must be non-negative");
  }
  tracker.solver.validate();
}

fitting::TrackerConfig SessionConfig::tracker_config() const {
  fitting::TrackerConfig c;
  c.correspondences = roles.tongue;
  c.alpha_prior = tracker.alpha_prior;
  c.beta_temporal = tracker.beta_temporal;
  c.freeze_after = tracker.freeze_after;
  c.solver = tracker.solver;
  return c;
}

std::string session_to_json(const SessionConfig& cfg) {
  json doc;
  doc["format"] = "articfeed-session";
  doc["version"] = 1;
  doc["roles"] = roles_json(cfg.roles);
  if (cfg.reference_pose.empty()) {
    doc["reference_pose"] = nullptr;
  } else {
    json pose = json::object();
    for (const auto& [id, p] : cfg.reference_pose) pose[id] = vec3_json(p);
    doc["reference_pose"] = pose;
  }
  if (cfg.bite_transform) {
    const auto& q = cfg.bite_transform->rotation();
    doc["bite_transform"] = {{"rotation", {q.w(), q.x(), q.y(), q.z()}},
                             {"translation", vec3_json(cfg.bite_transform->translation())}};
  } else {
    doc["bite_transform"] = nullptr;
  }
  doc["origin_point"] = cfg.origin_point ? vec3_json(*cfg.origin_point) : json(nullptr);
  doc["palate_weights"] = cfg.palate_weights ? vec_json(*cfg.palate_weights) : json(nullptr);
  doc["palate_residual"] = cfg.palate_residual ? json(*cfg.palate_residual) : json(nullptr);
  doc["palate_skipped"] = cfg.palate_skipped;
  doc["smoothing_window"] = cfg.smoothing_window;
  doc["delay"] = cfg.delay;
  if (cfg.transform) {
    json rows = json::array();
    for (int r = 0; r < 4; ++r) rows.push_back({(*cfg.transform)(r, 0), (*cfg.transform)(r, 1), (*cfg.transform)(r, 2), (*cfg.transform)(r, 3)});
    doc["transform"] = rows;
  } else {
    doc["transform"] = nullptr;
  }
  doc["tracker"] = {{"alpha_prior", cfg.tracker.alpha_prior},
                    {"beta_temporal", cfg.tracker.beta_temporal},
                    {"freeze_after", cfg.tracker.freeze_after},
                    {"max_iterations", cfg.tracker.solver.max_iterations},
                    {"gradient_tolerance", cfg.tracker.solver.gradient_tolerance},
                    {"memory", cfg.tracker.solver.memory}};
  return doc.dump(2);
}

SessionConfig session_from_json(const std::string& text) {
  SessionConfig cfg;
  try {
    const json doc = json::parse(text);
    if (doc.value("format", "") != "articfeed-session") throw Error(Errc::FormatError, "not an articfeed session file");
    if (doc.value("version", 0) != 1) throw Error(Errc::FormatError, "unsupported session version");
    cfg.roles = parse_roles(doc.at("roles"));
    if (doc.contains("reference_pose") && !doc["reference_pose"].is_null()) {
      for (const auto& [id, p] : doc["reference_pose"].items()) cfg.reference_pose[id] = parse_vec3(p);
    }
    if (doc.contains("bite_transform") && !doc["bite_transform"].is_null()) {
      const auto& bt = doc["bite_transform"];
      const auto q = bt.at("rotation").get<std::vector<double>>();
      if (q.size() != 4) throw Error(Errc::FormatError, "bite_transform.rotation must be [w, x, y, z]");
      cfg.bite_transform = RigidTransform(Eigen::Quaterniond(q[0], q[1], q[2], q[3]), parse_vec3(bt.at("translation")));
    }
    if (doc.contains("origin_point") && !doc["origin_point"].is_null()) cfg.origin_point = parse_vec3(doc["origin_point"]);
    if (doc.contains("palate_weights") && !doc["palate_weights"].is_null()) {
      cfg.palate_weights = parse_vector(doc["palate_weights"]);
    }
    if (doc.contains("palate_residual") && !doc["palate_residual"].is_null()) {
      cfg.palate_residual = doc["palate_residual"].get<double>();
    }
    cfg.palate_skipped = doc.value("palate_skipped", false);
    cfg.smoothing_window = doc.value("smoothing_window", 5);
    cfg.delay = doc.value("delay", 0.0);
    if (doc.contains("transform") && !doc["transform"].is_null()) {
      const auto rows = doc["transform"].get<std::vector<std::vector<double>>>();
      if (rows.size() != 4) throw Error(Errc::FormatError, "transform must be 4x4");
      Eigen::Matrix4d m;
      for (int r = 0; r < 4; ++r) {
        if (rows[r].size() != 4) throw Error(Errc::FormatError, "transform must be 4x4");
        for (int c = 0; c < 4; ++c) m(r, c) = rows[r][c];
      }
      cfg.transform = m;
    }
    if (doc.contains("tracker")) {
      const auto& t = doc["tracker"];
      cfg.tracker.alpha_prior = t.value("alpha_prior", cfg.tracker.alpha_prior);
      cfg.tracker.beta_temporal = t.value("beta_temporal", cfg.tracker.beta_temporal);
      cfg.tracker.freeze_after = t.value("freeze_after", cfg.tracker.freeze_after);
      cfg.tracker.solver.max_iterations = t.value("max_iterations", cfg.tracker.solver.max_iterations);
      cfg.tracker.solver.gradient_tolerance = t.value("gradient_tolerance", cfg.tracker.solver.gradient_tolerance);
      cfg.tracker.solver.memory = t.value("memory", cfg.tracker.solver.memory);
    }
  } catch (const json::exception& e) {
    throw Error(Errc::FormatError, std::string("session config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

SessionConfig load_session(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return session_from_json(ss.str());
}

void save_session(const std::filesystem::path& path, const SessionConfig& cfg) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out << session_to_json(cfg) << '\n';
  out.flush();
  if (!out) throw Error(Errc::IoError, "write failed: " + path.string());
}

const char* to_string(Phase phase) {
  switch (phase) {
    case Phase::Setup: return "setup";
    case Phase::BitePlane: return "biteplane";
    case Phase::Palate: return "palate";
    case Phase::Live: return "live";
  }
  return "setup";
}

const char* to_string(Task task) {
  switch (task) {
    case Task::Reference: return "reference";
    case Task::Origin: return "origin";
    case Task::BitePlane: return "biteplane";
    case Task::Palate: return "palate";
  }
  return "reference";
}

Task task_from_string(std::string_view name) {
  if (name == "reference") return Task::Reference;
  if (name == "origin") return Task::Origin;
  if (name == "biteplane") return Task::BitePlane;
  if (name == "palate") return Task::Palate;
  throw Error(Errc::InvalidArgument, "unknown task '" + std::string(name) + "'");
}

}  // namespace articfeed::pipeline
