#include <charconv>
#include <cmath>

#include <json.hpp>

#include "articfeed/pipeline.hpp"

namespace articfeed::pipeline {

using nlohmann::json;

namespace {

// The frame message carries thousands of numbers per frame, so it is written
// directly instead of going through a json tree.
void append_number(std::string& out, double v) {
  if (!std::isfinite(v)) {
    out += "null";
    return;
  }
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, end);
}

template <typename Range>
void append_array(std::string& out, const Range& values) {
  out += '[';
  bool first = true;
  for (const double v : values) {
    if (!first) out += ',';
    first = false;
    append_number(out, v);
  }
  out += ']';
}

void append_vector(std::string& out, const Eigen::VectorXd& v) {
  append_array(out, std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

}  // namespace

std::string hello_message() { return json{{"type", "hello"}, {"version", 1}}.dump(); }

std::string mesh_message(std::string_view name, const Eigen::VectorXd& vertices,
                         const std::vector<geometry::Face>& faces) {
  std::string out = "{\"type\":\"mesh\",\"name\":" + json(std::string(name)).dump() + ",\"vertices\":";
  append_vector(out, vertices);
  out += ",\"faces\":[";
  for (std::size_t f = 0; f < faces.size(); ++f) {
    if (f) out += ',';
    out += '[' + std::to_string(faces[f][0]) + ',' + std::to_string(faces[f][1]) + ',' + std::to_string(faces[f][2]) + ']';
  }
  out += "]}";
  return out;
}

std::string frame_message(const ProcessedFrame& frame) {
  std::string out;
  out.reserve(64 + 24 * static_cast<std::size_t>(frame.vertices.size() + 4 * frame.coils.size()));
  out += "{\"type\":\"frame\",\"seq\":";
  out += std::to_string(frame.seq);
  out += ",\"t\":";
  append_number(out, frame.t);
  out += ",\"coils\":[";
  for (std::size_t c = 0; c < frame.coils.size(); ++c) {
    const auto& s = frame.coils[c];
    if (c) out += ',';
    out += "{\"id\":" + json(s.id).dump() + ",\"pos\":";
    append_array(out, std::array<double, 3>{s.pos.x(), s.pos.y(), s.pos.z()});
    out += s.ok ? ",\"ok\":true}" : ",\"ok\":false}";
  }
  out += "],\"weights\":{\"x\":";
  append_vector(out, frame.x);
  out += ",\"y\":";
  append_vector(out, frame.y);
  out += "},\"vertices\":";
  append_vector(out, frame.vertices);
  out += ",\"residual\":";
  append_number(out, frame.fit_residual);
  out += ",\"tracked\":";
  out += frame.tracked ? "true" : "false";
  out += '}';
  return out;
}

std::string state_message(const Pipeline& pipeline) {
  const SessionConfig& cfg = pipeline.config();
  const auto task = pipeline.active_task();
  return json{{"type", "state"},
              {"phase", to_string(pipeline.phase())},
              {"roles", json::parse(roles_to_json(cfg.roles))},
              {"task", task ? json(to_string(*task)) : json(nullptr)},
              {"reference", !cfg.reference_pose.empty()},
              {"bite_plane", cfg.bite_transform.has_value()},
              {"origin", cfg.origin_point.has_value()},
              {"palate", cfg.palate_weights.has_value()},
              {"palate_residual", cfg.palate_residual ? json(*cfg.palate_residual) : json(nullptr)},
              {"palate_available", pipeline.models().palate != nullptr},
              {"smoothing_window", cfg.smoothing_window},
              {"delay", cfg.delay}}
      .dump();
}

std::string error_message(std::string_view code, std::string_view message) {
  return json{{"type", "error"}, {"code", std::string(code)}, {"message", std::string(message)}}.dump();
}

ClientMessage parse_client_message(std::string_view text) {
  try {
    const json doc = json::parse(text);
    const std::string type = doc.at("type").get<std::string>();
    if (type == "set_roles") {
      const json& body = doc.contains("roles") ? doc["roles"] : doc;
      return SetRoles{roles_from_json(body.dump())};
    }
    if (type == "task") {
      TaskCommand cmd{task_from_string(doc.at("name").get<std::string>()), doc.at("action").get<std::string>()};
      if (cmd.action != "start" && cmd.action != "stop" && !(cmd.action == "skip" && cmd.task == Task::Palate)) {
        throw Error(Errc::ProtocolError, "unknown task action '" + cmd.action + "'");
      }
      return cmd;
    }
    if (type == "play") {
      Play play{doc.at("source").get<std::string>(), doc.value("path", std::string())};
      if (play.source != "device" && play.source != "file") {
        throw Error(Errc::ProtocolError, "play source must be \"device\" or \"file\"");
      }
      if (play.path.empty()) throw Error(Errc::ProtocolError, "play needs a path");
      return play;
    }
    if (type == "stop") return StopPlayback{};
    if (type == "set") {
      SetValue set{doc.at("key").get<std::string>(), doc.at("value").get<double>()};
      if (set.key != "smoothing_window" && set.key != "delay") {
        throw Error(Errc::ProtocolError, "unknown setting '" + set.key + "'");
      }
      return set;
    }
    throw Error(Errc::ProtocolError, "unknown message type '" + type + "'");
  } catch (const json::exception& e) {
    throw Error(Errc::ProtocolError, std::string("malformed client message: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == Errc::ProtocolError) throw;
    throw Error(Errc::ProtocolError, e.what());
  }
}

}  // namespace articfeed::pipeline
