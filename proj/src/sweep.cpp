#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include <json.hpp>

#include "articfeed/stream.hpp"

namespace articfeed::stream {

using nlohmann::json;

const CoilSample* CoilFrame::find(std::string_view id) const {
  for (const auto& c : coils) {
    if (c.id == id) return &c;
  }
  return nullptr;
}

CoilSample* CoilFrame::find(std::string_view id) {
  for (auto& c : coils) {
    if (c.id == id) return &c;
  }
  return nullptr;
}

void CoilFrame::validate() const {
  std::set<std::string_view> ids;
  for (const auto& c : coils) {
    if (!ids.insert(c.id).second) throw Error(Errc::FormatError, "duplicate coil id '" + c.id + "'");
    if (c.ori && std::abs(c.ori->norm() - 1.0) > 1e-6) {
      throw Error(Errc::FormatError, "orientation of coil '" + c.id + "' is not a unit quaternion");
    }
  }
}

void SweepHeader::validate() const {
  if (!(rate > 0.0) || !std::isfinite(rate)) throw Error(Errc::FormatError, "sweep rate must be positive");
  std::set<std::string_view> ids;
  for (const auto& id : coil_ids) {
    if (id.empty()) throw Error(Errc::FormatError, "empty coil id");
    if (!ids.insert(id).second) throw Error(Errc::FormatError, "duplicate coil id '" + id + "'");
  }
}

namespace {

enum class FileKind { Jsonl, Csv };

FileKind kind_of(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".jsonl") return FileKind::Jsonl;
  if (ext == ".csv") return FileKind::Csv;
  throw Error(Errc::FormatError, "unrecognized sweep extension '" + ext + "' (want .jsonl or .csv)");
}

[[noreturn]] void fail_at(std::size_t line, const std::string& what) {
  throw Error(Errc::FormatError, "line " + std::to_string(line) + ": " + what);
}

json vec_json(const Vec3& p) { return json::array({p.x(), p.y(), p.z()}); }
json quat_json(const Eigen::Quaterniond& q) { return json::array({q.w(), q.x(), q.y(), q.z()}); }

Vec3 parse_vec(const json& j) {
  if (!j.is_array() || j.size() != 3) throw Error(Errc::FormatError, "position must be [x, y, z]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

Eigen::Quaterniond parse_quat(const json& j) {
  if (!j.is_array() || j.size() != 4) throw Error(Errc::FormatError, "orientation must be [qw, qx, qy, qz]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

std::string jsonl_header(const SweepHeader& header) {
  return json{{"type", "header"}, {"rate", header.rate}, {"coils", header.coil_ids}}.dump();
}

std::string jsonl_frame(const CoilFrame& frame) {
  json pos = json::object();
  json ori = json::object();
  for (const auto& c : frame.coils) {
    if (!c.ok) continue;
    pos[c.id] = vec_json(c.pos);
    if (c.ori) ori[c.id] = quat_json(*c.ori);
  }
  json line{{"t", frame.t}, {"pos", std::move(pos)}};
  if (!ori.empty()) line["ori"] = std::move(ori);
  return line.dump();
}

std::string format_double(double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string csv_header(const SweepHeader& header) {
  std::string row = "t";
  for (const auto& id : header.coil_ids) row += "," + id + "_x," + id + "_y," + id + "_z";
  return row;
}

std::string csv_row(const SweepHeader& header, const CoilFrame& frame) {
  std::string row = format_double(frame.t);
  for (const auto& id : header.coil_ids) {
    const CoilSample* c = frame.find(id);
    if (c != nullptr && c->ok) {
      row += "," + format_double(c->pos.x()) + "," + format_double(c->pos.y()) + "," + format_double(c->pos.z());
    } else {
      row += ",,,";
    }
  }
  return row;
}

Sweep parse_jsonl(std::istream& in) {
  Sweep sweep;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json doc;
    try {
      doc = json::parse(line);
    } catch (const json::exception& e) {
      fail_at(line_no, std::string("invalid JSON: ") + e.what());
    }
    try {
      if (!have_header) {
        if (doc.value("type", "") != "header") fail_at(line_no, "first line must be the header");
        sweep.header.rate = doc.at("rate").get<double>();
        sweep.header.coil_ids = doc.at("coils").get<std::vector<std::string>>();
        sweep.header.validate();
        have_header = true;
        continue;
      }
      CoilFrame frame;
      frame.t = doc.at("t").get<double>();
      const json& pos = doc.at("pos");
      const json empty = json::object();
      const json& ori = doc.contains("ori") ? doc["ori"] : empty;
      if (!pos.is_object() || !ori.is_object()) fail_at(line_no, "'pos' and 'ori' must be objects");
      for (const auto& [id, _] : pos.items()) {
        if (std::find(sweep.header.coil_ids.begin(), sweep.header.coil_ids.end(), id) == sweep.header.coil_ids.end()) {
          fail_at(line_no, "coil '" + id + "' is not declared in the header");
        }
      }
      for (const auto& id : sweep.header.coil_ids) {
        CoilSample sample;
        sample.id = id;
        if (pos.contains(id)) {
          sample.pos = parse_vec(pos[id]);
          if (ori.contains(id)) sample.ori = parse_quat(ori[id]);
        } else {
          sample.ok = false;
        }
        frame.coils.push_back(std::move(sample));
      }
      frame.validate();
      sweep.frames.push_back(std::move(frame));
    } catch (const json::exception& e) {
      fail_at(line_no, e.what());
    } catch (const Error& e) {
      if (e.code() != Errc::FormatError || std::string_view(e.what()).find("line ") != std::string_view::npos) throw;
      fail_at(line_no, e.what());
    }
  }
  if (!have_header) throw Error(Errc::FormatError, "sweep file has no header line");
  return sweep;
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::optional<double> parse_cell(std::string cell, std::size_t line_no) {
  cell.erase(0, cell.find_first_not_of(" \t\r"));
  cell.erase(cell.find_last_not_of(" \t\r") + 1);
  if (cell.empty()) return std::nullopt;
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (ec != std::errc() || ptr != cell.data() + cell.size()) fail_at(line_no, "non-numeric field '" + cell + "'");
  return value;
}

Sweep parse_csv(std::istream& in) {
  Sweep sweep;
  std::optional<double> declared_rate;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() == '#') {
      // Optional "# rate=<hz>" comment written by write_sweep.
      const auto at = line.find("rate=");
      if (at != std::string::npos) declared_rate = parse_cell(line.substr(at + 5), line_no);
      continue;
    }
    const auto cells = split_commas(line);
    if (!have_header) {
      if (cells.empty() || cells[0] != "t" || (cells.size() - 1) % 3 != 0) {
        fail_at(line_no, "header must be t,<id>_x,<id>_y,<id>_z,...");
      }
      for (std::size_t k = 1; k < cells.size(); k += 3) {
        const std::string& cx = cells[k];
        if (cx.size() < 3 || cx.substr(cx.size() - 2) != "_x") fail_at(line_no, "bad column '" + cx + "'");
        const std::string id = cx.substr(0, cx.size() - 2);
        if (cells[k + 1] != id + "_y" || cells[k + 2] != id + "_z") {
          fail_at(line_no, "columns for coil '" + id + "' must be _x,_y,_z");
        }
        sweep.header.coil_ids.push_back(id);
      }
      have_header = true;
      continue;
    }
    if (cells.size() != 1 + 3 * sweep.header.coil_ids.size()) {
      fail_at(line_no, "expected " + std::to_string(1 + 3 * sweep.header.coil_ids.size()) + " fields, got " +
                           std::to_string(cells.size()));
    }
    CoilFrame frame;
    const auto t = parse_cell(cells[0], line_no);
    if (!t) fail_at(line_no, "missing timestamp");
    frame.t = *t;
    for (std::size_t c = 0; c < sweep.header.coil_ids.size(); ++c) {
      CoilSample sample;
      sample.id = sweep.header.coil_ids[c];
      const auto x = parse_cell(cells[1 + 3 * c], line_no);
      const auto y = parse_cell(cells[2 + 3 * c], line_no);
      const auto z = parse_cell(cells[3 + 3 * c], line_no);
      if (x && y && z) {
        sample.pos = {*x, *y, *z};
      } else {
        sample.ok = false;
      }
      frame.coils.push_back(std::move(sample));
    }
    sweep.frames.push_back(std::move(frame));
  }
  if (!have_header) throw Error(Errc::FormatError, "sweep file has no header row");
  try {
    sweep.header.validate();
  } catch (const Error& e) {
    throw Error(Errc::FormatError, std::string("header: ") + e.what());
  }

  if (declared_rate) {
    sweep.header.rate = *declared_rate;
  } else if (sweep.frames.size() >= 2) {
    // No rate in a plain CSV: use the median sample interval.
    std::vector<double> gaps;
    for (std::size_t k = 1; k < sweep.frames.size(); ++k) gaps.push_back(sweep.frames[k].t - sweep.frames[k - 1].t);
    std::nth_element(gaps.begin(), gaps.begin() + gaps.size() / 2, gaps.end());
    if (gaps[gaps.size() / 2] > 0.0) sweep.header.rate = 1.0 / gaps[gaps.size() / 2];
  }
  sweep.header.validate();
  return sweep;
}

}  // namespace

Sweep read_sweep(const std::filesystem::path& path) {
  const FileKind kind = kind_of(path);
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  Sweep sweep = kind == FileKind::Jsonl ? parse_jsonl(in) : parse_csv(in);
  std::stable_sort(sweep.frames.begin(), sweep.frames.end(),
                   [](const CoilFrame& a, const CoilFrame& b) { return a.t < b.t; });
  for (std::size_t k = 0; k < sweep.frames.size(); ++k) sweep.frames[k].seq = k;
  return sweep;
}

void write_sweep(const std::filesystem::path& path, const SweepHeader& header, const std::vector<CoilFrame>& frames) {
  SweepWriter writer(path, header);
  for (const auto& f : frames) writer.write(f);
  writer.close();
}

SweepWriter::SweepWriter(const std::filesystem::path& path, const SweepHeader& header)
    : path_(path), header_(header), format_(kind_of(path) == FileKind::Jsonl ? Format::Jsonl : Format::Csv) {
  header_.validate();
  out_.open(path, std::ios::binary | std::ios::trunc);
  if (!out_) throw Error(Errc::IoError, "cannot write " + path.string());
  if (format_ == Format::Jsonl) {
    out_ << jsonl_header(header_) << '\n';
  } else {
    out_ << "# rate=" << format_double(header_.rate) << '\n' << csv_header(header_) << '\n';
  }
  out_.flush();
  if (!out_) throw Error(Errc::IoError, "write failed: " + path.string());
}

void SweepWriter::write(const CoilFrame& frame) {
  if (!out_.is_open()) throw Error(Errc::InvalidState, "sweep writer is closed");
  out_ << (format_ == Format::Jsonl ? jsonl_frame(frame) : csv_row(header_, frame)) << '\n';
  out_.flush();
  if (!out_) throw Error(Errc::IoError, "write failed: " + path_.string());
}

void SweepWriter::close() {
  if (!out_.is_open()) return;
  out_.close();
  if (out_.fail()) throw Error(Errc::IoError, "close failed: " + path_.string());
}

// ---------------------------------------------------------------------------
// EMA-RT/1 payloads

std::string encode_frame(const CoilFrame& frame) {
  json coils = json::array();
  for (const auto& c : frame.coils) {
    coils.push_back({{"id", c.id},
                     {"pos", vec_json(c.pos)},
                     {"ori", c.ori ? quat_json(*c.ori) : json(nullptr)},
                     {"ok", c.ok}});
  }
  return json{{"type", "frame"}, {"seq", frame.seq}, {"t", frame.t}, {"coils", std::move(coils)}}.dump();
}

CoilFrame decode_frame(std::string_view payload) {
  try {
    const json doc = json::parse(payload);
    if (doc.value("type", "") != "frame") throw Error(Errc::ProtocolError, "payload is not a frame");
    CoilFrame frame;
    frame.seq = doc.at("seq").get<std::uint64_t>();
    frame.t = doc.at("t").get<double>();
    for (const auto& c : doc.at("coils")) {
      CoilSample sample;
      sample.id = c.at("id").get<std::string>();
      sample.pos = parse_vec(c.at("pos"));
      if (c.contains("ori") && !c["ori"].is_null()) sample.ori = parse_quat(c["ori"]);
      sample.ok = c.at("ok").get<bool>();
      frame.coils.push_back(std::move(sample));
    }
    frame.validate();
    return frame;
  } catch (const json::exception& e) {
    throw Error(Errc::ProtocolError, std::string("malformed frame: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == Errc::ProtocolError) throw;
    throw Error(Errc::ProtocolError, e.what());
  }
}

std::string encode_description(const SweepHeader& header) {
  return json{{"type", "description"}, {"rate", header.rate}, {"coils", header.coil_ids}}.dump();
}

SweepHeader decode_description(std::string_view payload) {
  try {
    const json doc = json::parse(payload);
    if (doc.value("type", "") != "description") throw Error(Errc::ProtocolError, "payload is not a description");
    SweepHeader header;
    header.rate = doc.at("rate").get<double>();
    header.coil_ids = doc.at("coils").get<std::vector<std::string>>();
    return header;
  } catch (const json::exception& e) {
    throw Error(Errc::ProtocolError, std::string("malformed description: ") + e.what());
  }
}

std::string make_packet(std::string_view payload) {
  if (payload.size() > kMaxPayload) throw Error(Errc::ProtocolError, "payload exceeds 16 MiB");
  const auto len = static_cast<std::uint32_t>(payload.size());
  std::string packet;
  packet.reserve(4 + payload.size());
  packet.push_back(static_cast<char>((len >> 24) & 0xFF));
  packet.push_back(static_cast<char>((len >> 16) & 0xFF));
  packet.push_back(static_cast<char>((len >> 8) & 0xFF));
  packet.push_back(static_cast<char>(len & 0xFF));
  packet.append(payload);
  return packet;
}

}  // namespace articfeed::stream
