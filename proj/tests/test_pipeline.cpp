#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <json.hpp>

#include "articfeed/pipeline.hpp"
#include "support.hpp"

using namespace articfeed;
using namespace articfeed::pipeline;
using stream::SyntheticConfig;
using stream::SyntheticSource;

namespace {

std::filesystem::path temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "articfeed_pipeline_test";
  std::filesystem::create_directories(dir);
  return dir;
}

Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an articfeed::Error");
  return Errc::InvalidState;
}

constexpr int kGrid = 10;

std::shared_ptr<const models::MultilinearModel> tongue_model() {
  static auto model =
      std::make_shared<const models::MultilinearModel>(models::generate_synthetic_model(11, 3, 4, kGrid));
  return model;
}

std::shared_ptr<const models::PcaModel> palate_model() {
  static auto model = std::make_shared<const models::PcaModel>(models::generate_synthetic_palate(12, 3, 8));
  return model;
}

SessionConfig base_config() {
  SessionConfig cfg;
  cfg.roles = synthetic_roles(models::synthetic_correspondences(kGrid));
  return cfg;
}

SyntheticConfig source_config(std::uint64_t frames = 0) {
  SyntheticConfig cfg;
  cfg.tongue = models::synthetic_correspondences(kGrid);
  cfg.frames = frames;
  return cfg;
}

// Canonical head/bite coil frame pushed through `pose`.
CoilFrame layout_frame(const RigidTransform& pose, double t = 0.0) {
  CoilFrame f;
  f.t = t;
  for (const auto& [id, p] : stream::SyntheticLayout::head_coils()) f.coils.push_back({id, pose(p), std::nullopt, true});
  return f;
}

std::map<std::string, Vec3> layout_reference(const RigidTransform& pose) {
  std::map<std::string, Vec3> ref;
  for (const auto& id : {"ref1", "ref2", "ref3"}) ref[id] = pose(layout_frame(RigidTransform()).find(id)->pos);
  return ref;
}

double transform_error(const RigidTransform& a, const RigidTransform& b) {
  double worst = 0.0;
  for (const auto& [id, p] : stream::SyntheticLayout::head_coils()) worst = std::max(worst, (a(p) - b(p)).norm());
  return worst;
}

}  // namespace

TEST_CASE("head_correct") {
  const auto roles = synthetic_roles(models::synthetic_correspondences(kGrid));
  std::mt19937_64 rng(21);
  const RigidTransform pose = testsupport::random_transform(rng);
  const auto reference = layout_reference(pose);

  SUBCASE("already at the reference pose") {
    const CoilFrame f = layout_frame(pose);
    const HeadCorrection hc = head_correct(f, roles, reference);
    CHECK_FALSE(hc.insufficient_reference);
    for (std::size_t c = 0; c < f.coils.size(); ++c) CHECK((hc.frame.coils[c].pos - f.coils[c].pos).norm() <= 1e-9);
  }
  SUBCASE("apply then correct") {
    for (int trial = 0; trial < 50; ++trial) {
      const RigidTransform motion = testsupport::random_transform(rng);
      CoilFrame original = layout_frame(pose);
      original.coils.push_back({"tt", testsupport::random_point(rng, 50.0), std::nullopt, true});
      CoilFrame moved = original;
      for (auto& c : moved.coils) c.pos = motion(c.pos);
      const HeadCorrection hc = head_correct(moved, roles, reference);
      double ref_sq = 0.0;
      for (std::size_t c = 0; c < original.coils.size(); ++c) {
        const double d = (hc.frame.coils[c].pos - original.coils[c].pos).norm();
        CHECK(d <= 1e-9);
        if (c < 3) ref_sq += d * d;
      }
      CHECK(std::sqrt(ref_sq / 3) <= 1e-6);
    }
  }
  SUBCASE("two reference coils") {
    CoilFrame f = layout_frame(testsupport::random_transform(rng));
    f.find("ref2")->ok = false;
    const HeadCorrection hc = head_correct(f, roles, reference);
    CHECK(hc.insufficient_reference);
    for (std::size_t c = 0; c < f.coils.size(); ++c) CHECK(hc.frame.coils[c].pos == f.coils[c].pos);
  }
  SUBCASE("no reference pose") {
    CHECK(code_of([&] { head_correct(layout_frame(pose), roles, {}); }) == Errc::NoReferencePose);
  }
}

TEST_CASE("smoother") {
  SUBCASE("constant signal") {
    Smoother s(5);
    for (int k = 0; k < 20; ++k) {
      CoilFrame f;
      f.coils.push_back({"a", Vec3(1, 2, 3), std::nullopt, true});
      CHECK((s.process(f).coils[0].pos - Vec3(1, 2, 3)).norm() <= 1e-12);
    }
  }
  SUBCASE("window 1 is identity") {
    Smoother s(1);
    std::mt19937_64 rng(2);
    for (int k = 0; k < 20; ++k) {
      CoilFrame f;
      f.coils.push_back({"a", testsupport::random_point(rng, 50.0), std::nullopt, true});
      CHECK(s.process(f).coils[0].pos == f.coils[0].pos);
    }
  }
  SUBCASE("matches brute-force mean of valid history") {
    Smoother s(5);
    std::mt19937_64 rng(3);
    std::bernoulli_distribution drop(0.3);
    std::map<std::string, std::vector<Vec3>> history;
    for (int k = 0; k < 200; ++k) {
      CoilFrame f;
      f.t = k * 0.01;
      for (const char* id : {"a", "b"}) {
        CoilSample c{id, testsupport::random_point(rng, 50.0), std::nullopt, !drop(rng)};
        if (c.ok) history[id].push_back(c.pos);
        f.coils.push_back(c);
      }
      const CoilFrame out = s.process(f);
      CHECK(out.t == f.t);
      for (std::size_t c = 0; c < 2; ++c) {
        CHECK(out.coils[c].ok == f.coils[c].ok);
        if (!f.coils[c].ok) continue;
        const auto& h = history[f.coils[c].id];
        Vec3 sum = Vec3::Zero();
        const std::size_t from = h.size() > 5 ? h.size() - 5 : 0;
        for (std::size_t i = from; i < h.size(); ++i) sum += h[i];
        CHECK((out.coils[c].pos - sum / static_cast<double>(h.size() - from)).norm() <= 1e-12);
      }
    }
  }
  CHECK(code_of([] { Smoother s(4); }) == Errc::InvalidArgument);
  CHECK(code_of([] { Smoother s(0); }) == Errc::InvalidArgument);
}

TEST_CASE("record_bite_plane") {
  SessionConfig cfg = base_config();

  SUBCASE("canonical pose gives identity") {
    cfg.reference_pose = layout_reference(RigidTransform());
    std::vector<CoilFrame> frames(20, layout_frame(RigidTransform()));
    const SessionConfig out = record_bite_plane(cfg, frames);
    REQUIRE(out.bite_transform);
    CHECK(transform_error(*out.bite_transform, RigidTransform()) <= 1e-9);
  }
  SUBCASE("recovers a known pose") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 20; ++trial) {
      const RigidTransform g = testsupport::random_transform(rng);
      cfg.reference_pose = layout_reference(g);
      std::vector<CoilFrame> frames;
      for (int k = 0; k < 10; ++k) frames.push_back(layout_frame(g, k * 0.01));
      const SessionConfig out = record_bite_plane(cfg, frames);
      REQUIRE(out.bite_transform);
      CHECK(transform_error(*out.bite_transform * g, RigidTransform()) <= 1e-6);

      // Normalized bite coils are coplanar and the origin maps to 0.
      const CoilFrame n = normalize(head_correct(frames[0], cfg.roles, cfg.reference_pose).frame, out);
      const double z = n.find("bl")->pos.z();
      CHECK(std::abs(n.find("br")->pos.z() - z) <= 1e-6);
      CHECK(std::abs(n.find("bf")->pos.z() - z) <= 1e-6);
      CHECK(n.find("ui")->pos.norm() <= 1e-6);
    }
  }
  SUBCASE("bite coils missing") {
    cfg.reference_pose = layout_reference(RigidTransform());
    std::vector<CoilFrame> frames(10, layout_frame(RigidTransform()));
    for (auto& f : frames) f.find("bl")->ok = false;
    CHECK(code_of([&] { record_bite_plane(cfg, frames); }) == Errc::BiteCoilsMissing);
    for (int k = 0; k < 4; ++k) frames[k].find("bl")->ok = true;
    CHECK(code_of([&] { record_bite_plane(cfg, frames); }) == Errc::BiteCoilsMissing);
    frames[4].find("bl")->ok = true;
    CHECK_NOTHROW(record_bite_plane(cfg, frames));
    CHECK(code_of([&] { record_bite_plane(cfg, {}); }) == Errc::BiteCoilsMissing);
  }
  SUBCASE("recorded origin") {
    cfg.roles.origin = "recorded";
    cfg.reference_pose = layout_reference(RigidTransform());
    std::vector<CoilFrame> frames(5, layout_frame(RigidTransform()));
    CHECK(code_of([&] { record_bite_plane(cfg, frames); }) == Errc::OriginMissing);

    // Trace coil touches the incisor point.
    std::vector<CoilFrame> touch = frames;
    for (auto& f : touch) f.coils.push_back({"tt", Vec3(0, 0, 0), std::nullopt, true});
    cfg = record_origin(cfg, touch);
    REQUIRE(cfg.origin_point);
    const SessionConfig out = record_bite_plane(cfg, frames);
    CHECK(transform_error(*out.bite_transform, RigidTransform()) <= 1e-9);
  }
  SUBCASE("no reference pose") {
    CHECK(code_of([&] { record_bite_plane(cfg, {}); }) == Errc::NoReferencePose);
  }
}

TEST_CASE("record_palate_trace") {
  const auto palate = palate_model();
  SessionConfig cfg = base_config();
  std::mt19937_64 rng(41);
  const RigidTransform g = testsupport::random_transform(rng);
  cfg.reference_pose = layout_reference(g);

  std::vector<CoilFrame> trace_frames;
  const Eigen::VectorXd truth = Eigen::Vector3d(0.6, -0.4, 0.3);
  const models::Mesh surface = models::reconstruct_pca(*palate, truth);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(surface.faces.size()) - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int k = 0; k < 50; ++k) {
    const auto& f = surface.faces[pick(rng)];
    double a = unit(rng), b = unit(rng);
    if (a + b > 1.0) {
      a = 1.0 - a;
      b = 1.0 - b;
    }
    const Vec3 p = (1 - a - b) * surface.vertices[f[0]] + a * surface.vertices[f[1]] + b * surface.vertices[f[2]];
    CoilFrame frame = layout_frame(g, k * 0.01);
    frame.coils.push_back({"tt", g(p), std::nullopt, true});
    trace_frames.push_back(frame);
  }

  CHECK(code_of([&] { record_palate_trace(cfg, trace_frames, *palate); }) == Errc::NoBitePlane);

  cfg = record_bite_plane(cfg, std::vector<CoilFrame>(5, layout_frame(g)));
  const SessionConfig out = record_palate_trace(cfg, trace_frames, *palate);
  REQUIRE(out.palate_weights);
  REQUIRE(out.palate_residual);
  CHECK(*out.palate_residual <= 1e-3);

  auto hidden = trace_frames;
  for (auto& f : hidden) f.find("tt")->ok = false;
  CHECK(code_of([&] { record_palate_trace(cfg, hidden, *palate); }) == Errc::EmptyTrace);
}

TEST_CASE("session config") {
  SessionConfig cfg = base_config();
  cfg.reference_pose = layout_reference(RigidTransform());
  cfg.bite_transform = RigidTransform(Eigen::Quaterniond(0.5, 0.5, 0.5, 0.5), Vec3(1, 2, 3));
  cfg.origin_point = Vec3(0.1, 0.2, 0.3);
  cfg.palate_weights = Eigen::Vector3d(1, 2, 3);
  cfg.palate_residual = 1e-4;
  cfg.smoothing_window = 3;
  cfg.delay = 0.25;
  cfg.transform = Eigen::Matrix4d::Identity();
  cfg.roles.jaw = "jaw";
  cfg.tracker.freeze_after = 17;

  const SessionConfig back = session_from_json(session_to_json(cfg));
  CHECK(back.roles.reference == cfg.roles.reference);
  CHECK(back.roles.tongue.size() == 3);
  CHECK(back.roles.tongue[1].vertex_index == cfg.roles.tongue[1].vertex_index);
  CHECK(back.roles.jaw == cfg.roles.jaw);
  CHECK(back.reference_pose.at("ref2") == cfg.reference_pose.at("ref2"));
  CHECK(transform_error(*back.bite_transform, *cfg.bite_transform) <= 1e-12);
  CHECK(*back.origin_point == *cfg.origin_point);
  CHECK(*back.palate_weights == *cfg.palate_weights);
  CHECK(back.smoothing_window == 3);
  CHECK(back.delay == 0.25);
  CHECK(back.tracker.freeze_after == 17);
  CHECK(*back.transform == *cfg.transform);

  const auto dir = temp_dir();
  save_session(dir / "session.json", cfg);
  CHECK(load_session(dir / "session.json").roles.origin == "ui");

  auto doc = nlohmann::json::parse(session_to_json(cfg));
  doc["smoothing_window"] = 4;
  CHECK(code_of([&] { session_from_json(doc.dump()); }) == Errc::InvalidArgument);
  doc = nlohmann::json::parse(session_to_json(cfg));
  doc["reference_pose"] = nullptr;
  CHECK(code_of([&] { session_from_json(doc.dump()); }) == Errc::InvalidArgument);
  doc = nlohmann::json::parse(session_to_json(cfg));
  doc["roles"]["reference"] = {"ref1", "ref2"};
  CHECK(code_of([&] { session_from_json(doc.dump()); }) == Errc::InvalidArgument);
  CHECK(code_of([] { session_from_json("{}"); }) == Errc::FormatError);
  CHECK(code_of([] { session_from_json("{\"format\":\"articfeed-session\",\"version\":1}"); }) == Errc::FormatError);
}

TEST_CASE("roles validation") {
  CoilRoles roles = synthetic_roles(models::synthetic_correspondences(kGrid));
  CHECK_NOTHROW(roles.validate());
  CHECK(roles.trace_coil() == "tt");
  auto broken = roles;
  broken.tongue[0].coil_id = "ref1";
  CHECK(code_of([&] { broken.validate(); }) == Errc::InvalidArgument);
  broken = roles;
  broken.reference.pop_back();
  CHECK(code_of([&] { broken.validate(); }) == Errc::InvalidArgument);
  broken = roles;
  broken.bite_front = broken.bite_left;
  CHECK(code_of([&] { broken.validate(); }) == Errc::InvalidArgument);
}

TEST_CASE("pipeline state machine") {
  Pipeline p(base_config(), {tongue_model(), palate_model()});
  CHECK(p.phase() == Phase::Setup);
  CHECK(code_of([&] { p.start_task(Task::BitePlane); }) == Errc::NoReferencePose);
  CHECK(code_of([&] { p.start_task(Task::Palate); }) == Errc::NoBitePlane);
  CHECK(code_of([&] { p.stop_task(); }) == Errc::InvalidState);

  SyntheticSource source(tongue_model(), source_config());
  // First second captures the reference pose automatically.
  for (int k = 0; k < 101; ++k) p.process(*source.next());
  CHECK(p.phase() == Phase::BitePlane);
  CHECK(p.config().reference_pose.size() == 3);
  CHECK(code_of([&] { p.start_task(Task::Palate); }) == Errc::NoBitePlane);

  p.start_task(Task::BitePlane);
  CHECK(code_of([&] { p.start_task(Task::Origin); }) == Errc::InvalidState);
  for (int k = 0; k < 20; ++k) CHECK_FALSE(p.process(*source.next()).tracked);
  p.stop_task();
  REQUIRE(p.config().bite_transform);
  // The reference pose was captured during the still period, so the bite
  // transform undoes the device placement.
  CHECK(transform_error(*p.config().bite_transform * source.device_from_canonical(0), RigidTransform()) <= 1e-9);
  CHECK(p.phase() == Phase::Palate);

  // Tracking now runs; vertices follow the weights and the coils match canonical truth.
  for (int k = 0; k < 100; ++k) {
    const CoilFrame raw = *source.next();
    const ProcessedFrame out = p.process(raw);
    CHECK(out.tracked);
    const Eigen::VectorXd v = models::reconstruct_multilinear_flat(*tongue_model(), out.x, out.y);
    CHECK((v - out.vertices).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK((out.coils[0].pos - source.canonical_frame(raw.seq).coils[0].pos).norm() <= 1e-6);
  }

  p.skip_palate();
  CHECK(p.phase() == Phase::Live);

  // Roles with a different reference set restart the setup.
  CoilRoles roles = p.config().roles;
  std::swap(roles.reference[0], roles.bite_front);
  p.set_roles(roles);
  CHECK(p.phase() == Phase::Setup);
  CHECK(p.config().reference_pose.empty());
  CHECK_FALSE(p.config().bite_transform);

  roles.tongue[0].vertex_index = kGrid * kGrid;
  CHECK_THROWS_AS(p.set_roles(roles), Error);
}

TEST_CASE("client messages") {
  const auto roles = parse_client_message(
      R"({"type":"set_roles","reference":["a","b","c"],"tongue":[{"coil":"tt","vertex":3}],)"
      R"("bite_left":"l","bite_right":"r","bite_front":"f","origin":"recorded"})");
  REQUIRE(std::holds_alternative<SetRoles>(roles));
  CHECK(std::get<SetRoles>(roles).roles.tongue[0].vertex_index == 3);

  const auto task = parse_client_message(R"({"type":"task","name":"biteplane","action":"start"})");
  CHECK(std::get<TaskCommand>(task).task == Task::BitePlane);
  CHECK(std::get<TaskCommand>(task).action == "start");
  CHECK(std::get<Play>(parse_client_message(R"({"type":"play","source":"file","path":"a.jsonl"})")).path == "a.jsonl");
  CHECK(std::holds_alternative<StopPlayback>(parse_client_message(R"({"type":"stop"})")));
  CHECK(std::get<SetValue>(parse_client_message(R"({"type":"set","key":"delay","value":0.5})")).value == 0.5);

  for (const char* bad : {R"({"type":"nope"})", R"({"type":"task","name":"x","action":"start"})",
                          R"({"type":"task","name":"reference","action":"skip"})",
                          R"({"type":"set","key":"colour","value":1})", R"({"type":"play","source":"tape","path":"x"})",
                          "not json", R"({"type":"set_roles"})"}) {
    CHECK(code_of([&] { parse_client_message(bad); }) == Errc::ProtocolError);
  }
}

TEST_CASE("frame message") {
  ProcessedFrame f;
  f.seq = 7;
  f.t = 0.07;
  f.coils.push_back({"tt", Vec3(1.5, -2, 3e-7), std::nullopt, true});
  f.coils.push_back({"tb", Vec3::Zero(), std::nullopt, false});
  f.x = Eigen::Vector2d(0.1, 0.2);
  f.y = Eigen::Vector3d(1, 2, 3);
  f.vertices = Eigen::VectorXd::LinSpaced(6, -1.0, 1.0 / 3.0);
  f.fit_residual = 1e-5;
  f.tracked = true;
  const auto doc = nlohmann::json::parse(frame_message(f));
  CHECK(doc["type"] == "frame");
  CHECK(doc["t"].get<double>() == 0.07);
  CHECK(doc["coils"][0]["id"] == "tt");
  CHECK(doc["coils"][0]["pos"][2].get<double>() == 3e-7);
  CHECK(doc["coils"][1]["ok"] == false);
  CHECK(doc["weights"]["x"][1].get<double>() == 0.2);
  CHECK(doc["weights"]["y"].size() == 3);
  REQUIRE(doc["vertices"].size() == 6);
  for (int i = 0; i < 6; ++i) CHECK(doc["vertices"][i].get<double>() == f.vertices[i]);
  CHECK(doc["residual"].get<double>() == 1e-5);

  const auto mesh = nlohmann::json::parse(mesh_message("tongue", f.vertices, {{0, 1, 2}}));
  CHECK(mesh["name"] == "tongue");
  CHECK(mesh["faces"][0][2] == 2);
  CHECK(nlohmann::json::parse(hello_message())["version"] == 1);
  CHECK(nlohmann::json::parse(error_message("NoBitePlane", "x"))["code"] == "NoBitePlane");

  Pipeline p(base_config(), {tongue_model(), nullptr});
  const auto state = nlohmann::json::parse(state_message(p));
  CHECK(state["phase"] == "setup");
  CHECK(state["roles"]["reference"].size() == 3);
}

TEST_CASE("run_session over a 10 s synthetic sweep") {
  SessionConfig cfg = base_config();
  SyntheticSource source(tongue_model(), source_config(1000));
  std::vector<std::uint64_t> seqs;
  auto sink = std::make_shared<CallbackSink>("collect", [&](const SinkItem& item) { seqs.push_back(item.raw->seq); });
  const SessionReport report = run_session(source, cfg, {tongue_model(), nullptr}, {{sink, Backpressure::Block}});
  CHECK(report.frames == 1000);
  CHECK(report.dropouts == 0);
  CHECK(report.ended_by == "source exhausted");
  CHECK(seqs.size() == 1000);
  CHECK(report.latency_p99_ms > 0.0);
  CHECK(cfg.reference_pose.size() == 3);
  CHECK(report.phase == "biteplane");
  const auto doc = nlohmann::json::parse(report.to_json());
  CHECK(doc["frames"] == 1000);
  CHECK(report.to_text().find("latency_p99_ms=") != std::string::npos);
}

TEST_CASE("run_session counts sequence gaps") {
  stream::Sweep sweep = stream::record_synthetic(tongue_model(), source_config(), 50);
  sweep.frames.erase(sweep.frames.begin() + 10, sweep.frames.begin() + 13);
  struct Gappy : stream::FrameSource {
    stream::Sweep sweep;
    std::size_t i = 0;
    stream::SweepHeader describe() override { return sweep.header; }
    std::optional<CoilFrame> next() override {
      if (i >= sweep.frames.size()) return std::nullopt;
      return sweep.frames[i++];
    }
  } source;
  source.sweep = sweep;
  SessionConfig cfg = base_config();
  const SessionReport report = run_session(source, cfg, {tongue_model(), nullptr}, {});
  CHECK(report.frames == 47);
  CHECK(report.dropouts == 3);
}

TEST_CASE("run_session delay") {
  SessionConfig cfg = base_config();
  cfg.delay = 0.1;
  SyntheticSource source(tongue_model(), source_config(5));
  std::optional<std::chrono::steady_clock::time_point> first;
  auto sink = std::make_shared<CallbackSink>("clock", [&](const SinkItem& item) {
    if (item.processed->t == 0.0) first = std::chrono::steady_clock::now();
  });
  const auto start = std::chrono::steady_clock::now();
  run_session(source, cfg, {tongue_model(), nullptr}, {{sink, Backpressure::Block}});
  REQUIRE(first);
  CHECK(std::chrono::duration<double>(*first - start).count() >= 0.1);
}

TEST_CASE("run_session sink failure and recorder") {
  const auto dir = temp_dir();
  SessionConfig cfg = base_config();
  cfg.smoothing_window = 3;
  SyntheticSource source(tongue_model(), source_config(300));
  std::vector<ProcessedFrame> emitted;
  auto collect = std::make_shared<CallbackSink>("collect", [&](const SinkItem& item) { emitted.push_back(*item.processed); });
  auto failing = std::make_shared<CallbackSink>("flaky", [](const SinkItem& item) {
    if (item.raw->seq == 10) throw std::runtime_error("disk full");
  });
  {
    Session session(cfg, {tongue_model(), nullptr});
    session.add_sink(std::make_shared<RecorderSink>(dir / "raw.jsonl", dir / "processed.csv", source.describe()),
                     Backpressure::Block);
    session.add_sink(collect, Backpressure::Block);
    session.add_sink(failing, Backpressure::Block);
    const SessionReport report = session.run(source);
    CHECK(report.frames == 300);
    CHECK(report.failed_sinks == std::vector<std::string>{"flaky"});
  }
  REQUIRE(emitted.size() == 300);
  const stream::Sweep raw = stream::read_sweep(dir / "raw.jsonl");
  const stream::Sweep processed = stream::read_sweep(dir / "processed.csv");
  REQUIRE(raw.frames.size() == 300);
  REQUIRE(processed.frames.size() == 300);
  SyntheticSource again(tongue_model(), source_config(300));
  for (std::size_t k = 0; k < 300; ++k) {
    const CoilFrame truth = *again.next();
    for (std::size_t c = 0; c < truth.coils.size(); ++c) {
      CHECK((raw.frames[k].coils[c].pos - truth.coils[c].pos).norm() <= 1e-9);
      CHECK((processed.frames[k].coils[c].pos - emitted[k].coils[c].pos).norm() <= 1e-9);
    }
    CHECK(std::abs(processed.frames[k].t - emitted[k].t) <= 1e-12);
  }
}

TEST_CASE("run_session ends cleanly when the device disconnects") {
  auto model = tongue_model();
  stream::DeviceServer server([model] { return std::make_unique<SyntheticSource>(model, source_config()); }, 100.0);
  server.start({"127.0.0.1", 0});
  stream::DeviceSource source({"127.0.0.1", server.port()}, 200.0);
  std::thread killer([&] {
    std::this_thread::sleep_for(std::chrono::milliseconds(300));
    server.stop();
  });
  SessionConfig cfg = base_config();
  const SessionReport report = run_session(source, cfg, {model, nullptr}, {});
  killer.join();
  CHECK(report.frames > 0);
  CHECK(report.ended_by.rfind("connection lost", 0) == 0);
}

TEST_CASE("loopback device to pipeline reproduces a sweep") {
  SyntheticConfig still = source_config();
  still.head_rotation = 0.0;
  still.head_translation = 0.0;
  const stream::Sweep sweep = stream::record_synthetic(tongue_model(), still, 1000);
  auto shared = std::make_shared<stream::Sweep>(sweep);
  stream::DeviceServer server([shared] { return std::make_unique<stream::SweepSource>(*shared); }, 100.0);
  server.start({"127.0.0.1", 0});

  SessionConfig cfg = base_config();
  cfg.smoothing_window = 1;
  cfg.reference_pose = capture_reference_pose(cfg.roles, std::span(sweep.frames).first(1));
  std::vector<ProcessedFrame> out;
  auto sink = std::make_shared<CallbackSink>("collect", [&](const SinkItem& item) { out.push_back(*item.processed); });
  stream::DeviceSource source({"127.0.0.1", server.port()}, 5000.0);
  const SessionReport report = run_session(source, cfg, {tongue_model(), nullptr}, {{sink, Backpressure::Block}});
  CHECK(report.frames == 1000);
  CHECK(report.dropouts == 0);
  REQUIRE(out.size() == 1000);
  double worst = 0.0;
  for (std::size_t k = 0; k < out.size(); ++k) {
    CHECK(out[k].seq == k);
    for (std::size_t c = 0; c < out[k].coils.size(); ++c) {
      worst = std::max(worst, (out[k].coils[c].pos - sweep.frames[k].coils[c].pos).norm());
    }
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("websocket broadcast session") {
  namespace beast = boost::beast;
  namespace websocket = beast::websocket;
  using boost::asio::ip::tcp;

  SessionConfig cfg = base_config();
  Session session(cfg, {tongue_model(), palate_model()});
  BroadcastServer ws([&] { return session.greeting(); }, [&](const std::string& m) { session.post(m); });
  ws.start({"127.0.0.1", 0});
  session.add_sink(std::make_shared<BroadcastSink>(ws), Backpressure::DropOldest, 8);
  session.on_event([&](const std::string& m) { ws.broadcast(m, false); });

  boost::asio::io_context io;
  websocket::stream<tcp::socket> client(io);
  client.next_layer().connect({boost::asio::ip::make_address("127.0.0.1"), ws.port()});
  client.handshake("127.0.0.1", "/");
  auto read_json = [&] {
    beast::flat_buffer buf;
    client.read(buf);
    return nlohmann::json::parse(beast::buffers_to_string(buf.data()));
  };
  CHECK(read_json()["type"] == "hello");
  const auto tongue_mesh = read_json();
  CHECK(tongue_mesh["name"] == "tongue");
  CHECK(tongue_mesh["vertices"].size() == 3 * kGrid * kGrid);
  CHECK(read_json()["name"] == "palate");
  CHECK(read_json()["phase"] == "setup");

  // A task that is not allowed yet comes back as an error.
  client.write(boost::asio::buffer(std::string(R"({"type":"task","name":"palate","action":"start"})")));

  SyntheticSource source(tongue_model(), source_config());
  std::thread runner([&] { session.run(source, {250, 0.0}); });

  bool saw_error = false, saw_biteplane = false, saw_frame = false;
  bool sent_task = false;
  for (int i = 0; i < 2000 && !(saw_error && saw_biteplane && saw_frame); ++i) {
    const auto msg = read_json();
    if (msg["type"] == "error") {
      saw_error = true;
      CHECK(msg["code"] == "NoBitePlane");
    }
    if (msg["type"] == "frame") saw_frame = true;
    if (msg["type"] == "state" && msg["phase"] == "biteplane") {
      saw_biteplane = true;
      if (!sent_task) {
        client.write(boost::asio::buffer(std::string(R"({"type":"task","name":"biteplane","action":"start"})")));
        sent_task = true;
      }
    }
  }
  runner.join();
  CHECK(saw_error);
  CHECK(saw_biteplane);
  CHECK(saw_frame);
  CHECK(session.pipeline().active_task() == Task::BitePlane);
  CHECK(ws.client_count() == 1);
  beast::error_code ignored;
  client.close(websocket::close_code::normal, ignored);
  ws.stop();
}
