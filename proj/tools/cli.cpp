#include "cli.hpp"

#include <atomic>
#include <cmath>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "articfeed/fitting.hpp"
#include "articfeed/models.hpp"
#include "articfeed/pipeline.hpp"
#include "articfeed/stream.hpp"

namespace articfeed::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using geometry::Vec3;
using stream::CoilFrame;

namespace {

volatile std::sig_atomic_t g_shutdown = 0;
volatile std::sig_atomic_t g_metrics = 0;

extern "C" void on_signal(int sig) {
  if (sig == SIGUSR1) {
    g_metrics = 1;
  } else {
    g_shutdown = 1;
  }
}

// Defaults shared by generate-models and the built-in synthetic device.
struct ModelShape {
  std::uint64_t seed = 1;
  int n = 3;
  int m = 4;
  int grid = 20;
  int palate_n = 3;
  int palate_grid = 16;
};

constexpr const char* kTongueFile = "tongue.json";
constexpr const char* kPalateFile = "palate.json";
constexpr const char* kSessionFile = "session.json";


std::string endpoint_check(const std::string& text) {
  try {
    stream::parse_endpoint(text);
    return {};
  } catch (const Error& e) {
    return e.what();
  }
}

std::string to_string(const stream::Endpoint& ep) { return ep.host + ":" + std::to_string(ep.port); }

int square_grid(const models::MultilinearModel& model) {
  const int v = model.vertex_count();
  const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(v))));
  if (g * g != v || g < 4) {
    throw Error(Errc::InvalidArgument, "tongue model is not a square grid; pass --session with coil roles");
  }
  return g;
}

std::shared_ptr<const models::MultilinearModel> default_tongue() {
  const ModelShape s;
  return std::make_shared<const models::MultilinearModel>(
      models::generate_synthetic_model(s.seed, s.n, s.m, s.grid));
}

std::shared_ptr<const models::MultilinearModel> load_tongue(const std::string& dir) {
  if (dir.empty()) return default_tongue();
  return std::make_shared<const models::MultilinearModel>(models::load_multilinear_model(fs::path(dir) / kTongueFile));
}

pipeline::Models load_models(const std::string& dir) {
  pipeline::Models models;
  models.tongue = load_tongue(dir);
  const fs::path palate = fs::path(dir) / kPalateFile;
  if (fs::exists(palate)) models.palate = std::make_shared<const models::PcaModel>(models::load_pca_model(palate));
  return models;
}

pipeline::SessionConfig default_session(const models::MultilinearModel& tongue) {
  pipeline::SessionConfig cfg;
  cfg.roles = pipeline::synthetic_roles(models::synthetic_correspondences(square_grid(tongue)));
  return cfg;
}

void wait_for_shutdown(const std::function<void()>& on_metrics = {}) {
  while (g_shutdown == 0) {
    if (g_metrics != 0) {
      g_metrics = 0;
      if (on_metrics) on_metrics();
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream file(path);
  file << text << '\n';
  file.close();
  if (!file) throw Error(Errc::IoError, "cannot write " + path.string());
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string sweep;
  std::optional<std::uint64_t> synthetic;
  std::string bind = "127.0.0.1:7100";
  std::optional<double> rate;
  std::string models;
  std::uint64_t frames = 0;
  double noise = 0.0;
  double dropout = 0.0;
};

int cmd_simulate(const SimulateArgs& a, std::ostream& out, std::ostream& err) {
  stream::DeviceServer::SourceFactory factory;
  double rate = 100.0;
  if (a.synthetic) {
    auto tongue = load_tongue(a.models);
    stream::SyntheticConfig cfg;
    cfg.seed = *a.synthetic;
    cfg.tongue = models::synthetic_correspondences(square_grid(*tongue));
    cfg.frames = a.frames;
    cfg.noise_mm = a.noise;
    cfg.dropout_probability = a.dropout;
    cfg.rate = a.rate.value_or(rate);
    rate = cfg.rate;
    factory = [tongue, cfg] { return std::make_unique<stream::SyntheticSource>(tongue, cfg); };
  } else {
    auto sweep = std::make_shared<const stream::Sweep>(stream::read_sweep(a.sweep));
    rate = a.rate.value_or(sweep->header.rate);
    factory = [sweep] { return std::make_unique<stream::SweepSource>(*sweep); };
  }
  stream::DeviceServer server(factory, rate);
  stream::Endpoint ep = stream::parse_endpoint(a.bind);
  server.start(ep);
  ep.port = server.port();
  out << "listening on " << to_string(ep) << std::endl;
  wait_for_shutdown([&] { err << "connections_served=" << server.connections_served() << std::endl; });
  server.stop();
  spdlog::info("simulator stopped after {} connection(s)", server.connections_served());
  return 0;
}

// ---------------------------------------------------------------------------

struct ServeArgs {
  std::string device;
  std::string file;
  std::string models;
  std::string session;
  std::string ws;
  std::string record_raw;
  std::string record_processed;
  std::string save_session;
  double rate = 100.0;
  bool fast = false;
  std::uint64_t max_frames = 0;
  double duration = 0.0;
  std::optional<int> smoothing;
  std::optional<double> delay;
};

std::unique_ptr<stream::FrameSource> open_source(const std::string& kind, const std::string& where, const ServeArgs& a) {
  if (kind == "device") return std::make_unique<stream::DeviceSource>(stream::parse_endpoint(where), a.rate);
  return std::make_unique<stream::SweepSource>(stream::read_sweep(where), !a.fast);
}

int cmd_serve(const ServeArgs& a, std::ostream& out, std::ostream& err) {
  const pipeline::Models models = load_models(a.models);
  pipeline::SessionConfig cfg = a.session.empty() ? default_session(*models.tongue) : pipeline::load_session(a.session);
  if (a.smoothing) cfg.smoothing_window = *a.smoothing;
  if (a.delay) cfg.delay = *a.delay;

  pipeline::Session session(cfg, models);
  std::atomic<std::uint64_t> processed{0};
  session.add_sink(std::make_shared<pipeline::CallbackSink>("counter", [&](const pipeline::SinkItem&) { ++processed; }),
                   pipeline::Backpressure::Block);

  std::unique_ptr<pipeline::BroadcastServer> ws;
  if (!a.ws.empty()) {
    ws = std::make_unique<pipeline::BroadcastServer>([&] { return session.greeting(); },
                                                     [&](const std::string& m) { session.post(m); });
    ws->start(stream::parse_endpoint(a.ws));
    session.add_sink(std::make_shared<pipeline::BroadcastSink>(*ws), pipeline::Backpressure::DropOldest);
    session.on_event([&](const std::string& m) { ws->broadcast(m, false); });
  }

  std::string kind = a.device.empty() ? "file" : "device";
  std::string where = a.device.empty() ? a.file : a.device;
  auto source = open_source(kind, where, a);
  if (!a.record_raw.empty() || !a.record_processed.empty()) {
    const fs::path raw = a.record_raw.empty() ? fs::path(a.record_processed).replace_extension(".raw.jsonl") : fs::path(a.record_raw);
    const fs::path processed_path =
        a.record_processed.empty() ? fs::path(a.record_raw).replace_extension(".processed.jsonl") : fs::path(a.record_processed);
    session.add_sink(std::make_shared<pipeline::RecorderSink>(raw, processed_path, source->describe()),
                     pipeline::Backpressure::Block);
  }

  std::atomic<bool> done{false};
  std::thread watcher([&] {
    while (!done) {
      if (g_shutdown != 0) {
        session.request_stop();
        break;
      }
      if (g_metrics != 0) {
        g_metrics = 0;
        err << "frames=" << processed.load() << " clients=" << (ws ? ws->client_count() : 0)
            << " ws_dropped=" << (ws ? ws->dropped() : 0) << " phase=" << pipeline::to_string(session.pipeline().phase())
            << std::endl;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
  });
  struct Join {
    std::atomic<bool>& done;
    std::thread& t;
    ~Join() {
      done = true;
      t.join();
    }
  } join{done, watcher};

  pipeline::SessionReport report;
  int runs = 0;
  for (;;) {
    ++runs;
    report = session.run(*source, {a.max_frames, a.duration});
    source.reset();
    if (report.ended_by != "play" || g_shutdown != 0) break;
    const auto play = session.take_play_request();
    if (!play) break;
    spdlog::info("switching to {} {}", play->source, play->path);
    try {
      source = open_source(play->source, play->path, a);
    } catch (const Error& e) {
      if (ws) ws->broadcast(pipeline::error_message(articfeed::to_string(e.code()), e.what()), false);
      spdlog::error("cannot play {}: {}", play->path, e.what());
      break;
    }
  }
  if (!a.save_session.empty()) pipeline::save_session(a.save_session, session.pipeline().config());
  if (ws) {
    report.broadcast_dropped += ws->dropped();
    ws->stop();
  }
  json doc = json::parse(report.to_json());
  doc["runs"] = runs;
  out << doc.dump(2) << std::endl;
  return 0;
}

// ---------------------------------------------------------------------------

struct FitPalateArgs {
  std::string model;
  std::string trace;
  std::string out;
  std::string session;
  std::string coil;
  double prior = 1e-4;
  int iterations = 10;
};

int cmd_fit_palate(const FitPalateArgs& a, std::ostream& out, std::ostream&) {
  const models::PcaModel palate = models::load_pca_model(a.model);
  palate.validate();
  const stream::Sweep sweep = stream::read_sweep(a.trace);

  // Without a session the trace is taken to be in model coordinates already.
  std::optional<pipeline::SessionConfig> cfg;
  if (!a.session.empty()) cfg = pipeline::load_session(a.session);
  std::string coil = a.coil;
  if (coil.empty()) coil = cfg ? cfg->roles.trace_coil() : "tt";
  std::vector<Vec3> points;
  if (cfg) {
    if (!cfg->bite_transform) throw Error(Errc::NoBitePlane, "session has no bite plane");
    for (const auto& raw : sweep.frames) {
      const auto hc = pipeline::head_correct(raw, cfg->roles, cfg->reference_pose);
      if (hc.insufficient_reference) continue;
      const CoilFrame n = pipeline::normalize(hc.frame, *cfg);
      if (const auto* c = n.find(coil); c != nullptr && c->ok) points.push_back(c->pos);
    }
  } else {
    for (const auto& f : sweep.frames) {
      if (const auto* c = f.find(coil); c != nullptr && c->ok) points.push_back(c->pos);
    }
  }
  if (points.empty()) throw Error(Errc::EmptyTrace, "coil '" + coil + "' is never visible in " + a.trace);

  const fitting::PalateFit fit = fitting::fit_palate(palate, points, a.prior, a.iterations);
  const json doc = {{"weights", std::vector<double>(fit.x.data(), fit.x.data() + fit.x.size())},
                    {"mean_residual", fit.mean_residual},
                    {"outer_iterations", fit.outer_iterations},
                    {"residual_history", fit.residual_history},
                    {"points", points.size()},
                    {"coil", coil}};
  write_text(a.out, doc.dump(2));
  out << "mean_residual=" << fit.mean_residual << " points=" << points.size() << " -> " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct ExportArgs {
  std::string model;
  std::string sweep;
  std::string out;
  std::string format = "obj";
  std::string session;
};

int cmd_export(const ExportArgs& a, std::ostream& out, std::ostream&) {
  auto tongue = std::make_shared<const models::MultilinearModel>(models::load_multilinear_model(a.model));
  tongue->validate();
  const stream::Sweep sweep = stream::read_sweep(a.sweep);
  fs::create_directories(a.out);

  std::ofstream csv(fs::path(a.out) / "weights.csv");
  if (!csv) throw Error(Errc::IoError, "cannot write " + (fs::path(a.out) / "weights.csv").string());
  csv << std::setprecision(17) << "seq,t";
  for (int i = 0; i < tongue->n; ++i) csv << ",x" << i;
  for (int j = 0; j < tongue->m; ++j) csv << ",y" << j;
  csv << ",residual,tracked\n";

  const auto emit = [&](std::size_t k, std::uint64_t seq, double t, const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                        const Eigen::VectorXd& vertices, double residual, bool tracked) {
    geometry::Mesh mesh;
    mesh.faces = tongue->faces;
    for (Eigen::Index v = 0; v < vertices.size() / 3; ++v) mesh.vertices.push_back(vertices.segment<3>(3 * v));
    std::ostringstream name;
    name << "frame_" << std::setw(6) << std::setfill('0') << k << ".obj";
    geometry::write_obj(fs::path(a.out) / name.str(), mesh);
    csv << seq << ',' << t;
    for (Eigen::Index i = 0; i < x.size(); ++i) csv << ',' << x[i];
    for (Eigen::Index j = 0; j < y.size(); ++j) csv << ',' << y[j];
    csv << ',' << residual << ',' << (tracked ? 1 : 0) << '\n';
  };

  std::size_t tracked = 0;
  if (!a.session.empty()) {
    const pipeline::SessionConfig cfg = pipeline::load_session(a.session);
    if (!cfg.bite_transform) throw Error(Errc::NoBitePlane, "session has no bite plane");
    if (cfg.reference_pose.empty()) throw Error(Errc::NoReferencePose, "session has no reference pose");
    pipeline::Pipeline p(cfg, {tongue, nullptr});
    Eigen::VectorXd last = tongue->mean;
    for (std::size_t k = 0; k < sweep.frames.size(); ++k) {
      const pipeline::ProcessedFrame f = p.process(sweep.frames[k]);
      if (f.vertices.size() > 0) last = f.vertices;
      tracked += f.tracked ? 1 : 0;
      emit(k, f.seq, f.t, p.tracker().x, p.tracker().y, last, f.fit_residual, f.tracked);
    }
  } else {
    // Coordinates are taken as canonical and the coils follow the synthetic layout.
    fitting::TrackerConfig tc;
    tc.correspondences = models::synthetic_correspondences(square_grid(*tongue));
    fitting::TrackerState state = fitting::TrackerState::neutral(*tongue);
    for (std::size_t k = 0; k < sweep.frames.size(); ++k) {
      const CoilFrame& frame = sweep.frames[k];
      fitting::CoilPositions coils;
      for (const auto& c : tc.correspondences) {
        const auto* s = frame.find(c.coil_id);
        coils[c.coil_id] = (s != nullptr && s->ok) ? std::optional<Vec3>(s->pos) : std::nullopt;
      }
      const fitting::FrameFit fit = fitting::track_frame(state, *tongue, tc, coils);
      state = fit.state;
      const bool ok = !fit.diagnostics.no_visible_coils;
      tracked += ok ? 1 : 0;
      emit(k, frame.seq, frame.t, state.x, state.y, fit.vertices, fit.diagnostics.residual_rms, ok);
    }
  }
  csv.close();
  if (!csv) throw Error(Errc::IoError, "write failed: weights.csv");
  out << "exported " << sweep.frames.size() << " frame(s), " << tracked << " tracked -> " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct CalibrateArgs {
  std::string sweep;
  std::string models;
  std::string session;
  std::string out;
  std::vector<double> reference{0.0, 1.0};
  std::vector<double> bite{0.0, 1.0};
  std::vector<double> palate;
};

std::vector<CoilFrame> window(const stream::Sweep& sweep, const std::vector<double>& range) {
  std::vector<CoilFrame> frames;
  for (const auto& f : sweep.frames) {
    if (f.t >= range[0] && f.t <= range[1]) frames.push_back(f);
  }
  if (frames.empty()) {
    throw Error(Errc::InvalidArgument,
                "no frames between t=" + std::to_string(range[0]) + " and t=" + std::to_string(range[1]));
  }
  return frames;
}

int cmd_calibrate(const CalibrateArgs& a, std::ostream& out) {
  const pipeline::Models models = load_models(a.models);
  pipeline::SessionConfig cfg = a.session.empty() ? default_session(*models.tongue) : pipeline::load_session(a.session);
  const stream::Sweep sweep = stream::read_sweep(a.sweep);
  cfg.reference_pose = pipeline::capture_reference_pose(cfg.roles, window(sweep, a.reference));
  cfg.bite_transform.reset();
  cfg = pipeline::record_bite_plane(cfg, window(sweep, a.bite));
  if (!a.palate.empty()) {
    if (!models.palate) throw Error(Errc::InvalidState, "no palate.json in " + a.models);
    cfg = pipeline::record_palate_trace(cfg, window(sweep, a.palate), *models.palate);
  }
  pipeline::save_session(a.out, cfg);
  out << "reference=" << cfg.reference_pose.size() << " coils, bite plane recorded";
  if (cfg.palate_residual) out << ", palate residual " << *cfg.palate_residual;
  out << " -> " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_generate_models(const ModelShape& s, const std::string& dir, std::ostream& out) {
  const auto tongue = models::generate_synthetic_model(s.seed, s.n, s.m, s.grid);
  const auto palate = models::generate_synthetic_palate(s.seed + 1, s.palate_n, s.palate_grid);
  fs::create_directories(dir);
  models::save_model(fs::path(dir) / kTongueFile, tongue);
  models::save_model(fs::path(dir) / kPalateFile, palate);
  pipeline::save_session(fs::path(dir) / kSessionFile, default_session(tongue));
  out << "wrote " << kTongueFile << ", " << kPalateFile << ", " << kSessionFile << " to " << dir << '\n';
  return 0;
}

struct SweepArgs {
  std::string out;
  std::string models;
  std::uint64_t seed = 1;
  std::uint64_t frames = 1000;
  double rate = 100.0;
  double noise = 0.0;
  double dropout = 0.0;
  double head_rotation = 0.05;
  double head_translation = 3.0;
  double pose_amplitude = 0.3;
};

int cmd_generate_sweep(const SweepArgs& a, std::ostream& out) {
  auto tongue = load_tongue(a.models);
  stream::SyntheticConfig cfg;
  cfg.seed = a.seed;
  cfg.rate = a.rate;
  cfg.tongue = models::synthetic_correspondences(square_grid(*tongue));
  cfg.noise_mm = a.noise;
  cfg.dropout_probability = a.dropout;
  cfg.head_rotation = a.head_rotation;
  cfg.head_translation = a.head_translation;
  cfg.pose_amplitude = a.pose_amplitude;
  const stream::Sweep sweep = stream::record_synthetic(tongue, cfg, a.frames);
  stream::write_sweep(a.out, sweep.header, sweep.frames);
  out << "wrote " << a.frames << " frame(s) to " << a.out << '\n';
  return 0;
}

struct TraceArgs {
  std::string model;
  std::string out;
  std::vector<double> weights;
  std::size_t points = 50;
  std::uint64_t seed = 1;
  std::string coil = "tt";
};

int cmd_generate_trace(const TraceArgs& a, std::ostream& out) {
  const models::PcaModel palate = models::load_pca_model(a.model);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(palate.dims());
  if (!a.weights.empty()) {
    if (static_cast<int>(a.weights.size()) != palate.dims()) {
      throw Error(Errc::DimensionMismatch, "--weights needs " + std::to_string(palate.dims()) + " values");
    }
    x = Eigen::Map<const Eigen::VectorXd>(a.weights.data(), palate.dims());
  }
  const geometry::Mesh surface = models::reconstruct_pca(palate, x);
  std::mt19937_64 rng(a.seed);
  std::uniform_int_distribution<std::size_t> pick(0, surface.faces.size() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  stream::Sweep sweep;
  sweep.header.rate = 100.0;
  sweep.header.coil_ids = {a.coil};
  for (std::size_t k = 0; k < a.points; ++k) {
    const auto& f = surface.faces[pick(rng)];
    double u = unit(rng), v = unit(rng);
    if (u + v > 1.0) {
      u = 1.0 - u;
      v = 1.0 - v;
    }
    CoilFrame frame;
    frame.seq = k;
    frame.t = static_cast<double>(k) / sweep.header.rate;
    frame.coils.push_back(
        {a.coil, (1 - u - v) * surface.vertices[f[0]] + u * surface.vertices[f[1]] + v * surface.vertices[f[2]],
         std::nullopt, true});
    sweep.frames.push_back(std::move(frame));
  }
  stream::write_sweep(a.out, sweep.header, sweep.frames);
  out << "wrote " << a.points << " trace point(s) to " << a.out << '\n';
  return 0;
}

}  // namespace

void request_shutdown() noexcept { g_shutdown = 1; }
void request_metrics() noexcept { g_metrics = 1; }

void install_signal_handlers() {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::signal(SIGUSR1, on_signal);
  std::signal(SIGPIPE, SIG_IGN);
}

void configure_logging() {
  static const bool once = [] {
    spdlog::set_default_logger(spdlog::stderr_color_mt("articfeed"));
    return true;
  }();
  (void)once;
  const char* env = std::getenv("ARTICFEED_LOG");
  const std::string level = env != nullptr ? env : "warn";
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "info") {
    spdlog::set_level(spdlog::level::info);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    if (level != "warn") spdlog::warn("ARTICFEED_LOG='{}' is not error|warn|info|debug; using warn", level);
    spdlog::set_level(spdlog::level::warn);
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  configure_logging();
  g_shutdown = 0;
  g_metrics = 0;

  CLI::App app{"Real-time articulography processing and articulatory feedback engine", "articfeed"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "articfeed 0.1.0");
  const auto endpoint = CLI::Validator(endpoint_check, "HOST:PORT", "endpoint");

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Serve a sweep or a synthetic device over EMA-RT/1 until interrupted");
  auto* sim_sweep = simulate->add_option("sweep", sim.sweep, "Sweep file to play back (.jsonl or .csv)");
  auto* sim_syn = simulate->add_option("--synthetic", sim.synthetic, "Synthetic device with this seed");
  sim_sweep->excludes(sim_syn);
  simulate->add_option("--bind", sim.bind, "Listen address")->check(endpoint)->capture_default_str();
  simulate->add_option("--rate", sim.rate, "Default stream rate in Hz")->check(CLI::PositiveNumber);
  simulate->add_option("--models", sim.models, "Model directory for the synthetic device")->check(CLI::ExistingDirectory);
  simulate->add_option("--frames", sim.frames, "Synthetic frames per connection, 0 = unbounded")->capture_default_str();
  simulate->add_option("--noise", sim.noise, "Synthetic noise (mm)")->check(CLI::NonNegativeNumber);
  simulate->add_option("--dropout", sim.dropout, "Synthetic dropout probability")->check(CLI::Range(0.0, 1.0));

  ServeArgs srv;
  auto* serve = app.add_subcommand("serve", "Run the processing pipeline with WebSocket broadcast");
  auto* srv_device = serve->add_option("--device", srv.device, "EMA-RT/1 device address")->check(endpoint);
  auto* srv_file = serve->add_option("--file", srv.file, "Sweep file to play back");
  srv_device->excludes(srv_file);
  serve->add_option("--models", srv.models, "Directory with tongue.json and optional palate.json")
      ->required()
      ->check(CLI::ExistingDirectory);
  serve->add_option("--session", srv.session, "Session configuration (JSON)");
  serve->add_option("--ws", srv.ws, "WebSocket listen address")->check(endpoint);
  serve->add_option("--record-raw", srv.record_raw, "Record the raw stream to this sweep file");
  serve->add_option("--record-processed", srv.record_processed, "Record the processed coils to this sweep file");
  serve->add_option("--save-session", srv.save_session, "Write the final session configuration here");
  serve->add_option("--rate", srv.rate, "Device stream rate in Hz")->check(CLI::PositiveNumber)->capture_default_str();
  serve->add_flag("--fast", srv.fast, "Play files as fast as possible instead of in real time");
  serve->add_option("--max-frames", srv.max_frames, "Stop after this many frames");
  serve->add_option("--duration", srv.duration, "Stop after this many seconds")->check(CLI::NonNegativeNumber);
  serve->add_option("--smoothing", srv.smoothing, "Smoothing window (odd, overrides the session)")
      ->check(CLI::PositiveNumber)
      ->check(CLI::Validator([](std::string& s) { return std::stoi(s) % 2 == 1 ? "" : "must be odd"; }, "ODD"));
  serve->add_option("--delay", srv.delay, "Output delay in seconds (overrides the session)")
      ->check(CLI::NonNegativeNumber);

  FitPalateArgs fit;
  auto* fit_palate = app.add_subcommand("fit-palate", "Fit palate weights to a recorded trace");
  fit_palate->add_option("model", fit.model, "Palate model file")->required();
  fit_palate->add_option("trace", fit.trace, "Trace sweep file")->required();
  fit_palate->add_option("--out", fit.out, "Output weights JSON")->required();
  fit_palate->add_option("--session", fit.session, "Session used to normalize the trace");
  fit_palate->add_option("--coil", fit.coil, "Trace coil id (default: session trace coil, else tt)");
  fit_palate->add_option("--prior", fit.prior, "Prior weight")->check(CLI::NonNegativeNumber)->capture_default_str();
  fit_palate->add_option("--iterations", fit.iterations, "Outer iterations")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  ExportArgs exp;
  auto* export_cmd = app.add_subcommand("export", "Track a sweep offline and write one mesh per frame");
  export_cmd->add_option("model", exp.model, "Tongue model file")->required();
  export_cmd->add_option("sweep", exp.sweep, "Sweep file")->required();
  export_cmd->add_option("--out", exp.out, "Output directory")->required();
  export_cmd->add_option("--format", exp.format, "Mesh format")->check(CLI::IsMember({"obj"}))->capture_default_str();
  export_cmd->add_option("--session", exp.session, "Session with reference pose and bite plane");

  CalibrateArgs cal;
  auto* calibrate = app.add_subcommand("calibrate", "Record reference pose, bite plane and palate trace from a sweep");
  calibrate->add_option("sweep", cal.sweep, "Sweep file")->required();
  calibrate->add_option("--models", cal.models, "Model directory")->required()->check(CLI::ExistingDirectory);
  calibrate->add_option("--session", cal.session, "Starting session (default: synthetic coil roles)");
  calibrate->add_option("--out", cal.out, "Output session file")->required();
  calibrate->add_option("--reference", cal.reference, "Reference-pose window T0,T1 (s)")
      ->delimiter(',')
      ->expected(2)
      ->capture_default_str();
  calibrate->add_option("--bite", cal.bite, "Bite-plane window T0,T1 (s)")->delimiter(',')->expected(2)->capture_default_str();
  calibrate->add_option("--palate", cal.palate, "Palate-trace window T0,T1 (s)")->delimiter(',')->expected(2);

  ModelShape shape;
  std::string models_dir;
  auto* gen_models = app.add_subcommand("generate-models", "Write synthetic tongue and palate models and a session");
  gen_models->add_option("--out", models_dir, "Output directory")->required();
  gen_models->add_option("--seed", shape.seed, "Seed")->capture_default_str();
  gen_models->add_option("--n", shape.n, "Anatomy weights")->check(CLI::PositiveNumber)->capture_default_str();
  gen_models->add_option("--m", shape.m, "Pose weights")->check(CLI::PositiveNumber)->capture_default_str();
  gen_models->add_option("--grid", shape.grid, "Tongue grid size")->check(CLI::Range(4, 1000))->capture_default_str();
  gen_models->add_option("--palate-n", shape.palate_n, "Palate weights")->check(CLI::PositiveNumber)->capture_default_str();
  gen_models->add_option("--palate-grid", shape.palate_grid, "Palate grid size")
      ->check(CLI::Range(2, 1000))
      ->capture_default_str();

  SweepArgs sw;
  auto* gen_sweep = app.add_subcommand("generate-sweep", "Record a synthetic device to a sweep file");
  gen_sweep->add_option("--out", sw.out, "Output sweep (.jsonl or .csv)")->required();
  gen_sweep->add_option("--models", sw.models, "Model directory (default: built-in synthetic model)")
      ->check(CLI::ExistingDirectory);
  gen_sweep->add_option("--seed", sw.seed, "Seed")->capture_default_str();
  gen_sweep->add_option("--frames", sw.frames, "Frames")->capture_default_str();
  gen_sweep->add_option("--rate", sw.rate, "Rate in Hz")->check(CLI::PositiveNumber)->capture_default_str();
  gen_sweep->add_option("--noise", sw.noise, "Noise (mm)")->check(CLI::NonNegativeNumber)->capture_default_str();
  gen_sweep->add_option("--dropout", sw.dropout, "Dropout probability")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  gen_sweep->add_option("--head-rotation", sw.head_rotation, "Peak head rotation (rad)")->capture_default_str();
  gen_sweep->add_option("--head-translation", sw.head_translation, "Peak head translation (mm)")->capture_default_str();
  gen_sweep->add_option("--pose-amplitude", sw.pose_amplitude, "Pose excursion (sigma units)")->capture_default_str();

  TraceArgs tr;
  auto* gen_trace = app.add_subcommand("generate-trace", "Sample a palate trace from a palate model");
  gen_trace->add_option("model", tr.model, "Palate model file")->required();
  gen_trace->add_option("--out", tr.out, "Output sweep")->required();
  gen_trace->add_option("--weights", tr.weights, "Palate weights (default: mean shape)")->delimiter(',');
  gen_trace->add_option("--points", tr.points, "Trace points")->check(CLI::PositiveNumber)->capture_default_str();
  gen_trace->add_option("--seed", tr.seed, "Seed")->capture_default_str();
  gen_trace->add_option("--coil", tr.coil, "Coil id")->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
    if (simulate->parsed() && sim.sweep.empty() && !sim.synthetic) {
      throw CLI::RequiredError("simulate needs a sweep file or --synthetic SEED");
    }
    if (serve->parsed() && srv.device.empty() && srv.file.empty()) {
      throw CLI::RequiredError("serve needs --device or --file");
    }
  } catch (const CLI::CallForHelp&) {
    // The top-level help lists every subcommand flag.
    const CLI::App* target = &app;
    for (const auto* sub : app.get_subcommands()) target = sub;
    out << (target == &app ? app.help("", CLI::AppFormatMode::All) : target->help());
    return 0;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (simulate->parsed()) return cmd_simulate(sim, out, err);
    if (serve->parsed()) return cmd_serve(srv, out, err);
    if (fit_palate->parsed()) return cmd_fit_palate(fit, out, err);
    if (export_cmd->parsed()) return cmd_export(exp, out, err);
    if (calibrate->parsed()) return cmd_calibrate(cal, out);
    if (gen_models->parsed()) return cmd_generate_models(shape, models_dir, out);
    if (gen_sweep->parsed()) return cmd_generate_sweep(sw, out);
    if (gen_trace->parsed()) return cmd_generate_trace(tr, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << std::endl;
    return 1;
  }
  return 2;
}

}  // namespace articfeed::cli
