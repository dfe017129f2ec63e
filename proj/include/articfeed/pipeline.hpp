#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "articfeed/fitting.hpp"
#include "articfeed/models.hpp"
#include "articfeed/stream.hpp"

namespace articfeed::pipeline {

using geometry::RigidTransform;
using geometry::Vec3;
using stream::CoilFrame;
using stream::CoilSample;

// ---------------------------------------------------------------------------
// Session configuration

inline constexpr std::string_view kRecordedOrigin = "recorded";

struct CoilRoles {
  std::vector<std::string> reference;
  std::vector<models::Correspondence> tongue;
  std::string bite_left;
  std::string bite_right;
  std::string bite_front;
  /// Coil id, or "recorded" for a separately recorded origin point.
  std::string origin = std::string(kRecordedOrigin);
  std::optional<std::string> jaw;
  std::optional<std::string> upper_lip;
  std::optional<std::string> lower_lip;
  /// Coil that traces the palate; defaults to the first tongue coil.
  std::optional<std::string> trace;

  std::string trace_coil() const;
  bool origin_is_recorded() const { return origin == kRecordedOrigin; }
  /// Throws InvalidArgument.
  void validate() const;
};

/// Roles matching the synthetic source's coil layout, with the given tongue coils.
CoilRoles synthetic_roles(std::vector<models::Correspondence> tongue);

std::string roles_to_json(const CoilRoles& roles);
/// Throws FormatError.
CoilRoles roles_from_json(const std::string& text);

struct TrackerSettings {
  double alpha_prior = 0.1;
  double beta_temporal = 1.0;
  int freeze_after = 200;
  fitting::SolverOptions solver;
};

struct SessionConfig {
  CoilRoles roles;
  /// Reference-coil positions in device coordinates; empty until captured.
  std::map<std::string, Vec3> reference_pose;
  /// Head-corrected -> canonical.
  std::optional<RigidTransform> bite_transform;
  /// Recorded origin in head-corrected coordinates (origin role "recorded").
  std::optional<Vec3> origin_point;
  std::optional<Eigen::VectorXd> palate_weights;
  std::optional<double> palate_residual;
  int smoothing_window = 5;
  double delay = 0.0;
  /// Optional affine applied after bite normalization.
  std::optional<Eigen::Matrix4d> transform;
  TrackerSettings tracker;
  /// Set when the user skips the optional palate trace.
  bool palate_skipped = false;

  /// Throws InvalidArgument.
  void validate() const;
  fitting::TrackerConfig tracker_config() const;
};

std::string session_to_json(const SessionConfig& cfg);
/// Throws FormatError (schema) or InvalidArgument (values).
SessionConfig session_from_json(const std::string& text);
SessionConfig load_session(const std::filesystem::path& path);
void save_session(const std::filesystem::path& path, const SessionConfig& cfg);

// ---------------------------------------------------------------------------
// Per-frame operations

struct HeadCorrection {
  CoilFrame frame;
  /// Fewer than 3 reference coils visible; the frame is passed through unmodified.
  bool insufficient_reference = false;
};

/// Rigidly maps the frame so that its visible reference coils best match
/// `reference_pose`. Throws NoReferencePose when the pose is empty.
HeadCorrection head_correct(const CoilFrame& frame, const CoilRoles& roles,
                            const std::map<std::string, Vec3>& reference_pose);

/// Bite-plane transform followed by the optional affine. Dropped coils are left alone.
CoilFrame normalize(const CoilFrame& frame, const SessionConfig& cfg);

/// Causal mean over the last `window` valid samples of each coil. Dropped
/// samples stay dropped and do not enter the history.
class Smoother {
 public:
  explicit Smoother(int window = 5);
  CoilFrame process(const CoilFrame& frame);
  int window() const { return window_; }
  void reset() { history_.clear(); }

 private:
  int window_;
  std::map<std::string, std::deque<Vec3>> history_;
};

/// Averages head-corrected bite (and origin) coils over the task frames and
/// sets bite_transform. Frames without enough reference coils are skipped.
/// Throws NoReferencePose, BiteCoilsMissing (visible in < 50% of frames),
/// OriginMissing, CollinearPoints.
SessionConfig record_bite_plane(const SessionConfig& cfg, std::span<const CoilFrame> frames);

/// Mean head-corrected position of the trace coil; stored as origin_point.
/// Throws NoReferencePose, EmptyTrace.
SessionConfig record_origin(const SessionConfig& cfg, std::span<const CoilFrame> frames);

/// Fits the palate model to the normalized trace-coil positions.
/// Throws NoBitePlane, EmptyTrace.
SessionConfig record_palate_trace(const SessionConfig& cfg, std::span<const CoilFrame> frames,
                                  const models::PcaModel& palate);

/// Mean position of each reference coil over the frames (device coordinates).
/// Throws InsufficientReference if a reference coil is never visible.
std::map<std::string, Vec3> capture_reference_pose(const CoilRoles& roles, std::span<const CoilFrame> frames);

// ---------------------------------------------------------------------------
// Processing core

struct Models {
  std::shared_ptr<const models::MultilinearModel> tongue;
  /// Optional; without it the palate task is unavailable.
  std::shared_ptr<const models::PcaModel> palate;
};

enum class Phase { Setup, BitePlane, Palate, Live };
enum class Task { Reference, Origin, BitePlane, Palate };

const char* to_string(Phase phase);
const char* to_string(Task task);
/// Throws InvalidArgument.
Task task_from_string(std::string_view name);

struct ProcessedFrame {
  std::uint64_t seq = 0;
  double t = 0.0;
  /// Head-corrected, normalized, smoothed.
  std::vector<CoilSample> coils;
  Eigen::VectorXd x;
  Eigen::VectorXd y;
  /// 3V flat; empty while the tongue is not tracked (before the bite plane exists).
  Eigen::VectorXd vertices;
  double fit_residual = 0.0;
  int solver_iterations = 0;
  bool tracked = false;
  bool insufficient_reference = false;
  bool no_visible_coils = false;
};

/// Single-threaded processing state machine. Reference pose: if none is
/// configured, the first second of data is captured automatically.
class Pipeline {
 public:
  Pipeline(SessionConfig cfg, Models models);

  ProcessedFrame process(const CoilFrame& raw);

  Phase phase() const;
  std::optional<Task> active_task() const { return task_; }
  const SessionConfig& config() const { return cfg_; }
  const Models& models() const { return models_; }
  const fitting::TrackerState& tracker() const { return tracker_; }

  /// Throws InvalidState (another task running, or no palate model),
  /// NoReferencePose, NoBitePlane.
  void start_task(Task task);
  /// Finishes the active task from the frames seen since start. On error the
  /// configuration is unchanged and the task is cancelled.
  void stop_task();
  void cancel_task();
  /// Marks the optional palate trace as skipped. Throws NoBitePlane.
  void skip_palate();

  void set_roles(CoilRoles roles);
  void set_smoothing_window(int window);
  void set_delay(double seconds);

  /// Bumped whenever the phase, roles, task or palate change.
  std::uint64_t revision() const { return revision_; }

 private:
  void reset_tracking();

  SessionConfig cfg_;
  Models models_;
  Smoother smoother_;
  fitting::TrackerState tracker_;
  std::optional<Task> task_;
  std::vector<CoilFrame> task_frames_;
  std::vector<CoilFrame> auto_reference_;
  std::optional<double> first_t_;
  std::uint64_t revision_ = 0;
};

// ---------------------------------------------------------------------------
// Visualization messages (WebSocket text frames)

std::string hello_message();
std::string mesh_message(std::string_view name, const Eigen::VectorXd& vertices, const std::vector<geometry::Face>& faces);
std::string frame_message(const ProcessedFrame& frame);
std::string state_message(const Pipeline& pipeline);
std::string error_message(std::string_view code, std::string_view message);

struct SetRoles {
  CoilRoles roles;
};
struct TaskCommand {
  Task task;
  /// "start", "stop", or "skip" (palate only).
  std::string action;
};
struct Play {
  std::string source;  // "device" or "file"
  std::string path;    // file path or host:port
};
struct StopPlayback {};
struct SetValue {
  std::string key;  // "smoothing_window" or "delay"
  double value = 0.0;
};
using ClientMessage = std::variant<SetRoles, TaskCommand, Play, StopPlayback, SetValue>;

/// Throws ProtocolError.
ClientMessage parse_client_message(std::string_view text);

// ---------------------------------------------------------------------------
// Sinks

struct SinkItem {
  std::shared_ptr<const CoilFrame> raw;
  std::shared_ptr<const ProcessedFrame> processed;
  std::shared_ptr<const std::string> message;  // frame_message(processed)
};

class FrameSink {
 public:
  virtual ~FrameSink() = default;
  virtual std::string name() const = 0;
  /// May throw; the sink is then disconnected.
  virtual void consume(const SinkItem& item) = 0;
  virtual void close() {}
};

enum class Backpressure { DropOldest, Block };

/// Writes the raw and the processed coil streams as sweep files.
class RecorderSink : public FrameSink {
 public:
  RecorderSink(const std::filesystem::path& raw_path, const std::filesystem::path& processed_path,
               const stream::SweepHeader& header);
  std::string name() const override { return "recorder"; }
  void consume(const SinkItem& item) override;
  void close() override;

 private:
  stream::SweepWriter raw_;
  stream::SweepWriter processed_;
};

class CallbackSink : public FrameSink {
 public:
  using Callback = std::function<void(const SinkItem&)>;
  CallbackSink(std::string name, Callback fn) : name_(std::move(name)), fn_(std::move(fn)) {}
  std::string name() const override { return name_; }
  void consume(const SinkItem& item) override { fn_(item); }

 private:
  std::string name_;
  Callback fn_;
};

// ---------------------------------------------------------------------------
// WebSocket broadcast

class BroadcastServer {
 public:
  /// Messages sent to a client right after it connects.
  using Greeting = std::function<std::vector<std::string>()>;
  /// Called on the network thread with each client text message.
  using Handler = std::function<void(const std::string&)>;

  BroadcastServer(Greeting greeting, Handler handler, std::size_t queue_limit = 16);
  ~BroadcastServer();
  BroadcastServer(const BroadcastServer&) = delete;
  BroadcastServer& operator=(const BroadcastServer&) = delete;

  /// Throws IoError on bind failure.
  void start(const stream::Endpoint& bind);
  void stop();
  std::uint16_t port() const;
  /// Droppable messages are discarded oldest-first for clients that fall behind.
  void broadcast(std::string message, bool droppable);
  std::size_t client_count() const;
  std::uint64_t dropped() const;

  struct Impl;

 private:
  std::shared_ptr<Impl> impl_;
};

class BroadcastSink : public FrameSink {
 public:
  explicit BroadcastSink(BroadcastServer& server) : server_(server) {}
  std::string name() const override { return "broadcast"; }
  void consume(const SinkItem& item) override { server_.broadcast(*item.message, true); }

 private:
  BroadcastServer& server_;
};

// ---------------------------------------------------------------------------
// Session runner

struct SessionReport {
  std::uint64_t frames = 0;
  /// Frames missing from the source sequence (seq gaps).
  std::uint64_t dropouts = 0;
  /// Individual coil samples reported as not ok.
  std::uint64_t coil_dropouts = 0;
  std::uint64_t tracked_frames = 0;
  std::uint64_t insufficient_reference = 0;
  std::uint64_t no_visible_coils = 0;
  double latency_p50_ms = 0.0;
  double latency_p99_ms = 0.0;
  double latency_max_ms = 0.0;
  double duration_s = 0.0;
  std::uint64_t broadcast_dropped = 0;
  double recorder_blocked_ms = 0.0;
  std::vector<std::string> failed_sinks;
  /// "source exhausted", "stopped", "limit", "connection lost: ...".
  std::string ended_by;
  std::string phase;

  std::string to_json() const;
  /// key=value lines.
  std::string to_text() const;
};

struct RunLimits {
  std::uint64_t max_frames = 0;  // 0 = unbounded
  double max_seconds = 0.0;      // 0 = unbounded
};

/// Threaded runner: an ingestion thread reads the source, the calling thread
/// processes, and each sink drains its own bounded queue.
class Session {
 public:
  Session(SessionConfig cfg, Models models);
  ~Session();

  void add_sink(std::shared_ptr<FrameSink> sink, Backpressure policy, std::size_t capacity = 64);
  /// Receives state, mesh and error messages as they happen.
  void on_event(std::function<void(const std::string&)> fn);

  /// Thread-safe: queue a client message for the processing thread.
  void post(std::string client_message);
  /// Thread-safe: ends the current run.
  void request_stop();
  /// Thread-safe snapshot of the greeting (hello, meshes, state).
  std::vector<std::string> greeting() const;

  SessionReport run(stream::FrameSource& source, const RunLimits& limits = {});

  /// A "play" message received during the last run, if any.
  std::optional<Play> take_play_request();
  const Pipeline& pipeline() const { return pipeline_; }
  Pipeline& pipeline() { return pipeline_; }

 private:
  struct Shared;
  void handle(const std::string& text);
  void emit(const std::string& message);
  void refresh_greeting();

  Pipeline pipeline_;
  std::unique_ptr<Shared> shared_;
};

/// Convenience wrapper: runs one source through a fresh session.
SessionReport run_session(stream::FrameSource& source, SessionConfig& cfg, const Models& models,
                          std::vector<std::pair<std::shared_ptr<FrameSink>, Backpressure>> sinks,
                          const RunLimits& limits = {});

}  // namespace articfeed::pipeline
