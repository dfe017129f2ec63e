#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <Eigen/Geometry>

#include "articfeed/geometry.hpp"
#include "articfeed/models.hpp"

namespace articfeed::stream {

using geometry::Vec3;

struct CoilSample {
  std::string id;
  Vec3 pos = Vec3::Zero();
  std::optional<Eigen::Quaterniond> ori;
  bool ok = true;
};

struct CoilFrame {
  std::uint64_t seq = 0;
  double t = 0.0;
  std::vector<CoilSample> coils;

  const CoilSample* find(std::string_view id) const;
  CoilSample* find(std::string_view id);
  /// Throws FormatError on duplicate ids or non-unit orientations.
  void validate() const;
};

struct SweepHeader {
  double rate = 100.0;
  std::vector<std::string> coil_ids;

  void validate() const;
};

struct Sweep {
  SweepHeader header;
  std::vector<CoilFrame> frames;
};

// ---------------------------------------------------------------------------
// Sweep files (.jsonl, .csv)

/// Frames come back ordered by t with seq renumbered from 0. Coils missing
/// from a row become ok=false samples at the origin. Throws FormatError
/// (with the line number) or IoError.
Sweep read_sweep(const std::filesystem::path& path);
void write_sweep(const std::filesystem::path& path, const SweepHeader& header, const std::vector<CoilFrame>& frames);

/// Incremental writer used by recorders; the format follows the extension.
/// Each frame is flushed as it is written.
class SweepWriter {
 public:
  SweepWriter(const std::filesystem::path& path, const SweepHeader& header);
  void write(const CoilFrame& frame);
  void close();

 private:
  enum class Format { Jsonl, Csv };
  std::filesystem::path path_;
  SweepHeader header_;
  Format format_;
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// EMA-RT/1 wire format

inline constexpr std::uint32_t kMaxPayload = 16u * 1024u * 1024u;
inline constexpr std::string_view kProtocolVersion = "EMA-RT/1";

std::string encode_frame(const CoilFrame& frame);
CoilFrame decode_frame(std::string_view payload);
std::string encode_description(const SweepHeader& header);
SweepHeader decode_description(std::string_view payload);
/// 4-byte big-endian length followed by the payload.
std::string make_packet(std::string_view payload);

// ---------------------------------------------------------------------------
// Frame sources

class FrameSource {
 public:
  virtual ~FrameSource() = default;
  virtual SweepHeader describe() = 0;
  /// std::nullopt marks a clean end of data. May block.
  virtual std::optional<CoilFrame> next() = 0;
  /// Unblocks a pending next() from another thread; later calls end the stream.
  virtual void interrupt() {}
};

/// Plays back recorded frames; timestamps come from the file, seq is renumbered.
/// With `realtime`, frames are released on the wall clock at their file timestamps.
class SweepSource : public FrameSource {
 public:
  explicit SweepSource(Sweep sweep, bool realtime = false);
  SweepHeader describe() override { return sweep_.header; }
  std::optional<CoilFrame> next() override;
  void interrupt() override;

 private:
  Sweep sweep_;
  bool realtime_;
  std::size_t cursor_ = 0;
  std::uint64_t seq_ = 0;
  std::optional<std::chrono::steady_clock::time_point> start_;
  std::atomic<bool> interrupted_{false};
};

/// Coil layout and motion of the simulated articulograph.
struct SyntheticConfig {
  std::uint64_t seed = 1;
  double rate = 100.0;
  /// 0 means unbounded.
  std::uint64_t frames = 0;
  std::vector<models::Correspondence> tongue;
  /// Pose excursion around the neutral weights, in sigma units.
  double pose_amplitude = 0.3;
  /// Peak head rotation (rad) and translation (mm); motion starts after `still_time`.
  double head_rotation = 0.05;
  double head_translation = 3.0;
  double still_time = 1.5;
  /// Per-sample probability of a tongue-coil dropout.
  double dropout_probability = 0.0;
  double noise_mm = 0.0;
};

/// Fixed canonical positions of the non-tongue coils.
struct SyntheticLayout {
  static const std::vector<std::pair<std::string, Vec3>>& head_coils();
  static constexpr const char* kReference[3] = {"ref1", "ref2", "ref3"};
  static constexpr const char* kBiteLeft = "bl";
  static constexpr const char* kBiteRight = "br";
  static constexpr const char* kBiteFront = "bf";
  static constexpr const char* kOrigin = "ui";
};

/// Deterministic stand-in for a live articulograph: tongue coils ride on the
/// tongue model at its neutral anatomy, head coils are rigid, and everything
/// is moved through a device placement and smooth head motion.
class SyntheticSource : public FrameSource {
 public:
  SyntheticSource(std::shared_ptr<const models::MultilinearModel> model, SyntheticConfig cfg);
  SweepHeader describe() override;
  std::optional<CoilFrame> next() override;

  /// Ground truth for frame k (canonical coordinates, before device placement).
  Eigen::VectorXd pose_weights(std::uint64_t k) const;
  geometry::RigidTransform device_from_canonical(std::uint64_t k) const;
  CoilFrame canonical_frame(std::uint64_t k) const;

 private:
  std::shared_ptr<const models::MultilinearModel> model_;
  SyntheticConfig cfg_;
  geometry::RigidTransform placement_;
  std::vector<double> phases_;
  std::uint64_t index_ = 0;
  std::mt19937_64 rng_;
};

/// Materializes the first `frames` frames of a synthetic source as a sweep.
Sweep record_synthetic(std::shared_ptr<const models::MultilinearModel> model, SyntheticConfig cfg,
                       std::uint64_t frames);

// ---------------------------------------------------------------------------
// EMA-RT/1 server and client

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

/// "host:port" or ":port" / "port". Throws InvalidArgument.
Endpoint parse_endpoint(std::string_view text);

/// Accepts any number of clients; every connection gets its own source from
/// the factory, so stream positions are independent.
class DeviceServer {
 public:
  using SourceFactory = std::function<std::unique_ptr<FrameSource>()>;

  DeviceServer(SourceFactory factory, double rate);
  ~DeviceServer();
  DeviceServer(const DeviceServer&) = delete;
  DeviceServer& operator=(const DeviceServer&) = delete;

  /// Binds and starts accepting. Throws IoError on bind failure.
  void start(const Endpoint& bind);
  void stop();
  std::uint16_t port() const { return port_; }
  int connections_served() const { return served_.load(); }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::uint16_t port_ = 0;
  std::atomic<int> served_{0};
};

/// Client side of EMA-RT/1. Single consumer; may be moved between threads.
class DeviceClient {
 public:
  /// Connects and performs the HELLO exchange. Throws ConnectionLost.
  explicit DeviceClient(const Endpoint& endpoint);
  ~DeviceClient();
  DeviceClient(const DeviceClient&) = delete;
  DeviceClient& operator=(const DeviceClient&) = delete;

  SweepHeader describe();
  CoilFrame single();
  void start(double rate);
  /// Next streamed frame; std::nullopt after the server reports the end of
  /// its source, after STOP has drained, or after BYE. Throws ConnectionLost
  /// when the socket closes unexpectedly, ProtocolError on malformed data.
  std::optional<CoilFrame> next();
  void stop();
  void bye();
  /// Sends a raw command line and returns the server's reply line.
  std::string command(std::string_view line);
  /// Closes the socket from another thread; a blocked next() throws ConnectionLost.
  void interrupt();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Streams from a device: START on first next(), STOP + BYE on destruction.
class DeviceSource : public FrameSource {
 public:
  DeviceSource(const Endpoint& endpoint, double rate);
  ~DeviceSource() override;
  SweepHeader describe() override { return header_; }
  std::optional<CoilFrame> next() override;
  void interrupt() override;

 private:
  DeviceClient client_;
  SweepHeader header_;
  double rate_;
  bool started_ = false;
  std::atomic<bool> interrupted_{false};
};

}  // namespace articfeed::stream
