#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "articfeed/pipeline.hpp"

namespace articfeed::pipeline {

using clock_type = std::chrono::steady_clock;

RecorderSink::RecorderSink(const std::filesystem::path& raw_path, const std::filesystem::path& processed_path,
                           const stream::SweepHeader& header)
    : raw_(raw_path, header), processed_(processed_path, header) {}

void RecorderSink::consume(const SinkItem& item) {
  raw_.write(*item.raw);
  CoilFrame processed;
  processed.seq = item.processed->seq;
  processed.t = item.processed->t;
  processed.coils = item.processed->coils;
  processed_.write(processed);
}

void RecorderSink::close() {
  raw_.close();
  processed_.close();
}

// ---------------------------------------------------------------------------

namespace {

class SinkRunner {
 public:
  SinkRunner(std::shared_ptr<FrameSink> sink, Backpressure policy, std::size_t capacity)
      : sink_(std::move(sink)), policy_(policy), capacity_(std::max<std::size_t>(capacity, 1)) {}

  ~SinkRunner() { finish(); }

  void begin() {
    std::lock_guard lock(mutex_);
    if (thread_.joinable() || failed_) return;
    closing_ = false;
    thread_ = std::thread([this] { loop(); });
  }

  void push(SinkItem item) {
    std::unique_lock lock(mutex_);
    if (failed_ || !thread_.joinable()) return;
    if (queue_.size() >= capacity_) {
      if (policy_ == Backpressure::DropOldest) {
        queue_.pop_front();
        ++dropped_;
      } else {
        const auto t0 = clock_type::now();
        space_.wait(lock, [this] { return queue_.size() < capacity_ || failed_; });
        blocked_ += clock_type::now() - t0;
        if (failed_) return;
      }
    }
    queue_.push_back(std::move(item));
    ready_.notify_one();
  }

  // Drains the queue and joins the worker.
  void finish() {
    {
      std::lock_guard lock(mutex_);
      closing_ = true;
      ready_.notify_all();
    }
    if (thread_.joinable()) thread_.join();
  }

  void close() {
    finish();
    try {
      sink_->close();
    } catch (const std::exception& e) {
      spdlog::error("sink '{}' failed to close: {}", sink_->name(), e.what());
    }
  }

  std::string name() const { return sink_->name(); }
  bool failed() const {
    std::lock_guard lock(mutex_);
    return failed_;
  }
  std::uint64_t dropped() const {
    std::lock_guard lock(mutex_);
    return dropped_;
  }
  double blocked_ms() const {
    std::lock_guard lock(mutex_);
    return std::chrono::duration<double, std::milli>(blocked_).count();
  }
  Backpressure policy() const { return policy_; }

 private:
  void loop() {
    for (;;) {
      SinkItem item;
      {
        std::unique_lock lock(mutex_);
        ready_.wait(lock, [this] { return !queue_.empty() || closing_; });
        if (queue_.empty()) return;
        item = std::move(queue_.front());
        queue_.pop_front();
        space_.notify_all();
      }
      try {
        sink_->consume(item);
      } catch (const std::exception& e) {
        spdlog::error("sink '{}' disconnected: {}", sink_->name(), e.what());
        std::lock_guard lock(mutex_);
        failed_ = true;
        queue_.clear();
        space_.notify_all();
        return;
      }
    }
  }

  std::shared_ptr<FrameSink> sink_;
  Backpressure policy_;
  std::size_t capacity_;
  mutable std::mutex mutex_;
  std::condition_variable ready_;
  std::condition_variable space_;
  std::deque<SinkItem> queue_;
  std::thread thread_;
  bool closing_ = false;
  bool failed_ = false;
  std::uint64_t dropped_ = 0;
  clock_type::duration blocked_{};
};

double percentile(std::vector<double> values, double p) {
  if (values.empty()) return 0.0;
  const auto k = static_cast<std::size_t>(std::ceil(p * static_cast<double>(values.size()))) - 1;
  const auto idx = std::min(k, values.size() - 1);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(idx), values.end());
  return values[idx];
}

}  // namespace

// ---------------------------------------------------------------------------

struct Session::Shared {
  struct Arrival {
    CoilFrame frame;
    clock_type::time_point arrived;
  };

  std::mutex mutex;
  std::condition_variable cv;
  std::deque<Arrival> frames;
  std::deque<std::string> inbox;
  bool ingest_done = false;
  std::string ingest_end;
  std::exception_ptr ingest_error;
  bool stop = false;
  std::string stop_reason;
  stream::FrameSource* source = nullptr;
  std::optional<Play> play;

  mutable std::mutex greeting_mutex;
  std::vector<std::string> greeting;

  std::mutex event_mutex;
  std::function<void(const std::string&)> on_event;

  std::vector<std::unique_ptr<SinkRunner>> sinks;
};

Session::Session(SessionConfig cfg, Models models)
    : pipeline_(std::move(cfg), std::move(models)), shared_(std::make_unique<Shared>()) {
  refresh_greeting();
}

Session::~Session() {
  for (auto& s : shared_->sinks) s->close();
}

void Session::add_sink(std::shared_ptr<FrameSink> sink, Backpressure policy, std::size_t capacity) {
  if (!sink) throw Error(Errc::InvalidArgument, "null sink");
  shared_->sinks.push_back(std::make_unique<SinkRunner>(std::move(sink), policy, capacity));
}

void Session::on_event(std::function<void(const std::string&)> fn) {
  std::lock_guard lock(shared_->event_mutex);
  shared_->on_event = std::move(fn);
}

void Session::emit(const std::string& message) {
  std::function<void(const std::string&)> fn;
  {
    std::lock_guard lock(shared_->event_mutex);
    fn = shared_->on_event;
  }
  if (fn) fn(message);
}

void Session::post(std::string client_message) {
  std::lock_guard lock(shared_->mutex);
  shared_->inbox.push_back(std::move(client_message));
  shared_->cv.notify_all();
}

void Session::request_stop() {
  std::lock_guard lock(shared_->mutex);
  if (!shared_->stop) {
    shared_->stop = true;
    if (shared_->stop_reason.empty()) shared_->stop_reason = "stopped";
  }
  if (shared_->source != nullptr) shared_->source->interrupt();
  shared_->cv.notify_all();
}

std::vector<std::string> Session::greeting() const {
  std::lock_guard lock(shared_->greeting_mutex);
  return shared_->greeting;
}

std::optional<Play> Session::take_play_request() {
  std::lock_guard lock(shared_->mutex);
  auto play = std::move(shared_->play);
  shared_->play.reset();
  return play;
}

void Session::refresh_greeting() {
  std::vector<std::string> g;
  g.push_back(hello_message());
  const auto& tongue = *pipeline_.models().tongue;
  g.push_back(mesh_message("tongue", tongue.mean, tongue.faces));
  if (const auto& palate = pipeline_.models().palate) {
    const Eigen::VectorXd x = pipeline_.config().palate_weights.value_or(Eigen::VectorXd::Zero(palate->dims()));
    g.push_back(mesh_message("palate", models::reconstruct_pca_flat(*palate, x), palate->faces));
  }
  g.push_back(state_message(pipeline_));
  std::lock_guard lock(shared_->greeting_mutex);
  shared_->greeting = std::move(g);
}

void Session::handle(const std::string& text) {
  try {
    const ClientMessage msg = parse_client_message(text);
    if (const auto* m = std::get_if<SetRoles>(&msg)) {
      pipeline_.set_roles(m->roles);
    } else if (const auto* m = std::get_if<TaskCommand>(&msg)) {
      if (m->action == "start") {
        pipeline_.start_task(m->task);
      } else if (m->action == "skip") {
        pipeline_.skip_palate();
      } else {
        if (pipeline_.active_task() != m->task) {
          throw Error(Errc::InvalidState, std::string("task '") + to_string(m->task) + "' is not running");
        }
        pipeline_.stop_task();
      }
    } else if (const auto* m = std::get_if<Play>(&msg)) {
      {
        std::lock_guard lock(shared_->mutex);
        shared_->play = *m;
        shared_->stop_reason = "play";
      }
      request_stop();
    } else if (std::holds_alternative<StopPlayback>(msg)) {
      {
        std::lock_guard lock(shared_->mutex);
        shared_->stop_reason = "stopped";
      }
      request_stop();
    } else if (const auto* m = std::get_if<SetValue>(&msg)) {
      if (m->key == "smoothing_window") {
        if (m->value != std::floor(m->value)) throw Error(Errc::InvalidArgument, "smoothing_window must be an integer");
        pipeline_.set_smoothing_window(static_cast<int>(m->value));
      } else {
        pipeline_.set_delay(m->value);
      }
    }
  } catch (const Error& e) {
    spdlog::warn("client message rejected: {}", e.what());
    emit(error_message(to_string(e.code()), e.what()));
  }
}

SessionReport Session::run(stream::FrameSource& source, const RunLimits& limits) {
  Shared& sh = *shared_;
  {
    std::lock_guard lock(sh.mutex);
    sh.frames.clear();
    sh.ingest_done = false;
    sh.ingest_end.clear();
    sh.ingest_error = nullptr;
    sh.stop = false;
    sh.stop_reason.clear();
    sh.source = &source;
  }
  for (auto& s : sh.sinks) s->begin();

  const auto started = clock_type::now();
  std::thread ingest([&] {
    std::string end = "source exhausted";
    std::exception_ptr error;
    try {
      for (;;) {
        {
          std::lock_guard lock(sh.mutex);
          if (sh.stop) break;
        }
        auto frame = source.next();
        if (!frame) break;
        const auto arrived = clock_type::now();
        std::lock_guard lock(sh.mutex);
        sh.frames.push_back({std::move(*frame), arrived});
        sh.cv.notify_all();
      }
    } catch (const Error& e) {
      if (e.code() == Errc::ConnectionLost) {
        end = std::string("connection lost: ") + e.what();
      } else {
        error = std::current_exception();
        end = std::string("source error: ") + e.what();
      }
    } catch (const std::exception& e) {
      error = std::current_exception();
      end = std::string("source error: ") + e.what();
    }
    std::lock_guard lock(sh.mutex);
    sh.ingest_done = true;
    sh.ingest_end = end;
    sh.ingest_error = error;
    sh.cv.notify_all();
  });

  SessionReport report;
  std::vector<double> latencies;
  std::optional<std::uint64_t> last_seq;
  std::uint64_t seen_revision = pipeline_.revision();
  bool palate_known = pipeline_.config().palate_weights.has_value();
  Eigen::VectorXd palate_seen = pipeline_.config().palate_weights.value_or(Eigen::VectorXd());
  std::string ended_by;

  auto drain_inbox = [&](std::unique_lock<std::mutex>& lock) {
    while (!sh.inbox.empty()) {
      const std::string text = std::move(sh.inbox.front());
      sh.inbox.pop_front();
      lock.unlock();
      handle(text);
      lock.lock();
    }
  };

  auto publish_changes = [&] {
    if (pipeline_.revision() == seen_revision) return;
    seen_revision = pipeline_.revision();
    refresh_greeting();
    const auto& w = pipeline_.config().palate_weights;
    if (pipeline_.models().palate && w && (!palate_known || palate_seen.size() != w->size() || palate_seen != *w)) {
      palate_known = true;
      palate_seen = *w;
      emit(mesh_message("palate", models::reconstruct_pca_flat(*pipeline_.models().palate, *w),
                        pipeline_.models().palate->faces));
    }
    emit(state_message(pipeline_));
  };

  for (;;) {
    std::optional<Shared::Arrival> item;
    {
      std::unique_lock lock(sh.mutex);
      sh.cv.wait(lock, [&] { return !sh.frames.empty() || !sh.inbox.empty() || sh.ingest_done || sh.stop; });
      drain_inbox(lock);
      if (sh.stop) {
        ended_by = sh.stop_reason;
        break;
      }
      if (sh.frames.empty()) {
        if (sh.ingest_done) {
          ended_by = sh.ingest_end;
          break;
        }
        lock.unlock();
        publish_changes();
        continue;
      }
      item = std::move(sh.frames.front());
      sh.frames.pop_front();

      // Frames keep their timestamps; only their release is held back.
      const auto due = item->arrived + std::chrono::duration_cast<clock_type::duration>(
                                           std::chrono::duration<double>(pipeline_.config().delay));
      while (clock_type::now() < due && !sh.stop) {
        sh.cv.wait_until(lock, due, [&] { return sh.stop || !sh.inbox.empty(); });
        drain_inbox(lock);
      }
      if (sh.stop) {
        ended_by = sh.stop_reason;
        break;
      }
    }
    publish_changes();

    const CoilFrame& raw = item->frame;
    if (last_seq && raw.seq > *last_seq + 1) report.dropouts += raw.seq - *last_seq - 1;
    last_seq = raw.seq;
    for (const auto& c : raw.coils) report.coil_dropouts += c.ok ? 0 : 1;

    const auto t0 = clock_type::now();
    auto processed = std::make_shared<ProcessedFrame>(pipeline_.process(raw));
    auto message = std::make_shared<std::string>(frame_message(*processed));
    latencies.push_back(std::chrono::duration<double, std::milli>(clock_type::now() - t0).count());

    ++report.frames;
    report.tracked_frames += processed->tracked ? 1 : 0;
    report.insufficient_reference += processed->insufficient_reference ? 1 : 0;
    report.no_visible_coils += processed->no_visible_coils ? 1 : 0;

    SinkItem sink_item{std::make_shared<const CoilFrame>(raw), processed, message};
    for (auto& s : sh.sinks) s->push(sink_item);
    publish_changes();

    const double elapsed = std::chrono::duration<double>(clock_type::now() - started).count();
    if ((limits.max_frames != 0 && report.frames >= limits.max_frames) ||
        (limits.max_seconds > 0.0 && elapsed >= limits.max_seconds)) {
      ended_by = "limit";
      break;
    }
  }

  {
    std::lock_guard lock(sh.mutex);
    sh.stop = true;
    sh.source = nullptr;
  }
  source.interrupt();
  ingest.join();
  for (auto& s : sh.sinks) s->finish();

  report.ended_by = ended_by;
  report.duration_s = std::chrono::duration<double>(clock_type::now() - started).count();
  report.latency_p50_ms = percentile(latencies, 0.50);
  report.latency_p99_ms = percentile(latencies, 0.99);
  report.latency_max_ms = latencies.empty() ? 0.0 : *std::max_element(latencies.begin(), latencies.end());
  for (const auto& s : sh.sinks) {
    if (s->failed()) report.failed_sinks.push_back(s->name());
    if (s->policy() == Backpressure::DropOldest) report.broadcast_dropped += s->dropped();
    if (s->policy() == Backpressure::Block) report.recorder_blocked_ms += s->blocked_ms();
  }
  report.phase = to_string(pipeline_.phase());

  std::exception_ptr error;
  {
    std::lock_guard lock(sh.mutex);
    error = sh.ingest_error;
  }
  if (error && ended_by.rfind("source error", 0) == 0) std::rethrow_exception(error);
  return report;
}

std::string SessionReport::to_json() const {
  return nlohmann::json{{"frames", frames},
                        {"dropouts", dropouts},
                        {"coil_dropouts", coil_dropouts},
                        {"tracked_frames", tracked_frames},
                        {"insufficient_reference", insufficient_reference},
                        {"no_visible_coils", no_visible_coils},
                        {"latency_p50_ms", latency_p50_ms},
                        {"latency_p99_ms", latency_p99_ms},
                        {"latency_max_ms", latency_max_ms},
                        {"duration_s", duration_s},
                        {"broadcast_dropped", broadcast_dropped},
                        {"recorder_blocked_ms", recorder_blocked_ms},
                        {"failed_sinks", failed_sinks},
                        {"ended_by", ended_by},
                        {"phase", phase}}
      .dump(2);
}

std::string SessionReport::to_text() const {
  std::ostringstream out;
  out << "frames=" << frames << '\n'
      << "dropouts=" << dropouts << '\n'
      << "coil_dropouts=" << coil_dropouts << '\n'
      << "tracked_frames=" << tracked_frames << '\n'
      << "latency_p50_ms=" << latency_p50_ms << '\n'
      << "latency_p99_ms=" << latency_p99_ms << '\n'
      << "latency_max_ms=" << latency_max_ms << '\n'
      << "broadcast_dropped=" << broadcast_dropped << '\n'
      << "recorder_blocked_ms=" << recorder_blocked_ms << '\n'
      << "phase=" << phase << '\n'
      << "ended_by=" << ended_by << '\n';
  return out.str();
}

SessionReport run_session(stream::FrameSource& source, SessionConfig& cfg, const Models& models,
                          std::vector<std::pair<std::shared_ptr<FrameSink>, Backpressure>> sinks,
                          const RunLimits& limits) {
  SessionReport report;
  {
    Session session(cfg, models);
    for (auto& [sink, policy] : sinks) session.add_sink(std::move(sink), policy);
    report = session.run(source, limits);
    cfg = session.pipeline().config();
  }
  return report;
}

}  // namespace articfeed::pipeline
