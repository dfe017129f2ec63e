#include <charconv>
#include <cmath>
#include <condition_variable>
#include <list>
#include <mutex>
#include <thread>

#include <boost/asio.hpp>
#include <spdlog/spdlog.h>

#include "articfeed/stream.hpp"

namespace articfeed::stream {

namespace asio = boost::asio;
using asio::ip::tcp;

Endpoint parse_endpoint(std::string_view text) {
  Endpoint ep;
  std::string_view port_text = text;
  if (const auto colon = text.rfind(':'); colon != std::string_view::npos) {
    if (colon > 0) ep.host = std::string(text.substr(0, colon));
    port_text = text.substr(colon + 1);
  }
  unsigned value = 0;
  const auto [ptr, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), value);
  if (port_text.empty() || ec != std::errc() || ptr != port_text.data() + port_text.size() || value > 65535) {
    throw Error(Errc::InvalidArgument, "bad endpoint '" + std::string(text) + "' (want host:port)");
  }
  ep.port = static_cast<std::uint16_t>(value);
  return ep;
}

namespace {

std::optional<double> parse_rate(std::string_view text) {
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size()) return std::nullopt;
  if (!std::isfinite(value) || value <= 0.0 || value > 100000.0) return std::nullopt;
  return value;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  return s;
}

// One client connection: a reader loop on the calling thread plus an
// optional streaming thread. Replies and packets share one write lock so a
// reply line is never interleaved with a frame.
class Connection {
 public:
  Connection(tcp::socket socket, DeviceServer::SourceFactory& factory, double default_rate)
      : socket_(std::move(socket)), factory_(factory), default_rate_(default_rate) {}

  void run() {
    try {
      source_ = factory_();
      asio::streambuf buffer;
      for (;;) {
        boost::system::error_code ec;
        const std::size_t n = asio::read_until(socket_, buffer, '\n', ec);
        if (ec) break;
        std::string line(asio::buffers_begin(buffer.data()), asio::buffers_begin(buffer.data()) + n);
        buffer.consume(n);
        if (!handle(trim(line))) break;
      }
    } catch (const std::exception& e) {
      spdlog::warn("device connection ended: {}", e.what());
    }
    halt_stream();
    boost::system::error_code ignored;
    socket_.shutdown(tcp::socket::shutdown_both, ignored);
    done_.store(true);
  }

  void shutdown() {
    halt_signal();
    boost::system::error_code ignored;
    socket_.shutdown(tcp::socket::shutdown_both, ignored);
  }

  bool done() const { return done_.load(); }

 private:
  bool send(const std::string& data) {
    std::lock_guard lock(write_mutex_);
    boost::system::error_code ec;
    asio::write(socket_, asio::buffer(data), ec);
    return !ec;
  }

  bool reply(std::string_view line) { return send(std::string(line) + "\n"); }

  std::optional<CoilFrame> next_frame() {
    auto frame = source_->next();
    if (frame) frame->seq = seq_++;
    return frame;
  }

  // Returns false when the connection should close.
  bool handle(std::string_view line) {
    const auto space = line.find(' ');
    const std::string_view cmd = line.substr(0, space);
    const std::string_view arg = space == std::string_view::npos ? std::string_view{} : trim(line.substr(space + 1));

    if (cmd == "HELLO") {
      if (arg != kProtocolVersion) return reply("ERR 505 unsupported version");
      hello_ = true;
      return reply("OK HELLO");
    }
    if (!hello_) return reply("ERR 426 hello required");

    if (cmd == "DESCRIBE") {
      return send("OK DESCRIBE\n" + make_packet(encode_description(source_->describe())));
    }
    if (cmd == "SINGLE") {
      if (streaming()) return reply("ERR 409 already streaming");
      auto frame = next_frame();
      if (!frame) return reply("ERR 410 source exhausted");
      return send("OK SINGLE\n" + make_packet(encode_frame(*frame)));
    }
    if (cmd == "START") {
      if (streaming()) return reply("ERR 409 already streaming");
      double rate = default_rate_;
      if (!arg.empty()) {
        const auto parsed = parse_rate(arg);
        if (!parsed) return reply("ERR 400 bad rate");
        rate = *parsed;
      }
      {
        std::lock_guard lock(stream_mutex_);
        stop_requested_ = false;
      }
      if (!reply("OK START")) return false;
      streamer_ = std::thread([this, rate] { stream(rate); });
      return true;
    }
    if (cmd == "STOP") {
      halt_stream();
      return reply("OK STOP");
    }
    if (cmd == "BYE") {
      halt_stream();
      reply("OK BYE");
      return false;
    }
    return reply("ERR 400 unknown command");
  }

  bool streaming() {
    if (!streamer_.joinable()) return false;
    if (stream_finished_.load()) {
      streamer_.join();
      stream_finished_.store(false);
      return false;
    }
    return true;
  }

  void stream(double rate) {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    const auto period = std::chrono::duration<double>(1.0 / rate);
    for (std::uint64_t k = 0;; ++k) {
      {
        std::unique_lock lock(stream_mutex_);
        const auto due = t0 + std::chrono::duration_cast<clock::duration>(period * static_cast<double>(k));
        if (stream_cv_.wait_until(lock, due, [this] { return stop_requested_; })) break;
      }
      auto frame = next_frame();
      if (!frame) {
        reply("OK END");
        break;
      }
      if (!send(make_packet(encode_frame(*frame)))) break;
    }
    stream_finished_.store(true);
  }

  void halt_signal() {
    std::lock_guard lock(stream_mutex_);
    stop_requested_ = true;
    stream_cv_.notify_all();
  }

  void halt_stream() {
    halt_signal();
    if (streamer_.joinable()) streamer_.join();
    stream_finished_.store(false);
  }

  tcp::socket socket_;
  DeviceServer::SourceFactory& factory_;
  double default_rate_;
  std::unique_ptr<FrameSource> source_;
  std::uint64_t seq_ = 0;
  bool hello_ = false;
  std::mutex write_mutex_;
  std::mutex stream_mutex_;
  std::condition_variable stream_cv_;
  bool stop_requested_ = false;
  std::atomic<bool> stream_finished_{false};
  std::thread streamer_;
  std::atomic<bool> done_{false};
};

}  // namespace

// ---------------------------------------------------------------------------

struct DeviceServer::Impl {
  struct Slot {
    std::unique_ptr<Connection> connection;
    std::thread thread;
  };

  SourceFactory factory;
  double rate;
  asio::io_context io;
  tcp::acceptor acceptor{io};
  std::thread accept_thread;
  std::mutex slots_mutex;
  std::list<Slot> slots;
  std::atomic<bool> stopping{false};

  void reap() {
    for (auto it = slots.begin(); it != slots.end();) {
      if (it->connection->done()) {
        it->thread.join();
        it = slots.erase(it);
      } else {
        ++it;
      }
    }
  }
};

DeviceServer::DeviceServer(SourceFactory factory, double rate) : impl_(std::make_unique<Impl>()) {
  if (!factory) throw Error(Errc::InvalidArgument, "device server needs a source factory");
  if (!(rate > 0.0)) throw Error(Errc::InvalidArgument, "rate must be positive");
  impl_->factory = std::move(factory);
  impl_->rate = rate;
}

DeviceServer::~DeviceServer() { stop(); }

void DeviceServer::start(const Endpoint& bind) {
  if (impl_->accept_thread.joinable()) throw Error(Errc::InvalidState, "device server already started");
  try {
    const tcp::endpoint ep(asio::ip::make_address(bind.host), bind.port);
    impl_->acceptor.open(ep.protocol());
    impl_->acceptor.set_option(tcp::acceptor::reuse_address(true));
    impl_->acceptor.bind(ep);
    impl_->acceptor.listen();
    port_ = impl_->acceptor.local_endpoint().port();
  } catch (const boost::system::system_error& e) {
    boost::system::error_code ignored;
    impl_->acceptor.close(ignored);
    throw Error(Errc::IoError, "cannot bind " + bind.host + ":" + std::to_string(bind.port) + ": " + e.what());
  }
  spdlog::info("device server listening on {}:{}", bind.host, port_);

  impl_->accept_thread = std::thread([this] {
    Impl& impl = *impl_;
    for (;;) {
      tcp::socket socket(impl.io);
      boost::system::error_code ec;
      impl.acceptor.accept(socket, ec);
      if (impl.stopping.load()) break;
      if (ec) {
        spdlog::warn("accept failed: {}", ec.message());
        continue;
      }
      socket.set_option(tcp::no_delay(true), ec);
      ++served_;
      std::lock_guard lock(impl.slots_mutex);
      impl.reap();
      auto connection = std::make_unique<Connection>(std::move(socket), impl.factory, impl.rate);
      Connection* raw = connection.get();
      impl.slots.push_back({std::move(connection), std::thread([raw] { raw->run(); })});
    }
  });
}

void DeviceServer::stop() {
  if (!impl_ || !impl_->accept_thread.joinable()) return;
  impl_->stopping.store(true);
  boost::system::error_code ignored;
  {
    // Wake the blocking accept with a throwaway connection.
    tcp::socket poke(impl_->io);
    poke.connect(tcp::endpoint(impl_->acceptor.local_endpoint(ignored).address().is_unspecified()
                                   ? asio::ip::make_address("127.0.0.1")
                                   : impl_->acceptor.local_endpoint(ignored).address(),
                               port_),
                 ignored);
  }
  impl_->accept_thread.join();
  impl_->acceptor.close(ignored);
  std::lock_guard lock(impl_->slots_mutex);
  for (auto& slot : impl_->slots) slot.connection->shutdown();
  for (auto& slot : impl_->slots) slot.thread.join();
  impl_->slots.clear();
}

// ---------------------------------------------------------------------------

struct DeviceClient::Impl {
  asio::io_context io;
  tcp::socket socket{io};
  std::string buffer;
  std::deque<CoilFrame> pending;
  bool streaming = false;
  bool closed = false;
  std::atomic<bool> interrupted{false};

  [[noreturn]] void lost(const std::string& why) {
    closed = true;
    throw Error(Errc::ConnectionLost, why);
  }

  void fill(std::size_t want) {
    while (buffer.size() < want) {
      char chunk[65536];
      boost::system::error_code ec;
      const std::size_t n = socket.read_some(asio::buffer(chunk), ec);
      if (ec) lost(ec == asio::error::eof ? "device closed the connection" : "device connection lost: " + ec.message());
      buffer.append(chunk, n);
    }
  }

  void send_line(std::string_view line) {
    if (closed) throw Error(Errc::ConnectionLost, "connection is closed");
    boost::system::error_code ec;
    const std::string data = std::string(line) + "\n";
    asio::write(socket, asio::buffer(data), ec);
    if (ec) lost("device connection lost: " + ec.message());
  }

  // Lines start with 'O' or 'E'; a packet starts with the high byte of its
  // length, which the 16 MiB cap keeps at 0 or 1.
  bool line_ahead() {
    fill(1);
    return buffer[0] == 'O' || buffer[0] == 'E';
  }

  std::string read_line() {
    for (;;) {
      const auto nl = buffer.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer.substr(0, nl);
        buffer.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
      }
      if (buffer.size() > 4096) throw Error(Errc::ProtocolError, "reply line too long");
      fill(buffer.size() + 1);
    }
  }

  std::string read_packet() {
    fill(4);
    const auto b = [&](int i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(buffer[i])); };
    const std::uint32_t len = (b(0) << 24) | (b(1) << 16) | (b(2) << 8) | b(3);
    if (len > kMaxPayload) {
      throw Error(Errc::ProtocolError, "packet length " + std::to_string(len) + " exceeds 16 MiB");
    }
    fill(4 + static_cast<std::size_t>(len));
    std::string payload = buffer.substr(4, len);
    buffer.erase(0, 4 + static_cast<std::size_t>(len));
    return payload;
  }

  // Next reply line, queueing any streamed frames that arrive first.
  std::string read_reply() {
    for (;;) {
      if (!line_ahead()) {
        pending.push_back(decode_frame(read_packet()));
        continue;
      }
      std::string line = read_line();
      if (line == "OK END") {
        streaming = false;
        continue;
      }
      return line;
    }
  }

  std::string expect(std::string_view command, std::string_view ok) {
    send_line(command);
    std::string line = read_reply();
    if (line != ok) throw Error(Errc::ProtocolError, std::string(command) + " rejected: " + line);
    return line;
  }
};

DeviceClient::DeviceClient(const Endpoint& endpoint) : impl_(std::make_unique<Impl>()) {
  try {
    tcp::resolver resolver(impl_->io);
    asio::connect(impl_->socket, resolver.resolve(endpoint.host, std::to_string(endpoint.port)));
    impl_->socket.set_option(tcp::no_delay(true));
  } catch (const boost::system::system_error& e) {
    throw Error(Errc::ConnectionLost,
                "cannot connect to " + endpoint.host + ":" + std::to_string(endpoint.port) + ": " + e.what());
  }
  impl_->expect("HELLO " + std::string(kProtocolVersion), "OK HELLO");
}

DeviceClient::~DeviceClient() = default;

SweepHeader DeviceClient::describe() {
  impl_->expect("DESCRIBE", "OK DESCRIBE");
  return decode_description(impl_->read_packet());
}

CoilFrame DeviceClient::single() {
  impl_->expect("SINGLE", "OK SINGLE");
  return decode_frame(impl_->read_packet());
}

void DeviceClient::start(double rate) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "START %.17g", rate);
  impl_->expect(buf, "OK START");
  impl_->streaming = true;
}

std::optional<CoilFrame> DeviceClient::next() {
  Impl& impl = *impl_;
  if (!impl.pending.empty()) {
    CoilFrame f = std::move(impl.pending.front());
    impl.pending.pop_front();
    return f;
  }
  if (impl.closed || !impl.streaming) return std::nullopt;
  for (;;) {
    if (!impl.line_ahead()) return decode_frame(impl.read_packet());
    const std::string line = impl.read_line();
    if (line == "OK END") {
      impl.streaming = false;
      return std::nullopt;
    }
    throw Error(Errc::ProtocolError, "unexpected line while streaming: " + line);
  }
}

void DeviceClient::stop() {
  impl_->expect("STOP", "OK STOP");
  impl_->streaming = false;
}

void DeviceClient::bye() {
  if (impl_->closed) return;
  impl_->expect("BYE", "OK BYE");
  impl_->streaming = false;
  impl_->closed = true;
  boost::system::error_code ignored;
  impl_->socket.shutdown(tcp::socket::shutdown_both, ignored);
  impl_->socket.close(ignored);
}

std::string DeviceClient::command(std::string_view line) {
  impl_->send_line(line);
  return impl_->read_reply();
}

void DeviceClient::interrupt() {
  impl_->interrupted.store(true);
  boost::system::error_code ignored;
  impl_->socket.shutdown(tcp::socket::shutdown_both, ignored);
}

// ---------------------------------------------------------------------------

DeviceSource::DeviceSource(const Endpoint& endpoint, double rate)
    : client_(endpoint), header_(client_.describe()), rate_(rate) {
  if (!(rate > 0.0)) throw Error(Errc::InvalidArgument, "rate must be positive");
}

DeviceSource::~DeviceSource() {
  if (interrupted_.load()) return;
  try {
    if (started_) client_.stop();
    client_.bye();
  } catch (const std::exception& e) {
    spdlog::debug("device source teardown: {}", e.what());
  }
}

std::optional<CoilFrame> DeviceSource::next() {
  if (interrupted_.load()) return std::nullopt;
  try {
    if (!started_) {
      client_.start(rate_);
      started_ = true;
    }
    return client_.next();
  } catch (const Error& e) {
    if (interrupted_.load() && e.code() == Errc::ConnectionLost) return std::nullopt;
    throw;
  }
}

void DeviceSource::interrupt() {
  interrupted_.store(true);
  client_.interrupt();
}

}  // namespace articfeed::stream
