#include <deque>
#include <set>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <spdlog/spdlog.h>

#include "articfeed/pipeline.hpp"

namespace articfeed::pipeline {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using asio::ip::tcp;

namespace {

class Client;

}  // namespace

struct BroadcastServer::Impl {
  Greeting greeting;
  Handler handler;
  std::size_t queue_limit;
  asio::io_context io;
  tcp::acceptor acceptor{io};
  std::thread thread;
  // Only touched on the io thread.
  std::set<std::shared_ptr<Client>> clients;
  std::atomic<std::size_t> client_count{0};
  std::atomic<std::uint64_t> dropped{0};
  std::uint16_t port = 0;

  void accept();
  void remove(const std::shared_ptr<Client>& client);
};

namespace {

struct Outgoing {
  std::shared_ptr<const std::string> text;
  bool droppable;
};

class Client : public std::enable_shared_from_this<Client> {
 public:
  Client(tcp::socket socket, BroadcastServer::Impl& server) : ws_(std::move(socket)), server_(server) {}

  void start() {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept([self = shared_from_this()](beast::error_code ec) { self->on_accept(ec); });
  }

  void send(const Outgoing& msg) {
    if (closed_) return;
    if (msg.droppable) {
      std::size_t queued = 0;
      for (const auto& m : queue_) queued += m.droppable ? 1 : 0;
      if (queued >= server_.queue_limit) {
        // Never touch the front while a write of it is in flight.
        for (auto it = queue_.begin() + (writing_ ? 1 : 0); it != queue_.end(); ++it) {
          if (it->droppable) {
            queue_.erase(it);
            ++server_.dropped;
            break;
          }
        }
      }
    }
    queue_.push_back(msg);
    if (!writing_) write_next();
  }

  void close() {
    closed_ = true;
    beast::error_code ignored;
    beast::get_lowest_layer(ws_).socket().shutdown(tcp::socket::shutdown_both, ignored);
    beast::get_lowest_layer(ws_).socket().close(ignored);
  }

 private:
  void on_accept(beast::error_code ec) {
    if (ec) return;
    server_.clients.insert(shared_from_this());
    server_.client_count.store(server_.clients.size());
    for (auto& text : server_.greeting()) send({std::make_shared<const std::string>(std::move(text)), false});
    read();
  }

  void read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) { self->on_read(ec); });
  }

  void on_read(beast::error_code ec) {
    if (ec) {
      closed_ = true;
      server_.remove(shared_from_this());
      return;
    }
    const std::string text = beast::buffers_to_string(buffer_.data());
    buffer_.consume(buffer_.size());
    try {
      server_.handler(text);
    } catch (const std::exception& e) {
      spdlog::warn("broadcast handler failed: {}", e.what());
    }
    read();
  }

  void write_next() {
    writing_ = true;
    ws_.text(true);
    ws_.async_write(asio::buffer(*queue_.front().text),
                    [self = shared_from_this()](beast::error_code ec, std::size_t) { self->on_write(ec); });
  }

  void on_write(beast::error_code ec) {
    if (ec) {
      closed_ = true;
      queue_.clear();
      writing_ = false;
      server_.remove(shared_from_this());
      return;
    }
    queue_.pop_front();
    if (queue_.empty() || closed_) {
      writing_ = false;
      return;
    }
    write_next();
  }

  websocket::stream<beast::tcp_stream> ws_;
  BroadcastServer::Impl& server_;
  beast::flat_buffer buffer_;
  std::deque<Outgoing> queue_;
  bool writing_ = false;
  bool closed_ = false;
};

}  // namespace

void BroadcastServer::Impl::accept() {
  acceptor.async_accept([this](beast::error_code ec, tcp::socket socket) {
    if (ec) {
      if (ec == asio::error::operation_aborted || !acceptor.is_open()) return;
      spdlog::warn("websocket accept failed: {}", ec.message());
    } else {
      socket.set_option(tcp::no_delay(true), ec);
      std::make_shared<Client>(std::move(socket), *this)->start();
    }
    accept();
  });
}

void BroadcastServer::Impl::remove(const std::shared_ptr<Client>& client) {
  clients.erase(client);
  client_count.store(clients.size());
}

BroadcastServer::BroadcastServer(Greeting greeting, Handler handler, std::size_t queue_limit)
    : impl_(std::make_shared<Impl>()) {
  impl_->greeting = greeting ? std::move(greeting) : [] { return std::vector<std::string>{}; };
  impl_->handler = handler ? std::move(handler) : [](const std::string&) {};
  impl_->queue_limit = std::max<std::size_t>(queue_limit, 1);
}

BroadcastServer::~BroadcastServer() { stop(); }

void BroadcastServer::start(const stream::Endpoint& bind) {
  if (impl_->thread.joinable()) throw Error(Errc::InvalidState, "broadcast server already started");
  try {
    const tcp::endpoint ep(asio::ip::make_address(bind.host), bind.port);
    impl_->acceptor.open(ep.protocol());
    impl_->acceptor.set_option(tcp::acceptor::reuse_address(true));
    impl_->acceptor.bind(ep);
    impl_->acceptor.listen();
    impl_->port = impl_->acceptor.local_endpoint().port();
  } catch (const boost::system::system_error& e) {
    beast::error_code ignored;
    impl_->acceptor.close(ignored);
    throw Error(Errc::IoError, "cannot bind websocket " + bind.host + ":" + std::to_string(bind.port) + ": " + e.what());
  }
  spdlog::info("websocket broadcast on ws://{}:{}", bind.host, impl_->port);
  impl_->accept();
  impl_->thread = std::thread([impl = impl_.get()] {
    try {
      impl->io.run();
    } catch (const std::exception& e) {
      spdlog::error("websocket server stopped: {}", e.what());
    }
  });
}

void BroadcastServer::stop() {
  if (!impl_ || !impl_->thread.joinable()) return;
  asio::post(impl_->io, [impl = impl_.get()] {
    beast::error_code ignored;
    impl->acceptor.close(ignored);
    for (const auto& c : impl->clients) c->close();
    impl->clients.clear();
    impl->client_count.store(0);
  });
  // Let the closures finish, then stop.
  asio::post(impl_->io, [impl = impl_.get()] { impl->io.stop(); });
  impl_->thread.join();
}

std::uint16_t BroadcastServer::port() const { return impl_->port; }

void BroadcastServer::broadcast(std::string message, bool droppable) {
  auto text = std::make_shared<const std::string>(std::move(message));
  asio::post(impl_->io, [impl = impl_.get(), text, droppable] {
    for (const auto& c : impl->clients) c->send({text, droppable});
  });
}

std::size_t BroadcastServer::client_count() const { return impl_->client_count.load(); }

std::uint64_t BroadcastServer::dropped() const { return impl_->dropped.load(); }

}  // namespace articfeed::pipeline
