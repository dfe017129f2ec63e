#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <boost/asio.hpp>
#include <json.hpp>

#include "articfeed/geometry.hpp"
#include "articfeed/models.hpp"
#include "articfeed/stream.hpp"
#include "cli.hpp"

namespace fs = std::filesystem;
using namespace articfeed;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "articfeed_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Small models keep the tests fast.
fs::path small_models() {
  static const fs::path dir = [] {
    const fs::path d = fresh_dir("models");
    REQUIRE(run({"generate-models", "--out", d.string(), "--grid", "10", "--palate-grid", "8"}).code == 0);
    return d;
  }();
  return dir;
}

std::uint16_t free_port() {
  boost::asio::io_context io;
  boost::asio::ip::tcp::acceptor acceptor(io, {boost::asio::ip::make_address("127.0.0.1"), 0});
  return acceptor.local_endpoint().port();
}

std::vector<std::string> csv_row(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
  return cells;
}

}  // namespace

TEST_CASE("cli help lists every flag") {
  const Result r = run({"--help"});
  CHECK(r.code == 0);
  for (const char* flag :
       {"simulate", "--synthetic", "--bind", "--rate", "--frames", "--noise", "--dropout", "serve", "--device", "--file",
        "--models", "--session", "--ws", "--record-raw", "--record-processed", "--save-session", "--fast",
        "--max-frames", "--duration", "--smoothing", "--delay", "fit-palate", "--out", "--coil", "--prior",
        "--iterations", "export", "--format", "calibrate", "--reference", "--bite", "--palate", "generate-models",
        "--grid", "--palate-n", "--palate-grid", "generate-sweep", "--head-rotation", "--head-translation",
        "--pose-amplitude", "generate-trace", "--weights", "--points"}) {
    CHECK_MESSAGE(r.out.find(flag) != std::string::npos, flag);
  }
  CHECK(run({"serve", "--help"}).code == 0);
}

TEST_CASE("cli usage errors exit 2 without side effects") {
  const fs::path dir = fresh_dir("usage");
  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  CHECK(run({"simulate", "--rate", "-5", "x.jsonl"}).code == 2);
  CHECK(run({"simulate"}).code == 2);
  CHECK(run({"simulate", "x.jsonl", "--synthetic", "3"}).code == 2);
  CHECK(run({"simulate", "--synthetic", "3", "--bind", "nohost:port"}).code == 2);
  CHECK(run({"fit-palate"}).code == 2);
  CHECK(run({"serve", "--models", small_models().string()}).code == 2);
  CHECK(run({"serve", "--models", small_models().string(), "--device", ":1", "--file", "x.jsonl"}).code == 2);
  CHECK(run({"serve", "--models", small_models().string(), "--file", "x.jsonl", "--smoothing", "4"}).code == 2);
  CHECK(run({"serve", "--models", (dir / "nope").string(), "--file", "x.jsonl"}).code == 2);
  const fs::path out = dir / "export";
  CHECK(run({"export", "m.json", "s.jsonl", "--out", out.string(), "--format", "ply"}).code == 2);
  CHECK_FALSE(fs::exists(out));
}

TEST_CASE("cli runtime errors exit 1") {
  const fs::path dir = fresh_dir("runtime");
  CHECK(run({"simulate", (dir / "missing.jsonl").string(), "--bind", "127.0.0.1:0"}).code == 1);
  {
    std::ofstream bad(dir / "bad.json");
    bad << "{\"format\": \"nonsense\"}";
  }
  const Result fit = run({"fit-palate", (dir / "bad.json").string(), "t.jsonl", "--out", (dir / "w.json").string()});
  CHECK(fit.code == 1);
  CHECK(fit.err.find("error:") != std::string::npos);
  CHECK(run({"serve", "--models", dir.string(), "--file", "x.jsonl"}).code == 1);
  CHECK(run({"serve", "--models", small_models().string(), "--device", "127.0.0.1:" + std::to_string(free_port())})
            .code == 1);
}

TEST_CASE("cli fit-palate on a synthetic trace") {
  const fs::path dir = fresh_dir("fit");
  const fs::path trace = dir / "trace.jsonl";
  REQUIRE(run({"generate-trace", (small_models() / "palate.json").string(), "--weights", "0.5,-0.3,0.2", "--out",
               trace.string(), "--seed", "9"})
              .code == 0);
  const fs::path weights = dir / "weights.json";
  const Result r = run({"fit-palate", (small_models() / "palate.json").string(), trace.string(), "--out", weights.string()});
  REQUIRE(r.code == 0);
  std::ifstream in(weights);
  const auto doc = nlohmann::json::parse(in);
  CHECK(doc["mean_residual"].get<double>() <= 1e-3);
  CHECK(doc["points"] == 50);
  CHECK(doc["weights"].size() == 3);
  const auto history = doc["residual_history"].get<std::vector<double>>();
  for (std::size_t k = 1; k < history.size(); ++k) CHECK(history[k] <= history[k - 1]);
}

TEST_CASE("cli export writes one OBJ per frame") {
  const fs::path dir = fresh_dir("export");
  const fs::path sweep = dir / "s.csv";
  REQUIRE(run({"generate-sweep", "--models", small_models().string(), "--frames", "10", "--out", sweep.string(),
               "--head-rotation", "0", "--head-translation", "0"})
              .code == 0);
  const fs::path model_path = small_models() / "tongue.json";

  SUBCASE("model coordinates") {
    // The generated sweep is in device coordinates; without a session the
    // fit is poor but the files are still consistent with the weights.
    REQUIRE(run({"export", model_path.string(), sweep.string(), "--out", (dir / "out").string()}).code == 0);
  }
  SUBCASE("calibrated session") {
    const fs::path session = dir / "session.json";
    REQUIRE(run({"calibrate", sweep.string(), "--models", small_models().string(), "--out", session.string(),
                 "--reference", "0,0.05", "--bite", "0,0.09"})
                .code == 0);
    REQUIRE(run({"export", model_path.string(), sweep.string(), "--out", (dir / "out").string(), "--session",
                 session.string()})
                .code == 0);
  }

  int objs = 0;
  for (const auto& e : fs::directory_iterator(dir / "out")) objs += e.path().extension() == ".obj" ? 1 : 0;
  CHECK(objs == 10);

  const auto model = models::load_multilinear_model(model_path);
  std::ifstream csv(dir / "out" / "weights.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "seq,t,x0,x1,x2,y0,y1,y2,y3,residual,tracked");
  for (int k = 0; k < 10; ++k) {
    REQUIRE(std::getline(csv, line));
    const auto cells = csv_row(line);
    REQUIRE(cells.size() == 11);
    CHECK(cells[10] == "1");
    Eigen::VectorXd x(3), y(4);
    for (int i = 0; i < 3; ++i) x[i] = std::stod(cells[2 + i]);
    for (int j = 0; j < 4; ++j) y[j] = std::stod(cells[5 + j]);
    const Eigen::VectorXd expected = models::reconstruct_multilinear_flat(model, x, y);
    char name[32];
    std::snprintf(name, sizeof name, "frame_%06d.obj", k);
    const geometry::Mesh mesh = geometry::read_obj(dir / "out" / name);
    REQUIRE(static_cast<Eigen::Index>(3 * mesh.vertices.size()) == expected.size());
    double worst = 0.0;
    for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
      worst = std::max(worst, (mesh.vertices[v] - expected.segment<3>(3 * static_cast<Eigen::Index>(v))).norm());
    }
    CHECK(worst <= 1e-6);
    CHECK(mesh.faces == model.faces);
  }
}

TEST_CASE("cli serve from a file") {
  const fs::path dir = fresh_dir("serve");
  const fs::path sweep = dir / "s.jsonl";
  REQUIRE(run({"generate-sweep", "--models", small_models().string(), "--frames", "300", "--out", sweep.string()}).code ==
          0);
  const fs::path session = dir / "session.json";
  REQUIRE(run({"calibrate", sweep.string(), "--models", small_models().string(), "--out", session.string()}).code == 0);
  const Result r = run({"serve", "--models", small_models().string(), "--file", sweep.string(), "--fast", "--session",
                        session.string(), "--record-raw", (dir / "raw.jsonl").string(), "--record-processed",
                        (dir / "processed.csv").string(), "--save-session", (dir / "final.json").string()});
  REQUIRE(r.code == 0);
  const auto report = nlohmann::json::parse(r.out);
  CHECK(report["frames"] == 300);
  CHECK(report["tracked_frames"] == 300);
  CHECK(report["ended_by"] == "source exhausted");
  CHECK(stream::read_sweep(dir / "raw.jsonl").frames.size() == 300);
  CHECK(stream::read_sweep(dir / "processed.csv").frames.size() == 300);
  CHECK(fs::exists(dir / "final.json"));

  const Result limited = run({"serve", "--models", small_models().string(), "--file", sweep.string(), "--fast",
                              "--max-frames", "20"});
  REQUIRE(limited.code == 0);
  CHECK(nlohmann::json::parse(limited.out)["frames"] == 20);
}

TEST_CASE("cli serve against cli simulate") {
  const std::uint16_t port = free_port();
  const std::string addr = "127.0.0.1:" + std::to_string(port);
  int sim_code = -1;
  std::ostringstream sim_out, sim_err;
  std::thread sim([&] {
    sim_code = cli::run({"simulate", "--synthetic", "4", "--models", small_models().string(), "--bind", addr,
                         "--rate", "200"},
                        sim_out, sim_err);
  });
  // Wait for the listener.
  bool up = false;
  for (int i = 0; i < 200 && !up; ++i) {
    try {
      stream::DeviceClient probe({"127.0.0.1", port});
      probe.bye();
      up = true;
    } catch (const Error&) {
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
  }
  REQUIRE(up);
  std::ostringstream out, err;
  const int code = cli::run({"serve", "--models", small_models().string(), "--device", addr, "--rate", "200",
                             "--max-frames", "100"},
                            out, err);
  cli::request_shutdown();
  sim.join();
  CHECK(code == 0);
  CHECK(sim_code == 0);
  CHECK(sim_out.str().find("listening on " + addr) != std::string::npos);
  const auto report = nlohmann::json::parse(out.str());
  CHECK(report["frames"] == 100);
  CHECK(report["dropouts"] == 0);
}

#ifdef ARTICFEED_CLI_BINARY
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

TEST_CASE("cli binary shuts down cleanly on SIGINT") {
  int out_pipe[2], err_pipe[2];
  REQUIRE(pipe(out_pipe) == 0);
  REQUIRE(pipe(err_pipe) == 0);
  const pid_t pid = fork();
  REQUIRE(pid >= 0);
  if (pid == 0) {
    dup2(out_pipe[1], 1);
    dup2(err_pipe[1], 2);
    close(out_pipe[0]);
    close(err_pipe[0]);
    execl(ARTICFEED_CLI_BINARY, "articfeed", "simulate", "--synthetic", "1", "--bind", "127.0.0.1:0", nullptr);
    _exit(127);
  }
  close(out_pipe[1]);
  close(err_pipe[1]);
  std::string line;
  char ch;
  while (read(out_pipe[0], &ch, 1) == 1 && ch != '\n') line += ch;
  CHECK(line.rfind("listening on 127.0.0.1:", 0) == 0);

  kill(pid, SIGUSR1);
  std::string metrics;
  while (read(err_pipe[0], &ch, 1) == 1 && ch != '\n') metrics += ch;
  CHECK(metrics == "connections_served=0");

  kill(pid, SIGINT);
  int status = 0;
  REQUIRE(waitpid(pid, &status, 0) == pid);
  CHECK(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 0);
  close(out_pipe[0]);
  close(err_pipe[0]);
}
#endif
