#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace articfeed::cli {

/// Runs one command line. Returns the process exit status: 0 on success,
/// 1 on runtime failure, 2 on usage errors (before any side effects).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Asks a running simulate/serve command to shut down cleanly. Safe to call
/// from a signal handler.
void request_shutdown() noexcept;
/// Asks a running serve command to print its counters.
void request_metrics() noexcept;

/// SIGINT/SIGTERM -> request_shutdown, SIGUSR1 -> request_metrics.
void install_signal_handlers();

/// Applies ARTICFEED_LOG (error|warn|info|debug) and routes logs to stderr.
void configure_logging();

}  // namespace articfeed::cli
