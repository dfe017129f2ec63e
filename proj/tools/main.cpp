#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) {
  articfeed::cli::install_signal_handlers();
  return articfeed::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
