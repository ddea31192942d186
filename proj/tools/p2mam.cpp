#include <iostream>
#include <string>
#include <vector>

#include "p2mam/cli.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return p2mam::cli::run(args, std::cout, std::cerr);
}
