// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include "relfsl/cli.hpp"
#include "relfsl/tensor.hpp"

int main(int argc, char** argv) {
  relfsl::retain_freed_memory();
  std::vector<std::string> args(argv + 1, argv + argc);
  return relfsl::run_cli(args, std::cout, std::cerr);
}
