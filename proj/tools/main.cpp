// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) {
  return m2rnn::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
