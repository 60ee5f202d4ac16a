// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace m2rnn::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitVerificationFailed = 1,
  kExitConfigError = 2,
};

// args excludes the program name, e.g. {"train", "--config", "run.cfg"}.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace m2rnn::cli
