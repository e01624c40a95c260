#pragma once

// The kwash command-line tool: gen-corpus, train, wash, eval, ablate, replay.

#include <ostream>
#include <string>
#include <vector>

namespace kwash::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitData = 3,
  kExitNumerical = 4,
};

// Runs one command. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace kwash::cli
