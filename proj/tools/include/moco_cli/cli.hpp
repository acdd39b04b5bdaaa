#pragma once

#include <ostream>

namespace moco::cli {

enum ExitCode : int { kOk = 0, kConfigError = 1, kRuntimeError = 2 };

/// Entry point of the `mocodesk` command line. Subcommands: gen-data, pretrain,
/// diagnose, evaluate, ablate. Failures print one JSON object on `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace moco::cli
