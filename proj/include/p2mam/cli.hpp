#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace p2mam::cli {

enum ExitCode : int { kOk = 0, kBadFlags = 2, kIoError = 3, kFormatError = 4, kNumericalError = 5 };

// Runs one command. args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace p2mam::cli
