// Command-line front end: simulate, analyze and report.
#pragma once

#include <string>
#include <vector>

namespace fockherald::cli {

constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kEstimatorFailure = 4 };

// Runs one command; errors are reported as a single line on stderr
// ("error: <kind>: <reason>") and mapped to the exit codes above.
int run(const std::vector<std::string>& args);
int main(int argc, char** argv);

}  // namespace fockherald::cli
