#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lesionseg::cli {

// Exit codes: 0 success, 1 bad flags or config, 2 runtime failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;

// Default output root when a subcommand gets no --out.
inline constexpr const char* kOutputRootEnv = "LESIONSEG_OUTPUT_ROOT";

// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace lesionseg::cli
