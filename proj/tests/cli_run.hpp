#pragma once

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace puir::test {

struct CliResult {
  int code = -1;
  std::string output;
};

// Runs the puir executable with `args` from `cwd`, capturing stdout and stderr.
inline CliResult run_cli(const std::filesystem::path& cwd, const std::string& args, const std::string& env = "") {
  const auto log = cwd / ".cli_output.txt";
  const std::string cmd = "cd '" + cwd.string() + "' && " + env + (env.empty() ? "" : " ") + "'" PUIR_CLI "' " +
                          args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

}  // namespace puir::test
