#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace rlm {

/// Flat "key = value" lines; '#' starts a comment. Keys are long flag names.
std::map<std::string, std::string> parse_config_file(const std::string& text);

/// Runs one subcommand. Exit status: 0 success, 1 runtime failure, 2 usage error.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_command(int argc, const char* const* argv);

}  // namespace rlm
