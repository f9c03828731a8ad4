#include "rlm/common.hpp"

#include <atomic>
#include <iostream>

namespace rlm {
namespace {
std::atomic<int> g_level{static_cast<int>(LogLevel::info)};
}

void set_log_level(LogLevel level) { g_level.store(static_cast<int>(level)); }

LogLevel log_level() { return static_cast<LogLevel>(g_level.load()); }

LogLevel parse_log_level(std::string_view name) {
  if (name == "debug") return LogLevel::debug;
  if (name == "info") return LogLevel::info;
  if (name == "warn" || name == "warning") return LogLevel::warn;
  if (name == "error") return LogLevel::error;
  if (name == "off") return LogLevel::off;
  throw ConfigError("unknown log level '" + std::string(name) + "'");
}

void log(LogLevel level, std::string_view message) {
  if (static_cast<int>(level) < g_level.load() || level == LogLevel::off) return;
  static constexpr const char* kTags[] = {"debug", "info", "warn", "error"};
  std::cerr << '[' << kTags[static_cast<int>(level)] << "] " << message << '\n';
}

}  // namespace rlm
