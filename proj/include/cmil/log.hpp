#pragma once

#include <string>

namespace cmil {

enum class LogLevel { kDebug = 0, kInfo = 1, kWarn = 2 };

/// Active level comes from CMIL_LOG_LEVEL in {debug, info, warn};
/// defaults to info.
LogLevel log_level();
void set_log_level(LogLevel level);

void log_message(LogLevel level, const std::string& msg);

inline void log_debug(const std::string& msg) {
  log_message(LogLevel::kDebug, msg);
}
inline void log_info(const std::string& msg) {
  log_message(LogLevel::kInfo, msg);
}
inline void log_warn(const std::string& msg) {
  log_message(LogLevel::kWarn, msg);
}

}  // namespace cmil
