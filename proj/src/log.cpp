#include "cmil/log.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <mutex>

namespace cmil {

namespace {

LogLevel g_level = LogLevel::kInfo;
std::once_flag g_env_once;
std::mutex g_mutex;

void init_from_env() {
  const char* env = std::getenv("CMIL_LOG_LEVEL");
  if (env == nullptr) return;
  if (std::strcmp(env, "debug") == 0) {
    g_level = LogLevel::kDebug;
  } else if (std::strcmp(env, "info") == 0) {
    g_level = LogLevel::kInfo;
  } else if (std::strcmp(env, "warn") == 0) {
    g_level = LogLevel::kWarn;
  } else {
    std::fprintf(stderr, "[warn] unknown CMIL_LOG_LEVEL '%s', using info\n",
                 env);
  }
}

const char* tag(LogLevel level) {
  switch (level) {
    case LogLevel::kDebug:
      return "debug";
    case LogLevel::kInfo:
      return "info";
    case LogLevel::kWarn:
      return "warn";
  }
  return "?";
}

}  // namespace

LogLevel log_level() {
  std::call_once(g_env_once, init_from_env);
  return g_level;
}

void set_log_level(LogLevel level) {
  std::call_once(g_env_once, init_from_env);
  g_level = level;
}

void log_message(LogLevel level, const std::string& msg) {
  if (level < log_level()) return;
  std::lock_guard<std::mutex> lock(g_mutex);
  std::fprintf(stderr, "[%s] %s\n", tag(level), msg.c_str());
}

}  // namespace cmil
