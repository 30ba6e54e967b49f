#include "scinet/log.hpp"

#include <iostream>
#include <mutex>

namespace scinet {

namespace {

struct LogState {
  std::mutex mutex;
  LogLevel threshold = LogLevel::Info;
  std::function<void(LogLevel, const std::string&)> sink;
};

LogState& state() {
  static LogState s;
  return s;
}

const char* label(LogLevel level) {
  switch (level) {
    case LogLevel::Debug: return "debug";
    case LogLevel::Info: return "info";
    case LogLevel::Warn: return "warn";
    case LogLevel::Error: return "error";
  }
  return "?";
}

}  // namespace

void set_log_level(LogLevel level) {
  std::lock_guard lock(state().mutex);
  state().threshold = level;
}

void set_log_sink(std::function<void(LogLevel, const std::string&)> sink) {
  std::lock_guard lock(state().mutex);
  state().sink = std::move(sink);
}

void log(LogLevel level, const std::string& message) {
  auto& s = state();
  std::lock_guard lock(s.mutex);
  if (level < s.threshold) return;
  if (s.sink) {
    s.sink(level, message);
  } else {
    std::clog << "[" << label(level) << "] " << message << '\n';
  }
}

}  // namespace scinet
