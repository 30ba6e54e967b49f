#pragma once

#include <functional>
#include <string>

namespace scinet {

enum class LogLevel { Debug, Info, Warn, Error };

/// Messages below the threshold are discarded. Default: Info.
void set_log_level(LogLevel level);
/// Replaces the sink (default: "[level] message" lines on stderr).
void set_log_sink(std::function<void(LogLevel, const std::string&)> sink);
void log(LogLevel level, const std::string& message);

inline void log_info(const std::string& m) { log(LogLevel::Info, m); }
inline void log_warn(const std::string& m) { log(LogLevel::Warn, m); }

}  // namespace scinet
