#pragma once

#include <functional>
#include <iostream>
#include <string>

namespace garlileo {

enum class LogLevel { Debug = 0, Info = 1, Warn = 2, Error = 3, Off = 4 };

struct Logger {
  LogLevel level = LogLevel::Warn;
  std::function<void(LogLevel, const std::string&)> sink = [](LogLevel l, const std::string& msg) {
    static const char* names[] = {"debug", "info", "warn", "error"};
    std::clog << "[garlileo " << names[static_cast<int>(l)] << "] " << msg << '\n';
  };
};

inline Logger& logger() {
  static Logger instance;
  return instance;
}

inline void log(LogLevel l, const std::string& msg) {
  auto& lg = logger();
  if (l >= lg.level && lg.sink) lg.sink(l, msg);
}

inline void log_warn(const std::string& msg) { log(LogLevel::Warn, msg); }
inline void log_info(const std::string& msg) { log(LogLevel::Info, msg); }

}  // namespace garlileo
