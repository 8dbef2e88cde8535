// SPDX-License-Identifier: Apache-2.0

#include "taskadapter/logging.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace taskadapter {

namespace {
std::atomic<LogLevel> g_level{LogLevel::warning};
std::mutex g_mutex;

void emit(std::string_view tag, std::string_view message) {
  std::lock_guard lock(g_mutex);
  std::clog << "[taskadapter] " << tag << message << '\n';
}
}  // namespace

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }

void log_warning(std::string_view message) {
  if (g_level.load() >= LogLevel::warning) emit("warning: ", message);
}

void log_info(std::string_view message) {
  if (g_level.load() >= LogLevel::info) emit("", message);
}

}  // namespace taskadapter
