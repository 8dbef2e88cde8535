// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string_view>

namespace taskadapter {

enum class LogLevel { quiet = 0, warning = 1, info = 2 };

void set_log_level(LogLevel level);
LogLevel log_level();

/// Writes "[taskadapter] <message>" to std::clog when the level allows it.
void log_warning(std::string_view message);
void log_info(std::string_view message);

}  // namespace taskadapter
