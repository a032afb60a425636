#pragma once

// Minimal leveled logging to stderr.

#include <cstddef>
#include <string_view>

namespace omnidit::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, quiet = 4 };

void set_level(Level level);
Level level();

void debug(std::string_view msg);
void info(std::string_view msg);
void warn(std::string_view msg);
void error(std::string_view msg);

/// Number of warnings emitted so far in this process, printed or not.
std::size_t warning_count();

}  // namespace omnidit::log
