#include "omnidit/log.hpp"

#include <atomic>
#include <cstdio>
#include <mutex>

namespace omnidit::log {

namespace {
std::atomic<int> g_level{static_cast<int>(Level::info)};
std::atomic<std::size_t> g_warnings{0};
std::mutex g_mu;

void emit(Level lv, const char* tag, std::string_view msg) {
  if (static_cast<int>(lv) < g_level.load()) return;
  std::lock_guard lock(g_mu);
  std::fprintf(stderr, "[%s] %.*s\n", tag, static_cast<int>(msg.size()), msg.data());
}
}  // namespace

void set_level(Level level) { g_level = static_cast<int>(level); }
Level level() { return static_cast<Level>(g_level.load()); }

void debug(std::string_view msg) { emit(Level::debug, "debug", msg); }
void info(std::string_view msg) { emit(Level::info, "info", msg); }
void warn(std::string_view msg) {
  ++g_warnings;
  emit(Level::warn, "warn", msg);
}
void error(std::string_view msg) { emit(Level::error, "error", msg); }

std::size_t warning_count() { return g_warnings.load(); }

}  // namespace omnidit::log
