#include "hallucheck/log.hpp"

#include <iostream>
#include <mutex>

namespace hallucheck::log {
namespace {

std::mutex g_mutex;
Level g_min = Level::Info;

void default_sink(Level level, const std::string& msg) {
  static constexpr const char* names[] = {"debug", "info", "warn", "error"};
  std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << '\n';
}

Sink& sink() {
  static Sink s = default_sink;
  return s;
}

}  // namespace

Sink set_sink(Sink s) {
  std::lock_guard lock(g_mutex);
  Sink prev = std::move(sink());
  sink() = s ? std::move(s) : Sink(default_sink);
  return prev;
}

void set_min_level(Level level) {
  std::lock_guard lock(g_mutex);
  g_min = level;
}

void write(Level level, const std::string& msg) {
  std::lock_guard lock(g_mutex);
  if (level < g_min) return;
  sink()(level, msg);
}

}  // namespace hallucheck::log
