#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>

namespace cgdm {

using WarningSink = std::function<void(const std::string&)>;

namespace detail {
inline std::mutex& warning_mutex() {
  static std::mutex m;
  return m;
}
inline WarningSink& warning_sink_slot() {
  static WarningSink sink = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
  return sink;
}
}  // namespace detail

// Replaces the warning sink and returns the previous one.
inline WarningSink set_warning_sink(WarningSink sink) {
  std::lock_guard lock(detail::warning_mutex());
  WarningSink previous = std::move(detail::warning_sink_slot());
  detail::warning_sink_slot() = std::move(sink);
  return previous;
}

inline void warn(const std::string& msg) {
  std::lock_guard lock(detail::warning_mutex());
  if (detail::warning_sink_slot()) detail::warning_sink_slot()(msg);
}

}  // namespace cgdm
