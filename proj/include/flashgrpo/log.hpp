// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdint>
#include <iostream>
#include <string_view>

namespace flashgrpo {

inline std::atomic<bool>& warnings_enabled() {
  static std::atomic<bool> enabled{true};
  return enabled;
}

inline std::atomic<std::uint64_t>& warning_count() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

inline void warn(std::string_view msg) {
  ++warning_count();
  if (warnings_enabled()) std::cerr << "[flashgrpo] warning: " << msg << '\n';
}

}  // namespace flashgrpo
