#include "xdetect/log.hpp"

#include <cstdlib>
#include <spdlog/sinks/stdout_color_sinks.h>

namespace xdetect {

spdlog::logger& logger() {
  static std::shared_ptr<spdlog::logger> instance = [] {
    auto lg = spdlog::stderr_color_mt("xdetect");
    lg->set_level(spdlog::level::warn);
    if (const char* env = std::getenv("X_DETECT_LOG")) {
      lg->set_level(spdlog::level::from_str(env));
    }
    lg->set_pattern("[%l] %v");
    return lg;
  }();
  return *instance;
}

}  // namespace xdetect
