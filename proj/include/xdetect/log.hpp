#pragma once

#include <spdlog/spdlog.h>

namespace xdetect {

/// Shared stderr logger. Level comes from X_DETECT_LOG (trace, debug, info,
/// warn, error, off); defaults to warn.
spdlog::logger& logger();

}  // namespace xdetect
