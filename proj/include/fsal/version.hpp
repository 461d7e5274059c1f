#pragma once

namespace fsal {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace fsal
