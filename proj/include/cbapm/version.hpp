#pragma once

namespace cbapm {

inline constexpr const char* kVersion = "cbapm 1.0.0";

} // namespace cbapm
