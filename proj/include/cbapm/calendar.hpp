#pragma once

#include <cstdio>
#include <stdexcept>
#include <string>

namespace cbapm {

// Month indexing: 1994-01 is month 0. Indices may be negative for
// earlier dates; all window arithmetic runs on these integers.
inline constexpr int kEpochYear = 1994;

inline int month_index(int year, int month) {
  if (month < 1 || month > 12) throw std::invalid_argument("month out of range");
  return (year - kEpochYear) * 12 + (month - 1);
}

// Parses "YYYY-MM".
inline int parse_month(const std::string& s) {
  if (s.size() != 7 || s[4] != '-') throw std::invalid_argument("bad date '" + s + "', want YYYY-MM");
  for (int i : {0, 1, 2, 3, 5, 6})
    if (s[i] < '0' || s[i] > '9') throw std::invalid_argument("bad date '" + s + "', want YYYY-MM");
  int year = std::stoi(s.substr(0, 4));
  int month = std::stoi(s.substr(5, 2));
  return month_index(year, month);
}

inline std::string format_month(int index) {
  int y = index >= 0 ? index / 12 : (index - 11) / 12;  // floor division
  int m = index - y * 12;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02d", kEpochYear + y, m + 1);
  return std::string(buf);
}

} // namespace cbapm
