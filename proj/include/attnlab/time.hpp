#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <string_view>

namespace attnlab {

using Timestamp = std::chrono::sys_seconds;

inline constexpr std::int64_t kIntervalSeconds = 300;
inline constexpr int kSlotsPerDay = 288;

/// Parses `YYYY-MM-DDTHH:MM[:SS[.frac]]` followed by `Z`, `+00:00` or nothing.
/// Only UTC is accepted. Throws ParseError (line 0) on anything else.
Timestamp parse_iso8601(std::string_view text);

/// Formats as `YYYY-MM-DDTHH:MM:SSZ`.
std::string format_iso8601(Timestamp t);

/// 5-minute slot of the UTC day, 0..287.
int slot_of_day(Timestamp t);

/// ISO weekday with Monday = 0 .. Sunday = 6.
int day_of_week(Timestamp t);

}  // namespace attnlab
