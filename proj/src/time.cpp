#include "attnlab/time.hpp"

#include <charconv>
#include <cstdio>

#include <fmt/format.h>

#include "attnlab/error.hpp"

namespace attnlab {
namespace {

int read_int(std::string_view s, std::size_t pos, std::size_t len, std::string_view full) {
  int v = 0;
  if (pos + len > s.size()) throw ParseError("bad timestamp '" + std::string(full) + "'", 0);
  auto [ptr, ec] = std::from_chars(s.data() + pos, s.data() + pos + len, v);
  if (ec != std::errc() || ptr != s.data() + pos + len)
    throw ParseError("bad timestamp '" + std::string(full) + "'", 0);
  return v;
}

void expect(std::string_view s, std::size_t pos, char c, std::string_view full) {
  if (pos >= s.size() || s[pos] != c)
    throw ParseError("bad timestamp '" + std::string(full) + "'", 0);
}

}  // namespace

Timestamp parse_iso8601(std::string_view text) {
  using namespace std::chrono;
  std::string_view s = text;
  int y = read_int(s, 0, 4, text);
  expect(s, 4, '-', text);
  int mo = read_int(s, 5, 2, text);
  expect(s, 7, '-', text);
  int d = read_int(s, 8, 2, text);
  if (s.size() < 11 || (s[10] != 'T' && s[10] != ' '))
    throw ParseError("bad timestamp '" + std::string(text) + "'", 0);
  int h = read_int(s, 11, 2, text);
  expect(s, 13, ':', text);
  int mi = read_int(s, 14, 2, text);
  std::size_t pos = 16;
  int sec = 0;
  if (pos < s.size() && s[pos] == ':') {
    sec = read_int(s, pos + 1, 2, text);
    pos += 3;
    if (pos < s.size() && s[pos] == '.') {
      ++pos;
      while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') ++pos;
    }
  }
  std::string_view zone = s.substr(pos);
  if (!(zone.empty() || zone == "Z" || zone == "+00:00" || zone == "+0000"))
    throw ParseError("non-UTC timestamp '" + std::string(text) + "'", 0);

  year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || sec > 60)
    throw ParseError("invalid date/time '" + std::string(text) + "'", 0);
  return sys_days{ymd} + hours{h} + minutes{mi} + seconds{sec};
}

std::string format_iso8601(Timestamp t) {
  using namespace std::chrono;
  auto day_point = floor<days>(t);
  year_month_day ymd{day_point};
  hh_mm_ss hms{t - day_point};
  return fmt::format("{:04d}-{:02d}-{:02d}T{:02d}:{:02d}:{:02d}Z", int(ymd.year()),
                     unsigned(ymd.month()), unsigned(ymd.day()), hms.hours().count(),
                     hms.minutes().count(), hms.seconds().count());
}

int slot_of_day(Timestamp t) {
  using namespace std::chrono;
  auto since = t - floor<days>(t);
  return static_cast<int>(since.count() / kIntervalSeconds);
}

int day_of_week(Timestamp t) {
  using namespace std::chrono;
  weekday wd{floor<days>(t)};
  return static_cast<int>(wd.iso_encoding()) - 1;
}

}  // namespace attnlab
