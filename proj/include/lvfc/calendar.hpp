#pragma once

#include <compare>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>

#include "lvfc/common.hpp"

namespace lvfc {

//! Calendar date stored as days since 1970-01-01 (proleptic Gregorian).
class Date {
 public:
  constexpr Date() = default;

  static constexpr Date from_days(int days) {
    Date d;
    d.days_ = days;
    return d;
  }

  static constexpr Date from_ymd(int y, int m, int d) {
    // H. Hinnant's days_from_civil.
    y -= m <= 2;
    const int era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy =
        (153 * static_cast<unsigned>(m + (m > 2 ? -3 : 9)) + 2) / 5 + static_cast<unsigned>(d) - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return from_days(era * 146097 + static_cast<int>(doe) - 719468);
  }

  //! Parses YYYY-MM-DD (any trailing characters are ignored).
  static Date parse(std::string_view s) {
    int y = 0, m = 0, d = 0;
    if (s.size() < 10 || s[4] != '-' || s[7] != '-' ||
        std::sscanf(std::string(s.substr(0, 10)).c_str(), "%d-%d-%d", &y, &m, &d) != 3 || m < 1 ||
        m > 12 || d < 1 || d > days_in_month(y, m))
      throw std::invalid_argument("invalid date: " + std::string(s));
    return from_ymd(y, m, d);
  }

  constexpr int days() const { return days_; }

  struct Ymd {
    int year;
    int month;
    int day;
  };

  constexpr Ymd ymd() const {
    // H. Hinnant's civil_from_days.
    const int z = days_ + 719468;
    const int era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const int y = static_cast<int>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    const unsigned d = doy - (153 * mp + 2) / 5 + 1;
    const unsigned m = mp < 10 ? mp + 3 : mp - 9;
    return {y + (m <= 2), static_cast<int>(m), static_cast<int>(d)};
  }

  constexpr int year() const { return ymd().year; }
  constexpr int month() const { return ymd().month; }
  constexpr int day() const { return ymd().day; }

  //! 1 for January 1st.
  constexpr int day_of_year() const { return days_ - from_ymd(year(), 1, 1).days_ + 1; }

  //! 0 = Monday ... 6 = Sunday.
  constexpr int weekday() const {
    // 1970-01-01 was a Thursday.
    const int w = (days_ + 3) % 7;
    return w < 0 ? w + 7 : w;
  }

  std::string iso() const {
    const auto [y, m, d] = ymd();
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", y, m, d);
    return buf;
  }

  static constexpr bool is_leap(int y) { return (y % 4 == 0 && y % 100 != 0) || y % 400 == 0; }

  static constexpr int days_in_month(int y, int m) {
    constexpr int table[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
    return m == 2 && is_leap(y) ? 29 : table[m - 1];
  }

  constexpr Date operator+(int n) const { return from_days(days_ + n); }
  constexpr Date operator-(int n) const { return from_days(days_ - n); }
  constexpr int operator-(Date other) const { return days_ - other.days_; }
  constexpr auto operator<=>(const Date&) const = default;

 private:
  int days_ = 0;
};

//! Weekday / Saturday / Sunday coding: 0, 1, 2.
constexpr int day_type3(Date d) {
  const int w = d.weekday();
  return w < 5 ? 0 : (w == 5 ? 1 : 2);
}

//! Weekday / weekend coding: 0, 1.
constexpr int day_type2(Date d) { return d.weekday() < 5 ? 0 : 1; }

//! Last Sunday of the given month.
constexpr Date last_sunday(int year, int month) {
  Date d = Date::from_ymd(year, month, Date::days_in_month(year, month));
  return d - ((d.weekday() + 1) % 7);
}

//! UK clock-change days (last Sunday of March and October): these local days
//! do not have 48 half-hour periods.
constexpr bool is_dst_transition(Date d) {
  const int y = d.year();
  return d == last_sunday(y, 3) || d == last_sunday(y, 10);
}

}  // namespace lvfc
