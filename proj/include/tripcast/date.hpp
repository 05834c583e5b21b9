#pragma once

#include <charconv>
#include <chrono>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>

#include "tripcast/errors.hpp"

namespace tripcast {

/// Calendar date with day resolution, stored as days since 1970-01-01.
class Date {
public:
    Date() = default;

    static Date from_days(std::int32_t days) { return Date(days); }

    static Date from_ymd(int year, unsigned month, unsigned day) {
        std::chrono::year_month_day ymd{std::chrono::year{year},
                                        std::chrono::month{month},
                                        std::chrono::day{day}};
        if (!ymd.ok()) {
            throw DomainError("invalid calendar date " + std::to_string(year) + "-" +
                              std::to_string(month) + "-" + std::to_string(day));
        }
        return Date(std::chrono::sys_days{ymd}.time_since_epoch().count());
    }

    /// Parses strict ISO-8601 (YYYY-MM-DD). Returns nullopt on malformed input.
    static std::optional<Date> try_parse(std::string_view text) {
        if (text.size() != 10 || text[4] != '-' || text[7] != '-') return std::nullopt;
        int y = 0;
        unsigned m = 0, d = 0;
        auto num = [](std::string_view s, auto& out) {
            auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
            return ec == std::errc() && p == s.data() + s.size();
        };
        if (!num(text.substr(0, 4), y) || !num(text.substr(5, 2), m) ||
            !num(text.substr(8, 2), d)) {
            return std::nullopt;
        }
        std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m},
                                        std::chrono::day{d}};
        if (!ymd.ok()) return std::nullopt;
        return Date(std::chrono::sys_days{ymd}.time_since_epoch().count());
    }

    static Date parse(std::string_view text) {
        auto d = try_parse(text);
        if (!d) throw DomainError("malformed date '" + std::string(text) + "'");
        return *d;
    }

    std::string to_string() const {
        auto ymd = std::chrono::year_month_day{
            std::chrono::sys_days{std::chrono::days{days_}}};
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", int(ymd.year()),
                      unsigned(ymd.month()), unsigned(ymd.day()));
        return buf;
    }

    /// 0 = Sunday ... 6 = Saturday.
    int weekday() const {
        return static_cast<int>(
            std::chrono::weekday{std::chrono::sys_days{std::chrono::days{days_}}}
                .c_encoding());
    }

    /// 1..12
    unsigned month() const {
        auto ymd = std::chrono::year_month_day{
            std::chrono::sys_days{std::chrono::days{days_}}};
        return unsigned(ymd.month());
    }

    std::int32_t raw() const { return days_; }

    Date operator+(int days) const { return Date(days_ + days); }
    Date operator-(int days) const { return Date(days_ - days); }
    int operator-(Date other) const { return days_ - other.days_; }
    Date& operator++() { ++days_; return *this; }
    auto operator<=>(const Date&) const = default;

private:
    explicit Date(std::int32_t days) : days_(days) {}
    std::int32_t days_ = 0;
};

/// Inclusive date interval.
struct DateRange {
    Date start;
    Date end;

    bool contains(Date d) const { return start <= d && d <= end; }
    int length_days() const { return end - start + 1; }
};

}  // namespace tripcast
