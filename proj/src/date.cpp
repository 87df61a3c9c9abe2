#include "pir/date.hpp"

#include <charconv>
#include <cstdio>
#include <stdexcept>

namespace pir {

namespace {

bool parse_digits(std::string_view s, int& out) {
    for (char c : s) {
        if (c < '0' || c > '9') return false;
    }
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc{} && ptr == s.data() + s.size();
}

}  // namespace

Date Date::from_ymd(int year, unsigned month, unsigned day) {
    using namespace std::chrono;
    const year_month_day ymd{std::chrono::year{year}, std::chrono::month{month}, std::chrono::day{day}};
    if (!ymd.ok()) {
        throw std::invalid_argument("invalid calendar date");
    }
    return Date(static_cast<std::int32_t>(sys_days{ymd}.time_since_epoch().count()));
}

Date Date::min_supported() { return from_ymd(1900, 1, 1); }
Date Date::max_supported() { return from_ymd(2100, 1, 1); }

Date Date::parse(std::string_view iso) {
    if (iso.size() != 10 || iso[4] != '-' || iso[7] != '-') {
        throw std::invalid_argument("unparseable date '" + std::string(iso) + "'");
    }
    int y = 0, m = 0, d = 0;
    if (!parse_digits(iso.substr(0, 4), y) || !parse_digits(iso.substr(5, 2), m) ||
        !parse_digits(iso.substr(8, 2), d)) {
        throw std::invalid_argument("unparseable date '" + std::string(iso) + "'");
    }
    Date out;
    try {
        out = from_ymd(y, static_cast<unsigned>(m), static_cast<unsigned>(d));
    } catch (const std::invalid_argument&) {
        throw std::invalid_argument("unparseable date '" + std::string(iso) + "'");
    }
    if (out < min_supported() || out > max_supported()) {
        throw std::invalid_argument("date out of range '" + std::string(iso) + "'");
    }
    return out;
}

std::string Date::iso() const {
    using namespace std::chrono;
    const year_month_day ymd{sys_days{std::chrono::days{days_}}};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
    return buf;
}

}  // namespace pir
