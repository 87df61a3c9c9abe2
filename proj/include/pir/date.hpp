#pragma once

#include <chrono>
#include <compare>
#include <cstdint>
#include <string>
#include <string_view>

namespace pir {

// Calendar date at UTC day precision, stored as days since 1970-01-01.
class Date {
public:
    constexpr Date() = default;
    constexpr explicit Date(std::int32_t days_since_epoch) : days_(days_since_epoch) {}

    static Date from_ymd(int year, unsigned month, unsigned day);

    // Strict "YYYY-MM-DD". Throws std::invalid_argument on malformed or
    // out-of-range input (valid range is [1900-01-01, 2100-01-01]).
    static Date parse(std::string_view iso);

    static Date min_supported();
    static Date max_supported();

    constexpr std::int32_t days() const { return days_; }
    std::string iso() const;

    Date plus_days(std::int32_t n) const { return Date(days_ + n); }

    friend constexpr auto operator<=>(Date, Date) = default;

private:
    std::int32_t days_ = 0;
};

}  // namespace pir
