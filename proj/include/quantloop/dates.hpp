#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "quantloop/errors.hpp"

namespace quantloop {

// Days since 1970-01-01 for a civil date (Howard Hinnant's algorithm).
inline std::int64_t days_from_civil(int y, int m, int d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2u) / 5u + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline void civil_from_days(std::int64_t z, int& y, int& m, int& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t yy = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = static_cast<int>(doy - (153 * mp + 2) / 5 + 1);
    m = static_cast<int>(mp + (mp < 10 ? 3 : -9));
    y = static_cast<int>(yy + (m <= 2));
}

// 0 = Monday ... 6 = Sunday.
inline int weekday_from_days(std::int64_t z) {
    return static_cast<int>(z >= -3 ? (z + 3) % 7 : (z + 4) % 7 + 6);
}

inline std::string format_iso_date(std::int64_t days) {
    int y = 0, m = 0, d = 0;
    civil_from_days(days, y, m, d);
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", y, m, d);
    return buf;
}

// Parses YYYY-MM-DD; throws Error on malformed input.
inline std::int64_t parse_iso_date(const std::string& iso) {
    int y = 0, m = 0, d = 0;
    char tail = '\0';
    if (iso.size() != 10 ||
        std::sscanf(iso.c_str(), "%4d-%2d-%2d%c", &y, &m, &d, &tail) != 3 ||
        m < 1 || m > 12 || d < 1 || d > 31) {
        throw Error("invalid ISO date: " + iso);
    }
    return days_from_civil(y, m, d);
}

inline int year_of(const std::string& iso) {
    return static_cast<int>(std::stoi(iso.substr(0, 4)));
}

// Consecutive weekdays starting at `start` (itself moved to the next weekday
// if it falls on a weekend).
inline std::vector<std::string> make_trading_dates(const std::string& start, int count) {
    std::vector<std::string> out;
    out.reserve(count);
    std::int64_t day = parse_iso_date(start);
    while (static_cast<int>(out.size()) < count) {
        if (weekday_from_days(day) < 5) out.push_back(format_iso_date(day));
        ++day;
    }
    return out;
}

}  // namespace quantloop
