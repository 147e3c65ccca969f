#pragma once

// Tick ingestion onto the one-minute session grid, contract rolling with
// back-adjustment, and intraday log returns.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <boost/date_time/local_time/local_time.hpp>

#include "hmmtrend/error.hpp"
#include "hmmtrend/ewma.hpp"

namespace hmmtrend {

struct InstrumentSpec {
    std::string symbol = "ES";
    double tick = 0.25;
    int session_open = kSessionOpenMinute;    // minutes after local midnight
    int session_close = kSessionCloseMinute;  // inclusive
    int roll_offset_days = 12;

    std::size_t bars_per_day() const { return static_cast<std::size_t>(session_close - session_open + 1); }

    void validate() const {
        if (!(tick > 0.0) || !std::isfinite(tick)) throw InvalidParameter("tick size must be positive");
        if (session_open < 0 || session_close >= 24 * 60 || session_close <= session_open)
            throw InvalidParameter("session must satisfy 0 <= open < close < 24:00");
        if (roll_offset_days < 0) throw InvalidParameter("roll offset must be >= 0");
    }
};

using Date = std::chrono::year_month_day;

inline std::string format_date(const Date& d) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(d.year()), static_cast<unsigned>(d.month()),
                  static_cast<unsigned>(d.day()));
    return buf;
}

inline Date parse_date(const std::string& s) {
    int y = 0;
    unsigned m = 0, d = 0;
    char tail = 0;
    if (std::sscanf(s.c_str(), "%4d-%2u-%2u%c", &y, &m, &d, &tail) != 3) throw InvalidInput("bad date '" + s + "'");
    const Date out{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
    if (!out.ok()) throw InvalidInput("bad date '" + s + "'");
    return out;
}

inline bool is_weekday(const Date& d) {
    const std::chrono::weekday w{std::chrono::sys_days{d}};
    return w != std::chrono::Saturday && w != std::chrono::Sunday;
}

struct TradingDay {
    Date date;
    std::vector<double> close;  // one per session minute
};

struct BarSeries {
    InstrumentSpec spec;
    std::vector<TradingDay> days;

    std::size_t bars_per_day() const { return spec.bars_per_day(); }

    void validate() const {
        spec.validate();
        for (std::size_t i = 0; i < days.size(); ++i) {
            const auto& d = days[i];
            if (d.close.size() != bars_per_day())
                throw InvalidInput("day " + format_date(d.date) + " has " + std::to_string(d.close.size()) +
                                   " bars, expected " + std::to_string(bars_per_day()));
            if (i > 0 && !(std::chrono::sys_days{days[i - 1].date} < std::chrono::sys_days{d.date}))
                throw InvalidInput("trading days are not strictly increasing at " + format_date(d.date));
            for (double p : d.close) {
                if (!(p > 0.0) || !std::isfinite(p))
                    throw InvalidInput("non-positive price on " + format_date(d.date));
                if (std::abs(p / spec.tick - std::round(p / spec.tick)) > 1e-6)
                    throw InvalidInput("price " + std::to_string(p) + " on " + format_date(d.date) +
                                       " is off the tick grid");
            }
        }
    }
};

/// Milliseconds since the Unix epoch for an ISO-8601 timestamp carrying a zone
/// designator (Z or +-HH[:MM]).
inline std::int64_t parse_timestamp(const std::string& s) {
    static const std::regex re(
        R"(^(\d{4})-(\d{2})-(\d{2})[T ](\d{2}):(\d{2}):(\d{2})(\.\d+)?(Z|[+-]\d{2}(:?\d{2})?)$)");
    std::smatch m;
    if (!std::regex_match(s, m, re)) throw InvalidInput("timestamp '" + s + "' is not ISO-8601 with a zone");
    const Date d{std::chrono::year{std::stoi(m[1])}, std::chrono::month{static_cast<unsigned>(std::stoi(m[2]))},
                 std::chrono::day{static_cast<unsigned>(std::stoi(m[3]))}};
    const int hh = std::stoi(m[4]), mm = std::stoi(m[5]), ss = std::stoi(m[6]);
    if (!d.ok() || hh > 23 || mm > 59 || ss > 60) throw InvalidInput("timestamp '" + s + "' is out of range");
    std::int64_t ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                          std::chrono::sys_days{d}.time_since_epoch())
                          .count();
    ms += (static_cast<std::int64_t>(hh) * 3600 + mm * 60 + ss) * 1000;
    if (m[7].matched) ms += static_cast<std::int64_t>(std::llround(std::stod("0" + m[7].str()) * 1000.0));
    const std::string zone = m[8];
    if (zone != "Z") {
        const int sign = zone[0] == '-' ? -1 : 1;
        const int zh = std::stoi(zone.substr(1, 2));
        const int zm = zone.size() > 3 ? std::stoi(zone.substr(zone.size() - 2)) : 0;
        ms -= sign * (static_cast<std::int64_t>(zh) * 3600 + zm * 60) * 1000;
    }
    return ms;
}

struct LocalTime {
    Date date;
    int minute = 0;  // minutes after local midnight
};

/// US Central time with the post-2007 daylight-saving rule.
inline LocalTime to_chicago(std::int64_t utc_ms) {
    namespace lt = boost::local_time;
    namespace pt = boost::posix_time;
    static const lt::time_zone_ptr tz(new lt::posix_time_zone("CST-06CDT+01,M3.2.0/02:00,M11.1.0/02:00"));
    const std::int64_t secs = utc_ms >= 0 ? utc_ms / 1000 : -((-utc_ms + 999) / 1000);
    const pt::ptime utc = pt::ptime(boost::gregorian::date(1970, 1, 1)) + pt::seconds(static_cast<long>(secs));
    const pt::ptime local = lt::local_date_time(utc, tz).local_time();
    const auto ld = local.date();
    LocalTime out;
    out.date = Date{std::chrono::year{static_cast<int>(ld.year())}, std::chrono::month{ld.month().as_number()},
                    std::chrono::day{ld.day().as_number()}};
    out.minute = static_cast<int>(local.time_of_day().hours() * 60 + local.time_of_day().minutes());
    return out;
}

/// Quarterly equity-index expiry: the third Friday of the contract month named
/// by the trailing month code and year of `code` (e.g. ESH11, ESZ2011, ESM1).
inline Date contract_expiry(const std::string& code) {
    static const std::regex re(R"(([FGHJKMNQUVXZ])(\d{1,4})$)");
    static const std::string months = "FGHJKMNQUVXZ";
    std::smatch m;
    if (!std::regex_search(code, m, re)) throw InvalidInput("cannot read expiry month from contract '" + code + "'");
    const unsigned month = static_cast<unsigned>(months.find(m[1].str()[0])) + 1;
    int year = std::stoi(m[2]);
    if (m[2].length() == 1) year += 2010;
    else if (m[2].length() == 2) year += 2000;
    const std::chrono::year_month_weekday third{std::chrono::year{year} / std::chrono::month{month} /
                                                std::chrono::Friday[3]};
    return Date{std::chrono::sys_days{third}};
}

struct Tick {
    std::int64_t utc_ms = 0;
    double price = 0.0;
    double volume = 0.0;
    std::string contract;
    std::size_t line = 0;
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream is(line);
    while (std::getline(is, field, ',')) {
        while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) field.pop_back();
        while (!field.empty() && field.front() == ' ') field.erase(field.begin());
        out.push_back(field);
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline double parse_number(const std::string& s, std::size_t line, const char* what) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ParseError(line, std::string("bad ") + what + " '" + s + "'");
    }
}

}  // namespace detail

/// Rows of `timestamp,price,volume[,contract]` after a header line.
inline std::vector<Tick> read_ticks(std::istream& in) {
    std::string line;
    std::size_t lineno = 0;
    std::vector<Tick> ticks;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto f = detail::split_csv(line);
        if (ticks.empty() && lineno == 1 && !f.empty() && f[0] == "timestamp") continue;
        if (f.size() < 2 || f.size() > 4) throw ParseError(lineno, "expected timestamp,price[,volume[,contract]]");
        Tick t;
        t.line = lineno;
        try {
            t.utc_ms = parse_timestamp(f[0]);
        } catch (const InvalidInput& e) {
            throw ParseError(lineno, e.what());
        }
        t.price = detail::parse_number(f[1], lineno, "price");
        if (!(t.price > 0.0)) throw ParseError(lineno, "price must be positive");
        if (f.size() > 2 && !f[2].empty()) t.volume = detail::parse_number(f[2], lineno, "volume");
        if (f.size() > 3) t.contract = f[3];
        if (!ticks.empty() && t.utc_ms < ticks.back().utc_ms)
            throw ParseError(lineno, "timestamp goes backwards (previous row at line " +
                                         std::to_string(ticks.back().line) + ")");
        ticks.push_back(std::move(t));
    }
    return ticks;
}

/// Last-trade closes on the session minute grid. Minutes without trades carry
/// the previous close; minutes before the first trade of a day take that
/// trade's price. Weekend days, out-of-session ticks and days without trades
/// are dropped. With a contract column, each day uses the front contract
/// (earliest expiry whose roll date, `roll_offset_days` calendar days before
/// expiry, is still ahead) and earlier history is shifted by the price gap
/// between the new and old contracts at each roll.
inline BarSeries ingest_ticks(const std::vector<Tick>& ticks, const InstrumentSpec& spec) {
    spec.validate();
    struct Local {
        const Tick* tick;
        LocalTime at;
    };
    std::map<int, std::vector<Local>> by_day;  // keyed by sys_days count
    std::set<std::string> contracts;
    for (const auto& t : ticks) {
        if (std::abs(t.price / spec.tick - std::round(t.price / spec.tick)) > 1e-6)
            throw ParseError(t.line, "price " + std::to_string(t.price) + " is not a multiple of the tick size");
        const LocalTime lt = to_chicago(t.utc_ms);
        if (!is_weekday(lt.date) || lt.minute < spec.session_open || lt.minute > spec.session_close) continue;
        by_day[static_cast<int>(std::chrono::sys_days{lt.date}.time_since_epoch().count())].push_back({&t, lt});
        contracts.insert(t.contract);
    }
    const bool rolling = !(contracts.size() <= 1);

    std::vector<std::pair<Date, std::string>> roll_table;  // (roll date, contract), by expiry
    if (rolling) {
        for (const auto& c : contracts) {
            if (c.empty()) throw InvalidInput("contract column is blank on some rows but not others");
            const Date exp = contract_expiry(c);
            roll_table.push_back({Date{std::chrono::sys_days{exp} - std::chrono::days{spec.roll_offset_days}}, c});
        }
        std::sort(roll_table.begin(), roll_table.end(), [](const auto& a, const auto& b) {
            return std::chrono::sys_days{a.first} < std::chrono::sys_days{b.first};
        });
    }
    auto front = [&](const Date& d) -> std::string {
        for (const auto& [roll, c] : roll_table)
            if (std::chrono::sys_days{d} < std::chrono::sys_days{roll}) return c;
        return roll_table.back().second;
    };
    auto last_price = [](const std::vector<Local>& v, const std::string& c) -> std::optional<double> {
        for (auto it = v.rbegin(); it != v.rend(); ++it)
            if (it->tick->contract == c) return it->tick->price;
        return std::nullopt;
    };

    BarSeries out;
    out.spec = spec;
    std::vector<std::string> day_contract;
    std::vector<double> gap_into;  // gap added at the start of each day
    const std::size_t n = spec.bars_per_day();
    const std::vector<Local>* prev = nullptr;
    for (const auto& [key, locals] : by_day) {
        const std::string c = rolling ? front(locals.front().at.date) : std::string();
        std::vector<double> close(n, std::nan(""));
        for (const auto& l : locals)
            if (l.tick->contract == c) close[static_cast<std::size_t>(l.at.minute - spec.session_open)] = l.tick->price;
        const auto first = std::find_if(close.begin(), close.end(), [](double v) { return !std::isnan(v); });
        if (first == close.end()) continue;
        std::fill(close.begin(), first, *first);
        for (std::size_t i = 1; i < n; ++i)
            if (std::isnan(close[i])) close[i] = close[i - 1];

        double gap = 0.0;
        if (!day_contract.empty() && day_contract.back() != c) {
            const auto old_last = last_price(*prev, day_contract.back());
            const auto new_prev = last_price(*prev, c);
            gap = new_prev ? *new_prev - *old_last : close.front() - out.days.back().close.back();
        }
        out.days.push_back({locals.front().at.date, std::move(close)});
        day_contract.push_back(c);
        gap_into.push_back(gap);
        prev = &locals;
    }
    double shift = 0.0;
    for (std::size_t i = out.days.size(); i-- > 0;) {
        if (shift != 0.0)
            for (double& p : out.days[i].close) p = std::round((p + shift) / spec.tick) * spec.tick;
        shift += gap_into[i];
    }
    return out;
}

inline BarSeries ingest_ticks(std::istream& in, const InstrumentSpec& spec) {
    return ingest_ticks(read_ticks(in), spec);
}

inline BarSeries ingest_ticks_file(const std::string& path, const InstrumentSpec& spec) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open " + path);
    return ingest_ticks(in, spec);
}

/// Intraday log returns, bars_per_day - 1 per day; nothing spans a day boundary.
inline std::vector<double> to_returns(const BarSeries& bars) {
    std::vector<double> out;
    out.reserve(bars.days.size() * (bars.bars_per_day() - 1));
    for (const auto& d : bars.days) {
        for (double p : d.close)
            if (!(p > 0.0)) throw InvalidInput("non-positive price on " + format_date(d.date));
        for (std::size_t i = 1; i < d.close.size(); ++i) out.push_back(std::log(d.close[i] / d.close[i - 1]));
    }
    return out;
}

/// The last `days` whole days of a flat per-day series; 0 keeps everything.
inline std::vector<double> trailing_days(std::span<const double> x, std::size_t per_day, std::size_t days) {
    if (per_day == 0 || x.size() % per_day != 0) throw InvalidInput("series length is not a whole number of days");
    const std::size_t have = x.size() / per_day;
    if (days == 0 || days >= have) return {x.begin(), x.end()};
    return {x.end() - static_cast<std::ptrdiff_t>(days * per_day), x.end()};
}

inline double mean_price(const BarSeries& bars) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& d : bars.days)
        for (double p : d.close) {
            s += p;
            ++n;
        }
    if (n == 0) throw InvalidInput("bar series is empty");
    return s / static_cast<double>(n);
}

/// Bars as `date,time,close`, one row per session minute.
inline void write_bars_csv(std::ostream& os, const BarSeries& bars) {
    os << "date,time,close\n";
    char t[24];
    for (const auto& d : bars.days) {
        const std::string date = format_date(d.date);
        for (std::size_t i = 0; i < d.close.size(); ++i) {
            const int m = bars.spec.session_open + static_cast<int>(i);
            std::snprintf(t, sizeof t, "%02d:%02d", m / 60, m % 60);
            os << date << ',' << t << ',' << d.close[i] << '\n';
        }
    }
}

inline BarSeries read_bars_csv(std::istream& in, const InstrumentSpec& spec) {
    BarSeries out;
    out.spec = spec;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || (lineno == 1 && line.rfind("date", 0) == 0)) continue;
        const auto f = detail::split_csv(line);
        if (f.size() != 3) throw ParseError(lineno, "expected date,time,close");
        Date d;
        int hh = 0, mm = 0;
        try {
            d = parse_date(f[0]);
        } catch (const InvalidInput& e) {
            throw ParseError(lineno, e.what());
        }
        if (std::sscanf(f[1].c_str(), "%d:%d", &hh, &mm) != 2) throw ParseError(lineno, "bad time '" + f[1] + "'");
        const double p = detail::parse_number(f[2], lineno, "close");
        if (out.days.empty() || !(out.days.back().date == d)) out.days.push_back({d, {}});
        auto& c = out.days.back().close;
        if (hh * 60 + mm != spec.session_open + static_cast<int>(c.size()))
            throw ParseError(lineno, "bar time " + f[1] + " is out of sequence");
        c.push_back(p);
    }
    out.validate();
    return out;
}

inline void write_bars_file(const std::string& path, const BarSeries& bars) {
    std::ofstream os(path);
    if (!os) throw InvalidInput("cannot write " + path);
    os.precision(12);
    write_bars_csv(os, bars);
}

inline BarSeries read_bars_file(const std::string& path, const InstrumentSpec& spec) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open " + path);
    return read_bars_csv(in, spec);
}

}  // namespace hmmtrend
