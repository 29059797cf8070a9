#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "quantloop/errors.hpp"
#include "quantloop/jsonutil.hpp"

namespace quantloop {

inline constexpr double kTradingDaysPerYear = 252.0;

// A dated value series (daily ICs, daily portfolio returns, NAV, ...).
struct DailySeries {
    std::vector<std::string> dates;
    std::vector<double> values;

    void push(std::string date, double value) {
        dates.push_back(std::move(date));
        values.push_back(value);
    }
    std::size_t size() const { return values.size(); }
};

// The eight summary quantities. mdd is stored signed (<= 0).
struct MetricsBundle {
    double ic = 0.0;
    double icir = 0.0;
    double rank_ic = 0.0;
    double rank_icir = 0.0;
    double arr = 0.0;
    double ir = 0.0;
    double mdd = 0.0;
    double calmar = 0.0;
};

inline json metrics_to_json(const MetricsBundle& m) {
    return {{"ic", json_double(m.ic)},           {"icir", json_double(m.icir)},
            {"rank_ic", json_double(m.rank_ic)}, {"rank_icir", json_double(m.rank_icir)},
            {"arr", json_double(m.arr)},         {"ir", json_double(m.ir)},
            {"mdd", json_double(m.mdd)},         {"calmar", json_double(m.calmar)}};
}

inline MetricsBundle metrics_from_json(const json& j) {
    MetricsBundle m;
    m.ic = double_from_json(j.at("ic"));
    m.icir = double_from_json(j.at("icir"));
    m.rank_ic = double_from_json(j.at("rank_ic"));
    m.rank_icir = double_from_json(j.at("rank_icir"));
    m.arr = double_from_json(j.at("arr"));
    m.ir = double_from_json(j.at("ir"));
    m.mdd = double_from_json(j.at("mdd"));
    m.calmar = double_from_json(j.at("calmar"));
    return m;
}

namespace metrics_detail {

// Drops pairs where either side is NaN.
inline void paired_filter(const std::vector<double>& a, const std::vector<double>& b,
                          std::vector<double>& fa, std::vector<double>& fb) {
    if (a.size() != b.size()) throw ShapeMismatch("cross-sections differ in length");
    fa.clear();
    fb.clear();
    for (std::size_t k = 0; k < a.size(); ++k) {
        if (!std::isnan(a[k]) && !std::isnan(b[k])) {
            fa.push_back(a[k]);
            fb.push_back(b[k]);
        }
    }
}

inline bool all_equal(const std::vector<double>& v) {
    for (double x : v) {
        if (x != v.front()) return false;
    }
    return true;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    // bit-identical inputs are exactly zero-variance; the accumulated mean
    // may round away from that
    if (all_equal(x) || all_equal(y)) return kNaN;
    double mx = 0.0, my = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        mx += x[k];
        my += y[k];
    }
    mx /= n;
    my /= n;
    double cov = 0.0, vx = 0.0, vy = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        cov += (x[k] - mx) * (y[k] - my);
        vx += (x[k] - mx) * (x[k] - mx);
        vy += (y[k] - my) * (y[k] - my);
    }
    if (vx == 0.0 || vy == 0.0) return kNaN;
    return cov / std::sqrt(vx * vy);
}

// Average ranks for ties, 1-based.
inline std::vector<double> ranks(const std::vector<double>& x) {
    const std::size_t n = x.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(n);
    std::size_t k = 0;
    while (k < n) {
        std::size_t j = k;
        while (j + 1 < n && x[order[j + 1]] == x[order[k]]) ++j;
        const double avg = 0.5 * (k + j) + 1.0;
        for (std::size_t q = k; q <= j; ++q) r[order[q]] = avg;
        k = j + 1;
    }
    return r;
}

}  // namespace metrics_detail

// Daily information coefficient: Pearson correlation of the paired
// cross-sections, NaN pairs dropped. Zero variance on either side gives NaN.
inline double ic_daily(const std::vector<double>& pred, const std::vector<double>& real) {
    std::vector<double> fp, fr;
    metrics_detail::paired_filter(pred, real, fp, fr);
    if (fp.size() < 2) throw InsufficientData("need >= 2 paired entries for IC");
    return metrics_detail::pearson(fp, fr);
}

// Spearman version: Pearson of average ranks.
inline double rank_ic_daily(const std::vector<double>& pred, const std::vector<double>& real) {
    std::vector<double> fp, fr;
    metrics_detail::paired_filter(pred, real, fp, fr);
    if (fp.size() < 2) throw InsufficientData("need >= 2 paired entries for Rank IC");
    return metrics_detail::pearson(metrics_detail::ranks(fp), metrics_detail::ranks(fr));
}

// Temporal stability: mean / population std of the daily series.
inline double icir(const DailySeries& series) {
    const std::size_t n = series.values.size();
    if (n < 2) throw InsufficientData("need >= 2 values for ICIR");
    if (metrics_detail::all_equal(series.values)) return kNaN;
    double mean = 0.0;
    for (double v : series.values) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : series.values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    if (var == 0.0) return kNaN;
    return mean / std::sqrt(var);
}

// Signed maximum drawdown of a NAV path (includes the initial point): the
// most negative P_t / running_max - 1. Flat-or-rising paths give 0.
inline double max_drawdown(const std::vector<double>& nav) {
    if (nav.empty()) throw InsufficientData("empty NAV path");
    double peak = nav[0];
    double worst = 0.0;
    for (double p : nav) {
        peak = std::max(peak, p);
        worst = std::min(worst, p / peak - 1.0);
    }
    return worst;
}

// ARR, IR, MDD and Calmar from daily portfolio returns. The benchmark is the
// risk-free rate, so IR coincides with the Sharpe ratio.
inline void strategy_metrics(const DailySeries& returns, double risk_free, MetricsBundle& out) {
    const std::size_t T = returns.values.size();
    if (T == 0) throw InsufficientData("empty return series");

    std::vector<double> nav;
    nav.reserve(T + 1);
    nav.push_back(1.0);
    double growth = 1.0;
    for (double r : returns.values) {
        if (r <= -1.0) throw InvalidReturn("daily return <= -1");
        growth *= 1.0 + r;
        nav.push_back(growth);
    }
    out.arr = std::pow(growth, kTradingDaysPerYear / static_cast<double>(T)) - 1.0;

    if (metrics_detail::all_equal(returns.values)) {
        out.ir = kNaN;
    } else {
        double mean = 0.0;
        for (double r : returns.values) mean += r - risk_free;
        mean /= static_cast<double>(T);
        double var = 0.0;
        for (double r : returns.values) var += (r - risk_free - mean) * (r - risk_free - mean);
        var /= static_cast<double>(T);
        out.ir = var == 0.0 ? kNaN : mean / std::sqrt(var) * std::sqrt(kTradingDaysPerYear);
    }

    out.mdd = max_drawdown(nav);
    out.calmar = out.mdd == 0.0 ? kNaN : out.arr / std::abs(out.mdd);
}

inline MetricsBundle strategy_metrics(const DailySeries& returns, double risk_free = 0.0) {
    MetricsBundle out;
    strategy_metrics(returns, risk_free, out);
    return out;
}

// Aggregates daily IC series and strategy returns into the full bundle.
// NaN daily ICs (degenerate cross-sections) are excluded from the averages.
inline MetricsBundle aggregate_metrics(const DailySeries& daily_ic,
                                       const DailySeries& daily_rank_ic,
                                       const DailySeries& returns, double risk_free = 0.0) {
    MetricsBundle out;
    auto clean = [](const DailySeries& s) {
        DailySeries c;
        for (std::size_t k = 0; k < s.values.size(); ++k) {
            if (!std::isnan(s.values[k])) c.push(s.dates[k], s.values[k]);
        }
        return c;
    };
    const DailySeries ic_series = clean(daily_ic);
    const DailySeries rank_series = clean(daily_rank_ic);

    auto mean_of = [](const DailySeries& s) {
        if (s.values.empty()) return kNaN;
        double m = 0.0;
        for (double v : s.values) m += v;
        return m / static_cast<double>(s.values.size());
    };
    out.ic = mean_of(ic_series);
    out.rank_ic = mean_of(rank_series);
    out.icir = ic_series.size() >= 2 ? icir(ic_series) : kNaN;
    out.rank_icir = rank_series.size() >= 2 ? icir(rank_series) : kNaN;
    strategy_metrics(returns, risk_free, out);
    return out;
}

}  // namespace quantloop
