#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "quantloop/errors.hpp"
#include "quantloop/jsonutil.hpp"
#include "quantloop/metrics.hpp"
#include "quantloop/panel.hpp"

namespace quantloop {

// Daily top-k long-only strategy parameters. Costs are fractions of
// notional; min_fee is an absolute per-trade floor; price_limit blocks
// trading in names that moved that much against the prior close.
struct StrategyConfig {
    int topk = 50;
    int n_drop = 5;
    double buy_cost = 0.0005;
    double sell_cost = 0.0015;
    double min_fee = 5.0;
    double price_limit = 0.095;
    double initial_cash = 1e8;
    int retention_rank = 0;  // 0 means "same as topk"

    int effective_retention() const { return retention_rank > 0 ? retention_rank : topk; }

    void validate() const {
        if (topk <= 0) throw InvalidParameter("topk must be positive");
        if (n_drop < 0 || n_drop >= topk) throw InvalidParameter("need topk > n_drop >= 0");
        if (buy_cost < 0.0 || buy_cost >= 1.0 || sell_cost < 0.0 || sell_cost >= 1.0) {
            throw InvalidParameter("costs must be in [0, 1)");
        }
        if (min_fee < 0.0) throw InvalidParameter("min_fee must be >= 0");
        if (price_limit <= 0.0) throw InvalidParameter("price_limit must be positive");
        if (initial_cash <= 0.0) throw InvalidParameter("initial_cash must be positive");
    }
};

struct Trade {
    std::string date;
    std::string instrument;
    char side = 'B';  // 'B' or 'S'
    double shares = 0.0;
    double price = 0.0;
    double fee = 0.0;
};

struct BacktestReport {
    DailySeries nav;
    DailySeries daily_returns;
    std::vector<std::map<std::string, double>> positions;  // shares per day
    std::vector<double> cash;                              // per day, after trading
    std::vector<double> costs_paid;                        // per day
    std::vector<Trade> trades;
    std::vector<std::string> warnings;
};

// Ranks the scored cross-section and applies the holding rules: the n_drop
// lowest-ranked held names are forced out, held names ranked within the
// retention threshold stay, and remaining slots fill with the best-ranked
// names not yet held. NaN-scored names are unrankable: they are never
// selected and never retained.
inline std::set<std::string> select_targets(const std::map<std::string, double>& scores,
                                            const std::set<std::string>& held,
                                            const StrategyConfig& cfg) {
    cfg.validate();
    if (scores.empty()) throw EmptyCrossSection("no scores for target selection");

    std::vector<std::pair<double, std::string>> ranked;
    for (const auto& [id, score] : scores) {
        if (!std::isnan(score)) ranked.emplace_back(score, id);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::map<std::string, int> rank_of;  // 1-based
    for (std::size_t k = 0; k < ranked.size(); ++k) rank_of[ranked[k].second] = static_cast<int>(k) + 1;

    // held names ordered worst-first; unranked held names count as worst,
    // ordered by id for determinism
    std::vector<std::pair<int, std::string>> held_by_rank;
    for (const auto& id : held) {
        auto it = rank_of.find(id);
        held_by_rank.emplace_back(it == rank_of.end() ? std::numeric_limits<int>::max() : it->second,
                                  id);
    }
    std::sort(held_by_rank.begin(), held_by_rank.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::set<std::string> dropped;
    for (int k = 0; k < cfg.n_drop && k < static_cast<int>(held_by_rank.size()); ++k) {
        dropped.insert(held_by_rank[k].second);
    }

    std::set<std::string> targets;
    const int retention = cfg.effective_retention();
    for (const auto& [rank, id] : held_by_rank) {
        if (dropped.count(id)) continue;
        if (rank <= retention) targets.insert(id);
    }
    for (const auto& [score, id] : ranked) {
        if (static_cast<int>(targets.size()) >= cfg.topk) break;
        if (held.count(id)) continue;
        targets.insert(id);
    }
    return targets;
}

namespace backtest_detail {

// Largest notional n with n + fee(n) <= budget, fee(n) = max(min_fee, n*rate).
// Returns {notional, fee}, or {0, 0} when the budget cannot cover the fee.
inline std::pair<double, double> affordable_notional(double budget, double rate, double min_fee) {
    if (budget <= 0.0) return {0.0, 0.0};
    double notional = 0.0, fee = 0.0;
    if (rate <= 0.0) {
        notional = budget - min_fee;
        fee = min_fee;
    } else {
        const double proportional = budget / (1.0 + rate);
        if (proportional * rate >= min_fee) {
            notional = proportional;
            fee = notional * rate;
        } else {
            notional = budget - min_fee;
            fee = min_fee;
        }
    }
    if (notional <= 0.0) return {0.0, 0.0};
    // division/product rounding can overshoot the budget by an ulp
    while (notional + fee > budget) {
        notional = std::nextafter(notional, 0.0);
        fee = std::max(min_fee, notional * rate);
    }
    return {notional, fee};
}

}  // namespace backtest_detail

// Simulates the strategy over panel date indices [date_begin, date_end].
// Scores dated t drive trades at the close of t+1; all fills are at that
// close. A held name with a missing close is carried at its last known price
// and flagged.
inline BacktestReport run_backtest(const GridSeries& scores, const PanelTensor& panel,
                                   const StrategyConfig& cfg, int date_begin, int date_end) {
    cfg.validate();
    if (scores.instruments != panel.instruments() || scores.dates != panel.dates()) {
        throw IndexMismatch("scores are not aligned with the panel grid");
    }
    if (date_begin < 0 || date_end >= panel.n_dates() || date_begin > date_end) {
        throw InvalidParameter("bad backtest date range");
    }
    const int close_field = panel.require_field("close");
    const int N = panel.n_instruments();

    BacktestReport report;
    double cash = cfg.initial_cash;
    std::map<std::string, double> shares;      // current holdings
    std::map<std::string, double> last_price;  // last known close per held name
    double prev_nav = cfg.initial_cash;

    auto close_at = [&](int i, int t) { return panel.at(i, t, close_field); };
    std::map<std::string, int> index_of;
    for (int i = 0; i < N; ++i) index_of[panel.instruments()[i]] = i;
    auto instrument_index = [&](const std::string& id) { return index_of.at(id); };

    for (int d = date_begin; d <= date_end; ++d) {
        const std::string& today = panel.dates()[d];
        double fees_today = 0.0;

        if (d > date_begin) {
            const int prev = d - 1;
            std::map<std::string, double> cross;
            for (int i = 0; i < N; ++i) {
                const double s = scores.at(i, prev);
                if (!std::isnan(s)) cross[panel.instruments()[i]] = s;
            }
            std::set<std::string> held;
            for (const auto& [id, sh] : shares) held.insert(id);

            if (!cross.empty()) {
                const auto targets = select_targets(cross, held, cfg);

                auto tradable = [&](const std::string& id) {
                    const int i = instrument_index(id);
                    const double px = close_at(i, d);
                    if (std::isnan(px) || px <= 0.0) return false;
                    const double ref = close_at(i, prev);
                    if (!std::isnan(ref) && ref > 0.0 &&
                        std::abs(px / ref - 1.0) >= cfg.price_limit) {
                        return false;  // limit-hit: no fill today
                    }
                    return true;
                };

                // sell leg: anything held but no longer wanted
                for (const auto& id : held) {
                    if (targets.count(id) || !tradable(id)) continue;
                    const int i = instrument_index(id);
                    const double px = close_at(i, d);
                    const double qty = shares[id];
                    const double proceeds = qty * px;
                    const double fee = std::max(cfg.min_fee, proceeds * cfg.sell_cost);
                    const double delta = proceeds - fee;
                    if (cash + delta < 0.0) continue;  // fee would overdraw
                    cash += delta;
                    fees_today += fee;
                    shares.erase(id);
                    last_price.erase(id);
                    report.trades.push_back({today, id, 'S', qty, px, fee});
                }

                // buy leg: equal cash split across the new names; a
                // limit-blocked name keeps its slot uninvested today
                std::vector<std::string> buys;
                std::size_t slots = 0;
                for (const auto& id : targets) {
                    if (shares.count(id)) continue;
                    const double px = close_at(instrument_index(id), d);
                    if (std::isnan(px) || px <= 0.0) continue;
                    ++slots;
                    if (tradable(id)) buys.push_back(id);
                }
                if (!buys.empty() && cash > 0.0) {
                    const double per_name = cash / static_cast<double>(slots);
                    for (const auto& id : buys) {
                        const double budget = std::min(per_name, cash);
                        const auto [notional, fee] =
                            backtest_detail::affordable_notional(budget, cfg.buy_cost, cfg.min_fee);
                        if (notional <= 0.0) continue;
                        const int i = instrument_index(id);
                        const double px = close_at(i, d);
                        const double qty = notional / px;
                        cash -= notional + fee;
                        fees_today += fee;
                        shares[id] += qty;
                        report.trades.push_back({today, id, 'B', qty, px, fee});
                    }
                }
            }
        }

        // mark holdings at today's close, carrying stale prices when missing
        double holdings_value = 0.0;
        for (const auto& [id, qty] : shares) {
            const int i = instrument_index(id);
            double px = close_at(i, d);
            if (std::isnan(px) || px <= 0.0) {
                const auto it = last_price.find(id);
                if (it == last_price.end()) {
                    throw Error("no known price for held instrument " + id);
                }
                px = it->second;
                report.warnings.push_back("carried " + id + " at stale price on " + today);
            } else {
                last_price[id] = px;
            }
            holdings_value += qty * px;
        }
        const double nav = cash + holdings_value;
        report.nav.push(today, nav);
        report.daily_returns.push(today, d == date_begin ? 0.0 : nav / prev_nav - 1.0);
        report.positions.push_back(shares);
        report.cash.push_back(cash);
        report.costs_paid.push_back(fees_today);
        prev_nav = nav;
    }
    return report;
}

inline json report_to_json(const BacktestReport& report) {
    double total_costs = 0.0;
    for (double c : report.costs_paid) total_costs += c;
    json final_positions = json::object();
    if (!report.positions.empty()) {
        for (const auto& [id, qty] : report.positions.back()) final_positions[id] = qty;
    }
    json nav_arr = json::array(), ret_arr = json::array();
    for (double v : report.nav.values) nav_arr.push_back(json_double(v));
    for (double v : report.daily_returns.values) ret_arr.push_back(json_double(v));
    return {
        {"summary",
         {{"days", report.nav.size()},
          {"final_nav", report.nav.values.empty() ? 0.0 : report.nav.values.back()},
          {"total_costs", total_costs},
          {"trades", report.trades.size()},
          {"warnings", report.warnings.size()}}},
        {"dates", report.nav.dates},
        {"nav", nav_arr},
        {"daily_return", ret_arr},
        {"costs", report.costs_paid},
        {"cash", report.cash},
        {"final_positions", final_positions},
        {"warnings", report.warnings},
    };
}

inline std::string trades_to_csv(const BacktestReport& report) {
    std::ostringstream out;
    out << "date,instrument,side,shares,price,fee\n";
    for (const auto& t : report.trades) {
        out << t.date << ',' << t.instrument << ',' << t.side << ','
            << detail::format_cell(t.shares) << ',' << detail::format_cell(t.price) << ','
            << detail::format_cell(t.fee) << '\n';
    }
    return out.str();
}

inline std::string nav_to_csv(const BacktestReport& report) {
    std::ostringstream out;
    out << "date,nav,daily_return\n";
    for (std::size_t k = 0; k < report.nav.size(); ++k) {
        out << report.nav.dates[k] << ',' << detail::format_cell(report.nav.values[k]) << ','
            << detail::format_cell(report.daily_returns.values[k]) << '\n';
    }
    return out.str();
}

}  // namespace quantloop
