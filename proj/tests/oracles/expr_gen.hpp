#pragma once

// Random small factor expressions and panels for property tests.

#include <memory>
#include <string>
#include <vector>

#include "quantloop/expr.hpp"
#include "quantloop/panel.hpp"
#include "quantloop/rng.hpp"

namespace oracle {

inline quantloop::ExprPtr random_expr(quantloop::Rng& rng,
                                      const std::vector<std::string>& fields, int depth) {
    using namespace quantloop;
    auto leaf = [&]() -> ExprPtr {
        if (rng.uniform() < 0.7) {
            const auto& f = fields[rng.uniform_int(0, static_cast<int>(fields.size()) - 1)];
            return std::make_shared<Expr>(Expr{FieldRef{f}});
        }
        const double v = std::round((rng.uniform() * 8.0 - 4.0) * 4.0) / 4.0;
        return std::make_shared<Expr>(Expr{NumLit{v}});
    };
    if (depth <= 0) return leaf();

    const int pick = rng.uniform_int(0, 11);
    auto sub = [&]() { return random_expr(rng, fields, depth - 1); };
    auto win = [&]() {
        return std::make_shared<Expr>(Expr{NumLit{static_cast<double>(rng.uniform_int(1, 8))}});
    };
    switch (pick) {
        case 0: case 1: case 2: case 3: {
            const char ops[] = {'+', '-', '*', '/'};
            return std::make_shared<Expr>(Expr{BinOp{ops[pick], sub(), sub()}});
        }
        case 4: return std::make_shared<Expr>(Expr{Call{"Ref", {sub(), win()}}});
        case 5: return std::make_shared<Expr>(Expr{Call{"Mean", {sub(), win()}}});
        case 6: return std::make_shared<Expr>(Expr{Call{"Std", {sub(), win()}}});
        case 7: return std::make_shared<Expr>(Expr{Call{"Sum", {sub(), win()}}});
        case 8: return std::make_shared<Expr>(Expr{Call{"Corr", {sub(), sub(), win()}}});
        case 9:
            return std::make_shared<Expr>(
                Expr{Call{rng.uniform() < 0.5 ? "Rsquare" : "Resi", {sub(), win()}}});
        case 10:
            return std::make_shared<Expr>(
                Expr{Call{rng.uniform() < 0.5 ? "Less" : "Greater", {sub(), sub()}}});
        default:
            return std::make_shared<Expr>(
                Expr{Call{rng.uniform() < 0.5 ? "Abs" : "Log", {sub()}}});
    }
}

// Small panel with moderate magnitudes and a sprinkling of NaN holes.
inline quantloop::PanelTensor random_panel(quantloop::Rng& rng, int n_instruments, int n_dates,
                                           double nan_rate = 0.03) {
    using namespace quantloop;
    std::vector<std::string> instruments;
    for (int i = 0; i < n_instruments; ++i) instruments.push_back("R" + std::to_string(i));
    auto dates = make_trading_dates("2019-03-04", n_dates);
    const std::vector<std::string> fields = {"open", "high", "low", "close", "volume"};
    std::vector<double> values(static_cast<std::size_t>(n_instruments) * n_dates * fields.size());
    for (int i = 0; i < n_instruments; ++i) {
        double price = 20.0 + 80.0 * rng.uniform();
        for (int t = 0; t < n_dates; ++t) {
            price *= std::exp(0.03 * rng.gaussian());
            const double open = price * std::exp(0.01 * rng.gaussian());
            const double hi = std::max(open, price) * (1.0 + 0.01 * rng.uniform());
            const double lo = std::min(open, price) * (1.0 - 0.01 * rng.uniform());
            const double volume = 1.0e3 * std::exp(0.6 * rng.gaussian());
            const std::size_t base =
                (static_cast<std::size_t>(i) * n_dates + t) * fields.size();
            const double row[5] = {open, hi, lo, price, volume};
            for (int p = 0; p < 5; ++p) {
                values[base + p] = rng.uniform() < nan_rate ? kNaN : row[p];
            }
        }
    }
    return PanelTensor(instruments, dates, fields, std::move(values));
}

}  // namespace oracle
