#pragma once

#include <charconv>
#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "quantloop/errors.hpp"
#include "quantloop/panel.hpp"

namespace quantloop {

// Factor values live on the evaluation panel's grid, NaN where undefined
// (warm-up windows, degenerate statistics, non-finite arithmetic).
using FactorValues = GridSeries;

struct Expr;
using ExprPtr = std::shared_ptr<const Expr>;

struct FieldRef {
    std::string name;  // without the '$' sigil
};
struct NumLit {
    double value;
};
struct BinOp {
    char op;  // '+', '-', '*', '/'
    ExprPtr lhs, rhs;
};
struct Call {
    std::string fn;
    std::vector<ExprPtr> args;
};

struct Expr {
    std::variant<FieldRef, NumLit, BinOp, Call> node;
};

namespace dsl_detail {

struct OpInfo {
    int arity;
    int window_arg;  // index of the positive-integer argument, -1 if none
};

inline const std::map<std::string, OpInfo>& op_table() {
    static const std::map<std::string, OpInfo> table = {
        {"Ref", {2, 1}},  {"Mean", {2, 1}},    {"Std", {2, 1}},  {"Sum", {2, 1}},
        {"Corr", {3, 2}}, {"Rsquare", {2, 1}}, {"Resi", {2, 1}}, {"Less", {2, -1}},
        {"Greater", {2, -1}}, {"Abs", {1, -1}}, {"Log", {1, -1}},
    };
    return table;
}

struct Token {
    enum Kind { Number, Field, Ident, LParen, RParen, Comma, Plus, Minus, Star, Slash, End };
    Kind kind;
    std::string text;
    double number = 0.0;
    std::size_t offset = 0;
};

class Lexer {
public:
    explicit Lexer(const std::string& src) : src_(src) {}

    Token next() {
        while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
        const std::size_t start = pos_;
        if (pos_ >= src_.size()) return {Token::End, "", 0.0, start};
        const char c = src_[pos_];
        switch (c) {
            case '(': ++pos_; return {Token::LParen, "(", 0.0, start};
            case ')': ++pos_; return {Token::RParen, ")", 0.0, start};
            case ',': ++pos_; return {Token::Comma, ",", 0.0, start};
            case '+': ++pos_; return {Token::Plus, "+", 0.0, start};
            case '-': ++pos_; return {Token::Minus, "-", 0.0, start};
            case '*': ++pos_; return {Token::Star, "*", 0.0, start};
            case '/': ++pos_; return {Token::Slash, "/", 0.0, start};
            default: break;
        }
        if (c == '$') {
            ++pos_;
            std::string name;
            while (pos_ < src_.size() && (std::isalnum(static_cast<unsigned char>(src_[pos_])) ||
                                          src_[pos_] == '_')) {
                name.push_back(src_[pos_++]);
            }
            if (name.empty()) throw SyntaxError("'$' without a field name", start);
            return {Token::Field, name, 0.0, start};
        }
        if (std::isdigit(static_cast<unsigned char>(c))) {
            std::size_t end = pos_;
            while (end < src_.size() && std::isdigit(static_cast<unsigned char>(src_[end]))) ++end;
            if (end < src_.size() && src_[end] == '.') {
                ++end;
                while (end < src_.size() && std::isdigit(static_cast<unsigned char>(src_[end]))) ++end;
            }
            if (end < src_.size() && (src_[end] == 'e' || src_[end] == 'E')) {
                std::size_t e = end + 1;
                if (e < src_.size() && (src_[e] == '+' || src_[e] == '-')) ++e;
                std::size_t digits = e;
                while (digits < src_.size() && std::isdigit(static_cast<unsigned char>(src_[digits])))
                    ++digits;
                if (digits > e) end = digits;
            }
            double value = 0.0;
            auto [ptr, ec] = std::from_chars(src_.data() + pos_, src_.data() + end, value);
            if (ec != std::errc() || ptr != src_.data() + end) {
                throw SyntaxError("bad numeric literal", start);
            }
            pos_ = end;
            return {Token::Number, src_.substr(start, end - start), value, start};
        }
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
            std::size_t end = pos_;
            while (end < src_.size() && (std::isalnum(static_cast<unsigned char>(src_[end])) ||
                                         src_[end] == '_')) {
                ++end;
            }
            Token t{Token::Ident, src_.substr(pos_, end - pos_), 0.0, start};
            pos_ = end;
            return t;
        }
        throw SyntaxError(std::string("unexpected character '") + c + "'", start);
    }

private:
    const std::string& src_;
    std::size_t pos_ = 0;
};

class Parser {
public:
    explicit Parser(const std::string& src) : lexer_(src) { advance(); }

    ExprPtr parse_all() {
        ExprPtr e = parse_expr();
        if (cur_.kind != Token::End) throw SyntaxError("trailing input", cur_.offset);
        return e;
    }

private:
    void advance() { cur_ = lexer_.next(); }

    ExprPtr parse_expr() {
        ExprPtr lhs = parse_term();
        while (cur_.kind == Token::Plus || cur_.kind == Token::Minus) {
            const char op = cur_.kind == Token::Plus ? '+' : '-';
            advance();
            ExprPtr rhs = parse_term();
            lhs = std::make_shared<Expr>(Expr{BinOp{op, lhs, rhs}});
        }
        return lhs;
    }

    ExprPtr parse_term() {
        ExprPtr lhs = parse_unary();
        while (cur_.kind == Token::Star || cur_.kind == Token::Slash) {
            const char op = cur_.kind == Token::Star ? '*' : '/';
            advance();
            ExprPtr rhs = parse_unary();
            lhs = std::make_shared<Expr>(Expr{BinOp{op, lhs, rhs}});
        }
        return lhs;
    }

    ExprPtr parse_unary() {
        if (cur_.kind == Token::Minus) {
            advance();
            ExprPtr inner = parse_unary();
            if (const auto* lit = std::get_if<NumLit>(&inner->node)) {
                return std::make_shared<Expr>(Expr{NumLit{-lit->value}});
            }
            return std::make_shared<Expr>(
                Expr{BinOp{'-', std::make_shared<Expr>(Expr{NumLit{0.0}}), inner}});
        }
        return parse_primary();
    }

    ExprPtr parse_primary() {
        switch (cur_.kind) {
            case Token::Number: {
                const double v = cur_.number;
                advance();
                return std::make_shared<Expr>(Expr{NumLit{v}});
            }
            case Token::Field: {
                std::string name = cur_.text;
                advance();
                return std::make_shared<Expr>(Expr{FieldRef{std::move(name)}});
            }
            case Token::LParen: {
                advance();
                ExprPtr e = parse_expr();
                expect(Token::RParen, "expected ')'");
                return e;
            }
            case Token::Ident:
                return parse_call();
            default:
                throw SyntaxError("expected expression", cur_.offset);
        }
    }

    ExprPtr parse_call() {
        const std::string name = cur_.text;
        const std::size_t name_offset = cur_.offset;
        advance();
        const auto& ops = op_table();
        auto it = ops.find(name);
        if (it == ops.end()) throw UnknownOp(name);
        expect(Token::LParen, "expected '(' after operator name");
        std::vector<ExprPtr> args;
        std::vector<std::size_t> arg_offsets;
        if (cur_.kind != Token::RParen) {
            for (;;) {
                arg_offsets.push_back(cur_.offset);
                args.push_back(parse_expr());
                if (cur_.kind != Token::Comma) break;
                advance();
            }
        }
        expect(Token::RParen, "expected ')' to close argument list");
        if (static_cast<int>(args.size()) != it->second.arity) {
            throw ArityError(name + " expects " + std::to_string(it->second.arity) +
                             " arguments, got " + std::to_string(args.size()));
        }
        if (it->second.window_arg >= 0) {
            const auto& arg = args[it->second.window_arg];
            const auto* lit = std::get_if<NumLit>(&arg->node);
            const bool ok = lit && lit->value >= 1.0 && lit->value == std::floor(lit->value);
            if (!ok) {
                throw SyntaxError(name + " window must be a positive integer literal",
                                  arg_offsets[it->second.window_arg]);
            }
        }
        return std::make_shared<Expr>(Expr{Call{name, std::move(args)}});
    }

    void expect(Token::Kind kind, const char* msg) {
        if (cur_.kind != kind) throw SyntaxError(msg, cur_.offset);
        advance();
    }

    Lexer lexer_;
    Token cur_{};
};

inline std::string format_number(double v) {
    char buf[40];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

inline int precedence(const Expr& e) {
    if (const auto* b = std::get_if<BinOp>(&e.node)) {
        return (b->op == '+' || b->op == '-') ? 1 : 2;
    }
    return 3;
}

inline void print_expr(const Expr& e, std::string& out, int parent_prec, bool is_right) {
    if (const auto* f = std::get_if<FieldRef>(&e.node)) {
        out += "$" + f->name;
        return;
    }
    if (const auto* n = std::get_if<NumLit>(&e.node)) {
        out += format_number(n->value);
        return;
    }
    if (const auto* c = std::get_if<Call>(&e.node)) {
        out += c->fn + "(";
        for (std::size_t k = 0; k < c->args.size(); ++k) {
            if (k) out += ", ";
            print_expr(*c->args[k], out, 0, false);
        }
        out += ")";
        return;
    }
    const auto& b = std::get<BinOp>(e.node);
    const int prec = precedence(e);
    const bool parens = prec < parent_prec || (prec == parent_prec && is_right);
    if (parens) out += "(";
    print_expr(*b.lhs, out, prec, false);
    out += ' ';
    out += b.op;
    out += ' ';
    print_expr(*b.rhs, out, prec, true);
    if (parens) out += ")";
}

}  // namespace dsl_detail

inline ExprPtr parse(const std::string& text) { return dsl_detail::Parser(text).parse_all(); }

inline std::string to_formula(const Expr& e) {
    std::string out;
    dsl_detail::print_expr(e, out, 0, false);
    return out;
}

inline std::string to_formula(const ExprPtr& e) { return to_formula(*e); }

inline bool expr_equal(const Expr& a, const Expr& b) {
    if (a.node.index() != b.node.index()) return false;
    if (const auto* f = std::get_if<FieldRef>(&a.node)) {
        return f->name == std::get<FieldRef>(b.node).name;
    }
    if (const auto* n = std::get_if<NumLit>(&a.node)) {
        return n->value == std::get<NumLit>(b.node).value;
    }
    if (const auto* c = std::get_if<Call>(&a.node)) {
        const auto& d = std::get<Call>(b.node);
        if (c->fn != d.fn || c->args.size() != d.args.size()) return false;
        for (std::size_t k = 0; k < c->args.size(); ++k) {
            if (!expr_equal(*c->args[k], *d.args[k])) return false;
        }
        return true;
    }
    const auto& x = std::get<BinOp>(a.node);
    const auto& y = std::get<BinOp>(b.node);
    return x.op == y.op && expr_equal(*x.lhs, *y.lhs) && expr_equal(*x.rhs, *y.rhs);
}

namespace dsl_detail {

// One per-instrument time series during evaluation.
using Series = std::vector<double>;

inline double sanitize(double v) { return std::isfinite(v) ? v : kNaN; }

inline Series eval_series(const Expr& e, const PanelTensor& panel, int instrument);

inline Series eval_binop(const BinOp& b, const PanelTensor& panel, int instrument) {
    Series l = eval_series(*b.lhs, panel, instrument);
    Series r = eval_series(*b.rhs, panel, instrument);
    Series out(l.size(), kNaN);
    for (std::size_t t = 0; t < l.size(); ++t) {
        const double x = l[t], y = r[t];
        if (std::isnan(x) || std::isnan(y)) continue;
        double v = kNaN;
        switch (b.op) {
            case '+': v = x + y; break;
            case '-': v = x - y; break;
            case '*': v = x * y; break;
            case '/': v = x / y; break;
        }
        out[t] = sanitize(v);
    }
    return out;
}

// Trailing-window statistics; windows with any NaN or fewer than `w`
// observations yield NaN. Std uses the population convention.
inline bool window_ok(const Series& x, int t, int w) {
    if (t < w - 1) return false;
    for (int k = t - w + 1; k <= t; ++k) {
        if (std::isnan(x[k])) return false;
    }
    return true;
}

inline double window_mean(const Series& x, int t, int w) {
    double s = 0.0;
    for (int k = t - w + 1; k <= t; ++k) s += x[k];
    return s / w;
}

inline double window_var(const Series& x, int t, int w, double mean) {
    double s = 0.0;
    for (int k = t - w + 1; k <= t; ++k) s += (x[k] - mean) * (x[k] - mean);
    return s / w;
}

inline Series eval_call(const Call& c, const PanelTensor& panel, int instrument) {
    const int T = panel.n_dates();
    Series out(T, kNaN);

    auto window_of = [&](int idx) {
        return static_cast<int>(std::get<NumLit>(c.args[idx]->node).value);
    };

    if (c.fn == "Abs" || c.fn == "Log") {
        Series x = eval_series(*c.args[0], panel, instrument);
        for (int t = 0; t < T; ++t) {
            if (std::isnan(x[t])) continue;
            if (c.fn == "Abs") {
                out[t] = std::abs(x[t]);
            } else {
                out[t] = x[t] > 0.0 ? sanitize(std::log(x[t])) : kNaN;
            }
        }
        return out;
    }
    if (c.fn == "Less" || c.fn == "Greater") {
        Series a = eval_series(*c.args[0], panel, instrument);
        Series b = eval_series(*c.args[1], panel, instrument);
        for (int t = 0; t < T; ++t) {
            if (std::isnan(a[t]) || std::isnan(b[t])) continue;
            out[t] = c.fn == "Less" ? std::min(a[t], b[t]) : std::max(a[t], b[t]);
        }
        return out;
    }
    if (c.fn == "Ref") {
        Series x = eval_series(*c.args[0], panel, instrument);
        const int d = window_of(1);
        for (int t = d; t < T; ++t) out[t] = x[t - d];
        return out;
    }
    if (c.fn == "Mean" || c.fn == "Std" || c.fn == "Sum") {
        Series x = eval_series(*c.args[0], panel, instrument);
        const int w = window_of(1);
        for (int t = 0; t < T; ++t) {
            if (!window_ok(x, t, w)) continue;
            const double mean = window_mean(x, t, w);
            if (c.fn == "Mean") {
                out[t] = sanitize(mean);
            } else if (c.fn == "Sum") {
                out[t] = sanitize(mean * w);
            } else {
                out[t] = sanitize(std::sqrt(window_var(x, t, w, mean)));
            }
        }
        return out;
    }
    if (c.fn == "Corr") {
        Series x = eval_series(*c.args[0], panel, instrument);
        Series y = eval_series(*c.args[1], panel, instrument);
        const int w = window_of(2);
        for (int t = 0; t < T; ++t) {
            if (!window_ok(x, t, w) || !window_ok(y, t, w)) continue;
            const double mx = window_mean(x, t, w);
            const double my = window_mean(y, t, w);
            double cov = 0.0;
            for (int k = t - w + 1; k <= t; ++k) cov += (x[k] - mx) * (y[k] - my);
            cov /= w;
            const double sx = std::sqrt(window_var(x, t, w, mx));
            const double sy = std::sqrt(window_var(y, t, w, my));
            if (sx == 0.0 || sy == 0.0) continue;
            out[t] = sanitize(cov / (sx * sy));
        }
        return out;
    }
    // Rsquare / Resi: regress the window on the time index 0..w-1.
    Series x = eval_series(*c.args[0], panel, instrument);
    const int w = window_of(1);
    const double kmean = (w - 1) / 2.0;
    double kvar = 0.0;
    for (int k = 0; k < w; ++k) kvar += (k - kmean) * (k - kmean);
    kvar /= w;
    for (int t = 0; t < T; ++t) {
        if (!window_ok(x, t, w) || kvar == 0.0) continue;
        const double mx = window_mean(x, t, w);
        double cov = 0.0;
        for (int k = 0; k < w; ++k) cov += (k - kmean) * (x[t - w + 1 + k] - mx);
        cov /= w;
        if (c.fn == "Rsquare") {
            const double vx = window_var(x, t, w, mx);
            if (vx == 0.0) continue;
            out[t] = sanitize(cov * cov / (vx * kvar));
        } else {
            const double slope = cov / kvar;
            const double intercept = mx - slope * kmean;
            out[t] = sanitize(x[t] - (intercept + slope * (w - 1)));
        }
    }
    return out;
}

inline Series eval_series(const Expr& e, const PanelTensor& panel, int instrument) {
    const int T = panel.n_dates();
    if (const auto* f = std::get_if<FieldRef>(&e.node)) {
        const int p = panel.require_field(f->name);
        Series out(T);
        for (int t = 0; t < T; ++t) out[t] = panel.at(instrument, t, p);
        return out;
    }
    if (const auto* n = std::get_if<NumLit>(&e.node)) {
        return Series(T, n->value);
    }
    if (const auto* c = std::get_if<Call>(&e.node)) {
        return eval_call(*c, panel, instrument);
    }
    return eval_binop(std::get<BinOp>(e.node), panel, instrument);
}

}  // namespace dsl_detail

// Evaluates a factor expression per instrument over the panel, with
// per-instrument trailing-window time-series semantics.
inline FactorValues evaluate(const Expr& expr, const PanelTensor& panel) {
    const int N = panel.n_instruments();
    const int T = panel.n_dates();
    FactorValues out{panel.instruments(), panel.dates(), {}};
    out.values.resize(static_cast<std::size_t>(N) * T);
    for (int i = 0; i < N; ++i) {
        auto series = dsl_detail::eval_series(expr, panel, i);
        for (int t = 0; t < T; ++t) out.values[static_cast<std::size_t>(i) * T + t] = series[t];
    }
    return out;
}

inline FactorValues evaluate(const ExprPtr& expr, const PanelTensor& panel) {
    return evaluate(*expr, panel);
}

// The built-in 20-factor baseline library.
inline std::vector<std::pair<std::string, ExprPtr>> alpha20_library() {
    static const std::vector<std::pair<std::string, std::string>> formulas = {
        {"RESI5", "Resi($close, 5)/$close"},
        {"WVMA5",
         "Std(Abs($close/Ref($close, 1)-1)*$volume, 5)/(Mean(Abs($close/Ref($close, 1)-1)*$volume, "
         "5)+1e-12)"},
        {"RSQR5", "Rsquare($close, 5)"},
        {"KLEN", "($high-$low)/$open"},
        {"RSQR10", "Rsquare($close, 10)"},
        {"CORR5", "Corr($close, Log($volume+1), 5)"},
        {"CORD5", "Corr($close/Ref($close,1), Log($volume/Ref($volume,1)+1), 5)"},
        {"CORR10", "Corr($close, Log($volume+1), 10)"},
        {"ROC60", "Ref($close, 60)/$close"},
        {"RESI10", "Resi($close, 10)/$close"},
        {"VSTD5", "Std($volume, 5)/($volume+1e-12)"},
        {"RSQR60", "Rsquare($close, 60)"},
        {"CORR60", "Corr($close, Log($volume+1), 60)"},
        {"WVMA60",
         "Std(Abs($close/Ref($close, 1)-1)*$volume, 60)/(Mean(Abs($close/Ref($close, "
         "1)-1)*$volume, 60)+1e-12)"},
        {"STD5", "Std($close, 5)/$close"},
        {"RSQR20", "Rsquare($close, 20)"},
        {"CORD60", "Corr($close/Ref($close,1), Log($volume/Ref($volume,1)+1), 60)"},
        {"CORD10", "Corr($close/Ref($close,1), Log($volume/Ref($volume,1)+1), 10)"},
        {"CORR20", "Corr($close, Log($volume+1), 20)"},
        {"KLOW", "(Less($open,$close)-$low)/$open"},
    };
    std::vector<std::pair<std::string, ExprPtr>> out;
    out.reserve(formulas.size());
    for (const auto& [name, text] : formulas) out.emplace_back(name, parse(text));
    return out;
}

// Library interchange format: a JSON array of {name, formula} objects.
inline nlohmann::json library_to_json(const std::vector<std::pair<std::string, ExprPtr>>& lib) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [name, expr] : lib) {
        arr.push_back({{"name", name}, {"formula", to_formula(expr)}});
    }
    return arr;
}

inline std::vector<std::pair<std::string, ExprPtr>> library_from_json(const nlohmann::json& arr) {
    std::vector<std::pair<std::string, ExprPtr>> out;
    for (const auto& item : arr) {
        out.emplace_back(item.at("name").get<std::string>(),
                         parse(item.at("formula").get<std::string>()));
    }
    return out;
}

}  // namespace quantloop
