#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles/expr_gen.hpp"
#include "oracles/naive_eval.hpp"
#include "quantloop/expr.hpp"

using namespace quantloop;

namespace {

PanelTensor single_series_panel(const std::vector<double>& closes,
                                const std::vector<double>& volumes = {}) {
    const int T = static_cast<int>(closes.size());
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(T) * 2);
    for (int t = 0; t < T; ++t) {
        values.push_back(closes[t]);
        values.push_back(volumes.empty() ? 1000.0 : volumes[t]);
    }
    return PanelTensor({"A"}, make_trading_dates("2020-01-02", T), {"close", "volume"}, values);
}

bool nan_equal(double a, double b, double tol = 1e-9) {
    if (std::isnan(a) || std::isnan(b)) return std::isnan(a) && std::isnan(b);
    return std::abs(a - b) <= tol;
}

}  // namespace

TEST_CASE("parse handles the baseline formula syntax") {
    SECTION("KLEN shape") {
        const auto e = parse("($high - $low)/$open");
        const auto& div = std::get<BinOp>(e->node);
        CHECK(div.op == '/');
        const auto& sub = std::get<BinOp>(div.lhs->node);
        CHECK(sub.op == '-');
        CHECK(std::get<FieldRef>(sub.lhs->node).name == "high");
        CHECK(std::get<FieldRef>(sub.rhs->node).name == "low");
        CHECK(std::get<FieldRef>(div.rhs->node).name == "open");
    }

    SECTION("single call node") {
        const auto e = parse("Ref($close, 1)");
        const auto& call = std::get<Call>(e->node);
        CHECK(call.fn == "Ref");
        REQUIRE(call.args.size() == 2);
        CHECK(std::get<FieldRef>(call.args[0]->node).name == "close");
        CHECK(std::get<NumLit>(call.args[1]->node).value == 1.0);
    }

    SECTION("error taxonomy") {
        CHECK_THROWS_AS(parse("Mean($close"), SyntaxError);
        CHECK_THROWS_AS(parse("Bogus($close, 5)"), UnknownOp);
        CHECK_THROWS_AS(parse("mean($close, 5)"), UnknownOp);  // case-sensitive
        CHECK_THROWS_AS(parse("Mean($close, 5, 7)"), ArityError);
        CHECK_THROWS_AS(parse("Mean($close, $volume)"), SyntaxError);  // window must be a literal
        CHECK_THROWS_AS(parse("Mean($close, 0)"), SyntaxError);
        CHECK_THROWS_AS(parse("Mean($close, 2.5)"), SyntaxError);
        try {
            parse("$close + )");
            FAIL("expected SyntaxError");
        } catch (const SyntaxError& e) {
            CHECK(e.offset() == 9);
        }
    }

    SECTION("scientific literals and unary minus") {
        const auto e = parse("-$close * 1e-12");
        const auto& mul = std::get<BinOp>(e->node);
        CHECK(std::get<NumLit>(mul.rhs->node).value == 1e-12);
        const auto& neg = std::get<BinOp>(mul.lhs->node);
        CHECK(neg.op == '-');
        CHECK(std::get<NumLit>(neg.lhs->node).value == 0.0);

        CHECK(std::get<NumLit>(parse("-5")->node).value == -5.0);
    }
}

TEST_CASE("formula printing round-trips the AST exactly") {
    const std::vector<std::string> cases = {
        "($high - $low)/$open",
        "Std(Abs($close/Ref($close, 1)-1)*$volume, 5)",
        "$close - ($open - $low)",
        "$close / ($open * $high)",
        "1 - 2 - 3",
        "(Less($open,$close) - $low)/$open",
        "-$close + -2.5",
    };
    for (const auto& text : cases) {
        const auto e = parse(text);
        const auto printed = to_formula(e);
        INFO(text << " -> " << printed);
        CHECK(expr_equal(*parse(printed), *e));
    }

    Rng rng(404);
    const std::vector<std::string> fields = {"open", "close", "volume"};
    for (int k = 0; k < 300; ++k) {
        const auto e = oracle::random_expr(rng, fields, 3);
        const auto printed = to_formula(e);
        INFO(printed);
        REQUIRE(expr_equal(*parse(printed), *e));
    }
}

TEST_CASE("evaluate implements the per-instrument window semantics") {
    SECTION("Ref shifts back") {
        const auto panel = single_series_panel({10, 11, 12});
        const auto v = evaluate(parse("Ref($close, 1)"), panel);
        CHECK(std::isnan(v.at(0, 0)));
        CHECK(v.at(0, 1) == 10.0);
        CHECK(v.at(0, 2) == 11.0);
    }

    SECTION("Mean over trailing window") {
        const auto panel = single_series_panel({10, 11, 12});
        const auto v = evaluate(parse("Mean($close, 2)"), panel);
        CHECK(std::isnan(v.at(0, 0)));
        CHECK_THAT(v.at(0, 1), Catch::Matchers::WithinAbs(10.5, 1e-12));
        CHECK_THAT(v.at(0, 2), Catch::Matchers::WithinAbs(11.5, 1e-12));
    }

    SECTION("self correlation is one") {
        const auto panel = single_series_panel({10, 12, 11, 14, 13, 16, 15});
        const auto v = evaluate(parse("Corr($close, $close, 5)"), panel);
        for (int t = 0; t < 4; ++t) CHECK(std::isnan(v.at(0, t)));
        for (int t = 4; t < 7; ++t) CHECK_THAT(v.at(0, t), Catch::Matchers::WithinAbs(1.0, 1e-12));
    }

    SECTION("Rsquare of an exactly linear series") {
        const auto panel = single_series_panel({1, 2, 3, 4, 5});
        const auto v = evaluate(parse("Rsquare($close, 5)"), panel);
        CHECK_THAT(v.at(0, 4), Catch::Matchers::WithinAbs(1.0, 1e-12));
    }

    SECTION("degenerate statistics give NaN") {
        const auto flat = single_series_panel({5, 5, 5, 5, 5, 5});
        CHECK(std::isnan(evaluate(parse("Corr($close, $volume, 5)"), flat).at(0, 5)));
        CHECK(std::isnan(evaluate(parse("Rsquare($close, 5)"), flat).at(0, 5)));

        const auto v = evaluate(parse("$close / ($close - $close)"), flat);
        CHECK(std::isnan(v.at(0, 0)));  // division by zero maps to NaN

        const auto logs = evaluate(parse("Log($close - 10)"), flat);
        CHECK(std::isnan(logs.at(0, 0)));  // log of a non-positive value
    }

    SECTION("missing field") {
        const auto panel = single_series_panel({1, 2, 3});
        CHECK_THROWS_AS(evaluate(parse("$nope + 1"), panel), FieldNotFound);
    }

    SECTION("windows containing NaN give NaN") {
        const auto panel = single_series_panel({10, kNaN, 12, 13, 14});
        const auto v = evaluate(parse("Mean($close, 2)"), panel);
        CHECK(std::isnan(v.at(0, 1)));
        CHECK(std::isnan(v.at(0, 2)));
        CHECK_THAT(v.at(0, 3), Catch::Matchers::WithinAbs(12.5, 1e-12));
    }
}

TEST_CASE("warm-up prefix is NaN for every windowed operator") {
    Rng rng(777);
    const auto panel = oracle::random_panel(rng, 4, 30, 0.0);
    for (const auto& [text, warmup] :
         std::vector<std::pair<std::string, int>>{{"Ref($close, 3)", 3},
                                                  {"Mean($close, 5)", 4},
                                                  {"Std($close, 6)", 5},
                                                  {"Sum($close, 2)", 1},
                                                  {"Corr($close, $volume, 7)", 6},
                                                  {"Rsquare($close, 4)", 3},
                                                  {"Resi($close, 4)", 3}}) {
        const auto v = evaluate(parse(text), panel);
        for (int i = 0; i < panel.n_instruments(); ++i) {
            for (int t = 0; t < warmup; ++t) {
                INFO(text << " i=" << i << " t=" << t);
                CHECK(std::isnan(v.at(i, t)));
            }
        }
    }
}

TEST_CASE("evaluation is pointwise-local in time") {
    Rng rng(31337);
    const auto panel = oracle::random_panel(rng, 3, 25, 0.05);
    const std::vector<std::string> fields = {"open", "close", "volume"};
    for (int k = 0; k < 25; ++k) {
        const auto e = oracle::random_expr(rng, fields, 3);
        const auto full = evaluate(e, panel);

        const int cut = 12;
        std::vector<std::string> dates(panel.dates().begin(), panel.dates().begin() + cut);
        std::vector<double> values;
        for (int i = 0; i < panel.n_instruments(); ++i) {
            for (int t = 0; t < cut; ++t) {
                for (int p = 0; p < panel.n_fields(); ++p) values.push_back(panel.at(i, t, p));
            }
        }
        PanelTensor truncated(panel.instruments(), dates, panel.fields(), values);
        const auto head = evaluate(e, truncated);
        for (int i = 0; i < panel.n_instruments(); ++i) {
            for (int t = 0; t < cut; ++t) {
                INFO(to_formula(e) << " i=" << i << " t=" << t);
                REQUIRE(nan_equal(head.at(i, t), full.at(i, t), 0.0));
            }
        }
    }
}

TEST_CASE("production evaluator matches the naive reference on random expressions") {
    Rng rng(2024);
    const std::vector<std::string> fields = {"open", "high", "low", "close", "volume"};
    for (int k = 0; k < 200; ++k) {
        const auto panel = oracle::random_panel(rng, 4, 20, 0.04);
        const auto e = oracle::random_expr(rng, fields, 3);
        const auto fast = evaluate(e, panel);
        const auto slow = oracle::naive_evaluate(*e, panel);
        for (int i = 0; i < panel.n_instruments(); ++i) {
            for (int t = 0; t < panel.n_dates(); ++t) {
                INFO(to_formula(e) << " i=" << i << " t=" << t);
                REQUIRE(nan_equal(fast.at(i, t), slow.at(i, t)));
            }
        }
    }
}

TEST_CASE("the built-in library has the twenty baseline factors") {
    const auto lib = alpha20_library();
    REQUIRE(lib.size() == 20);
    CHECK(lib.front().first == "RESI5");
    CHECK(lib.back().first == "KLOW");

    const auto klen = std::find_if(lib.begin(), lib.end(),
                                   [](const auto& kv) { return kv.first == "KLEN"; });
    REQUIRE(klen != lib.end());
    CHECK(expr_equal(*klen->second, *parse("($high - $low)/$open")));

    const auto panel = gen_synthetic(20, 120, 42, 0.2);
    for (const auto& [name, expr] : lib) {
        INFO(name);
        const auto v = evaluate(expr, panel);
        bool any_finite = false;
        for (double x : v.values) {
            CHECK((std::isnan(x) || std::isfinite(x)));
            any_finite |= !std::isnan(x);
        }
        CHECK(any_finite);
    }
}

TEST_CASE("library JSON export and import round trip") {
    const auto lib = alpha20_library();
    const auto j = library_to_json(lib);
    REQUIRE(j.size() == 20);
    const auto lib2 = library_from_json(j);
    for (std::size_t k = 0; k < lib.size(); ++k) {
        CHECK(lib2[k].first == lib[k].first);
        CHECK(expr_equal(*lib2[k].second, *lib[k].second));
    }
}
