#include <catch2/catch_amalgamated.hpp>

#include "quantloop/config.hpp"

using namespace quantloop;

TEST_CASE("config files parse key = value lines with comments") {
    const auto cfg = ConfigFile::parse_text(
        "# run settings\n"
        "strategy.topk = 10\n"
        "strategy.buy_cost = 0.001   # per-side\n"
        "bandit.weights = 0.25, 0.25, 0.1, 0.1, 0.1, 0.1, 0.05, 0.05\n"
        "dedup.absolute = true\n"
        "\n"
        "model.transform = none\n");
    CHECK(cfg.get_int("strategy.topk", 50) == 10);
    CHECK(cfg.get_double("strategy.buy_cost", 0.0) == 0.001);
    CHECK(cfg.get_bool("dedup.absolute", false));
    CHECK(cfg.get_doubles("bandit.weights", {}).size() == 8);
    CHECK(cfg.get_or("model.transform", "zscore") == "none");
    CHECK(cfg.get_int("missing.key", 42) == 42);

    CHECK_THROWS_AS(ConfigFile::parse_text("not a key value line\n"), ParseError);
    CHECK_THROWS_AS(cfg.get_int("model.transform", 0), InvalidParameter);
}

TEST_CASE("config builders mirror every config struct") {
    const auto cfg = ConfigFile::parse_text(
        "pipeline.horizon_tau = 2\n"
        "strategy.topk = 7\n"
        "strategy.n_drop = 1\n"
        "model.lookback = 30\n"
        "dedup.threshold = 0.95\n"
        "costeer.delta = 0.25\n"
        "bandit.tau = 2.0\n"
        "loop.max_loops = 3\n");
    CHECK(pipeline_from(cfg).horizon_tau == 2);
    CHECK(strategy_from(cfg).topk == 7);
    CHECK(model_spec_from(cfg).lookback == 30);
    CHECK(dedup_from(cfg).threshold == 0.95);
    CHECK(costeer_from(cfg).delta == 0.25);
    const auto loop = loop_config_from(cfg);
    CHECK(loop.bandit_tau == 2.0);
    CHECK(loop.max_loops == 3);
    CHECK(loop.reward_weights.sum() == Catch::Approx(1.0));

    SECTION("invalid values are rejected at build time") {
        const auto bad = ConfigFile::parse_text("strategy.topk = 0\n");
        CHECK_THROWS_AS(strategy_from(bad), InvalidParameter);
        const auto bad_weights = ConfigFile::parse_text("bandit.weights = 1, 2\n");
        CHECK_THROWS_AS(loop_config_from(bad_weights), InvalidParameter);
    }
}
