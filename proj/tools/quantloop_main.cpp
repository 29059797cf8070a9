#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "quantloop/config.hpp"
#include "quantloop/gateway.hpp"

#include <CLI11.hpp>

namespace fs = std::filesystem;
using namespace quantloop;

namespace {

void write_text(const std::string& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out << contents;
}

void print_metrics(const MetricsBundle& m) {
    std::cout << metrics_to_json(m).dump(2) << "\n";
}

int cmd_gen_data(int instruments, int dates, std::uint64_t seed, double signal,
                 const std::string& out_path) {
    const auto synth = gen_synthetic_panel(instruments, dates, seed, signal);
    write_panel(synth.panel, out_path);

    // ground-truth sidecar for recoverability checks
    std::ostringstream side;
    side << "datetime,instrument,score\n";
    for (int t = 0; t < synth.panel.n_dates(); ++t) {
        for (int i = 0; i < synth.panel.n_instruments(); ++i) {
            side << synth.panel.dates()[t] << ',' << synth.panel.instruments()[i] << ','
                 << detail::format_cell(synth.planted_score.at(i, t)) << "\n";
        }
    }
    write_text(out_path + ".score.csv", side.str());
    std::cout << "wrote " << out_path << " (" << instruments << " instruments x " << dates
              << " dates) and " << out_path << ".score.csv\n";
    return 0;
}

PanelTensor load_run_panel(const ConfigFile& cfg, std::uint64_t seed) {
    if (cfg.has("data.panel_csv")) {
        return impute(load_panel(cfg.get_or("data.panel_csv", "")));
    }
    const int instruments = cfg.get_int("data.instruments", 50);
    const int dates = cfg.get_int("data.dates", 400);
    const double signal = cfg.get_double("data.signal", 0.5);
    return impute(gen_synthetic(instruments, dates, seed, signal));
}

int cmd_run_loop(const std::string& config_path, std::uint64_t seed, int max_loops,
                 const std::string& scheduler, const std::string& generator_kind,
                 const std::string& out_dir, bool resume) {
    const ConfigFile cfg =
        config_path.empty() ? ConfigFile::parse_text("") : ConfigFile::parse_file(config_path);

    LoopConfig loop_cfg = loop_config_from(cfg);
    loop_cfg.seed = seed;
    if (max_loops >= 0) loop_cfg.max_loops = max_loops;
    loop_cfg.scheduler = scheduler_from_string(scheduler);
    loop_cfg.out_dir = out_dir;
    loop_cfg.resume = resume;

    std::unique_ptr<GatewayClient> client;
    std::unique_ptr<HypothesisGenerator> generator;
    Implementer implementer;  // default template implementer
    if (generator_kind == "template") {
        generator = std::make_unique<TemplateGenerator>();
    } else if (generator_kind == "gateway") {
        GatewayConfig gw;
        gw.endpoint = cfg.get_or("gateway.endpoint", "");
        gw.model = cfg.get_or("gateway.model", gw.model);
        gw.auth_env = cfg.get_or("gateway.auth_env", gw.auth_env);
        gw.temperature = cfg.get_double("gateway.temperature", gw.temperature);
        gw.max_tokens = cfg.get_int("gateway.max_tokens", gw.max_tokens);
        gw.timeout_s = cfg.get_double("gateway.timeout_s", gw.timeout_s);
        gw.retries = cfg.get_int("gateway.retries", gw.retries);
        gw.replay_dir = cfg.get_or("gateway.replay_dir", "");
        gw.prompt_dir = cfg.get_or("gateway.prompt_dir", "prompts");
        const auto mode = cfg.get_or("gateway.mode", "live");
        gw.mode = mode == "replay" ? GatewayMode::replay
                                   : (mode == "record" ? GatewayMode::record : GatewayMode::live);
        gw.validate();  // fails fast before any loop runs
        client = std::make_unique<GatewayClient>(gw);
        generator = std::make_unique<GatewayGenerator>(*client);
        implementer = gateway_implementer(*client, ScenarioContext{}.artifact_grammar);
    } else {
        throw InvalidParameter("unknown generator: " + generator_kind);
    }

    const auto panel = load_run_panel(cfg, seed);
    const auto labels = compute_labels(panel, loop_cfg.pipeline);
    const auto split = make_split(panel.n_dates(), cfg.get_double("split.train_frac", 0.6),
                                  cfg.get_double("split.valid_frac", 0.2));

    RunManifest manifest{config_path, seed, out_dir, scheduler, generator_kind};
    fs::create_directories(out_dir);
    save_json_file(out_dir + "/manifest.json", manifest.to_json());

    const auto result = run_loop(panel, labels, split, loop_cfg, *generator, implementer);

    // export the final configuration for standalone backtesting
    save_json_file(out_dir + "/library.json", library_to_json(result.sota.library.formulas()));
    ExperimentContext ctx{panel, labels, split, loop_cfg.strategy, loop_cfg.pipeline,
                          loop_cfg.risk_free};
    const auto final_eval = evaluate_configuration(result.sota, ctx, ActionType::factor);
    save_json_file(out_dir + "/model.json", model_to_json(final_eval.model));
    save_json_file(out_dir + "/metrics.json", metrics_to_json(result.sota.current));

    std::cout << "final SOTA metrics:\n";
    print_metrics(result.sota.current);
    std::cout << "TL=" << result.counters.total_loops << " VL=" << result.counters.valid_loops
              << " SL=" << result.counters.sota_selections << "\n";
    return 0;
}

int cmd_backtest(const std::string& panel_path, const std::string& factors_path,
                 const std::string& model_path, const std::string& config_path,
                 const std::string& out_dir) {
    const ConfigFile cfg =
        config_path.empty() ? ConfigFile::parse_text("") : ConfigFile::parse_file(config_path);
    const auto pipeline = pipeline_from(cfg);
    const auto strategy = strategy_from(cfg);
    const auto spec = model_spec_from(cfg);

    auto panel = impute(load_panel(panel_path));
    const auto labels = compute_labels(panel, pipeline);
    const auto library = library_from_json(load_json_file(factors_path));
    if (library.empty()) throw InvalidParameter("factor library is empty");
    const auto model = model_from_json(load_json_file(model_path));

    std::vector<std::pair<std::string, FactorValues>> features;
    for (const auto& [name, expr] : library) features.emplace_back(name, evaluate(expr, panel));
    PanelTensor widened = concat_features(panel, features);
    std::vector<std::string> fields(widened.fields().begin() + panel.n_fields(),
                                    widened.fields().end());
    if (spec.transform == FeatureTransform::zscore) {
        for (const auto& f : fields) widened = robust_zscore(widened, f, pipeline);
    }
    if (model.feature_names != fields) {
        throw ShapeMismatch("model feature names do not match the factor library");
    }

    const auto scores = predict(model, widened, fields, 0, widened.n_dates() - 1);
    const auto report = run_backtest(scores, widened, strategy, 0, widened.n_dates() - 1);

    // daily and per-year IC tables
    DailySeries daily_ic, daily_rank_ic;
    const int N = panel.n_instruments();
    for (int t = 0; t < panel.n_dates(); ++t) {
        std::vector<double> pred, real;
        for (int i = 0; i < N; ++i) {
            const double p = scores.at(i, t);
            const double y = labels.raw_at(i, t);
            if (!std::isnan(p) && !std::isnan(y)) {
                pred.push_back(p);
                real.push_back(y);
            }
        }
        if (pred.size() < 2) continue;
        daily_ic.push(panel.dates()[t], metrics_detail::pearson(pred, real));
        daily_rank_ic.push(panel.dates()[t], metrics_detail::pearson(metrics_detail::ranks(pred),
                                                                     metrics_detail::ranks(real)));
    }
    const auto metrics = aggregate_metrics(daily_ic, daily_rank_ic, report.daily_returns,
                                           cfg.get_double("metrics.risk_free", 0.0));

    fs::create_directories(out_dir);
    json report_json = report_to_json(report);
    report_json["metrics"] = metrics_to_json(metrics);
    save_json_file(out_dir + "/report.json", report_json);
    write_text(out_dir + "/nav.csv", nav_to_csv(report));
    write_text(out_dir + "/trades.csv", trades_to_csv(report));

    std::map<int, std::pair<double, int>> ic_by_year, rank_by_year;
    for (std::size_t k = 0; k < daily_ic.size(); ++k) {
        if (std::isnan(daily_ic.values[k])) continue;
        auto& [sum, count] = ic_by_year[year_of(daily_ic.dates[k])];
        sum += daily_ic.values[k];
        ++count;
    }
    for (std::size_t k = 0; k < daily_rank_ic.size(); ++k) {
        if (std::isnan(daily_rank_ic.values[k])) continue;
        auto& [sum, count] = rank_by_year[year_of(daily_rank_ic.dates[k])];
        sum += daily_rank_ic.values[k];
        ++count;
    }
    std::ostringstream yearly;
    yearly << "year,ic,rank_ic,days\n";
    for (const auto& [year, agg] : ic_by_year) {
        const auto& [rank_sum, rank_count] = rank_by_year[year];
        yearly << year << ',' << detail::format_cell(agg.first / agg.second) << ','
               << detail::format_cell(rank_count > 0 ? rank_sum / rank_count : kNaN) << ','
               << agg.second << "\n";
    }
    write_text(out_dir + "/yearly_ic.csv", yearly.str());

    print_metrics(metrics);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"quantloop: automated factor/model research loop over market panels"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "synthesize a market panel CSV with a planted signal");
    int instruments = 100;
    int dates = 750;
    std::uint64_t gen_seed = 7;
    double signal = 0.5;
    std::string gen_out = "panel.csv";
    gen->add_option("--instruments", instruments, "instrument count (>= 2)")
        ->check(CLI::Range(2, 100000));
    gen->add_option("--dates", dates, "trading-day count (>= 10)")->check(CLI::Range(10, 1000000));
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--signal", signal, "planted signal strength in [0, 1]")
        ->check(CLI::Range(0.0, 1.0));
    gen->add_option("--out", gen_out, "output CSV path");

    // run-loop
    auto* run = app.add_subcommand("run-loop", "run the research loop");
    std::string config_path;
    std::uint64_t run_seed = 0;
    int max_loops = -1;
    std::string scheduler = "bandit";
    std::string generator_kind = "template";
    std::string run_out = "run_out";
    bool resume = false;
    run->add_option("--config", config_path, "key = value config file");
    run->add_option("--seed", run_seed, "run seed");
    run->add_option("--max-loops", max_loops, "loop budget (overrides config)");
    run->add_option("--scheduler", scheduler, "bandit|random|llm")
        ->check(CLI::IsMember({"bandit", "random", "llm"}));
    run->add_option("--generator", generator_kind, "template|gateway")
        ->check(CLI::IsMember({"template", "gateway"}));
    run->add_option("--out", run_out, "output directory");
    run->add_flag("--resume", resume, "continue from the state in --out");

    // backtest
    auto* bt = app.add_subcommand("backtest", "standalone backtest of a factor library + model");
    std::string panel_path, factors_path, model_path, bt_config, bt_out = "backtest_out";
    bt->add_option("--panel", panel_path, "panel CSV")->required();
    bt->add_option("--factors", factors_path, "factor library JSON")->required();
    bt->add_option("--model", model_path, "fitted model JSON")->required();
    bt->add_option("--strategy-config", bt_config, "key = value config file");
    bt->add_option("--out", bt_out, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(instruments, dates, gen_seed, signal, gen_out);
        if (run->parsed()) {
            return cmd_run_loop(config_path, run_seed, max_loops, scheduler, generator_kind,
                                run_out, resume);
        }
        return cmd_backtest(panel_path, factors_path, model_path, bt_config, bt_out);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
