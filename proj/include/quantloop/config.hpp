#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "quantloop/errors.hpp"
#include "quantloop/jsonutil.hpp"
#include "quantloop/loop.hpp"

namespace quantloop {

// `key = value` run configuration; '#' starts a comment. Keys are dotted
// paths mirroring the config structs (see the README for the catalog).
class ConfigFile {
public:
    static ConfigFile parse_text(const std::string& text) {
        ConfigFile cfg;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                if (line.find_first_not_of(" \t\r") != std::string::npos) {
                    throw ParseError("expected 'key = value'", lineno);
                }
                continue;
            }
            cfg.values_[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
        return cfg;
    }

    static ConfigFile parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw Error("cannot open config file " + path);
        std::stringstream buf;
        buf << in.rdbuf();
        return parse_text(buf.str());
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_or(const std::string& key, const std::string& fallback) const {
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stod(it->second);
        } catch (const std::exception&) {
            throw InvalidParameter("config key " + key + " is not a number: " + it->second);
        }
    }

    int get_int(const std::string& key, int fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stoi(it->second);
        } catch (const std::exception&) {
            throw InvalidParameter("config key " + key + " is not an integer: " + it->second);
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw InvalidParameter("config key " + key + " is not a boolean: " + it->second);
    }

    std::vector<double> get_doubles(const std::string& key,
                                    const std::vector<double>& fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<double> out;
        std::istringstream in(it->second);
        std::string cell;
        while (std::getline(in, cell, ',')) {
            try {
                out.push_back(std::stod(trim(cell)));
            } catch (const std::exception&) {
                throw InvalidParameter("config key " + key + " has a bad entry: " + cell);
            }
        }
        return out;
    }

    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    static std::string trim(const std::string& s) {
        const auto first = s.find_first_not_of(" \t\r");
        if (first == std::string::npos) return "";
        const auto last = s.find_last_not_of(" \t\r");
        return s.substr(first, last - first + 1);
    }

    std::map<std::string, std::string> values_;
};

inline PipelineConfig pipeline_from(const ConfigFile& cfg) {
    PipelineConfig p;
    p.epsilon = cfg.get_double("pipeline.epsilon", p.epsilon);
    p.horizon_tau = cfg.get_int("pipeline.horizon_tau", p.horizon_tau);
    p.window_ell = cfg.get_int("pipeline.window_ell", p.window_ell);
    p.validate();
    return p;
}

inline StrategyConfig strategy_from(const ConfigFile& cfg) {
    StrategyConfig s;
    s.topk = cfg.get_int("strategy.topk", s.topk);
    s.n_drop = cfg.get_int("strategy.n_drop", s.n_drop);
    s.buy_cost = cfg.get_double("strategy.buy_cost", s.buy_cost);
    s.sell_cost = cfg.get_double("strategy.sell_cost", s.sell_cost);
    s.min_fee = cfg.get_double("strategy.min_fee", s.min_fee);
    s.price_limit = cfg.get_double("strategy.price_limit", s.price_limit);
    s.initial_cash = cfg.get_double("strategy.initial_cash", s.initial_cash);
    s.retention_rank = cfg.get_int("strategy.retention_rank", s.retention_rank);
    s.validate();
    return s;
}

inline ModelSpec model_spec_from(const ConfigFile& cfg) {
    ModelSpec m;
    const auto transform = cfg.get_or("model.transform", "zscore");
    if (transform == "zscore") {
        m.transform = FeatureTransform::zscore;
    } else if (transform == "none") {
        m.transform = FeatureTransform::none;
    } else {
        throw InvalidParameter("model.transform must be zscore or none");
    }
    m.ridge_grid = cfg.get_doubles("model.ridge_grid", m.ridge_grid);
    m.lookback = cfg.get_int("model.lookback", m.lookback);
    m.validate();
    return m;
}

inline DedupConfig dedup_from(const ConfigFile& cfg) {
    DedupConfig d;
    d.threshold = cfg.get_double("dedup.threshold", d.threshold);
    d.absolute = cfg.get_bool("dedup.absolute", d.absolute);
    d.among_candidates = cfg.get_bool("dedup.among_candidates", d.among_candidates);
    d.validate();
    return d;
}

inline CoSteerConfig costeer_from(const ConfigFile& cfg) {
    CoSteerConfig c;
    c.delta = cfg.get_double("costeer.delta", c.delta);
    c.sim_threshold = cfg.get_double("costeer.sim_threshold", c.sim_threshold);
    c.max_inner_iters = cfg.get_int("costeer.max_inner_iters", c.max_inner_iters);
    c.max_outer_rounds = cfg.get_int("costeer.max_outer_rounds", c.max_outer_rounds);
    c.validate();
    return c;
}

inline LoopConfig loop_config_from(const ConfigFile& cfg) {
    LoopConfig loop;
    loop.max_loops = cfg.get_int("loop.max_loops", loop.max_loops);
    loop.wall_clock_budget_s = cfg.get_double("loop.wall_clock_s", loop.wall_clock_budget_s);
    loop.bandit_tau = cfg.get_double("bandit.tau", loop.bandit_tau);
    loop.bandit_sigma = cfg.get_double("bandit.sigma", loop.bandit_sigma);
    loop.delta_reward = cfg.get_bool("bandit.delta_reward", loop.delta_reward);
    const auto weights =
        cfg.get_doubles("bandit.weights", std::vector<double>(kStateDim, 1.0 / kStateDim));
    if (weights.size() != kStateDim) {
        throw InvalidParameter("bandit.weights must carry 8 entries");
    }
    loop.reward_weights = Eigen::Map<const Eigen::VectorXd>(weights.data(), kStateDim);
    loop.dedup = dedup_from(cfg);
    loop.costeer = costeer_from(cfg);
    loop.initial_model = model_spec_from(cfg);
    loop.strategy = strategy_from(cfg);
    loop.pipeline = pipeline_from(cfg);
    loop.risk_free = cfg.get_double("metrics.risk_free", 0.0);
    loop.implementer_fail_rate = cfg.get_double("implementer.fail_rate", 0.0);
    return loop;
}

// Provenance block dropped next to every run's outputs.
struct RunManifest {
    std::string config_path;
    std::uint64_t seed = 0;
    std::string out_dir;
    std::string scheduler;
    std::string generator;

    json to_json() const {
        return {{"config", config_path},
                {"seed", seed},
                {"out_dir", out_dir},
                {"scheduler", scheduler},
                {"generator", generator}};
    }
};

}  // namespace quantloop
