#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "quantloop/action.hpp"
#include "quantloop/bandit.hpp"
#include "quantloop/costeer.hpp"
#include "quantloop/expr.hpp"
#include "quantloop/jsonutil.hpp"
#include "quantloop/panel.hpp"
#include "quantloop/predictor.hpp"
#include "quantloop/validation.hpp"

namespace quantloop {

// ---------------------------------------------------------------------------
// hypothesis plumbing

struct TaskSpec {
    std::string id;
    std::string description;
    TaskKind kind = TaskKind::factor;
};

struct Hypothesis {
    std::string id;
    ActionType action = ActionType::factor;
    std::string statement;
    std::string rationale;
    std::vector<TaskSpec> tasks;

    void validate() const {
        if (action == ActionType::factor) {
            if (tasks.empty() || tasks.size() > 5) {
                throw GenerationFailed("factor hypotheses carry 1-5 tasks");
            }
        } else if (tasks.size() != 1) {
            throw GenerationFailed("model hypotheses carry exactly one task");
        }
    }
};

struct Feedback {
    std::string observations;
    bool decision = false;
    std::array<double, kStateDim> metric_deltas{};
    std::string suggested_direction;
};

struct ExperimentRecord {
    int loop_index = 0;
    ActionType action = ActionType::factor;
    Hypothesis hypothesis;
    std::vector<std::pair<std::string, std::string>> artifacts;  // (task id, payload)
    bool evaluated = false;
    MetricsBundle metrics;  // all-NaN when not evaluated
    std::vector<std::string> kept_factors;
    Feedback feedback;
    std::string status = "ok";
    double reward = 0.0;
};

inline MetricsBundle nan_bundle() {
    MetricsBundle m;
    m.ic = m.icir = m.rank_ic = m.rank_icir = m.arr = m.ir = m.mdd = m.calmar = kNaN;
    return m;
}

inline json record_to_json(const ExperimentRecord& r) {
    json tasks = json::array();
    for (const auto& t : r.hypothesis.tasks) {
        tasks.push_back({{"id", t.id},
                         {"description", t.description},
                         {"kind", t.kind == TaskKind::factor ? "factor" : "model"}});
    }
    json artifacts = json::array();
    for (const auto& [id, payload] : r.artifacts) artifacts.push_back({{"task", id}, {"payload", payload}});
    json deltas = json::array();
    for (double d : r.feedback.metric_deltas) deltas.push_back(json_double(d));
    return {{"loop", r.loop_index},
            {"action", to_string(r.action)},
            {"status", r.status},
            {"evaluated", r.evaluated},
            {"metrics", metrics_to_json(r.metrics)},
            {"kept_factors", r.kept_factors},
            {"reward", r.reward},
            {"hypothesis",
             {{"id", r.hypothesis.id},
              {"action", to_string(r.hypothesis.action)},
              {"statement", r.hypothesis.statement},
              {"rationale", r.hypothesis.rationale},
              {"tasks", tasks}}},
            {"artifacts", artifacts},
            {"feedback",
             {{"observations", r.feedback.observations},
              {"decision", r.feedback.decision},
              {"deltas", deltas},
              {"direction", r.feedback.suggested_direction}}}};
}

inline ExperimentRecord record_from_json(const json& j) {
    ExperimentRecord r;
    r.loop_index = j.at("loop").get<int>();
    r.action = action_from_string(j.at("action").get<std::string>());
    r.status = j.at("status").get<std::string>();
    r.evaluated = j.at("evaluated").get<bool>();
    r.metrics = metrics_from_json(j.at("metrics"));
    r.kept_factors = j.at("kept_factors").get<std::vector<std::string>>();
    r.reward = j.at("reward").get<double>();
    const auto& h = j.at("hypothesis");
    r.hypothesis.id = h.at("id").get<std::string>();
    r.hypothesis.action = action_from_string(h.at("action").get<std::string>());
    r.hypothesis.statement = h.at("statement").get<std::string>();
    r.hypothesis.rationale = h.at("rationale").get<std::string>();
    for (const auto& t : h.at("tasks")) {
        r.hypothesis.tasks.push_back(
            {t.at("id").get<std::string>(), t.at("description").get<std::string>(),
             t.at("kind").get<std::string>() == "model" ? TaskKind::model : TaskKind::factor});
    }
    for (const auto& a : j.at("artifacts")) {
        r.artifacts.emplace_back(a.at("task").get<std::string>(), a.at("payload").get<std::string>());
    }
    const auto& f = j.at("feedback");
    r.feedback.observations = f.at("observations").get<std::string>();
    r.feedback.decision = f.at("decision").get<bool>();
    const auto& deltas = f.at("deltas");
    for (int k = 0; k < kStateDim; ++k) r.feedback.metric_deltas[k] = double_from_json(deltas[k]);
    r.feedback.suggested_direction = f.at("direction").get<std::string>();
    return r;
}

// ---------------------------------------------------------------------------
// SOTA bookkeeping

struct SotaSets {
    FactorLibrary library;
    MetricsBundle factor_best;
    std::vector<int> factor_records;  // loop indices whose factors entered the library
    ModelSpec model_spec;
    MetricsBundle model_best;
    int model_record = -1;  // loop index that set the current model spec
    MetricsBundle current;  // metrics of the latest accepted configuration

    const MetricsBundle& incumbent(ActionType a) const {
        return a == ActionType::factor ? factor_best : model_best;
    }
};

// Records feeding the current best configuration of one side: the factor-side
// set is the library's source experiments plus the experiment that set the
// model they were evaluated with, and symmetrically for the model side.
inline std::set<int> sota_record_ids(const SotaSets& sota, ActionType) {
    std::set<int> ids(sota.factor_records.begin(), sota.factor_records.end());
    if (sota.model_record >= 0) ids.insert(sota.model_record);
    return ids;
}

// Action-conditioned history: a record is visible when its action matches or
// when it is an input to the current SOTA of that action.
inline std::vector<const ExperimentRecord*> condition_history(
    const std::vector<ExperimentRecord>& history, ActionType action, const SotaSets& sota) {
    const auto sota_ids = sota_record_ids(sota, action);
    std::vector<const ExperimentRecord*> out;
    for (const auto& r : history) {
        if (r.action == action || sota_ids.count(r.loop_index)) out.push_back(&r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// generators

// The immutable scenario handed to generators: background, schema, grammar,
// and the evaluation environment.
struct ScenarioContext {
    std::string background =
        "Daily equity panel; propose alpha factors over the price/volume fields or adjustments "
        "to the linear scoring model.";
    std::vector<std::string> data_fields = {"open", "high", "low", "close", "volume"};
    std::string artifact_grammar =
        "Factor artifacts are formulas over $-prefixed fields using Ref, Mean, Std, Sum, Corr, "
        "Rsquare, Resi, Less, Greater, Abs, Log and arithmetic. Model artifacts are model-spec "
        "JSON objects.";
    StrategyConfig strategy;
    PipelineConfig pipeline;
};

class HypothesisGenerator {
public:
    virtual ~HypothesisGenerator() = default;
    virtual Hypothesis synthesize(const ScenarioContext& ctx,
                                  const std::vector<const ExperimentRecord*>& conditioned,
                                  ActionType action, const SotaSets& sota, int loop_index) = 0;

    // Stand-in for the LLM-driven scheduler ablation: alternate directions.
    virtual ActionType suggest_action(const std::vector<ExperimentRecord>& history) {
        return history.size() % 2 == 0 ? ActionType::factor : ActionType::model;
    }

    virtual std::string suggest_direction(ActionType action, bool decision) {
        if (action == ActionType::model) {
            return decision ? "keep tuning the model configuration" : "revert toward the incumbent model";
        }
        return decision ? "extend the same factor family with a deeper composition"
                        : "switch to a different factor family";
    }
};

namespace loop_detail {

inline const std::vector<int>& family_windows() {
    static const std::vector<int> w = {5, 10, 20, 30, 60};
    return w;
}

inline const std::vector<std::string>& family_tags() {
    static const std::vector<std::string> tags = {"mom", "vol", "vcr"};
    return tags;
}

inline std::string family_name(const std::string& tag) {
    if (tag == "mom") return "momentum";
    if (tag == "vol") return "volatility";
    return "volume-correlation";
}

// The escalation ladder: one formula per (family, depth), windows filled in.
inline std::string family_formula(const std::string& tag, int depth, int w, int w2) {
    const std::string ws = std::to_string(w);
    const std::string ws2 = std::to_string(w2);
    if (tag == "mom") {
        if (depth == 1) return "$close/Ref($close," + ws + ") - 1";
        if (depth == 2) return "Mean($close/Ref($close,1) - 1, " + ws + ")";
        return "Mean($close/Ref($close,1) - 1, " + ws + ") / (Std($close/Ref($close,1) - 1, " +
               ws2 + ") + 1e-12)";
    }
    if (tag == "vol") {
        if (depth == 1) return "Std($close, " + ws + ")/$close";
        if (depth == 2) return "Std($close/Ref($close,1) - 1, " + ws + ")";
        return "Std($close/Ref($close,1) - 1, " + ws + ") / (Std($close/Ref($close,1) - 1, " +
               ws2 + ") + 1e-12)";
    }
    if (depth == 1) return "Corr($close, Log($volume+1), " + ws + ")";
    if (depth == 2) return "Corr($close/Ref($close,1), Log($volume/Ref($volume,1)+1), " + ws + ")";
    return "Mean(($close/Ref($close,1) - 1) * Log($volume/Ref($volume,1)+1), " + ws + ")";
}

struct FactorPolicy {
    int family_idx = 0;
    int depth = 1;
    int window_idx = 0;
};

// Hypothesis ids carry the policy that produced them: h{loop}_{tag}_d{depth}_w{widx}.
inline std::string encode_policy(int loop_index, const FactorPolicy& p) {
    return "h" + std::to_string(loop_index) + "_" + family_tags()[p.family_idx] + "_d" +
           std::to_string(p.depth) + "_w" + std::to_string(p.window_idx);
}

inline std::optional<FactorPolicy> decode_policy(const std::string& id) {
    FactorPolicy p;
    char tag[8] = {0};
    int loop = 0;
    if (std::sscanf(id.c_str(), "h%d_%3[a-z]_d%d_w%d", &loop, tag, &p.depth, &p.window_idx) != 4) {
        return std::nullopt;
    }
    const auto& tags = family_tags();
    for (std::size_t k = 0; k < tags.size(); ++k) {
        if (tags[k] == tag) {
            p.family_idx = static_cast<int>(k);
            return p;
        }
    }
    return std::nullopt;
}

}  // namespace loop_detail

// Deterministic refine-or-shift hypothesis source. A successful factor
// hypothesis escalates to a deeper composition in the same family; a failed
// one shifts family and resets depth. Model hypotheses cycle through spec
// mutations.
class TemplateGenerator : public HypothesisGenerator {
public:
    Hypothesis synthesize(const ScenarioContext&,
                          const std::vector<const ExperimentRecord*>& conditioned,
                          ActionType action, const SotaSets& sota, int loop_index) override {
        return action == ActionType::factor
                   ? factor_hypothesis(conditioned, loop_index)
                   : model_hypothesis(conditioned, sota, loop_index);
    }

private:
    Hypothesis factor_hypothesis(const std::vector<const ExperimentRecord*>& conditioned,
                                 int loop_index) {
        using namespace loop_detail;
        FactorPolicy policy;
        const ExperimentRecord* last = nullptr;
        for (const auto* r : conditioned) {
            if (r->action == ActionType::factor) last = r;
        }
        if (last != nullptr) {
            const auto prev = decode_policy(last->hypothesis.id).value_or(FactorPolicy{});
            policy = prev;
            if (last->feedback.decision) {
                if (prev.depth < 3) {
                    policy.depth = prev.depth + 1;
                } else {
                    policy.window_idx = prev.window_idx + 1;  // deepest rung: roam windows
                }
            } else {
                policy.family_idx = (prev.family_idx + 1) % static_cast<int>(family_tags().size());
                policy.depth = 1;
                policy.window_idx = prev.window_idx + (policy.family_idx == 0 ? 1 : 0);
            }
        }

        const auto& windows = family_windows();
        const auto& tag = family_tags()[policy.family_idx];
        Hypothesis h;
        h.id = encode_policy(loop_index, policy);
        h.action = ActionType::factor;
        h.statement = family_name(tag) + " family, composition depth " +
                      std::to_string(policy.depth) + ", window set " +
                      std::to_string(windows[policy.window_idx % windows.size()]);
        h.rationale = last == nullptr
                          ? "start simple: a single baseline factor from the first family"
                          : (last->feedback.decision
                                 ? "the previous " + family_name(tag) + " factors beat the "
                                   "incumbent, so deepen the composition"
                                 : "the previous direction failed, so shift family and restart "
                                   "from a simple form");

        for (int d = 1; d <= policy.depth; ++d) {
            const int w = windows[(policy.window_idx + d - 1) % windows.size()];
            const int w2 = windows[(policy.window_idx + d) % windows.size()];
            TaskSpec t;
            t.kind = TaskKind::factor;
            t.id = tag + std::to_string(w) + "_d" + std::to_string(d) + "_L" +
                   std::to_string(loop_index);
            t.description = "factor " + t.id + ": " + family_name(tag) + " family, window=" +
                            std::to_string(w) + ", window2=" + std::to_string(w2) +
                            ", depth=" + std::to_string(d);
            if (d > 1) {
                t.description += "; builds-on: " + h.tasks[d - 2].id;
            }
            h.tasks.push_back(std::move(t));
        }
        h.validate();
        return h;
    }

    Hypothesis model_hypothesis(const std::vector<const ExperimentRecord*>& conditioned,
                                const SotaSets& sota, int loop_index) {
        int prior = 0;
        for (const auto* r : conditioned) {
            if (r->action == ActionType::model) ++prior;
        }
        ModelSpec mutated = sota.model_spec;
        std::string what;
        switch (prior % 4) {
            case 0:
                mutated.transform = mutated.transform == FeatureTransform::zscore
                                        ? FeatureTransform::none
                                        : FeatureTransform::zscore;
                what = "toggle the feature transform";
                break;
            case 1:
                mutated.ridge_grid = {1e-8, 1e-6, 1e-4, 1e-2, 1.0, 10.0};
                what = "widen the ridge grid";
                break;
            case 2:
                mutated.lookback = std::min(120, mutated.lookback * 2);
                what = "double the training lookback";
                break;
            default:
                mutated.lookback = std::max(20, mutated.lookback / 2);
                mutated.ridge_grid = {1e-6, 1e-4, 1e-2, 1.0};
                what = "shorten the lookback and reset the grid";
                break;
        }
        Hypothesis h;
        h.id = "h" + std::to_string(loop_index) + "_model_m" + std::to_string(prior % 4);
        h.action = ActionType::model;
        h.statement = "model mutation: " + what;
        h.rationale = "cycle through the model configuration space one knob at a time";
        TaskSpec t;
        t.kind = TaskKind::model;
        t.id = "model_L" + std::to_string(loop_index);
        t.description = "model task " + t.id + ": " + what +
                        "; spec: " + model_spec_to_json(mutated).dump();
        h.tasks.push_back(std::move(t));
        h.validate();
        return h;
    }
};

// ---------------------------------------------------------------------------
// template implementer / evaluator

// Rebuilds the formula (or model spec) from the structured parameters in the
// task description. This is the offline stand-in for a code-writing backend:
// it emits artifacts in the same grammar a remote generator must produce.
inline Implementer template_implementer() {
    return [](const TaskNode& task, const std::optional<KbTriple>&, const std::string&,
              int) -> std::string {
        using namespace loop_detail;
        if (task.kind == TaskKind::model) {
            const auto pos = task.description.find("spec: ");
            if (pos == std::string::npos) {
                throw ImplementerUnavailable("model task without an embedded spec");
            }
            return task.description.substr(pos + 6);
        }
        // tasks from non-template sources embed the formula verbatim
        const auto formula_pos = task.description.find("formula: ");
        if (formula_pos != std::string::npos) {
            return task.description.substr(formula_pos + 9);
        }
        std::string tag;
        for (const auto& candidate : family_tags()) {
            if (task.description.find(family_name(candidate) + " family") != std::string::npos) {
                tag = candidate;
                break;
            }
        }
        int w = 0, w2 = 0, depth = 0;
        const auto grab = [&](const char* key, int& out) {
            const auto pos = task.description.find(key);
            if (pos != std::string::npos) {
                out = std::atoi(task.description.c_str() + pos + std::strlen(key));
            }
        };
        grab("window=", w);
        grab("window2=", w2);
        grab("depth=", depth);
        if (tag.empty() || w <= 0 || depth <= 0) {
            throw ImplementerUnavailable("unparseable factor task description");
        }
        return family_formula(tag, depth, w, w2 > 0 ? w2 : w);
    };
}

// Artifact checker: factor formulas must parse, evaluate on the working
// panel, and produce at least one finite value; model artifacts must be a
// valid spec. This is the hallucination firewall in front of the evaluator.
inline TaskEvaluator artifact_evaluator(const PanelTensor& panel) {
    return [&panel](const TaskNode& task, const std::string& artifact) {
        if (task.kind == TaskKind::model) {
            try {
                model_spec_from_json(json::parse(artifact));
                return std::pair{true, std::string("model spec accepted")};
            } catch (const std::exception& e) {
                return std::pair{false, std::string("bad model spec: ") + e.what()};
            }
        }
        try {
            const auto expr = parse(artifact);
            const auto values = evaluate(expr, panel);
            bool any_finite = false;
            for (double v : values.values) {
                if (!std::isnan(v)) {
                    any_finite = true;
                    break;
                }
            }
            if (!any_finite) return std::pair{false, std::string("factor evaluates to all-NaN")};
            return std::pair{true, std::string("factor compiles and evaluates")};
        } catch (const Error& e) {
            return std::pair{false, std::string("rejected: ") + e.what()};
        }
    };
}

// Wraps an implementer with deterministic seeded failures (a stand-in for a
// flaky generation backend); the evaluator sees a syntactically broken
// artifact and rejects it.
inline Implementer with_seeded_failures(Implementer inner, double fail_rate, std::uint64_t seed) {
    if (fail_rate <= 0.0) return inner;
    return [inner, fail_rate, seed](const TaskNode& task, const std::optional<KbTriple>& ref,
                                    const std::string& feedback, int attempt) -> std::string {
        std::uint64_t h = seed;
        for (char c : task.id) h = splitmix64(h + static_cast<unsigned char>(c));
        h = splitmix64(h + static_cast<std::uint64_t>(task.attempts) * 1315423911ULL +
                       static_cast<std::uint64_t>(attempt));
        Rng rng(h);
        if (rng.uniform() < fail_rate) return "(((broken artifact";
        return inner(task, ref, feedback, attempt);
    };
}

// ---------------------------------------------------------------------------
// analysis

// Strict weighted-score comparison against the incumbent of the same action
// side, with NaN channels entering as zero.
inline Feedback analyze(const ExperimentRecord& record, const SotaSets& sota,
                        const BanditState& bandit) {
    Feedback f;
    const Eigen::VectorXd fresh = state_vector(record.metrics);
    const Eigen::VectorXd incumbent = state_vector(sota.incumbent(record.action));
    for (int k = 0; k < kStateDim; ++k) f.metric_deltas[k] = fresh(k) - incumbent(k);
    f.decision =
        record.evaluated && bandit.weights.dot(fresh) > bandit.weights.dot(incumbent);

    std::ostringstream obs;
    if (!record.evaluated) {
        obs << "experiment failed (" << record.status << ")";
    } else {
        obs << "ic " << record.metrics.ic << " vs " << sota.incumbent(record.action).ic
            << "; arr " << record.metrics.arr << " vs " << sota.incumbent(record.action).arr
            << "; weighted score " << bandit.weights.dot(fresh) << " vs "
            << bandit.weights.dot(incumbent);
        if (!record.kept_factors.empty()) {
            obs << "; kept";
            for (const auto& name : record.kept_factors) obs << " " << name;
        }
    }
    f.observations = obs.str();
    return f;
}

// ---------------------------------------------------------------------------
// the loop

enum class SchedulerKind { bandit, random, llm };

inline std::string to_string(SchedulerKind s) {
    switch (s) {
        case SchedulerKind::bandit: return "bandit";
        case SchedulerKind::random: return "random";
        default: return "llm";
    }
}

inline SchedulerKind scheduler_from_string(const std::string& s) {
    if (s == "bandit") return SchedulerKind::bandit;
    if (s == "random") return SchedulerKind::random;
    if (s == "llm") return SchedulerKind::llm;
    throw InvalidParameter("unknown scheduler: " + s);
}

struct LoopConfig {
    int max_loops = 20;
    double wall_clock_budget_s = 0.0;  // 0 disables the budget
    SchedulerKind scheduler = SchedulerKind::bandit;
    std::uint64_t seed = 0;
    std::string out_dir;  // empty disables persistence
    bool resume = false;

    double bandit_tau = 1.0;
    double bandit_sigma = 1.0;
    Eigen::VectorXd reward_weights = uniform_weights();
    bool delta_reward = true;

    DedupConfig dedup;
    CoSteerConfig costeer;
    ModelSpec initial_model;
    StrategyConfig strategy;
    PipelineConfig pipeline;
    double risk_free = 0.0;
    double implementer_fail_rate = 0.0;
};

struct LoopCounters {
    int total_loops = 0;      // TL
    int valid_loops = 0;      // VL
    int sota_selections = 0;  // SL
};

struct LoopResult {
    SotaSets sota;
    std::vector<ExperimentRecord> history;
    LoopCounters counters;
    BanditState bandit;
    KnowledgeBase kb;
};

namespace loop_detail {

inline std::vector<std::pair<std::string, FactorValues>> library_features(
    const FactorLibrary& lib) {
    std::vector<std::pair<std::string, FactorValues>> out;
    out.reserve(lib.size());
    for (const auto& e : lib.entries()) out.emplace_back(e.name, e.values);
    return out;
}

inline json sota_to_json(const SotaSets& sota, const LoopCounters& counters, int loops_done) {
    json lib = json::array();
    for (const auto& e : sota.library.entries()) {
        lib.push_back(
            {{"name", e.name}, {"formula", to_formula(e.expr)}, {"provenance", e.provenance}});
    }
    return {{"library", lib},
            {"factor_best", metrics_to_json(sota.factor_best)},
            {"model_best", metrics_to_json(sota.model_best)},
            {"current", metrics_to_json(sota.current)},
            {"model_spec", model_spec_to_json(sota.model_spec)},
            {"factor_records", sota.factor_records},
            {"model_record", sota.model_record},
            {"loops_done", loops_done},
            {"counters",
             {{"total", counters.total_loops},
              {"valid", counters.valid_loops},
              {"sota", counters.sota_selections}}}};
}

inline void persist_state(const std::string& out_dir, const SotaSets& sota,
                          const LoopCounters& counters, int loops_done, const BanditState& bandit,
                          const KnowledgeBase& kb) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    save_json_file(out_dir + "/sota.json", sota_to_json(sota, counters, loops_done));
    save_json_file(out_dir + "/bandit.json", bandit_to_json(bandit));
    atomic_write_file(out_dir + "/kb.jsonl", kb.to_jsonl());
}

inline void append_trajectory(const std::string& out_dir, const ExperimentRecord& record) {
    std::ofstream out(out_dir + "/trajectory.jsonl", std::ios::app);
    if (!out) throw Error("cannot append to trajectory in " + out_dir);
    out << record_to_json(record).dump() << "\n";
    out.flush();
    if (!out) throw Error("trajectory write failed in " + out_dir);
}

}  // namespace loop_detail

// Evaluates one configuration (library + model spec) as the incumbent
// baseline bundle.
inline ExperimentResult evaluate_configuration(const SotaSets& sota, const ExperimentContext& ctx,
                                               ActionType action) {
    return evaluate_experiment(loop_detail::library_features(sota.library), sota.model_spec, ctx,
                               action, {});
}

// The closed research loop. Starts from the 20-factor baseline library (or
// the persisted state when resuming), then iterates
// choose -> condition -> synthesize -> implement -> validate -> analyze ->
// update, persisting every record.
inline LoopResult run_loop(const PanelTensor& panel, const LabelPanel& labels,
                           const SplitSpec& split, const LoopConfig& cfg,
                           HypothesisGenerator& generator,
                           Implementer custom_implementer = nullptr) {
    cfg.costeer.validate();
    cfg.dedup.validate();
    cfg.strategy.validate();
    cfg.pipeline.validate();
    split.validate(panel.n_dates());
    const auto started = std::chrono::steady_clock::now();

    ScenarioContext scenario;
    scenario.data_fields = panel.fields();
    scenario.strategy = cfg.strategy;
    scenario.pipeline = cfg.pipeline;

    ExperimentContext ctx{panel, labels, split, cfg.strategy, cfg.pipeline, cfg.risk_free};

    LoopResult result;
    result.bandit = bandit_init(cfg.bandit_tau, cfg.bandit_sigma, cfg.reward_weights);
    result.bandit.delta_reward = cfg.delta_reward;
    int start_loop = 1;

    if (cfg.resume) {
        if (cfg.out_dir.empty()) throw InvalidParameter("resume requires an output directory");
        const auto state = load_json_file(cfg.out_dir + "/sota.json");
        for (const auto& item : state.at("library")) {
            const auto expr = parse(item.at("formula").get<std::string>());
            result.sota.library.add({item.at("name").get<std::string>(), expr,
                                     evaluate(expr, panel),
                                     item.at("provenance").get<std::string>()});
        }
        result.sota.factor_best = metrics_from_json(state.at("factor_best"));
        result.sota.model_best = metrics_from_json(state.at("model_best"));
        result.sota.current = metrics_from_json(state.at("current"));
        result.sota.model_spec = model_spec_from_json(state.at("model_spec"));
        result.sota.factor_records = state.at("factor_records").get<std::vector<int>>();
        result.sota.model_record = state.at("model_record").get<int>();
        result.counters.total_loops = state.at("counters").at("total").get<int>();
        result.counters.valid_loops = state.at("counters").at("valid").get<int>();
        result.counters.sota_selections = state.at("counters").at("sota").get<int>();
        start_loop = state.at("loops_done").get<int>() + 1;
        result.bandit = bandit_from_json(load_json_file(cfg.out_dir + "/bandit.json"));
        {
            std::ifstream kb_in(cfg.out_dir + "/kb.jsonl");
            if (kb_in) {
                std::stringstream buf;
                buf << kb_in.rdbuf();
                result.kb = KnowledgeBase::from_jsonl(buf.str());
            }
        }
        std::ifstream traj(cfg.out_dir + "/trajectory.jsonl");
        std::string line;
        while (std::getline(traj, line)) {
            if (!line.empty()) result.history.push_back(record_from_json(json::parse(line)));
        }
    } else {
        for (const auto& [name, expr] : alpha20_library()) {
            result.sota.library.add({name, expr, evaluate(expr, panel), "baseline"});
        }
        result.sota.model_spec = cfg.initial_model;
        const auto baseline = evaluate_configuration(result.sota, ctx, ActionType::factor);
        result.sota.factor_best = baseline.metrics;
        result.sota.model_best = baseline.metrics;
        result.sota.current = baseline.metrics;
        if (!cfg.out_dir.empty()) {
            std::filesystem::create_directories(cfg.out_dir);
            std::ofstream reset(cfg.out_dir + "/trajectory.jsonl", std::ios::trunc);
            loop_detail::persist_state(cfg.out_dir, result.sota, result.counters, 0, result.bandit,
                                       result.kb);
        }
    }

    const auto implementer = with_seeded_failures(
        custom_implementer ? std::move(custom_implementer) : template_implementer(),
        cfg.implementer_fail_rate, derive_seed(cfg.seed, 0xfa11));
    const auto evaluator = artifact_evaluator(panel);

    for (int k = start_loop; k <= cfg.max_loops; ++k) {
        if (cfg.wall_clock_budget_s > 0.0) {
            const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - started;
            if (elapsed.count() >= cfg.wall_clock_budget_s) break;
        }

        const Eigen::VectorXd x = state_vector(result.sota.current);
        ActionType action = ActionType::factor;
        switch (cfg.scheduler) {
            case SchedulerKind::bandit: {
                Rng rng(derive_seed(cfg.seed, 0xc0057, k));
                action = bandit_choose(result.bandit, x, rng);
                break;
            }
            case SchedulerKind::random: {
                Rng rng(derive_seed(cfg.seed, 0x7a2d, k));
                action = rng.uniform() < 0.5 ? ActionType::factor : ActionType::model;
                break;
            }
            case SchedulerKind::llm:
                action = generator.suggest_action(result.history);
                break;
        }

        ExperimentRecord record;
        record.loop_index = k;
        record.action = action;
        record.metrics = nan_bundle();
        ModelSpec mutated_spec = result.sota.model_spec;

        try {
            const auto conditioned = condition_history(result.history, action, result.sota);
            record.hypothesis = generator.synthesize(scenario, conditioned, action, result.sota, k);
            record.hypothesis.validate();

            std::vector<TaskNode> nodes;
            for (const auto& t : record.hypothesis.tasks) {
                TaskNode n;
                n.id = t.id;
                n.description = t.description;
                n.kind = t.kind;
                nodes.push_back(std::move(n));
            }
            TaskDag dag = make_task_dag(std::move(nodes));
            const auto dev = run_costeer(dag, implementer, evaluator, cfg.costeer, result.kb);
            for (const auto& t : record.hypothesis.tasks) {
                const auto it = dev.outcomes.find(t.id);
                if (it != dev.outcomes.end() && it->second.success) {
                    record.artifacts.emplace_back(t.id, it->second.artifact);
                }
            }

            if (record.artifacts.empty()) {
                record.status = "implementation_failed";
            } else if (action == ActionType::factor) {
                std::vector<std::string> names;
                std::vector<FactorValues> values;
                for (const auto& [task_id, payload] : record.artifacts) {
                    names.push_back(task_id);
                    values.push_back(evaluate(parse(payload), panel));
                }
                const auto kept_idx = dedup(result.sota.library, values, cfg.dedup);
                if (kept_idx.empty()) {
                    record.status = "dedup_empty";
                } else {
                    std::vector<std::pair<std::string, FactorValues>> features =
                        loop_detail::library_features(result.sota.library);
                    std::vector<std::string> kept_names;
                    for (int idx : kept_idx) {
                        features.emplace_back(names[idx], values[idx]);
                        kept_names.push_back(names[idx]);
                    }
                    const auto eval = evaluate_experiment(features, result.sota.model_spec, ctx,
                                                          action, kept_names);
                    record.metrics = eval.metrics;
                    record.kept_factors = eval.kept_factors;
                    record.evaluated = true;
                }
            } else {
                mutated_spec = model_spec_from_json(json::parse(record.artifacts.front().second));
                const auto eval = evaluate_experiment(
                    loop_detail::library_features(result.sota.library), mutated_spec, ctx, action,
                    {});
                record.metrics = eval.metrics;
                record.evaluated = true;
            }
        } catch (const GenerationFailed& e) {
            record.status = std::string("generation_failed: ") + e.what();
        } catch (const EmptySampleSet& e) {
            record.status = std::string("evaluation_failed: ") + e.what();
        } catch (const ExperimentFailed& e) {
            record.status = std::string("evaluation_failed: ") + e.what();
        }

        record.feedback = analyze(record, result.sota, result.bandit);
        record.feedback.suggested_direction =
            generator.suggest_direction(action, record.feedback.decision);

        const MetricsBundle incumbent_before = result.sota.incumbent(action);
        if (record.feedback.decision) {
            if (action == ActionType::factor) {
                for (const auto& [task_id, payload] : record.artifacts) {
                    const bool kept = std::find(record.kept_factors.begin(),
                                                record.kept_factors.end(),
                                                task_id) != record.kept_factors.end();
                    if (kept) {
                        result.sota.library.add({task_id, parse(payload),
                                                 evaluate(parse(payload), panel),
                                                 "loop:" + std::to_string(k)});
                    }
                }
                result.sota.factor_best = record.metrics;
                result.sota.factor_records.push_back(k);
            } else {
                result.sota.model_spec = mutated_spec;
                result.sota.model_best = record.metrics;
                result.sota.model_record = k;
            }
            result.sota.current = record.metrics;
        }

        record.reward = reward_from_metrics(record.metrics, incumbent_before, result.bandit);
        bandit_update(result.bandit, action, x, record.reward);

        ++result.counters.total_loops;
        if (record.evaluated) ++result.counters.valid_loops;
        if (record.feedback.decision) ++result.counters.sota_selections;

        result.history.push_back(record);
        if (!cfg.out_dir.empty()) {
            loop_detail::append_trajectory(cfg.out_dir, record);
            loop_detail::persist_state(cfg.out_dir, result.sota, result.counters, k, result.bandit,
                                       result.kb);
        }
    }
    return result;
}

}  // namespace quantloop
