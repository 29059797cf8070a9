#pragma once

#include <cmath>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "quantloop/action.hpp"
#include "quantloop/backtest.hpp"
#include "quantloop/errors.hpp"
#include "quantloop/expr.hpp"
#include "quantloop/metrics.hpp"
#include "quantloop/panel.hpp"
#include "quantloop/predictor.hpp"

namespace quantloop {

// Candidate screening parameters. The threshold applies to the signed
// time-averaged correlation; `absolute` switches to |corr| (off by default:
// a negated duplicate passes the literal rule). `among_candidates` also
// screens candidates against earlier-kept candidates in list order.
struct DedupConfig {
    double threshold = 0.99;
    bool absolute = false;
    bool among_candidates = true;

    void validate() const {
        if (!(threshold > 0.0 && threshold <= 1.0)) {
            throw InvalidParameter("dedup threshold must be in (0, 1]");
        }
    }
};

// One accepted factor: its formula, values cached on the working panel, and
// the experiment that produced it.
struct FactorLibraryEntry {
    std::string name;
    ExprPtr expr;
    FactorValues values;
    std::string provenance;
};

class FactorLibrary {
public:
    void add(FactorLibraryEntry entry) {
        for (const auto& e : entries_) {
            if (e.name == entry.name) throw DuplicateKey("library already has " + entry.name);
        }
        entries_.push_back(std::move(entry));
    }

    const std::vector<FactorLibraryEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.name);
        return out;
    }

    std::vector<const FactorValues*> values_list() const {
        std::vector<const FactorValues*> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(&e.values);
        return out;
    }

    std::vector<std::pair<std::string, ExprPtr>> formulas() const {
        std::vector<std::pair<std::string, ExprPtr>> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.emplace_back(e.name, e.expr);
        return out;
    }

private:
    std::vector<FactorLibraryEntry> entries_;
};

namespace validation_detail {

// Mean over dates of the cross-sectional Pearson correlation between two
// grid series. Dates with fewer than two valid pairs or a degenerate
// cross-section are skipped; NaN when no date qualifies.
inline double time_averaged_cross_corr(const FactorValues& a, const FactorValues& b) {
    const int N = static_cast<int>(a.instruments.size());
    const int T = static_cast<int>(a.dates.size());
    double acc = 0.0;
    int valid_dates = 0;
    std::vector<double> xa, xb;
    for (int t = 0; t < T; ++t) {
        xa.clear();
        xb.clear();
        for (int i = 0; i < N; ++i) {
            const double va = a.at(i, t);
            const double vb = b.at(i, t);
            if (!std::isnan(va) && !std::isnan(vb)) {
                xa.push_back(va);
                xb.push_back(vb);
            }
        }
        if (xa.size() < 2) continue;
        const double corr = metrics_detail::pearson(xa, xb);
        if (std::isnan(corr)) continue;
        acc += corr;
        ++valid_dates;
    }
    return valid_dates == 0 ? kNaN : acc / valid_dates;
}

}  // namespace validation_detail

// Screens candidates against the incumbent library (and, by default, against
// earlier-kept candidates): a candidate is dropped when its maximum
// time-averaged cross-sectional correlation reaches the threshold, or when it
// cannot be correlated with anything it must be compared to.
inline std::vector<int> dedup(const std::vector<const FactorValues*>& sota,
                              const std::vector<FactorValues>& candidates,
                              const DedupConfig& cfg = {}) {
    cfg.validate();
    for (const auto* s : sota) {
        if (!candidates.empty() && !s->same_grid(candidates.front())) {
            throw IndexMismatch("library factor not on the candidate grid");
        }
    }
    for (std::size_t n = 1; n < candidates.size(); ++n) {
        if (!candidates[n].same_grid(candidates.front())) {
            throw IndexMismatch("candidates are not on a common grid");
        }
    }

    std::vector<int> kept;
    for (std::size_t n = 0; n < candidates.size(); ++n) {
        std::vector<const FactorValues*> against(sota.begin(), sota.end());
        if (cfg.among_candidates) {
            for (int k : kept) against.push_back(&candidates[k]);
        }
        if (against.empty()) {
            kept.push_back(static_cast<int>(n));
            continue;
        }
        double ic_max = -std::numeric_limits<double>::infinity();
        bool evaluable = false;
        for (const auto* ref : against) {
            double corr = validation_detail::time_averaged_cross_corr(*ref, candidates[n]);
            if (std::isnan(corr)) continue;
            if (cfg.absolute) corr = std::abs(corr);
            evaluable = true;
            ic_max = std::max(ic_max, corr);
        }
        if (!evaluable) continue;  // unevaluable candidate: dropped
        if (ic_max >= cfg.threshold) continue;
        kept.push_back(static_cast<int>(n));
    }
    return kept;
}

inline std::vector<int> dedup(const FactorLibrary& library,
                              const std::vector<FactorValues>& candidates,
                              const DedupConfig& cfg = {}) {
    return dedup(library.values_list(), candidates, cfg);
}

struct ExperimentResult {
    MetricsBundle metrics;
    BacktestReport report;
    std::vector<std::string> kept_factors;
    ActionType action = ActionType::factor;
    LinearModel model;
    DailySeries daily_ic;
    DailySeries daily_rank_ic;
};

// Shared inputs for experiment evaluation: the market panel, its labels, the
// walk-forward split, and the strategy/cost model.
struct ExperimentContext {
    const PanelTensor& panel;
    const LabelPanel& labels;
    SplitSpec split;
    StrategyConfig strategy;
    PipelineConfig pipeline;
    double risk_free = 0.0;
};

// Full pipeline for one experiment: concatenate the feature set onto the
// panel, optionally robust-z the factor columns, fit walk-forward, score the
// test range, backtest, and aggregate the metric bundle. Test labels are
// never visible to the fit.
inline ExperimentResult evaluate_experiment(
    const std::vector<std::pair<std::string, FactorValues>>& features, const ModelSpec& spec,
    const ExperimentContext& ctx, ActionType action,
    const std::vector<std::string>& kept_names) {
    if (features.empty()) throw ExperimentFailed("no features to evaluate", "assemble");
    spec.validate();

    PanelTensor widened = concat_features(ctx.panel, features);
    const int base_fields = ctx.panel.n_fields();
    std::vector<std::string> factor_fields(widened.fields().begin() + base_fields,
                                           widened.fields().end());
    if (spec.transform == FeatureTransform::zscore) {
        for (const auto& f : factor_fields) widened = robust_zscore(widened, f, ctx.pipeline);
    }

    ExperimentResult out;
    out.action = action;
    out.kept_factors = kept_names;
    try {
        out.model = fit_walk_forward(widened, factor_fields, ctx.labels, ctx.split, spec);
    } catch (const EmptySampleSet&) {
        throw;
    } catch (const Error& e) {
        throw ExperimentFailed(e.what(), "fit");
    }

    const GridSeries scores =
        predict(out.model, widened, factor_fields, ctx.split.test_begin, ctx.split.test_end);

    const int N = ctx.panel.n_instruments();
    for (int t = ctx.split.test_begin; t <= ctx.split.test_end; ++t) {
        std::vector<double> pred, real;
        for (int i = 0; i < N; ++i) {
            const double p = scores.at(i, t);
            const double y = ctx.labels.raw_at(i, t);
            if (!std::isnan(p) && !std::isnan(y)) {
                pred.push_back(p);
                real.push_back(y);
            }
        }
        if (pred.size() < 2) continue;
        const std::string& date = ctx.panel.dates()[t];
        out.daily_ic.push(date, metrics_detail::pearson(pred, real));
        out.daily_rank_ic.push(date, metrics_detail::pearson(metrics_detail::ranks(pred),
                                                             metrics_detail::ranks(real)));
    }

    try {
        out.report =
            run_backtest(scores, widened, ctx.strategy, ctx.split.test_begin, ctx.split.test_end);
    } catch (const Error& e) {
        throw ExperimentFailed(e.what(), "backtest");
    }
    out.metrics =
        aggregate_metrics(out.daily_ic, out.daily_rank_ic, out.report.daily_returns, ctx.risk_free);
    return out;
}

}  // namespace quantloop
