#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "quantloop/errors.hpp"
#include "quantloop/jsonutil.hpp"
#include "quantloop/panel.hpp"

namespace quantloop {

// Contiguous, non-overlapping train/valid/test date-index ranges (inclusive).
struct SplitSpec {
    int train_begin = 0, train_end = 0;
    int valid_begin = 0, valid_end = 0;
    int test_begin = 0, test_end = 0;

    void validate(int n_dates) const {
        auto in_range = [n_dates](int v) { return v >= 0 && v < n_dates; };
        if (!in_range(train_begin) || !in_range(train_end) || !in_range(valid_begin) ||
            !in_range(valid_end) || !in_range(test_begin) || !in_range(test_end)) {
            throw InvalidParameter("split range out of bounds");
        }
        if (!(train_begin <= train_end && valid_begin <= valid_end && test_begin <= test_end)) {
            throw InvalidParameter("split ranges must be non-empty");
        }
        if (!(train_end < valid_begin && valid_begin <= valid_end && valid_end < test_begin)) {
            throw InvalidParameter("split must be strictly time-ordered: train < valid < test");
        }
    }
};

// 60/20/20 by default.
inline SplitSpec make_split(int n_dates, double train_frac = 0.6, double valid_frac = 0.2) {
    SplitSpec s;
    s.train_begin = 0;
    s.train_end = std::max(0, static_cast<int>(n_dates * train_frac) - 1);
    s.valid_begin = s.train_end + 1;
    s.valid_end = std::max(s.valid_begin, static_cast<int>(n_dates * (train_frac + valid_frac)) - 1);
    s.test_begin = s.valid_end + 1;
    s.test_end = n_dates - 1;
    s.validate(n_dates);
    return s;
}

// Supervised (feature row, normalized label) pairs over one date range,
// date-major instrument-minor, rows with any NaN dropped.
struct SampleSet {
    Eigen::MatrixXd features;
    Eigen::VectorXd targets;
    std::vector<std::pair<int, int>> keys;  // (instrument, date) indices
    std::vector<std::string> feature_names;
};

inline SampleSet assemble_samples(const PanelTensor& panel,
                                  const std::vector<std::string>& factor_fields,
                                  const LabelPanel& labels, int date_begin, int date_end) {
    if (labels.instruments != panel.instruments() || labels.dates != panel.dates()) {
        throw IndexMismatch("labels are not aligned with the panel grid");
    }
    std::vector<int> cols;
    cols.reserve(factor_fields.size());
    for (const auto& f : factor_fields) cols.push_back(panel.require_field(f));

    const int N = panel.n_instruments();
    std::vector<std::pair<int, int>> keys;
    std::vector<double> flat;
    std::vector<double> ys;
    std::vector<double> row(cols.size());
    for (int t = date_begin; t <= date_end; ++t) {
        for (int i = 0; i < N; ++i) {
            const double y = labels.norm_at(i, t);
            if (std::isnan(y)) continue;
            bool ok = true;
            for (std::size_t c = 0; c < cols.size(); ++c) {
                row[c] = panel.at(i, t, cols[c]);
                if (std::isnan(row[c])) {
                    ok = false;
                    break;
                }
            }
            if (!ok) continue;
            keys.emplace_back(i, t);
            flat.insert(flat.end(), row.begin(), row.end());
            ys.push_back(y);
        }
    }
    if (keys.empty()) throw EmptySampleSet("no usable rows in the requested range");

    SampleSet out;
    out.keys = std::move(keys);
    out.feature_names = factor_fields;
    const auto rows = static_cast<Eigen::Index>(out.keys.size());
    const auto p = static_cast<Eigen::Index>(cols.size());
    out.features.resize(rows, p);
    out.targets.resize(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
        out.targets(r) = ys[r];
        for (Eigen::Index c = 0; c < p; ++c) out.features(r, c) = flat[r * p + c];
    }
    return out;
}

// Linear score model: weights per feature plus an unpenalized intercept.
struct LinearModel {
    std::vector<std::string> feature_names;
    Eigen::VectorXd weights;
    double intercept = 0.0;
    double ridge_lambda = 0.0;
};

// Exact normal-equations ridge fit, minimizing
//   mean((y - w.x - b)^2) + lambda * |w|^2
// with the intercept unpenalized. lambda = 0 on a rank-deficient design is a
// SingularSystem.
inline LinearModel fit(const SampleSet& train, double ridge_lambda) {
    if (ridge_lambda < 0.0) throw InvalidParameter("ridge_lambda must be >= 0");
    const Eigen::Index n = train.features.rows();
    const Eigen::Index p = train.features.cols();
    if (n == 0) throw EmptySampleSet("cannot fit on an empty sample set");

    Eigen::MatrixXd X(n, p + 1);
    X.leftCols(p) = train.features;
    X.col(p).setOnes();

    Eigen::MatrixXd normal = X.transpose() * X / static_cast<double>(n);
    for (Eigen::Index j = 0; j < p; ++j) normal(j, j) += ridge_lambda;
    const Eigen::VectorXd rhs = X.transpose() * train.targets / static_cast<double>(n);

    if (ridge_lambda == 0.0) {
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
        if (qr.rank() < p + 1) {
            throw SingularSystem("design matrix is rank-deficient; retry with ridge_lambda > 0");
        }
    }
    Eigen::LDLT<Eigen::MatrixXd> solver(normal);
    if (solver.info() != Eigen::Success) {
        throw SingularSystem("normal equations could not be factorized");
    }
    const Eigen::VectorXd theta = solver.solve(rhs);
    if (!theta.allFinite()) throw SingularSystem("non-finite solution");

    LinearModel model;
    model.feature_names = train.feature_names;
    model.weights = theta.head(p);
    model.intercept = theta(p);
    model.ridge_lambda = ridge_lambda;
    return model;
}

inline double mse(const LinearModel& model, const SampleSet& data) {
    if (data.features.cols() != model.weights.size()) {
        throw ShapeMismatch("feature count differs from model weight count");
    }
    const Eigen::VectorXd pred =
        (data.features * model.weights).array() + model.intercept;
    return (pred - data.targets).squaredNorm() / static_cast<double>(data.targets.size());
}

// Scores over [date_begin, date_end] for every instrument; rows with any NaN
// feature score NaN.
inline GridSeries predict(const LinearModel& model, const PanelTensor& panel,
                          const std::vector<std::string>& factor_fields, int date_begin,
                          int date_end) {
    if (static_cast<Eigen::Index>(factor_fields.size()) != model.weights.size()) {
        throw ShapeMismatch("feature count differs from model weight count");
    }
    std::vector<int> cols;
    cols.reserve(factor_fields.size());
    for (const auto& f : factor_fields) cols.push_back(panel.require_field(f));

    const int N = panel.n_instruments();
    const int T = panel.n_dates();
    GridSeries out{panel.instruments(), panel.dates(), {}};
    out.values.assign(static_cast<std::size_t>(N) * T, kNaN);
    for (int t = date_begin; t <= date_end; ++t) {
        for (int i = 0; i < N; ++i) {
            double acc = model.intercept;
            bool ok = true;
            for (std::size_t c = 0; c < cols.size(); ++c) {
                const double v = panel.at(i, t, cols[c]);
                if (std::isnan(v)) {
                    ok = false;
                    break;
                }
                acc += model.weights(static_cast<Eigen::Index>(c)) * v;
            }
            if (ok) out.at(i, t) = acc;
        }
    }
    return out;
}

enum class FeatureTransform { none, zscore };

// What the model-optimization action mutates: the feature transform, the
// ridge grid searched on the validation range, and the training lookback.
struct ModelSpec {
    FeatureTransform transform = FeatureTransform::zscore;
    std::vector<double> ridge_grid = {1e-6, 1e-4, 1e-2, 1.0};
    int lookback = 60;

    void validate() const {
        if (ridge_grid.empty()) throw InvalidParameter("ridge grid must be non-empty");
        for (double v : ridge_grid) {
            if (v < 0.0) throw InvalidParameter("ridge grid entries must be >= 0");
        }
        if (lookback < 1) throw InvalidParameter("lookback must be >= 1");
    }
};

inline json model_spec_to_json(const ModelSpec& spec) {
    return {{"transform", spec.transform == FeatureTransform::zscore ? "zscore" : "none"},
            {"ridge_grid", spec.ridge_grid},
            {"lookback", spec.lookback}};
}

inline ModelSpec model_spec_from_json(const json& j) {
    ModelSpec spec;
    const auto t = j.at("transform").get<std::string>();
    if (t == "zscore") {
        spec.transform = FeatureTransform::zscore;
    } else if (t == "none") {
        spec.transform = FeatureTransform::none;
    } else {
        throw InvalidParameter("unknown transform: " + t);
    }
    spec.ridge_grid = j.at("ridge_grid").get<std::vector<double>>();
    spec.lookback = j.at("lookback").get<int>();
    spec.validate();
    return spec;
}

// Fits on train with each grid lambda, keeps the one with the lowest
// validation MSE (ties to the smaller lambda), and returns the train-range
// fit. The test range is never touched.
inline LinearModel fit_walk_forward(const PanelTensor& panel,
                                    const std::vector<std::string>& factor_fields,
                                    const LabelPanel& labels, const SplitSpec& split,
                                    const ModelSpec& spec) {
    spec.validate();
    split.validate(panel.n_dates());
    const int train_begin = std::max(split.train_begin, spec.lookback);
    if (train_begin > split.train_end) {
        throw EmptySampleSet("lookback consumes the whole training range");
    }
    const SampleSet train =
        assemble_samples(panel, factor_fields, labels, train_begin, split.train_end);
    const SampleSet valid =
        assemble_samples(panel, factor_fields, labels, split.valid_begin, split.valid_end);

    double best_lambda = spec.ridge_grid.front();
    double best_mse = std::numeric_limits<double>::infinity();
    for (double lambda : spec.ridge_grid) {
        LinearModel candidate;
        try {
            candidate = fit(train, lambda);
        } catch (const SingularSystem&) {
            continue;
        }
        const double err = mse(candidate, valid);
        if (err < best_mse) {
            best_mse = err;
            best_lambda = lambda;
        }
    }
    if (!std::isfinite(best_mse)) {
        throw SingularSystem("no grid lambda produced a usable fit");
    }
    return fit(train, best_lambda);
}

inline json model_to_json(const LinearModel& model) {
    std::vector<double> w(model.weights.data(), model.weights.data() + model.weights.size());
    return {{"feature_names", model.feature_names},
            {"weights", w},
            {"intercept", model.intercept},
            {"ridge_lambda", model.ridge_lambda}};
}

inline LinearModel model_from_json(const json& j) {
    LinearModel model;
    model.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    const auto w = j.at("weights").get<std::vector<double>>();
    if (w.size() != model.feature_names.size()) {
        throw ShapeMismatch("weights and feature_names differ in length");
    }
    model.weights = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
    model.intercept = j.at("intercept").get<double>();
    model.ridge_lambda = j.at("ridge_lambda").get<double>();
    return model;
}

}  // namespace quantloop
