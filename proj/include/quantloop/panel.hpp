#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "quantloop/dates.hpp"
#include "quantloop/errors.hpp"
#include "quantloop/rng.hpp"

namespace quantloop {

// Knobs for the data pipeline: the numerical stability constant, the label
// horizon in trading days, and the factor lookback window.
struct PipelineConfig {
    double epsilon = 1e-12;
    int horizon_tau = 1;
    int window_ell = 60;

    void validate() const {
        if (!(epsilon > 0.0)) throw InvalidParameter("epsilon must be > 0");
        if (horizon_tau < 1) throw InvalidParameter("horizon_tau must be >= 1");
        if (window_ell < 1) throw InvalidParameter("window_ell must be >= 1");
    }
};

// A series defined on the same (instrument, date) grid as a panel,
// instrument-major. Factor evaluation and prediction both produce these.
struct GridSeries {
    std::vector<std::string> instruments;
    std::vector<std::string> dates;
    std::vector<double> values;  // size = |instruments| * |dates|

    double at(int i, int t) const { return values[static_cast<std::size_t>(i) * dates.size() + t]; }
    double& at(int i, int t) { return values[static_cast<std::size_t>(i) * dates.size() + t]; }

    bool same_grid(const GridSeries& other) const {
        return instruments == other.instruments && dates == other.dates;
    }
};

// Dense (instrument, date, field) tensor of daily market data. Immutable
// after construction; transforms return new tensors.
class PanelTensor {
public:
    PanelTensor(std::vector<std::string> instruments, std::vector<std::string> dates,
                std::vector<std::string> fields, std::vector<double> values)
        : instruments_(std::move(instruments)),
          dates_(std::move(dates)),
          fields_(std::move(fields)),
          values_(std::move(values)) {
        check_unique(instruments_, "instruments");
        check_unique(fields_, "fields");
        for (std::size_t t = 1; t < dates_.size(); ++t) {
            if (!(dates_[t - 1] < dates_[t])) {
                throw Error("dates must be strictly increasing: " + dates_[t - 1] +
                            " !< " + dates_[t]);
            }
        }
        const std::size_t expected =
            instruments_.size() * dates_.size() * fields_.size();
        if (values_.size() != expected) {
            throw ShapeMismatch("value buffer has " + std::to_string(values_.size()) +
                                " cells, expected " + std::to_string(expected));
        }
        for (std::size_t p = 0; p < fields_.size(); ++p) index_[fields_[p]] = static_cast<int>(p);
    }

    int n_instruments() const { return static_cast<int>(instruments_.size()); }
    int n_dates() const { return static_cast<int>(dates_.size()); }
    int n_fields() const { return static_cast<int>(fields_.size()); }

    const std::vector<std::string>& instruments() const { return instruments_; }
    const std::vector<std::string>& dates() const { return dates_; }
    const std::vector<std::string>& fields() const { return fields_; }

    double at(int i, int t, int p) const {
        return values_[(static_cast<std::size_t>(i) * dates_.size() + t) * fields_.size() + p];
    }

    std::optional<int> field_index(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    int require_field(const std::string& name) const {
        auto p = field_index(name);
        if (!p) throw FieldNotFound("no such field: " + name);
        return *p;
    }

    std::optional<int> date_index(const std::string& date) const {
        auto it = std::lower_bound(dates_.begin(), dates_.end(), date);
        if (it == dates_.end() || *it != date) return std::nullopt;
        return static_cast<int>(it - dates_.begin());
    }

    GridSeries field_series(const std::string& name) const {
        const int p = require_field(name);
        GridSeries out{instruments_, dates_, {}};
        out.values.resize(instruments_.size() * dates_.size());
        for (int i = 0; i < n_instruments(); ++i)
            for (int t = 0; t < n_dates(); ++t) out.at(i, t) = at(i, t, p);
        return out;
    }

    const std::vector<double>& raw_values() const { return values_; }

private:
    static void check_unique(const std::vector<std::string>& items, const char* what) {
        std::set<std::string> seen;
        for (const auto& s : items) {
            if (!seen.insert(s).second) {
                throw DuplicateKey(std::string(what) + " not unique: " + s);
            }
        }
    }

    std::vector<std::string> instruments_;
    std::vector<std::string> dates_;
    std::vector<std::string> fields_;
    std::vector<double> values_;
    std::unordered_map<std::string, int> index_;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    cells.push_back(cur);
    return cells;
}

inline double parse_cell(const std::string& cell, std::size_t row) {
    if (cell.empty() || cell == "nan" || cell == "NaN") return kNaN;
    double v = 0.0;
    const char* first = cell.data();
    const char* last = cell.data() + cell.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last) {
        throw ParseError("unparsable numeric '" + cell + "'", row);
    }
    return v;
}

// Shortest decimal string that round-trips the double exactly.
inline std::string format_cell(double v) {
    if (std::isnan(v)) return "";
    char buf[40];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

// Smallest "__k" suffix that avoids the used set.
inline std::string dedup_name(const std::string& name, const std::set<std::string>& used) {
    if (!used.count(name)) return name;
    for (int k = 1;; ++k) {
        std::string candidate = name + "__" + std::to_string(k);
        if (!used.count(candidate)) return candidate;
    }
}

}  // namespace detail

// Reads `datetime,instrument,<fields...>` CSV into a dense tensor. Row order
// is irrelevant; absent (instrument, date) cells come back NaN. `schema`
// optionally restricts/reorders the value columns; empty means "all columns
// after the first two, in header order".
inline PanelTensor load_panel(const std::string& path,
                              const std::vector<std::string>& schema = {}) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);

    std::string header;
    if (!std::getline(in, header) || header.empty()) throw EmptyInput("empty file: " + path);
    const auto head_cells = detail::split_csv_line(header);
    if (head_cells.size() < 3 || head_cells[0] != "datetime" || head_cells[1] != "instrument") {
        throw ParseError("header must start with datetime,instrument", 1);
    }

    std::vector<std::string> fields(head_cells.begin() + 2, head_cells.end());
    std::vector<int> col_of_field;
    if (!schema.empty()) {
        col_of_field.reserve(schema.size());
        for (const auto& want : schema) {
            auto it = std::find(fields.begin(), fields.end(), want);
            if (it == fields.end()) throw FieldNotFound("schema field missing from header: " + want);
            col_of_field.push_back(static_cast<int>(it - fields.begin()));
        }
        fields = schema;
    } else {
        for (std::size_t p = 0; p < fields.size(); ++p) col_of_field.push_back(static_cast<int>(p));
    }

    struct Row {
        std::string date, instrument;
        std::vector<double> vals;
    };
    std::vector<Row> rows;
    std::set<std::string> dates;
    std::vector<std::string> instruments;  // first-appearance order
    std::set<std::string> instrument_set;
    std::set<std::pair<std::string, std::string>> keys;

    std::string line;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != head_cells.size()) {
            throw ParseError("expected " + std::to_string(head_cells.size()) + " cells, got " +
                                 std::to_string(cells.size()),
                             lineno);
        }
        Row r;
        r.date = cells[0];
        r.instrument = cells[1];
        parse_iso_date(r.date);
        if (!keys.insert({r.date, r.instrument}).second) {
            throw DuplicateKey("duplicate (datetime, instrument): (" + r.date + ", " +
                               r.instrument + ")");
        }
        r.vals.reserve(fields.size());
        for (int col : col_of_field) r.vals.push_back(detail::parse_cell(cells[col + 2], lineno));
        dates.insert(r.date);
        if (instrument_set.insert(r.instrument).second) instruments.push_back(r.instrument);
        rows.push_back(std::move(r));
    }
    if (rows.empty()) throw EmptyInput("no data rows: " + path);

    std::sort(instruments.begin(), instruments.end());
    std::vector<std::string> date_list(dates.begin(), dates.end());

    std::unordered_map<std::string, int> imap, tmap;
    for (std::size_t i = 0; i < instruments.size(); ++i) imap[instruments[i]] = static_cast<int>(i);
    for (std::size_t t = 0; t < date_list.size(); ++t) tmap[date_list[t]] = static_cast<int>(t);

    const std::size_t P = fields.size();
    std::vector<double> values(instruments.size() * date_list.size() * P, kNaN);
    for (const auto& r : rows) {
        const std::size_t base =
            (static_cast<std::size_t>(imap[r.instrument]) * date_list.size() + tmap[r.date]) * P;
        for (std::size_t p = 0; p < P; ++p) values[base + p] = r.vals[p];
    }
    return PanelTensor(std::move(instruments), std::move(date_list), std::move(fields),
                       std::move(values));
}

// Writes the panel back out in the load_panel schema, rows sorted by
// (datetime, instrument). Finite cells round-trip exactly.
inline void write_panel(const PanelTensor& panel, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out << "datetime,instrument";
    for (const auto& f : panel.fields()) out << "," << f;
    out << "\n";
    for (int t = 0; t < panel.n_dates(); ++t) {
        for (int i = 0; i < panel.n_instruments(); ++i) {
            out << panel.dates()[t] << "," << panel.instruments()[i];
            for (int p = 0; p < panel.n_fields(); ++p) {
                out << "," << detail::format_cell(panel.at(i, t, p));
            }
            out << "\n";
        }
    }
}

// Synthetic panel plus the hidden per-(i,t) score that drives the planted
// signal. The score sidecar is what lets recoverability tests know the truth.
struct SyntheticPanel {
    PanelTensor panel;
    GridSeries planted_score;
};

// Geometric-random-walk OHLCV panel with a planted cross-sectional signal:
// the score at (i, t) is the cross-sectionally standardized trailing mean of
// the last 5 daily returns, and the return from t to t+1 mixes that score in
// with weight `signal_strength`. Identical seeds give bit-identical output.
inline SyntheticPanel gen_synthetic_panel(int n_instruments, int n_dates, std::uint64_t seed,
                                          double signal_strength) {
    if (n_instruments < 2) throw InvalidParameter("need at least 2 instruments");
    if (n_dates < 10) throw InvalidParameter("need at least 10 dates");
    if (signal_strength < 0.0 || signal_strength > 1.0) {
        throw InvalidParameter("signal_strength must be in [0, 1]");
    }

    const int N = n_instruments;
    const int T = n_dates;
    constexpr int kScoreWindow = 5;
    constexpr double kDailyVol = 0.02;
    constexpr double kDrift = 0.0002;

    std::vector<std::string> instruments;
    instruments.reserve(N);
    for (int i = 0; i < N; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "INST%04d", i);
        instruments.emplace_back(buf);
    }
    auto dates = make_trading_dates("2015-01-05", T);
    const std::vector<std::string> fields = {"open", "high", "low", "close", "volume"};

    Rng rng(derive_seed(seed, 0xda7a));

    std::vector<double> close(static_cast<std::size_t>(N) * T);
    std::vector<double> logret(static_cast<std::size_t>(N) * T, 0.0);
    std::vector<double> score(static_cast<std::size_t>(N) * T, 0.0);

    for (int i = 0; i < N; ++i) close[static_cast<std::size_t>(i) * T] = 50.0 + 100.0 * rng.uniform();

    const double noise_weight = std::sqrt(1.0 - signal_strength * signal_strength);
    std::vector<double> raw_score(N);
    for (int t = 0; t < T - 1; ++t) {
        // Trailing mean return over the score window; pure noise before the
        // window has filled so the planted correlation applies from day one.
        for (int i = 0; i < N; ++i) {
            if (t >= kScoreWindow) {
                double acc = 0.0;
                for (int k = t - kScoreWindow + 1; k <= t; ++k)
                    acc += logret[static_cast<std::size_t>(i) * T + k];
                raw_score[i] = acc / kScoreWindow;
            } else {
                raw_score[i] = rng.gaussian();
            }
        }
        double mean = 0.0;
        for (double v : raw_score) mean += v;
        mean /= N;
        double var = 0.0;
        for (double v : raw_score) var += (v - mean) * (v - mean);
        var /= N;
        const double sd = std::sqrt(var);
        for (int i = 0; i < N; ++i) {
            const double z = sd > 0.0 ? (raw_score[i] - mean) / sd : 0.0;
            score[static_cast<std::size_t>(i) * T + t] = z;
            const double shock = signal_strength * z + noise_weight * rng.gaussian();
            const double r = kDrift + kDailyVol * shock;
            logret[static_cast<std::size_t>(i) * T + t + 1] = r;
            close[static_cast<std::size_t>(i) * T + t + 1] =
                close[static_cast<std::size_t>(i) * T + t] * std::exp(r);
        }
    }
    // Last date has no next-day return to predict; score there is unusable.
    for (int i = 0; i < N; ++i) score[static_cast<std::size_t>(i) * T + T - 1] = kNaN;

    std::vector<double> values(static_cast<std::size_t>(N) * T * fields.size());
    for (int i = 0; i < N; ++i) {
        const double base_volume = 2.0e3 * (0.5 + rng.uniform());
        for (int t = 0; t < T; ++t) {
            const double c = close[static_cast<std::size_t>(i) * T + t];
            const double prev = t > 0 ? close[static_cast<std::size_t>(i) * T + t - 1] : c;
            const double open = prev * std::exp(0.3 * kDailyVol * rng.gaussian());
            const double hi = std::max(open, c) * std::exp(std::abs(rng.gaussian()) * 0.3 * kDailyVol);
            const double lo = std::min(open, c) * std::exp(-std::abs(rng.gaussian()) * 0.3 * kDailyVol);
            const double volume = base_volume * std::exp(0.5 * rng.gaussian());
            const std::size_t base = (static_cast<std::size_t>(i) * T + t) * fields.size();
            values[base + 0] = open;
            values[base + 1] = hi;
            values[base + 2] = lo;
            values[base + 3] = c;
            values[base + 4] = volume;
        }
    }

    SyntheticPanel out{
        PanelTensor(instruments, dates, fields, std::move(values)),
        GridSeries{instruments, dates, std::move(score)},
    };
    return out;
}

inline PanelTensor gen_synthetic(int n_instruments, int n_dates, std::uint64_t seed,
                                 double signal_strength) {
    return gen_synthetic_panel(n_instruments, n_dates, seed, signal_strength).panel;
}

namespace detail {

inline double median_inplace(std::vector<double>& v) {
    const std::size_t n = v.size();
    const std::size_t mid = n / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    double hi = v[mid];
    if (n % 2 == 1) return hi;
    std::nth_element(v.begin(), v.begin() + mid - 1, v.begin() + mid);
    return 0.5 * (v[mid - 1] + hi);
}

}  // namespace detail

// Cross-sectional robust z-score of one field: per date,
// (x - median) / (MAD + eps) with MAD the unscaled median absolute deviation.
// The transformed values replace the field; the originals are kept under a
// "raw_"-prefixed name appended at the end.
inline PanelTensor robust_zscore(const PanelTensor& panel, const std::string& field,
                                 const PipelineConfig& cfg) {
    cfg.validate();
    const int p = panel.require_field(field);
    const int N = panel.n_instruments();
    const int T = panel.n_dates();
    const int P = panel.n_fields();

    std::set<std::string> used(panel.fields().begin(), panel.fields().end());
    const std::string raw_name = detail::dedup_name("raw_" + field, used);
    std::vector<std::string> fields = panel.fields();
    fields.push_back(raw_name);

    std::vector<double> values(static_cast<std::size_t>(N) * T * (P + 1));
    for (int i = 0; i < N; ++i) {
        for (int t = 0; t < T; ++t) {
            const std::size_t base = (static_cast<std::size_t>(i) * T + t) * (P + 1);
            for (int q = 0; q < P; ++q) values[base + q] = panel.at(i, t, q);
            values[base + P] = panel.at(i, t, p);
        }
    }

    std::vector<double> slice;
    for (int t = 0; t < T; ++t) {
        slice.clear();
        for (int i = 0; i < N; ++i) {
            const double v = panel.at(i, t, p);
            if (!std::isnan(v)) slice.push_back(v);
        }
        if (slice.empty()) continue;
        std::vector<double> work = slice;
        const double med = detail::median_inplace(work);
        work.clear();
        for (double v : slice) work.push_back(std::abs(v - med));
        const double mad = detail::median_inplace(work);
        for (int i = 0; i < N; ++i) {
            const std::size_t base = (static_cast<std::size_t>(i) * T + t) * (P + 1);
            const double v = panel.at(i, t, p);
            if (!std::isnan(v)) values[base + p] = (v - med) / (mad + cfg.epsilon);
        }
    }
    return PanelTensor(panel.instruments(), panel.dates(), std::move(fields), std::move(values));
}

// Forward-fill then cross-sectional mean, one left-to-right pass per field.
// A date slice with no fill source at all stays NaN.
inline PanelTensor impute(const PanelTensor& panel) {
    const int N = panel.n_instruments();
    const int T = panel.n_dates();
    const int P = panel.n_fields();
    std::vector<double> values(panel.raw_values());

    auto cell = [&](int i, int t, int p) -> double& {
        return values[(static_cast<std::size_t>(i) * T + t) * P + p];
    };

    for (int p = 0; p < P; ++p) {
        for (int t = 0; t < T; ++t) {
            for (int i = 0; i < N; ++i) {
                if (std::isnan(cell(i, t, p)) && t > 0 && !std::isnan(cell(i, t - 1, p))) {
                    cell(i, t, p) = cell(i, t - 1, p);
                }
            }
            double sum = 0.0;
            int count = 0;
            for (int i = 0; i < N; ++i) {
                if (!std::isnan(cell(i, t, p))) {
                    sum += cell(i, t, p);
                    ++count;
                }
            }
            if (count == 0 || count == N) continue;
            const double mean = sum / count;
            for (int i = 0; i < N; ++i) {
                if (std::isnan(cell(i, t, p))) cell(i, t, p) = mean;
            }
        }
    }
    return PanelTensor(panel.instruments(), panel.dates(), panel.fields(), std::move(values));
}

// Forward returns and their per-date z-scores, on the panel grid.
struct LabelPanel {
    std::vector<std::string> instruments;
    std::vector<std::string> dates;
    std::vector<double> raw;         // tau-step forward return, (i, t)
    std::vector<double> normalized;  // per-date z-score of raw
    int tau = 1;

    double raw_at(int i, int t) const { return raw[static_cast<std::size_t>(i) * dates.size() + t]; }
    double norm_at(int i, int t) const {
        return normalized[static_cast<std::size_t>(i) * dates.size() + t];
    }
};

// raw = (close[t+tau] - close[t]) / close[t]; normalized = per-date
// (raw - mean) / (std + eps) with population std. The final tau dates are NaN.
inline LabelPanel compute_labels(const PanelTensor& panel, const PipelineConfig& cfg) {
    cfg.validate();
    const int p = panel.require_field("close");
    const int N = panel.n_instruments();
    const int T = panel.n_dates();
    const int tau = cfg.horizon_tau;

    LabelPanel out{panel.instruments(), panel.dates(), {}, {}, tau};
    out.raw.assign(static_cast<std::size_t>(N) * T, kNaN);
    out.normalized.assign(static_cast<std::size_t>(N) * T, kNaN);

    for (int i = 0; i < N; ++i) {
        for (int t = 0; t < T; ++t) {
            const double now = panel.at(i, t, p);
            if (std::isnan(now)) continue;
            if (now <= 0.0) {
                throw InvalidPrice("non-positive close for " + panel.instruments()[i] + " at " +
                                   panel.dates()[t]);
            }
            if (t + tau >= T) continue;
            const double fwd = panel.at(i, t + tau, p);
            if (std::isnan(fwd)) continue;
            if (fwd <= 0.0) {
                throw InvalidPrice("non-positive close for " + panel.instruments()[i] + " at " +
                                   panel.dates()[t + tau]);
            }
            out.raw[static_cast<std::size_t>(i) * T + t] = (fwd - now) / now;
        }
    }

    for (int t = 0; t < T; ++t) {
        double sum = 0.0;
        int count = 0;
        double first = kNaN;
        bool identical = true;
        for (int i = 0; i < N; ++i) {
            const double v = out.raw[static_cast<std::size_t>(i) * T + t];
            if (!std::isnan(v)) {
                if (count == 0) first = v;
                identical = identical && v == first;
                sum += v;
                ++count;
            }
        }
        if (count == 0) continue;
        // n identical labels have mean exactly equal to the label; the
        // accumulated mean may not, which would turn an exact zero numerator
        // into an epsilon-scale artifact
        const double mean = identical ? first : sum / count;
        double var = 0.0;
        for (int i = 0; i < N; ++i) {
            const double v = out.raw[static_cast<std::size_t>(i) * T + t];
            if (!std::isnan(v)) var += (v - mean) * (v - mean);
        }
        const double sd = std::sqrt(var / count);
        for (int i = 0; i < N; ++i) {
            const double v = out.raw[static_cast<std::size_t>(i) * T + t];
            if (!std::isnan(v)) {
                out.normalized[static_cast<std::size_t>(i) * T + t] = (v - mean) / (sd + cfg.epsilon);
            }
        }
    }
    return out;
}

// Appends factor series as new fields. Collisions get the smallest free
// "__k" suffix; a series on a different grid is an IndexMismatch.
inline PanelTensor concat_features(
    const PanelTensor& panel, const std::vector<std::pair<std::string, GridSeries>>& new_factors) {
    const int N = panel.n_instruments();
    const int T = panel.n_dates();
    const int P = panel.n_fields();
    const int M = static_cast<int>(new_factors.size());

    for (const auto& [name, series] : new_factors) {
        if (series.instruments != panel.instruments() || series.dates != panel.dates()) {
            throw IndexMismatch("factor '" + name + "' is not aligned with the panel grid");
        }
    }

    std::set<std::string> used(panel.fields().begin(), panel.fields().end());
    std::vector<std::string> fields = panel.fields();
    for (const auto& [name, series] : new_factors) {
        const std::string final_name = detail::dedup_name(name, used);
        used.insert(final_name);
        fields.push_back(final_name);
    }

    std::vector<double> values(static_cast<std::size_t>(N) * T * (P + M));
    for (int i = 0; i < N; ++i) {
        for (int t = 0; t < T; ++t) {
            const std::size_t base = (static_cast<std::size_t>(i) * T + t) * (P + M);
            for (int p = 0; p < P; ++p) values[base + p] = panel.at(i, t, p);
            for (int m = 0; m < M; ++m) values[base + P + m] = new_factors[m].second.at(i, t);
        }
    }
    return PanelTensor(panel.instruments(), panel.dates(), std::move(fields), std::move(values));
}

}  // namespace quantloop
