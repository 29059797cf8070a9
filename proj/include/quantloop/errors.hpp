#pragma once

#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace quantloop {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define QUANTLOOP_DEFINE_ERROR(Name)                                \
    class Name : public Error {                                     \
    public:                                                         \
        explicit Name(const std::string& msg) : Error(msg) {}       \
    }

// panel
QUANTLOOP_DEFINE_ERROR(DuplicateKey);
QUANTLOOP_DEFINE_ERROR(EmptyInput);
QUANTLOOP_DEFINE_ERROR(FieldNotFound);
QUANTLOOP_DEFINE_ERROR(IndexMismatch);
QUANTLOOP_DEFINE_ERROR(InvalidPrice);

// predictor
QUANTLOOP_DEFINE_ERROR(EmptySampleSet);
QUANTLOOP_DEFINE_ERROR(SingularSystem);
QUANTLOOP_DEFINE_ERROR(ShapeMismatch);

// metrics
QUANTLOOP_DEFINE_ERROR(InsufficientData);
QUANTLOOP_DEFINE_ERROR(InvalidReturn);

// backtest
QUANTLOOP_DEFINE_ERROR(EmptyCrossSection);

// bandit
QUANTLOOP_DEFINE_ERROR(InvalidParameter);
QUANTLOOP_DEFINE_ERROR(NumericalError);

// scheduling / generation
QUANTLOOP_DEFINE_ERROR(ImplementerUnavailable);
QUANTLOOP_DEFINE_ERROR(GenerationFailed);

// gateway
QUANTLOOP_DEFINE_ERROR(GatewayUnavailable);

#undef QUANTLOOP_DEFINE_ERROR

// Parse failure in tabular input; carries the 1-based row number.
class ParseError : public Error {
public:
    ParseError(const std::string& msg, std::size_t row)
        : Error(msg + " (row " + std::to_string(row) + ")"), row_(row) {}
    std::size_t row() const { return row_; }

private:
    std::size_t row_;
};

// Formula text rejected by the tokenizer/parser; carries the byte offset.
class SyntaxError : public Error {
public:
    SyntaxError(const std::string& msg, std::size_t offset)
        : Error(msg + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

// Unknown operator name in a formula.
class UnknownOp : public Error {
public:
    explicit UnknownOp(const std::string& name)
        : Error("unknown operator: " + name), name_(name) {}
    const std::string& name() const { return name_; }

private:
    std::string name_;
};

// Operator called with the wrong number or shape of arguments.
class ArityError : public Error {
public:
    explicit ArityError(const std::string& msg) : Error(msg) {}
};

// Task dependency graph is not acyclic; carries one witness cycle.
class CycleDetected : public Error {
public:
    explicit CycleDetected(std::vector<std::string> cycle)
        : Error(describe(cycle)), cycle_(std::move(cycle)) {}
    const std::vector<std::string>& cycle() const { return cycle_; }

private:
    static std::string describe(const std::vector<std::string>& cycle) {
        std::string s = "cycle detected:";
        for (const auto& id : cycle) s += " " + id;
        return s;
    }
    std::vector<std::string> cycle_;
};

// A gateway reply that failed schema validation; carries the raw text.
class MalformedReply : public Error {
public:
    MalformedReply(const std::string& msg, std::string raw)
        : Error(msg), raw_(std::move(raw)) {}
    const std::string& raw() const { return raw_; }

private:
    std::string raw_;
};

// An experiment that failed mid-pipeline; carries the stage name.
class ExperimentFailed : public Error {
public:
    ExperimentFailed(const std::string& msg, std::string stage)
        : Error("[" + stage + "] " + msg), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

}  // namespace quantloop
