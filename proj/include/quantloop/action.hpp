#pragma once

#include <string>

#include "quantloop/errors.hpp"

namespace quantloop {

// The two optimization directions the loop alternates between.
enum class ActionType { factor, model };

inline std::string to_string(ActionType a) {
    return a == ActionType::factor ? "factor" : "model";
}

inline ActionType action_from_string(const std::string& s) {
    if (s == "factor") return ActionType::factor;
    if (s == "model") return ActionType::model;
    throw InvalidParameter("unknown action: " + s);
}

}  // namespace quantloop
