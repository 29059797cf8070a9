#pragma once

#include <cmath>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <json.hpp>

#include "quantloop/action.hpp"
#include "quantloop/errors.hpp"
#include "quantloop/jsonutil.hpp"
#include "quantloop/metrics.hpp"
#include "quantloop/rng.hpp"

namespace quantloop {

inline constexpr int kStateDim = 8;

// Gaussian posterior over one arm's reward coefficients, kept in
// information form (mean vector + precision matrix).
struct ArmPosterior {
    Eigen::VectorXd mu;
    Eigen::MatrixXd precision;
};

struct BanditState {
    ArmPosterior factor_arm;
    ArmPosterior model_arm;
    double tau = 1.0;
    double sigma = 1.0;
    Eigen::VectorXd weights;      // reward weights w
    bool delta_reward = true;     // reward on metric improvement vs. absolute level

    ArmPosterior& arm(ActionType a) { return a == ActionType::factor ? factor_arm : model_arm; }
    const ArmPosterior& arm(ActionType a) const {
        return a == ActionType::factor ? factor_arm : model_arm;
    }
};

inline Eigen::VectorXd uniform_weights() {
    return Eigen::VectorXd::Constant(kStateDim, 1.0 / kStateDim);
}

// Both arms start at mu = 0, precision = tau^-2 * I.
inline BanditState bandit_init(double tau, double sigma,
                               const Eigen::VectorXd& weights = uniform_weights()) {
    if (!(tau > 0.0)) throw InvalidParameter("tau must be positive");
    if (!(sigma > 0.0)) throw InvalidParameter("sigma must be positive");
    if (weights.size() != kStateDim) throw InvalidParameter("weights must have 8 entries");
    BanditState state;
    state.tau = tau;
    state.sigma = sigma;
    state.weights = weights;
    const Eigen::MatrixXd prior =
        Eigen::MatrixXd::Identity(kStateDim, kStateDim) / (tau * tau);
    state.factor_arm = {Eigen::VectorXd::Zero(kStateDim), prior};
    state.model_arm = {Eigen::VectorXd::Zero(kStateDim), prior};
    return state;
}

// The 8-entry performance vector [IC, ICIR, RankIC, RankICIR, ARR, IR, -MDD,
// SR]. The drawdown channel is the signed drawdown (negated magnitude), so
// every channel points the desirable way. IR equals the Sharpe ratio here
// (benchmark = risk-free), so the SR channel repeats it. NaN channels map to
// zero so failed experiments stay well-defined.
inline Eigen::VectorXd state_vector(const MetricsBundle& m) {
    Eigen::VectorXd x(kStateDim);
    const double channels[kStateDim] = {m.ic, m.icir,   m.rank_ic, m.rank_icir,
                                        m.arr, m.ir, m.mdd,     m.ir};
    for (int k = 0; k < kStateDim; ++k) x(k) = std::isnan(channels[k]) ? 0.0 : channels[k];
    return x;
}

namespace bandit_detail {

// Draw from N(mu, P^-1) given the Cholesky factor P = L L^T: mu + L^-T z.
inline Eigen::VectorXd sample_gaussian(const ArmPosterior& arm, Rng& rng) {
    Eigen::LLT<Eigen::MatrixXd> llt(arm.precision);
    if (llt.info() != Eigen::Success) {
        throw NumericalError("precision matrix is not positive-definite");
    }
    Eigen::VectorXd z(kStateDim);
    for (int k = 0; k < kStateDim; ++k) z(k) = rng.gaussian();
    return arm.mu + llt.matrixU().solve(z);
}

}  // namespace bandit_detail

// Samples both posteriors (factor arm first, for a fixed rng stream) and
// returns the arm with the larger sampled reward; exact ties go to factor.
inline ActionType bandit_choose(const BanditState& state, const Eigen::VectorXd& x, Rng& rng) {
    if (x.size() != kStateDim) throw InvalidParameter("state vector must have 8 entries");
    if (!x.allFinite()) throw InvalidParameter("state vector must be finite");
    const Eigen::VectorXd theta_factor = bandit_detail::sample_gaussian(state.factor_arm, rng);
    const Eigen::VectorXd theta_model = bandit_detail::sample_gaussian(state.model_arm, rng);
    const double reward_factor = theta_factor.dot(x);
    const double reward_model = theta_model.dot(x);
    return reward_model > reward_factor ? ActionType::model : ActionType::factor;
}

// Rank-1 Bayesian update of the chosen arm:
//   P <- P + x x^T / sigma^2
//   mu <- P_new^-1 (P_old mu + r x / sigma^2)
inline void bandit_update(BanditState& state, ActionType action, const Eigen::VectorXd& x,
                          double reward) {
    if (x.size() != kStateDim) throw InvalidParameter("state vector must have 8 entries");
    if (!x.allFinite() || !std::isfinite(reward)) {
        throw InvalidParameter("update inputs must be finite");
    }
    ArmPosterior& arm = state.arm(action);
    if (x.isZero(0.0)) return;  // no information: exact no-op
    const double inv_noise = 1.0 / (state.sigma * state.sigma);
    const Eigen::VectorXd rhs = arm.precision * arm.mu + inv_noise * reward * x;
    arm.precision += inv_noise * x * x.transpose();
    Eigen::LLT<Eigen::MatrixXd> llt(arm.precision);
    if (llt.info() != Eigen::Success) {
        throw NumericalError("updated precision is not positive-definite");
    }
    arm.mu = llt.solve(rhs);
}

// Weighted improvement of the new bundle over the incumbent (or the weighted
// level itself when delta_reward is off).
inline double reward_from_metrics(const MetricsBundle& fresh, const MetricsBundle& incumbent,
                                  const BanditState& state) {
    const Eigen::VectorXd x_new = state_vector(fresh);
    if (!state.delta_reward) return state.weights.dot(x_new);
    return state.weights.dot(x_new - state_vector(incumbent));
}

inline json arm_to_json(const ArmPosterior& arm) {
    std::vector<double> mu(arm.mu.data(), arm.mu.data() + arm.mu.size());
    std::vector<double> precision;
    precision.reserve(kStateDim * kStateDim);
    for (int r = 0; r < kStateDim; ++r) {
        for (int c = 0; c < kStateDim; ++c) precision.push_back(arm.precision(r, c));
    }
    return {{"mu", mu}, {"precision", precision}};
}

inline ArmPosterior arm_from_json(const json& j) {
    ArmPosterior arm;
    const auto mu = j.at("mu").get<std::vector<double>>();
    const auto precision = j.at("precision").get<std::vector<double>>();
    if (mu.size() != kStateDim || precision.size() != kStateDim * kStateDim) {
        throw ShapeMismatch("bad posterior dimensions");
    }
    arm.mu = Eigen::Map<const Eigen::VectorXd>(mu.data(), kStateDim);
    arm.precision.resize(kStateDim, kStateDim);
    for (int r = 0; r < kStateDim; ++r) {
        for (int c = 0; c < kStateDim; ++c) arm.precision(r, c) = precision[r * kStateDim + c];
    }
    return arm;
}

inline json bandit_to_json(const BanditState& state) {
    std::vector<double> w(state.weights.data(), state.weights.data() + state.weights.size());
    return {{"factor", arm_to_json(state.factor_arm)},
            {"model", arm_to_json(state.model_arm)},
            {"tau", state.tau},
            {"sigma", state.sigma},
            {"weights", w},
            {"delta_reward", state.delta_reward}};
}

inline BanditState bandit_from_json(const json& j) {
    BanditState state;
    state.factor_arm = arm_from_json(j.at("factor"));
    state.model_arm = arm_from_json(j.at("model"));
    state.tau = j.at("tau").get<double>();
    state.sigma = j.at("sigma").get<double>();
    const auto w = j.at("weights").get<std::vector<double>>();
    if (w.size() != kStateDim) throw ShapeMismatch("bad weight dimension");
    state.weights = Eigen::Map<const Eigen::VectorXd>(w.data(), kStateDim);
    state.delta_reward = j.at("delta_reward").get<bool>();
    return state;
}

}  // namespace quantloop
