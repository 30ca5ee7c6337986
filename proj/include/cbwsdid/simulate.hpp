#pragma once

#include "cbwsdid/design.hpp"
#include "cbwsdid/panel.hpp"
#include "cbwsdid/stacking.hpp"

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace cbwsdid {

/**
 * Absorbing-adoption data-generating process.
 *
 *   delta_s = slope_x1 * x1 + slope_x2 * x2 + eta_s,  eta_s ~ N(0, slope_sd^2)
 *   Y0[t]   = ar * Y0[t-1] + alpha_s + trend * t + load_x1 * x1 + load_x2 * x2
 *             + delta_s * (t - 1) + eps,             t = year - first_year + 1
 *   Y[t]    = Y0[t] + effect(t - A_s)
 *
 * Adoption cohorts are drawn from a softmax over
 * score_a = score_intercept[a] + score_slope[a] * (x1 + x2), with the
 * never-treated option scored 0. Laws of x1, x2, alpha and eps, the calendar
 * trend and the score constants are free choices exposed here.
 */
struct DgpParams {
    int units = 500;
    int first_year = 2000;
    int last_year = 2012;
    std::vector<int> cohorts{2004, 2005, 2006, 2007};

    double ar = 0.45;
    double slope_x1 = 0.07;
    double slope_x2 = 0.05;
    double slope_sd = 0.03;
    double load_x1 = 0.50;
    double load_x2 = 0.35;
    /// Effect at e = 0, 1, 2, ...; the last entry holds for later periods.
    std::vector<double> effects{-0.40, -0.80, -1.10};

    double x2_prob = 0.5;
    double alpha_sd = 0.5;
    double eps_sd = 0.2;
    double trend = 0.15;
    std::vector<double> score_intercept{-0.9, -0.9, -0.9, -0.9};
    std::vector<double> score_slope{1.2, 0.9, 0.6, 0.3};
    int burn_in = 20;

    /// No effects, no covariate-driven trends, assignment independent of covariates.
    static DgpParams null_config();

    double effect(int event_time) const;
    void validate() const;
};

/// Deterministic in (params, seed). Units are "1".."S"; covariates x1, x2.
PanelData simulate_panel(const DgpParams& params, std::uint64_t seed);

enum class McEstimator { Stacked, Weighted, Matching, Balancing };

std::string to_string(McEstimator e);
McEstimator parse_mc_estimator(const std::string& name);

struct McConfig {
    int reps = 500;
    std::uint64_t seed = 20240501;
    int threads = 1;
    EventWindow window{3, 2};
    std::vector<McEstimator> estimators{McEstimator::Matching, McEstimator::Balancing,
                                        McEstimator::Stacked, McEstimator::Weighted};
    /// Covariates and method options shared by the matching and balancing arms.
    DesignOptions design;

    /// Three outcome lags, x1, exact on x2; ratio 4 with replacement.
    static McConfig defaults();
};

struct McCell {
    McEstimator estimator = McEstimator::Stacked;
    int event_time = 0;
    double true_effect = 0;
    double mean_estimate = 0;
    double mean_bias = 0;
    double mc_se = 0;          // standard error of the mean estimate across reps
    double rejection_rate = 0; // share of reps whose 95% CI excludes the truth
    double coverage = 0;
    std::size_t reps = 0;
};

struct McResult {
    std::vector<McCell> cells;
    std::size_t reps_requested = 0;
    std::vector<std::size_t> failures;  // per estimator, in McConfig order

    const McCell& at(McEstimator estimator, int event_time) const;
};

McResult monte_carlo(const DgpParams& params, const McConfig& config);

/// Table layout: estimator, event time, true effect, mean estimate, bias, rejection rate.
void write_mc_csv(std::ostream& out, const McResult& result);

nlohmann::json dgp_to_json(const DgpParams& params);

/// Overrides fields of `base` from an object with dgp_to_json's keys; unknown
/// keys or wrong types raise InputError.
DgpParams dgp_from_json(const nlohmann::json& overrides, DgpParams base);

}  // namespace cbwsdid
