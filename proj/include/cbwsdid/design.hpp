#pragma once

#include "cbwsdid/panel.hpp"
#include "cbwsdid/stacking.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace cbwsdid {

/// Name used for the outcome in CovariateSpec::log_transform.
inline constexpr const char* kOutcomeName = "outcome";

/// Pre-treatment characteristics. A lag l reads the value at anchor - l, so
/// every lag must be >= 1.
struct CovariateSpec {
    std::vector<int> outcome_lags;
    std::vector<std::pair<std::string, std::vector<int>>> covariate_lags;
    /// Exact-agreement covariates, read at anchor - 1.
    std::vector<std::string> exact;
    /// Variables (covariate names or kOutcomeName) entered as log(x).
    std::set<std::string> log_transform;
    /// When false, treated members lacking a lag are dropped (changing the
    /// estimand) instead of raising.
    bool treated_missing_is_error = true;

    bool empty() const noexcept { return outcome_lags.empty() && covariate_lags.empty(); }
};

struct DesignMatrix {
    FrameKey key;
    std::vector<std::string> columns;
    std::vector<std::size_t> units;   // panel unit index per row
    std::vector<bool> treated;        // per row
    std::vector<std::string> stratum; // exact-match label per row ("" without exact vars)
    Eigen::MatrixXd values;           // rows x columns
    std::vector<Exclusion> excluded;

    std::size_t rows() const noexcept { return units.size(); }
    std::size_t n_treated() const;
    std::size_t n_controls() const;
};

enum class DesignMethod { Uniform, NearestNeighbor, Entropy };

struct BalanceRow {
    std::string column;
    double treated_mean = 0;
    double control_mean = 0;
    double weighted_control_mean = 0;
    double treated_sd = 0;
    double smd_before = 0;
    double smd_after = 0;
    /// Treated sd is zero and the means differ; SMDs then hold raw differences.
    bool zero_variance_flag = false;
};

using BalanceTable = std::vector<BalanceRow>;

/// Control design weights for one frame, aligned with Frame::controls.
/// Controls absent from the design matrix carry b = 0.
struct DesignWeights {
    FrameKey key;
    DesignMethod method = DesignMethod::Uniform;
    std::vector<std::size_t> controls;
    std::vector<double> b;
    BalanceTable balance;
    /// Treated units removed under the lenient missing-lag policy.
    std::vector<std::size_t> dropped_treated;
    bool fallback = false;
    std::vector<std::string> notes;

    double mass() const;
};

enum class Distance { Mahalanobis, RankMahalanobis };

struct MatchOptions {
    int ratio = 1;
    bool replacement = true;
    Distance distance = Distance::Mahalanobis;
    std::optional<double> caliper;
    double ridge = 1e-8;
};

enum class OnFailure { Error, FallbackUniform };

struct BalanceOptions {
    double tolerance = 1e-8;
    int max_iter = 200;
    OnFailure on_failure = OnFailure::Error;
};

DesignMatrix build_design_matrix(const PanelData& panel, const Frame& frame,
                                 const CovariateSpec& spec);

/// b_s = 1 for every control in the matrix.
std::vector<double> uniform_weights(const DesignMatrix& dm);

/// Counts of how often each control row is selected, indexed by row of `dm`
/// (treated rows carry 0).
std::vector<double> nn_match(const DesignMatrix& dm, const MatchOptions& opts);

struct EntropyResult {
    std::vector<double> weights;  // indexed by row of `dm`, treated rows 0
    bool converged = true;
    double max_violation = 0;     // standardized, worst stratum
    std::string worst_column;
    int iterations = 0;
};

/// Exponential-tilting control weights matching treated first moments within
/// each exact stratum. Does not throw on non-convergence; see design_frame.
EntropyResult entropy_balance(const DesignMatrix& dm, const BalanceOptions& opts);

/// `weights` indexed by row of dm.
BalanceTable balance_table(const DesignMatrix& dm, const std::vector<double>& weights);

struct DesignOptions {
    DesignMethod method = DesignMethod::Uniform;
    CovariateSpec covariates;
    MatchOptions match;
    BalanceOptions balance;
};

/// Full per-frame design stage: matrix, weights, diagnostics.
DesignWeights design_frame(const PanelData& panel, const Frame& frame, const DesignOptions& opts);

/// Runs design_frame for every frame. Treated units dropped under the lenient
/// policy are removed from `plan` (and the frame flagged as trimmed).
std::vector<DesignWeights> design_plan(const PanelData& panel, StackPlan& plan,
                                       const DesignOptions& opts);

nlohmann::json balance_to_json(const BalanceTable& table);

std::string to_string(DesignMethod method);

}  // namespace cbwsdid
