#pragma once

#include "cbwsdid/design.hpp"
#include "cbwsdid/panel.hpp"
#include "cbwsdid/stacking.hpp"
#include "cbwsdid/stackweights.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace cbwsdid {

/// Two-sided 95% normal critical value.
inline constexpr double kZ95 = 1.959963984540054;

struct StackedRow {
    std::size_t frame = 0;
    std::size_t member = 0;  // (frame, unit) cell index, dense over the stack
    std::size_t unit = 0;    // panel unit index; the default cluster
    int event_time = 0;
    double y = 0;
    bool treated = false;
    double weight = 0;
};

/// Long stacked sample, rows ordered by (frame, member, event time).
struct StackedSample {
    FrameMode mode = FrameMode::Absorbing;
    std::vector<int> event_times;  // full window, including the reference -1
    std::size_t n_frames = 0;
    std::size_t n_members = 0;
    std::vector<StackedRow> rows;

    /// Event times carrying a coefficient (window minus the reference).
    std::vector<int> coefficient_times() const;
};

enum class ClusterLevel { Unit, FrameUnit };

struct EventEstimate {
    int event_time = 0;
    double estimate = 0;
    double se = std::numeric_limits<double>::quiet_NaN();
    double ci_low = std::numeric_limits<double>::quiet_NaN();
    double ci_high = std::numeric_limits<double>::quiet_NaN();
};

struct EventStudyResult {
    std::vector<EventEstimate> estimates;         // every window event time, -1 included
    std::vector<std::vector<double>> frame_did;   // [frame][event index]

    FrameMode mode = FrameMode::Absorbing;
    std::string method = "uniform";
    std::string inference = "none";
    std::string estimand = "aggregate";
    std::size_t n_treated = 0;
    double n_control_effective = 0;
    std::vector<std::string> frame_labels;
    std::vector<std::size_t> frame_treated;
    std::vector<std::size_t> frame_controls;
    std::vector<double> frame_mass;
    std::vector<std::string> dropped_frames;
    std::size_t bootstrap_replicates = 0;
    std::size_t bootstrap_dropped = 0;

    const EventEstimate& at(int event_time) const;
    EventEstimate& at(int event_time);
};

/// Share-weighted average of within-frame (b-weighted) DID contrasts. Point
/// estimates only.
EventStudyResult estimate_direct(const StackPlan& plan, const std::vector<DesignWeights>& b,
                                 const PanelData& panel);

StackedSample stack_sample(const StackPlan& plan, const FinalWeights& w, const PanelData& panel);

/// Weighted least squares after absorbing the (frame, unit) and (frame, e)
/// effects. `design` holds the absorbed event-time regressors of every row.
struct RegressionFit {
    std::vector<int> coefficient_times;
    Eigen::VectorXd beta;
    Eigen::MatrixXd design;
    Eigen::VectorXd residuals;
    std::size_t absorbed_dof = 0;  // rank of the absorbed fixed effects
    int sweeps = 0;
};

struct AbsorbOptions {
    double tolerance = 1e-10;
    int max_sweeps = 1000;
};

RegressionFit fit_stacked_regression(const StackedSample& sample, const AbsorbOptions& opts = {});

/// Sandwich variance clustered on units (or frame-unit pairs), with weights as
/// in WLS and factor G/(G-1) * (N-1)/(N-K), K = #beta + absorbed_dof.
Eigen::MatrixXd cluster_robust_vcov(const StackedSample& sample, const RegressionFit& fit,
                                    ClusterLevel level = ClusterLevel::Unit);

/// Coefficients plus analytic clustered standard errors and 95% intervals.
EventStudyResult estimate_regression(const StackedSample& sample,
                                     ClusterLevel level = ClusterLevel::Unit);

struct BootstrapOptions {
    int replicates = 999;
    std::uint64_t seed = 1;
    int threads = 1;
};

struct BootstrapResult {
    std::vector<int> event_times;                 // coefficient times
    std::vector<double> se;
    std::vector<double> ci_low;
    std::vector<double> ci_high;
    std::vector<std::vector<double>> replicates;  // kept replicates, each over coefficient times
    std::size_t dropped = 0;
};

/// Second-stage estimate on a resampled multiset of units, holding design
/// weights fixed. `multiplicity[u]` counts draws of panel unit u. nullopt when
/// some frame loses all treated units or all positive-mass controls.
std::optional<std::vector<double>> bootstrap_replicate(const StackPlan& plan,
                                                       const std::vector<DesignWeights>& b,
                                                       const PanelData& panel,
                                                       const std::vector<std::size_t>& multiplicity);

/// Cluster bootstrap conditional on design weights with percentile intervals.
/// Replicate r draws from a generator seeded by (seed, r), so results do not
/// depend on the thread count.
BootstrapResult cluster_bootstrap(const StackPlan& plan, const std::vector<DesignWeights>& b,
                                  const PanelData& panel, const BootstrapOptions& opts);

/// CSV: e, estimate, se, ci_low, ci_high, n_treated, n_control_effective.
void write_result_csv(std::ostream& out, const EventStudyResult& result);

nlohmann::json result_to_json(const EventStudyResult& result);

}  // namespace cbwsdid
