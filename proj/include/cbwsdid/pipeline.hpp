#pragma once

#include "cbwsdid/design.hpp"
#include "cbwsdid/estimator.hpp"
#include "cbwsdid/panel.hpp"
#include "cbwsdid/stacking.hpp"
#include "cbwsdid/stackweights.hpp"

#include <vector>

namespace cbwsdid {

enum class Inference { Analytic, Bootstrap };

/// Everything needed to go from a panel to an event study.
struct RunSpec {
    FrameMode mode = FrameMode::Absorbing;
    EventWindow window{3, 2};
    int lags = 1;             // episode modes only
    bool onset_only = false;  // episode modes only
    DesignOptions design;
    Inference inference = Inference::Analytic;
    ClusterLevel cluster = ClusterLevel::Unit;
    BootstrapOptions bootstrap;
    /// Control weights forced to 1 (the uncorrected stacked regression).
    bool uncorrected = false;
};

struct EstimationRun {
    StackPlan plan;
    std::vector<DesignWeights> design;
    EffectiveMass mass;
    FinalWeights weights;
    EventStudyResult direct;  // point estimates from within-frame contrasts
    EventStudyResult result;  // regression estimates with inference and metadata
    /// max_e |regression - direct|; zero up to rounding for corrected weights.
    double route_gap = 0;
};

StackPlan build_plan(const PanelData& panel, const RunSpec& spec);

EstimationRun run_estimation(const PanelData& panel, const RunSpec& spec);

}  // namespace cbwsdid
