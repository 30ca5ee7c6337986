#include "cbwsdid/pipeline.hpp"

#include "cbwsdid/error.hpp"

#include <algorithm>
#include <cmath>

namespace cbwsdid {

StackPlan build_plan(const PanelData& panel, const RunSpec& spec) {
    switch (spec.mode) {
        case FrameMode::Absorbing: return build_absorbing(panel, spec.window);
        case FrameMode::Episode01:
            return build_episodes(panel, spec.window, spec.lags, Direction::SwitchOn, spec.onset_only);
        case FrameMode::Episode10:
            return build_episodes(panel, spec.window, spec.lags, Direction::SwitchOff, spec.onset_only);
    }
    throw InputError("unknown mode");
}

EstimationRun run_estimation(const PanelData& panel, const RunSpec& spec) {
    EstimationRun run;
    run.plan = build_plan(panel, spec);
    // Episode10 frames are defined on the flipped treatment; outcomes are
    // unaffected, so the source panel serves the estimators.
    run.design = design_plan(panel, run.plan, spec.design);
    for (std::size_t f = 0; f < run.plan.frames.size(); ++f)
        if (run.plan.frames[f].treated.empty())
            throw EstimationError("frame " + run.plan.frames[f].label() + " lost all treated units");
    run.mass = effective_mass(run.plan, run.design);
    run.weights = corrective_weights(run.plan, run.design, run.mass);
    if (spec.uncorrected)
        for (auto& frame : run.weights.control) std::fill(frame.begin(), frame.end(), 1.0);

    run.direct = estimate_direct(run.plan, run.design, panel);
    const auto sample = stack_sample(run.plan, run.weights, panel);
    const auto regression = estimate_regression(sample, spec.cluster);

    run.result = run.direct;
    run.result.inference = regression.inference;
    if (spec.uncorrected) run.result.method = "stacked";
    for (std::size_t i = 0; i < run.result.estimates.size(); ++i) {
        auto& e = run.result.estimates[i];
        const auto& r = regression.estimates[i];
        run.route_gap = std::max(run.route_gap, std::abs(r.estimate - e.estimate));
        e = r;
    }

    if (spec.inference == Inference::Bootstrap) {
        const auto boot = cluster_bootstrap(run.plan, run.design, panel, spec.bootstrap);
        run.result.inference = "bootstrap-percentile";
        run.result.bootstrap_replicates = boot.replicates.size() + boot.dropped;
        run.result.bootstrap_dropped = boot.dropped;
        for (std::size_t j = 0; j < boot.event_times.size(); ++j) {
            auto& e = run.result.at(boot.event_times[j]);
            e.se = boot.se[j];
            e.ci_low = std::min(boot.ci_low[j], e.estimate);
            e.ci_high = std::max(boot.ci_high[j], e.estimate);
        }
    }
    return run;
}

}  // namespace cbwsdid
