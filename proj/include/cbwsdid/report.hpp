#pragma once

#include "cbwsdid/estimator.hpp"
#include "cbwsdid/panel.hpp"
#include "cbwsdid/pipeline.hpp"

#include <cstddef>
#include <iosfwd>

#include <json.hpp>

namespace cbwsdid {

/// Distribution of final weights W over all stacked control members.
struct WeightSummary {
    std::size_t n = 0;
    double min = 0;
    double max = 0;
    double gini = 0;
};

WeightSummary summarize_control_weights(const FinalWeights& w);

/// Gini coefficient of nonnegative values; 0 for an empty or all-zero input.
double gini(std::vector<double> values);

/// Static event-study chart: a marker and CI whisker per event time, a zero
/// line, and a hollow marker at the reference period.
void write_event_study_svg(std::ostream& out, const EventStudyResult& result);

/// Plain-text diagnosis: frame counts, dropped frames, balance tables and the
/// control weight summary.
void write_diagnosis(std::ostream& out, const EstimationRun& run, const PanelData& panel);

/// Result, plan and per-frame balance in one document.
nlohmann::json run_to_json(const EstimationRun& run, const PanelData& panel);

}  // namespace cbwsdid
