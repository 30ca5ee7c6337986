#pragma once

#include "cbwsdid/design.hpp"
#include "cbwsdid/panel.hpp"
#include "cbwsdid/stacking.hpp"

#include <iosfwd>
#include <vector>

namespace cbwsdid {

/// Per-frame sum of control design weights, and their total.
struct EffectiveMass {
    std::vector<double> per_frame;
    double total = 0;
};

/// Final observation weights. Treated members always weigh 1; control
/// weights are aligned with Frame::controls.
struct FinalWeights {
    std::vector<std::vector<double>> control;

    static constexpr double treated() noexcept { return 1.0; }
};

/// Throws EstimationError when a frame's mass is not strictly positive and finite.
EffectiveMass effective_mass(const StackPlan& plan, const std::vector<DesignWeights>& b);

/// W = b * (N^D_a / N^D) / (Ntilde^C_a / Ntilde^C) for controls.
FinalWeights corrective_weights(const StackPlan& plan, const std::vector<DesignWeights>& b,
                                const EffectiveMass& mass);

/// Uniform design weights (b = 1) for every frame: the plain weighted stack.
std::vector<DesignWeights> uniform_design(const StackPlan& plan);

/// One line per member: frame, unit, role, b, W.
void write_weights_csv(std::ostream& out, const StackPlan& plan, const PanelData& panel,
                       const std::vector<DesignWeights>& b, const FinalWeights& w);

}  // namespace cbwsdid
