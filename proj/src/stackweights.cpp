#include "cbwsdid/stackweights.hpp"

#include "cbwsdid/error.hpp"
#include "cbwsdid/textio.hpp"

#include <cmath>
#include <ostream>

namespace cbwsdid {

namespace {

void check_alignment(const StackPlan& plan, const std::vector<DesignWeights>& b) {
    if (b.size() != plan.frames.size())
        throw EstimationError("design weights do not cover every frame");
    for (std::size_t f = 0; f < b.size(); ++f)
        if (b[f].b.size() != plan.frames[f].controls.size() || b[f].key != plan.frames[f].key)
            throw EstimationError("design weights misaligned with frame " + plan.frames[f].label());
}

}  // namespace

EffectiveMass effective_mass(const StackPlan& plan, const std::vector<DesignWeights>& b) {
    check_alignment(plan, b);
    EffectiveMass m;
    std::vector<std::string> degenerate;
    for (std::size_t f = 0; f < b.size(); ++f) {
        double s = 0;
        for (double x : b[f].b) {
            if (!(x >= 0.0)) throw EstimationError("negative or undefined design weight in frame " +
                                                   plan.frames[f].label());
            s += x;
        }
        if (!(s > 0.0) || !std::isfinite(s)) degenerate.push_back(plan.frames[f].label());
        m.per_frame.push_back(s);
        m.total += s;
    }
    if (!degenerate.empty())
        throw EstimationError("effective control mass must be positive and finite", std::move(degenerate));
    return m;
}

FinalWeights corrective_weights(const StackPlan& plan, const std::vector<DesignWeights>& b,
                                const EffectiveMass& mass) {
    check_alignment(plan, b);
    const double total_treated = static_cast<double>(plan.total_treated());
    FinalWeights w;
    w.control.resize(plan.frames.size());
    for (std::size_t f = 0; f < plan.frames.size(); ++f) {
        const double treated_share = static_cast<double>(plan.n_treated(f)) / total_treated;
        const double control_share = mass.per_frame[f] / mass.total;
        const double factor = treated_share / control_share;
        for (double x : b[f].b) w.control[f].push_back(x * factor);
    }
    return w;
}

std::vector<DesignWeights> uniform_design(const StackPlan& plan) {
    std::vector<DesignWeights> out;
    for (const auto& f : plan.frames) {
        DesignWeights d;
        d.key = f.key;
        d.method = DesignMethod::Uniform;
        d.controls = f.controls;
        d.b.assign(f.controls.size(), 1.0);
        out.push_back(std::move(d));
    }
    return out;
}

void write_weights_csv(std::ostream& out, const StackPlan& plan, const PanelData& panel,
                       const std::vector<DesignWeights>& b, const FinalWeights& w) {
    out << "frame,unit,role,b,W\n";
    for (std::size_t f = 0; f < plan.frames.size(); ++f) {
        const auto& frame = plan.frames[f];
        for (auto u : frame.treated)
            out << frame.label() << ',' << panel.units()[u] << ",treated,1,1\n";
        for (std::size_t i = 0; i < frame.controls.size(); ++i)
            out << frame.label() << ',' << panel.units()[frame.controls[i]] << ",control,"
                << format_number(b[f].b[i], 12) << ',' << format_number(w.control[f][i], 12) << '\n';
    }
}

}  // namespace cbwsdid
