#include "cbwsdid/report.hpp"

#include "cbwsdid/textio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <ostream>
#include <string>

namespace cbwsdid {

namespace {

std::string fixed(double x, int digits = 2) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, x);
    return buf;
}

}  // namespace

double gini(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    double total = 0, ranked = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        total += values[i];
        ranked += static_cast<double>(i + 1) * values[i];
    }
    if (total <= 0) return 0.0;
    const double n = static_cast<double>(values.size());
    return 2.0 * ranked / (n * total) - (n + 1.0) / n;
}

WeightSummary summarize_control_weights(const FinalWeights& w) {
    std::vector<double> all;
    for (const auto& frame : w.control) all.insert(all.end(), frame.begin(), frame.end());
    WeightSummary s;
    s.n = all.size();
    if (all.empty()) return s;
    const auto [lo, hi] = std::minmax_element(all.begin(), all.end());
    s.min = *lo;
    s.max = *hi;
    s.gini = gini(std::move(all));
    return s;
}

void write_event_study_svg(std::ostream& out, const EventStudyResult& result) {
    constexpr double width = 640, height = 400;
    constexpr double left = 70, right = 20, top = 30, bottom = 50;
    const auto& est = result.estimates;

    double lo = 0, hi = 0;
    for (const auto& e : est) {
        for (double v : {e.estimate, e.ci_low, e.ci_high}) {
            if (!std::isfinite(v)) continue;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    const double pad = hi > lo ? 0.08 * (hi - lo) : 1.0;
    lo -= pad;
    hi += pad;

    const double plot_w = width - left - right, plot_h = height - top - bottom;
    const auto n = est.size();
    auto x_of = [&](std::size_t i) {
        return left + plot_w * (static_cast<double>(i) + 0.5) / static_cast<double>(std::max<std::size_t>(n, 1));
    };
    auto y_of = [&](double v) { return top + plot_h * (hi - v) / (hi - lo); };

    out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
        << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
        << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n"
        << "<text x=\"" << fixed(width / 2) << "\" y=\"18\" text-anchor=\"middle\">Event study ("
        << result.method << ", " << to_string(result.mode) << ")</text>\n";

    // Axes and the zero line.
    out << "<line class=\"axis\" x1=\"" << fixed(left) << "\" y1=\"" << fixed(top) << "\" x2=\"" << fixed(left)
        << "\" y2=\"" << fixed(top + plot_h) << "\" stroke=\"black\"/>\n"
        << "<line class=\"axis\" x1=\"" << fixed(left) << "\" y1=\"" << fixed(top + plot_h) << "\" x2=\""
        << fixed(left + plot_w) << "\" y2=\"" << fixed(top + plot_h) << "\" stroke=\"black\"/>\n"
        << "<line class=\"zero\" x1=\"" << fixed(left) << "\" y1=\"" << fixed(y_of(0)) << "\" x2=\""
        << fixed(left + plot_w) << "\" y2=\"" << fixed(y_of(0)) << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double v = lo + (hi - lo) * k / 4.0;
        out << "<text x=\"" << fixed(left - 6) << "\" y=\"" << fixed(y_of(v) + 4)
            << "\" text-anchor=\"end\">" << format_number(v, 3) << "</text>\n";
    }
    out << "<text x=\"" << fixed(left + plot_w / 2) << "\" y=\"" << fixed(height - 10)
        << "\" text-anchor=\"middle\">event time</text>\n";

    for (std::size_t i = 0; i < n; ++i) {
        const auto& e = est[i];
        const double x = x_of(i);
        out << "<text x=\"" << fixed(x) << "\" y=\"" << fixed(top + plot_h + 18) << "\" text-anchor=\"middle\">"
            << e.event_time << "</text>\n";
        if (e.event_time == -1) {
            out << "<circle class=\"reference\" cx=\"" << fixed(x) << "\" cy=\"" << fixed(y_of(0))
                << "\" r=\"5\" fill=\"white\" stroke=\"black\"><title>reference period</title></circle>\n";
            continue;
        }
        if (std::isfinite(e.ci_low) && std::isfinite(e.ci_high))
            out << "<line class=\"ci\" x1=\"" << fixed(x) << "\" y1=\"" << fixed(y_of(e.ci_low)) << "\" x2=\""
                << fixed(x) << "\" y2=\"" << fixed(y_of(e.ci_high)) << "\" stroke=\"steelblue\" stroke-width=\"2\"/>\n";
        out << "<circle class=\"estimate\" cx=\"" << fixed(x) << "\" cy=\"" << fixed(y_of(e.estimate))
            << "\" r=\"4\" fill=\"steelblue\"><title>e=" << e.event_time << ": " << format_number(e.estimate)
            << "</title></circle>\n";
    }
    out << "</svg>\n";
}

void write_diagnosis(std::ostream& out, const EstimationRun& run, const PanelData& panel) {
    const auto& plan = run.plan;
    out << "mode: " << to_string(plan.mode) << "\n"
        << "window: pre=" << plan.window.pre << " post=" << plan.window.post << "\n"
        << "method: " << run.result.method << "\n"
        << "estimand: " << run.result.estimand << "\n\n";

    out << "frames (" << plan.frames.size() << ")\n";
    out << std::left << std::setw(20) << "  key" << std::right << std::setw(10) << "treated" << std::setw(10)
        << "controls" << std::setw(14) << "mass" << std::setw(10) << "excluded" << "\n";
    for (std::size_t f = 0; f < plan.frames.size(); ++f) {
        const auto& fr = plan.frames[f];
        out << "  " << std::left << std::setw(18) << fr.label() << std::right << std::setw(10) << fr.treated.size()
            << std::setw(10) << fr.controls.size() << std::setw(14) << format_number(run.mass.per_frame[f], 6)
            << std::setw(10) << fr.excluded.size() << (fr.treated_trimmed ? "  trimmed" : "") << "\n";
    }
    out << "  total treated " << plan.total_treated() << ", effective control mass "
        << format_number(run.mass.total, 6) << "\n\n";

    out << "dropped frames (" << plan.dropped.size() << ")\n";
    for (const auto& d : plan.dropped) out << "  " << frame_label(d.key, plan.mode) << ": " << d.reason << "\n";
    out << "\n";

    for (std::size_t f = 0; f < run.design.size(); ++f) {
        const auto& dw = run.design[f];
        for (const auto& note : dw.notes) out << "note [" << plan.frames[f].label() << "]: " << note << "\n";
        for (auto u : dw.dropped_treated)
            out << "note [" << plan.frames[f].label() << "]: treated unit " << panel.units().at(u)
                << " dropped for missing design lags\n";
        if (dw.balance.empty()) continue;
        out << "balance [" << plan.frames[f].label() << "]\n";
        out << std::left << std::setw(20) << "  column" << std::right << std::setw(13) << "treated" << std::setw(13)
            << "control" << std::setw(13) << "weighted" << std::setw(11) << "smd_pre" << std::setw(11) << "smd_post"
            << "\n";
        for (const auto& row : dw.balance)
            out << "  " << std::left << std::setw(18) << row.column << std::right << std::setw(13)
                << format_number(row.treated_mean, 6) << std::setw(13) << format_number(row.control_mean, 6)
                << std::setw(13) << format_number(row.weighted_control_mean, 6) << std::setw(11)
                << format_number(row.smd_before, 3) << std::setw(11) << format_number(row.smd_after, 3)
                << (row.zero_variance_flag ? "  zero-variance" : "") << "\n";
        out << "\n";
    }

    const auto ws = summarize_control_weights(run.weights);
    out << "control weights W: n=" << ws.n << " min=" << format_number(ws.min, 6) << " max="
        << format_number(ws.max, 6) << " gini=" << format_number(ws.gini, 4) << "\n";
}

nlohmann::json run_to_json(const EstimationRun& run, const PanelData& panel) {
    auto out = result_to_json(run.result);
    nlohmann::json balance = nlohmann::json::array();
    for (std::size_t f = 0; f < run.design.size(); ++f) {
        nlohmann::json jb = {{"key", run.plan.frames[f].label()},
                             {"method", to_string(run.design[f].method)},
                             {"fallback", run.design[f].fallback},
                             {"notes", run.design[f].notes},
                             {"table", balance_to_json(run.design[f].balance)}};
        balance.push_back(std::move(jb));
    }
    const auto ws = summarize_control_weights(run.weights);
    out["balance"] = std::move(balance);
    out["control_weights"] = {{"n", ws.n}, {"min", ws.min}, {"max", ws.max}, {"gini", ws.gini}};
    out["plan"] = plan_to_json(run.plan, panel);
    return out;
}

}  // namespace cbwsdid
