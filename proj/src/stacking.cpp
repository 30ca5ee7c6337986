#include "cbwsdid/stacking.hpp"

#include "cbwsdid/error.hpp"

#include <algorithm>
#include <map>

namespace cbwsdid {

namespace {

bool window_observed(const PanelData& panel, std::size_t unit, int anchor, const EventWindow& w) {
    for (int e = -w.pre; e <= w.post; ++e)
        if (!panel.outcome(unit, anchor + e)) return false;
    return true;
}

}  // namespace

std::string frame_label(const FrameKey& key, FrameMode mode) {
    if (mode == FrameMode::Absorbing) return "a=" + std::to_string(key.period);
    std::string h = key.history;
    if (mode == FrameMode::Episode10)
        for (auto& c : h) c = (c == '1') ? '0' : '1';
    return "tau=" + std::to_string(key.period) + "/h=" + h;
}

namespace {

[[noreturn]] void throw_empty_stack(const std::vector<DroppedFrame>& dropped, FrameMode mode) {
    std::vector<std::string> details;
    for (const auto& d : dropped) details.push_back(frame_label(d.key, mode) + ": " + d.reason);
    throw EstimationError("empty stack: no admissible frames", std::move(details));
}

// Splits candidates into complete members and logged exclusions.
void admit(const PanelData& panel, Frame& frame, const std::vector<std::size_t>& candidates,
           bool treated) {
    auto& members = treated ? frame.treated : frame.controls;
    for (auto u : candidates) {
        if (window_observed(panel, u, frame.anchor, frame.window)) {
            members.push_back(u);
        } else {
            frame.excluded.push_back({u, treated, "incomplete_window"});
            if (treated) frame.treated_trimmed = true;
        }
    }
}

}  // namespace

void EventWindow::validate() const {
    if (pre < 1) throw InputError("event window needs pre >= 1 so that e = -1 exists");
    if (post < 0) throw InputError("event window post length must be nonnegative");
}

std::vector<int> EventWindow::event_times() const {
    std::vector<int> out;
    for (int e = -pre; e <= post; ++e) out.push_back(e);
    return out;
}

std::string Frame::label() const { return frame_label(key, mode); }

std::string Frame::history_label() const {
    std::string h = key.history;
    if (mode == FrameMode::Episode10)
        for (auto& c : h) c = (c == '1') ? '0' : '1';
    return h;
}

std::size_t StackPlan::total_treated() const {
    std::size_t n = 0;
    for (const auto& f : frames) n += f.treated.size();
    return n;
}

std::size_t StackPlan::total_controls() const {
    std::size_t n = 0;
    for (const auto& f : frames) n += f.controls.size();
    return n;
}

bool StackPlan::any_trimmed() const {
    return std::any_of(frames.begin(), frames.end(), [](const Frame& f) { return f.treated_trimmed; });
}

StackPlan build_absorbing(const PanelData& panel, const EventWindow& window) {
    window.validate();
    const auto adoption = adoption_times(panel);

    std::vector<int> cohorts;
    for (int a : adoption)
        if (a != kNever) cohorts.push_back(a);
    std::sort(cohorts.begin(), cohorts.end());
    cohorts.erase(std::unique(cohorts.begin(), cohorts.end()), cohorts.end());

    StackPlan plan;
    plan.mode = FrameMode::Absorbing;
    plan.window = window;
    for (int a : cohorts) {
        const FrameKey key{a, {}};
        if (a - window.pre < panel.t_min() || a + window.post > panel.t_max()) {
            plan.dropped.push_back({key, "window_out_of_range"});
            continue;
        }
        Frame frame;
        frame.key = key;
        frame.mode = FrameMode::Absorbing;
        frame.anchor = a;
        frame.window = window;

        std::vector<std::size_t> treated, controls;
        for (std::size_t u = 0; u < panel.n_units(); ++u) {
            if (adoption[u] == a) treated.push_back(u);
            // kNever is INT_MAX, so never-treated units pass this test.
            else if (adoption[u] > a + window.post) controls.push_back(u);
        }
        admit(panel, frame, treated, true);
        admit(panel, frame, controls, false);

        if (frame.treated.empty()) {
            plan.dropped.push_back({key, "no_treated"});
        } else if (frame.controls.empty()) {
            plan.dropped.push_back({key, "no_controls"});
        } else {
            plan.frames.push_back(std::move(frame));
        }
    }
    if (plan.frames.empty()) throw_empty_stack(plan.dropped, plan.mode);
    return plan;
}

StackPlan build_episodes(const PanelData& source, const EventWindow& window, int lags,
                         Direction direction, bool onset_only) {
    window.validate();
    if (lags < 1) throw InputError("history length L must be at least 1");

    const bool flip = direction == Direction::SwitchOff;
    const PanelData flipped = flip ? source.with_flipped_treatment() : PanelData{};
    const PanelData& panel = flip ? flipped : source;

    StackPlan plan;
    plan.mode = flip ? FrameMode::Episode10 : FrameMode::Episode01;
    plan.window = window;
    plan.lags = lags;
    plan.onset_only = onset_only;

    const int first_tau = panel.t_min() + std::max(lags, window.pre);
    const int last_tau = panel.t_max() - window.post;
    for (int tau = first_tau; tau <= last_tau; ++tau) {
        struct Candidates {
            std::vector<std::size_t> treated, controls;
        };
        std::map<std::string, Candidates> by_history;

        for (std::size_t u = 0; u < panel.n_units(); ++u) {
            const auto h = treatment_history(panel, u, tau, lags);
            if (!h) continue;
            bool on_path = true;   // D = 1 over the post window (or at onset only)
            bool off_path = true;  // D = 0 over the post window
            for (int r = 0; r <= window.post; ++r) {
                const auto d = panel.treatment(u, tau + r);
                if (!d) {
                    if (r == 0 || !onset_only) on_path = false;
                    off_path = false;
                    continue;
                }
                if (*d != 1 && (r == 0 || !onset_only)) on_path = false;
                if (*d != 0) off_path = false;
            }
            auto& slot = by_history[to_bitstring(*h)];
            if (on_path && h->back() == 0) slot.treated.push_back(u);
            if (off_path) slot.controls.push_back(u);
        }

        for (const auto& [history, cand] : by_history) {
            if (cand.treated.empty()) continue;  // not a realized episode type
            const FrameKey key{tau, history};
            Frame frame;
            frame.key = key;
            frame.mode = plan.mode;
            frame.anchor = tau;
            frame.window = window;
            admit(panel, frame, cand.treated, true);
            admit(panel, frame, cand.controls, false);
            if (frame.treated.empty()) {
                plan.dropped.push_back({key, "no_treated"});
            } else if (frame.controls.empty()) {
                plan.dropped.push_back({key, "no_controls"});
            } else {
                plan.frames.push_back(std::move(frame));
            }
        }
    }
    if (plan.frames.empty()) throw_empty_stack(plan.dropped, plan.mode);
    return plan;
}

double long_difference(const PanelData& panel, const Frame& frame, std::size_t unit, int e) {
    if (e == -1) return 0.0;
    const auto now = panel.outcome(unit, frame.anchor + e);
    const auto ref = panel.outcome(unit, frame.anchor - 1);
    if (!now || !ref)
        throw EstimationError("missing outcome for unit " + panel.units().at(unit) + " in frame " +
                              frame.label() + " at e=" + std::to_string(e));
    return *now - *ref;
}

std::string to_string(FrameMode mode) {
    switch (mode) {
        case FrameMode::Absorbing: return "absorbing";
        case FrameMode::Episode01: return "episode01";
        case FrameMode::Episode10: return "episode10";
    }
    return "unknown";
}

nlohmann::json plan_to_json(const StackPlan& plan, const PanelData& panel) {
    using nlohmann::json;
    auto ids = [&](const std::vector<std::size_t>& members) {
        json arr = json::array();
        for (auto u : members) arr.push_back(panel.units().at(u));
        return arr;
    };
    json frames = json::array();
    for (const auto& f : plan.frames) {
        json excluded = json::array();
        for (const auto& x : f.excluded)
            excluded.push_back({{"unit", panel.units().at(x.unit)},
                                {"role", x.treated ? "treated" : "control"},
                                {"reason", x.reason}});
        json jf = {{"key", f.label()},     {"anchor", f.anchor},
                   {"treated", ids(f.treated)}, {"controls", ids(f.controls)},
                   {"n_treated", f.treated.size()}, {"n_controls", f.controls.size()},
                   {"treated_trimmed", f.treated_trimmed}, {"excluded", excluded}};
        if (plan.mode != FrameMode::Absorbing) {
            jf["tau"] = f.key.period;
            jf["history"] = f.history_label();
        }
        frames.push_back(std::move(jf));
    }
    json dropped = json::array();
    for (const auto& d : plan.dropped)
        dropped.push_back({{"key", frame_label(d.key, plan.mode)}, {"reason", d.reason}});
    json out = {{"mode", to_string(plan.mode)},
                {"window", {{"pre", plan.window.pre}, {"post", plan.window.post}}},
                {"total_treated", plan.total_treated()},
                {"total_controls", plan.total_controls()},
                {"frames", frames},
                {"dropped", dropped}};
    if (plan.mode != FrameMode::Absorbing) {
        out["lags"] = plan.lags;
        out["onset_only"] = plan.onset_only;
        out["treatment_flipped"] = plan.mode == FrameMode::Episode10;
    }
    return out;
}

}  // namespace cbwsdid
