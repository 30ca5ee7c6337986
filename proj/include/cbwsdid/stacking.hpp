#pragma once

#include "cbwsdid/panel.hpp"

#include <compare>
#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

namespace cbwsdid {

/// Event times run from -pre to post; e = -1 is the reference period.
struct EventWindow {
    int pre = 1;
    int post = 0;

    void validate() const;
    int size() const noexcept { return pre + post + 1; }
    std::vector<int> event_times() const;
};

enum class FrameMode { Absorbing, Episode01, Episode10 };

enum class Direction { SwitchOn, SwitchOff };

/// Cohort a (history empty) or episode type (tau, h). Ordered by period, then
/// by history bitstring.
struct FrameKey {
    int period = 0;
    std::string history;

    auto operator<=>(const FrameKey&) const = default;
};

struct Exclusion {
    std::size_t unit = 0;
    bool treated = false;
    std::string reason;
};

/**
 * One subexperiment (absorbing) or episode type. Members are unit indices
 * into the panel, ascending. For episode modes `key.history` is expressed in
 * the coding used for enumeration, which for Episode10 is the flipped
 * treatment; history_label() renders it in the original coding.
 */
struct Frame {
    FrameKey key;
    FrameMode mode = FrameMode::Absorbing;
    int anchor = 0;
    EventWindow window;
    std::vector<std::size_t> treated;
    std::vector<std::size_t> controls;
    std::vector<Exclusion> excluded;
    bool treated_trimmed = false;

    std::string label() const;
    std::string history_label() const;
};

struct DroppedFrame {
    FrameKey key;
    std::string reason;  // machine-readable: window_out_of_range, no_treated, no_controls
};

struct StackPlan {
    FrameMode mode = FrameMode::Absorbing;
    EventWindow window;
    int lags = 0;
    bool onset_only = false;
    std::vector<Frame> frames;
    std::vector<DroppedFrame> dropped;

    std::size_t n_treated(std::size_t frame) const { return frames.at(frame).treated.size(); }
    std::size_t n_controls(std::size_t frame) const { return frames.at(frame).controls.size(); }
    std::size_t total_treated() const;
    std::size_t total_controls() const;
    bool any_trimmed() const;
};

/// One frame per admissible adoption cohort, clean controls A_s > a + post.
/// Throws EstimationError("empty stack") when nothing is admissible.
StackPlan build_absorbing(const PanelData& panel, const EventWindow& window);

/// One frame per realized (tau, h) with at least one treated and one stable
/// control episode. SwitchOff enumerates on the flipped treatment.
StackPlan build_episodes(const PanelData& panel, const EventWindow& window, int lags,
                         Direction direction, bool onset_only = false);

/// Y[anchor + e] - Y[anchor - 1]; exactly 0 at e = -1.
double long_difference(const PanelData& panel, const Frame& frame, std::size_t unit, int e);

nlohmann::json plan_to_json(const StackPlan& plan, const PanelData& panel);

std::string to_string(FrameMode mode);

/// "a=2004" or "tau=5/h=11" (history in the original treatment coding).
std::string frame_label(const FrameKey& key, FrameMode mode);

}  // namespace cbwsdid
