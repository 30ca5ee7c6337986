#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cbwsdid/error.hpp"
#include "cbwsdid/stacking.hpp"
#include "testkit.hpp"

#include <algorithm>
#include <random>

using namespace cbwsdid;

namespace {

std::vector<std::string> ids(const PanelData& p, const std::vector<std::size_t>& members) {
    std::vector<std::string> out;
    for (auto u : members) out.push_back(p.units()[u]);
    return out;
}

PanelData from_paths(const std::vector<std::pair<std::string, std::vector<int>>>& paths,
                     const std::vector<std::pair<std::string, int>>& missing = {}) {
    std::vector<PanelRecord> recs;
    for (const auto& [id, d] : paths)
        for (std::size_t t = 0; t < d.size(); ++t) {
            PanelRecord r;
            r.unit = id;
            r.time = static_cast<int>(t) + 1;
            r.treatment = d[t];
            r.outcome = static_cast<double>(t);
            for (const auto& [mid, mt] : missing)
                if (mid == id && mt == r.time) r.outcome.reset();
            recs.push_back(r);
        }
    return PanelData::from_records(recs, {});
}

}  // namespace

TEST_CASE("event window") {
    CHECK_THROWS_AS(EventWindow({0, 1}).validate(), InputError);
    CHECK_THROWS_AS(EventWindow({1, -1}).validate(), InputError);
    CHECK(EventWindow({2, 1}).event_times() == std::vector<int>{-2, -1, 0, 1});
}

TEST_CASE("OraclePanel-A cohorts") {
    const auto p = testkit::oracle_panel_a();
    const auto plan = build_absorbing(p, {2, 1});
    REQUIRE(plan.frames.size() == 2);
    CHECK(plan.frames[0].key.period == 4);
    CHECK(ids(p, plan.frames[0].treated) == std::vector<std::string>{"u1", "u2"});
    CHECK(ids(p, plan.frames[0].controls) == std::vector<std::string>{"u4", "u5", "u6"});
    CHECK(plan.frames[1].key.period == 5);
    CHECK(ids(p, plan.frames[1].treated) == std::vector<std::string>{"u3"});
    CHECK(ids(p, plan.frames[1].controls) == std::vector<std::string>{"u4", "u5", "u6"});
    CHECK(plan.total_treated() == 3);
    CHECK(plan.total_controls() == 6);
    CHECK(plan.dropped.empty());
    CHECK(plan.frames[0].label() == "a=4");
}

TEST_CASE("a window past the panel end drops the cohort") {
    const auto p = testkit::oracle_panel_a();
    const auto plan = build_absorbing(p, {2, 4});
    REQUIRE(plan.frames.size() == 1);
    CHECK(plan.frames[0].key.period == 4);
    REQUIRE(plan.dropped.size() == 1);
    CHECK(plan.dropped[0].key.period == 5);
    CHECK(plan.dropped[0].reason == "window_out_of_range");
}

TEST_CASE("no admissible frame raises an empty-stack error with reasons") {
    const auto p = from_paths({{"a", {0, 1, 1}}, {"b", {0, 1, 1}}});
    try {
        build_absorbing(p, {1, 1});
        FAIL("expected an error");
    } catch (const EstimationError& e) {
        CHECK(std::string(e.what()).find("empty stack") != std::string::npos);
        REQUIRE(e.details().size() == 1);
        CHECK(e.details()[0] == "a=2: no_controls");
    }
}

TEST_CASE("incomplete windows exclude members per frame and flag trimmed cohorts") {
    const auto p = from_paths({{"t1", {0, 0, 1, 1}}, {"t2", {0, 0, 1, 1}}, {"c1", {0, 0, 0, 0}}, {"c2", {0, 0, 0, 0}}},
                              {{"t2", 4}, {"c2", 1}});
    const auto plan = build_absorbing(p, {1, 1});
    REQUIRE(plan.frames.size() == 1);
    const auto& f = plan.frames[0];
    CHECK(ids(p, f.treated) == std::vector<std::string>{"t1"});
    CHECK(ids(p, f.controls) == std::vector<std::string>{"c1", "c2"});  // t=1 lies outside the window
    CHECK(f.treated_trimmed);
    REQUIRE(f.excluded.size() == 1);
    CHECK(f.excluded[0].reason == "incomplete_window");
    CHECK(plan.any_trimmed());
}

TEST_CASE("OraclePanel-B switch-on episodes") {
    const auto p = testkit::oracle_panel_b();
    const auto plan = build_episodes(p, {1, 1}, 2, Direction::SwitchOn);
    REQUIRE(plan.frames.size() == 1);
    const auto& f = plan.frames[0];
    CHECK(f.key.period == 3);
    CHECK(f.key.history == "00");
    CHECK(ids(p, f.treated) == std::vector<std::string>{"uA"});
    CHECK(ids(p, f.controls) == std::vector<std::string>{"uB", "uC"});
    CHECK(f.label() == "tau=3/h=00");
}

TEST_CASE("OraclePanel-B switch-off episodes") {
    SUBCASE("without a stable-on unit the type has no controls") {
        try {
            build_episodes(testkit::oracle_panel_b(), {1, 1}, 2, Direction::SwitchOff);
            FAIL("expected an error");
        } catch (const EstimationError& e) {
            REQUIRE(e.details().size() == 1);
            CHECK(e.details()[0] == "tau=5/h=11: no_controls");
        }
    }
    SUBCASE("a second unit staying on becomes the control") {
        const auto p = testkit::oracle_panel_b(true);
        const auto plan = build_episodes(p, {1, 1}, 2, Direction::SwitchOff);
        REQUIRE(plan.frames.size() == 1);
        const auto& f = plan.frames[0];
        CHECK(f.key.period == 5);
        CHECK(f.history_label() == "11");
        CHECK(f.mode == FrameMode::Episode10);
        CHECK(ids(p, f.treated) == std::vector<std::string>{"uA"});
        CHECK(ids(p, f.controls) == std::vector<std::string>{"uD"});
        CHECK(plan_to_json(plan, p)["treatment_flipped"] == true);
    }
}

TEST_CASE("onset-only relaxes the post-window requirement for treated episodes") {
    const auto p = from_paths({{"s", {0, 0, 1, 0, 0, 0}}, {"c", {0, 0, 0, 0, 0, 0}}});
    CHECK_THROWS_AS(build_episodes(p, {1, 1}, 1, Direction::SwitchOn), EstimationError);
    const auto plan = build_episodes(p, {1, 1}, 1, Direction::SwitchOn, true);
    REQUIRE(plan.frames.size() == 1);
    CHECK(plan.frames[0].key.period == 3);
    CHECK(plan.onset_only);
}

TEST_CASE("long differences") {
    const auto p = testkit::oracle_panel_a();
    const auto plan = build_absorbing(p, {2, 1});
    const auto& f = plan.frames[0];
    const auto u1 = *p.unit_index("u1");
    // y(u1, 5) - y(u1, 3) read straight from the fixture: 1.45 - 1.66.
    CHECK(long_difference(p, f, u1, 1) == doctest::Approx(1.45 - 1.66).epsilon(1e-15));
    CHECK(long_difference(p, f, u1, -1) == 0.0);
    CHECK(long_difference(p, f, u1, -2) == doctest::Approx(1.47 - 1.66).epsilon(1e-15));

    const auto gappy = from_paths({{"t", {0, 1, 1}}, {"c", {0, 0, 0}}}, {{"t", 3}});
    Frame bad;
    bad.key = {2, {}};
    bad.anchor = 2;
    bad.window = {1, 1};
    CHECK_THROWS_AS(long_difference(gappy, bad, *gappy.unit_index("t"), 1), EstimationError);
}

TEST_CASE("clean-control rule holds on random panels") {
    std::mt19937_64 rng(3);
    for (int rep = 0; rep < 20; ++rep) {
        const EventWindow w{2, 2};
        const auto p = testkit::random_absorbing_panel(rng, {40, 12, 4, 0.2, 0.05, false}, w);
        const auto a = adoption_times(p);
        const auto plan = build_absorbing(p, w);
        for (const auto& f : plan.frames) {
            for (auto c : f.controls) CHECK(a[c] > f.anchor + w.post);
            for (auto t : f.treated) CHECK(a[t] == f.anchor);
            for (auto u : f.treated) CHECK(std::find(f.controls.begin(), f.controls.end(), u) == f.controls.end());
        }
    }
}

TEST_CASE("episode members share the frame history; never-treated units only in all-zero histories") {
    std::mt19937_64 rng(4);
    for (int rep = 0; rep < 20; ++rep) {
        auto p = testkit::random_reversal_panel(rng, 15, 12, 0.3);
        const int lags = 1 + rep % 3;
        StackPlan plan;
        try {
            plan = build_episodes(p, {1, 1}, lags, Direction::SwitchOn);
        } catch (const EstimationError&) {
            continue;
        }
        for (const auto& f : plan.frames) {
            CHECK(f.key.history.back() == '0');
            for (const auto* group : {&f.treated, &f.controls})
                for (auto u : *group) {
                    CHECK(to_bitstring(*treatment_history(p, u, f.key.period, lags)) == f.key.history);
                    bool never = true;
                    for (int t = p.t_min(); t <= p.t_max(); ++t)
                        if (p.treatment(u, t) == 1) never = false;
                    if (never) CHECK(f.key.history.find('1') == std::string::npos);
                }
        }
    }
}

TEST_CASE("plans do not depend on input row order") {
    std::mt19937_64 rng(8);
    const auto p = testkit::random_reversal_panel(rng, 12, 10, 0.25);
    std::vector<PanelRecord> recs;
    for (std::size_t u = 0; u < p.n_units(); ++u)
        for (int t = p.t_min(); t <= p.t_max(); ++t) {
            PanelRecord r;
            r.unit = p.units()[u];
            r.time = t;
            r.outcome = p.outcome(u, t);
            r.treatment = *p.treatment(u, t);
            recs.push_back(r);
        }
    std::shuffle(recs.begin(), recs.end(), rng);
    const auto q = PanelData::from_records(recs, {});
    const auto a = build_episodes(p, {1, 1}, 2, Direction::SwitchOn);
    const auto b = build_episodes(q, {1, 1}, 2, Direction::SwitchOn);
    CHECK(testkit::episodes_of(a) == testkit::episodes_of(b));
}

TEST_CASE("episode plans match the brute-force enumerator") {
    std::mt19937_64 rng(21);
    int compared = 0;
    for (int rep = 0; rep < 15; ++rep) {
        const auto p = testkit::random_reversal_panel(rng, 10, 10, 0.3, 0.05);
        const int lags = 1 + rep % 3;
        const EventWindow w{1 + rep % 2, rep % 3};
        for (bool off : {false, true}) {
            for (bool onset : {false, true}) {
                const auto expected = testkit::brute_force_episodes(p, w, lags, off, onset);
                testkit::EpisodeMap got;
                try {
                    got = testkit::episodes_of(
                        build_episodes(p, w, lags, off ? Direction::SwitchOff : Direction::SwitchOn, onset));
                } catch (const EstimationError&) {
                }
                CHECK(got == expected);
                ++compared;
            }
        }
    }
    CHECK(compared == 60);
}

TEST_CASE("switch-off equals switch-on on the flipped panel") {
    std::mt19937_64 rng(22);
    for (int rep = 0; rep < 10; ++rep) {
        const auto p = testkit::random_reversal_panel(rng, 12, 10, 0.3);
        const auto flipped = p.with_flipped_treatment();
        testkit::EpisodeMap off, on;
        try {
            off = testkit::episodes_of(build_episodes(p, {1, 1}, 2, Direction::SwitchOff));
        } catch (const EstimationError&) {
        }
        try {
            on = testkit::episodes_of(build_episodes(flipped, {1, 1}, 2, Direction::SwitchOn));
        } catch (const EstimationError&) {
        }
        CHECK(off == on);
    }
}

TEST_CASE("plan JSON carries keys, members and drop reasons") {
    const auto p = testkit::oracle_panel_a();
    const auto j = plan_to_json(build_absorbing(p, {2, 4}), p);
    CHECK(j["mode"] == "absorbing");
    CHECK(j["frames"][0]["key"] == "a=4");
    CHECK(j["frames"][0]["treated"] == nlohmann::json{"u1", "u2"});
    CHECK(j["dropped"][0]["reason"] == "window_out_of_range");
    CHECK(j["total_treated"] == 2);
}
