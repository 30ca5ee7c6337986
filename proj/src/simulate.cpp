#include "cbwsdid/simulate.hpp"

#include "cbwsdid/error.hpp"
#include "cbwsdid/pipeline.hpp"
#include "cbwsdid/textio.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <random>
#include <thread>

namespace cbwsdid {

namespace {

std::mt19937_64 seeded(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                      static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream & 0xffffffffu),
                      static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
}

RunSpec spec_for(McEstimator estimator, const McConfig& config) {
    RunSpec spec;
    spec.mode = FrameMode::Absorbing;
    spec.window = config.window;
    spec.design = config.design;
    switch (estimator) {
        case McEstimator::Stacked:
            spec.design.method = DesignMethod::Uniform;
            spec.uncorrected = true;
            break;
        case McEstimator::Weighted: spec.design.method = DesignMethod::Uniform; break;
        case McEstimator::Matching: spec.design.method = DesignMethod::NearestNeighbor; break;
        case McEstimator::Balancing: spec.design.method = DesignMethod::Entropy; break;
    }
    if (spec.design.method == DesignMethod::Uniform) spec.design.covariates = {};
    return spec;
}

}  // namespace

DgpParams DgpParams::null_config() {
    DgpParams p;
    p.effects = {0.0};
    p.slope_x1 = 0.0;
    p.slope_x2 = 0.0;
    std::fill(p.score_slope.begin(), p.score_slope.end(), 0.0);
    return p;
}

double DgpParams::effect(int event_time) const {
    if (event_time < 0 || effects.empty()) return 0.0;
    const auto i = std::min(static_cast<std::size_t>(event_time), effects.size() - 1);
    return effects[i];
}

void DgpParams::validate() const {
    if (units < 2) throw InputError("simulation needs at least two units");
    if (last_year <= first_year) throw InputError("simulation needs last_year > first_year");
    if (cohorts.empty()) throw InputError("simulation needs at least one adoption cohort");
    if (score_intercept.size() != cohorts.size() || score_slope.size() != cohorts.size())
        throw InputError("one score intercept and slope per cohort required");
    if (burn_in < 0) throw InputError("burn-in must be nonnegative");
    if (!(x2_prob >= 0 && x2_prob <= 1)) throw InputError("x2_prob must lie in [0,1]");
}

PanelData simulate_panel(const DgpParams& p, std::uint64_t seed) {
    p.validate();
    auto gen = seeded(seed, 0);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    std::vector<PanelRecord> records;
    records.reserve(static_cast<std::size_t>(p.units) *
                    static_cast<std::size_t>(p.last_year - p.first_year + 1));
    std::vector<double> prob(p.cohorts.size() + 1);
    for (int s = 1; s <= p.units; ++s) {
        const double x1 = normal(gen);
        const double x2 = unif(gen) < p.x2_prob ? 1.0 : 0.0;
        const double alpha = p.alpha_sd * normal(gen);
        const double delta = p.slope_x1 * x1 + p.slope_x2 * x2 + p.slope_sd * normal(gen);

        // Softmax over cohorts, never-treated last with score 0.
        double total = 1.0;
        for (std::size_t a = 0; a < p.cohorts.size(); ++a) {
            prob[a] = std::exp(p.score_intercept[a] + p.score_slope[a] * (x1 + x2));
            total += prob[a];
        }
        prob.back() = 1.0;
        const double u = unif(gen) * total;
        int adoption = kNever;
        double acc = 0;
        for (std::size_t a = 0; a < p.cohorts.size(); ++a) {
            acc += prob[a];
            if (u < acc) {
                adoption = p.cohorts[a];
                break;
            }
        }

        const double level = alpha + p.load_x1 * x1 + p.load_x2 * x2;
        double y0 = level / (1.0 - p.ar);
        for (int year = p.first_year - p.burn_in; year <= p.last_year; ++year) {
            const double t = static_cast<double>(year - p.first_year + 1);
            y0 = p.ar * y0 + level + p.trend * t + delta * (t - 1.0) + p.eps_sd * normal(gen);
            if (year < p.first_year) continue;
            const bool treated = adoption != kNever && year >= adoption;
            PanelRecord r;
            r.unit = std::to_string(s);
            r.time = year;
            r.treatment = treated ? 1 : 0;
            r.outcome = y0 + (treated ? p.effect(year - adoption) : 0.0);
            r.covariates = {x1, x2};
            records.push_back(std::move(r));
        }
    }
    return PanelData::from_records(std::move(records), {"x1", "x2"});
}

std::string to_string(McEstimator e) {
    switch (e) {
        case McEstimator::Stacked: return "sdid";
        case McEstimator::Weighted: return "wsdid";
        case McEstimator::Matching: return "cbwsdid-matching";
        case McEstimator::Balancing: return "cbwsdid-weighting";
    }
    return "unknown";
}

McEstimator parse_mc_estimator(const std::string& name) {
    if (name == "sdid" || name == "stacked") return McEstimator::Stacked;
    if (name == "wsdid" || name == "weighted") return McEstimator::Weighted;
    if (name == "match" || name == "matching" || name == "cbwsdid-matching") return McEstimator::Matching;
    if (name == "ebalance" || name == "weighting" || name == "cbwsdid-weighting") return McEstimator::Balancing;
    throw InputError("unknown estimator '" + name + "'", {name});
}

McConfig McConfig::defaults() {
    McConfig c;
    c.design.covariates.outcome_lags = {1, 2, 3};
    c.design.covariates.covariate_lags = {{"x1", {1}}};
    c.design.covariates.exact = {"x2"};
    c.design.match.ratio = 4;
    c.design.match.replacement = true;
    c.design.match.distance = Distance::Mahalanobis;
    return c;
}

const McCell& McResult::at(McEstimator estimator, int event_time) const {
    for (const auto& c : cells)
        if (c.estimator == estimator && c.event_time == event_time) return c;
    throw std::out_of_range("no Monte Carlo cell for " + to_string(estimator) + " at e=" +
                            std::to_string(event_time));
}

McResult monte_carlo(const DgpParams& params, const McConfig& config) {
    params.validate();
    config.window.validate();
    if (config.reps < 1) throw InputError("Monte Carlo needs at least one replicate");

    const auto reps = static_cast<std::size_t>(config.reps);
    const auto n_est = config.estimators.size();
    const auto times = config.window.event_times();

    struct Draw {
        std::vector<double> estimate;
        std::vector<double> se;
    };
    // draws[r][k]: replicate r, estimator k; nullopt on estimation failure.
    std::vector<std::vector<std::optional<Draw>>> draws(reps, std::vector<std::optional<Draw>>(n_est));

    auto run = [&](std::size_t worker, std::size_t n_workers) {
        for (std::size_t r = worker; r < reps; r += n_workers) {
            auto seeder = seeded(config.seed, r + 1);
            const auto panel = simulate_panel(params, seeder());
            for (std::size_t k = 0; k < n_est; ++k) {
                try {
                    const auto est = run_estimation(panel, spec_for(config.estimators[k], config));
                    Draw d;
                    for (const auto& e : est.result.estimates) {
                        d.estimate.push_back(e.estimate);
                        d.se.push_back(e.se);
                    }
                    draws[r][k] = std::move(d);
                } catch (const Error&) {
                    // recorded as a failure below
                }
            }
        }
    };
    const std::size_t n_workers = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::max(1, config.threads)), 1, reps);
    if (n_workers == 1) {
        run(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(run, t, n_workers);
        for (auto& th : pool) th.join();
    }

    McResult out;
    out.reps_requested = reps;
    out.failures.assign(n_est, 0);
    for (std::size_t k = 0; k < n_est; ++k) {
        for (std::size_t r = 0; r < reps; ++r)
            if (!draws[r][k]) ++out.failures[k];
        for (std::size_t i = 0; i < times.size(); ++i) {
            McCell cell;
            cell.estimator = config.estimators[k];
            cell.event_time = times[i];
            cell.true_effect = params.effect(times[i]);
            double sum = 0, sumsq = 0, rejected = 0;
            for (std::size_t r = 0; r < reps; ++r) {
                if (!draws[r][k]) continue;
                const double b = draws[r][k]->estimate[i];
                const double se = draws[r][k]->se[i];
                sum += b;
                sumsq += b * b;
                ++cell.reps;
                if (times[i] != -1 && std::abs(b - cell.true_effect) > kZ95 * se) rejected += 1;
            }
            if (cell.reps > 0) {
                const double n = static_cast<double>(cell.reps);
                cell.mean_estimate = sum / n;
                cell.mean_bias = cell.mean_estimate - cell.true_effect;
                const double var = cell.reps > 1 ? std::max(0.0, (sumsq - n * cell.mean_estimate * cell.mean_estimate) / (n - 1)) : 0.0;
                cell.mc_se = std::sqrt(var / n);
                cell.rejection_rate = rejected / n;
                cell.coverage = times[i] == -1 ? 1.0 : 1.0 - cell.rejection_rate;
            }
            out.cells.push_back(cell);
        }
    }
    return out;
}

void write_mc_csv(std::ostream& out, const McResult& result) {
    out << "estimator,event_time,true_effect,mean_estimate,mean_bias,mc_se,rejection_rate,reps\n";
    for (const auto& c : result.cells) {
        if (c.event_time == -1) continue;
        out << to_string(c.estimator) << ',' << c.event_time << ',' << format_number(c.true_effect) << ','
            << format_number(c.mean_estimate) << ',' << format_number(c.mean_bias) << ','
            << format_number(c.mc_se) << ',' << format_number(c.rejection_rate) << ',' << c.reps << '\n';
    }
}

nlohmann::json dgp_to_json(const DgpParams& p) {
    return {{"units", p.units},
            {"first_year", p.first_year},
            {"last_year", p.last_year},
            {"cohorts", p.cohorts},
            {"ar", p.ar},
            {"slope_x1", p.slope_x1},
            {"slope_x2", p.slope_x2},
            {"slope_sd", p.slope_sd},
            {"load_x1", p.load_x1},
            {"load_x2", p.load_x2},
            {"effects", p.effects},
            {"x1_law", "normal(0,1)"},
            {"x2_prob", p.x2_prob},
            {"alpha_sd", p.alpha_sd},
            {"eps_sd", p.eps_sd},
            {"trend", p.trend},
            {"score_intercept", p.score_intercept},
            {"score_slope", p.score_slope},
            {"burn_in", p.burn_in}};
}

DgpParams dgp_from_json(const nlohmann::json& j, DgpParams p) {
    if (!j.is_object()) throw InputError("dgp overrides must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "units") p.units = value.get<int>();
            else if (key == "first_year") p.first_year = value.get<int>();
            else if (key == "last_year") p.last_year = value.get<int>();
            else if (key == "cohorts") p.cohorts = value.get<std::vector<int>>();
            else if (key == "ar") p.ar = value.get<double>();
            else if (key == "slope_x1") p.slope_x1 = value.get<double>();
            else if (key == "slope_x2") p.slope_x2 = value.get<double>();
            else if (key == "slope_sd") p.slope_sd = value.get<double>();
            else if (key == "load_x1") p.load_x1 = value.get<double>();
            else if (key == "load_x2") p.load_x2 = value.get<double>();
            else if (key == "effects") p.effects = value.get<std::vector<double>>();
            else if (key == "x2_prob") p.x2_prob = value.get<double>();
            else if (key == "alpha_sd") p.alpha_sd = value.get<double>();
            else if (key == "eps_sd") p.eps_sd = value.get<double>();
            else if (key == "trend") p.trend = value.get<double>();
            else if (key == "score_intercept") p.score_intercept = value.get<std::vector<double>>();
            else if (key == "score_slope") p.score_slope = value.get<std::vector<double>>();
            else if (key == "burn_in") p.burn_in = value.get<int>();
            else if (key == "x1_law") continue;
            else throw InputError("unknown dgp parameter '" + key + "'", {key});
        } catch (const nlohmann::json::exception&) {
            throw InputError("dgp parameter '" + key + "' has the wrong type", {key});
        }
    }
    p.validate();
    return p;
}

}  // namespace cbwsdid
