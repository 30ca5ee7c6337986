#include "cbwsdid/estimator.hpp"

#include "cbwsdid/error.hpp"
#include "cbwsdid/textio.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>
#include <thread>
#include <unordered_map>
#include <utility>

namespace cbwsdid {

namespace {

// Long differences of every frame member, computed once so bootstrap
// replicates only re-aggregate.
struct FrameCache {
    std::vector<std::size_t> treated;
    std::vector<std::size_t> controls;
    std::vector<double> b;
    Eigen::MatrixXd treated_ld;  // members x event times
    Eigen::MatrixXd control_ld;
};

std::vector<FrameCache> cache_frames(const StackPlan& plan, const std::vector<DesignWeights>& b,
                                     const PanelData& panel) {
    const auto times = plan.window.event_times();
    const auto ne = static_cast<Eigen::Index>(times.size());
    std::vector<FrameCache> out;
    out.reserve(plan.frames.size());
    for (std::size_t f = 0; f < plan.frames.size(); ++f) {
        const auto& frame = plan.frames[f];
        FrameCache c;
        c.treated = frame.treated;
        c.controls = frame.controls;
        c.b = b.at(f).b;
        c.treated_ld.resize(static_cast<Eigen::Index>(frame.treated.size()), ne);
        c.control_ld.resize(static_cast<Eigen::Index>(frame.controls.size()), ne);
        for (Eigen::Index e = 0; e < ne; ++e) {
            for (std::size_t i = 0; i < frame.treated.size(); ++i)
                c.treated_ld(static_cast<Eigen::Index>(i), e) =
                    long_difference(panel, frame, frame.treated[i], times[static_cast<std::size_t>(e)]);
            for (std::size_t i = 0; i < frame.controls.size(); ++i)
                c.control_ld(static_cast<Eigen::Index>(i), e) =
                    long_difference(panel, frame, frame.controls[i], times[static_cast<std::size_t>(e)]);
        }
        out.push_back(std::move(c));
    }
    return out;
}

// Share-weighted DID over event times with unit multiplicities (all ones for
// the point estimate). Returns nullopt when a frame has no treated draw or no
// positive control mass.
std::optional<Eigen::VectorXd> aggregate(const std::vector<FrameCache>& frames,
                                         const std::vector<std::size_t>* multiplicity,
                                         std::vector<Eigen::VectorXd>* frame_did) {
    auto count = [&](std::size_t u) {
        return multiplicity ? static_cast<double>((*multiplicity)[u]) : 1.0;
    };
    const Eigen::Index ne = frames.empty() ? 0 : frames.front().treated_ld.cols();
    Eigen::VectorXd total = Eigen::VectorXd::Zero(ne);
    double total_treated = 0;
    for (const auto& f : frames) {
        double nt = 0;
        Eigen::VectorXd treated_sum = Eigen::VectorXd::Zero(ne);
        for (std::size_t i = 0; i < f.treated.size(); ++i) {
            const double m = count(f.treated[i]);
            if (m == 0) continue;
            nt += m;
            treated_sum += m * f.treated_ld.row(static_cast<Eigen::Index>(i)).transpose();
        }
        double mass = 0;
        Eigen::VectorXd control_sum = Eigen::VectorXd::Zero(ne);
        for (std::size_t i = 0; i < f.controls.size(); ++i) {
            const double w = count(f.controls[i]) * f.b[i];
            if (w == 0) continue;
            mass += w;
            control_sum += w * f.control_ld.row(static_cast<Eigen::Index>(i)).transpose();
        }
        if (nt == 0 || !(mass > 0)) return std::nullopt;
        Eigen::VectorXd did = treated_sum / nt - control_sum / mass;
        total += nt * did;
        total_treated += nt;
        if (frame_did) frame_did->push_back(std::move(did));
    }
    return Eigen::VectorXd(total / total_treated);
}

double quantile(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    const double h = (static_cast<double>(v.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

nlohmann::json number(double x) {
    return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr);
}

}  // namespace

const EventEstimate& EventStudyResult::at(int event_time) const {
    for (const auto& e : estimates)
        if (e.event_time == event_time) return e;
    throw std::out_of_range("event time " + std::to_string(event_time) + " not in result");
}

EventEstimate& EventStudyResult::at(int event_time) {
    return const_cast<EventEstimate&>(std::as_const(*this).at(event_time));
}

std::vector<int> StackedSample::coefficient_times() const {
    std::vector<int> out;
    for (int e : event_times)
        if (e != -1) out.push_back(e);
    return out;
}

EventStudyResult estimate_direct(const StackPlan& plan, const std::vector<DesignWeights>& b,
                                 const PanelData& panel) {
    const auto mass = effective_mass(plan, b);
    const auto frames = cache_frames(plan, b, panel);
    std::vector<Eigen::VectorXd> frame_did;
    const auto est = aggregate(frames, nullptr, &frame_did);
    if (!est) throw EstimationError("a frame has no treated units or no positive control mass");

    EventStudyResult r;
    r.mode = plan.mode;
    r.method = b.empty() ? "uniform" : to_string(b.front().method);
    r.estimand = plan.any_trimmed() ? "trimmed" : "aggregate";
    r.n_treated = plan.total_treated();
    r.n_control_effective = mass.total;
    r.frame_mass = mass.per_frame;
    const auto times = plan.window.event_times();
    for (std::size_t i = 0; i < times.size(); ++i) {
        EventEstimate e;
        e.event_time = times[i];
        // The reference period is identically zero, not a computed difference.
        e.estimate = times[i] == -1 ? 0.0 : (*est)[static_cast<Eigen::Index>(i)];
        r.estimates.push_back(e);
    }
    for (std::size_t f = 0; f < plan.frames.size(); ++f) {
        r.frame_labels.push_back(plan.frames[f].label());
        r.frame_treated.push_back(plan.n_treated(f));
        r.frame_controls.push_back(plan.n_controls(f));
        r.frame_did.emplace_back(frame_did[f].data(), frame_did[f].data() + frame_did[f].size());
    }
    for (const auto& d : plan.dropped)
        r.dropped_frames.push_back(frame_label(d.key, plan.mode) + ": " + d.reason);
    return r;
}

StackedSample stack_sample(const StackPlan& plan, const FinalWeights& w, const PanelData& panel) {
    if (w.control.size() != plan.frames.size())
        throw EstimationError("final weights do not cover every frame");
    StackedSample s;
    s.mode = plan.mode;
    s.event_times = plan.window.event_times();
    s.n_frames = plan.frames.size();
    for (std::size_t f = 0; f < plan.frames.size(); ++f) {
        const auto& frame = plan.frames[f];
        auto add = [&](std::size_t unit, bool treated, double weight) {
            for (int e : s.event_times) {
                const auto y = panel.outcome(unit, frame.anchor + e);
                if (!y)
                    throw EstimationError("missing outcome for unit " + panel.units()[unit] +
                                          " in frame " + frame.label());
                s.rows.push_back({f, s.n_members, unit, e, *y, treated, weight});
            }
            ++s.n_members;
        };
        for (auto u : frame.treated) add(u, true, FinalWeights::treated());
        for (std::size_t i = 0; i < frame.controls.size(); ++i) add(frame.controls[i], false, w.control[f][i]);
    }
    return s;
}

RegressionFit fit_stacked_regression(const StackedSample& sample, const AbsorbOptions& opts) {
    if (sample.rows.empty()) throw EstimationError("stacked sample is empty");
    const auto coef_times = sample.coefficient_times();
    const auto n = static_cast<Eigen::Index>(sample.rows.size());
    const auto k = static_cast<Eigen::Index>(coef_times.size());
    const auto ne = sample.event_times.size();

    std::unordered_map<int, Eigen::Index> coef_col;
    for (Eigen::Index j = 0; j < k; ++j) coef_col[coef_times[static_cast<std::size_t>(j)]] = j;
    std::unordered_map<int, std::size_t> event_index;
    for (std::size_t i = 0; i < ne; ++i) event_index[sample.event_times[i]] = i;

    // Column 0 is the outcome, columns 1..k the D * 1{e = h} regressors.
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, k + 1);
    Eigen::VectorXd w(n);
    std::vector<std::size_t> member_cell(static_cast<std::size_t>(n));
    std::vector<std::size_t> time_cell(static_cast<std::size_t>(n));
    double total_weight = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = sample.rows[static_cast<std::size_t>(i)];
        if (!(r.weight >= 0.0) || !std::isfinite(r.weight))
            throw EstimationError("observation weights must be finite and nonnegative");
        m(i, 0) = r.y;
        if (r.treated && r.event_time != -1) m(i, 1 + coef_col.at(r.event_time)) = 1.0;
        w[i] = r.weight;
        total_weight += r.weight;
        member_cell[static_cast<std::size_t>(i)] = r.member;
        time_cell[static_cast<std::size_t>(i)] = r.frame * ne + event_index.at(r.event_time);
    }
    if (!(total_weight > 0)) throw EstimationError("all observation weights are zero");

    Eigen::VectorXd raw_ss(k);
    for (Eigen::Index j = 0; j < k; ++j) raw_ss[j] = (w.array() * m.col(j + 1).array().square()).sum();

    const std::size_t n_member_cells = sample.n_members;
    const std::size_t n_time_cells = sample.n_frames * ne;
    auto project = [&](const std::vector<std::size_t>& cell, std::size_t n_cells, std::size_t* positive) {
        std::vector<double> sw(n_cells, 0.0);
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_cells), m.cols());
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto c = static_cast<Eigen::Index>(cell[static_cast<std::size_t>(i)]);
            sw[static_cast<std::size_t>(c)] += w[i];
            sums.row(c) += w[i] * m.row(i);
        }
        double change = 0;
        std::size_t pos = 0;
        for (std::size_t c = 0; c < n_cells; ++c) {
            if (sw[c] > 0) {
                sums.row(static_cast<Eigen::Index>(c)) /= sw[c];
                change = std::max(change, sums.row(static_cast<Eigen::Index>(c)).cwiseAbs().maxCoeff());
                ++pos;
            } else {
                sums.row(static_cast<Eigen::Index>(c)).setZero();
            }
        }
        for (Eigen::Index i = 0; i < n; ++i)
            m.row(i) -= sums.row(static_cast<Eigen::Index>(cell[static_cast<std::size_t>(i)]));
        if (positive) *positive = pos;
        return change;
    };

    RegressionFit fit;
    fit.coefficient_times = coef_times;
    std::size_t pos_members = 0, pos_times = 0;
    bool converged = false;
    for (int sweep = 1; sweep <= opts.max_sweeps; ++sweep) {
        const double c1 = project(member_cell, n_member_cells, &pos_members);
        const double c2 = project(time_cell, n_time_cells, &pos_times);
        fit.sweeps = sweep;
        if (std::max(c1, c2) <= opts.tolerance) {
            converged = true;
            break;
        }
    }
    if (!converged)
        throw EstimationError("fixed-effect absorption did not converge in " +
                              std::to_string(opts.max_sweeps) + " sweeps");

    std::vector<bool> frame_has_weight(sample.n_frames, false);
    for (const auto& r : sample.rows)
        if (r.weight > 0) frame_has_weight[r.frame] = true;
    const auto active_frames =
        static_cast<std::size_t>(std::count(frame_has_weight.begin(), frame_has_weight.end(), true));
    fit.absorbed_dof = pos_members + pos_times - active_frames;

    fit.design = m.rightCols(k);
    const Eigen::VectorXd y = m.col(0);
    const Eigen::MatrixXd xtw = fit.design.transpose() * w.asDiagonal();
    const Eigen::MatrixXd a = xtw * fit.design;
    std::vector<std::string> collinear;
    for (Eigen::Index j = 0; j < k; ++j)
        if (!(a(j, j) > 1e-10 * raw_ss[j])) collinear.push_back("e=" + std::to_string(coef_times[static_cast<std::size_t>(j)]));
    if (!collinear.empty())
        throw EstimationError("event-time cells collinear with the fixed effects", std::move(collinear));

    const Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
    if (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-13)
        throw EstimationError("event-time regressors are jointly collinear");
    fit.beta = ldlt.solve(xtw * y);
    fit.residuals = y - fit.design * fit.beta;
    return fit;
}

Eigen::MatrixXd cluster_robust_vcov(const StackedSample& sample, const RegressionFit& fit,
                                    ClusterLevel level) {
    const auto k = fit.beta.size();
    std::unordered_map<std::size_t, Eigen::Index> cluster_of;
    std::vector<Eigen::VectorXd> scores;
    std::size_t n = 0;
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(k, k);
    for (std::size_t i = 0; i < sample.rows.size(); ++i) {
        const auto& r = sample.rows[i];
        if (!(r.weight > 0)) continue;
        ++n;
        const Eigen::VectorXd x = fit.design.row(static_cast<Eigen::Index>(i)).transpose();
        a += r.weight * x * x.transpose();
        const std::size_t id = level == ClusterLevel::Unit ? r.unit : r.member;
        auto [it, inserted] = cluster_of.try_emplace(id, static_cast<Eigen::Index>(scores.size()));
        if (inserted) scores.emplace_back(Eigen::VectorXd::Zero(k));
        scores[static_cast<std::size_t>(it->second)] += r.weight * fit.residuals[static_cast<Eigen::Index>(i)] * x;
    }
    const std::size_t g = scores.size();
    if (g < 2) throw EstimationError("cluster-robust variance needs at least two clusters");
    const std::size_t params = static_cast<std::size_t>(k) + fit.absorbed_dof;
    if (n <= params)
        throw EstimationError("too few weighted observations (" + std::to_string(n) + ") for " +
                              std::to_string(params) + " parameters");

    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(k, k);
    for (const auto& s : scores) meat += s * s.transpose();
    const Eigen::MatrixXd bread = a.ldlt().solve(Eigen::MatrixXd::Identity(k, k));
    const double gd = static_cast<double>(g);
    const double nd = static_cast<double>(n);
    const double factor = gd / (gd - 1.0) * (nd - 1.0) / (nd - static_cast<double>(params));
    return factor * bread * meat * bread;
}

EventStudyResult estimate_regression(const StackedSample& sample, ClusterLevel level) {
    const auto fit = fit_stacked_regression(sample);
    const auto vcov = cluster_robust_vcov(sample, fit, level);
    EventStudyResult r;
    r.mode = sample.mode;
    r.inference = level == ClusterLevel::Unit ? "cluster-unit" : "cluster-frame-unit";
    std::size_t j = 0;
    for (int e : sample.event_times) {
        EventEstimate est;
        est.event_time = e;
        if (e == -1) {
            est.estimate = est.se = est.ci_low = est.ci_high = 0.0;
        } else {
            const auto jj = static_cast<Eigen::Index>(j++);
            est.estimate = fit.beta[jj];
            est.se = std::sqrt(std::max(0.0, vcov(jj, jj)));
            est.ci_low = est.estimate - kZ95 * est.se;
            est.ci_high = est.estimate + kZ95 * est.se;
        }
        r.estimates.push_back(est);
    }
    for (const auto& row : sample.rows)
        if (row.treated && row.event_time == sample.event_times.front()) ++r.n_treated;
    return r;
}

std::optional<std::vector<double>> bootstrap_replicate(const StackPlan& plan,
                                                       const std::vector<DesignWeights>& b,
                                                       const PanelData& panel,
                                                       const std::vector<std::size_t>& multiplicity) {
    if (multiplicity.size() != panel.n_units())
        throw InputError("multiplicity vector must have one entry per panel unit");
    const auto frames = cache_frames(plan, b, panel);
    const auto est = aggregate(frames, &multiplicity, nullptr);
    if (!est) return std::nullopt;
    std::vector<double> out;
    const auto times = plan.window.event_times();
    for (std::size_t i = 0; i < times.size(); ++i)
        if (times[i] != -1) out.push_back((*est)[static_cast<Eigen::Index>(i)]);
    return out;
}

BootstrapResult cluster_bootstrap(const StackPlan& plan, const std::vector<DesignWeights>& b,
                                  const PanelData& panel, const BootstrapOptions& opts) {
    if (opts.replicates < 1) throw InputError("bootstrap needs at least one replicate");
    effective_mass(plan, b);  // validates alignment and mass
    const auto frames = cache_frames(plan, b, panel);
    const auto times = plan.window.event_times();
    const std::size_t n_units = panel.n_units();
    const auto reps = static_cast<std::size_t>(opts.replicates);

    std::vector<std::optional<Eigen::VectorXd>> draws(reps);
    auto run = [&](std::size_t worker, std::size_t n_workers) {
        std::vector<std::size_t> mult(n_units);
        for (std::size_t r = worker; r < reps; r += n_workers) {
            std::seed_seq seq{static_cast<std::uint32_t>(opts.seed & 0xffffffffu),
                              static_cast<std::uint32_t>(opts.seed >> 32),
                              static_cast<std::uint32_t>(r & 0xffffffffu),
                              static_cast<std::uint32_t>(r >> 32)};
            std::mt19937_64 gen(seq);
            std::uniform_int_distribution<std::size_t> pick(0, n_units - 1);
            std::fill(mult.begin(), mult.end(), 0);
            for (std::size_t i = 0; i < n_units; ++i) ++mult[pick(gen)];
            draws[r] = aggregate(frames, &mult, nullptr);
        }
    };
    const std::size_t n_workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(1, opts.threads)), 1, reps);
    if (n_workers == 1) {
        run(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(run, t, n_workers);
        for (auto& th : pool) th.join();
    }

    BootstrapResult out;
    for (std::size_t i = 0; i < times.size(); ++i)
        if (times[i] != -1) out.event_times.push_back(times[i]);
    for (auto& d : draws) {
        if (!d) {
            ++out.dropped;
            continue;
        }
        std::vector<double> rep;
        for (std::size_t i = 0; i < times.size(); ++i)
            if (times[i] != -1) rep.push_back((*d)[static_cast<Eigen::Index>(i)]);
        out.replicates.push_back(std::move(rep));
    }
    if (2 * out.dropped > reps)
        throw EstimationError("bootstrap dropped " + std::to_string(out.dropped) + " of " +
                              std::to_string(reps) +
                              " replicates (a frame lost all treated or control units); use a larger "
                              "panel or a narrower window");

    const std::size_t kept = out.replicates.size();
    for (std::size_t j = 0; j < out.event_times.size(); ++j) {
        std::vector<double> col(kept);
        double mean = 0;
        for (std::size_t r = 0; r < kept; ++r) mean += (col[r] = out.replicates[r][j]);
        mean /= static_cast<double>(kept);
        double ss = 0;
        for (double x : col) ss += (x - mean) * (x - mean);
        out.se.push_back(kept > 1 ? std::sqrt(ss / static_cast<double>(kept - 1)) : 0.0);
        out.ci_low.push_back(quantile(col, 0.025));
        out.ci_high.push_back(quantile(col, 0.975));
    }
    return out;
}

void write_result_csv(std::ostream& out, const EventStudyResult& r) {
    out << "e,estimate,se,ci_low,ci_high,n_treated,n_control_effective\n";
    for (const auto& e : r.estimates)
        out << e.event_time << ',' << format_number(e.estimate) << ',' << format_number(e.se) << ','
            << format_number(e.ci_low) << ',' << format_number(e.ci_high) << ',' << r.n_treated << ','
            << format_number(r.n_control_effective) << '\n';
}

nlohmann::json result_to_json(const EventStudyResult& r) {
    using nlohmann::json;
    json estimates = json::array();
    for (const auto& e : r.estimates)
        estimates.push_back({{"e", e.event_time},
                             {"estimate", number(e.estimate)},
                             {"se", number(e.se)},
                             {"ci_low", number(e.ci_low)},
                             {"ci_high", number(e.ci_high)}});
    json frames = json::array();
    for (std::size_t f = 0; f < r.frame_labels.size(); ++f) {
        json did = json::object();
        for (std::size_t i = 0; i < r.estimates.size() && f < r.frame_did.size(); ++i)
            did[std::to_string(r.estimates[i].event_time)] = number(r.frame_did[f][i]);
        frames.push_back({{"key", r.frame_labels[f]},
                          {"n_treated", r.frame_treated[f]},
                          {"n_controls", r.frame_controls[f]},
                          {"effective_mass", number(r.frame_mass[f])},
                          {"did", did}});
    }
    json out = {{"mode", to_string(r.mode)},
                {"method", r.method},
                {"inference", r.inference},
                {"estimand", r.estimand},
                {"n_treated", r.n_treated},
                {"n_control_effective", number(r.n_control_effective)},
                {"estimates", estimates},
                {"frames", frames},
                {"dropped_frames", r.dropped_frames}};
    if (r.bootstrap_replicates > 0) {
        out["bootstrap_replicates"] = r.bootstrap_replicates;
        out["bootstrap_dropped"] = r.bootstrap_dropped;
    }
    return out;
}

}  // namespace cbwsdid
