#include "cbwsdid/design.hpp"

#include "cbwsdid/error.hpp"
#include "cbwsdid/textio.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace cbwsdid {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_lags(const std::vector<int>& lags, const std::string& name) {
    for (int l : lags)
        if (l < 1)
            throw InputError("lag " + std::to_string(l) + " of '" + name +
                             "' is not before the anchor; design lags must be >= 1");
}

std::optional<double> transformed(std::optional<double> x, bool log) {
    if (!x || !log) return x;
    if (*x <= 0.0) return std::nullopt;
    return std::log(*x);
}

// Row indices of the matrix grouped by exact stratum, in row order.
std::map<std::string, std::vector<std::size_t>> strata_of(const DesignMatrix& dm) {
    std::map<std::string, std::vector<std::size_t>> out;
    for (std::size_t r = 0; r < dm.rows(); ++r) out[dm.stratum[r]].push_back(r);
    return out;
}

// Squared distances rounded to 36 mantissa bits, so values equal up to
// rounding noise (common with ranks) compare as ties.
double tie_rounded(double d2) {
    if (!(d2 > 0.0) || !std::isfinite(d2)) return d2;
    int exp = 0;
    const double m = std::frexp(d2, &exp);
    return std::ldexp(std::nearbyint(std::ldexp(m, 36)), exp - 36);
}

std::vector<double> midranks(const Eigen::VectorXd& x) {
    const auto n = static_cast<std::size_t>(x.size());
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> rank(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
        const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
        i = j + 1;
    }
    return rank;
}

// Rows mapped into a space where Euclidean distance is the Mahalanobis
// distance under the pooled covariance (plus ridge on the diagonal).
Eigen::MatrixXd whitened_rows(const DesignMatrix& dm, const MatchOptions& opts) {
    Eigen::MatrixXd x = dm.values;
    if (opts.distance == Distance::RankMahalanobis) {
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const auto r = midranks(x.col(j));
            for (Eigen::Index i = 0; i < x.rows(); ++i) x(i, j) = r[static_cast<std::size_t>(i)];
        }
    }
    const Eigen::Index n = x.rows();
    const Eigen::Index p = x.cols();
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(p, p);
    if (n > 1) {
        const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
        cov = centered.transpose() * centered / static_cast<double>(n - 1);
    }
    const double mean_diag = p > 0 ? cov.diagonal().mean() : 0.0;
    if (mean_diag > 0.0) {
        cov.diagonal().array() += opts.ridge * mean_diag;
    } else {
        cov = Eigen::MatrixXd::Identity(p, p);
    }
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success)
        throw EstimationError("design covariance is not positive definite; increase the ridge");
    // z = L^{-1} x  =>  |z1 - z2|^2 = (x1 - x2)' cov^{-1} (x1 - x2)
    return llt.matrixL().solve(x.transpose()).transpose();
}

struct StratumSolve {
    std::vector<double> p;  // normalized tilting weights over the stratum controls
    bool converged = false;
    double violation = 0;
    Eigen::Index worst = -1;
    int iterations = 0;
};

// Minimizes log sum exp(z_s . lambda) over standardized, target-centered
// control moments z. Its gradient is the weighted moment violation.
StratumSolve solve_dual(const Eigen::MatrixXd& z, const BalanceOptions& opts) {
    const Eigen::Index n = z.rows();
    const Eigen::Index p = z.cols();
    StratumSolve out;
    Eigen::VectorXd lambda = Eigen::VectorXd::Zero(p);

    auto evaluate = [&](const Eigen::VectorXd& l, Eigen::VectorXd& prob) {
        const Eigen::VectorXd eta = z * l;
        const double shift = eta.maxCoeff();
        prob = (eta.array() - shift).exp();
        const double total = prob.sum();
        prob /= total;
        return shift + std::log(total);
    };

    auto newton_step = [&](const Eigen::VectorXd& pr, const Eigen::VectorXd& g) {
        const Eigen::MatrixXd hess = z.transpose() * pr.asDiagonal() * z - g * g.transpose();
        return Eigen::VectorXd(-hess.completeOrthogonalDecomposition().solve(g));
    };

    Eigen::VectorXd prob(n);
    double f = evaluate(lambda, prob);
    for (int it = 0; it <= opts.max_iter; ++it) {
        const Eigen::VectorXd grad = z.transpose() * prob;
        out.violation = grad.cwiseAbs().maxCoeff(&out.worst);
        out.iterations = it;
        if (!std::isfinite(out.violation)) break;
        if (out.violation <= opts.tolerance) {
            out.converged = true;
            // one undamped polishing step, kept only if it helps
            Eigen::VectorXd polished(n);
            evaluate(lambda + newton_step(prob, grad), polished);
            Eigen::Index worst = 0;
            const double v = (z.transpose() * polished).cwiseAbs().maxCoeff(&worst);
            if (std::isfinite(v) && v < out.violation) {
                prob = polished;
                out.violation = v;
                out.worst = worst;
            }
            break;
        }
        if (it == opts.max_iter) break;

        Eigen::VectorXd step = newton_step(prob, grad);
        double slope = grad.dot(step);
        if (!(slope < 0.0)) {
            step = -grad;
            slope = -grad.squaredNorm();
        }

        double t = 1.0;
        Eigen::VectorXd trial_prob(n);
        bool accepted = false;
        for (int halving = 0; halving < 60; ++halving, t *= 0.5) {
            const Eigen::VectorXd trial = lambda + t * step;
            const double ft = evaluate(trial, trial_prob);
            if (std::isfinite(ft) && ft <= f + 1e-4 * t * slope) {
                lambda = trial;
                prob = trial_prob;
                f = ft;
                accepted = true;
                break;
            }
        }
        if (!accepted) break;
    }
    out.p.assign(prob.data(), prob.data() + n);
    return out;
}

}  // namespace

std::size_t DesignMatrix::n_treated() const {
    return static_cast<std::size_t>(std::count(treated.begin(), treated.end(), true));
}

std::size_t DesignMatrix::n_controls() const { return rows() - n_treated(); }

double DesignWeights::mass() const { return std::accumulate(b.begin(), b.end(), 0.0); }

DesignMatrix build_design_matrix(const PanelData& panel, const Frame& frame,
                                 const CovariateSpec& spec) {
    check_lags(spec.outcome_lags, kOutcomeName);
    struct Source {
        std::optional<std::size_t> cov;  // nullopt reads the outcome
        int lag;
        bool log;
    };
    std::vector<Source> sources;
    DesignMatrix dm;
    dm.key = frame.key;

    const bool log_y = spec.log_transform.count(kOutcomeName) > 0;
    for (int l : spec.outcome_lags) {
        sources.push_back({std::nullopt, l, log_y});
        dm.columns.push_back(std::string(log_y ? "log_y" : "y") + "_lag" + std::to_string(l));
    }
    for (const auto& [name, lags] : spec.covariate_lags) {
        check_lags(lags, name);
        const auto idx = panel.covariate_index(name);
        if (!idx) throw InputError("unknown covariate '" + name + "'", {name});
        const bool log = spec.log_transform.count(name) > 0;
        for (int l : lags) {
            sources.push_back({idx, l, log});
            dm.columns.push_back((log ? "log_" : "") + name + "_lag" + std::to_string(l));
        }
    }
    std::vector<std::size_t> exact;
    for (const auto& name : spec.exact) {
        const auto idx = panel.covariate_index(name);
        if (!idx) throw InputError("unknown exact-match covariate '" + name + "'", {name});
        exact.push_back(*idx);
    }

    std::vector<std::vector<double>> rows;
    std::vector<std::string> missing_treated;
    auto add_member = [&](std::size_t u, bool treated) {
        std::vector<double> row;
        row.reserve(sources.size());
        for (const auto& s : sources) {
            const int t = frame.anchor - s.lag;
            const auto v = transformed(s.cov ? panel.covariate(*s.cov, u, t) : panel.outcome(u, t), s.log);
            if (!v) break;
            row.push_back(*v);
        }
        std::string label;
        bool exact_ok = true;
        for (auto c : exact) {
            const auto v = panel.covariate(c, u, frame.anchor - 1);
            if (!v) {
                exact_ok = false;
                break;
            }
            if (!label.empty()) label += '|';
            label += format_real(*v);
        }
        if (row.size() != sources.size() || !exact_ok) {
            dm.excluded.push_back({u, treated, "missing_design_lags"});
            if (treated) missing_treated.push_back(panel.units()[u]);
            return;
        }
        dm.units.push_back(u);
        dm.treated.push_back(treated);
        dm.stratum.push_back(std::move(label));
        rows.push_back(std::move(row));
    };
    for (auto u : frame.treated) add_member(u, true);
    for (auto u : frame.controls) add_member(u, false);

    if (!missing_treated.empty() && spec.treated_missing_is_error)
        throw EstimationError("treated units in frame " + frame.label() +
                                  " lack required pre-treatment values",
                              std::move(missing_treated));
    if (dm.n_controls() == 0)
        throw EstimationError("design failure in frame " + frame.label() +
                              ": every control lacks required pre-treatment values");
    if (dm.n_treated() == 0)
        throw EstimationError("design failure in frame " + frame.label() +
                              ": every treated unit lacks required pre-treatment values");

    dm.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(sources.size()));
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < sources.size(); ++c)
            dm.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    return dm;
}

std::vector<double> uniform_weights(const DesignMatrix& dm) {
    std::vector<double> w(dm.rows(), 0.0);
    for (std::size_t r = 0; r < dm.rows(); ++r)
        if (!dm.treated[r]) w[r] = 1.0;
    return w;
}

std::vector<double> nn_match(const DesignMatrix& dm, const MatchOptions& opts) {
    if (opts.ratio < 1) throw InputError("matching ratio must be >= 1");
    std::vector<double> counts(dm.rows(), 0.0);
    const auto strata = strata_of(dm);

    if (dm.values.cols() == 0) {
        // Nothing to match on: every control sharing a stratum with a treated row is used once.
        for (const auto& [label, rows] : strata) {
            const bool has_treated = std::any_of(rows.begin(), rows.end(),
                                                 [&](std::size_t r) { return dm.treated[r]; });
            if (!has_treated) continue;
            for (auto r : rows)
                if (!dm.treated[r]) counts[r] = 1.0;
        }
        return counts;
    }

    const Eigen::MatrixXd z = whitened_rows(dm, opts);
    const double caliper_sq = opts.caliper ? (*opts.caliper) * (*opts.caliper)
                                           : std::numeric_limits<double>::infinity();
    std::vector<bool> used(dm.rows(), false);
    std::vector<std::string> unmatched;
    const auto k = static_cast<std::size_t>(opts.ratio);

    for (const auto& [label, rows] : strata) {
        std::vector<std::size_t> controls;
        for (auto r : rows)
            if (!dm.treated[r]) controls.push_back(r);
        for (auto t : rows) {
            if (!dm.treated[t]) continue;
            std::vector<std::pair<double, std::size_t>> eligible;
            std::size_t available = 0;
            for (auto c : controls) {
                if (!opts.replacement && used[c]) continue;
                ++available;
                const double d2 = tie_rounded((z.row(static_cast<Eigen::Index>(t)) -
                                               z.row(static_cast<Eigen::Index>(c))).squaredNorm());
                if (d2 <= caliper_sq) eligible.emplace_back(d2, c);
            }
            if (!opts.replacement && available < k)
                throw EstimationError("matching ratio " + std::to_string(k) +
                                          " exceeds the controls available without replacement",
                                      {"treated row " + std::to_string(t)});
            if (eligible.empty()) {
                unmatched.push_back("treated row " + std::to_string(t) + " (stratum '" + label + "')");
                continue;
            }
            // Distance ties go to the lower unit id.
            const std::size_t take = std::min(k, eligible.size());
            std::partial_sort(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(take),
                              eligible.end(), [&](const auto& a, const auto& b) {
                                  if (a.first != b.first) return a.first < b.first;
                                  return dm.units[a.second] < dm.units[b.second];
                              });
            for (std::size_t i = 0; i < take; ++i) {
                counts[eligible[i].second] += 1.0;
                used[eligible[i].second] = true;
            }
        }
    }
    if (!unmatched.empty())
        throw EstimationError("treated rows without eligible controls", std::move(unmatched));
    return counts;
}

EntropyResult entropy_balance(const DesignMatrix& dm, const BalanceOptions& opts) {
    EntropyResult out;
    out.weights.assign(dm.rows(), 0.0);
    const double n_treated = static_cast<double>(dm.n_treated());
    const double n_controls = static_cast<double>(dm.n_controls());

    for (const auto& [label, rows] : strata_of(dm)) {
        std::vector<std::size_t> treated, controls;
        for (auto r : rows) (dm.treated[r] ? treated : controls).push_back(r);
        if (treated.empty()) continue;
        if (controls.size() < 2)
            throw EstimationError("entropy balancing needs at least two controls in stratum '" +
                                  label + "'");

        // Stratum mass proportional to its treated count keeps the exact
        // variables at their treated distribution; one stratum gets n_controls.
        const double stratum_mass = static_cast<double>(treated.size()) * n_controls / n_treated;

        const auto nc = static_cast<Eigen::Index>(controls.size());
        const Eigen::Index p = dm.values.cols();
        Eigen::MatrixXd zc(nc, p);
        for (Eigen::Index i = 0; i < nc; ++i) zc.row(i) = dm.values.row(static_cast<Eigen::Index>(controls[i]));
        Eigen::RowVectorXd target = Eigen::RowVectorXd::Zero(p);
        for (auto r : treated) target += dm.values.row(static_cast<Eigen::Index>(r));
        target /= static_cast<double>(treated.size());

        // Standardize by the control sd; constant columns need no solving when
        // already at the target and are infeasible otherwise.
        std::vector<Eigen::Index> active;
        for (Eigen::Index j = 0; j < p; ++j) {
            const double mean = zc.col(j).mean();
            const double sd = std::sqrt((zc.col(j).array() - mean).square().sum() /
                                        static_cast<double>(nc - 1));
            const double scale = std::max({1.0, std::abs(mean), std::abs(target[j])});
            if (sd <= 1e-12 * scale) {
                const double gap = std::abs(mean - target[j]);
                if (gap > opts.tolerance * scale) {
                    out.converged = false;
                    if (gap > out.max_violation) {
                        out.max_violation = gap;
                        out.worst_column = dm.columns[static_cast<std::size_t>(j)];
                    }
                }
                zc.col(j).setZero();
                continue;
            }
            zc.col(j) = (zc.col(j).array() - target[j]) / sd;
            active.push_back(j);
        }
        Eigen::MatrixXd z(nc, static_cast<Eigen::Index>(active.size()));
        for (std::size_t a = 0; a < active.size(); ++a) z.col(static_cast<Eigen::Index>(a)) = zc.col(active[a]);

        std::vector<double> prob(controls.size(), 1.0 / static_cast<double>(controls.size()));
        if (z.cols() > 0) {
            auto solved = solve_dual(z, opts);
            out.iterations = std::max(out.iterations, solved.iterations);
            if (!solved.converged) out.converged = false;
            if (solved.violation > out.max_violation || !std::isfinite(solved.violation)) {
                out.max_violation = solved.violation;
                if (solved.worst >= 0)
                    out.worst_column = dm.columns[static_cast<std::size_t>(active[static_cast<std::size_t>(solved.worst)])];
            }
            prob = std::move(solved.p);
        }
        for (std::size_t i = 0; i < controls.size(); ++i) out.weights[controls[i]] = stratum_mass * prob[i];
    }
    return out;
}

BalanceTable balance_table(const DesignMatrix& dm, const std::vector<double>& weights) {
    BalanceTable table;
    const std::size_t nt = dm.n_treated();
    for (Eigen::Index j = 0; j < dm.values.cols(); ++j) {
        BalanceRow row;
        row.column = dm.columns[static_cast<std::size_t>(j)];
        double st = 0, sc = 0, sw = 0, wsum = 0;
        std::size_t nc = 0;
        for (std::size_t r = 0; r < dm.rows(); ++r) {
            const double x = dm.values(static_cast<Eigen::Index>(r), j);
            if (dm.treated[r]) {
                st += x;
            } else {
                sc += x;
                ++nc;
                sw += weights[r] * x;
                wsum += weights[r];
            }
        }
        row.treated_mean = nt > 0 ? st / static_cast<double>(nt) : kNaN;
        row.control_mean = nc > 0 ? sc / static_cast<double>(nc) : kNaN;
        row.weighted_control_mean = wsum > 0 ? sw / wsum : kNaN;
        double ss = 0;
        for (std::size_t r = 0; r < dm.rows(); ++r) {
            if (!dm.treated[r]) continue;
            const double d = dm.values(static_cast<Eigen::Index>(r), j) - row.treated_mean;
            ss += d * d;
        }
        row.treated_sd = nt > 1 ? std::sqrt(ss / static_cast<double>(nt - 1)) : 0.0;

        const double before = row.treated_mean - row.control_mean;
        const double after = row.treated_mean - row.weighted_control_mean;
        const double scale = std::max(1.0, std::abs(row.treated_mean));
        if (row.treated_sd > 1e-12 * scale) {
            row.smd_before = before / row.treated_sd;
            row.smd_after = after / row.treated_sd;
        } else {
            const bool equal = std::abs(before) <= 1e-12 * scale && std::abs(after) <= 1e-12 * scale;
            row.zero_variance_flag = !equal;
            row.smd_before = equal ? 0.0 : before;
            row.smd_after = equal ? 0.0 : after;
        }
        table.push_back(std::move(row));
    }
    return table;
}

DesignWeights design_frame(const PanelData& panel, const Frame& frame, const DesignOptions& opts) {
    DesignWeights out;
    out.key = frame.key;
    out.method = opts.method;
    out.controls = frame.controls;
    out.b.assign(frame.controls.size(), 0.0);

    if (opts.method == DesignMethod::Uniform) {
        std::fill(out.b.begin(), out.b.end(), 1.0);
        if (!opts.covariates.empty()) {
            try {
                const auto dm = build_design_matrix(panel, frame, opts.covariates);
                std::vector<double> row_w(dm.rows(), 0.0);
                for (std::size_t r = 0; r < dm.rows(); ++r)
                    if (!dm.treated[r]) row_w[r] = 1.0;
                out.balance = balance_table(dm, row_w);
            } catch (const Error& e) {
                out.notes.push_back(std::string("balance diagnostics unavailable: ") + e.what());
            }
        }
        return out;
    }

    const auto dm = build_design_matrix(panel, frame, opts.covariates);
    for (const auto& x : dm.excluded)
        if (x.treated) out.dropped_treated.push_back(x.unit);

    std::vector<double> row_w;
    if (opts.method == DesignMethod::NearestNeighbor) {
        row_w = nn_match(dm, opts.match);
    } else {
        auto eb = entropy_balance(dm, opts.balance);
        if (!eb.converged) {
            if (opts.balance.on_failure == OnFailure::Error)
                throw EstimationError("entropy balancing did not converge in frame " + frame.label() +
                                          " (worst column '" + eb.worst_column + "', violation " +
                                          format_number(eb.max_violation, 4) + ")",
                                      {frame.label(), eb.worst_column});
            out.fallback = true;
            out.notes.push_back("WARNING: entropy balancing did not converge (worst column '" +
                                eb.worst_column + "'); using uniform weights");
            row_w = uniform_weights(dm);
        } else {
            row_w = std::move(eb.weights);
        }
    }

    std::map<std::size_t, double> by_unit;
    for (std::size_t r = 0; r < dm.rows(); ++r)
        if (!dm.treated[r]) by_unit[dm.units[r]] = row_w[r];
    for (std::size_t i = 0; i < frame.controls.size(); ++i) {
        const auto it = by_unit.find(frame.controls[i]);
        if (it != by_unit.end()) out.b[i] = it->second;
    }
    out.balance = balance_table(dm, row_w);
    return out;
}

std::vector<DesignWeights> design_plan(const PanelData& panel, StackPlan& plan,
                                       const DesignOptions& opts) {
    std::vector<DesignWeights> out;
    out.reserve(plan.frames.size());
    for (auto& frame : plan.frames) {
        auto w = design_frame(panel, frame, opts);
        if (!w.dropped_treated.empty()) {
            for (auto u : w.dropped_treated) {
                frame.treated.erase(std::remove(frame.treated.begin(), frame.treated.end(), u),
                                    frame.treated.end());
                frame.excluded.push_back({u, true, "missing_design_lags"});
            }
            frame.treated_trimmed = true;
        }
        out.push_back(std::move(w));
    }
    return out;
}

nlohmann::json balance_to_json(const BalanceTable& table) {
    nlohmann::json arr = nlohmann::json::array();
    auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
    for (const auto& r : table)
        arr.push_back({{"column", r.column},
                       {"treated_mean", num(r.treated_mean)},
                       {"control_mean", num(r.control_mean)},
                       {"weighted_control_mean", num(r.weighted_control_mean)},
                       {"treated_sd", num(r.treated_sd)},
                       {"smd_before", num(r.smd_before)},
                       {"smd_after", num(r.smd_after)},
                       {"zero_variance_flag", r.zero_variance_flag}});
    return arr;
}

std::string to_string(DesignMethod method) {
    switch (method) {
        case DesignMethod::Uniform: return "uniform";
        case DesignMethod::NearestNeighbor: return "match";
        case DesignMethod::Entropy: return "ebalance";
    }
    return "unknown";
}

}  // namespace cbwsdid
