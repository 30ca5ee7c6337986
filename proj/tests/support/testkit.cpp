#include "testkit.hpp"

#include "cbwsdid/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

#ifndef CBWSDID_TEST_DATA_DIR
#error "CBWSDID_TEST_DATA_DIR must be defined"
#endif

namespace testkit {

using namespace cbwsdid;

std::string data_path(const std::string& name) { return std::string(CBWSDID_TEST_DATA_DIR) + "/" + name; }

PanelData oracle_panel_a() {
    PanelSchema schema;
    schema.covariates = {"x1", "x2"};
    return load_panel_file(data_path("oracle_panel_a.csv"), schema);
}

PanelData oracle_panel_b(bool extra_off_unit) {
    std::vector<std::pair<std::string, std::vector<int>>> paths = {
        {"uA", {0, 0, 1, 1, 0, 0, 0, 0}},
        {"uB", {0, 0, 0, 0, 0, 0, 0, 0}},
        {"uC", {0, 0, 0, 0, 0, 0, 0, 0}},
    };
    if (extra_off_unit) paths.push_back({"uD", {0, 0, 1, 1, 1, 1, 1, 1}});
    std::vector<PanelRecord> records;
    for (std::size_t u = 0; u < paths.size(); ++u)
        for (int t = 1; t <= 8; ++t) {
            PanelRecord r;
            r.unit = paths[u].first;
            r.time = t;
            r.treatment = paths[u].second[static_cast<std::size_t>(t - 1)];
            r.outcome = 0.1 * t + static_cast<double>(u) + 0.5 * r.treatment;
            records.push_back(r);
        }
    return PanelData::from_records(records, {});
}

PanelData panel_from_paths(const std::vector<std::vector<int>>& d, std::mt19937_64& rng, double missing_prob) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<PanelRecord> records;
    for (std::size_t u = 0; u < d.size(); ++u) {
        const double alpha = normal(rng);
        const double x1 = normal(rng);
        const double x2 = unif(rng) < 0.5 ? 1.0 : 0.0;
        const double slope = 0.1 * normal(rng) + 0.05 * x1;
        for (std::size_t t = 0; t < d[u].size(); ++t) {
            PanelRecord r;
            r.unit = std::to_string(u + 1);
            r.time = static_cast<int>(t) + 1;
            r.treatment = d[u][t];
            const double y = alpha + 0.2 * static_cast<double>(t) + slope * static_cast<double>(t) +
                             0.7 * r.treatment + 0.3 * normal(rng);
            if (unif(rng) >= missing_prob) r.outcome = y;
            r.covariates = {x1 + 0.1 * normal(rng), x2};
            records.push_back(r);
        }
    }
    return PanelData::from_records(records, {"x1", "x2"});
}

PanelData random_absorbing_panel(std::mt19937_64& rng, const AbsorbingDraw& draw, const EventWindow& window) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        // Adoption periods that leave room for the window.
        const int lo = 1 + window.pre;
        const int hi = draw.periods - window.post;
        std::vector<int> offered;
        std::uniform_int_distribution<int> pick(lo, std::max(lo, hi));
        for (int c = 0; c < draw.cohorts; ++c) offered.push_back(pick(rng));
        std::vector<std::vector<int>> d(static_cast<std::size_t>(draw.units),
                                        std::vector<int>(static_cast<std::size_t>(draw.periods), 0));
        std::uniform_int_distribution<std::size_t> which(0, offered.size() - 1);
        for (auto& path : d) {
            if (unif(rng) < draw.never_share) continue;
            const int a = offered[which(rng)];
            for (int t = a; t <= draw.periods; ++t) path[static_cast<std::size_t>(t - 1)] = 1;
        }
        auto panel = panel_from_paths(d, rng, draw.missing_prob);
        try {
            (void)build_absorbing(panel, window);
            return panel;
        } catch (const Error&) {
        }
    }
    throw std::runtime_error("could not draw an admissible panel");
}

PanelData random_reversal_panel(std::mt19937_64& rng, int units, int periods, double switch_prob,
                                double missing_prob) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<std::vector<int>> d(static_cast<std::size_t>(units));
    for (auto& path : d) {
        int state = unif(rng) < 0.3 ? 1 : 0;
        for (int t = 0; t < periods; ++t) {
            if (unif(rng) < switch_prob) state = 1 - state;
            path.push_back(state);
        }
    }
    return panel_from_paths(d, rng, missing_prob);
}

DesignMatrix random_design(std::mt19937_64& rng, int n_treated, int n_controls, int columns, int strata,
                           double treated_shift) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<int> stratum(0, strata - 1);
    DesignMatrix dm;
    for (int j = 0; j < columns; ++j) dm.columns.push_back("c" + std::to_string(j));
    const int n = n_treated + n_controls;
    dm.values.resize(n, columns);
    for (int r = 0; r < n; ++r) {
        const bool treated = r < n_treated;
        dm.units.push_back(static_cast<std::size_t>(r));
        dm.treated.push_back(treated);
        dm.stratum.push_back(strata > 1 ? std::to_string(stratum(rng)) : std::string{});
        for (int j = 0; j < columns; ++j) dm.values(r, j) = normal(rng) + (treated ? treated_shift : 0.0);
    }
    return dm;
}

namespace {

// Midrank by counting: rank = #(less) + (#(equal) + 1) / 2.
Eigen::MatrixXd rank_columns(const Eigen::MatrixXd& x) {
    Eigen::MatrixXd r(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j)
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            double less = 0, equal = 0;
            for (Eigen::Index k = 0; k < x.rows(); ++k) {
                if (x(k, j) < x(i, j)) less += 1;
                else if (x(k, j) == x(i, j)) equal += 1;
            }
            r(i, j) = less + (equal + 1.0) / 2.0;
        }
    return r;
}

}  // namespace

std::vector<double> brute_force_match(const DesignMatrix& dm, const MatchOptions& opts) {
    const auto n = static_cast<Eigen::Index>(dm.rows());
    std::vector<double> counts(dm.rows(), 0.0);
    const auto p = dm.values.cols();
    Eigen::MatrixXd x = opts.distance == Distance::RankMahalanobis ? rank_columns(dm.values) : dm.values;

    Eigen::MatrixXd inv = Eigen::MatrixXd::Identity(p, p);
    if (p > 0) {
        Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(p, p);
        Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(p);
        for (Eigen::Index i = 0; i < n; ++i) mean += x.row(i);
        mean /= static_cast<double>(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::RowVectorXd c = x.row(i) - mean;
            cov += c.transpose() * c;
        }
        cov /= static_cast<double>(n - 1);
        double md = 0;
        for (Eigen::Index j = 0; j < p; ++j) md += cov(j, j) / static_cast<double>(p);
        if (md > 0) {
            for (Eigen::Index j = 0; j < p; ++j) cov(j, j) += opts.ridge * md;
            inv = cov.fullPivLu().inverse();
        }
    }
    // keep about 11 significant digits so rounding noise does not split ties
    auto dist2 = [&](Eigen::Index a, Eigen::Index b) {
        if (p == 0) return 0.0;
        const Eigen::VectorXd diff = (x.row(a) - x.row(b)).transpose();
        const double d = diff.dot(inv * diff);
        if (!(d > 0)) return d;
        int e = 0;
        const double m = std::frexp(d, &e);
        return std::ldexp(std::round(m * 68719476736.0), e - 36);
    };
    const double cal2 = opts.caliper ? *opts.caliper * *opts.caliper : std::numeric_limits<double>::infinity();

    std::vector<bool> used(dm.rows(), false);
    for (Eigen::Index t = 0; t < n; ++t) {
        if (!dm.treated[static_cast<std::size_t>(t)]) continue;
        std::vector<std::pair<double, Eigen::Index>> all;
        std::size_t pool = 0;
        for (Eigen::Index c = 0; c < n; ++c) {
            const auto cu = static_cast<std::size_t>(c);
            if (dm.treated[cu] || dm.stratum[cu] != dm.stratum[static_cast<std::size_t>(t)]) continue;
            if (!opts.replacement && used[cu]) continue;
            ++pool;
            const double d = dist2(t, c);
            if (d <= cal2) all.emplace_back(d, c);
        }
        if (!opts.replacement && pool < static_cast<std::size_t>(opts.ratio))
            throw std::runtime_error("pool exhausted");
        if (all.empty()) throw std::runtime_error("no eligible control");
        std::sort(all.begin(), all.end(), [&](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first < b.first;
            return dm.units[static_cast<std::size_t>(a.second)] < dm.units[static_cast<std::size_t>(b.second)];
        });
        const auto k = std::min<std::size_t>(static_cast<std::size_t>(opts.ratio), all.size());
        for (std::size_t i = 0; i < k; ++i) {
            counts[static_cast<std::size_t>(all[i].second)] += 1;
            used[static_cast<std::size_t>(all[i].second)] = true;
        }
    }
    return counts;
}

BfgsResult bfgs_entropy(const Eigen::MatrixXd& controls, const Eigen::RowVectorXd& target, double tolerance,
                        int max_iter) {
    const Eigen::MatrixXd z = controls.rowwise() - target;
    const auto n = z.rows();
    const auto p = z.cols();
    auto objective = [&](const Eigen::VectorXd& l, Eigen::VectorXd& grad, Eigen::VectorXd& prob) {
        const Eigen::VectorXd eta = z * l;
        const double m = eta.maxCoeff();
        prob = (eta.array() - m).exp();
        const double s = prob.sum();
        prob /= s;
        grad = z.transpose() * prob;
        return m + std::log(s);
    };
    Eigen::VectorXd lambda = Eigen::VectorXd::Zero(p), grad(p), prob(n);
    double f = objective(lambda, grad, prob);
    Eigen::MatrixXd h = Eigen::MatrixXd::Identity(p, p);  // inverse Hessian estimate
    BfgsResult out;
    for (int it = 0; it < max_iter; ++it) {
        out.iterations = it;
        if (grad.cwiseAbs().maxCoeff() <= tolerance) {
            out.converged = true;
            break;
        }
        Eigen::VectorXd dir = -h * grad;
        if (grad.dot(dir) >= 0) {
            h.setIdentity();
            dir = -grad;
        }
        double step = 1.0;
        Eigen::VectorXd g_new(p), p_new(n), l_new(p);
        double f_new = f;
        bool ok = false;
        for (int k = 0; k < 80; ++k, step *= 0.5) {
            l_new = lambda + step * dir;
            f_new = objective(l_new, g_new, p_new);
            if (f_new <= f + 1e-4 * step * grad.dot(dir)) {
                ok = true;
                break;
            }
        }
        if (!ok) break;
        const Eigen::VectorXd s = l_new - lambda, y = g_new - grad;
        const double sy = s.dot(y);
        if (sy > 1e-300) {
            const double rho = 1.0 / sy;
            const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(p, p);
            h = (id - rho * s * y.transpose()) * h * (id - rho * y * s.transpose()) + rho * s * s.transpose();
        }
        lambda = l_new;
        grad = g_new;
        prob = p_new;
        f = f_new;
    }
    out.max_violation = grad.cwiseAbs().maxCoeff();
    out.prob.assign(prob.data(), prob.data() + n);
    return out;
}

DenseFit dense_dummy_fit(const StackedSample& sample) {
    std::vector<const StackedRow*> rows;
    for (const auto& r : sample.rows)
        if (r.weight > 0) rows.push_back(&r);
    DenseFit fit;
    for (int e : sample.event_times)
        if (e != -1) fit.coefficient_times.push_back(e);
    const auto k = static_cast<Eigen::Index>(fit.coefficient_times.size());

    std::map<std::size_t, Eigen::Index> member_col;
    std::map<std::pair<std::size_t, int>, Eigen::Index> time_col;
    for (const auto* r : rows) {
        member_col.emplace(r->member, 0);
        time_col.emplace(std::make_pair(r->frame, r->event_time), 0);
    }
    Eigen::Index col = k;
    for (auto& [key, c] : member_col) c = col++;
    for (auto& [key, c] : time_col) c = col++;

    const auto n = static_cast<Eigen::Index>(rows.size());
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, col);
    Eigen::VectorXd y(n), w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = *rows[static_cast<std::size_t>(i)];
        if (r.treated && r.event_time != -1) {
            const auto pos = std::find(fit.coefficient_times.begin(), fit.coefficient_times.end(), r.event_time);
            x(i, pos - fit.coefficient_times.begin()) = 1.0;
        }
        x(i, member_col.at(r.member)) = 1.0;
        x(i, time_col.at({r.frame, r.event_time})) = 1.0;
        y[i] = r.y;
        w[i] = r.weight;
    }
    const Eigen::VectorXd sw = w.array().sqrt();
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(sw.asDiagonal() * x);
    const Eigen::VectorXd coef = cod.solve(sw.asDiagonal() * y);
    fit.rank = cod.rank();
    fit.beta = coef.head(k);

    const Eigen::VectorXd resid = y - x * coef;
    const Eigen::MatrixXd xtwx = x.transpose() * w.asDiagonal() * x;
    const Eigen::MatrixXd bread = xtwx.completeOrthogonalDecomposition().pseudoInverse();
    std::map<std::size_t, Eigen::VectorXd> scores;
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto unit = rows[static_cast<std::size_t>(i)]->unit;
        auto it = scores.find(unit);
        if (it == scores.end()) it = scores.emplace(unit, Eigen::VectorXd::Zero(col)).first;
        it->second += x.row(i).transpose() * (w[i] * resid[i]);
    }
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(col, col);
    for (const auto& [u, s] : scores) meat += s * s.transpose();
    const double g = static_cast<double>(scores.size());
    const double nn = static_cast<double>(n);
    const double factor = g / (g - 1.0) * (nn - 1.0) / (nn - static_cast<double>(fit.rank));
    fit.vcov = (factor * bread * meat * bread).topLeftCorner(k, k);
    return fit;
}

EpisodeMap brute_force_episodes(const PanelData& panel, const EventWindow& window, int lags, bool switch_off,
                                bool onset_only) {
    auto dval = [&](std::size_t u, int t) -> int {  // -1 when unobserved
        const auto d = panel.treatment(u, t);
        if (!d) return -1;
        return switch_off ? 1 - *d : *d;
    };
    auto complete = [&](std::size_t u, int tau) {
        for (int e = -window.pre; e <= window.post; ++e)
            if (!panel.outcome(u, tau + e)) return false;
        return true;
    };
    EpisodeMap out;
    for (int tau = panel.t_min(); tau <= panel.t_max(); ++tau) {
        if (tau - lags < panel.t_min() || tau - window.pre < panel.t_min() || tau + window.post > panel.t_max())
            continue;
        for (unsigned bits = 0; bits < (1u << lags); ++bits) {
            std::string h;
            for (int l = 0; l < lags; ++l) h.push_back((bits >> (lags - 1 - l)) & 1u ? '1' : '0');
            EpisodeFrame frame;
            bool any_candidate = false;
            for (std::size_t u = 0; u < panel.n_units(); ++u) {
                bool match = true;
                for (int l = 0; l < lags; ++l)
                    if (dval(u, tau - lags + l) != h[static_cast<std::size_t>(l)] - '0') match = false;
                if (!match) continue;
                bool treated = h.back() == '0';
                bool control = true;
                for (int r = 0; r <= window.post; ++r) {
                    const int d = dval(u, tau + r);
                    if ((r == 0 || !onset_only) && d != 1) treated = false;
                    if (d != 0) control = false;
                }
                if (treated) any_candidate = true;
                if (treated && complete(u, tau)) frame.treated.push_back(u);
                if (control && complete(u, tau)) frame.controls.push_back(u);
            }
            if (any_candidate && !frame.treated.empty() && !frame.controls.empty()) out[{tau, h}] = frame;
        }
    }
    return out;
}

EpisodeMap episodes_of(const StackPlan& plan) {
    EpisodeMap out;
    for (const auto& f : plan.frames) out[{f.key.period, f.key.history}] = {f.treated, f.controls};
    return out;
}

}  // namespace testkit
