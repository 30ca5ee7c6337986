#include "cbwsdid/panel.hpp"

#include "cbwsdid/error.hpp"
#include "cbwsdid/textio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>

namespace cbwsdid {

namespace {

constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

bool same_cell(double a, double b) {
    return (std::isnan(a) && std::isnan(b)) || a == b;
}

bool same_cells(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), same_cell);
}

std::vector<std::string> sorted_unit_ids(std::vector<std::string> ids) {
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    const bool all_numeric = std::all_of(ids.begin(), ids.end(), [](const std::string& s) {
        return parse_integer(s).has_value();
    });
    if (all_numeric) {
        std::stable_sort(ids.begin(), ids.end(), [](const std::string& a, const std::string& b) {
            return *parse_integer(a) < *parse_integer(b);
        });
    }
    return ids;
}

}  // namespace

PanelData PanelData::from_records(std::vector<PanelRecord> records,
                                  std::vector<std::string> covariate_names,
                                  std::size_t row_offset) {
    if (records.empty()) throw InputError("panel has no rows");

    PanelData p;
    p.covariate_names_ = std::move(covariate_names);

    std::vector<std::string> bad_treatment;
    std::vector<std::string> ids;
    ids.reserve(records.size());
    p.t_min_ = records.front().time;
    p.t_max_ = records.front().time;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (r.treatment != 0 && r.treatment != 1)
            bad_treatment.push_back("row " + std::to_string(i + row_offset));
        if (r.covariates.size() != p.covariate_names_.size())
            throw InputError("row " + std::to_string(i + row_offset) +
                             ": covariate count does not match the covariate names");
        ids.push_back(r.unit);
        p.t_min_ = std::min(p.t_min_, r.time);
        p.t_max_ = std::max(p.t_max_, r.time);
    }
    if (!bad_treatment.empty())
        throw InputError("treatment value outside {0,1}", std::move(bad_treatment));

    p.units_ = sorted_unit_ids(std::move(ids));
    std::map<std::string, std::size_t> index;
    for (std::size_t u = 0; u < p.units_.size(); ++u) index.emplace(p.units_[u], u);

    p.n_periods_ = static_cast<std::size_t>(p.t_max_ - p.t_min_ + 1);
    const std::size_t cells = p.units_.size() * p.n_periods_;
    p.present_.assign(cells, 0);
    p.outcome_.assign(cells, kMissing);
    p.treatment_.assign(cells, -1);
    p.covs_.assign(p.covariate_names_.size(), std::vector<double>(cells, kMissing));

    std::vector<std::string> duplicates;
    for (const auto& r : records) {
        const std::size_t c = p.cell(index.at(r.unit), r.time);
        if (p.present_[c]) {
            duplicates.push_back(r.unit + "," + std::to_string(r.time));
            continue;
        }
        p.present_[c] = 1;
        p.outcome_[c] = r.outcome.value_or(kMissing);
        p.treatment_[c] = static_cast<std::int8_t>(r.treatment);
        for (std::size_t k = 0; k < r.covariates.size(); ++k)
            p.covs_[k][c] = r.covariates[k].value_or(kMissing);
    }
    if (!duplicates.empty()) {
        std::sort(duplicates.begin(), duplicates.end());
        duplicates.erase(std::unique(duplicates.begin(), duplicates.end()), duplicates.end());
        throw InputError("duplicate (unit,time) keys", std::move(duplicates));
    }
    p.n_rows_ = records.size();

    p.gaps_.resize(p.units_.size());
    for (std::size_t u = 0; u < p.units_.size(); ++u) {
        int first = p.t_max_ + 1;
        int last = p.t_min_ - 1;
        for (int t = p.t_min_; t <= p.t_max_; ++t) {
            if (p.present_[p.cell(u, t)]) {
                first = std::min(first, t);
                last = std::max(last, t);
            }
        }
        for (int t = first; t <= last; ++t)
            if (!p.present_[p.cell(u, t)]) p.gaps_[u].push_back(t);
    }
    return p;
}

std::optional<std::size_t> PanelData::unit_index(const std::string& id) const {
    // units_ is sorted, but possibly numerically; linear scan keeps this simple.
    const auto it = std::find(units_.begin(), units_.end(), id);
    if (it == units_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - units_.begin());
}

std::vector<int> PanelData::times() const {
    std::vector<int> out;
    for (int t = t_min_; t <= t_max_; ++t) {
        for (std::size_t u = 0; u < units_.size(); ++u) {
            if (present_[cell(u, t)]) {
                out.push_back(t);
                break;
            }
        }
    }
    return out;
}

bool PanelData::has_row(std::size_t unit, int t) const {
    return unit < units_.size() && in_range(t) && present_[cell(unit, t)];
}

std::optional<double> PanelData::outcome(std::size_t unit, int t) const {
    if (!has_row(unit, t)) return std::nullopt;
    const double y = outcome_[cell(unit, t)];
    if (std::isnan(y)) return std::nullopt;
    return y;
}

std::optional<int> PanelData::treatment(std::size_t unit, int t) const {
    if (!has_row(unit, t)) return std::nullopt;
    return treatment_[cell(unit, t)];
}

std::optional<std::size_t> PanelData::covariate_index(const std::string& name) const {
    const auto it = std::find(covariate_names_.begin(), covariate_names_.end(), name);
    if (it == covariate_names_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - covariate_names_.begin());
}

std::optional<double> PanelData::covariate(std::size_t cov, std::size_t unit, int t) const {
    if (cov >= covs_.size() || !has_row(unit, t)) return std::nullopt;
    const double x = covs_[cov][cell(unit, t)];
    if (std::isnan(x)) return std::nullopt;
    return x;
}

PanelData PanelData::with_flipped_treatment() const {
    PanelData out = *this;
    for (auto& d : out.treatment_)
        if (d >= 0) d = static_cast<std::int8_t>(1 - d);
    return out;
}

bool operator==(const PanelData& a, const PanelData& b) {
    if (a.units_ != b.units_ || a.covariate_names_ != b.covariate_names_ || a.t_min_ != b.t_min_ ||
        a.t_max_ != b.t_max_ || a.present_ != b.present_ || a.treatment_ != b.treatment_ ||
        !same_cells(a.outcome_, b.outcome_) || a.covs_.size() != b.covs_.size())
        return false;
    for (std::size_t k = 0; k < a.covs_.size(); ++k)
        if (!same_cells(a.covs_[k], b.covs_[k])) return false;
    return true;
}

PanelData load_panel(std::istream& in, const PanelSchema& schema) {
    std::string line;
    if (!std::getline(in, line)) throw InputError("panel file is empty");
    const auto header = split_delimited(line, schema.delimiter);

    auto column = [&](const std::string& name) {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw InputError("missing required column '" + name + "'", {name});
        return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t unit_col = column(schema.unit);
    const std::size_t time_col = column(schema.time);
    const std::size_t y_col = column(schema.outcome);
    const std::size_t d_col = column(schema.treatment);
    std::vector<std::size_t> cov_cols;
    for (const auto& name : schema.covariates) cov_cols.push_back(column(name));

    std::vector<PanelRecord> records;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_delimited(line, schema.delimiter);
        if (fields.size() != header.size())
            throw InputError("row " + std::to_string(line_no) + ": expected " +
                             std::to_string(header.size()) + " fields, found " +
                             std::to_string(fields.size()));
        PanelRecord r;
        r.unit = fields[unit_col];
        if (is_missing_token(r.unit))
            throw InputError("row " + std::to_string(line_no) + ": missing unit id");
        const auto t = parse_integer(fields[time_col]);
        if (!t) throw InputError("row " + std::to_string(line_no) + ": missing or non-integer time");
        r.time = static_cast<int>(*t);
        r.outcome = parse_real(fields[y_col]);
        const auto d = parse_integer(fields[d_col]);
        if (!d || (*d != 0 && *d != 1))
            throw InputError("treatment value outside {0,1}", {"row " + std::to_string(line_no)});
        r.treatment = static_cast<int>(*d);
        for (auto c : cov_cols) r.covariates.push_back(parse_real(fields[c]));
        records.push_back(std::move(r));
    }
    // Records are numbered from the first data line, which is line 2.
    return PanelData::from_records(std::move(records), schema.covariates, 2);
}

PanelData load_panel_file(const std::string& path, const PanelSchema& schema) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open panel file '" + path + "'");
    return load_panel(in, schema);
}

void write_panel(std::ostream& out, const PanelData& panel, const PanelSchema& schema) {
    const char sep = schema.delimiter;
    out << schema.unit << sep << schema.time << sep << schema.outcome << sep << schema.treatment;
    for (const auto& name : panel.covariate_names()) out << sep << name;
    out << '\n';
    for (std::size_t u = 0; u < panel.n_units(); ++u) {
        for (int t = panel.t_min(); t <= panel.t_max(); ++t) {
            if (!panel.has_row(u, t)) continue;
            out << panel.units()[u] << sep << t << sep << format_real(panel.outcome(u, t)) << sep
                << *panel.treatment(u, t);
            for (std::size_t k = 0; k < panel.covariate_names().size(); ++k)
                out << sep << format_real(panel.covariate(k, u, t));
            out << '\n';
        }
    }
}

std::vector<int> adoption_times(const PanelData& panel) {
    std::vector<int> out(panel.n_units(), kNever);
    for (std::size_t u = 0; u < panel.n_units(); ++u) {
        for (int t = panel.t_min(); t <= panel.t_max(); ++t) {
            const auto d = panel.treatment(u, t);
            if (!d) continue;
            if (*d == 1 && out[u] == kNever) {
                out[u] = t;
            } else if (*d == 0 && out[u] != kNever) {
                throw InputError("non-monotone treatment for unit " + panel.units()[u] +
                                     " (treated at " + std::to_string(out[u]) +
                                     ", untreated at " + std::to_string(t) +
                                     "); use an episode mode",
                                 {panel.units()[u]});
            }
        }
    }
    return out;
}

std::optional<std::vector<int>> treatment_history(const PanelData& panel, std::size_t unit,
                                                  int tau, int lags) {
    if (lags < 1) throw InputError("history length must be at least 1");
    std::vector<int> h;
    h.reserve(static_cast<std::size_t>(lags));
    for (int t = tau - lags; t < tau; ++t) {
        const auto d = panel.treatment(unit, t);
        if (!d) return std::nullopt;
        h.push_back(*d);
    }
    return h;
}

std::string to_bitstring(const std::vector<int>& bits) {
    std::string s;
    s.reserve(bits.size());
    for (int b : bits) s.push_back(b ? '1' : '0');
    return s;
}

}  // namespace cbwsdid
