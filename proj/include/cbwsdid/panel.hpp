#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace cbwsdid {

/// Adoption time of a unit that is never observed treated.
inline constexpr int kNever = std::numeric_limits<int>::max();

/// Column mapping for delimited panel files.
struct PanelSchema {
    std::string unit = "unit";
    std::string time = "time";
    std::string outcome = "y";
    std::string treatment = "d";
    std::vector<std::string> covariates;
    char delimiter = ',';
};

/// One input observation. Missing outcome or covariate cells are nullopt.
struct PanelRecord {
    std::string unit;
    int time = 0;
    std::optional<double> outcome;
    int treatment = 0;
    std::vector<std::optional<double>> covariates;
};

/**
 * Validated long-format panel, immutable once built.
 *
 * Units are opaque string keys. They are ordered numerically when every id
 * parses as an integer and lexicographically otherwise; that order is the
 * tie-breaking order used everywhere downstream. Time is an integer period.
 * Storage is a dense unit x period grid spanning [t_min, t_max]; cells
 * without a source row are "absent" and recorded as gaps.
 */
class PanelData {
public:
    /// Validates and indexes records. `row_offset` is added to record indices
    /// in error messages (the CSV loader passes the header line count).
    static PanelData from_records(std::vector<PanelRecord> records,
                                  std::vector<std::string> covariate_names,
                                  std::size_t row_offset = 1);

    std::size_t n_units() const noexcept { return units_.size(); }
    const std::vector<std::string>& units() const noexcept { return units_; }
    std::optional<std::size_t> unit_index(const std::string& id) const;

    int t_min() const noexcept { return t_min_; }
    int t_max() const noexcept { return t_max_; }
    std::size_t n_periods() const noexcept { return n_periods_; }
    bool in_range(int t) const noexcept { return t >= t_min_ && t <= t_max_; }

    /// Distinct periods carried by at least one row, ascending.
    std::vector<int> times() const;

    bool has_row(std::size_t unit, int t) const;
    std::optional<double> outcome(std::size_t unit, int t) const;
    std::optional<int> treatment(std::size_t unit, int t) const;

    const std::vector<std::string>& covariate_names() const noexcept { return covariate_names_; }
    std::optional<std::size_t> covariate_index(const std::string& name) const;
    std::optional<double> covariate(std::size_t cov, std::size_t unit, int t) const;

    /// Periods inside the unit's own observed span with no row.
    const std::vector<int>& gaps(std::size_t unit) const { return gaps_.at(unit); }

    /// Copy with D replaced by 1 - D on every present row.
    PanelData with_flipped_treatment() const;

    std::size_t n_rows() const noexcept { return n_rows_; }

    /// Cell-wise equality; two missing cells compare equal.
    friend bool operator==(const PanelData& a, const PanelData& b);

private:
    std::size_t cell(std::size_t unit, int t) const {
        return unit * n_periods_ + static_cast<std::size_t>(t - t_min_);
    }

    std::vector<std::string> units_;
    std::vector<std::string> covariate_names_;
    int t_min_ = 0;
    int t_max_ = -1;
    std::size_t n_periods_ = 0;
    std::size_t n_rows_ = 0;
    std::vector<std::uint8_t> present_;
    std::vector<double> outcome_;            // NaN when missing
    std::vector<std::int8_t> treatment_;     // -1 when absent
    std::vector<std::vector<double>> covs_;  // per covariate, NaN when missing
    std::vector<std::vector<int>> gaps_;
};

/// Reads a delimited table with a header row. Empty and `NA` cells are missing.
PanelData load_panel(std::istream& in, const PanelSchema& schema);
PanelData load_panel_file(const std::string& path, const PanelSchema& schema);

/// Writes every present row in (unit, time) order; missing cells become `NA`.
void write_panel(std::ostream& out, const PanelData& panel, const PanelSchema& schema);

/// First treated period per unit (kNever if never treated). Requires absorbing
/// treatment: throws InputError naming the unit on any 1 -> 0 transition.
std::vector<int> adoption_times(const PanelData& panel);

/// (D[tau-L], ..., D[tau-1]); nullopt when any lag is unobserved.
std::optional<std::vector<int>> treatment_history(const PanelData& panel, std::size_t unit,
                                                  int tau, int lags);

std::string to_bitstring(const std::vector<int>& bits);

}  // namespace cbwsdid
