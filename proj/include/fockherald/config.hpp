// INI run configuration: experiment (physics + detector chain), output
// selection and analysis settings. Units are explicit in every key name.
#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "fockherald/correlate.hpp"
#include "fockherald/simgen.hpp"
#include "fockherald/stats.hpp"

namespace fockherald::config {

class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& field, int line, const std::string& what)
        : std::runtime_error(format(field, line, what)), field_(field), line_(line) {}
    const std::string& field() const { return field_; }
    int line() const { return line_; }  // 0 when unknown

private:
    static std::string format(const std::string& field, int line, const std::string& what) {
        std::string s;
        if (line > 0) s += "line " + std::to_string(line) + ": ";
        if (!field.empty()) s += field + ": ";
        return s + what;
    }
    std::string field_;
    int line_;
};

struct AnalysisConfig {
    std::int64_t max_delay_ps = 100000;
    std::int64_t coincidence_window_ps = 5000;  // |tau| counted as a coincidence
    std::int64_t pair_window_ps = 650;          // |tau_A - tau_B| of a two-photon coincidence
    correlate::CubeAxes axes{};
    std::int64_t fine_bin_ps = 260;             // records-based delay histograms
    int max_q = 20;
    double background_lo_ps = 20000;            // |tau| range of accidental-only delays
    double background_hi_ps = 90000;
    std::int64_t g2_bin_ps = 1000;
    std::int64_t g2_span_ps = 1000000;
    double g2_baseline_lo_ps = 200e3;
    double g2_baseline_hi_ps = 1e6;
    std::int64_t csi_bin_ps = 10000;
    int csi_max_lag_bins = 20;
    stats::CsiForm csi_form = stats::CsiForm::Squared;
    std::optional<double> csi_min_loss_ev;
    std::int64_t cluster_window_ps = 100000;
    double drift_window_s = 10.0;
    int threads = 0;                            // 0 = hardware concurrency
};

struct OutputConfig {
    bool pixels = false;
    bool truth = false;
};

struct RunConfig {
    simgen::ExperimentConfig experiment{};
    OutputConfig output{};
    AnalysisConfig analysis{};
};

// Parses INI text; unknown sections/keys and malformed values are rejected
// with the offending line and field.
RunConfig parse(const std::string& text);
RunConfig load(const std::string& path);

// Canonical, fully expanded INI text (every key, fixed order and precision).
std::string canonical(const RunConfig& c);
// FNV-1a 64 of the canonical text (with threads reset to 0), as 16 hex digits.
std::string config_hash(const RunConfig& c);
std::uint64_t fnv1a(const std::string& bytes);

void validate(const RunConfig& c);

}  // namespace fockherald::config
