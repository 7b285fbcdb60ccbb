// Analysis driver: one streaming pass turns an event stream into every
// accumulated product (cubes, delay histograms, coincidence spectra, g2 and
// CSI accumulators); estimators then run on the products and emit reports.
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fockherald/config.hpp"
#include "fockherald/correlate.hpp"
#include "fockherald/events.hpp"
#include "fockherald/report.hpp"
#include "fockherald/simgen.hpp"
#include "fockherald/stats.hpp"

namespace fockherald::analysis {

struct Products {
    correlate::CoincidenceCube cube;       // every matched record
    correlate::CoincidenceCube cube_true;  // true coincidences only
    // Fine delay histograms (bins centered on multiples of fine_bin_ps).
    // "All matched" histograms keep every electron's nearest photon, so their
    // accidental floor is flat; the one-claim-per-photon deduplication would
    // deplete the floor away from tau = 0 at high electron rates.
    correlate::Histogram tau_ph_ph;        // true tau_A - tau_B, |tau_A| within the coincidence window
    correlate::Histogram tau_any_m1;       // all matched tau_A and tau_B, m = 1 heralds
    correlate::Histogram tau_near_m1;      // delay of the nearer of A/B, m = 1 heralds
    correlate::Histogram tau_ab_m2;        // all matched (tau_A, tau_B) pairs, m = 2 heralds
    correlate::Histogram tau_inelastic;    // every (electron with E >= photon_energy / 2, photon) pair, tau = t_ph - t_e
    // Energy histograms on the cube energy axis: electrons with exactly one (k1)
    // or two (k2) photons in the signal window, and the band-background analogues.
    std::vector<double> spec_k1_sig, spec_k1_bg, spec_k2_sig, spec_k2_bg;
    double spectra_bg_scale = 0.0;         // signal/background delay-window ratio
    stats::DiscreteG2 g2d_all, g2d_m1, g2d_m2;
    std::optional<stats::CorrelationCurve> unheralded;
    std::string unheralded_error;
    std::optional<stats::CsiResult> csi;
    std::string csi_error;
    std::int64_t electrons = 0, photons_a = 0, photons_b = 0;
    std::int64_t run_end_ps = 0;
};

// Signal / background delay windows shared by the estimators.
struct DelayWindows {
    double signal_half_ps = 5000;
    double background_lo_ps = 20000;
    double background_hi_ps = 90000;
    double pair_half_ps = 650;
};
DelayWindows delay_windows(const config::AnalysisConfig& a);

class Accumulator {
public:
    // run_end_ps fixes the CSI jackknife blocks; use the run duration.
    Accumulator(const config::RunConfig& config, std::int64_t run_end_ps);
    ~Accumulator();
    Accumulator(const Accumulator&) = delete;
    Accumulator& operator=(const Accumulator&) = delete;

    // Every event pushed later must have time >= complete_until_ps.
    void push(const SplitStream& chunk, std::int64_t complete_until_ps);
    // Same as push, with the chunk's electrons already matched and deduplicated
    // (e.g. by sharded_analysis); `records` must cover exactly those electrons.
    void push_matched(const SplitStream& chunk, std::int64_t complete_until_ps,
                      std::span<const correlate::TripleRecord> records);
    Products finish();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// In-memory analysis; with analysis.threads != 1 the matching is time-sharded
// over a worker pool (results identical to the single pass).
Products analyze_stream(const SplitStream& s, const config::RunConfig& config, std::int64_t run_end_ps = -1);

struct SimulationSummary {
    std::int64_t electrons = 0;
    std::int64_t events = 0;
    double generate_s = 0.0;
    double analyze_s = 0.0;
};

// Simulates the configured experiment and analyzes it in one streaming pass
// (memory independent of the run length).
Products analyze_simulation(const config::RunConfig& config, SimulationSummary* summary = nullptr,
                            bool classical = false);

struct EstimatorRequest {
    std::string name;
    std::map<std::string, std::string> params;
};

// "name" or "name: key=value, key=value".
EstimatorRequest parse_request(const std::string& text);
const std::vector<std::string>& estimator_names();
std::vector<EstimatorRequest> default_requests();

// Throws std::invalid_argument for unknown names (listing the valid ones) or
// parameters an estimator does not accept.
void validate_requests(const std::vector<EstimatorRequest>& requests);

struct EstimatorFailure {
    std::string estimator;
    std::string reason;
};

struct EstimatorOutcome {
    std::vector<report::Report> reports;
    std::vector<EstimatorFailure> failures;
};

// Runs each request; a failing estimator is recorded and the rest continue.
// Unknown names throw std::invalid_argument listing the valid names.
EstimatorOutcome run_estimators(const Products& products, const config::RunConfig& config,
                                const std::vector<EstimatorRequest>& requests, const report::Metadata& metadata);

// Nominal detection probabilities of one emitted photon on each channel.
double nominal_eta_a(const simgen::ExperimentConfig& c);
double nominal_eta_b(const simgen::ExperimentConfig& c);

}  // namespace fockherald::analysis
