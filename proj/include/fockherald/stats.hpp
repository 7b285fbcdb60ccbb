// Quantum-optics estimators on coincidence data: g2 family, CAR, heralding
// efficiency, Cauchy-Schwarz gamma and coincidence-based coupling, each with
// first-order counting uncertainties.
#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fockherald/correlate.hpp"
#include "fockherald/events.hpp"

namespace fockherald::stats {

using EnergyWindow = std::pair<double, double>;

// Default selection window for scattering order m: m*hw +/- hw/2.
EnergyWindow order_window(int m, double photon_energy_ev = 0.9);

struct Estimate {
    double value = 0.0;
    double error = 0.0;
    bool flagged = false;
    std::string note;
};

struct CorrelationCurve {
    std::vector<double> tau_ps;  // bin centers
    std::vector<double> g2;
    std::vector<double> error;
    std::vector<double> counts;
    std::pair<double, double> baseline_window{0.0, 0.0};  // |tau| range, ps
    double baseline_level = 0.0;                          // mean counts per bin in the baseline
};

struct UnheraldedOptions {
    std::int64_t bin_ps = 1000;
    std::int64_t span_ps = 1'000'000;  // histogram covers [-span, span]
    double baseline_lo_ps = 200e3;
    double baseline_hi_ps = 1e6;
};

// Cross-correlation of all A/B pairs with |t_B - t_A| <= span, normalized to
// the mean of the baseline bins. Bins are centered on integer multiples of bin.
CorrelationCurve g2_unheralded(std::span<const std::int64_t> photon_a, std::span<const std::int64_t> photon_b,
                               const UnheraldedOptions& options = {});
// Streaming form: chunks of A/B timestamps in time order; every later
// timestamp is >= complete_until_ps.
class UnheraldedAccumulator {
public:
    explicit UnheraldedAccumulator(UnheraldedOptions options = {});
    void push(std::span<const std::int64_t> photon_a, std::span<const std::int64_t> photon_b,
              std::int64_t complete_until_ps);
    void finish();
    CorrelationCurve result() const;
    // Raw pair counts per delay bin (bin k is centered on (k - span / bin) * bin).
    const std::vector<double>& counts() const { return counts_; }

private:
    void process(std::int64_t limit);
    UnheraldedOptions o_;
    std::int64_t half_bins_ = 0, reach_ = 0;
    std::vector<double> counts_;
    std::vector<std::int64_t> a_, b_;
    std::size_t a_done_ = 0;
};

// g2 at the bin containing tau = 0.
Estimate g2_at_zero(const CorrelationCurve& c);

struct HeraldedG2Surface {
    std::vector<double> tau_a_ps, tau_b_ps;  // bin centers
    std::vector<double> g2;                  // [tau_a][tau_b], NaN where masked
    std::vector<double> error;
    std::vector<double> counts;
    EnergyWindow energy_window{0.0, 0.0};
    double heralds = 0.0;
    int masked = 0;
    double at(std::size_t ia, std::size_t ib) const { return g2[ia * tau_b_ps.size() + ib]; }
};

HeraldedG2Surface g2_heralded_surface(const correlate::CoincidenceCube& cube, const EnergyWindow& window);

// tau_A held in its coincidence bin (the one containing 0); curve over tau_B.
CorrelationCurve g2_time_averaged(const correlate::CoincidenceCube& cube, const EnergyWindow& window);

struct DiscreteG2Options {
    std::optional<EnergyWindow> energy_window;
    std::int64_t coincidence_window_ps = 5000;  // |tau| accepted as a coincidence
    int max_q = 20;
};

struct DiscreteG2 {
    std::vector<double> g2;      // index q = 0..max_q
    std::vector<double> error;
    std::vector<double> pairs;   // N_eAB[q] (average of both orderings for q >= 1)
    double heralds = 0, herald_a = 0, herald_b = 0;
    // Pooled g2 over q = 1..max_q.
    Estimate pooled_tail() const;
};

// Streaming accumulator; records must arrive in time order.
class DiscreteG2Accumulator {
public:
    explicit DiscreteG2Accumulator(DiscreteG2Options options = {});
    void add(const correlate::TripleRecord& r);
    void add(std::span<const correlate::TripleRecord> records);
    DiscreteG2 result() const;

private:
    DiscreteG2Options o_;
    std::vector<std::uint8_t> ring_;  // bit 0: A, bit 1: B
    std::size_t count_ = 0;
    std::int64_t n_a_ = 0, n_b_ = 0, both_ = 0;
    std::vector<std::int64_t> pos_, neg_;
};

DiscreteG2 g2_discrete(std::span<const correlate::TripleRecord> records, const DiscreteG2Options& options = {});

struct CarResult {
    double car = 0.0;
    double error = 0.0;
    double signal = 0.0;       // counts in the signal window
    double accidental = 0.0;   // estimated accidentals in the signal window
    double accidental_var = 0.0;
    double significance = 0.0; // (S - A) / sqrt(S + var(A))
    bool infinite = false;     // no accidentals observed
};

// 1D CAR from a delay histogram: bins whose centers fall in the windows.
CarResult car(const correlate::Histogram& h, std::pair<double, double> signal,
              const std::vector<std::pair<double, double>>& background);

// Threefold CAR on a (tau_A, tau_B) histogram: the accidental level under the
// signal box is the sum of the two single-coincidence bands and the
// photon-photon diagonal, minus twice the fully random plateau.
struct ThreefoldWindows {
    double signal_half_ps = 5000;
    double background_lo_ps = 20000;
    double background_hi_ps = 90000;
    // Signal cells (and the photon-pair accidental band) additionally require
    // |tau_A - tau_B| <= pair_half_ps.
    double pair_half_ps = std::numeric_limits<double>::infinity();
};
CarResult car_threefold(const correlate::Histogram& h2, const ThreefoldWindows& w = {});

// eta = N_ij / (N_j * eta_d * T) with binomial error; extra_variance adds the
// variance of any background subtraction applied to N_ij.
Estimate heralding_efficiency(double n_ij, double n_j, double detector_eff, double transmission,
                              double extra_variance = 0.0);

enum class CsiForm { Squared, Linear };

struct CsiOptions {
    std::int64_t bin_ps = 10000;
    int max_lag_bins = 20;
    CsiForm form = CsiForm::Squared;
    // Only electrons with loss >= min_loss_ev contribute to Delta E.
    std::optional<double> min_loss_ev;
    int jackknife_blocks = 50;
    std::int64_t run_end_ps = -1;  // -1: last event time (in-memory form only)
};

struct CsiResult {
    std::vector<double> tau_ps;
    std::vector<double> gamma;
    std::vector<double> error;
    std::vector<double> g_e_ph;     // g2_{E,A|B}(tau)
    double g_e = 0.0;               // <dE^2>/<dE>^2
    double g2_zero = 0.0;           // photon-photon g2(0) on the same grid
    double gamma_limit = 0.0;       // expected gamma for uncorrelated delays
};

CsiResult csi_gamma(const SplitStream& s, const CsiOptions& options = {});

// Streaming form on a fixed grid; run_end_ps must be known up front so the
// jackknife blocks have a fixed length.
class CsiAccumulator {
public:
    CsiAccumulator(CsiOptions options, std::int64_t run_end_ps);
    void push(const SplitStream& chunk, std::int64_t complete_until_ps);
    void finish();
    CsiResult result() const;

    struct Cell {
        std::int64_t bin;
        double v;
    };
    struct Block {
        double se = 0, se2 = 0, sn = 0, sa = 0, sb = 0, sab = 0;
        std::vector<double> sen;
    };

private:
    void process(std::int64_t complete_bin);
    Block& block(std::int64_t bin);
    CsiOptions o_;
    std::int64_t run_end_ = 0, per_block_ = 1, nbins_ = 1;
    std::vector<Cell> e_, a_, b_, n_;  // pending cells
    std::vector<Block> blocks_;
};

struct CoincidenceAreas {
    double electrons = 0;   // N
    double single = 0;      // sideband-1 area of electron-photon coincidences
    double single_var = 0;
    double pair = 0;        // sideband-2 area of electron-photon-photon coincidences
    double pair_var = 0;
};

struct CouplingEstimate {
    double g0 = 0.0;
    double error = 0.0;
    double chi2 = 0.0;      // residual of the two-equation fit
    bool uninformative = false;  // variance diverges (no detection information)
};

// Fits a single Poisson coupling G = g0^2 to D1 = N P1(G)(eta_A + eta_B) and
// D2 = N P2(G) 2 eta_A eta_B (binomial thinning of exactly m photons).
CouplingEstimate coupling_from_coincidences(const CoincidenceAreas& areas, double eta_a, double eta_b);

// Peak width from a delay histogram: background (mean over the given ranges)
// is subtracted, and FWHM = 2 sqrt(2 ln 2) * second-moment sigma inside
// |tau - center| <= half_window.
struct PeakWidth {
    double center_ps = 0, fwhm_ps = 0, stderr_ps = 0, net_counts = 0;
};
PeakWidth peak_width(const correlate::Histogram& h, double half_window_ps,
                     const std::vector<std::pair<double, double>>& background);

}  // namespace fockherald::stats
