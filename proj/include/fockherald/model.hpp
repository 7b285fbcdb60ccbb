// Analytic physics of the electron-photon scattering process: sideband
// populations, coupling-distribution mixtures, the loss-spectrum model and
// its least-squares fit.
#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace fockherald::model {

// Coupling constant g0 described by its mean and spread over the beam.
// std_g0 = 0 is a fixed coupling (pure Poisson photon statistics).
struct CouplingSpec {
    double mean_g0 = 0.0;
    double std_g0 = 0.0;
};

// Gamma law for G = g0^2 (shape a, scale theta). The Poisson mixture over
// this law is a negative binomial.
struct GammaLaw {
    double shape = 0.0;
    double scale = 0.0;
    bool degenerate = true;  // true -> fixed coupling, G = g0^2 exactly
    double fixed_g = 0.0;    // G when degenerate
};

struct SidebandPopulations {
    std::vector<double> p;  // p[m] for m = 0..m_max
    // Upper bound on the probability mass beyond m_max.
    double tail_bound() const;
};

struct SpectrumParams {
    double zlp_sigma = 0.26;       // eV, Gaussian sigma of the zero-loss peak
    double photon_energy = 0.9;    // eV, quantum of loss per emitted photon
    CouplingSpec coupling{0.32, 0.0};
    double continuum_prob = 0.0;   // probability of broadband material loss
    double continuum_decay = 1.0;  // eV, exponential decay constant
    double pm_bandwidth = 0.065;   // eV FWHM of a single emitted photon's energy
};

void validate(const CouplingSpec& c);
void validate(const SpectrumParams& p);

// Pure Poisson populations p_m = exp(-g0^2) g0^(2m) / m!.
SidebandPopulations sideband_populations(double g0, int m_max);

GammaLaw gamma_law_for(const CouplingSpec& coupling);
CouplingSpec coupling_for(const GammaLaw& law);

// Poisson mixture over the Gamma law of G. Reduces to the pure Poisson
// populations when std_g0 = 0.
SidebandPopulations mixed_sideband_populations(const CouplingSpec& coupling, int m_max);

// Smallest m_max for which the populations capture all but `tail` of the mass.
int populations_cutoff(const CouplingSpec& coupling, double tail = 1e-15, int hard_cap = 400);

struct CouplingFit {
    CouplingSpec coupling;
    bool sub_poissonian = false;  // ratios incompatible with any non-negative variance
    double dispersion = 0.0;      // u = 2 p2/p1 - p1/p0 (0 for Poisson)
};

// Inverts the mixture from the first three sideband populations.
CouplingFit fit_coupling_from_sidebands(double p0, double p1, double p2);

// g2(0) = 1 + 1/(rate * bin) for Poisson photon numbers per electron.
double predicted_bunching(double electron_rate, double bin_width);

struct EnergyGrid {
    double start = 0.0;
    double step = 0.0;
    std::size_t size = 0;
    double at(std::size_t i) const { return start + step * static_cast<double>(i); }
};

EnergyGrid make_grid(const std::vector<double>& energies);

// Loss-spectrum probability density (1/eV) at every grid point, normalized
// over the whole real line. spectrum_density takes explicit per-order weights
// (the fit treats sideband areas as free parameters).
std::vector<double> spectrum_model(const SpectrumParams& params, const EnergyGrid& grid);
std::vector<double> spectrum_model(const SpectrumParams& params, const std::vector<double>& grid);
std::vector<double> spectrum_density(const SpectrumParams& params,
                                     const std::vector<double>& populations,
                                     const EnergyGrid& grid, double energy_offset = 0.0);

// Exponentially modified Gaussian density: Gaussian(mu, s) convolved with
// an exponential of rate lambda on [0, inf).
double emg_density(double x, double mu, double s, double lambda);
double erfcx(double z);

struct SpectrumHistogram {
    std::vector<double> edges;   // size n + 1, uniform
    std::vector<double> counts;  // size n, non-negative
};

struct FitOptions {
    int max_order = -1;               // highest free sideband area; -1 = auto from range
    bool fit_pm_bandwidth = true;
    bool fit_continuum = true;
    bool fit_offset = true;
    int max_iterations = 400;
    double step_tolerance = 1e-8;
    // Dispersion of the coupling reported only if significant at this many sigma;
    // otherwise the fixed-coupling solution (std 0) is returned.
    double dispersion_significance = 2.0;
};

struct SpectrumFit {
    SpectrumParams params;
    SidebandPopulations populations;  // normalized sideband areas
    std::vector<double> area_stderr;
    double energy_offset = 0.0;
    double reduced_chi2 = 0.0;
    int iterations = 0;
    bool converged = false;
    bool sub_poissonian = false;
    bool dispersion_significant = false;
    double dispersion = 0.0;
    double dispersion_stderr = 0.0;
    double mean_g0_stderr = 0.0;
    std::string message;
};

SpectrumFit fit_spectrum(const SpectrumHistogram& histogram, const SpectrumParams& init,
                         const FitOptions& options = {});

// Linear least-squares areas of fixed-shape sideband templates (order
// 0..max_order, shape from `shape`) in a histogram whose counts may be
// background-subtracted (negative allowed). `variances` weights each bin.
struct AreaFit {
    std::vector<double> areas;      // counts attributed to each order
    std::vector<double> variances;  // diagonal of the covariance
};
AreaFit fit_sideband_areas(const SpectrumHistogram& histogram, const std::vector<double>& variances,
                           const SpectrumParams& shape, double energy_offset, int max_order);

}  // namespace fockherald::model
