// Sideband populations, Gamma-mixture coupling law and the loss-spectrum model.
#include "fockherald/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <boost/math/special_functions/gamma.hpp>

namespace fockherald::model {

namespace {

constexpr double kFwhmToSigma = 2.3548200450309493;  // 2 sqrt(2 ln 2)
constexpr double kInvSqrt2Pi = 0.3989422804014327;
constexpr double kSqrt2 = 1.4142135623730951;
constexpr double kInvSqrtPi = 0.5641895835477563;

// Gamma(a + 1/2) / Gamma(a), accurate for very large a as well.
double half_gamma_ratio(double a) {
    return 1.0 / boost::math::tgamma_delta_ratio(a, 0.5);
}

// E[g0]^2 / E[g0^2] as a function of the Gamma shape; monotone in a.
double moment_ratio(double a) {
    const double r = half_gamma_ratio(a);
    return r * r / a;
}

double gaussian(double x, double mu, double s) {
    const double z = (x - mu) / s;
    return kInvSqrt2Pi / s * std::exp(-0.5 * z * z);
}

}  // namespace

double SidebandPopulations::tail_bound() const {
    const double sum = std::accumulate(p.begin(), p.end(), 0.0);
    return std::max(0.0, 1.0 - sum);
}

void validate(const CouplingSpec& c) {
    if (!(c.mean_g0 >= 0.0) || !(c.std_g0 >= 0.0) || !std::isfinite(c.mean_g0) ||
        !std::isfinite(c.std_g0)) {
        throw std::invalid_argument("coupling: mean_g0 and std_g0 must be finite and >= 0");
    }
    if (c.mean_g0 == 0.0 && c.std_g0 > 0.0) {
        throw std::invalid_argument("coupling: a non-negative g0 with zero mean cannot have spread");
    }
}

void validate(const SpectrumParams& p) {
    validate(p.coupling);
    if (!(p.zlp_sigma > 0.0) || !(p.photon_energy > 0.0) || !(p.pm_bandwidth > 0.0) ||
        !(p.continuum_decay > 0.0)) {
        throw std::invalid_argument("spectrum: widths and energies must be > 0");
    }
    if (!(p.continuum_prob >= 0.0 && p.continuum_prob <= 1.0)) {
        throw std::invalid_argument("spectrum: continuum_prob must lie in [0, 1]");
    }
}

SidebandPopulations sideband_populations(double g0, int m_max) {
    if (!(g0 >= 0.0) || !std::isfinite(g0)) throw std::invalid_argument("g0 must be finite and >= 0");
    if (m_max < 0) throw std::invalid_argument("m_max must be >= 0");
    SidebandPopulations out;
    out.p.resize(static_cast<std::size_t>(m_max) + 1, 0.0);
    const double g = g0 * g0;
    out.p[0] = std::exp(-g);
    for (int m = 0; m < m_max; ++m) out.p[m + 1] = out.p[m] * g / static_cast<double>(m + 1);
    return out;
}

GammaLaw gamma_law_for(const CouplingSpec& coupling) {
    validate(coupling);
    GammaLaw law;
    const double m2 = coupling.mean_g0 * coupling.mean_g0;
    const double second = m2 + coupling.std_g0 * coupling.std_g0;
    if (coupling.std_g0 == 0.0 || coupling.mean_g0 == 0.0) {
        law.fixed_g = m2;
        return law;
    }
    const double target = m2 / second;
    if (1.0 - target < 1e-12) {
        law.fixed_g = second;
        return law;
    }
    // Bisection on log(a): moment_ratio rises monotonically from 0 to 1.
    double lo = std::log(1e-12), hi = std::log(1e14);
    for (int it = 0; it < 300 && hi - lo > 1e-15; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (moment_ratio(std::exp(mid)) < target) lo = mid;
        else hi = mid;
    }
    law.degenerate = false;
    law.shape = std::exp(0.5 * (lo + hi));
    law.scale = second / law.shape;
    return law;
}

CouplingSpec coupling_for(const GammaLaw& law) {
    if (law.degenerate) return {std::sqrt(law.fixed_g), 0.0};
    if (!(law.shape > 0.0) || !(law.scale > 0.0)) throw std::invalid_argument("gamma law: shape and scale must be > 0");
    const double mean = std::sqrt(law.scale) * half_gamma_ratio(law.shape);
    const double second = law.shape * law.scale;
    return {mean, std::sqrt(std::max(0.0, second - mean * mean))};
}

SidebandPopulations mixed_sideband_populations(const CouplingSpec& coupling, int m_max) {
    const GammaLaw law = gamma_law_for(coupling);
    if (law.degenerate) return sideband_populations(std::sqrt(law.fixed_g), m_max);
    if (m_max < 0) throw std::invalid_argument("m_max must be >= 0");
    SidebandPopulations out;
    out.p.resize(static_cast<std::size_t>(m_max) + 1, 0.0);
    const double u = law.scale / (1.0 + law.scale);
    out.p[0] = std::exp(-law.shape * std::log1p(law.scale));
    for (int m = 0; m < m_max; ++m) {
        out.p[m + 1] = out.p[m] * (m + law.shape) / static_cast<double>(m + 1) * u;
    }
    return out;
}

int populations_cutoff(const CouplingSpec& coupling, double tail, int hard_cap) {
    const auto pops = mixed_sideband_populations(coupling, hard_cap);
    double cum = 0.0;
    for (int m = 0; m <= hard_cap; ++m) {
        cum += pops.p[m];
        if (1.0 - cum <= tail) return m;
    }
    return hard_cap;
}

CouplingFit fit_coupling_from_sidebands(double p0, double p1, double p2) {
    if (!(p0 > 0.0) || !(p1 >= 0.0) || !(p2 >= 0.0)) {
        throw std::invalid_argument("sideband fit needs p0 > 0, p1 >= 0, p2 >= 0");
    }
    CouplingFit fit;
    if (p1 == 0.0) return fit;
    const double r1 = p1 / p0;
    const double r2 = p2 / p1;
    const double u = 2.0 * r2 - r1;  // negative-binomial success fraction
    fit.dispersion = u;
    const double tol = 1e-9 * r1;
    if (u <= tol) {
        fit.sub_poissonian = u < -tol;
        fit.dispersion = 0.0;
        fit.coupling = {std::sqrt(r1), 0.0};
        return fit;
    }
    if (u >= 1.0) throw std::invalid_argument("sideband ratios imply a divergent coupling distribution");
    GammaLaw law;
    law.degenerate = false;
    law.shape = r1 / u;
    law.scale = u / (1.0 - u);
    fit.coupling = coupling_for(law);
    return fit;
}

double predicted_bunching(double electron_rate, double bin_width) {
    if (!(electron_rate > 0.0) || !(bin_width > 0.0)) {
        throw std::invalid_argument("rate and bin width must be > 0");
    }
    return 1.0 + 1.0 / (electron_rate * bin_width);
}

EnergyGrid make_grid(const std::vector<double>& energies) {
    if (energies.size() < 2) throw std::invalid_argument("energy grid needs at least two points");
    EnergyGrid g{energies.front(), energies[1] - energies[0], energies.size()};
    if (!(g.step > 0.0)) throw std::invalid_argument("energy grid must be strictly increasing");
    for (std::size_t i = 1; i < energies.size(); ++i) {
        if (std::abs((energies[i] - energies[i - 1]) - g.step) > 1e-9 * g.step + 1e-12) {
            throw std::invalid_argument("energy grid must be uniform");
        }
    }
    return g;
}

double erfcx(double z) {
    if (z < 26.0) return std::exp(z * z) * std::erfc(z);
    // Asymptotic expansion; relative error below 1e-14 for z >= 26.
    const double iz2 = 1.0 / (2.0 * z * z);
    double term = 1.0, sum = 1.0;
    for (int n = 1; n <= 6; ++n) {
        term *= -(2.0 * n - 1.0) * iz2;
        sum += term;
    }
    return kInvSqrtPi / z * sum;
}

double emg_density(double x, double mu, double s, double lambda) {
    const double z = (mu + lambda * s * s - x) / (kSqrt2 * s);
    if (z >= 0.0) {
        const double d = (x - mu) / s;
        return 0.5 * lambda * std::exp(-0.5 * d * d) * erfcx(z);
    }
    return 0.5 * lambda * std::exp(lambda * (mu - x) + 0.5 * lambda * lambda * s * s) * std::erfc(z);
}

std::vector<double> spectrum_density(const SpectrumParams& params,
                                     const std::vector<double>& populations,
                                     const EnergyGrid& grid, double energy_offset) {
    std::vector<double> out(grid.size, 0.0);
    const double s_pm = params.pm_bandwidth / kFwhmToSigma;
    const double q = params.continuum_prob;
    const double lambda = 1.0 / params.continuum_decay;
    for (std::size_t m = 0; m < populations.size(); ++m) {
        const double w = populations[m];
        if (w == 0.0) continue;
        const double mu = static_cast<double>(m) * params.photon_energy + energy_offset;
        const double s = std::sqrt(params.zlp_sigma * params.zlp_sigma + static_cast<double>(m) * s_pm * s_pm);
        for (std::size_t i = 0; i < grid.size; ++i) {
            const double x = grid.at(i);
            double v = (1.0 - q) * gaussian(x, mu, s);
            if (q > 0.0) v += q * emg_density(x, mu, s, lambda);
            out[i] += w * v;
        }
    }
    return out;
}

std::vector<double> spectrum_model(const SpectrumParams& params, const EnergyGrid& grid) {
    validate(params);
    if (grid.size < 2 || !(grid.step > 0.0)) throw std::invalid_argument("energy grid must be increasing");
    if (grid.step > params.zlp_sigma / 4.0) {
        throw std::invalid_argument("energy grid coarser than zlp_sigma/4 would alias the zero-loss peak");
    }
    const int m_max = populations_cutoff(params.coupling, 1e-16);
    const auto pops = mixed_sideband_populations(params.coupling, m_max);
    return spectrum_density(params, pops.p, grid);
}

std::vector<double> spectrum_model(const SpectrumParams& params, const std::vector<double>& grid) {
    return spectrum_model(params, make_grid(grid));
}

}  // namespace fockherald::model
