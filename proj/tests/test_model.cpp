// Analytic physics: sideband populations, coupling mixtures, spectrum model
// and fits, checked against independent numerical oracles.
#include <doctest.h>

#include <boost/math/distributions/gamma.hpp>
#include <boost/math/distributions/poisson.hpp>
#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "fockherald/model.hpp"
#include "fockherald/simgen.hpp"

using namespace fockherald;

namespace {

double poisson_pmf(double mean, int m) {
    if (mean == 0.0) return m == 0 ? 1.0 : 0.0;
    return boost::math::pdf(boost::math::poisson_distribution<double>(mean), m);
}

// Mixture over G = g0^2 ~ Gamma(mean, std of g0) by double-exponential
// quadrature, which tolerates the integrable pdf singularity at 0 (shape < 1).
double mixture_by_quadrature(double mean_g0, double std_g0, int m) {
    const auto law = model::gamma_law_for({mean_g0, std_g0});
    const boost::math::gamma_distribution<double> gamma(law.shape, law.scale);
    auto f = [&](double g) { return g <= 0.0 ? 0.0 : boost::math::pdf(gamma, g) * poisson_pmf(g, m); };
    const double split = law.shape * law.scale;
    boost::math::quadrature::tanh_sinh<double> head;
    boost::math::quadrature::exp_sinh<double> tail;
    return head.integrate(f, 0.0, split) + tail.integrate([&](double g) { return f(g + split); });
}

double gauss(double x, double mu, double s) {
    const double z = (x - mu) / s;
    return std::exp(-0.5 * z * z) / (s * std::sqrt(2.0 * M_PI));
}

double trapezoid(const std::vector<double>& y, double h) {
    double s = 0.5 * (y.front() + y.back());
    for (std::size_t i = 1; i + 1 < y.size(); ++i) s += y[i];
    return s * h;
}

}  // namespace

TEST_CASE("sideband populations: zero coupling is all zero-loss") {
    const auto p = model::sideband_populations(0.0, 3).p;
    REQUIRE(p.size() == 4);
    CHECK(p[0] == 1.0);
    CHECK(p[1] == 0.0);
    CHECK(p[2] == 0.0);
    CHECK(p[3] == 0.0);
}

TEST_CASE("sideband populations match the Poisson law") {
    const auto p = model::sideband_populations(0.5, 2).p;
    CHECK(p[0] == doctest::Approx(0.7788).epsilon(1e-4));
    CHECK(p[1] == doctest::Approx(0.1947).epsilon(1e-3));
    CHECK(p[2] == doctest::Approx(0.02434).epsilon(1e-3));
    for (int m = 0; m <= 2; ++m) CHECK(p[m] == doctest::Approx(poisson_pmf(0.25, m)).epsilon(1e-12));
    const auto q = model::sideband_populations(0.32, 1).p;
    CHECK(q[1] / q[0] == doctest::Approx(0.1024).epsilon(1e-12));
}

TEST_CASE("sideband populations: consecutive ratio identity") {
    for (double g0 : {0.05, 0.32, 1.0, 2.7}) {
        const auto p = model::sideband_populations(g0, 25).p;
        for (int m = 0; m + 1 < static_cast<int>(p.size()); ++m) {
            if (p[m] < 1e-300) continue;
            CHECK(p[m + 1] / p[m] * (m + 1) == doctest::Approx(g0 * g0).epsilon(1e-12));
        }
    }
}

TEST_CASE("mixed populations: degenerate law equals pure Poisson") {
    const auto a = model::mixed_sideband_populations({0.5, 0.0}, 2).p;
    const auto b = model::sideband_populations(0.5, 2).p;
    for (std::size_t m = 0; m < a.size(); ++m) CHECK(a[m] == doctest::Approx(b[m]).epsilon(1e-14));
}

TEST_CASE("mixed populations match numerical integration of the mixture") {
    for (auto spec : {model::CouplingSpec{0.32, 0.24}, model::CouplingSpec{0.6, 0.1}, model::CouplingSpec{0.2, 0.3}}) {
        const auto p = model::mixed_sideband_populations(spec, 4).p;
        for (int m = 0; m <= 4; ++m) {
            CHECK(std::abs(p[m] - mixture_by_quadrature(spec.mean_g0, spec.std_g0, m)) < 1e-6);
        }
    }
}

TEST_CASE("mixed populations are normalized and super-Poissonian") {
    for (auto spec : {model::CouplingSpec{0.32, 0.24}, model::CouplingSpec{1.5, 0.4}, model::CouplingSpec{0.05, 0.01},
                      model::CouplingSpec{0.32, 0.0}}) {
        const int m_max = model::populations_cutoff(spec, 1e-15);
        const auto p = model::mixed_sideband_populations(spec, m_max).p;
        CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
        if (spec.std_g0 > 0.0) CHECK(p[2] * p[0] / (p[1] * p[1]) > 0.5);
        else CHECK(p[2] * p[0] / (p[1] * p[1]) == doctest::Approx(0.5).epsilon(1e-12));
        // Variance of k exceeds the mean for a dispersed coupling.
        double mean = 0, second = 0;
        for (std::size_t m = 0; m < p.size(); ++m) {
            mean += m * p[m];
            second += static_cast<double>(m * m) * p[m];
        }
        if (spec.std_g0 > 0.0) CHECK(second - mean * mean > mean);
    }
}

TEST_CASE("tail bound covers the truncated mass") {
    const model::CouplingSpec spec{0.9, 0.5};
    const auto full = model::mixed_sideband_populations(spec, model::populations_cutoff(spec, 1e-16)).p;
    const auto cut = model::mixed_sideband_populations(spec, 3);
    const double missing = std::accumulate(full.begin() + 4, full.end(), 0.0);
    CHECK(cut.tail_bound() >= missing - 1e-15);
}

TEST_CASE("coupling fit inverts the mixture") {
    {
        const auto p = model::sideband_populations(0.5, 2).p;
        const auto f = model::fit_coupling_from_sidebands(p[0], p[1], p[2]);
        CHECK(f.coupling.mean_g0 == doctest::Approx(0.5).epsilon(1e-9));
        CHECK(f.coupling.std_g0 == doctest::Approx(0.0).epsilon(1e-6));
        CHECK_FALSE(f.sub_poissonian);
    }
    for (auto spec : {model::CouplingSpec{0.32, 0.24}, model::CouplingSpec{0.7, 0.2}, model::CouplingSpec{0.15, 0.1}}) {
        const auto p = model::mixed_sideband_populations(spec, 2).p;
        const auto f = model::fit_coupling_from_sidebands(p[0], p[1], p[2]);
        CHECK(std::abs(f.coupling.mean_g0 - spec.mean_g0) < 1e-6);
        CHECK(std::abs(f.coupling.std_g0 - spec.std_g0) < 1e-6);
        CHECK(f.dispersion > 0.0);
    }
    // Ratios narrower than Poisson cannot come from any mixture.
    const auto f = model::fit_coupling_from_sidebands(0.8, 0.19, 0.005);
    CHECK(f.sub_poissonian);
}

TEST_CASE("predicted bunching law") {
    CHECK(model::predicted_bunching(1e8, 1e-8) == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(model::predicted_bunching(1e30, 1e-8) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(model::predicted_bunching(1e8, 2e-8) == model::predicted_bunching(2e8, 1e-8));
    for (double rate : {1e5, 3e6, 8.74e6}) {
        const double ex = model::predicted_bunching(rate, 1e-8) - 1.0;
        const double half = model::predicted_bunching(rate / 2.0, 1e-8) - 1.0;
        CHECK(half == doctest::Approx(2.0 * ex).epsilon(1e-13));
    }
}

TEST_CASE("spectrum model is a normalized density") {
    model::SpectrumParams p;
    p.coupling = {0.32, 0.24};
    p.continuum_prob = 0.1;
    model::EnergyGrid g{-6.0, 0.001, 40001};
    for (double cp : {0.0, 0.1, 0.4}) {
        p.continuum_prob = cp;
        p.continuum_decay = 1.0;
        g.size = cp > 0.0 ? 120001 : 40001;  // the continuum tail needs a longer range
        const auto d = model::spectrum_model(p, g);
        CHECK(trapezoid(d, g.step) == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("spectrum model equals a brute-force convolution") {
    // ZLP Gaussian convolved with the sideband comb, each order broadened by
    // m independent photon-energy draws, evaluated by O(N^2) quadrature.
    model::SpectrumParams p;
    p.zlp_sigma = 0.26;
    p.photon_energy = 0.9;
    p.coupling = {0.32, 0.0};
    p.pm_bandwidth = 0.065;
    const double s_pm = p.pm_bandwidth / (2.0 * std::sqrt(2.0 * std::log(2.0)));
    const auto pops = model::sideband_populations(0.32, 12).p;
    const double h = 0.004;
    std::vector<double> u;  // integration variable: the photon-induced loss
    for (double x = -1.0; x <= 13.0; x += h) u.push_back(x);
    std::vector<double> grid;
    for (double x = -1.5; x <= 4.5; x += 0.05) grid.push_back(x);
    const auto d = model::spectrum_model(p, grid);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        std::vector<double> integrand(u.size());
        for (std::size_t j = 0; j < u.size(); ++j) {
            double comb = 0.0;
            for (int m = 1; m < static_cast<int>(pops.size()); ++m) {
                comb += pops[m] * gauss(u[j], m * p.photon_energy, std::sqrt(static_cast<double>(m)) * s_pm);
            }
            integrand[j] = comb * gauss(grid[i] - u[j], 0.0, p.zlp_sigma);
        }
        // Order 0 is a delta in the loss: the convolution is the ZLP itself.
        const double oracle = pops[0] * gauss(grid[i], 0.0, p.zlp_sigma) + trapezoid(integrand, h);
        CHECK(std::abs(oracle - d[i]) < 1e-9);
    }
}

TEST_CASE("spectrum model continuum equals a convolution with the exponential") {
    model::SpectrumParams p;
    p.coupling = {0.0, 0.0};
    p.continuum_prob = 1.0;
    p.continuum_decay = 0.7;
    const double h = 2e-4;
    const model::EnergyGrid grid{-0.5, 0.05, 61};
    const auto d = model::spectrum_model(p, grid);
    for (std::size_t i : {0u, 10u, 16u, 30u, 60u}) {
        const double e = grid.start + grid.step * static_cast<double>(i);
        std::vector<double> f;
        for (double u = 0.0; u <= 25.0; u += h) f.push_back(std::exp(-u / 0.7) / 0.7 * gauss(e - u, 0.0, p.zlp_sigma));
        CHECK(trapezoid(f, h) == doctest::Approx(d[i]).epsilon(1e-6));
    }
}

TEST_CASE("spectrum model: delta-comb limit") {
    model::SpectrumParams p;
    p.coupling = {0.5, 0.0};
    p.pm_bandwidth = 1e-9;
    p.zlp_sigma = 0.01;
    const double bin = 0.002;
    std::vector<double> grid;
    for (int i = 0; i < 1800; ++i) grid.push_back(-0.45 + bin * i);
    const auto d = model::spectrum_model(p, grid);
    const auto pops = model::sideband_populations(0.5, 3).p;
    for (int m = 0; m <= 3; ++m) {
        double w = 0;
        for (std::size_t i = 0; i < grid.size(); ++i) {
            if (std::abs(grid[i] - m * 0.9) < 0.2) w += d[i] * bin;
        }
        CHECK(w == doctest::Approx(pops[m]).epsilon(1e-6));
    }
}

TEST_CASE("spectrum model is invariant under grid refinement") {
    model::SpectrumParams p;
    p.coupling = {0.32, 0.24};
    p.continuum_prob = 0.1;
    const model::EnergyGrid coarse{-1.5, 0.02, 301}, fine{-1.5, 0.01, 601};
    const auto a = model::spectrum_model(p, coarse);
    const auto b = model::spectrum_model(p, fine);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[2 * i]) <= 1e-4 * std::abs(a[i]) + 1e-300);
    CHECK_THROWS_AS(model::spectrum_model(p, model::EnergyGrid{0.0, 0.2, 10}), std::invalid_argument);
}

TEST_CASE("emg density: closed form against numerical convolution") {
    for (double x : {-2.0, -0.3, 0.0, 0.4, 3.0, 12.0}) {
        std::vector<double> f;
        const double h = 1e-4;
        for (double u = 0.0; u <= 40.0; u += h) f.push_back(1.3 * std::exp(-1.3 * u) * gauss(x - u, 0.1, 0.2));
        CHECK(model::emg_density(x, 0.1, 0.2, 1.3) == doctest::Approx(trapezoid(f, h)).epsilon(1e-6));
    }
    // Far in the Gaussian's left tail the scaled complementary error function keeps it finite.
    CHECK(std::isfinite(model::emg_density(-30.0, 0.0, 0.26, 1.0)));
    CHECK(model::emg_density(-30.0, 0.0, 0.26, 1.0) >= 0.0);
}

TEST_CASE("spectrum fit: self-consistency on noiseless model counts") {
    model::SpectrumParams truth;
    truth.coupling = {0.32, 0.24};
    truth.continuum_prob = 0.1;
    truth.continuum_decay = 1.0;
    model::SpectrumHistogram h;
    const int n = 200;
    for (int i = 0; i <= n; ++i) h.edges.push_back(-1.5 + 0.03 * i);
    model::EnergyGrid centers{-1.5 + 0.015, 0.03, static_cast<std::size_t>(n)};
    const auto d = model::spectrum_model(truth, centers);
    for (double v : d) h.counts.push_back(1e7 * 0.03 * v);
    model::SpectrumParams init = truth;
    init.coupling = {0.25, 0.1};
    init.zlp_sigma = 0.3;
    init.continuum_prob = 0.05;
    const auto f = model::fit_spectrum(h, init);
    CHECK(f.converged);
    CHECK(f.params.coupling.mean_g0 == doctest::Approx(0.32).epsilon(1e-4));
    CHECK(f.params.coupling.std_g0 == doctest::Approx(0.24).epsilon(1e-4));
    CHECK(f.params.zlp_sigma == doctest::Approx(0.26).epsilon(1e-4));
    CHECK(f.params.photon_energy == doctest::Approx(0.9).epsilon(1e-4));
    CHECK(f.params.continuum_prob == doctest::Approx(0.1).epsilon(1e-4));
}

TEST_CASE("spectrum fit: Monte Carlo round trip with a fixed coupling") {
    simgen::ExperimentConfig c;
    c.electron_rate_per_s = 1e7;
    c.duration_s = 0.1;
    c.electron.transmission = 1.0;
    c.physics.coupling = {0.32, 0.0};
    c.seed = 7;
    const auto out = simgen::generate(c, {false, false, false});
    model::SpectrumHistogram h;
    for (int i = 0; i <= 200; ++i) h.edges.push_back(-1.5 + 0.03 * i);
    h.counts.assign(200, 0.0);
    std::size_t electrons = 0;
    for (const auto& e : out.events.records) {
        if (e.kind != EventKind::Electron) continue;
        ++electrons;
        const int i = static_cast<int>(std::floor((e.energy_ev + 1.5) / 0.03));
        if (i >= 0 && i < 200) h.counts[i] += 1.0;
    }
    CHECK(electrons > 900000);
    const auto f = model::fit_spectrum(h, c.physics);
    CHECK(f.converged);
    CHECK(std::abs(f.params.coupling.mean_g0 - 0.32) < 0.01);
    CHECK_FALSE(f.dispersion_significant);
    CHECK(f.params.coupling.std_g0 == 0.0);
}

TEST_CASE("model validation rejects unphysical parameters") {
    model::SpectrumParams p;
    p.zlp_sigma = -1.0;
    CHECK_THROWS_AS(model::validate(p), std::invalid_argument);
    CHECK_THROWS_AS(model::validate(model::CouplingSpec{-0.1, 0.0}), std::invalid_argument);
    CHECK_THROWS_AS(model::validate(model::CouplingSpec{0.3, -0.1}), std::invalid_argument);
}
