// Estimators: g2 family, CAR, heralding efficiency, Cauchy-Schwarz gamma,
// coincidence-based coupling and peak widths.
#include <doctest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <numeric>
#include <random>

#include "brute_force.hpp"
#include "fockherald/analysis.hpp"
#include "fockherald/config.hpp"
#include "fockherald/correlate.hpp"
#include "fockherald/model.hpp"
#include "fockherald/simgen.hpp"
#include "fockherald/stats.hpp"

using namespace fockherald;

namespace {

std::vector<std::int64_t> poisson_times(std::mt19937_64& rng, double rate_per_s, double duration_s) {
    std::exponential_distribution<double> gap(rate_per_s / 1e12);
    std::vector<std::int64_t> t;
    for (double x = gap(rng); x < duration_s * 1e12; x += gap(rng)) t.push_back(static_cast<std::int64_t>(x));
    return t;
}

// Histogram with unit bins centered on the integers -n..n.
correlate::Histogram unit_histogram(int n, double fill) {
    correlate::Histogram h;
    h.axis_names = {"tau_ps"};
    std::vector<double> edges;
    for (int i = -n; i <= n + 1; ++i) edges.push_back(i - 0.5);
    h.edges = {edges};
    h.values.assign(static_cast<std::size_t>(2 * n + 1), fill);
    return h;
}

// Independent electron (uniform loss in [0.45, 1.35] eV) and photon streams.
SplitStream independent_streams(std::mt19937_64& rng, double re, double ra, double rb, double duration) {
    SplitStream s;
    s.electron_t = poisson_times(rng, re, duration);
    std::uniform_real_distribution<float> e(0.45f, 1.35f);
    for (std::size_t i = 0; i < s.electron_t.size(); ++i) s.electron_e.push_back(e(rng));
    s.photon_a = poisson_times(rng, ra, duration);
    s.photon_b = poisson_times(rng, rb, duration);
    return s;
}

std::vector<correlate::TripleRecord> matched(const SplitStream& s, std::int64_t max_delay = 100000) {
    auto r = correlate::match_coincidences(s, max_delay);
    correlate::dedupe_true_coincidences(r);
    return r;
}

// Small cube with factorized counts: N_eAB = f(a) g(b) h(e) K, N_eA = f h K,
// N_eB = g h K, N_e = h K.
correlate::CoincidenceCube factorized_cube() {
    correlate::CoincidenceCube c;
    c.axes.tau_lo_ps = -2500;
    c.axes.tau_bin_ps = 1000;
    c.axes.tau_bins = 5;
    c.axes.e_lo = 0.0;
    c.axes.e_bin = 0.3;
    c.axes.e_bins = 6;
    const int nt = 5, ne = 6;
    auto f = [](int a) { return 1 + a % 3; };
    auto g = [](int b) { return 2 + (b * 7) % 4; };
    auto h = [](int e) { return 1 + e % 2; };
    const std::int64_t k = 100;
    c.counts.assign(static_cast<std::size_t>(nt * nt * ne), 0);
    c.marginal_a.assign(static_cast<std::size_t>(nt * ne), 0);
    c.marginal_b.assign(static_cast<std::size_t>(nt * ne), 0);
    c.electrons.assign(static_cast<std::size_t>(ne), 0);
    for (int e = 0; e < ne; ++e) {
        c.electrons[static_cast<std::size_t>(e)] = h(e) * k;
        for (int a = 0; a < nt; ++a) {
            c.marginal_a[c.at2(a, e)] = f(a) * h(e) * k;
            c.marginal_b[c.at2(a, e)] = g(a) * h(e) * k;
            for (int b = 0; b < nt; ++b) c.counts[c.at(a, b, e)] = f(a) * g(b) * h(e) * k;
        }
    }
    return c;
}

config::RunConfig lossless_config(double g0, double duration_s, std::uint64_t seed) {
    config::RunConfig c;
    auto& x = c.experiment;
    x.seed = seed;
    x.electron_rate_per_s = 1e5;
    x.duration_s = duration_s;
    x.physics.coupling = {g0, 0.0};
    x.physics.zlp_sigma = 0.05;
    x.physics.continuum_prob = 0.0;
    x.detected_mode_fraction = 1.0;
    x.splitter_ratio = 0.5;
    for (auto* ch : {&x.channel_a, &x.channel_b}) {
        ch->efficiency = 1.0;
        ch->dead_time_s = 0.0;
        ch->dark_rate_per_s = 0.0;
        ch->jitter_fwhm_s = 0.22e-9;
    }
    x.electron.transmission = 1.0;
    c.analysis.threads = 1;
    return c;
}

const report::Series& series(const std::vector<report::Report>& reports, const std::string& id, const std::string& name) {
    for (const auto& r : reports) {
        if (r.id() == id) {
            if (const auto* s = r.find(name)) return *s;
        }
    }
    throw std::runtime_error("missing " + id + "/" + name);
}

// Plain mean of the unmasked cells and its standard error from the scatter;
// g2 = n N_e / (N_eA N_eB) is unbiased cell by cell, an inverse-variance
// weighted mean is not (its weights depend on the fluctuating counts).
std::pair<double, double> cell_mean(const stats::HeraldedG2Surface& s) {
    double sum = 0, sum2 = 0;
    double n = 0;
    for (double v : s.g2) {
        if (std::isnan(v)) continue;
        sum += v;
        sum2 += v * v;
        n += 1;
    }
    const double mean = sum / n;
    return {mean, std::sqrt((sum2 / n - mean * mean) / n)};
}

}  // namespace

TEST_CASE("order windows are m*hw +/- hw/2") {
    CHECK(stats::order_window(1).first == doctest::Approx(0.45));
    CHECK(stats::order_window(1).second == doctest::Approx(1.35));
    CHECK(stats::order_window(2, 1.0).first == doctest::Approx(1.5));
    CHECK(stats::order_window(2, 1.0).second == doctest::Approx(2.5));
}

TEST_CASE("CAR: 100 signal counts over 2 scaled accidentals is 49") {
    auto h = unit_histogram(10, 2.0);
    h.values[10] = 100.0;  // tau = 0
    const auto c = stats::car(h, {-0.5, 0.5}, {{-9.0, -5.0}, {5.0, 9.0}});
    CHECK(c.signal == 100.0);
    CHECK(c.accidental == doctest::Approx(2.0));
    CHECK(c.car == doctest::Approx(49.0));
    CHECK(c.error > 0.0);
    // Poisson propagation: var(CAR) = S/A^2 + S^2 var(A)/A^4 with var(A) = 2/10.
    CHECK(c.error == doctest::Approx(std::sqrt(100.0 / 4.0 + 100.0 * 100.0 * 0.2 / 16.0)).epsilon(1e-9));
    CHECK_FALSE(c.infinite);
}

TEST_CASE("CAR: zero accidentals is flagged infinite") {
    auto h = unit_histogram(10, 0.0);
    h.values[10] = 7.0;
    const auto c = stats::car(h, {-0.5, 0.5}, {{5.0, 9.0}});
    CHECK(c.infinite);
    CHECK(std::isinf(c.car));
}

TEST_CASE("CAR is invariant under rate scaling and time translation") {
    std::mt19937_64 rng(41);
    std::poisson_distribution<int> bg(40), sig(900);
    auto h = unit_histogram(30, 0.0);
    for (auto& v : h.values) v = bg(rng);
    h.values[30] += sig(rng);
    const auto base = stats::car(h, {-1.5, 1.5}, {{-25.0, -10.0}, {10.0, 25.0}});
    auto scaled = h;
    for (auto& v : scaled.values) v *= 3.0;
    CHECK(stats::car(scaled, {-1.5, 1.5}, {{-25.0, -10.0}, {10.0, 25.0}}).car == doctest::Approx(base.car).epsilon(1e-12));
    auto shifted = h;
    for (auto& e : shifted.edges[0]) e += 1e6;
    CHECK(stats::car(shifted, {1e6 - 1.5, 1e6 + 1.5}, {{1e6 - 25.0, 1e6 - 10.0}, {1e6 + 10.0, 1e6 + 25.0}}).car ==
          doctest::Approx(base.car).epsilon(1e-12));
}

TEST_CASE("threefold CAR on a synthetic (tau_A, tau_B) plane") {
    // Plateau 1 count per cell, bands of 4 extra counts along each single
    // coincidence axis and the diagonal, 200 true triples at the origin.
    correlate::Histogram h;
    h.axis_names = {"tau_a_ps", "tau_b_ps"};
    const int n = 201;  // 1 ns cells, centers -100..100 ns
    std::vector<double> edges;
    for (int i = 0; i <= n; ++i) edges.push_back((i - 100 - 0.5) * 1000.0);
    h.edges = {edges, edges};
    h.values.assign(static_cast<std::size_t>(n * n), 1.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const int a = i - 100, b = j - 100;
            double v = 1.0;
            if (std::abs(a) <= 2) v += 4.0;
            if (std::abs(b) <= 2) v += 4.0;
            if (std::abs(a - b) <= 2) v += 4.0;
            h.values[static_cast<std::size_t>(i * n + j)] = v;
        }
    }
    h.values[100 * n + 100] += 200.0;
    stats::ThreefoldWindows w;
    w.signal_half_ps = 500;
    const auto c = stats::car_threefold(h, w);
    // Signal box is the single origin cell: 1 + 3*4 accidentals + 200 true.
    CHECK(c.signal == doctest::Approx(213.0));
    CHECK(c.accidental == doctest::Approx(13.0).epsilon(1e-9));
    CHECK(c.car == doctest::Approx(200.0 / 13.0).epsilon(1e-9));
}

TEST_CASE("heralding efficiency: definition examples and flags") {
    const auto half = stats::heralding_efficiency(10, 1000, 0.02, 1.0);
    CHECK(half.value == doctest::Approx(0.5));
    CHECK_FALSE(half.flagged);
    CHECK(half.error > 0.0);
    const auto one = stats::heralding_efficiency(1000, 1000, 1.0, 1.0);
    CHECK(one.value == 1.0);
    const auto over = stats::heralding_efficiency(30, 1000, 0.02, 1.0);
    CHECK(over.value == doctest::Approx(1.5));
    CHECK(over.flagged);
    CHECK_FALSE(over.note.empty());
    CHECK_THROWS_AS(stats::heralding_efficiency(1, 0, 0.5, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(stats::heralding_efficiency(1, 10, 0.0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(stats::heralding_efficiency(1, 10, 0.5, 1.5), std::invalid_argument);
}

TEST_CASE("unheralded g2 of independent Poisson streams is 1") {
    std::mt19937_64 rng(42);
    const auto a = poisson_times(rng, 2e5, 2.0);
    const auto b = poisson_times(rng, 2e5, 2.0);
    stats::UnheraldedOptions o;
    o.bin_ps = 20000;
    o.span_ps = 1'000'000;
    const auto c = stats::g2_unheralded(a, b, o);
    double chi2 = 0;
    int beyond3 = 0;
    for (std::size_t i = 0; i < c.g2.size(); ++i) {
        const double z = (c.g2[i] - 1.0) / c.error[i];
        chi2 += z * z;
        beyond3 += std::abs(z) > 3.0;
    }
    const boost::math::chi_squared_distribution<double> law(static_cast<double>(c.g2.size()));
    CHECK(chi2 < boost::math::quantile(law, 0.999));
    CHECK(beyond3 <= 2);  // 101 bins: 0.27 expected beyond 3 sigma
    const auto z0 = stats::g2_at_zero(c);
    CHECK(std::abs(z0.value - 1.0) < 3.0 * z0.error);
    CHECK(c.baseline_level > 0.0);
}

TEST_CASE("unheralded g2: streaming accumulator equals the in-memory form") {
    std::mt19937_64 rng(43);
    const auto a = poisson_times(rng, 1e6, 0.05);
    const auto b = poisson_times(rng, 1e6, 0.05);
    stats::UnheraldedOptions o;
    const auto whole = stats::g2_unheralded(a, b, o);
    stats::UnheraldedAccumulator acc(o);
    std::size_t ia = 0, ib = 0;
    for (std::int64_t edge = 1'000'000; ; edge += 3'777'777) {
        const auto ea = std::lower_bound(a.begin() + static_cast<std::ptrdiff_t>(ia), a.end(), edge) - a.begin();
        const auto eb = std::lower_bound(b.begin() + static_cast<std::ptrdiff_t>(ib), b.end(), edge) - b.begin();
        acc.push(std::span(a).subspan(ia, static_cast<std::size_t>(ea) - ia),
                 std::span(b).subspan(ib, static_cast<std::size_t>(eb) - ib), edge);
        ia = static_cast<std::size_t>(ea);
        ib = static_cast<std::size_t>(eb);
        if (ia == a.size() && ib == b.size()) break;
    }
    acc.finish();
    const auto streamed = acc.result();
    CHECK(streamed.counts == whole.counts);
    CHECK(streamed.g2 == whole.g2);
}

TEST_CASE("unheralded g2: empty baseline is an undefined normalization") {
    const std::vector<std::int64_t> a{0}, b{10};
    CHECK_THROWS_AS(stats::g2_unheralded(a, b), std::domain_error);
}

TEST_CASE("unheralded g2: error bars shrink as 1/sqrt(duration)") {
    std::mt19937_64 rng(44);
    stats::UnheraldedOptions o;
    o.bin_ps = 20000;
    const auto short_run = stats::g2_unheralded(poisson_times(rng, 2e5, 1.0), poisson_times(rng, 2e5, 1.0), o);
    const auto long_run = stats::g2_unheralded(poisson_times(rng, 2e5, 2.0), poisson_times(rng, 2e5, 2.0), o);
    const double ratio = stats::g2_at_zero(short_run).error / stats::g2_at_zero(long_run).error;
    CHECK(ratio == doctest::Approx(std::sqrt(2.0)).epsilon(0.10));
}

TEST_CASE("electron bunching follows 1 + 1/(R tau)") {
    for (double bin_us : {1.0, 4.0}) {
        simgen::ExperimentConfig c;
        c.electron_rate_per_s = 1e6;
        c.duration_s = 1.0;
        c.seed = 45;
        c.physics.coupling = {1.0, 0.0};
        c.physics.continuum_prob = 0.0;
        c.detected_mode_fraction = 1.0;
        for (auto* ch : {&c.channel_a, &c.channel_b}) {
            ch->efficiency = 0.5;
            ch->dead_time_s = 0.0;
            ch->dark_rate_per_s = 0.0;
        }
        const auto s = split(simgen::generate(c, {false, false, false}).events);
        stats::UnheraldedOptions o;
        o.bin_ps = static_cast<std::int64_t>(bin_us * 1e6);
        o.span_ps = 100 * o.bin_ps;
        o.baseline_lo_ps = 20.0 * static_cast<double>(o.bin_ps);
        o.baseline_hi_ps = 100.0 * static_cast<double>(o.bin_ps);
        const auto z = stats::g2_at_zero(stats::g2_unheralded(s.photon_a, s.photon_b, o));
        const double expected = model::predicted_bunching(c.electron_rate_per_s, bin_us * 1e-6);
        CHECK((z.value - 1.0) == doctest::Approx(expected - 1.0).epsilon(0.10));
    }
}

TEST_CASE("heralded surface and time-averaged curve of a factorized cube are 1") {
    const auto c = factorized_cube();
    const auto s = stats::g2_heralded_surface(c, {0.0, 1.8});
    CHECK(s.masked == 0);
    for (double v : s.g2) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
    const auto t = stats::g2_time_averaged(c, {0.3, 1.2});
    for (double v : t.g2) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("heralded surface masks empty marginal cells") {
    auto c = factorized_cube();
    for (int e = 0; e < c.axes.e_bins; ++e) c.marginal_a[c.at2(0, e)] = 0;
    const auto s = stats::g2_heralded_surface(c, {0.0, 1.8});
    CHECK(s.masked == c.axes.tau_bins);
    CHECK(std::isnan(s.at(0, 0)));
    CHECK_FALSE(std::isnan(s.at(1, 0)));
}

TEST_CASE("g2 estimators on independent Poisson streams are 1") {
    std::mt19937_64 rng(46);
    const auto s = independent_streams(rng, 2e6, 3e5, 3e5, 4.0);
    const auto r = matched(s);
    const auto cube = correlate::build_cube(r, {});

    // Discrete g2 for every q.
    stats::DiscreteG2Options o;
    o.energy_window = stats::order_window(1);
    const auto d = stats::g2_discrete(r, o);
    for (std::size_t q = 0; q < d.g2.size(); ++q) CHECK(std::abs(d.g2[q] - 1.0) < 4.0 * d.error[q]);
    const auto pooled = d.pooled_tail();
    CHECK(std::abs(pooled.value - 1.0) < 3.0 * pooled.error);

    // Heralded surface: mean over the cells.
    const auto [mean, err] = cell_mean(stats::g2_heralded_surface(cube, stats::order_window(1)));
    CHECK(std::abs(mean - 1.0) < 3.0 * err);

    // Time-averaged curve.
    const auto t = stats::g2_time_averaged(cube, stats::order_window(1));
    double chi2 = 0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < t.g2.size(); ++i) {
        if (!(t.error[i] > 0) || !std::isfinite(t.g2[i])) continue;
        chi2 += std::pow((t.g2[i] - 1.0) / t.error[i], 2);
        ++used;
    }
    REQUIRE(used > 50);
    CHECK(chi2 < boost::math::quantile(boost::math::chi_squared_distribution<double>(static_cast<double>(used)), 0.999));
}

TEST_CASE("heralded surface collapses to 1 when the photon pairing is shuffled") {
    simgen::ExperimentConfig c;
    c.electron_rate_per_s = 1e6;
    c.duration_s = 0.5;
    c.seed = 47;
    c.physics.coupling = {0.6, 0.0};
    c.physics.continuum_prob = 0.0;
    c.detected_mode_fraction = 1.0;
    for (auto* ch : {&c.channel_a, &c.channel_b}) {
        ch->efficiency = 0.3;
        ch->dead_time_s = 0.0;
    }
    auto r = matched(split(simgen::generate(c, {false, false, false}).events));
    // Correlated data: single-photon heralds antibunch at the origin.
    const auto corr = stats::g2_heralded_surface(correlate::build_cube(r, {}), stats::order_window(1));
    const auto i0 = static_cast<std::size_t>(correlate::CubeAxes{}.tau_index(0));
    CHECK(corr.at(i0, i0) < 0.5);
    // Shuffle the B delays across electrons: pairing destroyed.
    std::mt19937_64 rng(48);
    std::vector<std::int64_t> tb;
    for (const auto& x : r) tb.push_back(x.tau_b);
    std::shuffle(tb.begin(), tb.end(), rng);
    for (std::size_t i = 0; i < r.size(); ++i) r[i].tau_b = tb[i];
    const auto sh = stats::g2_heralded_surface(correlate::build_cube(r, {}), stats::order_window(1));
    const auto [mean, err] = cell_mean(sh);
    CHECK(std::abs(mean - 1.0) < 3.0 * err);
    CHECK(std::abs(sh.at(i0, i0) - 1.0) < 4.0 * sh.error[i0 * sh.tau_b_ps.size() + i0]);
}

TEST_CASE("discrete g2: lossless single photons antibunch; photon pairs follow the binomial split") {
    const auto cfg = lossless_config(0.3, 2.0, 49);
    const auto s = split(simgen::generate(cfg.experiment, {false, false, false}).events);
    const auto r = matched(s);
    stats::DiscreteG2Options o;
    o.energy_window = stats::order_window(1);
    const auto m1 = stats::g2_discrete(r, o);
    CHECK(m1.g2[0] < 0.01);
    CHECK(m1.heralds > 10000);
    o.energy_window = stats::order_window(2);
    const auto m2 = stats::g2_discrete(r, o);
    // Two photons split independently 50/50: P(A and B) = 1/2, P(A) = P(B) = 3/4,
    // so g2[0] = (1/2) / (3/4)^2 = 8/9, against ~0 for single photons.
    CHECK(std::abs(m2.g2[0] - 8.0 / 9.0) < 3.0 * m2.error[0]);
    // Binomial(heralds, 1/2) count of A-and-B heralds.
    CHECK(std::abs(m2.pairs[0] - 0.5 * m2.heralds) < 3.0 * std::sqrt(0.25 * m2.heralds));
    CHECK(m2.g2[0] > 50.0 * m1.g2[0] + 0.5);
    CHECK(std::abs(m2.pooled_tail().value - 1.0) < 3.0 * m2.pooled_tail().error);

    const auto h = stats::g2_heralded_surface(correlate::build_cube(r, {}), stats::order_window(1));
    const auto i0 = static_cast<std::size_t>(correlate::CubeAxes{}.tau_index(0));
    CHECK(h.at(i0, i0) < 0.01);
}

TEST_CASE("discrete g2: streaming accumulator equals the batch form") {
    std::mt19937_64 rng(50);
    const auto r = matched(independent_streams(rng, 1e6, 2e5, 2e5, 0.2));
    stats::DiscreteG2Options o;
    const auto whole = stats::g2_discrete(r, o);
    stats::DiscreteG2Accumulator acc(o);
    std::size_t pos = 0;
    std::uniform_int_distribution<std::size_t> len(0, 5000);
    while (pos < r.size()) {
        const std::size_t n = std::min(r.size() - pos, len(rng));
        acc.add(std::span(r).subspan(pos, n));
        pos += n;
    }
    const auto streamed = acc.result();
    CHECK(streamed.g2 == whole.g2);
    CHECK(streamed.pairs == whole.pairs);
    CHECK(streamed.heralds == whole.heralds);
}

TEST_CASE("coupling from coincidences: exact areas invert exactly") {
    const double g0 = 0.3, G = g0 * g0, n = 1e7, ea = 0.5, eb = 0.5;
    stats::CoincidenceAreas a;
    a.electrons = n;
    a.single = n * G * std::exp(-G) * (ea + eb);
    a.single_var = a.single;
    a.pair = n * 0.5 * G * G * std::exp(-G) * 2.0 * ea * eb;
    a.pair_var = a.pair;
    const auto est = stats::coupling_from_coincidences(a, ea, eb);
    CHECK(est.g0 == doctest::Approx(0.3).epsilon(1e-6));
    CHECK(est.chi2 < 1e-6);
    CHECK(est.error > 0.0);
    CHECK_FALSE(est.uninformative);
}

TEST_CASE("coupling from coincidences: zero efficiency is uninformative") {
    stats::CoincidenceAreas a;
    a.electrons = 1e6;
    const auto est = stats::coupling_from_coincidences(a, 0.0, 0.0);
    CHECK(est.uninformative);
    CHECK(std::isinf(est.error));
    CHECK_THROWS_AS(stats::coupling_from_coincidences(a, 1.5, 0.0), std::invalid_argument);
    // Vanishing efficiency: the error grows without bound.
    stats::CoincidenceAreas tiny;
    tiny.electrons = 1e6;
    const auto e1 = stats::coupling_from_coincidences(tiny, 1e-3, 1e-3);
    const auto e2 = stats::coupling_from_coincidences(tiny, 1e-6, 1e-6);
    CHECK((e2.uninformative || e2.error > 10.0 * e1.error));
}

TEST_CASE("coupling from coincidences: lossless simulation recovers g0 = 0.3") {
    const auto cfg = lossless_config(0.3, 5.0, 51);
    const auto products = analysis::analyze_simulation(cfg);
    const auto out = analysis::run_estimators(products, cfg, {{"coupling", {}}}, {});
    REQUIRE(out.failures.empty());
    const auto& g0 = series(out.reports, "coupling", "g0");
    CHECK(std::abs(g0.values[0] - 0.3) < 0.01);
    CHECK(g0.error[0] < 0.01);
}

TEST_CASE("peak width of a Gaussian peak on a flat background") {
    correlate::Histogram h;
    h.axis_names = {"tau_ps"};
    std::vector<double> edges;
    const double bin = 100.0, sigma = 1200.0, center = 350.0;
    for (int i = -1000; i <= 1000; ++i) edges.push_back(i * bin - bin / 2);
    h.edges = {edges};
    for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
        const double x = 0.5 * (edges[i] + edges[i + 1]);
        h.values.push_back(50.0 + 1e5 * bin / (sigma * std::sqrt(2 * M_PI)) * std::exp(-0.5 * std::pow((x - center) / sigma, 2)));
    }
    const auto w = stats::peak_width(h, 10000.0, {{-90000.0, -20000.0}, {20000.0, 90000.0}});
    CHECK(w.center_ps == doctest::Approx(center).epsilon(0.01));
    CHECK(w.fwhm_ps == doctest::Approx(2.0 * std::sqrt(2.0 * std::log(2.0)) * sigma).epsilon(0.01));
    CHECK(w.net_counts == doctest::Approx(1e5).epsilon(0.01));
}

TEST_CASE("CSI: classical control respects the Cauchy-Schwarz bound") {
    simgen::ExperimentConfig c;
    c.electron_rate_per_s = 1e6;
    c.duration_s = 2.0;
    c.seed = 52;
    c.physics.coupling = {0.5, 0.0};
    c.physics.continuum_prob = 0.0;
    c.detected_mode_fraction = 1.0;
    c.channel_a.efficiency = c.channel_b.efficiency = 0.5;
    const auto s = split(simgen::classical_control(c));
    const auto r = stats::csi_gamma(s);
    for (std::size_t i = 0; i < r.gamma.size(); ++i) CHECK(r.gamma[i] <= 1.0 + 3.0 * r.error[i]);
}

TEST_CASE("CSI: quantum simulation violates the bound at zero delay") {
    simgen::ExperimentConfig c;
    c.electron_rate_per_s = 1e6;
    c.duration_s = 2.0;
    c.seed = 53;
    c.physics.coupling = {0.5, 0.0};
    c.physics.continuum_prob = 0.0;
    c.detected_mode_fraction = 1.0;
    c.channel_a.efficiency = c.channel_b.efficiency = 0.5;
    const auto s = split(simgen::generate(c, {false, false, false}).events);
    const auto r = stats::csi_gamma(s);
    const auto zero = static_cast<std::size_t>(std::find(r.tau_ps.begin(), r.tau_ps.end(), 0.0) - r.tau_ps.begin());
    REQUIRE(zero < r.tau_ps.size());
    CHECK(r.gamma[zero] > 1.0 + 3.0 * r.error[zero]);
}

TEST_CASE("CSI: streaming accumulator equals the in-memory form") {
    std::mt19937_64 rng(54);
    const auto s = independent_streams(rng, 1e6, 1e5, 1e5, 0.1);
    stats::CsiOptions o;
    o.run_end_ps = 100'000'000'000;
    const auto whole = stats::csi_gamma(s, o);
    stats::CsiAccumulator acc(o, o.run_end_ps);
    const std::int64_t step = 7'000'000'001;
    for (std::int64_t lo = 0; lo < o.run_end_ps; lo += step) {
        SplitStream chunk;
        auto take = [&](const std::vector<std::int64_t>& v, std::vector<std::int64_t>& out, std::vector<float>* e) {
            for (std::size_t i = 0; i < v.size(); ++i) {
                if (v[i] >= lo && v[i] < lo + step) {
                    out.push_back(v[i]);
                    if (e) e->push_back(s.electron_e[i]);
                }
            }
        };
        take(s.electron_t, chunk.electron_t, &chunk.electron_e);
        take(s.photon_a, chunk.photon_a, nullptr);
        take(s.photon_b, chunk.photon_b, nullptr);
        acc.push(chunk, lo + step);
    }
    acc.finish();
    const auto streamed = acc.result();
    REQUIRE(streamed.gamma.size() == whole.gamma.size());
    for (std::size_t i = 0; i < whole.gamma.size(); ++i) {
        CHECK(streamed.gamma[i] == doctest::Approx(whole.gamma[i]).epsilon(1e-9));
        CHECK(streamed.error[i] == doctest::Approx(whole.error[i]).epsilon(1e-9));
    }
    CHECK(streamed.g_e == doctest::Approx(whole.g_e).epsilon(1e-12));
}

TEST_CASE("CSI: shifting all photons by whole bins only shifts the cross-correlation") {
    std::mt19937_64 rng(55);
    auto s = independent_streams(rng, 1e6, 2e5, 2e5, 0.1);
    stats::CsiOptions o;
    o.run_end_ps = 200'000'000'000;
    const auto base = stats::csi_gamma(s, o);
    for (auto* v : {&s.photon_a, &s.photon_b}) {
        for (auto& t : *v) t += o.bin_ps;
    }
    const auto moved = stats::csi_gamma(s, o);
    CHECK(moved.g_e == base.g_e);
    CHECK(moved.g2_zero == doctest::Approx(base.g2_zero).epsilon(1e-12));
    // g_{E,ph}(tau) moves by one lag bin.
    for (std::size_t i = 0; i + 1 < base.g_e_ph.size(); ++i) {
        CHECK(moved.g_e_ph[i + 1] == doctest::Approx(base.g_e_ph[i]).epsilon(1e-3));
    }
}

TEST_CASE("CSI: no inelastic signal is undefined") {
    SplitStream s;
    s.electron_t = {1000, 2000};
    s.electron_e = {0.0f, 0.0f};
    s.photon_a = {1500};
    s.photon_b = {2500};
    stats::CsiOptions o;
    o.min_loss_ev = 0.45;
    CHECK_THROWS(stats::csi_gamma(s, o));
}
