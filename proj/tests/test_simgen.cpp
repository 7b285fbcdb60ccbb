// Monte Carlo generator: determinism, detector-chain bookkeeping and the
// photon statistics of the scattering model.
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "fockherald/ingest.hpp"
#include "fockherald/model.hpp"
#include "fockherald/simgen.hpp"
#include "fockherald/stats.hpp"

using namespace fockherald;

namespace {

simgen::ExperimentConfig quiet_config() {
    simgen::ExperimentConfig c;
    c.electron_rate_per_s = 1e6;
    c.duration_s = 0.01;
    c.seed = 11;
    return c;
}

simgen::ExperimentConfig lossless_config(double g0) {
    simgen::ExperimentConfig c;
    c.physics.coupling = {g0, 0.0};
    c.splitter_ratio = 0.5;
    for (auto* ch : {&c.channel_a, &c.channel_b}) {
        ch->efficiency = 1.0;
        ch->jitter_fwhm_s = 0.0;
        ch->dead_time_s = 0.0;
        ch->dark_rate_per_s = 0.0;
    }
    c.electron.transmission = 1.0;
    c.electron.jitter_fwhm_s = 0.0;
    return c;
}

std::size_t count_kind(const EventStream& s, EventKind k) {
    return static_cast<std::size_t>(
        std::count_if(s.records.begin(), s.records.end(), [&](const Event& e) { return e.kind == k; }));
}

}  // namespace

TEST_CASE("zero rate or zero duration gives empty streams") {
    auto c = quiet_config();
    c.duration_s = 0.0;
    auto out = simgen::generate(c);
    CHECK(out.events.records.empty());
    CHECK(out.pixels.hits.empty());
    CHECK(out.truth.electrons.empty());
    c.duration_s = 0.01;
    c.electron_rate_per_s = 0.0;
    c.channel_a.dark_rate_per_s = c.channel_b.dark_rate_per_s = 0.0;
    out = simgen::generate(c);
    CHECK(out.events.records.empty());
}

TEST_CASE("generation is deterministic in the seed") {
    const auto c = quiet_config();
    const auto a = simgen::generate(c);
    const auto b = simgen::generate(c);
    CHECK(a.events == b.events);
    CHECK(a.pixels == b.pixels);
    auto d = c;
    d.seed = 12;
    CHECK_FALSE(simgen::generate(d).events == a.events);
}

TEST_CASE("streamed segments concatenate to the batch output") {
    auto c = quiet_config();
    c.segment_s = 0.0013;
    const auto batch = simgen::generate(c, {false, false, false});
    simgen::Generator gen(c, {false, false, false});
    simgen::Segment seg;
    SplitStream all;
    std::int64_t last_complete = std::numeric_limits<std::int64_t>::min();
    while (gen.next(seg)) {
        for (auto t : seg.events.electron_t) CHECK(t >= last_complete);
        all.electron_t.insert(all.electron_t.end(), seg.events.electron_t.begin(), seg.events.electron_t.end());
        all.electron_e.insert(all.electron_e.end(), seg.events.electron_e.begin(), seg.events.electron_e.end());
        all.photon_a.insert(all.photon_a.end(), seg.events.photon_a.begin(), seg.events.photon_a.end());
        all.photon_b.insert(all.photon_b.end(), seg.events.photon_b.begin(), seg.events.photon_b.end());
        CHECK(seg.complete_until_ps >= last_complete);
        last_complete = seg.complete_until_ps;
    }
    const auto s = split(batch.events);
    CHECK(all.electron_t == s.electron_t);
    CHECK(all.electron_e == s.electron_e);
    CHECK(all.photon_a == s.photon_a);
    CHECK(all.photon_b == s.photon_b);
}

TEST_CASE("lossless detection reproduces the Poisson photon-number law") {
    auto c = lossless_config(0.5);
    c.electron_rate_per_s = 1e5;  // electrons far apart: no dead-time or ordering effects
    c.duration_s = 10.0;
    c.seed = 3;
    const auto out = simgen::generate(c, {false, true, false});
    std::vector<double> counts(8, 0.0);
    double n = 0;
    for (const auto& e : out.truth.electrons) {
        if (!e.recorded) continue;
        const auto k = out.truth.detected_count(e);
        counts[std::min<std::size_t>(k, 7)] += 1.0;
        n += 1.0;
    }
    CHECK(n > 9e5);
    const auto p = model::sideband_populations(0.5, 6).p;
    for (int m = 0; m <= 4; ++m) {
        const double expect = n * p[m];
        const double sigma = std::sqrt(n * p[m] * (1.0 - p[m]));
        CHECK(std::abs(counts[m] - expect) <= 3.0 * sigma + 1.0);
    }
}

TEST_CASE("dead time, quantization and sorting hold on every channel") {
    auto c = quiet_config();
    c.electron_rate_per_s = 2e7;
    c.physics.coupling = {1.5, 0.0};  // photon-rich so dead time matters
    c.channel_a.efficiency = c.channel_b.efficiency = 0.5;
    c.channel_a.dead_time_s = 1e-6;
    c.channel_b.dead_time_s = 2.5e-6;
    const auto out = simgen::generate(c);
    CHECK(is_sorted(out.events));
    const auto s = split(out.events);
    auto check_channel = [](const std::vector<std::int64_t>& t, std::int64_t dead, std::int64_t q) {
        REQUIRE(t.size() > 100);
        for (std::size_t i = 0; i < t.size(); ++i) {
            CHECK(t[i] % q == 0);
            if (i > 0) CHECK(t[i] - t[i - 1] >= dead);
        }
    };
    check_channel(s.photon_a, 1'000'000, c.channel_a.timestamp_quantum_ps);
    check_channel(s.photon_b, 2'500'000, c.channel_b.timestamp_quantum_ps);
    for (auto t : s.electron_t) CHECK(t % c.electron.timestamp_quantum_ps == 0);
    // The ledger records every dead-time loss.
    const auto lost = std::count(out.truth.fates.begin(), out.truth.fates.end(), simgen::PhotonFate::LostDeadTimeA);
    CHECK(lost > 0);
}

TEST_CASE("detected photon rates match the rate bookkeeping") {
    auto c = quiet_config();
    c.electron_rate_per_s = 5e6;
    c.duration_s = 0.2;
    c.physics.coupling = {0.5, 0.3};
    c.detected_mode_fraction = 0.4;
    c.channel_a.efficiency = 0.05;
    c.channel_b.efficiency = 0.03;
    c.channel_a.dead_time_s = c.channel_b.dead_time_s = 0.0;
    c.channel_a.dark_rate_per_s = 2000;
    c.channel_b.dark_rate_per_s = 5000;
    const auto out = simgen::generate(c, {false, false, false});
    const double mean_k = simgen::mean_photons_per_electron(c.physics.coupling);
    CHECK(mean_k == doctest::Approx(0.5 * 0.5 + 0.3 * 0.3).epsilon(1e-12));
    const double base = c.electron_rate_per_s * mean_k * c.detected_mode_fraction * c.duration_s;
    const double ea = base * c.splitter_ratio * 0.05 + 2000 * c.duration_s;
    const double eb = base * (1.0 - c.splitter_ratio) * 0.03 + 5000 * c.duration_s;
    const double na = static_cast<double>(count_kind(out.events, EventKind::PhotonA));
    const double nb = static_cast<double>(count_kind(out.events, EventKind::PhotonB));
    const double ne = static_cast<double>(count_kind(out.events, EventKind::Electron));
    // Thinned Poisson processes: counts are Poisson to excellent approximation.
    CHECK(std::abs(na - ea) < 3.0 * std::sqrt(ea));
    CHECK(std::abs(nb - eb) < 3.0 * std::sqrt(eb));
    const double ee = c.electron_rate_per_s * c.duration_s * c.electron.transmission;
    CHECK(std::abs(ne - ee) < 3.0 * std::sqrt(ee));
}

TEST_CASE("ground truth accounts for every detected photon") {
    auto c = quiet_config();
    c.physics.coupling = {0.8, 0.2};
    c.channel_a.efficiency = c.channel_b.efficiency = 0.3;
    c.channel_a.dark_rate_per_s = c.channel_b.dark_rate_per_s = 1e5;
    const auto out = simgen::generate(c);
    const auto s = split(out.events);
    REQUIRE(out.truth.source_a.size() == s.photon_a.size());
    REQUIRE(out.truth.source_b.size() == s.photon_b.size());
    std::map<std::uint64_t, const simgen::ElectronTruth*> by_id;
    for (const auto& e : out.truth.electrons) by_id[e.id] = &e;
    std::size_t darks = 0, detected_ledger = 0;
    for (const auto& e : out.truth.electrons) detected_ledger += out.truth.detected_count(e);
    for (const auto& ev : out.events.records) {
        if (ev.kind != EventKind::Electron && (ev.flags & event_flags::kDark)) ++darks;
    }
    std::size_t sourced = 0, dark_markers = 0;
    for (const auto* src : {&out.truth.source_a, &out.truth.source_b}) {
        for (auto id : *src) {
            if (id < 0) {
                ++dark_markers;
                continue;
            }
            REQUIRE(by_id.count(static_cast<std::uint64_t>(id)) == 1);
            CHECK(out.truth.detected_count(*by_id[static_cast<std::uint64_t>(id)]) > 0);
            ++sourced;
        }
    }
    CHECK(dark_markers == darks);
    CHECK(sourced == detected_ledger);
    CHECK(sourced + dark_markers == s.photon_a.size() + s.photon_b.size());
}

TEST_CASE("pixel clusters: degenerate and mean sizes") {
    simgen::ElectronChain chain;
    chain.mean_cluster_size = 1.0;
    chain.pixel_jitter_sigma_s = 0.0;
    std::vector<std::int64_t> t{1000, 2000, 3000};
    std::vector<float> loss{0.0f, 0.9f, 1.8f};
    const auto one = simgen::emit_pixel_hits(t, loss, chain, 5);
    REQUIRE(one.hits.size() == 3);
    CHECK(one.hits[0].x == 450);
    CHECK(one.hits[1].x == 420);
    CHECK(one.hits[2].x == 390);
    for (std::size_t i = 0; i < 3; ++i) CHECK(one.hits[i].time_ps == t[i]);

    chain.mean_cluster_size = 3.4;
    std::vector<std::int64_t> times;
    std::vector<float> losses;
    for (int i = 0; i < 100000; ++i) {
        times.push_back(static_cast<std::int64_t>(i) * 10'000'000);
        losses.push_back(0.0f);
    }
    const auto many = simgen::emit_pixel_hits(times, losses, chain, 9);
    CHECK(static_cast<double>(many.hits.size()) / 1e5 == doctest::Approx(3.4).epsilon(0.05 / 3.4));
    // Out-of-range losses are clipped and flagged.
    std::vector<bool> clipped;
    simgen::emit_pixel_hits({0}, {100.0f}, chain, 1, &clipped);
    CHECK(clipped.at(0));
}

TEST_CASE("pixel round trip recovers the electron count at low rate") {
    auto c = quiet_config();
    c.electron_rate_per_s = 1e4;
    c.duration_s = 1.0;
    const auto out = simgen::generate(c);
    const auto clusters = ingest::cluster_pixel_hits(out.pixels);
    const auto recorded = std::count_if(out.truth.electrons.begin(), out.truth.electrons.end(),
                                        [](const simgen::ElectronTruth& e) { return e.recorded; });
    CHECK(clusters.size() == static_cast<std::size_t>(recorded));
    CHECK(clusters.size() == count_kind(out.events, EventKind::Electron));
}

TEST_CASE("classical control: same rates, no correlations") {
    auto c = quiet_config();
    c.electron_rate_per_s = 5e6;
    c.duration_s = 2.0;
    c.physics.coupling = {0.6, 0.0};
    c.channel_a.efficiency = c.channel_b.efficiency = 0.5;
    c.channel_a.dead_time_s = c.channel_b.dead_time_s = 0.0;
    const auto quantum = simgen::generate(c, {false, false, false}).events;
    const auto classical = simgen::classical_control(c);
    for (auto k : {EventKind::Electron, EventKind::PhotonA, EventKind::PhotonB}) {
        const double q = static_cast<double>(count_kind(quantum, k));
        const double cl = static_cast<double>(count_kind(classical, k));
        CHECK(std::abs(cl - q) / q < 0.01);
    }
    const auto s = split(classical);
    stats::UnheraldedOptions o;
    o.bin_ps = 1'000'000;
    o.span_ps = 100'000'000;
    o.baseline_lo_ps = 20e6;
    o.baseline_hi_ps = 100e6;
    const auto g2 = stats::g2_unheralded(s.photon_a, s.photon_b, o);
    int outliers = 0;
    for (std::size_t i = 0; i < g2.g2.size(); ++i) {
        const bool out = std::abs(g2.g2[i] - 1.0) > 4.0 * g2.error[i];
        if (out) MESSAGE("tau " << g2.tau_ps[i] << " g2 " << g2.g2[i] << " +- " << g2.error[i]);
        outliers += out;
    }
    CHECK(outliers == 0);
    CHECK(std::abs(stats::g2_at_zero(g2).value - 1.0) < 4.0 * stats::g2_at_zero(g2).error);
}

TEST_CASE("configuration guard and validation") {
    auto c = quiet_config();
    c.electron_rate_per_s = 1e7;
    c.duration_s = 1000.0;
    CHECK_THROWS_AS(simgen::generate(c), std::invalid_argument);
    c = quiet_config();
    c.splitter_ratio = 1.5;
    CHECK_THROWS_AS(simgen::validate(c), std::invalid_argument);
    c = quiet_config();
    c.channel_a.efficiency = -0.1;
    CHECK_THROWS_AS(simgen::validate(c), std::invalid_argument);
}
