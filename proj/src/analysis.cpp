// Streaming product accumulation and the estimator catalogue.
#include "fockherald/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <spdlog/spdlog.h>

#include "fockherald/model.hpp"

namespace fockherald::analysis {

namespace {

constexpr double kPsPerS = 1e12;
constexpr std::int64_t kFarFuture = std::numeric_limits<std::int64_t>::max() / 4;

// Fine delay axis whose bins are centered on multiples of the bin width.
struct FineAxis {
    std::int64_t bin = 260;
    std::int64_t half = 0;  // bins on each side of zero
    std::int64_t lo() const { return -half * bin - bin / 2; }
    int bins() const { return static_cast<int>(2 * half + 1); }
    int index(std::int64_t tau) const {
        const std::int64_t d = tau - lo();
        if (d < 0) return -1;
        const std::int64_t i = d / bin;
        return i < bins() ? static_cast<int>(i) : -1;
    }
    double center(int i) const { return static_cast<double>((i - half) * bin); }

    correlate::Histogram make(const std::string& name) const {
        correlate::Histogram h;
        h.axis_names.push_back(name);
        std::vector<double> edges;
        for (int i = 0; i <= bins(); ++i) edges.push_back(static_cast<double>(lo() + i * bin));
        h.edges.push_back(std::move(edges));
        h.values.assign(static_cast<std::size_t>(bins()), 0.0);
        return h;
    }
    correlate::Histogram make2(const std::string& a, const std::string& b) const {
        auto h = make(a);
        h.axis_names.push_back(b);
        h.edges.push_back(h.edges.front());
        h.values.assign(static_cast<std::size_t>(bins()) * static_cast<std::size_t>(bins()), 0.0);
        return h;
    }
    void fill2(correlate::Histogram& h, std::int64_t tau_a, std::int64_t tau_b) const {
        const int i = index(tau_a), j = index(tau_b);
        if (i >= 0 && j >= 0) {
            h.values[static_cast<std::size_t>(i) * static_cast<std::size_t>(bins()) + static_cast<std::size_t>(j)] += 1.0;
        }
    }
    void fill(correlate::Histogram& h, std::int64_t tau) const {
        const int i = index(tau);
        if (i >= 0) h.values[static_cast<std::size_t>(i)] += 1.0;
    }
};

FineAxis fine_axis(const config::AnalysisConfig& a) {
    FineAxis f;
    f.bin = a.fine_bin_ps;
    f.half = (a.max_delay_ps + a.fine_bin_ps - 1) / a.fine_bin_ps;
    return f;
}

bool inside(double e, const stats::EnergyWindow& w) { return e >= w.first && e <= w.second; }

enum class Region : std::uint8_t { None, Signal, Background };

std::vector<std::pair<double, double>> background_ranges(const DelayWindows& w) {
    return {{-w.background_hi_ps, -w.background_lo_ps}, {w.background_lo_ps, w.background_hi_ps}};
}

std::vector<double> centers(const std::vector<double>& edges) {
    std::vector<double> c;
    for (std::size_t i = 0; i + 1 < edges.size(); ++i) c.push_back(0.5 * (edges[i] + edges[i + 1]));
    return c;
}

stats::DiscreteG2Options discrete_options(const config::AnalysisConfig& a, std::optional<stats::EnergyWindow> w) {
    stats::DiscreteG2Options o;
    o.energy_window = w;
    o.coincidence_window_ps = a.coincidence_window_ps;
    o.max_q = a.max_q;
    return o;
}

stats::UnheraldedOptions unheralded_options(const config::AnalysisConfig& a) {
    return {a.g2_bin_ps, a.g2_span_ps, a.g2_baseline_lo_ps, a.g2_baseline_hi_ps};
}

stats::CsiOptions csi_options(const config::AnalysisConfig& a) {
    stats::CsiOptions o;
    o.bin_ps = a.csi_bin_ps;
    o.max_lag_bins = a.csi_max_lag_bins;
    o.form = a.csi_form;
    o.min_loss_ev = a.csi_min_loss_ev;
    return o;
}

}  // namespace

DelayWindows delay_windows(const config::AnalysisConfig& a) {
    return {static_cast<double>(a.coincidence_window_ps), a.background_lo_ps, a.background_hi_ps,
            static_cast<double>(a.pair_window_ps)};
}

double nominal_eta_a(const simgen::ExperimentConfig& c) { return c.splitter_ratio * c.channel_a.efficiency; }
double nominal_eta_b(const simgen::ExperimentConfig& c) { return (1.0 - c.splitter_ratio) * c.channel_b.efficiency; }

// ---------------------------------------------------------------------------
// Accumulation

struct Accumulator::Impl {
    Impl(const config::RunConfig& c, std::int64_t run_end)
        : cfg(c),
          win(delay_windows(c.analysis)),
          fine(fine_axis(c.analysis)),
          m1(stats::order_window(1, c.experiment.physics.photon_energy)),
          m2(stats::order_window(2, c.experiment.physics.photon_energy)),
          inelastic_min(0.5 * c.experiment.physics.photon_energy),
          corr(c.analysis.max_delay_ps),
          cube_all(c.analysis.axes),
          cube_true(c.analysis.axes, correlate::CubeOptions{true}),
          g2_all(discrete_options(c.analysis, std::nullopt)),
          g2_m1(discrete_options(c.analysis, m1)),
          g2_m2(discrete_options(c.analysis, m2)),
          unheralded(unheralded_options(c.analysis)),
          csi(csi_options(c.analysis), run_end),
          inelastic_pairs(stats::UnheraldedOptions{fine.bin, fine.half * fine.bin, 0.0, static_cast<double>(fine.half * fine.bin)}) {
        p.tau_ph_ph = fine.make("tau_a_minus_tau_b_ps");
        p.tau_any_m1 = fine.make("tau_ps");
        p.tau_near_m1 = fine.make("tau_ps");
        p.tau_inelastic = fine.make("tau_ps");
        p.tau_ab_m2 = fine.make2("tau_a_ps", "tau_b_ps");
        const auto ne = static_cast<std::size_t>(c.analysis.axes.e_bins);
        p.spec_k1_sig.assign(ne, 0.0);
        p.spec_k1_bg.assign(ne, 0.0);
        p.spec_k2_sig.assign(ne, 0.0);
        p.spec_k2_bg.assign(ne, 0.0);
        p.run_end_ps = run_end;
        double n_sig = 0, n_bg = 0;
        for (int i = 0; i < fine.bins(); ++i) {
            const double t = std::abs(fine.center(i));
            Region r = Region::None;
            if (t <= win.signal_half_ps) r = Region::Signal;
            else if (t >= win.background_lo_ps && t <= win.background_hi_ps) r = Region::Background;
            region.push_back(r);
            n_sig += r == Region::Signal;
            n_bg += r == Region::Background;
        }
        p.spectra_bg_scale = n_bg > 0 ? n_sig / n_bg : 0.0;
    }

    Region classify(const correlate::TripleRecord& r, bool channel_a) const {
        const bool has = channel_a ? r.has_a() : r.has_b();
        if (!has) return Region::None;
        const int i = fine.index(channel_a ? r.tau_a : r.tau_b);
        return i < 0 ? Region::None : region[static_cast<std::size_t>(i)];
    }

    void push_raw(const SplitStream& chunk, std::int64_t complete_until_ps) {
        p.electrons += static_cast<std::int64_t>(chunk.electron_t.size());
        p.photons_a += static_cast<std::int64_t>(chunk.photon_a.size());
        p.photons_b += static_cast<std::int64_t>(chunk.photon_b.size());
        unheralded.push(chunk.photon_a, chunk.photon_b, complete_until_ps);
        csi.push(chunk, complete_until_ps);
        scratch_e.clear();
        for (std::size_t i = 0; i < chunk.electron_t.size(); ++i) {
            if (chunk.electron_e[i] >= inelastic_min) scratch_e.push_back(chunk.electron_t[i]);
        }
        scratch_ph.resize(chunk.photon_a.size() + chunk.photon_b.size());
        std::merge(chunk.photon_a.begin(), chunk.photon_a.end(), chunk.photon_b.begin(), chunk.photon_b.end(),
                   scratch_ph.begin());
        inelastic_pairs.push(scratch_e, scratch_ph, complete_until_ps);
    }

    void consume(std::span<const correlate::TripleRecord> records) {
        cube_all.add(records);
        cube_true.add(records);
        g2_all.add(records);
        g2_m1.add(records);
        g2_m2.add(records);
        const auto& axes = cfg.analysis.axes;
        for (const auto& r : records) {
            const double e = r.e_el;
            const bool ta = r.has_a() && r.true_a, tb = r.has_b() && r.true_b;
            if (inside(e, m1)) {
                if (r.has_a()) fine.fill(p.tau_any_m1, r.tau_a);
                if (r.has_b()) fine.fill(p.tau_any_m1, r.tau_b);
                if (r.has_a() && (!r.has_b() || std::abs(r.tau_a) <= std::abs(r.tau_b))) {
                    fine.fill(p.tau_near_m1, r.tau_a);
                } else if (r.has_b()) {
                    fine.fill(p.tau_near_m1, r.tau_b);
                }
            }
            if (inside(e, m2) && r.has_a() && r.has_b()) fine.fill2(p.tau_ab_m2, r.tau_a, r.tau_b);
            if (ta && tb && std::abs(r.tau_a) <= cfg.analysis.coincidence_window_ps) {
                fine.fill(p.tau_ph_ph, r.tau_a - r.tau_b);
            }
            const int ie = axes.e_index(e);
            if (ie < 0) continue;
            const auto k = static_cast<std::size_t>(ie);
            const Region ra = classify(r, true), rb = classify(r, false);
            const bool in_a = ra == Region::Signal, in_b = rb == Region::Signal;
            const bool bg_a = ra == Region::Background, bg_b = rb == Region::Background;
            if (in_a != in_b) p.spec_k1_sig[k] += 1.0;
            p.spec_k1_bg[k] += (bg_a && !in_b) + (bg_b && !in_a);
            if (in_a && in_b) p.spec_k2_sig[k] += 1.0;
            p.spec_k2_bg[k] += (in_a && bg_b) + (bg_a && in_b);
        }
    }

    config::RunConfig cfg;
    DelayWindows win;
    FineAxis fine;
    stats::EnergyWindow m1, m2;
    double inelastic_min = 0.0;
    correlate::StreamingCorrelator corr;
    correlate::CubeBuilder cube_all, cube_true;
    stats::DiscreteG2Accumulator g2_all, g2_m1, g2_m2;
    stats::UnheraldedAccumulator unheralded;
    stats::CsiAccumulator csi;
    // Photon-centric cross-correlation: unlike nearest-neighbour matching it
    // keeps every photon of a same-channel multiphoton event.
    stats::UnheraldedAccumulator inelastic_pairs;
    std::vector<std::int64_t> scratch_e, scratch_ph;
    std::vector<Region> region;  // per fine bin
    Products p;
};

Accumulator::Accumulator(const config::RunConfig& config, std::int64_t run_end_ps)
    : impl_(std::make_unique<Impl>(config, run_end_ps)) {}

Accumulator::~Accumulator() = default;

void Accumulator::push(const SplitStream& chunk, std::int64_t complete_until_ps) {
    auto& m = *impl_;
    m.push_raw(chunk, complete_until_ps);
    m.corr.push(chunk, complete_until_ps, [&m](std::span<const correlate::TripleRecord> r) { m.consume(r); });
}

void Accumulator::push_matched(const SplitStream& chunk, std::int64_t complete_until_ps,
                               std::span<const correlate::TripleRecord> records) {
    auto& m = *impl_;
    if (records.size() != chunk.electron_t.size()) throw std::invalid_argument("one record per electron required");
    m.push_raw(chunk, complete_until_ps);
    m.consume(records);
}

Products Accumulator::finish() {
    auto& m = *impl_;
    m.corr.finish([&m](std::span<const correlate::TripleRecord> r) { m.consume(r); });
    m.unheralded.finish();
    m.csi.finish();
    m.inelastic_pairs.finish();
    m.p.tau_inelastic.values = m.inelastic_pairs.counts();
    Products p = std::move(m.p);
    p.cube = m.cube_all.take();
    p.cube_true = m.cube_true.take();
    p.g2d_all = m.g2_all.result();
    p.g2d_m1 = m.g2_m1.result();
    p.g2d_m2 = m.g2_m2.result();
    try {
        p.unheralded = m.unheralded.result();
    } catch (const std::exception& e) {
        p.unheralded_error = e.what();
    }
    try {
        p.csi = m.csi.result();
    } catch (const std::exception& e) {
        p.csi_error = e.what();
    }
    return p;
}

Products analyze_stream(const SplitStream& s, const config::RunConfig& config, std::int64_t run_end_ps) {
    if (run_end_ps < 0) {
        run_end_ps = 0;
        if (!s.electron_t.empty()) run_end_ps = std::max(run_end_ps, s.electron_t.back());
        if (!s.photon_a.empty()) run_end_ps = std::max(run_end_ps, s.photon_a.back());
        if (!s.photon_b.empty()) run_end_ps = std::max(run_end_ps, s.photon_b.back());
    }
    Accumulator acc(config, run_end_ps);
    int threads = config.analysis.threads;
    if (threads == 0) threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    if (threads > 1) {
        const auto sharded = correlate::sharded_analysis(s, config.analysis.max_delay_ps, config.analysis.axes,
                                                         4 * threads, threads, true);
        acc.push_matched(s, kFarFuture, sharded.records);
    } else {
        acc.push(s, kFarFuture);
    }
    return acc.finish();
}

Products analyze_simulation(const config::RunConfig& config, SimulationSummary* summary, bool classical) {
    using Clock = std::chrono::steady_clock;
    simgen::GenerateOptions opts;
    opts.pixels = false;
    opts.truth = false;
    opts.classical = classical;
    simgen::Generator gen(config.experiment, opts);
    const auto run_end = static_cast<std::int64_t>(std::llround(config.experiment.duration_s * kPsPerS));
    Accumulator acc(config, run_end);
    SimulationSummary sum;
    simgen::Segment seg;
    double gen_s = 0.0, ana_s = 0.0;
    std::size_t segments = 0;
    for (;;) {
        const auto t0 = Clock::now();
        const bool more = gen.next(seg);
        const auto t1 = Clock::now();
        gen_s += std::chrono::duration<double>(t1 - t0).count();
        if (!more) break;
        sum.electrons += static_cast<std::int64_t>(seg.events.electron_t.size());
        sum.events += static_cast<std::int64_t>(seg.events.electron_t.size() + seg.events.photon_a.size() +
                                                seg.events.photon_b.size());
        acc.push(seg.events, seg.complete_until_ps);
        ana_s += std::chrono::duration<double>(Clock::now() - t1).count();
        if (++segments % 1000 == 0) {
            spdlog::info("simulated {:.3f} s of beam time, {} electrons", std::min(seg.complete_until_ps, run_end) / kPsPerS,
                         sum.electrons);
        }
    }
    const auto t2 = Clock::now();
    Products p = acc.finish();
    ana_s += std::chrono::duration<double>(Clock::now() - t2).count();
    sum.generate_s = gen_s;
    sum.analyze_s = ana_s;
    if (summary) *summary = sum;
    return p;
}

// ---------------------------------------------------------------------------
// Estimators

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

struct Context {
    const Products& p;
    const config::RunConfig& cfg;
    const report::Metadata& meta;
    DelayWindows win;
    double hw;
};

report::Report make_report(const Context& c, const std::string& estimator, const std::string& variant) {
    report::Report r;
    r.estimator = estimator;
    r.variant = variant;
    r.metadata = c.meta;
    return r;
}

// m parameter: "all" (0), 1 or 2; absent -> every variant in `defaults`.
std::vector<int> orders(const EstimatorRequest& q, const std::vector<int>& defaults, bool allow_all) {
    const auto it = q.params.find("m");
    if (it == q.params.end()) return defaults;
    if (allow_all && it->second == "all") return {0};
    if (it->second == "1") return {1};
    if (it->second == "2") return {2};
    throw std::invalid_argument(q.name + ": m must be " + std::string(allow_all ? "all, " : "") + "1 or 2");
}

void check_params(const EstimatorRequest& q, const std::vector<std::string>& allowed) {
    for (const auto& [k, v] : q.params) {
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
            throw std::invalid_argument(q.name + ": unknown parameter '" + k + "'");
        }
    }
}

std::string variant_of(int m) { return m == 0 ? "all" : "m" + std::to_string(m); }

model::SpectrumHistogram electron_spectrum(const correlate::CoincidenceCube& cube) {
    model::SpectrumHistogram h;
    for (int i = 0; i <= cube.axes.e_bins; ++i) h.edges.push_back(cube.axes.e_lo + i * cube.axes.e_bin);
    for (auto n : cube.electrons) h.counts.push_back(static_cast<double>(n));
    return h;
}

model::SpectrumFit fitted_spectrum(const Context& c) {
    const auto h = electron_spectrum(c.p.cube);
    double total = 0.0;
    for (double n : h.counts) total += n;
    if (total <= 0.0) throw std::domain_error("no electrons inside the energy axis");
    return model::fit_spectrum(h, c.cfg.experiment.physics);
}

std::vector<double> energy_centers(const correlate::CubeAxes& ax) {
    std::vector<double> e;
    for (int i = 0; i < ax.e_bins; ++i) e.push_back(ax.e_center(i));
    return e;
}

std::vector<double> model_counts(const model::SpectrumFit& fit, const std::vector<double>& populations,
                                 const correlate::CubeAxes& ax, double scale) {
    model::EnergyGrid grid{ax.e_center(0), ax.e_bin, static_cast<std::size_t>(ax.e_bins)};
    auto d = model::spectrum_density(fit.params, populations, grid, fit.energy_offset);
    for (double& v : d) v *= scale * ax.e_bin;
    return d;
}

void spectrum_estimator(const Context& c, std::vector<report::Report>& out) {
    const auto fit = fitted_spectrum(c);
    const auto& ax = c.p.cube.axes;
    auto r = make_report(c, "spectrum", "");
    r.params["energy_lo_ev"] = ax.e_lo;
    r.params["energy_bin_ev"] = ax.e_bin;
    r.add_scalar("mean_g0", fit.params.coupling.mean_g0, fit.mean_g0_stderr);
    r.add_scalar("std_g0", fit.params.coupling.std_g0);
    r.add_scalar("dispersion", fit.dispersion, fit.dispersion_stderr);
    r.add_scalar("dispersion_significant", fit.dispersion_significant ? 1.0 : 0.0);
    r.add_scalar("sub_poissonian", fit.sub_poissonian ? 1.0 : 0.0);
    r.add_scalar("zlp_sigma_ev", fit.params.zlp_sigma);
    r.add_scalar("photon_energy_ev", fit.params.photon_energy);
    r.add_scalar("pm_bandwidth_ev", fit.params.pm_bandwidth);
    r.add_scalar("continuum_prob", fit.params.continuum_prob);
    r.add_scalar("continuum_decay_ev", fit.params.continuum_decay);
    r.add_scalar("energy_offset_ev", fit.energy_offset);
    r.add_scalar("reduced_chi2", fit.reduced_chi2);
    r.add_scalar("converged", fit.converged ? 1.0 : 0.0);
    for (std::size_t m = 0; m < fit.populations.p.size() && m <= 4; ++m) {
        r.add_scalar("population_" + std::to_string(m), fit.populations.p[m],
                     m < fit.area_stderr.size() ? fit.area_stderr[m] : std::nan(""));
    }
    r.axes.push_back({"energy_ev", energy_centers(ax)});
    std::vector<double> counts, err;
    for (auto n : c.p.cube.electrons) {
        counts.push_back(static_cast<double>(n));
        err.push_back(std::sqrt(static_cast<double>(n)));
    }
    // Scale the unit-normalized model to the electrons inside the axis.
    const auto full = model_counts(fit, fit.populations.p, ax, 1.0);
    double data_sum = 0.0, model_sum = 0.0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        data_sum += counts[i];
        model_sum += full[i];
    }
    const double scale = model_sum > 0 ? data_sum / model_sum : 0.0;
    std::vector<double> model = full;
    for (double& v : model) v *= scale;
    r.add_series("counts", counts, err);
    r.add_series("model", model);
    for (std::size_t m = 0; m < fit.populations.p.size() && m <= 4; ++m) {
        std::vector<double> one(fit.populations.p.size(), 0.0);
        one[m] = fit.populations.p[m];
        auto comp = model_counts(fit, one, ax, scale);
        r.add_series("order_" + std::to_string(m), comp);
    }
    if (!fit.converged) r.notes.push_back("fit did not converge: " + fit.message);
    out.push_back(std::move(r));
    if (!fit.converged) throw std::runtime_error("spectrum fit did not converge: " + fit.message);
}

struct NetSpectrum {
    std::vector<double> net, var;
};

NetSpectrum net_spectrum(const std::vector<double>& sig, const std::vector<double>& bg, double scale) {
    NetSpectrum n;
    for (std::size_t i = 0; i < sig.size(); ++i) {
        n.net.push_back(sig[i] - scale * bg[i]);
        n.var.push_back(sig[i] + scale * scale * bg[i]);
    }
    return n;
}

std::pair<std::vector<double>, std::vector<double>> area_normalized(const std::vector<double>& v,
                                                                    const std::vector<double>& var, double bin) {
    double sum = 0.0;
    for (double x : v) sum += x;
    std::vector<double> a, e;
    const double norm = sum > 0 ? 1.0 / (sum * bin) : std::nan("");
    for (std::size_t i = 0; i < v.size(); ++i) {
        a.push_back(v[i] * norm);
        e.push_back(std::sqrt(std::max(var[i], 0.0)) * norm);
    }
    return {a, e};
}

void coincidence_spectra_estimator(const Context& c, std::vector<report::Report>& out) {
    const auto& ax = c.p.cube.axes;
    auto r = make_report(c, "coincidence_spectra", "");
    r.params["signal_half_ps"] = c.win.signal_half_ps;
    r.params["background_lo_ps"] = c.win.background_lo_ps;
    r.params["background_hi_ps"] = c.win.background_hi_ps;
    r.params["background_scale"] = c.p.spectra_bg_scale;
    r.axes.push_back({"energy_ev", energy_centers(ax)});
    std::vector<double> ue, uv;
    for (auto n : c.p.cube.electrons) {
        ue.push_back(static_cast<double>(n));
        uv.push_back(static_cast<double>(n));
    }
    const auto k1 = net_spectrum(c.p.spec_k1_sig, c.p.spec_k1_bg, c.p.spectra_bg_scale);
    const auto k2 = net_spectrum(c.p.spec_k2_sig, c.p.spec_k2_bg, c.p.spectra_bg_scale);
    auto [un, une] = area_normalized(ue, uv, ax.e_bin);
    auto [k1n, k1e] = area_normalized(k1.net, k1.var, ax.e_bin);
    auto [k2n, k2e] = area_normalized(k2.net, k2.var, ax.e_bin);
    r.add_series("uncorrelated", un, une);
    r.add_series("k1", k1n, k1e);
    r.add_series("k2", k2n, k2e);
    std::vector<double> s1, s2;
    for (double v : k1.var) s1.push_back(std::sqrt(v));
    for (double v : k2.var) s2.push_back(std::sqrt(v));
    r.add_series("k1_net_counts", k1.net, s1);
    r.add_series("k2_net_counts", k2.net, s2);
    out.push_back(std::move(r));
}

report::Report histogram_report(const Context& c, const std::string& variant, const correlate::Histogram& h) {
    auto r = make_report(c, "cube", variant);
    for (std::size_t i = 0; i < h.edges.size(); ++i) {
        std::string name = h.axis_names[i];
        r.axes.push_back({name, centers(h.edges[i])});
    }
    std::vector<double> err;
    for (double v : h.values) err.push_back(std::sqrt(v));
    r.add_series("counts", h.values, err);
    return r;
}

void cube_estimator(const Context& c, const EstimatorRequest& q, std::vector<report::Report>& out) {
    check_params(q, {"projection", "m"});
    using correlate::Axis;
    std::vector<std::string> projections = {"tau_a_energy", "tau_diff_energy", "tau_a_tau_b"};
    if (auto it = q.params.find("projection"); it != q.params.end()) {
        if (std::find(projections.begin(), projections.end(), it->second) == projections.end()) {
            throw std::invalid_argument("cube: projection must be tau_a_energy, tau_diff_energy or tau_a_tau_b");
        }
        projections = {it->second};
    }
    for (const auto& proj : projections) {
        if (proj == "tau_a_energy") {
            auto r = histogram_report(c, proj, correlate::project(c.p.cube, {{Axis::TauA, Axis::Energy}, {}}));
            r.params["projection"] = proj;
            r.params["source"] = "all";
            r.add_scalar("overflow_a", static_cast<double>(c.p.cube.overflow_a));
            out.push_back(std::move(r));
        } else if (proj == "tau_diff_energy") {
            auto r = histogram_report(c, proj, correlate::project(c.p.cube_true, {{Axis::TauDiff, Axis::Energy}, {}}));
            r.params["projection"] = proj;
            r.params["source"] = "true";
            r.add_scalar("overflow_triples", static_cast<double>(c.p.cube_true.overflow_triples));
            out.push_back(std::move(r));
        } else {
            for (int m : orders(q, {1, 2}, false)) {
                const auto w = stats::order_window(m, c.hw);
                const auto h = correlate::project(c.p.cube, {{Axis::TauA, Axis::TauB}, {{Axis::Energy, w.first, w.second}}});
                auto r = histogram_report(c, proj + "_" + variant_of(m), h);
                r.params["projection"] = proj;
                r.params["source"] = "all";
                r.params["m"] = m;
                r.params["energy_window_ev"] = {w.first, w.second};
                out.push_back(std::move(r));
            }
        }
    }
}

void curve_series(report::Report& r, const stats::CorrelationCurve& c) {
    r.axes.push_back({"tau_ps", c.tau_ps});
    r.add_series("g2", c.g2, c.error);
    r.add_series("counts", c.counts);
    r.add_scalar("baseline_level", c.baseline_level);
    r.params["baseline_window_ps"] = {c.baseline_window.first, c.baseline_window.second};
}

void unheralded_estimator(const Context& c, std::vector<report::Report>& out) {
    if (!c.p.unheralded) throw std::domain_error(c.p.unheralded_error);
    auto r = make_report(c, "g2_unheralded", "");
    r.params["bin_ps"] = c.cfg.analysis.g2_bin_ps;
    r.params["span_ps"] = c.cfg.analysis.g2_span_ps;
    curve_series(r, *c.p.unheralded);
    const auto z = stats::g2_at_zero(*c.p.unheralded);
    r.add_scalar("g2_zero", z.value, z.error);
    const double rate = c.p.run_end_ps > 0 ? static_cast<double>(c.p.electrons) / (c.p.run_end_ps / kPsPerS) : 0.0;
    r.add_scalar("electron_rate_per_s", rate);
    out.push_back(std::move(r));
}

void heralded_estimator(const Context& c, const EstimatorRequest& q, std::vector<report::Report>& out) {
    check_params(q, {"m"});
    for (int m : orders(q, {1, 2}, false)) {
        const auto w = stats::order_window(m, c.hw);
        const auto s = stats::g2_heralded_surface(c.p.cube, w);
        auto r = make_report(c, "g2_heralded", variant_of(m));
        r.params["m"] = m;
        r.params["energy_window_ev"] = {w.first, w.second};
        r.axes.push_back({"tau_a_ps", s.tau_a_ps});
        r.axes.push_back({"tau_b_ps", s.tau_b_ps});
        r.add_series("g2", s.g2, s.error);
        r.add_series("counts", s.counts);
        const int i0 = c.p.cube.axes.tau_index(0);
        if (i0 >= 0) {
            const auto k = static_cast<std::size_t>(i0) * s.tau_b_ps.size() + static_cast<std::size_t>(i0);
            r.add_scalar("g2_origin", s.g2[k], s.error[k]);
        }
        r.add_scalar("heralds", s.heralds);
        r.add_scalar("masked_cells", s.masked);
        out.push_back(std::move(r));
    }
}

void time_averaged_estimator(const Context& c, const EstimatorRequest& q, std::vector<report::Report>& out) {
    check_params(q, {"m"});
    for (int m : orders(q, {1, 2}, false)) {
        const auto w = stats::order_window(m, c.hw);
        const auto curve = stats::g2_time_averaged(c.p.cube, w);
        auto r = make_report(c, "g2_time_averaged", variant_of(m));
        r.params["m"] = m;
        r.params["energy_window_ev"] = {w.first, w.second};
        curve_series(r, curve);
        out.push_back(std::move(r));
    }
}

void discrete_estimator(const Context& c, const EstimatorRequest& q, std::vector<report::Report>& out) {
    check_params(q, {"m"});
    for (int m : orders(q, {0, 1, 2}, true)) {
        const auto& d = m == 0 ? c.p.g2d_all : (m == 1 ? c.p.g2d_m1 : c.p.g2d_m2);
        auto r = make_report(c, "g2_discrete", variant_of(m));
        r.params["m"] = m == 0 ? nlohmann::ordered_json("all") : nlohmann::ordered_json(m);
        if (m > 0) {
            const auto w = stats::order_window(m, c.hw);
            r.params["energy_window_ev"] = {w.first, w.second};
        }
        r.params["coincidence_window_ps"] = c.cfg.analysis.coincidence_window_ps;
        std::vector<double> qs;
        for (std::size_t i = 0; i < d.g2.size(); ++i) qs.push_back(static_cast<double>(i));
        r.axes.push_back({"q", qs});
        r.add_series("g2", d.g2, d.error);
        r.add_series("pairs", d.pairs);
        r.add_scalar("g2_0", d.g2.at(0), d.error.at(0));
        const auto tail = d.pooled_tail();
        r.add_scalar("g2_tail_pooled", tail.value, tail.error);
        r.add_scalar("heralds", d.heralds);
        r.add_scalar("herald_a", d.herald_a);
        r.add_scalar("herald_b", d.herald_b);
        if (!(d.herald_a > 0 && d.herald_b > 0)) r.notes.push_back("no heralded detections on one channel");
        out.push_back(std::move(r));
    }
}

void car_scalars(report::Report& r, const stats::CarResult& car) {
    r.add_scalar("car", car.car, car.error);
    r.add_scalar("signal", car.signal, std::sqrt(car.signal));
    r.add_scalar("accidental", car.accidental, std::sqrt(car.accidental_var));
    r.add_scalar("significance", car.significance);
    r.add_scalar("infinite", car.infinite ? 1.0 : 0.0);
    if (car.infinite) r.notes.push_back("no accidentals observed; CAR unbounded");
}

// Electron-photon-photon coincidences of m = 2 heralds: both photons within the
// signal window of the electron and within the pair window of each other.
stats::CarResult pair_car(const Context& c) {
    return stats::car_threefold(c.p.tau_ab_m2,
                                {c.win.signal_half_ps, c.win.background_lo_ps, c.win.background_hi_ps, c.win.pair_half_ps});
}

void car_estimator(const Context& c, const EstimatorRequest& q, std::vector<report::Report>& out) {
    check_params(q, {"m"});
    for (int m : orders(q, {1, 2}, false)) {
        auto r = make_report(c, "car", variant_of(m));
        r.params["m"] = m;
        r.params["signal_half_ps"] = c.win.signal_half_ps;
        r.params["background_ps"] = {c.win.background_lo_ps, c.win.background_hi_ps};
        if (m == 1) {
            r.params["kind"] = "electron-photon";
            car_scalars(r, stats::car(c.p.tau_any_m1, {-c.win.signal_half_ps, c.win.signal_half_ps},
                                      background_ranges(c.win)));
        } else {
            r.params["kind"] = "electron-photon-photon";
            r.params["pair_half_ps"] = c.win.pair_half_ps;
            car_scalars(r, pair_car(c));
        }
        out.push_back(std::move(r));
    }
}

void efficiency_estimator(const Context& c, std::vector<report::Report>& out) {
    auto r = make_report(c, "efficiency", "");
    const std::pair<double, double> sig{-c.win.signal_half_ps, c.win.signal_half_ps};
    const auto bg = background_ranges(c.win);
    const auto& x = c.cfg.experiment;
    // Intrinsic efficiency eta = N_ij / (N_j * eta_d * T): the raw heralded
    // fraction divided by the configured detection and transmission losses.
    auto add = [&](const std::string& name, const stats::CarResult& car, double n_j, double eta_d, double t) {
        const auto raw = stats::heralding_efficiency(car.signal - car.accidental, n_j, 1.0, 1.0, car.accidental_var);
        const auto e = stats::heralding_efficiency(car.signal - car.accidental, n_j, eta_d, t, car.accidental_var);
        r.add_scalar(name, e.value, e.error);
        r.add_scalar(name + "_raw", raw.value, raw.error);
        r.add_scalar(name + "_correction", eta_d * t);
        r.add_scalar(name + "_heralds", n_j);
        if (e.flagged) r.notes.push_back(name + ": " + e.note);
    };
    // Photon-heralded electrons: photon coincidences with any inelastic loss.
    add("eta_e", stats::car(c.p.tau_inelastic, sig, bg), static_cast<double>(c.p.photons_a + c.p.photons_b), 1.0,
        x.electron.transmission);
    // Electron-heralded single photons (A or B) and photon pairs (A and B).
    const double eta_a = nominal_eta_a(x), eta_b = nominal_eta_b(x);
    add("eta_union", stats::car(c.p.tau_near_m1, sig, bg), c.p.g2d_m1.heralds, eta_a + eta_b, 1.0);
    add("eta_intersection", pair_car(c), c.p.g2d_m2.heralds, 2.0 * eta_a * eta_b, 1.0);
    r.params["signal_half_ps"] = c.win.signal_half_ps;
    r.params["background_ps"] = {c.win.background_lo_ps, c.win.background_hi_ps};
    r.params["pair_half_ps"] = c.win.pair_half_ps;
    r.params["eta_e_window"] = "E >= photon_energy / 2";
    r.params["eta_union_detection"] = "eta_A + eta_B";
    r.params["eta_intersection_detection"] = "2 eta_A eta_B";
    out.push_back(std::move(r));
}

void csi_estimator(const Context& c, std::vector<report::Report>& out) {
    if (!c.p.csi) throw std::domain_error(c.p.csi_error);
    const auto& s = *c.p.csi;
    auto r = make_report(c, "csi", "");
    r.params["bin_ps"] = c.cfg.analysis.csi_bin_ps;
    r.params["form"] = c.cfg.analysis.csi_form == stats::CsiForm::Squared ? "squared" : "linear";
    if (c.cfg.analysis.csi_min_loss_ev) r.params["min_loss_ev"] = *c.cfg.analysis.csi_min_loss_ev;
    r.axes.push_back({"tau_ps", s.tau_ps});
    r.add_series("gamma", s.gamma, s.error);
    r.add_series("g_e_ph", s.g_e_ph);
    const std::size_t z = s.gamma.size() / 2;
    r.add_scalar("gamma_zero", s.gamma[z], s.error[z]);
    r.add_scalar("violation_sigma", (s.gamma[z] - 1.0) / s.error[z]);
    r.add_scalar("g_e", s.g_e);
    r.add_scalar("g2_zero", s.g2_zero);
    r.add_scalar("gamma_limit", s.gamma_limit);
    out.push_back(std::move(r));
}

void coupling_estimator(const Context& c, std::vector<report::Report>& out) {
    const auto fit = fitted_spectrum(c);
    const auto h = electron_spectrum(c.p.cube);
    auto area = [&](const std::vector<double>& sig, const std::vector<double>& bg, int order, double& var) {
        const auto n = net_spectrum(sig, bg, c.p.spectra_bg_scale);
        model::SpectrumHistogram hn{h.edges, n.net};
        std::vector<double> v;
        for (double x : n.var) v.push_back(std::max(x, 1.0));
        const auto a = model::fit_sideband_areas(hn, v, fit.params, fit.energy_offset, 4);
        var = a.variances.at(static_cast<std::size_t>(order));
        return a.areas.at(static_cast<std::size_t>(order));
    };
    stats::CoincidenceAreas areas;
    areas.electrons = static_cast<double>(c.p.cube.total_electrons);
    areas.single = area(c.p.spec_k1_sig, c.p.spec_k1_bg, 1, areas.single_var);
    areas.pair = area(c.p.spec_k2_sig, c.p.spec_k2_bg, 2, areas.pair_var);
    const double eta_a = nominal_eta_a(c.cfg.experiment), eta_b = nominal_eta_b(c.cfg.experiment);
    const auto est = stats::coupling_from_coincidences(areas, eta_a, eta_b);
    auto r = make_report(c, "coupling", "");
    r.params["eta_a"] = eta_a;
    r.params["eta_b"] = eta_b;
    r.add_scalar("g0", est.g0, est.error);
    r.add_scalar("chi2", est.chi2);
    r.add_scalar("g0_eels", fit.params.coupling.mean_g0, fit.mean_g0_stderr);
    r.add_scalar("single_area", areas.single, std::sqrt(areas.single_var));
    r.add_scalar("pair_area", areas.pair, std::sqrt(areas.pair_var));
    r.add_scalar("electrons", areas.electrons);
    if (est.uninformative) r.notes.push_back("coincidences carry no information on g0 (zero detection efficiency)");
    out.push_back(std::move(r));
}

void timing_estimator(const Context& c, std::vector<report::Report>& out) {
    const auto bg = background_ranges(c.win);
    const auto e = stats::peak_width(c.p.tau_any_m1, 10000.0, bg);
    const auto p = stats::peak_width(c.p.tau_ph_ph, 2000.0, bg);
    auto r = make_report(c, "timing", "");
    r.params["electron_photon_half_window_ps"] = 10000;
    r.params["photon_photon_half_window_ps"] = 2000;
    r.add_scalar("fwhm_electron_photon_ps", e.fwhm_ps, e.stderr_ps);
    r.add_scalar("center_electron_photon_ps", e.center_ps);
    r.add_scalar("net_electron_photon", e.net_counts);
    r.add_scalar("fwhm_photon_photon_ps", p.fwhm_ps, p.stderr_ps);
    r.add_scalar("center_photon_photon_ps", p.center_ps);
    r.add_scalar("net_photon_photon", p.net_counts);
    out.push_back(std::move(r));
}

void validate_request(const EstimatorRequest& q) {
    if (q.name == "cube") {
        check_params(q, {"projection", "m"});
        if (auto it = q.params.find("projection"); it != q.params.end() && it->second != "tau_a_energy" &&
                                                   it->second != "tau_diff_energy" && it->second != "tau_a_tau_b") {
            throw std::invalid_argument("cube: projection must be tau_a_energy, tau_diff_energy or tau_a_tau_b");
        }
        orders(q, {1, 2}, false);
    } else if (q.name == "g2_heralded" || q.name == "g2_time_averaged" || q.name == "car") {
        check_params(q, {"m"});
        orders(q, {1, 2}, false);
    } else if (q.name == "g2_discrete") {
        check_params(q, {"m"});
        orders(q, {0, 1, 2}, true);
    } else if (!q.params.empty()) {
        throw std::invalid_argument(q.name + " takes no parameters");
    }
}

}  // namespace

EstimatorRequest parse_request(const std::string& text) {
    EstimatorRequest q;
    const auto colon = text.find(':');
    q.name = trim(text.substr(0, colon));
    if (q.name.empty()) throw std::invalid_argument("empty estimator name");
    if (colon == std::string::npos) return q;
    std::stringstream ss(text.substr(colon + 1));
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw std::invalid_argument(q.name + ": expected key=value, got '" + item + "'");
        q.params[trim(item.substr(0, eq))] = trim(item.substr(eq + 1));
    }
    return q;
}

const std::vector<std::string>& estimator_names() {
    static const std::vector<std::string> names = {
        "spectrum", "coincidence_spectra", "cube", "g2_unheralded", "g2_heralded", "g2_time_averaged",
        "g2_discrete", "car", "efficiency", "csi", "coupling", "timing"};
    return names;
}

std::vector<EstimatorRequest> default_requests() {
    std::vector<EstimatorRequest> q;
    for (const auto& n : estimator_names()) q.push_back({n, {}});
    return q;
}

void validate_requests(const std::vector<EstimatorRequest>& requests) {
    const auto& names = estimator_names();
    for (const auto& q : requests) {
        if (std::find(names.begin(), names.end(), q.name) == names.end()) {
            std::string list;
            for (const auto& n : names) list += (list.empty() ? "" : ", ") + n;
            throw std::invalid_argument("unknown estimator '" + q.name + "'; valid: " + list);
        }
        validate_request(q);
    }
}

EstimatorOutcome run_estimators(const Products& products, const config::RunConfig& config,
                                const std::vector<EstimatorRequest>& requests, const report::Metadata& metadata) {
    validate_requests(requests);
    Context c{products, config, metadata, delay_windows(config.analysis), config.experiment.physics.photon_energy};
    EstimatorOutcome out;
    for (const auto& q : requests) {
        try {
            if (q.name == "spectrum") spectrum_estimator(c, out.reports);
            else if (q.name == "coincidence_spectra") coincidence_spectra_estimator(c, out.reports);
            else if (q.name == "cube") cube_estimator(c, q, out.reports);
            else if (q.name == "g2_unheralded") unheralded_estimator(c, out.reports);
            else if (q.name == "g2_heralded") heralded_estimator(c, q, out.reports);
            else if (q.name == "g2_time_averaged") time_averaged_estimator(c, q, out.reports);
            else if (q.name == "g2_discrete") discrete_estimator(c, q, out.reports);
            else if (q.name == "car") car_estimator(c, q, out.reports);
            else if (q.name == "efficiency") efficiency_estimator(c, out.reports);
            else if (q.name == "csi") csi_estimator(c, out.reports);
            else if (q.name == "coupling") coupling_estimator(c, out.reports);
            else if (q.name == "timing") timing_estimator(c, out.reports);
        } catch (const std::exception& e) {
            spdlog::warn("estimator {} failed: {}", q.name, e.what());
            out.failures.push_back({q.name, e.what()});
        }
    }
    return out;
}

}  // namespace fockherald::analysis
