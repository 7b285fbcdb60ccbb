// Monte Carlo generator of detection streams.
//
// The run is produced in consecutive segments with independently derived
// seeds. Jittered events near a segment's end are held back until no later
// segment can precede them, then released in time order through the
// per-channel dead-time filter, so the concatenated output is globally sorted.
#include "fockherald/simgen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <random>
#include <stdexcept>

#include <json.hpp>

namespace fockherald::simgen {

namespace {

constexpr double kFwhmToSigma = 2.3548200450309493;
constexpr double kPsPerS = 1e12;
constexpr std::uint64_t kNoSlot = std::numeric_limits<std::uint64_t>::max();

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

void check_prob(double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string(name) + " must lie in [0, 1]");
}

void check_channel(const PhotonChannel& c, const char* name) {
    const std::string n(name);
    check_prob(c.efficiency, (n + ".efficiency").c_str());
    if (!(c.jitter_fwhm_s >= 0.0)) throw std::invalid_argument(n + ".jitter_fwhm must be >= 0");
    if (!(c.dead_time_s >= 0.0)) throw std::invalid_argument(n + ".dead_time must be >= 0");
    if (!(c.dark_rate_per_s >= 0.0)) throw std::invalid_argument(n + ".dark_rate must be >= 0");
    if (c.timestamp_quantum_ps <= 0) throw std::invalid_argument(n + ".timestamp_quantum must be > 0");
}

std::int64_t quantize(double t_ps, std::int64_t q) {
    return static_cast<std::int64_t>(std::floor(t_ps / static_cast<double>(q))) * q;
}

// Gaussian truncated at 6 sigma so that segment hold-back bounds are exact.
double bounded_normal(std::mt19937_64& rng, std::normal_distribution<double>& n) {
    for (;;) {
        const double z = n(rng);
        if (std::abs(z) <= 6.0) return z;
    }
}

struct PendingElectron {
    std::int64_t t;
    float e;
    std::uint16_t flags;
    std::uint64_t id;
    std::uint64_t truth_index;
};

struct PendingPhoton {
    std::int64_t t;
    std::int64_t source;     // -1 for dark counts
    std::uint64_t fate_slot; // kNoSlot when untracked
    std::uint16_t flags;
};

template <typename T>
void insertion_sort_by_time(std::vector<T>& v, std::size_t sorted_prefix) {
    for (std::size_t i = std::max<std::size_t>(sorted_prefix, 1); i < v.size(); ++i) {
        if (v[i].t >= v[i - 1].t) continue;
        T tmp = v[i];
        std::size_t j = i;
        while (j > 0 && v[j - 1].t > tmp.t) {
            v[j] = v[j - 1];
            --j;
        }
        v[j] = tmp;
    }
}

// Builds one cluster whose pixel centroid column equals the seed column exactly:
// side pixels are added in mirrored pairs, odd remainders extend the column.
void append_cluster(std::vector<PixelHit>& out, std::int64_t t, int x0, std::mt19937_64& rng,
                    const ElectronChain& chain) {
    std::uniform_int_distribution<int> row(201, 312);
    const int y0 = row(rng);
    int size = 1;
    if (chain.mean_cluster_size > 1.0) {
        std::poisson_distribution<int> extra(chain.mean_cluster_size - 1.0);
        size = std::min(10, 1 + extra(rng));
    }
    std::normal_distribution<double> jit(0.0, 1.0);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    const double sigma_ps = chain.pixel_jitter_sigma_s * kPsPerS;
    const auto q = chain.timestamp_quantum_ps;
    auto delayed = [&]() -> std::int64_t {
        if (sigma_ps <= 0.0) return t;
        const double d = std::abs(jit(rng)) * sigma_ps;
        return t + quantize(d, q);
    };
    out.push_back({static_cast<std::uint16_t>(x0), static_cast<std::uint16_t>(y0), t});
    std::vector<int> column_rows{y0};
    std::vector<int> unpaired{y0};
    int remaining = size - 1;
    int next_offset = 1;
    const bool can_mirror = x0 >= 1 && x0 + 1 < kDetectorPixels;
    while (remaining > 0) {
        const bool pair = can_mirror && remaining >= 2 && !unpaired.empty() && coin(rng) < 0.5;
        if (pair) {
            const int y = unpaired.front();
            unpaired.erase(unpaired.begin());
            out.push_back({static_cast<std::uint16_t>(x0 - 1), static_cast<std::uint16_t>(y), delayed()});
            out.push_back({static_cast<std::uint16_t>(x0 + 1), static_cast<std::uint16_t>(y), delayed()});
            remaining -= 2;
        } else {
            const int y = (next_offset % 2 == 1) ? y0 + (next_offset + 1) / 2 : y0 - next_offset / 2;
            ++next_offset;
            column_rows.push_back(y);
            unpaired.push_back(y);
            out.push_back({static_cast<std::uint16_t>(x0), static_cast<std::uint16_t>(y), delayed()});
            remaining -= 1;
        }
    }
}

int column_for(float loss, const ElectronChain& chain, bool& clipped) {
    const double x = static_cast<double>(chain.zlp_reference_px) - static_cast<double>(loss) / chain.pixel_dispersion_ev;
    long col = std::lround(x);
    clipped = col < 0 || col >= kDetectorPixels || !std::isfinite(x);
    if (!std::isfinite(x)) col = 0;
    return static_cast<int>(std::clamp<long>(col, 0, kDetectorPixels - 1));
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    return splitmix(splitmix(seed ^ splitmix(stream + 0x51ed2701ULL)) + index);
}

double mean_photons_per_electron(const model::CouplingSpec& c) {
    return c.mean_g0 * c.mean_g0 + c.std_g0 * c.std_g0;
}

void validate(const ExperimentConfig& c) {
    if (!(c.electron_rate_per_s >= 0.0) || !std::isfinite(c.electron_rate_per_s)) {
        throw std::invalid_argument("electron_rate must be finite and >= 0");
    }
    if (!(c.duration_s >= 0.0) || !std::isfinite(c.duration_s)) {
        throw std::invalid_argument("duration must be finite and >= 0");
    }
    model::validate(c.physics);
    check_prob(c.detected_mode_fraction, "detected_mode_fraction");
    check_prob(c.splitter_ratio, "splitter_ratio");
    check_channel(c.channel_a, "photon_a");
    check_channel(c.channel_b, "photon_b");
    check_prob(c.electron.transmission, "electron.transmission");
    if (!(c.electron.jitter_fwhm_s >= 0.0)) throw std::invalid_argument("electron.jitter_fwhm must be >= 0");
    if (c.electron.timestamp_quantum_ps <= 0) throw std::invalid_argument("electron.timestamp_quantum must be > 0");
    if (!(c.electron.pixel_dispersion_ev > 0.0)) throw std::invalid_argument("electron.pixel_dispersion must be > 0");
    if (!(c.electron.mean_cluster_size >= 1.0)) throw std::invalid_argument("electron.mean_cluster_size must be >= 1");
    if (!(c.electron.pixel_jitter_sigma_s >= 0.0)) throw std::invalid_argument("electron.pixel_jitter must be >= 0");
    if (c.electron.zlp_reference_px < 0 || c.electron.zlp_reference_px >= kDetectorPixels) {
        throw std::invalid_argument("electron.zlp_reference_px must lie on the detector");
    }
    if (!(c.segment_s > 0.0)) throw std::invalid_argument("segment length must be > 0");
    if (c.electron_rate_per_s * c.duration_s > c.max_electrons) {
        throw std::invalid_argument("electron_rate * duration exceeds the resource guard (max_electrons)");
    }
}

std::size_t GroundTruth::detected_count(const ElectronTruth& e) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < e.true_k; ++i) {
        const auto f = fates[e.fate_offset + i];
        n += (f == PhotonFate::DetectedA || f == PhotonFate::DetectedB) ? 1 : 0;
    }
    return n;
}

struct Generator::Impl {
    ExperimentConfig cfg;
    GenerateOptions opt;
    GroundTruth truth;

    std::int64_t duration_ps = 0;
    double segment_ps = 0.0;
    std::uint64_t n_segments = 0;
    std::uint64_t segment = 0;
    std::int64_t guard_ps = 0;
    double sigma_e = 0.0, sigma_a = 0.0, sigma_b = 0.0;
    std::int64_t dead_a = 0, dead_b = 0;
    std::int64_t last_a = std::numeric_limits<std::int64_t>::min() / 2;
    std::int64_t last_b = std::numeric_limits<std::int64_t>::min() / 2;
    std::vector<double> k_cdf;
    std::uint64_t next_id = 0;
    bool finished = false;

    std::vector<PendingElectron> pend_e;
    std::vector<PendingPhoton> pend_a, pend_b;
    std::vector<PixelHit> pend_pix;

    Impl(const ExperimentConfig& c, GenerateOptions o) : cfg(c), opt(o) {
        validate(cfg);
        duration_ps = static_cast<std::int64_t>(std::llround(cfg.duration_s * kPsPerS));
        segment_ps = cfg.segment_s * kPsPerS;
        n_segments = duration_ps > 0
                         ? static_cast<std::uint64_t>(std::ceil(static_cast<double>(duration_ps) / segment_ps))
                         : 0;
        sigma_e = cfg.electron.jitter_fwhm_s * kPsPerS / kFwhmToSigma;
        sigma_a = cfg.channel_a.jitter_fwhm_s * kPsPerS / kFwhmToSigma;
        sigma_b = cfg.channel_b.jitter_fwhm_s * kPsPerS / kFwhmToSigma;
        const double smax = std::max({sigma_e, sigma_a, sigma_b});
        const std::int64_t qmax = std::max({cfg.electron.timestamp_quantum_ps, cfg.channel_a.timestamp_quantum_ps,
                                            cfg.channel_b.timestamp_quantum_ps});
        guard_ps = static_cast<std::int64_t>(std::ceil(6.0 * smax)) + qmax + 1;
        dead_a = static_cast<std::int64_t>(std::llround(cfg.channel_a.dead_time_s * kPsPerS));
        dead_b = static_cast<std::int64_t>(std::llround(cfg.channel_b.dead_time_s * kPsPerS));
        const int m_max = model::populations_cutoff(cfg.physics.coupling, 1e-16);
        const auto pops = model::mixed_sideband_populations(cfg.physics.coupling, m_max);
        double cum = 0.0;
        for (double p : pops.p) {
            cum += p;
            k_cdf.push_back(cum);
        }
        k_cdf.back() = 1.0;
    }

    int draw_k(double u) const {
        if (u < k_cdf[0]) return 0;
        const auto it = std::upper_bound(k_cdf.begin(), k_cdf.end(), u);
        return static_cast<int>(std::min<std::ptrdiff_t>(it - k_cdf.begin(), static_cast<std::ptrdiff_t>(k_cdf.size()) - 1));
    }

    void generate_segment(std::uint64_t seg) {
        const double t0 = static_cast<double>(seg) * segment_ps;
        const double t1 = std::min(t0 + segment_ps, static_cast<double>(duration_ps));
        std::mt19937_64 rng(derive_seed(cfg.seed, 0, seg));
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        std::normal_distribution<double> normal(0.0, 1.0);
        std::exponential_distribution<double> gap(std::max(cfg.electron_rate_per_s, 1e-300) / kPsPerS);
        std::exponential_distribution<double> continuum(1.0 / cfg.physics.continuum_decay);
        const auto& ph = cfg.physics;
        const double s_pm = ph.pm_bandwidth / kFwhmToSigma;
        const std::size_t e_prefix = pend_e.size(), a_prefix = pend_a.size(), b_prefix = pend_b.size();

        double t = cfg.electron_rate_per_s > 0.0 ? t0 + gap(rng) : t1;
        while (t < t1) {
            const std::uint64_t id = next_id++;
            const int k = draw_k(uni(rng));
            double loss = 0.0;
            if (k > 0) loss += k * ph.photon_energy + std::sqrt(static_cast<double>(k)) * s_pm * normal(rng);
            double cont = 0.0;
            if (ph.continuum_prob > 0.0 && uni(rng) < ph.continuum_prob) cont = continuum(rng);
            loss += cont + ph.zlp_sigma * normal(rng) + cfg.zlp_drift_ev_per_s * (t / kPsPerS);
            const bool transmitted = uni(rng) < cfg.electron.transmission;
            std::int64_t te = 0;
            bool recorded = false;
            if (transmitted) {
                te = quantize(t + sigma_e * bounded_normal(rng, normal), cfg.electron.timestamp_quantum_ps);
                recorded = te >= 0 && te <= duration_ps;
            }
            std::uint64_t truth_index = kNoSlot;
            if (opt.truth) {
                truth_index = truth.electrons.size();
                ElectronTruth et;
                et.id = id;
                et.emission_time_ps = static_cast<std::int64_t>(std::floor(t));
                et.true_k = static_cast<std::uint16_t>(k);
                et.transmitted = transmitted;
                et.recorded = recorded;
                et.continuum_loss_ev = static_cast<float>(cont);
                et.energy_loss_ev = static_cast<float>(loss);
                et.fate_offset = static_cast<std::uint32_t>(truth.fates.size());
                truth.electrons.push_back(et);
            }
            if (recorded) pend_e.push_back({te, static_cast<float>(loss), 0, id, truth_index});
            for (int i = 0; i < k; ++i) {
                std::uint64_t slot = kNoSlot;
                if (opt.truth) {
                    slot = truth.fates.size();
                    truth.fates.push_back(PhotonFate::LostOutsideMode);
                }
                if (opt.classical) continue;
                if (!(uni(rng) < cfg.detected_mode_fraction)) continue;
                const bool to_a = uni(rng) < cfg.splitter_ratio;
                const auto& ch = to_a ? cfg.channel_a : cfg.channel_b;
                if (!(uni(rng) < ch.efficiency)) {
                    if (slot != kNoSlot) truth.fates[slot] = to_a ? PhotonFate::LostEfficiencyA : PhotonFate::LostEfficiencyB;
                    continue;
                }
                const double sig = to_a ? sigma_a : sigma_b;
                const std::int64_t tp = quantize(t + sig * bounded_normal(rng, normal), ch.timestamp_quantum_ps);
                if (tp < 0 || tp > duration_ps) {
                    if (slot != kNoSlot) truth.fates[slot] = PhotonFate::LostOutsideRun;
                    continue;
                }
                if (slot != kNoSlot) truth.fates[slot] = to_a ? PhotonFate::DetectedA : PhotonFate::DetectedB;
                (to_a ? pend_a : pend_b).push_back({tp, static_cast<std::int64_t>(id), slot, 0});
            }
            t += gap(rng);
        }

        // Independent processes: dark counts, and for the classical control the signal photons.
        std::mt19937_64 aux(derive_seed(cfg.seed, 2, seg));
        const double span_s = (t1 - t0) / kPsPerS;
        auto poisson_times = [&](double rate, std::int64_t q, double sigma, std::vector<PendingPhoton>& dst,
                                 std::uint16_t flags) {
            if (rate <= 0.0 || span_s <= 0.0) return;
            std::poisson_distribution<long> count(rate * span_s);
            std::uniform_real_distribution<double> when(t0, t1);
            const long n = count(aux);
            std::vector<double> times(static_cast<std::size_t>(n));
            for (auto& x : times) x = when(aux);
            std::sort(times.begin(), times.end());
            for (double x : times) {
                const double jittered = sigma > 0.0 ? x + sigma * bounded_normal(aux, normal) : x;
                const std::int64_t tp = quantize(jittered, q);
                if (tp < 0 || tp > duration_ps) continue;
                dst.push_back({tp, -1, kNoSlot, flags});
            }
        };
        if (opt.classical) {
            const double mean_k = mean_photons_per_electron(ph.coupling);
            const double base = cfg.electron_rate_per_s * mean_k * cfg.detected_mode_fraction;
            poisson_times(base * cfg.splitter_ratio * cfg.channel_a.efficiency, cfg.channel_a.timestamp_quantum_ps,
                          sigma_a, pend_a, 0);
            poisson_times(base * (1.0 - cfg.splitter_ratio) * cfg.channel_b.efficiency,
                          cfg.channel_b.timestamp_quantum_ps, sigma_b, pend_b, 0);
        }
        poisson_times(cfg.channel_a.dark_rate_per_s, cfg.channel_a.timestamp_quantum_ps, 0.0, pend_a, event_flags::kDark);
        poisson_times(cfg.channel_b.dark_rate_per_s, cfg.channel_b.timestamp_quantum_ps, 0.0, pend_b, event_flags::kDark);

        insertion_sort_by_time(pend_e, e_prefix);
        insertion_sort_by_time(pend_a, a_prefix);
        insertion_sort_by_time(pend_b, b_prefix);
    }

    void release_photons(std::vector<PendingPhoton>& pend, std::int64_t limit, std::int64_t dead,
                         std::int64_t& last, std::vector<std::int64_t>& times, std::vector<std::uint16_t>& flags,
                         std::vector<std::int64_t>& sources, bool is_a) {
        std::size_t n = 0;
        while (n < pend.size() && pend[n].t < limit) ++n;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& p = pend[i];
            if (p.t - last < dead) {
                if (p.fate_slot != kNoSlot) {
                    truth.fates[p.fate_slot] = is_a ? PhotonFate::LostDeadTimeA : PhotonFate::LostDeadTimeB;
                }
                continue;
            }
            last = p.t;
            times.push_back(p.t);
            flags.push_back(p.flags);
            sources.push_back(p.source);
            if (opt.truth) (is_a ? truth.source_a : truth.source_b).push_back(p.source);
        }
        pend.erase(pend.begin(), pend.begin() + static_cast<std::ptrdiff_t>(n));
    }

    bool next(Segment& out) {
        out = Segment{};
        if (finished) return false;
        if (segment >= n_segments) {
            finished = true;
            out.complete_until_ps = std::numeric_limits<std::int64_t>::max();
            return false;
        }
        const std::uint64_t seg = segment++;
        generate_segment(seg);
        const bool last = segment >= n_segments;
        const double seg_end = std::min(static_cast<double>(seg + 1) * segment_ps, static_cast<double>(duration_ps));
        const std::int64_t limit = last ? std::numeric_limits<std::int64_t>::max()
                                        : static_cast<std::int64_t>(std::floor(seg_end)) - guard_ps;
        out.complete_until_ps = limit;

        std::size_t n = 0;
        while (n < pend_e.size() && pend_e[n].t < limit) ++n;
        std::mt19937_64 pix_rng(derive_seed(cfg.seed, 1, seg));
        for (std::size_t i = 0; i < n; ++i) {
            const auto& e = pend_e[i];
            out.events.electron_t.push_back(e.t);
            out.events.electron_e.push_back(e.e);
            std::uint16_t flags = e.flags;
            if (opt.pixels) {
                bool clipped = false;
                const int col = column_for(e.e, cfg.electron, clipped);
                if (clipped) {
                    flags |= event_flags::kClipped;
                    if (e.truth_index != kNoSlot) truth.electrons[e.truth_index].pixel_clipped = true;
                }
                append_cluster(pend_pix, e.t, col, pix_rng, cfg.electron);
            }
            out.electron_flags.push_back(flags);
        }
        pend_e.erase(pend_e.begin(), pend_e.begin() + static_cast<std::ptrdiff_t>(n));
        release_photons(pend_a, limit, dead_a, last_a, out.events.photon_a, out.flags_a, out.source_a, true);
        release_photons(pend_b, limit, dead_b, last_b, out.events.photon_b, out.flags_b, out.source_b, false);

        if (opt.pixels) {
            std::stable_sort(pend_pix.begin(), pend_pix.end(),
                             [](const PixelHit& a, const PixelHit& b) { return a.time_ps < b.time_ps; });
            std::size_t np = 0;
            while (np < pend_pix.size() && pend_pix[np].time_ps < limit) ++np;
            out.pixels.assign(pend_pix.begin(), pend_pix.begin() + static_cast<std::ptrdiff_t>(np));
            pend_pix.erase(pend_pix.begin(), pend_pix.begin() + static_cast<std::ptrdiff_t>(np));
        }
        if (last) finished = true;
        return true;
    }
};

Generator::Generator(const ExperimentConfig& config, GenerateOptions options)
    : impl_(std::make_unique<Impl>(config, options)) {}
Generator::~Generator() = default;
bool Generator::next(Segment& out) { return impl_->next(out); }
GroundTruth& Generator::truth() { return impl_->truth; }

SimulationOutput generate(const ExperimentConfig& config, GenerateOptions options) {
    Generator gen(config, options);
    SimulationOutput out;
    Segment seg;
    while (gen.next(seg)) {
        const auto& ev = seg.events;
        std::vector<Event> chunk;
        chunk.reserve(ev.electron_t.size() + ev.photon_a.size() + ev.photon_b.size());
        for (std::size_t i = 0; i < ev.electron_t.size(); ++i) {
            chunk.push_back({ev.electron_t[i], ev.electron_e[i], EventKind::Electron, seg.electron_flags[i]});
        }
        for (std::size_t i = 0; i < ev.photon_a.size(); ++i) chunk.push_back({ev.photon_a[i], 0.0f, EventKind::PhotonA, seg.flags_a[i]});
        for (std::size_t i = 0; i < ev.photon_b.size(); ++i) chunk.push_back({ev.photon_b[i], 0.0f, EventKind::PhotonB, seg.flags_b[i]});
        std::stable_sort(chunk.begin(), chunk.end(), event_order);
        out.events.records.insert(out.events.records.end(), chunk.begin(), chunk.end());
        out.pixels.hits.insert(out.pixels.hits.end(), seg.pixels.begin(), seg.pixels.end());
    }
    if (options.truth) out.truth = std::move(gen.truth());
    return out;
}

PixelHitStream emit_pixel_hits(const std::vector<std::int64_t>& times, const std::vector<float>& losses,
                               const ElectronChain& chain, std::uint64_t seed, std::vector<bool>* clipped) {
    if (times.size() != losses.size()) throw std::invalid_argument("emit_pixel_hits: size mismatch");
    if (!std::is_sorted(times.begin(), times.end())) throw std::invalid_argument("emit_pixel_hits: electrons must be time-sorted");
    PixelHitStream out;
    std::mt19937_64 rng(derive_seed(seed, 1, 0));
    if (clipped) clipped->assign(times.size(), false);
    for (std::size_t i = 0; i < times.size(); ++i) {
        bool c = false;
        const int col = column_for(losses[i], chain, c);
        if (clipped) (*clipped)[i] = c;
        append_cluster(out.hits, times[i], col, rng, chain);
    }
    std::stable_sort(out.hits.begin(), out.hits.end(),
                     [](const PixelHit& a, const PixelHit& b) { return a.time_ps < b.time_ps; });
    return out;
}

EventStream classical_control(const ExperimentConfig& config) {
    GenerateOptions opt;
    opt.pixels = false;
    opt.truth = false;
    opt.classical = true;
    return generate(config, opt).events;
}

void write_truth_jsonl(std::ostream& os, const GroundTruth& truth) {
    static const char* names[] = {"A", "B", "outside_mode", "efficiency_A", "efficiency_B",
                                  "dead_time_A", "dead_time_B", "outside_run"};
    for (const auto& e : truth.electrons) {
        nlohmann::json j;
        j["id"] = e.id;
        j["emission_time_ps"] = e.emission_time_ps;
        j["true_k"] = e.true_k;
        j["transmitted"] = e.transmitted;
        j["recorded"] = e.recorded;
        j["continuum_loss_ev"] = e.continuum_loss_ev;
        j["energy_loss_ev"] = e.energy_loss_ev;
        auto fates = nlohmann::json::array();
        for (std::size_t i = 0; i < e.true_k; ++i) fates.push_back(names[static_cast<int>(truth.fates[e.fate_offset + i])]);
        j["detected_mask"] = fates;
        os << j.dump() << '\n';
    }
}

}  // namespace fockherald::simgen
