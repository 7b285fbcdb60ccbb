// Estimators: g2 family, CAR, heralding efficiency, Cauchy-Schwarz gamma,
// coincidence-based coupling and peak widths.
#include "fockherald/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <boost/math/tools/minima.hpp>

namespace fockherald::stats {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kFwhmPerSigma = 2.3548200450309493;

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

std::vector<double> centers(const std::vector<double>& edges) {
    std::vector<double> c(edges.size() - 1);
    for (std::size_t i = 0; i + 1 < edges.size(); ++i) c[i] = 0.5 * (edges[i] + edges[i + 1]);
    return c;
}

bool inside(double x, const std::pair<double, double>& w) { return x >= w.first && x <= w.second; }

// Energy bins of the cube whose centers fall inside the window.
std::vector<int> energy_bins(const correlate::CubeAxes& ax, const EnergyWindow& w) {
    if (!(w.second >= w.first)) throw std::invalid_argument("energy window is empty");
    std::vector<int> bins;
    for (int i = 0; i < ax.e_bins; ++i) {
        if (inside(ax.e_center(i), w)) bins.push_back(i);
    }
    if (bins.empty()) throw std::invalid_argument("energy window lies outside the cube energy axis");
    return bins;
}

struct WindowSums {
    std::vector<double> na, nb, nab;  // nab: [ia][ib]
    double ne = 0.0;
};

WindowSums window_sums(const correlate::CoincidenceCube& cube, const EnergyWindow& window) {
    const auto& ax = cube.axes;
    const auto bins = energy_bins(ax, window);
    const auto nt = static_cast<std::size_t>(ax.tau_bins);
    WindowSums s;
    s.na.assign(nt, 0.0);
    s.nb.assign(nt, 0.0);
    s.nab.assign(nt * nt, 0.0);
    for (int ie : bins) s.ne += static_cast<double>(cube.electrons[static_cast<std::size_t>(ie)]);
    for (std::size_t it = 0; it < nt; ++it) {
        for (int ie : bins) {
            s.na[it] += static_cast<double>(cube.marginal_a[cube.at2(static_cast<int>(it), ie)]);
            s.nb[it] += static_cast<double>(cube.marginal_b[cube.at2(static_cast<int>(it), ie)]);
        }
    }
    for (std::size_t ia = 0; ia < nt; ++ia) {
        for (std::size_t ib = 0; ib < nt; ++ib) {
            double v = 0.0;
            for (int ie : bins) v += static_cast<double>(cube.counts[cube.at(static_cast<int>(ia), static_cast<int>(ib), ie)]);
            s.nab[ia * nt + ib] = v;
        }
    }
    return s;
}

// Eq. 3 for one cell with first-order Poisson error.
std::pair<double, double> heralded_cell(double nab, double na, double nb, double ne) {
    if (na <= 0.0 || nb <= 0.0 || ne <= 0.0) return {kNaN, kNaN};
    const double g = nab * ne / (na * nb);
    if (nab <= 0.0) return {0.0, ne / (na * nb)};
    return {g, g * std::sqrt(1.0 / nab + 1.0 / na + 1.0 / nb + 1.0 / ne)};
}

}  // namespace

EnergyWindow order_window(int m, double photon_energy_ev) {
    if (m < 0) throw std::invalid_argument("scattering order must be >= 0");
    return {m * photon_energy_ev - 0.5 * photon_energy_ev, m * photon_energy_ev + 0.5 * photon_energy_ev};
}

UnheraldedAccumulator::UnheraldedAccumulator(UnheraldedOptions options) : o_(options) {
    if (o_.bin_ps <= 0 || o_.span_ps < o_.bin_ps) throw std::invalid_argument("g2 needs 0 < bin <= span");
    half_bins_ = o_.span_ps / o_.bin_ps;
    reach_ = half_bins_ * o_.bin_ps + o_.bin_ps / 2;
    counts_.assign(static_cast<std::size_t>(2 * half_bins_ + 1), 0.0);
}

void UnheraldedAccumulator::push(std::span<const std::int64_t> a, std::span<const std::int64_t> b,
                                 std::int64_t complete_until_ps) {
    if (!std::is_sorted(a.begin(), a.end()) || !std::is_sorted(b.begin(), b.end())) {
        throw std::invalid_argument("photon streams must be time-sorted");
    }
    if ((!a.empty() && !a_.empty() && a.front() < a_.back()) || (!b.empty() && !b_.empty() && b.front() < b_.back())) {
        throw std::invalid_argument("photon chunk overlaps previously pushed events");
    }
    a_.insert(a_.end(), a.begin(), a.end());
    b_.insert(b_.end(), b.begin(), b.end());
    process(complete_until_ps - reach_ - 1);
}

void UnheraldedAccumulator::finish() { process(std::numeric_limits<std::int64_t>::max()); }

void UnheraldedAccumulator::process(std::int64_t limit) {
    // A photons at or below `limit` see every B partner within reach.
    std::size_t lo = 0;
    const auto nbins = static_cast<std::int64_t>(counts_.size());
    for (; a_done_ < a_.size() && a_[a_done_] <= limit; ++a_done_) {
        const std::int64_t ta = a_[a_done_];
        while (lo < b_.size() && b_[lo] < ta - reach_) ++lo;
        for (std::size_t j = lo; j < b_.size() && b_[j] - ta <= reach_; ++j) {
            const std::int64_t k = floor_div(b_[j] - ta + o_.bin_ps / 2, o_.bin_ps) + half_bins_;
            if (k >= 0 && k < nbins) counts_[static_cast<std::size_t>(k)] += 1.0;
        }
    }
    a_.erase(a_.begin(), a_.begin() + static_cast<std::ptrdiff_t>(a_done_));
    a_done_ = 0;
    const std::int64_t keep = a_.empty() ? (limit == std::numeric_limits<std::int64_t>::max() ? limit : limit + 1 - reach_)
                                         : a_.front() - reach_;
    std::size_t drop = 0;
    while (drop < b_.size() && b_[drop] < keep) ++drop;
    b_.erase(b_.begin(), b_.begin() + static_cast<std::ptrdiff_t>(drop));
}

CorrelationCurve UnheraldedAccumulator::result() const {
    CorrelationCurve c;
    c.baseline_window = {o_.baseline_lo_ps, o_.baseline_hi_ps};
    double base = 0.0;
    int nb = 0;
    for (std::size_t i = 0; i < counts_.size(); ++i) {
        const double tau = static_cast<double>((static_cast<std::int64_t>(i) - half_bins_) * o_.bin_ps);
        c.tau_ps.push_back(tau);
        if (std::abs(tau) >= o_.baseline_lo_ps && std::abs(tau) <= o_.baseline_hi_ps) {
            base += counts_[i];
            ++nb;
        }
    }
    if (nb == 0) throw std::invalid_argument("baseline window contains no bins");
    if (base <= 0.0) throw std::domain_error("no counts in the g2 baseline window; normalization undefined");
    c.baseline_level = base / nb;
    c.counts = counts_;
    for (double n : counts_) {
        const double g = n / c.baseline_level;
        c.g2.push_back(g);
        c.error.push_back(n > 0 ? g * std::sqrt(1.0 / n + 1.0 / base) : 1.0 / c.baseline_level);
    }
    return c;
}

CorrelationCurve g2_unheralded(std::span<const std::int64_t> a, std::span<const std::int64_t> b,
                               const UnheraldedOptions& o) {
    UnheraldedAccumulator acc(o);
    acc.push(a, b, std::numeric_limits<std::int64_t>::min() / 2);
    acc.finish();
    return acc.result();
}

Estimate g2_at_zero(const CorrelationCurve& c) {
    if (c.tau_ps.empty()) throw std::invalid_argument("empty correlation curve");
    std::size_t best = 0;
    for (std::size_t i = 1; i < c.tau_ps.size(); ++i) {
        if (std::abs(c.tau_ps[i]) < std::abs(c.tau_ps[best])) best = i;
    }
    return {c.g2[best], c.error[best], false, {}};
}

HeraldedG2Surface g2_heralded_surface(const correlate::CoincidenceCube& cube, const EnergyWindow& window) {
    const auto s = window_sums(cube, window);
    const auto& ax = cube.axes;
    const auto nt = static_cast<std::size_t>(ax.tau_bins);
    HeraldedG2Surface out;
    out.energy_window = window;
    out.heralds = s.ne;
    for (std::size_t i = 0; i < nt; ++i) out.tau_a_ps.push_back(ax.tau_center(static_cast<int>(i)));
    out.tau_b_ps = out.tau_a_ps;
    out.g2.resize(nt * nt);
    out.error.resize(nt * nt);
    out.counts = s.nab;
    for (std::size_t ia = 0; ia < nt; ++ia) {
        for (std::size_t ib = 0; ib < nt; ++ib) {
            const auto [g, e] = heralded_cell(s.nab[ia * nt + ib], s.na[ia], s.nb[ib], s.ne);
            out.g2[ia * nt + ib] = g;
            out.error[ia * nt + ib] = e;
            if (std::isnan(g)) ++out.masked;
        }
    }
    return out;
}

CorrelationCurve g2_time_averaged(const correlate::CoincidenceCube& cube, const EnergyWindow& window) {
    const auto s = window_sums(cube, window);
    const auto& ax = cube.axes;
    const int ia0 = ax.tau_index(0);
    if (ia0 < 0) throw std::invalid_argument("delay axis does not contain zero");
    const auto nt = static_cast<std::size_t>(ax.tau_bins);
    CorrelationCurve c;
    for (std::size_t ib = 0; ib < nt; ++ib) {
        const double nab = s.nab[static_cast<std::size_t>(ia0) * nt + ib];
        const auto [g, e] = heralded_cell(nab, s.na[static_cast<std::size_t>(ia0)], s.nb[ib], s.ne);
        c.tau_ps.push_back(ax.tau_center(static_cast<int>(ib)));
        c.g2.push_back(g);
        c.error.push_back(e);
        c.counts.push_back(nab);
    }
    return c;
}

DiscreteG2Accumulator::DiscreteG2Accumulator(DiscreteG2Options options) : o_(std::move(options)) {
    if (o_.max_q < 1) throw std::invalid_argument("max_q must be >= 1");
    if (o_.coincidence_window_ps < 0) throw std::invalid_argument("coincidence window must be >= 0");
    ring_.assign(static_cast<std::size_t>(o_.max_q), 0);
    pos_.assign(static_cast<std::size_t>(o_.max_q) + 1, 0);
    neg_.assign(static_cast<std::size_t>(o_.max_q) + 1, 0);
}

void DiscreteG2Accumulator::add(const correlate::TripleRecord& r) {
    if (o_.energy_window && !inside(r.e_el, *o_.energy_window)) return;
    const bool a = r.true_a && std::abs(r.tau_a) <= o_.coincidence_window_ps;
    const bool b = r.true_b && std::abs(r.tau_b) <= o_.coincidence_window_ps;
    const std::uint8_t cur = static_cast<std::uint8_t>((a ? 1 : 0) | (b ? 2 : 0));
    n_a_ += a;
    n_b_ += b;
    both_ += a && b;
    const auto q_max = static_cast<std::size_t>(o_.max_q);
    if (cur != 0) {
        const std::size_t reach = std::min(count_, q_max);
        for (std::size_t q = 1; q <= reach; ++q) {
            const std::uint8_t prev = ring_[(count_ - q) % q_max];
            if ((prev & 1) && b) ++pos_[q];  // A on the earlier herald, B on the later
            if ((prev & 2) && a) ++neg_[q];
        }
    }
    ring_[count_ % q_max] = cur;
    ++count_;
}

void DiscreteG2Accumulator::add(std::span<const correlate::TripleRecord> records) {
    for (const auto& r : records) add(r);
}

DiscreteG2 DiscreteG2Accumulator::result() const {
    DiscreteG2 d;
    d.heralds = static_cast<double>(count_);
    d.herald_a = static_cast<double>(n_a_);
    d.herald_b = static_cast<double>(n_b_);
    const double norm = (n_a_ > 0 && n_b_ > 0) ? d.heralds / (d.herald_a * d.herald_b) : kNaN;
    for (int q = 0; q <= o_.max_q; ++q) {
        const auto uq = static_cast<std::size_t>(q);
        const double raw = q == 0 ? static_cast<double>(both_) : static_cast<double>(pos_[uq] + neg_[uq]);
        const double pairs = q == 0 ? raw : 0.5 * raw;
        d.pairs.push_back(pairs);
        const double g = pairs * norm;
        d.g2.push_back(g);
        d.error.push_back(raw > 0 ? g / std::sqrt(raw) : (q == 0 ? norm : 0.5 * norm));
    }
    return d;
}

Estimate DiscreteG2::pooled_tail() const {
    if (g2.size() < 2) throw std::invalid_argument("discrete g2 has no q >= 1 entries");
    const double norm = heralds / (herald_a * herald_b);
    double raw = 0.0;
    for (std::size_t q = 1; q < pairs.size(); ++q) raw += 2.0 * pairs[q];
    const double n_q = static_cast<double>(pairs.size() - 1);
    const double g = 0.5 * raw / n_q * norm;
    return {g, raw > 0 ? g / std::sqrt(raw) : kInf, false, {}};
}

DiscreteG2 g2_discrete(std::span<const correlate::TripleRecord> records, const DiscreteG2Options& options) {
    DiscreteG2Accumulator acc(options);
    acc.add(records);
    return acc.result();
}

namespace {

CarResult finish_car(double s, double a, double var_a) {
    CarResult r;
    r.signal = s;
    r.accidental = a;
    r.accidental_var = var_a;
    r.significance = (s - a) / std::sqrt(std::max(s + var_a, 1e-300));
    if (!(a > 0.0)) {
        r.infinite = true;
        r.car = kInf;
        r.error = kInf;
        return r;
    }
    r.car = (s - a) / a;
    r.error = std::sqrt(s / (a * a) + s * s * var_a / (a * a * a * a));
    return r;
}

}  // namespace

CarResult car(const correlate::Histogram& h, std::pair<double, double> signal,
              const std::vector<std::pair<double, double>>& background) {
    if (h.edges.size() != 1) throw std::invalid_argument("CAR needs a one-dimensional delay histogram");
    if (background.empty()) throw std::invalid_argument("CAR needs at least one background window");
    for (const auto& bw : background) {
        if (!(bw.second < signal.first || bw.first > signal.second)) {
            throw std::invalid_argument("CAR signal and background windows overlap");
        }
    }
    const auto c = centers(h.edges[0]);
    double s = 0.0, b = 0.0;
    int ns = 0, nb = 0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        if (inside(c[i], signal)) {
            s += h.values[i];
            ++ns;
        }
        for (const auto& bw : background) {
            if (inside(c[i], bw)) {
                b += h.values[i];
                ++nb;
                break;
            }
        }
    }
    if (ns == 0 || nb == 0) throw std::invalid_argument("CAR window selects no bins");
    const double a = b * ns / nb;
    const double var_a = b > 0 ? a * a / b : 0.0;
    return finish_car(s, a, var_a);
}

CarResult car_threefold(const correlate::Histogram& h2, const ThreefoldWindows& w) {
    if (h2.edges.size() != 2) throw std::invalid_argument("threefold CAR needs a (tau_A, tau_B) histogram");
    const auto ca = centers(h2.edges[0]);
    const auto cb = centers(h2.edges[1]);
    auto bg = [&](double x) { return std::abs(x) >= w.background_lo_ps && std::abs(x) <= w.background_hi_ps; };
    double s = 0, sa = 0, sb = 0, sd = 0, sf = 0;
    int ns = 0, na = 0, nb = 0, nd = 0, nf = 0;
    for (std::size_t i = 0; i < ca.size(); ++i) {
        for (std::size_t j = 0; j < cb.size(); ++j) {
            const double v = h2.values[i * cb.size() + j];
            const double a = ca[i], b = cb[j];
            const bool sig_a = std::abs(a) <= w.signal_half_ps, sig_b = std::abs(b) <= w.signal_half_ps;
            if (sig_a && sig_b) {
                if (std::abs(a - b) > w.pair_half_ps) continue;
                s += v;
                ++ns;
            } else if (sig_a && bg(b)) {
                sa += v;
                ++na;
            } else if (sig_b && bg(a)) {
                sb += v;
                ++nb;
            } else if (bg(a) && bg(b)) {
                if (std::abs(a - b) <= std::min(w.signal_half_ps, w.pair_half_ps)) {
                    sd += v;
                    ++nd;
                } else if (std::abs(a - b) >= w.background_lo_ps) {
                    sf += v;
                    ++nf;
                }
            }
        }
    }
    if (ns == 0 || na == 0 || nb == 0 || nd == 0 || nf == 0) {
        throw std::invalid_argument("threefold CAR windows select no bins in some region");
    }
    const double ma = sa / na, mb = sb / nb, md = sd / nd, mf = sf / nf;
    const double a = ns * (ma + mb + md - 2.0 * mf);
    const double var_a = static_cast<double>(ns) * ns * (ma / na + mb / nb + md / nd + 4.0 * mf / nf);
    return finish_car(s, a, var_a);
}

Estimate heralding_efficiency(double n_ij, double n_j, double detector_eff, double transmission, double extra_variance) {
    if (!(n_j > 0.0)) throw std::invalid_argument("heralding efficiency needs N_j > 0");
    if (!(detector_eff > 0.0 && detector_eff <= 1.0) || !(transmission > 0.0 && transmission <= 1.0)) {
        throw std::invalid_argument("detector efficiency and transmission must lie in (0, 1]");
    }
    const double scale = detector_eff * transmission;
    const double p = n_ij / n_j;
    const double pc = std::clamp(p, 0.0, 1.0);
    const double var_p = pc * (1.0 - pc) / n_j + extra_variance / (n_j * n_j);
    Estimate e;
    e.value = p / scale;
    e.error = std::sqrt(var_p) / scale;
    if (e.value > 1.0) {
        e.flagged = true;
        e.note = "efficiency exceeds unity: calibration inconsistency";
    }
    return e;
}

namespace {

void append_cell(std::vector<CsiAccumulator::Cell>& cells, std::int64_t bin, double v) {
    if (!cells.empty() && cells.back().bin == bin) cells.back().v += v;
    else cells.push_back({bin, v});
}

}  // namespace

CsiAccumulator::CsiAccumulator(CsiOptions options, std::int64_t run_end_ps) : o_(std::move(options)), run_end_(run_end_ps) {
    if (o_.bin_ps <= 0 || o_.max_lag_bins < 0 || o_.jackknife_blocks < 2) {
        throw std::invalid_argument("csi needs positive bin, non-negative lag range and >= 2 blocks");
    }
    if (run_end_ < 0) throw std::invalid_argument("csi needs the run end time");
    nbins_ = run_end_ / o_.bin_ps + 1;
    per_block_ = std::max<std::int64_t>(1, (nbins_ + o_.jackknife_blocks - 1) / o_.jackknife_blocks);
    blocks_.resize(static_cast<std::size_t>(o_.jackknife_blocks));
    for (auto& b : blocks_) b.sen.assign(static_cast<std::size_t>(2 * o_.max_lag_bins + 1), 0.0);
}

CsiAccumulator::Block& CsiAccumulator::block(std::int64_t bin) {
    const auto k = std::clamp<std::int64_t>(bin / per_block_, 0, o_.jackknife_blocks - 1);
    return blocks_[static_cast<std::size_t>(k)];
}

void CsiAccumulator::push(const SplitStream& s, std::int64_t complete_until_ps) {
    for (std::size_t i = 0; i < s.electron_t.size(); ++i) {
        const double e = s.electron_e[i];
        if (o_.min_loss_ev && e < *o_.min_loss_ev) continue;
        append_cell(e_, floor_div(s.electron_t[i], o_.bin_ps), e);
    }
    for (std::int64_t t : s.photon_a) append_cell(a_, floor_div(t, o_.bin_ps), 1.0);
    for (std::int64_t t : s.photon_b) append_cell(b_, floor_div(t, o_.bin_ps), 1.0);
    process(floor_div(complete_until_ps, o_.bin_ps));
}

void CsiAccumulator::finish() { process(std::numeric_limits<std::int64_t>::max() / 4); }

void CsiAccumulator::process(std::int64_t complete_bin) {
    const std::int64_t L = o_.max_lag_bins;
    // Photon bins below complete_bin are final: fold A/B into sums and the union list.
    std::size_t i = 0, j = 0;
    while ((i < a_.size() && a_[i].bin < complete_bin) || (j < b_.size() && b_[j].bin < complete_bin)) {
        const bool take_a = i < a_.size() && a_[i].bin < complete_bin;
        const bool take_b = j < b_.size() && b_[j].bin < complete_bin;
        if (take_a && (!take_b || a_[i].bin < b_[j].bin)) {
            block(a_[i].bin).sa += a_[i].v;
            block(a_[i].bin).sn += a_[i].v;
            append_cell(n_, a_[i].bin, a_[i].v);
            ++i;
        } else if (take_b && (!take_a || b_[j].bin < a_[i].bin)) {
            block(b_[j].bin).sb += b_[j].v;
            block(b_[j].bin).sn += b_[j].v;
            append_cell(n_, b_[j].bin, b_[j].v);
            ++j;
        } else {
            auto& bl = block(a_[i].bin);
            bl.sa += a_[i].v;
            bl.sb += b_[j].v;
            bl.sn += a_[i].v + b_[j].v;
            bl.sab += a_[i].v * b_[j].v;
            append_cell(n_, a_[i].bin, a_[i].v + b_[j].v);
            ++i;
            ++j;
        }
    }
    a_.erase(a_.begin(), a_.begin() + static_cast<std::ptrdiff_t>(i));
    b_.erase(b_.begin(), b_.begin() + static_cast<std::ptrdiff_t>(j));
    // Electron bins whose whole lag range is final.
    std::size_t done = 0, lo = 0;
    for (; done < e_.size() && e_[done].bin + L < complete_bin; ++done) {
        const auto& c = e_[done];
        auto& bl = block(c.bin);
        bl.se += c.v;
        bl.se2 += c.v * c.v;
        while (lo < n_.size() && n_[lo].bin < c.bin - L) ++lo;
        for (std::size_t k = lo; k < n_.size() && n_[k].bin <= c.bin + L; ++k) {
            bl.sen[static_cast<std::size_t>(n_[k].bin - c.bin + L)] += c.v * n_[k].v;
        }
    }
    e_.erase(e_.begin(), e_.begin() + static_cast<std::ptrdiff_t>(done));
    // Union cells can be dropped once no pending or future electron reaches them.
    const std::int64_t keep_from = (e_.empty() ? complete_bin : std::min(e_.front().bin, complete_bin)) - L - 1;
    std::size_t drop = 0;
    while (drop < n_.size() && n_[drop].bin < keep_from) ++drop;
    n_.erase(n_.begin(), n_.begin() + static_cast<std::ptrdiff_t>(drop));
}

CsiResult CsiAccumulator::result() const {
    const int K = o_.jackknife_blocks;
    const std::size_t nl = static_cast<std::size_t>(2 * o_.max_lag_bins + 1);
    auto block_bins = [&](int k) {
        return static_cast<double>(std::clamp<std::int64_t>(nbins_ - k * per_block_, 0, per_block_));
    };
    struct Totals {
        double nbins = 0, se = 0, se2 = 0, sn = 0, sa = 0, sb = 0, sab = 0;
        std::vector<double> sen;
    };
    auto total_without = [&](int skip) {
        Totals t;
        t.sen.assign(nl, 0.0);
        for (int k = 0; k < K; ++k) {
            if (k == skip) continue;
            const auto& b = blocks_[static_cast<std::size_t>(k)];
            t.nbins += block_bins(k);
            t.se += b.se;
            t.se2 += b.se2;
            t.sn += b.sn;
            t.sa += b.sa;
            t.sb += b.sb;
            t.sab += b.sab;
            for (std::size_t l = 0; l < nl; ++l) t.sen[l] += b.sen[l];
        }
        return t;
    };
    auto usable = [](const Totals& t) { return t.se != 0.0 && t.sa > 0.0 && t.sb > 0.0 && t.sab > 0.0 && t.sn > 0.0; };
    struct Derived {
        double g_e = 0, g2 = 0;
        std::vector<double> g_en, gamma;
    };
    auto derive = [&](const Totals& t) {
        Derived d;
        const double n = t.nbins;
        const double me = t.se / n, mn = t.sn / n;
        d.g_e = (t.se2 / n) / (me * me);
        d.g2 = (t.sab / n) / ((t.sa / n) * (t.sb / n));
        for (std::size_t l = 0; l < nl; ++l) {
            const double g = (t.sen[l] / n) / (me * mn);
            d.g_en.push_back(g);
            d.gamma.push_back(o_.form == CsiForm::Squared ? g * g / (d.g_e * d.g2) : g / (d.g_e * d.g2));
        }
        return d;
    };
    const auto all = total_without(-1);
    if (!(all.se != 0.0)) throw std::domain_error("mean energy loss is zero; Cauchy-Schwarz ratio undefined");
    if (!(all.sa > 0.0 && all.sb > 0.0)) throw std::domain_error("csi needs photons on both channels");
    if (!(all.sab > 0.0)) throw std::domain_error("no A/B photon coincidences on the csi grid; g2(0) undefined");
    const auto full = derive(all);
    CsiResult r;
    r.g_e = full.g_e;
    r.g2_zero = full.g2;
    r.gamma_limit = 1.0 / (full.g_e * full.g2);  // g_{E,ph} = 1 in either form
    r.g_e_ph = full.g_en;
    r.gamma = full.gamma;
    // Delete-one-block jackknife.
    std::vector<std::vector<double>> jk;
    for (int k = 0; k < K; ++k) {
        if (block_bins(k) <= 0) continue;
        const auto t = total_without(k);
        if (!usable(t)) continue;
        jk.push_back(derive(t).gamma);
    }
    const double m = static_cast<double>(jk.size());
    for (std::size_t l = 0; l < nl; ++l) {
        r.tau_ps.push_back(static_cast<double>((static_cast<std::int64_t>(l) - o_.max_lag_bins) * o_.bin_ps));
        if (jk.size() < 2) {
            r.error.push_back(kInf);
            continue;
        }
        double mean = 0.0;
        for (const auto& g : jk) mean += g[l];
        mean /= m;
        double ss = 0.0;
        for (const auto& g : jk) ss += (g[l] - mean) * (g[l] - mean);
        r.error.push_back(std::sqrt((m - 1.0) / m * ss));
    }
    return r;
}

CsiResult csi_gamma(const SplitStream& s, const CsiOptions& o) {
    std::int64_t end = o.run_end_ps;
    if (end < 0) {
        end = 0;
        if (!s.electron_t.empty()) end = std::max(end, s.electron_t.back());
        if (!s.photon_a.empty()) end = std::max(end, s.photon_a.back());
        if (!s.photon_b.empty()) end = std::max(end, s.photon_b.back());
    }
    CsiAccumulator acc(o, end);
    acc.push(s, std::numeric_limits<std::int64_t>::max() / 4);
    acc.finish();
    return acc.result();
}

CouplingEstimate coupling_from_coincidences(const CoincidenceAreas& a, double eta_a, double eta_b) {
    if (eta_a < 0 || eta_b < 0 || eta_a > 1 || eta_b > 1) throw std::invalid_argument("efficiencies must lie in [0, 1]");
    CouplingEstimate out;
    const double n = a.electrons;
    const double k1 = n * (eta_a + eta_b);
    const double k2 = n * 2.0 * eta_a * eta_b;
    if (!(k1 > 0.0)) {
        out.uninformative = true;
        out.error = kInf;
        return out;
    }
    const double v1 = std::max(a.single_var, 1.0);
    const double v2 = std::max(a.pair_var, 1.0);
    auto chi2 = [&](double G) {
        const double e = std::exp(-G);
        const double r1 = a.single - k1 * G * e;
        const double r2 = k2 > 0.0 ? a.pair - k2 * 0.5 * G * G * e : 0.0;
        return r1 * r1 / v1 + r2 * r2 / v2;
    };
    // Coarse log-spaced scan, then Brent refinement around the best point.
    double best = 1e-8, best_c = chi2(best);
    for (int i = 0; i <= 2000; ++i) {
        const double G = 1e-8 * std::pow(1e9, i / 2000.0);
        const double c = chi2(G);
        if (c < best_c) {
            best_c = c;
            best = G;
        }
    }
    const double step = std::pow(1e9, 1.0 / 2000.0);
    const auto [G, c] = boost::math::tools::brent_find_minima(chi2, best / step, std::min(best * step, 10.0), 52);
    out.g0 = std::sqrt(G);
    out.chi2 = c;
    const double h = std::max(1e-6, 1e-4 * G);
    const double curv = (chi2(G + h) - 2.0 * chi2(G) + chi2(std::max(G - h, 0.0))) / (h * h);
    if (!(curv > 0.0) || !std::isfinite(curv)) {
        out.uninformative = true;
        out.error = kInf;
        return out;
    }
    const double var_g = 2.0 / curv;
    out.error = std::sqrt(var_g) / (2.0 * std::max(out.g0, 1e-12));
    if (!std::isfinite(out.error) || out.error > 10.0 * std::max(out.g0, 1e-3)) out.uninformative = true;
    return out;
}

PeakWidth peak_width(const correlate::Histogram& h, double half_window_ps,
                     const std::vector<std::pair<double, double>>& background) {
    if (h.edges.size() != 1) throw std::invalid_argument("peak width needs a one-dimensional histogram");
    const auto c = centers(h.edges[0]);
    double bsum = 0.0;
    int nb = 0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        for (const auto& w : background) {
            if (inside(c[i], w)) {
                bsum += h.values[i];
                ++nb;
                break;
            }
        }
    }
    const double level = nb > 0 ? bsum / nb : 0.0;
    std::size_t peak = 0;
    for (std::size_t i = 1; i < c.size(); ++i) {
        if (h.values[i] > h.values[peak]) peak = i;
    }
    double s0 = 0.0, s1 = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        if (std::abs(c[i] - c[peak]) > half_window_ps) continue;
        const double v = h.values[i] - level;
        s0 += v;
        s1 += v * c[i];
    }
    PeakWidth pw;
    if (!(s0 > 0.0)) return pw;
    const double mu = s1 / s0;
    double s2 = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        if (std::abs(c[i] - c[peak]) > half_window_ps) continue;
        s2 += (h.values[i] - level) * (c[i] - mu) * (c[i] - mu);
    }
    const double sigma = std::sqrt(std::max(s2 / s0, 0.0));
    pw.center_ps = mu;
    pw.net_counts = s0;
    pw.fwhm_ps = kFwhmPerSigma * sigma;
    pw.stderr_ps = pw.fwhm_ps / std::sqrt(2.0 * s0);
    return pw;
}

}  // namespace fockherald::stats
