// Coincidence engine: matching, dedup, cube accumulation, projections,
// serialization and time-sharded execution.
#include "fockherald/correlate.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <memory>
#include <mutex>
#include <ostream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace fockherald::correlate {

namespace {

void require_sorted(std::span<const std::int64_t> t, const char* what) {
    if (!std::is_sorted(t.begin(), t.end())) {
        throw std::invalid_argument(std::string(what) + " timestamps are not sorted");
    }
}

// Incremental nearest-photon search over one channel. Electrons must be
// presented in non-decreasing time order.
class NearestCursor {
public:
    explicit NearestCursor(std::span<const std::int64_t> photons) : p_(photons) {}

    // Returns the index of the nearest photon within max_delay, or -1.
    std::int64_t next(std::int64_t t, std::int64_t max_delay) {
        const std::size_t n = p_.size();
        while (later_ < n && p_[later_] < t) ++later_;
        // First index carrying the timestamp of the last photon before t.
        if (later_ > 0) {
            const std::int64_t te = p_[later_ - 1];
            while (p_[run_] < te) ++run_;
        }
        std::int64_t best = -1;
        std::int64_t best_d = 0;
        if (later_ > 0) {
            best = static_cast<std::int64_t>(run_);
            best_d = t - p_[run_];
        }
        if (later_ < n) {
            const std::int64_t d = p_[later_] - t;
            if (best < 0 || d < best_d) {
                best = static_cast<std::int64_t>(later_);
                best_d = d;
            }
        }
        if (best < 0 || best_d > max_delay) return -1;
        return best;
    }

private:
    std::span<const std::int64_t> p_;
    std::size_t later_ = 0;  // first photon with time >= current electron
    std::size_t run_ = 0;
};

void dedupe_channel(std::vector<TripleRecord>& records, bool channel_a) {
    auto idx = [&](const TripleRecord& r) { return channel_a ? r.idx_a : r.idx_b; };
    auto tau = [&](const TripleRecord& r) { return channel_a ? r.tau_a : r.tau_b; };
    auto flag = [&](TripleRecord& r) -> bool& { return channel_a ? r.true_a : r.true_b; };
    // Claims on one photon are contiguous: nearest-photon assignment is
    // monotone in electron time.
    std::size_t best = records.size();
    std::int64_t current = -1;
    std::uint64_t best_abs = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        auto& r = records[i];
        flag(r) = false;
        const std::int64_t k = idx(r);
        if (k < 0) continue;
        const auto a = static_cast<std::uint64_t>(std::abs(tau(r)));
        if (k != current) {
            if (best < records.size()) flag(records[best]) = true;
            current = k;
            best = i;
            best_abs = a;
        } else if (a < best_abs) {
            best = i;
            best_abs = a;
        }
    }
    if (best < records.size()) flag(records[best]) = true;
}

}  // namespace

std::vector<TripleRecord> match_coincidences(std::span<const std::int64_t> electron_t,
                                             std::span<const float> electron_e,
                                             std::span<const std::int64_t> photon_a,
                                             std::span<const std::int64_t> photon_b, std::int64_t max_delay_ps) {
    if (electron_t.size() != electron_e.size()) throw std::invalid_argument("electron time/energy size mismatch");
    if (max_delay_ps < 0) throw std::invalid_argument("max delay must be >= 0");
    require_sorted(electron_t, "electron");
    require_sorted(photon_a, "photon A");
    require_sorted(photon_b, "photon B");
    std::vector<TripleRecord> out(electron_t.size());
    NearestCursor ca(photon_a), cb(photon_b);
    for (std::size_t i = 0; i < electron_t.size(); ++i) {
        auto& r = out[i];
        const std::int64_t t = electron_t[i];
        r.t_el = t;
        r.e_el = electron_e[i];
        r.idx_a = ca.next(t, max_delay_ps);
        r.idx_b = cb.next(t, max_delay_ps);
        if (r.idx_a >= 0) r.tau_a = photon_a[static_cast<std::size_t>(r.idx_a)] - t;
        if (r.idx_b >= 0) r.tau_b = photon_b[static_cast<std::size_t>(r.idx_b)] - t;
    }
    return out;
}

std::vector<TripleRecord> match_coincidences(const SplitStream& s, std::int64_t max_delay_ps) {
    return match_coincidences(s.electron_t, s.electron_e, s.photon_a, s.photon_b, max_delay_ps);
}

void dedupe_true_coincidences(std::vector<TripleRecord>& records) {
    dedupe_channel(records, true);
    dedupe_channel(records, false);
}

int CubeAxes::tau_index(std::int64_t tau) const {
    if (tau < tau_lo_ps) return -1;
    const std::int64_t i = (tau - tau_lo_ps) / tau_bin_ps;
    return i < tau_bins ? static_cast<int>(i) : -1;
}

int CubeAxes::e_index(double e) const {
    const double f = std::floor((e - e_lo) / e_bin);
    if (!(f >= 0.0) || f >= e_bins) return -1;
    return static_cast<int>(f);
}

void validate(const CubeAxes& a) {
    if (a.tau_bin_ps <= 0 || a.tau_bins <= 0) throw std::invalid_argument("delay axis needs positive bin width and count");
    if (!(a.e_bin > 0.0) || a.e_bins <= 0 || !std::isfinite(a.e_lo)) {
        throw std::invalid_argument("energy axis needs positive bin width and count");
    }
    const double cells = static_cast<double>(a.tau_bins) * a.tau_bins * a.e_bins;
    if (cells > 4e8) throw std::invalid_argument("cube too large");
}

CubeBuilder::CubeBuilder(const CubeAxes& axes, CubeOptions options) : options_(options) {
    validate(axes);
    cube_.axes = axes;
    const auto nt = static_cast<std::size_t>(axes.tau_bins);
    const auto ne = static_cast<std::size_t>(axes.e_bins);
    cube_.counts.assign(nt * nt * ne, 0);
    cube_.marginal_a.assign(nt * ne, 0);
    cube_.marginal_b.assign(nt * ne, 0);
    cube_.electrons.assign(ne, 0);
}

void CubeBuilder::add(const TripleRecord& r) {
    auto& c = cube_;
    ++c.total_electrons;
    const int ie = c.axes.e_index(r.e_el);
    if (ie < 0) ++c.overflow_electrons;
    else ++c.electrons[static_cast<std::size_t>(ie)];
    const bool a = r.has_a() && (!options_.true_only || r.true_a);
    const bool b = r.has_b() && (!options_.true_only || r.true_b);
    const int ia = a ? c.axes.tau_index(r.tau_a) : -1;
    const int ib = b ? c.axes.tau_index(r.tau_b) : -1;
    if (a) {
        if (ia < 0 || ie < 0) ++c.overflow_a;
        else ++c.marginal_a[c.at2(ia, ie)];
    }
    if (b) {
        if (ib < 0 || ie < 0) ++c.overflow_b;
        else ++c.marginal_b[c.at2(ib, ie)];
    }
    if (a && b) {
        ++c.complete_triples;
        if (ia < 0 || ib < 0 || ie < 0) ++c.overflow_triples;
        else ++c.counts[c.at(ia, ib, ie)];
    }
}

void CubeBuilder::add(std::span<const TripleRecord> records) {
    for (const auto& r : records) add(r);
}

void CubeBuilder::merge(const CubeBuilder& other) {
    if (!(other.cube_.axes == cube_.axes)) throw std::invalid_argument("cannot merge cubes with different axes");
    auto add_vec = [](std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b) {
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    };
    add_vec(cube_.counts, other.cube_.counts);
    add_vec(cube_.marginal_a, other.cube_.marginal_a);
    add_vec(cube_.marginal_b, other.cube_.marginal_b);
    add_vec(cube_.electrons, other.cube_.electrons);
    cube_.overflow_triples += other.cube_.overflow_triples;
    cube_.overflow_a += other.cube_.overflow_a;
    cube_.overflow_b += other.cube_.overflow_b;
    cube_.overflow_electrons += other.cube_.overflow_electrons;
    cube_.complete_triples += other.cube_.complete_triples;
    cube_.total_electrons += other.cube_.total_electrons;
}

CoincidenceCube build_cube(std::span<const TripleRecord> records, const CubeAxes& axes, CubeOptions options) {
    CubeBuilder b(axes, options);
    b.add(records);
    return b.take();
}

double Histogram::total() const {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
}

namespace {

std::vector<double> uniform_edges(double lo, double step, int n) {
    std::vector<double> e(static_cast<std::size_t>(n) + 1);
    for (int i = 0; i <= n; ++i) e[static_cast<std::size_t>(i)] = lo + i * step;
    return e;
}

const char* axis_name(Axis a) {
    switch (a) {
        case Axis::TauA: return "tau_a_ps";
        case Axis::TauB: return "tau_b_ps";
        case Axis::Energy: return "energy_ev";
        case Axis::TauDiff: return "tau_a_minus_tau_b_ps";
    }
    return "?";
}

}  // namespace

Histogram project(const CoincidenceCube& cube, const ProjectionSpec& spec) {
    const auto& ax = cube.axes;
    const int nt = ax.tau_bins, ne = ax.e_bins;
    if (spec.keep.size() > 2) throw std::invalid_argument("projection keeps at most two axes");
    bool has_diff = false, has_ab = false;
    for (std::size_t i = 0; i < spec.keep.size(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            if (spec.keep[i] == spec.keep[j]) throw std::invalid_argument("projection axis repeated");
        }
        has_diff |= spec.keep[i] == Axis::TauDiff;
        has_ab |= spec.keep[i] == Axis::TauA || spec.keep[i] == Axis::TauB;
    }
    if (has_diff && has_ab) throw std::invalid_argument("difference axis cannot be combined with tau_a/tau_b");

    // Per-axis masks on bin centers.
    std::vector<char> ma(static_cast<std::size_t>(nt), 1), mb(static_cast<std::size_t>(nt), 1),
        me(static_cast<std::size_t>(ne), 1), md(static_cast<std::size_t>(2 * nt - 1), 1);
    const double bin = static_cast<double>(ax.tau_bin_ps);
    for (const auto& r : spec.ranges) {
        if (!(r.hi >= r.lo)) throw std::invalid_argument("projection range is empty");
        std::size_t kept = 0;
        auto apply = [&](std::vector<char>& m, auto center) {
            for (std::size_t i = 0; i < m.size(); ++i) {
                const double c = center(static_cast<int>(i));
                if (c < r.lo || c > r.hi) m[i] = 0;
                kept += m[i] ? 1 : 0;
            }
        };
        switch (r.axis) {
            case Axis::TauA: apply(ma, [&](int i) { return ax.tau_center(i); }); break;
            case Axis::TauB: apply(mb, [&](int i) { return ax.tau_center(i); }); break;
            case Axis::Energy: apply(me, [&](int i) { return ax.e_center(i); }); break;
            case Axis::TauDiff: apply(md, [&](int i) { return (i - (nt - 1)) * bin; }); break;
        }
        if (kept == 0) throw std::invalid_argument(std::string("projection range selects no bins on ") + axis_name(r.axis));
    }

    Histogram h;
    std::vector<int> sizes;
    for (Axis a : spec.keep) {
        h.axis_names.emplace_back(axis_name(a));
        switch (a) {
            case Axis::TauA:
            case Axis::TauB:
                h.edges.push_back(uniform_edges(static_cast<double>(ax.tau_lo_ps), bin, nt));
                sizes.push_back(nt);
                break;
            case Axis::Energy:
                h.edges.push_back(uniform_edges(ax.e_lo, ax.e_bin, ne));
                sizes.push_back(ne);
                break;
            case Axis::TauDiff:
                h.edges.push_back(uniform_edges(-(nt - 0.5) * bin, bin, 2 * nt - 1));
                sizes.push_back(2 * nt - 1);
                break;
        }
    }
    std::size_t total = 1;
    for (int s : sizes) total *= static_cast<std::size_t>(s);
    h.values.assign(total, 0.0);

    auto coord = [&](Axis a, int ia, int ib, int ie) {
        switch (a) {
            case Axis::TauA: return ia;
            case Axis::TauB: return ib;
            case Axis::Energy: return ie;
            case Axis::TauDiff: return ia - ib + nt - 1;
        }
        return 0;
    };
    for (int ia = 0; ia < nt; ++ia) {
        if (!ma[static_cast<std::size_t>(ia)]) continue;
        for (int ib = 0; ib < nt; ++ib) {
            if (!mb[static_cast<std::size_t>(ib)] || !md[static_cast<std::size_t>(ia - ib + nt - 1)]) continue;
            const std::int64_t* row = &cube.counts[cube.at(ia, ib, 0)];
            for (int ie = 0; ie < ne; ++ie) {
                if (row[ie] == 0 || !me[static_cast<std::size_t>(ie)]) continue;
                std::size_t flat = 0;
                for (std::size_t k = 0; k < spec.keep.size(); ++k) {
                    flat = flat * static_cast<std::size_t>(sizes[k]) +
                           static_cast<std::size_t>(coord(spec.keep[k], ia, ib, ie));
                }
                h.values[flat] += static_cast<double>(row[ie]);
            }
        }
    }
    return h;
}

Histogram delay_histogram(std::span<const TripleRecord> records, const DelayHistogramSpec& spec) {
    if (spec.bin_ps <= 0 || spec.bins <= 0) throw std::invalid_argument("delay histogram needs positive bins");
    Histogram h;
    const char* name = spec.kind == DelayKind::TauA   ? "tau_a_ps"
                       : spec.kind == DelayKind::TauB ? "tau_b_ps"
                       : spec.kind == DelayKind::TauAorB ? "tau_ps"
                                                         : "tau_a_minus_tau_b_ps";
    h.axis_names.emplace_back(name);
    h.edges.push_back(uniform_edges(static_cast<double>(spec.lo_ps), static_cast<double>(spec.bin_ps), spec.bins));
    h.values.assign(static_cast<std::size_t>(spec.bins), 0.0);
    auto fill = [&](std::int64_t x) {
        if (x < spec.lo_ps) return;
        const std::int64_t i = (x - spec.lo_ps) / spec.bin_ps;
        if (i < spec.bins) h.values[static_cast<std::size_t>(i)] += 1.0;
    };
    for (const auto& r : records) {
        if (spec.energy_window && (r.e_el < spec.energy_window->first || r.e_el > spec.energy_window->second)) continue;
        const bool a = r.has_a() && (!spec.true_only || r.true_a);
        const bool b = r.has_b() && (!spec.true_only || r.true_b);
        switch (spec.kind) {
            case DelayKind::TauA:
                if (a) fill(r.tau_a);
                break;
            case DelayKind::TauB:
                if (b) fill(r.tau_b);
                break;
            case DelayKind::TauAorB:
                if (a) fill(r.tau_a);
                if (b) fill(r.tau_b);
                break;
            case DelayKind::TauDiff:
                if (a && b && std::abs(r.tau_a) <= spec.herald_window_ps) fill(r.tau_a - r.tau_b);
                break;
        }
    }
    return h;
}

namespace {

constexpr char kCubeMagic[8] = {'E', 'H', 'P', 'C', 'U', 'B', '0', '1'};

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

}  // namespace

std::vector<std::uint8_t> serialize_cube(const CoincidenceCube& c) {
    nlohmann::json h;
    h["axes"] = {{"tau_lo_ps", c.axes.tau_lo_ps}, {"tau_bin_ps", c.axes.tau_bin_ps}, {"tau_bins", c.axes.tau_bins},
                 {"e_lo_ev", c.axes.e_lo},        {"e_bin_ev", c.axes.e_bin},       {"e_bins", c.axes.e_bins}};
    h["totals"] = {{"complete_triples", c.complete_triples},     {"total_electrons", c.total_electrons},
                   {"overflow_triples", c.overflow_triples},     {"overflow_a", c.overflow_a},
                   {"overflow_b", c.overflow_b},                 {"overflow_electrons", c.overflow_electrons}};
    h["blocks"] = {"counts", "marginal_a", "marginal_b", "electrons"};
    h["layout"] = "row-major int64 little-endian; counts[tau_a][tau_b][e], marginal_x[tau_x][e], electrons[e]";
    const std::string header = h.dump();
    std::vector<std::uint8_t> out(kCubeMagic, kCubeMagic + 8);
    put_u64(out, header.size());
    out.insert(out.end(), header.begin(), header.end());
    for (const auto* block : {&c.counts, &c.marginal_a, &c.marginal_b, &c.electrons}) {
        out.reserve(out.size() + block->size() * 8);
        for (std::int64_t v : *block) put_u64(out, static_cast<std::uint64_t>(v));
    }
    return out;
}

CoincidenceCube parse_cube(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 16) throw ParseError("truncated cube header", bytes.size());
    for (std::size_t i = 0; i < 8; ++i) {
        if (bytes[i] != static_cast<std::uint8_t>(kCubeMagic[i])) throw ParseError("bad cube magic", i);
    }
    const std::uint64_t hlen = get_u64(bytes.data() + 8);
    if (hlen > bytes.size() - 16) throw ParseError("truncated cube header", bytes.size());
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("invalid cube header: ") + e.what(), 16);
    }
    CoincidenceCube c;
    try {
        const auto& a = h.at("axes");
        c.axes.tau_lo_ps = a.at("tau_lo_ps").get<std::int64_t>();
        c.axes.tau_bin_ps = a.at("tau_bin_ps").get<std::int64_t>();
        c.axes.tau_bins = a.at("tau_bins").get<int>();
        c.axes.e_lo = a.at("e_lo_ev").get<double>();
        c.axes.e_bin = a.at("e_bin_ev").get<double>();
        c.axes.e_bins = a.at("e_bins").get<int>();
        const auto& t = h.at("totals");
        c.complete_triples = t.at("complete_triples").get<std::int64_t>();
        c.total_electrons = t.at("total_electrons").get<std::int64_t>();
        c.overflow_triples = t.at("overflow_triples").get<std::int64_t>();
        c.overflow_a = t.at("overflow_a").get<std::int64_t>();
        c.overflow_b = t.at("overflow_b").get<std::int64_t>();
        c.overflow_electrons = t.at("overflow_electrons").get<std::int64_t>();
        validate(c.axes);
    } catch (const std::exception& e) {
        throw ParseError(std::string("invalid cube header: ") + e.what(), 16);
    }
    const auto nt = static_cast<std::size_t>(c.axes.tau_bins);
    const auto ne = static_cast<std::size_t>(c.axes.e_bins);
    std::size_t pos = 16 + hlen;
    const std::size_t needed = (nt * nt * ne + 2 * nt * ne + ne) * 8;
    if (bytes.size() - pos != needed) {
        throw ParseError("cube payload size mismatch (expected " + std::to_string(needed) + " bytes)", pos);
    }
    for (auto* block : {&c.counts, &c.marginal_a, &c.marginal_b, &c.electrons}) {
        const std::size_t n = block == &c.counts ? nt * nt * ne : block == &c.electrons ? ne : nt * ne;
        block->resize(n);
        for (std::size_t i = 0; i < n; ++i, pos += 8) (*block)[i] = static_cast<std::int64_t>(get_u64(bytes.data() + pos));
    }
    return c;
}

void write_histogram_csv(std::ostream& os, const Histogram& h) {
    os.precision(17);
    if (h.edges.empty()) {
        os << "value\n" << (h.values.empty() ? 0.0 : h.values[0]) << '\n';
        return;
    }
    for (const auto& n : h.axis_names) os << n << "_lo," << n << "_hi,";
    os << "value\n";
    if (h.edges.size() == 1) {
        for (std::size_t i = 0; i < h.values.size(); ++i) {
            os << h.edges[0][i] << ',' << h.edges[0][i + 1] << ',' << h.values[i] << '\n';
        }
        return;
    }
    const std::size_t n1 = h.edges[1].size() - 1;
    for (std::size_t i = 0; i < h.values.size(); ++i) {
        const std::size_t a = i / n1, b = i % n1;
        os << h.edges[0][a] << ',' << h.edges[0][a + 1] << ',' << h.edges[1][b] << ',' << h.edges[1][b + 1] << ','
           << h.values[i] << '\n';
    }
}

namespace {

std::int64_t sat_add(std::int64_t a, std::int64_t b) {
    if (b > 0 && a > std::numeric_limits<std::int64_t>::max() - b) return std::numeric_limits<std::int64_t>::max();
    if (b < 0 && a < std::numeric_limits<std::int64_t>::min() - b) return std::numeric_limits<std::int64_t>::min();
    return a + b;
}

template <class T>
void drop_front(std::vector<T>& v, std::size_t n) {
    v.erase(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n));
}

}  // namespace

StreamingCorrelator::StreamingCorrelator(std::int64_t max_delay_ps) : max_delay_(max_delay_ps) {
    if (max_delay_ps < 0) throw std::invalid_argument("max delay must be >= 0");
}

void StreamingCorrelator::push(const SplitStream& chunk, std::int64_t complete_until_ps, const Sink& sink) {
    if (chunk.electron_t.size() != chunk.electron_e.size()) throw std::invalid_argument("electron time/energy size mismatch");
    require_sorted(chunk.electron_t, "electron");
    require_sorted(chunk.photon_a, "photon A");
    require_sorted(chunk.photon_b, "photon B");
    auto check_order = [&](const std::vector<std::int64_t>& t, const std::vector<std::int64_t>& prev) {
        if (!t.empty() && !prev.empty() && t.front() < prev.back()) {
            throw std::invalid_argument("chunk overlaps previously pushed events");
        }
        if (!t.empty() && t.front() < last_time_) throw std::invalid_argument("chunk starts before the completion mark");
    };
    check_order(chunk.electron_t, buf_.electron_t);
    check_order(chunk.photon_a, buf_.photon_a);
    check_order(chunk.photon_b, buf_.photon_b);
    buf_.electron_t.insert(buf_.electron_t.end(), chunk.electron_t.begin(), chunk.electron_t.end());
    buf_.electron_e.insert(buf_.electron_e.end(), chunk.electron_e.begin(), chunk.electron_e.end());
    buf_.photon_a.insert(buf_.photon_a.end(), chunk.photon_a.begin(), chunk.photon_a.end());
    buf_.photon_b.insert(buf_.photon_b.end(), chunk.photon_b.begin(), chunk.photon_b.end());
    last_time_ = std::max(last_time_, complete_until_ps);
    const std::int64_t frontier = sat_add(complete_until_ps, -3 * max_delay_);
    if (frontier > done_until_) process(frontier, sink);
}

void StreamingCorrelator::finish(const Sink& sink) { process(std::numeric_limits<std::int64_t>::max(), sink); }

void StreamingCorrelator::process(std::int64_t frontier, const Sink& sink) {
    const std::int64_t d = max_delay_;
    auto lower = [](const std::vector<std::int64_t>& v, std::int64_t t) {
        return static_cast<std::size_t>(std::lower_bound(v.begin(), v.end(), t) - v.begin());
    };
    // Electrons [done_until - 2d, frontier + 2d) against every buffered photon.
    const std::size_t e_hi = lower(buf_.electron_t, sat_add(frontier, 2 * d));
    scratch_ = match_coincidences(std::span(buf_.electron_t).first(e_hi), std::span(buf_.electron_e).first(e_hi),
                                  buf_.photon_a, buf_.photon_b, d);
    dedupe_true_coincidences(scratch_);
    const std::size_t first = lower(buf_.electron_t, done_until_);
    const std::size_t last = lower(buf_.electron_t, frontier);
    for (std::size_t i = first; i < last; ++i) {
        auto& r = scratch_[i];
        if (r.idx_a >= 0) r.idx_a += a_base_;
        if (r.idx_b >= 0) r.idx_b += b_base_;
    }
    if (last > first) sink(std::span<const TripleRecord>(scratch_).subspan(first, last - first));
    done_until_ = frontier;
    // Keep the halo needed by later frontiers.
    const std::size_t e_drop = lower(buf_.electron_t, sat_add(frontier, -2 * d));
    drop_front(buf_.electron_t, e_drop);
    drop_front(buf_.electron_e, e_drop);
    const std::size_t a_drop = lower(buf_.photon_a, sat_add(frontier, -3 * d));
    const std::size_t b_drop = lower(buf_.photon_b, sat_add(frontier, -3 * d));
    drop_front(buf_.photon_a, a_drop);
    drop_front(buf_.photon_b, b_drop);
    a_base_ += static_cast<std::int64_t>(a_drop);
    b_base_ += static_cast<std::int64_t>(b_drop);
}

ShardResult sharded_analysis(const SplitStream& s, std::int64_t max_delay_ps, const CubeAxes& axes, int shards,
                             int threads, bool keep_records, CubeOptions options) {
    if (shards < 1) throw std::invalid_argument("shards must be >= 1");
    require_sorted(s.electron_t, "electron");
    require_sorted(s.photon_a, "photon A");
    require_sorted(s.photon_b, "photon B");
    if (threads <= 0) threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    const auto& et = s.electron_t;
    ShardResult result;
    if (et.empty()) {
        result.cube = build_cube({}, axes, options);
        return result;
    }
    // Shard boundaries split the electron time span evenly.
    const std::int64_t t0 = et.front(), t1 = et.back() + 1;
    std::vector<std::int64_t> bounds(static_cast<std::size_t>(shards) + 1);
    for (int i = 0; i <= shards; ++i) {
        bounds[static_cast<std::size_t>(i)] =
            t0 + static_cast<std::int64_t>(static_cast<long double>(t1 - t0) * i / shards);
    }
    const std::int64_t halo = 3 * max_delay_ps;
    const std::int64_t e_halo = 2 * max_delay_ps;
    struct Part {
        std::unique_ptr<CubeBuilder> builder;
        std::vector<TripleRecord> records;
    };
    std::vector<Part> parts(static_cast<std::size_t>(shards));

    auto lower = [](const std::vector<std::int64_t>& v, std::int64_t t) {
        return static_cast<std::size_t>(std::lower_bound(v.begin(), v.end(), t) - v.begin());
    };
    auto sat_sub = [](std::int64_t a, std::int64_t b) {
        return a < std::numeric_limits<std::int64_t>::min() + b ? std::numeric_limits<std::int64_t>::min() : a - b;
    };
    auto sat_add = [](std::int64_t a, std::int64_t b) {
        return a > std::numeric_limits<std::int64_t>::max() - b ? std::numeric_limits<std::int64_t>::max() : a + b;
    };
    auto run_shard = [&](std::size_t k) {
        const std::int64_t lo = bounds[k], hi = bounds[k + 1];
        const std::size_t core_lo = lower(et, lo), core_hi = lower(et, hi);
        const std::size_t ext_lo = lower(et, sat_sub(lo, e_halo)), ext_hi = lower(et, sat_add(hi, e_halo));
        const std::size_t a_lo = lower(s.photon_a, sat_sub(lo, halo)), a_hi = lower(s.photon_a, sat_add(hi, halo));
        const std::size_t b_lo = lower(s.photon_b, sat_sub(lo, halo)), b_hi = lower(s.photon_b, sat_add(hi, halo));
        auto recs = match_coincidences(std::span(et).subspan(ext_lo, ext_hi - ext_lo),
                                       std::span(s.electron_e).subspan(ext_lo, ext_hi - ext_lo),
                                       std::span(s.photon_a).subspan(a_lo, a_hi - a_lo),
                                       std::span(s.photon_b).subspan(b_lo, b_hi - b_lo), max_delay_ps);
        dedupe_true_coincidences(recs);
        auto& part = parts[k];
        part.builder = std::make_unique<CubeBuilder>(axes, options);
        const std::size_t first = core_lo - ext_lo, last = core_hi - ext_lo;
        for (std::size_t i = first; i < last; ++i) {
            auto& r = recs[i];
            if (r.idx_a >= 0) r.idx_a += static_cast<std::int64_t>(a_lo);
            if (r.idx_b >= 0) r.idx_b += static_cast<std::int64_t>(b_lo);
            part.builder->add(r);
        }
        if (keep_records) {
            part.records.assign(recs.begin() + static_cast<std::ptrdiff_t>(first),
                                recs.begin() + static_cast<std::ptrdiff_t>(last));
        }
    };

    const int workers = std::min(threads, shards);
    if (workers <= 1) {
        for (std::size_t k = 0; k < parts.size(); ++k) run_shard(k);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        std::exception_ptr error;
        std::mutex error_mutex;
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t k = next++; k < parts.size(); k = next++) {
                    try {
                        run_shard(k);
                    } catch (...) {
                        std::lock_guard lock(error_mutex);
                        if (!error) error = std::current_exception();
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
        if (error) std::rethrow_exception(error);
    }
    CubeBuilder total(axes, options);
    for (auto& p : parts) {
        total.merge(*p.builder);
        if (keep_records) result.records.insert(result.records.end(), p.records.begin(), p.records.end());
    }
    result.cube = total.take();
    return result;
}

}  // namespace fockherald::correlate
