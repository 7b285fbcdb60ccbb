// Pixel clustering, energy calibration and zero-loss drift correction.
#include "fockherald/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <stdexcept>

#include <Eigen/Dense>

namespace fockherald::ingest {

namespace {

struct DisjointSet {
    std::vector<std::size_t> parent;
    explicit DisjointSet(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    std::size_t find(std::size_t i) {
        while (parent[i] != i) {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        return i;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return;
        if (a < b) parent[b] = a;
        else parent[a] = b;
    }
};

struct Hit {
    int x, y;
    std::int64_t t;
};

bool connected(const Hit& a, const Hit& b, std::int64_t window) {
    return std::abs(a.x - b.x) <= 1 && std::abs(a.y - b.y) <= 1 && std::abs(a.t - b.t) <= window;
}

PixelCluster summarize(const std::vector<Hit>& hits, const std::vector<std::size_t>& members) {
    PixelCluster c;
    double sx = 0.0, sy = 0.0;
    std::int64_t tmin = std::numeric_limits<std::int64_t>::max();
    for (auto i : members) {
        sx += hits[i].x;
        sy += hits[i].y;
        tmin = std::min(tmin, hits[i].t);
    }
    c.x = sx / static_cast<double>(members.size());
    c.y = sy / static_cast<double>(members.size());
    c.time_ps = tmin;
    c.size = static_cast<std::uint16_t>(members.size());
    return c;
}

// Splits an oversize component: repeatedly grow a cluster from the earliest
// unassigned hit, absorbing connected hits in time order up to the size cap.
void split_component(const std::vector<Hit>& hits, const std::vector<std::size_t>& comp, std::int64_t window,
                     int max_cluster, std::vector<std::vector<std::size_t>>& out) {
    std::vector<bool> taken(comp.size(), false);
    std::size_t done = 0;
    while (done < comp.size()) {
        std::size_t seed = 0;
        while (taken[seed]) ++seed;  // comp is in time order: first untaken is earliest
        std::vector<std::size_t> cluster;
        using Item = std::pair<std::int64_t, std::size_t>;  // (time, position in comp)
        std::priority_queue<Item, std::vector<Item>, std::greater<>> frontier;
        std::vector<bool> queued(comp.size(), false);
        frontier.push({hits[comp[seed]].t, seed});
        queued[seed] = true;
        while (!frontier.empty() && static_cast<int>(cluster.size()) < max_cluster) {
            const auto [t, pos] = frontier.top();
            frontier.pop();
            taken[pos] = true;
            ++done;
            cluster.push_back(comp[pos]);
            for (std::size_t j = 0; j < comp.size(); ++j) {
                if (taken[j] || queued[j]) continue;
                if (connected(hits[comp[pos]], hits[comp[j]], window)) {
                    frontier.push({hits[comp[j]].t, j});
                    queued[j] = true;
                }
            }
        }
        std::sort(cluster.begin(), cluster.end());
        out.push_back(std::move(cluster));
    }
}

}  // namespace

std::vector<PixelCluster> cluster_pixel_hits(const PixelHitStream& stream, const ClusterOptions& options) {
    if (options.window_ps < 0) throw std::invalid_argument("cluster window must be >= 0");
    if (options.max_cluster < 1) throw std::invalid_argument("max cluster size must be >= 1");
    const bool offsets = !options.pixel_offsets_ps.empty();
    if (offsets && options.pixel_offsets_ps.size() != static_cast<std::size_t>(kDetectorPixels) * kDetectorPixels) {
        throw std::invalid_argument("pixel offset table must have 514 x 514 entries");
    }
    std::vector<Hit> hits;
    hits.reserve(stream.hits.size());
    for (const auto& h : stream.hits) {
        std::int64_t t = h.time_ps;
        if (offsets) t -= options.pixel_offsets_ps[static_cast<std::size_t>(h.y) * kDetectorPixels + h.x];
        hits.push_back({h.x, h.y, t});
    }
    std::vector<std::size_t> order(hits.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return hits[a].t < hits[b].t; });
    std::vector<Hit> sorted(hits.size());
    for (std::size_t i = 0; i < order.size(); ++i) sorted[i] = hits[order[i]];
    hits.swap(sorted);

    DisjointSet ds(hits.size());
    std::size_t first = 0;
    for (std::size_t i = 0; i < hits.size(); ++i) {
        while (hits[i].t - hits[first].t > options.window_ps) ++first;
        for (std::size_t j = first; j < i; ++j) {
            if (connected(hits[i], hits[j], options.window_ps)) ds.unite(i, j);
        }
    }
    // Components keyed by their earliest hit (the root is the smallest index).
    std::vector<std::vector<std::size_t>> comps;
    std::vector<std::size_t> slot(hits.size(), std::numeric_limits<std::size_t>::max());
    for (std::size_t i = 0; i < hits.size(); ++i) {
        const std::size_t r = ds.find(i);
        if (slot[r] == std::numeric_limits<std::size_t>::max()) {
            slot[r] = comps.size();
            comps.emplace_back();
        }
        comps[slot[r]].push_back(i);
    }
    std::vector<std::vector<std::size_t>> clusters;
    clusters.reserve(comps.size());
    for (auto& c : comps) {
        if (static_cast<int>(c.size()) <= options.max_cluster) clusters.push_back(std::move(c));
        else split_component(hits, c, options.window_ps, options.max_cluster, clusters);
    }
    std::vector<PixelCluster> out;
    out.reserve(clusters.size());
    for (const auto& c : clusters) out.push_back(summarize(hits, c));
    std::stable_sort(out.begin(), out.end(), [](const PixelCluster& a, const PixelCluster& b) { return a.time_ps < b.time_ps; });
    return out;
}

EventStream calibrate_energy(const std::vector<PixelCluster>& clusters, const CalibrationMap& cal) {
    if (!(cal.dispersion_ev > 0.0)) throw std::invalid_argument("calibration dispersion must be > 0");
    EventStream s;
    s.records.reserve(clusters.size());
    for (const auto& c : clusters) {
        const double e = (cal.zlp_reference_px - c.x) * cal.dispersion_ev;
        s.records.push_back({c.time_ps, static_cast<float>(e), EventKind::Electron, 0});
    }
    std::stable_sort(s.records.begin(), s.records.end(), event_order);
    return s;
}

double locate_zlp(const std::vector<double>& energies, const DriftOptions& o) {
    const double half = 0.5 * o.photon_energy_ev;
    const int nbins = static_cast<int>(std::floor(2.0 * half / o.bin_ev));
    if (nbins < 3) return std::numeric_limits<double>::quiet_NaN();
    const double lo = -0.5 * nbins * o.bin_ev;
    std::vector<double> counts(static_cast<std::size_t>(nbins), 0.0);
    for (double e : energies) {
        const double f = (e - lo) / o.bin_ev;
        if (f < 0.0 || f >= nbins) continue;
        counts[static_cast<std::size_t>(f)] += 1.0;
    }
    const auto it = std::max_element(counts.begin(), counts.end());
    if (*it <= 0.0) return std::numeric_limits<double>::quiet_NaN();
    const int mode = static_cast<int>(it - counts.begin());
    auto center = [&](int i) { return lo + (i + 0.5) * o.bin_ev; };
    const int hw = std::max(1, static_cast<int>(std::lround(o.fit_half_width_ev / o.bin_ev)));
    // Weighted least squares of log(counts) = a + b (E - E_mode) + c (E - E_mode)^2.
    Eigen::Matrix3d A = Eigen::Matrix3d::Zero();
    Eigen::Vector3d rhs = Eigen::Vector3d::Zero();
    int used = 0;
    for (int i = std::max(0, mode - hw); i <= std::min(nbins - 1, mode + hw); ++i) {
        if (counts[i] <= 0.0) continue;
        const double d = center(i) - center(mode);
        const Eigen::Vector3d row(1.0, d, d * d);
        A += counts[i] * row * row.transpose();
        rhs += counts[i] * std::log(counts[i]) * row;
        ++used;
    }
    double vertex = std::numeric_limits<double>::quiet_NaN();
    if (used >= 3) {
        const Eigen::Vector3d coef = A.ldlt().solve(rhs);
        if (coef[2] < 0.0) vertex = center(mode) - coef[1] / (2.0 * coef[2]);
    }
    if (!std::isfinite(vertex) && mode > 0 && mode + 1 < nbins) {
        // Three-point parabolic interpolation on the raw counts.
        const double ym = counts[mode - 1], y0 = counts[mode], yp = counts[mode + 1];
        const double den = ym - 2.0 * y0 + yp;
        vertex = center(mode) + (den != 0.0 ? 0.5 * o.bin_ev * (ym - yp) / den : 0.0);
    }
    if (!std::isfinite(vertex)) vertex = center(mode);
    return std::clamp(vertex, center(mode) - hw * o.bin_ev, center(mode) + hw * o.bin_ev);
}

DriftCorrection correct_zlp_drift(const EventStream& stream, const DriftOptions& o) {
    if (!(o.window_s > 0.0)) throw std::invalid_argument("drift window must be > 0");
    if (!is_sorted(stream)) throw std::invalid_argument("drift correction needs a time-sorted stream");
    DriftCorrection out;
    out.stream = stream;
    if (stream.records.empty()) return out;
    const auto window_ps = static_cast<std::int64_t>(std::llround(o.window_s * 1e12));
    const std::int64_t t_end = stream.records.back().time_ps;
    const std::size_t n_windows = static_cast<std::size_t>(t_end / window_ps) + 1;
    double previous = 0.0;
    std::size_t begin = 0;
    for (std::size_t w = 0; w < n_windows; ++w) {
        const std::int64_t hi = static_cast<std::int64_t>(w + 1) * window_ps;
        std::size_t end = begin;
        std::vector<double> energies;
        while (end < stream.records.size() && stream.records[end].time_ps < hi) {
            if (stream.records[end].kind == EventKind::Electron) energies.push_back(stream.records[end].energy_ev);
            ++end;
        }
        double offset = previous;
        bool reused = true;
        if (energies.size() >= o.min_electrons) {
            const double z = locate_zlp(energies, o);
            if (std::isfinite(z)) {
                offset = z;
                reused = false;
            }
        }
        for (std::size_t i = begin; i < end; ++i) {
            auto& r = out.stream.records[i];
            if (r.kind != EventKind::Electron) continue;
            r.energy_ev = static_cast<float>(r.energy_ev - offset);
            if (reused) r.flags |= event_flags::kDriftReused;
        }
        out.offsets_ev.push_back(offset);
        out.reused.push_back(reused);
        previous = offset;
        begin = end;
    }
    return out;
}

}  // namespace fockherald::ingest
