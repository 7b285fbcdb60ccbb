// Coincidence engine: nearest-photon matching, true-coincidence
// deduplication, the (tau_A, tau_B, E) coincidence cube and its projections.
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fockherald/events.hpp"

namespace fockherald::correlate {

constexpr std::int64_t kAbsent = std::numeric_limits<std::int64_t>::min();

struct TripleRecord {
    std::int64_t t_el = 0;
    float e_el = 0.0f;
    bool true_a = false;
    bool true_b = false;
    std::int64_t tau_a = kAbsent;  // t_A - t_el
    std::int64_t tau_b = kAbsent;
    std::int64_t idx_a = -1;       // index of the matched photon on channel A
    std::int64_t idx_b = -1;

    bool has_a() const { return tau_a != kAbsent; }
    bool has_b() const { return tau_b != kAbsent; }
    bool operator==(const TripleRecord&) const = default;
};

// For each electron, the nearest photon on each channel within max_delay.
// Ties between an earlier and a later photon go to the earlier one; among
// identical timestamps the lowest index wins.
std::vector<TripleRecord> match_coincidences(std::span<const std::int64_t> electron_t,
                                             std::span<const float> electron_e,
                                             std::span<const std::int64_t> photon_a,
                                             std::span<const std::int64_t> photon_b, std::int64_t max_delay_ps);
std::vector<TripleRecord> match_coincidences(const SplitStream& s, std::int64_t max_delay_ps);

// Marks, for every photon, the single claiming electron with minimal |tau|
// (ties toward the earlier electron) as its true coincidence.
void dedupe_true_coincidences(std::vector<TripleRecord>& records);

struct CubeAxes {
    std::int64_t tau_lo_ps = -100490;  // edges offset from the 260 ps timing lattice
    std::int64_t tau_bin_ps = 1560;
    int tau_bins = 129;
    double e_lo = -1.5;
    double e_bin = 0.03;
    int e_bins = 200;

    std::int64_t tau_hi_ps() const { return tau_lo_ps + tau_bin_ps * tau_bins; }
    double e_hi() const { return e_lo + e_bin * e_bins; }
    int tau_index(std::int64_t tau) const;  // -1 when outside
    int e_index(double e) const;            // -1 when outside
    double tau_center(int i) const { return static_cast<double>(tau_lo_ps) + (i + 0.5) * static_cast<double>(tau_bin_ps); }
    double e_center(int i) const { return e_lo + (i + 0.5) * e_bin; }
    bool operator==(const CubeAxes&) const = default;
};

void validate(const CubeAxes& axes);

struct CubeOptions {
    bool true_only = false;  // count only true coincidences
};

struct CoincidenceCube {
    CubeAxes axes;
    std::vector<std::int64_t> counts;       // [tau_A][tau_B][E], both delays present
    std::vector<std::int64_t> marginal_a;   // [tau_A][E], delay A present
    std::vector<std::int64_t> marginal_b;   // [tau_B][E], delay B present
    std::vector<std::int64_t> electrons;    // N_e(E), every electron
    std::int64_t overflow_triples = 0;      // complete triples outside the axes
    std::int64_t overflow_a = 0;
    std::int64_t overflow_b = 0;
    std::int64_t overflow_electrons = 0;
    std::int64_t complete_triples = 0;
    std::int64_t total_electrons = 0;

    std::size_t at(int ia, int ib, int ie) const {
        return (static_cast<std::size_t>(ia) * axes.tau_bins + ib) * axes.e_bins + ie;
    }
    std::size_t at2(int it, int ie) const { return static_cast<std::size_t>(it) * axes.e_bins + ie; }
    bool operator==(const CoincidenceCube&) const = default;
};

class CubeBuilder {
public:
    explicit CubeBuilder(const CubeAxes& axes, CubeOptions options = {});
    void add(const TripleRecord& r);
    void add(std::span<const TripleRecord> records);
    void merge(const CubeBuilder& other);
    const CoincidenceCube& cube() const { return cube_; }
    CoincidenceCube take() { return std::move(cube_); }

private:
    CoincidenceCube cube_;
    CubeOptions options_;
};

CoincidenceCube build_cube(std::span<const TripleRecord> records, const CubeAxes& axes, CubeOptions options = {});

enum class Axis { TauA, TauB, Energy, TauDiff };

struct AxisRange {
    Axis axis;
    double lo;  // physical units: ps for delays, eV for energy
    double hi;
};

struct ProjectionSpec {
    std::vector<Axis> keep;          // 0, 1 or 2 axes; TauDiff replaces TauA/TauB
    std::vector<AxisRange> ranges;   // restrictions (bin centers inside [lo, hi])
};

struct Histogram {
    std::vector<std::string> axis_names;
    std::vector<std::vector<double>> edges;  // one edge vector per kept axis
    std::vector<double> values;              // row-major over kept axes
    double total() const;
};

Histogram project(const CoincidenceCube& cube, const ProjectionSpec& spec);

// Delay histogram built directly from records (full timestamp resolution).
enum class DelayKind { TauA, TauB, TauAorB, TauDiff };
struct DelayHistogramSpec {
    DelayKind kind = DelayKind::TauA;
    std::int64_t lo_ps = -100000;
    std::int64_t bin_ps = 260;
    int bins = 770;
    std::optional<std::pair<double, double>> energy_window;
    bool true_only = true;
    // For TauDiff: additionally require |tau_A| <= herald_window_ps.
    std::int64_t herald_window_ps = std::numeric_limits<std::int64_t>::max();
};
Histogram delay_histogram(std::span<const TripleRecord> records, const DelayHistogramSpec& spec);

// Serialization: 8-byte magic, u64 header length, JSON header, then the
// int64 little-endian count blocks (cube, marginal A, marginal B, N_e(E)).
std::vector<std::uint8_t> serialize_cube(const CoincidenceCube& cube);
CoincidenceCube parse_cube(std::span<const std::uint8_t> bytes);
void write_histogram_csv(std::ostream& os, const Histogram& h);

// Incremental matching + dedup over a stream delivered in time-ordered chunks.
// Records are emitted in electron order once no later event can change them;
// photon indices are global across chunks. Output equals the single pass.
class StreamingCorrelator {
public:
    using Sink = std::function<void(std::span<const TripleRecord>)>;
    explicit StreamingCorrelator(std::int64_t max_delay_ps);
    // Every event pushed later must have time >= complete_until_ps.
    void push(const SplitStream& chunk, std::int64_t complete_until_ps, const Sink& sink);
    void finish(const Sink& sink);
    std::int64_t max_delay_ps() const { return max_delay_; }

private:
    void process(std::int64_t frontier, const Sink& sink);
    std::int64_t max_delay_;
    std::int64_t done_until_ = std::numeric_limits<std::int64_t>::min();
    std::int64_t last_time_ = std::numeric_limits<std::int64_t>::min();
    SplitStream buf_;
    std::int64_t a_base_ = 0, b_base_ = 0;
    std::vector<TripleRecord> scratch_;
};

// Time-sharded matching + dedup + cube build over an in-memory stream; every
// shard sees a halo of 3 * max_delay so results equal the single pass exactly.
struct ShardResult {
    CoincidenceCube cube;
    std::vector<TripleRecord> records;  // optional, time-ordered
};
ShardResult sharded_analysis(const SplitStream& s, std::int64_t max_delay_ps, const CubeAxes& axes, int shards,
                             int threads, bool keep_records = false, CubeOptions options = {});

}  // namespace fockherald::correlate
