// Reconstruction of calibrated electron events from raw pixel hits:
// space-time clustering, energy calibration and zero-loss drift correction.
#pragma once

#include <cstdint>
#include <vector>

#include "fockherald/events.hpp"

namespace fockherald::ingest {

struct PixelCluster {
    double x = 0.0;  // arithmetic mean column
    double y = 0.0;  // arithmetic mean row
    std::int64_t time_ps = 0;  // earliest hit
    std::uint16_t size = 0;
};

struct ClusterOptions {
    std::int64_t window_ps = 100000;  // temporal connectivity window
    int max_cluster = 10;
    // Optional per-pixel response offsets (ps), indexed y * 514 + x, subtracted
    // from each hit before clustering. Empty = no correction.
    std::vector<std::int64_t> pixel_offsets_ps;
};

std::vector<PixelCluster> cluster_pixel_hits(const PixelHitStream& hits, const ClusterOptions& options = {});

struct CalibrationMap {
    double dispersion_ev = 0.03;    // eV per pixel
    double zlp_reference_px = 450;  // column of zero loss
    double drift_window_s = 10.0;
};

// Electron events (energy loss = (zlp_reference - x) * dispersion), time-sorted.
EventStream calibrate_energy(const std::vector<PixelCluster>& clusters, const CalibrationMap& cal);

struct DriftOptions {
    double window_s = 10.0;
    double photon_energy_ev = 0.9;  // peak search restricted to |E| < photon_energy / 2
    double bin_ev = 0.03;
    double fit_half_width_ev = 0.24;
    std::size_t min_electrons = 100;
};

struct DriftCorrection {
    EventStream stream;
    std::vector<double> offsets_ev;  // per window
    std::vector<bool> reused;        // window reused the previous offset
};

// Zero-loss peak position of a set of energies (least-squares parabola on the
// log-histogram around the mode). Returns NaN when it cannot be located.
double locate_zlp(const std::vector<double>& energies, const DriftOptions& options);

DriftCorrection correct_zlp_drift(const EventStream& stream, const DriftOptions& options);

}  // namespace fockherald::ingest
