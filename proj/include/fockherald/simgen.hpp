// Seedable Monte Carlo generator of electron/photon detection streams:
// scattering statistics, beam splitter, detector efficiencies, jitter,
// dead time, dark counts, timestamp quantization and pixel clusters.
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fockherald/events.hpp"
#include "fockherald/model.hpp"

namespace fockherald::simgen {

struct PhotonChannel {
    double efficiency = 0.02;        // probability a photon routed here is registered
    double jitter_fwhm_s = 0.3e-9;
    double dead_time_s = 20e-6;      // non-paralyzable
    double dark_rate_per_s = 250.0;
    std::int64_t timestamp_quantum_ps = 260;
};

struct ElectronChain {
    double transmission = 0.65;
    double jitter_fwhm_s = 2.9e-9;
    std::int64_t timestamp_quantum_ps = 1560;
    double pixel_dispersion_ev = 0.03;
    double mean_cluster_size = 3.4;
    double pixel_jitter_sigma_s = 1.5e-9;
    int zlp_reference_px = 450;      // detector column of zero energy loss
};

struct ExperimentConfig {
    double electron_rate_per_s = 8.74e6;
    double duration_s = 0.01;
    model::SpectrumParams physics{};
    // Probability that an emitted photon lands in the collected optical mode.
    double detected_mode_fraction = 1.0;
    // Slow linear drift of the zero-loss reference, eV per second.
    double zlp_drift_ev_per_s = 0.0;
    double splitter_ratio = 0.52;    // probability a photon goes to channel A
    PhotonChannel channel_a{};
    PhotonChannel channel_b{0.02, 0.3e-9, 20e-6, 300.0, 260};
    ElectronChain electron{};
    std::uint64_t seed = 1;
    double max_electrons = 1e9;      // resource guard on rate * duration
    double segment_s = 1e-3;         // generation segment length (part of the seed derivation)
};

void validate(const ExperimentConfig& c);

// Outcome of one generated photon in the ground-truth ledger.
enum class PhotonFate : std::uint8_t {
    DetectedA = 0,
    DetectedB = 1,
    LostOutsideMode = 2,
    LostEfficiencyA = 3,
    LostEfficiencyB = 4,
    LostDeadTimeA = 5,
    LostDeadTimeB = 6,
    LostOutsideRun = 7,
};

struct ElectronTruth {
    std::uint64_t id = 0;
    std::int64_t emission_time_ps = 0;  // before jitter and quantization
    std::uint16_t true_k = 0;
    bool transmitted = false;
    bool recorded = false;              // transmitted and inside the run window
    bool pixel_clipped = false;
    float continuum_loss_ev = 0.0f;
    float energy_loss_ev = 0.0f;
    std::uint32_t fate_offset = 0;      // index of the first fate in GroundTruth::fates
};

struct GroundTruth {
    std::vector<ElectronTruth> electrons;
    std::vector<PhotonFate> fates;
    // Generating electron id for every detected photon, -1 for dark counts;
    // aligned with the photon order on each channel of the event stream.
    std::vector<std::int64_t> source_a;
    std::vector<std::int64_t> source_b;

    std::size_t detected_count(const ElectronTruth& e) const;
};

struct GenerateOptions {
    bool pixels = true;
    bool truth = true;
    // Replace the per-electron photon emission with an independent Poisson
    // process of the same mean rate (classical control source).
    bool classical = false;
};

// One finalized, time-ordered slice of the output.
struct Segment {
    SplitStream events;
    std::vector<std::uint16_t> electron_flags;
    std::vector<std::uint16_t> flags_a;
    std::vector<std::uint16_t> flags_b;
    std::vector<std::int64_t> source_a;
    std::vector<std::int64_t> source_b;
    std::vector<PixelHit> pixels;
    // Every event emitted later has time >= complete_until_ps.
    std::int64_t complete_until_ps = 0;
};

// Streaming generator: produces the run as consecutive time-ordered segments.
class Generator {
public:
    Generator(const ExperimentConfig& config, GenerateOptions options = {});
    ~Generator();
    Generator(const Generator&) = delete;
    Generator& operator=(const Generator&) = delete;

    // Returns false once the run is exhausted.
    bool next(Segment& out);
    // Ground-truth ledger accumulated so far (requires options.truth).
    GroundTruth& truth();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

struct SimulationOutput {
    EventStream events;
    PixelHitStream pixels;
    GroundTruth truth;
};

SimulationOutput generate(const ExperimentConfig& config, GenerateOptions options = {});

// Pixel clusters for a list of time-sorted electrons (time, loss), with the
// generator's cluster model. Deterministic in `seed`.
PixelHitStream emit_pixel_hits(const std::vector<std::int64_t>& times, const std::vector<float>& losses,
                               const ElectronChain& chain, std::uint64_t seed,
                               std::vector<bool>* clipped = nullptr);

// Photons statistically independent of the electrons, same mean rates.
EventStream classical_control(const ExperimentConfig& config);

// Expected mean photons per electron for the configured coupling law.
double mean_photons_per_electron(const model::CouplingSpec& c);

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

void write_truth_jsonl(std::ostream& os, const GroundTruth& truth);

}  // namespace fockherald::simgen
