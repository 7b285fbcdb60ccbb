// simulate / analyze / report commands and the run manifest.
#include "fockherald/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "fockherald/analysis.hpp"
#include "fockherald/config.hpp"
#include "fockherald/correlate.hpp"
#include "fockherald/events.hpp"
#include "fockherald/ingest.hpp"
#include "fockherald/report.hpp"
#include "fockherald/simgen.hpp"

namespace fockherald::cli {

namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

// Error categories mapped to exit codes.
struct ConfigFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string bytes_hash(std::span<const std::uint8_t> b) {
    return hex64(config::fnv1a(std::string(reinterpret_cast<const char*>(b.data()), b.size())));
}

std::string text_hash(const std::string& s) { return hex64(config::fnv1a(s)); }

void setup_logging() {
    static bool done = false;
    if (done) return;
    done = true;
    auto logger = spdlog::stderr_logger_st("fockherald");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");
    const char* env = std::getenv("FOCKHERALD_LOG");
    auto level = spdlog::level::warn;
    if (env && *env) {
        level = spdlog::level::from_str(env);
        if (level == spdlog::level::off && std::string(env) != "off") level = spdlog::level::warn;
    }
    spdlog::set_level(level);
}

struct Options {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::string out;
};

config::RunConfig load_config(const Options& o) {
    config::RunConfig c;
    if (!o.config_path.empty()) {
        std::ifstream f(o.config_path);
        if (!f) throw ConfigFailure("cannot read config " + o.config_path);
        std::stringstream ss;
        ss << f.rdbuf();
        c = config::parse(ss.str());
    }
    if (o.seed) c.experiment.seed = *o.seed;
    if (o.threads) {
        if (*o.threads < 0) throw ConfigFailure("--threads must be >= 0");
        c.analysis.threads = *o.threads;
    }
    config::validate(c);
    return c;
}

fs::path prepare_out(const std::string& out) {
    if (out.empty()) throw ConfigFailure("--out is required");
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec || !fs::is_directory(out)) throw ConfigFailure("cannot create output directory " + out);
    return fs::path(out);
}

// Collects outputs and stage timings; the manifest hash covers only the
// reproducible identity of the run (never paths or timings).
struct Manifest {
    std::string command;
    std::string config_hash;
    std::uint64_t seed = 0;
    Json inputs = Json::array();
    Json outputs = Json::array();
    Json timings = Json::object();
    Json extra = Json::object();

    std::string identity_hash() const {
        Json id;
        id["tool_version"] = kToolVersion;
        id["command"] = command;
        id["config_hash"] = config_hash;
        id["seed"] = seed;
        Json in = Json::array();
        for (const auto& i : inputs) in.push_back(i["fnv1a"]);
        id["inputs"] = in;
        return text_hash(id.dump());
    }
    void add_input(const std::string& path, std::span<const std::uint8_t> bytes) {
        inputs.push_back({{"path", path}, {"bytes", bytes.size()}, {"fnv1a", bytes_hash(bytes)}});
    }
    void write(const fs::path& dir, const fs::path& file, std::span<const std::uint8_t> bytes) {
        if (file.has_parent_path()) fs::create_directories(dir / file.parent_path());
        io::write_file((dir / file).string(), bytes);
        outputs.push_back({{"path", file.string()}, {"bytes", bytes.size()}, {"fnv1a", bytes_hash(bytes)}});
    }
    void write_text(const fs::path& dir, const fs::path& file, const std::string& text) {
        write(dir, file, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
    }
    void finalize(const fs::path& dir) const {
        Json m;
        m["tool_version"] = kToolVersion;
        m["command"] = command;
        m["config_hash"] = config_hash;
        m["seed"] = seed;
        m["manifest_hash"] = identity_hash();
        m["inputs"] = inputs;
        m["outputs"] = outputs;
        for (const auto& [k, v] : extra.items()) m[k] = v;
        m["stage_timings_s"] = timings;
        const std::string text = m.dump(2) + "\n";
        io::write_file((dir / "manifest.json").string(),
                       {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
    }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::vector<std::uint8_t> read_input(const std::string& path) {
    try {
        return io::read_file(path);
    } catch (const std::exception& e) {
        throw DataFailure(e.what());
    }
}

// Time-ordered records of one segment, flags included.
EventStream segment_events(const simgen::Segment& s) {
    EventStream out;
    const auto& e = s.events;
    out.records.reserve(e.electron_t.size() + e.photon_a.size() + e.photon_b.size());
    for (std::size_t i = 0; i < e.electron_t.size(); ++i) {
        out.records.push_back({e.electron_t[i], e.electron_e[i], EventKind::Electron,
                               i < s.electron_flags.size() ? s.electron_flags[i] : std::uint16_t{0}});
    }
    for (std::size_t i = 0; i < e.photon_a.size(); ++i) {
        out.records.push_back({e.photon_a[i], 0.0f, EventKind::PhotonA, i < s.flags_a.size() ? s.flags_a[i] : std::uint16_t{0}});
    }
    for (std::size_t i = 0; i < e.photon_b.size(); ++i) {
        out.records.push_back({e.photon_b[i], 0.0f, EventKind::PhotonB, i < s.flags_b.size() ? s.flags_b[i] : std::uint16_t{0}});
    }
    std::stable_sort(out.records.begin(), out.records.end(), event_order);
    return out;
}

int cmd_simulate(const Options& o, bool csv) {
    const auto t0 = Clock::now();
    const auto cfg = load_config(o);
    const auto dir = prepare_out(o.out);
    Manifest man;
    man.command = "simulate";
    man.config_hash = config::config_hash(cfg);
    man.seed = cfg.experiment.seed;
    const std::string canon = config::canonical(cfg);
    man.write_text(dir, "config.ini", canon);

    simgen::GenerateOptions opts;
    opts.pixels = cfg.output.pixels;
    opts.truth = cfg.output.truth;
    simgen::Generator gen(cfg.experiment, opts);
    std::vector<std::uint8_t> events(io::kEventMagic, io::kEventMagic + 8);
    std::vector<std::uint8_t> pixels(io::kPixelMagic, io::kPixelMagic + 8);
    EventStream all_events;
    PixelHitStream all_pixels;
    simgen::Segment seg;
    std::int64_t n_events = 0;
    while (gen.next(seg)) {
        auto ev = segment_events(seg);
        n_events += static_cast<std::int64_t>(ev.records.size());
        const auto b = io::serialize_events(ev);
        events.insert(events.end(), b.begin() + 8, b.end());
        if (csv) all_events.records.insert(all_events.records.end(), ev.records.begin(), ev.records.end());
        if (opts.pixels) {
            PixelHitStream ph{seg.pixels};
            const auto pb = io::serialize_pixels(ph);
            pixels.insert(pixels.end(), pb.begin() + 8, pb.end());
            if (csv) all_pixels.hits.insert(all_pixels.hits.end(), ph.hits.begin(), ph.hits.end());
        }
    }
    man.timings["generate"] = seconds_since(t0);
    const auto t1 = Clock::now();
    man.write(dir, "events.bin", events);
    if (opts.pixels) man.write(dir, "pixels.bin", pixels);
    if (opts.truth) {
        std::ostringstream os;
        simgen::write_truth_jsonl(os, gen.truth());
        man.write_text(dir, "truth.jsonl", os.str());
    }
    if (csv) {
        std::ostringstream os;
        io::write_events_csv(os, all_events);
        man.write_text(dir, "events.csv", os.str());
        if (opts.pixels) {
            std::ostringstream ps;
            io::write_pixels_csv(ps, all_pixels);
            man.write_text(dir, "pixels.csv", ps.str());
        }
    }
    man.extra["events"] = n_events;
    man.timings["write"] = seconds_since(t1);
    man.finalize(dir);
    spdlog::info("simulate: {} events written to {}", n_events, dir.string());
    return kOk;
}

SplitStream load_events(const std::string& events_path, const std::string& pixels_path, const config::RunConfig& cfg,
                        Manifest& man, std::int64_t& run_end) {
    const auto bytes = read_input(events_path);
    man.add_input(events_path, bytes);
    EventStream ev;
    try {
        ev = io::parse_events(bytes);
    } catch (const ParseError& e) {
        throw DataFailure(events_path + ": " + e.what());
    }
    SplitStream s = split(ev);
    run_end = ev.records.empty() ? 0 : ev.records.back().time_ps;
    if (!pixels_path.empty()) {
        // Electrons are rebuilt from raw pixel hits; photons come from the event file.
        const auto pb = read_input(pixels_path);
        man.add_input(pixels_path, pb);
        PixelHitStream hits;
        try {
            hits = io::parse_pixels(pb);
        } catch (const ParseError& e) {
            throw DataFailure(pixels_path + ": " + e.what());
        }
        ingest::ClusterOptions co;
        co.window_ps = cfg.analysis.cluster_window_ps;
        const auto clusters = ingest::cluster_pixel_hits(hits, co);
        ingest::CalibrationMap cal;
        cal.dispersion_ev = cfg.experiment.electron.pixel_dispersion_ev;
        cal.zlp_reference_px = cfg.experiment.electron.zlp_reference_px;
        cal.drift_window_s = cfg.analysis.drift_window_s;
        const auto calibrated = ingest::calibrate_energy(clusters, cal);
        ingest::DriftOptions dopt;
        dopt.window_s = cfg.analysis.drift_window_s;
        dopt.photon_energy_ev = cfg.experiment.physics.photon_energy;
        const auto corrected = ingest::correct_zlp_drift(calibrated, dopt);
        const auto el = split(corrected.stream);
        s.electron_t = el.electron_t;
        s.electron_e = el.electron_e;
        if (!s.electron_t.empty()) run_end = std::max(run_end, s.electron_t.back());
        man.extra["clusters"] = clusters.size();
    }
    return s;
}

int cmd_analyze(const Options& o, const std::string& events_path, const std::string& pixels_path,
                const std::vector<std::string>& estimators, bool stream, bool classical) {
    const auto t0 = Clock::now();
    const auto cfg = load_config(o);
    std::vector<analysis::EstimatorRequest> requests;
    try {
        for (const auto& e : estimators) requests.push_back(analysis::parse_request(e));
    } catch (const std::invalid_argument& e) {
        throw ConfigFailure(e.what());
    }
    if (requests.empty()) requests = analysis::default_requests();
    try {
        analysis::validate_requests(requests);
    } catch (const std::invalid_argument& e) {
        throw ConfigFailure(e.what());
    }
    if (stream == !events_path.empty()) throw ConfigFailure("analyze needs exactly one of EVENTS or --stream");
    if (stream && o.config_path.empty()) throw ConfigFailure("--stream requires --config");
    const auto dir = prepare_out(o.out);
    Manifest man;
    man.command = stream ? (classical ? "analyze --stream --classical" : "analyze --stream") : "analyze";
    man.config_hash = config::config_hash(cfg);
    man.seed = cfg.experiment.seed;

    analysis::Products products;
    if (stream) {
        analysis::SimulationSummary sum;
        products = analysis::analyze_simulation(cfg, &sum, classical);
        man.timings["generate"] = sum.generate_s;
        man.timings["correlate"] = sum.analyze_s;
        man.extra["events"] = sum.events;
    } else {
        std::int64_t run_end = 0;
        const SplitStream s = load_events(events_path, pixels_path, cfg, man, run_end);
        man.timings["load"] = seconds_since(t0);
        const auto t1 = Clock::now();
        products = analysis::analyze_stream(s, cfg, run_end);
        man.timings["correlate"] = seconds_since(t1);
    }
    const auto t2 = Clock::now();
    report::Metadata meta{man.config_hash, man.seed, kToolVersion, man.identity_hash()};
    analysis::EstimatorOutcome outcome;
    try {
        outcome = analysis::run_estimators(products, cfg, requests, meta);
    } catch (const std::invalid_argument& e) {
        throw ConfigFailure(e.what());
    }
    man.timings["estimators"] = seconds_since(t2);
    for (const auto& r : outcome.reports) {
        man.write_text(dir, r.id() + ".json", report::to_json(r));
        std::ostringstream os;
        report::write_csv(os, r);
        man.write_text(dir, r.id() + ".csv", os.str());
    }
    man.write(dir, "cube.bin", correlate::serialize_cube(products.cube));
    Json failures = Json::array();
    for (const auto& f : outcome.failures) failures.push_back({{"estimator", f.estimator}, {"reason", f.reason}});
    man.extra["estimator_failures"] = failures;
    man.extra["electrons"] = products.electrons;
    man.finalize(dir);
    if (!outcome.failures.empty()) {
        const auto& f = outcome.failures.front();
        std::string reason = f.estimator + ": " + f.reason;
        if (outcome.failures.size() > 1) reason += " (+" + std::to_string(outcome.failures.size() - 1) + " more)";
        std::replace(reason.begin(), reason.end(), '\n', ' ');
        std::cerr << "error: estimator: " << reason << '\n';
        return kEstimatorFailure;
    }
    return kOk;
}

int cmd_report(const Options& o, const std::vector<std::string>& paths) {
    const auto t0 = Clock::now();
    if (paths.empty()) throw ConfigFailure("report needs at least one report file");
    const auto dir = prepare_out(o.out);
    Manifest man;
    man.command = "report";
    std::vector<report::Report> reports;
    std::vector<std::vector<std::uint8_t>> raw;
    for (const auto& p : paths) {
        auto bytes = read_input(p);
        man.add_input(p, bytes);
        try {
            reports.push_back(report::from_json(std::string(bytes.begin(), bytes.end())));
        } catch (const std::exception& e) {
            throw DataFailure(p + ": " + e.what());
        }
        raw.push_back(std::move(bytes));
    }
    std::map<std::string, std::string> bundle;
    try {
        bundle = report::figure_bundle(reports);
    } catch (const report::SchemaError& e) {
        throw DataFailure(e.what());
    }
    man.config_hash = reports.front().metadata.config_hash;
    man.seed = reports.front().metadata.seed;
    // Identity passthrough of every input report.
    for (std::size_t i = 0; i < reports.size(); ++i) {
        man.write(dir, fs::path("reports") / (reports[i].id() + ".json"), raw[i]);
    }
    for (const auto& [name, csv] : bundle) man.write_text(dir, name + ".csv", csv);
    Json figs = Json::array();
    for (const auto& [name, csv] : bundle) figs.push_back(name);
    man.extra["figures"] = figs;
    man.timings["report"] = seconds_since(t0);
    man.finalize(dir);
    return kOk;
}

std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    std::replace(s.begin(), s.end(), '\r', ' ');
    return s;
}

int fail(const char* kind, const std::string& what, int code) {
    std::cerr << "error: " << kind << ": " << one_line(what) << '\n';
    return code;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    setup_logging();
    CLI::App app{"fockherald: heralded-photon event simulation and analysis"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);
    Options o;
    std::uint64_t seed = 0;
    int threads = 0;
    auto add_globals = [&](CLI::App* sub) {
        sub->add_option("--config", o.config_path, "INI run configuration");
        sub->add_option("--seed", seed, "override the configured seed");
        sub->add_option("--threads", threads, "worker pool size (0 = auto)");
        sub->add_option("--out", o.out, "output directory")->required();
    };
    auto* sim = app.add_subcommand("simulate", "generate event, pixel and ground-truth files");
    add_globals(sim);
    bool csv = false;
    sim->add_flag("--csv", csv, "also write CSV exports");

    auto* ana = app.add_subcommand("analyze", "run estimators on an event file (or a streamed simulation)");
    add_globals(ana);
    std::string events_path, pixels_path;
    std::vector<std::string> estimators;
    bool stream = false, classical = false;
    ana->add_option("events", events_path, "binary event file");
    ana->add_option("--pixels", pixels_path, "raw pixel-hit file; electrons are rebuilt from it");
    ana->add_option("--estimator,-e", estimators, "estimator spec, e.g. 'g2_discrete: m=1' (repeatable)");
    ana->add_flag("--stream", stream, "simulate the configured run and analyze it in one pass");
    ana->add_flag("--classical", classical, "with --stream: photons independent of the electrons");

    auto* rep = app.add_subcommand("report", "bundle reports into per-figure CSV files");
    std::vector<std::string> report_paths;
    rep->add_option("reports", report_paths, "report JSON files")->required();
    rep->add_option("--out", o.out, "output directory")->required();

    std::vector<const char*> argv;
    argv.push_back("fockherald");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), kConfigError);
    }
    for (auto* sub : {sim, ana}) {
        if (sub->parsed()) {
            if (sub->count("--seed")) o.seed = seed;
            if (sub->count("--threads")) o.threads = threads;
        }
    }
    try {
        if (sim->parsed()) return cmd_simulate(o, csv);
        if (ana->parsed()) return cmd_analyze(o, events_path, pixels_path, estimators, stream, classical);
        return cmd_report(o, report_paths);
    } catch (const ConfigFailure& e) {
        return fail("config", e.what(), kConfigError);
    } catch (const config::ConfigError& e) {
        return fail("config", e.what(), kConfigError);
    } catch (const DataFailure& e) {
        return fail("data", e.what(), kDataError);
    } catch (const ParseError& e) {
        return fail("data", e.what(), kDataError);
    } catch (const std::invalid_argument& e) {
        return fail("config", e.what(), kConfigError);
    } catch (const std::exception& e) {
        return fail("runtime", e.what(), kDataError);
    }
}

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args);
}

}  // namespace fockherald::cli
