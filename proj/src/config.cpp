// INI configuration parsing, validation, canonical form and hashing.
#include "fockherald/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace fockherald::config {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& s) {
    double v = 0.0;
    const auto* end = s.data() + s.size();
    const auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end || !std::isfinite(v)) throw std::invalid_argument("expected a finite number");
    return v;
}

std::int64_t parse_int(const std::string& s) {
    std::int64_t v = 0;
    const auto* end = s.data() + s.size();
    const auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end) throw std::invalid_argument("expected an integer");
    return v;
}

// Accepts plain integers and integral values written in floating notation (1e9).
std::int64_t parse_integral(const std::string& s) {
    try {
        return parse_int(s);
    } catch (const std::invalid_argument&) {
        const double d = parse_double(s);
        if (d != std::floor(d) || std::abs(d) > 9.2e18) throw std::invalid_argument("expected an integer");
        return static_cast<std::int64_t>(d);
    }
}

bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw std::invalid_argument("expected a boolean (true/false)");
}

struct Field {
    std::string section, key;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
};

// Scale factors convert the unit in the key name to the internal unit.
// Shortest decimal (15-17 digits) that reproduces the internal value exactly.
std::string fmt_scaled(double ref, double scale) {
    for (int p = 15; p <= 17; ++p) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.*g", p, ref / scale);
        if (std::strtod(buf, nullptr) * scale == ref) return buf;
    }
    return fmt_double(ref / scale);
}

Field real(const std::string& sec, const std::string& key, double& ref, double scale = 1.0) {
    return {sec, key, [&ref, scale] { return fmt_scaled(ref, scale); },
            [&ref, scale](const std::string& v) { ref = parse_double(v) * scale; }};
}

Field integer(const std::string& sec, const std::string& key, std::int64_t& ref) {
    return {sec, key, [&ref] { return std::to_string(ref); }, [&ref](const std::string& v) { ref = parse_integral(v); }};
}

Field small_int(const std::string& sec, const std::string& key, int& ref) {
    return {sec, key, [&ref] { return std::to_string(ref); },
            [&ref](const std::string& v) {
                const auto x = parse_integral(v);
                if (x < -2147483647 || x > 2147483647) throw std::invalid_argument("integer out of range");
                ref = static_cast<int>(x);
            }};
}

Field boolean(const std::string& sec, const std::string& key, bool& ref) {
    return {sec, key, [&ref] { return std::string(ref ? "true" : "false"); },
            [&ref](const std::string& v) { ref = parse_bool(v); }};
}

Field ps_from_ns(const std::string& sec, const std::string& key, std::int64_t& ref) {
    return {sec, key, [&ref] { return fmt_double(static_cast<double>(ref) / 1e3); },
            [&ref](const std::string& v) { ref = std::llround(parse_double(v) * 1e3); }};
}

Field ps_double_from_ns(const std::string& sec, const std::string& key, double& ref) {
    return real(sec, key, ref, 1e3);
}

void channel_fields(std::vector<Field>& f, const std::string& sec, simgen::PhotonChannel& c) {
    f.push_back(real(sec, "efficiency", c.efficiency));
    f.push_back(real(sec, "jitter_fwhm_ns", c.jitter_fwhm_s, 1e-9));
    f.push_back(real(sec, "dead_time_us", c.dead_time_s, 1e-6));
    f.push_back(real(sec, "dark_rate_per_s", c.dark_rate_per_s));
    f.push_back(integer(sec, "timestamp_quantum_ps", c.timestamp_quantum_ps));
}

std::vector<Field> fields(RunConfig& c) {
    auto& x = c.experiment;
    auto& a = c.analysis;
    std::vector<Field> f;
    f.push_back({"run", "seed", [&x] { return std::to_string(x.seed); },
                 [&x](const std::string& v) {
                     std::uint64_t s = 0;
                     const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), s);
                     if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("expected an unsigned integer");
                     x.seed = s;
                 }});
    f.push_back(real("run", "duration_s", x.duration_s));
    f.push_back(real("run", "electron_rate_per_s", x.electron_rate_per_s));
    f.push_back(real("run", "max_electrons", x.max_electrons));
    f.push_back(real("run", "segment_s", x.segment_s));

    auto& p = x.physics;
    f.push_back(real("physics", "zlp_sigma_ev", p.zlp_sigma));
    f.push_back(real("physics", "photon_energy_ev", p.photon_energy));
    f.push_back(real("physics", "mean_g0", p.coupling.mean_g0));
    f.push_back(real("physics", "std_g0", p.coupling.std_g0));
    f.push_back(real("physics", "continuum_prob", p.continuum_prob));
    f.push_back(real("physics", "continuum_decay_ev", p.continuum_decay));
    f.push_back(real("physics", "pm_bandwidth_ev", p.pm_bandwidth));
    f.push_back(real("physics", "detected_mode_fraction", x.detected_mode_fraction));
    f.push_back(real("physics", "zlp_drift_ev_per_s", x.zlp_drift_ev_per_s));

    f.push_back(real("splitter", "ratio_a", x.splitter_ratio));
    channel_fields(f, "photon_a", x.channel_a);
    channel_fields(f, "photon_b", x.channel_b);

    auto& e = x.electron;
    f.push_back(real("electron", "transmission", e.transmission));
    f.push_back(real("electron", "jitter_fwhm_ns", e.jitter_fwhm_s, 1e-9));
    f.push_back(integer("electron", "timestamp_quantum_ps", e.timestamp_quantum_ps));
    f.push_back(real("electron", "pixel_dispersion_ev", e.pixel_dispersion_ev));
    f.push_back(real("electron", "mean_cluster_size", e.mean_cluster_size));
    f.push_back(real("electron", "pixel_jitter_sigma_ns", e.pixel_jitter_sigma_s, 1e-9));
    f.push_back(small_int("electron", "zlp_reference_px", e.zlp_reference_px));

    f.push_back(boolean("output", "pixels", c.output.pixels));
    f.push_back(boolean("output", "truth", c.output.truth));

    f.push_back(ps_from_ns("analysis", "max_delay_ns", a.max_delay_ps));
    f.push_back(ps_from_ns("analysis", "coincidence_window_ns", a.coincidence_window_ps));
    f.push_back(ps_from_ns("analysis", "pair_window_ns", a.pair_window_ps));
    f.push_back(integer("analysis", "tau_lo_ps", a.axes.tau_lo_ps));
    f.push_back(integer("analysis", "tau_bin_ps", a.axes.tau_bin_ps));
    f.push_back(small_int("analysis", "tau_bins", a.axes.tau_bins));
    f.push_back(real("analysis", "energy_lo_ev", a.axes.e_lo));
    f.push_back(real("analysis", "energy_bin_ev", a.axes.e_bin));
    f.push_back(small_int("analysis", "energy_bins", a.axes.e_bins));
    f.push_back(integer("analysis", "fine_bin_ps", a.fine_bin_ps));
    f.push_back(small_int("analysis", "max_q", a.max_q));
    f.push_back(ps_double_from_ns("analysis", "background_lo_ns", a.background_lo_ps));
    f.push_back(ps_double_from_ns("analysis", "background_hi_ns", a.background_hi_ps));
    f.push_back(ps_from_ns("analysis", "g2_bin_ns", a.g2_bin_ps));
    f.push_back(ps_from_ns("analysis", "g2_span_ns", a.g2_span_ps));
    f.push_back(ps_double_from_ns("analysis", "g2_baseline_lo_ns", a.g2_baseline_lo_ps));
    f.push_back(ps_double_from_ns("analysis", "g2_baseline_hi_ns", a.g2_baseline_hi_ps));
    f.push_back(ps_from_ns("analysis", "csi_bin_ns", a.csi_bin_ps));
    f.push_back(small_int("analysis", "csi_max_lag_bins", a.csi_max_lag_bins));
    f.push_back({"analysis", "csi_form",
                 [&a] { return std::string(a.csi_form == stats::CsiForm::Squared ? "squared" : "linear"); },
                 [&a](const std::string& v) {
                     if (v == "squared") a.csi_form = stats::CsiForm::Squared;
                     else if (v == "linear") a.csi_form = stats::CsiForm::Linear;
                     else throw std::invalid_argument("expected 'squared' or 'linear'");
                 }});
    f.push_back({"analysis", "csi_min_loss_ev",
                 [&a] { return a.csi_min_loss_ev ? fmt_scaled(*a.csi_min_loss_ev, 1.0) : std::string("none"); },
                 [&a](const std::string& v) {
                     if (v == "none") a.csi_min_loss_ev.reset();
                     else a.csi_min_loss_ev = parse_double(v);
                 }});
    f.push_back(ps_from_ns("analysis", "cluster_window_ns", a.cluster_window_ps));
    f.push_back(real("analysis", "drift_window_s", a.drift_window_s));
    f.push_back(small_int("analysis", "threads", a.threads));
    return f;
}

std::map<std::string, int> key_lines(const std::string& text) {
    std::map<std::string, int> lines;
    std::istringstream in(text);
    std::string line, section;
    int n = 0;
    while (std::getline(in, line)) {
        ++n;
        const std::string t = trim(line);
        if (t.empty() || t[0] == ';' || t[0] == '#') continue;
        if (t.front() == '[') {
            section = trim(t.substr(1, t.find(']') == std::string::npos ? std::string::npos : t.find(']') - 1));
            lines.emplace(section, n);
            continue;
        }
        const auto eq = t.find('=');
        if (eq != std::string::npos) lines.emplace(section + "." + trim(t.substr(0, eq)), n);
    }
    return lines;
}

}  // namespace

namespace {

// Maps a validation message onto the config key it concerns. Messages from the
// simulation and model layers use internal names, listed here most specific
// first; analysis messages already quote "section.key".
std::string offending_key(const std::string& what, const std::vector<Field>& table) {
    static const std::pair<const char*, const char*> aliases[] = {
        {"max_electrons", "run.max_electrons"},
        {"electron_rate", "run.electron_rate_per_s"},
        {"duration", "run.duration_s"},
        {"segment length", "run.segment_s"},
        {"mean_g0", "physics.mean_g0"},
        {"zero mean cannot have spread", "physics.std_g0"},
        {"continuum_prob", "physics.continuum_prob"},
        {"detected_mode_fraction", "physics.detected_mode_fraction"},
        {"splitter_ratio", "splitter.ratio_a"},
        {"photon_a.efficiency", "photon_a.efficiency"},
        {"photon_a.jitter_fwhm", "photon_a.jitter_fwhm_ns"},
        {"photon_a.dead_time", "photon_a.dead_time_us"},
        {"photon_a.dark_rate", "photon_a.dark_rate_per_s"},
        {"photon_a.timestamp_quantum", "photon_a.timestamp_quantum_ps"},
        {"photon_b.efficiency", "photon_b.efficiency"},
        {"photon_b.jitter_fwhm", "photon_b.jitter_fwhm_ns"},
        {"photon_b.dead_time", "photon_b.dead_time_us"},
        {"photon_b.dark_rate", "photon_b.dark_rate_per_s"},
        {"photon_b.timestamp_quantum", "photon_b.timestamp_quantum_ps"},
        {"electron.transmission", "electron.transmission"},
        {"electron.jitter_fwhm", "electron.jitter_fwhm_ns"},
        {"electron.timestamp_quantum", "electron.timestamp_quantum_ps"},
        {"electron.pixel_dispersion", "electron.pixel_dispersion_ev"},
        {"electron.mean_cluster_size", "electron.mean_cluster_size"},
        {"electron.pixel_jitter", "electron.pixel_jitter_sigma_ns"},
        {"electron.zlp_reference_px", "electron.zlp_reference_px"},
    };
    for (const auto& [needle, key] : aliases) {
        if (what.find(needle) != std::string::npos) return key;
    }
    for (const auto& f : table) {
        const std::string key = f.section + "." + f.key;
        if (what.find(key) != std::string::npos) return key;
    }
    return "";
}

}  // namespace

// Removes trailing "; comment" / "# comment" (marker preceded by whitespace),
// keeping line numbering intact.
std::string strip_inline_comments(const std::string& text) {
    std::istringstream in(text);
    std::string line, out;
    while (std::getline(in, line)) {
        for (std::size_t i = 1; i < line.size(); ++i) {
            if ((line[i] == ';' || line[i] == '#') && (line[i - 1] == ' ' || line[i - 1] == '\t')) {
                line.erase(i);
                break;
            }
        }
        out += line;
        out += '\n';
    }
    return out;
}

RunConfig parse(const std::string& raw) {
    const std::string text = strip_inline_comments(raw);
    boost::property_tree::ptree tree;
    try {
        std::istringstream in(text);
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError("", static_cast<int>(e.line()), e.message());
    }
    const auto lines = key_lines(text);
    auto line_of = [&](const std::string& k) {
        const auto it = lines.find(k);
        return it == lines.end() ? 0 : it->second;
    };
    RunConfig c;
    auto table = fields(c);
    std::map<std::string, Field*> index;
    for (auto& f : table) index[f.section + "." + f.key] = &f;
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty()) {
            throw ConfigError(section, line_of("." + section), "keys must be placed inside a [section]");
        }
        for (const auto& [key, value] : body) {
            const std::string name = section + "." + key;
            const auto it = index.find(name);
            if (it == index.end()) throw ConfigError(name, line_of(name), "unknown key");
            try {
                it->second->set(trim(value.data()));
            } catch (const std::invalid_argument& e) {
                throw ConfigError(name, line_of(name), std::string(e.what()) + " (got '" + value.data() + "')");
            }
        }
    }
    try {
        validate(c);
    } catch (const std::invalid_argument& e) {
        const std::string key = offending_key(e.what(), table);
        throw ConfigError(key, key.empty() ? 0 : line_of(key), e.what());
    }
    return c;
}

RunConfig load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(path, 0, "cannot open config file");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string canonical(const RunConfig& c) {
    RunConfig copy = c;
    auto table = fields(copy);
    std::string out, section;
    for (const auto& f : table) {
        if (f.section != section) {
            if (!section.empty()) out += "\n";
            section = f.section;
            out += "[" + section + "]\n";
        }
        out += f.key + " = " + f.get() + "\n";
    }
    return out;
}

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string config_hash(const RunConfig& c) {
    // The worker count never changes results, so it is not part of the identity.
    RunConfig identity = c;
    identity.analysis.threads = 0;
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(canonical(identity))));
    return buf;
}

void validate(const RunConfig& c) {
    simgen::validate(c.experiment);
    const auto& a = c.analysis;
    correlate::validate(a.axes);
    if (a.max_delay_ps <= 0) throw std::invalid_argument("analysis.max_delay_ns must be > 0");
    if (a.coincidence_window_ps <= 0 || a.coincidence_window_ps > a.max_delay_ps) {
        throw std::invalid_argument("analysis.coincidence_window_ns must lie in (0, max_delay_ns]");
    }
    if (a.pair_window_ps <= 0 || a.pair_window_ps > a.coincidence_window_ps) {
        throw std::invalid_argument("analysis.pair_window_ns must lie in (0, coincidence_window_ns]");
    }
    if (a.fine_bin_ps <= 0) throw std::invalid_argument("analysis.fine_bin_ps must be > 0");
    if (a.max_q < 1) throw std::invalid_argument("analysis.max_q must be >= 1");
    if (!(a.background_lo_ps > a.coincidence_window_ps) || !(a.background_hi_ps > a.background_lo_ps) ||
        a.background_hi_ps > static_cast<double>(a.max_delay_ps)) {
        throw std::invalid_argument(
            "analysis background window must satisfy coincidence_window < background_lo < background_hi <= max_delay");
    }
    if (a.g2_bin_ps <= 0 || a.g2_span_ps < a.g2_bin_ps) throw std::invalid_argument("analysis g2 bin/span invalid");
    if (!(a.g2_baseline_hi_ps > a.g2_baseline_lo_ps)) throw std::invalid_argument("analysis g2 baseline window invalid");
    if (a.csi_bin_ps <= 0 || a.csi_max_lag_bins < 0) throw std::invalid_argument("analysis csi settings invalid");
    if (a.cluster_window_ps < 0) throw std::invalid_argument("analysis.cluster_window_ns must be >= 0");
    if (!(a.drift_window_s > 0.0)) throw std::invalid_argument("analysis.drift_window_s must be > 0");
    if (a.threads < 0) throw std::invalid_argument("analysis.threads must be >= 0");
}

}  // namespace fockherald::config
