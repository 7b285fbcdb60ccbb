// Report serialization and figure bundling.
#include "fockherald/report.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

namespace fockherald::report {

namespace {

using Json = nlohmann::ordered_json;

Json number(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

Json numbers(const std::vector<double>& v) {
    Json a = Json::array();
    for (double x : v) a.push_back(number(x));
    return a;
}

double to_double(const Json& j) {
    if (j.is_null()) return std::nan("");
    if (!j.is_number()) throw std::runtime_error("report: expected a number");
    return j.get<double>();
}

std::vector<double> to_doubles(const Json& j) {
    if (!j.is_array()) throw std::runtime_error("report: expected an array");
    std::vector<double> v;
    v.reserve(j.size());
    for (const auto& x : j) v.push_back(to_double(x));
    return v;
}

std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::size_t shape_size(const Report& r) {
    std::size_t n = 1;
    for (const auto& a : r.axes) n *= a.values.size();
    return n;
}

}  // namespace

const Series* Report::find(const std::string& name) const {
    for (const auto& s : series) {
        if (s.name == name) return &s;
    }
    return nullptr;
}

void Report::add_scalar(const std::string& name, double value, double error) {
    series.push_back({name, {value}, {error}, true});
}

void Report::add_scalar(const std::string& name, double value) { series.push_back({name, {value}, {}, true}); }

void Report::add_series(const std::string& name, std::vector<double> values, std::vector<double> error) {
    series.push_back({name, std::move(values), std::move(error), false});
}

std::string to_json(const Report& r) {
    Json j;
    j["schema_version"] = r.schema_version;
    j["estimator"] = r.estimator;
    j["variant"] = r.variant;
    j["params"] = r.params;
    Json axes = Json::array();
    for (const auto& a : r.axes) axes.push_back({{"name", a.name}, {"values", numbers(a.values)}});
    j["axes"] = axes;
    Json values = Json::object(), errors = Json::object();
    for (const auto& s : r.series) {
        if (s.scalar) {
            values[s.name] = number(s.values.at(0));
            if (!s.error.empty()) errors[s.name] = number(s.error.at(0));
        } else {
            values[s.name] = numbers(s.values);
            if (!s.error.empty()) errors[s.name] = numbers(s.error);
        }
    }
    j["values"] = values;
    j["stderr"] = errors;
    j["notes"] = r.notes;
    j["metadata"] = {{"config_hash", r.metadata.config_hash},
                     {"seed", r.metadata.seed},
                     {"tool_version", r.metadata.tool_version},
                     {"manifest_hash", r.metadata.manifest_hash}};
    return j.dump(2) + "\n";
}

Report from_json(const std::string& text) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(std::string("report: invalid JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("schema_version")) throw SchemaError("report: missing schema_version");
    const auto& v = j["schema_version"];
    if (!v.is_number_integer() || v.get<int>() != kSchemaVersion) {
        throw SchemaError("report: schema version mismatch (found " + v.dump() + ", supported " +
                          std::to_string(kSchemaVersion) + ")");
    }
    Report r;
    try {
        r.estimator = j.at("estimator").get<std::string>();
        r.variant = j.value("variant", std::string());
        r.params = j.value("params", Json::object());
        for (const auto& a : j.at("axes")) r.axes.push_back({a.at("name").get<std::string>(), to_doubles(a.at("values"))});
        const auto& errors = j.at("stderr");
        for (const auto& [name, val] : j.at("values").items()) {
            Series s;
            s.name = name;
            s.scalar = !val.is_array();
            s.values = s.scalar ? std::vector<double>{to_double(val)} : to_doubles(val);
            if (errors.contains(name)) {
                const auto& e = errors.at(name);
                s.error = s.scalar ? std::vector<double>{to_double(e)} : to_doubles(e);
            }
            r.series.push_back(std::move(s));
        }
        r.notes = j.value("notes", std::vector<std::string>());
        const auto& m = j.at("metadata");
        r.metadata.config_hash = m.at("config_hash").get<std::string>();
        r.metadata.seed = m.at("seed").get<std::uint64_t>();
        r.metadata.tool_version = m.at("tool_version").get<std::string>();
        r.metadata.manifest_hash = m.value("manifest_hash", std::string());
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("report: malformed document: ") + e.what());
    }
    const std::size_t n = shape_size(r);
    for (const auto& s : r.series) {
        if (!s.scalar && s.values.size() != n) throw std::runtime_error("report: series '" + s.name + "' does not match the axes");
        if (!s.error.empty() && s.error.size() != s.values.size()) {
            throw std::runtime_error("report: stderr of '" + s.name + "' has the wrong length");
        }
    }
    return r;
}

void write_csv_rows(std::ostream& os, const Report& r) {
    const std::string src = r.id();
    for (const auto& s : r.series) {
        for (std::size_t i = 0; i < s.values.size(); ++i) {
            std::string x, y;
            if (!s.scalar && r.axes.size() == 1) {
                x = fmt(r.axes[0].values[i]);
            } else if (!s.scalar && r.axes.size() == 2) {
                const std::size_t ny = r.axes[1].values.size();
                x = fmt(r.axes[0].values[i / ny]);
                y = fmt(r.axes[1].values[i % ny]);
            }
            os << src << ',' << s.name << ',' << x << ',' << y << ',' << fmt(s.values[i]) << ','
               << (s.error.empty() ? std::string() : fmt(s.error[i])) << '\n';
        }
    }
}

void write_csv(std::ostream& os, const Report& r) {
    os << kCsvHeader << '\n';
    write_csv_rows(os, r);
}

const std::vector<FigureSpec>& figure_specs() {
    static const std::vector<FigureSpec> specs = {
        {"fig2c", {{"cube", "tau_a_energy"}}},
        {"fig2d", {{"cube", "tau_diff_energy"}}},
        {"fig3a", {{"spectrum", ""}}},
        {"fig3d", {{"coincidence_spectra", ""}}},
        {"fig4a", {{"cube", "tau_a_tau_b_m1"}}},
        {"fig4b", {{"cube", "tau_a_tau_b_m2"}}},
        {"fig4c", {{"csi", ""}}},
        {"fig4d", {{"g2_unheralded", ""}}},
        {"fig4e", {{"g2_heralded", "m1"}, {"g2_time_averaged", "m1"}}},
        {"fig4f", {{"g2_discrete", "all"}, {"g2_discrete", "m1"}}},
    };
    return specs;
}

void check_compatible(const std::vector<Report>& reports) {
    for (const auto& r : reports) {
        if (r.schema_version != reports.front().schema_version) {
            throw SchemaError("schema version mismatch: " + std::to_string(reports.front().schema_version) + " vs " +
                              std::to_string(r.schema_version));
        }
    }
}

std::map<std::string, std::string> figure_bundle(const std::vector<Report>& reports) {
    check_compatible(reports);
    std::map<std::string, std::string> out;
    for (const auto& fig : figure_specs()) {
        std::ostringstream os;
        bool any = false;
        for (const auto& [est, variant] : fig.sources) {
            for (const auto& r : reports) {
                if (r.estimator != est || r.variant != variant) continue;
                if (!any) os << kCsvHeader << '\n';
                any = true;
                write_csv_rows(os, r);
            }
        }
        if (any) out[fig.name] = os.str();
    }
    return out;
}

}  // namespace fockherald::report
