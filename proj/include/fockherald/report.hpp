// Estimator report schema (JSON + CSV twin) and the per-figure CSV bundle.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace fockherald::report {

constexpr int kSchemaVersion = 1;

class SchemaError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Axis {
    std::string name;            // unit in the name, e.g. "tau_ps"
    std::vector<double> values;  // bin centers
};

// A named result: either one scalar or an array shaped like the report axes
// (row-major over axes). `error` is empty when no uncertainty applies.
struct Series {
    std::string name;
    std::vector<double> values;
    std::vector<double> error;
    bool scalar = false;
};

struct Metadata {
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string tool_version;
    std::string manifest_hash;
};

struct Report {
    int schema_version = kSchemaVersion;
    std::string estimator;
    std::string variant;  // distinguishes several reports of one estimator
    nlohmann::ordered_json params = nlohmann::ordered_json::object();
    std::vector<Axis> axes;
    std::vector<Series> series;
    std::vector<std::string> notes;  // flags and warnings raised by the estimator
    Metadata metadata;

    std::string id() const { return variant.empty() ? estimator : estimator + "_" + variant; }
    const Series* find(const std::string& name) const;
    void add_scalar(const std::string& name, double value, double error);
    void add_scalar(const std::string& name, double value);
    void add_series(const std::string& name, std::vector<double> values, std::vector<double> error = {});
};

// Deterministic JSON text; non-finite numbers are written as null.
std::string to_json(const Report& r);
// Rejects malformed documents and any schema version other than kSchemaVersion.
Report from_json(const std::string& text);

// Long-format CSV: source,series,x,y,value,stderr (one row per element).
void write_csv(std::ostream& os, const Report& r);
void write_csv_rows(std::ostream& os, const Report& r);
constexpr const char* kCsvHeader = "source,series,x,y,value,stderr";

// Figure-equivalent data files, each built from one or more reports.
struct FigureSpec {
    std::string name;
    std::vector<std::pair<std::string, std::string>> sources;  // (estimator, variant)
};
const std::vector<FigureSpec>& figure_specs();

// Every report must carry the same schema version.
void check_compatible(const std::vector<Report>& reports);

// figure name -> CSV text, for every figure with at least one source report.
std::map<std::string, std::string> figure_bundle(const std::vector<Report>& reports);

}  // namespace fockherald::report
