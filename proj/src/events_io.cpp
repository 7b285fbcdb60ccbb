// Event stream utilities and the fixed-record little-endian file formats.
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <ostream>

#include "fockherald/events.hpp"

namespace fockherald {

bool event_order(const Event& a, const Event& b) {
    if (a.time_ps != b.time_ps) return a.time_ps < b.time_ps;
    return static_cast<int>(a.kind) < static_cast<int>(b.kind);
}

bool is_sorted(const EventStream& s) {
    return std::is_sorted(s.records.begin(), s.records.end(),
                          [](const Event& a, const Event& b) { return a.time_ps < b.time_ps; });
}

SplitStream split(const EventStream& s) {
    SplitStream out;
    for (const auto& e : s.records) {
        switch (e.kind) {
            case EventKind::Electron:
                out.electron_t.push_back(e.time_ps);
                out.electron_e.push_back(e.energy_ev);
                break;
            case EventKind::PhotonA: out.photon_a.push_back(e.time_ps); break;
            case EventKind::PhotonB: out.photon_b.push_back(e.time_ps); break;
        }
    }
    return out;
}

EventStream merge(const SplitStream& s) {
    EventStream out;
    out.records.reserve(s.electron_t.size() + s.photon_a.size() + s.photon_b.size());
    for (std::size_t i = 0; i < s.electron_t.size(); ++i) {
        out.records.push_back({s.electron_t[i], s.electron_e[i], EventKind::Electron, 0});
    }
    for (auto t : s.photon_a) out.records.push_back({t, 0.0f, EventKind::PhotonA, 0});
    for (auto t : s.photon_b) out.records.push_back({t, 0.0f, EventKind::PhotonB, 0});
    std::stable_sort(out.records.begin(), out.records.end(), event_order);
    return out;
}

namespace io {

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
    using U = std::make_unsigned_t<T>;
    U u;
    std::memcpy(&u, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

template <typename T>
T get_le(const std::uint8_t* p) {
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
    T v;
    std::memcpy(&v, &u, sizeof(T));
    return v;
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put_le<std::uint32_t>(out, u);
}

float get_f32(const std::uint8_t* p) {
    const std::uint32_t u = get_le<std::uint32_t>(p);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

void check_header(std::span<const std::uint8_t> bytes, const char (&magic)[8], std::size_t record) {
    if (bytes.size() < 8) throw ParseError("truncated header", bytes.size());
    for (std::size_t i = 0; i < 8; ++i) {
        if (bytes[i] != static_cast<std::uint8_t>(magic[i])) throw ParseError("bad magic", i);
    }
    const std::size_t payload = bytes.size() - 8;
    if (payload % record != 0) {
        throw ParseError("truncated record", 8 + (payload / record) * record);
    }
}

}  // namespace

std::vector<std::uint8_t> serialize_events(const EventStream& s) {
    std::vector<std::uint8_t> out(kEventMagic, kEventMagic + 8);
    out.reserve(8 + s.records.size() * kEventRecordSize);
    // The writer refuses anything the parser would reject.
    for (std::size_t i = 0; i < s.records.size(); ++i) {
        const auto& e = s.records[i];
        if (e.time_ps < 0) throw std::invalid_argument("event timestamps must be >= 0");
        if (!std::isfinite(e.energy_ev)) throw std::invalid_argument("event energies must be finite");
        if (i > 0 && e.time_ps < s.records[i - 1].time_ps) throw std::invalid_argument("events must be time-sorted");
    }
    for (const auto& e : s.records) {
        const std::uint8_t kind = e.kind == EventKind::Electron ? 0 : 1;
        const std::uint8_t channel = e.kind == EventKind::PhotonB ? 1 : 0;
        out.push_back(kind);
        out.push_back(channel);
        put_le<std::uint16_t>(out, e.flags);
        put_le<std::int64_t>(out, e.time_ps);
        put_f32(out, e.energy_ev);
    }
    return out;
}

EventStream parse_events(std::span<const std::uint8_t> bytes) {
    check_header(bytes, kEventMagic, kEventRecordSize);
    EventStream s;
    const std::size_t n = (bytes.size() - 8) / kEventRecordSize;
    s.records.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = 8 + i * kEventRecordSize;
        const std::uint8_t* p = bytes.data() + off;
        Event e;
        if (p[0] == 0 && p[1] == 0) e.kind = EventKind::Electron;
        else if (p[0] == 1 && p[1] == 0) e.kind = EventKind::PhotonA;
        else if (p[0] == 1 && p[1] == 1) e.kind = EventKind::PhotonB;
        else throw ParseError("invalid kind/channel", off);
        e.flags = get_le<std::uint16_t>(p + 2);
        e.time_ps = get_le<std::int64_t>(p + 4);
        e.energy_ev = get_f32(p + 12);
        if (e.time_ps < 0) throw ParseError("negative timestamp", off + 4);
        if (!std::isfinite(e.energy_ev)) throw ParseError("non-finite energy", off + 12);
        if (!s.records.empty() && e.time_ps < s.records.back().time_ps) throw ParseError("unsorted record", off);
        s.records.push_back(e);
    }
    return s;
}

std::vector<std::uint8_t> serialize_pixels(const PixelHitStream& s) {
    std::vector<std::uint8_t> out(kPixelMagic, kPixelMagic + 8);
    out.reserve(8 + s.hits.size() * kPixelRecordSize);
    for (std::size_t i = 0; i < s.hits.size(); ++i) {
        const auto& h = s.hits[i];
        if (h.x >= kDetectorPixels || h.y >= kDetectorPixels) throw std::invalid_argument("pixel out of range");
        if (h.time_ps < 0) throw std::invalid_argument("pixel timestamps must be >= 0");
        if (i > 0 && h.time_ps < s.hits[i - 1].time_ps) throw std::invalid_argument("pixel hits must be time-sorted");
    }
    for (const auto& h : s.hits) {
        put_le<std::uint16_t>(out, h.x);
        put_le<std::uint16_t>(out, h.y);
        put_le<std::int64_t>(out, h.time_ps);
    }
    return out;
}

PixelHitStream parse_pixels(std::span<const std::uint8_t> bytes) {
    check_header(bytes, kPixelMagic, kPixelRecordSize);
    PixelHitStream s;
    const std::size_t n = (bytes.size() - 8) / kPixelRecordSize;
    s.hits.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = 8 + i * kPixelRecordSize;
        const std::uint8_t* p = bytes.data() + off;
        PixelHit h{get_le<std::uint16_t>(p), get_le<std::uint16_t>(p + 2), get_le<std::int64_t>(p + 4)};
        if (h.x >= kDetectorPixels || h.y >= kDetectorPixels) throw ParseError("pixel out of range", off);
        if (h.time_ps < 0) throw ParseError("negative timestamp", off + 4);
        if (!s.hits.empty() && h.time_ps < s.hits.back().time_ps) throw ParseError("unsorted record", off);
        s.hits.push_back(h);
    }
    return s;
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed for " + path);
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    f.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(f.tellg());
    f.seekg(0);
    std::vector<std::uint8_t> bytes(size);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    if (!f) throw std::runtime_error("read failed for " + path);
    return bytes;
}

void write_events_csv(std::ostream& os, const EventStream& s) {
    os << "kind,channel,flags,time_ps,energy_ev\n";
    os << std::setprecision(9);
    for (const auto& e : s.records) {
        const int kind = e.kind == EventKind::Electron ? 0 : 1;
        const int channel = e.kind == EventKind::PhotonB ? 1 : 0;
        os << kind << ',' << channel << ',' << e.flags << ',' << e.time_ps << ',' << e.energy_ev << '\n';
    }
}

void write_pixels_csv(std::ostream& os, const PixelHitStream& s) {
    os << "x,y,time_ps\n";
    for (const auto& h : s.hits) os << h.x << ',' << h.y << ',' << h.time_ps << '\n';
}

}  // namespace io

}  // namespace fockherald
