// Detection records shared by every stage: the time-ordered event stream,
// raw pixel hits, and the binary/CSV formats they are stored in.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fockherald {

enum class EventKind : std::uint8_t { Electron = 0, PhotonA = 1, PhotonB = 2 };

namespace event_flags {
constexpr std::uint16_t kDark = 0x1;         // simulated detector dark count
constexpr std::uint16_t kClipped = 0x2;      // energy mapped outside the detector, clipped
constexpr std::uint16_t kDriftReused = 0x4;  // drift offset reused from a previous window
}  // namespace event_flags

struct Event {
    std::int64_t time_ps = 0;
    float energy_ev = 0.0f;  // electrons only; 0 for photons
    EventKind kind = EventKind::Electron;
    std::uint16_t flags = 0;

    bool operator==(const Event&) const = default;
};

// Events sorted by (time, kind).
struct EventStream {
    std::vector<Event> records;
    bool operator==(const EventStream&) const = default;
};

bool event_order(const Event& a, const Event& b);
bool is_sorted(const EventStream& s);

// Column-oriented view of an event stream, the layout the correlator works on.
struct SplitStream {
    std::vector<std::int64_t> electron_t;
    std::vector<float> electron_e;
    std::vector<std::int64_t> photon_a;
    std::vector<std::int64_t> photon_b;
};

SplitStream split(const EventStream& s);
EventStream merge(const SplitStream& s);

struct PixelHit {
    std::uint16_t x = 0;
    std::uint16_t y = 0;
    std::int64_t time_ps = 0;
    bool operator==(const PixelHit&) const = default;
};

struct PixelHitStream {
    std::vector<PixelHit> hits;
    bool operator==(const PixelHitStream&) const = default;
};

constexpr int kDetectorPixels = 514;

// Structured parse failure carrying the byte offset of the problem.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " at byte " + std::to_string(offset)), offset_(offset) {}
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

namespace io {

constexpr char kEventMagic[8] = {'E', 'H', 'P', 'E', 'V', 'T', '0', '1'};
constexpr char kPixelMagic[8] = {'E', 'H', 'P', 'P', 'I', 'X', '0', '1'};
constexpr std::size_t kEventRecordSize = 16;
constexpr std::size_t kPixelRecordSize = 12;

std::vector<std::uint8_t> serialize_events(const EventStream& s);
EventStream parse_events(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> serialize_pixels(const PixelHitStream& s);
PixelHitStream parse_pixels(std::span<const std::uint8_t> bytes);

void write_file(const std::string& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::string& path);

void write_events_csv(std::ostream& os, const EventStream& s);
void write_pixels_csv(std::ostream& os, const PixelHitStream& s);

}  // namespace io

}  // namespace fockherald
