#pragma once

#include "reettt/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace reettt {

inline constexpr double kMaxDbz = 70.0;

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

/// Dynamics regime of the synthetic echo generator.
struct DomainConfig {
    std::string name;
    std::uint32_t domain_id = 0;
    std::size_t blob_count_min = 1;
    std::size_t blob_count_max = 1;
    Range velocity_x;  // pixels/frame, column direction
    Range velocity_y;  // pixels/frame, row direction
    Range growth;      // dBZ/frame
    Range scale;       // Gaussian sigma in pixels
    Range peak;        // dBZ
    double noise_sigma = 0.0;

    void validate() const;
};

/// Slow advection, mild growth.
DomainConfig regime_a();
/// Fast advection, strong growth, higher peaks.
DomainConfig regime_b();
DomainConfig regime_by_name(const std::string& name);

struct RadarSequence {
    std::size_t steps = 0, height = 0, width = 0;
    std::vector<double> frames;  // steps x height x width, dBZ
    std::uint32_t domain_id = 0;
    std::uint64_t seed = 0;
    double frame_interval_minutes = 6.0;

    double at(std::size_t t, std::size_t y, std::size_t x) const { return frames[(t * height + y) * width + x]; }
};

RadarSequence generate_sequence(const DomainConfig& cfg, std::uint64_t seed, std::size_t steps, std::size_t height,
                                std::size_t width);

/// True iff at least `min_frames` frames have a fraction >= coverage of their
/// pixels at or above `threshold_dbz` (both comparisons inclusive).
bool passes_filter(const RadarSequence& seq, double threshold_dbz = 25.0, double coverage = 0.05,
                   std::size_t min_frames = 2);

/// Start indices of every full window; throws if the sequence is too short.
std::vector<std::size_t> window_starts(std::size_t steps, std::size_t window, std::size_t stride);

/// Input/target halves of one window as normalized [1, T, 1, H, W] tensors.
struct WindowPair {
    Tensor input;
    Tensor target;
};
WindowPair make_window(const RadarSequence& seq, std::size_t start, std::size_t window);

double normalize_dbz(double dbz);
double denormalize_dbz(double unit);
/// dBZ frames -> unit range tensor of `shape`.
Tensor normalize(std::span<const double> dbz, Shape shape);
std::vector<double> denormalize(const Tensor& unit);

// RSEQ: "RSEQ", u16 version, u32 T, H, W, u32 domain_id, u64 seed, then
// T*H*W little-endian float32 values in row-major order.
void save_sequence(const RadarSequence& seq, const std::filesystem::path& path);
RadarSequence load_sequence(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_sequence(const RadarSequence& seq);
RadarSequence decode_sequence(std::span<const std::uint8_t> bytes);

enum class Split { train, val, test };
Split split_from_string(const std::string& s);
std::string to_string(Split s);

struct ManifestEntry {
    std::string path;  // relative to the manifest directory
    std::size_t samples = 0;
    std::uint32_t domain_id = 0;
};

struct DatasetManifest {
    std::vector<ManifestEntry> files;
    std::vector<std::size_t> train, val, test;  // file indices
    std::size_t window = 16;
    std::size_t stride = 2;

    const std::vector<std::size_t>& indices(Split s) const;
    /// Splits must be disjoint and in range.
    void validate() const;
};

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

struct WindowRef {
    std::size_t file = 0;
    std::size_t start = 0;
};

/// A manifest with every referenced sequence loaded.
struct Dataset {
    DatasetManifest manifest;
    std::vector<RadarSequence> sequences;

    static Dataset load(const std::filesystem::path& manifest_path);
    /// Windows never cross file boundaries: each window lives inside one sequence.
    std::vector<WindowRef> windows(Split s) const;
    WindowPair window(const WindowRef& ref) const;
};

}  // namespace reettt
