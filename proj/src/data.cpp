#include "reettt/data.hpp"

#include "reettt/bytes.hpp"
#include "reettt/random.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

namespace reettt {

namespace {

constexpr char kSeqMagic[4] = {'R', 'S', 'E', 'Q'};
constexpr std::uint16_t kSeqVersion = 1;
constexpr std::size_t kSeqHeader = 4 + 2 + 4 * 4 + 8;
// Guards against absurd headers before any allocation.
constexpr std::uint64_t kMaxSeqValues = std::uint64_t{1} << 31;

void check_range(const Range& r, const char* what) {
    if (!(r.lo <= r.hi) || !std::isfinite(r.lo) || !std::isfinite(r.hi))
        throw std::invalid_argument(std::string("domain config: empty range for ") + what);
}

}  // namespace

void DomainConfig::validate() const {
    if (blob_count_min > blob_count_max) throw std::invalid_argument("domain config: empty blob count range");
    check_range(velocity_x, "velocity_x");
    check_range(velocity_y, "velocity_y");
    check_range(growth, "growth");
    check_range(scale, "scale");
    check_range(peak, "peak");
    if (scale.lo <= 0) throw std::invalid_argument("domain config: blob scale must be positive");
    if (peak.hi > kMaxDbz || peak.lo < 0) throw std::invalid_argument("domain config: peak intensity outside 0-70 dBZ");
    if (noise_sigma < 0) throw std::invalid_argument("domain config: negative noise");
}

DomainConfig regime_a() {
    DomainConfig c;
    c.name = "A";
    c.domain_id = 0;
    c.blob_count_min = 2;
    c.blob_count_max = 4;
    c.velocity_x = {-0.8, 0.8};
    c.velocity_y = {-0.8, 0.8};
    c.growth = {-0.5, 0.5};
    c.scale = {3.0, 6.0};
    c.peak = {35.0, 50.0};
    c.noise_sigma = 1.0;
    return c;
}

DomainConfig regime_b() {
    DomainConfig c;
    c.name = "B";
    c.domain_id = 1;
    c.blob_count_min = 3;
    c.blob_count_max = 5;
    c.velocity_x = {1.2, 2.2};
    c.velocity_y = {-1.2, 1.2};
    c.growth = {-1.5, 2.0};
    c.scale = {2.5, 5.0};
    c.peak = {45.0, 65.0};
    c.noise_sigma = 1.5;
    return c;
}

DomainConfig regime_by_name(const std::string& name) {
    if (name == "A" || name == "a") return regime_a();
    if (name == "B" || name == "b") return regime_b();
    throw std::invalid_argument("unknown regime '" + name + "'");
}

RadarSequence generate_sequence(const DomainConfig& cfg, std::uint64_t seed, std::size_t steps, std::size_t height,
                                std::size_t width) {
    cfg.validate();
    if (steps == 0 || height == 0 || width == 0) throw std::invalid_argument("generate_sequence: empty dimensions");

    struct Blob {
        double x0, y0, vx, vy, peak, growth, inv_a, inv_b, cos_t, sin_t;
    };
    Rng rng(seed);
    const auto count = rng.integer(cfg.blob_count_min, cfg.blob_count_max);
    std::vector<Blob> blobs;
    const double half = 0.5 * static_cast<double>(steps - 1);
    for (std::uint64_t i = 0; i < count; ++i) {
        Blob b{};
        b.vx = rng.uniform(cfg.velocity_x.lo, cfg.velocity_x.hi);
        b.vy = rng.uniform(cfg.velocity_y.lo, cfg.velocity_y.hi);
        // Place the blob inside the domain at mid-sequence so it crosses the field.
        const double xm = rng.uniform(0.2, 0.8) * static_cast<double>(width - 1);
        const double ym = rng.uniform(0.2, 0.8) * static_cast<double>(height - 1);
        b.x0 = xm - b.vx * half;
        b.y0 = ym - b.vy * half;
        b.peak = rng.uniform(cfg.peak.lo, cfg.peak.hi);
        b.growth = rng.uniform(cfg.growth.lo, cfg.growth.hi);
        const double sa = rng.uniform(cfg.scale.lo, cfg.scale.hi);
        const double sb = rng.uniform(cfg.scale.lo, cfg.scale.hi);
        b.inv_a = 1.0 / (sa * sa);
        b.inv_b = 1.0 / (sb * sb);
        const double theta = rng.uniform(0.0, std::numbers::pi);
        b.cos_t = std::cos(theta);
        b.sin_t = std::sin(theta);
        blobs.push_back(b);
    }

    RadarSequence seq;
    seq.steps = steps;
    seq.height = height;
    seq.width = width;
    seq.domain_id = cfg.domain_id;
    seq.seed = seed;
    seq.frames.assign(steps * height * width, 0.0);
    for (std::size_t t = 0; t < steps; ++t) {
        const double tt = static_cast<double>(t);
        for (const auto& b : blobs) {
            const double amp = std::clamp(b.peak + b.growth * tt, 0.0, kMaxDbz);
            const double cx = b.x0 + b.vx * tt, cy = b.y0 + b.vy * tt;
            for (std::size_t y = 0; y < height; ++y)
                for (std::size_t x = 0; x < width; ++x) {
                    const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
                    const double u = b.cos_t * dx + b.sin_t * dy, v = -b.sin_t * dx + b.cos_t * dy;
                    seq.frames[(t * height + y) * width + x] += amp * std::exp(-0.5 * (u * u * b.inv_a + v * v * b.inv_b));
                }
        }
    }
    for (auto& v : seq.frames) {
        if (cfg.noise_sigma > 0) v += cfg.noise_sigma * rng.normal();
        v = std::clamp(v, 0.0, kMaxDbz);
    }
    return seq;
}

bool passes_filter(const RadarSequence& seq, double threshold_dbz, double coverage, std::size_t min_frames) {
    const std::size_t hw = seq.height * seq.width;
    if (hw == 0) return false;
    // Integer form of count / hw >= coverage, tolerant to the decimal representation of coverage.
    const double needed = std::ceil(coverage * static_cast<double>(hw) - 1e-9);
    std::size_t covered = 0;
    for (std::size_t t = 0; t < seq.steps; ++t) {
        std::size_t count = 0;
        for (std::size_t p = 0; p < hw; ++p) count += seq.frames[t * hw + p] >= threshold_dbz;
        if (static_cast<double>(count) >= needed) ++covered;
    }
    return covered >= min_frames;
}

std::vector<std::size_t> window_starts(std::size_t steps, std::size_t window, std::size_t stride) {
    if (stride == 0) throw std::invalid_argument("sliding windows: stride must be >= 1");
    if (window == 0 || window % 2 != 0) throw std::invalid_argument("sliding windows: window must be even and positive");
    if (steps < window)
        throw std::invalid_argument("sliding windows: sequence of " + std::to_string(steps) +
                                    " frames is shorter than window " + std::to_string(window));
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s + window <= steps; s += stride) starts.push_back(s);
    return starts;
}

double normalize_dbz(double dbz) {
    if (!(dbz >= 0.0 && dbz <= kMaxDbz)) throw std::invalid_argument("normalize: value outside 0-70 dBZ");
    return dbz / kMaxDbz;
}

double denormalize_dbz(double unit) { return unit * kMaxDbz; }

Tensor normalize(std::span<const double> dbz, Shape shape) {
    std::vector<double> out(dbz.size());
    for (std::size_t i = 0; i < dbz.size(); ++i) out[i] = normalize_dbz(dbz[i]);
    return Tensor(std::move(shape), std::move(out));
}

std::vector<double> denormalize(const Tensor& unit) {
    std::vector<double> out(unit.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = denormalize_dbz(unit.at(i));
    return out;
}

WindowPair make_window(const RadarSequence& seq, std::size_t start, std::size_t window) {
    if (start + window > seq.steps) throw std::invalid_argument("window exceeds sequence");
    const std::size_t half = window / 2, hw = seq.height * seq.width;
    std::span<const double> all(seq.frames);
    Shape shape{1, half, 1, seq.height, seq.width};
    return {normalize(all.subspan(start * hw, half * hw), shape),
            normalize(all.subspan((start + half) * hw, half * hw), shape)};
}

// ---------------------------------------------------------------------------
// RSEQ

std::vector<std::uint8_t> encode_sequence(const RadarSequence& seq) {
    if (seq.frames.size() != seq.steps * seq.height * seq.width) throw IoError("RSEQ: frame buffer size mismatch");
    for (auto d : {seq.steps, seq.height, seq.width})
        if (d > std::numeric_limits<std::uint32_t>::max()) throw IoError("RSEQ: dimension overflow");
    std::vector<std::uint8_t> out(kSeqMagic, kSeqMagic + 4);
    out.reserve(kSeqHeader + 4 * seq.frames.size());
    put_le<std::uint16_t>(out, kSeqVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(seq.steps));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(seq.height));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(seq.width));
    put_le<std::uint32_t>(out, seq.domain_id);
    put_le<std::uint64_t>(out, seq.seed);
    for (double v : seq.frames) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    return out;
}

RadarSequence decode_sequence(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kSeqHeader) throw IoError("RSEQ: truncated header");
    if (std::memcmp(bytes.data(), kSeqMagic, 4) != 0) throw IoError("RSEQ: bad magic");
    std::size_t pos = 4;
    const auto version = get_le<std::uint16_t>(bytes, pos);
    if (version != kSeqVersion) throw IoError("RSEQ: unsupported version " + std::to_string(version));
    RadarSequence seq;
    seq.steps = get_le<std::uint32_t>(bytes, pos);
    seq.height = get_le<std::uint32_t>(bytes, pos);
    seq.width = get_le<std::uint32_t>(bytes, pos);
    seq.domain_id = get_le<std::uint32_t>(bytes, pos);
    seq.seed = get_le<std::uint64_t>(bytes, pos);
    const std::uint64_t count = std::uint64_t{seq.steps} * seq.height * seq.width;
    if (seq.steps && seq.height && count / seq.steps / seq.height != seq.width) throw IoError("RSEQ: dimension overflow");
    if (count > kMaxSeqValues) throw IoError("RSEQ: dimension overflow");
    if (bytes.size() - kSeqHeader < 4 * count) throw IoError("RSEQ: truncated payload");
    if (bytes.size() - kSeqHeader > 4 * count) throw IoError("RSEQ: trailing bytes after payload");
    seq.frames.resize(count);
    for (auto& v : seq.frames) v = std::bit_cast<float>(get_le<std::uint32_t>(bytes, pos));
    for (double v : seq.frames)
        if (!(v >= 0.0 && v <= kMaxDbz)) throw IoError("RSEQ: value outside 0-70 dBZ");
    return seq;
}

void save_sequence(const RadarSequence& seq, const std::filesystem::path& path) {
    write_file(path, encode_sequence(seq));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

RadarSequence load_sequence(const std::filesystem::path& path) { return decode_sequence(read_file(path)); }

// ---------------------------------------------------------------------------
// Manifest

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw std::invalid_argument("unknown split '" + s + "'");
}

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

const std::vector<std::size_t>& DatasetManifest::indices(Split s) const {
    switch (s) {
        case Split::train: return train;
        case Split::val: return val;
        default: return test;
    }
}

void DatasetManifest::validate() const {
    std::set<std::size_t> seen;
    for (const auto* split : {&train, &val, &test})
        for (std::size_t i : *split) {
            if (i >= files.size()) throw std::invalid_argument("manifest: split index out of range");
            if (!seen.insert(i).second) throw std::invalid_argument("manifest: file assigned to two splits");
        }
    if (stride == 0 || window == 0 || window % 2) throw std::invalid_argument("manifest: bad window/stride");
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["window"] = m.window;
    j["stride"] = m.stride;
    j["files"] = nlohmann::ordered_json::array();
    for (const auto& f : m.files)
        j["files"].push_back({{"path", f.path}, {"samples", f.samples}, {"domain_id", f.domain_id}});
    j["splits"] = {{"train", m.train}, {"val", m.val}, {"test", m.test}};
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    DatasetManifest m;
    try {
        auto j = nlohmann::json::parse(in);
        m.window = j.at("window").get<std::size_t>();
        m.stride = j.at("stride").get<std::size_t>();
        for (const auto& f : j.at("files"))
            m.files.push_back({f.at("path").get<std::string>(), f.at("samples").get<std::size_t>(),
                               f.at("domain_id").get<std::uint32_t>()});
        m.train = j.at("splits").at("train").get<std::vector<std::size_t>>();
        m.val = j.at("splits").at("val").get<std::vector<std::size_t>>();
        m.test = j.at("splits").at("test").get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest " + path.string() + ": " + e.what());
    }
    m.validate();
    return m;
}

Dataset Dataset::load(const std::filesystem::path& manifest_path) {
    Dataset d;
    d.manifest = load_manifest(manifest_path);
    const auto dir = manifest_path.parent_path();
    for (const auto& f : d.manifest.files) d.sequences.push_back(load_sequence(dir / f.path));
    return d;
}

std::vector<WindowRef> Dataset::windows(Split s) const {
    std::vector<WindowRef> out;
    for (std::size_t file : manifest.indices(s))
        for (std::size_t start : window_starts(sequences[file].steps, manifest.window, manifest.stride))
            out.push_back({file, start});
    return out;
}

WindowPair Dataset::window(const WindowRef& ref) const {
    return make_window(sequences.at(ref.file), ref.start, manifest.window);
}

}  // namespace reettt
