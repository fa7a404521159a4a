#pragma once

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace reettt {

struct ConfusionCounts {
    std::uint64_t hits = 0, misses = 0, false_alarms = 0, correct_negatives = 0, total = 0;

    bool valid() const { return hits + misses + false_alarms + correct_negatives == total; }
    ConfusionCounts& operator+=(const ConfusionCounts& o);
    bool operator==(const ConfusionCounts&) const = default;
};

/// Binarizes both dBZ fields at value >= tau and counts the four cells.
ConfusionCounts confusion(std::span<const double> pred, std::span<const double> target, double tau);

/// Undefined (empty optional) when the denominator vanishes.
std::optional<double> pod(const ConfusionCounts& c);
std::optional<double> far(const ConfusionCounts& c);
std::optional<double> csi(const ConfusionCounts& c);
std::optional<double> ets(const ConfusionCounts& c);

double mse(std::span<const double> pred, std::span<const double> target);

struct SsimConfig {
    std::size_t window = 8;
    double data_range = 70.0;
};

/// Mean SSIM over all window x window positions (stride 1) of one h x w field.
double ssim(std::span<const double> pred, std::span<const double> target, std::size_t h, std::size_t w,
            const SsimConfig& cfg = {});

inline const std::vector<double> kDefaultThresholds{10.0, 25.0, 35.0};

/// Per-sequence scores: one entry per lead time (and per threshold).
struct SampleMetrics {
    std::vector<double> sse;                          // [lead]
    std::vector<double> ssim;                         // [lead]
    std::vector<std::vector<ConfusionCounts>> counts; // [lead][threshold]
    std::size_t pixels = 0;                           // per lead-time frame
};

/// pred, target: T x H x W dBZ values of one sequence.
SampleMetrics score_sample(std::span<const double> pred, std::span<const double> target, std::size_t steps,
                           std::size_t h, std::size_t w, const std::vector<double>& thresholds = kDefaultThresholds,
                           const SsimConfig& ssim_cfg = {});

struct Aggregate {
    std::optional<double> mean;
    std::size_t defined = 0;
    std::size_t excluded = 0;
};

struct ThresholdScores {
    double tau = 0;
    ConfusionCounts counts;
    std::optional<double> pod, far, csi, ets;
};

struct LeadTimeMetrics {
    std::size_t lead = 0;
    double mse = 0;
    double ssim = 0;
    std::vector<ThresholdScores> thresholds;
};

struct ThresholdAggregate {
    double tau = 0;
    Aggregate pod, far, csi, ets;
};

struct MetricReport {
    std::uint64_t fingerprint = 0;
    std::string mode;
    std::size_t samples = 0;
    std::string pooling = "per_lead_time";
    std::vector<LeadTimeMetrics> leads;
    double mean_mse = 0;
    double mean_ssim = 0;
    std::vector<ThresholdAggregate> aggregates;
    nlohmann::ordered_json settings = nlohmann::ordered_json::object();

    const ThresholdAggregate& at_threshold(double tau) const;
};

/// Pools confusion counts per lead time over all samples (in order), averages
/// MSE/SSIM over samples, then averages the defined per-lead scores.
MetricReport build_report(const std::vector<SampleMetrics>& samples,
                          const std::vector<double>& thresholds = kDefaultThresholds);

nlohmann::ordered_json to_json(const MetricReport& r);
MetricReport report_from_json(const nlohmann::ordered_json& j);

}  // namespace reettt
