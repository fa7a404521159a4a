#pragma once

#include "reettt/experiment.hpp"
#include "reettt/metrics.hpp"
#include "json.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

namespace reettt {

namespace fs = std::filesystem;

/// Non-finite loss or gradient during training; names the offending batch.
struct DivergenceError : NumericError {
    DivergenceError(std::size_t epoch, std::size_t batch, const std::string& detail);
    std::size_t epoch, batch;
};

/// Model-selection score: mean ETS over lead times at this threshold.
inline constexpr double kSelectionThreshold = 25.0;

// ---------------------------------------------------------------------------
// gen-data

struct GenDataResult {
    fs::path source_manifest;
    fs::path target_manifest;
    std::size_t source_retries = 0;
    std::size_t target_retries = 0;
};

/// Writes `out/source` (train/val/test by ratio) and `out/target`
/// (fine-tune train/val plus held-out test), each with its manifest.json.
GenDataResult cmd_gen_data(const ExperimentConfig& cfg, const fs::path& out_dir, std::ostream& log);

/// Same-seed sequences that pass the coverage filter; returns the number of rejected draws.
std::size_t generate_filtered(const DomainConfig& domain, const DataSection& data, std::uint64_t stream,
                              std::size_t count, std::size_t length, std::vector<RadarSequence>& out);

// ---------------------------------------------------------------------------
// train / adapt

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0;
    std::optional<double> val_loss;
    std::optional<double> val_ets;
};

struct RunRecord {
    std::string kind;  // "train" or "adapt"
    std::uint64_t config_fingerprint = 0;
    std::uint64_t model_fingerprint = 0;
    std::uint64_t seed = 0;
    std::size_t trainable_parameters = 0;
    std::size_t train_windows = 0;
    std::size_t val_windows = 0;
    double initial_train_loss = 0;
    std::optional<double> initial_val_ets;
    std::vector<EpochRecord> history;
    std::size_t selected_epoch = 0;  // 0 = initial parameters
    std::optional<double> criterion; // validation ETS of the selected parameters
    double wall_clock_seconds = 0;
};

/// `timing` false leaves out wall-clock so equal runs serialize identically.
nlohmann::ordered_json to_json(const RunRecord& r, bool timing = true);

RunRecord cmd_train(const ExperimentConfig& cfg, const fs::path& manifest, const fs::path& out_checkpoint,
                    std::ostream& log);

/// Freezes the backbone of `checkpoint` and fine-tunes the adaptation side on
/// the manifest's train split; the initial parameters compete in selection.
RunRecord cmd_adapt(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& manifest,
                    const fs::path& out_checkpoint, std::ostream& log);

// ---------------------------------------------------------------------------
// evaluate / predict / compare

Model load_model(const ExperimentConfig& cfg, const fs::path& checkpoint);

/// Normalized predictions [1,T,1,H,W] for each window, in window order.
std::vector<Tensor> predict_windows(const Model& model, const Dataset& data, const std::vector<WindowRef>& refs,
                                    ForwardMode mode, std::size_t threads = 1);

/// Mean composite loss over a split, no gradients.
double mean_loss(const Model& model, const Dataset& data, Split split, const LossConfig& loss,
                 ForwardMode mode = ForwardMode::ttt_on, std::size_t threads = 1);

MetricReport evaluate_model(const Model& model, const Dataset& data, Split split, ForwardMode mode,
                            std::size_t threads = 1);

MetricReport cmd_evaluate(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& manifest,
                          Split split, ForwardMode mode, std::size_t threads = 1);

/// Predicts frames [start+T, start+2T) of an RSEQ file from frames [start, start+T).
RadarSequence cmd_predict(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& input,
                          std::size_t start, ForwardMode mode);

struct SequenceComparison {
    std::size_t file = 0;
    double wmae_on = 0;
    double wmae_off = 0;
};

struct TTTComparison {
    std::vector<SequenceComparison> sequences;
    std::vector<std::optional<double>> csi_on, csi_off;  // per lead time at 25 dBZ
    double win_rate = 0;  // ties count one half
    std::optional<double> mean_csi_on, mean_csi_off;
    double mean_wmae_on = 0, mean_wmae_off = 0;
    std::optional<double> ets_on, ets_off;
    double frame_interval_minutes = 6.0;
};

TTTComparison compare_ttt(const Model& model, const Dataset& data, Split split, const LossConfig& loss,
                          std::size_t threads = 1);
TTTComparison cmd_compare_ttt(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& manifest,
                              std::size_t threads = 1);

nlohmann::ordered_json to_json(const TTTComparison& c);
/// arm,lead,minutes,csi25 rows: T per arm.
std::string curves_csv(const TTTComparison& c);

void write_json(const nlohmann::ordered_json& j, const fs::path& path);
void write_text(const std::string& text, const fs::path& path);

}  // namespace reettt
