#pragma once

#include "reettt/data.hpp"
#include "reettt/losses.hpp"
#include "reettt/model.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

namespace reettt {

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DataSection {
    std::string source = "A";  // training regime
    std::string target = "B";  // shifted regime, never used for outer training
    std::uint64_t seed = 0;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t sequence_length = 20;
    std::size_t window = 16;  // input + target frames
    std::size_t stride = 2;
    std::size_t source_sequences = 34;
    double train_ratio = 0.64;
    double val_ratio = 0.16;
    double test_ratio = 0.20;
    std::size_t target_test_sequences = 40;
    std::size_t target_finetune_sequences = 20;
    double filter_threshold = 25.0;
    double filter_coverage = 0.05;
    std::size_t filter_min_frames = 2;
    std::size_t max_attempts = 1000;  // per accepted sequence
};

struct TrainingSection {
    std::size_t epochs = 30;
    std::size_t batch_size = 8;
    double lr_initial = 5e-3;
    double lr_final = 1e-4;
    double weight_decay = 1e-2;
    std::uint64_t seed = 0;
};

struct AdaptSection {
    std::size_t epochs = 10;
    std::size_t batch_size = 8;
    double lr_initial = 2e-3;
    double lr_final = 1e-4;
    double weight_decay = 0.0;
};

struct AblationToggles {
    bool no_hffl = false;
    bool no_skip = false;
    bool linear_proj = false;
    bool no_rrdb = false;
};

struct ExperimentConfig {
    DataSection data;
    ModelConfig model;  // steps/height/width are taken from the data section
    LossConfig loss;
    TrainingSection training;
    AdaptSection adapt;
    AblationToggles ablation;

    /// INI text: [data] [model] [ttt] [loss] [training] [adapt] [ablation].
    /// training.seed is mandatory; unknown sections or keys are rejected.
    static ExperimentConfig parse(const std::string& text);
    static ExperimentConfig load(const std::filesystem::path& path);

    void validate() const;
    /// Model configuration with data dimensions and ablation toggles applied.
    ModelConfig effective_model() const;
    LossConfig effective_loss() const;
    DomainConfig source_domain() const { return regime_by_name(data.source); }
    DomainConfig target_domain() const { return regime_by_name(data.target); }

    std::string canonical_text() const;
    std::uint64_t fingerprint() const;
};

}  // namespace reettt
