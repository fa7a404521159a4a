#pragma once

#include "reettt/attention.hpp"
#include "reettt/ttt.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace reettt {

enum class ForwardMode { ttt_on, ttt_off };

/// Checkpoint written for a different configuration, or naming unknown tensors.
struct CheckpointMismatch : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

ForwardMode mode_from_string(const std::string& s);
std::string to_string(ForwardMode m);

struct ModelConfig {
    std::size_t steps = 8;  // input and output frames
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t channels = 8;     // encoder/decoder width C
    std::size_t hidden = 8;       // translator token width d
    std::size_t down_stages = 2;  // stride-2 stages
    std::size_t blocks = 2;
    std::size_t ff_multiplier = 2;
    std::size_t rrdb_count = 2;
    std::size_t sr_features = 8;
    std::size_t sr_growth = 8;
    std::size_t dense_layers = 3;
    double rrdb_beta = 0.2;
    double fusion_init = 0.0;  // initial logit of every stream
    double output_bias_init = 0.1;
    bool use_skip = true;
    bool use_rrdb = true;
    TTTConfig ttt;

    void validate() const;
    std::size_t latent_height() const { return height >> down_stages; }
    std::size_t latent_width() const { return width >> down_stages; }
    TokenGrid grid() const { return {steps, hidden, latent_height(), latent_width()}; }
    /// Sorted key=value lines of every field; input to the fingerprint.
    std::string canonical_text() const;
    std::uint64_t fingerprint() const;
};

std::uint64_t fnv1a64(std::string_view text);

struct ConvParams {
    Tensor kernel;  // [O, C, 3, 3]
    Tensor bias;    // [O]
};

struct RRDBParams {
    std::vector<ConvParams> dense;  // layer l: F + l*G -> G, last: F + (L-1)*G -> F
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
    bool adaptation = false;
};

/// Named view of every learnable tensor, split into backbone and the
/// adaptation side (skip branch, fusion, inner-model initialization).
class ParameterSet {
public:
    explicit ParameterSet(std::vector<NamedTensor> entries);

    const std::vector<NamedTensor>& entries() const { return entries_; }
    const Tensor& at(const std::string& name) const;
    std::vector<Tensor> all() const;
    std::vector<Tensor> backbone() const;
    std::vector<Tensor> adaptation() const;
    std::size_t scalar_count() const;

private:
    std::vector<NamedTensor> entries_;
};

/// Whether a parameter name belongs to the adaptation side. Throws
/// std::invalid_argument for names outside the known namespaces.
bool is_adaptation_parameter(const std::string& name);

class Model {
public:
    Model(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }

    struct Encoded {
        Tensor latent;  // [B,T,C',H',W']
        Tensor low;     // [B,T,C,H,W], first-stage features
    };
    Encoded encode(const Tensor& x) const;
    Tensor translate(const Tensor& h, ForwardMode mode) const;
    /// Decoder upsampling path only: [B,T,C',H',W'] -> [B*T,C,H,W].
    Tensor upsample(const Tensor& z) const;
    /// Super-resolution residual of the upsampled stream, [B*T,C,H,W].
    Tensor sr_residual(const Tensor& d) const;
    /// Softmax-weighted channel fusion of the active streams, then the output head.
    Tensor fuse(const std::vector<Tensor>& streams, std::size_t batch) const;
    Tensor decode(const Tensor& z, const Tensor& skip) const;
    /// x[B,T,1,H,W] normalized -> prediction[B,T,1,H,W] in [0,1].
    Tensor forward(const Tensor& x, ForwardMode mode) const;

    ParameterSet parameters() const;
    /// Stops gradients for every backbone tensor; returns the adaptation subset.
    std::vector<Tensor> freeze_backbone();

    // Exposed for tests and tooling.
    std::vector<ConvParams> encoder;
    std::vector<TTTBlockParams> blocks;
    std::vector<ConvParams> decoder;
    ConvParams sr_first, sr_last;
    std::vector<RRDBParams> rrdbs;
    MotionAttentionParams skip_motion;
    TemporalAttentionParams skip_temporal;
    Tensor fusion_logits;  // [streams, C]
    ConvParams head;       // C -> 1

private:
    ModelConfig config_;
};

/// Stream order inside the fusion logits.
std::vector<std::string> fusion_streams(const ModelConfig& c);

std::vector<std::uint8_t> encode_checkpoint(const Model& model);
void decode_checkpoint(std::span<const std::uint8_t> bytes, Model& model);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
void load_checkpoint(const std::filesystem::path& path, Model& model);

}  // namespace reettt
