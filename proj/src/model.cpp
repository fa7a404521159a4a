#include "reettt/model.hpp"

#include "reettt/bytes.hpp"
#include "reettt/data.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <map>
#include <set>

namespace reettt {

namespace {

constexpr char kCkptMagic[4] = {'R', 'T', 'T', 'C'};
constexpr std::uint16_t kCkptVersion = 1;

ConvParams make_conv(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0) {
    return {uniform_init({out, in, 3, 3}, gain * fan_in_bound(in * 9), rng), Tensor({out}, true)};
}

Tensor conv_act(const Tensor& x, const ConvParams& p, std::size_t stride) {
    return gelu(channel_bias(conv2d(x, p.kernel, stride, 1), p.bias));
}

Tensor conv_linear(const Tensor& x, const ConvParams& p) { return channel_bias(conv2d(x, p.kernel, 1, 1), p.bias); }

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

bool starts_with(const std::string& s, std::string_view prefix) { return s.rfind(prefix, 0) == 0; }
bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

ForwardMode mode_from_string(const std::string& s) {
    if (s == "ttt_on") return ForwardMode::ttt_on;
    if (s == "ttt_off") return ForwardMode::ttt_off;
    throw std::invalid_argument("unknown mode '" + s + "' (expected ttt_on or ttt_off)");
}

std::string to_string(ForwardMode m) { return m == ForwardMode::ttt_on ? "ttt_on" : "ttt_off"; }

std::uint64_t fnv1a64(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (steps == 0 || height == 0 || width == 0) fail("empty input dimensions");
    if (channels == 0 || hidden == 0) fail("channel widths must be positive");
    if (down_stages == 0 || down_stages > 8) fail("down_stages must be in [1, 8]");
    const std::size_t f = std::size_t{1} << down_stages;
    if (height % f != 0 || width % f != 0)
        fail("H and W must be divisible by " + std::to_string(f) + " (got " + std::to_string(height) + "x" +
             std::to_string(width) + ")");
    const std::size_t r = ttt.reduction;
    if (r == 0) fail("reduction must be positive");
    if (!ttt.linear_views && (steps * hidden) % r != 0) fail("reduction must divide T*hidden");
    if (use_skip && (steps * channels) % r != 0) fail("reduction must divide T*channels");
    if (!(ttt.inner_lr > 0)) fail("inner_lr must be positive");
    if (ff_multiplier == 0) fail("ff_multiplier must be positive");
    if (use_rrdb) {
        if (sr_features == 0 || sr_growth == 0) fail("SR widths must be positive");
        if (dense_layers < 2) fail("dense_layers must be at least 2");
        if (!std::isfinite(rrdb_beta)) fail("rrdb_beta must be finite");
    }
    if (!std::isfinite(fusion_init) || !std::isfinite(output_bias_init)) fail("init values must be finite");
}

std::string ModelConfig::canonical_text() const {
    std::map<std::string, std::string> kv{
        {"steps", std::to_string(steps)},
        {"height", std::to_string(height)},
        {"width", std::to_string(width)},
        {"channels", std::to_string(channels)},
        {"hidden", std::to_string(hidden)},
        {"down_stages", std::to_string(down_stages)},
        {"blocks", std::to_string(blocks)},
        {"ff_multiplier", std::to_string(ff_multiplier)},
        {"rrdb_count", std::to_string(rrdb_count)},
        {"sr_features", std::to_string(sr_features)},
        {"sr_growth", std::to_string(sr_growth)},
        {"dense_layers", std::to_string(dense_layers)},
        {"rrdb_beta", fmt_double(rrdb_beta)},
        {"fusion_init", fmt_double(fusion_init)},
        {"output_bias_init", fmt_double(output_bias_init)},
        {"use_skip", use_skip ? "true" : "false"},
        {"use_rrdb", use_rrdb ? "true" : "false"},
        {"ttt.inner_lr", fmt_double(ttt.inner_lr)},
        {"ttt.steps_per_token", std::to_string(ttt.steps_per_token)},
        {"ttt.inner_model", to_string(ttt.inner_model)},
        {"ttt.grad_mode", to_string(ttt.grad_mode)},
        {"ttt.linear_views", ttt.linear_views ? "true" : "false"},
        {"ttt.reduction", std::to_string(ttt.reduction)},
        {"ttt.w0_scale", fmt_double(ttt.w0_scale)},
    };
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

std::uint64_t ModelConfig::fingerprint() const { return fnv1a64(canonical_text()); }

std::vector<std::string> fusion_streams(const ModelConfig& c) {
    std::vector<std::string> s{"decoder"};
    if (c.use_skip) s.push_back("skip");
    if (c.use_rrdb) s.push_back("sr");
    return s;
}

// ---------------------------------------------------------------------------
// Parameters

bool is_adaptation_parameter(const std::string& name) {
    if (starts_with(name, "skip.") || starts_with(name, "fusion.")) return true;
    if (starts_with(name, "translator.")) return ends_with(name, ".ttt.w0") || ends_with(name, ".ttt.w0_second");
    if (starts_with(name, "encoder.") || starts_with(name, "decoder.")) return false;
    throw std::invalid_argument("unknown parameter name: " + name);
}

ParameterSet::ParameterSet(std::vector<NamedTensor> entries) : entries_(std::move(entries)) {
    std::set<std::string> seen;
    for (auto& e : entries_) {
        if (!seen.insert(e.name).second) throw std::invalid_argument("duplicate parameter name: " + e.name);
        e.adaptation = is_adaptation_parameter(e.name);
    }
}

const Tensor& ParameterSet::at(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return e.tensor;
    throw std::invalid_argument("unknown parameter name: " + name);
}

std::vector<Tensor> ParameterSet::all() const {
    std::vector<Tensor> out;
    for (const auto& e : entries_) out.push_back(e.tensor);
    return out;
}

std::vector<Tensor> ParameterSet::backbone() const {
    std::vector<Tensor> out;
    for (const auto& e : entries_)
        if (!e.adaptation) out.push_back(e.tensor);
    return out;
}

std::vector<Tensor> ParameterSet::adaptation() const {
    std::vector<Tensor> out;
    for (const auto& e : entries_)
        if (e.adaptation) out.push_back(e.tensor);
    return out;
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    const auto& c = config_;
    Rng rng(seed);

    encoder.push_back(make_conv(1, c.channels, rng));
    for (std::size_t s = 0; s < c.down_stages; ++s)
        encoder.push_back(make_conv(c.channels, s + 1 == c.down_stages ? c.hidden : c.channels, rng));

    const TokenGrid g = c.grid();
    for (std::size_t b = 0; b < c.blocks; ++b)
        blocks.push_back(TTTBlockParams::init(g, c.ff_multiplier * g.features(), c.ttt, rng));

    for (std::size_t s = 0; s < c.down_stages; ++s) {
        const std::size_t in = s == 0 ? c.hidden : c.channels;
        // conv_transpose2d takes the kernel of the adjoint convolution: [in, out, 3, 3].
        decoder.push_back({uniform_init({in, c.channels, 3, 3}, fan_in_bound(in * 9), rng), Tensor({c.channels}, true)});
    }

    if (c.use_rrdb) {
        sr_first = make_conv(c.channels, c.sr_features, rng);
        for (std::size_t r = 0; r < c.rrdb_count; ++r) {
            RRDBParams p;
            for (std::size_t l = 0; l < c.dense_layers; ++l) {
                const std::size_t in = c.sr_features + l * c.sr_growth;
                const bool last = l + 1 == c.dense_layers;
                p.dense.push_back(make_conv(in, last ? c.sr_features : c.sr_growth, rng));
            }
            rrdbs.push_back(std::move(p));
        }
        sr_last = make_conv(c.sr_features, c.channels, rng, 0.1);
    }

    if (c.use_skip) {
        skip_motion = MotionAttentionParams::init(c.channels, rng);
        skip_temporal = TemporalAttentionParams::init(c.steps * c.channels, c.ttt.reduction, rng);
    }

    const std::size_t streams = fusion_streams(c).size();
    fusion_logits = Tensor::full({streams, c.channels}, c.fusion_init);
    fusion_logits.set_requires_grad();
    head = make_conv(c.channels, 1, rng);
    head.bias = Tensor::full({1}, c.output_bias_init);
    head.bias.set_requires_grad();
}

Model::Encoded Model::encode(const Tensor& x) const {
    const auto& c = config_;
    if (x.rank() != 5 || x.dim(1) != c.steps || x.dim(2) != 1 || x.dim(3) != c.height || x.dim(4) != c.width)
        throw ShapeError("encode: expected [B," + std::to_string(c.steps) + ",1," + std::to_string(c.height) + "," +
                         std::to_string(c.width) + "], got " + shape_str(x.shape()));
    const std::size_t b = x.dim(0), bt = b * c.steps;
    Tensor y = conv_act(reshape(x, {bt, 1, c.height, c.width}), encoder[0], 1);
    Encoded e;
    e.low = reshape(y, {b, c.steps, c.channels, c.height, c.width});
    for (std::size_t s = 1; s < encoder.size(); ++s) y = conv_act(y, encoder[s], 2);
    e.latent = reshape(y, {b, c.steps, c.hidden, c.latent_height(), c.latent_width()});
    return e;
}

Tensor Model::translate(const Tensor& h, ForwardMode mode) const {
    if (blocks.empty()) return h;
    const TokenGrid g = config_.grid();
    Tensor x = fold_time(h);
    for (const auto& block : blocks) {
        if (mode == ForwardMode::ttt_on) {
            x = ttt_block(x, g, block);
        } else {
            TTTBlockParams frozen = block;
            frozen.ttt.config.steps_per_token = 0;
            x = ttt_block(x, g, frozen);
        }
    }
    return unfold_time(x, g);
}

Tensor Model::upsample(const Tensor& z) const {
    const auto& c = config_;
    if (z.rank() != 5 || z.dim(1) != c.steps || z.dim(2) != c.hidden)
        throw ShapeError("decode: unexpected latent shape " + shape_str(z.shape()));
    Tensor y = reshape(z, {z.dim(0) * c.steps, c.hidden, c.latent_height(), c.latent_width()});
    for (const auto& stage : decoder) y = gelu(channel_bias(conv_transpose2d(y, stage.kernel, 2, 1, 1), stage.bias));
    return y;
}

Tensor Model::sr_residual(const Tensor& d) const {
    const auto& c = config_;
    Tensor f = conv_linear(d, sr_first);
    for (const auto& block : rrdbs) {
        std::vector<Tensor> feats{f};
        for (std::size_t l = 0; l + 1 < block.dense.size(); ++l) feats.push_back(conv_act(concat(feats, 1), block.dense[l], 1));
        Tensor dense = conv_linear(concat(feats, 1), block.dense.back());
        Tensor rdb = add(f, scale(dense, c.rrdb_beta));
        f = add(f, scale(rdb, c.rrdb_beta));
    }
    return conv_linear(f, sr_last);
}

Tensor Model::fuse(const std::vector<Tensor>& streams, std::size_t batch) const {
    const auto& c = config_;
    if (streams.size() != fusion_logits.dim(0)) throw ShapeError("fuse: stream count does not match fusion logits");
    Tensor w = softmax_columns(fusion_logits);
    Tensor combined;
    for (std::size_t s = 0; s < streams.size(); ++s) {
        if (streams[s].shape() != streams[0].shape()) throw ShapeError("fuse: stream shapes differ");
        Tensor term = channel_weight(streams[s], reshape(slice(w, 0, s, 1), {c.channels}));
        combined = combined.defined() ? add(combined, term) : term;
    }
    Tensor out = clamp(conv_linear(combined, head), 0.0, 1.0);
    return reshape(out, {batch, c.steps, 1, c.height, c.width});
}

Tensor Model::decode(const Tensor& z, const Tensor& skip) const {
    const auto& c = config_;
    const std::size_t b = z.dim(0);
    Tensor d = upsample(z);
    std::vector<Tensor> streams{d};
    if (c.use_skip) {
        if (skip.shape() != Shape{b, c.steps, c.channels, c.height, c.width})
            throw ShapeError("decode: skip stream shape " + shape_str(skip.shape()) + " does not match decoder");
        streams.push_back(reshape(skip, d.shape()));
    }
    if (c.use_rrdb) streams.push_back(sr_residual(d));
    return fuse(streams, b);
}

Tensor Model::forward(const Tensor& x, ForwardMode mode) const {
    Encoded e = encode(x);
    Tensor z = translate(e.latent, mode);
    Tensor skip = config_.use_skip ? skip_branch(e.low, skip_motion, skip_temporal) : Tensor{};
    return decode(z, skip);
}

ParameterSet Model::parameters() const {
    std::vector<NamedTensor> out;
    auto add_p = [&](std::string name, const Tensor& t) { out.push_back({std::move(name), t, false}); };
    auto add_conv = [&](const std::string& prefix, const ConvParams& p) {
        add_p(prefix + ".kernel", p.kernel);
        add_p(prefix + ".bias", p.bias);
    };
    for (std::size_t s = 0; s < encoder.size(); ++s) add_conv("encoder.stage" + std::to_string(s), encoder[s]);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const auto& blk = blocks[b];
        const std::string pre = "translator.block" + std::to_string(b);
        add_p(pre + ".norm1.gamma", blk.norm1_gamma);
        add_p(pre + ".norm1.beta", blk.norm1_beta);
        add_p(pre + ".ttt.theta_k", blk.ttt.theta_k);
        if (blk.ttt.config.linear_views) {
            add_p(pre + ".ttt.theta_v.linear", blk.ttt.theta_v_linear);
            add_p(pre + ".ttt.theta_q.linear", blk.ttt.theta_q_linear);
        } else {
            add_p(pre + ".ttt.theta_v.reduce_w", blk.ttt.theta_v.reduce_w);
            add_p(pre + ".ttt.theta_v.reduce_b", blk.ttt.theta_v.reduce_b);
            add_p(pre + ".ttt.theta_v.expand_w", blk.ttt.theta_v.expand_w);
            add_p(pre + ".ttt.theta_v.expand_b", blk.ttt.theta_v.expand_b);
            add_p(pre + ".ttt.theta_q.kernel", blk.ttt.theta_q.kernel);
            add_p(pre + ".ttt.theta_q.bias", blk.ttt.theta_q.bias);
        }
        add_p(pre + ".ttt.w0", blk.ttt.w0);
        if (blk.ttt.config.inner_model == InnerModel::mlp) add_p(pre + ".ttt.w0_second", blk.ttt.w0_second);
        add_p(pre + ".norm2.gamma", blk.norm2_gamma);
        add_p(pre + ".norm2.beta", blk.norm2_beta);
        add_p(pre + ".ff.w1", blk.ff.w1);
        add_p(pre + ".ff.b1", blk.ff.b1);
        add_p(pre + ".ff.w2", blk.ff.w2);
        add_p(pre + ".ff.b2", blk.ff.b2);
    }
    for (std::size_t s = 0; s < decoder.size(); ++s) add_conv("decoder.up" + std::to_string(s), decoder[s]);
    if (config_.use_rrdb) {
        add_conv("decoder.sr.first", sr_first);
        for (std::size_t r = 0; r < rrdbs.size(); ++r)
            for (std::size_t l = 0; l < rrdbs[r].dense.size(); ++l)
                add_conv("decoder.sr.rrdb" + std::to_string(r) + ".dense" + std::to_string(l), rrdbs[r].dense[l]);
        add_conv("decoder.sr.last", sr_last);
    }
    if (config_.use_skip) {
        add_p("skip.motion.kernel", skip_motion.kernel);
        add_p("skip.motion.bias", skip_motion.bias);
        add_p("skip.temporal.reduce_w", skip_temporal.reduce_w);
        add_p("skip.temporal.reduce_b", skip_temporal.reduce_b);
        add_p("skip.temporal.expand_w", skip_temporal.expand_w);
        add_p("skip.temporal.expand_b", skip_temporal.expand_b);
    }
    add_p("fusion.logits", fusion_logits);
    add_conv("fusion.head", head);
    return ParameterSet(std::move(out));
}

std::vector<Tensor> Model::freeze_backbone() {
    ParameterSet ps = parameters();
    for (auto t : ps.backbone()) {
        t.zero_grad();
        t.set_requires_grad(false);
    }
    return ps.adaptation();
}

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
    const ParameterSet ps = model.parameters();
    std::vector<std::uint8_t> out(kCkptMagic, kCkptMagic + 4);
    put_le<std::uint16_t>(out, kCkptVersion);
    put_le<std::uint64_t>(out, model.config().fingerprint());
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ps.entries().size()));
    for (const auto& e : ps.entries()) {
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.tensor.rank()));
        for (auto d : e.tensor.shape()) put_le<std::uint64_t>(out, d);
        for (double v : e.tensor.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

void decode_checkpoint(std::span<const std::uint8_t> bytes, Model& model) {
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
        if (bytes.size() - pos < n) throw IoError("RTTC: truncated file");
    };
    need(4 + 2 + 8 + 4);
    if (std::memcmp(bytes.data(), kCkptMagic, 4) != 0) throw IoError("RTTC: bad magic");
    pos = 4;
    const auto version = get_le<std::uint16_t>(bytes, pos);
    if (version != kCkptVersion) throw IoError("RTTC: unsupported version " + std::to_string(version));
    const auto fp = get_le<std::uint64_t>(bytes, pos);
    if (fp != model.config().fingerprint())
        throw CheckpointMismatch("RTTC: config fingerprint mismatch (checkpoint was written for another model config)");
    const auto count = get_le<std::uint32_t>(bytes, pos);
    const ParameterSet ps = model.parameters();
    if (count != ps.entries().size()) throw CheckpointMismatch("RTTC: parameter count mismatch");

    // Parse everything before touching the model so a bad file leaves it intact.
    std::map<std::string, std::vector<double>> values;
    for (std::uint32_t r = 0; r < count; ++r) {
        need(4);
        const auto len = get_le<std::uint32_t>(bytes, pos);
        need(len);
        std::string name(reinterpret_cast<const char*>(bytes.data() + pos), len);
        pos += len;
        const Tensor* target = nullptr;
        for (const auto& e : ps.entries())
            if (e.name == name) target = &e.tensor;
        if (!target) throw CheckpointMismatch("RTTC: unknown parameter " + name);
        need(4);
        const auto rank = get_le<std::uint32_t>(bytes, pos);
        if (rank != target->rank()) throw CheckpointMismatch("RTTC: rank mismatch for " + name);
        need(8 * std::size_t{rank});
        for (std::size_t i = 0; i < rank; ++i)
            if (get_le<std::uint64_t>(bytes, pos) != target->dim(i)) throw CheckpointMismatch("RTTC: shape mismatch for " + name);
        need(8 * target->numel());
        std::vector<double> v(target->numel());
        for (auto& x : v) x = std::bit_cast<double>(get_le<std::uint64_t>(bytes, pos));
        if (!values.emplace(name, std::move(v)).second) throw IoError("RTTC: duplicate record " + name);
    }
    if (pos != bytes.size()) throw IoError("RTTC: trailing bytes after records");
    for (const auto& e : ps.entries()) {
        Tensor t = e.tensor;
        const auto& v = values.at(e.name);
        std::copy(v.begin(), v.end(), t.mutable_data().begin());
    }
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) { write_file(path, encode_checkpoint(model)); }

void load_checkpoint(const std::filesystem::path& path, Model& model) { decode_checkpoint(read_file(path), model); }

}  // namespace reettt
