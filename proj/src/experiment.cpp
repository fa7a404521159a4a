#include "reettt/experiment.hpp"

#include "reettt/bytes.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

namespace reettt {

namespace pt = boost::property_tree;

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt(bool v) { return v ? "true" : "false"; }

// Reads typed values out of the INI tree and remembers which keys were used,
// so leftovers can be reported as unknown.
class Reader {
public:
    explicit Reader(const pt::ptree& tree) : tree_(tree) {}

    const std::string* raw(const std::string& section, const std::string& key) {
        used_.insert(section + "." + key);
        auto s = tree_.get_child_optional(section);
        if (!s) return nullptr;
        auto v = s->get_child_optional(key);
        if (!v) return nullptr;
        return &v->data();
    }

    void get(const std::string& section, const std::string& key, std::string& out) {
        if (auto r = raw(section, key)) out = *r;
    }

    void get(const std::string& section, const std::string& key, double& out) {
        if (auto r = raw(section, key)) {
            std::size_t pos = 0;
            try {
                out = std::stod(*r, &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            if (pos == 0 || pos != r->size() || !std::isfinite(out))
                throw ConfigError(section + "." + key + ": expected a number, got '" + *r + "'");
        }
    }

    template <typename U>
        requires std::is_unsigned_v<U>
    void get(const std::string& section, const std::string& key, U& out) {
        if (auto r = raw(section, key)) {
            U v{};
            auto [ptr, ec] = std::from_chars(r->data(), r->data() + r->size(), v);
            if (ec != std::errc() || ptr != r->data() + r->size() || r->empty())
                throw ConfigError(section + "." + key + ": expected a non-negative integer, got '" + *r + "'");
            out = v;
        }
    }

    void get(const std::string& section, const std::string& key, bool& out) {
        if (auto r = raw(section, key)) {
            if (*r == "true" || *r == "1")
                out = true;
            else if (*r == "false" || *r == "0")
                out = false;
            else
                throw ConfigError(section + "." + key + ": expected true or false, got '" + *r + "'");
        }
    }

    void reject_unknown() const {
        static const std::set<std::string> sections{"data", "model", "ttt", "loss", "training", "adapt", "ablation"};
        for (const auto& [section, body] : tree_) {
            if (body.empty() && !body.data().empty()) throw ConfigError("key '" + section + "' outside of any section");
            if (!sections.count(section)) throw ConfigError("unknown config section [" + section + "]");
            for (const auto& [key, value] : body)
                if (!used_.count(section + "." + key)) throw ConfigError("unknown config key " + section + "." + key);
        }
    }

private:
    const pt::ptree& tree_;
    std::set<std::string> used_;
};

InnerModel inner_model_from(const std::string& s) {
    if (s == "linear") return InnerModel::linear;
    if (s == "mlp") return InnerModel::mlp;
    throw ConfigError("ttt.inner_model: expected linear or mlp, got '" + s + "'");
}

InnerGradMode grad_mode_from(const std::string& s) {
    if (s == "unrolled") return InnerGradMode::unrolled;
    if (s == "stop_gradient") return InnerGradMode::stop_gradient;
    throw ConfigError("ttt.grad_mode: expected unrolled or stop_gradient, got '" + s + "'");
}

}  // namespace

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::ini_parser::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config syntax: ") + e.what());
    }
    ExperimentConfig c;
    Reader r(tree);

    auto& d = c.data;
    r.get("data", "source", d.source);
    r.get("data", "target", d.target);
    r.get("data", "seed", d.seed);
    r.get("data", "height", d.height);
    r.get("data", "width", d.width);
    r.get("data", "sequence_length", d.sequence_length);
    r.get("data", "window", d.window);
    r.get("data", "stride", d.stride);
    r.get("data", "source_sequences", d.source_sequences);
    r.get("data", "train_ratio", d.train_ratio);
    r.get("data", "val_ratio", d.val_ratio);
    r.get("data", "test_ratio", d.test_ratio);
    r.get("data", "target_test_sequences", d.target_test_sequences);
    r.get("data", "target_finetune_sequences", d.target_finetune_sequences);
    r.get("data", "filter_threshold", d.filter_threshold);
    r.get("data", "filter_coverage", d.filter_coverage);
    r.get("data", "filter_min_frames", d.filter_min_frames);
    r.get("data", "max_attempts", d.max_attempts);

    auto& m = c.model;
    r.get("model", "channels", m.channels);
    r.get("model", "hidden", m.hidden);
    r.get("model", "down_stages", m.down_stages);
    r.get("model", "blocks", m.blocks);
    r.get("model", "ff_multiplier", m.ff_multiplier);
    r.get("model", "rrdb_count", m.rrdb_count);
    r.get("model", "sr_features", m.sr_features);
    r.get("model", "sr_growth", m.sr_growth);
    r.get("model", "dense_layers", m.dense_layers);
    r.get("model", "rrdb_beta", m.rrdb_beta);
    r.get("model", "fusion_init", m.fusion_init);
    r.get("model", "output_bias_init", m.output_bias_init);

    r.get("ttt", "inner_lr", m.ttt.inner_lr);
    r.get("ttt", "steps_per_token", m.ttt.steps_per_token);
    r.get("ttt", "reduction", m.ttt.reduction);
    r.get("ttt", "w0_scale", m.ttt.w0_scale);
    std::string inner = to_string(m.ttt.inner_model), grad = to_string(m.ttt.grad_mode);
    r.get("ttt", "inner_model", inner);
    r.get("ttt", "grad_mode", grad);
    m.ttt.inner_model = inner_model_from(inner);
    m.ttt.grad_mode = grad_mode_from(grad);

    auto& l = c.loss;
    r.get("loss", "alpha", l.alpha);
    r.get("loss", "lambda", l.lambda);
    r.get("loss", "weight_base", l.weight_base);
    r.get("loss", "weight_cap", l.weight_cap);
    r.get("loss", "radial_cutoff", l.radial_cutoff);
    std::string mask = to_string(l.mask);
    r.get("loss", "mask", mask);
    try {
        l.mask = mask_from_string(mask);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("loss.mask: ") + e.what());
    }

    auto& t = c.training;
    r.get("training", "epochs", t.epochs);
    r.get("training", "batch_size", t.batch_size);
    r.get("training", "lr_initial", t.lr_initial);
    r.get("training", "lr_final", t.lr_final);
    r.get("training", "weight_decay", t.weight_decay);
    if (!r.raw("training", "seed")) throw ConfigError("training.seed is required");
    r.get("training", "seed", t.seed);

    auto& a = c.adapt;
    r.get("adapt", "epochs", a.epochs);
    r.get("adapt", "batch_size", a.batch_size);
    r.get("adapt", "lr_initial", a.lr_initial);
    r.get("adapt", "lr_final", a.lr_final);
    r.get("adapt", "weight_decay", a.weight_decay);

    r.get("ablation", "no_hffl", c.ablation.no_hffl);
    r.get("ablation", "no_skip", c.ablation.no_skip);
    r.get("ablation", "linear_proj", c.ablation.linear_proj);
    r.get("ablation", "no_rrdb", c.ablation.no_rrdb);

    r.reject_unknown();
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return parse(std::string(bytes.begin(), bytes.end()));
}

void ExperimentConfig::validate() const {
    const auto& d = data;
    try {
        regime_by_name(d.source);
        regime_by_name(d.target);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("data: ") + e.what());
    }
    for (double r : {d.train_ratio, d.val_ratio, d.test_ratio})
        if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("data: split ratios must lie in [0, 1]");
    if (std::fabs(d.train_ratio + d.val_ratio + d.test_ratio - 1.0) > 1e-9)
        throw ConfigError("data: split ratios must sum to 1");
    if (d.window == 0 || d.window % 2) throw ConfigError("data.window must be even and positive");
    if (d.stride == 0) throw ConfigError("data.stride must be positive");
    if (d.sequence_length < d.window) throw ConfigError("data.sequence_length shorter than data.window");
    if (d.source_sequences == 0) throw ConfigError("data.source_sequences must be positive");
    if (!(d.filter_coverage >= 0.0 && d.filter_coverage <= 1.0))
        throw ConfigError("data.filter_coverage must lie in [0, 1]");
    if (d.max_attempts == 0) throw ConfigError("data.max_attempts must be positive");
    if (training.batch_size == 0 || adapt.batch_size == 0) throw ConfigError("batch_size must be positive");
    for (double lr : {training.lr_initial, training.lr_final, adapt.lr_initial, adapt.lr_final})
        if (!(lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (!(training.weight_decay >= 0.0 && adapt.weight_decay >= 0.0))
        throw ConfigError("weight_decay must be non-negative");
    try {
        effective_model().validate();
        effective_loss().validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

ModelConfig ExperimentConfig::effective_model() const {
    ModelConfig m = model;
    m.steps = data.window / 2;
    m.height = data.height;
    m.width = data.width;
    if (ablation.no_skip) m.use_skip = false;
    if (ablation.no_rrdb) m.use_rrdb = false;
    if (ablation.linear_proj) m.ttt.linear_views = true;
    return m;
}

LossConfig ExperimentConfig::effective_loss() const {
    LossConfig l = loss;
    if (ablation.no_hffl) l.lambda = 0.0;
    return l;
}

std::string ExperimentConfig::canonical_text() const {
    const auto& d = data;
    std::map<std::string, std::string> kv{
        {"data.source", d.source},
        {"data.target", d.target},
        {"data.seed", std::to_string(d.seed)},
        {"data.height", std::to_string(d.height)},
        {"data.width", std::to_string(d.width)},
        {"data.sequence_length", std::to_string(d.sequence_length)},
        {"data.window", std::to_string(d.window)},
        {"data.stride", std::to_string(d.stride)},
        {"data.source_sequences", std::to_string(d.source_sequences)},
        {"data.train_ratio", fmt(d.train_ratio)},
        {"data.val_ratio", fmt(d.val_ratio)},
        {"data.test_ratio", fmt(d.test_ratio)},
        {"data.target_test_sequences", std::to_string(d.target_test_sequences)},
        {"data.target_finetune_sequences", std::to_string(d.target_finetune_sequences)},
        {"data.filter_threshold", fmt(d.filter_threshold)},
        {"data.filter_coverage", fmt(d.filter_coverage)},
        {"data.filter_min_frames", std::to_string(d.filter_min_frames)},
        {"data.max_attempts", std::to_string(d.max_attempts)},
        {"loss.alpha", fmt(loss.alpha)},
        {"loss.lambda", fmt(loss.lambda)},
        {"loss.weight_base", fmt(loss.weight_base)},
        {"loss.weight_cap", fmt(loss.weight_cap)},
        {"loss.radial_cutoff", fmt(loss.radial_cutoff)},
        {"loss.mask", to_string(loss.mask)},
        {"training.epochs", std::to_string(training.epochs)},
        {"training.batch_size", std::to_string(training.batch_size)},
        {"training.lr_initial", fmt(training.lr_initial)},
        {"training.lr_final", fmt(training.lr_final)},
        {"training.weight_decay", fmt(training.weight_decay)},
        {"training.seed", std::to_string(training.seed)},
        {"adapt.epochs", std::to_string(adapt.epochs)},
        {"adapt.batch_size", std::to_string(adapt.batch_size)},
        {"adapt.lr_initial", fmt(adapt.lr_initial)},
        {"adapt.lr_final", fmt(adapt.lr_final)},
        {"adapt.weight_decay", fmt(adapt.weight_decay)},
        {"ablation.no_hffl", fmt(ablation.no_hffl)},
        {"ablation.no_skip", fmt(ablation.no_skip)},
        {"ablation.linear_proj", fmt(ablation.linear_proj)},
        {"ablation.no_rrdb", fmt(ablation.no_rrdb)},
    };
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    std::istringstream model_lines(model.canonical_text());
    for (std::string line; std::getline(model_lines, line);) out += "model." + line + "\n";
    return out;
}

std::uint64_t ExperimentConfig::fingerprint() const { return fnv1a64(canonical_text()); }

}  // namespace reettt
