#include "reettt/harness.hpp"

#include "reettt/bytes.hpp"
#include "reettt/optim.hpp"
#include "reettt/random.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <ostream>
#include <thread>

namespace reettt {

using nlohmann::ordered_json;

DivergenceError::DivergenceError(std::size_t e, std::size_t b, const std::string& detail)
    : NumericError("training diverged at epoch " + std::to_string(e) + ", batch " + std::to_string(b) + ": " +
                   detail),
      epoch(e),
      batch(b) {}

namespace {

constexpr std::uint64_t kSourceStream = 0;
constexpr std::uint64_t kTargetStream = 1;

ordered_json opt(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

std::string seq_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "seq_%04zu.rseq", i);
    return buf;
}

void make_dirs(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

fs::path write_split_set(const fs::path& dir, const std::vector<RadarSequence>& seqs, std::size_t n_train,
                         std::size_t n_val, const DataSection& d) {
    make_dirs(dir);
    DatasetManifest m;
    m.window = d.window;
    m.stride = d.stride;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        const auto name = seq_name(i);
        save_sequence(seqs[i], dir / name);
        m.files.push_back({name, window_starts(seqs[i].steps, d.window, d.stride).size(), seqs[i].domain_id});
        auto& split = i < n_train ? m.train : i < n_train + n_val ? m.val : m.test;
        split.push_back(i);
    }
    m.validate();
    save_manifest(m, dir / "manifest.json");
    return dir / "manifest.json";
}

void check_dataset(const ExperimentConfig& cfg, const Dataset& data) {
    if (data.manifest.window != cfg.data.window)
        throw ConfigError("manifest window " + std::to_string(data.manifest.window) + " does not match config window " +
                          std::to_string(cfg.data.window));
    for (const auto& s : data.sequences)
        if (s.height != cfg.data.height || s.width != cfg.data.width)
            throw ConfigError("dataset frames are " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                              ", config expects " + std::to_string(cfg.data.height) + "x" +
                              std::to_string(cfg.data.width));
}

// dBZ target frames of a window, straight from the stored sequence.
std::span<const double> target_frames(const Dataset& data, const WindowRef& ref) {
    const auto& s = data.sequences.at(ref.file);
    const std::size_t half = data.manifest.window / 2, hw = s.height * s.width;
    return std::span<const double>(s.frames).subspan((ref.start + half) * hw, half * hw);
}

struct SplitScore {
    std::optional<double> loss;
    std::optional<double> ets;
};

SplitScore score_split(const Model& model, const Dataset& data, const std::vector<WindowRef>& refs,
                       const LossConfig& loss) {
    SplitScore out;
    if (refs.empty()) return out;
    const auto preds = predict_windows(model, data, refs, ForwardMode::ttt_on);
    NoGradGuard ng;
    const auto& c = model.config();
    std::vector<SampleMetrics> samples;
    double total = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        total += composite_loss(preds[i], data.window(refs[i]).target, loss).total.item();
        samples.push_back(score_sample(denormalize(preds[i]), target_frames(data, refs[i]), c.steps, c.height,
                                       c.width, {kSelectionThreshold}));
    }
    out.loss = total / static_cast<double>(refs.size());
    out.ets = build_report(samples, {kSelectionThreshold}).at_threshold(kSelectionThreshold).ets.mean;
    return out;
}

struct FitOptions {
    std::string kind;
    std::size_t epochs = 0;
    std::size_t batch_size = 1;
    double lr_initial = 0, lr_final = 0, weight_decay = 0;
    std::uint64_t seed = 0;
    bool initial_candidate = false;
};

// Outer-loop optimization shared by train and adapt. Returns the record and
// leaves the selected parameters' checkpoint bytes in `best`.
RunRecord fit(Model& model, const std::vector<Tensor>& params, const Dataset& data, const LossConfig& loss,
              const FitOptions& o, std::ostream& log, std::vector<std::uint8_t>& best) {
    const auto t0 = std::chrono::steady_clock::now();
    RunRecord rec;
    rec.kind = o.kind;
    rec.model_fingerprint = model.config().fingerprint();
    rec.seed = o.seed;
    for (const auto& p : params) rec.trainable_parameters += p.numel();
    const auto train = data.windows(Split::train), val = data.windows(Split::val);
    if (train.empty()) throw ConfigError("manifest has no training windows");
    rec.train_windows = train.size();
    rec.val_windows = val.size();

    try {
        rec.initial_train_loss = *score_split(model, data, train, loss).loss;
        rec.initial_val_ets = score_split(model, data, val, loss).ets;
    } catch (const NumericError& e) {
        throw DivergenceError(0, 0, e.what());
    }
    log << o.kind << ": " << train.size() << " train / " << val.size() << " val windows, "
        << rec.trainable_parameters << " trainable scalars, initial loss " << rec.initial_train_loss << "\n";

    constexpr double kNone = -std::numeric_limits<double>::infinity();
    double best_score = kNone;
    bool have = false;
    auto consider = [&](std::size_t epoch, const std::optional<double>& ets) {
        const double s = ets.value_or(kNone);
        // Undefined scores never beat a defined one; among undefined, the latest wins.
        if (!have || s > best_score || (s == kNone && best_score == kNone)) {
            have = true;
            best_score = s;
            rec.selected_epoch = epoch;
            rec.criterion = ets;
            best = encode_checkpoint(model);
        }
    };
    if (o.initial_candidate || o.epochs == 0) consider(0, rec.initial_val_ets);

    const std::size_t n = train.size(), batches = (n + o.batch_size - 1) / o.batch_size;
    AdamW opt(params, {.weight_decay = o.weight_decay}, {o.lr_initial, o.lr_final, std::max<std::size_t>(1, o.epochs * batches)});
    std::vector<std::size_t> order(n);
    for (std::size_t epoch = 1; epoch <= o.epochs; ++epoch) {
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        Rng rng(derive_seed(o.seed, epoch));
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.integer(0, i - 1)]);
        double sum = 0;
        for (std::size_t b = 0; b < batches; ++b) {
            const std::size_t lo = b * o.batch_size, hi = std::min(n, lo + o.batch_size);
            try {
                opt.zero_grad();
                for (std::size_t i = lo; i < hi; ++i) {
                    const auto pair = data.window(train[order[i]]);
                    const auto terms = composite_loss(model.forward(pair.input, ForwardMode::ttt_on), pair.target, loss);
                    const double value = terms.total.item();
                    if (!std::isfinite(value)) throw NumericError("non-finite loss");
                    sum += value;
                    backward(scale(terms.total, 1.0 / static_cast<double>(hi - lo)));
                }
                opt.step();
            } catch (const DivergenceError&) {
                throw;
            } catch (const NumericError& e) {
                throw DivergenceError(epoch, b, e.what());
            }
        }
        EpochRecord er;
        SplitScore v;
        try {
            v = score_split(model, data, val, loss);
        } catch (const NumericError& e) {
            throw DivergenceError(epoch, batches, e.what());
        }
        er.epoch = epoch;
        er.train_loss = sum / static_cast<double>(n);
        er.val_loss = v.loss;
        er.val_ets = v.ets;
        rec.history.push_back(er);
        log << o.kind << " epoch " << epoch << "/" << o.epochs << " loss " << er.train_loss;
        if (v.loss) log << " val_loss " << *v.loss;
        log << " val_ets " << (v.ets ? std::to_string(*v.ets) : "undefined") << "\n";
        consider(epoch, v.ets);
    }
    rec.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << o.kind << ": selected epoch " << rec.selected_epoch << "\n";
    return rec;
}

}  // namespace

// ---------------------------------------------------------------------------
// gen-data

std::size_t generate_filtered(const DomainConfig& domain, const DataSection& d, std::uint64_t stream,
                              std::size_t count, std::size_t length, std::vector<RadarSequence>& out) {
    const std::uint64_t base = derive_seed(d.seed, stream);
    std::uint64_t draw = 0;
    std::size_t rejected = 0;
    for (std::size_t i = 0; i < count; ++i) {
        std::size_t attempts = 0;
        while (true) {
            auto seq = generate_sequence(domain, derive_seed(base, draw++), length, d.height, d.width);
            if (passes_filter(seq, d.filter_threshold, d.filter_coverage, d.filter_min_frames)) {
                out.push_back(std::move(seq));
                break;
            }
            ++rejected;
            if (++attempts >= d.max_attempts)
                throw ConfigError("coverage filter rejected " + std::to_string(attempts) + " consecutive draws of regime " +
                                  domain.name);
        }
    }
    return rejected;
}

GenDataResult cmd_gen_data(const ExperimentConfig& cfg, const fs::path& out_dir, std::ostream& log) {
    cfg.validate();
    const auto& d = cfg.data;
    GenDataResult r;

    std::vector<RadarSequence> source;
    r.source_retries = generate_filtered(cfg.source_domain(), d, kSourceStream, d.source_sequences, d.sequence_length, source);
    const auto n = static_cast<double>(d.source_sequences);
    std::size_t n_train = static_cast<std::size_t>(std::llround(d.train_ratio * n));
    std::size_t n_val = std::min(static_cast<std::size_t>(std::llround(d.val_ratio * n)), d.source_sequences - n_train);
    if (d.test_ratio == 0.0) n_val = d.source_sequences - n_train;
    r.source_manifest = write_split_set(out_dir / "source", source, n_train, n_val, d);
    log << "source regime " << d.source << ": " << source.size() << " sequences (" << n_train << " train, " << n_val
        << " val, " << source.size() - n_train - n_val << " test), " << r.source_retries << " filter retries\n";

    std::vector<RadarSequence> target;
    const std::size_t ft = d.target_finetune_sequences;
    r.target_retries =
        generate_filtered(cfg.target_domain(), d, kTargetStream, ft + d.target_test_sequences, d.sequence_length, target);
    const double tv = d.train_ratio + d.val_ratio;
    const std::size_t ft_train =
        tv > 0 ? static_cast<std::size_t>(std::llround(static_cast<double>(ft) * d.train_ratio / tv)) : ft;
    r.target_manifest = write_split_set(out_dir / "target", target, ft_train, ft - ft_train, d);
    log << "target regime " << d.target << ": " << target.size() << " sequences (" << ft_train << " fine-tune train, "
        << ft - ft_train << " fine-tune val, " << d.target_test_sequences << " test), " << r.target_retries
        << " filter retries\n";
    return r;
}

// ---------------------------------------------------------------------------
// train / adapt

ordered_json to_json(const RunRecord& r, bool timing) {
    ordered_json j;
    j["kind"] = r.kind;
    j["config_fingerprint"] = r.config_fingerprint;
    j["model_fingerprint"] = r.model_fingerprint;
    j["seed"] = r.seed;
    j["trainable_parameters"] = r.trainable_parameters;
    j["train_windows"] = r.train_windows;
    j["val_windows"] = r.val_windows;
    j["initial_train_loss"] = r.initial_train_loss;
    j["initial_val_ets"] = opt(r.initial_val_ets);
    ordered_json h = ordered_json::array();
    for (const auto& e : r.history)
        h.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", opt(e.val_loss)}, {"val_ets", opt(e.val_ets)}});
    j["history"] = h;
    j["selected_epoch"] = r.selected_epoch;
    j["criterion"] = {{"metric", "val_ets_25"}, {"value", opt(r.criterion)}};
    if (timing) j["wall_clock_seconds"] = r.wall_clock_seconds;
    return j;
}

RunRecord cmd_train(const ExperimentConfig& cfg, const fs::path& manifest, const fs::path& out_checkpoint,
                    std::ostream& log) {
    cfg.validate();
    const auto data = Dataset::load(manifest);
    check_dataset(cfg, data);
    Model model(cfg.effective_model(), cfg.training.seed);
    const auto& t = cfg.training;
    FitOptions o{"train", t.epochs, t.batch_size, t.lr_initial, t.lr_final, t.weight_decay, t.seed, false};
    std::vector<std::uint8_t> best;
    auto rec = fit(model, model.parameters().all(), data, cfg.effective_loss(), o, log, best);
    rec.config_fingerprint = cfg.fingerprint();
    write_file(out_checkpoint, best);
    return rec;
}

RunRecord cmd_adapt(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& manifest,
                    const fs::path& out_checkpoint, std::ostream& log) {
    cfg.validate();
    const auto data = Dataset::load(manifest);
    check_dataset(cfg, data);
    Model model = load_model(cfg, checkpoint);
    const auto trainable = model.freeze_backbone();
    const auto& a = cfg.adapt;
    FitOptions o{"adapt", a.epochs, a.batch_size, a.lr_initial, a.lr_final, a.weight_decay, cfg.training.seed, true};
    std::vector<std::uint8_t> best;
    auto rec = fit(model, trainable, data, cfg.effective_loss(), o, log, best);
    rec.config_fingerprint = cfg.fingerprint();
    write_file(out_checkpoint, best);
    return rec;
}

// ---------------------------------------------------------------------------
// evaluate / predict / compare

Model load_model(const ExperimentConfig& cfg, const fs::path& checkpoint) {
    Model m(cfg.effective_model(), cfg.training.seed);
    load_checkpoint(checkpoint, m);
    return m;
}

std::vector<Tensor> predict_windows(const Model& model, const Dataset& data, const std::vector<WindowRef>& refs,
                                    ForwardMode mode, std::size_t threads) {
    std::vector<Tensor> out(refs.size());
    threads = std::max<std::size_t>(1, std::min(threads, refs.size()));
    auto work = [&](std::size_t k) {
        NoGradGuard ng;
        for (std::size_t i = k; i < refs.size(); i += threads) out[i] = model.forward(data.window(refs[i]).input, mode);
    };
    if (threads == 1) {
        work(0);
        return out;
    }
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < threads; ++k)
        pool.emplace_back([&, k] {
            try {
                work(k);
            } catch (...) {
                errors[k] = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

double mean_loss(const Model& model, const Dataset& data, Split split, const LossConfig& loss, ForwardMode mode,
                 std::size_t threads) {
    const auto refs = data.windows(split);
    if (refs.empty()) throw std::invalid_argument("mean_loss: split has no windows");
    const auto preds = predict_windows(model, data, refs, mode, threads);
    NoGradGuard ng;
    double total = 0;
    for (std::size_t i = 0; i < refs.size(); ++i)
        total += composite_loss(preds[i], data.window(refs[i]).target, loss).total.item();
    return total / static_cast<double>(refs.size());
}

MetricReport evaluate_model(const Model& model, const Dataset& data, Split split, ForwardMode mode,
                            std::size_t threads) {
    const auto refs = data.windows(split);
    const auto preds = predict_windows(model, data, refs, mode, threads);
    const auto& c = model.config();
    const SsimConfig ssim_cfg;
    std::vector<SampleMetrics> samples;
    for (std::size_t i = 0; i < refs.size(); ++i)
        samples.push_back(score_sample(denormalize(preds[i]), target_frames(data, refs[i]), c.steps, c.height, c.width,
                                       kDefaultThresholds, ssim_cfg));
    auto r = build_report(samples);
    r.fingerprint = c.fingerprint();
    r.mode = to_string(mode);
    r.settings["split"] = to_string(split);
    r.settings["windows"] = refs.size();
    r.settings["thresholds"] = kDefaultThresholds;
    r.settings["ssim_window"] = ssim_cfg.window;
    r.settings["ssim_data_range"] = ssim_cfg.data_range;
    return r;
}

MetricReport cmd_evaluate(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& manifest,
                          Split split, ForwardMode mode, std::size_t threads) {
    cfg.validate();
    const auto data = Dataset::load(manifest);
    check_dataset(cfg, data);
    const Model model = load_model(cfg, checkpoint);
    return evaluate_model(model, data, split, mode, threads);
}

RadarSequence cmd_predict(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& input,
                          std::size_t start, ForwardMode mode) {
    cfg.validate();
    const Model model = load_model(cfg, checkpoint);
    const auto& c = model.config();
    const auto seq = load_sequence(input);
    if (seq.height != c.height || seq.width != c.width)
        throw ConfigError("input frames do not match the configured field size");
    if (start + c.steps > seq.steps)
        throw ConfigError("input has " + std::to_string(seq.steps) + " frames, need " + std::to_string(start + c.steps));
    const std::size_t hw = c.height * c.width;
    const auto x = normalize(std::span<const double>(seq.frames).subspan(start * hw, c.steps * hw),
                             {1, c.steps, 1, c.height, c.width});
    NoGradGuard ng;
    RadarSequence out;
    out.steps = c.steps;
    out.height = c.height;
    out.width = c.width;
    out.frames = denormalize(model.forward(x, mode));
    out.domain_id = seq.domain_id;
    out.seed = seq.seed;
    return out;
}

TTTComparison compare_ttt(const Model& model, const Dataset& data, Split split, const LossConfig& loss,
                          std::size_t threads) {
    const auto refs = data.windows(split);
    if (refs.empty()) throw std::invalid_argument("compare_ttt: split has no windows");
    const auto on = predict_windows(model, data, refs, ForwardMode::ttt_on, threads);
    const auto off = predict_windows(model, data, refs, ForwardMode::ttt_off, threads);
    const auto& c = model.config();
    const std::vector<double> tau{kSelectionThreshold};
    NoGradGuard ng;
    TTTComparison r;
    r.frame_interval_minutes = data.sequences[refs[0].file].frame_interval_minutes;
    std::vector<SampleMetrics> s_on, s_off;
    std::size_t count = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const auto target = data.window(refs[i]).target;
        if (r.sequences.empty() || r.sequences.back().file != refs[i].file) {
            if (!r.sequences.empty()) {
                r.sequences.back().wmae_on /= static_cast<double>(count);
                r.sequences.back().wmae_off /= static_cast<double>(count);
            }
            r.sequences.push_back({refs[i].file, 0.0, 0.0});
            count = 0;
        }
        r.sequences.back().wmae_on += weighted_mae(on[i], target, loss).item();
        r.sequences.back().wmae_off += weighted_mae(off[i], target, loss).item();
        ++count;
        const auto y = target_frames(data, refs[i]);
        s_on.push_back(score_sample(denormalize(on[i]), y, c.steps, c.height, c.width, tau));
        s_off.push_back(score_sample(denormalize(off[i]), y, c.steps, c.height, c.width, tau));
    }
    r.sequences.back().wmae_on /= static_cast<double>(count);
    r.sequences.back().wmae_off /= static_cast<double>(count);

    double wins = 0;
    for (const auto& s : r.sequences) {
        wins += s.wmae_on < s.wmae_off ? 1.0 : s.wmae_on == s.wmae_off ? 0.5 : 0.0;
        r.mean_wmae_on += s.wmae_on;
        r.mean_wmae_off += s.wmae_off;
    }
    const auto ns = static_cast<double>(r.sequences.size());
    r.win_rate = wins / ns;
    r.mean_wmae_on /= ns;
    r.mean_wmae_off /= ns;

    const auto rep_on = build_report(s_on, tau), rep_off = build_report(s_off, tau);
    for (std::size_t t = 0; t < c.steps; ++t) {
        r.csi_on.push_back(rep_on.leads[t].thresholds[0].csi);
        r.csi_off.push_back(rep_off.leads[t].thresholds[0].csi);
    }
    r.mean_csi_on = rep_on.aggregates[0].csi.mean;
    r.mean_csi_off = rep_off.aggregates[0].csi.mean;
    r.ets_on = rep_on.aggregates[0].ets.mean;
    r.ets_off = rep_off.aggregates[0].ets.mean;
    return r;
}

TTTComparison cmd_compare_ttt(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& manifest,
                              std::size_t threads) {
    cfg.validate();
    const auto data = Dataset::load(manifest);
    check_dataset(cfg, data);
    const Model model = load_model(cfg, checkpoint);
    return compare_ttt(model, data, Split::test, cfg.effective_loss(), threads);
}

ordered_json to_json(const TTTComparison& c) {
    ordered_json j;
    j["win_rate"] = c.win_rate;
    j["tie_convention"] = "ties count 0.5";
    j["mean_wmae"] = {{"ttt_on", c.mean_wmae_on}, {"ttt_off", c.mean_wmae_off}};
    j["mean_csi25"] = {{"ttt_on", opt(c.mean_csi_on)}, {"ttt_off", opt(c.mean_csi_off)}};
    j["mean_ets25"] = {{"ttt_on", opt(c.ets_on)}, {"ttt_off", opt(c.ets_off)}};
    ordered_json on = ordered_json::array(), off = ordered_json::array();
    for (std::size_t t = 0; t < c.csi_on.size(); ++t) {
        on.push_back(opt(c.csi_on[t]));
        off.push_back(opt(c.csi_off[t]));
    }
    j["csi25_by_lead"] = {{"ttt_on", on}, {"ttt_off", off}};
    ordered_json seqs = ordered_json::array();
    for (const auto& s : c.sequences)
        seqs.push_back({{"file", s.file}, {"wmae_ttt_on", s.wmae_on}, {"wmae_ttt_off", s.wmae_off}});
    j["sequences"] = seqs;
    return j;
}

std::string curves_csv(const TTTComparison& c) {
    std::string out = "arm,lead,minutes,csi25\n";
    char buf[96];
    for (const auto* arm : {&c.csi_on, &c.csi_off}) {
        const char* name = arm == &c.csi_on ? "ttt_on" : "ttt_off";
        for (std::size_t t = 0; t < arm->size(); ++t) {
            const double minutes = static_cast<double>(t + 1) * c.frame_interval_minutes;
            if ((*arm)[t])
                std::snprintf(buf, sizeof buf, "%s,%zu,%g,%.17g\n", name, t + 1, minutes, *(*arm)[t]);
            else
                std::snprintf(buf, sizeof buf, "%s,%zu,%g,\n", name, t + 1, minutes);
            out += buf;
        }
    }
    return out;
}

void write_json(const ordered_json& j, const fs::path& path) { write_text(j.dump(2) + "\n", path); }

void write_text(const std::string& text, const fs::path& path) {
    write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace reettt
