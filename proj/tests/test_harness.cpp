#include "doctest.h"
#include "reettt/bytes.hpp"
#include "reettt/harness.hpp"

#include <cstdlib>
#include <set>
#include <sys/wait.h>
#include <sstream>

using namespace reettt;

namespace {

const char* kTiny = R"(
[data]
seed = 7
height = 16
width = 16
sequence_length = 6
window = 4
stride = 1
source_sequences = 5
train_ratio = 0.6
val_ratio = 0.2
test_ratio = 0.2
target_test_sequences = 3
target_finetune_sequences = 3

[model]
channels = 2
hidden = 2
blocks = 1
rrdb_count = 1
sr_features = 2
sr_growth = 2

[training]
epochs = 2
batch_size = 2
seed = 3

[adapt]
epochs = 2
batch_size = 2
)";

ExperimentConfig tiny(const std::string& extra = "") { return ExperimentConfig::parse(kTiny + extra); }

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("reettt_" + tag + "_" + std::to_string(std::rand()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    fs::path operator/(const std::string& s) const { return path / s; }
};

std::ostringstream sink;

std::map<std::string, std::vector<std::uint8_t>> tree_bytes(const fs::path& root) {
    std::map<std::string, std::vector<std::uint8_t>> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
    return out;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(REETTT_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("experiment config parsing and validation") {
    for (const char* name : {"beijing-like.cfg", "hangzhou-like.cfg"}) {
        const auto c = ExperimentConfig::load(fs::path(REETTT_SOURCE_DIR) / "configs" / name);
        CHECK(c.effective_model().steps == c.data.window / 2);
    }
    const auto a = ExperimentConfig::load(fs::path(REETTT_SOURCE_DIR) / "configs/beijing-like.cfg");
    const auto b = ExperimentConfig::load(fs::path(REETTT_SOURCE_DIR) / "configs/hangzhou-like.cfg");
    CHECK(a.data.source == "A");
    CHECK(b.data.source == "B");
    CHECK(a.fingerprint() != b.fingerprint());

    const auto c = tiny();
    CHECK(c.training.seed == 3);
    CHECK(c.data.height == 16);
    CHECK(c.fingerprint() == tiny().fingerprint());
    CHECK(c.fingerprint() != tiny("[loss]\nalpha = 0.5\n").fingerprint());

    CHECK_THROWS_AS(ExperimentConfig::parse("[data]\nseed = 1\n"), ConfigError);  // no training seed
    CHECK_THROWS_AS(tiny("[loss]\nbogus = 1\n"), ConfigError);
    CHECK_THROWS_AS(tiny("[nonsense]\nx = 1\n"), ConfigError);
    CHECK_THROWS_AS(tiny("[loss]\nalpha = abc\n"), ConfigError);
    CHECK_THROWS_AS(tiny("[loss]\nmask = fancy\n"), ConfigError);
    CHECK_THROWS_AS(tiny("[ttt]\ninner_model = rnn\n"), ConfigError);
    CHECK_THROWS_AS(tiny("[ablation]\nno_skip = maybe\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse(std::string(kTiny).replace(std::string(kTiny).find("val_ratio = 0.2"), 15,
                                                                        "val_ratio = 0.3")),
                    ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse(std::string(kTiny).replace(std::string(kTiny).find("window = 4"), 10,
                                                                        "window = 5")),
                    ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/x.cfg"), IoError);
}

TEST_CASE("ablation toggles map one-to-one and independently") {
    const auto base = tiny();
    const auto m0 = base.effective_model();
    CHECK(m0.use_skip);
    CHECK(m0.use_rrdb);
    CHECK_FALSE(m0.ttt.linear_views);
    CHECK(base.effective_loss().lambda == base.loss.lambda);

    const auto hffl = tiny("[ablation]\nno_hffl = true\n");
    CHECK(hffl.effective_loss().lambda == 0.0);
    CHECK(hffl.effective_model().fingerprint() == m0.fingerprint());

    const auto skip = tiny("[ablation]\nno_skip = true\n");
    CHECK_FALSE(skip.effective_model().use_skip);
    CHECK(skip.effective_model().use_rrdb);
    CHECK(fusion_streams(skip.effective_model()) == std::vector<std::string>{"decoder", "sr"});

    const auto lin = tiny("[ablation]\nlinear_proj = true\n");
    CHECK(lin.effective_model().ttt.linear_views);
    CHECK(lin.effective_model().use_skip);

    const auto rrdb = tiny("[ablation]\nno_rrdb = true\n");
    CHECK_FALSE(rrdb.effective_model().use_rrdb);
    CHECK(fusion_streams(rrdb.effective_model()) == std::vector<std::string>{"decoder", "skip"});

    const auto all = tiny("[ablation]\nno_hffl = true\nno_skip = true\nlinear_proj = true\nno_rrdb = true\n");
    CHECK(fusion_streams(all.effective_model()) == std::vector<std::string>{"decoder"});
    CHECK(all.effective_loss().lambda == 0.0);
}

TEST_CASE("gen-data: deterministic tree, filtered samples, disjoint splits") {
    TempDir d1("gen1"), d2("gen2");
    const auto cfg = tiny();
    const auto r1 = cmd_gen_data(cfg, d1.path, sink);
    cmd_gen_data(cfg, d2.path, sink);
    const auto t1 = tree_bytes(d1.path), t2 = tree_bytes(d2.path);
    CHECK(t1.size() == 5 + 6 + 2);
    CHECK(t1 == t2);

    for (const auto& manifest : {r1.source_manifest, r1.target_manifest}) {
        const auto data = Dataset::load(manifest);
        for (const auto& s : data.sequences) CHECK(passes_filter(s, cfg.data.filter_threshold, cfg.data.filter_coverage,
                                                                 cfg.data.filter_min_frames));
        std::set<std::size_t> seen;
        for (auto split : {Split::train, Split::val, Split::test})
            for (std::size_t i : data.manifest.indices(split)) CHECK(seen.insert(i).second);
        CHECK(seen.size() == data.manifest.files.size());
    }
    const auto src = Dataset::load(r1.source_manifest);
    CHECK(src.manifest.train.size() == 3);
    CHECK(src.manifest.val.size() == 1);
    CHECK(src.manifest.test.size() == 1);
    CHECK(src.sequences[0].domain_id == regime_a().domain_id);
    const auto tgt = Dataset::load(r1.target_manifest);
    CHECK(tgt.manifest.test.size() == 3);
    CHECK(tgt.manifest.train.size() + tgt.manifest.val.size() == 3);
    CHECK(tgt.sequences[0].domain_id == regime_b().domain_id);

    // A filter no sequence can pass exhausts the attempt budget.
    auto strict = cfg;
    strict.data.filter_coverage = 1.0;
    strict.data.filter_threshold = 69.0;
    strict.data.max_attempts = 5;
    TempDir d3("gen3");
    CHECK_THROWS_AS(cmd_gen_data(strict, d3.path, sink), ConfigError);
}

TEST_CASE("train: epochs=0 writes the initialization, runs are reproducible") {
    TempDir d("train");
    auto cfg = tiny();
    const auto gen = cmd_gen_data(cfg, d.path, sink);

    auto zero = cfg;
    zero.training.epochs = 0;
    const auto rec0 = cmd_train(zero, gen.source_manifest, d / "init.rttc", sink);
    CHECK(rec0.history.empty());
    CHECK(rec0.selected_epoch == 0);
    Model fresh(zero.effective_model(), zero.training.seed);
    CHECK(read_file(d / "init.rttc") == encode_checkpoint(fresh));

    const auto a = cmd_train(cfg, gen.source_manifest, d / "a.rttc", sink);
    const auto b = cmd_train(cfg, gen.source_manifest, d / "b.rttc", sink);
    CHECK(a.history.size() == 2);
    CHECK(a.selected_epoch >= 1);
    CHECK(a.trainable_parameters == fresh.parameters().scalar_count());
    CHECK(a.config_fingerprint == cfg.fingerprint());
    CHECK(to_json(a, false).dump() == to_json(b, false).dump());
    CHECK(read_file(d / "a.rttc") == read_file(d / "b.rttc"));
    CHECK(read_file(d / "a.rttc") != read_file(d / "init.rttc"));

    // Selected checkpoint scores the recorded criterion on the validation split.
    const Model m = load_model(cfg, d / "a.rttc");
    const auto data = Dataset::load(gen.source_manifest);
    const auto ets = build_report([&] {
        std::vector<SampleMetrics> s;
        for (const auto& ref : data.windows(Split::val)) {
            NoGradGuard ng;
            const auto p = m.forward(data.window(ref).input, ForwardMode::ttt_on);
            const auto& seq = data.sequences[ref.file];
            const std::size_t hw = 256;
            s.push_back(score_sample(denormalize(p),
                                     std::span<const double>(seq.frames).subspan((ref.start + 2) * hw, 2 * hw), 2, 16,
                                     16, {25.0}));
        }
        return s;
    }(), {25.0}).at_threshold(25.0).ets.mean;
    CHECK(ets == a.criterion);

    auto other = cfg;
    other.training.seed = 4;
    const auto c = cmd_train(other, gen.source_manifest, d / "c.rttc", sink);
    CHECK(read_file(d / "c.rttc") != read_file(d / "a.rttc"));
    CHECK(c.seed == 4);
}

TEST_CASE("train: divergence reports the offending batch") {
    TempDir d("diverge");
    auto cfg = tiny();
    const auto gen = cmd_gen_data(cfg, d.path, sink);
    // The first update lands the weights near 1e300; the next forward overflows.
    cfg.training.lr_initial = cfg.training.lr_final = 1e300;
    try {
        cmd_train(cfg, gen.source_manifest, d / "x.rttc", sink);
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(e.epoch == 1);
        CHECK(e.batch == 1);
        CHECK(std::string(e.what()).find("batch 1") != std::string::npos);
    }
    CHECK_FALSE(fs::exists(d / "x.rttc"));

    // Fast weights that blow up already at initialization fail before any update.
    cfg = tiny();
    cfg.model.ttt.inner_lr = 1e30;
    try {
        cmd_train(cfg, gen.source_manifest, d / "x.rttc", sink);
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(e.epoch == 0);
    }
}

TEST_CASE("evaluate: pure with respect to the checkpoint, deterministic across threads") {
    TempDir d("eval");
    const auto cfg = tiny();
    const auto gen = cmd_gen_data(cfg, d.path, sink);
    cmd_train(cfg, gen.source_manifest, d / "m.rttc", sink);
    const auto before = read_file(d / "m.rttc");

    const auto on = cmd_evaluate(cfg, d / "m.rttc", gen.target_manifest, Split::test, ForwardMode::ttt_on);
    CHECK(read_file(d / "m.rttc") == before);
    const auto off1 = cmd_evaluate(cfg, d / "m.rttc", gen.target_manifest, Split::test, ForwardMode::ttt_off);
    const auto off2 = cmd_evaluate(cfg, d / "m.rttc", gen.target_manifest, Split::test, ForwardMode::ttt_off);
    CHECK(to_json(off1).dump() == to_json(off2).dump());
    const auto threaded = cmd_evaluate(cfg, d / "m.rttc", gen.target_manifest, Split::test, ForwardMode::ttt_on, 3);
    CHECK(to_json(threaded).dump() == to_json(on).dump());

    CHECK(on.mode == "ttt_on");
    CHECK(on.samples == 9);
    CHECK(on.leads.size() == 2);
    for (double tau : {10.0, 25.0, 35.0}) CHECK_NOTHROW(on.at_threshold(tau));
    CHECK(on.fingerprint == cfg.effective_model().fingerprint());

    auto wrong = cfg;
    wrong.model.channels = 4;  // same data, different architecture
    CHECK_THROWS_AS(cmd_evaluate(wrong, d / "m.rttc", gen.target_manifest, Split::test, ForwardMode::ttt_on),
                    CheckpointMismatch);
    auto bigger = cfg;
    bigger.data.height = 32;
    CHECK_THROWS_AS(cmd_evaluate(bigger, d / "m.rttc", gen.target_manifest, Split::test, ForwardMode::ttt_on),
                    ConfigError);
}

TEST_CASE("predict matches a direct forward pass") {
    TempDir d("predict");
    const auto cfg = tiny();
    const auto gen = cmd_gen_data(cfg, d.path, sink);
    cmd_train(cfg, gen.source_manifest, d / "m.rttc", sink);
    const auto input = gen.target_manifest.parent_path() / "seq_0000.rseq";
    const auto out = cmd_predict(cfg, d / "m.rttc", input, 1, ForwardMode::ttt_on);
    CHECK(out.steps == 2);
    const auto seq = load_sequence(input);
    const Model m = load_model(cfg, d / "m.rttc");
    NoGradGuard ng;
    const auto p = m.forward(make_window(seq, 1, 4).input, ForwardMode::ttt_on);
    CHECK(out.frames == denormalize(p));
    CHECK_THROWS_AS(cmd_predict(cfg, d / "m.rttc", input, 5, ForwardMode::ttt_on), ConfigError);
}

TEST_CASE("adapt: frozen backbone, adaptation-side trainables, initial state in selection") {
    TempDir d("adapt");
    const auto cfg = tiny();
    const auto gen = cmd_gen_data(cfg, d.path, sink);
    cmd_train(cfg, gen.source_manifest, d / "src.rttc", sink);
    const auto rec = cmd_adapt(cfg, d / "src.rttc", gen.target_manifest, d / "ad.rttc", sink);

    const Model src = load_model(cfg, d / "src.rttc"), ad = load_model(cfg, d / "ad.rttc");
    const auto ps = src.parameters(), pa = ad.parameters();
    CHECK(rec.trainable_parameters == [&] {
        std::size_t n = 0;
        for (const auto& t : ps.adaptation()) n += t.numel();
        return n;
    }());
    for (std::size_t i = 0; i < ps.entries().size(); ++i) {
        const auto& e = ps.entries()[i];
        if (e.adaptation) continue;
        const auto x = e.tensor.data(), y = pa.entries()[i].tensor.data();
        CHECK(std::equal(x.begin(), x.end(), y.begin(), y.end()));
    }
    CHECK(rec.history.size() == 2);
    if (rec.initial_val_ets && rec.criterion) CHECK(*rec.criterion >= *rec.initial_val_ets);
    if (rec.selected_epoch == 0) CHECK(read_file(d / "ad.rttc") == read_file(d / "src.rttc"));
}

TEST_CASE("compare-ttt: identical arms tie at one half, CSV has T rows per arm") {
    TempDir d("cmp");
    auto cfg = tiny("[ttt]\nsteps_per_token = 0\n");
    const auto gen = cmd_gen_data(cfg, d.path, sink);
    cmd_train(cfg, gen.source_manifest, d / "m.rttc", sink);
    const auto c = cmd_compare_ttt(cfg, d / "m.rttc", gen.target_manifest);
    CHECK(c.win_rate == 0.5);
    CHECK(c.sequences.size() == 3);
    CHECK(c.mean_wmae_on == c.mean_wmae_off);
    CHECK(c.csi_on == c.csi_off);
    const auto csv = curves_csv(c);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 2);
    CHECK(csv.rfind("arm,lead,minutes,csi25\n", 0) == 0);
    CHECK(csv.find("ttt_off,2,12,") != std::string::npos);

    const auto live = tiny();
    cmd_train(live, gen.source_manifest, d / "live.rttc", sink);
    const auto l = cmd_compare_ttt(live, d / "live.rttc", gen.target_manifest, 2);
    CHECK(l.win_rate >= 0.0);
    CHECK(l.win_rate <= 1.0);
    CHECK(to_json(l).dump() == to_json(cmd_compare_ttt(live, d / "live.rttc", gen.target_manifest, 1)).dump());
}

TEST_CASE("command line exit codes") {
    TempDir d("cli");
    const auto cfg_path = d / "tiny.cfg";
    write_text(kTiny, cfg_path);
    write_text(std::string(kTiny) + "[loss]\nbogus = 1\n", d / "bad.cfg");
    write_text(std::string(kTiny) + "[ttt]\ninner_lr = 1e30\n", d / "wild.cfg");
    const std::string cfg = " --config " + cfg_path.string();

    CHECK(run_cli("gen-data" + cfg + " --out " + (d / "data").string()) == 0);
    const auto src = (d / "data/source/manifest.json").string(), tgt = (d / "data/target/manifest.json").string();
    CHECK(run_cli("train" + cfg + " --data " + src + " --out " + (d / "m.rttc").string() + " --record " +
                  (d / "rec.json").string()) == 0);
    CHECK(fs::exists(d / "rec.json"));
    CHECK(run_cli("evaluate" + cfg + " --checkpoint " + (d / "m.rttc").string() + " --data " + tgt +
                  " --mode ttt_off --threads 2 --out " + (d / "rep.json").string()) == 0);
    const auto rep = report_from_json(nlohmann::ordered_json::parse(read_file(d / "rep.json")));
    CHECK(rep.mode == "ttt_off");
    CHECK(run_cli("compare-ttt" + cfg + " --checkpoint " + (d / "m.rttc").string() + " --data " + tgt + " --out " +
                  (d / "cmp.json").string() + " --emit-csv " + (d / "curves.csv").string()) == 0);
    CHECK(fs::exists(d / "curves.csv"));
    CHECK(run_cli("predict" + cfg + " --checkpoint " + (d / "m.rttc").string() + " --input " +
                  (d / "data/target/seq_0000.rseq").string() + " --out " + (d / "p.rseq").string()) == 0);
    CHECK(load_sequence(d / "p.rseq").steps == 2);
    CHECK(run_cli("adapt" + cfg + " --checkpoint " + (d / "m.rttc").string() + " --data " + tgt + " --out " +
                  (d / "ad.rttc").string() + " --record " + (d / "ad.json").string()) == 0);

    CHECK(run_cli("train --config " + (d / "bad.cfg").string() + " --data " + src + " --out x") == 2);
    CHECK(run_cli("evaluate" + cfg + " --checkpoint " + (d / "m.rttc").string() + " --data " + tgt + " --mode sideways") == 2);
    CHECK(run_cli("frobnicate") == 2);
    CHECK(run_cli("train --config " + (d / "wild.cfg").string() + " --data " + src + " --out " + (d / "w.rttc").string()) == 3);
    CHECK(run_cli("evaluate" + cfg + " --checkpoint " + (d / "missing.rttc").string() + " --data " + tgt) == 4);
    CHECK(run_cli("train" + cfg + " --data " + (d / "nope.json").string() + " --out x") == 4);

    // A checkpoint from a different configuration is a config error.
    std::string wide = kTiny;
    wide.replace(wide.find("channels = 2"), 12, "channels = 4");
    write_text(wide, d / "wide.cfg");
    CHECK(run_cli("evaluate --config " + (d / "wide.cfg").string() + " --checkpoint " + (d / "m.rttc").string() +
                  " --data " + tgt) == 2);
}
