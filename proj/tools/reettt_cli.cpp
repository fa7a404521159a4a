#include "CLI11.hpp"
#include "reettt/harness.hpp"

#include <filesystem>
#include <iostream>

using namespace reettt;

namespace {

enum Exit { kOk = 0, kConfig = 2, kDivergence = 3, kIo = 4 };

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string mode = "ttt_on";
    std::string out;
    std::size_t threads = 1;
    std::string csv;
    std::string record;
    std::string checkpoint;
    std::string data;
    std::string split = "test";
    std::string input;
    std::size_t start = 0;
    bool quiet = false;
};

ExperimentConfig load_config(const Options& o) {
    auto cfg = ExperimentConfig::load(o.config);
    if (o.seed) {
        cfg.training.seed = *o.seed;
        cfg.validate();
    }
    return cfg;
}

std::ostream& log_stream(const Options& o) {
    static std::ostream null(nullptr);
    return o.quiet ? null : std::cerr;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Radar echo extrapolation with test-time training"};
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "experiment config (INI)")->required();
        sub->add_option("--seed", o.seed, "override training.seed");
        sub->add_flag("--quiet", o.quiet, "suppress progress output");
    };
    auto threads = [&](CLI::App* sub) {
        sub->add_option("--threads", o.threads, "worker threads across sequences")->check(CLI::PositiveNumber);
    };
    auto mode = [&](CLI::App* sub) {
        sub->add_option("--mode", o.mode, "ttt_on or ttt_off")->check(CLI::IsMember({"ttt_on", "ttt_off"}));
    };

    auto* gen = app.add_subcommand("gen-data", "generate source and shifted-target datasets");
    common(gen);
    gen->add_option("--out", o.out, "output directory")->required();

    auto* train = app.add_subcommand("train", "outer-loop training with validation-ETS selection");
    common(train);
    train->add_option("--data", o.data, "manifest.json")->required();
    train->add_option("--out", o.out, "checkpoint path")->required();
    train->add_option("--record", o.record, "run record JSON path");

    auto* eval = app.add_subcommand("evaluate", "metric report for one split");
    common(eval);
    mode(eval);
    threads(eval);
    eval->add_option("--checkpoint", o.checkpoint)->required();
    eval->add_option("--data", o.data, "manifest.json")->required();
    eval->add_option("--split", o.split)->check(CLI::IsMember({"train", "val", "test"}));
    eval->add_option("--out", o.out, "report JSON path (stdout if absent)");

    auto* pred = app.add_subcommand("predict", "forecast T frames from an RSEQ file");
    common(pred);
    mode(pred);
    pred->add_option("--checkpoint", o.checkpoint)->required();
    pred->add_option("--input", o.input, "RSEQ input")->required();
    pred->add_option("--start", o.start, "first input frame");
    pred->add_option("--out", o.out, "RSEQ output")->required();

    auto* adapt = app.add_subcommand("adapt", "fine-tune the adaptation side with a frozen backbone");
    common(adapt);
    adapt->add_option("--checkpoint", o.checkpoint)->required();
    adapt->add_option("--data", o.data, "target manifest.json")->required();
    adapt->add_option("--out", o.out, "checkpoint path")->required();
    adapt->add_option("--record", o.record, "run record JSON path");

    auto* cmp = app.add_subcommand("compare-ttt", "paired ttt_on / ttt_off comparison on the test split");
    common(cmp);
    threads(cmp);
    cmp->add_option("--checkpoint", o.checkpoint)->required();
    cmp->add_option("--data", o.data, "shifted manifest.json")->required();
    cmp->add_option("--out", o.out, "comparison JSON path (stdout if absent)");
    cmp->add_option("--emit-csv", o.csv, "per-lead CSI25 curves");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        const auto cfg = load_config(o);
        auto& log = log_stream(o);
        auto emit = [&](const nlohmann::ordered_json& j) {
            if (o.out.empty())
                std::cout << j.dump(2) << "\n";
            else
                write_json(j, o.out);
        };
        if (*gen) {
            const auto r = cmd_gen_data(cfg, o.out, log);
            std::cout << r.source_manifest.string() << "\n" << r.target_manifest.string() << "\n";
        } else if (*train || *adapt) {
            const auto rec = *train ? cmd_train(cfg, o.data, o.out, log) : cmd_adapt(cfg, o.checkpoint, o.data, o.out, log);
            const auto j = to_json(rec);
            if (o.record.empty())
                std::cout << j.dump(2) << "\n";
            else
                write_json(j, o.record);
        } else if (*eval) {
            emit(to_json(cmd_evaluate(cfg, o.checkpoint, o.data, split_from_string(o.split), mode_from_string(o.mode),
                                      o.threads)));
        } else if (*pred) {
            save_sequence(cmd_predict(cfg, o.checkpoint, o.input, o.start, mode_from_string(o.mode)), o.out);
        } else if (*cmp) {
            const auto c = cmd_compare_ttt(cfg, o.checkpoint, o.data, o.threads);
            emit(to_json(c));
            if (!o.csv.empty()) write_text(curves_csv(c), o.csv);
        }
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kDivergence;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kIo;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kOk;
}
