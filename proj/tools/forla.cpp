// Command-line front end: training regimes, evaluation, mode comparison,
// feature export, communication reports, and data generation.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "forla/experiment.hpp"

namespace fs = std::filesystem;
using namespace forla;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct CliOverrides {
    std::string config_path;
    std::string mode, adapter, out;
    int64_t seed = -1;
};

ExperimentConfig load_config(const CliOverrides& o) {
    ExperimentConfig cfg = o.config_path.empty() ? ExperimentConfig{} : ExperimentConfig::from_file(o.config_path);
    // command line wins over the file
    if (!o.mode.empty()) cfg.mode = mode_from_name(o.mode);
    if (!o.adapter.empty()) {
        if (o.adapter == "mlp") cfg.adapter = AdapterKind::mlp;
        else if (o.adapter == "moe") cfg.adapter = AdapterKind::moe;
        else if (o.adapter == "afm") cfg.adapter = AdapterKind::afm;
        else if (o.adapter == "none") cfg.adapter = AdapterKind::none;
        else throw ConfigError("unknown adapter '" + o.adapter + "'");
    }
    if (o.seed >= 0) cfg.seed = uint64_t(o.seed);
    if (!o.out.empty()) cfg.out_dir = o.out;
    if (const char* env = std::getenv("FORLA_OUT_DIR")) cfg.out_dir = env;
    cfg.validate();
    return cfg;
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f << text;
}

void write_outputs(const ExperimentConfig& cfg, const ExperimentResult& result) {
    std::cout << "held-out evaluation\n" << result.report.to_table();
    if (result.report_before_personalization) {
        std::cout << "before personalization\n" << result.report_before_personalization->to_table();
    }
    if (!result.ledger.rows.empty()) std::cout << result.comm.render();
    std::cout << "minimum adapted-feature variance: " << result.min_feat_variance << "\n";
    if (cfg.out_dir.empty()) return;
    fs::create_directories(cfg.out_dir);
    write_file(cfg.out_dir + "/report.csv", result.report.to_csv());
    write_file(cfg.out_dir + "/report.txt", result.report.to_table());
    if (result.report_before_personalization) {
        write_file(cfg.out_dir + "/report_pre_personalization.csv",
                   result.report_before_personalization->to_csv());
    }
    if (!result.ledger.rows.empty()) {
        write_file(cfg.out_dir + "/comm.csv", result.ledger.to_csv());
        write_file(cfg.out_dir + "/comm.txt", result.comm.render());
    }
    for (size_t i = 0; i < result.event_logs.size(); ++i)
        write_file(cfg.out_dir + "/events_client" + std::to_string(i) + ".tsv", result.event_logs[i]);
    write_file(cfg.out_dir + "/config.json", ExperimentConfig(cfg).to_json());
    std::cout << "outputs written to " << cfg.out_dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"federated object-centric representation learning on synthetic multi-domain features"};
    app.require_subcommand(1);

    CliOverrides o;
    std::string checkpoint_path, resume_path, export_path, modes_arg, seeds_arg;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", o.config_path, "experiment config (json)");
        cmd->add_option("--mode", o.mode, "mode override");
        cmd->add_option("--adapter", o.adapter, "adapter override (mlp|moe|afm|none)");
        cmd->add_option("--seed", o.seed, "seed override");
        cmd->add_option("--out", o.out, "output directory override");
    };

    CLI::App* train = app.add_subcommand("train", "run one experiment");
    add_common(train);
    train->add_option("--resume", resume_path, "resume from a checkpoint");
    train->add_option("--checkpoint", checkpoint_path, "write the final checkpoint here");

    CLI::App* evaluate_cmd = app.add_subcommand("evaluate", "evaluate a trained checkpoint");
    add_common(evaluate_cmd);
    evaluate_cmd->add_option("--checkpoint", checkpoint_path, "trained checkpoint")->required();

    CLI::App* compare = app.add_subcommand("compare", "paired comparison of training modes");
    add_common(compare);
    compare->add_option("--modes", modes_arg, "comma-separated modes")->required();
    compare->add_option("--seeds", seeds_arg, "comma-separated seeds (default: config seed)");

    CLI::App* export_cmd = app.add_subcommand("export-features", "dump adapted features of the eval scenes");
    add_common(export_cmd);
    export_cmd->add_option("--checkpoint", checkpoint_path, "trained checkpoint")->required();
    export_cmd->add_option("--file", export_path, "output dump file")->required();

    CLI::App* comm = app.add_subcommand("comm-report", "communication accounting of a checkpoint");
    add_common(comm);
    comm->add_option("--checkpoint", checkpoint_path, "trained checkpoint")->required();

    CLI::App* gen = app.add_subcommand("gen-data", "generate and cache the scene streams");
    add_common(gen);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        ExperimentConfig cfg = load_config(o);

        if (train->parsed()) {
            ExperimentRun run(cfg);
            if (!resume_path.empty()) run.load_checkpoint(resume_path);
            while (run.step_round()) {
            }
            if (!checkpoint_path.empty()) run.save_checkpoint(checkpoint_path);
            if (!cfg.out_dir.empty()) {
                fs::create_directories(cfg.out_dir);
                run.save_checkpoint(cfg.out_dir + "/checkpoint.bin");
            }
            write_outputs(cfg, run.finish());
        } else if (evaluate_cmd->parsed()) {
            ExperimentRun run(cfg);
            run.load_checkpoint(checkpoint_path);
            write_outputs(cfg, run.finish());
        } else if (compare->parsed()) {
            std::vector<Mode> modes;
            std::stringstream ms(modes_arg);
            std::string token;
            while (std::getline(ms, token, ',')) modes.push_back(mode_from_name(token));
            std::vector<uint64_t> seeds;
            if (seeds_arg.empty()) {
                seeds.push_back(cfg.seed);
            } else {
                std::stringstream ss(seeds_arg);
                while (std::getline(ss, token, ',')) seeds.push_back(std::stoull(token));
            }
            CompareResult result = compare_modes(cfg, modes, seeds);
            std::cout << result.to_table();
            if (!cfg.out_dir.empty()) {
                fs::create_directories(cfg.out_dir);
                write_file(cfg.out_dir + "/compare.txt", result.to_table());
            }
        } else if (export_cmd->parsed()) {
            ExperimentRun run(cfg);
            run.load_checkpoint(checkpoint_path);
            export_features(run, export_path);
            std::cout << "adapted features written to " << export_path << "\n";
        } else if (comm->parsed()) {
            ExperimentRun run(cfg);
            run.load_checkpoint(checkpoint_path);
            ExperimentResult result = run.finish();
            if (result.ledger.rows.empty()) {
                std::cout << "no completed rounds\n";
                return kExitOk;
            }
            std::cout << result.comm.render();
            std::cout << result.ledger.to_csv();
        } else if (gen->parsed()) {
            if (cfg.data.cache_dir.empty()) throw ConfigError("gen-data: config needs data.cache_dir");
            fs::create_directories(cfg.data.cache_dir);
            for (uint32_t d = 0; d < cfg.data.domains; ++d) {
                ExperimentConfig plain = cfg;
                plain.data.cache_dir.clear();  // force generation
                auto train_scenes = build_train_scenes(plain, d);
                auto eval_scenes = build_eval_scenes(plain, d);
                cache_features(train_scenes, cfg.data.cache_dir + "/train_domain" + std::to_string(d) + ".forlache");
                cache_features(eval_scenes, cfg.data.cache_dir + "/eval_domain" + std::to_string(d) + ".forlache");
                std::cout << "domain " << d << ": " << train_scenes.size() << " train / " << eval_scenes.size()
                          << " eval scenes cached\n";
            }
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}
