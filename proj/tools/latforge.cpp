#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "lat/cli_cmds.hpp"
#include "lat/config.hpp"

namespace {

lat::Config load_config(const std::string& path, const std::string& seed_override,
                        const std::string& out_override) {
    lat::Config cfg = lat::Config::parse_file(path);
    if (!seed_override.empty()) cfg.set("train.seed", seed_override);
    if (!out_override.empty()) cfg.set("out.dir", out_override);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"latforge - latent adversarial training lab for toy transformers"};
    app.require_subcommand(1);

    std::string config_path, seed_override, out_override, checkpoint_path, resume_path, csv_path;

    CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic dataset splits");
    gen->add_option("--config", config_path, "config file")->required();
    gen->add_option("--seed", seed_override, "override train.seed");

    CLI::App* train = app.add_subcommand("train", "run a training schedule");
    train->add_option("--config", config_path, "config file")->required();
    train->add_option("--seed", seed_override, "override train.seed");
    train->add_option("--out", out_override, "override out.dir");
    train->add_option("--resume", resume_path, "continue from a checkpoint");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the configured splits");
    eval->add_option("--config", config_path, "config file")->required();
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    eval->add_option("--out", out_override, "also write the metrics row here");

    CLI::App* relearn = app.add_subcommand("relearn", "few-shot re-learning attack on a checkpoint");
    relearn->add_option("--config", config_path, "config file")->required();
    relearn->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    relearn->add_option("--seed", seed_override, "override train.seed");

    CLI::App* plot = app.add_subcommand("plot", "render SVG charts from a metrics CSV");
    plot->add_option("--csv", csv_path, "metrics csv")->required();
    plot->add_option("--out", out_override, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            lat::Config cfg = lat::Config::parse_file(config_path);
            if (!seed_override.empty()) cfg.set("gen.seed", seed_override);
            return lat::cmd_gen_data(cfg);
        }
        if (train->parsed())
            return lat::cmd_train(load_config(config_path, seed_override, out_override), resume_path);
        if (eval->parsed())
            return lat::cmd_eval(load_config(config_path, "", ""), checkpoint_path, out_override);
        if (relearn->parsed())
            return lat::cmd_relearn(load_config(config_path, seed_override, ""), checkpoint_path);
        if (plot->parsed()) return lat::cmd_plot(csv_path, out_override);
    } catch (const lat::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return lat::kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return lat::kExitIo;
    }
    return 0;
}
