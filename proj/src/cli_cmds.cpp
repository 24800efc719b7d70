#include "lat/cli_cmds.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "lat/checkpoint.hpp"
#include "lat/reporting.hpp"
#include "lat/taskgen.hpp"
#include "lat/trainer.hpp"

namespace fs = std::filesystem;

namespace lat {

namespace {

// one process owns one run directory
class DirLock {
   public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
        int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw IoError("run directory '" + dir.string() + "' is locked (remove " + path_.string() +
                          " if no run is active)");
        std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] ssize_t n = ::write(fd, pid.data(), pid.size());
        ::close(fd);
    }
    ~DirLock() { ::unlink(path_.c_str()); }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

   private:
    fs::path path_;
};

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

DatasetSplit load_split(const fs::path& path) { return parse_split(read_file(path)); }

struct DataBundle {
    std::optional<DatasetSplit> train, extra_train, pref, benign, forget, retain, trigger_eval, clean_eval;
};

fs::path split_path(const Config& cfg, const std::string& key) {
    fs::path dir = cfg.require_string("data.dir");
    return dir / cfg.get_string(key);
}

std::optional<DatasetSplit> load_optional(const Config& cfg, const std::string& key) {
    if (cfg.get_string(key).empty()) return std::nullopt;
    fs::path p = split_path(cfg, key);
    if (!fs::exists(p)) return std::nullopt;
    return load_split(p);
}

DatasetSplit load_required(const Config& cfg, const std::string& key) {
    std::string name = cfg.require_string(key);
    fs::path p = split_path(cfg, key);
    if (!fs::exists(p)) throw IoError("dataset '" + p.string() + "' not found (generate it with gen-data)");
    return load_split(p);
}

ModelConfig model_from(const Config& cfg) {
    ModelConfig m;
    m.n_layers = static_cast<int>(cfg.get_int("model.layers"));
    m.d_model = static_cast<int>(cfg.get_int("model.d_model"));
    m.n_heads = static_cast<int>(cfg.get_int("model.heads"));
    m.vocab_size = static_cast<int>(cfg.get_int("model.vocab"));
    m.max_context = static_cast<int>(cfg.get_int("model.context"));
    return m;
}

RunConfig run_config_from(const Config& cfg, const DataBundle& data) {
    RunConfig rc;
    rc.model = model_from(cfg);
    rc.loss = loss_kind_from(cfg.get_string("loss.kind"));
    rc.benign = benign_mode_from(cfg.get_string("benign.mode"));
    rc.kl_weight = cfg.get_float("benign.kl_weight");
    rc.interleave_ratio = static_cast<int>(cfg.get_int("benign.ratio"));

    rc.attack.epsilon = cfg.get_float("attack.epsilon");
    std::string per_site = cfg.get_string("attack.site_epsilon");
    if (!per_site.empty()) {
        std::stringstream ss(per_site);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            size_t colon = tok.find(':');
            if (colon == std::string::npos)
                throw ConfigError("config: attack.site_epsilon expects 'layer:eps' entries");
            rc.attack.site_epsilon[std::stoi(tok.substr(0, colon))] = std::stof(tok.substr(colon + 1));
        }
    }
    rc.attack.pgd_steps = static_cast<int>(cfg.get_int("attack.steps"));
    rc.attack.step_size = cfg.get_float("attack.step_size");
    std::string mode = cfg.get_string("attack.mode");
    if (mode == "targeted")
        rc.attack.mode = AttackMode::Targeted;
    else if (mode == "untargeted")
        rc.attack.mode = AttackMode::Untargeted;
    else
        throw ConfigError("config: attack.mode must be targeted or untargeted");
    std::string init = cfg.get_string("attack.init");
    if (init == "zero")
        rc.attack.init = AttackInit::Zero;
    else if (init == "uniform-ball")
        rc.attack.init = AttackInit::UniformBall;
    else
        throw ConfigError("config: attack.init must be zero or uniform-ball");
    rc.attack.aggregate_norm = cfg.get_bool("attack.aggregate");
    rc.whiten = cfg.get_bool("attack.whiten");
    rc.whiten_lambda_rel = cfg.get_float("attack.whiten_lambda");
    rc.hook_profile = cfg.get_string("attack.profile");
    rc.hook_k = static_cast<int>(cfg.get_int("attack.sites"));
    rc.hook_layers = cfg.get_int_list("attack.layers");

    rc.dpo_beta = cfg.get_float("dpo.beta");
    rc.rmu_c = cfg.get_float("rmu.c");
    rc.rmu_alpha = cfg.get_float("rmu.alpha");
    rc.rmu_layer = static_cast<int>(cfg.get_int("rmu.layer"));
    rc.rmu_trainable = cfg.get_int_list("rmu.trainable");

    rc.total_steps = cfg.get_int("train.steps");
    rc.batch_size = static_cast<int>(cfg.get_int("train.batch"));
    rc.lr = cfg.get_float("train.lr");
    rc.momentum = cfg.get_float("train.momentum");
    rc.seed = cfg.get_u64("train.seed");
    rc.init_seed = cfg.get_u64("train.init_seed");
    rc.eval_every = cfg.get_int("train.eval_every");
    rc.nan_budget = cfg.get_float("train.nan_budget");
    rc.proxy_trigger = cfg.get_bool("train.proxy_trigger");
    rc.trigger = cfg.get_token_list("gen.trigger");
    rc.threads = static_cast<int>(cfg.get_int("train.threads"));

    auto ptr = [](const std::optional<DatasetSplit>& s) { return s ? &*s : nullptr; };
    rc.train = ptr(data.train);
    rc.extra_train = ptr(data.extra_train);
    rc.pref = ptr(data.pref);
    rc.benign_data = ptr(data.benign);
    rc.forget = ptr(data.forget);
    rc.retain = ptr(data.retain);
    rc.trigger_eval = ptr(data.trigger_eval);
    rc.clean_eval = ptr(data.clean_eval);
    return rc;
}

DataBundle load_bundle(const Config& cfg, LossKind loss, BenignMode benign, float kl_weight) {
    DataBundle data;
    if (loss == LossKind::Sft) {
        data.train = load_required(cfg, "data.train");
        data.extra_train = load_optional(cfg, "data.extra_train");
    }
    if (loss == LossKind::Rt || loss == LossKind::Dpo) data.pref = load_required(cfg, "data.pref");
    if (loss == LossKind::UnlearnGa || loss == LossKind::Rmu) {
        data.forget = load_required(cfg, "data.forget");
        data.retain = load_required(cfg, "data.retain");
    } else {
        data.forget = load_optional(cfg, "data.forget");
        data.retain = load_optional(cfg, "data.retain");
    }
    if (benign != BenignMode::None && !(benign == BenignMode::KlPenalty && kl_weight == 0.0f))
        data.benign = load_required(cfg, "data.benign");
    data.trigger_eval = load_optional(cfg, "data.trigger_eval");
    data.clean_eval = load_optional(cfg, "data.clean_eval");
    return data;
}

int guard(const std::function<int()>& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
}

std::string checkpoint_name(int64_t step, bool final) {
    if (final) return "checkpoint_final.lat";
    char buf[32];
    snprintf(buf, sizeof(buf), "checkpoint_%08lld.lat", static_cast<long long>(step));
    return buf;
}

}  // namespace

int cmd_gen_data(const Config& cfg) {
    return guard([&]() {
        fs::path dir = cfg.require_string("data.dir");
        fs::create_directories(dir);
        uint64_t seed = cfg.get_u64("gen.seed");
        std::vector<int32_t> trigger = cfg.get_token_list("gen.trigger");

        std::vector<std::pair<std::string, DatasetSplit>> outputs;
        auto add = [&](const std::string& file, DatasetSplit split) {
            outputs.emplace_back(file, std::move(split));
        };
        if (cfg.get_int("gen.pairs") > 0)
            add("pref.txt", gen_preference_pairs(seed, static_cast<int>(cfg.get_int("gen.pairs"))));
        if (cfg.get_int("gen.benign") > 0)
            add("benign.txt", gen_benign(seed, static_cast<int>(cfg.get_int("gen.benign"))));
        if (cfg.get_int("gen.poisoned") > 0)
            add("poisoned.txt", gen_poisoned(seed, static_cast<int>(cfg.get_int("gen.poisoned")), trigger,
                                             cfg.get_float("gen.rho")));
        if (cfg.get_int("gen.trigger_eval") > 0)
            add("trigger_eval.txt",
                gen_trigger_eval(seed, static_cast<int>(cfg.get_int("gen.trigger_eval")), trigger));
        if (cfg.get_int("gen.clean_eval") > 0)
            add("clean_eval.txt", gen_clean_eval(seed, static_cast<int>(cfg.get_int("gen.clean_eval"))));
        if (cfg.get_int("gen.forget") > 0 || cfg.get_int("gen.retain") > 0) {
            auto [f, r] = gen_forget_retain(seed, static_cast<int>(cfg.get_int("gen.forget")),
                                            static_cast<int>(cfg.get_int("gen.retain")));
            add("forget.txt", std::move(f));
            add("retain.txt", std::move(r));
        }

        std::string manifest = "# config=" + cfg.hash_hex() + "\n";
        for (const auto& [file, split] : outputs) {
            atomic_write_file((dir / file).string(), serialize_split(split));
            char hex[17];
            snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(split.content_hash()));
            manifest += file + " " + hex + " n=" + std::to_string(split.size()) + "\n";
        }
        atomic_write_file((dir / "manifest.txt").string(), manifest);
        std::cout << manifest;
        return kExitOk;
    });
}

int cmd_train(const Config& cfg, const std::string& resume_checkpoint) {
    return guard([&]() {
        LossKind loss = loss_kind_from(cfg.get_string("loss.kind"));
        BenignMode benign = benign_mode_from(cfg.get_string("benign.mode"));
        DataBundle data = load_bundle(cfg, loss, benign, cfg.get_float("benign.kl_weight"));
        RunConfig rc = run_config_from(cfg, data);

        std::optional<Parameters> init_weights;
        std::string init_path = cfg.get_string("train.init_checkpoint");
        if (!init_path.empty()) {
            init_weights = load_checkpoint(init_path).state.params;
            rc.init_params = &*init_weights;
        }
        rc.validate();

        fs::path out_dir = cfg.require_string("out.dir");
        fs::create_directories(out_dir);
        DirLock lock(out_dir);

        const std::string echo = cfg.canonical_text();
        atomic_write_file((out_dir / "config.txt").string(), echo);

        std::string csv = metrics_csv_header(cfg.hash_hex());
        fs::path csv_path = out_dir / "metrics.csv";
        auto on_metrics = [&](const MetricsRecord& rec) {
            csv += metrics_csv_row(rec);
            atomic_write_file(csv_path.string(), csv);
        };

        int64_t ckpt_every = cfg.get_int("train.checkpoint_every");
        auto on_checkpoint = [&](const TrainState& st, bool final) {
            if (final)
                save_checkpoint((out_dir / checkpoint_name(st.step, true)).string(), st, echo);
            else if (ckpt_every > 0 && st.step % ckpt_every == 0)
                save_checkpoint((out_dir / checkpoint_name(st.step, false)).string(), st, echo);
        };

        TrainState initial;
        bool resuming = !resume_checkpoint.empty();
        if (resuming) {
            LoadedCheckpoint loaded = load_checkpoint(resume_checkpoint);
            if (loaded.config_echo != echo)
                throw ConfigError("resume: checkpoint was written under a different config");
            initial = std::move(loaded.state);
            if (fs::exists(csv_path)) csv = read_file(csv_path);
        } else {
            initial = init_state(rc);
        }

        RunResult result = run_from(rc, std::move(initial), on_metrics, on_checkpoint);
        if (result.nan_budget_exceeded) {
            std::cerr << "error: " << result.state.nan_skips << " of " << rc.total_steps
                      << " steps skipped on non-finite gradients (budget "
                      << format_float(cfg.get_float("train.nan_budget")) << ")\n";
            return kExitNanBudget;
        }
        std::cout << "trained " << result.state.step << " steps (" << result.adversarial_steps
                  << " adversarial, " << result.benign_steps << " benign), "
                  << result.state.nan_skips << " skipped\n";
        return kExitOk;
    });
}

int cmd_eval(const Config& cfg, const std::string& checkpoint_path, const std::string& out_path) {
    return guard([&]() {
        LoadedCheckpoint loaded = load_checkpoint(checkpoint_path);
        DataBundle data;
        data.trigger_eval = load_optional(cfg, "data.trigger_eval");
        data.clean_eval = load_optional(cfg, "data.clean_eval");
        data.forget = load_optional(cfg, "data.forget");
        data.retain = load_optional(cfg, "data.retain");
        RunConfig rc;
        rc.model = model_from(cfg);
        auto ptr = [](const std::optional<DatasetSplit>& s) { return s ? &*s : nullptr; };
        rc.trigger_eval = ptr(data.trigger_eval);
        rc.clean_eval = ptr(data.clean_eval);
        rc.forget = ptr(data.forget);
        rc.retain = ptr(data.retain);

        MetricsRecord rec =
            evaluate_metrics(rc, loaded.state.params, loaded.state.step, loaded.state.nan_skips);
        std::string text = metrics_csv_header(cfg.hash_hex()) + metrics_csv_row(rec);
        std::cout << text;
        if (!out_path.empty()) atomic_write_file(out_path, text);
        return kExitOk;
    });
}

int cmd_relearn(const Config& cfg, const std::string& checkpoint_path) {
    return guard([&]() {
        LoadedCheckpoint loaded = load_checkpoint(checkpoint_path);
        DatasetSplit forget = load_required(cfg, "data.forget");
        ModelConfig model = model_from(cfg);

        RelearnReport rep = relearn_attack(
            model, loaded.state.params, forget, static_cast<int>(cfg.get_int("relearn.examples")),
            static_cast<int>(cfg.get_int("relearn.iters")), cfg.get_int_list("relearn.eval_at"),
            cfg.get_float("relearn.lr"), cfg.get_float("train.momentum"), cfg.get_u64("train.seed"));

        std::string report = "# config=" + cfg.hash_hex() + "\n";
        report += "n_examples = " + std::to_string(rep.n_examples) + "\n";
        report += "iters = " + std::to_string(rep.iters) + "\n";
        report += "unlearned_accuracy = " + format_float(rep.initial_accuracy) + "\n";
        for (const auto& [it, acc] : rep.checkpoints)
            report += "accuracy_at_" + std::to_string(it) + " = " + format_float(acc) + "\n";
        report += "max_accuracy = " + format_float(rep.max_accuracy) + "\n";

        std::string base_path = cfg.get_string("relearn.base_checkpoint");
        if (!base_path.empty()) {
            LoadedCheckpoint base = load_checkpoint(base_path);
            float base_acc = accuracy_and_perplexity(model, base.state.params, forget).first;
            report += "base_accuracy = " + format_float(base_acc) + "\n";
            std::optional<float> gap = gap_closed(base_acc, rep.initial_accuracy, rep.max_accuracy);
            report += "gap_closed = " + (gap ? format_float(*gap) : std::string("undefined")) + "\n";
        }

        std::cout << report;
        std::string out_dir = cfg.get_string("out.dir");
        if (!out_dir.empty()) {
            fs::create_directories(out_dir);
            atomic_write_file((fs::path(out_dir) / "relearn.txt").string(), report);
        }
        return kExitOk;
    });
}

int cmd_plot(const std::string& csv_path, const std::string& out_dir) {
    return guard([&]() {
        ParsedCsv csv = parse_metrics_csv(read_file(csv_path));
        if (csv.columns.empty()) throw IoError("plot: no header found in '" + csv_path + "'");
        std::map<std::string, std::string> files = render_metric_plots(csv);
        fs::create_directories(out_dir);
        for (const auto& [name, svg] : files) {
            atomic_write_file((fs::path(out_dir) / name).string(), svg);
            std::cout << "wrote " << (fs::path(out_dir) / name).string() << "\n";
        }
        if (files.empty()) std::cout << "no plottable series found\n";
        return kExitOk;
    });
}

}  // namespace lat
