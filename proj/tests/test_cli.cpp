#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "lat/checkpoint.hpp"
#include "lat/cli_cmds.hpp"
#include "lat/config.hpp"
#include "lat/reporting.hpp"
#include "lat/taskgen.hpp"
#include "lat/trainer.hpp"

namespace fs = std::filesystem;
using namespace lat;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("latforge_test_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string tiny_train_config(const fs::path& data, const fs::path& out) {
    return "model.layers = 1\n"
           "model.d_model = 8\n"
           "model.heads = 2\n"
           "loss.kind = sft\n"
           "benign.mode = none\n"
           "data.dir = " + data.string() + "\n"
           "data.train = forget.txt\n"
           "train.steps = 6\n"
           "train.batch = 2\n"
           "train.eval_every = 3\n"
           "gen.forget = 8\n"
           "gen.retain = 8\n"
           "gen.pairs = 0\n"
           "gen.benign = 0\n"
           "gen.poisoned = 0\n"
           "gen.trigger_eval = 0\n"
           "gen.clean_eval = 0\n"
           "out.dir = " + out.string() + "\n";
}

}  // namespace

TEST_CASE("config canonicalization ignores order, comments and formatting") {
    Config a = Config::parse("train.lr = 0.003\nmodel.layers = 2 # two\n");
    Config b = Config::parse("# comment\nmodel.layers =   2\ntrain.lr=3e-3\n");
    CHECK(a.canonical_text() == b.canonical_text());
    CHECK(a.hash_hex() == b.hash_hex());

    Config c = Config::parse("model.layers = 3\n");
    CHECK(a.hash_hex() != c.hash_hex());

    // stating a default explicitly hashes like omitting it
    Config d = Config::parse("train.lr = 0.003\nmodel.layers = 2\ntrain.batch = 8\n");
    CHECK(d.hash_hex() == a.hash_hex());
}

TEST_CASE("config rejects unknown keys and malformed values") {
    CHECK_THROWS_AS(Config::parse("model.depth = 4\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse("model.layers = soon\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse("just a line\n"), ConfigError);
    CHECK_THROWS_WITH_AS(Config::parse("").require_string("data.dir"),
                         doctest::Contains("data.dir"), ConfigError);
}

TEST_CASE("checkpoint round-trip is bitwise and detects corruption") {
    TempDir tmp;
    ModelConfig mc;
    mc.n_layers = 1;
    mc.d_model = 8;
    mc.n_heads = 2;
    TrainState st;
    st.params = init_parameters(mc, 5);
    st.step = 42;
    st.nan_skips = 3;
    for (const auto& [name, t] : st.params.entries) st.momentum.emplace_back(name, Tensor::zeros(t.shape));
    st.momentum[0].second.f[0] = 0.25f;

    fs::path file = tmp.path / "ck.lat";
    save_checkpoint(file.string(), st, "config echo\n");
    LoadedCheckpoint back = load_checkpoint(file.string());
    CHECK(back.config_echo == "config echo\n");
    CHECK(back.state.step == 42);
    CHECK(back.state.nan_skips == 3);
    REQUIRE(back.state.params.entries.size() == st.params.entries.size());
    for (size_t i = 0; i < st.params.entries.size(); ++i) {
        CHECK(back.state.params.entries[i].first == st.params.entries[i].first);
        CHECK(bitwise_equal(back.state.params.entries[i].second, st.params.entries[i].second));
    }
    REQUIRE(back.state.momentum.size() == st.momentum.size());
    CHECK(back.state.momentum[0].second.f[0] == 0.25f);

    // flip one byte in the middle: the checksum must catch it
    std::string bytes = slurp(file);
    bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x40);
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    out << bytes;
    out.close();
    CHECK_THROWS_AS(load_checkpoint(file.string()), IoError);
}

TEST_CASE("metrics csv writes fixed columns with empty cells for missing metrics") {
    MetricsRecord rec;
    rec.step = 10;
    rec.defense_loss = 1.5f;
    rec.nan_skips = 2;
    std::string row = metrics_csv_row(rec);
    CHECK(row == "10,,1.5,,,,,,,,,2\n");
    std::string header = metrics_csv_header("abc");
    ParsedCsv parsed = parse_metrics_csv(header + row);
    REQUIRE(parsed.columns.size() == metrics_csv_columns().size());
    REQUIRE(parsed.rows.size() == 1);
    CHECK(!parsed.rows[0][1].has_value());
    CHECK(parsed.rows[0][2].value() == doctest::Approx(1.5f));
}

TEST_CASE("plots carry one data point per csv row for each series") {
    std::string csv = metrics_csv_header("x");
    MetricsRecord a, b;
    a.step = 0;
    a.defense_loss = 2.0f;
    a.attack_loss = 1.0f;
    b.step = 10;
    b.defense_loss = 1.0f;
    b.attack_loss = 0.5f;
    csv += metrics_csv_row(a) + metrics_csv_row(b);
    auto files = render_metric_plots(parse_metrics_csv(csv));
    REQUIRE(files.count("losses.svg") == 1);
    const std::string& svg = files["losses.svg"];
    size_t count = 0, at = 0;
    while ((at = svg.find("<circle class=\"point-defense_loss\"", at)) != std::string::npos) {
        ++count;
        ++at;
    }
    CHECK(count == 2);
}

TEST_CASE("gen-data is reproducible and records hashes in the manifest") {
    TempDir tmp;
    Config cfg = Config::parse("data.dir = " + (tmp.path / "data").string() + "\n");
    REQUIRE(cmd_gen_data(cfg) == kExitOk);
    std::string manifest1 = slurp(tmp.path / "data" / "manifest.txt");
    REQUIRE(cmd_gen_data(cfg) == kExitOk);
    std::string manifest2 = slurp(tmp.path / "data" / "manifest.txt");
    CHECK(manifest1 == manifest2);
    CHECK(manifest1.find("pref.txt") != std::string::npos);
    CHECK(manifest1.find("# config=") != std::string::npos);

    DatasetSplit pref = parse_split(slurp(tmp.path / "data" / "pref.txt"));
    CHECK(pref.size() == 256);
}

TEST_CASE("train + eval round trip through the command layer") {
    TempDir tmp;
    fs::path data = tmp.path / "data";
    fs::path out = tmp.path / "run";
    Config cfg = Config::parse(tiny_train_config(data, out));
    REQUIRE(cmd_gen_data(cfg) == kExitOk);
    REQUIRE(cmd_train(cfg) == kExitOk);

    CHECK(fs::exists(out / "metrics.csv"));
    CHECK(fs::exists(out / "config.txt"));
    CHECK(fs::exists(out / "checkpoint_final.lat"));
    CHECK(!fs::exists(out / ".lock"));

    std::string csv = slurp(out / "metrics.csv");
    CHECK(csv.find("# config=" + cfg.hash_hex()) == 0);

    // rerunning the identical config reproduces the csv byte for byte
    fs::path out2 = tmp.path / "run2";
    Config cfg2 = Config::parse(tiny_train_config(data, out2));
    REQUIRE(cmd_train(cfg2) == kExitOk);
    std::string csv1 = slurp(out / "metrics.csv");
    std::string csv2 = slurp(out2 / "metrics.csv");
    // the config hash differs only through out.dir; compare the data rows
    CHECK(csv1.substr(csv1.find('\n')) == csv2.substr(csv2.find('\n')));

    LoadedCheckpoint final1 = load_checkpoint((out / "checkpoint_final.lat").string());
    LoadedCheckpoint final2 = load_checkpoint((out2 / "checkpoint_final.lat").string());
    for (size_t i = 0; i < final1.state.params.entries.size(); ++i)
        CHECK(bitwise_equal(final1.state.params.entries[i].second, final2.state.params.entries[i].second));
}

TEST_CASE("resume continues the step numbering to the same final state") {
    TempDir tmp;
    fs::path data = tmp.path / "data";
    fs::path full_out = tmp.path / "full";
    fs::path half_out = tmp.path / "half";

    Config gen_cfg = Config::parse(tiny_train_config(data, full_out));
    REQUIRE(cmd_gen_data(gen_cfg) == kExitOk);

    // full run in one go
    Config full = Config::parse(tiny_train_config(data, full_out));
    REQUIRE(cmd_train(full) == kExitOk);

    // half now, half resumed
    std::string half_text = tiny_train_config(data, half_out);
    half_text.replace(half_text.find("train.steps = 6"), 15, "train.steps = 3");
    Config half = Config::parse(half_text);
    REQUIRE(cmd_train(half) == kExitOk);
    LoadedCheckpoint mid = load_checkpoint((half_out / "checkpoint_final.lat").string());
    CHECK(mid.state.step == 3);

    fs::path resumed_out = tmp.path / "resumed";
    std::string resumed_text = tiny_train_config(data, resumed_out);
    Config resumed = Config::parse(resumed_text);
    // resume requires the checkpoint's config echo to match; rewrite the half
    // checkpoint under the resumed config's echo
    save_checkpoint((half_out / "mid.lat").string(), mid.state, resumed.canonical_text());
    REQUIRE(cmd_train(resumed, (half_out / "mid.lat").string()) == kExitOk);

    LoadedCheckpoint a = load_checkpoint((full_out / "checkpoint_final.lat").string());
    LoadedCheckpoint b = load_checkpoint((resumed_out / "checkpoint_final.lat").string());
    CHECK(a.state.step == b.state.step);
    for (size_t i = 0; i < a.state.params.entries.size(); ++i)
        CHECK(bitwise_equal(a.state.params.entries[i].second, b.state.params.entries[i].second));
}

TEST_CASE("the run directory lock rejects concurrent writers") {
    TempDir tmp;
    fs::path data = tmp.path / "data";
    fs::path out = tmp.path / "run";
    Config cfg = Config::parse(tiny_train_config(data, out));
    REQUIRE(cmd_gen_data(cfg) == kExitOk);
    fs::create_directories(out);
    std::ofstream lock(out / ".lock");
    lock << "999999\n";
    lock.close();
    CHECK(cmd_train(cfg) == kExitIo);
    fs::remove(out / ".lock");
    CHECK(cmd_train(cfg) == kExitOk);
}

TEST_CASE("missing datasets and nan budget produce the documented exit codes") {
    TempDir tmp;
    fs::path data = tmp.path / "data";
    fs::path out = tmp.path / "run";
    Config cfg = Config::parse(tiny_train_config(data, out));
    CHECK(cmd_train(cfg) == kExitIo);  // nothing generated yet

    REQUIRE(cmd_gen_data(cfg) == kExitOk);
    std::string text = tiny_train_config(data, tmp.path / "run3");
    text += "train.lr = 1e8\n";  // blows up, then every gradient is non-finite
    text += "train.nan_budget = 0.01\n";
    Config hot = Config::parse(text);
    CHECK(cmd_train(hot) == kExitNanBudget);
}

TEST_CASE("eval of a saved checkpoint is byte-identical across invocations") {
    TempDir tmp;
    fs::path data = tmp.path / "data";
    fs::path out = tmp.path / "run";
    std::string text = tiny_train_config(data, out);
    text.replace(text.find("gen.forget = 8"), 14, "gen.forget = 6");
    Config cfg = Config::parse(text);
    REQUIRE(cmd_gen_data(cfg) == kExitOk);
    REQUIRE(cmd_train(cfg) == kExitOk);

    fs::path row1 = tmp.path / "row1.csv";
    fs::path row2 = tmp.path / "row2.csv";
    REQUIRE(cmd_eval(cfg, (out / "checkpoint_final.lat").string(), row1.string()) == kExitOk);
    REQUIRE(cmd_eval(cfg, (out / "checkpoint_final.lat").string(), row2.string()) == kExitOk);
    CHECK(slurp(row1) == slurp(row2));
    CHECK(!slurp(row1).empty());
}

TEST_CASE("relearn command follows the standard protocol defaults") {
    TempDir tmp;
    fs::path data = tmp.path / "data";
    fs::path out = tmp.path / "run";
    Config cfg = Config::parse(tiny_train_config(data, out));
    REQUIRE(cmd_gen_data(cfg) == kExitOk);
    REQUIRE(cmd_train(cfg) == kExitOk);

    CHECK(cfg.get_int("relearn.examples") == 2);
    CHECK(cfg.get_int("relearn.iters") == 20);
    CHECK(cfg.get_int_list("relearn.eval_at") == std::vector<int>{5, 10, 20});

    // capture stdout via the written report file
    REQUIRE(cmd_relearn(cfg, (out / "checkpoint_final.lat").string()) == kExitOk);
    std::string report = slurp(out / "relearn.txt");
    CHECK(report.find("n_examples = 2") != std::string::npos);
    CHECK(report.find("iters = 20") != std::string::npos);
    CHECK(report.find("accuracy_at_5 = ") != std::string::npos);
    CHECK(report.find("accuracy_at_10 = ") != std::string::npos);
    CHECK(report.find("accuracy_at_20 = ") != std::string::npos);
    CHECK(report.find("max_accuracy = ") != std::string::npos);
}

TEST_CASE("periodic checkpoints land at the configured cadence") {
    TempDir tmp;
    fs::path data = tmp.path / "data";
    fs::path out = tmp.path / "run";
    std::string text = tiny_train_config(data, out) + "train.checkpoint_every = 2\n";
    Config cfg = Config::parse(text);
    REQUIRE(cmd_gen_data(cfg) == kExitOk);
    REQUIRE(cmd_train(cfg) == kExitOk);
    CHECK(fs::exists(out / "checkpoint_00000002.lat"));
    CHECK(fs::exists(out / "checkpoint_00000004.lat"));
    CHECK(fs::exists(out / "checkpoint_final.lat"));
}

TEST_CASE("plot command renders charts from a training csv") {
    TempDir tmp;
    fs::path data = tmp.path / "data";
    fs::path out = tmp.path / "run";
    Config cfg = Config::parse(tiny_train_config(data, out));
    REQUIRE(cmd_gen_data(cfg) == kExitOk);
    REQUIRE(cmd_train(cfg) == kExitOk);
    REQUIRE(cmd_plot((out / "metrics.csv").string(), (tmp.path / "plots").string()) == kExitOk);
    CHECK(fs::exists(tmp.path / "plots" / "losses.svg"));
    std::string svg = slurp(tmp.path / "plots" / "losses.svg");
    CHECK(svg.find("<svg") != std::string::npos);
}
