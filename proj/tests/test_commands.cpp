#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "flowcast/commands.hpp"

using namespace flowcast;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path temp_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("flowcast_cmd_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Tiny but trainable configuration; hourly synthetic data keeps runs fast.
std::string tiny_config_json(uint64_t seed, bool use_gat = true) {
    json j;
    j["model"] = {{"T", 4},          {"T_prime", 4}, {"d_f", 2},
                  {"d_a", 2},        {"num_layers", 1}, {"num_heads", 2},
                  {"d_state", 2},    {"use_gat", use_gat}, {"use_temporal_mamba", true},
                  {"use_spatial_mamba", true}};
    j["train"] = {{"max_epochs", 2}, {"seed", seed}};
    return j.dump();
}

struct Pipeline {
    fs::path data;
    fs::path run;

    static Pipeline make(const std::string& tag, uint64_t seed, const std::string& config) {
        Pipeline p;
        p.data = temp_dir(tag + "_data");
        p.run = temp_dir(tag + "_run");
        SynthOptions options;
        options.interval_minutes = 60;
        TrafficDataset ds = synth_dataset(4, 5, seed, options);
        save_dataset(ds, p.data.string());
        RunConfig cfg = RunConfig::from_json_text(config);
        run_train(cfg, p.data.string(), p.run.string());
        return p;
    }

    fs::path checkpoint() const { return run / "checkpoint"; }
};

}  // namespace

TEST_CASE("run config defaults follow the protocol") {
    RunConfig cfg = RunConfig::from_json_text("{}");
    CHECK(cfg.model.d_f == 24);
    CHECK(cfg.model.d_a == 80);
    CHECK(cfg.model.num_layers == 3);
    CHECK(cfg.model.num_heads == 4);
    CHECK(cfg.train.lr == 1e-3);
    CHECK(cfg.train.batch_size == 16);
    CHECK(cfg.train.patience == 30);
    CHECK(cfg.attention_threshold == 0.1);
    CHECK(cfg.peak_window == 12);
    CHECK(cfg.ratios.train == 7.0);
}

TEST_CASE("unknown keys and type errors are reported together") {
    const std::string bad = R"({
        "model": {"d_f": 8, "bogus": 1, "num_heads": "four"},
        "train": {"lr": 0.01, "also_bogus": true},
        "extra_section": {}
    })";
    try {
        RunConfig::from_json_text(bad);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("bogus") != std::string::npos);
        CHECK(msg.find("also_bogus") != std::string::npos);
        CHECK(msg.find("extra_section") != std::string::npos);
        CHECK(msg.find("num_heads") != std::string::npos);
    }
    CHECK_THROWS_AS(RunConfig::from_json_text("{\"train\": {\"lr\": -1}}"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text("not json"), ConfigError);
}

TEST_CASE("config round-trips through its JSON form") {
    RunConfig cfg = RunConfig::from_json_text(
        R"({"model": {"d_f": 4, "d_a": 4, "num_heads": 2}, "train": {"seed": 9}})");
    RunConfig back = RunConfig::from_json_text(cfg.to_json_text());
    CHECK(back.model.d_f == 4);
    CHECK(back.train.seed == 9);
    CHECK(back.model.num_layers == cfg.model.num_layers);
}

TEST_CASE("synth command writes a loadable, deterministic directory") {
    auto out1 = temp_dir("synth1");
    auto out2 = temp_dir("synth2");
    run_synth({5, 1, 7, out1.string(), 0.02});
    run_synth({5, 1, 7, out2.string(), 0.02});
    TrafficDataset ds = load_dataset(out1.string());
    CHECK(ds.num_nodes == 5);
    CHECK(read_file(out1 / "flow.csv") == read_file(out2 / "flow.csv"));

    CHECK_THROWS_AS(run_synth({1, 1, 7, temp_dir("synth3").string(), 0.0}), ValueError);
}

TEST_CASE("train writes checkpoint, history and merged config") {
    Pipeline p = Pipeline::make("train", 3, tiny_config_json(3));
    CHECK(fs::exists(p.checkpoint() / "manifest.json"));
    CHECK(fs::exists(p.checkpoint() / "params.bin"));
    CHECK(fs::exists(p.checkpoint() / "config.json"));
    CHECK(fs::exists(p.run / "history.csv"));
    CHECK(fs::exists(p.run / "config.json"));

    const std::string history = read_file(p.run / "history.csv");
    CHECK(history.find("epoch,train_loss,val_mae,val_rmse,val_mape,is_best") == 0);
    CHECK(history.find('\n') != history.rfind('\n'));  // at least one data row

    // merged config parses back and names the data dir
    RunConfig merged = RunConfig::from_json_file((p.run / "config.json").string());
    CHECK(merged.data_dir == p.data.string());
}

TEST_CASE("ablated checkpoints carry no attention parameters") {
    Pipeline p = Pipeline::make("ablate", 5, tiny_config_json(5, /*use_gat=*/false));
    const std::string manifest = read_file(p.checkpoint() / "manifest.json");
    CHECK(manifest.find("gat") == std::string::npos);
    CHECK(manifest.find("mamba_t") != std::string::npos);
}

TEST_CASE("eval, predict and analyze over a trained run") {
    Pipeline p = Pipeline::make("full", 11, tiny_config_json(11));
    auto out = temp_dir("full_out");

    SUBCASE("eval writes per-horizon and average metrics") {
        const auto report_path = out / "eval.json";
        run_eval(p.checkpoint().string(), p.data.string(), "test", report_path.string());
        json report = json::parse(read_file(report_path));
        CHECK(report.contains("horizon_1"));
        CHECK(report.contains("horizon_4"));
        CHECK(report.contains("avg"));
        CHECK(report["avg"].contains("mape"));

        CHECK_THROWS_WITH_AS(
            run_eval(p.checkpoint().string(), p.data.string(), "bogus", report_path.string()),
            doctest::Contains("train, val, test"), ConfigError);
    }

    SUBCASE("predict writes one row per node and horizon") {
        const auto csv_path = out / "prediction.csv";
        run_predict(p.checkpoint().string(), p.data.string(), 0, csv_path.string());
        const std::string csv = read_file(csv_path);
        CHECK(csv.find("node,horizon,y_true,y_pred,masked") == 0);
        const auto rows = std::count(csv.begin(), csv.end(), '\n');
        CHECK(rows == 1 + 4 * 4);  // header + nodes * horizons

        CHECK_THROWS_AS(
            run_predict(p.checkpoint().string(), p.data.string(), 99999, csv_path.string()),
            ConfigError);
    }

    SUBCASE("analyze ssm emits spectra and stable verdicts") {
        run_analyze(p.checkpoint().string(), p.data.string(), "ssm", out.string());
        CHECK(fs::exists(out / "ssm_trace.csv"));
        CHECK(fs::exists(out / "svd.csv"));
        json verdicts = json::parse(read_file(out / "svd_verdicts.json"));
        REQUIRE(verdicts.is_array());
        CHECK(verdicts.size() == 2);  // one temporal + one spatial layer
        for (const auto& v : verdicts) {
            CHECK(v.at("stable").get<bool>());
            CHECK(v.at("max_sigma").get<double>() < 1.0);
        }
    }

    SUBCASE("analyze attention emits graphs, communities and reorderings") {
        run_analyze(p.checkpoint().string(), p.data.string(), "attention", out.string(), 0.1, 12);
        for (const char* axis : {"temporal", "spatial"}) {
            CHECK(fs::exists(out / ("attention_" + std::string(axis) + ".csv")));
            CHECK(fs::exists(out / ("communities_" + std::string(axis) + ".csv")));
            CHECK(fs::exists(out / ("adjacency_" + std::string(axis) + ".csv")));
            CHECK(fs::exists(out / ("permutation_" + std::string(axis) + ".csv")));
        }
        const std::string communities = read_file(out / "communities_spatial.csv");
        CHECK(communities.find("node,community") == 0);
    }

    SUBCASE("analyze attention with an impossible threshold yields singletons") {
        run_analyze(p.checkpoint().string(), p.data.string(), "attention", out.string(), 1.1, 12);
        json summary = json::parse(read_file(out / "communities_spatial.json"));
        CHECK(summary.at("num_edges").get<int64_t>() == 0);
        CHECK(summary.at("num_communities").get<int64_t>() == 4);
    }

    SUBCASE("analyze peaks fits every node") {
        run_analyze(p.checkpoint().string(), p.data.string(), "peaks", out.string(), 0.1, 4);
        const std::string peaks = read_file(out / "peaks.csv");
        CHECK(peaks.find("node,slope,intercept,r2,num_pairs") == 0);
    }

    SUBCASE("unknown analysis is rejected with the valid list") {
        CHECK_THROWS_WITH_AS(
            run_analyze(p.checkpoint().string(), p.data.string(), "wat", out.string()),
            doctest::Contains("ssm, attention, peaks"), ConfigError);
    }
}

TEST_CASE("corrupt flow.csv fails loudly with the line number") {
    auto data = temp_dir("corrupt");
    SynthOptions options;
    options.interval_minutes = 60;
    save_dataset(synth_dataset(3, 1, 2, options), data.string());
    {
        std::ofstream out(data / "flow.csv", std::ios::app);
        out << "2024-01-02T00:00:00,1.0\n";  // ragged row
    }
    RunConfig cfg = RunConfig::from_json_text(tiny_config_json(1));
    CHECK_THROWS_WITH_AS(run_train(cfg, data.string(), temp_dir("corrupt_run").string()),
                         doctest::Contains("line"), IoError);
}
