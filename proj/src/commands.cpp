#include "flowcast/commands.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <json.hpp>

#include "flowcast/analysis.hpp"

namespace flowcast {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

namespace {

void check_keys(const json& j, const std::set<std::string>& known, const std::string& where,
                std::vector<std::string>& problems) {
    for (const auto& [key, value] : j.items()) {
        if (!known.count(key)) problems.push_back(where + ": unknown key '" + key + "'");
    }
}

template <typename T>
void read_field(const json& j, const char* key, T* out, const std::string& where,
                std::vector<std::string>& problems) {
    if (!j.contains(key)) return;
    try {
        *out = j.at(key).get<T>();
    } catch (const json::exception&) {
        problems.push_back(where + ": field '" + std::string(key) + "' has the wrong type");
    }
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }

    RunConfig cfg;
    std::vector<std::string> problems;
    check_keys(j, {"data", "model", "train", "analysis"}, "config", problems);

    if (j.contains("data")) {
        const auto& d = j["data"];
        check_keys(d, {"dir", "split_ratios"}, "data", problems);
        read_field(d, "dir", &cfg.data_dir, "data", problems);
        if (d.contains("split_ratios")) {
            try {
                const auto r = d.at("split_ratios").get<std::vector<double>>();
                if (r.size() != 3) {
                    problems.push_back("data.split_ratios: expected exactly 3 values");
                } else {
                    cfg.ratios = {r[0], r[1], r[2]};
                }
            } catch (const json::exception&) {
                problems.push_back("data.split_ratios: expected an array of numbers");
            }
        }
    }
    if (j.contains("model")) {
        const auto& m = j["model"];
        check_keys(m,
                   {"T", "T_prime", "d_f", "d_a", "num_layers", "num_heads", "d_state", "use_gat",
                    "use_temporal_mamba", "use_spatial_mamba"},
                   "model", problems);
        read_field(m, "T", &cfg.model.t_in, "model", problems);
        read_field(m, "T_prime", &cfg.model.t_out, "model", problems);
        read_field(m, "d_f", &cfg.model.d_f, "model", problems);
        read_field(m, "d_a", &cfg.model.d_a, "model", problems);
        read_field(m, "num_layers", &cfg.model.num_layers, "model", problems);
        read_field(m, "num_heads", &cfg.model.num_heads, "model", problems);
        read_field(m, "d_state", &cfg.model.d_state, "model", problems);
        read_field(m, "use_gat", &cfg.model.use_gat, "model", problems);
        read_field(m, "use_temporal_mamba", &cfg.model.use_temporal_mamba, "model", problems);
        read_field(m, "use_spatial_mamba", &cfg.model.use_spatial_mamba, "model", problems);
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        check_keys(t,
                   {"lr", "batch_size", "patience", "max_epochs", "seed",
                    "max_batches_per_epoch"},
                   "train", problems);
        read_field(t, "lr", &cfg.train.lr, "train", problems);
        read_field(t, "batch_size", &cfg.train.batch_size, "train", problems);
        read_field(t, "patience", &cfg.train.patience, "train", problems);
        read_field(t, "max_epochs", &cfg.train.max_epochs, "train", problems);
        read_field(t, "seed", &cfg.train.seed, "train", problems);
        read_field(t, "max_batches_per_epoch", &cfg.train.max_batches_per_epoch, "train",
                   problems);
    }
    if (j.contains("analysis")) {
        const auto& a = j["analysis"];
        check_keys(a, {"attention_threshold", "peak_window"}, "analysis", problems);
        read_field(a, "attention_threshold", &cfg.attention_threshold, "analysis", problems);
        read_field(a, "peak_window", &cfg.peak_window, "analysis", problems);
    }

    // Structural checks, reported together with the key problems.
    if (problems.empty()) {
        try {
            cfg.model.validate();
        } catch (const ConfigError& e) {
            problems.push_back(e.what());
        }
        try {
            cfg.train.validate();
        } catch (const ConfigError& e) {
            problems.push_back(e.what());
        }
        if (cfg.peak_window < 1) problems.push_back("analysis.peak_window must be >= 1");
    }
    if (!problems.empty()) {
        std::string message = "invalid config:";
        for (const auto& p : problems) message += "\n  - " + p;
        throw ConfigError(message);
    }
    return cfg;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

std::string RunConfig::to_json_text() const {
    json j;
    j["data"] = {{"dir", data_dir}, {"split_ratios", {ratios.train, ratios.val, ratios.test}}};
    j["model"] = {{"T", model.t_in},
                  {"T_prime", model.t_out},
                  {"d_f", model.d_f},
                  {"d_a", model.d_a},
                  {"num_layers", model.num_layers},
                  {"num_heads", model.num_heads},
                  {"d_state", model.d_state},
                  {"use_gat", model.use_gat},
                  {"use_temporal_mamba", model.use_temporal_mamba},
                  {"use_spatial_mamba", model.use_spatial_mamba}};
    j["train"] = {{"lr", train.lr},
                  {"batch_size", train.batch_size},
                  {"patience", train.patience},
                  {"max_epochs", train.max_epochs},
                  {"seed", train.seed},
                  {"max_batches_per_epoch", train.max_batches_per_epoch}};
    j["analysis"] = {{"attention_threshold", attention_threshold},
                     {"peak_window", peak_window}};
    return j.dump(2) + "\n";
}

void RunConfig::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write config to " + path);
    out << to_json_text();
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

void run_synth(const SynthArgs& args) {
    SynthOptions options;
    options.dropout_fraction = args.dropout;
    TrafficDataset ds = synth_dataset(args.nodes, args.days, args.seed, options);
    save_dataset(ds, args.out_dir);
}

double run_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir) {
    TrafficDataset dataset = load_dataset(data_dir);
    fs::create_directories(out_dir);

    RunConfig merged = cfg;
    merged.data_dir = data_dir;
    merged.save((fs::path(out_dir) / "config.json").string());

    TrainResult result = train(dataset, cfg.model, cfg.train, cfg.ratios);
    save_checkpoint((fs::path(out_dir) / "checkpoint").string(), result.model, result.stats,
                    cfg.train.seed, cfg.ratios);
    write_history_csv((fs::path(out_dir) / "history.csv").string(), result.history);
    return result.best_val_mae;
}

namespace {

Range named_range(const std::string& split_name, const SplitRanges& ranges) {
    if (split_name == "train") return ranges.train;
    if (split_name == "val") return ranges.val;
    if (split_name == "test") return ranges.test;
    throw ConfigError("unknown split '" + split_name + "'; valid values: train, val, test");
}

struct LoadedCheckpoint {
    CheckpointMeta meta;
    TrafficDataset dataset;
    Model model;
    SplitRanges ranges;
};

LoadedCheckpoint load_for_inference(const std::string& checkpoint_dir,
                                    const std::string& data_dir) {
    CheckpointMeta meta = load_checkpoint_meta(checkpoint_dir);
    TrafficDataset dataset = load_dataset(data_dir);
    Model model = load_checkpoint_model(checkpoint_dir, dataset.topology);
    SplitRanges ranges = split(dataset.t_total, meta.ratios);
    return {std::move(meta), std::move(dataset), std::move(model), ranges};
}

}  // namespace

void run_eval(const std::string& checkpoint_dir, const std::string& data_dir,
              const std::string& split_name, const std::string& out_path) {
    LoadedCheckpoint ck = load_for_inference(checkpoint_dir, data_dir);
    const Range range = named_range(split_name, ck.ranges);
    EvalReport report = evaluate(ck.model, ck.meta.stats, ck.dataset, range);
    write_eval_report_json(out_path, report);
}

void run_predict(const std::string& checkpoint_dir, const std::string& data_dir,
                 int64_t window_index, const std::string& out_path) {
    LoadedCheckpoint ck = load_for_inference(checkpoint_dir, data_dir);
    const auto& cfg = ck.model.config();
    auto windows =
        make_windows(ck.dataset, ck.ranges.test, cfg.t_in, cfg.t_out, ck.meta.stats);
    if (window_index < 0 || window_index >= static_cast<int64_t>(windows.size())) {
        throw ConfigError("window index " + std::to_string(window_index) +
                          " outside [0, " + std::to_string(windows.size()) + ")");
    }
    const auto raw = predict_batch_raw(ck.model, ck.meta.stats, windows,
                                       static_cast<size_t>(window_index),
                                       static_cast<size_t>(window_index) + 1);
    const auto& w = windows[window_index];
    std::ofstream out(out_path);
    if (!out) throw IoError("cannot write " + out_path);
    out << "node,horizon,y_true,y_pred,masked\n";
    for (int64_t n = 0; n < ck.dataset.num_nodes; ++n) {
        for (int64_t h = 0; h < cfg.t_out; ++h) {
            const int64_t i = n * cfg.t_out + h;
            out << n << ',' << (h + 1) << ',' << w.y.at(i) << ',' << raw[i] << ','
                << (w.y_mask[i] ? 0 : 1) << "\n";
        }
    }
}

namespace {

void write_scan_reports(const std::vector<ScanTraceEntry>& traces, const fs::path& out_dir) {
    if (traces.empty()) {
        throw ConfigError("checkpoint has no scan stages to analyze (both scan axes disabled)");
    }
    std::ofstream trace_csv(out_dir / "ssm_trace.csv");
    trace_csv << "layer,axis,channel,state,abar_mean\n";
    std::ofstream svd_csv(out_dir / "svd.csv");
    svd_csv << "layer,axis,rank,sigma\n";
    json verdicts = json::array();
    for (const auto& entry : traces) {
        const auto& tr = entry.trace;
        for (int64_t c = 0; c < tr.d_inner; ++c) {
            for (int64_t g = 0; g < tr.d_state; ++g) {
                trace_csv << entry.layer << ',' << entry.axis << ',' << c << ',' << g << ','
                          << tr.abar_mean[c * tr.d_state + g] << "\n";
            }
        }
        SvdReport report = svd_from_diagonal(tr.abar_mean);
        for (size_t r = 0; r < report.singular_values.size(); ++r) {
            svd_csv << entry.layer << ',' << entry.axis << ',' << r << ','
                    << report.singular_values[r] << "\n";
        }
        verdicts.push_back({{"layer", entry.layer},
                            {"axis", entry.axis},
                            {"stable", report.stable},
                            {"max_sigma", report.singular_values.front()}});
        write_spectrum_svg((out_dir / ("spectrum_" + entry.axis + "_layer" +
                                       std::to_string(entry.layer) + ".svg"))
                               .string(),
                           report.singular_values);
    }
    std::ofstream verdict_out(out_dir / "svd_verdicts.json");
    verdict_out << verdicts.dump(2) << "\n";
}

void write_attention_reports(const AttentionSnapshot& snapshot, const std::string& axis,
                             int64_t num_nodes, double threshold, const fs::path& out_dir) {
    {
        std::ofstream out(out_dir / ("attention_" + axis + ".csv"));
        out << "src,dst,head,weight\n";
        for (size_t e = 0; e < snapshot.edges.size(); ++e) {
            for (int64_t h = 0; h < snapshot.num_heads; ++h) {
                out << snapshot.edges[e].first << ',' << snapshot.edges[e].second << ',' << h
                    << ',' << snapshot.weight(static_cast<int64_t>(e), h) << "\n";
            }
        }
    }
    WeightedGraph graph = build_attention_graph(snapshot, num_nodes, threshold);
    CommunityReport communities = louvain(graph);
    communities.threshold = threshold;
    {
        std::ofstream out(out_dir / ("communities_" + axis + ".csv"));
        out << "node,community\n";
        for (int64_t n = 0; n < num_nodes; ++n) out << n << ',' << communities.assignment[n] << "\n";
    }
    ReorderedAdjacency reordered = reorder_adjacency(graph, communities);
    {
        std::ofstream out(out_dir / ("adjacency_" + axis + ".csv"));
        for (int64_t i = 0; i < num_nodes; ++i) {
            for (int64_t j = 0; j < num_nodes; ++j) {
                if (j) out << ',';
                out << reordered.matrix[i * num_nodes + j];
            }
            out << "\n";
        }
    }
    {
        std::ofstream out(out_dir / ("permutation_" + axis + ".csv"));
        out << "position,node\n";
        for (int64_t p = 0; p < num_nodes; ++p) out << p << ',' << reordered.permutation[p] << "\n";
    }
    {
        json summary = {{"axis", axis},
                        {"threshold", threshold},
                        {"num_edges", graph.edges.size()},
                        {"num_communities", communities.num_communities()},
                        {"modularity", communities.modularity}};
        std::ofstream out(out_dir / ("communities_" + axis + ".json"));
        out << summary.dump(2) << "\n";
    }
}

}  // namespace

void run_analyze(const std::string& checkpoint_dir, const std::string& data_dir,
                 const std::string& what, const std::string& out_dir,
                 double attention_threshold, int64_t peak_window) {
    if (what != "ssm" && what != "attention" && what != "peaks") {
        throw ConfigError("unknown analysis '" + what + "'; valid values: ssm, attention, peaks");
    }
    LoadedCheckpoint ck = load_for_inference(checkpoint_dir, data_dir);
    const auto& cfg = ck.model.config();
    fs::create_directories(out_dir);
    const fs::path out_path(out_dir);

    auto test_windows =
        make_windows(ck.dataset, ck.ranges.test, cfg.t_in, cfg.t_out, ck.meta.stats);

    if (what == "ssm" || what == "attention") {
        // Probe batch: leading test windows.
        const size_t probe = std::min<size_t>(test_windows.size(), 16);
        std::vector<double> x(probe * cfg.t_in * ck.dataset.num_nodes * 3);
        for (size_t i = 0; i < probe; ++i) {
            const auto& w = test_windows[i];
            std::copy(w.x.data().begin(), w.x.data().end(),
                      x.begin() + i * w.x.data().size());
        }
        Tensor batch = Tensor::from_data(
            {static_cast<int64_t>(probe), cfg.t_in, ck.dataset.num_nodes, 3}, std::move(x));

        NoGradGuard guard;
        ModelCaptures captures;
        captures.want_attention = what == "attention";
        captures.want_scan_trace = what == "ssm";
        ck.model.forward_batch(batch, &captures);

        if (what == "ssm") {
            write_scan_reports(captures.scan_traces, out_path);
        } else {
            if (!captures.temporal_attention && !captures.spatial_attention) {
                throw ConfigError("checkpoint has no attention stages to analyze (use_gat=false)");
            }
            if (captures.temporal_attention) {
                write_attention_reports(*captures.temporal_attention, "temporal",
                                        ck.dataset.num_nodes, attention_threshold, out_path);
            }
            if (captures.spatial_attention) {
                write_attention_reports(*captures.spatial_attention, "spatial",
                                        ck.dataset.num_nodes, attention_threshold, out_path);
            }
        }
        return;
    }

    // Peaks: tile non-overlapping predictions across the test span.
    const int64_t n_nodes = ck.dataset.num_nodes;
    std::vector<double> truth_series, pred_series;
    std::vector<int64_t> anchors;
    for (size_t i = 0; i < test_windows.size(); i += static_cast<size_t>(cfg.t_out)) {
        anchors.push_back(static_cast<int64_t>(i));
    }
    std::vector<std::vector<double>> truth(n_nodes), pred(n_nodes);
    for (int64_t a : anchors) {
        const auto raw = predict_batch_raw(ck.model, ck.meta.stats, test_windows,
                                           static_cast<size_t>(a), static_cast<size_t>(a) + 1);
        const auto& w = test_windows[a];
        for (int64_t n = 0; n < n_nodes; ++n) {
            for (int64_t h = 0; h < cfg.t_out; ++h) {
                truth[n].push_back(w.y.at(n * cfg.t_out + h));
                pred[n].push_back(raw[n * cfg.t_out + h]);
            }
        }
    }

    std::ofstream out(out_path / "peaks.csv");
    out << "node,slope,intercept,r2,num_pairs\n";
    int64_t fitted = 0;
    for (int64_t n = 0; n < n_nodes; ++n) {
        try {
            PeakFit fit = peak_regression(truth[n], pred[n], peak_window);
            out << n << ',' << fit.slope << ',' << fit.intercept << ',' << fit.r2 << ','
                << fit.pairs.size() << "\n";
            if (fitted == 0) {
                write_scatter_svg((out_path / "peaks_scatter_node0.svg").string(), fit);
            }
            ++fitted;
        } catch (const FitError& e) {
            std::cerr << "node " << n << ": " << e.what() << "\n";
        }
    }
    if (fitted == 0) throw ConfigError("peak regression produced no valid fits");
}

}  // namespace flowcast
