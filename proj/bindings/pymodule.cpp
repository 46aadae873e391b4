#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "flowcast/analysis.hpp"
#include "flowcast/commands.hpp"
#include "flowcast/dataio.hpp"
#include "flowcast/model.hpp"
#include "flowcast/sscan.hpp"
#include "flowcast/train_eval.hpp"

namespace py = pybind11;
using namespace flowcast;

namespace {

Tensor tensor_from_nested(const std::vector<double>& data, const std::vector<int64_t>& shape) {
    return Tensor::from_data(Shape(shape.begin(), shape.end()), data);
}

py::dict metric_dict(const MetricTriple& m) {
    py::dict d;
    d["mae"] = m.mae;
    d["rmse"] = m.rmse;
    d["mape"] = m.mape;
    return d;
}

}  // namespace

PYBIND11_MODULE(_flowcast, m) {
    m.doc() = "traffic forecasting engine: graph attention + selective scans";

    py::register_exception<ShapeError>(m, "ShapeError");
    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<FitError>(m, "FitError");

    // dataset pipeline
    m.def(
        "synth_dataset",
        [](int64_t nodes, int64_t days, uint64_t seed, double dropout, const std::string& out) {
            SynthArgs args{nodes, days, seed, out, dropout};
            run_synth(args);
        },
        py::arg("nodes"), py::arg("days"), py::arg("seed"), py::arg("dropout") = 0.02,
        py::arg("out") = std::string());

    m.def("dataset_info", [](const std::string& dir) {
        TrafficDataset ds = load_dataset(dir);
        py::dict d;
        d["num_nodes"] = ds.num_nodes;
        d["t_total"] = ds.t_total;
        d["steps_per_day"] = ds.steps_per_day();
        d["num_physical_edges"] = ds.physical_edges.size();
        return d;
    });

    m.def(
        "train",
        [](const std::string& data_dir, const std::string& out_dir, const std::string& config_json) {
            RunConfig cfg;
            if (!config_json.empty()) cfg = RunConfig::from_json_text(config_json);
            return run_train(cfg, data_dir, out_dir);
        },
        py::arg("data_dir"), py::arg("out_dir"), py::arg("config_json") = std::string(),
        "Train a model; returns the best validation MAE.");

    m.def(
        "evaluate",
        [](const std::string& checkpoint, const std::string& data_dir, const std::string& split) {
            CheckpointMeta meta = load_checkpoint_meta(checkpoint);
            TrafficDataset dataset = load_dataset(data_dir);
            Model model = load_checkpoint_model(checkpoint, dataset.topology);
            SplitRanges ranges = flowcast::split(dataset.t_total, meta.ratios);
            const Range range = split == "train" ? ranges.train
                                : split == "val" ? ranges.val
                                                 : ranges.test;
            EvalReport report = evaluate(model, meta.stats, dataset, range);
            py::dict d;
            for (size_t h = 0; h < report.per_horizon.size(); ++h) {
                d[("horizon_" + std::to_string(h + 1)).c_str()] =
                    metric_dict(report.per_horizon[h]);
            }
            d["avg"] = metric_dict(report.average);
            return d;
        },
        py::arg("checkpoint"), py::arg("data_dir"), py::arg("split") = "test");

    m.def("predict_window", [](const std::string& checkpoint, const std::string& data_dir,
                               int64_t window_index, const std::string& out_csv) {
        run_predict(checkpoint, data_dir, window_index, out_csv);
    });

    m.def(
        "analyze",
        [](const std::string& checkpoint, const std::string& data_dir, const std::string& what,
           const std::string& out_dir, double threshold, int64_t peak_window) {
            run_analyze(checkpoint, data_dir, what, out_dir, threshold, peak_window);
        },
        py::arg("checkpoint"), py::arg("data_dir"), py::arg("what"), py::arg("out_dir"),
        py::arg("threshold") = 0.1, py::arg("peak_window") = 12);

    // direct numeric operations
    m.def(
        "selective_scan",
        [](const std::vector<double>& u, int64_t length, int64_t d_h, int64_t d_state,
           uint64_t seed) {
            ParamStore store;
            Rng rng(seed);
            SsmParams params = make_ssm_params(store, "scan", d_h, d_state, rng);
            Tensor input = tensor_from_nested(u, {length, params.d_inner()});
            return selective_scan_fast(input, params).data();
        },
        py::arg("u"), py::arg("length"), py::arg("d_h"), py::arg("d_state") = 16,
        py::arg("seed") = 0, "Run the fast selective scan with seeded parameters.");

    m.def("singular_values", [](const std::vector<double>& matrix, int64_t rows, int64_t cols) {
        SvdReport r = svd_analyze(tensor_from_nested(matrix, {rows, cols}));
        py::dict d;
        d["singular_values"] = r.singular_values;
        d["stable"] = r.stable;
        return d;
    });

    m.def(
        "louvain_communities",
        [](int64_t num_nodes, const std::vector<std::pair<int64_t, int64_t>>& edges,
           const std::vector<double>& weights) {
            WeightedGraph g;
            g.num_nodes = num_nodes;
            g.edges = edges;
            g.weights = weights;
            CommunityReport r = louvain(g);
            py::dict d;
            d["assignment"] = r.assignment;
            d["modularity"] = r.modularity;
            return d;
        },
        py::arg("num_nodes"), py::arg("edges"), py::arg("weights"));

    m.def("peak_fit", [](const std::vector<double>& truth, const std::vector<double>& pred,
                         int64_t window) {
        PeakFit fit = peak_regression(truth, pred, window);
        py::dict d;
        d["slope"] = fit.slope;
        d["intercept"] = fit.intercept;
        d["r2"] = fit.r2;
        d["num_pairs"] = fit.pairs.size();
        return d;
    });

    m.def("masked_metrics", [](const std::vector<double>& y_hat, const std::vector<double>& y,
                               const std::vector<bool>& mask) {
        std::vector<uint8_t> m8(mask.begin(), mask.end());
        return metric_dict(metrics(y_hat, y, m8));
    });
}
