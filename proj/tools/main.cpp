#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "flowcast/commands.hpp"

namespace {

using flowcast::RunConfig;

int run(int argc, char** argv) {
    CLI::App app{"traffic flow forecasting engine: graph attention + selective scans"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset directory");
    flowcast::SynthArgs synth_args;
    synth->add_option("--nodes", synth_args.nodes, "number of sensors (>= 2)");
    synth->add_option("--days", synth_args.days, "number of days to generate");
    synth->add_option("--seed", synth_args.seed, "generator seed");
    synth->add_option("--dropout", synth_args.dropout, "fraction of readings zeroed as missing");
    synth->add_option("--out", synth_args.out_dir, "output dataset directory")->required();

    // train
    auto* train_cmd = app.add_subcommand("train", "train a model on a dataset directory");
    std::string train_config, train_data, train_out;
    uint64_t train_seed = 0;
    int64_t train_epochs = 0, train_batch = 0, train_max_batches = -1;
    double train_lr = 0.0;
    train_cmd->add_option("--config", train_config, "run config JSON (optional)");
    train_cmd->add_option("--data", train_data, "dataset directory")->required();
    train_cmd->add_option("--out", train_out, "output run directory")->required();
    auto* seed_opt = train_cmd->add_option("--seed", train_seed, "override train.seed");
    auto* epochs_opt = train_cmd->add_option("--max-epochs", train_epochs, "override max epochs");
    auto* batch_opt = train_cmd->add_option("--batch-size", train_batch, "override batch size");
    auto* lr_opt = train_cmd->add_option("--lr", train_lr, "override learning rate");
    auto* mb_opt = train_cmd->add_option("--max-batches-per-epoch", train_max_batches,
                                         "override batch cap per epoch (0 = all)");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on one split");
    std::string eval_ck, eval_data, eval_split = "test", eval_out;
    eval_cmd->add_option("--checkpoint", eval_ck, "checkpoint directory")->required();
    eval_cmd->add_option("--data", eval_data, "dataset directory")->required();
    eval_cmd->add_option("--split", eval_split, "train | val | test");
    eval_cmd->add_option("--out", eval_out, "report path (default: <checkpoint>/eval_<split>.json)");

    // predict
    auto* predict_cmd = app.add_subcommand("predict", "write one window's predictions as CSV");
    std::string pred_ck, pred_data, pred_out;
    int64_t pred_index = 0;
    predict_cmd->add_option("--checkpoint", pred_ck, "checkpoint directory")->required();
    predict_cmd->add_option("--data", pred_data, "dataset directory")->required();
    predict_cmd->add_option("--window-index", pred_index, "test-split window index");
    predict_cmd->add_option("--out", pred_out, "output CSV path")->required();

    // analyze
    auto* analyze_cmd = app.add_subcommand("analyze", "run the interpretability suite");
    std::string an_ck, an_data, an_what, an_out;
    double an_threshold = 0.1;
    int64_t an_window = 12;
    analyze_cmd->add_option("--checkpoint", an_ck, "checkpoint directory")->required();
    analyze_cmd->add_option("--data", an_data, "dataset directory")->required();
    analyze_cmd->add_option("--what", an_what, "ssm | attention | peaks")->required();
    analyze_cmd->add_option("--out", an_out, "output directory")->required();
    auto* thr_opt = analyze_cmd->add_option("--threshold", an_threshold, "attention threshold");
    auto* win_opt = analyze_cmd->add_option("--peak-window", an_window, "peak block size");

    CLI11_PARSE(app, argc, argv);

    if (synth->parsed()) {
        flowcast::run_synth(synth_args);
        std::cerr << "wrote dataset to " << synth_args.out_dir << "\n";
        return 0;
    }
    if (train_cmd->parsed()) {
        RunConfig cfg;
        if (!train_config.empty()) cfg = RunConfig::from_json_file(train_config);
        // CLI flags win over the config file.
        if (seed_opt->count()) cfg.train.seed = train_seed;
        if (epochs_opt->count()) cfg.train.max_epochs = train_epochs;
        if (batch_opt->count()) cfg.train.batch_size = train_batch;
        if (lr_opt->count()) cfg.train.lr = train_lr;
        if (mb_opt->count()) cfg.train.max_batches_per_epoch = train_max_batches;
        const double best = flowcast::run_train(cfg, train_data, train_out);
        std::cerr << "best validation MAE " << best << "; run written to " << train_out << "\n";
        return 0;
    }
    if (eval_cmd->parsed()) {
        if (eval_out.empty()) eval_out = eval_ck + "/eval_" + eval_split + ".json";
        flowcast::run_eval(eval_ck, eval_data, eval_split, eval_out);
        std::cerr << "wrote " << eval_out << "\n";
        return 0;
    }
    if (predict_cmd->parsed()) {
        flowcast::run_predict(pred_ck, pred_data, pred_index, pred_out);
        std::cerr << "wrote " << pred_out << "\n";
        return 0;
    }
    if (analyze_cmd->parsed()) {
        RunConfig defaults;
        const double threshold = thr_opt->count() ? an_threshold : defaults.attention_threshold;
        const int64_t window = win_opt->count() ? an_window : defaults.peak_window;
        flowcast::run_analyze(an_ck, an_data, an_what, an_out, threshold, window);
        std::cerr << "analysis written to " << an_out << "\n";
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
