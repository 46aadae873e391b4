#pragma once

#include <string>

#include "flowcast/dataio.hpp"
#include "flowcast/model.hpp"
#include "flowcast/train_eval.hpp"

namespace flowcast {

/// Full run configuration with paper-protocol defaults. Unknown JSON keys are
/// rejected; every validation problem is reported in one error.
struct RunConfig {
    std::string data_dir;
    SplitRatios ratios;
    ModelConfig model;
    TrainConfig train;
    double attention_threshold = 0.1;
    int64_t peak_window = 12;

    static RunConfig from_json_file(const std::string& path);
    static RunConfig from_json_text(const std::string& text);
    std::string to_json_text() const;
    void save(const std::string& path) const;
};

struct SynthArgs {
    int64_t nodes = 20;
    int64_t days = 14;
    uint64_t seed = 0;
    std::string out_dir;
    double dropout = 0.02;
};

void run_synth(const SynthArgs& args);

/// split -> normalize -> train; writes checkpoint/, history.csv and the
/// merged config.json under out_dir. Returns the best validation MAE.
double run_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir);

void run_eval(const std::string& checkpoint_dir, const std::string& data_dir,
              const std::string& split_name, const std::string& out_path);

void run_predict(const std::string& checkpoint_dir, const std::string& data_dir,
                 int64_t window_index, const std::string& out_path);

void run_analyze(const std::string& checkpoint_dir, const std::string& data_dir,
                 const std::string& what, const std::string& out_dir,
                 double attention_threshold = 0.1, int64_t peak_window = 12);

}  // namespace flowcast
