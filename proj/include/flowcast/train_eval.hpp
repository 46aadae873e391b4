#pragma once

#include <map>
#include <string>
#include <vector>

#include "flowcast/dataio.hpp"
#include "flowcast/model.hpp"

namespace flowcast {

struct TrainConfig {
    double lr = 1e-3;
    int64_t batch_size = 16;
    int64_t patience = 30;  // epochs without validation improvement
    int64_t max_epochs = 100;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    uint64_t seed = 0;
    int64_t max_batches_per_epoch = 0;  // 0 = all

    void validate() const;
};

/// Mean absolute error over masked entries; differentiable w.r.t. y_hat.
/// Throws SkipBatch when the mask has no true entry.
Tensor masked_mae_loss(const Tensor& y_hat, const Tensor& y, const std::vector<uint8_t>& mask);

struct MetricTriple {
    double mae = 0.0;
    double rmse = 0.0;
    double mape = 0.0;  // percent
};

/// Raw-scale metrics over masked entries (numeric, not differentiable).
MetricTriple metrics(const std::vector<double>& y_hat, const std::vector<double>& y,
                     const std::vector<uint8_t>& mask);

/// Per-parameter Adam moments with bias correction.
class AdamState {
  public:
    int64_t step_count() const { return t_; }

  private:
    friend void adam_step(ParamStore& store, AdamState& state, const TrainConfig& cfg);
    struct Moments {
        std::vector<double> m;
        std::vector<double> v;
    };
    std::map<std::string, Moments> moments_;
    int64_t t_ = 0;
};

/// One Adam update over every parameter in the store; requires every
/// parameter to carry a gradient and zeroes gradients afterward.
void adam_step(ParamStore& store, AdamState& state, const TrainConfig& cfg);

struct EpochRecord {
    int64_t epoch = 0;
    double train_loss = 0.0;
    double val_mae = 0.0;
    double val_rmse = 0.0;
    double val_mape = 0.0;
    bool is_best = false;
};

struct TrainResult {
    Model model;  // parameters of the best epoch
    NormStats stats;
    std::vector<EpochRecord> history;
    int64_t best_epoch = -1;
    double best_val_mae = 0.0;
    SplitRanges splits;
};

TrainResult train(const TrafficDataset& dataset, const ModelConfig& model_cfg,
                  const TrainConfig& train_cfg, const SplitRatios& ratios = {});

struct EvalReport {
    std::vector<MetricTriple> per_horizon;  // index 0 = one step ahead
    MetricTriple average;

    const MetricTriple& horizon(int64_t h) const { return per_horizon.at(h - 1); }
};

EvalReport evaluate(const Model& model, const NormStats& stats, const TrafficDataset& dataset,
                    const Range& range);

/// Stacks window samples into batch tensors and predicts raw-scale flow.
/// Returns [B, N, T'] values.
std::vector<double> predict_batch_raw(const Model& model, const NormStats& stats,
                                      const std::vector<WindowSample>& windows, size_t begin,
                                      size_t end);

void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history);
void write_eval_report_json(const std::string& path, const EvalReport& report);

}  // namespace flowcast
