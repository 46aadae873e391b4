#include "flowcast/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "flowcast/rng.hpp"

namespace flowcast {

using nlohmann::json;

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("train config: lr must be > 0");
    if (patience < 1) throw ConfigError("train config: patience must be >= 1");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (max_epochs < 1) throw ConfigError("train config: max_epochs must be >= 1");
}

Tensor masked_mae_loss(const Tensor& y_hat, const Tensor& y, const std::vector<uint8_t>& mask) {
    if (y_hat.shape() != y.shape()) {
        throw ShapeError("masked_mae_loss: prediction " + shape_to_string(y_hat.shape()) +
                         " vs target " + shape_to_string(y.shape()));
    }
    if (static_cast<int64_t>(mask.size()) != y.numel()) {
        throw ShapeError("masked_mae_loss: mask size does not match targets");
    }
    int64_t count = 0;
    std::vector<double> mask_values(mask.size());
    for (size_t i = 0; i < mask.size(); ++i) {
        mask_values[i] = mask[i] ? 1.0 : 0.0;
        count += mask[i] ? 1 : 0;
    }
    if (count == 0) throw SkipBatch("batch has no valid target entries");
    Tensor mask_t = Tensor::from_data(y.shape(), std::move(mask_values));
    Tensor err = mul(abs(sub(y_hat, y)), mask_t);
    return scale(sum(err), 1.0 / static_cast<double>(count));
}

MetricTriple metrics(const std::vector<double>& y_hat, const std::vector<double>& y,
                     const std::vector<uint8_t>& mask) {
    if (y_hat.size() != y.size() || mask.size() != y.size()) {
        throw ShapeError("metrics: size mismatch");
    }
    double abs_sum = 0.0, sq_sum = 0.0, ape_sum = 0.0;
    int64_t count = 0;
    for (size_t i = 0; i < y.size(); ++i) {
        if (!mask[i]) continue;
        const double err = y[i] - y_hat[i];
        abs_sum += std::abs(err);
        sq_sum += err * err;
        ape_sum += std::abs(err / y[i]);
        ++count;
    }
    if (count == 0) throw SkipBatch("metrics: mask has no valid entries");
    MetricTriple out;
    out.mae = abs_sum / count;
    out.rmse = std::sqrt(sq_sum / count);
    out.mape = 100.0 * ape_sum / count;
    return out;
}

void adam_step(ParamStore& store, AdamState& state, const TrainConfig& cfg) {
    state.t_ += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t_));
    for (auto& [path, param] : store.entries()) {
        if (!param.has_grad()) {
            throw ValueError("adam_step: parameter " + path + " has no gradient");
        }
        auto& moments = state.moments_[path];
        const auto& g = param.grad();
        if (moments.m.empty()) {
            moments.m.assign(g.size(), 0.0);
            moments.v.assign(g.size(), 0.0);
        }
        std::vector<double> step(g.size());
        for (size_t i = 0; i < g.size(); ++i) {
            moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g[i];
            moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double m_hat = moments.m[i] / bc1;
            const double v_hat = moments.v[i] / bc2;
            step[i] = cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
        }
        param.apply_update(step);
        param.zero_grad();
    }
}

namespace {

struct Batch {
    Tensor x;                    // [B, T, N, 3]
    Tensor y;                    // [B, N, T'] raw scale
    std::vector<uint8_t> mask;   // [B * N * T']
};

Batch stack_windows(const std::vector<WindowSample>& windows, const std::vector<size_t>& order,
                    size_t begin, size_t end) {
    const auto& first = windows[order[begin]];
    const int64_t t_in = first.x.dim(0), n_nodes = first.x.dim(1), t_out = first.y.dim(1);
    const int64_t b = static_cast<int64_t>(end - begin);
    std::vector<double> x(static_cast<size_t>(b * t_in * n_nodes * 3));
    std::vector<double> y(static_cast<size_t>(b * n_nodes * t_out));
    std::vector<uint8_t> mask(static_cast<size_t>(b * n_nodes * t_out));
    for (size_t i = begin; i < end; ++i) {
        const auto& w = windows[order[i]];
        const size_t bi = i - begin;
        std::copy(w.x.data().begin(), w.x.data().end(),
                  x.begin() + bi * static_cast<size_t>(t_in * n_nodes * 3));
        std::copy(w.y.data().begin(), w.y.data().end(),
                  y.begin() + bi * static_cast<size_t>(n_nodes * t_out));
        std::copy(w.y_mask.begin(), w.y_mask.end(),
                  mask.begin() + bi * static_cast<size_t>(n_nodes * t_out));
    }
    Batch out;
    out.x = Tensor::from_data({b, t_in, n_nodes, 3}, std::move(x));
    out.y = Tensor::from_data({b, n_nodes, t_out}, std::move(y));
    out.mask = std::move(mask);
    return out;
}

std::vector<size_t> identity_order(size_t n) {
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    return order;
}

MetricTriple eval_windows(const Model& model, const NormStats& stats,
                          const std::vector<WindowSample>& windows, int64_t batch_size) {
    NoGradGuard guard;
    double abs_sum = 0.0, sq_sum = 0.0, ape_sum = 0.0;
    int64_t count = 0;
    const auto order = identity_order(windows.size());
    for (size_t begin = 0; begin < windows.size(); begin += batch_size) {
        const size_t end = std::min(windows.size(), begin + static_cast<size_t>(batch_size));
        Batch batch = stack_windows(windows, order, begin, end);
        Tensor y_hat = model.forward_batch(batch.x);
        const auto& pred = y_hat.data();
        const auto& truth = batch.y.data();
        for (size_t i = 0; i < truth.size(); ++i) {
            if (!batch.mask[i]) continue;
            const double raw = pred[i] * stats.std + stats.mean;
            const double err = truth[i] - raw;
            abs_sum += std::abs(err);
            sq_sum += err * err;
            ape_sum += std::abs(err / truth[i]);
            ++count;
        }
    }
    MetricTriple out;
    if (count > 0) {
        out.mae = abs_sum / count;
        out.rmse = std::sqrt(sq_sum / count);
        out.mape = 100.0 * ape_sum / count;
    }
    return out;
}

}  // namespace

TrainResult train(const TrafficDataset& dataset, const ModelConfig& model_cfg,
                  const TrainConfig& train_cfg, const SplitRatios& ratios) {
    model_cfg.validate();
    train_cfg.validate();

    const SplitRanges splits = split(dataset.t_total, ratios.train, ratios.val, ratios.test);
    const NormStats stats = compute_norm_stats(dataset, splits.train);
    auto train_windows =
        make_windows(dataset, splits.train, model_cfg.t_in, model_cfg.t_out, stats);
    auto val_windows = make_windows(dataset, splits.val, model_cfg.t_in, model_cfg.t_out, stats);

    Model model = Model::init(model_cfg, dataset.topology, dataset.steps_per_day(), train_cfg.seed);
    AdamState adam;
    Rng shuffle_rng(train_cfg.seed ^ 0x5bd1e995u);

    TrainResult result{model.clone(), stats, {}, -1, 0.0, splits};
    int64_t epochs_since_best = 0;

    for (int64_t epoch = 0; epoch < train_cfg.max_epochs; ++epoch) {
        // Seeded Fisher-Yates; order depends only on the seed and epoch count.
        auto order = identity_order(train_windows.size());
        for (size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        }

        double loss_sum = 0.0;
        int64_t batches = 0;
        for (size_t begin = 0; begin < order.size(); begin += train_cfg.batch_size) {
            if (train_cfg.max_batches_per_epoch > 0 &&
                batches >= train_cfg.max_batches_per_epoch) {
                break;
            }
            const size_t end =
                std::min(order.size(), begin + static_cast<size_t>(train_cfg.batch_size));
            Batch batch = stack_windows(train_windows, order, begin, end);
            try {
                Tensor y_hat = model.forward_batch(batch.x);
                Tensor y_raw = add_scalar(scale(y_hat, stats.std), stats.mean);
                Tensor loss = masked_mae_loss(y_raw, batch.y, batch.mask);
                const double loss_value = loss.item();
                if (!std::isfinite(loss_value)) {
                    throw ValueError("training diverged: non-finite loss at epoch " +
                                     std::to_string(epoch) + ", batch " + std::to_string(batches));
                }
                backward(loss);
                adam_step(model.params(), adam, train_cfg);
                loss_sum += loss_value;
                ++batches;
            } catch (const SkipBatch&) {
                continue;
            }
        }

        EpochRecord record;
        record.epoch = epoch;
        record.train_loss = batches > 0 ? loss_sum / batches : 0.0;
        const MetricTriple val = eval_windows(model, stats, val_windows, train_cfg.batch_size);
        record.val_mae = val.mae;
        record.val_rmse = val.rmse;
        record.val_mape = val.mape;

        if (result.best_epoch < 0 || val.mae < result.best_val_mae) {
            result.best_epoch = epoch;
            result.best_val_mae = val.mae;
            result.model = model.clone();
            record.is_best = true;
            epochs_since_best = 0;
        } else {
            ++epochs_since_best;
        }
        result.history.push_back(record);
        if (epochs_since_best >= train_cfg.patience) break;
    }
    return result;
}

EvalReport evaluate(const Model& model, const NormStats& stats, const TrafficDataset& dataset,
                    const Range& range) {
    const auto& cfg = model.config();
    auto windows = make_windows(dataset, range, cfg.t_in, cfg.t_out, stats);

    NoGradGuard guard;
    const int64_t t_out = cfg.t_out;
    std::vector<double> abs_sum(t_out, 0.0), sq_sum(t_out, 0.0), ape_sum(t_out, 0.0);
    std::vector<int64_t> count(t_out, 0);
    const auto order = identity_order(windows.size());
    constexpr size_t kEvalBatch = 16;
    for (size_t begin = 0; begin < windows.size(); begin += kEvalBatch) {
        const size_t end = std::min(windows.size(), begin + kEvalBatch);
        Batch batch = stack_windows(windows, order, begin, end);
        Tensor y_hat = model.forward_batch(batch.x);
        const auto& pred = y_hat.data();
        const auto& truth = batch.y.data();
        const int64_t rows = static_cast<int64_t>(truth.size()) / t_out;
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t h = 0; h < t_out; ++h) {
                const int64_t i = r * t_out + h;
                if (!batch.mask[i]) continue;
                const double raw = pred[i] * stats.std + stats.mean;
                const double err = truth[i] - raw;
                abs_sum[h] += std::abs(err);
                sq_sum[h] += err * err;
                ape_sum[h] += std::abs(err / truth[i]);
                ++count[h];
            }
        }
    }

    EvalReport report;
    double mae_total = 0.0, rmse_total = 0.0, mape_total = 0.0;
    for (int64_t h = 0; h < t_out; ++h) {
        MetricTriple m;
        if (count[h] > 0) {
            m.mae = abs_sum[h] / count[h];
            m.rmse = std::sqrt(sq_sum[h] / count[h]);
            m.mape = 100.0 * ape_sum[h] / count[h];
        }
        mae_total += m.mae;
        rmse_total += m.rmse;
        mape_total += m.mape;
        report.per_horizon.push_back(m);
    }
    report.average.mae = mae_total / t_out;
    report.average.rmse = rmse_total / t_out;
    report.average.mape = mape_total / t_out;
    return report;
}

std::vector<double> predict_batch_raw(const Model& model, const NormStats& stats,
                                      const std::vector<WindowSample>& windows, size_t begin,
                                      size_t end) {
    NoGradGuard guard;
    const auto order = identity_order(windows.size());
    Batch batch = stack_windows(windows, order, begin, end);
    Tensor y_hat = model.forward_batch(batch.x);
    std::vector<double> raw(y_hat.data().size());
    for (size_t i = 0; i < raw.size(); ++i) raw[i] = y_hat.data()[i] * stats.std + stats.mean;
    return raw;
}

void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "epoch,train_loss,val_mae,val_rmse,val_mape,is_best\n";
    for (const auto& r : history) {
        out << r.epoch << ',' << r.train_loss << ',' << r.val_mae << ',' << r.val_rmse << ','
            << r.val_mape << ',' << (r.is_best ? 1 : 0) << "\n";
    }
}

void write_eval_report_json(const std::string& path, const EvalReport& report) {
    json j;
    for (size_t h = 0; h < report.per_horizon.size(); ++h) {
        const auto& m = report.per_horizon[h];
        j["horizon_" + std::to_string(h + 1)] = {
            {"mae", m.mae}, {"rmse", m.rmse}, {"mape", m.mape}};
    }
    j["avg"] = {{"mae", report.average.mae},
                {"rmse", report.average.rmse},
                {"mape", report.average.mape}};
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump(2) << "\n";
}

}  // namespace flowcast
