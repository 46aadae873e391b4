#pragma once

#include <optional>
#include <string>
#include <vector>

#include "flowcast/dataio.hpp"
#include "flowcast/embedding.hpp"
#include "flowcast/gat.hpp"
#include "flowcast/param_store.hpp"
#include "flowcast/sscan.hpp"

namespace flowcast {

struct ModelConfig {
    int64_t t_in = 12;
    int64_t t_out = 12;
    int64_t d_f = 24;
    int64_t d_a = 80;
    int64_t num_layers = 3;
    int64_t num_heads = 4;
    int64_t d_state = 16;
    bool use_gat = true;
    bool use_temporal_mamba = true;
    bool use_spatial_mamba = true;

    int64_t d_h() const { return 3 * d_f + d_a; }
    void validate() const;
};

struct ScanTraceEntry {
    int64_t layer = 0;
    std::string axis;  // "temporal" | "spatial"
    ScanCapture trace;
};

struct ModelCaptures {
    bool want_attention = false;
    bool want_scan_trace = false;
    // Snapshots come from the final temporal and final spatial attention
    // stages; traces from every scan.
    std::optional<AttentionSnapshot> temporal_attention;
    std::optional<AttentionSnapshot> spatial_attention;
    std::vector<ScanTraceEntry> scan_traces;
};

/// The forecaster: embedding, num_layers temporal attention/scan pairs,
/// num_layers spatial pairs, then a per-node linear readout over the
/// flattened window.
class Model {
  public:
    static Model init(const ModelConfig& cfg, const GraphTopology& topo, int64_t steps_per_day,
                      uint64_t seed);
    static Model from_store(const ModelConfig& cfg, const GraphTopology& topo,
                            int64_t steps_per_day, ParamStore store);

    /// x: [T, N, 3] -> prediction [N, T'] in normalized scale.
    Tensor forward(const Tensor& x, ModelCaptures* captures = nullptr) const;

    /// x: [B, T, N, 3] -> [B, N, T'].
    Tensor forward_batch(const Tensor& x, ModelCaptures* captures = nullptr) const;

    const ModelConfig& config() const { return cfg_; }
    const GraphTopology& topology() const { return topo_; }
    int64_t steps_per_day() const { return steps_per_day_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    Model clone() const;

  private:
    Model(ModelConfig cfg, GraphTopology topo, int64_t steps_per_day);
    void bind();

    struct LayerNormParams {
        Tensor gamma;
        Tensor beta;
    };

    struct Block {
        std::optional<GatParams> gat;
        LayerNormParams ln_after_gat;
        std::optional<SsmParams> mamba;
        LayerNormParams ln_after_mamba;
    };

    ModelConfig cfg_;
    GraphTopology topo_;
    int64_t steps_per_day_ = 288;
    ParamStore store_;

    EmbeddingParams embed_;
    std::vector<Block> temporal_blocks_;
    std::vector<Block> spatial_blocks_;
    Tensor w_out_;  // [T', T*d_h]
    Tensor b_out_;  // [T']
};

/// Checkpoint directory: manifest.json + params.bin + config.json.
struct CheckpointMeta {
    ModelConfig model;
    int64_t num_nodes = 0;
    int64_t steps_per_day = 288;
    NormStats stats;
    uint64_t seed = 0;
    SplitRatios ratios;
};

void save_checkpoint(const std::string& dir, const Model& model, const NormStats& stats,
                     uint64_t seed, const SplitRatios& ratios = {});
CheckpointMeta load_checkpoint_meta(const std::string& dir);
Model load_checkpoint_model(const std::string& dir, const GraphTopology& topo);

inline constexpr double kLayerNormEps = 1e-5;

}  // namespace flowcast
