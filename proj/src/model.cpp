#include "flowcast/model.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace flowcast {

namespace fs = std::filesystem;
using nlohmann::json;

void ModelConfig::validate() const {
    if (t_in < 1 || t_out < 1 || d_f < 1 || d_a < 1 || num_layers < 1 || num_heads < 1 ||
        d_state < 1) {
        throw ConfigError("model config: all dimensions must be positive");
    }
    if (d_h() % num_heads != 0) {
        throw ConfigError("model config: num_heads " + std::to_string(num_heads) +
                          " must divide d_h " + std::to_string(d_h()));
    }
}

Model::Model(ModelConfig cfg, GraphTopology topo, int64_t steps_per_day)
    : cfg_(std::move(cfg)), topo_(std::move(topo)), steps_per_day_(steps_per_day) {}

namespace {

std::string block_prefix(int64_t i) { return "block." + std::to_string(i); }

}  // namespace

Model Model::init(const ModelConfig& cfg, const GraphTopology& topo, int64_t steps_per_day,
                  uint64_t seed) {
    cfg.validate();
    if (topo.num_nodes < 1) throw ConfigError("model: topology has no nodes");
    Model model(cfg, topo, steps_per_day);
    Rng rng(seed);
    ParamStore& store = model.store_;

    model.embed_ = make_embedding_params(store, "embed", cfg.d_f, cfg.d_a, cfg.t_in,
                                         topo.num_nodes, steps_per_day, rng);

    auto make_ln = [&](const std::string& prefix) {
        LayerNormParams ln;
        ln.gamma = store.add(prefix + ".gamma", Tensor::full({cfg.d_h()}, 1.0));
        ln.beta = store.add(prefix + ".beta", Tensor::zeros({cfg.d_h()}));
        return ln;
    };

    for (int64_t i = 0; i < cfg.num_layers; ++i) {
        Block block;
        if (cfg.use_gat) {
            block.gat = make_gat_params(store, block_prefix(i) + ".gat1", cfg.d_h(),
                                        cfg.num_heads, rng);
        }
        block.ln_after_gat = make_ln(block_prefix(i) + ".t_ln1");
        if (cfg.use_temporal_mamba) {
            block.mamba = make_ssm_params(store, block_prefix(i) + ".mamba_t", cfg.d_h(),
                                          cfg.d_state, rng);
        }
        block.ln_after_mamba = make_ln(block_prefix(i) + ".t_ln2");
        model.temporal_blocks_.push_back(std::move(block));
    }
    for (int64_t i = 0; i < cfg.num_layers; ++i) {
        Block block;
        if (cfg.use_gat) {
            block.gat = make_gat_params(store, block_prefix(i) + ".gat2", cfg.d_h(),
                                        cfg.num_heads, rng);
        }
        block.ln_after_gat = make_ln(block_prefix(i) + ".s_ln1");
        if (cfg.use_spatial_mamba) {
            block.mamba = make_ssm_params(store, block_prefix(i) + ".mamba_s", cfg.d_h(),
                                          cfg.d_state, rng);
        }
        block.ln_after_mamba = make_ln(block_prefix(i) + ".s_ln2");
        model.spatial_blocks_.push_back(std::move(block));
    }

    const int64_t flat = cfg.t_in * cfg.d_h();
    const double bound = 1.0 / std::sqrt(static_cast<double>(flat));
    {
        std::vector<double> w(static_cast<size_t>(cfg.t_out * flat));
        for (auto& v : w) v = rng.uniform(-bound, bound);
        model.w_out_ = store.add("head.w_out", Tensor::from_data({cfg.t_out, flat}, std::move(w)));
        std::vector<double> b(static_cast<size_t>(cfg.t_out));
        for (auto& v : b) v = rng.uniform(-bound, bound);
        model.b_out_ = store.add("head.b_out", Tensor::from_data({cfg.t_out}, std::move(b)));
    }
    return model;
}

Model Model::from_store(const ModelConfig& cfg, const GraphTopology& topo, int64_t steps_per_day,
                        ParamStore store) {
    cfg.validate();
    Model model(cfg, topo, steps_per_day);
    model.store_ = std::move(store);
    model.bind();
    return model;
}

void Model::bind() {
    embed_ = bind_embedding_params(store_, "embed");
    auto bind_ln = [&](const std::string& prefix) {
        return LayerNormParams{store_.get(prefix + ".gamma"), store_.get(prefix + ".beta")};
    };
    temporal_blocks_.clear();
    spatial_blocks_.clear();
    for (int64_t i = 0; i < cfg_.num_layers; ++i) {
        Block block;
        if (cfg_.use_gat) {
            block.gat = bind_gat_params(store_, block_prefix(i) + ".gat1", cfg_.num_heads);
        }
        block.ln_after_gat = bind_ln(block_prefix(i) + ".t_ln1");
        if (cfg_.use_temporal_mamba) {
            block.mamba = bind_ssm_params(store_, block_prefix(i) + ".mamba_t");
        }
        block.ln_after_mamba = bind_ln(block_prefix(i) + ".t_ln2");
        temporal_blocks_.push_back(std::move(block));
    }
    for (int64_t i = 0; i < cfg_.num_layers; ++i) {
        Block block;
        if (cfg_.use_gat) {
            block.gat = bind_gat_params(store_, block_prefix(i) + ".gat2", cfg_.num_heads);
        }
        block.ln_after_gat = bind_ln(block_prefix(i) + ".s_ln1");
        if (cfg_.use_spatial_mamba) {
            block.mamba = bind_ssm_params(store_, block_prefix(i) + ".mamba_s");
        }
        block.ln_after_mamba = bind_ln(block_prefix(i) + ".s_ln2");
        spatial_blocks_.push_back(std::move(block));
    }
    w_out_ = store_.get("head.w_out");
    b_out_ = store_.get("head.b_out");
}

Model Model::clone() const {
    ParamStore copy;
    for (const auto& [path, t] : store_.entries()) {
        copy.add(path, Tensor::from_data(t.shape(), t.data()));
    }
    return from_store(cfg_, topo_, steps_per_day_, std::move(copy));
}

Tensor Model::forward_batch(const Tensor& x, ModelCaptures* captures) const {
    if (x.ndim() != 4 || x.dim(3) != 3) {
        throw ShapeError("model: expected [B, T, N, 3], got " + shape_to_string(x.shape()));
    }
    if (x.dim(1) != cfg_.t_in) {
        throw ShapeError("model: window length " + std::to_string(x.dim(1)) +
                         " does not match configured " + std::to_string(cfg_.t_in));
    }
    if (x.dim(2) != topo_.num_nodes) {
        throw ShapeError("model: input has " + std::to_string(x.dim(2)) + " nodes, topology has " +
                         std::to_string(topo_.num_nodes));
    }
    const int64_t batch = x.dim(0), t_in = cfg_.t_in, n_nodes = topo_.num_nodes;
    const int64_t d = cfg_.d_h();

    Tensor z = reshape(embed_batch(x, embed_), {batch * t_in * n_nodes, d});

    auto run_stack = [&](const std::vector<Block>& blocks, bool spatial_axis) {
        for (size_t i = 0; i < blocks.size(); ++i) {
            const Block& block = blocks[i];
            const bool last = i + 1 == blocks.size();

            Tensor h = z;
            if (block.gat) {
                std::optional<AttentionSnapshot> snap;
                std::optional<AttentionSnapshot>* snap_ptr = nullptr;
                if (captures && captures->want_attention && last) snap_ptr = &snap;
                h = gat_frames(z, batch * t_in, topo_, *block.gat, snap_ptr);
                if (snap_ptr && snap) {
                    (spatial_axis ? captures->spatial_attention : captures->temporal_attention) =
                        std::move(snap);
                }
            }
            Tensor after_gat =
                layer_norm(add(h, z), block.ln_after_gat.gamma, block.ln_after_gat.beta,
                           kLayerNormEps);

            Tensor m = after_gat;
            if (block.mamba) {
                ScanCapture capture;
                ScanCapture* capture_ptr =
                    (captures && captures->want_scan_trace) ? &capture : nullptr;
                if (!spatial_axis) {
                    // One sequence per (sample, node), scanned over time.
                    Tensor seq = reshape(after_gat, {batch, t_in, n_nodes, d});
                    seq = reshape(transpose_axes(seq, {0, 2, 1, 3}), {batch * n_nodes, t_in, d});
                    Tensor y = mamba_apply(seq, *block.mamba, capture_ptr);
                    y = transpose_axes(reshape(y, {batch, n_nodes, t_in, d}), {0, 2, 1, 3});
                    m = reshape(y, {batch * t_in * n_nodes, d});
                } else {
                    // One sequence per (sample, frame), scanned over nodes.
                    Tensor seq = reshape(after_gat, {batch * t_in, n_nodes, d});
                    Tensor y = mamba_apply(seq, *block.mamba, capture_ptr);
                    m = reshape(y, {batch * t_in * n_nodes, d});
                }
                if (capture_ptr) {
                    captures->scan_traces.push_back(
                        {static_cast<int64_t>(i), spatial_axis ? "spatial" : "temporal",
                         std::move(capture)});
                }
            }
            z = layer_norm(add(m, after_gat), block.ln_after_mamba.gamma,
                           block.ln_after_mamba.beta, kLayerNormEps);
        }
    };

    run_stack(temporal_blocks_, false);
    run_stack(spatial_blocks_, true);

    // Flatten window and hidden axes per node, then read out all horizons.
    Tensor per_node = transpose_axes(reshape(z, {batch, t_in, n_nodes, d}), {0, 2, 1, 3});
    Tensor flat = reshape(per_node, {batch * n_nodes, t_in * d});
    Tensor y_hat = add_rowvec(matmul(flat, transpose_axes(w_out_, {1, 0})), b_out_);
    return reshape(y_hat, {batch, n_nodes, cfg_.t_out});
}

Tensor Model::forward(const Tensor& x, ModelCaptures* captures) const {
    if (x.ndim() != 3 || x.dim(2) != 3) {
        throw ShapeError("model: expected [T, N, 3], got " + shape_to_string(x.shape()));
    }
    Tensor out = forward_batch(reshape(x, {1, x.dim(0), x.dim(1), 3}), captures);
    return reshape(out, {x.dim(1), cfg_.t_out});
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

json config_to_json(const ModelConfig& cfg) {
    return json{{"T", cfg.t_in},
                {"T_prime", cfg.t_out},
                {"d_f", cfg.d_f},
                {"d_a", cfg.d_a},
                {"num_layers", cfg.num_layers},
                {"num_heads", cfg.num_heads},
                {"d_state", cfg.d_state},
                {"use_gat", cfg.use_gat},
                {"use_temporal_mamba", cfg.use_temporal_mamba},
                {"use_spatial_mamba", cfg.use_spatial_mamba}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.t_in = j.at("T").get<int64_t>();
    cfg.t_out = j.at("T_prime").get<int64_t>();
    cfg.d_f = j.at("d_f").get<int64_t>();
    cfg.d_a = j.at("d_a").get<int64_t>();
    cfg.num_layers = j.at("num_layers").get<int64_t>();
    cfg.num_heads = j.at("num_heads").get<int64_t>();
    cfg.d_state = j.at("d_state").get<int64_t>();
    cfg.use_gat = j.at("use_gat").get<bool>();
    cfg.use_temporal_mamba = j.at("use_temporal_mamba").get<bool>();
    cfg.use_spatial_mamba = j.at("use_spatial_mamba").get<bool>();
    return cfg;
}

}  // namespace

void save_checkpoint(const std::string& dir, const Model& model, const NormStats& stats,
                     uint64_t seed, const SplitRatios& ratios) {
    fs::create_directories(dir);
    model.params().save(dir);
    json meta;
    meta["model"] = config_to_json(model.config());
    meta["num_nodes"] = model.topology().num_nodes;
    meta["steps_per_day"] = model.steps_per_day();
    meta["norm"] = {{"mean", stats.mean}, {"std", stats.std}};
    meta["seed"] = seed;
    meta["split_ratios"] = {ratios.train, ratios.val, ratios.test};
    std::ofstream out(fs::path(dir) / "config.json");
    if (!out) throw IoError("cannot write checkpoint config in " + dir);
    out << meta.dump(2) << "\n";
}

CheckpointMeta load_checkpoint_meta(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "config.json");
    if (!in) throw IoError("cannot open checkpoint config in " + dir);
    json meta;
    try {
        in >> meta;
    } catch (const json::exception& e) {
        throw IoError("bad checkpoint config: " + std::string(e.what()));
    }
    CheckpointMeta out;
    out.model = config_from_json(meta.at("model"));
    out.num_nodes = meta.at("num_nodes").get<int64_t>();
    out.steps_per_day = meta.at("steps_per_day").get<int64_t>();
    out.stats.mean = meta.at("norm").at("mean").get<double>();
    out.stats.std = meta.at("norm").at("std").get<double>();
    out.seed = meta.value("seed", 0ull);
    if (meta.contains("split_ratios")) {
        const auto& r = meta.at("split_ratios");
        out.ratios = {r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>()};
    }
    return out;
}

Model load_checkpoint_model(const std::string& dir, const GraphTopology& topo) {
    CheckpointMeta meta = load_checkpoint_meta(dir);
    if (topo.num_nodes != meta.num_nodes) {
        throw ShapeError("checkpoint was trained on " + std::to_string(meta.num_nodes) +
                         " nodes, dataset has " + std::to_string(topo.num_nodes));
    }
    return Model::from_store(meta.model, topo, meta.steps_per_day, ParamStore::load(dir));
}

}  // namespace flowcast
