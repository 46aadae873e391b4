#include "flowcast/gat.hpp"

#include <cmath>

namespace flowcast {

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    for (auto& v : data) v = rng.uniform(-bound, bound);
    return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace

GatParams make_gat_params(ParamStore& store, const std::string& prefix, int64_t d_h,
                          int64_t num_heads, Rng& rng) {
    if (num_heads <= 0 || d_h % num_heads != 0) {
        throw ConfigError("gat: num_heads " + std::to_string(num_heads) +
                          " must divide hidden width " + std::to_string(d_h));
    }
    const int64_t d_head = d_h / num_heads;
    GatParams p;
    for (int64_t h = 0; h < num_heads; ++h) {
        const std::string head = prefix + ".head." + std::to_string(h);
        p.w.push_back(store.add(head + ".w", uniform_tensor({d_head, d_h}, 1.0 / std::sqrt(d_h), rng)));
        p.a_src.push_back(
            store.add(head + ".a_src", uniform_tensor({d_head}, 1.0 / std::sqrt(d_head), rng)));
        p.a_dst.push_back(
            store.add(head + ".a_dst", uniform_tensor({d_head}, 1.0 / std::sqrt(d_head), rng)));
    }
    return p;
}

GatParams bind_gat_params(ParamStore& store, const std::string& prefix, int64_t num_heads) {
    GatParams p;
    for (int64_t h = 0; h < num_heads; ++h) {
        const std::string head = prefix + ".head." + std::to_string(h);
        p.w.push_back(store.get(head + ".w"));
        p.a_src.push_back(store.get(head + ".a_src"));
        p.a_dst.push_back(store.get(head + ".a_dst"));
    }
    return p;
}

Tensor gat_frames(const Tensor& z, int64_t num_frames, const GraphTopology& topo,
                  const GatParams& params, std::optional<AttentionSnapshot>* snapshot) {
    const int64_t n_nodes = topo.num_nodes;
    if (z.ndim() != 2 || z.dim(0) != num_frames * n_nodes) {
        throw ShapeError("gat: expected [" + std::to_string(num_frames * n_nodes) + ", d_h], got " +
                         shape_to_string(z.shape()));
    }
    const int64_t d_h = z.dim(1);
    if (params.d_head() * params.num_heads() != d_h) {
        throw ShapeError("gat: head widths do not cover d_h=" + std::to_string(d_h));
    }

    // Every destination must attend to something; the self-loop invariant
    // guarantees it, but a broken topology should fail loudly.
    {
        std::vector<uint8_t> covered(n_nodes, 0);
        for (const auto& [u, v] : topo.edges) covered[v] = 1;
        for (int64_t v = 0; v < n_nodes; ++v) {
            if (!covered[v]) {
                throw ValueError("gat: node " + std::to_string(v) +
                                 " has an empty neighborhood (missing self-loop)");
            }
        }
    }

    const int64_t n_edges = static_cast<int64_t>(topo.edges.size());
    std::vector<int64_t> src_idx(num_frames * n_edges), dst_idx(num_frames * n_edges);
    for (int64_t f = 0; f < num_frames; ++f) {
        for (int64_t e = 0; e < n_edges; ++e) {
            src_idx[f * n_edges + e] = f * n_nodes + topo.edges[e].first;
            dst_idx[f * n_edges + e] = f * n_nodes + topo.edges[e].second;
        }
    }

    if (snapshot) {
        AttentionSnapshot snap;
        snap.edges = topo.edges;
        snap.num_heads = params.num_heads();
        snap.weights.assign(static_cast<size_t>(n_edges * params.num_heads()), 0.0);
        *snapshot = std::move(snap);
    }

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(params.num_heads());
    for (int64_t h = 0; h < params.num_heads(); ++h) {
        Tensor wz = matmul(z, transpose_axes(params.w[h], {1, 0}));  // [F*N, d_head]
        Tensor s_src = reshape(matmul(wz, reshape(params.a_src[h], {params.d_head(), 1})),
                               {num_frames * n_nodes});
        Tensor s_dst = reshape(matmul(wz, reshape(params.a_dst[h], {params.d_head(), 1})),
                               {num_frames * n_nodes});
        Tensor scores = leaky_relu(add(gather_rows(s_src, src_idx), gather_rows(s_dst, dst_idx)),
                                   params.leaky_slope);
        Tensor alpha = segment_softmax(scores, dst_idx, num_frames * n_nodes);
        Tensor messages = scale_rows(gather_rows(wz, src_idx), alpha);
        head_outputs.push_back(scatter_add_rows(messages, dst_idx, num_frames * n_nodes));

        if (snapshot) {
            auto& snap = **snapshot;
            const double inv = 1.0 / static_cast<double>(num_frames);
            for (int64_t f = 0; f < num_frames; ++f) {
                for (int64_t e = 0; e < n_edges; ++e) {
                    snap.weights[e * snap.num_heads + h] += alpha.at(f * n_edges + e) * inv;
                }
            }
        }
    }
    return concat_last_axis(head_outputs);
}

Tensor gat_forward(const Tensor& z_frame, const GraphTopology& topo, const GatParams& params,
                   std::optional<AttentionSnapshot>* snapshot) {
    if (z_frame.ndim() != 2) {
        throw ShapeError("gat_forward: expected [N, d_h], got " + shape_to_string(z_frame.shape()));
    }
    return gat_frames(z_frame, 1, topo, params, snapshot);
}

Tensor gat_over_axis(const Tensor& z, const GraphTopology& topo, const GatParams& params,
                     std::optional<AttentionSnapshot>* snapshot) {
    if (z.ndim() != 3) {
        throw ShapeError("gat_over_axis: expected [T, N, d_h], got " + shape_to_string(z.shape()));
    }
    const int64_t t = z.dim(0), n = z.dim(1), d = z.dim(2);
    Tensor out = gat_frames(reshape(z, {t * n, d}), t, topo, params, snapshot);
    return reshape(out, {t, n, d});
}

}  // namespace flowcast
