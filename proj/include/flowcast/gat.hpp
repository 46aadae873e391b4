#pragma once

#include <optional>

#include "flowcast/dataio.hpp"
#include "flowcast/param_store.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

/// Multi-head graph attention parameters; heads are concatenated back to the
/// model width, so num_heads * d_head == d_h.
struct GatParams {
    std::vector<Tensor> w;      // per head [d_head, d_h]
    std::vector<Tensor> a_src;  // per head [d_head]
    std::vector<Tensor> a_dst;  // per head [d_head]
    double leaky_slope = 0.2;

    int64_t num_heads() const { return static_cast<int64_t>(w.size()); }
    int64_t d_head() const { return w[0].dim(0); }
};

/// Per-edge attention, head by head, averaged over the frames of a batch.
struct AttentionSnapshot {
    std::vector<Edge> edges;
    int64_t num_heads = 0;
    std::vector<double> weights;  // [num_edges x num_heads]

    double weight(int64_t edge, int64_t head) const { return weights[edge * num_heads + head]; }
};

GatParams make_gat_params(ParamStore& store, const std::string& prefix, int64_t d_h,
                          int64_t num_heads, Rng& rng);
GatParams bind_gat_params(ParamStore& store, const std::string& prefix, int64_t num_heads);

/// Attention over one frame: z_frame is [N, d_h].
Tensor gat_forward(const Tensor& z_frame, const GraphTopology& topo, const GatParams& params,
                   std::optional<AttentionSnapshot>* snapshot = nullptr);

/// Applies the same attention independently to each of the T frames of
/// [T, N, d_h]; the snapshot averages attention over frames.
Tensor gat_over_axis(const Tensor& z, const GraphTopology& topo, const GatParams& params,
                     std::optional<AttentionSnapshot>* snapshot = nullptr);

/// Shared worker: z is [F*N, d_h] holding F stacked frames.
Tensor gat_frames(const Tensor& z, int64_t num_frames, const GraphTopology& topo,
                  const GatParams& params, std::optional<AttentionSnapshot>* snapshot = nullptr);

}  // namespace flowcast
