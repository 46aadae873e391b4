#pragma once

#include "flowcast/param_store.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

/// Input projection plus periodicity tables plus the learned position/node
/// table. Hidden width is 3*d_f + d_a.
struct EmbeddingParams {
    Tensor w_f;  // [d_f, 3]
    Tensor b_f;  // [d_f]
    Tensor t_d;  // [steps_per_day, d_f], time-of-day table
    Tensor t_w;  // [7, d_f], day-of-week table
    Tensor e_a;  // [t_in, num_nodes, d_a]

    int64_t d_f() const { return w_f.dim(0); }
    int64_t d_a() const { return e_a.dim(2); }
    int64_t d_h() const { return 3 * d_f() + d_a(); }
    int64_t steps_per_day() const { return t_d.dim(0); }
};

EmbeddingParams make_embedding_params(ParamStore& store, const std::string& prefix, int64_t d_f,
                                      int64_t d_a, int64_t t_in, int64_t num_nodes,
                                      int64_t steps_per_day, Rng& rng);
EmbeddingParams bind_embedding_params(ParamStore& store, const std::string& prefix);

/// x: [T, N, 3] with channels (normalized flow, tod_index, dow_index).
/// Output layout along the last axis is [E_f | tod part | dow part | E_a].
Tensor embed(const Tensor& x, const EmbeddingParams& params);

/// Batched variant over [B, T, N, 3].
Tensor embed_batch(const Tensor& x, const EmbeddingParams& params);

}  // namespace flowcast
