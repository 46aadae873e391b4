#pragma once

#include "flowcast/param_store.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

/// Selective state-space block parameters. The continuous transition is kept
/// as A = -exp(a_log), so the discretized diagonal exp(delta*A) always lies
/// in (0, 1) for delta > 0: the block is stable by construction.
struct SsmParams {
    Tensor a_log;     // [d_inner, d_state]
    Tensor in_proj;   // [2*d_inner, d_h]
    Tensor conv_w;    // [d_inner, conv_width]
    Tensor conv_b;    // [d_inner]
    Tensor x_proj;    // [2*d_state + 1, d_inner] -> per-step (B, C, delta logit)
    Tensor dt_bias;   // [d_inner]
    Tensor d_skip;    // [d_inner]
    Tensor out_proj;  // [d_h, d_inner]

    int64_t d_inner() const { return a_log.dim(0); }
    int64_t d_state() const { return a_log.dim(1); }
    int64_t d_h() const { return out_proj.dim(0); }
};

inline constexpr int64_t kConvWidth = 4;

SsmParams make_ssm_params(ParamStore& store, const std::string& prefix, int64_t d_h,
                          int64_t d_state, Rng& rng);
SsmParams bind_ssm_params(ParamStore& store, const std::string& prefix);

/// Sequential oracle for the recurrence on a single sequence u: [L, d_inner].
/// Step by step: (B_t, C_t, dlt_t) = x_proj u_t; delta = softplus(dlt + bias);
/// h_t = exp(delta*A) .* h_{t-1} + (delta*B_t) u_t; y_t = C_t . h_t + D .* u_t.
Tensor selective_scan_ref(const Tensor& u, const SsmParams& params);

/// Same math, batched projections and a tight recurrence over contiguous
/// buffers; O(L * d_inner * d_state) work. Matches the reference to 1e-10.
Tensor selective_scan_fast(const Tensor& u, const SsmParams& params);

/// Differentiable block over stacked sequences z: [S, L, d_h]. in_proj
/// splits into (u, gate); u runs conv -> silu -> selective scan; the output
/// is out_proj(y .* silu(gate)).
Tensor mamba_apply(const Tensor& z, const SsmParams& params, ScanCapture* capture = nullptr);

/// Single sequence [L, d_h].
Tensor mamba_block(const Tensor& z_seq, const SsmParams& params);

enum class ScanAxis { Time, Space };

/// z: [T, N, d_h]. Time axis: N independent length-T scans; space axis: T
/// independent length-N scans in dataset node order.
Tensor mamba_over_axis(const Tensor& z, ScanAxis axis, const SsmParams& params,
                       ScanCapture* capture = nullptr);

}  // namespace flowcast
