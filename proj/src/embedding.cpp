#include "flowcast/embedding.hpp"

#include <cmath>

namespace flowcast {

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    for (auto& v : data) v = rng.uniform(-bound, bound);
    return Tensor::from_data(std::move(shape), std::move(data));
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    for (auto& v : data) v = rng.normal(0.0, stddev);
    return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace

EmbeddingParams make_embedding_params(ParamStore& store, const std::string& prefix, int64_t d_f,
                                      int64_t d_a, int64_t t_in, int64_t num_nodes,
                                      int64_t steps_per_day, Rng& rng) {
    const double fan = 1.0 / std::sqrt(3.0);
    EmbeddingParams p;
    p.w_f = store.add(prefix + ".w_f", uniform_tensor({d_f, 3}, fan, rng));
    p.b_f = store.add(prefix + ".b_f", uniform_tensor({d_f}, fan, rng));
    p.t_d = store.add(prefix + ".t_d", normal_tensor({steps_per_day, d_f}, 0.02, rng));
    p.t_w = store.add(prefix + ".t_w", normal_tensor({7, d_f}, 0.02, rng));
    p.e_a = store.add(prefix + ".e_a", normal_tensor({t_in, num_nodes, d_a}, 0.02, rng));
    return p;
}

EmbeddingParams bind_embedding_params(ParamStore& store, const std::string& prefix) {
    EmbeddingParams p;
    p.w_f = store.get(prefix + ".w_f");
    p.b_f = store.get(prefix + ".b_f");
    p.t_d = store.get(prefix + ".t_d");
    p.t_w = store.get(prefix + ".t_w");
    p.e_a = store.get(prefix + ".e_a");
    return p;
}

Tensor embed_batch(const Tensor& x, const EmbeddingParams& params) {
    if (x.ndim() != 4 || x.dim(3) != 3) {
        throw ShapeError("embed: expected input [B, T, N, 3], got " + shape_to_string(x.shape()));
    }
    const int64_t batch = x.dim(0), t_in = x.dim(1), n_nodes = x.dim(2);
    const int64_t spd = params.steps_per_day();
    if (t_in > params.e_a.dim(0)) {
        throw ShapeError("embed: window length " + std::to_string(t_in) +
                         " exceeds adaptive table length " + std::to_string(params.e_a.dim(0)));
    }
    if (n_nodes != params.e_a.dim(1)) {
        throw ShapeError("embed: node count " + std::to_string(n_nodes) +
                         " does not match adaptive table " + shape_to_string(params.e_a.shape()));
    }

    const int64_t rows = batch * t_in * n_nodes;
    std::vector<double> raw(static_cast<size_t>(rows * 3));
    std::vector<int64_t> tod_idx(rows), dow_idx(rows), pos_idx(rows);
    const double* px = x.data().data();
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t t = 0; t < t_in; ++t) {
            for (int64_t n = 0; n < n_nodes; ++n) {
                const int64_t row = (b * t_in + t) * n_nodes + n;
                const double* cell = px + row * 3;
                const int64_t tod = static_cast<int64_t>(std::llround(cell[1]));
                const int64_t dow = static_cast<int64_t>(std::llround(cell[2]));
                if (tod < 0 || tod >= spd) {
                    throw ValueError("embed: tod index " + std::to_string(tod) +
                                     " outside [0, " + std::to_string(spd) + ")");
                }
                if (dow < 0 || dow >= 7) {
                    throw ValueError("embed: dow index " + std::to_string(dow) + " outside [0, 7)");
                }
                // The affine projection sees bounded inputs: indices scaled to [0, 1).
                raw[row * 3 + 0] = cell[0];
                raw[row * 3 + 1] = static_cast<double>(tod) / static_cast<double>(spd);
                raw[row * 3 + 2] = static_cast<double>(dow) / 7.0;
                tod_idx[row] = tod;
                dow_idx[row] = dow;
                pos_idx[row] = t * n_nodes + n;
            }
        }
    }

    Tensor raw_t = Tensor::from_data({rows, 3}, std::move(raw));
    Tensor e_f = add_rowvec(matmul(raw_t, transpose_axes(params.w_f, {1, 0})), params.b_f);
    Tensor e_tod = gather_rows(params.t_d, tod_idx);
    Tensor e_dow = gather_rows(params.t_w, dow_idx);
    Tensor e_adp = gather_rows(
        reshape(params.e_a, {params.e_a.dim(0) * params.e_a.dim(1), params.d_a()}), pos_idx);
    Tensor z = concat_last_axis({e_f, e_tod, e_dow, e_adp});
    return reshape(z, {batch, t_in, n_nodes, params.d_h()});
}

Tensor embed(const Tensor& x, const EmbeddingParams& params) {
    if (x.ndim() != 3 || x.dim(2) != 3) {
        throw ShapeError("embed: expected input [T, N, 3], got " + shape_to_string(x.shape()));
    }
    Tensor batched = embed_batch(reshape(x, {1, x.dim(0), x.dim(1), 3}), params);
    return reshape(batched, {x.dim(0), x.dim(1), params.d_h()});
}

}  // namespace flowcast
