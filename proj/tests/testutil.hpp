#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "flowcast/rng.hpp"
#include "flowcast/tensor.hpp"

namespace testutil {

inline flowcast::Tensor rand_tensor(flowcast::Shape shape, flowcast::Rng& rng, double lo = -2.0,
                                    double hi = 2.0) {
    std::vector<double> data(static_cast<size_t>(flowcast::shape_numel(shape)));
    for (auto& v : data) v = rng.uniform(lo, hi);
    return flowcast::Tensor::from_data(std::move(shape), std::move(data));
}

// Central finite differences against the analytic gradients of a scalar
// loss. `build_loss` must rebuild the graph from the leaf tensors each call.
// Returns the worst relative error over all elements of all leaves.
inline double max_grad_rel_err(
    const std::function<flowcast::Tensor()>& build_loss,
    const std::vector<flowcast::Tensor>& leaves, double h = 1e-5) {
    using flowcast::Tensor;

    for (auto leaf : leaves) {
        const_cast<Tensor&>(leaf).zero_grad();
    }
    Tensor loss = build_loss();
    flowcast::backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (const auto& leaf : leaves) analytic.push_back(leaf.grad());

    double worst = 0.0;
    for (size_t p = 0; p < leaves.size(); ++p) {
        auto& data = const_cast<Tensor&>(leaves[p]).mutable_data();
        for (size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            double plus = 0.0, minus = 0.0;
            {
                flowcast::NoGradGuard guard;
                data[i] = saved + h;
                plus = build_loss().item();
                data[i] = saved - h;
                minus = build_loss().item();
                data[i] = saved;
            }
            const double fd = (plus - minus) / (2.0 * h);
            const double g = analytic[p][i];
            const double denom = std::max({std::abs(fd), std::abs(g), 1e-6});
            worst = std::max(worst, std::abs(fd - g) / denom);
        }
    }
    return worst;
}

}  // namespace testutil
