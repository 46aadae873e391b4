#include <doctest.h>

#include <cmath>

#include "flowcast/gat.hpp"
#include "testutil.hpp"

using namespace flowcast;
using testutil::max_grad_rel_err;
using testutil::rand_tensor;

namespace {

GraphTopology ring_topology(int64_t n) {
    std::vector<Edge> physical;
    for (int64_t i = 0; i < n; ++i) physical.push_back({i, (i + 1) % n});
    return GraphTopology::from_physical(n, physical);
}

}  // namespace

TEST_CASE("single node with self loop returns its transformed features") {
    GraphTopology topo = GraphTopology::from_physical(1, {});
    ParamStore store;
    Rng rng(3);
    auto params = make_gat_params(store, "gat", 6, 2, rng);
    Tensor z = rand_tensor({1, 6}, rng);
    Tensor out = gat_forward(z, topo, params);
    // alpha over the lone self edge is 1, so out = [W_0 z | W_1 z]
    for (int64_t h = 0; h < 2; ++h) {
        Tensor wz = matmul(z, transpose_axes(params.w[h], {1, 0}));
        for (int64_t j = 0; j < 3; ++j) {
            CHECK(out.at(h * 3 + j) == doctest::Approx(wz.at(j)).epsilon(1e-12));
        }
    }
}

TEST_CASE("two symmetric nodes split attention evenly") {
    GraphTopology topo = GraphTopology::from_physical(2, {{0, 1}});
    ParamStore store;
    Rng rng(5);
    auto params = make_gat_params(store, "gat", 4, 2, rng);
    Tensor z = Tensor::from_data({2, 4}, {0.3, -1.0, 0.7, 0.2, 0.3, -1.0, 0.7, 0.2});
    std::optional<AttentionSnapshot> snap;
    gat_forward(z, topo, params, &snap);
    REQUIRE(snap.has_value());
    for (size_t e = 0; e < snap->edges.size(); ++e) {
        for (int64_t h = 0; h < snap->num_heads; ++h) {
            CHECK(snap->weight(static_cast<int64_t>(e), h) == doctest::Approx(0.5).epsilon(1e-9));
        }
    }
}

TEST_CASE("attention weights form a simplex per destination and head") {
    GraphTopology topo = ring_topology(5);
    ParamStore store;
    Rng rng(7);
    auto params = make_gat_params(store, "gat", 8, 4, rng);
    Tensor z = rand_tensor({5, 8}, rng);
    std::optional<AttentionSnapshot> snap;
    gat_forward(z, topo, params, &snap);
    REQUIRE(snap.has_value());
    for (int64_t h = 0; h < snap->num_heads; ++h) {
        std::vector<double> per_dst(5, 0.0);
        for (size_t e = 0; e < snap->edges.size(); ++e) {
            const double w = snap->weight(static_cast<int64_t>(e), h);
            CHECK(w >= 0.0);
            per_dst[snap->edges[e].second] += w;
        }
        for (double total : per_dst) CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("attention never leaks off the physical graph") {
    // 4 nodes on a line 0-1-2-3: node 3 is not a neighbor of node 0.
    GraphTopology topo = GraphTopology::from_physical(4, {{0, 1}, {1, 2}, {2, 3}});
    ParamStore store;
    Rng rng(11);
    auto params = make_gat_params(store, "gat", 4, 2, rng);
    Tensor z = rand_tensor({4, 4}, rng);
    Tensor out = gat_forward(z, topo, params);

    std::vector<double> tampered = z.data();
    tampered[3 * 4 + 0] += 10.0;  // perturb node 3
    Tensor out2 = gat_forward(Tensor::from_data({4, 4}, std::move(tampered)), topo, params);
    for (int64_t j = 0; j < 4; ++j) {
        CHECK(out.at(j) == out2.at(j));  // node 0 sees only {0, 1}
    }
}

TEST_CASE("permutation equivariance on a random 5-node graph") {
    ParamStore store;
    Rng rng(13);
    auto params = make_gat_params(store, "gat", 6, 3, rng);
    std::vector<Edge> physical{{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 0}, {1, 3}};
    GraphTopology topo = GraphTopology::from_physical(5, physical);
    Tensor z = rand_tensor({5, 6}, rng);
    Tensor out = gat_forward(z, topo, params);

    const std::vector<int64_t> perm{3, 1, 4, 0, 2};  // node n moves to perm[n]
    std::vector<Edge> permuted_edges;
    for (const auto& [u, v] : physical) permuted_edges.push_back({perm[u], perm[v]});
    GraphTopology ptopo = GraphTopology::from_physical(5, permuted_edges);
    std::vector<double> pz(z.data().size());
    for (int64_t n = 0; n < 5; ++n) {
        for (int64_t j = 0; j < 6; ++j) pz[perm[n] * 6 + j] = z.at(n * 6 + j);
    }
    Tensor pout = gat_forward(Tensor::from_data({5, 6}, std::move(pz)), ptopo, params);

    double max_diff = 0.0;
    for (int64_t n = 0; n < 5; ++n) {
        for (int64_t j = 0; j < 6; ++j) {
            max_diff = std::max(max_diff, std::abs(out.at(n * 6 + j) - pout.at(perm[n] * 6 + j)));
        }
    }
    CHECK(max_diff < 1e-10);
}

TEST_CASE("zero attention vectors reduce to uniform neighborhood averaging") {
    GraphTopology topo = ring_topology(4);
    ParamStore store;
    Rng rng(17);
    auto params = make_gat_params(store, "gat", 4, 2, rng);
    for (int64_t h = 0; h < 2; ++h) {
        std::fill(params.a_src[h].mutable_data().begin(), params.a_src[h].mutable_data().end(),
                  0.0);
        std::fill(params.a_dst[h].mutable_data().begin(), params.a_dst[h].mutable_data().end(),
                  0.0);
    }
    Tensor z = rand_tensor({4, 4}, rng);
    Tensor out = gat_forward(z, topo, params);

    // Direct averaging oracle over in-neighborhoods.
    for (int64_t h = 0; h < 2; ++h) {
        Tensor wz = matmul(z, transpose_axes(params.w[h], {1, 0}));
        for (int64_t v = 0; v < 4; ++v) {
            std::vector<double> mean(2, 0.0);
            int64_t degree = 0;
            for (const auto& [src, dst] : topo.edges) {
                if (dst != v) continue;
                for (int64_t j = 0; j < 2; ++j) mean[j] += wz.at(src * 2 + j);
                ++degree;
            }
            for (int64_t j = 0; j < 2; ++j) {
                CHECK(out.at(v * 4 + h * 2 + j) ==
                      doctest::Approx(mean[j] / degree).epsilon(1e-10));
            }
        }
    }
}

TEST_CASE("gat_over_axis frame behavior") {
    GraphTopology topo = ring_topology(3);
    ParamStore store;
    Rng rng(19);
    auto params = make_gat_params(store, "gat", 4, 2, rng);

    SUBCASE("T=1 reduces to gat_forward") {
        Tensor frame = rand_tensor({3, 4}, rng);
        Tensor a = gat_forward(frame, topo, params);
        Tensor b = gat_over_axis(reshape(frame, {1, 3, 4}), topo, params);
        CHECK(a.data() == b.data());
    }

    SUBCASE("duplicated frames yield duplicated outputs and per-frame snapshot") {
        Tensor frame = rand_tensor({3, 4}, rng);
        std::vector<double> doubled = frame.data();
        doubled.insert(doubled.end(), frame.data().begin(), frame.data().end());
        std::optional<AttentionSnapshot> snap_two, snap_one;
        Tensor out = gat_over_axis(Tensor::from_data({2, 3, 4}, std::move(doubled)), topo, params,
                                   &snap_two);
        for (int64_t i = 0; i < 12; ++i) CHECK(out.at(i) == out.at(12 + i));

        gat_forward(frame, topo, params, &snap_one);
        REQUIRE(snap_two.has_value());
        REQUIRE(snap_one.has_value());
        for (size_t i = 0; i < snap_one->weights.size(); ++i) {
            CHECK(snap_two->weights[i] == doctest::Approx(snap_one->weights[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("missing neighborhoods fail loudly") {
    GraphTopology broken;
    broken.num_nodes = 2;
    broken.edges = {{0, 0}, {0, 1}};  // node 1 never receives (and 1,1 missing)
    ParamStore store;
    Rng rng(23);
    auto params = make_gat_params(store, "gat", 4, 2, rng);
    Tensor z = rand_tensor({2, 4}, rng);
    CHECK_NOTHROW(gat_forward(z, GraphTopology::from_physical(2, {{0, 1}}), params));
    broken.edges = {{0, 0}};
    CHECK_THROWS_AS(gat_forward(z, broken, params), ValueError);
}

TEST_CASE("gat parameters train end to end") {
    GraphTopology topo = ring_topology(3);
    ParamStore store;
    Rng rng(29);
    auto params = make_gat_params(store, "gat", 4, 2, rng);
    Tensor z = rand_tensor({3, 4}, rng).set_requires_grad(true);
    std::vector<Tensor> leaves{z};
    for (int64_t h = 0; h < 2; ++h) {
        leaves.push_back(params.w[h]);
        leaves.push_back(params.a_src[h]);
        leaves.push_back(params.a_dst[h]);
    }
    const double err = max_grad_rel_err(
        [&] {
            Tensor out = gat_forward(z, topo, params);
            return sum(mul(out, out));
        },
        leaves);
    CHECK(err < 1e-4);
}
