#pragma once

#include <string>
#include <vector>

#include "flowcast/gat.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

/// Singular spectrum of a transition operator plus the < 1 stability verdict.
struct SvdReport {
    std::vector<double> singular_values;  // descending
    bool stable = false;                  // all sigma < 1 strictly
};

/// Full SVD of a dense matrix (rank 2 tensor).
SvdReport svd_analyze(const Tensor& matrix);

/// Spectrum of a diagonal operator given its diagonal entries; used for the
/// per-channel discretized scan transitions.
SvdReport svd_from_diagonal(const std::vector<double>& diagonal);

/// Undirected weighted graph with unique (u <= v) edges.
struct WeightedGraph {
    int64_t num_nodes = 0;
    std::vector<Edge> edges;
    std::vector<double> weights;
};

/// Keeps edge {u, v} when either direction's head-averaged attention exceeds
/// the threshold (strictly); self-loops dropped; weight = max of directions.
WeightedGraph build_attention_graph(const AttentionSnapshot& snapshot, int64_t num_nodes,
                                    double threshold = 0.1);

struct CommunityReport {
    std::vector<int64_t> assignment;  // node -> community id, contiguous from 0
    double modularity = 0.0;
    double threshold = 0.0;
    std::vector<double> phase_modularity;  // nondecreasing across merge phases
    int64_t num_communities() const;
};

/// Two-phase modularity maximization; deterministic: nodes visited in
/// ascending index order, first community move with positive gain taken.
CommunityReport louvain(const WeightedGraph& graph);

double modularity(const WeightedGraph& graph, const std::vector<int64_t>& assignment);

struct ReorderedAdjacency {
    int64_t num_nodes = 0;
    std::vector<int64_t> permutation;  // position -> original node
    std::vector<double> matrix;        // [n x n], permuted weights
};

ReorderedAdjacency reorder_adjacency(const WeightedGraph& graph, const CommunityReport& report);

struct PeakFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
    std::vector<std::pair<double, double>> pairs;  // (true peak, predicted peak)
};

/// Block maxima over consecutive non-overlapping windows (zeros excluded as
/// missing; a pair is dropped when either block has no valid reading),
/// followed by an OLS fit of predicted on true peaks.
PeakFit peak_regression(const std::vector<double>& true_series,
                        const std::vector<double>& pred_series, int64_t window);

// Minimal self-contained SVG emitters for the analysis artifacts.
void write_spectrum_svg(const std::string& path, const std::vector<double>& singular_values);
void write_scatter_svg(const std::string& path, const PeakFit& fit);

}  // namespace flowcast
