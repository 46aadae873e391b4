#include "flowcast/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include <Eigen/Dense>
#include <Eigen/SVD>

namespace flowcast {

SvdReport svd_analyze(const Tensor& matrix) {
    if (matrix.ndim() != 2 || matrix.numel() == 0) {
        throw ValueError("svd_analyze: expected a non-empty rank-2 matrix, got " +
                         shape_to_string(matrix.shape()));
    }
    for (double v : matrix.data()) {
        if (!std::isfinite(v)) throw ValueError("svd_analyze: matrix has non-finite entries");
    }
    const int64_t rows = matrix.dim(0), cols = matrix.dim(1);
    Eigen::MatrixXd m(rows, cols);
    for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < cols; ++j) m(i, j) = matrix.at(i * cols + j);
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    SvdReport report;
    report.singular_values.assign(svd.singularValues().data(),
                                  svd.singularValues().data() + svd.singularValues().size());
    std::sort(report.singular_values.begin(), report.singular_values.end(), std::greater<>());
    report.stable = !report.singular_values.empty() && report.singular_values.front() < 1.0;
    return report;
}

SvdReport svd_from_diagonal(const std::vector<double>& diagonal) {
    if (diagonal.empty()) throw ValueError("svd_from_diagonal: empty diagonal");
    SvdReport report;
    report.singular_values.reserve(diagonal.size());
    for (double v : diagonal) {
        if (!std::isfinite(v)) throw ValueError("svd_from_diagonal: non-finite entry");
        report.singular_values.push_back(std::abs(v));
    }
    std::sort(report.singular_values.begin(), report.singular_values.end(), std::greater<>());
    report.stable = report.singular_values.front() < 1.0;
    return report;
}

WeightedGraph build_attention_graph(const AttentionSnapshot& snapshot, int64_t num_nodes,
                                    double threshold) {
    // Head-averaged weight per directed edge.
    std::map<Edge, double> directed;
    for (size_t e = 0; e < snapshot.edges.size(); ++e) {
        double mean = 0.0;
        for (int64_t h = 0; h < snapshot.num_heads; ++h) {
            mean += snapshot.weight(static_cast<int64_t>(e), h);
        }
        mean /= static_cast<double>(snapshot.num_heads);
        directed[snapshot.edges[e]] = mean;
    }

    WeightedGraph graph;
    graph.num_nodes = num_nodes;
    std::set<Edge> done;
    for (const auto& [edge, w_fwd] : directed) {
        const auto [u, v] = edge;
        if (u == v) continue;
        const Edge key{std::min(u, v), std::max(u, v)};
        if (!done.insert(key).second) continue;
        auto rev = directed.find({v, u});
        const double w_rev = rev != directed.end() ? rev->second : 0.0;
        const double w = std::max(w_fwd, w_rev);
        if (w > threshold) {
            graph.edges.push_back(key);
            graph.weights.push_back(w);
        }
    }
    return graph;
}

int64_t CommunityReport::num_communities() const {
    int64_t max_id = -1;
    for (int64_t c : assignment) max_id = std::max(max_id, c);
    return max_id + 1;
}

double modularity(const WeightedGraph& graph, const std::vector<int64_t>& assignment) {
    if (static_cast<int64_t>(assignment.size()) != graph.num_nodes) {
        throw ValueError("modularity: assignment size mismatch");
    }
    // Symmetric-sum convention: an edge {u,v} contributes w to both W_uv and
    // W_vu; each endpoint degree picks up w.
    std::vector<double> degree(graph.num_nodes, 0.0);
    double two_m = 0.0;
    for (size_t e = 0; e < graph.edges.size(); ++e) {
        const auto [u, v] = graph.edges[e];
        const double w = graph.weights[e];
        degree[u] += w;
        degree[v] += w;
        two_m += 2.0 * w;
    }
    if (two_m == 0.0) return 0.0;
    double q = 0.0;
    for (size_t e = 0; e < graph.edges.size(); ++e) {
        const auto [u, v] = graph.edges[e];
        if (assignment[u] == assignment[v]) q += 2.0 * graph.weights[e] / two_m;
    }
    std::map<int64_t, double> community_degree;
    for (int64_t n = 0; n < graph.num_nodes; ++n) community_degree[assignment[n]] += degree[n];
    for (const auto& [c, k] : community_degree) q -= (k / two_m) * (k / two_m);
    return q;
}

namespace {

struct LouvainLevel {
    std::vector<int64_t> community;  // node -> community on this level
};

struct WorkGraph {
    int64_t n = 0;
    // adjacency[u] = {(v, w)}; self-loop stored once with its full weight.
    std::vector<std::vector<std::pair<int64_t, double>>> adjacency;
    std::vector<double> self_loop;
};

WorkGraph to_work_graph(const WeightedGraph& graph) {
    WorkGraph g;
    g.n = graph.num_nodes;
    g.adjacency.resize(g.n);
    g.self_loop.assign(g.n, 0.0);
    for (size_t e = 0; e < graph.edges.size(); ++e) {
        const auto [u, v] = graph.edges[e];
        const double w = graph.weights[e];
        if (u == v) {
            g.self_loop[u] += w;
        } else {
            g.adjacency[u].push_back({v, w});
            g.adjacency[v].push_back({u, w});
        }
    }
    return g;
}

}  // namespace

CommunityReport louvain(const WeightedGraph& graph) {
    if (graph.num_nodes < 1) throw ValueError("louvain: empty graph");

    WorkGraph work = to_work_graph(graph);
    std::vector<LouvainLevel> levels;
    CommunityReport report;

    while (true) {
        const int64_t n = work.n;
        // Weighted degrees; self-loops count twice (both stubs at the node).
        std::vector<double> degree(n, 0.0);
        double two_m = 0.0;
        for (int64_t u = 0; u < n; ++u) {
            degree[u] = 2.0 * work.self_loop[u];
            for (const auto& [v, w] : work.adjacency[u]) degree[u] += w;
            two_m += degree[u];
        }
        if (two_m == 0.0) {
            LouvainLevel level;
            level.community.resize(n);
            std::iota(level.community.begin(), level.community.end(), 0);
            levels.push_back(std::move(level));
            break;
        }
        const double m = two_m / 2.0;

        std::vector<int64_t> community(n);
        std::iota(community.begin(), community.end(), 0);
        std::vector<double> sigma_tot = degree;

        bool any_move = false;
        bool moved = true;
        while (moved) {
            moved = false;
            for (int64_t u = 0; u < n; ++u) {
                const int64_t old_c = community[u];
                // Links from u to each neighboring community.
                std::map<int64_t, double> k_uc;
                for (const auto& [v, w] : work.adjacency[u]) k_uc[community[v]] += w;

                sigma_tot[old_c] -= degree[u];
                community[u] = -1;

                // First candidate (ascending community id) with positive gain.
                const double k_u = degree[u];
                const double base = k_uc.count(old_c) ? k_uc[old_c] : 0.0;
                const double stay_gain = base / m - sigma_tot[old_c] * k_u / (2.0 * m * m);
                int64_t best = old_c;
                for (const auto& [c, k] : k_uc) {
                    if (c == old_c) continue;
                    const double gain = k / m - sigma_tot[c] * k_u / (2.0 * m * m);
                    if (gain > stay_gain + 1e-12) {
                        best = c;
                        break;
                    }
                }
                community[u] = best;
                sigma_tot[best] += degree[u];
                if (best != old_c) {
                    moved = true;
                    any_move = true;
                }
            }
        }

        // Renumber communities contiguously by first appearance.
        std::map<int64_t, int64_t> renumber;
        for (int64_t u = 0; u < n; ++u) {
            if (!renumber.count(community[u])) {
                const int64_t next = static_cast<int64_t>(renumber.size());
                renumber[community[u]] = next;
            }
            community[u] = renumber[community[u]];
        }
        const int64_t n_communities = static_cast<int64_t>(renumber.size());

        LouvainLevel level;
        level.community = community;
        levels.push_back(level);

        // Modularity of the flat partition induced so far.
        {
            std::vector<int64_t> flat(graph.num_nodes);
            for (int64_t v = 0; v < graph.num_nodes; ++v) {
                int64_t c = v;
                for (const auto& lvl : levels) c = lvl.community[c];
                flat[v] = c;
            }
            report.phase_modularity.push_back(modularity(graph, flat));
        }

        if (!any_move || n_communities == n) break;

        // Aggregate communities into super-nodes.
        WorkGraph next;
        next.n = n_communities;
        next.adjacency.resize(n_communities);
        next.self_loop.assign(n_communities, 0.0);
        std::map<Edge, double> agg;
        for (int64_t u = 0; u < n; ++u) {
            next.self_loop[community[u]] += work.self_loop[u];
            for (const auto& [v, w] : work.adjacency[u]) {
                if (u < v) {
                    const int64_t cu = community[u], cv = community[v];
                    if (cu == cv) {
                        next.self_loop[cu] += w;
                    } else {
                        agg[{std::min(cu, cv), std::max(cu, cv)}] += w;
                    }
                }
            }
        }
        for (const auto& [edge, w] : agg) {
            next.adjacency[edge.first].push_back({edge.second, w});
            next.adjacency[edge.second].push_back({edge.first, w});
        }
        work = std::move(next);
    }

    report.assignment.resize(graph.num_nodes);
    for (int64_t v = 0; v < graph.num_nodes; ++v) {
        int64_t c = v;
        for (const auto& lvl : levels) c = lvl.community[c];
        report.assignment[v] = c;
    }
    // Contiguous ids ordered by first appearance over ascending node index.
    std::map<int64_t, int64_t> renumber;
    for (auto& c : report.assignment) {
        if (!renumber.count(c)) {
            const int64_t next = static_cast<int64_t>(renumber.size());
            renumber[c] = next;
        }
        c = renumber[c];
    }
    report.modularity = modularity(graph, report.assignment);
    return report;
}

ReorderedAdjacency reorder_adjacency(const WeightedGraph& graph, const CommunityReport& report) {
    if (static_cast<int64_t>(report.assignment.size()) != graph.num_nodes) {
        throw ValueError("reorder_adjacency: report does not match graph");
    }
    ReorderedAdjacency out;
    out.num_nodes = graph.num_nodes;
    out.permutation.resize(graph.num_nodes);
    std::iota(out.permutation.begin(), out.permutation.end(), 0);
    std::stable_sort(out.permutation.begin(), out.permutation.end(),
                     [&](int64_t a, int64_t b) {
                         if (report.assignment[a] != report.assignment[b]) {
                             return report.assignment[a] < report.assignment[b];
                         }
                         return a < b;
                     });
    std::vector<int64_t> position(graph.num_nodes);
    for (int64_t p = 0; p < graph.num_nodes; ++p) position[out.permutation[p]] = p;

    out.matrix.assign(static_cast<size_t>(graph.num_nodes) * graph.num_nodes, 0.0);
    for (size_t e = 0; e < graph.edges.size(); ++e) {
        const auto [u, v] = graph.edges[e];
        const double w = graph.weights[e];
        out.matrix[position[u] * graph.num_nodes + position[v]] = w;
        out.matrix[position[v] * graph.num_nodes + position[u]] = w;
    }
    return out;
}

PeakFit peak_regression(const std::vector<double>& true_series,
                        const std::vector<double>& pred_series, int64_t window) {
    if (window < 1) throw ValueError("peak_regression: window must be >= 1");
    if (true_series.size() != pred_series.size()) {
        throw ValueError("peak_regression: series lengths differ");
    }
    const int64_t length = static_cast<int64_t>(true_series.size());
    if (length < window) throw ValueError("peak_regression: series shorter than one window");

    PeakFit fit;
    const int64_t blocks = length / window;
    for (int64_t b = 0; b < blocks; ++b) {
        double t_max = 0.0, p_max = 0.0;
        bool t_valid = false, p_valid = false;
        for (int64_t i = b * window; i < (b + 1) * window; ++i) {
            if (true_series[i] != 0.0) {
                t_max = t_valid ? std::max(t_max, true_series[i]) : true_series[i];
                t_valid = true;
            }
            if (pred_series[i] != 0.0) {
                p_max = p_valid ? std::max(p_max, pred_series[i]) : pred_series[i];
                p_valid = true;
            }
        }
        if (t_valid && p_valid) fit.pairs.push_back({t_max, p_max});
    }
    if (fit.pairs.size() < 2) {
        throw FitError("peak_regression: fewer than 2 valid peak pairs");
    }

    const double n = static_cast<double>(fit.pairs.size());
    double x_mean = 0.0, y_mean = 0.0;
    for (const auto& [x, y] : fit.pairs) {
        x_mean += x;
        y_mean += y;
    }
    x_mean /= n;
    y_mean /= n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (const auto& [x, y] : fit.pairs) {
        sxx += (x - x_mean) * (x - x_mean);
        sxy += (x - x_mean) * (y - y_mean);
        syy += (y - y_mean) * (y - y_mean);
    }
    if (!(sxx > 0.0)) {
        throw FitError("peak_regression: true peaks have zero variance, fit undefined");
    }
    fit.slope = sxy / sxx;
    fit.intercept = y_mean - fit.slope * x_mean;
    double ss_res = 0.0;
    for (const auto& [x, y] : fit.pairs) {
        const double r = y - (fit.slope * x + fit.intercept);
        ss_res += r * r;
    }
    fit.r2 = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
    return fit;
}

// ---------------------------------------------------------------------------
// tiny SVG emitters
// ---------------------------------------------------------------------------

namespace {

constexpr int kSvgW = 640;
constexpr int kSvgH = 420;
constexpr int kMargin = 48;

}  // namespace

void write_spectrum_svg(const std::string& path, const std::vector<double>& singular_values) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    const size_t n = singular_values.size();
    double max_v = 1.0;
    for (double v : singular_values) max_v = std::max(max_v, v);
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << kSvgW << "' height='" << kSvgH
        << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
    const double plot_w = kSvgW - 2 * kMargin, plot_h = kSvgH - 2 * kMargin;
    // Reference line at sigma = 1.
    const double y1 = kMargin + plot_h * (1.0 - 1.0 / max_v);
    out << "<line x1='" << kMargin << "' y1='" << y1 << "' x2='" << kSvgW - kMargin << "' y2='"
        << y1 << "' stroke='red' stroke-dasharray='4'/>\n";
    for (size_t i = 0; i < n; ++i) {
        const double x = kMargin + plot_w * (n > 1 ? static_cast<double>(i) / (n - 1) : 0.5);
        const double y = kMargin + plot_h * (1.0 - singular_values[i] / max_v);
        out << "<circle cx='" << x << "' cy='" << y << "' r='2.5' fill='steelblue'/>\n";
    }
    out << "<text x='" << kMargin << "' y='" << kSvgH - 12
        << "' font-size='12'>rank (descending sigma)</text>\n</svg>\n";
}

void write_scatter_svg(const std::string& path, const PeakFit& fit) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    double lo = fit.pairs.front().first, hi = lo;
    for (const auto& [x, y] : fit.pairs) {
        lo = std::min({lo, x, y});
        hi = std::max({hi, x, y});
    }
    if (hi <= lo) hi = lo + 1.0;
    auto sx = [&](double v) { return kMargin + (kSvgW - 2 * kMargin) * (v - lo) / (hi - lo); };
    auto sy = [&](double v) {
        return kSvgH - kMargin - (kSvgH - 2 * kMargin) * (v - lo) / (hi - lo);
    };
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << kSvgW << "' height='" << kSvgH
        << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
    out << "<line x1='" << sx(lo) << "' y1='" << sy(fit.slope * lo + fit.intercept) << "' x2='"
        << sx(hi) << "' y2='" << sy(fit.slope * hi + fit.intercept)
        << "' stroke='red' stroke-width='1.5'/>\n";
    for (const auto& [x, y] : fit.pairs) {
        out << "<circle cx='" << sx(x) << "' cy='" << sy(y) << "' r='3' fill='steelblue'/>\n";
    }
    out << "<text x='" << kMargin << "' y='20' font-size='12'>pred = " << fit.slope
        << " * true + " << fit.intercept << "  (R2 = " << fit.r2 << ")</text>\n</svg>\n";
}

}  // namespace flowcast
