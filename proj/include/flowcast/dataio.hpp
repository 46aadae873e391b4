#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "flowcast/tensor.hpp"

namespace flowcast {

struct CivilTime {
    int year = 1970;
    int month = 1;
    int day = 1;
    int hour = 0;
    int minute = 0;
    int second = 0;

    bool operator==(const CivilTime&) const = default;
};

CivilTime parse_iso8601(const std::string& text);
std::string format_iso8601(const CivilTime& t);
// Days since 1970-01-01 (may be negative).
int64_t days_from_civil(int year, int month, int day);
CivilTime add_minutes(const CivilTime& t, int64_t minutes);
// 0 = Monday ... 6 = Sunday.
int day_of_week(const CivilTime& t);

using Edge = std::pair<int64_t, int64_t>;

/// Physical road connectivity after symmetrization and self-loop insertion.
struct GraphTopology {
    int64_t num_nodes = 0;
    std::vector<Edge> edges;  // sorted, unique, (u,v) implies (v,u), all (i,i) present

    static GraphTopology from_physical(int64_t num_nodes, const std::vector<Edge>& physical);
    bool has_edge(int64_t u, int64_t v) const;
};

struct TrafficDataset {
    std::vector<double> flow;  // [t_total x num_nodes], 0.0 marks a missing reading
    int64_t t_total = 0;
    int64_t num_nodes = 0;
    std::vector<int32_t> tod_index;  // per row, in [0, steps_per_day)
    std::vector<int32_t> dow_index;  // per row, in [0, 7)
    GraphTopology topology;
    std::vector<Edge> physical_edges;  // as stored on disk (one per link)
    int64_t interval_minutes = 5;
    CivilTime start;

    int64_t steps_per_day() const { return 1440 / interval_minutes; }
    double flow_at(int64_t t, int64_t n) const { return flow[t * num_nodes + n]; }
};

/// Mean/std of the training-split flow, zeros excluded.
struct NormStats {
    double mean = 0.0;
    double std = 1.0;
};

struct Range {
    int64_t begin = 0;
    int64_t end = 0;
    int64_t length() const { return end - begin; }
};

struct SplitRanges {
    Range train, val, test;
};

struct SplitRatios {
    double train = 7.0;
    double val = 1.0;
    double test = 2.0;
};

struct WindowSample {
    Tensor x;                     // [T, N, 3]: normalized flow, tod_index, dow_index
    Tensor y;                     // [N, T'] raw-scale targets
    std::vector<uint8_t> y_mask;  // [N x T'], true where target != 0
    int64_t anchor = 0;           // dataset row of the first input step
};

TrafficDataset load_dataset(const std::string& dir);
void save_dataset(const TrafficDataset& dataset, const std::string& dir);

/// Chronological contiguous split; remainder rows go to the test range.
SplitRanges split(int64_t t_total, double train_ratio, double val_ratio, double test_ratio);
SplitRanges split(int64_t t_total, const SplitRatios& ratios);

NormStats compute_norm_stats(const TrafficDataset& dataset, const Range& range);

std::vector<WindowSample> make_windows(const TrafficDataset& dataset, const Range& range,
                                       int64_t t_in, int64_t t_out, const NormStats& stats);

struct SynthOptions {
    int64_t interval_minutes = 5;
    double dropout_fraction = 0.02;
    double noise_std = 2.5;
    // Congestion pulses diffuse along edges with a per-hop delay and scale
    // multiplicatively with the current traffic level; this is what gives
    // the graph and the scan axes their predictive value.
    double pulses_per_node_per_day = 1.5;
    double pulse_frac_lo = 0.5;   // pulse amplitude as a fraction of level
    double pulse_frac_hi = 1.3;
    int64_t pulse_duration = 20;  // steps
    int64_t hop_delay = 7;        // steps per hop
    int64_t max_hops = 3;
    double hop_decay = 0.7;
    double weekend_factor = 0.72;
    // Gridlock: when the smoothed network-wide congestion crosses a
    // threshold (set at a quantile of its own distribution), flows drop.
    double gridlock_drop = 0.45;
    double gridlock_quantile = 0.7;
    double gridlock_width = 0.08;
    int64_t gridlock_smooth = 8;  // EWMA steps
};

TrafficDataset synth_dataset(int64_t num_nodes, int64_t days, uint64_t seed,
                             const SynthOptions& options = {});

}  // namespace flowcast
