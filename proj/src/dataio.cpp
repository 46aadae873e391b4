#include "flowcast/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "flowcast/rng.hpp"

namespace flowcast {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// calendar helpers
// ---------------------------------------------------------------------------

int64_t days_from_civil(int y, int m, int d) {
    // Howard Hinnant's civil-days algorithm.
    y -= m <= 2;
    const int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<int64_t>(doe) - 719468;
}

namespace {

void civil_from_days(int64_t z, int* year, int* month, int* day) {
    z += 719468;
    const int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const int64_t y = static_cast<int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    *day = static_cast<int>(doy - (153 * mp + 2) / 5 + 1);
    *month = static_cast<int>(mp + (mp < 10 ? 3 : -9));
    *year = static_cast<int>(y + (*month <= 2));
}

int parse_int_field(const std::string& text, size_t pos, size_t len, const std::string& what) {
    int value = 0;
    auto [ptr, ec] = std::from_chars(text.data() + pos, text.data() + pos + len, value);
    if (ec != std::errc() || ptr != text.data() + pos + len) {
        throw IoError("bad " + what + " in timestamp '" + text + "'");
    }
    return value;
}

}  // namespace

CivilTime parse_iso8601(const std::string& text) {
    // YYYY-MM-DDTHH:MM:SS with an optional trailing 'Z'.
    std::string s = text;
    if (!s.empty() && (s.back() == 'Z' || s.back() == 'z')) s.pop_back();
    if (s.size() != 19 || s[4] != '-' || s[7] != '-' || (s[10] != 'T' && s[10] != ' ') ||
        s[13] != ':' || s[16] != ':') {
        throw IoError("timestamp '" + text + "' is not ISO-8601 (YYYY-MM-DDTHH:MM:SS)");
    }
    CivilTime t;
    t.year = parse_int_field(s, 0, 4, "year");
    t.month = parse_int_field(s, 5, 2, "month");
    t.day = parse_int_field(s, 8, 2, "day");
    t.hour = parse_int_field(s, 11, 2, "hour");
    t.minute = parse_int_field(s, 14, 2, "minute");
    t.second = parse_int_field(s, 17, 2, "second");
    if (t.month < 1 || t.month > 12 || t.day < 1 || t.day > 31 || t.hour > 23 || t.minute > 59 ||
        t.second > 59) {
        throw IoError("timestamp '" + text + "' has out-of-range fields");
    }
    return t;
}

std::string format_iso8601(const CivilTime& t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02d", t.year, t.month, t.day, t.hour,
                  t.minute, t.second);
    return buf;
}

CivilTime add_minutes(const CivilTime& t, int64_t minutes) {
    int64_t total = days_from_civil(t.year, t.month, t.day) * 1440 + t.hour * 60 + t.minute;
    total += minutes;
    int64_t days = total >= 0 ? total / 1440 : (total - 1439) / 1440;
    int64_t mod = total - days * 1440;
    CivilTime out;
    civil_from_days(days, &out.year, &out.month, &out.day);
    out.hour = static_cast<int>(mod / 60);
    out.minute = static_cast<int>(mod % 60);
    out.second = t.second;
    return out;
}

int day_of_week(const CivilTime& t) {
    // days_from_civil(1970-01-01) == 0, a Thursday; shift so Monday == 0.
    const int64_t d = days_from_civil(t.year, t.month, t.day);
    return static_cast<int>(((d % 7) + 7 + 3) % 7);
}

// ---------------------------------------------------------------------------
// topology
// ---------------------------------------------------------------------------

GraphTopology GraphTopology::from_physical(int64_t num_nodes, const std::vector<Edge>& physical) {
    if (num_nodes <= 0) throw ValueError("topology: num_nodes must be positive");
    std::set<Edge> set;
    for (const auto& [u, v] : physical) {
        if (u < 0 || u >= num_nodes || v < 0 || v >= num_nodes) {
            throw IoError("edge (" + std::to_string(u) + ", " + std::to_string(v) +
                          ") out of range for " + std::to_string(num_nodes) + " nodes");
        }
        set.insert({u, v});
        set.insert({v, u});
    }
    for (int64_t i = 0; i < num_nodes; ++i) set.insert({i, i});
    GraphTopology topo;
    topo.num_nodes = num_nodes;
    topo.edges.assign(set.begin(), set.end());
    return topo;
}

bool GraphTopology::has_edge(int64_t u, int64_t v) const {
    return std::binary_search(edges.begin(), edges.end(), Edge{u, v});
}

// ---------------------------------------------------------------------------
// directory format
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    return fields;
}

double parse_double(const std::string& text, const std::string& where) {
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
        throw IoError("cannot parse number '" + text + "' in " + where);
    }
    return value;
}

int64_t parse_index(const std::string& text, const std::string& where) {
    int64_t value = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
        throw IoError("cannot parse index '" + text + "' in " + where);
    }
    return value;
}

std::string format_double(double value) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    (void)ec;
    return std::string(buf, ptr);
}

}  // namespace

TrafficDataset load_dataset(const std::string& dir) {
    const fs::path root(dir);
    for (const char* name : {"flow.csv", "edges.csv", "meta.json"}) {
        if (!fs::exists(root / name)) {
            throw IoError("dataset directory " + dir + " is missing " + name);
        }
    }

    TrafficDataset ds;

    {
        std::ifstream meta_in(root / "meta.json");
        json meta;
        try {
            meta_in >> meta;
        } catch (const json::exception& e) {
            throw IoError(std::string("bad meta.json: ") + e.what());
        }
        ds.interval_minutes = meta.at("interval_minutes").get<int64_t>();
        ds.num_nodes = meta.at("num_nodes").get<int64_t>();
        ds.start = parse_iso8601(meta.at("start").get<std::string>());
        if (ds.interval_minutes <= 0 || 1440 % ds.interval_minutes != 0) {
            throw IoError("interval_minutes " + std::to_string(ds.interval_minutes) +
                          " does not divide a day");
        }
        if (ds.num_nodes < 1) throw IoError("meta.json: num_nodes must be >= 1");
        if ((ds.start.hour * 60 + ds.start.minute) % ds.interval_minutes != 0) {
            throw IoError("start timestamp is not aligned to the sampling interval");
        }
    }

    {
        std::ifstream in(root / "flow.csv");
        std::string line;
        if (!std::getline(in, line)) throw IoError("flow.csv is empty");
        const auto header = split_csv_line(line);
        if (static_cast<int64_t>(header.size()) != ds.num_nodes + 1 || header[0] != "timestamp") {
            throw IoError("flow.csv header does not match num_nodes=" +
                          std::to_string(ds.num_nodes));
        }
        int64_t line_no = 1;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            const auto fields = split_csv_line(line);
            if (static_cast<int64_t>(fields.size()) != ds.num_nodes + 1) {
                throw IoError("flow.csv line " + std::to_string(line_no) + " has " +
                              std::to_string(fields.size() - 1) + " readings, expected " +
                              std::to_string(ds.num_nodes));
            }
            for (int64_t n = 0; n < ds.num_nodes; ++n) {
                const double v = parse_double(fields[n + 1],
                                              "flow.csv line " + std::to_string(line_no));
                if (!std::isfinite(v) || v < 0.0) {
                    throw IoError("flow.csv line " + std::to_string(line_no) +
                                  ": readings must be finite and >= 0");
                }
                ds.flow.push_back(v);
            }
            ++ds.t_total;
        }
        if (ds.t_total == 0) throw IoError("flow.csv holds no data rows");
    }

    {
        std::ifstream in(root / "edges.csv");
        std::string line;
        if (!std::getline(in, line)) throw IoError("edges.csv is empty");
        if (split_csv_line(line) != std::vector<std::string>{"src", "dst"}) {
            throw IoError("edges.csv header must be 'src,dst'");
        }
        int64_t line_no = 1;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            const auto fields = split_csv_line(line);
            if (fields.size() != 2) {
                throw IoError("edges.csv line " + std::to_string(line_no) + " is not 'src,dst'");
            }
            const std::string where = "edges.csv line " + std::to_string(line_no);
            ds.physical_edges.push_back({parse_index(fields[0], where),
                                         parse_index(fields[1], where)});
        }
    }

    ds.topology = GraphTopology::from_physical(ds.num_nodes, ds.physical_edges);

    const int64_t spd = ds.steps_per_day();
    ds.tod_index.resize(ds.t_total);
    ds.dow_index.resize(ds.t_total);
    for (int64_t t = 0; t < ds.t_total; ++t) {
        const CivilTime row_time = add_minutes(ds.start, t * ds.interval_minutes);
        ds.tod_index[t] =
            static_cast<int32_t>((row_time.hour * 60 + row_time.minute) / ds.interval_minutes);
        ds.dow_index[t] = static_cast<int32_t>(day_of_week(row_time));
        (void)spd;
    }
    return ds;
}

void save_dataset(const TrafficDataset& dataset, const std::string& dir) {
    fs::create_directories(dir);
    const fs::path root(dir);

    {
        json meta;
        meta["interval_minutes"] = dataset.interval_minutes;
        meta["num_nodes"] = dataset.num_nodes;
        meta["start"] = format_iso8601(dataset.start);
        std::ofstream out(root / "meta.json");
        if (!out) throw IoError("cannot write meta.json in " + dir);
        out << meta.dump(2) << "\n";
    }

    {
        std::ofstream out(root / "flow.csv");
        if (!out) throw IoError("cannot write flow.csv in " + dir);
        out << "timestamp";
        for (int64_t n = 0; n < dataset.num_nodes; ++n) out << ",node_" << n;
        out << "\n";
        for (int64_t t = 0; t < dataset.t_total; ++t) {
            out << format_iso8601(add_minutes(dataset.start, t * dataset.interval_minutes));
            for (int64_t n = 0; n < dataset.num_nodes; ++n) {
                out << ',' << format_double(dataset.flow_at(t, n));
            }
            out << "\n";
        }
    }

    {
        std::ofstream out(root / "edges.csv");
        if (!out) throw IoError("cannot write edges.csv in " + dir);
        out << "src,dst\n";
        for (const auto& [u, v] : dataset.physical_edges) out << u << ',' << v << "\n";
    }
}

// ---------------------------------------------------------------------------
// splits, normalization, windows
// ---------------------------------------------------------------------------

SplitRanges split(int64_t t_total, double train_ratio, double val_ratio, double test_ratio) {
    if (!(train_ratio > 0.0) || !(val_ratio > 0.0) || !(test_ratio > 0.0)) {
        throw ConfigError("split ratios must all be positive (train/val/test each required)");
    }
    const double total = train_ratio + val_ratio + test_ratio;
    const int64_t train_len = static_cast<int64_t>(std::floor(t_total * train_ratio / total));
    const int64_t val_len = static_cast<int64_t>(std::floor(t_total * val_ratio / total));
    if (train_len < 1 || val_len < 1 || t_total - train_len - val_len < 1) {
        throw ConfigError("split of " + std::to_string(t_total) + " rows leaves an empty range");
    }
    SplitRanges out;
    out.train = {0, train_len};
    out.val = {train_len, train_len + val_len};
    out.test = {train_len + val_len, t_total};  // remainder rows land here
    return out;
}

SplitRanges split(int64_t t_total, const SplitRatios& ratios) {
    return split(t_total, ratios.train, ratios.val, ratios.test);
}

NormStats compute_norm_stats(const TrafficDataset& dataset, const Range& range) {
    if (range.begin < 0 || range.end > dataset.t_total || range.length() <= 0) {
        throw ConfigError("norm stats range out of bounds");
    }
    double sum = 0.0;
    int64_t count = 0;
    for (int64_t t = range.begin; t < range.end; ++t) {
        for (int64_t n = 0; n < dataset.num_nodes; ++n) {
            const double v = dataset.flow_at(t, n);
            if (v != 0.0) {
                sum += v;
                ++count;
            }
        }
    }
    if (count == 0) throw ConfigError("training range holds no valid (nonzero) readings");
    const double mean = sum / static_cast<double>(count);
    double ss = 0.0;
    for (int64_t t = range.begin; t < range.end; ++t) {
        for (int64_t n = 0; n < dataset.num_nodes; ++n) {
            const double v = dataset.flow_at(t, n);
            if (v != 0.0) ss += (v - mean) * (v - mean);
        }
    }
    const double std = std::sqrt(ss / static_cast<double>(count));
    if (!(std > 0.0)) throw ConfigError("training flow has zero variance; cannot normalize");
    return {mean, std};
}

std::vector<WindowSample> make_windows(const TrafficDataset& dataset, const Range& range,
                                       int64_t t_in, int64_t t_out, const NormStats& stats) {
    if (range.begin < 0 || range.end > dataset.t_total) {
        throw ConfigError("window range out of bounds");
    }
    const int64_t count = range.length() - t_in - t_out + 1;
    if (count < 1) {
        throw ConfigError("range of " + std::to_string(range.length()) +
                          " rows is too short for windows of " + std::to_string(t_in) + "+" +
                          std::to_string(t_out));
    }
    const int64_t n_nodes = dataset.num_nodes;
    std::vector<WindowSample> out;
    out.reserve(count);
    for (int64_t anchor = range.begin; anchor + t_in + t_out <= range.end; ++anchor) {
        std::vector<double> x(static_cast<size_t>(t_in * n_nodes * 3));
        for (int64_t t = 0; t < t_in; ++t) {
            const int64_t row = anchor + t;
            for (int64_t n = 0; n < n_nodes; ++n) {
                double* cell = x.data() + (t * n_nodes + n) * 3;
                cell[0] = (dataset.flow_at(row, n) - stats.mean) / stats.std;
                cell[1] = static_cast<double>(dataset.tod_index[row]);
                cell[2] = static_cast<double>(dataset.dow_index[row]);
            }
        }
        std::vector<double> y(static_cast<size_t>(n_nodes * t_out));
        std::vector<uint8_t> mask(static_cast<size_t>(n_nodes * t_out));
        for (int64_t n = 0; n < n_nodes; ++n) {
            for (int64_t j = 0; j < t_out; ++j) {
                const double v = dataset.flow_at(anchor + t_in + j, n);
                y[n * t_out + j] = v;
                mask[n * t_out + j] = v != 0.0 ? 1 : 0;
            }
        }
        WindowSample sample;
        sample.x = Tensor::from_data({t_in, n_nodes, 3}, std::move(x));
        sample.y = Tensor::from_data({n_nodes, t_out}, std::move(y));
        sample.y_mask = std::move(mask);
        sample.anchor = anchor;
        out.push_back(std::move(sample));
    }
    return out;
}

// ---------------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------------

TrafficDataset synth_dataset(int64_t num_nodes, int64_t days, uint64_t seed,
                             const SynthOptions& options) {
    if (num_nodes < 2) throw ValueError("synth_dataset: need at least 2 nodes");
    if (days < 1) throw ValueError("synth_dataset: need at least 1 day");
    if (1440 % options.interval_minutes != 0) {
        throw ValueError("synth_dataset: interval must divide a day");
    }

    Rng rng(seed);
    TrafficDataset ds;
    ds.num_nodes = num_nodes;
    ds.interval_minutes = options.interval_minutes;
    ds.start = CivilTime{2024, 1, 1, 0, 0, 0};  // a Monday
    const int64_t spd = ds.steps_per_day();
    ds.t_total = days * spd;

    // Ring plus a few chords.
    for (int64_t i = 0; i < num_nodes; ++i) {
        ds.physical_edges.push_back({i, (i + 1) % num_nodes});
    }
    const int64_t n_chords = std::max<int64_t>(1, num_nodes / 4);
    std::set<Edge> seen(ds.physical_edges.begin(), ds.physical_edges.end());
    for (int64_t c = 0; c < n_chords; ++c) {
        for (int attempt = 0; attempt < 32; ++attempt) {
            const int64_t u = static_cast<int64_t>(rng.below(num_nodes));
            const int64_t v = static_cast<int64_t>(rng.below(num_nodes));
            if (u == v) continue;
            Edge e{std::min(u, v), std::max(u, v)};
            if (seen.count(e) || seen.count({e.second, e.first})) continue;
            seen.insert(e);
            ds.physical_edges.push_back(e);
            break;
        }
    }
    ds.topology = GraphTopology::from_physical(num_nodes, ds.physical_edges);

    // Hop distances for pulse diffusion (adjacency without self-loops).
    std::vector<std::vector<int64_t>> adjacency(num_nodes);
    for (const auto& [u, v] : ds.topology.edges) {
        if (u != v) adjacency[u].push_back(v);
    }
    auto hop_distances = [&](int64_t origin) {
        std::vector<int64_t> dist(num_nodes, -1);
        std::deque<int64_t> queue{origin};
        dist[origin] = 0;
        while (!queue.empty()) {
            const int64_t u = queue.front();
            queue.pop_front();
            if (dist[u] >= options.max_hops) continue;
            for (int64_t v : adjacency[u]) {
                if (dist[v] < 0) {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        return dist;
    };

    // Per-node base level and phase.
    std::vector<double> base(num_nodes), phase(num_nodes);
    for (int64_t n = 0; n < num_nodes; ++n) {
        base[n] = rng.uniform(90.0, 130.0);
        phase[n] = rng.uniform(-0.35, 0.35);
    }

    ds.flow.assign(static_cast<size_t>(ds.t_total * num_nodes), 0.0);
    ds.tod_index.resize(ds.t_total);
    ds.dow_index.resize(ds.t_total);
    for (int64_t t = 0; t < ds.t_total; ++t) {
        const CivilTime row_time = add_minutes(ds.start, t * ds.interval_minutes);
        ds.tod_index[t] = static_cast<int32_t>(t % spd);
        ds.dow_index[t] = static_cast<int32_t>(day_of_week(row_time));
        const int32_t dow = ds.dow_index[t];
        const double weekend = (dow >= 5) ? options.weekend_factor : 1.0;
        const double frac = static_cast<double>(t % spd) / static_cast<double>(spd);
        for (int64_t n = 0; n < num_nodes; ++n) {
            const double daily = 0.55 + 0.45 * std::sin(2.0 * M_PI * (frac - 0.3) + phase[n]);
            ds.flow[t * num_nodes + n] = base[n] * daily * weekend;
        }
    }

    // Congestion factor per (step, node): each event surges at its origin
    // and reaches neighbors attenuated and delayed per hop. The factor
    // multiplies the current level, so congestion scales with traffic.
    std::vector<double> congestion(static_cast<size_t>(ds.t_total * num_nodes), 0.0);
    const int64_t n_events = static_cast<int64_t>(
        std::llround(options.pulses_per_node_per_day * static_cast<double>(num_nodes * days)));
    for (int64_t e = 0; e < n_events; ++e) {
        const int64_t origin = static_cast<int64_t>(rng.below(num_nodes));
        const int64_t t0 = static_cast<int64_t>(rng.below(ds.t_total));
        const double amp = rng.uniform(options.pulse_frac_lo, options.pulse_frac_hi);
        const auto dist = hop_distances(origin);
        for (int64_t n = 0; n < num_nodes; ++n) {
            if (dist[n] < 0) continue;
            const double node_amp = amp * std::pow(options.hop_decay, dist[n]);
            const int64_t start = t0 + dist[n] * options.hop_delay;
            for (int64_t tau = 0; tau < options.pulse_duration; ++tau) {
                const int64_t t = start + tau;
                if (t < 0 || t >= ds.t_total) continue;
                const double envelope =
                    0.5 * (1.0 - std::cos(2.0 * M_PI * static_cast<double>(tau) /
                                          static_cast<double>(options.pulse_duration)));
                congestion[t * num_nodes + n] += node_amp * envelope;
            }
        }
    }

    // Network-wide gridlock: smoothed mean congestion past a quantile
    // threshold throttles every node. The regime is readable either from a
    // node's own recent history or by aggregating across the network.
    std::vector<double> gridlock(ds.t_total, 1.0);
    if (options.gridlock_drop > 0.0) {
        std::vector<double> level(ds.t_total, 0.0);
        const double alpha = 1.0 / static_cast<double>(std::max<int64_t>(1, options.gridlock_smooth));
        double ewma = 0.0;
        for (int64_t t = 0; t < ds.t_total; ++t) {
            double mean_c = 0.0;
            for (int64_t n = 0; n < num_nodes; ++n) mean_c += congestion[t * num_nodes + n];
            mean_c /= static_cast<double>(num_nodes);
            ewma += alpha * (mean_c - ewma);
            level[t] = ewma;
        }
        std::vector<double> sorted = level;
        std::sort(sorted.begin(), sorted.end());
        const double threshold =
            sorted[static_cast<size_t>(options.gridlock_quantile * (sorted.size() - 1))];
        for (int64_t t = 0; t < ds.t_total; ++t) {
            const double z = (level[t] - threshold) / options.gridlock_width;
            const double s = 1.0 / (1.0 + std::exp(-z));
            gridlock[t] = 1.0 - options.gridlock_drop * s;
        }
    }

    for (int64_t t = 0; t < ds.t_total; ++t) {
        for (int64_t n = 0; n < num_nodes; ++n) {
            double v = ds.flow[t * num_nodes + n] * (1.0 + congestion[t * num_nodes + n]) *
                           gridlock[t] +
                       rng.normal(0.0, options.noise_std);
            ds.flow[t * num_nodes + n] = std::max(v, 1.0);  // keep 0.0 reserved for missing
        }
    }

    if (options.dropout_fraction > 0.0) {
        for (auto& v : ds.flow) {
            if (rng.uniform() < options.dropout_fraction) v = 0.0;
        }
    }
    return ds;
}

}  // namespace flowcast
