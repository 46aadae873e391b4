#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "flowcast/dataio.hpp"

using namespace flowcast;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("flowcast_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
}

void write_toy_dataset(const fs::path& dir, int nodes = 2, int rows = 4) {
    std::string flow = "timestamp";
    for (int n = 0; n < nodes; ++n) flow += ",node_" + std::to_string(n);
    flow += "\n";
    for (int t = 0; t < rows; ++t) {
        flow += "2024-01-01T00:" + std::string(t < 2 ? "0" : "") + std::to_string(t * 5) + ":00";
        for (int n = 0; n < nodes; ++n) flow += "," + std::to_string(10 * (n + 1) + t);
        flow += "\n";
    }
    write_file(dir / "flow.csv", flow);
    write_file(dir / "edges.csv", "src,dst\n0,1\n");
    write_file(dir / "meta.json",
               "{\"interval_minutes\": 5, \"num_nodes\": " + std::to_string(nodes) +
                   ", \"start\": \"2024-01-01T00:00:00\"}");
}

}  // namespace

TEST_CASE("load_dataset on a toy directory") {
    auto dir = temp_dir("load_toy");
    write_toy_dataset(dir);
    TrafficDataset ds = load_dataset(dir.string());
    CHECK(ds.num_nodes == 2);
    CHECK(ds.t_total == 4);
    CHECK(ds.steps_per_day() == 288);
    CHECK(ds.flow_at(0, 0) == 10.0);
    CHECK(ds.flow_at(3, 1) == 23.0);
    CHECK(ds.tod_index[0] == 0);
    CHECK(ds.tod_index[3] == 3);
    // 2024-01-01 is a Monday.
    CHECK(ds.dow_index[0] == 0);
}

TEST_CASE("edge symmetrization and self loops") {
    auto dir = temp_dir("load_edges");
    write_toy_dataset(dir);
    TrafficDataset ds = load_dataset(dir.string());
    std::vector<Edge> expected{{0, 0}, {0, 1}, {1, 0}, {1, 1}};
    CHECK(ds.topology.edges == expected);
}

TEST_CASE("load errors are distinct and name the problem") {
    auto dir = temp_dir("load_errors");
    write_toy_dataset(dir);

    SUBCASE("missing file") {
        fs::remove(dir / "edges.csv");
        CHECK_THROWS_WITH_AS(load_dataset(dir.string()), doctest::Contains("edges.csv"), IoError);
    }
    SUBCASE("ragged row") {
        write_file(dir / "flow.csv",
                   "timestamp,node_0,node_1\n2024-01-01T00:00:00,1.0\n");
        CHECK_THROWS_WITH_AS(load_dataset(dir.string()), doctest::Contains("line 2"), IoError);
    }
    SUBCASE("edge index out of range") {
        write_file(dir / "edges.csv", "src,dst\n0,9\n");
        CHECK_THROWS_WITH_AS(load_dataset(dir.string()), doctest::Contains("out of range"),
                             IoError);
    }
    SUBCASE("non-divisible interval") {
        write_file(dir / "meta.json",
                   "{\"interval_minutes\": 7, \"num_nodes\": 2, \"start\": "
                   "\"2024-01-01T00:00:00\"}");
        CHECK_THROWS_WITH_AS(load_dataset(dir.string()), doctest::Contains("divide"), IoError);
    }
}

TEST_CASE("a 207-sensor directory loads with N=207") {
    auto dir = temp_dir("load_207");
    write_toy_dataset(dir, 207, 3);
    TrafficDataset ds = load_dataset(dir.string());
    CHECK(ds.num_nodes == 207);
}

TEST_CASE("split arithmetic") {
    SplitRanges r = split(100, 7, 1, 2);
    CHECK(r.train.begin == 0);
    CHECK(r.train.end == 70);
    CHECK(r.val.begin == 70);
    CHECK(r.val.end == 80);
    CHECK(r.test.begin == 80);
    CHECK(r.test.end == 100);

    SplitRanges r2 = split(100, 6, 2, 2);
    CHECK(r2.train.end == 60);
    CHECK(r2.val.end == 80);
    CHECK(r2.test.end == 100);

    CHECK_THROWS_AS(split(100, 1, 0, 0), ConfigError);

    // Remainder rows go to the test range.
    SplitRanges r3 = split(101, 7, 1, 2);
    CHECK(r3.train.end == 70);
    CHECK(r3.val.end == 80);
    CHECK(r3.test.end == 101);
}

TEST_CASE("make_windows counts, normalization and alignment") {
    TrafficDataset ds = synth_dataset(3, 1, 42);

    SUBCASE("window count formula") {
        NormStats stats{5.0, 5.0};
        auto windows = make_windows(ds, {0, 30}, 12, 12, stats);
        CHECK(windows.size() == 7);
        auto one = make_windows(ds, {0, 24}, 12, 12, stats);
        CHECK(one.size() == 1);
        CHECK_THROWS_AS(make_windows(ds, {0, 23}, 12, 12, stats), ConfigError);
    }

    SUBCASE("z-score uses the provided stats") {
        TrafficDataset toy = ds;
        toy.t_total = 24;
        toy.flow.assign(static_cast<size_t>(24 * 3), 0.0);
        for (int64_t t = 0; t < 24; ++t) {
            for (int64_t n = 0; n < 3; ++n) toy.flow[t * 3 + n] = (t % 2 == 0) ? 0.0 : 10.0;
        }
        toy.tod_index.assign(24, 0);
        toy.dow_index.assign(24, 0);
        for (int64_t t = 0; t < 24; ++t) toy.tod_index[t] = static_cast<int32_t>(t);
        NormStats stats{5.0, 5.0};
        auto windows = make_windows(toy, {0, 24}, 12, 12, stats);
        // channel 0 of x alternates (0-5)/5 = -1 and (10-5)/5 = +1
        CHECK(windows[0].x.at(0) == doctest::Approx(-1.0));        // t=0, node 0
        CHECK(windows[0].x.at(1 * 3 * 3) == doctest::Approx(1.0));  // t=1, node 0
    }

    SUBCASE("target alignment against direct indexing") {
        NormStats stats = compute_norm_stats(ds, {0, 200});
        auto windows = make_windows(ds, {10, 60}, 12, 12, stats);
        for (const auto& w : windows) {
            for (int64_t n = 0; n < ds.num_nodes; ++n) {
                for (int64_t j = 0; j < 12; ++j) {
                    CHECK(w.y.at(n * 12 + j) == ds.flow_at(w.anchor + 12 + j, n));
                    CHECK(w.y_mask[n * 12 + j] == (ds.flow_at(w.anchor + 12 + j, n) != 0.0));
                }
            }
        }
    }
}

TEST_CASE("norm stats exclude zeros and only depend on their range") {
    TrafficDataset ds = synth_dataset(4, 2, 9, [] {
        SynthOptions o;
        o.dropout_fraction = 0.1;
        return o;
    }());
    NormStats stats = compute_norm_stats(ds, {0, 300});
    CHECK(stats.std > 0.0);

    // Perturbing rows outside the range leaves the stats untouched.
    TrafficDataset tampered = ds;
    for (int64_t t = 300; t < tampered.t_total; ++t) {
        for (int64_t n = 0; n < tampered.num_nodes; ++n) tampered.flow[t * 4 + n] = 9999.0;
    }
    NormStats stats2 = compute_norm_stats(tampered, {0, 300});
    CHECK(stats.mean == stats2.mean);
    CHECK(stats.std == stats2.std);

    // Hand check on a tiny dataset with zeros.
    TrafficDataset toy;
    toy.num_nodes = 1;
    toy.t_total = 4;
    toy.flow = {0.0, 2.0, 0.0, 4.0};
    NormStats s = compute_norm_stats(toy, {0, 4});
    CHECK(s.mean == doctest::Approx(3.0));
    CHECK(s.std == doctest::Approx(1.0));
}

TEST_CASE("synthetic data determinism and dropout") {
    TrafficDataset a = synth_dataset(5, 2, 123);
    TrafficDataset b = synth_dataset(5, 2, 123);
    CHECK(a.flow == b.flow);
    CHECK(a.physical_edges == b.physical_edges);

    TrafficDataset c = synth_dataset(5, 2, 124);
    CHECK(a.flow != c.flow);

    SynthOptions no_dropout;
    no_dropout.dropout_fraction = 0.0;
    TrafficDataset d = synth_dataset(5, 2, 123, no_dropout);
    for (double v : d.flow) CHECK(v > 0.0);
}

TEST_CASE("synthetic series peak their autocorrelation at one day") {
    TrafficDataset ds = synth_dataset(6, 7, 31);
    const int64_t spd = ds.steps_per_day();
    for (int64_t n = 0; n < 2; ++n) {
        std::vector<double> series(ds.t_total);
        double mean = 0.0;
        for (int64_t t = 0; t < ds.t_total; ++t) {
            series[t] = ds.flow_at(t, n);
            mean += series[t];
        }
        mean /= static_cast<double>(ds.t_total);
        auto autocorr = [&](int64_t lag) {
            double acc = 0.0;
            for (int64_t t = 0; t + lag < ds.t_total; ++t) {
                acc += (series[t] - mean) * (series[t + lag] - mean);
            }
            return acc / static_cast<double>(ds.t_total - lag);
        };
        // Peak within a +-half-day neighborhood sits at the daily lag (a few
        // steps of slack for noise and congestion pulses).
        int64_t best_lag = spd / 2;
        double best = autocorr(best_lag);
        for (int64_t lag = spd / 2; lag <= spd + spd / 2; ++lag) {
            const double v = autocorr(lag);
            if (v > best) {
                best = v;
                best_lag = lag;
            }
        }
        CHECK(std::abs(best_lag - spd) <= spd / 36);
    }
}

TEST_CASE("dataset round-trips through the directory format bit-exactly") {
    TrafficDataset ds = synth_dataset(4, 1, 7);
    auto dir = temp_dir("roundtrip");
    save_dataset(ds, dir.string());
    TrafficDataset back = load_dataset(dir.string());
    CHECK(back.num_nodes == ds.num_nodes);
    CHECK(back.t_total == ds.t_total);
    REQUIRE(back.flow.size() == ds.flow.size());
    for (size_t i = 0; i < ds.flow.size(); ++i) {
        CHECK(back.flow[i] == ds.flow[i]);  // bit-exact through to_chars/from_chars
    }
    CHECK(back.physical_edges == ds.physical_edges);
    CHECK(back.topology.edges == ds.topology.edges);
    CHECK(back.tod_index == ds.tod_index);
    CHECK(back.dow_index == ds.dow_index);
    CHECK(back.start == ds.start);
}

TEST_CASE("synth precondition errors") {
    CHECK_THROWS_AS(synth_dataset(1, 1, 0), ValueError);
    CHECK_THROWS_AS(synth_dataset(5, 0, 0), ValueError);
}
