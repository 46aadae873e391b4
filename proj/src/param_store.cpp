#include "flowcast/param_store.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace flowcast {

namespace fs = std::filesystem;
using nlohmann::json;

Tensor& ParamStore::add(const std::string& path, Tensor tensor) {
    if (entries_.count(path)) throw ValueError("ParamStore: duplicate path " + path);
    tensor.set_requires_grad(true);
    auto [it, ok] = entries_.emplace(path, std::move(tensor));
    (void)ok;
    return it->second;
}

Tensor& ParamStore::get(const std::string& path) {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw ValueError("ParamStore: unknown path " + path);
    return it->second;
}

const Tensor& ParamStore::get(const std::string& path) const {
    auto it = entries_.find(path);
    if (it == entries_.end()) throw ValueError("ParamStore: unknown path " + path);
    return it->second;
}

bool ParamStore::contains(const std::string& path) const { return entries_.count(path) > 0; }

int64_t ParamStore::total_parameters() const {
    int64_t n = 0;
    for (const auto& [path, t] : entries_) n += t.numel();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& [path, t] : entries_) t.zero_grad();
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "blob format assumes a little-endian host");

void write_file(const fs::path& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("short write to " + path.string());
}

}  // namespace

void ParamStore::save(const std::string& dir) const {
    fs::create_directories(dir);
    json manifest;
    manifest["format"] = "flowcast-params-v1";
    json items = json::object();
    int64_t offset = 0;
    std::string blob;
    for (const auto& [path, t] : entries_) {
        json item;
        item["shape"] = t.shape();
        item["dtype"] = "f64";
        item["offset"] = offset;
        items[path] = item;
        const size_t bytes = t.data().size() * sizeof(double);
        const size_t old = blob.size();
        blob.resize(old + bytes);
        std::memcpy(blob.data() + old, t.data().data(), bytes);
        offset += static_cast<int64_t>(bytes);
    }
    manifest["params"] = items;
    manifest["total_bytes"] = offset;
    write_file(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");
    write_file(fs::path(dir) / "params.bin", blob);
}

ParamStore ParamStore::load(const std::string& dir) {
    const fs::path manifest_path = fs::path(dir) / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open " + manifest_path.string());
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        throw IoError("bad manifest " + manifest_path.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != "flowcast-params-v1") {
        throw IoError("unrecognized parameter manifest format in " + manifest_path.string());
    }

    const fs::path blob_path = fs::path(dir) / "params.bin";
    std::ifstream blob_in(blob_path, std::ios::binary);
    if (!blob_in) throw IoError("cannot open " + blob_path.string());
    std::string blob((std::istreambuf_iterator<char>(blob_in)), std::istreambuf_iterator<char>());

    ParamStore store;
    for (const auto& [path, item] : manifest.at("params").items()) {
        if (item.value("dtype", "") != "f64") {
            throw IoError("unsupported dtype for " + path);
        }
        Shape shape = item.at("shape").get<Shape>();
        const int64_t offset = item.at("offset").get<int64_t>();
        const int64_t count = shape_numel(shape);
        const size_t bytes = static_cast<size_t>(count) * sizeof(double);
        if (offset < 0 || static_cast<size_t>(offset) + bytes > blob.size()) {
            throw IoError("blob range out of bounds for " + path);
        }
        std::vector<double> values(static_cast<size_t>(count));
        std::memcpy(values.data(), blob.data() + offset, bytes);
        store.add(path, Tensor::from_data(std::move(shape), std::move(values)));
    }
    return store;
}

}  // namespace flowcast
