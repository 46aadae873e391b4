#pragma once

#include <map>
#include <string>

#include "flowcast/tensor.hpp"

namespace flowcast {

/// Named collection of learnable tensors. Paths are unique and iteration is
/// lexicographic, so walking the store is deterministic.
class ParamStore {
  public:
    Tensor& add(const std::string& path, Tensor tensor);
    Tensor& get(const std::string& path);
    const Tensor& get(const std::string& path) const;
    bool contains(const std::string& path) const;

    std::map<std::string, Tensor>& entries() { return entries_; }
    const std::map<std::string, Tensor>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }

    int64_t total_parameters() const;
    void zero_grad();

    /// Writes manifest.json (path -> shape/dtype/byte offset) and params.bin
    /// (little-endian IEEE-754 doubles). Round-trips bit-exactly.
    void save(const std::string& dir) const;
    static ParamStore load(const std::string& dir);

  private:
    std::map<std::string, Tensor> entries_;
};

}  // namespace flowcast
